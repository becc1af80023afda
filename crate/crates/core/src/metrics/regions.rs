//! 8-connected components of binary masks.

use std::collections::VecDeque;

use crate::mask::PixelMask;

/// Pixels `(y, x)` of one component in raster order.
pub type Region = Vec<(usize, usize)>;
pub type RegionSet = Vec<Region>;

/// Components ordered by their first pixel in raster order.
pub fn connected_components(mask: &PixelMask) -> RegionSet {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for start in 0..h * w {
        if seen[start] || !mask.data()[start] {
            continue;
        }
        seen[start] = true;
        let mut region = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            region.push((y, x));
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if !seen[j] && mask.data()[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}
