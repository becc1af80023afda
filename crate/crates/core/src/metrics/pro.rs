//! Area under the per-region-overlap curve.

use crate::error::{Error, Result};
use crate::mask::{PixelMask, ValidityMask};
use crate::numerics::Scalar;
use crate::scoring::AnomalyMap;

use super::regions::connected_components;

/// Pooled pixels for the PRO sweep.
///
/// `weight` is `1 / (|region| · #regions)` for a region pixel and 0 for a
/// normal pixel, so summing the weights of the pixels above a threshold
/// gives the mean per-region overlap.
pub(crate) struct ProPixels {
    pub scores: Vec<f64>,
    pub normal: Vec<bool>,
    pub region: Vec<Option<usize>>,
    pub region_sizes: Vec<usize>,
}

/// Regions are the 8-connected components of `gt ∧ valid`; normal pixels
/// are `valid ∧ ¬gt`. Invalid pixels take no part.
pub(crate) fn collect<T: Scalar>(
    maps: &[AnomalyMap<T>],
    gt_masks: &[PixelMask],
    valid: &[ValidityMask],
) -> Result<ProPixels> {
    if maps.len() != gt_masks.len() || maps.len() != valid.len() {
        return Err(Error::invalid(format!(
            "{} maps, {} ground-truth masks and {} validity masks",
            maps.len(),
            gt_masks.len(),
            valid.len()
        )));
    }
    let mut out = ProPixels {
        scores: Vec::new(),
        normal: Vec::new(),
        region: Vec::new(),
        region_sizes: Vec::new(),
    };
    for ((m, gt), v) in maps.iter().zip(gt_masks).zip(valid) {
        let (h, w) = m.dims();
        gt.expect_dims(h, w, "ground-truth mask")?;
        v.expect_dims(h, w, "validity mask")?;
        let both: Vec<bool> = gt.data().iter().zip(v.data()).map(|(&g, &ok)| g && ok).collect();
        let mut label = vec![None; h * w];
        for comp in connected_components(&PixelMask::from_vec(h, w, both)?) {
            let id = out.region_sizes.len();
            out.region_sizes.push(comp.len());
            for (y, x) in comp {
                label[y * w + x] = Some(id);
            }
        }
        for i in 0..h * w {
            if !v.data()[i] {
                continue;
            }
            let s = m.data()[i].to_f64_lossy();
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("score {s}")));
            }
            out.scores.push(s);
            out.normal.push(!gt.data()[i]);
            out.region.push(label[i]);
        }
    }
    if out.region_sizes.is_empty() {
        return Err(Error::NoRegions);
    }
    if !out.normal.iter().any(|&n| n) {
        return Err(Error::SingleClass { missing: "normal" });
    }
    Ok(out)
}

pub(crate) fn check_limit(fpr_limit: f64) -> Result<()> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::invalid(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    Ok(())
}

/// Trapezoid area under `(fpr, pro)` from 0 to `limit`, interpolating the
/// segment that crosses `limit`, divided by `limit`. Points must be
/// nondecreasing in FPR and start at (0, 0).
pub(crate) fn integrate_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_lim) / 2.0;
            break;
        }
    }
    area / limit
}

/// Normalized AUPRO up to `fpr_limit`, sweeping every distinct score.
pub fn aupro<T: Scalar>(
    maps: &[AnomalyMap<T>],
    gt_masks: &[PixelMask],
    valid: &[ValidityMask],
    fpr_limit: f64,
) -> Result<f64> {
    check_limit(fpr_limit)?;
    let px = collect(maps, gt_masks, valid)?;
    let n_regions = px.region_sizes.len() as f64;
    let n_normal = px.normal.iter().filter(|&&n| n).count() as f64;

    let mut order: Vec<usize> = (0..px.scores.len()).collect();
    order.sort_by(|&a, &b| px.scores[b].total_cmp(&px.scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut false_pos = 0usize;
    let mut overlap = vec![0usize; px.region_sizes.len()];
    let mut i = 0;
    while i < order.len() {
        let t = px.scores[order[i]];
        while i < order.len() && px.scores[order[i]] == t {
            let k = order[i];
            if px.normal[k] {
                false_pos += 1;
            }
            if let Some(r) = px.region[k] {
                overlap[r] += 1;
            }
            i += 1;
        }
        let pro = overlap
            .iter()
            .zip(&px.region_sizes)
            .map(|(&o, &s)| o as f64 / s as f64)
            .sum::<f64>()
            / n_regions;
        points.push((false_pos as f64 / n_normal, pro));
    }
    Ok(integrate_to_limit(&points, fpr_limit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt() -> PixelMask {
        PixelMask::from_vec(2, 3, vec![true, true, false, false, false, false]).unwrap()
    }

    #[test]
    fn perfect_map_scores_one() {
        let m = AnomalyMap::new(2, 3, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let v = ValidityMask::filled(2, 3, true);
        for limit in [0.01, 0.3, 1.0] {
            assert_eq!(aupro(&[m.clone()], &[gt()], &[v.clone()], limit).unwrap(), 1.0);
        }
    }

    #[test]
    fn constant_map_is_triangle() {
        let m = AnomalyMap::new(2, 3, vec![0.5; 6]).unwrap();
        let v = ValidityMask::filled(2, 3, true);
        assert!((aupro(&[m.clone()], &[gt()], &[v.clone()], 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!((aupro(&[m], &[gt()], &[v], 1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let m = AnomalyMap::new(2, 3, vec![0.5; 6]).unwrap();
        let v = ValidityMask::filled(2, 3, true);
        assert!(matches!(
            aupro(&[m.clone()], &[PixelMask::filled(2, 3, false)], &[v.clone()], 0.3),
            Err(Error::NoRegions)
        ));
        assert!(aupro(&[m.clone()], &[gt()], &[v.clone()], 0.0).is_err());
        assert!(aupro(&[m], &[gt()], &[v], 1.5).is_err());
    }

    #[test]
    fn interpolates_at_limit() {
        // Points (0,0), (0.5,1), (1,1): at limit 0.25 the curve is y = 2x.
        let pts = [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)];
        assert!((integrate_to_limit(&pts, 0.25) - 0.25).abs() < 1e-15);
        assert!((integrate_to_limit(&pts, 1.0) - 0.75).abs() < 1e-15);
    }
}
