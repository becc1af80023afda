//! Brute-force reference implementations used to cross-check the fast
//! metrics.

use crate::error::Result;
use crate::mask::{PixelMask, ValidityMask};
use crate::numerics::Scalar;
use crate::scoring::AnomalyMap;

use super::pro::{check_limit, collect};
use super::roc::check_labels;

/// `(concordant + ½·tied) / (P·N)` by enumerating every positive/negative pair.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut acc = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            if si > sj {
                acc += 1.0;
            } else if si == sj {
                acc += 0.5;
            }
        }
    }
    Ok(acc / (pos as f64 * neg as f64))
}

/// Recomputes FPR and PRO from scratch at every distinct threshold.
pub fn aupro_exhaustive<T: Scalar>(
    maps: &[AnomalyMap<T>],
    gt_masks: &[PixelMask],
    valid: &[ValidityMask],
    fpr_limit: f64,
) -> Result<f64> {
    check_limit(fpr_limit)?;
    let px = collect(maps, gt_masks, valid)?;
    let mut thresholds = px.scores.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let n_normal = px.normal.iter().filter(|&&n| n).count() as f64;
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let fp = (0..px.scores.len()).filter(|&k| px.normal[k] && px.scores[k] >= t).count();
        let mut pro = 0.0;
        for (r, &size) in px.region_sizes.iter().enumerate() {
            let hit = (0..px.scores.len())
                .filter(|&k| px.region[k] == Some(r) && px.scores[k] >= t)
                .count();
            pro += hit as f64 / size as f64;
        }
        curve.push((fp as f64 / n_normal, pro / px.region_sizes.len() as f64));
    }

    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let hi = x1.min(fpr_limit);
        if hi <= x0 {
            continue;
        }
        let y_hi = if x1 > x0 { y0 + (y1 - y0) * (hi - x0) / (x1 - x0) } else { y1 };
        area += (hi - x0) * (y0 + y_hi) / 2.0;
    }
    Ok(area / fpr_limit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_oracle_example() {
        assert_eq!(auroc_pairs(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    }
}
