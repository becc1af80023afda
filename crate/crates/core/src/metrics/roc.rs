//! Rank-based AUROC.

use crate::error::{Error, Result};
use crate::mask::{PixelMask, ValidityMask};
use crate::numerics::Scalar;
use crate::scoring::AnomalyMap;

pub(crate) fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "scores vs labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass { missing: "anomalous" });
    }
    if neg == 0 {
        return Err(Error::SingleClass { missing: "normal" });
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUROC with mid-ranks for ties. Labels are `true` for anomalous.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Valid pixels of every sample, pooled in sample then raster order, as
/// `(score, is_anomalous)`.
pub fn pooled_pixels<T: Scalar>(
    maps: &[AnomalyMap<T>],
    gt_masks: &[PixelMask],
    valid: &[ValidityMask],
) -> Result<(Vec<f64>, Vec<bool>)> {
    if maps.len() != gt_masks.len() || maps.len() != valid.len() {
        return Err(Error::invalid(format!(
            "{} maps, {} ground-truth masks and {} validity masks",
            maps.len(),
            gt_masks.len(),
            valid.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ((m, gt), v) in maps.iter().zip(gt_masks).zip(valid) {
        gt.expect_dims(m.height(), m.width(), "ground-truth mask")?;
        v.expect_dims(m.height(), m.width(), "validity mask")?;
        for ((&s, &g), &ok) in m.data().iter().zip(gt.data()).zip(v.data()) {
            if ok {
                scores.push(s.to_f64_lossy());
                labels.push(g);
            }
        }
    }
    Ok((scores, labels))
}

/// AUROC over the pooled valid pixels of all samples.
pub fn pixel_auroc<T: Scalar>(maps: &[AnomalyMap<T>], gt_masks: &[PixelMask], valid: &[ValidityMask]) -> Result<f64> {
    let (s, l) = pooled_pixels(maps, gt_masks, valid)?;
    auroc(&s, &l)
}
