//! Per-class and averaged detection metrics over a scored test set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{PixelMask, ValidityMask};
use crate::metrics::{aupro, auroc, oracle, pixel_auroc, pooled_pixels};
use crate::model::{Model, SampleMaps};
use crate::numerics::Scalar;
use crate::scoring::{AnomalyMap, FusionWeights};
use crate::synthdata::LabeledSample;

/// Default AUPRO integration limits.
pub const DEFAULT_FPR_LIMITS: [f64; 2] = [0.30, 0.01];

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub i_auroc: f64,
    pub p_auroc: f64,
    /// One value per entry of [`MetricsReport::fpr_limits`].
    pub aupro: Vec<f64>,
    pub n_samples: usize,
    pub n_anomalous: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub fpr_limits: Vec<f64>,
    pub classes: BTreeMap<String, MetricRow>,
    /// Arithmetic mean of the per-class rows; counts are totals.
    pub average: MetricRow,
    pub config_hash: String,
    pub seed: u64,
}

/// Scores and masks of one class, ready for metric computation.
#[derive(Clone, Debug, Default)]
pub struct ClassScores<T> {
    pub image_scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub maps: Vec<AnomalyMap<T>>,
    pub gts: Vec<PixelMask>,
    pub valid: Vec<ValidityMask>,
}

impl<T: Scalar> ClassScores<T> {
    pub fn push(&mut self, sample: &LabeledSample<T>, maps: SampleMaps<T>) {
        self.image_scores.push(maps.image_score.to_f64_lossy());
        self.labels.push(sample.is_anomalous);
        self.maps.push(maps.fused);
        self.gts.push(sample.gt.clone());
        self.valid.push(sample.mask.clone());
    }

    pub fn row(&self, limits: &[f64]) -> Result<MetricRow> {
        Ok(MetricRow {
            i_auroc: auroc(&self.image_scores, &self.labels)?,
            p_auroc: pixel_auroc(&self.maps, &self.gts, &self.valid)?,
            aupro: limits
                .iter()
                .map(|&l| aupro(&self.maps, &self.gts, &self.valid, l))
                .collect::<Result<_>>()?,
            n_samples: self.labels.len(),
            n_anomalous: self.labels.iter().filter(|&&a| a).count(),
        })
    }

    /// Same row computed with the brute-force oracles.
    pub fn oracle_row(&self, limits: &[f64]) -> Result<MetricRow> {
        let (px, px_labels) = pooled_pixels(&self.maps, &self.gts, &self.valid)?;
        Ok(MetricRow {
            i_auroc: oracle::auroc_pairs(&self.image_scores, &self.labels)?,
            p_auroc: oracle::auroc_pairs(&px, &px_labels)?,
            aupro: limits
                .iter()
                .map(|&l| oracle::aupro_exhaustive(&self.maps, &self.gts, &self.valid, l))
                .collect::<Result<_>>()?,
            n_samples: self.labels.len(),
            n_anomalous: self.labels.iter().filter(|&&a| a).count(),
        })
    }
}

/// Largest absolute difference between matching metric values.
pub fn max_row_difference(a: &MetricRow, b: &MetricRow) -> f64 {
    let mut d = (a.i_auroc - b.i_auroc).abs().max((a.p_auroc - b.p_auroc).abs());
    for (x, y) in a.aupro.iter().zip(&b.aupro) {
        d = d.max((x - y).abs());
    }
    d
}

/// Groups test samples by class (in order of first appearance) and scores
/// them, computing each class anchor once.
pub fn score_by_class<T: Scalar>(
    model: &Model<T>,
    test: &[LabeledSample<T>],
    fusion: &FusionWeights,
) -> Result<BTreeMap<String, ClassScores<T>>> {
    let anchors = model.anchors()?;
    let mut out: BTreeMap<String, ClassScores<T>> = BTreeMap::new();
    for s in test {
        let anchor = anchors
            .get(&s.class_name)
            .ok_or_else(|| Error::UnknownClass(s.class_name.clone()))?;
        let maps = model.score_with_anchor(&s.f_rgb, &s.f_3d, &s.mask, anchor, fusion)?;
        out.entry(s.class_name.clone()).or_default().push(s, maps);
    }
    Ok(out)
}

fn average(rows: &BTreeMap<String, MetricRow>, n_limits: usize) -> Result<MetricRow> {
    if rows.is_empty() {
        return Err(Error::invalid("no classes to average"));
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&MetricRow) -> f64| rows.values().map(f).sum::<f64>() / n;
    Ok(MetricRow {
        i_auroc: mean(&|r| r.i_auroc),
        p_auroc: mean(&|r| r.p_auroc),
        aupro: (0..n_limits).map(|i| mean(&|r| r.aupro[i])).collect(),
        n_samples: rows.values().map(|r| r.n_samples).sum(),
        n_anomalous: rows.values().map(|r| r.n_anomalous).sum(),
    })
}

/// Builds the report from grouped scores.
pub fn report_from_scores<T: Scalar>(
    scores: &BTreeMap<String, ClassScores<T>>,
    limits: &[f64],
    config_hash: &str,
    seed: u64,
) -> Result<MetricsReport> {
    let classes = scores
        .iter()
        .map(|(c, s)| Ok((c.clone(), s.row(limits)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(MetricsReport {
        fpr_limits: limits.to_vec(),
        average: average(&classes, limits.len())?,
        classes,
        config_hash: config_hash.to_string(),
        seed,
    })
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    test: &[LabeledSample<T>],
    fusion: &FusionWeights,
    limits: &[f64],
    config_hash: &str,
    seed: u64,
) -> Result<MetricsReport> {
    report_from_scores(&score_by_class(model, test, fusion)?, limits, config_hash, seed)
}

/// Recomputes every class row with the oracles and returns the largest
/// deviation from the fast metrics.
pub fn oracle_deviation<T: Scalar>(
    scores: &BTreeMap<String, ClassScores<T>>,
    report: &MetricsReport,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for (c, s) in scores {
        let fast = report
            .classes
            .get(c)
            .ok_or_else(|| Error::UnknownClass(c.clone()))?;
        worst = worst.max(max_row_difference(fast, &s.oracle_row(&report.fpr_limits)?));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: f64, p: f64, a: f64) -> MetricRow {
        MetricRow {
            i_auroc: i,
            p_auroc: p,
            aupro: vec![a],
            n_samples: 4,
            n_anomalous: 2,
        }
    }

    #[test]
    fn average_is_arithmetic_mean() {
        let rows: BTreeMap<String, MetricRow> =
            [("a".to_string(), row(1.0, 0.5, 0.2)), ("b".to_string(), row(0.5, 0.7, 0.4))].into();
        let avg = average(&rows, 1).unwrap();
        assert_eq!(avg.i_auroc, 0.75);
        assert!((avg.p_auroc - 0.6).abs() < 1e-15);
        assert!((avg.aupro[0] - 0.3).abs() < 1e-15);
        assert_eq!((avg.n_samples, avg.n_anomalous), (8, 4));
        assert!(average(&BTreeMap::new(), 1).is_err());
    }

    #[test]
    fn row_difference() {
        assert_eq!(max_row_difference(&row(1.0, 0.5, 0.2), &row(1.0, 0.5, 0.2)), 0.0);
        assert!((max_row_difference(&row(1.0, 0.5, 0.2), &row(0.9, 0.5, 0.5)) - 0.3).abs() < 1e-15);
    }
}
