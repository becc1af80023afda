//! Masked cosine alignment losses.
//!
//! Every term is a mean of `1 − cos` over the valid patches of a sample,
//! so invalid patches never influence a loss value or its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ValidityMask;
use crate::numerics::{ops::COSINE_EPS, FeatureGrid, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_v2g: f64,
    pub lambda_g2v: f64,
    pub lambda_v2t: f64,
    pub lambda_g2t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v2g: 1.0,
            lambda_g2v: 1.0,
            lambda_v2t: 1.0,
            lambda_g2t: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_v2g", self.lambda_v2g),
            ("lambda_g2v", self.lambda_g2v),
            ("lambda_v2t", self.lambda_v2t),
            ("lambda_g2t", self.lambda_g2t),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// A loss value plus the empty-mask warning flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedLoss<T> {
    pub value: T,
    pub empty_mask: bool,
}

fn check_grid(shape: &[usize], mask: &ValidityMask, context: &'static str) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::invalid(format!("{context}: expected an H x W x D grid, got shape {shape:?}")));
    }
    mask.expect_dims(shape[0], shape[1], context)
}

/// Graph form of [`masked_cosine_loss`]. Returns the `[1]` loss node and
/// whether the mask was empty.
pub fn masked_cosine_loss_var<T: Scalar>(
    g: &Graph<T>,
    pred: Var,
    target: Var,
    mask: &ValidityMask,
) -> Result<(Var, bool)> {
    let (ps, ts) = (g.shape(pred), g.shape(target));
    if ps != ts {
        return Err(Error::ShapeMismatch {
            context: "masked_cosine_loss",
            left: ps,
            right: ts,
        });
    }
    check_grid(&ps, mask, "masked_cosine_loss mask")?;
    let rows = mask.indices();
    if rows.is_empty() {
        return Ok((g.leaf(Tensor::scalar(T::zero())), true));
    }
    let sims = g.row_cosine(g.gather_rows(pred, &rows)?, g.gather_rows(target, &rows)?, T::of(COSINE_EPS))?;
    Ok((g.mean(g.affine(sims, -T::one(), T::one())), false))
}

/// Mean `1 − cos(anchor, patch)` over valid patches; the `1×D` anchor is
/// broadcast to every patch.
pub fn masked_anchor_loss_var<T: Scalar>(
    g: &Graph<T>,
    pred: Var,
    anchor: Var,
    mask: &ValidityMask,
) -> Result<(Var, bool)> {
    let ps = g.shape(pred);
    check_grid(&ps, mask, "anchor loss mask")?;
    let a = g.shape(anchor);
    if a != [1, ps[2]] {
        return Err(Error::ShapeMismatch {
            context: "anchor loss width",
            left: a,
            right: vec![1, ps[2]],
        });
    }
    let rows = mask.indices();
    if rows.is_empty() {
        return Ok((g.leaf(Tensor::scalar(T::zero())), true));
    }
    let anchors = g.broadcast_rows(anchor, rows.len())?;
    let sims = g.row_cosine(anchors, g.gather_rows(pred, &rows)?, T::of(COSINE_EPS))?;
    Ok((g.mean(g.affine(sims, -T::one(), T::one())), false))
}

fn weighted_sum<T: Scalar>(g: &Graph<T>, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
    g.add(g.affine(a, T::of(wa), T::zero()), g.affine(b, T::of(wb), T::zero()))
}

/// `λ_v2g·L(rgb→3d, f_3d) + λ_g2v·L(3d→rgb, f_rgb)` as a `[1]` node.
pub fn visual_loss_var<T: Scalar>(
    g: &Graph<T>,
    f_rgb: Var,
    f_3d: Var,
    f_rgb_to_3d: Var,
    f_3d_to_rgb: Var,
    mask: &ValidityMask,
    w: &LossWeights,
) -> Result<(Var, bool)> {
    let (v2g, empty) = masked_cosine_loss_var(g, f_rgb_to_3d, f_3d, mask)?;
    let (g2v, _) = masked_cosine_loss_var(g, f_3d_to_rgb, f_rgb, mask)?;
    Ok((weighted_sum(g, v2g, w.lambda_v2g, g2v, w.lambda_g2v)?, empty))
}

pub fn text_loss_var<T: Scalar>(
    g: &Graph<T>,
    f_rgb_to_text: Var,
    f_3d_to_text: Var,
    anchor: Var,
    mask: &ValidityMask,
    w: &LossWeights,
) -> Result<(Var, bool)> {
    let (v2t, empty) = masked_anchor_loss_var(g, f_rgb_to_text, anchor, mask)?;
    let (g2t, _) = masked_anchor_loss_var(g, f_3d_to_text, anchor, mask)?;
    Ok((weighted_sum(g, v2t, w.lambda_v2t, g2t, w.lambda_g2t)?, empty))
}

pub fn masked_cosine_loss<T: Scalar>(
    pred: &FeatureGrid<T>,
    target: &FeatureGrid<T>,
    mask: &ValidityMask,
) -> Result<MaskedLoss<T>> {
    let g = Graph::new();
    let (v, empty_mask) = masked_cosine_loss_var(&g, g.leaf(pred.clone()), g.leaf(target.clone()), mask)?;
    if empty_mask {
        log::warn!("masked loss over an empty validity mask; contributing 0");
    }
    Ok(MaskedLoss {
        value: g.scalar(v),
        empty_mask,
    })
}

pub fn visual_loss<T: Scalar>(
    f_rgb: &FeatureGrid<T>,
    f_3d: &FeatureGrid<T>,
    f_rgb_to_3d: &FeatureGrid<T>,
    f_3d_to_rgb: &FeatureGrid<T>,
    mask: &ValidityMask,
    w: &LossWeights,
) -> Result<T> {
    let g = Graph::new();
    let leaf = |t: &Tensor<T>| g.leaf(t.clone());
    let (v, _) = visual_loss_var(&g, leaf(f_rgb), leaf(f_3d), leaf(f_rgb_to_3d), leaf(f_3d_to_rgb), mask, w)?;
    Ok(g.scalar(v))
}

pub fn text_loss<T: Scalar>(
    f_rgb_to_text: &FeatureGrid<T>,
    f_3d_to_text: &FeatureGrid<T>,
    text_anchor: &Tensor<T>,
    mask: &ValidityMask,
    w: &LossWeights,
) -> Result<T> {
    let g = Graph::new();
    let leaf = |t: &Tensor<T>| g.leaf(t.clone());
    let (v, _) = text_loss_var(&g, leaf(f_rgb_to_text), leaf(f_3d_to_text), leaf(text_anchor), mask, w)?;
    Ok(g.scalar(v))
}

pub fn total_loss<T: Scalar>(l_vis: T, l_text: T) -> Result<T> {
    if !l_vis.is_finite() || !l_text.is_finite() {
        return Err(Error::NonFinite(format!("total_loss inputs ({l_vis}, {l_text})")));
    }
    Ok(l_vis + l_text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, rows: &[[f64; 2]]) -> Tensor<f64> {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_f64(vec![h, w, 2], &data).unwrap()
    }

    #[test]
    fn masked_cosine_cases() {
        let m = ValidityMask::filled(1, 2, true);
        let a = grid(1, 2, &[[1.0, 0.0], [0.0, 2.0]]);
        assert_eq!(masked_cosine_loss(&a, &a, &m).unwrap().value, 0.0);
        let b = grid(1, 2, &[[0.0, 1.0], [3.0, 0.0]]);
        assert_eq!(masked_cosine_loss(&a, &b, &m).unwrap().value, 1.0);
        let c = grid(1, 2, &[[2.0, 0.0], [1.0, 0.0]]);
        assert!((masked_cosine_loss(&a, &c, &m).unwrap().value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_warns() {
        let a = grid(1, 1, &[[1.0, 0.0]]);
        let r = masked_cosine_loss(&a, &a, &ValidityMask::filled(1, 1, false)).unwrap();
        assert_eq!(r, MaskedLoss { value: 0.0, empty_mask: true });
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = grid(1, 2, &[[1.0, 0.0], [0.0, 1.0]]);
        let b = grid(2, 1, &[[1.0, 0.0], [0.0, 1.0]]);
        assert!(masked_cosine_loss(&a, &b, &ValidityMask::filled(1, 2, true)).is_err());
        assert!(masked_cosine_loss(&a, &a, &ValidityMask::filled(2, 1, true)).is_err());
    }

    #[test]
    fn visual_loss_cases() {
        let m = ValidityMask::filled(1, 1, true);
        let x = grid(1, 1, &[[1.0, 0.0]]);
        let y = grid(1, 1, &[[0.0, 1.0]]);
        let w = LossWeights::default();
        assert_eq!(visual_loss(&x, &y, &y, &x, &m, &w).unwrap(), 0.0);
        assert_eq!(visual_loss(&x, &y, &x, &y, &m, &w).unwrap(), 2.0);
        // First term 0.3: cos = 0.7 between (1,0) and (0.7, √0.51).
        let p = grid(1, 1, &[[0.7, 0.51_f64.sqrt()]]);
        let w2 = LossWeights {
            lambda_v2g: 2.0,
            lambda_g2v: 0.0,
            ..LossWeights::default()
        };
        assert!((visual_loss(&y, &x, &p, &x, &m, &w2).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn text_loss_cases() {
        let m = ValidityMask::filled(1, 2, true);
        let anchor = Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap();
        let w = LossWeights::default();
        let par = grid(1, 2, &[[2.0, 0.0], [0.5, 0.0]]);
        assert_eq!(text_loss(&par, &par, &anchor, &m, &w).unwrap(), 0.0);
        let anti = grid(1, 2, &[[-2.0, 0.0], [-0.5, 0.0]]);
        assert_eq!(text_loss(&anti, &anti, &anchor, &m, &w).unwrap(), 4.0);
        let half = grid(1, 2, &[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(text_loss(&half, &half, &anchor, &m, &w).unwrap(), 1.0);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.4, 0.6).unwrap(), 1.0);
        assert!(total_loss(f64::NAN, 0.0).is_err());
        assert!(total_loss(0.0, f64::INFINITY).is_err());
    }
}
