//! Anomaly maps from cross-modal mapping residuals and text-anchor distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ValidityMask;
use crate::numerics::{euclidean_distance, FeatureGrid, Scalar, Tensor};

/// `H×W` map of nonnegative finite scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<T>(Tensor<T>);

impl<T: Scalar> AnomalyMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::NonFinite(format!("anomaly map entry {bad} is not a finite nonnegative value")));
        }
        Ok(Self(Tensor::new(vec![height, width], data)?))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(vec![height, width]))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.0.data()[y * self.width() + x]
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    fn expect_same_dims(&self, other: &Self, context: &'static str) -> Result<()> {
        self.0.expect_same_shape(&other.0, context)
    }

    /// Copy with every invalid pixel set to 0.
    pub fn masked(&self, mask: &ValidityMask) -> Result<Self> {
        mask.expect_dims(self.height(), self.width(), "anomaly map mask")?;
        let data = self
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &ok)| if ok { v } else { T::zero() })
            .collect();
        Self::new(self.height(), self.width(), data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid(format!(
                "fusion weights must be finite and nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn grid_dims(shape: &[usize], context: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::invalid(format!("{context}: expected an H x W x D grid, got shape {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

/// Per-patch Euclidean distance between two grids.
pub fn distance_map<T: Scalar>(a: &FeatureGrid<T>, b: &FeatureGrid<T>) -> Result<AnomalyMap<T>> {
    a.expect_same_shape(b, "distance_map")?;
    let (h, w) = grid_dims(a.shape(), "distance_map")?;
    let data = (0..h * w)
        .map(|r| euclidean_distance(a.row(r), b.row(r)))
        .collect::<Result<Vec<_>>>()?;
    AnomalyMap::new(h, w, data)
}

pub fn psi_rgb<T: Scalar>(f_rgb: &FeatureGrid<T>, f_3d_to_rgb: &FeatureGrid<T>) -> Result<AnomalyMap<T>> {
    distance_map(f_rgb, f_3d_to_rgb)
}

pub fn psi_3d<T: Scalar>(f_3d: &FeatureGrid<T>, f_rgb_to_3d: &FeatureGrid<T>) -> Result<AnomalyMap<T>> {
    distance_map(f_3d, f_rgb_to_3d)
}

/// Product of the two per-patch distances to the (unnormalized) anchor.
pub fn psi_text<T: Scalar>(
    anchor: &Tensor<T>,
    f_rgb_to_text: &FeatureGrid<T>,
    f_3d_to_text: &FeatureGrid<T>,
) -> Result<AnomalyMap<T>> {
    f_rgb_to_text.expect_same_shape(f_3d_to_text, "psi_text")?;
    let (h, w) = grid_dims(f_rgb_to_text.shape(), "psi_text")?;
    if anchor.rows() != 1 || anchor.last_dim() != f_rgb_to_text.last_dim() {
        return Err(Error::ShapeMismatch {
            context: "psi_text anchor",
            left: anchor.shape().to_vec(),
            right: vec![1, f_rgb_to_text.last_dim()],
        });
    }
    let a = anchor.row(0);
    let data = (0..h * w)
        .map(|r| Ok(euclidean_distance(a, f_rgb_to_text.row(r))? * euclidean_distance(a, f_3d_to_text.row(r))?))
        .collect::<Result<Vec<_>>>()?;
    AnomalyMap::new(h, w, data)
}

/// `α·(Ψ_rgb ⊙ Ψ_3d) + β·Ψ_text`.
pub fn fuse<T: Scalar>(
    psi_rgb: &AnomalyMap<T>,
    psi_3d: &AnomalyMap<T>,
    psi_text: &AnomalyMap<T>,
    w: &FusionWeights,
) -> Result<AnomalyMap<T>> {
    psi_rgb.expect_same_dims(psi_3d, "fuse")?;
    psi_rgb.expect_same_dims(psi_text, "fuse")?;
    let (alpha, beta) = (T::of(w.alpha), T::of(w.beta));
    let data = psi_rgb
        .data()
        .iter()
        .zip(psi_3d.data())
        .zip(psi_text.data())
        .map(|((&r, &g), &t)| alpha * (r * g) + beta * t)
        .collect();
    AnomalyMap::new(psi_rgb.height(), psi_rgb.width(), data)
}

/// Maximum over valid pixels, 0 when none is valid.
pub fn image_score<T: Scalar>(psi_final: &AnomalyMap<T>, mask: &ValidityMask) -> Result<T> {
    mask.expect_dims(psi_final.height(), psi_final.width(), "image_score mask")?;
    Ok(psi_final
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(T::zero(), T::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> AnomalyMap<f64> {
        AnomalyMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn distance_map_cases() {
        let a = Tensor::<f64>::from_f64(vec![1, 1, 2], &[0.0, 0.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![1, 1, 2], &[3.0, 4.0]).unwrap();
        assert_eq!(distance_map(&a, &b).unwrap().data(), &[5.0]);
        assert_eq!(distance_map(&b, &b).unwrap().data(), &[0.0]);
        let c = Tensor::<f64>::from_f64(vec![1, 2, 1], &[0.0, 0.0]).unwrap();
        assert!(distance_map(&a, &c).is_err());
    }

    #[test]
    fn offset_gives_constant_map() {
        let a = Tensor::<f64>::from_f64(vec![2, 1, 2], &[1.0, 2.0, -1.0, 0.5]).unwrap();
        let b = a.zip_map(&Tensor::<f64>::from_f64(vec![2, 1, 2], &[0.0, -0.75, 0.0, -0.75]).unwrap(), "t", |x, y| x + y).unwrap();
        assert_eq!(psi_3d(&a, &b).unwrap().data(), &[0.75, 0.75]);
    }

    #[test]
    fn psi_text_cases() {
        let anchor = Tensor::<f64>::from_f64(vec![1, 1], &[0.0]).unwrap();
        let twos = Tensor::<f64>::from_f64(vec![1, 2, 1], &[2.0, -2.0]).unwrap();
        assert_eq!(psi_text(&anchor, &twos, &twos).unwrap().data(), &[4.0, 4.0]);
        let zeros = Tensor::<f64>::from_f64(vec![1, 2, 1], &[0.0, 0.0]).unwrap();
        assert_eq!(psi_text(&anchor, &zeros, &twos).unwrap().data(), &[0.0, 0.0]);
        let wide = Tensor::<f64>::from_f64(vec![1, 2], &[0.0, 0.0]).unwrap();
        assert!(psi_text(&wide, &twos, &twos).is_err());
    }

    #[test]
    fn fuse_cases() {
        let w = FusionWeights::default();
        let c = 1.7;
        let m = map(1, 2, &[c, c]);
        for &v in fuse(&m, &m, &m, &w).unwrap().data() {
            assert!((v - (0.5 * c * c + 0.5 * c)).abs() < 1e-12);
        }
        assert_eq!(fuse(&map(1, 1, &[1.0]), &map(1, 1, &[2.0]), &map(1, 1, &[3.0]), &w).unwrap().data(), &[2.5]);
        let only_text = FusionWeights { alpha: 0.0, beta: 0.5 };
        assert_eq!(fuse(&map(1, 1, &[9.0]), &map(1, 1, &[9.0]), &map(1, 1, &[3.0]), &only_text).unwrap().data(), &[1.5]);
        assert!(fuse(&map(1, 1, &[1.0]), &map(1, 2, &[1.0, 1.0]), &map(1, 1, &[1.0]), &w).is_err());
    }

    #[test]
    fn image_score_cases() {
        let all = ValidityMask::filled(2, 2, true);
        assert_eq!(image_score(&AnomalyMap::<f64>::zeros(2, 2), &all).unwrap(), 0.0);
        let m = map(2, 2, &[0.1, 3.0, 0.2, 0.0]);
        assert_eq!(image_score(&m, &all).unwrap(), 3.0);
        let mut mask = all.clone();
        mask.set(0, 1, false);
        assert_eq!(image_score(&m, &mask).unwrap(), 0.2);
        assert_eq!(image_score(&m, &ValidityMask::filled(2, 2, false)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_negative_entries() {
        assert!(AnomalyMap::new(1, 1, vec![-1.0_f64]).is_err());
        assert!(AnomalyMap::new(1, 1, vec![f64::NAN]).is_err());
    }
}
