//! Seeded synthetic benchmark.
//!
//! Each class owns two fixed linear maps from a shared smooth latent field
//! to RGB and 3D patch features, so nominal samples obey a per-class linear
//! relation between the modalities. An anomaly replaces the 3D (or RGB)
//! features inside an elliptical blob with the image of an independent
//! latent: the marginal statistics stay the same and only the cross-modal
//! relation breaks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{PixelMask, ValidityMask};
use crate::numerics::{FeatureGrid, Scalar, Tensor};

/// Class names of the MVTec 3D-AD benchmark.
pub const CLASS_CATALOG: [&str; 10] = [
    "bagel",
    "cable gland",
    "carrot",
    "cookie",
    "dowel",
    "foam",
    "peach",
    "potato",
    "rope",
    "tire",
];

const MAX_BLOB_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptModality {
    #[serde(rename = "3d")]
    ThreeD,
    Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub d_latent: usize,
    pub d_rgb: usize,
    pub d_3d: usize,
    pub smoothness: usize,
    pub noise_sigma: f64,
    pub border: usize,
    pub area_frac_range: [f64; 2],
    pub corrupt: CorruptModality,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: CLASS_CATALOG[..4].iter().map(|s| s.to_string()).collect(),
            n_train: 64,
            n_test: 64,
            height: 16,
            width: 16,
            d_latent: 4,
            d_rgb: 12,
            d_3d: 18,
            smoothness: 2,
            noise_sigma: 0.05,
            border: 1,
            area_frac_range: [0.02, 0.15],
            corrupt: CorruptModality::ThreeD,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("synthetic config needs at least one class"));
        }
        for c in &self.classes {
            if !CLASS_CATALOG.contains(&c.as_str()) {
                return Err(Error::invalid(format!(
                    "class `{c}` is not in the catalog {CLASS_CATALOG:?}"
                )));
            }
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::invalid("duplicate class names"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::invalid("grids must be at least 4 x 4"));
        }
        if self.d_latent == 0 || self.d_rgb < self.d_latent || self.d_3d < self.d_latent {
            return Err(Error::invalid("need 1 <= d_latent <= min(d_rgb, d_3d)"));
        }
        if self.n_test % 2 != 0 {
            return Err(Error::invalid("n_test must be even (half nominal, half anomalous)"));
        }
        if 2 * self.border >= self.height.min(self.width) {
            return Err(Error::invalid("border strip leaves no valid pixels"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be finite and nonnegative"));
        }
        let [lo, hi] = self.area_frac_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::invalid(format!("area_frac_range [{lo}, {hi}] must satisfy 0 < lo <= hi < 1")));
        }
        Ok(())
    }
}

/// Mixes tags into a base seed (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGenerator {
    pub class_name: String,
    /// `d_latent × d_rgb`, row-major; a latent row vector maps as `z·A`.
    pub a_rgb: Vec<f64>,
    pub a_3d: Vec<f64>,
    pub d_latent: usize,
    pub d_rgb: usize,
    pub d_3d: usize,
    pub smoothness: usize,
    pub noise_sigma: f64,
}

/// Gram–Schmidt orthonormalization of the `d_latent` rows of `a` (each of
/// width `d_out`); `None` when the rows are numerically dependent.
fn orthonormal_rows(a: &[f64], d_latent: usize, d_out: usize) -> Option<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d_latent);
    for r in 0..d_latent {
        let mut v = a[r * d_out..(r + 1) * d_out].to_vec();
        let orig = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= 1e-6 * orig.max(1.0) {
            return None;
        }
        basis.push(v.iter().map(|x| x / n).collect());
    }
    Some(basis.concat())
}

/// Random scaled isometry: orthonormalized Gaussian rows times
/// `√(d_out / d_latent)`, so a latent of norm `√d_latent` maps to a
/// feature of norm `√d_out`. Dependent draws are resampled.
fn random_map(rng: &mut ChaCha8Rng, d_latent: usize, d_out: usize) -> Vec<f64> {
    let k = (d_out as f64 / d_latent as f64).sqrt();
    loop {
        let a: Vec<f64> = (0..d_latent * d_out)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng))
            .collect();
        if let Some(q) = orthonormal_rows(&a, d_latent, d_out) {
            return q.into_iter().map(|x| x * k).collect();
        }
    }
}

impl ClassGenerator {
    pub fn new(class_name: &str, cfg: &SynthConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            class_name: class_name.to_string(),
            a_rgb: random_map(&mut rng, cfg.d_latent, cfg.d_rgb),
            a_3d: random_map(&mut rng, cfg.d_latent, cfg.d_3d),
            d_latent: cfg.d_latent,
            d_rgb: cfg.d_rgb,
            d_3d: cfg.d_3d,
            smoothness: cfg.smoothness,
            noise_sigma: cfg.noise_sigma,
        }
    }

    /// Smooth latent field, `h·w` rows of width `d_latent`: blurred Gaussian
    /// noise, standardized per channel, then scaled per patch to norm
    /// `√d_latent` so feature norms stay nearly constant across patches.
    pub fn latent(&self, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
        let d = self.d_latent;
        let mut z: Vec<f64> = (0..h * w * d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for _ in 0..self.smoothness {
            z = box_blur(&z, h, w, d);
        }
        for c in 0..d {
            let n = (h * w) as f64;
            let mean = (0..h * w).map(|p| z[p * d + c]).sum::<f64>() / n;
            let var = (0..h * w).map(|p| (z[p * d + c] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt().max(1e-12);
            for p in 0..h * w {
                z[p * d + c] = (z[p * d + c] - mean) / sd;
            }
        }
        for p in 0..h * w {
            let row = &mut z[p * d..(p + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let k = (d as f64).sqrt() / n;
            row.iter_mut().for_each(|v| *v *= k);
        }
        z
    }

    /// `z·A + noise` for one patch.
    fn map_patch(&self, rng: &mut ChaCha8Rng, z: &[f64], a: &[f64], d_out: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, zi) in z.iter().enumerate() {
                acc += zi * a[i * d_out + j];
            }
            if self.noise_sigma > 0.0 {
                let e: f64 = StandardNormal.sample(&mut *rng);
                acc += self.noise_sigma * e;
            }
            *o = acc;
        }
    }

    fn map_field(&self, rng: &mut ChaCha8Rng, z: &[f64], rgb: bool) -> Vec<f64> {
        let (a, d_out) = if rgb { (&self.a_rgb, self.d_rgb) } else { (&self.a_3d, self.d_3d) };
        let n = z.len() / self.d_latent;
        let mut out = vec![0.0; n * d_out];
        for p in 0..n {
            let zp = &z[p * self.d_latent..(p + 1) * self.d_latent];
            self.map_patch(rng, zp, a, d_out, &mut out[p * d_out..(p + 1) * d_out]);
        }
        out
    }
}

/// One radius-1 box blur with edge clamping, per channel.
fn box_blur(z: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for y in 0..h {
        for x in 0..w {
            let mut count = 0.0;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    count += 1.0;
                    for c in 0..d {
                        out[(y * w + x) * d + c] += z[(ny * w + nx) * d + c];
                    }
                }
            }
            for c in 0..d {
                out[(y * w + x) * d + c] /= count;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample<T> {
    pub class_name: String,
    pub f_rgb: FeatureGrid<T>,
    pub f_3d: FeatureGrid<T>,
    pub mask: ValidityMask,
    pub gt: PixelMask,
    pub is_anomalous: bool,
}

impl<T: Scalar> LabeledSample<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

/// Nominal sample; a seeded side of the frame loses a strip of `border` pixels.
pub fn gen_nominal<T: Scalar>(
    cg: &ClassGenerator,
    seed: u64,
    h: usize,
    w: usize,
    border: usize,
) -> Result<LabeledSample<T>> {
    if h < 4 || w < 4 {
        return Err(Error::invalid("grids must be at least 4 x 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = cg.latent(&mut rng, h, w);
    let f_rgb = cg.map_field(&mut rng, &z, true);
    let f_3d = cg.map_field(&mut rng, &z, false);
    let side = rng.random_range(0..4u8);
    let mut mask = ValidityMask::filled(h, w, true);
    for y in 0..h {
        for x in 0..w {
            let off = match side {
                0 => y < border,
                1 => y + border >= h,
                2 => x < border,
                _ => x + border >= w,
            };
            if off {
                mask.set(y, x, false);
            }
        }
    }
    Ok(LabeledSample {
        class_name: cg.class_name.clone(),
        f_rgb: Tensor::new(vec![h, w, cg.d_rgb], f_rgb.into_iter().map(T::of).collect())?,
        f_3d: Tensor::new(vec![h, w, cg.d_3d], f_3d.into_iter().map(T::of).collect())?,
        mask,
        gt: PixelMask::filled(h, w, false),
        is_anomalous: false,
    })
}

/// Elliptical blob of `round(f·|valid|)` pixels (at least one), where `f`
/// is drawn from `area_frac_range`. Pixels are ranked by the elliptical
/// distance to a random center; the attempt succeeds when the closest
/// `k` pixels are all valid.
fn place_blob(rng: &mut ChaCha8Rng, mask: &ValidityMask, area_frac_range: [f64; 2]) -> Result<PixelMask> {
    let (h, w) = mask.dims();
    let [lo, hi] = area_frac_range;
    let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let k = ((frac * mask.count() as f64).round() as usize).max(1);
    for _ in 0..MAX_BLOB_TRIES {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let aspect: f64 = rng.random_range(0.5..2.0);
        let (s, c) = theta.sin_cos();
        let mut ranked: Vec<(f64, usize)> = (0..h * w)
            .map(|i| {
                let (dy, dx) = ((i / w) as f64 + 0.5 - cy, (i % w) as f64 + 0.5 - cx);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                (u * u / aspect + v * v * aspect, i)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let chosen: Vec<usize> = ranked[..k].iter().map(|&(_, i)| i).collect();
        if chosen.iter().all(|&i| mask.data()[i]) {
            let mut gt = PixelMask::filled(h, w, false);
            for i in chosen {
                gt.set(i / w, i % w, true);
            }
            return Ok(gt);
        }
    }
    Err(Error::BlobPlacement { tries: MAX_BLOB_TRIES })
}

/// Replaces one modality's features inside a blob with the image of an
/// independent latent field.
pub fn inject_anomaly<T: Scalar>(
    s: &LabeledSample<T>,
    cg: &ClassGenerator,
    seed: u64,
    area_frac_range: [f64; 2],
    corrupt: CorruptModality,
) -> Result<LabeledSample<T>> {
    if s.is_anomalous {
        return Err(Error::invalid("inject_anomaly expects a nominal sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = place_blob(&mut rng, &s.mask, area_frac_range)?;
    let (h, w) = s.dims();
    let z = cg.latent(&mut rng, h, w);
    let rgb = corrupt == CorruptModality::Rgb;
    let fresh = cg.map_field(&mut rng, &z, rgb);
    let mut out = s.clone();
    let target = if rgb { &mut out.f_rgb } else { &mut out.f_3d };
    let d = target.last_dim();
    for i in gt.indices() {
        for c in 0..d {
            target.data_mut()[i * d + c] = T::of(fresh[i * d + c]);
        }
    }
    out.gt = gt;
    out.is_anomalous = true;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset<T> {
    pub generators: Vec<ClassGenerator>,
    pub train: Vec<LabeledSample<T>>,
    pub test: Vec<LabeledSample<T>>,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_TEST: u64 = 2;
const TAG_CLASS: u64 = 0;
const TAG_ANOMALY: u64 = 3;

/// Per class: `n_train` nominal training samples, then `n_test` test
/// samples of which the first half is nominal and the second anomalous.
pub fn gen_dataset<T: Scalar>(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset<T>> {
    cfg.validate()?;
    let mut ds = SynthDataset {
        generators: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (ci, name) in cfg.classes.iter().enumerate() {
        let c = ci as u64;
        let cg = ClassGenerator::new(name, cfg, derive_seed(seed, &[TAG_CLASS, c]));
        for i in 0..cfg.n_train {
            let s = derive_seed(seed, &[SPLIT_TRAIN, c, i as u64]);
            ds.train.push(gen_nominal(&cg, s, cfg.height, cfg.width, cfg.border)?);
        }
        for i in 0..cfg.n_test {
            let s = derive_seed(seed, &[SPLIT_TEST, c, i as u64]);
            let nominal = gen_nominal(&cg, s, cfg.height, cfg.width, cfg.border)?;
            if i < cfg.n_test / 2 {
                ds.test.push(nominal);
            } else {
                let a = derive_seed(seed, &[TAG_ANOMALY, c, i as u64]);
                ds.test.push(inject_anomaly(&nominal, &cg, a, cfg.area_frac_range, cfg.corrupt)?);
            }
        }
        ds.generators.push(cg);
    }
    Ok(ds)
}
