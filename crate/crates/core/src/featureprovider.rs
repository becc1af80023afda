//! Sources of aligned RGB/3D feature grids.
//!
//! The head never resamples: a provider must deliver both modalities on a
//! common `H×W` grid with the configured widths, deterministically per
//! sample reference.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_sample, encode_sample};
use crate::model::check_pair;
use crate::numerics::{DType, Scalar};
use crate::synthdata::{LabeledSample, SynthConfig, SynthDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub split: Split,
    pub index: usize,
}

/// Deterministic source of samples. Labels (`gt`, `is_anomalous`) ride
/// along for evaluation; the head only consumes the features, the mask and
/// the class name.
pub trait FeatureProvider<T: Scalar>: Sync {
    fn len(&self, split: Split) -> usize;
    fn provide(&self, r: SampleRef) -> Result<LabeledSample<T>>;

    fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    fn refs(&self, split: Split) -> Vec<SampleRef> {
        (0..self.len(split)).map(|index| SampleRef { split, index }).collect()
    }

    fn load_split(&self, split: Split) -> Result<Vec<LabeledSample<T>>> {
        self.refs(split).into_iter().map(|r| self.provide(r)).collect()
    }
}

fn out_of_range(r: SampleRef, len: usize) -> Error {
    Error::invalid(format!("{:?} sample {} out of range (split has {len})", r.split, r.index))
}

/// In-memory synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthProvider<T> {
    pub dataset: SynthDataset<T>,
}

impl<T: Scalar> FeatureProvider<T> for SynthProvider<T> {
    fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.dataset.train.len(),
            Split::Test => self.dataset.test.len(),
        }
    }

    fn provide(&self, r: SampleRef) -> Result<LabeledSample<T>> {
        let v = match r.split {
            Split::Train => &self.dataset.train,
            Split::Test => &self.dataset.test,
        };
        v.get(r.index).cloned().ok_or_else(|| out_of_range(r, v.len()))
    }
}

pub const DATASET_FORMAT: &str = "mmad-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path relative to the dataset directory.
    pub file: String,
    pub class_name: String,
    pub is_anomalous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub synth: SynthConfig,
    pub classes: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

fn file_stem(class_name: &str) -> String {
    class_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Writes the manifest and one sample bundle per sample under `dir`.
pub fn write_dataset<T: Scalar>(
    dir: &Path,
    data: &SynthDataset<T>,
    synth: &SynthConfig,
    config_hash: &str,
    seed: u64,
    dtype: DType,
) -> Result<DatasetManifest> {
    let entries = |split: &str, samples: &[LabeledSample<T>]| -> Result<Vec<ManifestEntry>> {
        std::fs::create_dir_all(dir.join(split))?;
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let file = format!("{split}/{i:05}_{}.mmad", file_stem(&s.class_name));
                std::fs::write(dir.join(&file), encode_sample(s, config_hash, dtype)?)?;
                Ok(ManifestEntry {
                    file,
                    class_name: s.class_name.clone(),
                    is_anomalous: s.is_anomalous,
                })
            })
            .collect()
    };
    let train = entries("train", &data.train)?;
    let test = entries("test", &data.test)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: crate::io::FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        synth: synth.clone(),
        classes: data.generators.iter().map(|g| g.class_name.clone()).collect(),
        train,
        test,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

/// Reads sample bundles listed in a dataset manifest.
#[derive(Clone, Debug)]
pub struct DiskProvider {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl DiskProvider {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(root.join(MANIFEST_FILE))?)?;
        if manifest.format != DATASET_FORMAT || manifest.version != crate::io::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "not a version {} dataset manifest: {} v{}",
                crate::io::FORMAT_VERSION,
                manifest.format,
                manifest.version
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.manifest.train,
            Split::Test => &self.manifest.test,
        }
    }
}

impl<T: Scalar> FeatureProvider<T> for DiskProvider {
    fn len(&self, split: Split) -> usize {
        self.entries(split).len()
    }

    fn provide(&self, r: SampleRef) -> Result<LabeledSample<T>> {
        let entries = self.entries(r.split);
        let e = entries.get(r.index).ok_or_else(|| out_of_range(r, entries.len()))?;
        let (s, _) = decode_sample(&std::fs::read(self.root.join(&e.file))?)?;
        if s.class_name != e.class_name || s.is_anomalous != e.is_anomalous {
            return Err(Error::Format(format!("{} disagrees with its manifest entry", e.file)));
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    ProvideFailed,
    GridMismatch,
    WidthMismatch,
    MaskMismatch,
    NonFinite,
    Nondeterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub reference: SampleRef,
    pub kind: DiagnosticKind,
    pub message: String,
}

/// Probes `refs` and reports every contract violation; an empty result
/// means the provider passed.
pub fn validate_provider<T: Scalar, P: FeatureProvider<T> + ?Sized>(
    p: &P,
    d_rgb: usize,
    d_3d: usize,
    refs: &[SampleRef],
) -> Result<Vec<Diagnostic>> {
    if refs.is_empty() {
        return Err(Error::invalid("validate_provider needs at least one probe"));
    }
    let mut out = Vec::new();
    for &r in refs {
        let mut report = |kind, message: String| out.push(Diagnostic { reference: r, kind, message });
        let (a, b) = match (p.provide(r), p.provide(r)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                report(DiagnosticKind::ProvideFailed, e.to_string());
                continue;
            }
        };
        if a != b {
            report(DiagnosticKind::Nondeterministic, "two calls returned different samples".into());
        }
        match check_pair(&a.f_rgb, &a.f_3d, d_rgb, d_3d) {
            Ok((h, w)) => {
                if a.mask.dims() != (h, w) || a.gt.dims() != (h, w) {
                    report(
                        DiagnosticKind::MaskMismatch,
                        format!("masks are {:?} but the grid is {:?}", a.mask.dims(), (h, w)),
                    );
                }
            }
            Err(Error::ShapeMismatch { left, right, .. }) => {
                report(DiagnosticKind::GridMismatch, format!("grid mismatch: RGB {left:?} vs 3D {right:?}"));
            }
            Err(e) => report(DiagnosticKind::WidthMismatch, e.to_string()),
        }
        if !a.f_rgb.all_finite() || !a.f_3d.all_finite() {
            report(DiagnosticKind::NonFinite, "feature grid contains a non-finite entry".into());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::gen_dataset;

    fn small() -> (SynthConfig, SynthDataset<f64>) {
        let cfg = SynthConfig {
            classes: vec!["bagel".into(), "cable gland".into()],
            n_train: 2,
            n_test: 2,
            height: 6,
            width: 6,
            ..SynthConfig::default()
        };
        let data = gen_dataset(&cfg, 3).unwrap();
        (cfg, data)
    }

    struct Broken(SynthProvider<f64>, u8);

    impl FeatureProvider<f64> for Broken {
        fn len(&self, split: Split) -> usize {
            self.0.len(split)
        }

        fn provide(&self, r: SampleRef) -> Result<LabeledSample<f64>> {
            let mut s = self.0.provide(r)?;
            match self.1 {
                0 => {
                    let d = s.f_3d.last_dim();
                    s.f_3d = crate::numerics::Tensor::zeros(vec![5, 6, d]);
                }
                _ => s.f_rgb.data_mut()[0] = f64::NAN,
            }
            Ok(s)
        }
    }

    #[test]
    fn synth_provider_passes() {
        let (cfg, data) = small();
        let p = SynthProvider { dataset: data };
        let refs = [p.refs(Split::Train), p.refs(Split::Test)].concat();
        assert!(validate_provider(&p, cfg.d_rgb, cfg.d_3d, &refs).unwrap().is_empty());
        assert!(validate_provider(&p, cfg.d_rgb, cfg.d_3d, &[]).is_err());
        let diags = validate_provider(&p, cfg.d_rgb + 1, cfg.d_3d, &refs[..1]).unwrap();
        assert_eq!(diags[0].kind, DiagnosticKind::WidthMismatch);
    }

    #[test]
    fn broken_providers_are_named() {
        let (cfg, data) = small();
        let refs = [SampleRef { split: Split::Test, index: 0 }];
        let grid = Broken(SynthProvider { dataset: data.clone() }, 0);
        let d = validate_provider(&grid, cfg.d_rgb, cfg.d_3d, &refs).unwrap();
        assert_eq!(d[0].kind, DiagnosticKind::GridMismatch);
        assert!(d[0].message.contains("grid mismatch"));
        let nan = Broken(SynthProvider { dataset: data }, 1);
        let d = validate_provider(&nan, cfg.d_rgb, cfg.d_3d, &refs).unwrap();
        assert!(d.iter().any(|x| x.kind == DiagnosticKind::NonFinite));
        let missing = [SampleRef { split: Split::Train, index: 99 }];
        let d = validate_provider(&nan, cfg.d_rgb, cfg.d_3d, &missing).unwrap();
        assert_eq!(d[0].kind, DiagnosticKind::ProvideFailed);
    }

    #[test]
    fn disk_round_trip() {
        let (cfg, data) = small();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &data, &cfg, "hash", 3, DType::F64).unwrap();
        assert_eq!(m.train.len(), 4);
        assert!(m.train[2].file.contains("cable_gland"));
        let p = DiskProvider::open(dir.path()).unwrap();
        let test: Vec<LabeledSample<f64>> = p.load_split(Split::Test).unwrap();
        assert_eq!(test, data.test);
        let refs = FeatureProvider::<f64>::refs(&p, Split::Train);
        assert!(validate_provider::<f64, _>(&p, cfg.d_rgb, cfg.d_3d, &refs).unwrap().is_empty());
    }
}
