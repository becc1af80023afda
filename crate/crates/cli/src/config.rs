//! Run configuration document and its hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mmad_core::eval::DEFAULT_FPR_LIMITS;
use mmad_core::model::{MapperKind, ModelArch};
use mmad_core::octa::PromptCatalog;
use mmad_core::scoring::FusionWeights;
use mmad_core::synthdata::SynthConfig;
use mmad_core::trainer::{GradCheckConfig, GradientCorruption, TrainConfig};
use mmad_core::DType;

/// Hex characters of the SHA-256 digest kept as the config hash.
pub const HASH_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_text: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub mapper: MapperKind,
    pub embed_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ModelArch::new(1, 2, Vec::new());
        Self {
            d_text: a.d_text,
            n_experts: a.n_experts,
            top_k: a.top_k,
            mapper: a.mapper,
            embed_seed: a.embed_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub fpr_limits: Vec<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            fpr_limits: DEFAULT_FPR_LIMITS.to_vec(),
        }
    }
}

/// Either a structured catalog or the plain-text `[states]`/`[templates]`
/// form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptsSection {
    Catalog(PromptCatalog),
    Text(String),
}

impl Default for PromptsSection {
    fn default() -> Self {
        PromptsSection::Catalog(PromptCatalog::default())
    }
}

impl PromptsSection {
    pub fn catalog(&self) -> mmad_core::Result<PromptCatalog> {
        let c = match self {
            PromptsSection::Catalog(c) => c.clone(),
            PromptsSection::Text(t) => PromptCatalog::parse_text(t)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub seeds: Vec<u64>,
    /// Negative control: scales one analytic gradient before comparison.
    pub corrupt: Option<GradientCorruption>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            corrupt: None,
        }
    }
}

impl GradcheckSection {
    pub fn configs(&self) -> Vec<GradCheckConfig> {
        self.seeds
            .iter()
            .map(|&seed| GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub fusion: FusionWeights,
    pub metrics: MetricsSection,
    pub prompts: PromptsSection,
    pub gradcheck: GradcheckSection,
    /// Element type of saved checkpoints; training always runs in f64.
    pub checkpoint_dtype: DType,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: SynthConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            fusion: FusionWeights::default(),
            metrics: MetricsSection::default(),
            prompts: PromptsSection::default(),
            gradcheck: GradcheckSection::default(),
            checkpoint_dtype: DType::F64,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    /// Checks every section and replaces a plain-text prompt section by its
    /// parsed catalog, so equivalent documents hash identically.
    pub fn resolve(mut self) -> Result<Self, String> {
        let catalog = self.prompts.catalog().map_err(|e| format!("prompts: {e}"))?;
        self.prompts = PromptsSection::Catalog(catalog);
        self.data.validate().map_err(|e| format!("data: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        self.fusion.validate().map_err(|e| format!("fusion: {e}"))?;
        check_limits(&self.metrics.fpr_limits).map_err(|e| format!("metrics: {e}"))?;
        if self.gradcheck.seeds.is_empty() {
            return Err("gradcheck: seeds must not be empty".into());
        }
        self.arch(self.data.d_rgb, self.data.d_3d, self.data.classes.clone())
            .validate()
            .map_err(|e| format!("model: {e}"))?;
        Ok(self)
    }

    pub fn catalog(&self) -> PromptCatalog {
        self.prompts.catalog().expect("resolved configs hold a valid catalog")
    }

    pub fn arch(&self, d_rgb: usize, d_3d: usize, classes: Vec<String>) -> ModelArch {
        ModelArch {
            d_rgb,
            d_3d,
            d_text: self.model.d_text,
            n_experts: self.model.n_experts,
            top_k: self.model.top_k,
            dropout_rate: self.train.dropout_rate,
            mapper: self.model.mapper,
            embed_seed: self.model.embed_seed,
            classes,
            catalog: self.prompts.catalog().unwrap_or_default(),
        }
    }

    /// First [`HASH_LEN`] hex digits of the SHA-256 of the compact JSON
    /// serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h = hex::encode(Sha256::digest(&bytes));
        h.truncate(HASH_LEN);
        h
    }
}

pub fn check_limits(limits: &[f64]) -> Result<(), String> {
    if limits.is_empty() {
        return Err("at least one FPR limit is required".into());
    }
    match limits.iter().find(|l| !(l.is_finite() && **l > 0.0 && **l <= 1.0)) {
        Some(l) => Err(format!("FPR limit {l} outside (0, 1]")),
        None => Ok(()),
    }
}
