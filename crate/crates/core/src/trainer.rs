//! Unified multi-class training loop and the end-to-end gradient check.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::mask::ValidityMask;
use crate::model::{MapperKind, Model, ModelArch};
use crate::numerics::gradcheck::{analytic_gradients, compare_with_finite_differences, GradCheckReport};
use crate::numerics::{Bound, Graph, ParameterStore, Scalar, Tensor, Var};
use crate::octa::{GaussianEmbedder, Mode, PromptCatalog, TextEmbedder};
use crate::synthdata::{derive_seed, LabeledSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout_rate: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout_rate: 0.1,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) {
            return Err(Error::invalid(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        self.loss.validate()
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Per-tensor update counts; a tensor skipped by the non-finite filter
    /// does not advance its bias correction.
    pub t: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        Self {
            m: store.tensors().iter().map(Tensor::zeros_like).collect(),
            v: store.tensors().iter().map(Tensor::zeros_like).collect(),
            t: vec![0; store.len()],
        }
    }

    /// Updates every tensor whose index is not in `skip`.
    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &[Tensor<T>], cfg: &TrainConfig, skip: &[usize]) {
        let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
        let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.adam_eps));
        for (i, (param, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            if skip.contains(&i) {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (p, &gj)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Zeroes every gradient tensor with a non-finite entry. Returns the
/// indices that were zeroed; finite tensors are left untouched.
pub fn filter_nonfinite<T: Scalar>(store: &ParameterStore<T>, grads: &mut [Tensor<T>]) -> Vec<usize> {
    let mut zeroed = Vec::new();
    for (id, g) in store.ids().zip(grads.iter_mut()) {
        if !g.all_finite() {
            log::warn!("non-finite gradient in `{}`; tensor zeroed for this step", store.name(id));
            *g = Tensor::zeros_like(g);
            zeroed.push(id.index());
        }
    }
    zeroed
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub l_vis: f64,
    pub l_text: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_vis: f64,
    pub l_text: f64,
    pub l_total: f64,
}

/// Batch-mean losses as graph nodes `(total, vis, text)`.
///
/// Each class anchor is computed once per batch, in order of first
/// appearance, so dropout draws are reproducible.
pub fn batch_loss_vars<T: Scalar>(
    model: &Model<T>,
    p: &Bound<'_, T>,
    batch: &[&LabeledSample<T>],
    weights: &LossWeights,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var, Var)> {
    batch_loss_vars_with(model, p, batch, weights, &model.embedder, mode)
}

/// [`batch_loss_vars`] with prompts embedded by `embedder`.
pub fn batch_loss_vars_with<T: Scalar>(
    model: &Model<T>,
    p: &Bound<'_, T>,
    batch: &[&LabeledSample<T>],
    weights: &LossWeights,
    embedder: &dyn TextEmbedder<T>,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var, Var)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let g = p.graph;
    let mut anchors: Vec<(&str, Var)> = Vec::new();
    let mut vis: Option<Var> = None;
    let mut text: Option<Var> = None;
    for s in batch {
        if s.is_anomalous {
            return Err(Error::AnomalousTrainingSample(s.class_name.clone()));
        }
        let anchor = match anchors.iter().find(|(c, _)| *c == s.class_name) {
            Some(&(_, v)) => v,
            None => {
                let v = model.anchor_var_with(p, &s.class_name, embedder, mode)?;
                anchors.push((&s.class_name, v));
                v
            }
        };
        let l = model.sample_loss_vars(p, &s.f_rgb, &s.f_3d, &s.mask, anchor, weights)?;
        if l.empty_mask {
            log::warn!("sample of class `{}` has an empty validity mask", s.class_name);
        }
        vis = Some(match vis {
            Some(acc) => g.add(acc, l.l_vis)?,
            None => l.l_vis,
        });
        text = Some(match text {
            Some(acc) => g.add(acc, l.l_text)?,
            None => l.l_text,
        });
    }
    let inv = T::of(1.0 / batch.len() as f64);
    let vis = g.affine(vis.expect("nonempty batch"), inv, T::zero());
    let text = g.affine(text.expect("nonempty batch"), inv, T::zero());
    Ok((g.add(vis, text)?, vis, text))
}

/// Loss of a batch without building gradients.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[&LabeledSample<T>],
    weights: &LossWeights,
    mode: &mut Mode<'_>,
) -> Result<StepLoss> {
    let g = Graph::new();
    let p = model.store.bind(&g);
    let (total, vis, text) = batch_loss_vars(model, &p, batch, weights, mode)?;
    Ok(StepLoss {
        l_vis: g.scalar(vis).to_f64_lossy(),
        l_text: g.scalar(text).to_f64_lossy(),
        l_total: g.scalar(total).to_f64_lossy(),
    })
}

pub fn compute_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[&LabeledSample<T>],
    weights: &LossWeights,
    mode: &mut Mode<'_>,
) -> Result<(StepLoss, Vec<Tensor<T>>)> {
    let g = Graph::new();
    let p = model.store.bind(&g);
    let (total, vis, text) = batch_loss_vars(model, &p, batch, weights, mode)?;
    let loss = StepLoss {
        l_vis: g.scalar(vis).to_f64_lossy(),
        l_text: g.scalar(text).to_f64_lossy(),
        l_total: g.scalar(total).to_f64_lossy(),
    };
    if !loss.l_total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", loss.l_total)));
    }
    let mut grads = g.backward(total)?;
    Ok((loss, p.collect(&mut grads)))
}

/// Filters non-finite gradients and applies one Adam update. Zeroed
/// tensors are left unchanged, moments included. Returns their indices.
pub fn apply_gradients<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    mut grads: Vec<Tensor<T>>,
    cfg: &TrainConfig,
) -> Vec<usize> {
    let skipped = filter_nonfinite(&model.store, &mut grads);
    opt.step(&mut model.store, &grads, cfg, &skipped);
    skipped
}

/// One optimizer step on `batch`. The step runs with `cfg.dropout_rate`,
/// which is also recorded in the model architecture.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    batch: &[&LabeledSample<T>],
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    model.set_dropout_rate(cfg.dropout_rate)?;
    let (loss, grads) = compute_gradients(model, batch, &cfg.loss, &mut Mode::Train(dropout_rng))?;
    apply_gradients(model, opt, grads, cfg);
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub log: Vec<LossRecord>,
}

const TAG_SHUFFLE: u64 = 11;
const TAG_DROPOUT: u64 = 12;

/// Runs `cfg.steps` steps over `data` with seeded reshuffling each epoch.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    data: &[LabeledSample<T>],
    seed: u64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for s in data {
        if s.is_anomalous {
            return Err(Error::AnomalousTrainingSample(s.class_name.clone()));
        }
        model.class_index(&s.class_name)?;
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SHUFFLE]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_DROPOUT]));
    let mut opt = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let l = train_step(&mut model, &mut opt, &batch, cfg, &mut dropout_rng)?;
        log::debug!("step {step}: L_vis {:.5} L_text {:.5} L_total {:.5}", l.l_vis, l.l_text, l.l_total);
        log.push(LossRecord {
            step,
            l_vis: l.l_vis,
            l_text: l.l_text,
            l_total: l.l_total,
        });
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        log,
    })
}

/// Tiny end-to-end problem for the gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub d_rgb: usize,
    pub d_3d: usize,
    pub d_text: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub mapper: MapperKind,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            height: 2,
            width: 2,
            d_rgb: 4,
            d_3d: 6,
            d_text: 8,
            n_experts: 3,
            top_k: 2,
            mapper: MapperKind::Gacm,
            epsilon: crate::numerics::gradcheck::DEFAULT_EPSILON,
            tolerance: crate::numerics::gradcheck::DEFAULT_TOLERANCE,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.height, self.width, self.d_rgb, self.d_3d, self.d_text, self.n_experts];
        if dims.iter().any(|&d| d == 0 || d > 8) {
            return Err(Error::invalid("gradient-check dimensions must lie in 1..=8"));
        }
        if self.d_3d < 2 || self.d_text < 2 {
            return Err(Error::invalid("d_3d and d_text must be at least 2"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::invalid("need 1 <= top_k <= n_experts"));
        }
        Ok(())
    }

    /// Three states by two templates keeps the prompt set at six sentences.
    pub fn catalog() -> PromptCatalog {
        let full = PromptCatalog::default();
        PromptCatalog {
            states: full.states[..3].to_vec(),
            templates: full.templates.clone(),
        }
    }

    /// Independent Gaussian prompt embeddings. Hashed token sums make the
    /// prompts of a class nearly collinear, which leaves the attention-key
    /// gradients below the resolution of central differences at ε = 1e-5.
    pub fn embedder(&self) -> GaussianEmbedder {
        GaussianEmbedder {
            dim: self.d_text,
            seed: self.seed,
            std: 2.0,
        }
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            d_rgb: self.d_rgb,
            d_3d: self.d_3d,
            d_text: self.d_text,
            n_experts: self.n_experts,
            top_k: self.top_k,
            dropout_rate: 0.0,
            mapper: self.mapper,
            embed_seed: self.seed,
            classes: vec!["bagel".into(), "carrot".into()],
            catalog: Self::catalog(),
        }
    }

    /// Two Gaussian samples of different classes; the second has one
    /// invalid pixel.
    pub fn batch(&self) -> Result<Vec<LabeledSample<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[99]));
        let mut grid = |d: usize| -> Result<Tensor<f64>> {
            let n = self.height * self.width * d;
            let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(vec![self.height, self.width, d], data)
        };
        let mut out = Vec::new();
        for (i, class) in ["bagel", "carrot"].iter().enumerate() {
            let mut mask = ValidityMask::filled(self.height, self.width, true);
            if i == 1 && self.height * self.width > 1 {
                mask.set(0, 0, false);
            }
            out.push(LabeledSample {
                class_name: class.to_string(),
                f_rgb: grid(self.d_rgb)?,
                f_3d: grid(self.d_3d)?,
                gt: ValidityMask::filled(self.height, self.width, false),
                mask,
                is_anomalous: false,
            });
        }
        Ok(out)
    }
}

/// Optional corruption of one analytic gradient, for negative controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientCorruption {
    pub parameter: String,
    pub factor: f64,
}

/// Finite-difference check of the batch `L_total` w.r.t. every trainable
/// tensor, with dropout disabled.
pub fn run_gradcheck(cfg: &GradCheckConfig, corruption: Option<&GradientCorruption>) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = Model::<f64>::init(cfg.arch(), cfg.seed)?;
    let samples = cfg.batch()?;
    let batch: Vec<&LabeledSample<f64>> = samples.iter().collect();
    let weights = LossWeights::default();
    let embedder = cfg.embedder();
    let objective = |p: &Bound<'_, f64>| -> Result<Var> {
        Ok(batch_loss_vars_with(&model, p, &batch, &weights, &embedder, &mut Mode::Eval)?.0)
    };
    let (_, mut analytic) = analytic_gradients(&model.store, &objective)?;
    if let Some(c) = corruption {
        let id = model
            .store
            .id(&c.parameter)
            .ok_or_else(|| Error::UnknownParameter(c.parameter.clone()))?;
        let t = &mut analytic[id.index()];
        *t = t.map(|v| v * c.factor);
    }
    compare_with_finite_differences(&model.store, &analytic, cfg.epsilon, &objective)
}
