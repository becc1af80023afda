//! Finite-difference checks of each trainable module in isolation.
//!
//! The objective is half the mean squared distance between the module
//! output and a fixed Gaussian target. A random linear functional instead
//! leaves some coordinates with gradients cancelled below the resolution
//! of central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gacm::GacmParams;
use crate::numerics::gradcheck::finite_diff_gradient_check;
use crate::numerics::{Bound, GradCheckReport, ParameterStore, Tensor, Var};
use crate::octa::{build_prompts, MoeParams, Mode, PrototypeParams, TextEmbedder};
use crate::projectors::MlpParams;
use crate::synthdata::derive_seed;
use crate::trainer::{run_gradcheck, GradCheckConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckTarget {
    Gacm,
    /// The 3D→RGB, RGB→text and 3D→text projectors together.
    Projectors,
    /// MoE plus prototype block, dropout off.
    Octa,
    /// Batch `L_total` through the whole model.
    EndToEnd,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 4] = [
        CheckTarget::Gacm,
        CheckTarget::Projectors,
        CheckTarget::Octa,
        CheckTarget::EndToEnd,
    ];
}

const TAG_PARAMS: u64 = 31;
const TAG_INPUT: u64 = 32;

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect())
}

/// `mean((out − Y)²) / 2` with `Y` drawn from `rng` to match `out`.
fn contract(p: &Bound<'_, f64>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let g = p.graph;
    let y = g.leaf(gaussian(rng, g.shape(out))?);
    let d = g.sub(out, y)?;
    Ok(g.affine(g.mean(g.mul(d, d)?), 0.5, 0.0))
}

pub fn run_module_gradcheck(target: CheckTarget, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    if target == CheckTarget::EndToEnd {
        return run_gradcheck(cfg, None);
    }
    let mut store = ParameterStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_PARAMS]));
    let mut input = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_INPUT]));
    let (h, w) = (cfg.height, cfg.width);
    let eps = cfg.epsilon;
    match target {
        CheckTarget::Gacm => {
            let gacm = GacmParams::init(&mut store, &mut rng, "gacm", cfg.d_rgb, cfg.d_3d)?;
            let x = gaussian(&mut input, vec![h, w, cfg.d_rgb])?;
            let seed = input.clone();
            finite_diff_gradient_check(&store, eps, |p| {
                let out = gacm.forward(p, p.graph.leaf(x.clone()))?;
                contract(p, out, &mut seed.clone())
            })
        }
        CheckTarget::Projectors => {
            let pairs = [
                ("proj_3d_rgb", cfg.d_3d, cfg.d_rgb),
                ("proj_rgb_text", cfg.d_rgb, cfg.d_text),
                ("proj_3d_text", cfg.d_3d, cfg.d_text),
            ];
            let mut parts = Vec::new();
            for (name, d_in, d_out) in pairs {
                let mlp = MlpParams::init(&mut store, &mut rng, name, d_in, d_out)?;
                parts.push((mlp, gaussian(&mut input, vec![h, w, d_in])?));
            }
            let seed = input.clone();
            finite_diff_gradient_check(&store, eps, |p| {
                let mut r = seed.clone();
                let mut total: Option<Var> = None;
                for (mlp, x) in &parts {
                    let term = contract(p, mlp.forward(p, p.graph.leaf(x.clone()))?, &mut r)?;
                    total = Some(match total {
                        Some(t) => p.graph.add(t, term)?,
                        None => term,
                    });
                }
                Ok(total.expect("three projectors"))
            })
        }
        CheckTarget::Octa => {
            let moe = MoeParams::init(&mut store, &mut rng, "octa.moe", cfg.d_text, cfg.n_experts, cfg.top_k)?;
            let proto = PrototypeParams::init(&mut store, &mut rng, "octa.proto", cfg.d_text, 0.0)?;
            let sentences = build_prompts("bagel", &GradCheckConfig::catalog())?;
            let t: Tensor<f64> = cfg.embedder().embed(&sentences)?;
            let seed = input.clone();
            finite_diff_gradient_check(&store, eps, |p| {
                let t_hat = moe.forward(p, p.graph.leaf(t.clone()))?;
                let anchor = proto.forward(p, t_hat, &mut Mode::Eval)?;
                contract(p, anchor, &mut seed.clone())
            })
        }
        CheckTarget::EndToEnd => unreachable!("handled above"),
    }
}
