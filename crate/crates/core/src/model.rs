//! The full detection head: cross-modal mapper, projectors, text adaptor,
//! and per-sample losses and anomaly maps.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gacm::GacmParams;
use crate::loss::{text_loss_var, visual_loss_var, LossWeights};
use crate::mask::ValidityMask;
use crate::numerics::{Bound, FeatureGrid, Graph, ParamId, ParameterStore, Scalar, Tensor, Var};
use crate::octa::{HashEmbedder, Mode, MoeParams, OctaParams, PromptCatalog, PrototypeParams, TextEmbedder};
use crate::projectors::MlpParams;
use crate::scoring::{fuse, image_score, psi_3d, psi_rgb, psi_text, AnomalyMap, FusionWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapperKind {
    Gacm,
    Mlp,
}

/// Everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub d_rgb: usize,
    pub d_3d: usize,
    pub d_text: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub dropout_rate: f64,
    pub mapper: MapperKind,
    pub embed_seed: u64,
    pub classes: Vec<String>,
    pub catalog: PromptCatalog,
}

impl ModelArch {
    /// Default sizes: 4 experts, top-2, 16-wide text space, GACM mapper,
    /// dropout 0.1 and the default prompt catalog.
    pub fn new(d_rgb: usize, d_3d: usize, classes: Vec<String>) -> Self {
        Self {
            d_rgb,
            d_3d,
            d_text: 16,
            n_experts: 4,
            top_k: 2,
            dropout_rate: 0.1,
            mapper: MapperKind::Gacm,
            embed_seed: 0,
            classes,
            catalog: PromptCatalog::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_rgb == 0 || self.d_3d == 0 || self.d_text < 2 {
            return Err(Error::invalid("feature widths must be positive and d_text >= 2"));
        }
        if self.d_3d < 2 {
            return Err(Error::invalid("d_3d must be at least 2 for layer norm"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::invalid(format!(
                "need 1 <= top_k <= n_experts, got top_k={} n_experts={}",
                self.top_k, self.n_experts
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("model needs at least one class"));
        }
        self.catalog.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mapper {
    Gacm(GacmParams),
    Mlp(MlpParams),
}

impl Mapper {
    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, f_rgb: Var) -> Result<Var> {
        match self {
            Mapper::Gacm(g) => g.forward(p, f_rgb),
            Mapper::Mlp(m) => m.forward(p, f_rgb),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Mapper::Gacm(g) => g.ids(),
            Mapper::Mlp(m) => m.ids(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub store: ParameterStore<T>,
    pub arch: ModelArch,
    pub mapper: Mapper,
    pub three_d_to_rgb: MlpParams,
    pub rgb_to_text: MlpParams,
    pub three_d_to_text: MlpParams,
    pub octa: OctaParams,
    pub embedder: HashEmbedder,
}

/// Graph nodes of the four mapped feature grids of one sample.
#[derive(Clone, Copy, Debug)]
pub struct MappedVars {
    pub rgb_to_3d: Var,
    pub three_d_to_rgb: Var,
    pub rgb_to_text: Var,
    pub three_d_to_text: Var,
}

/// Loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleLossVars {
    pub l_vis: Var,
    pub l_text: Var,
    pub empty_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMaps<T> {
    pub psi_rgb: AnomalyMap<T>,
    pub psi_3d: AnomalyMap<T>,
    pub psi_text: AnomalyMap<T>,
    /// Fused map with invalid pixels set to 0.
    pub fused: AnomalyMap<T>,
    pub image_score: T,
}

impl<T: Scalar> Model<T> {
    /// Registers every tensor in a fixed order: mapper, 3D→RGB, RGB→text,
    /// 3D→text, MoE, prototype block.
    pub fn init(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mapper = match arch.mapper {
            MapperKind::Gacm => Mapper::Gacm(GacmParams::init(&mut store, &mut rng, "gacm", arch.d_rgb, arch.d_3d)?),
            MapperKind::Mlp => Mapper::Mlp(MlpParams::init(&mut store, &mut rng, "mlp_mapper", arch.d_rgb, arch.d_3d)?),
        };
        let three_d_to_rgb = MlpParams::init(&mut store, &mut rng, "proj_3d_rgb", arch.d_3d, arch.d_rgb)?;
        let rgb_to_text = MlpParams::init(&mut store, &mut rng, "proj_rgb_text", arch.d_rgb, arch.d_text)?;
        let three_d_to_text = MlpParams::init(&mut store, &mut rng, "proj_3d_text", arch.d_3d, arch.d_text)?;
        let moe = MoeParams::init(&mut store, &mut rng, "octa.moe", arch.d_text, arch.n_experts, arch.top_k)?;
        let proto = PrototypeParams::init(&mut store, &mut rng, "octa.proto", arch.d_text, arch.dropout_rate)?;
        Ok(Self {
            store,
            embedder: HashEmbedder::new(arch.d_text, arch.embed_seed),
            arch,
            mapper,
            three_d_to_rgb,
            rgb_to_text,
            three_d_to_text,
            octa: OctaParams { moe, proto },
        })
    }

    /// Rebuilds the layout from `arch` and fills it from `tensors`, which
    /// must name every parameter exactly once with matching shapes.
    pub fn from_tensors(arch: ModelArch, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::init(arch, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                tensors.len()
            )));
        }
        let mut seen = vec![false; model.store.len()];
        for (name, t) in tensors {
            let id = model.store.id(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Format(format!("parameter `{name}` appears twice")));
            }
            model.store.set(&name, t)?;
        }
        Ok(model)
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.arch.dropout_rate = rate;
        self.octa.proto.dropout_rate = rate;
        Ok(())
    }

    pub fn class_index(&self, class_name: &str) -> Result<usize> {
        self.arch
            .classes
            .iter()
            .position(|c| c == class_name)
            .ok_or_else(|| Error::UnknownClass(class_name.to_string()))
    }

    pub fn map_features(&self, p: &Bound<'_, T>, f_rgb: Var, f_3d: Var) -> Result<MappedVars> {
        Ok(MappedVars {
            rgb_to_3d: self.mapper.forward(p, f_rgb)?,
            three_d_to_rgb: self.three_d_to_rgb.forward(p, f_3d)?,
            rgb_to_text: self.rgb_to_text.forward(p, f_rgb)?,
            three_d_to_text: self.three_d_to_text.forward(p, f_3d)?,
        })
    }

    pub fn anchor_var(&self, p: &Bound<'_, T>, class_name: &str, mode: &mut Mode<'_>) -> Result<Var> {
        self.anchor_var_with(p, class_name, &self.embedder, mode)
    }

    /// Anchor of `class_name` with prompts embedded by `embedder`.
    pub fn anchor_var_with(
        &self,
        p: &Bound<'_, T>,
        class_name: &str,
        embedder: &dyn TextEmbedder<T>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.class_index(class_name)?;
        self.octa.anchor(p, class_name, &self.arch.catalog, embedder, mode)
    }

    pub fn sample_loss_vars(
        &self,
        p: &Bound<'_, T>,
        f_rgb: &FeatureGrid<T>,
        f_3d: &FeatureGrid<T>,
        mask: &ValidityMask,
        anchor: Var,
        weights: &LossWeights,
    ) -> Result<SampleLossVars> {
        let g = p.graph;
        let (vr, v3) = (g.leaf(f_rgb.clone()), g.leaf(f_3d.clone()));
        let m = self.map_features(p, vr, v3)?;
        let (l_vis, empty_mask) = visual_loss_var(g, vr, v3, m.rgb_to_3d, m.three_d_to_rgb, mask, weights)?;
        let (l_text, _) = text_loss_var(g, m.rgb_to_text, m.three_d_to_text, anchor, mask, weights)?;
        Ok(SampleLossVars {
            l_vis,
            l_text,
            empty_mask,
        })
    }

    /// Eval-mode text anchor of every class, keyed by name.
    pub fn anchors(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        self.arch
            .classes
            .iter()
            .map(|c| {
                let t = self.store.eval(|p| self.anchor_var(p, c, &mut Mode::Eval))?;
                Ok((c.clone(), t))
            })
            .collect()
    }

    /// Anomaly maps for one sample given its class anchor.
    pub fn score_with_anchor(
        &self,
        f_rgb: &FeatureGrid<T>,
        f_3d: &FeatureGrid<T>,
        mask: &ValidityMask,
        anchor: &Tensor<T>,
        fusion: &FusionWeights,
    ) -> Result<SampleMaps<T>> {
        let (h, w) = check_pair(f_rgb, f_3d, self.arch.d_rgb, self.arch.d_3d)?;
        mask.expect_dims(h, w, "validity mask")?;
        let g = Graph::new();
        let p = self.store.bind(&g);
        let m = self.map_features(&p, g.leaf(f_rgb.clone()), g.leaf(f_3d.clone()))?;
        let r = psi_rgb(f_rgb, &g.value(m.three_d_to_rgb))?;
        let d = psi_3d(f_3d, &g.value(m.rgb_to_3d))?;
        let t = psi_text(anchor, &g.value(m.rgb_to_text), &g.value(m.three_d_to_text))?;
        let fused = fuse(&r, &d, &t, fusion)?.masked(mask)?;
        let score = image_score(&fused, mask)?;
        Ok(SampleMaps {
            psi_rgb: r,
            psi_3d: d,
            psi_text: t,
            fused,
            image_score: score,
        })
    }

    pub fn score(
        &self,
        class_name: &str,
        f_rgb: &FeatureGrid<T>,
        f_3d: &FeatureGrid<T>,
        mask: &ValidityMask,
        fusion: &FusionWeights,
    ) -> Result<SampleMaps<T>> {
        let anchor = self.store.eval(|p| self.anchor_var(p, class_name, &mut Mode::Eval))?;
        self.score_with_anchor(f_rgb, f_3d, mask, &anchor, fusion)
    }
}

/// Checks that the two grids share `H×W` and have the expected widths.
pub fn check_pair<T: Scalar>(
    f_rgb: &FeatureGrid<T>,
    f_3d: &FeatureGrid<T>,
    d_rgb: usize,
    d_3d: usize,
) -> Result<(usize, usize)> {
    let (a, b) = (f_rgb.shape(), f_3d.shape());
    if a.len() != 3 || b.len() != 3 || a[..2] != b[..2] {
        return Err(Error::ShapeMismatch {
            context: "grid mismatch between RGB and 3D features",
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    if a[2] != d_rgb {
        return Err(Error::DimensionMismatch {
            context: "RGB feature width",
            expected: d_rgb,
            found: a[2],
        });
    }
    if b[2] != d_3d {
        return Err(Error::DimensionMismatch {
            context: "3D feature width",
            expected: d_3d,
            found: b[2],
        });
    }
    Ok((a[0], a[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_arch(mapper: MapperKind) -> ModelArch {
        ModelArch {
            d_rgb: 3,
            d_3d: 4,
            d_text: 4,
            n_experts: 2,
            top_k: 1,
            dropout_rate: 0.0,
            mapper,
            embed_seed: 1,
            classes: vec!["bagel".into(), "tire".into()],
            catalog: PromptCatalog::default(),
        }
    }

    #[test]
    fn init_is_deterministic_and_ordered() {
        let a = Model::<f64>::init(tiny_arch(MapperKind::Gacm), 3).unwrap();
        let b = Model::<f64>::init(tiny_arch(MapperKind::Gacm), 3).unwrap();
        assert_eq!(a.store.tensors(), b.store.tensors());
        assert_eq!(a.store.iter().next().unwrap().0, "gacm.phi_s.weight");
        let m = Model::<f64>::init(tiny_arch(MapperKind::Mlp), 3).unwrap();
        assert!(m.store.id("mlp_mapper.layer1.weight").is_some());
    }

    #[test]
    fn from_tensors_round_trips() {
        let a = Model::<f64>::init(tiny_arch(MapperKind::Gacm), 3).unwrap();
        let tensors: Vec<_> = a.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let b = Model::from_tensors(a.arch.clone(), tensors.clone()).unwrap();
        assert_eq!(a.store.tensors(), b.store.tensors());
        assert!(Model::<f64>::from_tensors(a.arch.clone(), tensors[1..].to_vec()).is_err());
    }

    #[test]
    fn unknown_class_is_named() {
        let a = Model::<f64>::init(tiny_arch(MapperKind::Gacm), 3).unwrap();
        let f = Tensor::zeros(vec![2, 2, 3]);
        let g = Tensor::zeros(vec![2, 2, 4]);
        match a.score("rope", &f, &g, &ValidityMask::filled(2, 2, true), &FusionWeights::default()) {
            Err(Error::UnknownClass(c)) => assert_eq!(c, "rope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn score_respects_mask_and_dims() {
        let a = Model::<f64>::init(tiny_arch(MapperKind::Gacm), 3).unwrap();
        let f = Tensor::full(vec![2, 2, 3], 0.3);
        let g = Tensor::full(vec![2, 2, 4], -0.2);
        let mut mask = ValidityMask::filled(2, 2, true);
        mask.set(1, 1, false);
        let s = a.score("bagel", &f, &g, &mask, &FusionWeights::default()).unwrap();
        assert_eq!(s.fused.get(1, 1), 0.0);
        let max = s.fused.data().iter().copied().fold(0.0, f64::max);
        assert_eq!(s.image_score, max);
        let bad = Tensor::full(vec![2, 3, 4], 0.0);
        assert!(a.score("bagel", &f, &bad, &mask, &FusionWeights::default()).is_err());
    }
}
