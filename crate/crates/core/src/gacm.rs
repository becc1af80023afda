//! Geometry-aware cross-modal mapper: predicts 3D-modality patch features
//! from RGB patch features.
//!
//! The RGB feature is split into a semantic and a geometric branch by two
//! linear embeddings. A sigmoid gate computed from the geometric branch
//! blends the two, the blend passes through layer norm and GELU, and a
//! linear residual from the RGB input is added on top.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Bound, FeatureGrid, LayerNormParams, LinearParams, ParamId, ParameterStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GacmParams {
    pub phi_s: LinearParams,
    pub phi_g: LinearParams,
    pub w_gate: LinearParams,
    pub ln: LayerNormParams,
    pub residual: LinearParams,
}

impl GacmParams {
    /// Uniform fan-in branches and gate weight, zero biases, unit LN gain,
    /// residual set to the (zero-padded) identity.
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_rgb: usize,
        d_3d: usize,
    ) -> Result<Self> {
        let phi_s = LinearParams::init(store, rng, &format!("{prefix}.phi_s"), d_rgb, d_3d, true)?;
        let phi_g = LinearParams::init(store, rng, &format!("{prefix}.phi_g"), d_rgb, d_3d, true)?;
        let w_gate = LinearParams::init(store, rng, &format!("{prefix}.w_gate"), d_3d, d_3d, true)?;
        let ln = LayerNormParams::init(store, &format!("{prefix}.ln"), d_3d)?;
        let residual = LinearParams::from_tensors(
            store,
            &format!("{prefix}.residual"),
            Tensor::eye(d_rgb, d_3d),
            Some(Tensor::zeros(vec![d_3d])),
        )?;
        Ok(Self {
            phi_s,
            phi_g,
            w_gate,
            ln,
            residual,
        })
    }

    /// Residual = identity, every other weight and bias zero.
    pub fn pass_through<T: Scalar>(store: &mut ParameterStore<T>, prefix: &str, d: usize) -> Result<Self> {
        let zero_linear = |store: &mut ParameterStore<T>, name: &str| {
            LinearParams::from_tensors(
                store,
                &format!("{prefix}.{name}"),
                Tensor::zeros(vec![d, d]),
                Some(Tensor::zeros(vec![d])),
            )
        };
        let phi_s = zero_linear(store, "phi_s")?;
        let phi_g = zero_linear(store, "phi_g")?;
        let w_gate = zero_linear(store, "w_gate")?;
        let ln = LayerNormParams::init(store, &format!("{prefix}.ln"), d)?;
        let residual = LinearParams::from_tensors(
            store,
            &format!("{prefix}.residual"),
            Tensor::eye(d, d),
            Some(Tensor::zeros(vec![d])),
        )?;
        Ok(Self {
            phi_s,
            phi_g,
            w_gate,
            ln,
            residual,
        })
    }

    pub fn d_rgb(&self) -> usize {
        self.phi_s.d_in
    }

    pub fn d_3d(&self) -> usize {
        self.phi_s.d_out
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.phi_s.ids();
        ids.extend(self.phi_g.ids());
        ids.extend(self.w_gate.ids());
        ids.extend([self.ln.gain, self.ln.shift]);
        ids.extend(self.residual.ids());
        ids
    }

    /// `(F_sem, F_geo)` = `(φ_s(F_rgb), φ_g(F_rgb))` per patch.
    pub fn bifurcate<T: Scalar>(&self, p: &Bound<'_, T>, f_rgb: Var) -> Result<(Var, Var)> {
        Ok((self.phi_s.forward(p, f_rgb)?, self.phi_g.forward(p, f_rgb)?))
    }

    /// Geometry prior gate `σ(W_g F_geo + b_g)`.
    pub fn gate<T: Scalar>(&self, p: &Bound<'_, T>, f_geo: Var) -> Result<Var> {
        let logits = self.w_gate.forward(p, f_geo)?;
        Ok(p.graph.sigmoid(logits))
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, f_rgb: Var) -> Result<Var> {
        let (f_sem, f_geo) = self.bifurcate(p, f_rgb)?;
        let g = self.gate(p, f_geo)?;
        let fused = fuse(p, f_sem, f_geo, g)?;
        let normed = self.ln.forward(p, fused)?;
        let mimic = p.graph.gelu(normed);
        let res = self.residual.forward(p, f_rgb)?;
        p.graph.add(res, mimic)
    }
}

/// `F_geo ⊙ G + F_sem ⊙ (1 − G)`.
pub fn fuse<T: Scalar>(p: &Bound<'_, T>, f_sem: Var, f_geo: Var, gate: Var) -> Result<Var> {
    let g = p.graph;
    let geo_part = g.mul(f_geo, gate)?;
    let complement = g.affine(gate, -T::one(), T::one());
    let sem_part = g.mul(f_sem, complement)?;
    g.add(geo_part, sem_part)
}

pub fn gacm_bifurcate<T: Scalar>(
    store: &ParameterStore<T>,
    params: &GacmParams,
    f_rgb: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, FeatureGrid<T>)> {
    let sem = store.eval(|p| Ok(params.bifurcate(p, p.graph.leaf(f_rgb.clone()))?.0))?;
    let geo = store.eval(|p| Ok(params.bifurcate(p, p.graph.leaf(f_rgb.clone()))?.1))?;
    Ok((sem, geo))
}

pub fn gacm_gate<T: Scalar>(store: &ParameterStore<T>, params: &GacmParams, f_geo: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    store.eval(|p| params.gate(p, p.graph.leaf(f_geo.clone())))
}

pub fn gacm_fuse<T: Scalar>(f_sem: &FeatureGrid<T>, f_geo: &FeatureGrid<T>, gate: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    f_sem.expect_same_shape(f_geo, "gacm_fuse branches")?;
    f_sem.expect_same_shape(gate, "gacm_fuse gate")?;
    ParameterStore::new().eval(|p| {
        let g = p.graph;
        fuse(p, g.leaf(f_sem.clone()), g.leaf(f_geo.clone()), g.leaf(gate.clone()))
    })
}

/// `F_rgb→3d = R(F_rgb) + GELU(LN(F_fused))`.
pub fn gacm_forward<T: Scalar>(store: &ParameterStore<T>, params: &GacmParams, f_rgb: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    store.eval(|p| params.forward(p, p.graph.leaf(f_rgb.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use rand::SeedableRng;

    fn grid(h: usize, w: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::numerics::params::uniform_fan_in(&mut rng, vec![h, w, d], 1)
    }

    #[test]
    fn equal_branches_give_equal_outputs() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = GacmParams::init(&mut store, &mut rng, "g", 3, 5).unwrap();
        let w = store.get(params.phi_s.weight).clone();
        store.set("g.phi_g.weight", w).unwrap();
        let (sem, geo) = gacm_bifurcate(&store, &params, &grid(2, 2, 3, 9)).unwrap();
        assert_eq!(sem, geo);
    }

    #[test]
    fn zero_weights_give_constant_bias_grids() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = GacmParams::init(&mut store, &mut rng, "g", 2, 2).unwrap();
        store.set("g.phi_s.weight", Tensor::zeros(vec![2, 2])).unwrap();
        store.set("g.phi_g.weight", Tensor::zeros(vec![2, 2])).unwrap();
        store.set("g.phi_s.bias", Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap()).unwrap();
        store.set("g.phi_g.bias", Tensor::from_f64(vec![2], &[0.5, 2.0]).unwrap()).unwrap();
        let (sem, geo) = gacm_bifurcate(&store, &params, &grid(3, 2, 2, 4)).unwrap();
        for r in 0..6 {
            assert_eq!(sem.row(r), &[1.0, -1.0]);
            assert_eq!(geo.row(r), &[0.5, 2.0]);
        }
    }

    #[test]
    fn bifurcate_matches_hand_product() {
        let mut store = ParameterStore::<f64>::new();
        let ws = Tensor::from_f64(vec![2, 3], &[1.0, 0.0, 2.0, -1.0, 0.5, 1.0]).unwrap();
        let wg = Tensor::from_f64(vec![2, 3], &[0.0, 1.0, 1.0, 3.0, 0.0, -2.0]).unwrap();
        let bs = Tensor::from_f64(vec![3], &[0.1, 0.2, 0.3]).unwrap();
        let phi_s = LinearParams::from_tensors(&mut store, "s", ws, Some(bs)).unwrap();
        let phi_g = LinearParams::from_tensors(&mut store, "g", wg, Some(Tensor::zeros(vec![3]))).unwrap();
        let w_gate = LinearParams::from_tensors(&mut store, "w", Tensor::zeros(vec![3, 3]), None).unwrap();
        let ln = LayerNormParams::init(&mut store, "ln", 3).unwrap();
        let residual = LinearParams::from_tensors(&mut store, "r", Tensor::eye(2, 3), None).unwrap();
        let params = GacmParams {
            phi_s,
            phi_g,
            w_gate,
            ln,
            residual,
        };
        let x = Tensor::from_f64(vec![1, 1, 2], &[0.7, -0.4]).unwrap();
        let (sem, geo) = gacm_bifurcate(&store, &params, &x).unwrap();
        // 0.7·row0 − 0.4·row1 (+bias)
        let sem_expect = [0.7 + 0.4 + 0.1, -0.2 + 0.2, 1.4 - 0.4 + 0.3];
        let geo_expect = [-1.2, 0.7, 0.7 + 0.8];
        for (a, b) in sem.data().iter().zip(sem_expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in geo.data().iter().zip(geo_expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_examples() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = GacmParams::init(&mut store, &mut rng, "g", 2, 2).unwrap();
        store.set("g.w_gate.weight", Tensor::zeros(vec![2, 2])).unwrap();
        let gate = gacm_gate(&store, &params, &grid(2, 2, 2, 3)).unwrap();
        assert!(gate.data().iter().all(|&v| v == 0.5));

        store.set("g.w_gate.bias", Tensor::from_f64(vec![2], &[1.0, 800.0]).unwrap()).unwrap();
        let gate = gacm_gate(&store, &params, &grid(1, 1, 2, 3)).unwrap();
        assert!((gate.data()[0] - 0.73106).abs() < 1e-5);
        assert_eq!(gate.data()[1], 1.0);
    }

    #[test]
    fn fuse_examples() {
        let s = |v: f64| Tensor::full(vec![1, 1, 1], v);
        assert_eq!(gacm_fuse(&s(4.0), &s(2.0), &s(1.0)).unwrap().data(), &[2.0]);
        assert_eq!(gacm_fuse(&s(4.0), &s(2.0), &s(0.5)).unwrap().data(), &[3.0]);
        assert_eq!(gacm_fuse(&s(4.0), &s(2.0), &s(0.25)).unwrap().data(), &[3.5]);
        assert!(gacm_fuse(&s(4.0), &Tensor::zeros(vec![1, 1, 2]), &s(0.5)).is_err());
    }

    #[test]
    fn constant_fused_reduces_to_residual() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = GacmParams::init(&mut store, &mut rng, "g", 3, 4).unwrap();
        // Both branches emit the same constant vector per patch.
        for name in ["g.phi_s.weight", "g.phi_g.weight"] {
            store.set(name, Tensor::zeros(vec![3, 4])).unwrap();
        }
        for name in ["g.phi_s.bias", "g.phi_g.bias"] {
            store.set(name, Tensor::full(vec![4], 0.8)).unwrap();
        }
        let x = grid(2, 2, 3, 11);
        let out = gacm_forward(&store, &params, &x).unwrap();
        let res = ops::linear_forward(&x, &Tensor::eye(3, 4), None).unwrap();
        assert!(out.max_abs_diff(&res) < 1e-12);
    }

    #[test]
    fn pass_through_is_identity() {
        let mut store = ParameterStore::<f64>::new();
        let params = GacmParams::pass_through(&mut store, "g", 4).unwrap();
        let x = grid(2, 3, 4, 8);
        assert_eq!(gacm_forward(&store, &params, &x).unwrap(), x);
    }

    #[test]
    fn composed_oracle_on_single_patch() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = GacmParams::init(&mut store, &mut rng, "g", 2, 3).unwrap();
        let x = Tensor::from_f64(vec![1, 1, 2], &[0.3, -1.1]).unwrap();
        let out = gacm_forward(&store, &params, &x).unwrap();

        let lin = |l: &LinearParams, v: &Tensor<f64>| {
            ops::linear_forward(v, store.get(l.weight), l.bias.map(|b| store.get(b))).unwrap()
        };
        let sem = lin(&params.phi_s, &x);
        let geo = lin(&params.phi_g, &x);
        let gate = ops::sigmoid(&lin(&params.w_gate, &geo));
        let fused: Vec<f64> = (0..3)
            .map(|i| geo.data()[i] * gate.data()[i] + sem.data()[i] * (1.0 - gate.data()[i]))
            .collect();
        let mean = fused.iter().sum::<f64>() / 3.0;
        let var = fused.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        let res = lin(&params.residual, &x);
        for i in 0..3 {
            let ln = (fused[i] - mean) / (var + 1e-5).sqrt();
            let expect = res.data()[i] + ops::gelu_scalar(ln);
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
    }
}
