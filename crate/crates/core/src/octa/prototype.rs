//! Prototype cross-attention and the FFN refinement that turns a set of
//! text embeddings into a single anchor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    params::uniform_fan_in, Bound, LayerNormParams, LinearParams, ParamId, ParameterStore, Scalar, Tensor, Var,
};
use crate::projectors::MlpParams;

/// Forward mode. Training draws dropout masks from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeParams {
    pub prototype: ParamId,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub scale: f64,
    pub post_mlp: MlpParams,
    pub ffn: MlpParams,
    pub final_ln: LayerNormParams,
    pub dropout_rate: f64,
}

impl PrototypeParams {
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        dropout_rate: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let prototype = store.register(format!("{prefix}.prototype"), uniform_fan_in(rng, vec![1, d], d))?;
        let wq = LinearParams::init(store, rng, &format!("{prefix}.wq"), d, d, false)?;
        let wk = LinearParams::init(store, rng, &format!("{prefix}.wk"), d, d, false)?;
        let wv = LinearParams::init(store, rng, &format!("{prefix}.wv"), d, d, false)?;
        let post_mlp = MlpParams::init(store, rng, &format!("{prefix}.post_mlp"), d, d)?;
        let ffn = MlpParams::init(store, rng, &format!("{prefix}.ffn"), d, d)?;
        let final_ln = LayerNormParams::init(store, &format!("{prefix}.final_ln"), d)?;
        Ok(Self {
            prototype,
            wq,
            wk,
            wv,
            scale: (d as f64).sqrt(),
            post_mlp,
            ffn,
            final_ln,
            dropout_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.d_in
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.prototype];
        for l in [&self.wq, &self.wk, &self.wv] {
            ids.extend(l.ids());
        }
        ids.extend(self.post_mlp.ids());
        ids.extend(self.ffn.ids());
        ids.extend([self.final_ln.gain, self.final_ln.shift]);
        ids
    }

    /// Returns `F_p` (1×D) and the 1×N attention weights.
    pub fn attend<T: Scalar>(&self, p: &Bound<'_, T>, t_hat: Var) -> Result<(Var, Var)> {
        let g = p.graph;
        let q = self.wq.forward(p, p.var(self.prototype))?;
        let k = self.wk.forward(p, t_hat)?;
        let v = self.wv.forward(p, t_hat)?;
        let scores = g.affine(g.matmul_t(q, k)?, T::of(1.0 / self.scale), T::zero());
        let attn = g.softmax(scores);
        Ok((g.matmul(attn, v)?, attn))
    }

    pub fn refine<T: Scalar>(&self, p: &Bound<'_, T>, f_p: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let g = p.graph;
        let f_hat = self.post_mlp.forward(p, g.add(p.var(self.prototype), f_p)?)?;
        let mut h = self.ffn.forward(p, f_hat)?;
        if let Mode::Train(rng) = mode {
            if self.dropout_rate > 0.0 {
                let keep = 1.0 - self.dropout_rate;
                let shape = g.shape(h);
                let n: usize = shape.iter().product();
                let mask: Vec<T> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { T::of(1.0 / keep) } else { T::zero() })
                    .collect();
                h = g.mul(h, g.leaf(Tensor::new(shape, mask)?))?;
            }
        }
        self.final_ln.forward(p, g.add(f_hat, h)?)
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, t_hat: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let (f_p, _) = self.attend(p, t_hat)?;
        self.refine(p, f_p, mode)
    }
}

/// Returns `(F_p, attention weights)`.
pub fn prototype_attention<T: Scalar>(
    store: &ParameterStore<T>,
    params: &PrototypeParams,
    t_hat: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = crate::numerics::Graph::new();
    let p = store.bind(&g);
    let (f, a) = params.attend(&p, g.leaf(t_hat.clone()))?;
    Ok((g.value(f), g.value(a)))
}

pub fn octa_refine<T: Scalar>(
    store: &ParameterStore<T>,
    params: &PrototypeParams,
    f_p: &Tensor<T>,
    mode: &mut Mode<'_>,
) -> Result<Tensor<T>> {
    store.eval(|p| params.refine(p, p.graph.leaf(f_p.clone()), mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use rand::SeedableRng;

    fn setup(d: usize) -> (ParameterStore<f64>, PrototypeParams) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = PrototypeParams::init(&mut store, &mut rng, "proto", d, 0.0).unwrap();
        (store, p)
    }

    fn t_hat(n: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        uniform_fan_in(&mut rng, vec![n, d], 1)
    }

    #[test]
    fn scale_is_sqrt_dim() {
        let (_, p) = setup(16);
        assert_eq!(p.scale, 4.0);
    }

    #[test]
    fn single_key_gets_full_weight() {
        let (store, p) = setup(3);
        let t = t_hat(1, 3);
        let (f, a) = prototype_attention(&store, &p, &t).unwrap();
        assert_eq!(a.data(), &[1.0]);
        let expect = ops::matmul(&t, store.get(p.wv.weight)).unwrap();
        assert!(f.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn zero_query_is_uniform() {
        let (mut store, p) = setup(3);
        store.set("proto.wq.weight", Tensor::zeros(vec![3, 3])).unwrap();
        let t = t_hat(4, 3);
        let (f, a) = prototype_attention(&store, &p, &t).unwrap();
        for &w in a.data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let v = ops::matmul(&t, store.get(p.wv.weight)).unwrap();
        for j in 0..3 {
            let mean = (0..4).map(|r| v.row(r)[j]).sum::<f64>() / 4.0;
            assert!((f.data()[j] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn two_keys_match_hand_oracle() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PrototypeParams::init(&mut store, &mut rng, "proto", 2, 0.0).unwrap();
        store.set("proto.prototype", Tensor::from_f64(vec![1, 2], &[1.0, -0.5]).unwrap()).unwrap();
        store.set("proto.wq.weight", Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.5, 2.0]).unwrap()).unwrap();
        store.set("proto.wk.weight", Tensor::from_f64(vec![2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        store.set("proto.wv.weight", Tensor::from_f64(vec![2, 2], &[2.0, 0.0, 0.0, -1.0]).unwrap()).unwrap();
        p.scale = 2.0_f64.sqrt();
        let t = Tensor::from_f64(vec![2, 2], &[0.3, 0.7, -0.2, 0.4]).unwrap();
        let (f, a) = prototype_attention(&store, &p, &t).unwrap();
        // q = (1,-0.5)·Wq = (0.75, -1); k rows swap coordinates.
        let q = [0.75, -1.0];
        let keys = [[0.7, 0.3], [0.4, -0.2]];
        let s: Vec<f64> = keys.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) / 2.0_f64.sqrt()).collect();
        let w = ops::softmax_row(&Tensor::<f64>::from_f64(vec![1, 2], &s).unwrap());
        let vals: [[f64; 2]; 2] = [[0.6, -0.7], [-0.4, -0.4]];
        for j in 0..2 {
            let e = w.data()[0] * vals[0][j] + w.data()[1] * vals[1][j];
            assert!((f.data()[j] - e).abs() < 1e-14);
        }
        assert!(a.max_abs_diff(&w) < 1e-15);
        assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dead_ffn_reduces_to_layer_norm() {
        let (mut store, p) = setup(4);
        store.set("proto.ffn.layer2.weight", Tensor::zeros(vec![4, 4])).unwrap();
        store.set("proto.ffn.layer1.weight", Tensor::zeros(vec![4, 4])).unwrap();
        let f_p = t_hat(1, 4);
        let out = octa_refine(&store, &p, &f_p, &mut Mode::Eval).unwrap();
        let sum = ops::add_bias(&f_p, &store.get(p.prototype).clone().reshape(vec![4]).unwrap()).unwrap();
        let f_hat = crate::projectors::project(&store, &p.post_mlp, &sum).unwrap();
        let expect = ops::layer_norm(
            &f_hat,
            store.get(p.final_ln.gain),
            store.get(p.final_ln.shift),
            p.final_ln.eps,
        )
        .unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn cancelled_input_leaves_bias_path() {
        let (mut store, p) = setup(3);
        store.set("proto.post_mlp.layer2.weight", Tensor::zeros(vec![3, 3])).unwrap();
        store.set("proto.post_mlp.layer2.bias", Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        let neg_p = store.get(p.prototype).map(|v| -v);
        let f_hat = store
            .eval(|b| p.post_mlp.forward(b, b.graph.add(b.var(p.prototype), b.graph.leaf(neg_p.clone()))?))
            .unwrap();
        assert_eq!(f_hat.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn dropout_is_seeded_and_eval_is_identity() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = PrototypeParams::init(&mut store, &mut rng, "proto", 6, 0.5).unwrap();
        let f_p = t_hat(1, 6);
        let e1 = octa_refine(&store, &p, &f_p, &mut Mode::Eval).unwrap();
        let e2 = octa_refine(&store, &p, &f_p, &mut Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let t1 = octa_refine(&store, &p, &f_p, &mut Mode::Train(&mut r1)).unwrap();
        let t2 = octa_refine(&store, &p, &f_p, &mut Mode::Train(&mut r2)).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, e1);
    }
}
