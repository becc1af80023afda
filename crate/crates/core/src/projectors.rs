//! Two-layer MLP projectors between modality feature spaces.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Bound, FeatureGrid, LinearParams, ParamId, ParameterStore, Scalar, Var};

/// `layer2(gelu(layer1(x)))` applied per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layer1: LinearParams,
    pub layer2: LinearParams,
}

impl MlpParams {
    /// Hidden width is `max(d_in, d_out)`.
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let hidden = d_in.max(d_out);
        Ok(Self {
            layer1: LinearParams::init(store, rng, &format!("{prefix}.layer1"), d_in, hidden, true)?,
            layer2: LinearParams::init(store, rng, &format!("{prefix}.layer2"), hidden, d_out, true)?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.layer1.d_in
    }

    pub fn d_out(&self) -> usize {
        self.layer2.d_out
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.layer1.ids();
        ids.extend(self.layer2.ids());
        ids
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let h = self.layer1.forward(p, x)?;
        let h = p.graph.gelu(h);
        self.layer2.forward(p, h)
    }
}

pub fn project<T: Scalar>(store: &ParameterStore<T>, params: &MlpParams, f: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    store.eval(|p| params.forward(p, p.graph.leaf(f.clone())))
}
