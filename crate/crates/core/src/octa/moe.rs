//! Sparse Top-K mixture of experts over text embeddings.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Bound, LinearParams, ParamId, ParameterStore, Scalar, Tensor, Var};
use crate::projectors::MlpParams;

#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub experts: Vec<MlpParams>,
    pub gate: LinearParams,
    pub k: usize,
}

impl MoeParams {
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        n_experts: usize,
        k: usize,
    ) -> Result<Self> {
        if n_experts == 0 || k == 0 || k > n_experts {
            return Err(Error::invalid(format!("MoE needs 1 <= k <= E, got k={k}, E={n_experts}")));
        }
        let experts = (0..n_experts)
            .map(|i| MlpParams::init(store, rng, &format!("{prefix}.expert{i}"), d, d))
            .collect::<Result<Vec<_>>>()?;
        let gate = LinearParams::init(store, rng, &format!("{prefix}.gate"), d, n_experts, true)?;
        Ok(Self { experts, gate, k })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.experts.iter().flat_map(MlpParams::ids).collect();
        ids.extend(self.gate.ids());
        ids
    }

    /// Returns the mixed rows and, per row, the selected expert indices.
    ///
    /// An expert only runs on the rows that selected it, so experts outside
    /// every row's top-k never enter the graph.
    pub fn forward_with_selection<T: Scalar>(&self, p: &Bound<'_, T>, t: Var) -> Result<(Var, Vec<Vec<usize>>)> {
        let g = p.graph;
        let shape = g.shape(t);
        if shape.len() != 2 {
            return Err(Error::invalid("moe input must be N x D"));
        }
        let n = shape[0];
        let logits = self.gate.forward(p, t)?;
        let (weights, selection) = g.top_k_softmax(logits, self.k)?;
        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&r| selection[r].contains(&e)).collect();
            if rows.is_empty() {
                continue;
            }
            let x = g.gather_rows(t, &rows)?;
            let y = expert.forward(p, x)?;
            let col = g.reshape(g.column(weights, e)?, vec![n, 1])?;
            let w = g.reshape(g.gather_rows(col, &rows)?, vec![rows.len()])?;
            let contrib = g.scatter_rows(g.scale_rows(y, w)?, &rows, n)?;
            out = Some(match out {
                Some(acc) => g.add(acc, contrib)?,
                None => contrib,
            });
        }
        Ok((out.expect("every row selects at least one expert"), selection))
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, t: Var) -> Result<Var> {
        Ok(self.forward_with_selection(p, t)?.0)
    }
}

pub fn moe_forward<T: Scalar>(store: &ParameterStore<T>, params: &MoeParams, t: &Tensor<T>) -> Result<Tensor<T>> {
    store.eval(|p| params.forward(p, p.graph.leaf(t.clone())))
}
