//! Named trainable tensors and their binding onto a [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Gradients, Graph, Var};
use crate::numerics::{Scalar, Tensor};

/// Index of a tensor inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Replaces the value of `name`, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        self.tensors[id.0].expect_same_shape(&value, "parameter assignment")?;
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Runs `f` on a throwaway graph and returns the value it produces.
    pub fn eval(&self, f: impl FnOnce(&Bound<'_, T>) -> Result<Var>) -> Result<Tensor<T>> {
        let graph = Graph::new();
        let bound = self.bind(&graph);
        let out = f(&bound)?;
        Ok(graph.value(out))
    }

    /// Records every parameter as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        let vars = self.tensors.iter().map(|t| graph.leaf(t.clone())).collect();
        Bound { graph, vars }
    }
}

/// A [`ParameterStore`] recorded onto a graph.
pub struct Bound<'g, T> {
    pub graph: &'g Graph<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order; unreached parameters get zeros.
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)))
            })
            .collect()
    }
}

/// Uniform `(−1/√fan_in, 1/√fan_in)` sample.
pub fn uniform_fan_in<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Affine map `x·W + b` along the trailing axis; handles into a store.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    /// Registers `{prefix}.weight` (uniform fan-in init) and, if requested, a zero `{prefix}.bias`.
    pub fn init<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = uniform_fan_in(rng, vec![d_in, d_out], d_in);
        let b = bias.then(|| Tensor::zeros(vec![d_out]));
        Self::from_tensors(store, prefix, w, b)
    }

    pub fn from_tensors<T: Scalar>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::invalid(format!("{prefix}: weight must be rank 2")));
        }
        let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = &bias {
            if b.shape() != [d_out] {
                return Err(Error::DimensionMismatch {
                    context: "linear bias width",
                    expected: d_out,
                    found: b.len(),
                });
            }
        }
        let weight = store.register(format!("{prefix}.weight"), weight)?;
        let bias = bias.map(|b| store.register(format!("{prefix}.bias"), b)).transpose()?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let y = p.graph.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => p.graph.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Layer-norm gain and shift of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParameterStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{prefix}.gain"), Tensor::full(vec![d], T::one()))?,
            shift: store.register(format!("{prefix}.shift"), Tensor::zeros(vec![d]))?,
            eps: super::ops::LAYER_NORM_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        p.graph
            .layer_norm(x, p.var(self.gain), p.var(self.shift), T::of(self.eps))
    }
}
