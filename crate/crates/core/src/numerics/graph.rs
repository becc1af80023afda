//! Reverse-mode tape over [`Tensor`] values.
//!
//! Each recorded node keeps its forward value and the op that produced it;
//! [`Graph::backward`] walks the tape in reverse and applies the analytic
//! rules from [`super::ops`].

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, eps: T },
    Softmax(Var),
    TopKSoftmax { x: Var, selection: Vec<Vec<usize>> },
    RowCosine { a: Var, b: Var, eps: T },
    BroadcastRows(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    ScaleRows(Var, Var),
    Column { x: Var, col: usize },
    Mean(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients indexed by [`Var`]; `None` for nodes the objective does not reach.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn with<R>(&self, vars: &[Var], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor<T>> = vars.iter().map(|v| &nodes[v.0].value).collect();
        f(&vals)
    }

    pub fn matmul(&self, x: Var, w: Var) -> Result<Var> {
        let y = self.with(&[x, w], |v| ops::matmul(v[0], v[1]))?;
        Ok(self.push(y, Op::MatMul(x, w)))
    }

    /// `a · bᵀ` for row-matrices `a: M×K`, `b: N×K`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.with(&[a, b], |v| ops::matmul_transposed(v[0], v[1]))?;
        Ok(self.push(y, Op::MatMulT(a, b)))
    }

    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let y = self.with(&[x, b], |v| ops::add_bias(v[0], v[1]))?;
        Ok(self.push(y, Op::AddBias(x, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.with(&[a, b], |v| v[0].zip_map(v[1], "add", |p, q| p + q))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.with(&[a, b], |v| v[0].zip_map(v[1], "sub", |p, q| p - q))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.with(&[a, b], |v| v[0].zip_map(v[1], "mul", |p, q| p * q))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Var {
        let y = self.with(&[x], |v| v[0].map(|p| scale * p + shift));
        self.push(y, Op::Affine { x, scale })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let y = self.with(&[x], |v| ops::sigmoid(v[0]));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let y = self.with(&[x], |v| ops::gelu(v[0]));
        self.push(y, Op::Gelu(x))
    }

    pub fn layer_norm(&self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let y = self.with(&[x, gain, shift], |v| ops::layer_norm(v[0], v[1], v[2], eps))?;
        Ok(self.push(y, Op::LayerNorm { x, gain, shift, eps }))
    }

    pub fn softmax(&self, x: Var) -> Var {
        let y = self.with(&[x], |v| ops::softmax_row(v[0]));
        self.push(y, Op::Softmax(x))
    }

    /// Dense gate weights with softmax over the `k` largest logits per row.
    /// Returns the node and the per-row selected indices.
    pub fn top_k_softmax(&self, x: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
        let (y, selection) = self.with(&[x], |v| ops::top_k_softmax(v[0], k))?;
        let out = self.push(
            y,
            Op::TopKSoftmax {
                x,
                selection: selection.clone(),
            },
        );
        Ok((out, selection))
    }

    /// Cosine similarity of matching rows, shape `[R]`.
    pub fn row_cosine(&self, a: Var, b: Var, eps: T) -> Result<Var> {
        let y = self.with(&[a, b], |v| -> Result<Tensor<T>> {
            v[0].expect_same_shape(v[1], "row_cosine")?;
            let sims = (0..v[0].rows())
                .map(|r| ops::cosine_similarity(v[0].row(r), v[1].row(r), eps))
                .collect();
            Tensor::new(vec![v[0].rows()], sims)
        })?;
        Ok(self.push(y, Op::RowCosine { a, b, eps }))
    }

    /// Repeats a `1×D` row `rows` times.
    pub fn broadcast_rows(&self, x: Var, rows: usize) -> Result<Var> {
        let y = self.with(&[x], |v| -> Result<Tensor<T>> {
            if v[0].rows() != 1 {
                return Err(Error::invalid("broadcast_rows expects a single row"));
            }
            let d = v[0].last_dim();
            let data = (0..rows).flat_map(|_| v[0].data().iter().copied()).collect();
            Tensor::new(vec![rows, d], data)
        })?;
        Ok(self.push(y, Op::BroadcastRows(x)))
    }

    /// Selects rows (vectors along the trailing axis) into an `R×D` matrix.
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let y = self.with(&[x], |v| -> Result<Tensor<T>> {
            let n = v[0].rows();
            if rows.is_empty() {
                return Err(Error::invalid("gather_rows needs at least one row"));
            }
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return Err(Error::invalid(format!("row {bad} out of range for {n} rows")));
            }
            let d = v[0].last_dim();
            let data = rows.iter().flat_map(|&r| v[0].row(r).iter().copied()).collect();
            Tensor::new(vec![rows.len(), d], data)
        })?;
        Ok(self.push(
            y,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Places the rows of `x` at `rows` of an otherwise-zero `n×D` matrix.
    pub fn scatter_rows(&self, x: Var, rows: &[usize], n: usize) -> Result<Var> {
        let y = self.with(&[x], |v| -> Result<Tensor<T>> {
            if v[0].rows() != rows.len() {
                return Err(Error::DimensionMismatch {
                    context: "scatter_rows row count",
                    expected: rows.len(),
                    found: v[0].rows(),
                });
            }
            let d = v[0].last_dim();
            let mut out = Tensor::zeros(vec![n, d]);
            for (i, &r) in rows.iter().enumerate() {
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(v[0].row(i));
            }
            Ok(out)
        })?;
        Ok(self.push(
            y,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Multiplies row `r` of `x: R×D` by `s[r]`.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let y = self.with(&[x, s], |v| -> Result<Tensor<T>> {
            if v[1].len() != v[0].rows() {
                return Err(Error::DimensionMismatch {
                    context: "scale_rows",
                    expected: v[0].rows(),
                    found: v[1].len(),
                });
            }
            let d = v[0].last_dim();
            let mut out = v[0].clone();
            for (row, &f) in out.data_mut().chunks_mut(d).zip(v[1].data()) {
                row.iter_mut().for_each(|e| *e *= f);
            }
            Ok(out)
        })?;
        Ok(self.push(y, Op::ScaleRows(x, s)))
    }

    /// Column `col` of an `N×E` matrix, shape `[N]`.
    pub fn column(&self, x: Var, col: usize) -> Result<Var> {
        let y = self.with(&[x], |v| -> Result<Tensor<T>> {
            let e = v[0].last_dim();
            if col >= e {
                return Err(Error::invalid(format!("column {col} out of range for width {e}")));
            }
            let data = (0..v[0].rows()).map(|r| v[0].row(r)[col]).collect();
            Tensor::new(vec![v[0].rows()], data)
        })?;
        Ok(self.push(y, Op::Column { x, col }))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&self, x: Var) -> Var {
        let y = self.with(&[x], |v| Tensor::scalar(v[0].sum() / T::of(v[0].len() as f64)));
        self.push(y, Op::Mean(x))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.with(&[x], |v| v[0].clone().reshape(shape))?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.len() != 1 {
            return Err(Error::invalid("backward needs a scalar objective"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape().to_vec(), T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(x, w) => {
                    let (dx, dw) = ops::matmul_backward(val(*x), val(*w), &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Op::MatMulT(a, b) => {
                    let (da, db) = ops::matmul_transposed_backward(val(*a), val(*b), &dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let db = ops::add_bias_backward(&dy, val(*b).shape());
                    acc(&mut grads, *x, dy);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dy.map(|g| -g));
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(val(*b), "mul backward", |g, q| g * q)?;
                    let db = dy.zip_map(val(*a), "mul backward", |g, p| g * p)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    acc(&mut grads, *x, dy.map(|g| g * s));
                }
                Op::Sigmoid(x) => acc(&mut grads, *x, ops::sigmoid_backward(&node.value, &dy)),
                Op::Gelu(x) => acc(&mut grads, *x, ops::gelu_backward(val(*x), &dy)),
                Op::LayerNorm { x, gain, shift, eps } => {
                    let (dx, dg, ds) = ops::layer_norm_backward(val(*x), val(*gain), *eps, &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *shift, ds);
                }
                Op::Softmax(x) => acc(&mut grads, *x, ops::softmax_row_backward(&node.value, &dy)),
                Op::TopKSoftmax { x, selection } => {
                    acc(&mut grads, *x, ops::top_k_softmax_backward(&node.value, selection, &dy))
                }
                Op::RowCosine { a, b, eps } => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut da = Tensor::zeros_like(av);
                    let mut db = Tensor::zeros_like(bv);
                    let d = av.last_dim();
                    for r in 0..av.rows() {
                        let (ra, rb) = (r * d, (r + 1) * d);
                        ops::cosine_similarity_backward(
                            av.row(r),
                            bv.row(r),
                            *eps,
                            dy.data()[r],
                            &mut da.data_mut()[ra..rb],
                            &mut db.data_mut()[ra..rb],
                        );
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::BroadcastRows(x) => {
                    let xv = val(*x);
                    let d = xv.last_dim();
                    let mut dx = Tensor::zeros_like(xv);
                    for row in dy.data().chunks(d) {
                        for (a, &g) in dx.data_mut().iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GatherRows { x, rows } => {
                    let xv = val(*x);
                    let d = xv.last_dim();
                    let mut dx = Tensor::zeros_like(xv);
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, &g) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(dy.row(i)) {
                            *a += g;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ScatterRows { x, rows } => {
                    let d = dy.last_dim();
                    let data = rows.iter().flat_map(|&r| dy.data()[r * d..(r + 1) * d].iter().copied()).collect();
                    acc(&mut grads, *x, Tensor::new(val(*x).shape().to_vec(), data)?);
                }
                Op::ScaleRows(x, s) => {
                    let (xv, sv) = (val(*x), val(*s));
                    let d = xv.last_dim();
                    let mut dx = dy.clone();
                    let mut ds = Tensor::zeros_like(sv);
                    for r in 0..xv.rows() {
                        let f = sv.data()[r];
                        ds.data_mut()[r] = ops::dot(dy.row(r), xv.row(r));
                        dx.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|g| *g *= f);
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *s, ds);
                }
                Op::Column { x, col } => {
                    let xv = val(*x);
                    let e = xv.last_dim();
                    let mut dx = Tensor::zeros_like(xv);
                    for (r, &g) in dy.data().iter().enumerate() {
                        dx.data_mut()[r * e + col] = g;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let g = dy.data()[0] / T::of(xv.len() as f64);
                    acc(&mut grads, *x, Tensor::full(xv.shape().to_vec(), g));
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(&mut grads, *x, dy.reshape(shape)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_rule() {
        // f = mean(sigmoid(2x)) at x=0 → df/dx = 2·0.25 = 0.5
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.affine(x, 2.0, 0.0);
        let s = g.sigmoid(y);
        let m = g.mean(s);
        let grads = g.backward(m).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shared_leaf_accumulates() {
        // f = x*x → 2x
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let unused = g.leaf(Tensor::scalar(2.0));
        let m = g.mean(x);
        let grads = g.backward(m).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }
}
