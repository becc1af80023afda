//! Forward kernels and their analytic backward rules.
//!
//! Every reduction runs in a fixed index order so results are bitwise
//! reproducible for a given input.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;

fn out_shape(x: &[usize], last: usize) -> Vec<usize> {
    let mut s = x.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
}

/// `x · w` applied along the trailing axis of `x`; `w` is `K×N`.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 {
        return Err(Error::invalid(format!("weight must be rank 2, got {:?}", w.shape())));
    }
    let (k, n) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != k {
        return Err(Error::DimensionMismatch {
            context: "matmul inner extent",
            expected: k,
            found: x.last_dim(),
        });
    }
    let m = x.rows();
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &a) in xd[i * k..(i + 1) * k].iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            let wrow = &wd[kk * n..(kk + 1) * n];
            for (o, &b) in orow.iter_mut().zip(wrow) {
                *o += a * b;
            }
        }
    }
    Tensor::new(out_shape(x.shape(), n), out)
}

/// Gradients of `matmul` w.r.t. `x` and `w`.
pub fn matmul_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let m = x.rows();
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::zero(); m * k];
    let mut dw = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for kk in 0..k {
            let wrow = &wd[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&g, &b) in grow.iter().zip(wrow) {
                acc += g * b;
            }
            dx[i * k + kk] = acc;
            let a = xd[i * k + kk];
            let dwrow = &mut dw[kk * n..(kk + 1) * n];
            for (d, &g) in dwrow.iter_mut().zip(grow) {
                *d += a * g;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(vec![k, n], dw).expect("shape preserved"),
    )
}

/// `a · bᵀ` for `a: M×K`, `b: N×K`.
pub fn matmul_transposed<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.last_dim() != b.last_dim() {
        return Err(Error::DimensionMismatch {
            context: "matmul_transposed inner extent",
            expected: b.last_dim(),
            found: a.last_dim(),
        });
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(dot(a.row(i), b.row(j)));
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn matmul_transposed_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, n, k) = (a.rows(), b.rows(), a.last_dim());
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); n * k];
    for i in 0..m {
        for j in 0..n {
            let g = dy.data()[i * n + j];
            for t in 0..k {
                da[i * k + t] += g * b.data()[j * k + t];
                db[j * k + t] += g * a.data()[i * k + t];
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), da).expect("shape preserved"),
        Tensor::new(b.shape().to_vec(), db).expect("shape preserved"),
    )
}

pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if bias.len() != d {
        return Err(Error::DimensionMismatch {
            context: "bias width",
            expected: d,
            found: bias.len(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Column sums of `dy`, the bias gradient.
pub fn add_bias_backward<T: Scalar>(dy: &Tensor<T>, bias_shape: &[usize]) -> Tensor<T> {
    let d = dy.last_dim();
    let mut db = vec![T::zero(); d];
    for row in dy.data().chunks(d) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Tensor::new(bias_shape.to_vec(), db).expect("bias shape")
}

/// `y = x·W + b` along the trailing axis.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let y = matmul(x, weight)?;
    match bias {
        Some(b) => add_bias(&y, b),
        None => Ok(y),
    }
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, "sigmoid backward", |s, g| g * s * (T::one() - s))
        .expect("shapes agree")
}

/// Standard normal CDF.
pub fn normal_cdf<T: Scalar>(v: T) -> T {
    T::of(0.5) * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_scalar<T: Scalar>(v: T) -> T {
    v * normal_cdf(v)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
    x.zip_map(dy, "gelu backward", |v, g| {
        let pdf = inv_sqrt_2pi * (-(v * v) * T::of(0.5)).exp();
        g * (normal_cdf(v) + v * pdf)
    })
    .expect("shapes agree")
}

fn check_ln<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<usize> {
    let d = x.last_dim();
    if d < 2 {
        return Err(Error::invalid(format!("layer_norm needs width >= 2, got {d}")));
    }
    for (p, ctx) in [(gain, "layer_norm gain width"), (shift, "layer_norm shift width")] {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                context: ctx,
                expected: d,
                found: p.len(),
            });
        }
    }
    Ok(d)
}

/// Per-vector standardization along the trailing axis followed by `gain`/`shift`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = check_ln(x, gain, shift)?;
    let inv_d = T::one() / T::of(d as f64);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        for ((v, &g), &s) in row.iter_mut().zip(gain.data()).zip(shift.data()) {
            *v = (*v - mean) * inv_std * g + s;
        }
    }
    Ok(out)
}

/// Returns `(dx, dgain, dshift)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = x.last_dim();
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = Vec::with_capacity(x.len());
    let mut dgain = vec![T::zero(); d];
    let mut dshift = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (row, grow) in x.data().chunks(d).zip(dy.data().chunks(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv_std;
            dxhat[j] = grow[j] * gain.data()[j];
            dgain[j] += grow[j] * xhat[j];
            dshift[j] += grow[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for j in 0..d {
            dx.push(inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(gain.shape().to_vec(), dgain).expect("shape preserved"),
        Tensor::new(gain.shape().to_vec(), dshift).expect("shape preserved"),
    )
}

/// Softmax along the trailing axis with max subtraction.
pub fn softmax_row<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_row_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = y.last_dim();
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(d).zip(dy.data().chunks(d)) {
        let s = dot(yr, gr);
        dx.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - s)));
    }
    Tensor::new(y.shape().to_vec(), dx).expect("shape preserved")
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `a·b / (max(‖a‖,eps)·max(‖b‖,eps))`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T], eps: T) -> T {
    assert_eq!(a.len(), b.len(), "cosine_similarity operands differ in length");
    let na = norm(a).max(eps);
    let nb = norm(b).max(eps);
    dot(a, b) / (na * nb)
}

/// Gradients of `cosine_similarity` scaled by upstream `g`, accumulated into `da`/`db`.
pub fn cosine_similarity_backward<T: Scalar>(a: &[T], b: &[T], eps: T, g: T, da: &mut [T], db: &mut [T]) {
    let ra = norm(a);
    let rb = norm(b);
    let na = ra.max(eps);
    let nb = rb.max(eps);
    let ab = dot(a, b);
    let denom = na * nb;
    let c = ab / denom;
    // d/da of ab/(na nb): b/(na nb) - c a / na² when the norm is unclamped.
    let a_term = if ra > eps { c / (na * na) } else { T::zero() };
    let b_term = if rb > eps { c / (nb * nb) } else { T::zero() };
    for i in 0..a.len() {
        da[i] += g * (b[i] / denom - a_term * a[i]);
        db[i] += g * (a[i] / denom - b_term * b[i]);
    }
}

/// L2 distance between two equal-length vectors.
pub fn euclidean_distance<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "euclidean_distance",
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(x
        .iter()
        .zip(y)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
        .sqrt())
}

/// Selected column indices per row, highest logit first; ties go to the lower index.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| {
        row[j]
            .partial_cmp(&row[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(k);
    idx
}

/// Dense gate weights: softmax over the `k` selected logits of each row, zero elsewhere.
pub fn top_k_softmax<T: Scalar>(logits: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
    let e = logits.last_dim();
    if k == 0 || k > e {
        return Err(Error::invalid(format!("top-k selection needs 1 <= k <= {e}, got {k}")));
    }
    let mut out = Tensor::zeros_like(logits);
    let mut selection = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let sel = top_k_indices(row, k);
        let mut w: Vec<T> = sel.iter().map(|&i| row[i]).collect();
        softmax_in_place(&mut w);
        for (&i, &v) in sel.iter().zip(&w) {
            out.data_mut()[r * e + i] = v;
        }
        selection.push(sel);
    }
    Ok((out, selection))
}

pub fn top_k_softmax_backward<T: Scalar>(y: &Tensor<T>, selection: &[Vec<usize>], dy: &Tensor<T>) -> Tensor<T> {
    let e = y.last_dim();
    let mut dx = Tensor::zeros_like(y);
    for (r, sel) in selection.iter().enumerate() {
        let base = r * e;
        let s = sel
            .iter()
            .fold(T::zero(), |acc, &i| acc + y.data()[base + i] * dy.data()[base + i]);
        for &i in sel {
            let p = y.data()[base + i];
            dx.data_mut()[base + i] = p * (dy.data()[base + i] - s);
        }
    }
    dx
}
