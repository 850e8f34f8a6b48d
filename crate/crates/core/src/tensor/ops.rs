//! Forward primitives. Every kernel sums in a fixed left-to-right order so that
//! recomputing a value reproduces it bit for bit.

use super::{same_shape, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Matrix product `[m×k] · [k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!(
            "matmul: inner dimensions differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!(
            "matmul_tn: leading dimensions differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return dim_err(format!(
            "matmul_nt: trailing dimensions differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out.push(s);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(d[i * n + j]);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Output length of a 1D convolution, or `None` when it would be non-positive.
pub fn conv1d_out_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = t + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn conv1d_dims<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (t, cin) = x.dims2()?;
    let (k, wcin, cout) = match w.shape() {
        [k, ci, co] => (*k, *ci, *co),
        s => return dim_err(format!("conv1d: weight must be K×Cin×Cout, got {s:?}")),
    };
    if wcin != cin {
        return dim_err(format!(
            "conv1d: input {:?} has {cin} channels, weight {:?} expects {wcin}",
            x.shape(),
            w.shape()
        ));
    }
    if stride == 0 {
        return dim_err("conv1d: stride must be >= 1");
    }
    match conv1d_out_len(t, k, stride, padding) {
        Some(t_out) => Ok((t, cin, k, cout, t_out)),
        None => dim_err(format!(
            "conv1d: non-positive output length for T={t}, K={k}, stride={stride}, padding={padding}"
        )),
    }
}

/// Temporal cross-correlation of `x: [T×Cin]` with `w: [K×Cin×Cout]`, zero padded.
pub fn conv1d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (t, cin, k, cout, t_out) = conv1d_dims(x, w, stride, padding)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![S::zero(); t_out * cout];
    for to in 0..t_out {
        let orow = &mut out[to * cout..(to + 1) * cout];
        for kk in 0..k {
            let src = (to * stride + kk) as isize - padding as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![t_out, cout], out))
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip(a, b, "add", |x, y| x + y)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip(a, b, "sub", |x, y| x - y)
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip(a, b, "mul", |x, y| x * y)
}

pub fn scale<S: Scalar>(a: &Tensor<S>, s: S) -> Tensor<S> {
    a.map(|v| v * s)
}

pub fn relu<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    a.map(|v| if v > S::zero() { v } else { S::zero() })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

pub(crate) fn gelu_deriv_scalar<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let x2 = x * x;
    let th = (c * (x + a * x2 * x)).tanh();
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * x * sech2 * c * (S::one() + S::of(3.0) * a * x2)
}

pub fn gelu<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    a.map(gelu_scalar)
}

pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Adds a `[C]` vector to every row of `x: [..×C]`.
pub fn add_bias<S: Scalar>(x: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let c = x.last_dim();
    if b.shape() != [c] {
        return dim_err(format!(
            "add_bias: bias {:?} does not match last axis of {:?}",
            b.shape(),
            x.shape()
        ));
    }
    let bd = b.data();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (o, &bv) in row.iter_mut().zip(bd) {
            *o += bv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Column sums of `x: [..×C]`, returned as `[C]`.
pub fn sum_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = x.last_dim();
    let mut out = vec![S::zero(); c];
    for row in x.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![c], out)
}

/// Columns `[start, end)` of a matrix.
pub fn columns<S: Scalar>(x: &Tensor<S>, start: usize, end: usize) -> Result<Tensor<S>> {
    let (r, c) = x.dims2()?;
    if start >= end || end > c {
        return dim_err(format!("columns: range {start}..{end} invalid for {c} columns"));
    }
    let mut out = Vec::with_capacity(r * (end - start));
    for row in x.data().chunks(c) {
        out.extend_from_slice(&row[start..end]);
    }
    Ok(Tensor::from_parts(vec![r, end - start], out))
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_columns<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let Some(first) = parts.first() else {
        return dim_err("concat_columns: no inputs");
    };
    let (r, _) = first.dims2()?;
    let mut total = 0;
    for p in parts {
        let (pr, pc) = p.dims2()?;
        if pr != r {
            return dim_err(format!("concat_columns: row counts {pr} vs {r}"));
        }
        total += pc;
    }
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![r, total], out))
}

/// Layer normalization over the last axis followed by an affine map.
pub fn layernorm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    layernorm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Layer normalization that also returns the per-row reciprocal standard deviation.
pub fn layernorm_with_stats<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return dim_err(format!(
            "layernorm: gamma {:?} / beta {:?} must be [{c}]",
            gamma.shape(),
            beta.shape()
        ));
    }
    if !(eps > S::zero()) {
        return dim_err("layernorm: eps must be positive");
    }
    let (g, b) = (gamma.data(), beta.data());
    let cs = S::of(c as f64);
    let rows = x.outer_len();
    let mut out = Vec::with_capacity(x.len());
    let mut rstds = Vec::with_capacity(rows);
    for row in x.data().chunks(c) {
        let mean = row.iter().fold(S::zero(), |a, &v| a + v) / cs;
        let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / cs;
        let rstd = S::one() / (var + eps).sqrt();
        for j in 0..c {
            out.push((row[j] - mean) * rstd * g[j] + b[j]);
        }
        rstds.push(rstd);
    }
    let stats_shape = if x.rank() == 1 { vec![1] } else { x.shape()[..x.rank() - 1].to_vec() };
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        Tensor::from_parts(stats_shape, rstds),
    ))
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, c) = x.dims2()?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let m = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let start = out.len();
        let mut z = S::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= z;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Single-head scaled dot-product attention, `softmax(q·kᵀ/√d)·v`.
pub fn softmax_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<Tensor<S>> {
    attention_with_probs(q, k, v).map(|(o, _)| o)
}

/// Attention output together with the `[T×T]` attention matrix.
pub fn attention_with_probs<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (tq, d) = q.dims2()?;
    let (tk, dk) = k.dims2()?;
    let (tv, dv) = v.dims2()?;
    if d != dk || tk != tv {
        return dim_err(format!(
            "attention: q {:?}, k {:?}, v {:?} are incompatible",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let _ = (tq, dv);
    let scores = scale(&matmul_nt(q, k)?, S::one() / S::of(d as f64).sqrt());
    let probs = softmax_rows(&scores)?;
    let out = matmul(&probs, v)?;
    Ok((out, probs))
}

fn zip<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    op: &str,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}
