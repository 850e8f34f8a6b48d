//! Vector-Jacobian products of the forward primitives.

use super::ops::{conv1d_dims, gelu_deriv_scalar, matmul, matmul_nt, matmul_tn, scale};
use super::{same_shape, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Gradient of `conv1d` with respect to its input.
pub fn conv1d_grad_input<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (t, cin, k, cout, t_out) = conv1d_dims(x, w, stride, padding)?;
    if dy.shape() != [t_out, cout] {
        return dim_err(format!("conv1d_grad_input: dy {:?} != [{t_out}, {cout}]", dy.shape()));
    }
    let (wd, gd) = (w.data(), dy.data());
    let mut dx = vec![S::zero(); t * cin];
    for to in 0..t_out {
        let grow = &gd[to * cout..(to + 1) * cout];
        for kk in 0..k {
            let src = (to * stride + kk) as isize - padding as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let s = src as usize;
            for ci in 0..cin {
                let wrow = &wd[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                let mut acc = S::zero();
                for (&g, &wv) in grow.iter().zip(wrow) {
                    acc += g * wv;
                }
                dx[s * cin + ci] += acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![t, cin], dx))
}

/// Gradient of `conv1d` with respect to its weight.
pub fn conv1d_grad_weight<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (t, cin, k, cout, t_out) = conv1d_dims(x, w, stride, padding)?;
    if dy.shape() != [t_out, cout] {
        return dim_err(format!("conv1d_grad_weight: dy {:?} != [{t_out}, {cout}]", dy.shape()));
    }
    let (xd, gd) = (x.data(), dy.data());
    let mut dw = vec![S::zero(); k * cin * cout];
    for to in 0..t_out {
        let grow = &gd[to * cout..(to + 1) * cout];
        for kk in 0..k {
            let src = (to * stride + kk) as isize - padding as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &mut dw[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                for (o, &g) in wrow.iter_mut().zip(grow) {
                    *o += xv * g;
                }
            }
        }
    }
    Ok(Tensor::from_parts(w.shape().to_vec(), dw))
}

pub fn relu_grad<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("relu_grad", x, dy)?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub fn gelu_grad<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("gelu_grad", x, dy)?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * gelu_deriv_scalar(v))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Gradients of layer normalization: `(dx, dgamma, dbeta)`.
///
/// `rstd` holds the per-row reciprocal standard deviation produced by the forward pass.
pub fn layernorm_grad<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    rstd: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    same_shape("layernorm_grad", x, dy)?;
    let c = x.last_dim();
    let rows = x.outer_len();
    if rstd.len() != rows || gamma.shape() != [c] {
        return dim_err("layernorm_grad: statistics do not match input");
    }
    let cs = S::of(c as f64);
    let g = gamma.data();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let mut xhat = vec![S::zero(); c];
    let mut dxhat = vec![S::zero(); c];
    for (r, (row, grow)) in x.data().chunks(c).zip(dy.data().chunks(c)).enumerate() {
        let rs = rstd.data()[r];
        let mean = row.iter().fold(S::zero(), |a, &v| a + v) / cs;
        let mut mean_d = S::zero();
        let mut mean_dx = S::zero();
        for j in 0..c {
            xhat[j] = (row[j] - mean) * rs;
            dxhat[j] = grow[j] * g[j];
            dgamma[j] += grow[j] * xhat[j];
            dbeta[j] += grow[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
        }
        mean_d /= cs;
        mean_dx /= cs;
        for j in 0..c {
            dx.push(rs * (dxhat[j] - mean_d - xhat[j] * mean_dx));
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

/// Gradients of single-head attention: `(dq, dk, dv)`.
pub fn attention_grad<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    probs: &Tensor<S>,
    dout: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (_, d) = q.dims2()?;
    let dv = matmul_tn(probs, dout)?;
    let dp = matmul_nt(dout, v)?;
    let (rows, cols) = probs.dims2()?;
    let mut ds = Vec::with_capacity(rows * cols);
    for (prow, drow) in probs.data().chunks(cols).zip(dp.data().chunks(cols)) {
        let dot = prow.iter().zip(drow).fold(S::zero(), |a, (&p, &g)| a + p * g);
        for (&p, &g) in prow.iter().zip(drow) {
            ds.push(p * (g - dot));
        }
    }
    let ds = scale(
        &Tensor::from_parts(vec![rows, cols], ds),
        S::one() / S::of(d as f64).sqrt(),
    );
    let dq = matmul(&ds, k)?;
    let dk = matmul_tn(&ds, q)?;
    Ok((dq, dk, dv))
}
