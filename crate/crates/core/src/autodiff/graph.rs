//! Operation-level reverse-mode recording.
//!
//! A [`Graph`] records every primitive applied to its leaves together with the
//! resulting value. [`Graph::backward`] walks the records in reverse order and
//! accumulates vector-Jacobian products. F-blocks, downsamplers, the
//! localization head and the losses are all expressed on top of it.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{self as t, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv1d { x: Var, w: Var, stride: usize, padding: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Attention { q: Var, k: Var, v: Var },
    Columns { x: Var, start: usize },
    Concat(Vec<Var>),
    Sum(Var),
    BceWithLogits { logits: Var, targets: Tensor<S> },
    MaskedL1 { pred: Var, target: Tensor<S>, mask: Tensor<S> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    aux: Option<Tensor<S>>,
}

/// Recorded computation over tensors of scalar type `S`.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, aux: Option<Tensor<S>>) -> Var {
        self.nodes.push(Node { op, value, aux });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<S> {
        self.nodes.swap_remove(v.0).value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameter leaves in recording order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Bytes held by recorded activations (everything but parameter leaves).
    pub fn cached_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Param))
            .map(|n| n.value.nbytes() + n.aux.as_ref().map_or(0, Tensor::nbytes))
            .sum()
    }

    /// Number of activation tensors held (values plus auxiliary statistics).
    pub fn cached_tensors(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Param))
            .map(|n| 1 + usize::from(n.aux.is_some()))
            .sum()
    }

    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Input, value, None)
    }

    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Var {
        let v = self.push(Op::Param, value, None);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = t::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), y, None))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = t::add_bias(self.value(x), self.value(b))?;
        Ok(self.push(Op::AddBias(x, b), y, None))
    }

    /// `x·w + b` for `x: [T×Cin]`, `w: [Cin×Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = t::conv1d(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(Op::Conv1d { x, w, stride, padding }, y, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = t::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), y, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = t::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), y, None))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let y = t::scale(self.value(a), s);
        self.push(Op::Scale(a, s), y, None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = t::relu(self.value(a));
        self.push(Op::Relu(a), y, None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = t::gelu(self.value(a));
        self.push(Op::Gelu(a), y, None)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (y, rstd) =
            t::layernorm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, y, Some(rstd)))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (y, p) = t::attention_with_probs(self.value(q), self.value(k), self.value(v))?;
        Ok(self.push(Op::Attention { q, k, v }, y, Some(p)))
    }

    pub fn columns(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = t::columns(self.value(x), start, end)?;
        Ok(self.push(Op::Columns { x, start }, y, None))
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = t::concat_columns(&vals)?;
        Ok(self.push(Op::Concat(parts.to_vec()), y, None))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), y, None)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<S>) -> Result<Var> {
        let z = self.value(logits);
        t::same_shape("bce_with_logits", z, &targets)?;
        let mut acc = S::zero();
        for (&zi, &ti) in z.data().iter().zip(targets.data()) {
            acc += bce_scalar(zi, ti);
        }
        let y = Tensor::scalar(acc / S::of(z.len() as f64));
        Ok(self.push(Op::BceWithLogits { logits, targets }, y, None))
    }

    /// `Σ mask·|pred − target| / max(Σ mask, 1)`.
    pub fn masked_l1(&mut self, pred: Var, target: Tensor<S>, mask: Tensor<S>) -> Result<Var> {
        let p = self.value(pred);
        t::same_shape("masked_l1", p, &target)?;
        t::same_shape("masked_l1", p, &mask)?;
        let mut acc = S::zero();
        for ((&pi, &ti), &mi) in p.data().iter().zip(target.data()).zip(mask.data()) {
            acc += mi * (pi - ti).abs();
        }
        let y = Tensor::scalar(acc / mask.sum().max(S::one()));
        Ok(self.push(Op::MaskedL1 { pred, target, mask }, y, None))
    }

    /// Reverse sweep from `out`, seeded with `seed` (same shape as `out`'s value).
    pub fn backward(&self, out: Var, seed: Tensor<S>) -> Result<Grads<S>> {
        if seed.shape() != self.value(out).shape() {
            return dim_err(format!(
                "backward: seed {:?} does not match output {:?}",
                seed.shape(),
                self.value(out).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = t::matmul_nt(&g, self.value(*b))?;
                    let db = t::matmul_tn(self.value(*a), &g)?;
                    acc(&mut grads, *a, da)?;
                    acc(&mut grads, *b, db)?;
                }
                Op::AddBias(x, b) => {
                    let db = t::sum_rows(&g);
                    acc(&mut grads, *x, g)?;
                    acc(&mut grads, *b, db)?;
                }
                Op::Conv1d { x, w, stride, padding } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let dx = t::conv1d_grad_input(xv, wv, &g, *stride, *padding)?;
                    let dw = t::conv1d_grad_weight(xv, wv, &g, *stride, *padding)?;
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *w, dw)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, t::scale(&g, -S::one()))?;
                }
                Op::Scale(a, s) => acc(&mut grads, *a, t::scale(&g, *s))?,
                Op::Relu(a) => {
                    let d = t::relu_grad(self.value(*a), &g)?;
                    acc(&mut grads, *a, d)?;
                }
                Op::Gelu(a) => {
                    let d = t::gelu_grad(self.value(*a), &g)?;
                    acc(&mut grads, *a, d)?;
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let rstd = node.aux.as_ref().expect("layernorm keeps its statistics");
                    let (dx, dg, db) =
                        t::layernorm_grad(self.value(*x), self.value(*gamma), rstd, &g)?;
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *gamma, dg)?;
                    acc(&mut grads, *beta, db)?;
                }
                Op::Attention { q, k, v } => {
                    let probs = node.aux.as_ref().expect("attention keeps its probabilities");
                    let (dq, dk, dv) = t::attention_grad(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                    )?;
                    acc(&mut grads, *q, dq)?;
                    acc(&mut grads, *k, dk)?;
                    acc(&mut grads, *v, dv)?;
                }
                Op::Columns { x, start } => {
                    let xv = self.value(*x);
                    let (r, c) = xv.dims2()?;
                    let w = g.last_dim();
                    let mut d = vec![S::zero(); r * c];
                    for (row, grow) in d.chunks_mut(c).zip(g.data().chunks(w)) {
                        row[*start..start + w].copy_from_slice(grow);
                    }
                    acc(&mut grads, *x, Tensor::from_parts(vec![r, c], d))?;
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).last_dim();
                        acc(&mut grads, p, t::columns(&g, off, off + w)?)?;
                        off += w;
                    }
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(&mut grads, *a, Tensor::filled(self.value(*a).shape(), s))?;
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits);
                    let k = g.data()[0] / S::of(z.len() as f64);
                    let d = z
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&zi, &ti)| (t::sigmoid_scalar(zi) - ti) * k)
                        .collect();
                    acc(&mut grads, *logits, Tensor::from_parts(z.shape().to_vec(), d))?;
                }
                Op::MaskedL1 { pred, target, mask } => {
                    let p = self.value(*pred);
                    let k = g.data()[0] / mask.sum().max(S::one());
                    let d = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .zip(mask.data())
                        .map(|((&pi, &ti), &mi)| {
                            let diff = pi - ti;
                            let sign = if diff > S::zero() {
                                S::one()
                            } else if diff < S::zero() {
                                -S::one()
                            } else {
                                S::zero()
                            };
                            sign * mi * k
                        })
                        .collect();
                    acc(&mut grads, *pred, Tensor::from_parts(p.shape().to_vec(), d))?;
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Numerically stable `max(z,0) − z·t + ln(1 + e^{−|z|})`.
pub(crate) fn bce_scalar<S: Scalar>(z: S, target: S) -> S {
    z.max(S::zero()) - z * target + (-z.abs()).exp().ln_1p()
}

fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            t::same_shape("gradient accumulation", existing, &g)?;
            for (e, &d) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_closed_form() {
        // y = x·W, seed g: dW = xᵀ·g
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let w = g.param("w", Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
        let grads = g.backward(y, Tensor::from_f64(&[1, 1], &[2.0]).unwrap()).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![1.5]));
        let y = g.add(x, x).unwrap();
        let z = g.sum(y);
        let grads = g.backward(z, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn bce_is_stable_and_correct() {
        assert!((bce_scalar(0.0f64, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_scalar(800.0f64, 1.0).abs() < 1e-12);
        assert!((bce_scalar(-800.0f64, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn cached_bytes_skip_params() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let gamma = g.param("g", Tensor::filled(&[3], 1.0));
        let beta = g.param("b", Tensor::zeros(&[3]));
        g.layernorm(x, gamma, beta, 1e-5).unwrap();
        // input 6 + output 6 + rstd 2 floats
        assert_eq!(g.cached_bytes(), 14 * 4);
        assert_eq!(g.cached_tensors(), 3);
    }

    #[test]
    fn seed_shape_checked() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.backward(x, Tensor::zeros(&[3])).is_err());
    }
}
