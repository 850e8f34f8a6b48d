//! Executable F-blocks and downsampling layers.
//!
//! Both record their computation into an [`autodiff::Graph`](crate::autodiff::Graph).
//! Plain evaluation records into a throwaway graph, so evaluated and recorded
//! values come from the same code path and agree bit for bit.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::reversible::Block;
use crate::rewiring::{BlockKind, BlockSpec, DownsampleSpec, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// An F-block bound to its parameter values.
#[derive(Clone, Debug)]
pub struct FBlock<S> {
    spec: BlockSpec,
    params: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> FBlock<S> {
    pub fn new(spec: &BlockSpec, store: &ParameterStore<S>) -> Result<Self> {
        let params = spec
            .param_names
            .iter()
            .map(|n| Ok((n.clone(), store.require(n)?.clone())))
            .collect::<Result<_>>()?;
        Ok(Self { spec: spec.clone(), params })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    /// Records `F(x)` into `g` and returns the output handle.
    pub fn record(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let p: Vec<Var> = self.params.iter().map(|(n, t)| g.param(n, t.clone())).collect();
        let eps = S::of(LAYERNORM_EPS);
        match self.spec.kind {
            BlockKind::ConvNormRelu => {
                let k = self.spec.kernel.unwrap_or(1);
                let h = g.conv1d(x, p[0], 1, k / 2)?;
                let h = g.add_bias(h, p[1])?;
                let h = g.layernorm(h, p[2], p[3], eps)?;
                Ok(g.relu(h))
            }
            BlockKind::Mlp => {
                let h = g.layernorm(x, p[0], p[1], eps)?;
                let h = g.linear(h, p[2], p[3])?;
                let h = g.gelu(h);
                g.linear(h, p[4], p[5])
            }
            BlockKind::Attention => {
                let h = g.layernorm(x, p[0], p[1], eps)?;
                let q = g.matmul(h, p[2])?;
                let k = g.matmul(h, p[3])?;
                let v = g.matmul(h, p[4])?;
                let heads = self.spec.heads.unwrap_or(1);
                let o = if heads == 1 {
                    g.attention(q, k, v)?
                } else {
                    let d = self.spec.channels / heads;
                    let mut outs = Vec::with_capacity(heads);
                    for i in 0..heads {
                        let (a, b) = (i * d, (i + 1) * d);
                        let qi = g.columns(q, a, b)?;
                        let ki = g.columns(k, a, b)?;
                        let vi = g.columns(v, a, b)?;
                        outs.push(g.attention(qi, ki, vi)?);
                    }
                    g.concat_columns(&outs)?
                };
                g.linear(o, p[5], p[6])
            }
        }
    }

    /// Records `F(x)` on a fresh graph whose only input is `x`.
    pub fn record_fresh(&self, x: &Tensor<S>) -> Result<(Graph<S>, Var, Var)> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = self.record(&mut g, xi)?;
        Ok((g, xi, y))
    }
}

impl<S: Scalar> Block<S> for FBlock<S> {
    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (g, _, y) = self.record_fresh(x)?;
        Ok(g.into_value(y))
    }
}

/// Strided convolution plus bias between stages.
#[derive(Clone, Debug)]
pub struct DownsampleLayer<S> {
    spec: DownsampleSpec,
    weight: (String, Tensor<S>),
    bias: (String, Tensor<S>),
}

impl<S: Scalar> DownsampleLayer<S> {
    pub fn new(spec: &DownsampleSpec, store: &ParameterStore<S>) -> Result<Self> {
        let w = &spec.param_names[0];
        let b = &spec.param_names[1];
        Ok(Self {
            spec: spec.clone(),
            weight: (w.clone(), store.require(w)?.clone()),
            bias: (b.clone(), store.require(b)?.clone()),
        })
    }

    pub fn spec(&self) -> &DownsampleSpec {
        &self.spec
    }

    pub fn record(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight.0, self.weight.1.clone());
        let b = g.param(&self.bias.0, self.bias.1.clone());
        let h = g.conv1d(x, w, self.spec.stride, self.spec.padding())?;
        g.add_bias(h, b)
    }

    pub fn record_fresh(&self, x: &Tensor<S>) -> Result<(Graph<S>, Var, Var)> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = self.record(&mut g, xi)?;
        Ok((g, xi, y))
    }
}
