//! Reverse-mode differentiation of whole backbones.
//!
//! Two execution strategies share one forward code path:
//!
//! * [`ExecMode::CacheAll`] records every F-block on the tape, as ordinary
//!   backpropagation does.
//! * [`ExecMode::Reversible`] records nothing inside reversible stages. It keeps
//!   the two streams at each stage exit and, during backward, reconstructs every
//!   block input with the inverse step, re-recording one block at a time.
//!
//! Downsamplers and residual (non-rewired) stages are recorded in both modes.

mod graph;
mod numeric;

pub use graph::{Grads, Graph, Var};
pub use numeric::numerical_gradient;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, MemoryCategory, MemoryLedger};
use crate::error::{dim_err, Error, Result};
use crate::reversible::{average_outputs, duplicate_input, rev_step};
use crate::rewiring::{NetworkSpec, ParameterStore, Wiring};
use crate::scalar::Scalar;
use crate::tensor::{self as t, Tensor};

/// Gradients keyed by parameter name, one entry per trainable parameter.
pub type GradientMap<S> = ParameterStore<S>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    CacheAll,
    Reversible,
}

impl ExecMode {
    pub const ALL: [ExecMode; 2] = [ExecMode::CacheAll, ExecMode::Reversible];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecMode::CacheAll => "cache_all",
            ExecMode::Reversible => "reversible",
        }
    }
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExecMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cache_all" | "cacheall" => Ok(ExecMode::CacheAll),
            "reversible" => Ok(ExecMode::Reversible),
            other => Err(Error::Argument(format!(
                "unknown mode {other:?} (cache_all|reversible)"
            ))),
        }
    }
}

/// A block's recorded computation: graph, input handle, output handle.
#[derive(Debug)]
pub struct Recorded<S> {
    pub graph: Graph<S>,
    pub input: Var,
    pub output: Var,
}

impl<S: Scalar> Recorded<S> {
    fn bytes(&self) -> usize {
        self.graph.cached_bytes()
    }
}

/// One entry of a [`Tape`], in execution order.
#[derive(Debug)]
pub enum TapeNode<S> {
    Downsample { stage: usize, rec: Recorded<S> },
    /// `y = x + F(x)`; `rec` records `F`.
    Residual { stage: usize, block: usize, rec: Recorded<S> },
    /// Input duplication into two streams.
    RevEntry { stage: usize },
    /// One two-stream step; `rec` is `None` when the block was not cached.
    RevStep { stage: usize, block: usize, rec: Option<Recorded<S>> },
    /// Stream averaging; `streams` holds the cached `(r1, r2)` in reversible mode.
    RevExit { stage: usize, streams: Option<(Tensor<S>, Tensor<S>)> },
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug)]
pub struct Tape<S> {
    mode: ExecMode,
    spec: NetworkSpec,
    nodes: Vec<TapeNode<S>>,
    fingerprint: u64,
    input_len: usize,
    padded_len: usize,
    output_shape: Vec<usize>,
}

impl<S: Scalar> Tape<S> {
    /// Records everything the tape currently holds, so a backward pass run
    /// against a fresh ledger frees exactly what was allocated.
    fn charge_cached(&self, ledger: &mut MemoryLedger) {
        for node in &self.nodes {
            match node {
                TapeNode::Downsample { rec, .. } => ledger.alloc(MemoryCategory::DownsamplerActivation, rec.bytes()),
                TapeNode::Residual { rec, .. } | TapeNode::RevStep { rec: Some(rec), .. } => {
                    ledger.alloc(MemoryCategory::InStageActivation, rec.bytes())
                }
                TapeNode::RevExit { streams: Some((u, v)), .. } => {
                    ledger.alloc(MemoryCategory::StageOutput, u.nbytes() + v.nbytes())
                }
                _ => {}
            }
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[TapeNode<S>] {
        &self.nodes
    }

    /// Frames after zero padding to a multiple of the overall stride.
    pub fn padded_len(&self) -> usize {
        self.padded_len
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Bytes currently held by the tape, per category.
    pub fn cached_bytes(&self, category: MemoryCategory) -> usize {
        self.nodes
            .iter()
            .map(|n| match (n, category) {
                (TapeNode::Downsample { rec, .. }, MemoryCategory::DownsamplerActivation) => rec.bytes(),
                (TapeNode::Residual { rec, .. }, MemoryCategory::InStageActivation) => rec.bytes(),
                (TapeNode::RevStep { rec: Some(rec), .. }, MemoryCategory::InStageActivation) => {
                    rec.bytes()
                }
                (TapeNode::RevExit { streams: Some((a, b)), .. }, MemoryCategory::StageOutput) => {
                    a.nbytes() + b.nbytes()
                }
                _ => 0,
            })
            .sum()
    }

    /// Number of activation tensors cached inside reversible stages.
    pub fn reversible_in_stage_tensors(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                TapeNode::RevStep { rec: Some(rec), .. } => rec.graph.cached_tensors(),
                _ => 0,
            })
            .sum()
    }

    /// Cached tensor count across the whole tape.
    pub fn cached_tensors(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                TapeNode::Downsample { rec, .. } | TapeNode::Residual { rec, .. } => {
                    rec.graph.cached_tensors()
                }
                TapeNode::RevStep { rec: Some(rec), .. } => rec.graph.cached_tensors(),
                TapeNode::RevExit { streams: Some(_), .. } => 2,
                _ => 0,
            })
            .sum()
    }
}

/// Builds the backbone described by `spec` and runs it, recording a tape.
pub fn forward_with_tape<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterStore<S>,
    input: &Tensor<S>,
    mode: ExecMode,
) -> Result<(Tensor<S>, Tape<S>)> {
    let b = Backbone::build(spec, params)?;
    run_forward(&b, input, mode, &mut MemoryLedger::new())
}

/// Gradients of `<output, output_grad>` with respect to every backbone parameter.
pub fn backward<S: Scalar>(
    tape: Tape<S>,
    params: &ParameterStore<S>,
    output_grad: &Tensor<S>,
) -> Result<GradientMap<S>> {
    if params.fingerprint() != tape.fingerprint {
        return Err(Error::Consistency(
            "parameters differ from the ones used to record the tape".into(),
        ));
    }
    let b = Backbone::build(&tape.spec, params)?;
    let mut ledger = MemoryLedger::new();
    tape.charge_cached(&mut ledger);
    run_backward(&b, tape, output_grad, &mut ledger).map(|(g, _)| g)
}

pub(crate) fn run_forward<S: Scalar>(
    b: &Backbone<S>,
    input: &Tensor<S>,
    mode: ExecMode,
    ledger: &mut MemoryLedger,
) -> Result<(Tensor<S>, Tape<S>)> {
    let spec = b.spec();
    let (t_in, c_in) = input.dims2()?;
    if c_in != spec.input_channels() {
        return dim_err(format!(
            "input {:?} has {c_in} channels, spec expects {}",
            input.shape(),
            spec.input_channels()
        ));
    }
    let stride = spec.overall_stride().max(1);
    let padded_len = t_in.div_ceil(stride) * stride;
    let mut x = pad_rows(input, padded_len);
    let mut nodes = Vec::new();

    for (i, stage) in b.stages().iter().enumerate() {
        let (graph, xi, y) = stage.down.record_fresh(&x)?;
        ledger.alloc(MemoryCategory::DownsamplerActivation, graph.cached_bytes());
        x = graph.value(y).clone();
        nodes.push(TapeNode::Downsample { stage: i, rec: Recorded { graph, input: xi, output: y } });

        if stage.blocks.is_empty() {
            continue;
        }
        match stage.wiring {
            Wiring::Residual => {
                for (j, blk) in stage.blocks.iter().enumerate() {
                    let (graph, xi, fy) = blk.record_fresh(&x)?;
                    ledger.alloc(MemoryCategory::InStageActivation, graph.cached_bytes());
                    x = t::add(&x, graph.value(fy))?;
                    nodes.push(TapeNode::Residual {
                        stage: i,
                        block: j,
                        rec: Recorded { graph, input: xi, output: fy },
                    });
                }
            }
            Wiring::Reversible => {
                nodes.push(TapeNode::RevEntry { stage: i });
                let (mut u, mut v) = duplicate_input(&x);
                for (j, blk) in stage.blocks.iter().enumerate() {
                    match mode {
                        ExecMode::CacheAll => {
                            let (graph, ui, fu) = blk.record_fresh(&u)?;
                            ledger.alloc(MemoryCategory::InStageActivation, graph.cached_bytes());
                            let next = t::add(graph.value(fu), &v)?;
                            v = u;
                            u = next;
                            nodes.push(TapeNode::RevStep {
                                stage: i,
                                block: j,
                                rec: Some(Recorded { graph, input: ui, output: fu }),
                            });
                        }
                        ExecMode::Reversible => {
                            (u, v) = rev_step(&u, &v, blk)?;
                            nodes.push(TapeNode::RevStep { stage: i, block: j, rec: None });
                        }
                    }
                }
                x = average_outputs(&u, &v)?;
                let streams = match mode {
                    ExecMode::CacheAll => None,
                    ExecMode::Reversible => {
                        ledger.alloc(MemoryCategory::StageOutput, u.nbytes() + v.nbytes());
                        Some((u, v))
                    }
                };
                nodes.push(TapeNode::RevExit { stage: i, streams });
            }
        }
    }

    let tape = Tape {
        mode,
        spec: spec.clone(),
        nodes,
        fingerprint: b.fingerprint(),
        input_len: t_in,
        padded_len,
        output_shape: x.shape().to_vec(),
    };
    Ok((x, tape))
}

pub(crate) fn run_backward<S: Scalar>(
    b: &Backbone<S>,
    tape: Tape<S>,
    output_grad: &Tensor<S>,
    ledger: &mut MemoryLedger,
) -> Result<(GradientMap<S>, Tensor<S>)> {
    if tape.fingerprint != b.fingerprint() || tape.spec != *b.spec() {
        return Err(Error::Consistency("tape was recorded with a different backbone".into()));
    }
    if output_grad.shape() != tape.output_shape.as_slice() {
        return dim_err(format!(
            "output gradient {:?} does not match output {:?}",
            output_grad.shape(),
            tape.output_shape
        ));
    }
    let mut grads: GradientMap<S> = b
        .spec()
        .param_shapes()
        .into_iter()
        .map(|(n, s)| (n, Tensor::zeros(&s)))
        .collect();

    let mut g = output_grad.clone();
    // Gradients of the two streams inside a reversible stage.
    let mut gu = g.clone();
    let mut gv = g.clone();
    // Reconstructed streams in reversible mode.
    let mut state: Option<(Tensor<S>, Tensor<S>)> = None;

    for node in tape.nodes.into_iter().rev() {
        match node {
            TapeNode::RevExit { streams, .. } => {
                let half = t::scale(&g, S::of(0.5));
                gu = half.clone();
                gv = half;
                if let Some((u, v)) = streams {
                    let bytes = u.nbytes() + v.nbytes();
                    ledger.free(MemoryCategory::StageOutput, bytes);
                    ledger.alloc(MemoryCategory::InStageActivation, bytes);
                    state = Some((u, v));
                }
            }
            TapeNode::RevStep { stage, block, rec } => {
                let rec = match rec {
                    Some(rec) => rec,
                    None => {
                        let (u_next, v_next) = state
                            .take()
                            .ok_or_else(|| Error::Consistency("missing stage output".into()))?;
                        let blk = &b.stages()[stage].blocks[block];
                        let u = v_next;
                        let (graph, ui, fu) = blk.record_fresh(&u)?;
                        ledger.alloc(MemoryCategory::InStageActivation, graph.cached_bytes());
                        let v = t::sub(&u_next, graph.value(fu))?;
                        state = Some((u, v));
                        Recorded { graph, input: ui, output: fu }
                    }
                };
                let mut local = rec.graph.backward(rec.output, gu.clone())?;
                collect_param_grads(&rec.graph, &local, &mut grads)?;
                let gf = local.take(rec.input).expect("block input is differentiated");
                ledger.free(MemoryCategory::InStageActivation, rec.bytes());
                let next_gu = t::add(&gv, &gf)?;
                gv = gu;
                gu = next_gu;
            }
            TapeNode::RevEntry { .. } => {
                g = t::add(&gu, &gv)?;
                if let Some((u, v)) = state.take() {
                    ledger.free(MemoryCategory::InStageActivation, u.nbytes() + v.nbytes());
                }
            }
            TapeNode::Residual { rec, .. } => {
                let mut local = rec.graph.backward(rec.output, g.clone())?;
                collect_param_grads(&rec.graph, &local, &mut grads)?;
                let gf = local.take(rec.input).expect("block input is differentiated");
                ledger.free(MemoryCategory::InStageActivation, rec.bytes());
                g = t::add(&g, &gf)?;
            }
            TapeNode::Downsample { rec, .. } => {
                let mut local = rec.graph.backward(rec.output, g)?;
                collect_param_grads(&rec.graph, &local, &mut grads)?;
                g = local.take(rec.input).expect("downsampler input is differentiated");
                ledger.free(MemoryCategory::DownsamplerActivation, rec.bytes());
            }
        }
    }
    let input_grad = crop_rows(&g, tape.input_len);
    Ok((grads, input_grad))
}

fn collect_param_grads<S: Scalar>(
    graph: &Graph<S>,
    local: &Grads<S>,
    into: &mut GradientMap<S>,
) -> Result<()> {
    for (name, var) in graph.params() {
        let Some(d) = local.get(*var) else { continue };
        let slot = into
            .get_mut(name)
            .ok_or_else(|| Error::Consistency(format!("unexpected parameter `{name}`")))?;
        *slot = t::add(slot, d)?;
    }
    Ok(())
}

pub(crate) fn pad_rows<S: Scalar>(x: &Tensor<S>, rows: usize) -> Tensor<S> {
    let c = x.last_dim();
    if x.outer_len() == rows {
        return x.clone();
    }
    let mut data = x.data().to_vec();
    data.resize(rows * c, S::zero());
    Tensor::from_parts(vec![rows, c], data)
}

pub(crate) fn crop_rows<S: Scalar>(x: &Tensor<S>, rows: usize) -> Tensor<S> {
    let c = x.last_dim();
    if x.outer_len() == rows {
        return x.clone();
    }
    Tensor::from_parts(vec![rows, c], x.data()[..rows * c].to_vec())
}
