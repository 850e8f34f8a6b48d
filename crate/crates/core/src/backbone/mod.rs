//! Executable backbones with stage-wise caching and memory instrumentation.

mod blocks;
mod memory;
pub mod zoo;

pub use blocks::{DownsampleLayer, FBlock, LAYERNORM_EPS};
pub use memory::{LedgerSummary, MemoryCategory, MemoryEvent, MemoryLedger};

use serde::{Deserialize, Serialize};

use crate::autodiff::{run_backward, run_forward, ExecMode, GradientMap, Tape};
use crate::error::{Error, Result};
use crate::rewiring::{
    check_params, join_diagnostics, validate_spec, BlockKind, BlockSpec, NetworkSpec,
    ParameterStore, Wiring,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A stage ready to execute.
#[derive(Clone, Debug)]
pub struct CompiledStage<S> {
    pub down: DownsampleLayer<S>,
    pub blocks: Vec<FBlock<S>>,
    pub wiring: Wiring,
}

/// A validated spec bound to parameter values. The execution mode is chosen per pass.
#[derive(Clone, Debug)]
pub struct Backbone<S> {
    spec: NetworkSpec,
    stages: Vec<CompiledStage<S>>,
    fingerprint: u64,
}

impl<S: Scalar> Backbone<S> {
    pub fn build(spec: &NetworkSpec, params: &ParameterStore<S>) -> Result<Self> {
        let diags = validate_spec(spec);
        if !diags.is_empty() {
            return Err(Error::Build(join_diagnostics(&diags)));
        }
        let problems = check_params(spec, params);
        if !problems.is_empty() {
            return Err(Error::Build(problems.join(", ")));
        }
        let stages = spec
            .stages
            .iter()
            .zip(&spec.downsamplers)
            .map(|(st, ds)| {
                Ok(CompiledStage {
                    down: DownsampleLayer::new(ds, params)?,
                    blocks: st.blocks.iter().map(|b| FBlock::new(b, params)).collect::<Result<_>>()?,
                    wiring: st.wiring,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec: spec.clone(), stages, fingerprint: params.fingerprint() })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[CompiledStage<S>] {
        &self.stages
    }

    pub(crate) fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Runs `frames: [T×C_in]` to features `[N×C]`, `N = ⌈T/s⌉`, recording into `ledger`.
    pub fn forward(
        &self,
        frames: &Tensor<S>,
        mode: ExecMode,
        ledger: &mut MemoryLedger,
    ) -> Result<(Tensor<S>, Tape<S>)> {
        run_forward(self, frames, mode, ledger)
    }

    /// Consumes a tape from [`Self::forward`]; returns parameter and input gradients.
    pub fn backward(
        &self,
        tape: Tape<S>,
        feature_grad: &Tensor<S>,
        ledger: &mut MemoryLedger,
    ) -> Result<(GradientMap<S>, Tensor<S>)> {
        run_backward(self, tape, feature_grad, ledger)
    }
}

pub fn build_backbone<S: Scalar>(spec: &NetworkSpec, params: &ParameterStore<S>) -> Result<Backbone<S>> {
    Backbone::build(spec, params)
}

/// Forward pass that keeps the tape for a later backward.
pub fn backbone_forward<S: Scalar>(
    b: &Backbone<S>,
    frames: &Tensor<S>,
    mode: ExecMode,
    ledger: &mut MemoryLedger,
) -> Result<(Tensor<S>, Tape<S>)> {
    b.forward(frames, mode, ledger)
}

/// Bytes recorded by one F-block on a `[t×c]` activation, including its input.
pub fn block_cached_bytes(block: &BlockSpec, t: usize, c: usize, elem: usize) -> usize {
    let tc = t * c;
    let elems = match block.kind {
        BlockKind::ConvNormRelu => 5 * tc + t,
        BlockKind::Mlp => 4 * tc + 3 * t * block.hidden.unwrap_or(0) + t,
        BlockKind::Attention => match block.heads.unwrap_or(1) {
            1 => 8 * tc + t + t * t,
            h => 12 * tc + t + h * t * t,
        },
    };
    elems * elem
}

/// Analytic peak of activation bytes (parameters excluded) for one training step
/// over `batch` sequences of `t` frames.
///
/// Cache-all keeps every block's record until backward. Reversible mode keeps
/// only stage-exit streams and downsampler records, and during backward adds the
/// record of the block being recomputed.
pub fn predict_peak_memory<S: Scalar>(spec: &NetworkSpec, t: usize, batch: usize, mode: ExecMode) -> usize {
    let e = S::DTYPE.size_of();
    let stride = spec.overall_stride().max(1);
    let mut len = t.div_ceil(stride) * stride;
    let mut ch = spec.input_channels();

    struct StageCost {
        down: usize,
        blocks: Vec<usize>,
        pair: usize,
        reversible: bool,
    }
    let mut costs = Vec::new();
    for (st, ds) in spec.stages.iter().zip(&spec.downsamplers) {
        let Some(out_len) = ds.output_len(len) else { return 0 };
        let down = (len * ch + 2 * out_len * ds.out_channels) * e;
        len = out_len;
        ch = ds.out_channels;
        let blocks = st.blocks.iter().map(|b| block_cached_bytes(b, len, ch, e)).collect();
        costs.push(StageCost {
            down,
            blocks,
            pair: 2 * len * ch * e,
            reversible: st.wiring == Wiring::Reversible && !st.blocks.is_empty(),
        });
    }

    let uncached = |c: &StageCost| mode == ExecMode::Reversible && c.reversible;
    let forward: usize = costs
        .iter()
        .map(|c| c.down + if uncached(c) { c.pair } else { c.blocks.iter().sum() })
        .sum();

    let mut current = forward;
    let mut peak = forward;
    for c in costs.iter().rev() {
        if uncached(c) {
            let widest = c.blocks.iter().copied().max().unwrap_or(0);
            peak = peak.max(current + widest);
            current -= c.pair;
        } else {
            current -= c.blocks.iter().sum::<usize>();
        }
        current -= c.down;
    }
    batch.saturating_sub(1) * forward + peak
}

/// How frames are fed to the backbone to obtain `N` feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputArrangement {
    /// One clip of `T_snippet` frames per feature vector.
    Snippet,
    /// The whole sequence at once; each feature covers `s` frames.
    Frame,
}

/// Frames that pass through the backbone to produce `n` features.
pub fn count_frames_processed(n: usize, t_snippet: usize, stride: usize, arrangement: InputArrangement) -> usize {
    match arrangement {
        InputArrangement::Snippet => n * t_snippet,
        InputArrangement::Frame => n * stride,
    }
}

#[cfg(test)]
mod tests {
    use super::zoo::{conv_backbone_spec, init_params};
    use super::*;

    #[test]
    fn frame_accounting() {
        assert_eq!(count_frames_processed(256, 32, 2, InputArrangement::Frame), 512);
        assert_eq!(count_frames_processed(1, 7, 3, InputArrangement::Snippet), 7);
        assert_eq!(count_frames_processed(1, 7, 3, InputArrangement::Frame), 3);
        let snip = count_frames_processed(512, 32, 2, InputArrangement::Snippet);
        let frame = count_frames_processed(512, 32, 2, InputArrangement::Frame);
        assert_eq!((snip, frame, snip / frame), (16384, 1024, 16));
    }

    #[test]
    fn build_rejects_name_mismatch() {
        let spec = conv_backbone_spec("c", 3, &[8], 2, 3, &[2], 16);
        let mut p = init_params::<f64>(&spec, 1);
        p.remove("s0.b1.conv.w");
        assert!(matches!(Backbone::build(&spec, &p), Err(Error::Build(_))));
    }

    #[test]
    fn zero_block_prediction_is_mode_independent() {
        let spec = conv_backbone_spec("c", 3, &[8], 0, 3, &[2], 16);
        let a = predict_peak_memory::<f32>(&spec, 64, 1, ExecMode::CacheAll);
        let b = predict_peak_memory::<f32>(&spec, 64, 1, ExecMode::Reversible);
        assert_eq!(a, b);
        assert!(a > 0);
    }

    #[test]
    fn prediction_scales_with_depth_only_in_cache_all() {
        let at = |d: usize, mode| {
            let s = crate::rewiring::rewire(&conv_backbone_spec("c", 3, &[8, 16], d, 3, &[2, 2], 64)).unwrap();
            predict_peak_memory::<f32>(&s, 64, 1, mode)
        };
        let (c4, c8) = (at(4, ExecMode::CacheAll), at(8, ExecMode::CacheAll));
        let (r4, r8) = (at(4, ExecMode::Reversible), at(8, ExecMode::Reversible));
        // block records double; downsampler records stay
        let down = at(0, ExecMode::CacheAll);
        assert_eq!(c8 - down, 2 * (c4 - down));
        assert_eq!(r4, r8);
    }
}
