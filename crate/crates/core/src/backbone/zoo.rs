//! Toy backbones and deterministic parameter initialization.
//!
//! The conv backbone is a single slow pathway of conv-norm-relu blocks. The
//! attention backbone alternates attention and MLP blocks in each stage.
//! Both take `[T×C_in]` frame sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rewiring::{
    BlockKind, BlockSpec, DownsampleSpec, NetworkSpec, ParameterStore, StageSpec, Wiring, SPEC_VERSION,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Residual conv backbone: `channels.len()` stages of `blocks_per_stage` conv blocks,
/// stage `i` entered through a downsampler of stride `strides[i]`.
pub fn conv_backbone_spec(
    name: &str,
    in_channels: usize,
    channels: &[usize],
    blocks_per_stage: usize,
    kernel: usize,
    strides: &[usize],
    t: usize,
) -> NetworkSpec {
    build(name, in_channels, channels, strides, t, |i, c| {
        (0..blocks_per_stage)
            .map(|j| BlockSpec::conv_norm_relu(&format!("s{i}.b{j}"), c, kernel))
            .collect()
    })
}

/// Residual attention/MLP backbone: each stage alternates `Attention` and `Mlp`
/// blocks, `blocks_per_stage` in total.
pub fn attention_backbone_spec(
    name: &str,
    in_channels: usize,
    channels: &[usize],
    blocks_per_stage: usize,
    heads: usize,
    mlp_ratio: usize,
    strides: &[usize],
    t: usize,
) -> NetworkSpec {
    build(name, in_channels, channels, strides, t, |i, c| {
        (0..blocks_per_stage)
            .map(|j| {
                let prefix = format!("s{i}.b{j}");
                if j % 2 == 0 {
                    BlockSpec::attention(&prefix, c, heads)
                } else {
                    BlockSpec::mlp(&prefix, c, c * mlp_ratio)
                }
            })
            .collect()
    })
}

fn build(
    name: &str,
    in_channels: usize,
    channels: &[usize],
    strides: &[usize],
    t: usize,
    blocks: impl Fn(usize, usize) -> Vec<BlockSpec>,
) -> NetworkSpec {
    assert_eq!(channels.len(), strides.len(), "one stride per stage");
    let mut prev = in_channels;
    let mut stages = Vec::new();
    let mut downsamplers = Vec::new();
    for (i, (&c, &s)) in channels.iter().zip(strides).enumerate() {
        let kernel = if s == 1 { 1 } else { s + 1 };
        downsamplers.push(DownsampleSpec::new(&format!("ds{i}"), s, prev, c, kernel));
        stages.push(StageSpec { blocks: blocks(i, c), wiring: Wiring::Residual });
        prev = c;
    }
    NetworkSpec {
        version: SPEC_VERSION,
        name: Some(name.to_string()),
        input_shape: vec![t, in_channels],
        stages,
        downsamplers,
    }
}

/// Copy of `spec` with every stage's block list rebuilt at `blocks_per_stage`,
/// repeating the stage's existing block pattern. Used for depth sweeps.
pub fn with_depth(spec: &NetworkSpec, blocks_per_stage: usize) -> NetworkSpec {
    let mut out = spec.clone();
    for (i, stage) in out.stages.iter_mut().enumerate() {
        let pattern: Vec<BlockSpec> = if stage.blocks.is_empty() {
            let c = spec.downsamplers[i].out_channels;
            vec![BlockSpec::conv_norm_relu("x", c, 3)]
        } else {
            stage.blocks.clone()
        };
        stage.blocks = (0..blocks_per_stage)
            .map(|j| {
                let base = &pattern[j % pattern.len()];
                let prefix = format!("s{i}.b{j}");
                BlockSpec {
                    param_names: base.kind.param_roles().iter().map(|r| format!("{prefix}.{r}")).collect(),
                    ..base.clone()
                }
            })
            .collect();
    }
    out
}

/// Deterministic initialization: weights `N(0, 1/fan_in)`, norm gains near 1,
/// small random shifts and biases.
pub fn init_params<S: Scalar>(spec: &NetworkSpec, seed: u64) -> ParameterStore<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, &mut rng);
            (name, t)
        })
        .collect()
}

pub(crate) fn init_tensor<S: Scalar>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let data: Vec<f64> = if name.ends_with("gamma") {
        (0..n).map(|_| 1.0 + 0.1 * normal()).collect()
    } else if shape.len() == 1 {
        (0..n).map(|_| 0.1 * normal()).collect()
    } else {
        let fan_in: usize = shape[..shape.len() - 1].iter().product();
        let std = (1.0 / fan_in as f64).sqrt();
        (0..n).map(|_| std * normal()).collect()
    };
    Tensor::from_f64(shape, &data).expect("shape and data agree")
}

/// Random residual spec for property tests: 1–3 stages, 0–`max_blocks` blocks each,
/// mixed block kinds.
pub fn random_spec(seed: u64, max_blocks: usize, max_channels: usize) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_stages = rng.random_range(1..=3);
    let in_ch = rng.random_range(1..=4);
    let t = 8 * rng.random_range(1..=3);
    let mut prev = in_ch;
    let mut stages = Vec::new();
    let mut downsamplers = Vec::new();
    for i in 0..n_stages {
        let c = 2 * rng.random_range(1..=max_channels.max(2) / 2);
        let stride = rng.random_range(1..=2);
        let kernel = [1, 3][rng.random_range(0..2)].max(stride);
        downsamplers.push(DownsampleSpec::new(&format!("ds{i}"), stride, prev, c, kernel));
        let nb = rng.random_range(0..=max_blocks);
        let blocks = (0..nb)
            .map(|j| {
                let prefix = format!("s{i}.b{j}");
                match rng.random_range(0..3) {
                    0 => BlockSpec::conv_norm_relu(&prefix, c, [1, 3][rng.random_range(0..2)]),
                    1 => BlockSpec::mlp(&prefix, c, rng.random_range(1..=2 * c)),
                    _ => BlockSpec::attention(&prefix, c, if c % 2 == 0 { rng.random_range(1..=2) } else { 1 }),
                }
            })
            .collect();
        stages.push(StageSpec { blocks, wiring: Wiring::Residual });
        prev = c;
    }
    NetworkSpec {
        version: SPEC_VERSION,
        name: Some(format!("random-{seed}")),
        input_shape: vec![t, in_ch],
        stages,
        downsamplers,
    }
}

/// Number of blocks of each kind; handy for structural assertions.
pub fn kind_counts(spec: &NetworkSpec) -> [usize; 3] {
    let mut out = [0; 3];
    for b in spec.stages.iter().flat_map(|s| &s.blocks) {
        out[match b.kind {
            BlockKind::ConvNormRelu => 0,
            BlockKind::Mlp => 1,
            BlockKind::Attention => 2,
        }] += 1;
    }
    out
}
