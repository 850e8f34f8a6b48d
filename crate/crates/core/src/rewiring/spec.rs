//! Declarative network description, serialized as JSON.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv1d_out_len;

pub const SPEC_VERSION: u32 = 1;

/// Kind of F-block. Each kind fixes the ordered list of parameter roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    /// conv1d (same length) → layer norm → ReLU.
    ConvNormRelu,
    /// layer norm → linear → GELU → linear.
    Mlp,
    /// layer norm → multi-head self-attention → output projection.
    Attention,
}

impl BlockKind {
    pub fn param_roles(self) -> &'static [&'static str] {
        match self {
            BlockKind::ConvNormRelu => &["conv.w", "conv.b", "norm.gamma", "norm.beta"],
            BlockKind::Mlp => &["norm.gamma", "norm.beta", "fc1.w", "fc1.b", "fc2.w", "fc2.b"],
            BlockKind::Attention => {
                &["norm.gamma", "norm.beta", "q.w", "k.w", "v.w", "o.w", "o.b"]
            }
        }
    }
}

/// One F-block: its kind, hyperparameters and the names of its parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels: usize,
    /// Temporal kernel width, `ConvNormRelu` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    /// Hidden width, `Mlp` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Attention heads, `Attention` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    pub param_names: Vec<String>,
}

impl BlockSpec {
    /// Block with conventional parameter names `{prefix}.{role}`.
    pub fn conv_norm_relu(prefix: &str, channels: usize, kernel: usize) -> Self {
        Self::named(BlockKind::ConvNormRelu, prefix, channels, Some(kernel), None, None)
    }

    pub fn mlp(prefix: &str, channels: usize, hidden: usize) -> Self {
        Self::named(BlockKind::Mlp, prefix, channels, None, Some(hidden), None)
    }

    pub fn attention(prefix: &str, channels: usize, heads: usize) -> Self {
        Self::named(BlockKind::Attention, prefix, channels, None, None, Some(heads))
    }

    fn named(
        kind: BlockKind,
        prefix: &str,
        channels: usize,
        kernel: Option<usize>,
        hidden: Option<usize>,
        heads: Option<usize>,
    ) -> Self {
        let param_names = kind.param_roles().iter().map(|r| format!("{prefix}.{r}")).collect();
        Self { kind, channels, kernel, hidden, heads, param_names }
    }

    /// Parameter shapes in role order. Missing hyperparameters read as 0 here and
    /// are reported by validation.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let c = self.channels;
        match self.kind {
            BlockKind::ConvNormRelu => {
                let k = self.kernel.unwrap_or(0);
                vec![vec![k, c, c], vec![c], vec![c], vec![c]]
            }
            BlockKind::Mlp => {
                let h = self.hidden.unwrap_or(0);
                vec![vec![c], vec![c], vec![c, h], vec![h], vec![h, c], vec![c]]
            }
            BlockKind::Attention => vec![
                vec![c],
                vec![c],
                vec![c, c],
                vec![c, c],
                vec![c, c],
                vec![c, c],
                vec![c],
            ],
        }
    }

    /// Output shape for an input of `[t, c]`, or a reason the block cannot map it.
    ///
    /// A block is residual-compatible exactly when this returns its input shape.
    pub fn output_shape(&self, t: usize, c: usize) -> std::result::Result<(usize, usize), String> {
        if c != self.channels {
            return Err(format!("expects {} channels, stage carries {c}", self.channels));
        }
        match self.kind {
            BlockKind::ConvNormRelu => {
                let k = self.kernel.ok_or("missing kernel")?;
                if k == 0 {
                    return Err("kernel must be >= 1".into());
                }
                let t_out = conv1d_out_len(t, k, 1, k / 2).ok_or("empty output")?;
                Ok((t_out, c))
            }
            BlockKind::Mlp => match self.hidden {
                Some(h) if h > 0 => Ok((t, c)),
                _ => Err("hidden width must be >= 1".into()),
            },
            BlockKind::Attention => match self.heads {
                Some(h) if h > 0 && c % h == 0 => Ok((t, c)),
                Some(h) => Err(format!("{h} heads do not divide {c} channels")),
                None => Err("missing heads".into()),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wiring {
    Residual,
    Reversible,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: Vec<BlockSpec>,
    pub wiring: Wiring,
}

/// Strided convolution entering a stage. Never reversible; its activations are always cached.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownsampleSpec {
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[weight, bias]`.
    pub param_names: Vec<String>,
}

impl DownsampleSpec {
    pub fn new(prefix: &str, stride: usize, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            stride,
            in_channels,
            out_channels,
            kernel,
            param_names: vec![format!("{prefix}.w"), format!("{prefix}.b")],
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel.saturating_sub(1) / 2
    }

    pub fn output_len(&self, t: usize) -> Option<usize> {
        conv1d_out_len(t, self.kernel, self.stride, self.padding())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.kernel, self.in_channels, self.out_channels], vec![self.out_channels]]
    }
}

/// Derived structural summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecMeta {
    /// Total number of F-blocks.
    pub total_blocks: usize,
    /// Activation channels of each stage.
    pub stage_channels: Vec<usize>,
    /// Product of all downsampler strides.
    pub overall_stride: usize,
}

/// A backbone: stages of F-blocks, each entered through a downsampler.
///
/// `downsamplers[i]` maps the previous activation (the input frames for `i = 0`)
/// into stage `i`, so there is exactly one downsampler per stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Nominal `[T, C_in]` of the input frames.
    pub input_shape: Vec<usize>,
    pub stages: Vec<StageSpec>,
    pub downsamplers: Vec<DownsampleSpec>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn input_channels(&self) -> usize {
        self.input_shape.get(1).copied().unwrap_or(0)
    }

    pub fn output_channels(&self) -> usize {
        self.downsamplers.last().map_or(self.input_channels(), |d| d.out_channels)
    }

    pub fn overall_stride(&self) -> usize {
        self.downsamplers.iter().map(|d| d.stride).product()
    }

    pub fn meta(&self) -> SpecMeta {
        SpecMeta {
            total_blocks: self.stages.iter().map(|s| s.blocks.len()).sum(),
            stage_channels: self.downsamplers.iter().map(|d| d.out_channels).collect(),
            overall_stride: self.overall_stride(),
        }
    }

    /// Every parameter `(name, shape)` in execution order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (stage, ds) in self.stages.iter().zip(&self.downsamplers) {
            out.extend(ds.param_names.iter().cloned().zip(ds.param_shapes()));
            for b in &stage.blocks {
                out.extend(b.param_names.iter().cloned().zip(b.param_shapes()));
            }
        }
        out
    }

    /// Temporal length at the entry of each stage for an input of `t` frames.
    pub fn stage_lengths(&self, t: usize) -> Option<Vec<usize>> {
        let mut len = t;
        let mut out = Vec::with_capacity(self.stages.len());
        for ds in &self.downsamplers {
            len = ds.output_len(len)?;
            out.push(len);
        }
        Some(out)
    }
}
