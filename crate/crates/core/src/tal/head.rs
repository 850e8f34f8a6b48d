//! Anchor-free localization head and its training loss.
//!
//! Per feature position `n` the head predicts one logit per class and two
//! non-negative-ish offsets (start, end) in feature-index units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::ActionInstance;
use crate::autodiff::{Graph, Var};
use crate::backbone::zoo::init_tensor;
use crate::error::{dim_err, Error, Result};
use crate::rewiring::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

impl HeadConfig {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let out = self.num_classes + 2;
        vec![
            ("head.conv.w".into(), vec![self.kernel, self.in_channels, self.hidden]),
            ("head.conv.b".into(), vec![self.hidden]),
            ("head.out.w".into(), vec![self.hidden, out]),
            ("head.out.b".into(), vec![out]),
        ]
    }

    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParameterStore<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        let mut store: ParameterStore<S> = self
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        // start class logits at a low prior so the initial BCE is not dominated by background
        let prior = S::of(-2.0);
        let b = store.get_mut("head.out.b").expect("just inserted");
        for v in b.data_mut().iter_mut().take(self.num_classes) {
            *v = prior;
        }
        store
    }
}

/// Head outputs for a `[N×C]` feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<S> {
    /// `[N×num_classes]`.
    pub class_logits: Tensor<S>,
    /// `[N]`, distance from position to segment start in feature units.
    pub start_offset: Tensor<S>,
    /// `[N]`, distance from position to segment end in feature units.
    pub end_offset: Tensor<S>,
}

impl<S: Scalar> HeadOutput<S> {
    pub fn len(&self) -> usize {
        self.start_offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.last_dim()
    }
}

/// Records the head on `features`; returns `(class_logits [N×nc], offsets [N×2])`.
pub fn record_head<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &HeadConfig,
    params: &ParameterStore<S>,
    features: Var,
) -> Result<(Var, Var)> {
    let (_, c) = g.value(features).dims2()?;
    if c != cfg.in_channels {
        return dim_err(format!("head expects {} channels, features have {c}", cfg.in_channels));
    }
    let mut p = |n: &str| -> Result<Var> { Ok(g.param(n, params.require(n)?.clone())) };
    let (cw, cb, ow, ob) = (p("head.conv.w")?, p("head.conv.b")?, p("head.out.w")?, p("head.out.b")?);
    let h = g.conv1d(features, cw, 1, cfg.kernel / 2)?;
    let h = g.add_bias(h, cb)?;
    let h = g.relu(h);
    let y = g.linear(h, ow, ob)?;
    let nc = cfg.num_classes;
    let logits = g.columns(y, 0, nc)?;
    let offsets = g.columns(y, nc, nc + 2)?;
    Ok((logits, offsets))
}

/// Inference-only head pass.
pub fn localizer_forward<S: Scalar>(
    cfg: &HeadConfig,
    params: &ParameterStore<S>,
    features: &Tensor<S>,
) -> Result<HeadOutput<S>> {
    let mut g = Graph::new();
    let x = g.input(features.clone());
    let (logits, offsets) = record_head(&mut g, cfg, params, x)?;
    split_output(g.value(logits).clone(), g.value(offsets))
}

pub(crate) fn split_output<S: Scalar>(logits: Tensor<S>, offsets: &Tensor<S>) -> Result<HeadOutput<S>> {
    let (n, _) = offsets.dims2()?;
    let (s, e): (Vec<S>, Vec<S>) = (0..n).map(|i| (offsets.at2(i, 0), offsets.at2(i, 1))).unzip();
    Ok(HeadOutput {
        class_logits: logits,
        start_offset: Tensor::new(vec![n], s)?,
        end_offset: Tensor::new(vec![n], e)?,
    })
}

/// How feature positions map to seconds: position `n` sits at `n·stride/fps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub stride: usize,
    pub fps: f64,
}

impl TimeGrid {
    pub fn seconds_per_step(&self) -> f64 {
        self.stride as f64 / self.fps
    }

    pub fn time_of(&self, n: usize) -> f64 {
        n as f64 * self.seconds_per_step()
    }
}

/// Dense training targets for `N` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<S> {
    /// `[N×nc]` one-hot for positive positions.
    pub classes: Tensor<S>,
    /// `[N×2]` start/end distances in feature units, zero where negative.
    pub offsets: Tensor<S>,
    /// `[N×2]`, 1 on positive rows.
    pub mask: Tensor<S>,
    pub positives: usize,
}

/// Position `n` is positive for the shortest ground-truth segment containing
/// `t_n` (half-open); its targets are that segment's class and distances.
pub fn rasterize_targets<S: Scalar>(
    n: usize,
    num_classes: usize,
    gts: &[ActionInstance],
    grid: TimeGrid,
) -> Result<Targets<S>> {
    for g in gts {
        g.validate(num_classes)?;
    }
    let step = grid.seconds_per_step();
    let mut classes = vec![S::zero(); n * num_classes];
    let mut offsets = vec![S::zero(); n * 2];
    let mut mask = vec![S::zero(); n * 2];
    let mut positives = 0;
    for i in 0..n {
        let t = grid.time_of(i);
        let best = gts
            .iter()
            .filter(|g| g.t_start <= t && t < g.t_end)
            .min_by(|a, b| a.duration().total_cmp(&b.duration()));
        if let Some(g) = best {
            positives += 1;
            classes[i * num_classes + g.class_id] = S::one();
            offsets[i * 2] = S::of((t - g.t_start) / step);
            offsets[i * 2 + 1] = S::of((g.t_end - t) / step);
            mask[i * 2] = S::one();
            mask[i * 2 + 1] = S::one();
        }
    }
    Ok(Targets {
        classes: Tensor::new(vec![n, num_classes], classes)?,
        offsets: Tensor::new(vec![n, 2], offsets)?,
        mask: Tensor::new(vec![n, 2], mask)?,
        positives,
    })
}

/// Records `mean BCE(logits, classes) + λ · Σ_pos |Δoffset| / (2·#pos)`.
/// The regression term is absent when there are no positives.
pub fn record_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    offsets: Var,
    targets: &Targets<S>,
    lambda: f64,
) -> Result<Var> {
    let cls = g.bce_with_logits(logits, targets.classes.clone())?;
    if targets.positives == 0 || lambda == 0.0 {
        return Ok(cls);
    }
    let reg = g.masked_l1(offsets, targets.offsets.clone(), targets.mask.clone())?;
    let reg = g.scale(reg, S::of(lambda));
    g.add(cls, reg)
}

/// Loss of precomputed head outputs against ground truth.
pub fn tal_loss<S: Scalar>(
    out: &HeadOutput<S>,
    gts: &[ActionInstance],
    grid: TimeGrid,
    lambda: f64,
) -> Result<S> {
    let n = out.len();
    if out.class_logits.shape() != [n, out.num_classes()] || out.end_offset.len() != n {
        return Err(Error::Dimension("head output parts disagree on length".into()));
    }
    let targets = rasterize_targets(n, out.num_classes(), gts, grid)?;
    let mut g = Graph::new();
    let logits = g.input(out.class_logits.clone());
    let mut off = Vec::with_capacity(2 * n);
    for i in 0..n {
        off.push(out.start_offset.data()[i]);
        off.push(out.end_offset.data()[i]);
    }
    let offsets = g.input(Tensor::new(vec![n, 2], off)?);
    let l = record_loss(&mut g, logits, offsets, &targets, lambda)?;
    Ok(g.value(l).data()[0])
}
