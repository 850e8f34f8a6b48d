//! Training loop for backbone + localization head.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, sgd_step, AdamConfig, AdamState, OptimizerKind};
use crate::autodiff::{ExecMode, GradientMap, Graph};
use crate::backbone::{zoo::init_params, Backbone, MemoryLedger};
use crate::error::{Error, Result};
use crate::rewiring::{NetworkSpec, ParameterStore};
use crate::scalar::{DType, Scalar};
use crate::tal::{
    decode_predictions, ground_truth_map, mean_average_precision, rasterize_targets, read_dataset,
    record_head, record_loss, split_output, ActionInstance, BenchmarkConfig, Dataset, DecodeConfig,
    HeadConfig, MapResult, Protocol, SyntheticVideo, TimeGrid, VideoDetections, HEAD_PREFIX,
};
use crate::tensor::Tensor;

/// Environment variable that overrides the dataset root of a training config.
pub const DATA_DIR_ENV: &str = "R2TAL_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingRegime {
    /// Backbone and head are updated jointly from raw frames.
    EndToEnd,
    /// Backbone features are computed once; only the head is trained.
    FrozenFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub spec_path: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: ExecMode,
    pub training_regime: TrainingRegime,
    #[serde(default = "default_lr_head")]
    pub lr_head: f64,
    /// Defaults to `0.1 × lr_head`.
    #[serde(default)]
    pub lr_backbone: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    pub num_classes: usize,
    #[serde(default = "default_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_lambda")]
    pub loss_lambda: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Temporal crop and amplitude jitter; defaults to on for end-to-end only.
    #[serde(default)]
    pub augment: Option<bool>,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Benchmark generator config used when no data directory is given.
    #[serde(default)]
    pub data_config: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_mode() -> ExecMode {
    ExecMode::Reversible
}
fn default_lr_head() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    4
}
fn default_dtype() -> DType {
    DType::F32
}
fn default_hidden() -> usize {
    32
}
fn default_lambda() -> f64 {
    1.0
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_protocol() -> Protocol {
    Protocol::Thumos
}

impl TrainConfig {
    /// Minimal config with every optional field at its default.
    pub fn new(regime: TrainingRegime, num_classes: usize) -> Self {
        serde_json::from_value(serde_json::json!({
            "training_regime": regime,
            "num_classes": num_classes,
        }))
        .expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.spec_path,
            &mut cfg.checkpoint_path,
            &mut cfg.data_dir,
            &mut cfg.data_config,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v.is_finite() && v >= 0.0;
        if !lr_ok(self.lr_head) || !self.lr_backbone.is_none_or(lr_ok) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.num_classes == 0 || self.head_hidden == 0 {
            return Err(Error::Config("num_classes and head_hidden must be positive".into()));
        }
        if !(self.loss_lambda >= 0.0) {
            return Err(Error::Config("loss_lambda must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_backbone(&self) -> f64 {
        self.lr_backbone.unwrap_or(0.1 * self.lr_head)
    }

    pub fn augment(&self) -> bool {
        self.augment.unwrap_or(self.training_regime == TrainingRegime::EndToEnd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "average_mAP")]
    pub average_map: f64,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Backbone and `head.*` parameters.
    pub params: ParameterStore<S>,
    pub metrics: Vec<EpochMetrics>,
    /// Validation result of the final parameters.
    pub final_eval: MapResult,
    pub wall_seconds: f64,
}

struct Model<'a, S> {
    spec: &'a NetworkSpec,
    head: HeadConfig,
    backbone: ParameterStore<S>,
    head_params: ParameterStore<S>,
}

fn split_params<S: Scalar>(all: ParameterStore<S>) -> (ParameterStore<S>, ParameterStore<S>) {
    let mut backbone = ParameterStore::new();
    let mut head = ParameterStore::new();
    for (name, t) in all.iter() {
        if name.starts_with(HEAD_PREFIX) {
            head.insert(name, t.clone());
        } else {
            backbone.insert(name, t.clone());
        }
    }
    (backbone, head)
}

fn grid_for(spec: &NetworkSpec, v: &SyntheticVideo) -> TimeGrid {
    TimeGrid { stride: spec.overall_stride(), fps: v.fps }
}

/// Trains on `data.train` and reports validation mAP after each epoch.
///
/// `initial` holds backbone parameters and optionally `head.*` entries; a
/// missing head is initialized from `cfg.seed`.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    spec: &NetworkSpec,
    initial: ParameterStore<S>,
    data: &Dataset,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let started = Instant::now();
    let head = HeadConfig {
        in_channels: spec.output_channels(),
        hidden: cfg.head_hidden,
        num_classes: cfg.num_classes,
        kernel: 3,
    };
    let (backbone, mut head_params) = split_params(initial);
    if head_params.is_empty() {
        head_params = head.init_params(cfg.seed);
    }
    for v in data.train.iter().chain(&data.val) {
        for g in &v.ground_truth {
            g.validate(cfg.num_classes)?;
        }
    }
    // fail early on mismatched parameters
    Backbone::build(spec, &backbone)?;
    let mut model = Model { spec, head, backbone, head_params };

    let frozen = cfg.training_regime == TrainingRegime::FrozenFeatures;
    let (train_feats, val_feats) = if frozen {
        let b = Backbone::build(spec, &model.backbone)?;
        let f = |vs: &[SyntheticVideo]| -> Result<Vec<Tensor<S>>> {
            vs.iter().map(|v| features(&b, &v.signal.cast())).collect()
        };
        (Some(f(&data.train)?), Some(f(&data.val)?))
    } else {
        (None, None)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7472_6169_6e));
    let mut adam_backbone = AdamState::new();
    let mut adam_head = AdamState::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut peak = 0usize;
        let built = if frozen { None } else { Some(Backbone::build(spec, &model.backbone)?) };
        let mut built = built;
        for chunk in order.chunks(cfg.batch) {
            let mut g_backbone: Option<GradientMap<S>> = None;
            let mut g_head: Option<GradientMap<S>> = None;
            for &i in chunk {
                let video = &data.train[i];
                let grid = grid_for(spec, video);
                let step = match (&train_feats, &built) {
                    (Some(feats), _) => head_step(&model, &feats[i], &video.ground_truth, grid, cfg.loss_lambda)?,
                    (None, Some(b)) => {
                        let (x, gts) = if cfg.augment() {
                            augment(video, spec.overall_stride(), &mut rng)?
                        } else {
                            (video.signal.cast(), video.ground_truth.clone())
                        };
                        end_to_end_step(&model, b, &x, &gts, grid, cfg)?
                    }
                    (None, None) => unreachable!("one of the two is prepared"),
                };
                loss_sum += step.loss;
                peak = peak.max(step.peak_bytes);
                accumulate(&mut g_head, step.head_grads);
                if let Some(gb) = step.backbone_grads {
                    accumulate(&mut g_backbone, gb);
                }
            }
            let scale = S::of(1.0 / chunk.len() as f64);
            if let Some(mut gh) = g_head {
                scale_grads(&mut gh, scale);
                apply(cfg, &mut model.head_params, &gh, &mut adam_head, cfg.lr_head)?;
            }
            if let Some(mut gb) = g_backbone {
                scale_grads(&mut gb, scale);
                apply(cfg, &mut model.backbone, &gb, &mut adam_backbone, cfg.lr_backbone())?;
                built = Some(Backbone::build(spec, &model.backbone)?);
            }
        }
        let eval = evaluate(&model, &data.val, val_feats.as_deref(), cfg)?;
        let loss = if data.train.is_empty() { 0.0 } else { loss_sum / data.train.len() as f64 };
        metrics.push(EpochMetrics { epoch, loss, average_map: eval.average_map, peak_bytes: peak });
    }

    let final_eval = evaluate(&model, &data.val, val_feats.as_deref(), cfg)?;
    let mut params = model.backbone;
    params.extend(model.head_params);
    Ok(TrainOutcome { params, metrics, final_eval, wall_seconds: started.elapsed().as_secs_f64() })
}

fn apply<S: Scalar>(
    cfg: &TrainConfig,
    params: &mut ParameterStore<S>,
    grads: &GradientMap<S>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    match cfg.optimizer {
        OptimizerKind::Sgd => sgd_step(params, grads, lr),
        OptimizerKind::Adam => adam_step(params, grads, state, lr, AdamConfig::default()),
    }
}

fn accumulate<S: Scalar>(acc: &mut Option<GradientMap<S>>, g: GradientMap<S>) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (name, t) in g.iter() {
                match a.get_mut(name) {
                    Some(dst) => {
                        for (d, &s) in dst.data_mut().iter_mut().zip(t.data()) {
                            *d += s;
                        }
                    }
                    None => {
                        a.insert(name, t.clone());
                    }
                }
            }
        }
    }
}

fn scale_grads<S: Scalar>(g: &mut GradientMap<S>, s: S) {
    let names: Vec<String> = g.names().map(str::to_string).collect();
    for n in names {
        for v in g.get_mut(&n).expect("listed").data_mut() {
            *v *= s;
        }
    }
}

struct StepResult<S> {
    loss: f64,
    peak_bytes: usize,
    head_grads: GradientMap<S>,
    backbone_grads: Option<GradientMap<S>>,
}

fn features<S: Scalar>(b: &Backbone<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut ledger = MemoryLedger::new();
    let (f, _tape) = b.forward(x, ExecMode::Reversible, &mut ledger)?;
    Ok(f)
}

/// Records head and loss on `feats`; returns the loss, head gradients and the
/// gradient with respect to the features.
fn head_pass<S: Scalar>(
    model: &Model<'_, S>,
    feats: &Tensor<S>,
    gts: &[ActionInstance],
    grid: TimeGrid,
    lambda: f64,
) -> Result<(f64, GradientMap<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let x = g.input(feats.clone());
    let (logits, offsets) = record_head(&mut g, &model.head, &model.head_params, x)?;
    let targets = rasterize_targets(feats.shape()[0], model.head.num_classes, gts, grid)?;
    let loss = record_loss(&mut g, logits, offsets, &targets, lambda)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let mut grads = g.backward(loss, Tensor::scalar(S::one()))?;
    let mut head_grads = GradientMap::new();
    for (name, var) in g.params() {
        let gt = grads.take(*var).unwrap_or_else(|| Tensor::zeros(g.value(*var).shape()));
        head_grads.insert(name.clone(), gt);
    }
    let feat_grad = grads.take(x).unwrap_or_else(|| Tensor::zeros(feats.shape()));
    Ok((value, head_grads, feat_grad))
}

fn head_step<S: Scalar>(
    model: &Model<'_, S>,
    feats: &Tensor<S>,
    gts: &[ActionInstance],
    grid: TimeGrid,
    lambda: f64,
) -> Result<StepResult<S>> {
    let (loss, head_grads, _) = head_pass(model, feats, gts, grid, lambda)?;
    Ok(StepResult { loss, peak_bytes: 0, head_grads, backbone_grads: None })
}

fn end_to_end_step<S: Scalar>(
    model: &Model<'_, S>,
    b: &Backbone<S>,
    x: &Tensor<S>,
    gts: &[ActionInstance],
    grid: TimeGrid,
    cfg: &TrainConfig,
) -> Result<StepResult<S>> {
    let mut ledger = MemoryLedger::new();
    let (feats, tape) = b.forward(x, cfg.mode, &mut ledger)?;
    let (loss, head_grads, feat_grad) = head_pass(model, &feats, gts, grid, cfg.loss_lambda)?;
    let (backbone_grads, _) = b.backward(tape, &feat_grad, &mut ledger)?;
    Ok(StepResult {
        loss,
        peak_bytes: ledger.peak_activation_bytes(),
        head_grads,
        backbone_grads: Some(backbone_grads),
    })
}

/// Random temporal crop (75–100% of the frames, stride-aligned) and a global
/// amplitude factor in `[0.8, 1.2]`. Ground truth is shifted and clipped to the
/// crop; instances that fall outside it are dropped.
fn augment<S: Scalar>(
    v: &SyntheticVideo,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, Vec<ActionInstance>)> {
    let (t, c) = v.signal.dims2()?;
    let min_len = (3 * t / 4).max(1);
    let mut len = rng.random_range(min_len..=t);
    if len >= stride {
        len -= len % stride;
    }
    let offset = rng.random_range(0..=t - len);
    let gain = rng.random_range(0.8..1.2);
    let data: Vec<S> = v.signal.data()[offset * c..(offset + len) * c]
        .iter()
        .map(|&x| S::of(x as f64 * gain))
        .collect();
    let (t0, t1) = (offset as f64 / v.fps, (offset + len) as f64 / v.fps);
    let gts = v
        .ground_truth
        .iter()
        .filter_map(|g| {
            let s = g.t_start.max(t0) - t0;
            let e = g.t_end.min(t1) - t0;
            (e > s).then(|| ActionInstance::new(s, e, g.class_id, g.score))
        })
        .collect();
    Ok((Tensor::new(vec![len, c], data)?, gts))
}

fn evaluate<S: Scalar>(
    model: &Model<'_, S>,
    videos: &[SyntheticVideo],
    cached: Option<&[Tensor<S>]>,
    cfg: &TrainConfig,
) -> Result<MapResult> {
    let preds = predict(model, videos, cached, &cfg.decode)?;
    mean_average_precision(&preds, &ground_truth_map(videos), &cfg.protocol.thresholds())
}

fn predict<S: Scalar>(
    model: &Model<'_, S>,
    videos: &[SyntheticVideo],
    cached: Option<&[Tensor<S>]>,
    decode: &DecodeConfig,
) -> Result<VideoDetections> {
    let b = if cached.is_none() { Some(Backbone::build(model.spec, &model.backbone)?) } else { None };
    let mut out = VideoDetections::new();
    for (i, v) in videos.iter().enumerate() {
        let feats = match (cached, &b) {
            (Some(c), _) => c[i].clone(),
            (None, Some(b)) => features(b, &v.signal.cast())?,
            (None, None) => unreachable!(),
        };
        let mut g = Graph::new();
        let x = g.input(feats);
        let (logits, offsets) = record_head(&mut g, &model.head, &model.head_params, x)?;
        let head_out = split_output(g.value(logits).clone(), g.value(offsets))?;
        out.insert(v.id.clone(), decode_predictions(&head_out, grid_for(model.spec, v), decode)?);
    }
    Ok(out)
}

/// Detections of a trained parameter set (backbone + `head.*`) on `videos`.
pub fn predict_detections<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterStore<S>,
    num_classes: usize,
    videos: &[SyntheticVideo],
    decode: &DecodeConfig,
) -> Result<VideoDetections> {
    let (backbone, head_params) = split_params(params.clone());
    let hidden = head_params
        .get("head.conv.b")
        .ok_or_else(|| Error::Build("parameters have no head".into()))?
        .len();
    let head = HeadConfig { in_channels: spec.output_channels(), hidden, num_classes, kernel: 3 };
    let model = Model { spec, head, backbone, head_params };
    predict(&model, videos, None, decode)
}

/// What a config-driven run wrote.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_eval: PathBuf,
    pub epochs: usize,
    #[serde(rename = "final_average_mAP")]
    pub final_average_map: f64,
    pub wall_seconds: f64,
}

/// Resolves the dataset: `R2TAL_DATA_DIR`, then `data_dir`, then generation from
/// `data_config`.
pub fn resolve_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
        return read_dataset(Path::new(&dir));
    }
    if let Some(dir) = &cfg.data_dir {
        return read_dataset(dir);
    }
    if let Some(path) = &cfg.data_config {
        return BenchmarkConfig::load(path)?.generate();
    }
    Err(Error::Config(format!("no dataset: set data_dir, data_config or {DATA_DIR_ENV}")))
}

/// Full config-driven run: load spec, parameters and data, train, write
/// `checkpoint.bin`, `metrics.jsonl` and `final_eval.json` to the output directory.
pub fn run_training(cfg: &TrainConfig) -> Result<RunSummary> {
    match cfg.dtype {
        DType::F32 => run_typed::<f32>(cfg),
        DType::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<S: Scalar>(cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let spec_path = cfg.spec_path.as_ref().ok_or_else(|| Error::Config("spec_path is required".into()))?;
    let out_dir = cfg.output_dir.as_ref().ok_or_else(|| Error::Config("output_dir is required".into()))?;
    let spec = NetworkSpec::load(spec_path)?;
    let params = match &cfg.checkpoint_path {
        Some(p) => ParameterStore::<S>::load(p)?,
        None => init_params(&spec, cfg.seed),
    };
    let data = resolve_dataset(cfg)?;
    let outcome = train(cfg, &spec, params, &data)?;

    fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join("checkpoint.bin");
    outcome.params.save(&checkpoint)?;
    let metrics = out_dir.join("metrics.jsonl");
    let mut f = fs::File::create(&metrics)?;
    for m in &outcome.metrics {
        writeln!(f, "{}", serde_json::to_string(m)?)?;
    }
    let final_eval = out_dir.join("final_eval.json");
    fs::write(&final_eval, outcome.final_eval.to_json()?)?;
    Ok(RunSummary {
        checkpoint,
        metrics,
        final_eval,
        epochs: outcome.metrics.len(),
        final_average_map: outcome.final_eval.average_map,
        wall_seconds: outcome.wall_seconds,
    })
}
