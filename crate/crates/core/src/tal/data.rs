//! Synthetic untrimmed videos with class-specific temporal signatures.
//!
//! Every video is a `[T×C]` signal of Gaussian background noise. Each action
//! instance adds a class signature over its frames: a per-class channel profile
//! modulated by a per-class temporal frequency. With zero noise the signal is
//! exactly zero outside instances and strictly positive on at least one channel
//! inside them, so presence is separable by thresholding.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::instance::ActionInstance;
use crate::error::{Error, Result};
use crate::rewiring::ParameterStore;
use crate::tensor::Tensor;

/// One mixture component of the instance-length distribution, in frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthComponent {
    pub min_len: usize,
    pub max_len: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_videos: usize,
    /// Frames per video.
    pub t: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    pub length_distribution: Vec<LengthComponent>,
    pub noise_level: f64,
    pub seed: u64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_max_instances")]
    pub max_instances: usize,
}

fn default_channels() -> usize {
    4
}
fn default_fps() -> f64 {
    25.0
}
fn default_max_instances() -> usize {
    5
}

/// Train and validation splits written side by side by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub train: DatasetConfig,
    pub val: DatasetConfig,
}

impl BenchmarkConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn generate(&self) -> Result<Dataset> {
        Ok(Dataset { train: generate_dataset(&self.train)?, val: generate_dataset(&self.val)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    /// `[T×C]` frames.
    pub signal: Tensor<f32>,
    pub ground_truth: Vec<ActionInstance>,
    pub duration_s: f64,
    pub fps: f64,
    pub num_classes: usize,
    /// Seed of the per-video generator stream.
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticVideo>,
    pub val: Vec<SyntheticVideo>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return bad("t, in_channels and num_classes must be positive".into());
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.noise_level >= 0.0) {
            return bad(format!("noise_level must be non-negative, got {}", self.noise_level));
        }
        if self.max_instances == 0 {
            return bad("max_instances must be at least 1".into());
        }
        if self.length_distribution.is_empty() {
            return bad("length_distribution is empty".into());
        }
        for (i, c) in self.length_distribution.iter().enumerate() {
            if c.min_len == 0 || c.min_len > c.max_len {
                return bad(format!("length component {i}: need 1 <= min_len <= max_len"));
            }
            if c.max_len > self.t {
                return bad(format!(
                    "length component {i}: max_len {} exceeds sequence length {}",
                    c.max_len, self.t
                ));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return bad(format!("length component {i}: weight must be positive"));
            }
        }
        Ok(())
    }
}

/// Channel amplitude of class `c` on channel `ch`, in `[0.2, 1.0]`.
fn class_profile(c: usize, num_classes: usize, ch: usize, channels: usize) -> f64 {
    let phase = ch as f64 / channels as f64 + c as f64 / num_classes as f64;
    0.6 + 0.4 * (2.0 * PI * phase).cos()
}

/// Temporal frequency of class `c` in cycles per frame.
fn class_frequency(c: usize) -> f64 {
    0.05 + 0.07 * c as f64
}

/// Value of class `c`'s signature at offset `tau` frames into an instance.
/// Always at least `0.5·profile > 0`.
pub fn class_signature(c: usize, num_classes: usize, tau: usize, ch: usize, channels: usize) -> f64 {
    let wave = 1.0 + 0.5 * (2.0 * PI * class_frequency(c) * tau as f64).sin();
    class_profile(c, num_classes, ch, channels) * wave
}

fn video_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn sample_length(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = cfg.length_distribution.iter().map(|c| c.weight).sum();
    let mut u = rng.random::<f64>() * total;
    let mut chosen = cfg.length_distribution.last().expect("validated non-empty");
    for comp in &cfg.length_distribution {
        if u < comp.weight {
            chosen = comp;
            break;
        }
        u -= comp.weight;
    }
    rng.random_range(chosen.min_len..=chosen.max_len)
}

/// Generates one video. Instances are non-overlapping and placed by splitting
/// the leftover frames into random gaps.
pub fn generate_video(cfg: &DatasetConfig, index: usize) -> Result<SyntheticVideo> {
    cfg.validate()?;
    let rng_seed = video_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let wanted = rng.random_range(1..=cfg.max_instances);
    let mut lengths = Vec::with_capacity(wanted);
    let mut used = 0;
    for _ in 0..wanted {
        let len = sample_length(cfg, &mut rng);
        if used + len > cfg.t {
            break;
        }
        used += len;
        lengths.push(len);
    }
    if lengths.is_empty() {
        // the first draw alone always fits since max_len <= t
        unreachable!("first instance length exceeds t");
    }
    // distribute the free frames over len+1 gaps
    let free = cfg.t - used;
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let classes: Vec<usize> = lengths.iter().map(|_| rng.random_range(0..cfg.num_classes)).collect();

    let (t, ch) = (cfg.t, cfg.in_channels);
    let mut data = vec![0.0f64; t * ch];
    if cfg.noise_level > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_level).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut data {
            *v = normal.sample(&mut rng);
        }
    }
    let mut instances = Vec::with_capacity(lengths.len());
    let mut cursor = 0;
    let mut prev_cut = 0;
    for ((&len, &cut), &class) in lengths.iter().zip(&cuts).zip(&classes) {
        let start = cursor + (cut - prev_cut);
        prev_cut = cut;
        let gain = rng.random_range(0.8..1.2);
        for tau in 0..len {
            let row = &mut data[(start + tau) * ch..(start + tau + 1) * ch];
            for (c, v) in row.iter_mut().enumerate() {
                *v += gain * class_signature(class, cfg.num_classes, tau, c, ch);
            }
        }
        instances.push(ActionInstance::ground_truth(
            start as f64 / cfg.fps,
            (start + len) as f64 / cfg.fps,
            class,
        ));
        cursor = start + len;
    }
    let signal = Tensor::new(vec![t, ch], data.into_iter().map(|v| v as f32).collect())?;
    Ok(SyntheticVideo {
        id: format!("video_{index:05}"),
        signal,
        ground_truth: instances,
        duration_s: t as f64 / cfg.fps,
        fps: cfg.fps,
        num_classes: cfg.num_classes,
        rng_seed,
    })
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<SyntheticVideo>> {
    cfg.validate()?;
    (0..cfg.num_videos).map(|i| generate_video(cfg, i)).collect()
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    duration_s: f64,
    instances: Vec<ActionInstance>,
    #[serde(default = "default_fps")]
    fps: f64,
    #[serde(default)]
    num_classes: Option<usize>,
    #[serde(default)]
    rng_seed: u64,
}

fn read_annotation(dir: &Path, id: &str) -> Result<Annotation> {
    let path = dir.join(format!("{id}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let ann: Annotation =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    for g in &ann.instances {
        g.validate(ann.num_classes.unwrap_or(usize::MAX))
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if g.t_end > ann.duration_s {
            return Err(Error::Load(format!("{}: instance ends after duration_s", path.display())));
        }
    }
    Ok(ann)
}

fn annotation_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Load(format!("{}: {e}", dir.display())))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Ground truth of a split directory from its annotation files alone.
pub fn read_annotations(dir: &Path) -> Result<BTreeMap<String, Vec<ActionInstance>>> {
    annotation_ids(dir)?
        .into_iter()
        .map(|id| {
            let ann = read_annotation(dir, &id)?;
            Ok((id, ann.instances))
        })
        .collect()
}

/// Writes `<dir>/<id>.bin` (checkpoint container with one `signal` entry) and
/// `<dir>/<id>.json` for every video.
pub fn write_split(dir: &Path, videos: &[SyntheticVideo]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for v in videos {
        let mut store = ParameterStore::new();
        store.insert("signal", v.signal.clone());
        store.save(&dir.join(format!("{}.bin", v.id)))?;
        let ann = Annotation {
            duration_s: v.duration_s,
            fps: v.fps,
            num_classes: Some(v.num_classes),
            instances: v.ground_truth.clone(),
            rng_seed: v.rng_seed,
        };
        fs::write(dir.join(format!("{}.json", v.id)), serde_json::to_string_pretty(&ann)? + "\n")?;
    }
    Ok(())
}

/// Reads every `<id>.json` / `<id>.bin` pair of a split directory, sorted by id.
pub fn read_split(dir: &Path) -> Result<Vec<SyntheticVideo>> {
    annotation_ids(dir)?
        .iter()
        .map(|id| {
            let ann = read_annotation(dir, id)?;
            let store = ParameterStore::<f32>::load(&dir.join(format!("{id}.bin")))?;
            let signal = store
                .get("signal")
                .ok_or_else(|| Error::Load(format!("{id}.bin has no signal entry")))?
                .clone();
            if signal.rank() != 2 {
                return Err(Error::Load(format!("{id}.bin: signal must be [T×C]")));
            }
            let num_classes = ann
                .num_classes
                .unwrap_or_else(|| ann.instances.iter().map(|g| g.class_id + 1).max().unwrap_or(1));
            Ok(SyntheticVideo {
                id: id.clone(),
                signal,
                ground_truth: ann.instances,
                duration_s: ann.duration_s,
                fps: ann.fps,
                num_classes,
                rng_seed: ann.rng_seed,
            })
        })
        .collect()
}

pub fn write_dataset(root: &Path, data: &Dataset) -> Result<()> {
    write_split(&root.join("train"), &data.train)?;
    write_split(&root.join("val"), &data.val)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    Ok(Dataset { train: read_split(&root.join("train"))?, val: read_split(&root.join("val"))? })
}

/// Ground truth keyed by video id, the layout the evaluator consumes.
pub fn ground_truth_map(videos: &[SyntheticVideo]) -> BTreeMap<String, Vec<ActionInstance>> {
    videos.iter().map(|v| (v.id.clone(), v.ground_truth.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64) -> DatasetConfig {
        DatasetConfig {
            num_videos: 20,
            t: 128,
            in_channels: 4,
            num_classes: 3,
            length_distribution: vec![
                LengthComponent { min_len: 4, max_len: 12, weight: 0.5 },
                LengthComponent { min_len: 20, max_len: 40, weight: 0.5 },
            ],
            noise_level: noise,
            seed: 3,
            fps: 25.0,
            max_instances: 5,
        }
    }

    #[test]
    fn instances_are_disjoint_and_in_range() {
        for v in generate_dataset(&cfg(0.3)).unwrap() {
            assert!((1..=5).contains(&v.ground_truth.len()));
            for w in v.ground_truth.windows(2) {
                assert!(w[0].t_end <= w[1].t_start);
            }
            for g in &v.ground_truth {
                g.validate(3).unwrap();
                assert!(g.t_end <= v.duration_s + 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_dataset(&cfg(0.3)).unwrap(), generate_dataset(&cfg(0.3)).unwrap());
        let mut other = cfg(0.3);
        other.seed = 4;
        assert_ne!(generate_dataset(&cfg(0.3)).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn noiseless_presence_is_thresholdable() {
        for v in generate_dataset(&cfg(0.0)).unwrap() {
            let (t, ch) = v.signal.dims2().unwrap();
            for n in 0..t {
                let time = (n as f64 + 0.5) / v.fps;
                let inside = v.ground_truth.iter().any(|g| g.t_start <= time && time < g.t_end);
                let peak = (0..ch).map(|c| v.signal.at2(n, c)).fold(0.0f32, f32::max);
                assert_eq!(inside, peak > 0.0, "frame {n}");
            }
        }
    }

    #[test]
    fn overlong_segments_rejected() {
        let mut c = cfg(0.0);
        c.length_distribution[1].max_len = 129;
        assert!(matches!(generate_dataset(&c), Err(Error::Config(_))));
    }

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let videos = generate_dataset(&cfg(0.1)).unwrap();
        write_split(dir.path(), &videos).unwrap();
        assert_eq!(read_split(dir.path()).unwrap(), videos);
    }
}
