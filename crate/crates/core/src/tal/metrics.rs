//! Detection mAP at a set of tIoU thresholds.
//!
//! Per class, detections from all videos are ranked by score. Each detection is
//! matched to the unmatched ground truth in its video with the highest tIoU; it
//! is a true positive when that tIoU reaches the threshold. AP is the area under
//! the all-point interpolated precision-recall curve. Classes with no ground
//! truth are excluded from the mean.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::instance::{segment, tiou_unchecked, ActionInstance};
use crate::error::{Error, Result};

pub type VideoDetections = BTreeMap<String, Vec<ActionInstance>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// tIoU 0.50:0.05:0.95.
    ActivityNet,
    /// tIoU 0.3:0.1:0.7.
    Thumos,
}

impl Protocol {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            Protocol::ActivityNet => (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            Protocol::Thumos => (3..=7).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "activitynet" => Ok(Protocol::ActivityNet),
            "thumos" => Ok(Protocol::Thumos),
            other => Err(Error::Argument(format!("unknown protocol {other:?} (activitynet|thumos)"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::ActivityNet => "activitynet",
            Protocol::Thumos => "thumos",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    /// `(threshold, mAP)` in threshold order.
    pub per_threshold: Vec<(f64, f64)>,
    pub average_map: f64,
    /// Classes that had ground truth and entered the mean.
    pub evaluated_classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MapJson {
    per_threshold: BTreeMap<String, f64>,
    #[serde(rename = "average_mAP")]
    average_map: f64,
}

impl MapResult {
    pub fn to_json(&self) -> Result<String> {
        let j = MapJson {
            per_threshold: self.per_threshold.iter().map(|&(t, m)| (format!("{t:.2}"), m)).collect(),
            average_map: self.average_map,
        };
        Ok(serde_json::to_string_pretty(&j)? + "\n")
    }
}

/// Mean average precision over classes present in `ground_truth`, per threshold.
pub fn mean_average_precision(
    predictions: &VideoDetections,
    ground_truth: &VideoDetections,
    thresholds: &[f64],
) -> Result<MapResult> {
    if thresholds.is_empty() {
        return Err(Error::Argument("no tIoU thresholds".into()));
    }
    for (_, list) in predictions.iter().chain(ground_truth) {
        for d in list {
            if !(d.t_start < d.t_end) || !d.t_start.is_finite() || !d.t_end.is_finite() {
                return Err(Error::Argument(format!("degenerate segment [{}, {})", d.t_start, d.t_end)));
            }
            if !d.score.is_finite() {
                return Err(Error::Argument("non-finite score".into()));
            }
        }
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = ground_truth.values().flatten().map(|g| g.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut total = 0.0;
        for &c in &classes {
            total += class_ap(predictions, ground_truth, c, thr);
        }
        let m = if classes.is_empty() { 0.0 } else { total / classes.len() as f64 };
        per_threshold.push((thr, m));
    }
    let average_map = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapResult { per_threshold, average_map, evaluated_classes: classes })
}

fn class_ap(predictions: &VideoDetections, ground_truth: &VideoDetections, class: usize, thr: f64) -> f64 {
    let gts: BTreeMap<&str, Vec<(f64, f64)>> = ground_truth
        .iter()
        .map(|(v, list)| (v.as_str(), list.iter().filter(|g| g.class_id == class).map(segment).collect()))
        .collect();
    let n_gt: usize = gts.values().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut dets: Vec<(&str, &ActionInstance)> = predictions
        .iter()
        .flat_map(|(v, list)| list.iter().filter(|d| d.class_id == class).map(move |d| (v.as_str(), d)))
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut used: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(v, g)| (*v, vec![false; g.len()])).collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for (video, d) in dets {
        let mut hit = false;
        if let (Some(g), Some(u)) = (gts.get(video), used.get_mut(video)) {
            let mut best: Option<(usize, f64)> = None;
            for (j, &seg) in g.iter().enumerate() {
                if u[j] {
                    continue;
                }
                let o = tiou_unchecked(segment(d), seg);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, o)) = best {
                if o >= thr {
                    u[j] = true;
                    hit = true;
                }
            }
        }
        tp_flags.push(hit);
    }
    interpolated_ap(&tp_flags, n_gt)
}

/// All-point interpolated AP of a ranked list of hit flags.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..tp.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    ap
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DetectionsFile {
    Map(VideoDetections),
    Wrapped { results: VideoDetections },
}

/// Loads `{video_id: [instance, ...]}` (optionally wrapped in `{"results": ...}`).
pub fn load_detections(path: &Path) -> Result<VideoDetections> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let parsed: DetectionsFile =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Ok(match parsed {
        DetectionsFile::Map(m) => m,
        DetectionsFile::Wrapped { results } => results,
    })
}
