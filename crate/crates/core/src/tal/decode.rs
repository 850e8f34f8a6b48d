use serde::{Deserialize, Serialize};

use super::head::{HeadOutput, TimeGrid};
use super::instance::{segment, tiou_unchecked, ActionInstance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::sigmoid_scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Minimum sigmoid score for a candidate.
    pub score_threshold: f64,
    /// Same-class candidates overlapping a kept one by more than this are dropped.
    pub nms_tiou: f64,
    /// Keep at most this many detections per video after NMS.
    #[serde(default = "default_max")]
    pub max_detections: usize,
}

fn default_max() -> usize {
    100
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_threshold: 0.1, nms_tiou: 0.5, max_detections: default_max() }
    }
}

/// Turns head outputs into scored segments sorted by descending score.
///
/// Every `(n, c)` whose sigmoid exceeds the threshold proposes
/// `[(n − so)·Δ, (n + eo)·Δ)` with `Δ = stride/fps`; starts are clamped at 0,
/// empty segments dropped, then greedy class-wise NMS is applied.
pub fn decode_predictions<S: Scalar>(
    out: &HeadOutput<S>,
    grid: TimeGrid,
    cfg: &DecodeConfig,
) -> Result<Vec<ActionInstance>> {
    if !(0.0..=1.0).contains(&cfg.score_threshold) || !(0.0..=1.0).contains(&cfg.nms_tiou) {
        return Err(Error::Argument("score_threshold and nms_tiou must lie in [0, 1]".into()));
    }
    let n = out.len();
    let nc = out.num_classes();
    let step = grid.seconds_per_step();
    let mut cands = Vec::new();
    for i in 0..n {
        let so = out.start_offset.data()[i].to_f64_lossy();
        let eo = out.end_offset.data()[i].to_f64_lossy();
        let start = ((i as f64 - so) * step).max(0.0);
        let end = (i as f64 + eo) * step;
        if !(end > start) || !end.is_finite() {
            continue;
        }
        for c in 0..nc {
            let score = sigmoid_scalar(out.class_logits.at2(i, c)).to_f64_lossy();
            if score > cfg.score_threshold {
                cands.push(ActionInstance::new(start, end, c, score));
            }
        }
    }
    Ok(nms(cands, cfg.nms_tiou, cfg.max_detections))
}

/// Greedy per-class non-maximum suppression. Ties in score keep input order.
pub fn nms(mut cands: Vec<ActionInstance>, max_tiou: f64, max_keep: usize) -> Vec<ActionInstance> {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ActionInstance> = Vec::new();
    for c in cands {
        if kept.len() >= max_keep {
            break;
        }
        let clash = kept
            .iter()
            .any(|k| k.class_id == c.class_id && tiou_unchecked(segment(k), segment(&c)) > max_tiou);
        if !clash {
            kept.push(c);
        }
    }
    kept
}
