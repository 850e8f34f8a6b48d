//! Shared generators and independent reference implementations for the
//! integration tests. Nothing here calls the library routine it checks.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rewire_tal::backbone::zoo::init_params;
use rewire_tal::backbone::FBlock;
use rewire_tal::rewiring::{BlockSpec, DownsampleSpec, StageSpec, Wiring, SPEC_VERSION};
use rewire_tal::tal::ActionInstance;
use rewire_tal::{NetworkSpec, ParameterStore, Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut *rng); std * z }).collect();
    Tensor::from_f64(shape, &d).unwrap()
}

pub fn to_f64<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// `max |a − b| / max |b|`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Random block of any kind at `channels` (even channels allow two heads).
pub fn random_block_spec(rng: &mut ChaCha8Rng, prefix: &str, channels: usize) -> BlockSpec {
    match rng.random_range(0..3) {
        0 => BlockSpec::conv_norm_relu(prefix, channels, [1, 3, 5][rng.random_range(0..3)]),
        1 => BlockSpec::mlp(prefix, channels, rng.random_range(channels / 2..=2 * channels).max(1)),
        _ => {
            let heads = if channels % 2 == 0 { rng.random_range(1..=2) } else { 1 };
            BlockSpec::attention(prefix, channels, heads)
        }
    }
}

/// A single reversible stage of `n_blocks` random blocks behind a 1×1 stem.
pub fn single_stage_spec(seed: u64, n_blocks: usize, in_ch: usize, channels: usize, t: usize) -> NetworkSpec {
    let mut r = rng(seed);
    let blocks = (0..n_blocks).map(|j| random_block_spec(&mut r, &format!("s0.b{j}"), channels)).collect();
    NetworkSpec {
        version: SPEC_VERSION,
        name: Some(format!("stage-{seed}")),
        input_shape: vec![t, in_ch],
        stages: vec![StageSpec { blocks, wiring: Wiring::Reversible }],
        downsamplers: vec![DownsampleSpec::new("ds0", 1, in_ch, channels, 1)],
    }
}

/// Random F-blocks with initialized parameters.
pub fn random_blocks<S: Scalar>(seed: u64, n_blocks: usize, channels: usize) -> Vec<FBlock<S>> {
    let spec = single_stage_spec(seed, n_blocks, channels, channels, 8);
    let params: ParameterStore<S> = init_params(&spec, seed ^ 0xB10C);
    spec.stages[0].blocks.iter().map(|b| FBlock::new(b, &params).unwrap()).collect()
}

/// Finite-difference comparison rule used by the gradient checks.
///
/// A central difference `(L(θ+h) − L(θ−h)) / 2h` cannot resolve gradient
/// differences smaller than the rounding of `L` itself, about `ε·|L|/h`. A
/// component passes when it agrees to `rel` relative, or when the gap is below
/// that resolution floor (`FD_FLOOR_ULPS · ε · max(|L|, 1) / h`).
pub const FD_FLOOR_ULPS: f64 = 16.0;

pub fn fd_agrees(analytic: f64, numeric: f64, rel: f64, loss: f64, h: f64) -> bool {
    let gap = (analytic - numeric).abs();
    let floor = FD_FLOOR_ULPS * f64::EPSILON * loss.abs().max(1.0) / h;
    gap <= rel * analytic.abs().max(numeric.abs()) || gap <= floor
}

// ---------- temporal localization oracles ----------

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = if a.0 > b.0 { a.0 } else { b.0 };
    let hi = if a.1 < b.1 { a.1 } else { b.1 };
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter / union
}

/// Straightforward evaluator: per threshold and class, rank detections, match
/// each to the best unmatched ground truth, then sum `max precision at or after
/// rank k` over the true positives.
pub fn reference_map(
    preds: &BTreeMap<String, Vec<ActionInstance>>,
    gts: &BTreeMap<String, Vec<ActionInstance>>,
    thresholds: &[f64],
) -> (Vec<f64>, f64) {
    let mut classes: Vec<usize> = Vec::new();
    for list in gts.values() {
        for g in list {
            if !classes.contains(&g.class_id) {
                classes.push(g.class_id);
            }
        }
    }
    let mut per = Vec::new();
    for &thr in thresholds {
        let mut aps = Vec::new();
        for &c in &classes {
            let mut n_gt = 0;
            for list in gts.values() {
                n_gt += list.iter().filter(|g| g.class_id == c).count();
            }
            let mut dets: Vec<(String, ActionInstance)> = Vec::new();
            for (v, list) in preds {
                for d in list.iter().filter(|d| d.class_id == c) {
                    dets.push((v.clone(), *d));
                }
            }
            // insertion sort by score, stable
            for i in 1..dets.len() {
                let mut j = i;
                while j > 0 && dets[j - 1].1.score < dets[j].1.score {
                    dets.swap(j - 1, j);
                    j -= 1;
                }
            }
            let mut taken: BTreeMap<(String, usize), bool> = BTreeMap::new();
            let mut hits = Vec::new();
            for (v, d) in &dets {
                let mut best: Option<usize> = None;
                let mut best_o = -1.0;
                if let Some(list) = gts.get(v) {
                    for (j, g) in list.iter().enumerate() {
                        if g.class_id != c || taken.contains_key(&(v.clone(), j)) {
                            continue;
                        }
                        let o = overlap((d.t_start, d.t_end), (g.t_start, g.t_end));
                        if o > best_o {
                            best_o = o;
                            best = Some(j);
                        }
                    }
                }
                let hit = best.is_some() && best_o >= thr;
                if hit {
                    taken.insert((v.clone(), best.unwrap()), true);
                }
                hits.push(hit);
            }
            let mut ap = 0.0;
            for k in 0..hits.len() {
                if !hits[k] {
                    continue;
                }
                let mut best_p = 0.0f64;
                for j in k..hits.len() {
                    let tp = hits[..=j].iter().filter(|h| **h).count();
                    best_p = best_p.max(tp as f64 / (j + 1) as f64);
                }
                ap += best_p / n_gt as f64;
            }
            aps.push(ap);
        }
        per.push(if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 });
    }
    let avg = per.iter().sum::<f64>() / per.len() as f64;
    (per, avg)
}

/// Brute-force class-wise NMS: repeatedly take the best remaining candidate
/// (earliest on ties) and delete every same-class candidate overlapping it by
/// more than `thr`.
pub fn reference_nms(mut cands: Vec<ActionInstance>, thr: f64) -> Vec<ActionInstance> {
    let mut kept = Vec::new();
    while !cands.is_empty() {
        let mut best = 0;
        for i in 1..cands.len() {
            if cands[i].score > cands[best].score {
                best = i;
            }
        }
        let k = cands.remove(best);
        cands.retain(|c| c.class_id != k.class_id || overlap((c.t_start, c.t_end), (k.t_start, k.t_end)) <= thr);
        kept.push(k);
    }
    kept
}

/// Candidate generation written out per position and class.
pub fn reference_candidates(
    logits: &[Vec<f64>],
    so: &[f64],
    eo: &[f64],
    seconds_per_step: f64,
    thr: f64,
) -> Vec<ActionInstance> {
    let mut out = Vec::new();
    for n in 0..so.len() {
        let mut start = (n as f64 - so[n]) * seconds_per_step;
        if start < 0.0 {
            start = 0.0;
        }
        let end = (n as f64 + eo[n]) * seconds_per_step;
        if end <= start {
            continue;
        }
        for (c, &z) in logits[n].iter().enumerate() {
            let p = 1.0 / (1.0 + (-z).exp());
            if p > thr {
                out.push(ActionInstance::new(start, end, c, p));
            }
        }
    }
    out
}

/// Loss computed scalar by scalar: mean BCE over all logits plus λ times the
/// mean absolute offset error over positive positions.
pub fn reference_loss(
    logits: &[Vec<f64>],
    so: &[f64],
    eo: &[f64],
    gts: &[ActionInstance],
    seconds_per_step: f64,
    lambda: f64,
) -> f64 {
    let n = so.len();
    let nc = logits[0].len();
    let mut bce = 0.0;
    let mut l1 = 0.0;
    let mut pos = 0usize;
    for i in 0..n {
        let t = i as f64 * seconds_per_step;
        let mut owner: Option<&ActionInstance> = None;
        for g in gts {
            if g.t_start <= t && t < g.t_end && owner.is_none_or(|o| g.t_end - g.t_start < o.t_end - o.t_start) {
                owner = Some(g);
            }
        }
        for c in 0..nc {
            let y = if owner.is_some_and(|g| g.class_id == c) { 1.0 } else { 0.0 };
            let p = 1.0 / (1.0 + (-logits[i][c]).exp());
            bce += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        if let Some(g) = owner {
            pos += 1;
            l1 += (so[i] - (t - g.t_start) / seconds_per_step).abs();
            l1 += (eo[i] - (g.t_end - t) / seconds_per_step).abs();
        }
    }
    let mut loss = bce / (n * nc) as f64;
    if pos > 0 {
        loss += lambda * l1 / (2 * pos) as f64;
    }
    loss
}

/// Random detection problem: `n_videos` videos, ground truth and noisy predictions.
pub fn random_detection_problem(
    seed: u64,
    n_videos: usize,
    n_gt: usize,
    n_pred: usize,
    num_classes: usize,
) -> (BTreeMap<String, Vec<ActionInstance>>, BTreeMap<String, Vec<ActionInstance>>) {
    let mut r = rng(seed);
    let mut gts: BTreeMap<String, Vec<ActionInstance>> = BTreeMap::new();
    let mut preds: BTreeMap<String, Vec<ActionInstance>> = BTreeMap::new();
    let vid = |i: usize| format!("v{i:03}");
    let mut all_gt = Vec::new();
    for _ in 0..n_gt {
        let v = r.random_range(0..n_videos);
        let s = r.random_range(0.0..50.0);
        let g = ActionInstance::ground_truth(s, s + r.random_range(0.5..10.0), r.random_range(0..num_classes));
        gts.entry(vid(v)).or_default().push(g);
        all_gt.push((v, g));
    }
    for _ in 0..n_pred {
        let score = r.random_range(0.0..1.0);
        if !all_gt.is_empty() && r.random_bool(0.6) {
            let (v, g) = all_gt[r.random_range(0..all_gt.len())];
            let s = (g.t_start + r.random_range(-1.5..1.5)).max(0.0);
            let e = (g.t_end + r.random_range(-1.5..1.5)).max(s + 0.1);
            let c = if r.random_bool(0.8) { g.class_id } else { r.random_range(0..num_classes) };
            preds.entry(vid(v)).or_default().push(ActionInstance::new(s, e, c, score));
        } else {
            let v = r.random_range(0..n_videos);
            let s = r.random_range(0.0..55.0);
            let d = ActionInstance::new(s, s + r.random_range(0.2..8.0), r.random_range(0..num_classes), score);
            preds.entry(vid(v)).or_default().push(d);
        }
    }
    (preds, gts)
}
