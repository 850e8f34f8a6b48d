mod common;

use common::{normal_tensor, rng, to_f64};
use rewire_tal::backbone::zoo::{attention_backbone_spec, conv_backbone_spec, init_params, random_spec, with_depth};
use rewire_tal::backbone::{predict_peak_memory, LAYERNORM_EPS};
use rewire_tal::harness::measure_step;
use rewire_tal::rewiring::{BlockKind, BlockSpec};
use rewire_tal::{rewire, Backbone, Error, ExecMode, MemoryLedger, NetworkSpec, ParameterStore, Tensor};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| (0..c).map(|j| t.at2(i, j)).collect()).collect()
}

fn p<'a>(params: &'a ParameterStore<f64>, name: &str) -> &'a [f64] {
    params.get(name).unwrap().data()
}

fn conv(x: &Mat, w: &[f64], b: &[f64], k: usize, cout: usize, stride: usize, pad: usize) -> Mat {
    let (t, cin) = (x.len() as isize, x[0].len());
    let t_out = ((t + 2 * pad as isize - k as isize) / stride as isize + 1) as usize;
    (0..t_out)
        .map(|n| {
            (0..cout)
                .map(|o| {
                    let mut acc = b[o];
                    for kk in 0..k {
                        let src = (n * stride + kk) as isize - pad as isize;
                        if src < 0 || src >= t {
                            continue;
                        }
                        for i in 0..cin {
                            acc += x[src as usize][i] * w[(kk * cin + i) * cout + o];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn layernorm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let c = row.len() as f64;
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

fn linear(x: &Mat, w: &[f64], b: Option<&[f64]>, cout: usize) -> Mat {
    x.iter()
        .map(|row| {
            (0..cout)
                .map(|o| row.iter().enumerate().map(|(i, v)| v * w[i * cout + o]).sum::<f64>() + b.map_or(0.0, |b| b[o]))
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let (t, c) = (q.len(), q[0].len());
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; t];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn block(b: &BlockSpec, params: &ParameterStore<f64>, x: &Mat) -> Mat {
    let n = |i: usize| p(params, &b.param_names[i]);
    let c = b.channels;
    match b.kind {
        BlockKind::ConvNormRelu => {
            let k = b.kernel.unwrap();
            let h = layernorm(&conv(x, n(0), n(1), k, c, 1, k / 2), n(2), n(3));
            h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
        }
        BlockKind::Mlp => {
            let hid = b.hidden.unwrap();
            let h = linear(&layernorm(x, n(0), n(1)), n(2), Some(n(3)), hid);
            let h: Mat = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
            linear(&h, n(4), Some(n(5)), c)
        }
        BlockKind::Attention => {
            let h = layernorm(x, n(0), n(1));
            let (q, k, v) = (linear(&h, n(2), None, c), linear(&h, n(3), None, c), linear(&h, n(4), None, c));
            linear(&attention(&q, &k, &v, b.heads.unwrap()), n(5), Some(n(6)), c)
        }
    }
}

/// Residual network evaluated entirely with scalar loops.
fn residual_oracle(spec: &NetworkSpec, params: &ParameterStore<f64>, x: &Tensor<f64>) -> Mat {
    let mut h = mat(x);
    for (stage, ds) in spec.stages.iter().zip(&spec.downsamplers) {
        let w = p(params, &ds.param_names[0]);
        let b = p(params, &ds.param_names[1]);
        h = conv(&h, w, b, ds.kernel, ds.out_channels, ds.stride, ds.padding());
        for blk in &stage.blocks {
            let f = block(blk, params, &h);
            for (row, frow) in h.iter_mut().zip(f) {
                for (v, d) in row.iter_mut().zip(frow) {
                    *v += d;
                }
            }
        }
    }
    h
}

fn forward(spec: &NetworkSpec, params: &ParameterStore<f64>, x: &Tensor<f64>, mode: ExecMode) -> Tensor<f64> {
    let b = Backbone::build(spec, params).unwrap();
    b.forward(x, mode, &mut MemoryLedger::new()).unwrap().0
}

fn assert_close(got: &Tensor<f64>, want: &Mat, tol: f64) {
    let got = mat(got);
    assert_eq!((got.len(), got[0].len()), (want.len(), want[0].len()));
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((a - b).abs() <= tol * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn conv_backbone_matches_hand_composition() {
    let spec = conv_backbone_spec("conv", 3, &[6], 3, 3, &[2], 12);
    let params = init_params::<f64>(&spec, 1);
    let x = normal_tensor::<f64>(&mut rng(1), &[12, 3], 1.0);
    let want = residual_oracle(&spec, &params, &x);
    for mode in ExecMode::ALL {
        assert_close(&forward(&spec, &params, &x, mode), &want, 1e-12);
    }
}

#[test]
fn attention_backbone_alternates_attention_and_mlp() {
    let spec = attention_backbone_spec("attn", 3, &[8, 8], 4, 2, 2, &[2, 1], 10);
    for stage in &spec.stages {
        let kinds: Vec<_> = stage.blocks.iter().map(|b| b.kind).collect();
        assert_eq!(kinds, [BlockKind::Attention, BlockKind::Mlp, BlockKind::Attention, BlockKind::Mlp]);
    }
    let params = init_params::<f64>(&spec, 2);
    let x = normal_tensor::<f64>(&mut rng(2), &[10, 3], 1.0);
    assert_close(&forward(&spec, &params, &x, ExecMode::CacheAll), &residual_oracle(&spec, &params, &x), 1e-12);
}

#[test]
fn build_rejects_parameter_name_mismatch() {
    let spec = conv_backbone_spec("m", 3, &[6], 2, 3, &[1], 8);
    let mut params = init_params::<f64>(&spec, 0);
    let t = params.remove("s0.b0.conv.w").unwrap();
    params.insert("s0.b0.conv.weight", t);
    assert!(Backbone::build(&spec, &params).is_err());
}

#[test]
fn build_rejects_invalid_spec() {
    let mut spec = conv_backbone_spec("m", 3, &[6], 2, 3, &[1], 8);
    let params = init_params::<f64>(&spec, 0);
    spec.downsamplers[0].stride = 0;
    assert!(Backbone::build(&spec, &params).is_err());
}

#[test]
fn wrong_input_channels_is_a_dimension_error() {
    let spec = conv_backbone_spec("m", 3, &[6], 2, 3, &[1], 8);
    let b = Backbone::build(&spec, &init_params::<f64>(&spec, 0)).unwrap();
    let err = b.forward(&Tensor::zeros(&[8, 4]), ExecMode::CacheAll, &mut MemoryLedger::new()).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn stride_two_halves_the_sequence() {
    let spec = rewire(&conv_backbone_spec("s2", 4, &[8], 2, 3, &[2], 512)).unwrap();
    let params = init_params::<f32>(&spec, 0);
    let b = Backbone::build(&spec, &params).unwrap();
    for t in [512, 511] {
        let x = Tensor::<f32>::filled(&[t, 4], 0.25);
        let (y, tape) = b.forward(&x, ExecMode::Reversible, &mut MemoryLedger::new()).unwrap();
        assert_eq!(y.shape(), &[256, 8]);
        assert_eq!(tape.padded_len(), 512);
    }
}

#[test]
fn zero_blocks_and_identity_downsamplers_return_the_input() {
    let spec = rewire(&conv_backbone_spec("id", 4, &[4, 4], 3, 3, &[1, 1], 9)).unwrap();
    let mut params = init_params::<f64>(&spec, 0);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let t = params.get_mut(&name).unwrap();
        *t = if name.starts_with("ds") && name.ends_with(".w") {
            let mut eye = vec![0.0; 16];
            (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
            Tensor::new(vec![1, 4, 4], eye).unwrap()
        } else {
            Tensor::zeros(t.shape())
        };
    }
    let x = normal_tensor::<f64>(&mut rng(4), &[9, 4], 1.0);
    for mode in ExecMode::ALL {
        assert_eq!(to_f64(&forward(&spec, &params, &x, mode)), to_f64(&x));
    }
}

#[test]
fn prediction_matches_measurement_on_random_specs() {
    for seed in 0..20 {
        let spec = rewire(&random_spec(500 + seed, 5, 12)).unwrap();
        let t = spec.input_shape[0];
        for mode in ExecMode::ALL {
            for batch in [1, 3] {
                let (measured, _) = measure_step::<f32>(&spec, t, batch, mode, seed).unwrap();
                let predicted = predict_peak_memory::<f32>(&spec, t, batch, mode);
                let gap = (predicted as f64 - measured as f64).abs() / measured as f64;
                assert!(gap <= 0.10, "seed {seed} {mode}: predicted {predicted}, measured {measured}");
            }
        }
    }
}

#[test]
fn prediction_depth_examples() {
    let base = rewire(&conv_backbone_spec("d", 4, &[16, 16], 2, 3, &[2, 1], 64)).unwrap();
    let at = |d: usize, mode| predict_peak_memory::<f32>(&with_depth(&base, d), 64, 1, mode);
    let zero = rewire(&conv_backbone_spec("d0", 4, &[16, 16], 0, 3, &[2, 1], 64)).unwrap();
    assert_eq!(
        predict_peak_memory::<f32>(&zero, 64, 1, ExecMode::CacheAll),
        predict_peak_memory::<f32>(&zero, 64, 1, ExecMode::Reversible)
    );
    let floor = predict_peak_memory::<f32>(&zero, 64, 1, ExecMode::CacheAll);
    assert_eq!(at(8, ExecMode::CacheAll) - floor, 2 * (at(4, ExecMode::CacheAll) - floor));
    assert_eq!(at(8, ExecMode::Reversible), at(4, ExecMode::Reversible));
}

#[test]
fn ledger_replay_matches_running_total() {
    let spec = rewire(&attention_backbone_spec("l", 3, &[8, 8], 2, 2, 2, &[2, 1], 16)).unwrap();
    let params = init_params::<f64>(&spec, 3);
    let b = Backbone::build(&spec, &params).unwrap();
    let x = normal_tensor::<f64>(&mut rng(3), &[16, 3], 1.0);
    for mode in ExecMode::ALL {
        let mut ledger = MemoryLedger::new();
        let (y, tape) = b.forward(&x, mode, &mut ledger).unwrap();
        assert_eq!(ledger.replayed_total(), ledger.total_bytes() as i64);
        b.backward(tape, &Tensor::filled(y.shape(), 1.0), &mut ledger).unwrap();
        let mut running = 0i64;
        let mut peak = 0i64;
        for e in ledger.events() {
            running += e.delta;
            assert!(running >= 0);
            peak = peak.max(running);
        }
        assert_eq!(running, 0, "{mode}: everything is freed after backward");
        assert_eq!(ledger.peak_bytes() as i64, peak);
    }
}
