//! Measured versus predicted activation memory across depths and modes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::ExecMode;
use crate::backbone::zoo::{init_params, with_depth};
use crate::backbone::{predict_peak_memory, Backbone, MemoryLedger};
use crate::error::{Error, Result};
use crate::rewiring::{rewire, NetworkSpec, Wiring};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub spec_name: String,
    pub mode: ExecMode,
    pub blocks_per_stage: usize,
    pub t: usize,
    pub batch: usize,
    pub predicted_bytes: usize,
    pub measured_peak_bytes: usize,
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str = "spec_name,mode,blocks_per_stage,T,batch,predicted_bytes,measured_peak_bytes,wall_ms";

impl ProfileRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.spec_name,
            self.mode,
            self.blocks_per_stage,
            self.t,
            self.batch,
            self.predicted_bytes,
            self.measured_peak_bytes,
            self.wall_ms
        )
    }
}

pub fn rows_to_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// A residual spec is rewired first so both modes run the same network.
fn reversible_form(spec: &NetworkSpec) -> Result<NetworkSpec> {
    if spec.stages.iter().all(|s| s.wiring == Wiring::Residual) {
        rewire(spec)
    } else {
        Ok(spec.clone())
    }
}

/// One training step over `batch` random sequences: all forwards are held,
/// then backwards run in reverse order. Returns peak activation bytes and wall time.
pub fn measure_step<S: Scalar>(
    spec: &NetworkSpec,
    t: usize,
    batch: usize,
    mode: ExecMode,
    seed: u64,
) -> Result<(usize, f64)> {
    if t == 0 || batch == 0 {
        return Err(Error::Argument("T and batch must be positive".into()));
    }
    let params = init_params::<S>(spec, seed);
    let b = Backbone::build(spec, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f46);
    let mut normal = |shape: &[usize]| -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_f64(shape, &d)
    };
    let inputs: Vec<Tensor<S>> =
        (0..batch).map(|_| normal(&[t, spec.input_channels()])).collect::<Result<_>>()?;
    let start = Instant::now();
    let mut ledger = MemoryLedger::new();
    let mut held = Vec::with_capacity(batch);
    for x in &inputs {
        let (y, tape) = b.forward(x, mode, &mut ledger)?;
        held.push((y.shape().to_vec(), tape));
    }
    while let Some((shape, tape)) = held.pop() {
        let gy = normal(&shape)?;
        b.backward(tape, &gy, &mut ledger)?;
    }
    Ok((ledger.peak_activation_bytes(), start.elapsed().as_secs_f64() * 1e3))
}

/// Sweeps `depths × modes`, comparing the ledger peak with the analytic model.
pub fn profile_memory(
    spec: &NetworkSpec,
    depths: &[usize],
    modes: &[ExecMode],
    t: usize,
    batch: usize,
    dtype: DType,
) -> Result<Vec<ProfileRow>> {
    let base = reversible_form(spec)?;
    let name = spec.name.clone().unwrap_or_else(|| "unnamed".into());
    let mut rows = Vec::new();
    for &d in depths {
        let s = with_depth(&base, d);
        for &mode in modes {
            let (predicted, (measured, wall_ms)) = match dtype {
                DType::F32 => (
                    predict_peak_memory::<f32>(&s, t, batch, mode),
                    measure_step::<f32>(&s, t, batch, mode, 0)?,
                ),
                DType::F64 => (
                    predict_peak_memory::<f64>(&s, t, batch, mode),
                    measure_step::<f64>(&s, t, batch, mode, 0)?,
                ),
            };
            rows.push(ProfileRow {
                spec_name: name.clone(),
                mode,
                blocks_per_stage: d,
                t,
                batch,
                predicted_bytes: predicted,
                measured_peak_bytes: measured,
                wall_ms,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::zoo::conv_backbone_spec;

    #[test]
    fn prediction_matches_measurement() {
        let spec = conv_backbone_spec("c", 2, &[8, 16], 2, 3, &[2, 2], 32);
        let rows = profile_memory(&spec, &[1, 3], &ExecMode::ALL, 32, 2, DType::F32).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_eq!(r.predicted_bytes, r.measured_peak_bytes, "{r:?}");
        }
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
    }
}
