//! Residual-to-reversible rewiring.
//!
//! Rewiring is a pure data transform on [`NetworkSpec`]: each residual stage keeps
//! its F-blocks, hyperparameters and parameter names, and only its wiring flips to
//! [`Wiring::Reversible`]. Every skip connection then spans two consecutive blocks,
//! which yields the two-stream chain executed by [`crate::reversible`]. Because
//! no block changes shape, a pretrained [`ParameterStore`] carries over as is.

mod params;
mod spec;

pub use params::*;
pub use spec::*;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A validation finding, located by stage and block index where applicable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub stage: Option<usize>,
    pub block: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn spec(message: impl Into<String>) -> Self {
        Self { stage: None, block: None, message: message.into() }
    }

    fn stage(stage: usize, message: impl Into<String>) -> Self {
        Self { stage: Some(stage), block: None, message: message.into() }
    }

    fn block(stage: usize, block: usize, message: impl Into<String>) -> Self {
        Self { stage: Some(stage), block: Some(block), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.stage, self.block) {
            (Some(s), Some(b)) => write!(f, "stage {s} block {b}: {}", self.message),
            (Some(s), None) => write!(f, "stage {s}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

pub(crate) fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Checks every structural invariant of a spec. An empty list means the spec is valid.
pub fn validate_spec(spec: &NetworkSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if spec.version != SPEC_VERSION {
        out.push(Diagnostic::spec(format!(
            "unsupported version {} (expected {SPEC_VERSION})",
            spec.version
        )));
    }
    let (t_in, c_in) = match spec.input_shape.as_slice() {
        [t, c] if *t > 0 && *c > 0 => (*t, *c),
        s => {
            out.push(Diagnostic::spec(format!("input_shape {s:?} must be [T, C] with positive entries")));
            (0, 0)
        }
    };
    if spec.downsamplers.len() != spec.stages.len() {
        out.push(Diagnostic::spec(format!(
            "{} stages need {} downsamplers, found {}",
            spec.stages.len(),
            spec.stages.len(),
            spec.downsamplers.len()
        )));
    }

    let mut seen = BTreeSet::new();
    let mut check_names = |names: &[String], stage: usize, block: Option<usize>, out: &mut Vec<Diagnostic>| {
        for n in names {
            if !seen.insert(n.clone()) {
                let msg = format!("parameter name `{n}` is used more than once");
                out.push(match block {
                    Some(b) => Diagnostic::block(stage, b, msg),
                    None => Diagnostic::stage(stage, msg),
                });
            }
        }
    };

    let mut t = t_in;
    let mut c = c_in;
    for (i, stage) in spec.stages.iter().enumerate() {
        if let Some(ds) = spec.downsamplers.get(i) {
            if ds.stride == 0 {
                out.push(Diagnostic::stage(i, "downsampler stride must be >= 1"));
            }
            if ds.kernel == 0 {
                out.push(Diagnostic::stage(i, "downsampler kernel must be >= 1"));
            }
            if ds.in_channels == 0 || ds.out_channels == 0 {
                out.push(Diagnostic::stage(i, "downsampler channels must be >= 1"));
            }
            if ds.in_channels != c && c > 0 {
                out.push(Diagnostic::stage(i, format!(
                    "downsampler expects {} input channels, previous layer provides {c}",
                    ds.in_channels
                )));
            }
            if ds.param_names.len() != 2 {
                out.push(Diagnostic::stage(i, format!(
                    "downsampler needs 2 parameter names, found {}",
                    ds.param_names.len()
                )));
            }
            check_names(&ds.param_names, i, None, &mut out);
            if ds.stride > 0 && ds.kernel > 0 && t > 0 {
                match ds.output_len(t) {
                    Some(len) => t = len,
                    None => {
                        out.push(Diagnostic::stage(i, format!(
                            "downsampler yields an empty sequence for T={t}"
                        )));
                        t = 0;
                    }
                }
            }
            c = ds.out_channels;
        }
        for (j, b) in stage.blocks.iter().enumerate() {
            let roles = b.kind.param_roles().len();
            if b.param_names.len() != roles {
                out.push(Diagnostic::block(i, j, format!(
                    "{:?} needs {roles} parameter names, found {}",
                    b.kind,
                    b.param_names.len()
                )));
            }
            check_names(&b.param_names, i, Some(j), &mut out);
            let probe_t = t.max(1);
            match b.output_shape(probe_t, c) {
                Ok(shape) if shape == (probe_t, c) => {}
                Ok(shape) => out.push(Diagnostic::block(i, j, format!(
                    "not residual-compatible: maps [{probe_t}, {c}] to {:?}",
                    [shape.0, shape.1]
                ))),
                Err(e) => out.push(Diagnostic::block(i, j, e)),
            }
        }
    }
    out
}

/// Checks that `params` holds exactly the spec's parameters with the spec's shapes.
pub fn check_params<S: Scalar>(spec: &NetworkSpec, params: &ParameterStore<S>) -> Vec<String> {
    let want: BTreeMap<String, Vec<usize>> = spec.param_shapes().into_iter().collect();
    let mut problems = Vec::new();
    for (name, shape) in &want {
        match params.get(name) {
            None => problems.push(format!("missing `{name}`")),
            Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                "`{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )),
            Some(_) => {}
        }
    }
    for name in params.names() {
        if !want.contains_key(name) {
            problems.push(format!("extra `{name}`"));
        }
    }
    problems
}

/// Rewires every residual stage into a reversible one.
///
/// Block lists, kinds, hyperparameters, parameter names and downsamplers are left
/// untouched. A spec with any stage already reversible is rejected.
pub fn rewire(spec: &NetworkSpec) -> Result<NetworkSpec> {
    if let Some(i) = spec.stages.iter().position(|s| s.wiring != Wiring::Residual) {
        return Err(Error::Rewire(format!("stage {i} is already reversible")));
    }
    let diags = validate_spec(spec);
    if !diags.is_empty() {
        return Err(Error::Rewire(join_diagnostics(&diags)));
    }
    let mut out = spec.clone();
    for stage in &mut out.stages {
        if !stage.blocks.is_empty() {
            stage.wiring = Wiring::Reversible;
        }
    }
    Ok(out)
}

/// Carries a residual network's parameters over to its rewired counterpart.
///
/// The mapping is the identity: every tensor is copied bit for bit. Fails when
/// `reversible_spec` is not the rewiring of `residual_spec` or when the store does
/// not match the spec's parameter set.
pub fn remap_parameters<S: Scalar>(
    old: &ParameterStore<S>,
    residual_spec: &NetworkSpec,
    reversible_spec: &NetworkSpec,
) -> Result<ParameterStore<S>> {
    let expected = rewire(residual_spec).map_err(|e| Error::Remap(e.to_string()))?;
    if &expected != reversible_spec {
        return Err(Error::Remap(
            "target spec is not the rewiring of the source spec".into(),
        ));
    }
    let problems = check_params(residual_spec, old);
    if !problems.is_empty() {
        return Err(Error::Remap(problems.join(", ")));
    }
    let remapped = old.clone();
    debug_assert!(check_params(reversible_spec, &remapped).is_empty());
    Ok(remapped)
}
