use super::GradientMap;
use crate::error::{Error, Result};
use crate::rewiring::ParameterStore;
use crate::scalar::{DType, Scalar};

/// Central-difference gradient `(L(θ+h) − L(θ−h)) / 2h` for every scalar parameter.
///
/// Only defined for `f64`; other precisions fail with [`Error::Precision`].
pub fn numerical_gradient<S, F>(loss_fn: F, params: &ParameterStore<S>, h: f64) -> Result<GradientMap<S>>
where
    S: Scalar,
    F: Fn(&ParameterStore<S>) -> Result<S>,
{
    if S::DTYPE != DType::F64 {
        return Err(Error::Precision(format!(
            "finite differences need f64 parameters, got {}",
            S::DTYPE
        )));
    }
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut work = params.clone();
    let mut out = GradientMap::new();
    let two_h = S::of(2.0 * h);
    for name in names {
        let n = work.get(&name).expect("name from store").len();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = work.get(&name).expect("name from store").data()[i];
            set(&mut work, &name, i, orig + S::of(h));
            let plus = loss_fn(&work)?;
            set(&mut work, &name, i, orig - S::of(h));
            let minus = loss_fn(&work)?;
            set(&mut work, &name, i, orig);
            g.push((plus - minus) / two_h);
        }
        let shape = work.get(&name).expect("name from store").shape().to_vec();
        out.insert(name, crate::tensor::Tensor::new(shape, g)?);
    }
    Ok(out)
}

fn set<S: Scalar>(store: &mut ParameterStore<S>, name: &str, i: usize, v: S) {
    store.get_mut(name).expect("name from store").data_mut()[i] = v;
}
