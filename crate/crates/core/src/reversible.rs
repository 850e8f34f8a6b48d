//! Two-stream reversible kernels.
//!
//! A rewired stage carries two activation streams `(u, v)`. Each F-block advances
//! them by one step
//!
//! ```text
//! (u, v) -> (F(u) + v, u)
//! ```
//!
//! and two consecutive steps form a pair: with `(x1, x2)` in, the first step gives
//! `(y1, y2) = (F1(x1) + x2, x1)` and the second `(z1, z2) = (F2(y1) + y2, y1)`.
//! The step is inverted without evaluating any inverse of `F`:
//!
//! ```text
//! (u', v') -> (v', u' − F(v'))
//! ```
//!
//! so a whole stage is undone by stepping backwards from its last block.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{self as t, same_shape, Tensor};

/// A shape-preserving function of one tensor, such as an F-block with fixed parameters.
///
/// Implementations must be pure: the same input must produce bit-identical output.
pub trait Block<S: Scalar> {
    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>>;
}

impl<S: Scalar, F> Block<S> for F
where
    F: Fn(&Tensor<S>) -> Result<Tensor<S>>,
{
    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self(x)
    }
}

/// The two pathway activations after a pair of blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct RevPairState<S> {
    pub z1: Tensor<S>,
    pub z2: Tensor<S>,
}

/// One forward step `(u, v) -> (F(u) + v, u)`.
pub fn rev_step<S: Scalar, B: Block<S> + ?Sized>(
    u: &Tensor<S>,
    v: &Tensor<S>,
    f: &B,
) -> Result<(Tensor<S>, Tensor<S>)> {
    same_shape("rev_step", u, v)?;
    let fu = checked_apply(f, u)?;
    Ok((t::add(&fu, v)?, u.clone()))
}

/// Inverse of [`rev_step`]: `(u', v') -> (v', u' − F(v'))`.
pub fn rev_step_inverse<S: Scalar, B: Block<S> + ?Sized>(
    u_next: &Tensor<S>,
    v_next: &Tensor<S>,
    f: &B,
) -> Result<(Tensor<S>, Tensor<S>)> {
    same_shape("rev_step_inverse", u_next, v_next)?;
    let u = v_next.clone();
    let fu = checked_apply(f, &u)?;
    let v = t::sub(u_next, &fu)?;
    Ok((u, v))
}

/// `y2 = x1; y1 = F1(x1) + x2; z2 = y1; z1 = F2(y1) + y2`.
pub fn rev_forward_pair<S: Scalar, B1: Block<S> + ?Sized, B2: Block<S> + ?Sized>(
    x1: &Tensor<S>,
    x2: &Tensor<S>,
    f1: &B1,
    f2: &B2,
) -> Result<RevPairState<S>> {
    let (y1, y2) = rev_step(x1, x2, f1)?;
    let (z1, z2) = rev_step(&y1, &y2, f2)?;
    Ok(RevPairState { z1, z2 })
}

/// `y1 = z2; y2 = z1 − F2(y1); x1 = y2; x2 = y1 − F1(x1)`.
pub fn rev_inverse_pair<S: Scalar, B1: Block<S> + ?Sized, B2: Block<S> + ?Sized>(
    z1: &Tensor<S>,
    z2: &Tensor<S>,
    f1: &B1,
    f2: &B2,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (y1, y2) = rev_step_inverse(z1, z2, f2)?;
    rev_step_inverse(&y1, &y2, f1)
}

/// Runs the alternating two-stream chain over `blocks` in order.
pub fn rev_forward_chain<S: Scalar, B: Block<S>>(
    x1: &Tensor<S>,
    x2: &Tensor<S>,
    blocks: &[B],
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (mut u, mut v) = (x1.clone(), x2.clone());
    for b in blocks {
        (u, v) = rev_step(&u, &v, b)?;
    }
    Ok((u, v))
}

/// Reconstructs the chain input from its output, last block first.
pub fn rev_inverse_chain<S: Scalar, B: Block<S>>(
    r1: &Tensor<S>,
    r2: &Tensor<S>,
    blocks: &[B],
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (mut u, mut v) = (r1.clone(), r2.clone());
    for b in blocks.iter().rev() {
        (u, v) = rev_step_inverse(&u, &v, b)?;
    }
    Ok((u, v))
}

/// Two-stream entry: both streams start as copies of `x`.
pub fn duplicate_input<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    (x.clone(), x.clone())
}

/// Two-stream exit: `0.5·(r1 + r2)`.
pub fn average_outputs<S: Scalar>(r1: &Tensor<S>, r2: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(t::scale(&t::add(r1, r2)?, S::of(0.5)))
}

fn checked_apply<S: Scalar, B: Block<S> + ?Sized>(f: &B, x: &Tensor<S>) -> Result<Tensor<S>> {
    let y = f.apply(x)?;
    if y.shape() != x.shape() {
        return crate::error::dim_err(format!(
            "block maps {:?} to {:?}; reversible blocks must preserve shape",
            x.shape(),
            y.shape()
        ));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    fn zero(x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(x.shape()))
    }

    fn ident(x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(x.clone())
    }

    #[test]
    fn zero_blocks_pass_streams_through() {
        let (a, b) = (Tensor::from_vec(vec![1.0, -2.0]), Tensor::from_vec(vec![3.0, 4.0]));
        let st = rev_forward_pair(&a, &b, &zero, &zero).unwrap();
        assert_eq!((st.z1.clone(), st.z2.clone()), (a.clone(), b.clone()));
        assert_eq!(rev_inverse_pair(&a, &b, &zero, &zero).unwrap(), (a, b));
    }

    #[test]
    fn scalar_pair_by_hand() {
        let f1 = |x: &Tensor<f64>| Ok(t::scale(x, 2.0));
        let f2 = |x: &Tensor<f64>| Ok(t::scale(x, 3.0));
        let (y1, y2) = rev_step(&s(1.0), &s(1.0), &f1).unwrap();
        assert_eq!((y1.data()[0], y2.data()[0]), (3.0, 1.0));
        let st = rev_forward_pair(&s(1.0), &s(1.0), &f1, &f2).unwrap();
        assert_eq!((st.z1.data()[0], st.z2.data()[0]), (10.0, 3.0));
        let (x1, x2) = rev_inverse_pair(&s(10.0), &s(3.0), &f1, &f2).unwrap();
        assert_eq!((x1.data()[0], x2.data()[0]), (1.0, 1.0));
    }

    #[test]
    fn identity_blocks() {
        let (a, b) = (s(2.0), s(5.0));
        let st = rev_forward_pair(&a, &b, &ident, &ident).unwrap();
        // (2a + b, a + b)
        assert_eq!((st.z1.data()[0], st.z2.data()[0]), (9.0, 7.0));
    }

    #[test]
    fn adapters() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let (x1, x2) = duplicate_input(&x);
        assert_eq!((&x1, &x2), (&x, &x));
        assert_eq!(average_outputs(&x, &x).unwrap(), x);
        let avg = average_outputs(&Tensor::from_vec(vec![0.0, 2.0]), &Tensor::from_vec(vec![2.0, 0.0]));
        assert_eq!(avg.unwrap().data(), &[1.0, 1.0]);
        assert!(average_outputs(&x, &s(1.0)).is_err());
    }

    #[test]
    fn zero_stage_is_identity_end_to_end() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let (a, b) = duplicate_input(&x);
        let blocks = [zero, zero, zero];
        let (r1, r2) = rev_forward_chain(&a, &b, &blocks).unwrap();
        assert_eq!(average_outputs(&r1, &r2).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let err = rev_forward_pair(&s(1.0), &Tensor::zeros(&[2]), &zero, &zero).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        let grow = |x: &Tensor<f64>| Ok(Tensor::zeros(&[x.len() + 1]));
        assert!(rev_step(&s(1.0), &s(1.0), &grow).is_err());
    }
}
