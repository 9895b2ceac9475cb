//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Everything is generic over [`Real`]: training runs in `f32`, gradient
//! verification in `f64`. Reductions run sequentially in a fixed order so
//! identical inputs give bit-identical outputs.

mod graph;
mod tensor;

pub use graph::{Graph, Var, IGNORE_INDEX};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("numeric fault: non-finite value in {context}")]
    NonFinite { context: String },
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` builds a scalar from the graph input `x`. Step `h` should lie in
/// `[1e-6, 1e-3]` in `f64`.
pub fn grad_check<F, Fun>(f: Fun, x: &Tensor<F>, h: F) -> Result<F, NumericError>
where
    F: Real,
    Fun: Fn(&mut Graph<F>, Var) -> Result<Var, NumericError>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates of `x`.
pub fn grad_check_coords<F, Fun>(f: Fun, x: &Tensor<F>, h: F, coords: &[usize]) -> Result<F, NumericError>
where
    F: Real,
    Fun: Fn(&mut Graph<F>, Var) -> Result<Var, NumericError>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic: Vec<F> = g.grad(xv).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); x.numel()]);

    let eval = |t: Tensor<F>| -> Result<F, NumericError> {
        let mut g = Graph::new();
        let v = g.param(t);
        let out = f(&mut g, v)?;
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(NumericError::NonFinite { context: "grad_check objective".into() });
        }
        Ok(y)
    };

    let two = F::of(2.0);
    let mut worst = F::zero();
    for &c in coords {
        let mut plus = x.clone();
        plus.data_mut()[c] = plus.data()[c] + h;
        let mut minus = x.clone();
        minus.data_mut()[c] = minus.data()[c] - h;
        let numeric = (eval(plus)? - eval(minus)?) / (two * h);
        let a = analytic[c];
        if !a.is_finite() {
            return Err(NumericError::NonFinite { context: format!("analytic gradient coordinate {c}") });
        }
        let err = (a - numeric).abs() / F::one().max(a.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
