//! Central-difference gradient oracle.

use super::{no_grad, Tensor, TensorError};

/// Difference quotient used for the numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(p + h) - f(p - h)) / 2h`, error `O(h^2)`.
    #[default]
    Central,
    /// `(f(p - 2h) - 8 f(p - h) + 8 f(p + h) - f(p + 2h)) / 12h`, error `O(h^4)`.
    FivePoint,
}

/// Central differences for every coordinate of every tensor in `params`.
///
/// `f` is evaluated with graph recording disabled; each coordinate is restored
/// bit-for-bit before moving to the next.
pub fn numeric_gradients<E>(
    f: &mut dyn FnMut() -> Result<Tensor, E>,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Vec<f64>>, E> {
    numeric_gradients_with(f, params, h, Stencil::Central)
}

pub fn numeric_gradients_with<E>(
    f: &mut dyn FnMut() -> Result<Tensor, E>,
    params: &[Tensor],
    h: f64,
    stencil: Stencil,
) -> Result<Vec<Vec<f64>>, E> {
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let mut grads = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            let original = p.data()[i];
            let mut at = |offset: f64| -> Result<f64, E> {
                p.update_data(|d| d[i] = original + offset);
                no_grad(&mut *f).map(|t| t.item())
            };
            let g = match stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h),
            };
            p.update_data(|d| d[i] = original);
            grads.push(g);
        }
        out.push(grads);
    }
    Ok(out)
}

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lists differ in length");
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.len(), n.len(), "gradient buffers differ in length");
            a.iter().zip(n)
        })
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences and returns the maximum relative error.
///
/// Gradient buffers of `params` are zeroed first and left holding the
/// analytic gradient afterwards.
pub fn finite_difference_check<E: From<TensorError>>(
    f: &mut dyn FnMut() -> Result<Tensor, E>,
    params: &[Tensor],
    h: f64,
) -> Result<f64, E> {
    finite_difference_check_with(f, params, h, Stencil::Central)
}

pub fn finite_difference_check_with<E: From<TensorError>>(
    f: &mut dyn FnMut() -> Result<Tensor, E>,
    params: &[Tensor],
    h: f64,
    stencil: Stencil,
) -> Result<f64, E> {
    params.iter().for_each(Tensor::zero_grad);
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().expect("zeroed above"))
        .collect();
    let numeric = numeric_gradients_with(f, params, h, stencil)?;
    Ok(max_relative_error(&analytic, &numeric))
}
