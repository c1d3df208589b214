//! Central finite differences, used as the independent oracle for analytic
//! gradients. Only forward evaluations are performed here.

use super::params::ParamStore;
use crate::scalar::Scalar;

/// Relative error with a floor on the denominator so that two near-zero
/// gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Numerical gradient of `f` with respect to every entry of every parameter.
pub fn numeric_gradients<T: Scalar>(
    params: &ParamStore<T>,
    h: f64,
    mut f: impl FnMut(&ParamStore<T>) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    names
        .iter()
        .map(|name| {
            let n = params.get(name).unwrap().len();
            (0..n)
                .map(|i| {
                    let orig = work.get(name).unwrap().data()[i];
                    work.get_mut(name).unwrap().data_mut()[i] = orig + T::of(h);
                    let up = f(&work);
                    work.get_mut(name).unwrap().data_mut()[i] = orig - T::of(h);
                    let down = f(&work);
                    work.get_mut(name).unwrap().data_mut()[i] = orig;
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Largest relative error between analytic gradients (store order) and the
/// finite-difference oracle.
pub fn max_relative_error<T: Scalar>(
    params: &ParamStore<T>,
    analytic: &[super::tensor::Tensor<T>],
    h: f64,
    f: impl FnMut(&ParamStore<T>) -> f64,
) -> f64 {
    let numeric = numeric_gradients(params, h, f);
    analytic
        .iter()
        .zip(&numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n).map(|(&x, &y)| relative_error(x.f64(), y)))
        .fold(0.0, f64::max)
}
