//! Central finite differences over stored parameters.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of `loss` with respect to every entry of the
/// named parameter. `loss` is re-evaluated `2 * numel` times and must be a
/// deterministic function of the store.
pub fn central_difference<T, F>(store: &mut ParamStore<T>, name: &str, step: T, mut loss: F) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> T,
{
    let shape = store.value(name).expect("parameter exists").shape().to_vec();
    let n: usize = shape.iter().product();
    let two = T::one() + T::one();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = store.value(name).unwrap().data()[i];
        store.value_mut(name).unwrap().data_mut()[i] = orig + step;
        let plus = loss(store);
        store.value_mut(name).unwrap().data_mut()[i] = orig - step;
        let minus = loss(store);
        store.value_mut(name).unwrap().data_mut()[i] = orig;
        out.push((plus - minus) / (two * step));
    }
    Tensor::from_vec(&shape, out).unwrap()
}

/// Largest entrywise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| {
            let (a, b) = (a.as_f64(), b.as_f64());
            (a - b).abs() / a.abs().max(b.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
