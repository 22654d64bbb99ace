use std::collections::BTreeMap;

use crate::error::NnError;
use crate::params::{ParamGrads, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Adam over a fixed group of parameter names.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    group: Vec<String>,
    steps: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(group: Vec<String>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            group,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn group(&self) -> &[String] {
        &self.group
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every group member that has a gradient. Names outside
    /// the group are ignored, as are frozen parameters.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<(), NnError> {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let (one_b1, one_b2) = (lit::<T>(1.0 - self.beta1), lit::<T>(1.0 - self.beta2));
        let step_size = lit::<T>(self.lr / bc1);
        let sqrt_bc2 = lit::<T>(bc2.sqrt());
        let eps = lit::<T>(self.eps);
        // A moment whose gradient stays at zero decays into the subnormal
        // range, where `beta * m` can round back to `m` and never reach zero.
        // Such values move no parameter but make every later step slow.
        let flush = |x: T| {
            if x.abs() < T::min_positive_value() {
                T::zero()
            } else {
                x
            }
        };
        for name in &self.group {
            let Some(grad) = grads.get(name) else { continue };
            let param = store.get(name)?;
            if !param.trainable {
                continue;
            }
            if param.value.shape() != grad.shape() {
                return Err(NnError::ParamShape {
                    name: name.clone(),
                    expected: param.value.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let value = store.value_mut(name)?;
            for (((p, &gv), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = flush(b1 * *m + one_b1 * gv);
                *v = flush(b2 * *v + one_b2 * gv * gv);
                *p -= step_size * *m / ((*v).sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
