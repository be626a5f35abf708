use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub steps: u64,
}

/// Adam with bias correction. Moments are kept per parameter name and
/// survive across calls to [`Adam::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen parameters are left untouched whatever `grads` contains.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter<F>>,
        grads: &Gradients<F>,
    ) -> Result<()> {
        let c = self.config;
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one, eps) = (F::one(), F::from_f64(c.eps));
        for p in params {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.param(&p.name) else { continue };
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("gradient {:?} for `{}` {:?}", g.shape(), p.name, p.tensor.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.tensor.shape()),
                v: Tensor::zeros(p.tensor.shape()),
                steps: 0,
            });
            st.steps += 1;
            let t = st.steps as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let lr = F::from_f64(c.lr);
            for (((w, &gi), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
            {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Zeroes the moments of selected rows of a 2-D parameter, e.g. after the
    /// rows were overwritten from outside the optimizer.
    pub fn reset_rows(&mut self, name: &str, rows: &[usize]) {
        if let Some(st) = self.state.get_mut(name) {
            for &r in rows {
                st.m.row_mut(r).iter_mut().for_each(|x| *x = F::zero());
                st.v.row_mut(r).iter_mut().for_each(|x| *x = F::zero());
            }
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<F>> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<String, Moments<F>>) {
        self.state = state;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::evaluate_with_gradients;

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new("w", Tensor::from_f64(&[1], &[v]).unwrap())
    }

    /// Gradients of `sum(coef * w)` for each parameter.
    fn linear_grads(params: &[&Parameter<f64>], coef: f64) -> Gradients<f64> {
        evaluate_with_gradients(|g| {
            let mut total = None;
            for p in params {
                let w = g.param(p)?;
                let s = g.scale(w, coef)?;
                let s = g.sum(s)?;
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        })
        .unwrap()
        .1
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(1.0);
        let grads = linear_grads(&[&p], 1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step([&mut p], &grads).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.tensor.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = scalar_param(2.5);
        let grads = linear_grads(&[&p], 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step([&mut p], &grads).unwrap();
        assert_eq!(p.tensor.item(), 2.5);
    }

    #[test]
    fn frozen_parameter_is_not_updated() {
        let mut live = scalar_param(1.0);
        let grads = linear_grads(&[&live], 3.0);
        live.trainable = false;
        let mut adam = Adam::new(AdamConfig::default());
        adam.step([&mut live], &grads).unwrap();
        assert_eq!(live.tensor.item(), 1.0);
        assert!(adam.state().is_empty());
    }

    #[test]
    fn moments_persist_between_steps() {
        let mut p = scalar_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            let grads = linear_grads(&[&p], 1.0);
            adam.step([&mut p], &grads).unwrap();
        }
        assert_eq!(adam.state()["w"].steps, 3);
    }
}
