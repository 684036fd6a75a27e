use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{Gradients, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

/// Adam with bias correction. State is kept per named parameter, so a
/// parameter that receives no gradient in a step keeps its step count.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Updates every parameter of `params` that has an entry in `grads`.
    ///
    /// Gradients are validated before anything is written, so an error leaves
    /// both the parameters and the optimizer state untouched.
    pub fn step(
        &mut self,
        params: &mut (impl Parameterized + ?Sized),
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        let mut shape_err = None;
        params.visit_params(&mut |name, p| {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() && shape_err.is_none() {
                    shape_err = Some(Error::Shape {
                        op: "adam_step",
                        left: p.shape(),
                        right: g.shape(),
                    });
                }
            }
        });
        if let Some(e) = shape_err {
            return Err(e);
        }

        let AdamConfig { beta1, beta2, eps } = self.config;
        let states = &mut self.states;
        params.visit_params_mut(&mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let state = states.entry(name.to_string()).or_insert_with(|| AdamState {
                m: Matrix::zeros(p.rows(), p.cols()),
                v: Matrix::zeros(p.rows(), p.cols()),
                step: 0,
            });
            state.step += 1;
            let t = state.step as f64;
            let c1 = 1.0 - beta1.powf(t);
            let c2 = 1.0 - beta2.powf(t);
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

/// One Adam update of `params` against `grads`.
pub fn adam_step(
    optimizer: &mut Adam,
    params: &mut (impl Parameterized + ?Sized),
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    optimizer.step(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalar(Matrix);

    impl Parameterized for Scalar {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
            f("w", &self.0);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
            f("w", &mut self.0);
        }
    }

    fn grads(v: f64) -> Gradients {
        let mut g = Gradients::default();
        g.insert("w", Matrix::filled(1, 1, v));
        g
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Scalar(Matrix::filled(1, 1, 0.7));
        let mut adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut p, &grads(0.0), 0.1).unwrap();
        }
        assert_eq!(p.0[(0, 0)], 0.7);
        assert_eq!(adam.state("w").unwrap().step, 5);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = Scalar(Matrix::zeros(1, 1));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &grads(1.0), 0.1).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −0.1 / (1 + 1e-8)
        assert!((p.0[(0, 0)] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Scalar(Matrix::filled(1, 1, 0.3));
            let mut adam = Adam::default();
            for k in 0..10 {
                adam.step(&mut p, &grads((k as f64).sin()), 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Scalar(Matrix::zeros(1, 1));
        let err = Adam::default().step(&mut p, &grads(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(p.0[(0, 0)], 0.0);
    }
}
