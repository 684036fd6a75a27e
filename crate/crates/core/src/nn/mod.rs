//! Layers, activations, losses and the optimizer, with hand-derived gradients.

mod activation;
mod adam;
mod gradcheck;
mod layer;
mod loss;

use std::collections::BTreeMap;

use crate::numerics::Matrix;

pub use activation::{relu_backward, relu_forward, sigmoid, sigmoid_backward, sigmoid_forward};
pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_terms, relative_error, GradCheckReport, WorstEntry};
pub use layer::{masked_backward, masked_forward, LinearGrads, LinearTape, MaskedLinearLayer};
pub use loss::{bce, mse, BCE_CLIP};

/// Anything exposing named parameter tensors in a fixed order.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));
}

/// Gradient tensors keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn insert(&mut self, name: &str, grad: Matrix) {
        self.entries.insert(name.to_string(), grad);
    }

    /// Adds into an existing entry, or inserts.
    pub fn accumulate(&mut self, name: &str, grad: Matrix) {
        match self.entries.get_mut(name) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.entries.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
