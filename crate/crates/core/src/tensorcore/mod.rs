//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Gradients are
//! produced by [`Graph::backward`] (plain values, backward nodes discarded) or
//! [`Graph::grad_vars`] (gradients are themselves graph nodes and can be
//! differentiated again). Every backward rule is written in terms of forward
//! ops, which is what makes the second pass possible.
//!
//! Graphs use interior mutability and are confined to one thread.

mod gradcheck;
mod graph;
mod tensor;

use std::collections::BTreeMap;

pub use gradcheck::{central_differences, finite_diff_check, loss_fn, max_relative_error, ParamVars};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("loss closure is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }
}

/// Gradient values keyed by parameter id.
///
/// A parameter that is not reachable from the differentiated scalar has no
/// entry; its gradient is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap<S = f64> {
    grads: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for GradientMap<S> {
    fn default() -> Self {
        Self { grads: BTreeMap::new() }
    }
}

impl<S: Scalar> GradientMap<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, grad: Tensor<S>) {
        self.grads.insert(id.into(), grad);
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<S>> {
        self.grads.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.grads.contains_key(id)
    }

    pub fn remove(&mut self, id: &str) -> Option<Tensor<S>> {
        self.grads.remove(id)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Keeps only the entries whose id satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self { grads: self.grads.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect() }
    }

    /// `self + scale * other`, key-wise; missing entries count as zero.
    pub fn add_scaled(&self, other: &Self, scale: S) -> Self {
        let mut out = self.clone();
        for (k, g) in &other.grads {
            let scaled = g.map(|v| v * scale);
            let merged = match out.grads.get(k) {
                Some(existing) => existing.zip_map(&scaled, "add_scaled", |a, b| a + b).expect("gradient shapes agree per parameter"),
                None => scaled,
            };
            out.grads.insert(k.clone(), merged);
        }
        out
    }
}

impl<S> IntoIterator for GradientMap<S> {
    type Item = (String, Tensor<S>);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor<S>>;

    fn into_iter(self) -> Self::IntoIter {
        self.grads.into_iter()
    }
}
