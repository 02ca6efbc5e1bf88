//! Dense tensors, reverse-mode autodiff and the Adam optimizer.

mod optim;
mod tape;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use optim::{adam_step, ema_update, AdamConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{forward, value_and_grad, Gradients, Graph, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid optimizer setting: {0}")]
    InvalidSetting(String),
}

/// A named parameter with its Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self { value, m, v }
    }
}

/// Named parameter tensors plus optimizer state.
///
/// Iteration order is the lexicographic order of names, so every traversal
/// (clipping norms, serialization) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter, resetting its moment buffers.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, p)| (k.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Restores moment buffers; shapes must match the parameter.
    pub fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) -> Result<(), NumericsError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(NumericsError::Shape {
                op: "set_moments",
                lhs: p.value.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        p.m = m;
        p.v = v;
        Ok(())
    }

    /// Drops optimizer state, keeping parameter values.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in self.params.values_mut() {
            p.m = Tensor::zeros(p.value.shape());
            p.v = Tensor::zeros(p.value.shape());
        }
    }

    /// Copy of the values only, with fresh optimizer state.
    pub fn values_only(&self) -> Self {
        let mut out = Self::new();
        for (k, p) in &self.params {
            out.insert(k.clone(), p.value.clone());
        }
        out
    }

    /// Rounds every parameter value through `f32`.
    pub fn quantize_f32(&mut self) {
        for p in self.params.values_mut() {
            p.value.quantize_f32();
        }
    }
}
