//! Small deterministic dense-tensor engine with reverse-mode differentiation.
//!
//! Parameters are stored as 32-bit [`Tensor`]s inside a [`ParamStore`]. A
//! [`Tape`] records one forward pass over 64-bit working values and replays it
//! backwards to produce gradients. Only the operations the forecaster and the
//! LSTM baseline need are provided; there is no general broadcasting.

mod gradcheck;
mod init;
mod store;
mod tape;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_param};
pub use init::{seeded_init, CounterRng, Init};
pub use store::{load_checkpoint, save_checkpoint, Bindings, ParamEntry, ParamStore};
pub use tape::{Array, Gradients, Tape, Var};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{0}")]
    Precondition(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint mismatch for tensor `{name}`: {detail}")]
    Mismatch { name: String, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Row-major 32-bit tensor used for parameter storage and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_array(&self) -> Array {
        Array::new(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Rounds a working array down to storage precision.
    pub fn from_array(a: &Array) -> Self {
        Self {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&v| v as f32).collect(),
        }
    }
}
