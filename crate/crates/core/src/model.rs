//! Interface shared by the trainable predictors.

use crate::config::KvMap;
use crate::forecaster::Result;
use crate::scenario::WindowedSample;
use crate::tensor::{Bindings, ParamStore, Tape, Var};

/// A network trained by the trainer and scored by the evaluation harness.
pub trait Model: Send + Sync {
    fn kind(&self) -> &'static str;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Number of future slots predicted per window.
    fn horizon(&self) -> usize;
    /// Number of observed slots per window.
    fn window(&self) -> usize;
    /// Scalar training loss of a batch recorded on `tape`.
    fn batch_loss(&self, tape: &mut Tape, b: &Bindings, batch: &[&WindowedSample]) -> Result<Var>;
    /// Beam indices for raw 2×U windows, each paired with its codebook size.
    fn predict_batch(&self, windows: &[(&[f32], usize)]) -> Result<Vec<Vec<usize>>>;
    /// Resolved configuration, written next to checkpoints.
    fn config_kv(&self) -> KvMap;
}
