//! mmWave beam prediction workbench.
//!
//! A simulated narrowband multipath channel feeds an oracle that labels every
//! 16 ms slot with its optimal DFT beam. A forecaster reprograms those beam
//! and angle histories into the input space of a small frozen transformer and
//! predicts the next beams; baselines and evaluation suites sit alongside.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod eval;
pub mod forecaster;
pub mod model;
pub mod scenario;
pub mod tensor;
pub mod trainer;

