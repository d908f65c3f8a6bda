use std::fmt;

use beamcast::config::ConfigError;
use beamcast::eval::EvalError;
use beamcast::forecaster::ForecastError;
use beamcast::scenario::ScenarioError;
use beamcast::tensor::TensorError;
use beamcast::trainer::TrainError;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "{m}"),
            Failure::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Corrupt(_) | TensorError::Mismatch { .. } | TensorError::Io { .. } => {
                Failure::Data(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ForecastError> for Failure {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Config(_) | ForecastError::Kv(_) => Failure::Data(e.to_string()),
            ForecastError::Tensor(t) => t.into(),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyDataset | TrainError::Kv(_) => {
                Failure::Data(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_)
            | EvalError::MissingSnapshot { .. }
            | EvalError::MissingCheckpoint(_)
            | EvalError::Kv(_)
            | EvalError::Scenario(_) => Failure::Data(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Tensor(t) => t.into(),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}
