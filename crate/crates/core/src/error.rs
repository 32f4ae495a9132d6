use thiserror::Error;

/// Errors surfaced by the simulator. Configuration problems map to CLI exit
/// code 1, invariant violations to exit code 2.
#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("event scheduled in the past: now={now}us fire_at={fire_at}us")]
    ScheduleInPast { now: u64, fire_at: u64 },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invariant violated: {name}: {detail}")]
    Invariant { name: &'static str, detail: String },

    #[error("workload error: {0}")]
    Workload(String),
}

impl SimError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SimError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn invariant(name: &'static str, detail: impl Into<String>) -> Self {
        SimError::Invariant {
            name,
            detail: detail.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config { .. } | SimError::ScheduleInPast { .. } => 1,
            SimError::Invariant { .. } | SimError::Workload(_) => 2,
        }
    }
}

pub type SimResult<T> = Result<T, SimError>;
