use thiserror::Error;

/// Errors raised while building or running a simulation.
#[derive(Debug, Error)]
pub enum SimError {
    /// A caller broke an operation's precondition (e.g. writing more than the
    /// free memory). These indicate a bug in the caller, not in the workload.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("deadlock at t={time:.6}s, no pending events; processes: {processes}")]
    Deadlock { time: f64, processes: String },

    #[error("process `{name}` failed: {source}")]
    Process {
        name: String,
        #[source]
        source: Box<SimError>,
    },

    #[error("file `{0}` not found on device or in cache")]
    FileNotFound(String),

    #[error("out of memory on host `{host}`: need {needed} bytes, {free} free after reclaim")]
    OutOfMemory { host: String, needed: u64, free: u64 },

    #[error("write of `{file}` stuck with {remaining} bytes left: no memory can be reclaimed")]
    Stuck { file: String, remaining: u64 },

    #[error("device `{device}` full: need {needed} bytes, {available} available")]
    DeviceFull {
        device: String,
        needed: u64,
        available: u64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("writing results failed: {0}")]
    Export(#[from] std::io::Error),

    #[error("invariant violated on host `{host}` at t={time:.6}s: {detail}\n{dump}")]
    Invariant {
        host: String,
        time: f64,
        detail: String,
        dump: String,
    },
}

impl SimError {
    /// Strips [`SimError::Process`] wrappers down to the error that started it.
    pub fn root(&self) -> &SimError {
        match self {
            SimError::Process { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
