//! Training loop, complexity benchmark and command-line plumbing around
//! [`tubecert_core`].

pub mod bench;
pub mod config;
pub mod metrics;
pub mod run;

pub use config::{ConfigError, RunConfig};
pub use metrics::RunMetrics;
pub use run::{backup_return, collect_initial, initial_safe_set, run_training, RunError};

/// Process exit status for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit status for runtime aborts.
pub const EXIT_RUNTIME: i32 = 3;
