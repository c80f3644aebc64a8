//! Configuration parsing and the commands behind the `thinconv` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_bench, cmd_eval, cmd_sparsify, cmd_train, EvalSummary};
pub use config::{ExperimentConfig, SparsifyMode};

/// Process exit code for a failed command: 1 for configuration problems,
/// 2 for data, checkpoint and I/O failures.
pub fn exit_code(err: &thinconv::Error) -> i32 {
    match err {
        thinconv::Error::Config { .. } => 1,
        _ => 2,
    }
}
