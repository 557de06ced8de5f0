//! Experiment management: configuration, sweeps, plot data and self-checks.

pub mod config;
pub mod plot;
pub mod sweep;
pub mod validate;

pub use config::{parse_config, parse_config_str, SweepSpec};
pub use plot::{emit_plotdata, Figure};
pub use sweep::{execute_sweep, read_summary, run_sweep, write_sweep, SummaryRow, SweepResult, TraceRow};
