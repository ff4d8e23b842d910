//! Run configuration, checkpoints, reports, benchmarks and sweeps.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod io;
pub mod report;
pub mod run;
pub mod sweep;

pub use bench::{depth_table, linear_fit, measure_latency, LatencyRow};
pub use checkpoint::{load_checkpoint, load_meta, save_checkpoint, CheckpointMeta, Lineage, Stage};
pub use config::RunConfig;
pub use report::{emit_report, Table};
pub use sweep::SweepGrid;
