//! Metrics, evaluation sweeps, result files and figure tables.

pub mod metrics;
pub mod report;
pub mod sweep;

pub use metrics::{cosine_sim, cosine_sim_flat, nmse, to_db, CosineAccumulator, NmseAccumulator, NMSE_FLOOR_DB};
pub use report::{figure_tables, report, Table};
pub use sweep::{modality_ablation, read_records, sweep, write_records, EvalConfig, EvalRecord, EvalSet, Method};
