//! Orchestration: the full estimation routine, mechanism sweeps and file I/O.

pub mod io;
pub mod pipeline;
pub mod sweep;

pub use io::{load_csv, load_dataset_csv, write_dataset_csv, write_manifest, write_results, LoadedCsv};
pub use pipeline::{run_pipeline, BootstrapScope, ModelKind, PipelineOptions, RunManifest, RunResult};
pub use sweep::{
    run_phi_grid, CoherenceRow, CoherenceSummaryRow, ConfigFamily, ErrorRow, EstimateRow, GridResults, GridSpec, SummaryRow,
};
