//! File formats: weight container, query datasets, corpora and reports.

pub mod container;
pub mod corpus;
pub mod dataset;
pub mod report;

pub use container::{decode_container, encode_container, load_transformer, load_weights, write_weights};
pub use corpus::load_corpus;
pub use dataset::{load_dataset, parse_dataset, QueryRecord};
pub use report::{file_sha256, plot_csv, sha256_hex, write_atomic, ExperimentReport, PlotRow, REPORT_SCHEMA_VERSION};
