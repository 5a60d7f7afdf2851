//! Evaluation harness: confusion counts, percent metrics with the standard
//! zero-denominator conventions, cross-corpus evaluation of a detector, and
//! rendering of the resulting comparison tables.

pub mod metrics;
pub mod report;

pub use metrics::{confusion, metrics, ConfusionMatrix, Metrics};
pub use report::{
    emit_table, evaluate_cross, parse_registry, parse_table_csv, round2, write_report_csv,
    CorpusEval, EvalReport, RegistryEntry, TableFormat,
};
