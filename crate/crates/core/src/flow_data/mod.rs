//! Flow record ingestion and preprocessing.
//!
//! The pipeline for one worker is: parse CSV rows into [`RawFlowRecord`]s,
//! encode categorical attributes with a shared [`EncodingMap`], split the
//! encoded rows into train/test, and fit a [`ScalerParams`] on the worker's
//! own training rows.

mod encoding;
mod parse;
mod scaler;
mod split;

pub use encoding::{fit_encoding, EncodingMap};
pub use parse::{
    parse_byte_count, parse_flow_csv, parse_flow_reader, write_flow_csv, ColumnMap, ParsedFlows,
    RawFlowRecord, Reject, RejectReason,
};
pub use scaler::{fit_scaler, ScalerParams};
pub use split::{apportion, partition_workers, stratified_split, train_test_split};

use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::ShapeError;

/// Default fraction of each worker's rows held out for testing.
pub const DEFAULT_TEST_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no data")]
    Empty,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("unknown {field} token `{token}`")]
    UnknownToken { field: &'static str, token: String },
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("class {class} has {count} sample(s); at least 2 are needed to stratify")]
    TooFewForStratify { class: usize, count: usize },
    #[error("shares must be non-negative and sum to 1, got sum {0}")]
    BadShares(f64),
    #[error("feature width {got} does not match scaler width {expected}")]
    Width { got: usize, expected: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}
