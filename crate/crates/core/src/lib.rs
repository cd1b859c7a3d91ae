//! Segmented federated learning for flow-based network intrusion detection.
//!
//! The crate simulates a set of workers, each holding a private shard of
//! NetFlow-style records, that collaboratively train a small multilayer
//! perceptron. Three training regimes are supported:
//!
//! - `centralized`: one model trained on the union of all shards,
//! - `fl`: a single global model updated by federated averaging,
//! - `segmented_fl`: several global model groups, with workers periodically
//!   re-assigned to groups according to their recent validation F1.
//!
//! Module map:
//!
//! - [`flow_data`]: CSV ingestion, categorical encoding, MinMax scaling,
//!   stratified splits and worker partitioning.
//! - [`resample`]: NearMiss-3 undersampling.
//! - [`nnet`]: the shared MLP with analytic gradients and plain SGD.
//! - [`aggregation`]: FedAvg and the three-component weighted aggregation.
//! - [`segmentation`]: the sigmoid evaluation score, threshold and plans.
//! - [`metrics`]: confusion matrix, precision/recall/F1, OvR AUROC.
//! - [`orchestrator`]: the round loop and experiment driver.
//! - [`synthgen`]: synthetic multi-environment flow generator.
//! - [`config`] and [`cli`]: experiment files and the command-line surface.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod flow_data;
pub mod metrics;
pub mod nnet;
pub mod orchestrator;
pub mod resample;
pub mod rng;
pub mod segmentation;
pub mod synthgen;

pub use dataset::{FlowClass, LabeledDataset, Matrix, NUM_CLASSES, NUM_FEATURES};
