//! NearMiss-3 undersampling.
//!
//! The reference class is the smallest class present. Every class whose
//! count exceeds `ceil(target_ratio[c] * smallest)` is undersampled:
//!
//! 1. for every reference-class sample, its `k` nearest samples of the
//!    oversized class join the candidate pool;
//! 2. pool members are ranked by their mean distance to their `k` nearest
//!    reference-class samples, largest first, and the top `target` are kept.
//!
//! All other classes pass through untouched. Distances are Euclidean and all
//! ties resolve toward the lower row index, so the result is deterministic.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use log::warn;
use thiserror::Error;

use crate::dataset::{LabeledDataset, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleConfig {
    pub neighbors_k: usize,
    /// Desired size of each class relative to the smallest class, indexed
    /// by class code.
    pub target_ratio: Vec<f64>,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self { neighbors_k: 3, target_ratio: vec![2.0, 1.2, 1.0] }
    }
}

impl ResampleConfig {
    pub fn validate(&self) -> Result<(), ResampleError> {
        if self.neighbors_k == 0 {
            return Err(ResampleError::Config("neighbors_k must be at least 1".into()));
        }
        if let Some(r) = self.target_ratio.iter().find(|r| !(**r >= 1.0) || !r.is_finite()) {
            return Err(ResampleError::Config(format!("target ratio {r} must be a finite value >= 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("undersampling needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error("no target ratio for class {0}")]
    MissingRatio(usize),
    #[error("invalid resample config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolShortfall {
    pub class: usize,
    pub target: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleOutcome {
    pub dataset: LabeledDataset,
    /// Input row indices retained, ascending.
    pub kept: Vec<usize>,
    pub shortfalls: Vec<PoolShortfall>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// The `k` entries of `pool` nearest to `query`, as `(distance, index)`.
fn nearest(data: &LabeledDataset, query: &[f64], pool: &[usize], k: usize) -> Vec<(f64, usize)> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for &j in pool {
        let cand = (distance(query, data.row(j)), j);
        if best.len() == k && by_distance_then_index(&cand, &best[k - 1]) != Ordering::Less {
            continue;
        }
        let pos = best
            .binary_search_by(|probe| by_distance_then_index(probe, &cand))
            .unwrap_or_else(|p| p);
        best.insert(pos, cand);
        best.truncate(k);
    }
    best
}

/// Select `target` rows of `majority` by NearMiss-3 against `minority`.
/// Returns the chosen indices (ascending) and the candidate pool size.
fn select_majority(
    data: &LabeledDataset,
    majority: &[usize],
    minority: &[usize],
    k: usize,
    target: usize,
) -> (Vec<usize>, usize) {
    let pool: BTreeSet<usize> = minority
        .iter()
        .flat_map(|&s| nearest(data, data.row(s), majority, k))
        .map(|(_, j)| j)
        .collect();
    let pool_size = pool.len();

    let mut ranked: Vec<(f64, usize)> = pool
        .into_iter()
        .map(|j| {
            let near = nearest(data, data.row(j), minority, k);
            let mean = near.iter().map(|(d, _)| d).sum::<f64>() / near.len() as f64;
            (mean, j)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = ranked.into_iter().take(target).map(|(_, j)| j).collect();
    chosen.sort_unstable();
    (chosen, pool_size)
}

pub fn nearmiss3_undersample(
    data: &LabeledDataset,
    config: &ResampleConfig,
) -> Result<ResampleOutcome, ResampleError> {
    config.validate()?;
    let n_classes = data.labels().iter().copied().max().map_or(0, |m| m + 1).max(NUM_CLASSES);
    let by_class = data.indices_by_class(n_classes);
    let present: Vec<usize> = (0..n_classes).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < 2 {
        return Err(ResampleError::SingleClass(present.len()));
    }
    // Smallest class, lowest code on ties.
    let reference = *present
        .iter()
        .min_by_key(|&&c| (by_class[c].len(), c))
        .expect("at least two classes present");
    let smallest = by_class[reference].len();

    let mut kept = Vec::with_capacity(data.len());
    let mut shortfalls = Vec::new();
    for &c in &present {
        let ratio = *config.target_ratio.get(c).ok_or(ResampleError::MissingRatio(c))?;
        let target = (ratio * smallest as f64 - 1e-9).ceil() as usize;
        if c == reference || by_class[c].len() <= target {
            kept.extend_from_slice(&by_class[c]);
            continue;
        }
        let (chosen, pool) = select_majority(data, &by_class[c], &by_class[reference], config.neighbors_k, target);
        if pool < target {
            warn!("NearMiss-3: class {c} target {target} exceeds candidate pool {pool}; keeping the whole pool");
            shortfalls.push(PoolShortfall { class: c, target, pool });
        }
        kept.extend(chosen);
    }
    kept.sort_unstable();
    Ok(ResampleOutcome { dataset: data.subset(&kept), kept, shortfalls })
}
