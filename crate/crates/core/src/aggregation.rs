//! Parameter aggregation for global model groups.
//!
//! [`fedavg`] is the unweighted element-wise mean used by the plain
//! federated baseline. [`weighted_aggregate`] blends three components:
//!
//! ```text
//! w_new = alpha * w_prev
//!       + beta  * Σ n_i w_i / Σ n_i      (participating workers only)
//!       + gamma * Σ v_j / m              (the other live groups' models)
//! ```
//!
//! With no other groups (`m = 0`) the gamma term is dropped and alpha/beta
//! are rescaled to sum to one.

use thiserror::Error;

use crate::nnet::{LayerSpec, ModelParams};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no contributions to aggregate")]
    Empty,
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("component weights must each lie in [0, 1] and sum to 1 (alpha={alpha}, beta={beta}, gamma={gamma})")]
    Weights { alpha: f64, beta: f64, gamma: f64 },
    #[error("alpha + beta = 0 with no other groups leaves no weight to renormalise")]
    DegenerateRenormalisation,
    #[error("sample count must be >= 1")]
    ZeroSamples,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl AggregationWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, AggregationError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(alpha) && in_unit(beta) && in_unit(gamma))
            || (alpha + beta + gamma - 1.0).abs() > WEIGHT_SUM_TOLERANCE
        {
            return Err(AggregationError::Weights { alpha, beta, gamma });
        }
        Ok(Self { alpha, beta, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for AggregationWeights {
    fn default() -> Self {
        Self { alpha: 0.2, beta: 0.6, gamma: 0.2 }
    }
}

/// A participating worker's trained parameters and its sample count.
#[derive(Debug, Clone, Copy)]
pub struct LocalContribution<'a> {
    pub params: &'a ModelParams,
    pub sample_count: usize,
}

impl<'a> LocalContribution<'a> {
    pub fn new(params: &'a ModelParams, sample_count: usize) -> Self {
        Self { params, sample_count }
    }
}

fn check_shape(expected: &LayerSpec, p: &ModelParams) -> Result<(), AggregationError> {
    if p.spec() != expected {
        return Err(AggregationError::Shape(format!("{:?} vs {:?}", p.spec().dims(), expected.dims())));
    }
    Ok(())
}

/// Unweighted element-wise mean; sample counts are ignored.
pub fn fedavg(contributions: &[LocalContribution<'_>]) -> Result<ModelParams, AggregationError> {
    let first = contributions.first().ok_or(AggregationError::Empty)?;
    let spec = first.params.spec();
    let mut acc = vec![0.0; first.params.len()];
    for c in contributions {
        check_shape(spec, c.params)?;
        for (a, v) in acc.iter_mut().zip(c.params.as_slice()) {
            *a += v;
        }
    }
    let k = contributions.len() as f64;
    for a in &mut acc {
        *a /= k;
    }
    Ok(ModelParams::from_flat(spec, acc).expect("length taken from a valid model"))
}

/// Unweighted mean of bare parameter vectors.
pub fn mean_params(params: &[&ModelParams]) -> Result<ModelParams, AggregationError> {
    let contribs: Vec<LocalContribution<'_>> = params.iter().map(|p| LocalContribution::new(p, 1)).collect();
    fedavg(&contribs)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Sample counts are divided by their gcd before weighting, so uniformly
/// rescaled counts give bit-identical output and equal counts reproduce
/// [`fedavg`] exactly.
pub fn weighted_aggregate(
    former_global: &ModelParams,
    contributions: &[LocalContribution<'_>],
    other_globals: &[&ModelParams],
    weights: &AggregationWeights,
) -> Result<ModelParams, AggregationError> {
    if contributions.is_empty() {
        return Err(AggregationError::Empty);
    }
    let spec = former_global.spec();
    for c in contributions {
        check_shape(spec, c.params)?;
        if c.sample_count == 0 {
            return Err(AggregationError::ZeroSamples);
        }
    }
    for g in other_globals {
        check_shape(spec, g)?;
    }

    let (alpha, beta, gamma) = if other_globals.is_empty() {
        let ab = weights.alpha + weights.beta;
        if ab <= 0.0 {
            return Err(AggregationError::DegenerateRenormalisation);
        }
        (weights.alpha / ab, weights.beta / ab, 0.0)
    } else {
        (weights.alpha, weights.beta, weights.gamma)
    };

    let divisor = contributions.iter().fold(0, |g, c| gcd(g, c.sample_count));
    let p = former_global.len();
    let total: f64 = contributions.iter().map(|c| (c.sample_count / divisor) as f64).sum();
    let mut local = vec![0.0; p];
    for c in contributions {
        let n_i = (c.sample_count / divisor) as f64;
        for (a, v) in local.iter_mut().zip(c.params.as_slice()) {
            *a += n_i * v;
        }
    }
    let mut others = vec![0.0; p];
    for g in other_globals {
        for (a, v) in others.iter_mut().zip(g.as_slice()) {
            *a += v;
        }
    }
    let m = other_globals.len().max(1) as f64;

    let out: Vec<f64> = former_global
        .as_slice()
        .iter()
        .zip(local.iter().zip(&others))
        .map(|(&prev, (&loc, &oth))| alpha * prev + beta * (loc / total) + gamma * (oth / m))
        .collect();
    Ok(ModelParams::from_flat(spec, out).expect("length taken from a valid model"))
}
