//! Independent reference implementations and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use rand::Rng;
use segfl::aggregation::AggregationWeights;
use segfl::dataset::{LabeledDataset, Matrix};
use segfl::metrics::ClassScores;
use segfl::nnet::{loss, ModelParams, TrainStats};
use segfl::orchestrator::{
    DataSource, ExperimentConfig, FederationSettings, FlAggregation, Mode, ModelBackend, OrchestratorError,
    WorkerMetrics,
};
use segfl::segmentation::SegmentationConfig;
use segfl::synthgen::EnvironmentProfile;

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    segfl::rng::seeded_rng(seed)
}

/// `(d_i, c_i)` from textbook formulas: plain mean, then the logistic.
pub fn score_oracle(means: &[f64]) -> Vec<(f64, f64)> {
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    means
        .iter()
        .map(|&c| {
            let d = c - mean;
            (d, 1.0 / (1.0 + (-d).exp()))
        })
        .collect()
}

/// Coordinate-by-coordinate three-component aggregation.
pub fn aggregate_oracle(
    prev: &[f64],
    locals: &[(Vec<f64>, usize)],
    others: &[Vec<f64>],
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Vec<f64> {
    let (a, b, g) = if others.is_empty() { (alpha / (alpha + beta), beta / (alpha + beta), 0.0) } else { (alpha, beta, gamma) };
    let n_total: f64 = locals.iter().map(|(_, n)| *n as f64).sum();
    (0..prev.len())
        .map(|j| {
            let mut weighted = 0.0;
            for (w, n) in locals {
                weighted += *n as f64 * w[j] / n_total;
            }
            let mut other = 0.0;
            for v in others {
                other += v[j];
            }
            let other = if others.is_empty() { 0.0 } else { other / others.len() as f64 };
            a * prev[j] + b * weighted + g * other
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Exhaustive NearMiss-3: full sorts everywhere, no incremental top-k.
/// Returns the kept row indices, ascending.
pub fn nearmiss3_oracle(data: &LabeledDataset, k: usize, ratio: &[f64]) -> Vec<usize> {
    let classes = data.labels().iter().max().map_or(0, |m| m + 1);
    let members: Vec<Vec<usize>> = (0..classes).map(|c| (0..data.len()).filter(|&i| data.label(i) == c).collect()).collect();
    let present: Vec<usize> = (0..classes).filter(|&c| !members[c].is_empty()).collect();
    let mut reference = present[0];
    for &c in &present {
        if members[c].len() < members[reference].len() {
            reference = c;
        }
    }
    let smallest = members[reference].len();
    let mut kept = Vec::new();
    for &c in &present {
        let target = (ratio[c] * smallest as f64 - 1e-9).ceil() as usize;
        if c == reference || members[c].len() <= target {
            kept.extend(&members[c]);
            continue;
        }
        let mut pool: Vec<usize> = Vec::new();
        for &s in &members[reference] {
            let mut all: Vec<(f64, usize)> = members[c].iter().map(|&j| (dist(data.row(s), data.row(j)), j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, j) in all.iter().take(k) {
                if !pool.contains(&j) {
                    pool.push(j);
                }
            }
        }
        let mut ranked: Vec<(f64, usize)> = pool
            .iter()
            .map(|&j| {
                let mut d: Vec<(f64, usize)> =
                    members[reference].iter().map(|&s| (dist(data.row(j), data.row(s)), s)).collect();
                d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let take = k.min(d.len());
                (d[..take].iter().map(|x| x.0).sum::<f64>() / take as f64, j)
            })
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        kept.extend(ranked.iter().take(target).map(|&(_, j)| j));
    }
    kept.sort_unstable();
    kept
}

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        if !positive[i] {
            continue;
        }
        for j in 0..scores.len() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Per-class precision, recall and F1 straight from their definitions.
pub fn prf_oracle(truth: &[usize], pred: &[usize], classes: usize) -> Vec<ClassScores> {
    (0..classes)
        .map(|c| {
            let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
            let fnc = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fnc > 0.0 { tp / (tp + fnc) } else { 0.0 };
            let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fnc) } else { 0.0 };
            ClassScores { precision, recall, f1 }
        })
        .collect()
}

/// Central finite-difference gradient of the mean loss.
pub fn numeric_gradient(params: &ModelParams, batch: &LabeledDataset, h: f64) -> Vec<f64> {
    let spec = params.spec().clone();
    let base = params.as_slice().to_vec();
    (0..base.len())
        .map(|j| {
            let mut plus = base.clone();
            plus[j] += h;
            let mut minus = base.clone();
            minus[j] -= h;
            let lp = loss(&ModelParams::from_flat(&spec, plus).unwrap(), batch).unwrap();
            let lm = loss(&ModelParams::from_flat(&spec, minus).unwrap(), batch).unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

/// Random rows in `[0, 1)^dim` with labels drawn from `classes`.
pub fn random_dataset(r: &mut impl Rng, n: usize, dim: usize, classes: usize) -> LabeledDataset {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random::<f64>()).collect()).collect();
    let labels = (0..n).map(|i| if i < classes { i } else { r.random_range(0..classes) }).collect();
    LabeledDataset::from_rows(dim, &rows, labels).unwrap()
}

/// Probability rows with many exact ties: small integer weights normalised.
pub fn tied_probabilities(r: &mut impl Rng, n: usize, classes: usize) -> Matrix {
    let mut data = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let w: Vec<f64> = (0..classes).map(|_| r.random_range(1..4) as f64).collect();
        let s: f64 = w.iter().sum();
        data.extend(w.iter().map(|v| v / s));
    }
    Matrix::from_vec(classes, data).unwrap()
}

/// A three-parameter model trained by one step towards the worker's column
/// means (and mean label). Scores fall in `(0, 1]` with distance to that
/// target.
#[derive(Debug, Clone, Copy)]
pub struct ToyBackend {
    pub rate: f64,
}

pub fn toy_target(data: &LabeledDataset) -> [f64; 3] {
    let n = data.len() as f64;
    let mut t = [0.0; 3];
    for i in 0..data.len() {
        t[0] += data.row(i)[0] / n;
        t[1] += data.row(i)[1] / n;
        t[2] += data.label(i) as f64 / n;
    }
    t
}

pub fn toy_step(params: &[f64], target: &[f64; 3], rate: f64) -> Vec<f64> {
    params.iter().zip(target).map(|(w, t)| w - rate * (w - t)).collect()
}

fn toy_score(params: &ModelParams, data: &LabeledDataset) -> f64 {
    let t = toy_target(data);
    let d: f64 = params.as_slice().iter().zip(&t).map(|(w, t)| (w - t).abs()).sum();
    1.0 / (1.0 + d)
}

impl ModelBackend for ToyBackend {
    fn train(&self, params: &ModelParams, data: &LabeledDataset, _seed: u64) -> Result<(ModelParams, TrainStats), OrchestratorError> {
        let next = toy_step(params.as_slice(), &toy_target(data), self.rate);
        Ok((ModelParams::from_flat(params.spec(), next)?, TrainStats { mean_loss: Some(0.0), steps: 1 }))
    }

    fn validation_score(&self, params: &ModelParams, data: &LabeledDataset) -> Result<f64, OrchestratorError> {
        Ok(toy_score(params, data))
    }

    fn evaluate(&self, params: &ModelParams, data: &LabeledDataset) -> Result<WorkerMetrics, OrchestratorError> {
        let s = toy_score(params, data);
        let c = ClassScores { precision: s, recall: s, f1: s };
        Ok(WorkerMetrics { accuracy: s, per_class: vec![c; 3], macro_f1: s, auroc: None })
    }
}

pub fn toy_spec() -> segfl::nnet::LayerSpec {
    segfl::nnet::LayerSpec::new(2, vec![], 1).unwrap()
}

/// A dataset of `n` rows near `centre`, labels cycling over three classes.
pub fn toy_data(r: &mut impl Rng, n: usize, centre: [f64; 2]) -> LabeledDataset {
    let rows: Vec<[f64; 2]> = (0..n)
        .map(|_| [centre[0] + r.random_range(-0.1..0.1), centre[1] + r.random_range(-0.1..0.1)])
        .collect();
    LabeledDataset::from_rows(2, &rows, (0..n).map(|i| i % 3).collect()).unwrap()
}

pub fn settings(mode: Mode, weights: AggregationWeights, fl_aggregation: FlAggregation) -> FederationSettings {
    FederationSettings {
        mode,
        trainers_per_group: None,
        weights,
        fl_aggregation,
        segmentation: SegmentationConfig::default(),
        seed: 11,
    }
}

/// Two strongly diverged environments: workers 1-2 on profile A with
/// plenty of traffic, workers 3-4 on profile B with little.
pub fn two_environment_config(seed: u64) -> ExperimentConfig {
    let a = EnvironmentProfile::cidds_like("A", 0.0).unwrap();
    let b = EnvironmentProfile::cidds_like("B", 1.0).unwrap();
    let mut c = ExperimentConfig::with_data(DataSource::Synthetic {
        profiles: vec![a, b],
        workers: vec![(0, 18_500), (0, 18_500), (1, 1_500), (1, 1_500)],
    });
    c.seed = seed;
    c.rounds = 15;
    c.train.epochs = 2;
    c.train.batch_size = 32;
    c.train.learning_rate = 0.1;
    c.weights = AggregationWeights::new(0.1, 0.9, 0.0).unwrap();
    c.segmentation = SegmentationConfig { fineness: 7, eval_every: 3, recent_window: 1, max_groups: 2 };
    c
}

/// A small, fast configuration for plumbing tests.
pub fn small_config(seed: u64) -> ExperimentConfig {
    let a = EnvironmentProfile::cidds_like("A", 0.0).unwrap();
    let b = EnvironmentProfile::cidds_like("B", 1.0).unwrap();
    let mut c = ExperimentConfig::with_data(DataSource::Synthetic {
        profiles: vec![a, b],
        workers: vec![(0, 3_000), (0, 3_000), (1, 800)],
    });
    c.seed = seed;
    c.rounds = 6;
    c.hidden = vec![16];
    c.train.batch_size = 64;
    c.train.learning_rate = 0.1;
    c
}

/// Smallest |pre-activation| over every hidden unit and row. Central
/// differences are only valid when this exceeds the step size, since ReLU
/// is not differentiable at zero.
pub fn kink_distance(params: &ModelParams, batch: &LabeledDataset) -> f64 {
    let layers = params.layer_slices();
    let dims = params.spec().dims();
    let mut nearest = f64::INFINITY;
    for i in 0..batch.len() {
        let mut x = batch.row(i).to_vec();
        for (l, (w, b)) in layers.iter().enumerate().take(layers.len() - 1) {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let z: Vec<f64> = (0..fan_out)
                .map(|o| b[o] + (0..fan_in).map(|k| w[o * fan_in + k] * x[k]).sum::<f64>())
                .collect();
            nearest = z.iter().fold(nearest, |m, v| m.min(v.abs()));
            x = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    nearest
}

/// A random batch of `n` rows whose hidden pre-activations all stay at
/// least `margin` away from the ReLU kink.
pub fn smooth_batch(r: &mut impl Rng, params: &ModelParams, n: usize, classes: usize, margin: f64) -> LabeledDataset {
    loop {
        let batch = random_dataset(r, n, params.spec().input_dim, classes);
        if kink_distance(params, &batch) >= margin {
            return batch;
        }
    }
}
