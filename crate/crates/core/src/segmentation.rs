//! Periodic evaluation and group re-assignment.
//!
//! Each worker keeps a window of its most recent validation macro-F1 values.
//! At an evaluation boundary the window means `C_i` of a group's members are
//! centred on the group mean, `d_i = C_i - mean(C)`, and squashed with the
//! logistic function, `c_i = 1 / (1 + exp(-d_i))`. Workers with `c_i` below
//! `0.5 - h_f * 0.01` are misfits: they move to another live group whose
//! model serves them at least as well as their current average, or else are
//! pooled into a newly spawned group seeded with the mean of their local
//! parameters.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::mean_params;
use crate::nnet::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId(pub usize);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("invalid segmentation config: {0}")]
    Config(String),
    #[error("worker {0} has an empty validation window")]
    EmptyWindow(usize),
    #[error("no workers to score")]
    NoWorkers,
    #[error("validation value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("validation probe failed: {0}")]
    Probe(String),
    #[error("{members} members but {given} {what}")]
    Mismatch { members: usize, given: usize, what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentationConfig {
    /// Segmentation fineness `h_f`.
    pub fineness: u32,
    /// Evaluate every `h_j` rounds.
    pub eval_every: usize,
    /// Window length `R_e`.
    pub recent_window: usize,
    pub max_groups: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { fineness: 7, eval_every: 3, recent_window: 3, max_groups: 3 }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        let t = threshold(self);
        if !(t > 0.0 && t <= 0.5) {
            return Err(SegmentationError::Config(format!("h_f = {} gives threshold {t} outside (0, 0.5]", self.fineness)));
        }
        if self.eval_every == 0 || self.recent_window == 0 || self.max_groups == 0 {
            return Err(SegmentationError::Config("h_j, R_e and max_groups must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_evaluation_round(&self, round: usize) -> bool {
        round.is_multiple_of(self.eval_every)
    }
}

pub fn threshold(config: &SegmentationConfig) -> f64 {
    0.5 - f64::from(config.fineness) * 0.01
}

/// The most recent `R_e` validation results of one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalWindow {
    capacity: usize,
    values: VecDeque<f64>,
}

impl EvalWindow {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), values: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, value: f64) -> Result<(), SegmentationError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(SegmentationError::OutOfRange(value));
        }
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
        }
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerScore {
    /// Window mean `C_i`.
    pub mean_validation: f64,
    /// `d_i = C_i - mean(C)`.
    pub deviation: f64,
    /// `c_i = sigmoid(d_i)`.
    pub score: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores from precomputed window means.
pub fn score_means(means: &[f64]) -> Result<Vec<WorkerScore>, SegmentationError> {
    if means.is_empty() {
        return Err(SegmentationError::NoWorkers);
    }
    // Mean taken relative to the first entry so identical inputs give d = 0 exactly.
    let c0 = means[0];
    let avg = c0 + means.iter().map(|c| c - c0).sum::<f64>() / means.len() as f64;
    Ok(means
        .iter()
        .map(|&c| {
            let d = c - avg;
            WorkerScore { mean_validation: c, deviation: d, score: sigmoid(d) }
        })
        .collect())
}

pub fn eval_score(windows: &[&EvalWindow]) -> Result<Vec<WorkerScore>, SegmentationError> {
    let means = windows
        .iter()
        .enumerate()
        .map(|(i, w)| w.mean().ok_or(SegmentationError::EmptyWindow(i)))
        .collect::<Result<Vec<_>, _>>()?;
    score_means(&means)
}

/// Validation macro-F1 of a worker under arbitrary parameters; used to test
/// whether a misfit would be served better by another group's model.
pub trait ValidationProbe {
    fn validation_f1(&self, worker: WorkerId, params: &ModelParams) -> Result<f64, SegmentationError>;
}

impl<F: Fn(WorkerId, &ModelParams) -> f64> ValidationProbe for F {
    fn validation_f1(&self, worker: WorkerId, params: &ModelParams) -> Result<f64, SegmentationError> {
        Ok(self(worker, params))
    }
}

/// Inputs for planning one group.
#[derive(Debug, Clone, Copy)]
pub struct GroupEvaluation<'a> {
    pub group: GroupId,
    pub members: &'a [WorkerId],
    pub scores: &'a [WorkerScore],
    /// Current local parameters of each member, aligned with `members`.
    pub local_params: &'a [&'a ModelParams],
    /// Every other live group and its global parameters.
    pub other_groups: &'a [(GroupId, &'a ModelParams)],
    /// Number of live groups, including this one.
    pub live_groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewGroup {
    pub members: Vec<WorkerId>,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPlan {
    pub group: GroupId,
    pub stay: Vec<WorkerId>,
    pub moves: BTreeMap<WorkerId, GroupId>,
    pub new_group: Option<NewGroup>,
}

impl SegmentationPlan {
    pub fn is_noop(&self) -> bool {
        self.moves.is_empty() && self.new_group.is_none()
    }

    /// Every worker covered by the plan, in ascending order.
    pub fn members(&self) -> Vec<WorkerId> {
        let mut all: Vec<WorkerId> = self.stay.clone();
        all.extend(self.moves.keys().copied());
        if let Some(g) = &self.new_group {
            all.extend_from_slice(&g.members);
        }
        all.sort();
        all
    }
}

pub fn segment(
    eval: &GroupEvaluation<'_>,
    config: &SegmentationConfig,
    probe: &impl ValidationProbe,
) -> Result<SegmentationPlan, SegmentationError> {
    let n = eval.members.len();
    if eval.scores.len() != n {
        return Err(SegmentationError::Mismatch { members: n, given: eval.scores.len(), what: "scores" });
    }
    if eval.local_params.len() != n {
        return Err(SegmentationError::Mismatch { members: n, given: eval.local_params.len(), what: "parameter sets" });
    }
    let limit = threshold(config);
    let mut plan = SegmentationPlan { group: eval.group, stay: Vec::new(), moves: BTreeMap::new(), new_group: None };
    let mut pool: Vec<usize> = Vec::new();

    for (i, (&worker, s)) in eval.members.iter().zip(eval.scores).enumerate() {
        if s.score >= limit {
            plan.stay.push(worker);
            continue;
        }
        // Best other group for this misfit, lowest id on ties.
        let mut best: Option<(GroupId, f64)> = None;
        for &(gid, params) in eval.other_groups {
            let f1 = probe.validation_f1(worker, params)?;
            if best.is_none_or(|(_, b)| f1 > b) {
                best = Some((gid, f1));
            }
        }
        match best {
            Some((gid, f1)) if f1 >= s.mean_validation => {
                plan.moves.insert(worker, gid);
            }
            _ => pool.push(i),
        }
    }

    if !pool.is_empty() && eval.live_groups < config.max_groups {
        let params: Vec<&ModelParams> = pool.iter().map(|&i| eval.local_params[i]).collect();
        let params = mean_params(&params).map_err(|e| SegmentationError::Config(e.to_string()))?;
        plan.new_group = Some(NewGroup { members: pool.iter().map(|&i| eval.members[i]).collect(), params });
    } else {
        plan.stay.extend(pool.iter().map(|&i| eval.members[i]));
        plan.stay.sort();
    }
    Ok(plan)
}

/// One row of the segmentation timeline: the outcome for one evaluated
/// worker at an evaluation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub round: usize,
    pub worker_id: usize,
    pub old_group: usize,
    pub new_group: usize,
    #[serde(rename = "C_i")]
    pub mean_validation: f64,
    #[serde(rename = "c_i")]
    pub score: f64,
    pub threshold: f64,
}

impl TimelineEntry {
    pub fn moved(&self) -> bool {
        self.old_group != self.new_group
    }
}
