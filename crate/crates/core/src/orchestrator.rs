//! Round loop across workers and global model groups.
//!
//! A [`Federation`] owns every [`WorkerState`] and [`GroupState`]. Each
//! round, every live group resynchronises its members to the group model,
//! picks a round-robin batch of trainers, trains them in parallel, folds the
//! results into the group model and records validation and test metrics for
//! every worker. In segmented mode, every `h_j` rounds each group is scored
//! and its misfits are moved or split off into a new group.

use std::io::{Read, Write};
use std::path::PathBuf;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{fedavg, weighted_aggregate, AggregationError, AggregationWeights, LocalContribution};
use crate::dataset::{LabeledDataset, NUM_CLASSES};
use crate::flow_data::{
    fit_scaler, parse_flow_csv, partition_workers, train_test_split, ColumnMap, DataError, EncodingMap, Reject,
    ScalerParams,
};
use crate::metrics::{auroc_ovr_macro, confusion, prf1, Averaging, ClassScores, MetricsError};
use crate::nnet::{
    forward, init_params, predict, read_params, train_local_with_stats, write_params, LayerSpec, ModelParams,
    NnetError, TrainConfig, TrainStats,
};
use crate::resample::{nearmiss3_undersample, PoolShortfall, ResampleConfig, ResampleError};
use crate::rng::{derive_seed, stream};
use crate::segmentation::{
    eval_score, segment, threshold, EvalWindow, GroupEvaluation, GroupId, SegmentationConfig, SegmentationError,
    TimelineEntry, ValidationProbe, WorkerId,
};
use crate::synthgen::{make_scenario, EnvironmentProfile, SynthError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("resampling worker {worker}: {source}")]
    Resample { worker: usize, source: ResampleError },
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("inconsistent federation state: {0}")]
    Inconsistent(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid experiment: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, OrchestratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Centralized,
    Fl,
    SegmentedFl,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Centralized, Mode::Fl, Mode::SegmentedFl];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::Fl => "fl",
            Mode::SegmentedFl => "segmented_fl",
        }
    }
}

/// Aggregation rule used by the single group of `fl` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlAggregation {
    #[default]
    Fedavg,
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        profiles: Vec<EnvironmentProfile>,
        /// `(profile index, raw sample count)` per worker.
        workers: Vec<(usize, usize)>,
    },
    /// Flow CSV files. With `shares`, the union is partitioned across
    /// `shares.len()` workers; without, each file is one worker.
    Files {
        paths: Vec<PathBuf>,
        shares: Option<Vec<f64>>,
        columns: ColumnMap,
    },
    /// Already encoded, unscaled per-worker datasets.
    Datasets(Vec<LabeledDataset>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub rounds: usize,
    /// Trainers per group and round; `None` means the whole group.
    pub trainers_per_group: Option<usize>,
    /// The `seed` field is ignored; training seeds derive from `seed` below.
    pub train: TrainConfig,
    pub weights: AggregationWeights,
    pub fl_aggregation: FlAggregation,
    pub segmentation: SegmentationConfig,
    pub hidden: Vec<usize>,
    pub resample: ResampleConfig,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub averaging: Averaging,
    pub seed: u64,
    pub data: DataSource,
}

impl ExperimentConfig {
    pub fn with_data(data: DataSource) -> Self {
        Self {
            mode: Mode::SegmentedFl,
            rounds: 15,
            trainers_per_group: None,
            train: TrainConfig::default(),
            weights: AggregationWeights::default(),
            fl_aggregation: FlAggregation::default(),
            segmentation: SegmentationConfig::default(),
            hidden: vec![64, 32],
            resample: ResampleConfig::default(),
            test_fraction: crate::flow_data::DEFAULT_TEST_FRACTION,
            validation_fraction: 0.1,
            averaging: Averaging::Macro,
            seed: 0,
            data,
        }
    }

    pub fn layer_spec(&self) -> Result<LayerSpec> {
        Ok(LayerSpec::new(crate::NUM_FEATURES, self.hidden.clone(), NUM_CLASSES)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.rounds == 0 {
            return bad("J must be >= 1".into());
        }
        if self.trainers_per_group == Some(0) {
            return bad("N_t must be >= 1".into());
        }
        self.train.validate()?;
        if !(self.train.learning_rate > 0.0) {
            return bad("eta must be > 0".into());
        }
        self.segmentation.validate()?;
        self.resample.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        for (name, f) in [("test_fraction", self.test_fraction), ("validation_fraction", self.validation_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} must lie strictly between 0 and 1"));
            }
        }
        self.layer_spec()?;
        Ok(())
    }

    fn backend(&self) -> MlpBackend {
        MlpBackend { train: self.train.clone(), averaging: self.averaging }
    }
}


#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedData {
    /// Encoded, unscaled dataset per worker.
    pub workers: Vec<LabeledDataset>,
    pub rejects: Vec<(PathBuf, Reject)>,
    pub filtered: usize,
}

impl LoadedData {
    pub fn total_samples(&self) -> usize {
        self.workers.iter().map(LabeledDataset::len).sum()
    }
}

pub fn load_worker_data(source: &DataSource, seed: u64) -> Result<LoadedData> {
    match source {
        DataSource::Datasets(d) => Ok(LoadedData { workers: d.clone(), ..Default::default() }),
        DataSource::Synthetic { profiles, workers } => {
            let assignment: Vec<usize> = workers.iter().map(|w| w.0).collect();
            let sizes: Vec<usize> = workers.iter().map(|w| w.1).collect();
            let workers = make_scenario(profiles, &assignment, &sizes, seed)?;
            Ok(LoadedData { workers, ..Default::default() })
        }
        DataSource::Files { paths, shares, columns } => {
            let encoding = EncodingMap::cidds_default();
            let mut out = LoadedData::default();
            let mut per_file = Vec::with_capacity(paths.len());
            for path in paths {
                let parsed = parse_flow_csv(path, columns)?;
                out.filtered += parsed.filtered_count();
                info!(
                    "{}: {} records kept, {} filtered, {} malformed",
                    path.display(),
                    parsed.records.len(),
                    parsed.filtered_count(),
                    parsed.malformed_count()
                );
                per_file.push(encoding.encode(&parsed.records)?);
                out.rejects.extend(parsed.rejects.into_iter().map(|r| (path.clone(), r)));
            }
            out.workers = match shares {
                None => per_file,
                Some(shares) => {
                    let parts: Vec<&LabeledDataset> = per_file.iter().collect();
                    let all = LabeledDataset::concat(&parts).ok_or(DataError::Empty)?;
                    partition_workers(&all, shares, derive_seed(seed, &[stream::PARTITION]))?
                }
            };
            Ok(out)
        }
    }
}

/// One worker's private splits after scaling and undersampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWorker {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub scaler: ScalerParams,
    pub shortfalls: Vec<PoolShortfall>,
}

/// Test split, local scaler fit, NearMiss-3 on the training part only, then
/// a validation split carved out of the undersampled training data.
pub fn prepare_worker(raw: &LabeledDataset, index: usize, config: &ExperimentConfig) -> Result<PreparedWorker> {
    let w = index as u64;
    let (train, test) = train_test_split(raw, config.test_fraction, derive_seed(config.seed, &[stream::SPLIT, w]))?;
    let scaler = fit_scaler(&train)?;
    let train = scaler.transform(&train)?;
    let test = scaler.transform(&test)?;
    let resampled = nearmiss3_undersample(&train, &config.resample)
        .map_err(|source| OrchestratorError::Resample { worker: index + 1, source })?;
    let (train, validation) = train_test_split(
        &resampled.dataset,
        config.validation_fraction,
        derive_seed(config.seed, &[stream::VALIDATION, w]),
    )?;
    Ok(PreparedWorker { train, validation, test, scaler, shortfalls: resampled.shortfalls })
}

pub fn prepare_workers(raw: &[LabeledDataset], config: &ExperimentConfig) -> Result<Vec<PreparedWorker>> {
    raw.par_iter().enumerate().map(|(i, d)| prepare_worker(d, i, config)).collect()
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerMetrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    /// Macro one-vs-rest AUROC; absent when no class can be scored.
    pub auroc: Option<f64>,
}

/// Local training and evaluation as seen by the round loop.
pub trait ModelBackend: Sync {
    fn train(&self, params: &ModelParams, data: &LabeledDataset, seed: u64) -> Result<(ModelParams, TrainStats)>;
    fn validation_score(&self, params: &ModelParams, data: &LabeledDataset) -> Result<f64>;
    fn evaluate(&self, params: &ModelParams, data: &LabeledDataset) -> Result<WorkerMetrics>;
}

/// The shared MLP trained with mini-batch SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackend {
    pub train: TrainConfig,
    pub averaging: Averaging,
}

impl ModelBackend for MlpBackend {
    fn train(&self, params: &ModelParams, data: &LabeledDataset, seed: u64) -> Result<(ModelParams, TrainStats)> {
        let config = TrainConfig { seed, ..self.train.clone() };
        Ok(train_local_with_stats(params, data, &config)?)
    }

    fn validation_score(&self, params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
        let pred = predict(params, data.features())?;
        let report = prf1(&confusion(data.labels(), &pred, NUM_CLASSES)?);
        Ok(report.f1(self.averaging))
    }

    fn evaluate(&self, params: &ModelParams, data: &LabeledDataset) -> Result<WorkerMetrics> {
        let probs = forward(params, data.features())?;
        let pred: Vec<usize> = probs.iter_rows().map(crate::nnet::argmax).collect();
        let report = prf1(&confusion(data.labels(), &pred, NUM_CLASSES)?);
        let auroc = match auroc_ovr_macro(data.labels(), &probs) {
            Ok(a) => Some(a),
            Err(MetricsError::NoScorableClass) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(WorkerMetrics { accuracy: report.accuracy, macro_f1: report.f1(self.averaging), per_class: report.per_class, auroc })
    }
}


#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub id: WorkerId,
    pub group: GroupId,
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub params: ModelParams,
    pub window: EvalWindow,
}

impl WorkerState {
    /// `n_i`: training samples after undersampling and the validation split.
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub id: GroupId,
    pub params: ModelParams,
    /// Ascending worker ids.
    pub members: Vec<WorkerId>,
    pub retired: bool,
    cursor: usize,
}

impl GroupState {
    pub fn new(id: GroupId, params: ModelParams, mut members: Vec<WorkerId>) -> Self {
        members.sort();
        Self { id, params, members, retired: false, cursor: 0 }
    }

    /// Position of the next round-robin trainer in `members`.
    pub fn cursor(&self) -> usize {
        self.cursor
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationSettings {
    pub mode: Mode,
    pub trainers_per_group: Option<usize>,
    pub weights: AggregationWeights,
    pub fl_aggregation: FlAggregation,
    pub segmentation: SegmentationConfig,
    pub seed: u64,
}

impl FederationSettings {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            mode: config.mode,
            trainers_per_group: config.trainers_per_group,
            weights: config.weights,
            fl_aggregation: config.fl_aggregation,
            segmentation: config.segmentation,
            seed: config.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRoundRecord {
    pub round: usize,
    pub worker: usize,
    pub group: usize,
    pub trained: bool,
    pub train_loss: Option<f64>,
    pub validation_f1: f64,
    #[serde(flatten)]
    pub metrics: WorkerMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// One record per worker, ascending worker id.
    pub workers: Vec<WorkerRoundRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    workers: Vec<WorkerState>,
    groups: Vec<GroupState>,
    settings: FederationSettings,
    next_group: usize,
}

/// Seed for worker `w` training in round `round`.
pub fn training_seed(master: u64, worker: WorkerId, round: usize) -> u64 {
    derive_seed(master, &[stream::TRAIN, worker.0 as u64, round as u64])
}

/// Single group 1 holding every worker, all starting from the same
/// freshly initialised parameters.
pub fn broadcast_initial(prepared: Vec<PreparedWorker>, spec: &LayerSpec, settings: FederationSettings) -> Federation {
    let initial = init_params(spec, derive_seed(settings.seed, &[stream::INIT]));
    let window = settings.segmentation.recent_window;
    let workers: Vec<WorkerState> = prepared
        .into_iter()
        .enumerate()
        .map(|(i, p)| WorkerState {
            id: WorkerId(i + 1),
            group: GroupId(1),
            train: p.train,
            validation: p.validation,
            test: p.test,
            params: initial.clone(),
            window: EvalWindow::new(window),
        })
        .collect();
    let members = workers.iter().map(|w| w.id).collect();
    Federation::with_groups(workers, vec![GroupState::new(GroupId(1), initial, members)], settings)
        .expect("a single group covering every worker is consistent")
}

impl Federation {
    /// Assemble a federation from explicit parts. Worker `i` (0-based) must
    /// have id `i + 1`; group ids must be ascending.
    pub fn with_groups(workers: Vec<WorkerState>, groups: Vec<GroupState>, settings: FederationSettings) -> Result<Self> {
        let next_group = groups.iter().map(|g| g.id.0).max().unwrap_or(0) + 1;
        let fed = Self { workers, groups, settings, next_group };
        fed.check_invariants()?;
        Ok(fed)
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn groups(&self) -> &[GroupState] {
        &self.groups
    }

    pub fn settings(&self) -> &FederationSettings {
        &self.settings
    }

    pub fn live_groups(&self) -> impl Iterator<Item = &GroupState> {
        self.groups.iter().filter(|g| !g.retired)
    }

    pub fn worker(&self, id: WorkerId) -> &WorkerState {
        &self.workers[id.0 - 1]
    }

    fn worker_mut(&mut self, id: WorkerId) -> &mut WorkerState {
        &mut self.workers[id.0 - 1]
    }

    pub fn group(&self, id: GroupId) -> Option<&GroupState> {
        self.groups.iter().find(|g| g.id == id)
    }

    fn group_index(&self, id: GroupId) -> usize {
        self.groups.iter().position(|g| g.id == id).expect("group ids come from the federation")
    }

    /// Live groups partition the workers, each worker's `group` field agrees
    /// with membership, and the number of live groups is within bounds.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(OrchestratorError::Inconsistent(format!("{m}\n{}", self.dump())));
        let mut seen = vec![0usize; self.workers.len()];
        for (i, w) in self.workers.iter().enumerate() {
            if w.id != WorkerId(i + 1) {
                return fail(format!("worker at position {i} has id {}", w.id));
            }
        }
        for g in self.live_groups() {
            if g.members.is_empty() {
                return fail(format!("live group {} has no members", g.id));
            }
            for &m in &g.members {
                if m.0 == 0 || m.0 > self.workers.len() {
                    return fail(format!("group {} lists unknown worker {m}", g.id));
                }
                seen[m.0 - 1] += 1;
                if self.worker(m).group != g.id {
                    return fail(format!("worker {m} is listed in group {} but records group {}", g.id, self.worker(m).group));
                }
            }
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return fail(format!("worker {} belongs to {} live groups", i + 1, seen[i]));
        }
        let live = self.live_groups().count();
        if live == 0 || (self.settings.mode == Mode::SegmentedFl && live > self.settings.segmentation.max_groups) {
            return fail(format!("{live} live groups"));
        }
        Ok(())
    }

    fn dump(&self) -> String {
        let mut s = String::from("state:");
        for g in &self.groups {
            s += &format!("\n  group {} retired={} members={:?}", g.id, g.retired, g.members.iter().map(|m| m.0).collect::<Vec<_>>());
        }
        for w in &self.workers {
            s += &format!("\n  worker {} group={} n={}", w.id, w.group, w.sample_count());
        }
        s
    }

    /// One round over every live group.
    pub fn run_round(&mut self, round: usize, backend: &impl ModelBackend) -> Result<RoundReport> {
        self.check_invariants()?;

        // Resynchronise to the group model and choose this round's trainers.
        let mut plan: Vec<(usize, Vec<WorkerId>)> = Vec::new();
        for gi in 0..self.groups.len() {
            if self.groups[gi].retired {
                continue;
            }
            let group = &mut self.groups[gi];
            let size = group.members.len();
            let n_t = self.settings.trainers_per_group.unwrap_or(size).min(size);
            let trainers: Vec<WorkerId> = (0..n_t).map(|i| group.members[(group.cursor + i) % size]).collect();
            group.cursor = (group.cursor + n_t) % size;
            let (params, members) = (group.params.clone(), group.members.clone());
            for m in members {
                self.worker_mut(m).params = params.clone();
            }
            plan.push((gi, trainers));
        }

        let jobs: Vec<WorkerId> = plan.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let seed = self.settings.seed;
        let trained: Vec<(ModelParams, TrainStats)> = jobs
            .par_iter()
            .map(|&w| {
                let ws = self.worker(w);
                backend.train(&ws.params, &ws.train, training_seed(seed, w, round))
            })
            .collect::<Result<_>>()?;
        let mut losses: Vec<Option<f64>> = vec![None; self.workers.len()];
        let mut trained_flag = vec![false; self.workers.len()];
        for (&w, (_, stats)) in jobs.iter().zip(&trained) {
            losses[w.0 - 1] = stats.mean_loss;
            trained_flag[w.0 - 1] = true;
        }

        // Aggregate against the round-start models of the other groups.
        let snapshot: Vec<(GroupId, ModelParams)> = self.live_groups().map(|g| (g.id, g.params.clone())).collect();
        let mut offset = 0;
        let mut updated = Vec::with_capacity(plan.len());
        for (gi, trainers) in &plan {
            let gid = self.groups[*gi].id;
            let results = &trained[offset..offset + trainers.len()];
            offset += trainers.len();
            let contributions: Vec<LocalContribution<'_>> = trainers
                .iter()
                .zip(results)
                .map(|(&w, (p, _))| LocalContribution::new(p, self.worker(w).sample_count()))
                .collect();
            let others: Vec<&ModelParams> = snapshot.iter().filter(|(id, _)| *id != gid).map(|(_, p)| p).collect();
            let prev = &self.groups[*gi].params;
            let next = match (self.settings.mode, self.settings.fl_aggregation) {
                (Mode::Fl, FlAggregation::Fedavg) => fedavg(&contributions)?,
                (Mode::Fl, FlAggregation::Weighted) => weighted_aggregate(prev, &contributions, &[], &self.settings.weights)?,
                _ => weighted_aggregate(prev, &contributions, &others, &self.settings.weights)?,
            };
            updated.push((*gi, next));
        }
        for (gi, next) in updated {
            self.groups[gi].params = next;
        }
        for (&w, (p, _)) in jobs.iter().zip(trained) {
            self.worker_mut(w).params = p;
        }

        let evaluated: Vec<(f64, WorkerMetrics)> = self
            .workers
            .par_iter()
            .map(|w| Ok((backend.validation_score(&w.params, &w.validation)?, backend.evaluate(&w.params, &w.test)?)))
            .collect::<Result<_>>()?;
        let mut records = Vec::with_capacity(self.workers.len());
        for (i, (val, metrics)) in evaluated.into_iter().enumerate() {
            let w = &mut self.workers[i];
            w.window.push(val)?;
            records.push(WorkerRoundRecord {
                round,
                worker: w.id.0,
                group: w.group.0,
                trained: trained_flag[i],
                train_loss: losses[i],
                validation_f1: val,
                metrics,
            });
        }
        Ok(RoundReport { round, workers: records })
    }

    /// Score every live group and apply the resulting plans. Groups are
    /// processed in id order against the membership at the start of the
    /// call; moved and split-off workers start a fresh validation window.
    pub fn segment_groups(&mut self, round: usize, backend: &impl ModelBackend) -> Result<Vec<TimelineEntry>> {
        let config = self.settings.segmentation;
        let limit = threshold(&config);
        let snapshot: Vec<(GroupId, Vec<WorkerId>)> = self.live_groups().map(|g| (g.id, g.members.clone())).collect();
        let mut timeline = Vec::new();
        for (gid, members) in snapshot {
            let plan = {
                let windows: Vec<&EvalWindow> = members.iter().map(|&m| &self.worker(m).window).collect();
                let scores = eval_score(&windows)?;
                let local: Vec<&ModelParams> = members.iter().map(|&m| &self.worker(m).params).collect();
                let others: Vec<(GroupId, &ModelParams)> =
                    self.live_groups().filter(|g| g.id != gid).map(|g| (g.id, &g.params)).collect();
                let eval = GroupEvaluation {
                    group: gid,
                    members: &members,
                    scores: &scores,
                    local_params: &local,
                    other_groups: &others,
                    live_groups: self.live_groups().count(),
                };
                let probe = Probe { federation: self, backend };
                let plan = segment(&eval, &config, &probe)?;
                (plan, scores)
            };
            let (plan, scores) = plan;
            let new_id = plan.new_group.as_ref().map(|_| GroupId(self.next_group));
            for (&m, s) in members.iter().zip(&scores) {
                let dest = plan
                    .moves
                    .get(&m)
                    .copied()
                    .or_else(|| new_id.filter(|_| plan.new_group.as_ref().is_some_and(|g| g.members.contains(&m))))
                    .unwrap_or(gid);
                timeline.push(TimelineEntry {
                    round,
                    worker_id: m.0,
                    old_group: gid.0,
                    new_group: dest.0,
                    mean_validation: s.mean_validation,
                    score: s.score,
                    threshold: limit,
                });
            }
            let src = self.group_index(gid);
            for (&m, &dest) in &plan.moves {
                self.transfer(m, src, self.group_index(dest));
            }
            if let (Some(new), Some(id)) = (plan.new_group, new_id) {
                self.next_group += 1;
                self.groups.push(GroupState::new(id, new.params, Vec::new()));
                let dst = self.groups.len() - 1;
                for m in new.members {
                    self.transfer(m, src, dst);
                }
                info!("round {round}: group {id} split off from group {gid}");
            }
            let g = &mut self.groups[src];
            if g.members.is_empty() {
                g.retired = true;
                info!("round {round}: group {gid} retired");
            } else {
                g.cursor %= g.members.len();
            }
        }
        self.check_invariants()?;
        Ok(timeline)
    }

    fn transfer(&mut self, worker: WorkerId, from: usize, to: usize) {
        self.groups[from].members.retain(|&m| m != worker);
        let dest = &mut self.groups[to];
        dest.members.push(worker);
        dest.members.sort();
        let (id, params) = (dest.id, dest.params.clone());
        let w = self.worker_mut(worker);
        w.group = id;
        w.params = params;
        w.window.clear();
    }
}

struct Probe<'a, B> {
    federation: &'a Federation,
    backend: &'a B,
}

impl<B: ModelBackend> ValidationProbe for Probe<'_, B> {
    fn validation_f1(&self, worker: WorkerId, params: &ModelParams) -> std::result::Result<f64, SegmentationError> {
        self.backend
            .validation_score(params, &self.federation.worker(worker).validation)
            .map_err(|e| SegmentationError::Probe(e.to_string()))
    }
}


const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGFLCK1";

fn put_u64(out: &mut impl Write, v: u64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn get_u64(input: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Round number recorded in a checkpoint header.
pub fn checkpoint_round(mut input: impl Read) -> Result<usize> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(OrchestratorError::Checkpoint("not a checkpoint file".into()));
    }
    Ok(get_u64(&mut input)? as usize)
}

impl Federation {
    /// Serialise all mutable state: groups (id, retired flag, cursor,
    /// members, parameters) and per-worker group, window and parameters.
    /// Worker data is not stored; it is rebuilt from the configuration.
    pub fn write_checkpoint(&self, mut out: impl Write, round: usize) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        put_u64(&mut out, round as u64)?;
        put_u64(&mut out, self.next_group as u64)?;
        put_u64(&mut out, self.groups.len() as u64)?;
        for g in &self.groups {
            put_u64(&mut out, g.id.0 as u64)?;
            put_u64(&mut out, g.retired as u64)?;
            put_u64(&mut out, g.cursor as u64)?;
            put_u64(&mut out, g.members.len() as u64)?;
            for m in &g.members {
                put_u64(&mut out, m.0 as u64)?;
            }
            write_params(&mut out, &g.params)?;
        }
        put_u64(&mut out, self.workers.len() as u64)?;
        for w in &self.workers {
            put_u64(&mut out, w.group.0 as u64)?;
            let values: Vec<f64> = w.window.values().collect();
            put_u64(&mut out, values.len() as u64)?;
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
            write_params(&mut out, &w.params)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rebuild a federation from a checkpoint and freshly prepared worker
    /// data. Returns the federation and the round the checkpoint was taken.
    pub fn read_checkpoint(
        mut input: impl Read,
        prepared: Vec<PreparedWorker>,
        settings: FederationSettings,
    ) -> Result<(Self, usize)> {
        let bad = |m: &str| OrchestratorError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let round = get_u64(&mut input)? as usize;
        let next_group = get_u64(&mut input)? as usize;
        let n_groups = get_u64(&mut input)? as usize;
        if n_groups > 1 << 20 {
            return Err(bad("implausible group count"));
        }
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let id = GroupId(get_u64(&mut input)? as usize);
            let retired = get_u64(&mut input)? != 0;
            let cursor = get_u64(&mut input)? as usize;
            let n = get_u64(&mut input)? as usize;
            if n > prepared.len() {
                return Err(bad("group lists more members than there are workers"));
            }
            let members = (0..n).map(|_| get_u64(&mut input).map(|m| WorkerId(m as usize))).collect::<Result<_>>()?;
            let params = read_params(&mut input)?;
            groups.push(GroupState { id, params, members, retired, cursor });
        }
        let n_workers = get_u64(&mut input)? as usize;
        if n_workers != prepared.len() {
            return Err(bad(&format!("checkpoint has {n_workers} workers, configuration yields {}", prepared.len())));
        }
        let mut workers = Vec::with_capacity(n_workers);
        for (i, p) in prepared.into_iter().enumerate() {
            let group = GroupId(get_u64(&mut input)? as usize);
            let len = get_u64(&mut input)? as usize;
            let mut window = EvalWindow::new(settings.segmentation.recent_window);
            for _ in 0..len {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                window.push(f64::from_le_bytes(b))?;
            }
            let params = read_params(&mut input)?;
            workers.push(WorkerState {
                id: WorkerId(i + 1),
                group,
                train: p.train,
                validation: p.validation,
                test: p.test,
                params,
                window,
            });
        }
        let fed = Self { workers, groups, settings, next_group };
        fed.check_invariants()?;
        Ok((fed, round))
    }
}


/// Hooks for streaming results out of a running experiment.
pub trait RunObserver {
    fn round(&mut self, _report: &RoundReport) -> Result<()> {
        Ok(())
    }

    fn timeline(&mut self, _entries: &[TimelineEntry]) -> Result<()> {
        Ok(())
    }

    /// Called after every `h_j`-th round of the federated modes, once any
    /// segmentation has been applied.
    fn checkpoint(&mut self, _round: usize, _federation: &Federation) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub id: GroupId,
    pub members: Vec<WorkerId>,
    pub retired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub reports: Vec<RoundReport>,
    pub timeline: Vec<TimelineEntry>,
    pub groups: Vec<GroupSummary>,
    pub shortfalls: Vec<(WorkerId, PoolShortfall)>,
    pub rejects: Vec<(PathBuf, Reject)>,
}

impl ExperimentOutput {
    pub fn final_round(&self) -> Option<&RoundReport> {
        self.reports.last()
    }
}

fn summarize(fed: &Federation) -> Vec<GroupSummary> {
    fed.groups().iter().map(|g| GroupSummary { id: g.id, members: g.members.clone(), retired: g.retired }).collect()
}

fn shortfalls(prepared: &[PreparedWorker]) -> Vec<(WorkerId, PoolShortfall)> {
    prepared
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.shortfalls.iter().map(move |s| (WorkerId(i + 1), s.clone())))
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig, observer: &mut impl RunObserver) -> Result<ExperimentOutput> {
    run_from(config, None, observer)
}

/// Continue a federated run from a checkpoint written by a previous run of
/// the same configuration.
pub fn resume_experiment(
    config: &ExperimentConfig,
    checkpoint: impl Read,
    observer: &mut impl RunObserver,
) -> Result<ExperimentOutput> {
    run_from(config, Some(Box::new(checkpoint)), observer)
}

fn run_from(
    config: &ExperimentConfig,
    checkpoint: Option<Box<dyn Read + '_>>,
    observer: &mut impl RunObserver,
) -> Result<ExperimentOutput> {
    config.validate()?;
    let spec = config.layer_spec()?;
    let data = load_worker_data(&config.data, config.seed)?;
    if data.workers.is_empty() {
        return Err(DataError::Empty.into());
    }
    if let Some(n_t) = config.trainers_per_group {
        if n_t > data.workers.len() {
            return Err(OrchestratorError::Config(format!("N_t = {n_t} exceeds the {} workers", data.workers.len())));
        }
    }
    let prepared = prepare_workers(&data.workers, config)?;
    let short = shortfalls(&prepared);
    for (w, s) in &short {
        warn!("worker {w}: class {} kept the whole candidate pool ({} < target {})", s.class, s.pool, s.target);
    }
    let backend = config.backend();
    if config.mode == Mode::Centralized {
        if checkpoint.is_some() {
            return Err(OrchestratorError::Config("centralized runs have no checkpoints".into()));
        }
        let reports = run_centralized(&prepared, &spec, config, &backend, observer)?;
        let members = (1..=prepared.len()).map(WorkerId).collect();
        return Ok(ExperimentOutput {
            reports,
            timeline: Vec::new(),
            groups: vec![GroupSummary { id: GroupId(1), members, retired: false }],
            shortfalls: short,
            rejects: data.rejects,
        });
    }

    let settings = FederationSettings::from_config(config);
    let (mut fed, start) = match checkpoint {
        None => (broadcast_initial(prepared, &spec, settings), 0),
        Some(r) => Federation::read_checkpoint(r, prepared, settings)?,
    };
    let mut reports = Vec::new();
    let mut timeline = Vec::new();
    let every = config.segmentation.eval_every;
    for round in start + 1..=config.rounds {
        let report = fed.run_round(round, &backend)?;
        observer.round(&report)?;
        reports.push(report);
        if round % every == 0 {
            if config.mode == Mode::SegmentedFl {
                let entries = fed.segment_groups(round, &backend)?;
                observer.timeline(&entries)?;
                timeline.extend(entries);
            }
            observer.checkpoint(round, &fed)?;
        }
    }
    Ok(ExperimentOutput { reports, timeline, groups: summarize(&fed), shortfalls: short, rejects: data.rejects })
}

/// One model trained on the union of every worker's training data, `E`
/// epochs per round, evaluated on every worker's own splits.
fn run_centralized(
    prepared: &[PreparedWorker],
    spec: &LayerSpec,
    config: &ExperimentConfig,
    backend: &MlpBackend,
    observer: &mut impl RunObserver,
) -> Result<Vec<RoundReport>> {
    let parts: Vec<&LabeledDataset> = prepared.iter().map(|p| &p.train).collect();
    let union = LabeledDataset::concat(&parts).ok_or(DataError::Empty)?;
    let mut params = init_params(spec, derive_seed(config.seed, &[stream::INIT]));
    let mut reports = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let (next, stats) = backend.train(&params, &union, derive_seed(config.seed, &[stream::CENTRAL, round as u64]))?;
        params = next;
        let workers = prepared
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(WorkerRoundRecord {
                    round,
                    worker: i + 1,
                    group: 1,
                    trained: true,
                    train_loss: stats.mean_loss,
                    validation_f1: backend.validation_score(&params, &p.validation)?,
                    metrics: backend.evaluate(&params, &p.test)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = RoundReport { round, workers };
        observer.round(&report)?;
        reports.push(report);
    }
    Ok(reports)
}
