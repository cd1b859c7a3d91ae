//! Experiment files.
//!
//! An experiment is one TOML document. Top-level keys carry the paper
//! symbols (`J`, `N_t`, `E`, `B`, `eta`, `alpha`, `beta`, `gamma`, `h_f`,
//! `h_j`, `R_e`); the `[data]` table selects synthetic profiles or flow CSV
//! files:
//!
//! ```toml
//! mode = "segmented_fl"
//! J = 15
//! seed = 7
//!
//! [data]
//! kind = "synthetic"
//!
//! [[data.profiles]]
//! id = "A"
//! divergence = 0.0
//!
//! [[data.workers]]
//! profile = "A"
//! samples = 12000
//! ```
//!
//! Relative file paths are resolved against the directory holding the
//! experiment file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::AggregationWeights;
use crate::flow_data::ColumnMap;
use crate::metrics::Averaging;
use crate::nnet::TrainConfig;
use crate::orchestrator::{DataSource, ExperimentConfig, FlAggregation, Mode};
use crate::resample::ResampleConfig;
use crate::segmentation::{threshold, SegmentationConfig};
use crate::synthgen::{EnvironmentProfile, CIDDS_CLASS_MIX};
use crate::NUM_CLASSES;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}{message}", location(path, *line))]
    Parse { path: PathBuf, line: Option<usize>, message: String },
    #[error("{}{message} [{}]", location(path, *line), keys.join(", "))]
    Invalid { path: PathBuf, line: Option<usize>, keys: Vec<String>, message: String },
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { line, .. } | ConfigError::Invalid { line, .. } => *line,
        }
    }

    /// Keys named by a validation failure.
    pub fn keys(&self) -> &[String] {
        match self {
            ConfigError::Invalid { keys, .. } => keys,
            _ => &[],
        }
    }
}

fn location(path: &Path, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{}:{l}: ", path.display()),
        None => format!("{}: ", path.display()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub id: String,
    #[serde(default)]
    pub divergence: f64,
    /// Raw class proportions `[normal, attacker, victim]`; defaults to the
    /// CIDDS mix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_mix: Option<[f64; NUM_CLASSES]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSpec {
    pub profile: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        #[serde(default)]
        profiles: Vec<ProfileSpec>,
        #[serde(default)]
        workers: Vec<WorkerSpec>,
    },
    Files {
        paths: Vec<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shares: Option<Vec<f64>>,
        #[serde(default)]
        columns: ColumnMap,
    },
}

/// The on-disk experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Mode,
    #[serde(rename = "J")]
    pub rounds: usize,
    #[serde(rename = "N_t", skip_serializing_if = "Option::is_none")]
    pub trainers_per_group: Option<usize>,
    pub seed: u64,
    #[serde(rename = "E")]
    pub epochs: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub h_f: u32,
    pub h_j: usize,
    #[serde(rename = "R_e")]
    pub recent_window: usize,
    pub max_groups: usize,
    pub hidden: Vec<usize>,
    pub neighbors_k: usize,
    pub target_ratio: Vec<f64>,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    /// Aggregation rule of the single `fl` group.
    pub aggregation: FlAggregation,
    pub averaging: Averaging,
    pub data: DataSpec,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let train = TrainConfig::default();
        let weights = AggregationWeights::default();
        let seg = SegmentationConfig::default();
        let resample = ResampleConfig::default();
        Self {
            mode: Mode::SegmentedFl,
            rounds: 15,
            trainers_per_group: None,
            seed: 0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            eta: train.learning_rate,
            alpha: weights.alpha(),
            beta: weights.beta(),
            gamma: weights.gamma(),
            h_f: seg.fineness,
            h_j: seg.eval_every,
            recent_window: seg.recent_window,
            max_groups: seg.max_groups,
            hidden: vec![64, 32],
            neighbors_k: resample.neighbors_k,
            target_ratio: resample.target_ratio,
            test_fraction: crate::flow_data::DEFAULT_TEST_FRACTION,
            validation_fraction: 0.1,
            aggregation: FlAggregation::default(),
            averaging: Averaging::Macro,
            data: DataSpec::Synthetic { profiles: Vec::new(), workers: Vec::new() },
        }
    }
}

/// A parsed experiment file together with its source text, for line
/// lookups in later validation errors.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub source: String,
    pub file: ConfigFile,
}

fn byte_to_line(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// First line assigning `key`, either as `key = ...` or as a table header.
fn key_line(source: &str, key: &str) -> Option<usize> {
    source.lines().position(|l| {
        let t = l.trim_start();
        let assigns = t
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='));
        let quoted = t
            .strip_prefix(&format!("\"{key}\""))
            .is_some_and(|rest| rest.trim_start().starts_with('='));
        let header = t.trim_start_matches('[').trim_end_matches(']').trim() == key && t.starts_with('[');
        assigns || quoted || header
    })
    .map(|i| i + 1)
}

pub fn parse_config(source: &str, path: impl Into<PathBuf>) -> Result<LoadedConfig, ConfigError> {
    let path = path.into();
    let file: ConfigFile = toml::from_str(source).map_err(|e| ConfigError::Parse {
        path: path.clone(),
        line: e.span().map(|s| byte_to_line(source, s.start)),
        message: e.message().trim().to_string(),
    })?;
    Ok(LoadedConfig { path, source: source.to_string(), file })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig, ConfigError> {
    let path = path.as_ref();
    let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&source, path)
}

struct Checker<'a> {
    loaded: &'a LoadedConfig,
}

impl Checker<'_> {
    fn fail(&self, keys: &[&str], message: impl fmt::Display) -> ConfigError {
        let line = keys.iter().filter_map(|k| key_line(&self.loaded.source, k)).min();
        ConfigError::Invalid {
            path: self.loaded.path.clone(),
            line,
            keys: keys.iter().map(|k| k.to_string()).collect(),
            message: message.to_string(),
        }
    }

    fn require(&self, ok: bool, keys: &[&str], message: impl fmt::Display) -> Result<(), ConfigError> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(keys, message))
        }
    }
}

impl LoadedConfig {
    /// Directory that relative data paths are resolved against.
    pub fn base_dir(&self) -> PathBuf {
        match self.path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
    }

    /// The file with data paths made absolute (relative to the experiment
    /// file), suitable for writing as a self-contained snapshot.
    pub fn resolved(&self) -> ConfigFile {
        let mut file = self.file.clone();
        if let DataSpec::Files { paths, .. } = &mut file.data {
            let base = self.base_dir();
            for p in paths.iter_mut() {
                if p.is_relative() {
                    let joined = base.join(&*p);
                    *p = std::path::absolute(&joined).unwrap_or(joined);
                }
            }
        }
        file
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, ConfigError> {
        let c = Checker { loaded: self };
        let f = &self.file;
        c.require(f.rounds >= 1, &["J"], "J must be >= 1")?;
        c.require(f.trainers_per_group != Some(0), &["N_t"], "N_t must be >= 1")?;
        c.require(f.epochs >= 1, &["E"], "E must be >= 1")?;
        c.require(f.batch_size >= 1, &["B"], "B must be >= 1")?;
        c.require(f.eta > 0.0 && f.eta.is_finite(), &["eta"], "eta must be a finite value > 0")?;
        let weights = AggregationWeights::new(f.alpha, f.beta, f.gamma).map_err(|_| {
            c.fail(
                &["alpha", "beta", "gamma"],
                format_args!(
                    "alpha + beta + gamma must equal 1 with each in [0, 1] (got {} + {} + {} = {})",
                    f.alpha,
                    f.beta,
                    f.gamma,
                    f.alpha + f.beta + f.gamma
                ),
            )
        })?;
        let segmentation =
            SegmentationConfig { fineness: f.h_f, eval_every: f.h_j, recent_window: f.recent_window, max_groups: f.max_groups };
        let t = threshold(&segmentation);
        c.require(t > 0.0, &["h_f"], format_args!("h_f = {} gives a threshold of {t}, which must be > 0", f.h_f))?;
        c.require(f.h_j >= 1, &["h_j"], "h_j must be >= 1")?;
        c.require(f.recent_window >= 1, &["R_e"], "R_e must be >= 1")?;
        c.require(f.max_groups >= 1, &["max_groups"], "max_groups must be >= 1")?;
        c.require(!f.hidden.is_empty() && f.hidden.iter().all(|&h| h > 0), &["hidden"], "hidden widths must be >= 1")?;
        c.require(f.neighbors_k >= 1, &["neighbors_k"], "neighbors_k must be >= 1")?;
        c.require(
            f.target_ratio.len() == NUM_CLASSES && f.target_ratio.iter().all(|r| r.is_finite() && *r >= 1.0),
            &["target_ratio"],
            format_args!("target_ratio needs {NUM_CLASSES} finite values >= 1"),
        )?;
        for (key, v) in [("test_fraction", f.test_fraction), ("validation_fraction", f.validation_fraction)] {
            c.require(v > 0.0 && v < 1.0, &[key], format_args!("{key} must lie strictly between 0 and 1"))?;
        }
        let data = self.data_source(&c)?;
        if let (Some(n_t), Some(workers)) = (f.trainers_per_group, worker_count(&data)) {
            c.require(n_t <= workers, &["N_t"], format_args!("N_t = {n_t} exceeds the {workers} workers"))?;
        }

        let config = ExperimentConfig {
            mode: f.mode,
            rounds: f.rounds,
            trainers_per_group: f.trainers_per_group,
            train: TrainConfig { epochs: f.epochs, batch_size: f.batch_size, learning_rate: f.eta, seed: 0 },
            weights,
            fl_aggregation: f.aggregation,
            segmentation,
            hidden: f.hidden.clone(),
            resample: ResampleConfig { neighbors_k: f.neighbors_k, target_ratio: f.target_ratio.clone() },
            test_fraction: f.test_fraction,
            validation_fraction: f.validation_fraction,
            averaging: f.averaging,
            seed: f.seed,
            data,
        };
        config.validate().map_err(|e| c.fail(&[], e))?;
        Ok(config)
    }

    fn data_source(&self, c: &Checker<'_>) -> Result<DataSource, ConfigError> {
        match &self.file.data {
            DataSpec::Synthetic { profiles, workers } => {
                c.require(!profiles.is_empty(), &["profiles"], "synthetic data needs at least one [[data.profiles]] entry")?;
                c.require(!workers.is_empty(), &["workers"], "synthetic data needs at least one [[data.workers]] entry")?;
                let mut ids = BTreeSet::new();
                let mut built = Vec::with_capacity(profiles.len());
                for p in profiles {
                    c.require(ids.insert(p.id.as_str()), &["id"], format_args!("duplicate profile id `{}`", p.id))?;
                    let profile = EnvironmentProfile::with_mix(p.id.clone(), p.divergence, p.class_mix.unwrap_or(CIDDS_CLASS_MIX))
                        .map_err(|e| c.fail(&["divergence", "class_mix"], e))?;
                    built.push(profile);
                }
                let mut assignment = Vec::with_capacity(workers.len());
                for w in workers {
                    let idx = profiles
                        .iter()
                        .position(|p| p.id == w.profile)
                        .ok_or_else(|| c.fail(&["profile"], format_args!("worker refers to unknown profile `{}`", w.profile)))?;
                    c.require(w.samples >= 1, &["samples"], "worker samples must be >= 1")?;
                    assignment.push((idx, w.samples));
                }
                Ok(DataSource::Synthetic { profiles: built, workers: assignment })
            }
            DataSpec::Files { paths, shares, columns } => {
                c.require(!paths.is_empty(), &["paths"], "file data needs at least one path")?;
                if let Some(s) = shares {
                    let sum: f64 = s.iter().sum();
                    c.require(
                        !s.is_empty() && s.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() < 1e-9,
                        &["shares"],
                        format_args!("shares must be non-negative and sum to 1 (sum is {sum})"),
                    )?;
                }
                let base = self.base_dir();
                let paths = paths.iter().map(|p| if p.is_relative() { base.join(p) } else { p.clone() }).collect();
                Ok(DataSource::Files { paths, shares: shares.clone(), columns: columns.clone() })
            }
        }
    }
}

fn worker_count(data: &DataSource) -> Option<usize> {
    match data {
        DataSource::Synthetic { workers, .. } => Some(workers.len()),
        DataSource::Files { paths, shares, .. } => Some(shares.as_ref().map_or(paths.len(), Vec::len)),
        DataSource::Datasets(d) => Some(d.len()),
    }
}

impl ConfigFile {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are always representable in TOML")
    }
}
