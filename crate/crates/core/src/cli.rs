//! Command-line surface: `run`, `compare` and `report`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration or
//! usage errors (including missing inputs to `report`).
//!
//! A run writes into `<out>/<run id>/`, where the run id is a hash of the
//! resolved configuration:
//!
//! - `manifest.json`: run id, timestamps, status and output paths,
//! - `config.toml`: the resolved configuration snapshot,
//! - `rounds.jsonl`: one record per worker per round,
//! - `timeline.csv`: segmentation decisions,
//! - `rejects.tsv`: input rows dropped during ingestion,
//! - `checkpoints/round_NNNN.ckpt`: federation state every `h_j` rounds.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{load_config, ConfigError, ConfigFile};
use crate::dataset::FlowClass;
use crate::orchestrator::{
    checkpoint_round, resume_experiment, run_experiment, ExperimentConfig, ExperimentOutput, Federation, Mode,
    OrchestratorError, RoundReport, RunObserver,
};
use crate::segmentation::TimelineEntry;
use crate::NUM_CLASSES;

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REJECTS_FILE: &str = "rejects.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const WORKERS_TABLE: &str = "comparison_workers.csv";
pub const LABELS_TABLE: &str = "comparison_labels.csv";
pub const SERIES_FILE: &str = "series.csv";
pub const MARKERS_FILE: &str = "markers.csv";

const TIMELINE_HEADER: [&str; 7] = ["round", "worker_id", "old_group", "new_group", "C_i", "c_i", "threshold"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Run(#[from] OrchestratorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingInput(_) | CliError::Malformed { .. } => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "segfl", version, about = "Segmented federated learning for flow-based intrusion detection")]
pub struct Cli {
    /// Override the experiment seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root directory.
    #[arg(long, global = true, env = "SEGFL_OUT", default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same
        /// configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the centralized, fl and segmented_fl modes on identical data.
    Compare { config: PathBuf },
    /// Turn a run directory into plot-ready series and group-change markers.
    Report { run_dir: PathBuf },
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Parse arguments, execute, and return the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let opts = Options { seed: cli.seed, out: cli.out };
    let result = match &cli.command {
        Command::Run { config, resume } => cmd_run(config, resume.as_deref(), &opts).map(|d| d.dir),
        Command::Compare { config } => cmd_compare(config, &opts),
        Command::Report { run_dir } => cmd_report(run_dir).map(|()| run_dir.clone()),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub status: RunStatus,
    pub started_at: String,
    pub finished_at: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The resolved configuration, identical to `config.toml`.
    pub config: String,
    /// Output file names, relative to the run directory.
    pub outputs: Vec<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Twelve hex digits of the SHA-256 of the configuration snapshot.
pub fn run_id(snapshot: &str) -> String {
    let digest = Sha256::digest(snapshot.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

struct Prepared {
    file: ConfigFile,
    snapshot: String,
    experiment: ExperimentConfig,
}

fn prepare(config_path: &Path, opts: &Options) -> Result<Prepared> {
    let mut loaded = load_config(config_path)?;
    if let Some(seed) = opts.seed {
        loaded.file.seed = seed;
    }
    let experiment = loaded.experiment()?;
    let file = loaded.resolved();
    let snapshot = file.to_toml();
    Ok(Prepared { file, snapshot, experiment })
}

fn timeline_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(TIMELINE_HEADER)?;
    Ok(w)
}

struct RunSink {
    dir: PathBuf,
    rounds: BufWriter<File>,
    timeline: csv::Writer<File>,
}

impl RunSink {
    /// Open the outputs; on resume, records after `keep_through` are
    /// dropped so they can be regenerated.
    fn open(dir: &Path, keep_through: Option<usize>) -> Result<Self> {
        let rounds_path = dir.join(ROUNDS_FILE);
        let timeline_path = dir.join(TIMELINE_FILE);
        let mut kept_rounds = Vec::new();
        let mut kept_timeline = Vec::new();
        if let Some(last) = keep_through {
            if rounds_path.exists() {
                for line in BufReader::new(File::open(&rounds_path).map_err(io_err(&rounds_path))?).lines() {
                    let line = line.map_err(io_err(&rounds_path))?;
                    let round: RoundOnly = serde_json::from_str(&line)?;
                    if round.round <= last {
                        kept_rounds.push(line);
                    }
                }
            }
            if timeline_path.exists() {
                kept_timeline = read_timeline(&timeline_path)?.into_iter().filter(|e| e.round <= last).collect();
            }
        }
        let mut rounds = BufWriter::new(File::create(&rounds_path).map_err(io_err(&rounds_path))?);
        for line in kept_rounds {
            writeln!(rounds, "{line}").map_err(io_err(&rounds_path))?;
        }
        rounds.flush().map_err(io_err(&rounds_path))?;
        let mut timeline = timeline_writer(&timeline_path)?;
        for e in &kept_timeline {
            timeline.serialize(e)?;
        }
        timeline.flush().map_err(io_err(&timeline_path))?;
        Ok(Self { dir: dir.to_path_buf(), rounds, timeline })
    }
}

fn to_run_error(e: CliError) -> OrchestratorError {
    match e {
        CliError::Run(e) => e,
        CliError::Io { source, .. } => OrchestratorError::Io(source),
        other => OrchestratorError::Io(std::io::Error::other(other.to_string())),
    }
}

impl RunObserver for RunSink {
    fn round(&mut self, report: &RoundReport) -> std::result::Result<(), OrchestratorError> {
        for record in &report.workers {
            let line = serde_json::to_string(record).map_err(|e| to_run_error(e.into()))?;
            writeln!(self.rounds, "{line}")?;
        }
        self.rounds.flush()?;
        Ok(())
    }

    fn timeline(&mut self, entries: &[TimelineEntry]) -> std::result::Result<(), OrchestratorError> {
        for e in entries {
            self.timeline.serialize(e).map_err(|e| to_run_error(e.into()))?;
        }
        self.timeline.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, round: usize, federation: &Federation) -> std::result::Result<(), OrchestratorError> {
        let dir = self.dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("round_{round:04}.ckpt"));
        let tmp = path.with_extension("tmp");
        let mut out = BufWriter::new(File::create(&tmp)?);
        federation.write_checkpoint(&mut out, round)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

fn write_rejects(dir: &Path, output: &ExperimentOutput) -> Result<()> {
    let path = dir.join(REJECTS_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    writeln!(w, "file\tline\treason").map_err(io_err(&path))?;
    for (file, r) in &output.rejects {
        writeln!(w, "{}\t{}\t{}", file.display(), r.line, r.reason).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}

fn start_dir(root: &Path, name: &str, command: &str, prepared: &Prepared, outputs: &[&str]) -> Result<(PathBuf, RunManifest)> {
    let id = run_id(&prepared.snapshot);
    let dir = root.join(name.replace("{id}", &id));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_atomic(&dir.join(CONFIG_FILE), prepared.snapshot.as_bytes())?;
    let manifest = RunManifest {
        run_id: id,
        command: command.to_string(),
        status: RunStatus::Running,
        started_at: now(),
        finished_at: None,
        resumed_from: None,
        error: None,
        config: prepared.snapshot.clone(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_manifest(&dir, &manifest)?;
    Ok((dir, manifest))
}

fn finish<T>(dir: &Path, mut manifest: RunManifest, result: Result<T>) -> Result<T> {
    manifest.finished_at = Some(now());
    match &result {
        Ok(_) => manifest.status = RunStatus::Completed,
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
        }
    }
    write_manifest(dir, &manifest)?;
    result
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub output: ExperimentOutput,
}

pub fn cmd_run(config_path: &Path, resume: Option<&Path>, opts: &Options) -> Result<RunOutcome> {
    let prepared = prepare(config_path, opts)?;
    let outputs = [CONFIG_FILE, ROUNDS_FILE, TIMELINE_FILE, REJECTS_FILE, CHECKPOINT_DIR];
    let (dir, mut manifest) = start_dir(&opts.out, "{id}", "run", &prepared, &outputs)?;
    manifest.resumed_from = resume.map(Path::to_path_buf);
    write_manifest(&dir, &manifest)?;
    info!("run {} ({}) -> {}", manifest.run_id, prepared.file.mode.as_str(), dir.display());
    let result = execute_run(&dir, &prepared.experiment, resume);
    let output = finish(&dir, manifest, result)?;
    Ok(RunOutcome { dir, output })
}

fn execute_run(dir: &Path, experiment: &ExperimentConfig, resume: Option<&Path>) -> Result<ExperimentOutput> {
    let output = match resume {
        None => {
            let mut sink = RunSink::open(dir, None)?;
            run_experiment(experiment, &mut sink)?
        }
        Some(ck) => {
            let open = || File::open(ck).map(BufReader::new).map_err(io_err(ck));
            let round = checkpoint_round(open()?)?;
            let mut sink = RunSink::open(dir, Some(round))?;
            resume_experiment(experiment, open()?, &mut sink)?
        }
    };
    write_rejects(dir, &output)?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerComparisonRow {
    pub approach: String,
    pub worker: usize,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelComparisonRow {
    pub approach: String,
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Final-round per-worker scores and per-label means across workers.
pub fn comparison_rows(mode: Mode, output: &ExperimentOutput) -> (Vec<WorkerComparisonRow>, Vec<LabelComparisonRow>) {
    let Some(last) = output.final_round() else {
        return (Vec::new(), Vec::new());
    };
    let approach = mode.as_str().to_string();
    let workers = last
        .workers
        .iter()
        .map(|w| WorkerComparisonRow {
            approach: approach.clone(),
            worker: w.worker,
            accuracy: w.metrics.accuracy,
            auroc: w.metrics.auroc,
            macro_f1: w.metrics.macro_f1,
        })
        .collect();
    let n = last.workers.len() as f64;
    let labels = (0..NUM_CLASSES)
        .map(|c| {
            let mean = |f: fn(&crate::metrics::ClassScores) -> f64| {
                last.workers.iter().map(|w| f(&w.metrics.per_class[c])).sum::<f64>() / n
            };
            LabelComparisonRow {
                approach: approach.clone(),
                label: FlowClass::ALL[c].as_str().to_string(),
                precision: mean(|s| s.precision),
                recall: mean(|s| s.recall),
                f1: mean(|s| s.f1),
            }
        })
        .collect();
    (workers, labels)
}

pub fn cmd_compare(config_path: &Path, opts: &Options) -> Result<PathBuf> {
    let prepared = prepare(config_path, opts)?;
    let outputs = [CONFIG_FILE, WORKERS_TABLE, LABELS_TABLE];
    let (dir, manifest) = start_dir(&opts.out, "compare-{id}", "compare", &prepared, &outputs)?;
    let result = (|| {
        let mut worker_rows = Vec::new();
        let mut label_rows = Vec::new();
        for mode in Mode::ALL {
            info!("compare: running {}", mode.as_str());
            let cfg = ExperimentConfig { mode, ..prepared.experiment.clone() };
            let output = run_experiment(&cfg, &mut ())?;
            let (w, l) = comparison_rows(mode, &output);
            worker_rows.extend(w);
            label_rows.extend(l);
        }
        write_csv(&dir.join(WORKERS_TABLE), &worker_rows)?;
        write_csv(&dir.join(LABELS_TABLE), &label_rows)?;
        Ok(())
    })();
    finish(&dir, manifest, result)?;
    Ok(dir)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Deserialize)]
struct RoundOnly {
    round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub round: usize,
    pub worker: usize,
    pub group: usize,
    pub validation_f1: f64,
    pub macro_f1: f64,
    /// 1 on the round after which the worker changed group.
    pub group_change: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRow {
    pub round: usize,
    pub worker: usize,
    pub old_group: usize,
    pub new_group: usize,
}

fn read_timeline(path: &Path) -> Result<Vec<TimelineEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<TimelineEntry>, _>>();
    rows.map_err(|e| CliError::Malformed { path: path.to_path_buf(), message: e.to_string() })
}

pub fn cmd_report(run_dir: &Path) -> Result<()> {
    let rounds_path = run_dir.join(ROUNDS_FILE);
    let timeline_path = run_dir.join(TIMELINE_FILE);
    for p in [&rounds_path, &timeline_path] {
        if !p.is_file() {
            return Err(CliError::MissingInput(p.clone()));
        }
    }
    let markers: Vec<MarkerRow> = read_timeline(&timeline_path)?
        .into_iter()
        .filter(TimelineEntry::moved)
        .map(|e| MarkerRow { round: e.round, worker: e.worker_id, old_group: e.old_group, new_group: e.new_group })
        .collect();

    #[derive(Deserialize)]
    struct Record {
        round: usize,
        worker: usize,
        group: usize,
        validation_f1: f64,
        macro_f1: f64,
    }
    let mut series = Vec::new();
    let file = File::open(&rounds_path).map_err(io_err(&rounds_path))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&rounds_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| CliError::Malformed {
            path: rounds_path.clone(),
            message: format!("line {}: {e}", i + 1),
        })?;
        let changed = markers.iter().any(|m| m.round == r.round && m.worker == r.worker);
        series.push(SeriesRow {
            round: r.round,
            worker: r.worker,
            group: r.group,
            validation_f1: r.validation_f1,
            macro_f1: r.macro_f1,
            group_change: u8::from(changed),
        });
    }
    write_csv(&run_dir.join(SERIES_FILE), &series)?;
    let markers_path = run_dir.join(MARKERS_FILE);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&markers_path)?;
    w.write_record(["round", "worker", "old_group", "new_group"])?;
    for m in &markers {
        w.serialize(m)?;
    }
    w.flush().map_err(io_err(&markers_path))
}
