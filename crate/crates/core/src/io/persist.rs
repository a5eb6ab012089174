//! Run directories and set files.
//!
//! A run directory holds `run.json`, `samples.csv`, `khat_initial.json`,
//! `khat_final.json` and one CSV per episode under `trajectories/`. Every file
//! is written to a temporary sibling first and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{BatchRecord, Metrics, RunRecord, StepRecord};
use crate::lattice::{qset_from_json, qset_to_json, sset_from_json, sset_to_json, QSet, SSet, SetMeta};
use crate::learner::Hyperparameters;

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl ToString) -> PersistError {
    PersistError::Format { path: path.to_path_buf(), message: message.to_string() }
}

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PersistError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read(path: &Path) -> Result<String, PersistError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn save_qset(path: &Path, q: &QSet, meta: Option<SetMeta>) -> Result<(), PersistError> {
    write_atomic(path, qset_to_json(q, meta).as_bytes())
}

pub fn save_sset(path: &Path, s: &SSet, meta: Option<SetMeta>) -> Result<(), PersistError> {
    write_atomic(path, sset_to_json(s, meta).as_bytes())
}

pub fn load_qset(path: &Path) -> Result<(QSet, Option<SetMeta>), PersistError> {
    qset_from_json(&read(path)?).map_err(|e| format_err(path, e))
}

pub fn load_sset(path: &Path) -> Result<(SSet, Option<SetMeta>), PersistError> {
    sset_from_json(&read(path)?).map_err(|e| format_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub batch: usize,
    pub initial_cell: usize,
    pub initial_state: Vec<f64>,
    pub length: usize,
    pub failed: bool,
}

/// Contents of `run.json`. Holds no timestamps so reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDocument {
    pub schema_version: u32,
    pub model: String,
    pub seed: u64,
    /// The resolved configuration the run was produced from.
    pub config: serde_json::Value,
    pub initial_hyperparameters: Hyperparameters,
    pub batches: Vec<BatchRecord>,
    pub final_hyperparameters: Hyperparameters,
    pub sample_count: usize,
    pub failure_count: usize,
    pub episodes: Vec<EpisodeSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

impl RunDocument {
    pub fn new(record: &RunRecord, model: &str, seed: u64, config: serde_json::Value, metrics: Option<Metrics>) -> Self {
        let grid = record.khat_final.grid();
        RunDocument {
            schema_version: RUN_SCHEMA_VERSION,
            model: model.to_string(),
            seed,
            config,
            initial_hyperparameters: record.initial_hyperparameters.clone(),
            batches: record.batches.clone(),
            final_hyperparameters: record.final_model.hyperparameters().clone(),
            sample_count: record.sample_count(),
            failure_count: record.failure_count(),
            episodes: record
                .episodes
                .iter()
                .map(|e| EpisodeSummary {
                    episode: e.episode,
                    batch: e.batch,
                    initial_cell: e.initial_cell,
                    initial_state: grid.state_point(e.initial_cell),
                    length: e.steps.len(),
                    failed: e.failed(),
                })
                .collect(),
            metrics,
        }
    }
}

/// One row of `samples.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub episode: usize,
    pub step: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub label: f64,
    pub feasible: bool,
}

impl From<&StepRecord> for SampleRow {
    fn from(s: &StepRecord) -> Self {
        SampleRow {
            episode: s.episode,
            step: s.step,
            state: s.state.clone(),
            action: s.action.clone(),
            label: s.label(),
            feasible: s.feasible,
        }
    }
}

fn columns(prefix: &str, dims: usize) -> impl Iterator<Item = String> + '_ {
    (0..dims).map(move |d| format!("{prefix}_{d}"))
}

fn csv_bytes(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn numbers(values: &[f64]) -> impl Iterator<Item = String> + '_ {
    values.iter().map(f64::to_string)
}

pub fn samples_csv(rows: &[SampleRow], state_dim: usize, action_dim: usize) -> Vec<u8> {
    let mut header = vec!["episode".to_string(), "step".to_string()];
    header.extend(columns("state", state_dim));
    header.extend(columns("action", action_dim));
    header.extend(["label".to_string(), "feasible".to_string()]);
    csv_bytes(
        header,
        rows.iter().map(|r| {
            let mut row = vec![r.episode.to_string(), r.step.to_string()];
            row.extend(numbers(&r.state));
            row.extend(numbers(&r.action));
            row.push(r.label.to_string());
            row.push(r.feasible.to_string());
            row
        }),
    )
}

pub fn parse_samples_csv(text: &str, state_dim: usize, action_dim: usize) -> Result<Vec<SampleRow>, String> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let expected = 4 + state_dim + action_dim;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| e.to_string())?;
        if record.len() != expected {
            return Err(format!("expected {expected} columns, found {}", record.len()));
        }
        let f = |k: usize| record[k].parse::<f64>().map_err(|e| format!("column {k}: {e}"));
        let u = |k: usize| record[k].parse::<usize>().map_err(|e| format!("column {k}: {e}"));
        let state = (2..2 + state_dim).map(f).collect::<Result<_, _>>()?;
        let action = (2 + state_dim..2 + state_dim + action_dim).map(f).collect::<Result<_, _>>()?;
        rows.push(SampleRow {
            episode: u(0)?,
            step: u(1)?,
            state,
            action,
            label: f(expected - 2)?,
            feasible: record[expected - 1].parse::<bool>().map_err(|e| e.to_string())?,
        });
    }
    Ok(rows)
}

fn trajectory_csv(steps: &[StepRecord], state_dim: usize, action_dim: usize) -> Vec<u8> {
    let mut header = vec!["step".to_string()];
    header.extend(columns("state", state_dim));
    header.extend(columns("nominal", action_dim));
    header.extend(columns("action", action_dim));
    header.extend(["feasible".to_string(), "failed".to_string()]);
    header.extend(columns("next_state", state_dim));
    csv_bytes(
        header,
        steps.iter().map(|s| {
            let mut row = vec![s.step.to_string()];
            row.extend(numbers(&s.state));
            row.extend(numbers(&s.nominal));
            row.extend(numbers(&s.action));
            row.push(s.feasible.to_string());
            row.push(s.failed.to_string());
            row.extend(numbers(&s.next_state));
            row
        }),
    )
}

/// Writes a complete run directory.
pub fn save_run(dir: &Path, record: &RunRecord, document: &RunDocument) -> Result<(), PersistError> {
    let grid = record.khat_final.grid();
    let (n, m) = (grid.state_dim(), grid.action_dim());
    let rows: Vec<SampleRow> = record.steps().map(SampleRow::from).collect();
    write_atomic(&dir.join("samples.csv"), &samples_csv(&rows, n, m))?;
    for e in &record.episodes {
        let path = dir.join("trajectories").join(format!("episode_{:03}.csv", e.episode));
        write_atomic(&path, &trajectory_csv(&e.steps, n, m))?;
    }
    let meta = |description: &str| SetMeta {
        model: Some(document.model.clone()),
        iterations: None,
        description: Some(description.into()),
    };
    save_qset(&dir.join("khat_initial.json"), &record.khat_initial, Some(meta("constraint estimate before learning")))?;
    save_qset(&dir.join("khat_final.json"), &record.khat_final, Some(meta("constraint estimate after learning")))?;
    let mut json = serde_json::to_string_pretty(document).expect("run documents serialize");
    json.push('\n');
    write_atomic(&dir.join("run.json"), json.as_bytes())
}

/// A run directory read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredRun {
    pub document: RunDocument,
    pub samples: Vec<SampleRow>,
    pub khat_initial: QSet,
    pub khat_final: QSet,
}

pub fn load_run(dir: &Path) -> Result<StoredRun, PersistError> {
    let run_path = dir.join("run.json");
    let document: RunDocument = serde_json::from_str(&read(&run_path)?).map_err(|e| format_err(&run_path, e))?;
    if document.schema_version != RUN_SCHEMA_VERSION {
        return Err(format_err(&run_path, format!("unsupported schema_version {}", document.schema_version)));
    }
    let (khat_initial, _) = load_qset(&dir.join("khat_initial.json"))?;
    let (khat_final, _) = load_qset(&dir.join("khat_final.json"))?;
    if khat_initial.grid() != khat_final.grid() {
        return Err(format_err(dir, "initial and final estimates use different grids"));
    }
    let samples_path = dir.join("samples.csv");
    let grid = khat_final.grid();
    let samples = parse_samples_csv(&read(&samples_path)?, grid.state_dim(), grid.action_dim())
        .map_err(|e| format_err(&samples_path, e))?;
    Ok(StoredRun { document, samples, khat_initial, khat_final })
}
