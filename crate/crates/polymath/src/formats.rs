//! On-disk formats: JSON documents, the score-database JSONL file and
//! evolution history JSONL.

use std::fs;
use std::path::{Path, PathBuf};

use polymath_core::evolution::HistoryEntry;
use polymath_core::graph::{validate_graph, TaskFlowGraph};
use polymath_core::llm::{AssistantProfiles, BackendScript};
use polymath_core::orchestrator::{RunConfig, RunRecord};
use polymath_core::score_db::{ScoreDb, SubtaskRecord, DEFAULT_THRESHOLD};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::client::ClientConfig;

pub const SCORE_DB_FORMAT: &str = "polymath-score-db";
pub const SCORE_DB_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_owned(), source }
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| FormatError::Parse { path: path.to_owned(), message: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

/// Config file: the run configuration plus client and role settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub run: RunConfig,
    pub client: ClientConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profiles: Option<AssistantProfiles>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let cfg: ConfigFile = read_json(path)?;
        cfg.run.validate().map_err(|message| FormatError::Parse { path: path.to_owned(), message })?;
        if let Some(missing) = cfg.profiles.as_ref().map(AssistantProfiles::missing).filter(|m| !m.is_empty()) {
            let names: Vec<&str> = missing.iter().map(|k| k.as_str()).collect();
            return Err(FormatError::Parse {
                path: path.to_owned(),
                message: format!("profiles missing for {}", names.join(", ")),
            });
        }
        Ok(cfg)
    }
}

pub fn load_graph(path: &Path) -> Result<TaskFlowGraph, FormatError> {
    let text = read_text(path)?;
    let g = TaskFlowGraph::from_json(&text).map_err(|e| FormatError::Parse { path: path.to_owned(), message: e.to_string() })?;
    let report = validate_graph(&g);
    if !report.is_valid() {
        return Err(FormatError::Parse { path: path.to_owned(), message: report.to_string() });
    }
    Ok(g)
}

pub fn load_script(path: &Path) -> Result<BackendScript, FormatError> {
    read_json(path)
}

pub fn save_run_record(path: &Path, record: &RunRecord) -> Result<(), FormatError> {
    write_json(path, record)
}

pub fn load_run_record(path: &Path) -> Result<RunRecord, FormatError> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreDbHeader {
    format: String,
    version: u32,
    dimension: usize,
    #[serde(default = "default_threshold")]
    threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

/// Header line, then one record per line in id order. Cluster ids are
/// written for inspection only; loading reclusters from scratch.
pub fn score_db_to_jsonl(db: &ScoreDb) -> String {
    let header = ScoreDbHeader {
        format: SCORE_DB_FORMAT.into(),
        version: SCORE_DB_VERSION,
        dimension: db.dimension(),
        threshold: db.threshold(),
    };
    let mut out = serde_json::to_string(&header).expect("serializable");
    out.push('\n');
    for r in db.records() {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn score_db_from_jsonl(text: &str) -> Result<ScoreDb, FormatError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(FormatError::Line { line: 1, message: "missing header".into() })?;
    let header: ScoreDbHeader =
        serde_json::from_str(first).map_err(|e| FormatError::Line { line: 1, message: format!("bad header: {e}") })?;
    if header.format != SCORE_DB_FORMAT || header.version != SCORE_DB_VERSION {
        return Err(FormatError::Line {
            line: 1,
            message: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    let mut db = ScoreDb::new(header.dimension);
    for (idx, line) in lines {
        let rec: SubtaskRecord =
            serde_json::from_str(line).map_err(|e| FormatError::Line { line: idx + 1, message: e.to_string() })?;
        db.insert(rec).map_err(|e| FormatError::Line { line: idx + 1, message: e.to_string() })?;
    }
    db.recluster(header.threshold).map_err(|e| FormatError::Line { line: 1, message: e.to_string() })?;
    Ok(db)
}

pub fn save_score_db(path: &Path, db: &ScoreDb) -> Result<(), FormatError> {
    write_text(path, &score_db_to_jsonl(db))
}

pub fn load_score_db(path: &Path) -> Result<ScoreDb, FormatError> {
    score_db_from_jsonl(&read_text(path)?).map_err(|e| match e {
        FormatError::Line { line, message } => {
            FormatError::Parse { path: path.to_owned(), message: format!("line {line}: {message}") }
        }
        other => other,
    })
}

/// Loads `path`, or starts an empty database when it does not exist.
pub fn load_or_new_score_db(path: &Path, dimension: usize) -> Result<ScoreDb, FormatError> {
    if path.exists() {
        load_score_db(path)
    } else {
        Ok(ScoreDb::new(dimension))
    }
}

pub fn history_to_jsonl(history: &[HistoryEntry]) -> String {
    history.iter().map(|h| h.to_json_line() + "\n").collect()
}

pub fn history_from_jsonl(text: &str) -> Result<Vec<HistoryEntry>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| FormatError::Line { line: i + 1, message: e.to_string() }))
        .collect()
}

/// A shipped offline scenario: `task.txt`, `script.json` and an optional
/// `config.json` in one directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub task: String,
    pub config: ConfigFile,
    pub script: BackendScript,
}

impl Scenario {
    pub fn load(dir: &Path) -> Result<Self, FormatError> {
        let config_path = dir.join("config.json");
        let config = if config_path.exists() { ConfigFile::load(&config_path)? } else { ConfigFile::default() };
        Ok(Self {
            name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            task: read_text(&dir.join("task.txt"))?.trim_end().to_owned(),
            config,
            script: load_script(&dir.join("script.json"))?,
        })
    }

    /// Every scenario directory under `root`, by name.
    pub fn load_all(root: &Path) -> Result<Vec<Self>, FormatError> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(io_err(root))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.join("task.txt").exists())
            .collect();
        dirs.sort();
        dirs.iter().map(|d| Self::load(d)).collect()
    }
}
