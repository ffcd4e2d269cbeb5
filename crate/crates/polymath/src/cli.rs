//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use polymath_core::evolution::{evaluate, evolve, EvalContext};
use polymath_core::graph_opt::v_cycle;
use polymath_core::graph::SubtaskInput;
use polymath_core::llm::{ChatBackend, Llm, ScriptedBackend};
use polymath_core::orchestrator::{run, write_back_scores, BackendMode, Clock, RunStatus};
use polymath_core::score_db::{HashEmbedder, ScoreDb};
use polymath_core::workflow::{parse_workflow, serialize_workflow};

use crate::client::live_backend;
use crate::formats::{
    history_to_jsonl, load_graph, load_or_new_score_db, load_score_db, load_script, read_json, read_text,
    save_run_record, save_score_db, write_text, ConfigFile, FormatError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "polymath", version, about = "Task flow graph orchestration with workflow evolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Scripted,
    Live,
}

#[derive(Debug, Args)]
pub struct BackendOpts {
    /// Overrides the backend mode of the config file.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Backend script (JSON) for the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one task end to end.
    Run {
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        run_id: Option<String>,
        /// Where to write the run record; histories go next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score database; overrides the config file.
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Run the coarsen/relax cycle on a graph and print the level trace.
    OptimizeGraph {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evolve one workflow for one subtask.
    Evolve {
        #[arg(long)]
        workflow: PathBuf,
        /// Subtask input JSON: task_input, subtask_id, description, predecessors.
        #[arg(long)]
        subtask: PathBuf,
        #[command(flatten)]
        backend: BackendOpts,
        /// Where to write the history JSONL.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Seed a score database from unoptimized runs over a task directory.
    SeedDb {
        /// Directory of `*.txt` task files.
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[command(flatten)]
        backend: BackendOpts,
    },
    /// Inspect a score database.
    Scoredb {
        #[command(subcommand)]
        command: ScoredbCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScoredbCommand {
    Stats {
        #[arg(long)]
        db: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Failed(_) => EXIT_RUN_FAILED,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&mut self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

fn load_config(opts: &BackendOpts) -> Result<ConfigFile, CliError> {
    let mut cfg = match &opts.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(b) = opts.backend {
        cfg.run.backend = match b {
            BackendArg::Scripted => BackendMode::Scripted,
            BackendArg::Live => BackendMode::Live,
        };
    }
    if let Some(seed) = opts.seed {
        cfg.run.seed = seed;
        cfg.run.evolve.seed = seed;
    }
    Ok(cfg)
}

fn make_llm(opts: &BackendOpts, cfg: &ConfigFile) -> Result<Llm<Box<dyn ChatBackend>>, CliError> {
    let backend: Box<dyn ChatBackend> = match cfg.run.backend {
        BackendMode::Scripted => {
            let path = opts.script.as_ref().ok_or_else(|| CliError::Invalid("--script is required for the scripted backend".into()))?;
            Box::new(ScriptedBackend::new(load_script(path)?))
        }
        BackendMode::Live => Box::new(live_backend(&cfg.client).map_err(|e| CliError::Invalid(e.to_string()))?),
    };
    Ok(Llm::with_profiles(backend, cfg.profiles.clone().unwrap_or_default()))
}

fn check_dimension(db: &ScoreDb, cfg: &ConfigFile) -> Result<(), CliError> {
    if db.dimension() != cfg.run.embedding_dimension {
        return Err(CliError::Invalid(format!(
            "score database has dimension {}, config expects {}",
            db.dimension(),
            cfg.run.embedding_dimension
        )));
    }
    Ok(())
}

fn default_run_id(task: &str, seed: u64) -> String {
    format!("run-{:016x}", polymath_core::fnv1a64(task.as_bytes()) ^ seed)
}

fn history_path(record_path: &Path, node: &str) -> PathBuf {
    let stem = record_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let safe: String = node.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    record_path.with_file_name(format!("{stem}.{safe}.history.jsonl"))
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    writeln!(out, "{text}").map_err(|e| CliError::Failed(e.to_string()))
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Run { task, backend, run_id, out: record_path, db } => {
            let cfg = load_config(&backend)?;
            let task_text = read_text(&task)?.trim().to_owned();
            let db_path = db.or_else(|| cfg.run.score_db_path.clone().map(PathBuf::from));
            let mut score_db = match &db_path {
                Some(p) => load_or_new_score_db(p, cfg.run.embedding_dimension)?,
                None => ScoreDb::new(cfg.run.embedding_dimension),
            };
            check_dimension(&score_db, &cfg)?;
            let mut llm = make_llm(&backend, &cfg)?;
            let embedder = HashEmbedder::new(cfg.run.embedding_dimension);
            let run_id = run_id.unwrap_or_else(|| default_run_id(&task_text, cfg.run.seed));
            let record = run(&run_id, &task_text, &cfg.run, &score_db, &embedder, &mut llm, &mut SystemClock);

            let record_path = record_path.unwrap_or_else(|| PathBuf::from("runs").join(format!("{run_id}.json")));
            save_run_record(&record_path, &record)?;
            for s in &record.subtasks {
                if let Some(evo) = &s.evolution {
                    write_text(&history_path(&record_path, &s.node_id), &history_to_jsonl(&evo.history))?;
                }
            }
            emit(out, &format!("run {run_id}: {:?}", record.status).to_lowercase())?;
            emit(out, &format!("record: {}", record_path.display()))?;
            if record.status == RunStatus::Failed {
                return Err(CliError::Failed(record.error.clone().unwrap_or_else(|| "run failed".into())));
            }
            if let Some(p) = db_path {
                let wb = write_back_scores(&record, &mut score_db, &embedder);
                save_score_db(&p, &score_db)?;
                emit(out, &format!("score db: {} inserted, {} duplicate, {} skipped", wb.inserted.len(), wb.duplicates.len(), wb.skipped.len()))?;
            }
            if let Some(s) = &record.final_score {
                emit(out, &format!("final answer score: {:.3}", s.combined))?;
            }
            emit(out, "final answer:")?;
            emit(out, record.final_answer.as_deref().unwrap_or(""))?;
            Ok(())
        }
        Command::OptimizeGraph { graph, db, backend, out: out_path } => {
            let cfg = load_config(&backend)?;
            let g0 = load_graph(&graph)?;
            let score_db = load_score_db(&db)?;
            let mut llm = make_llm(&backend, &cfg)?;
            let embedder = HashEmbedder::new(score_db.dimension());
            emit(out, "before:")?;
            emit(out, &g0.to_json())?;
            match v_cycle(&g0, &cfg.run.vcycle, &score_db, &embedder, &mut llm) {
                Ok(o) => {
                    emit(out, "levels:")?;
                    for l in &o.levels {
                        emit(out, &l.to_json_line())?;
                    }
                    emit(out, "after:")?;
                    emit(out, &o.graph.to_json())?;
                    if let Some(p) = out_path {
                        write_text(&p, &o.graph.to_json())?;
                    }
                    Ok(())
                }
                Err(e) => {
                    for l in &e.levels {
                        emit(out, &l.to_json_line())?;
                    }
                    Err(CliError::Failed(e.to_string()))
                }
            }
        }
        Command::Evolve { workflow, subtask, backend, history } => {
            let cfg = load_config(&backend)?;
            let w = parse_workflow(&read_text(&workflow)?)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", workflow.display())))?;
            let input: SubtaskInput = read_json(&subtask)?;
            let ctx = EvalContext {
                graph_summary: format!("- {} [running]: {}\n", input.subtask_id, input.description),
                input,
            };
            let mut ev_cfg = cfg.run.evolve.clone();
            ev_cfg.step_budget = cfg.run.step_budget;
            let mut llm = make_llm(&backend, &cfg)?;
            let initial = evaluate(&w, &ctx, &ev_cfg, &mut llm).map_err(|e| CliError::Failed(format!("initial evaluation: {e}")))?;
            emit(out, &format!("initial combined score: {:.4}", initial.scores.combined))?;
            let outcome = evolve(&w, &initial, &ctx, &ev_cfg, &mut llm).map_err(|e| CliError::Failed(e.to_string()))?;
            let history_text = history_to_jsonl(&outcome.history);
            match history {
                Some(p) => write_text(&p, &history_text)?,
                None => out.write_all(history_text.as_bytes()).map_err(|e| CliError::Failed(e.to_string()))?,
            }
            emit(out, &format!(
                "best {} combined {:.4} after {} iterations{}",
                outcome.best.id,
                outcome.best.combined().unwrap_or(0.0),
                outcome.history.len(),
                if outcome.reached_threshold { " (threshold reached)" } else { "" }
            ))?;
            emit(out, &serialize_workflow(&outcome.best_workflow))?;
            Ok(())
        }
        Command::SeedDb { tasks, db, backend } => {
            let mut cfg = load_config(&backend)?;
            cfg.run.optimize_graph = false;
            cfg.run.evolve_enabled = false;
            let mut score_db = load_or_new_score_db(&db, cfg.run.embedding_dimension)?;
            check_dimension(&score_db, &cfg)?;
            let embedder = HashEmbedder::new(cfg.run.embedding_dimension);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&tasks)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", tasks.display())))?
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Invalid(format!("no .txt tasks in {}", tasks.display())));
            }
            let mut failed = 0;
            for file in &files {
                let task_text = read_text(file)?.trim().to_owned();
                let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let mut llm = make_llm(&backend, &cfg)?;
                let record = run(&format!("seed-{stem}"), &task_text, &cfg.run, &score_db, &embedder, &mut llm, &mut SystemClock);
                if record.status == RunStatus::Failed {
                    failed += 1;
                    emit(out, &format!("{stem}: failed: {}", record.error.as_deref().unwrap_or("")))?;
                    continue;
                }
                let wb = write_back_scores(&record, &mut score_db, &embedder);
                emit(out, &format!("{stem}: {} records", wb.inserted.len()))?;
            }
            save_score_db(&db, &score_db)?;
            emit(out, &format!("score db {}: {} records", db.display(), score_db.len()))?;
            if failed == files.len() {
                return Err(CliError::Failed("every seeding run failed".into()));
            }
            Ok(())
        }
        Command::Scoredb { command: ScoredbCommand::Stats { db } } => {
            let score_db = load_score_db(&db)?;
            emit(out, &format!("records: {}", score_db.len()))?;
            emit(out, &format!("dimension: {}", score_db.dimension()))?;
            emit(out, &format!("threshold: {}", score_db.threshold()))?;
            emit(out, &format!("clusters: {}", score_db.clusters().len()))?;
            for c in score_db.clusters().values() {
                emit(out, &format!(
                    "  cluster {}: size {}, complexity {:.3} ± {:.3}, completeness {:.3} ± {:.3}, leader {}",
                    c.cluster_id, c.size, c.mean_complexity, c.std_complexity, c.mean_completeness, c.std_completeness, c.leader
                ))?;
            }
            Ok(())
        }
    }
}
