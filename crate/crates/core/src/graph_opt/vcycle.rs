use serde::{Deserialize, Serialize};

use super::coarsen::{apply_merges, greedy_coarsen, score_merge_candidates, select_acyclic, MergeCandidate};
use super::relax::{relax_pass, RelaxAttempt};
use super::Scorer;
use crate::graph::{validate_graph, TaskFlowGraph, ValidationReport};
use crate::llm::{ChatBackend, Llm};
use crate::prelude::*;
use crate::score_db::{Embedder, ScoreDb, DEFAULT_TOP_K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VCycleConfig {
    pub max_coarsen_levels: u32,
    pub max_relax_levels: u32,
    pub top_k: usize,
    /// Corrective re-prompts for malformed estimator replies.
    pub estimate_retries: u32,
}

impl Default for VCycleConfig {
    fn default() -> Self {
        Self { max_coarsen_levels: 3, max_relax_levels: 3, top_k: DEFAULT_TOP_K, estimate_retries: 2 }
    }
}

impl VCycleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_coarsen_levels == 0 || self.max_relax_levels == 0 {
            return Err("v-cycle level bounds must be at least 1".into());
        }
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Coarsen,
    Relax,
}

/// What happened at one level; serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub phase: Phase,
    pub level: u32,
    pub nodes_before: usize,
    pub nodes_after: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<MergeCandidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected: Vec<(String, String)>,
    /// Greedy picks left out because contracting them would close a cycle.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attempts: Vec<RelaxAttempt>,
    pub applied: usize,
}

impl LevelTrace {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VCycleOutcome {
    pub graph: TaskFlowGraph,
    pub levels: Vec<LevelTrace>,
    /// Set when the score database was empty and the graph was left as is.
    pub cold_start: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VCycleFailure {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input graph is invalid: {0}")]
    InvalidInput(ValidationReport),
    #[error("coarsening level {level}: {reason}")]
    Coarsen { level: u32, reason: String },
    #[error("relaxation level {level}: {reason}")]
    Relax { level: u32, reason: String },
}

/// Failure with the last graph that passed validation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("v-cycle aborted: {cause}")]
pub struct VCycleError {
    pub cause: VCycleFailure,
    pub last_valid: TaskFlowGraph,
    pub levels: Vec<LevelTrace>,
}

/// Coarsens level by level until the bound is hit or no pair has a
/// non-negative advantage, then relaxes until the bound is hit or a pass
/// applies nothing.
///
/// With an empty score database every estimate is the same prior, so the
/// graph is returned unchanged.
#[allow(clippy::result_large_err)]
pub fn v_cycle(
    g0: &TaskFlowGraph,
    cfg: &VCycleConfig,
    db: &ScoreDb,
    embedder: &dyn Embedder,
    llm: &mut Llm<impl ChatBackend>,
) -> Result<VCycleOutcome, VCycleError> {
    let fail = |cause, last_valid: &TaskFlowGraph, levels: &[LevelTrace]| VCycleError {
        cause,
        last_valid: last_valid.clone(),
        levels: levels.to_vec(),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(VCycleFailure::Config(e), g0, &[]));
    }
    let report = validate_graph(g0);
    if !report.is_valid() {
        return Err(fail(VCycleFailure::InvalidInput(report), g0, &[]));
    }
    if db.is_empty() {
        return Ok(VCycleOutcome { graph: g0.clone(), levels: Vec::new(), cold_start: true });
    }

    let mut scorer = Scorer::new(db, embedder).with_top_k(cfg.top_k).with_retries(cfg.estimate_retries);
    let mut graph = g0.clone();
    let mut levels = Vec::new();

    for level in 1..=cfg.max_coarsen_levels {
        let candidates = score_merge_candidates(&graph, &mut scorer, llm)
            .map_err(|e| fail(VCycleFailure::Coarsen { level, reason: e.to_string() }, &graph, &levels))?;
        let greedy = greedy_coarsen(&candidates)
            .map_err(|e| fail(VCycleFailure::Coarsen { level, reason: e.to_string() }, &graph, &levels))?;
        let (matching, dropped) = select_acyclic(&graph, &greedy);
        let next = apply_merges(&graph, &matching)
            .map_err(|e| fail(VCycleFailure::Coarsen { level, reason: e.to_string() }, &graph, &levels))?;
        levels.push(LevelTrace {
            phase: Phase::Coarsen,
            level,
            nodes_before: graph.nodes.len(),
            nodes_after: next.nodes.len(),
            candidates,
            selected: matching.pairs.iter().map(|p| (p.node_i.clone(), p.node_j.clone())).collect(),
            dropped: dropped.iter().map(|p| (p.node_i.clone(), p.node_j.clone())).collect(),
            attempts: Vec::new(),
            applied: matching.pairs.len(),
        });
        graph = next;
        if matching.is_empty() {
            break;
        }
    }

    for level in 1..=cfg.max_relax_levels {
        let out = relax_pass(&graph, &mut scorer, llm)
            .map_err(|e| fail(VCycleFailure::Relax { level, reason: e.to_string() }, &graph, &levels))?;
        levels.push(LevelTrace {
            phase: Phase::Relax,
            level,
            nodes_before: graph.nodes.len(),
            nodes_after: out.graph.nodes.len(),
            candidates: Vec::new(),
            selected: Vec::new(),
            dropped: Vec::new(),
            attempts: out.attempts,
            applied: out.applied,
        });
        graph = out.graph;
        if out.applied == 0 {
            break;
        }
    }
    Ok(VCycleOutcome { graph, levels, cold_start: false })
}
