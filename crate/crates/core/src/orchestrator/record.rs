use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::evolution::{EvaluationScores, HistoryEntry};
use crate::graph::{PlannerAction, TaskFlowGraph, TraceEntry};
use crate::graph_opt::LevelTrace;
use crate::llm::RequestLogEntry;
use crate::prelude::*;

/// Wall-clock source for stage marks, in milliseconds.
pub trait Clock {
    fn now_ms(&mut self) -> u64;
}

/// Always returns the same instant.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&mut self) -> u64 {
        self.0
    }
}

/// Advances by `step` on every reading.
#[derive(Debug, Clone, Copy)]
pub struct TickClock {
    pub next: u64,
    pub step: u64,
}

impl Clock for TickClock {
    fn now_ms(&mut self) -> u64 {
        let t = self.next;
        self.next += self.step;
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Started,
    Decomposed,
    Optimized,
    FirstExecution,
    Answered,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMark {
    pub stage: Stage,
    /// Position among the marks; orders stages even under a fixed clock.
    pub seq: u32,
    pub at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Judge-assigned tractability and completeness of a finished subtask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveScores {
    pub complexity: f64,
    pub completeness: f64,
    pub reflection: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionReport {
    pub iterations: u32,
    pub reached_threshold: bool,
    pub all_invalid: bool,
    pub best_candidate: String,
    pub generator_calls: u32,
    pub judge_calls: u32,
    pub history: Vec<HistoryEntry>,
}

/// Latest execution of one node. Reruns replace the report in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskReport {
    pub node_id: String,
    pub description: String,
    pub executions: u32,
    pub fallback_workflow: bool,
    pub initial_source: String,
    /// Source of the workflow that produced `result`.
    pub final_source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_scores: Option<EvaluationScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_scores: Option<EvaluationScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolution: Option<EvolutionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective: Option<EffectiveScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SubtaskReport {
    pub fn executed(&self) -> bool {
        self.result.is_some()
    }
}

/// One planner consultation after a subtask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerDecision {
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested: Option<PlannerAction>,
    pub applied: PlannerAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub task_input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_graph: Option<TaskFlowGraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimized_graph: Option<TaskFlowGraph>,
    #[serde(default)]
    pub cold_start: bool,
    #[serde(default)]
    pub levels: Vec<LevelTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_graph: Option<TaskFlowGraph>,
    #[serde(default)]
    pub subtasks: Vec<SubtaskReport>,
    #[serde(default)]
    pub planner: Vec<PlannerDecision>,
    #[serde(default)]
    pub trace: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    /// Judge scores of the final answer, the run's graph-level score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_score: Option<EvaluationScores>,
    pub config: RunConfig,
    #[serde(default)]
    pub requests: Vec<RequestLogEntry>,
    #[serde(default)]
    pub stages: Vec<StageMark>,
}

impl RunRecord {
    pub(crate) fn new(run_id: &str, task_input: &str, config: &RunConfig) -> Self {
        Self {
            run_id: run_id.to_owned(),
            status: RunStatus::Completed,
            error: None,
            task_input: task_input.to_owned(),
            initial_graph: None,
            optimized_graph: None,
            cold_start: false,
            levels: Vec::new(),
            final_graph: None,
            subtasks: Vec::new(),
            planner: Vec::new(),
            trace: Vec::new(),
            final_answer: None,
            final_score: None,
            config: config.clone(),
            requests: Vec::new(),
            stages: Vec::new(),
        }
    }

    pub(crate) fn mark(&mut self, stage: Stage, clock: &mut dyn Clock) {
        let seq = self.stages.len() as u32;
        self.stages.push(StageMark { stage, seq, at_ms: clock.now_ms() });
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageMark> {
        self.stages.iter().find(|m| m.stage == stage)
    }

    pub fn subtask(&self, node_id: &str) -> Option<&SubtaskReport> {
        self.subtasks.iter().find(|s| s.node_id == node_id)
    }

    /// Number of evolution runs recorded across subtasks.
    pub fn evolutions(&self) -> usize {
        self.subtasks.iter().filter(|s| s.evolution.is_some()).count()
    }

    /// Copy with every wall-clock reading zeroed.
    pub fn normalized(&self) -> Self {
        let mut r = self.clone();
        for m in &mut r.stages {
            m.at_ms = 0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
