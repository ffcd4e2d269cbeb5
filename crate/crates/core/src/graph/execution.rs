//! Planner-monitored execution state over a task flow graph.

use serde::{Deserialize, Serialize};

use super::{topological_order, GraphError, SubtaskStatus, TaskFlowGraph};
use crate::llm::{AssistantKind, BackendError, ChatBackend, Llm};
use crate::prelude::*;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredecessorResult {
    pub id: String,
    pub description: String,
    pub result: String,
}

/// What one subtask receives: the original task plus the results of the
/// subtasks it depends on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskInput {
    pub task_input: String,
    pub subtask_id: String,
    pub description: String,
    pub predecessors: Vec<PredecessorResult>,
}

impl SubtaskInput {
    pub fn render(&self) -> String {
        let mut out = format!("## Task\n{}\n\n## Current subtask ({})\n{}\n", self.task_input, self.subtask_id, self.description);
        if !self.predecessors.is_empty() {
            out.push_str("\n## Results from prerequisite subtasks\n");
            for p in &self.predecessors {
                out.push_str(&format!("### {}: {}\n{}\n", p.id, p.description, p.result));
            }
        }
        out
    }
}

/// Builds the input for `node` from the task text and the results of its
/// dependency predecessors, listed in topological order.
pub fn assemble_input(
    g: &TaskFlowGraph,
    node: &str,
    results: &BTreeMap<String, String>,
) -> Result<SubtaskInput, GraphError> {
    let subtask = g.node(node).ok_or_else(|| GraphError::UnknownNode(node.to_owned()))?;
    let preds: BTreeSet<String> = g.predecessors(node).into_iter().collect();
    let order = topological_order(g)?;
    let mut predecessors = Vec::with_capacity(preds.len());
    for id in order.iter().filter(|id| preds.contains(*id)) {
        let result = results
            .get(id)
            .ok_or_else(|| GraphError::MissingDependency { node: node.to_owned(), missing: id.clone() })?;
        let p = g.node(id).expect("predecessor exists");
        predecessors.push(PredecessorResult { id: id.clone(), description: p.description.clone(), result: result.clone() });
    }
    Ok(SubtaskInput {
        task_input: g.task_input.clone(),
        subtask_id: subtask.id.clone(),
        description: subtask.description.clone(),
        predecessors,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum PlannerAction {
    Proceed,
    Rerun { target: String },
    Jump { target: String },
    Finalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionLimits {
    pub rerun_limit: u32,
    pub jump_budget: u32,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self { rerun_limit: 3, jump_budget: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Started,
    Completed,
    Failed { error: String },
    Action { action: PlannerAction },
    Rejected { action: PlannerAction, reason: String },
}

/// `tick` is a logical timestamp: the entry's position in the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: u64,
    pub node: Option<String>,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlannerError {
    #[error("run already finalized")]
    AlreadyFinished,
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("rerun limit {limit} reached for `{node}`")]
    RerunLimitExceeded { node: String, limit: u32 },
    #[error("no jump edge from {from:?} to `{to}`")]
    IllegalJump { from: Option<String>, to: String },
    #[error("jump budget of {budget} exhausted")]
    JumpBudgetExhausted { budget: u32 },
    #[error("no subtask at the cursor")]
    NothingToRun,
}

/// Execution state of one run. Only node status, results, the cursor and
/// the trace ever change; the graph topology is fixed for the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionState {
    graph: TaskFlowGraph,
    order: Vec<String>,
    cursor: usize,
    results: BTreeMap<String, String>,
    trace: Vec<TraceEntry>,
    limits: ExecutionLimits,
    jumps_used: u32,
    finished: bool,
}

impl ExecutionState {
    pub fn new(graph: TaskFlowGraph, limits: ExecutionLimits) -> Result<Self, GraphError> {
        let order = topological_order(&graph)?;
        Ok(Self {
            graph,
            order,
            cursor: 0,
            results: BTreeMap::new(),
            trace: Vec::new(),
            limits,
            jumps_used: 0,
            finished: false,
        })
    }

    pub fn graph(&self) -> &TaskFlowGraph {
        &self.graph
    }

    pub fn order(&self) -> &[String] {
        &self.order
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn results(&self) -> &BTreeMap<String, String> {
        &self.results
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn limits(&self) -> ExecutionLimits {
        self.limits
    }

    pub fn jumps_used(&self) -> u32 {
        self.jumps_used
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Node under the cursor, if the cursor has not run off the end.
    pub fn current(&self) -> Option<&str> {
        self.order.get(self.cursor).map(String::as_str)
    }

    pub fn all_done(&self) -> bool {
        self.graph.nodes.iter().all(|n| n.status == SubtaskStatus::Done)
    }

    fn push(&mut self, node: Option<String>, event: TraceEvent) {
        let tick = self.trace.len() as u64;
        self.trace.push(TraceEntry { tick, node, event });
    }

    /// Marks the node under the cursor as running and returns its id.
    pub fn begin_current(&mut self) -> Result<String, PlannerError> {
        if self.finished {
            return Err(PlannerError::AlreadyFinished);
        }
        let id = self.current().ok_or(PlannerError::NothingToRun)?.to_owned();
        self.graph.node_mut(&id).expect("order lists graph nodes").status = SubtaskStatus::Running;
        self.push(Some(id.clone()), TraceEvent::Started);
        Ok(id)
    }

    pub fn complete_current(&mut self, result: String) -> Result<(), PlannerError> {
        let id = self.current().ok_or(PlannerError::NothingToRun)?.to_owned();
        let node = self.graph.node_mut(&id).expect("order lists graph nodes");
        node.status = SubtaskStatus::Done;
        node.result = Some(result.clone());
        self.results.insert(id.clone(), result);
        self.push(Some(id), TraceEvent::Completed);
        Ok(())
    }

    pub fn fail_current(&mut self, error: String) -> Result<(), PlannerError> {
        let id = self.current().ok_or(PlannerError::NothingToRun)?.to_owned();
        let node = self.graph.node_mut(&id).expect("order lists graph nodes");
        node.status = SubtaskStatus::Failed;
        node.result = None;
        self.results.remove(&id);
        self.push(Some(id), TraceEvent::Failed { error });
        Ok(())
    }

    fn reset_node(&mut self, id: &str) {
        if let Some(n) = self.graph.node_mut(id) {
            n.reset();
        }
        self.results.remove(id);
    }

    fn position(&self, id: &str) -> Result<usize, PlannerError> {
        self.order.iter().position(|n| n == id).ok_or_else(|| PlannerError::UnknownNode(id.to_owned()))
    }

    /// Applies a planner action. Applied actions are appended to the trace
    /// as `Action`, refused ones as `Rejected`.
    pub fn apply(&mut self, action: PlannerAction) -> Result<(), PlannerError> {
        let at = self.current().or_else(|| self.order.last().map(String::as_str)).map(str::to_owned);
        match self.try_apply(&action) {
            Ok(()) => {
                self.push(at, TraceEvent::Action { action });
                Ok(())
            }
            Err(e) => {
                self.push(at, TraceEvent::Rejected { action, reason: e.to_string() });
                Err(e)
            }
        }
    }

    fn try_apply(&mut self, action: &PlannerAction) -> Result<(), PlannerError> {
        if self.finished {
            return Err(PlannerError::AlreadyFinished);
        }
        match action {
            PlannerAction::Proceed => {
                self.cursor = (self.cursor + 1).min(self.order.len());
            }
            PlannerAction::Rerun { target } => {
                let pos = self.position(target)?;
                let limit = self.limits.rerun_limit;
                let node = self.graph.node_mut(target).expect("position checked");
                if node.rerun_count >= limit {
                    return Err(PlannerError::RerunLimitExceeded { node: target.clone(), limit });
                }
                node.rerun_count += 1;
                self.reset_node(target);
                self.cursor = pos;
            }
            PlannerAction::Jump { target } => {
                let pos = self.position(target)?;
                let from = self.current().or_else(|| self.order.last().map(String::as_str)).map(str::to_owned);
                let sanctioned = from
                    .as_deref()
                    .is_some_and(|f| self.graph.jump_edges().any(|e| e.from == f && e.to == *target));
                if !sanctioned {
                    return Err(PlannerError::IllegalJump { from, to: target.clone() });
                }
                if self.jumps_used >= self.limits.jump_budget {
                    return Err(PlannerError::JumpBudgetExhausted { budget: self.limits.jump_budget });
                }
                self.jumps_used += 1;
                for id in self.graph.downstream_closure(target) {
                    self.reset_node(&id);
                }
                self.cursor = pos;
            }
            PlannerAction::Finalize => {
                self.finished = true;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregateError {
    #[error("cannot aggregate: subtasks still pending and the run was not finalized")]
    NotReady,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Asks the planner for the final answer from every subtask result in
/// topological order.
pub fn aggregate_final_answer(
    state: &ExecutionState,
    llm: &mut Llm<impl ChatBackend>,
) -> Result<String, AggregateError> {
    if !state.is_finished() && !state.all_done() {
        return Err(AggregateError::NotReady);
    }
    let g = state.graph();
    let mut prompt = format!(
        "Produce the final answer to the task using the subtask results below.\n\n## Task\n{}\n\n## Subtask results\n",
        g.task_input
    );
    for id in state.order() {
        let node = g.node(id).expect("order lists graph nodes");
        let result = match (node.status, state.results().get(id)) {
            (SubtaskStatus::Done, Some(r)) => r.clone(),
            (SubtaskStatus::Failed, _) => "[failed]".to_owned(),
            _ => "[not executed]".to_owned(),
        };
        prompt.push_str(&format!("### {}: {}\n{}\n", node.id, node.description, result));
    }
    Ok(llm.ask(AssistantKind::Planner, &g.task_input, &prompt)?)
}
