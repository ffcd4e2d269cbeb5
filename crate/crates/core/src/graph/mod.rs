//! Task flow graph: subtasks joined by dependency and jump edges.
//!
//! Dependency edges must form a DAG; jump edges may close cycles and are
//! only followed when the planner asks for them. A node's `depends_on`
//! list mirrors its incoming dependency edges; [`TaskFlowGraph::normalize`]
//! reconciles the two after loading or editing.

mod execution;

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::prelude::*;

pub use execution::{
    aggregate_final_answer, assemble_input, AggregateError, ExecutionLimits, ExecutionState, PlannerAction,
    PlannerError, PredecessorResult, SubtaskInput, TraceEntry, TraceEvent,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskStatus {
    #[default]
    Pending,
    Running,
    Done,
    Failed,
}

impl SubtaskStatus {
    fn is_pending(&self) -> bool {
        *self == SubtaskStatus::Pending
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubtaskStatus::Pending => "pending",
            SubtaskStatus::Running => "running",
            SubtaskStatus::Done => "done",
            SubtaskStatus::Failed => "failed",
        }
    }
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: String,
    pub description: String,
    #[serde(default)]
    pub depends_on: Vec<String>,
    #[serde(default, skip_serializing_if = "SubtaskStatus::is_pending")]
    pub status: SubtaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub rerun_count: u32,
}

impl Subtask {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            description: description.into(),
            depends_on: Vec::new(),
            status: SubtaskStatus::Pending,
            result: None,
            rerun_count: 0,
        }
    }

    pub(crate) fn reset(&mut self) {
        self.status = SubtaskStatus::Pending;
        self.result = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Dependency,
    Jump,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_condition: Option<String>,
}

impl FlowEdge {
    pub fn dependency(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self { from: from.into(), to: to.into(), kind: EdgeKind::Dependency, jump_condition: None }
    }

    pub fn jump(from: impl Into<String>, to: impl Into<String>, condition: impl Into<String>) -> Self {
        Self { from: from.into(), to: to.into(), kind: EdgeKind::Jump, jump_condition: Some(condition.into()) }
    }

    pub fn is_dependency(&self) -> bool {
        self.kind == EdgeKind::Dependency
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFlowGraph {
    pub task_input: String,
    pub nodes: Vec<Subtask>,
    #[serde(default)]
    pub edges: Vec<FlowEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("dependency cycle among {0:?}")]
    CycleDetected(Vec<String>),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{node}` is missing the result of dependency `{missing}`")]
    MissingDependency { node: String, missing: String },
    #[error("invalid graph JSON: {0}")]
    Json(String),
    #[error("invalid graph: {0}")]
    Invalid(ValidationReport),
}

impl TaskFlowGraph {
    pub fn new(task_input: impl Into<String>) -> Self {
        Self { task_input: task_input.into(), nodes: Vec::new(), edges: Vec::new() }
    }

    pub fn with_node(mut self, id: &str, description: &str) -> Self {
        self.nodes.push(Subtask::new(id, description));
        self
    }

    pub fn with_edge(mut self, edge: FlowEdge) -> Self {
        if edge.is_dependency() {
            if let Some(node) = self.node_mut(&edge.to) {
                if !node.depends_on.contains(&edge.from) {
                    node.depends_on.push(edge.from.clone());
                }
            }
        }
        self.edges.push(edge);
        self
    }

    pub fn with_dependency(self, from: &str, to: &str) -> Self {
        self.with_edge(FlowEdge::dependency(from, to))
    }

    /// Parses the interchange JSON and normalizes it.
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let mut g: TaskFlowGraph = serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
        g.normalize();
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn node(&self, id: &str) -> Option<&Subtask> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Subtask> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.node(id).is_some()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.id.as_str())
    }

    pub fn dependency_edges(&self) -> impl Iterator<Item = &FlowEdge> {
        self.edges.iter().filter(|e| e.is_dependency())
    }

    pub fn jump_edges(&self) -> impl Iterator<Item = &FlowEdge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Jump)
    }

    /// Every (from, to) dependency pair, from edges and `depends_on` alike.
    pub fn dependency_pairs(&self) -> BTreeSet<(String, String)> {
        let mut pairs: BTreeSet<(String, String)> =
            self.dependency_edges().map(|e| (e.from.clone(), e.to.clone())).collect();
        for n in &self.nodes {
            for d in &n.depends_on {
                pairs.insert((d.clone(), n.id.clone()));
            }
        }
        pairs
    }

    /// Makes dependency edges and `depends_on` lists agree, drops duplicate
    /// edges, and sorts `depends_on`.
    pub fn normalize(&mut self) {
        let pairs = self.dependency_pairs();
        let mut seen = BTreeSet::new();
        let mut edges = Vec::with_capacity(self.edges.len());
        for e in self.edges.drain(..) {
            if seen.insert(e.clone()) {
                edges.push(e);
            }
        }
        for (from, to) in &pairs {
            let e = FlowEdge::dependency(from.clone(), to.clone());
            if seen.insert(e.clone()) {
                edges.push(e);
            }
        }
        self.edges = edges;
        for n in &mut self.nodes {
            n.depends_on = pairs.iter().filter(|(_, to)| *to == n.id).map(|(from, _)| from.clone()).collect();
        }
    }

    /// Rebuilds every `depends_on` list from the dependency edges alone.
    pub(crate) fn sync_depends_on(&mut self) {
        let pairs: BTreeSet<(String, String)> =
            self.dependency_edges().map(|e| (e.from.clone(), e.to.clone())).collect();
        for n in &mut self.nodes {
            n.depends_on = pairs.iter().filter(|(_, to)| *to == n.id).map(|(from, _)| from.clone()).collect();
        }
    }

    /// Dependency predecessors of `id`, sorted by id.
    pub fn predecessors(&self, id: &str) -> Vec<String> {
        self.dependency_pairs().into_iter().filter(|(_, to)| to == id).map(|(from, _)| from).collect()
    }

    /// `id` plus every node reachable from it over dependency edges.
    pub fn downstream_closure(&self, id: &str) -> BTreeSet<String> {
        let pairs = self.dependency_pairs();
        let mut seen = BTreeSet::new();
        let mut stack = vec![id.to_owned()];
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur.clone()) {
                continue;
            }
            for (from, to) in &pairs {
                if *from == cur && !seen.contains(to) {
                    stack.push(to.clone());
                }
            }
        }
        seen
    }

    /// One line per node with its status; used in judge prompts.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let deps = if n.depends_on.is_empty() { String::new() } else { format!(" (after {})", n.depends_on.join(", ")) };
            out.push_str(&format!("- {} [{}]{}: {}\n", n.id, n.status.as_str(), deps, n.description));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    NoNodes,
    DuplicateId { id: String },
    DanglingEdge { from: String, to: String, missing: String },
    DanglingDependency { node: String, missing: String },
    SelfLoop { node: String },
    JumpConditionMismatch { from: String, to: String },
    DependencyCycle { nodes: Vec<String> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoNodes => write!(f, "graph has no nodes"),
            Violation::DuplicateId { id } => write!(f, "duplicate node id `{id}`"),
            Violation::DanglingEdge { from, to, missing } => {
                write!(f, "edge {from} -> {to} references missing node `{missing}`")
            }
            Violation::DanglingDependency { node, missing } => {
                write!(f, "node `{node}` depends on missing node `{missing}`")
            }
            Violation::SelfLoop { node } => write!(f, "self-loop on `{node}`"),
            Violation::JumpConditionMismatch { from, to } => {
                write!(f, "edge {from} -> {to}: jump_condition must be present exactly on jump edges")
            }
            Violation::DependencyCycle { nodes } => write!(f, "dependency cycle among {}", nodes.join(", ")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Lists every violated structural invariant. An empty report means the
/// graph is valid.
pub fn validate_graph(g: &TaskFlowGraph) -> ValidationReport {
    let mut violations = Vec::new();
    if g.nodes.is_empty() {
        violations.push(Violation::NoNodes);
    }
    let mut ids = BTreeSet::new();
    for n in &g.nodes {
        if !ids.insert(n.id.as_str()) {
            violations.push(Violation::DuplicateId { id: n.id.clone() });
        }
    }
    for e in &g.edges {
        for end in [&e.from, &e.to] {
            if !ids.contains(end.as_str()) {
                violations.push(Violation::DanglingEdge { from: e.from.clone(), to: e.to.clone(), missing: end.clone() });
            }
        }
        if e.from == e.to {
            violations.push(Violation::SelfLoop { node: e.from.clone() });
        }
        if (e.kind == EdgeKind::Jump) != e.jump_condition.is_some() {
            violations.push(Violation::JumpConditionMismatch { from: e.from.clone(), to: e.to.clone() });
        }
    }
    for n in &g.nodes {
        for d in &n.depends_on {
            if !ids.contains(d.as_str()) {
                violations.push(Violation::DanglingDependency { node: n.id.clone(), missing: d.clone() });
            } else if *d == n.id && !g.edges.iter().any(|e| e.is_dependency() && e.from == n.id && e.to == n.id) {
                violations.push(Violation::SelfLoop { node: n.id.clone() });
            }
        }
    }
    for cycle in dependency_cycles(g, &ids) {
        violations.push(Violation::DependencyCycle { nodes: cycle });
    }
    ValidationReport { violations }
}

fn dependency_cycles(g: &TaskFlowGraph, ids: &BTreeSet<&str>) -> Vec<Vec<String>> {
    let pairs: Vec<(String, String)> = g
        .dependency_pairs()
        .into_iter()
        .filter(|(a, b)| a != b && ids.contains(a.as_str()) && ids.contains(b.as_str()))
        .collect();
    let remaining = kahn_leftovers(ids, &pairs);
    if remaining.is_empty() {
        return Vec::new();
    }
    // Nodes left over by Kahn's algorithm lie on or downstream of a cycle.
    // Mutual reachability among them recovers the cyclic components.
    let reach = |start: &str| -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start.to_owned()];
        while let Some(cur) = stack.pop() {
            for (from, to) in &pairs {
                if *from == cur && remaining.contains(to) && seen.insert(to.clone()) {
                    stack.push(to.clone());
                }
            }
        }
        seen
    };
    let reachable: BTreeMap<&String, BTreeSet<String>> = remaining.iter().map(|n| (n, reach(n))).collect();
    let mut assigned = BTreeSet::new();
    let mut cycles = Vec::new();
    for n in &remaining {
        if assigned.contains(n) || !reachable[n].contains(n) {
            continue;
        }
        let comp: Vec<String> = remaining
            .iter()
            .filter(|m| reachable[n].contains(*m) && reachable[*m].contains(n))
            .cloned()
            .collect();
        assigned.extend(comp.iter().cloned());
        cycles.push(comp);
    }
    cycles
}

fn kahn_leftovers(ids: &BTreeSet<&str>, pairs: &[(String, String)]) -> BTreeSet<String> {
    let mut indeg: BTreeMap<&str, usize> = ids.iter().map(|id| (*id, 0)).collect();
    for (_, to) in pairs {
        *indeg.get_mut(to.as_str()).expect("filtered") += 1;
    }
    let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
    while let Some(cur) = ready.pop() {
        indeg.remove(cur);
        for (from, to) in pairs {
            if from == cur {
                if let Some(d) = indeg.get_mut(to.as_str()) {
                    *d -= 1;
                    if *d == 0 {
                        ready.push(to.as_str());
                    }
                }
            }
        }
    }
    indeg.keys().map(|k| (*k).to_owned()).collect()
}

/// Kahn's algorithm over dependency edges; simultaneously ready nodes are
/// taken in ascending id order.
pub fn topological_order(g: &TaskFlowGraph) -> Result<Vec<String>, GraphError> {
    let pairs = g.dependency_pairs();
    let mut indeg: BTreeMap<&str, usize> = g.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (from, to) in &pairs {
        if !indeg.contains_key(from.as_str()) {
            return Err(GraphError::UnknownNode(from.clone()));
        }
        match indeg.get_mut(to.as_str()) {
            Some(d) => *d += 1,
            None => return Err(GraphError::UnknownNode(to.clone())),
        }
        succ.entry(from.as_str()).or_default().push(to.as_str());
    }
    let mut ready: BTreeSet<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(cur) = ready.pop_first() {
        order.push(cur.to_owned());
        for next in succ.get(cur).into_iter().flatten() {
            let d = indeg.get_mut(next).expect("edge endpoint known");
            *d -= 1;
            if *d == 0 {
                ready.insert(next);
            }
        }
    }
    if order.len() < indeg.len() {
        let placed: BTreeSet<&str> = order.iter().map(String::as_str).collect();
        let stuck = indeg.keys().filter(|k| !placed.contains(*k)).map(|k| (*k).to_owned()).collect();
        return Err(GraphError::CycleDetected(stuck));
    }
    Ok(order)
}
