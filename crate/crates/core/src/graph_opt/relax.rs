use serde::{Deserialize, Serialize};

use super::{decompose_advantage, Scorer};
use crate::graph::{topological_order, validate_graph, EdgeKind, FlowEdge, GraphError, Subtask, TaskFlowGraph};
use crate::llm::{extract_json_object, AssistantKind, BackendError, ChatBackend, Llm};
use crate::prelude::*;
use crate::score_db::EstimateError;

pub const MAX_SUB_NODES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionProposal {
    pub parent: String,
    pub sub_nodes: Vec<Subtask>,
    pub sub_edges: Vec<FlowEdge>,
    pub advantage: f64,
}

impl DecompositionProposal {
    /// Sub-nodes without a predecessor inside the proposal, in order.
    pub fn roots(&self) -> Vec<&str> {
        self.sub_nodes
            .iter()
            .filter(|n| !self.sub_edges.iter().any(|e| e.to == n.id))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Sub-nodes without a successor inside the proposal, in order.
    pub fn terminals(&self) -> Vec<&str> {
        self.sub_nodes
            .iter()
            .filter(|n| !self.sub_edges.iter().any(|e| e.from == n.id))
            .map(|n| n.id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProposalError {
    #[error("unreadable proposal: {0}")]
    Parse(String),
    #[error("proposal has {0} sub-nodes, at most 4 are allowed")]
    TooMany(usize),
    #[error("sub-node `{0}` is declared twice")]
    DuplicateId(String),
    #[error("sub-node `{0}` collides with an existing node")]
    IdCollision(String),
    #[error("sub-node `{0}` has an empty description")]
    EmptyDescription(String),
    #[error("sub-edge {from} -> {to} leaves the proposal")]
    DanglingEdge { from: String, to: String },
    #[error("sub-edges form a cycle")]
    Cycle,
    #[error("decomposition produced an invalid graph: {0}")]
    InvalidResult(String),
}

#[derive(Deserialize)]
struct RawProposal {
    #[serde(default)]
    nodes: Vec<RawNode>,
    #[serde(default)]
    edges: Vec<RawEdge>,
}

#[derive(Deserialize)]
struct RawNode {
    id: String,
    description: String,
    #[serde(default)]
    depends_on: Vec<String>,
}

#[derive(Deserialize)]
struct RawEdge {
    from: String,
    to: String,
}

/// Reads a decomposer reply of the form
/// `{"nodes": [{"id", "description", "depends_on"}], "edges": [{"from", "to"}]}`.
/// `edges` is optional. An empty `nodes` list means "keep the node".
pub fn parse_proposal(parent: &str, reply: &str) -> Result<DecompositionProposal, ProposalError> {
    let raw = extract_json_object(reply).ok_or_else(|| ProposalError::Parse("no JSON object found".into()))?;
    let raw: RawProposal = serde_json::from_str(raw).map_err(|e| ProposalError::Parse(e.to_string()))?;
    if raw.nodes.len() > MAX_SUB_NODES {
        return Err(ProposalError::TooMany(raw.nodes.len()));
    }
    let mut ids = BTreeSet::new();
    for n in &raw.nodes {
        if !ids.insert(n.id.as_str()) {
            return Err(ProposalError::DuplicateId(n.id.clone()));
        }
        if n.description.trim().is_empty() {
            return Err(ProposalError::EmptyDescription(n.id.clone()));
        }
    }
    let mut pairs = BTreeSet::new();
    for n in &raw.nodes {
        for d in &n.depends_on {
            pairs.insert((d.clone(), n.id.clone()));
        }
    }
    for e in &raw.edges {
        pairs.insert((e.from.clone(), e.to.clone()));
    }
    for (from, to) in &pairs {
        if !ids.contains(from.as_str()) || !ids.contains(to.as_str()) || from == to {
            return Err(ProposalError::DanglingEdge { from: from.clone(), to: to.clone() });
        }
    }
    let mut sub = TaskFlowGraph::new("");
    for n in &raw.nodes {
        sub = sub.with_node(&n.id, n.description.trim());
    }
    for (from, to) in &pairs {
        sub = sub.with_dependency(from, to);
    }
    sub.normalize();
    if topological_order(&sub).is_err() {
        return Err(ProposalError::Cycle);
    }
    Ok(DecompositionProposal {
        parent: parent.to_owned(),
        sub_nodes: sub.nodes,
        sub_edges: sub.edges,
        advantage: 0.0,
    })
}

/// Replaces `p.parent` by the proposal's sub-graph. Incoming dependency
/// edges attach to every root and outgoing ones leave from every terminal.
/// Jumps into the parent land on its first root; jumps out of it leave
/// from every terminal.
pub fn apply_decomposition(g: &TaskFlowGraph, p: &DecompositionProposal) -> Result<TaskFlowGraph, ProposalError> {
    if p.sub_nodes.is_empty() {
        return Err(ProposalError::Parse("empty proposal".into()));
    }
    if p.sub_nodes.len() > MAX_SUB_NODES {
        return Err(ProposalError::TooMany(p.sub_nodes.len()));
    }
    for n in &p.sub_nodes {
        if n.id != p.parent && g.contains(&n.id) {
            return Err(ProposalError::IdCollision(n.id.clone()));
        }
    }
    let mut sub = TaskFlowGraph { task_input: String::new(), nodes: p.sub_nodes.clone(), edges: p.sub_edges.clone() };
    sub.sync_depends_on();
    let sub_order = topological_order(&sub).map_err(|_| ProposalError::Cycle)?;
    let roots = p.roots();
    let terminals = p.terminals();
    let entry = sub_order.iter().find(|id| roots.contains(&id.as_str())).cloned().unwrap_or_default();

    let mut out = g.clone();
    out.normalize();
    let Some(pos) = out.nodes.iter().position(|n| n.id == p.parent) else {
        return Err(ProposalError::InvalidResult(format!("unknown node `{}`", p.parent)));
    };
    out.nodes.remove(pos);
    for (k, n) in p.sub_nodes.iter().enumerate() {
        let mut n = n.clone();
        n.reset();
        out.nodes.insert(pos + k, n);
    }

    let mut edges = Vec::new();
    for e in &out.edges {
        let into = e.to == p.parent;
        let out_of = e.from == p.parent;
        match (e.kind, out_of, into) {
            (_, false, false) => edges.push(e.clone()),
            (EdgeKind::Dependency, false, true) => {
                edges.extend(roots.iter().map(|r| FlowEdge::dependency(e.from.clone(), *r)));
            }
            (EdgeKind::Dependency, true, false) => {
                edges.extend(terminals.iter().map(|t| FlowEdge::dependency(*t, e.to.clone())));
            }
            (EdgeKind::Jump, false, true) => edges.push(FlowEdge { to: entry.clone(), ..e.clone() }),
            (EdgeKind::Jump, true, false) => {
                edges.extend(terminals.iter().map(|t| FlowEdge { from: (*t).to_owned(), ..e.clone() }));
            }
            (_, true, true) => {}
        }
    }
    edges.extend(p.sub_edges.iter().cloned());
    let mut seen = BTreeSet::new();
    edges.retain(|e| e.from != e.to && seen.insert(e.clone()));
    out.edges = edges;
    out.sync_depends_on();
    let report = validate_graph(&out);
    if !report.is_valid() {
        return Err(ProposalError::InvalidResult(report.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum RelaxVerdict {
    Applied,
    NoAdvantage,
    Empty,
    Invalid { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxAttempt {
    pub parent: String,
    #[serde(flatten)]
    pub verdict: RelaxVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sub_nodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxOutcome {
    pub graph: TaskFlowGraph,
    pub applied: usize,
    pub attempts: Vec<RelaxAttempt>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RelaxError {
    #[error("decomposer: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn decomposition_prompt(g: &TaskFlowGraph, node: &Subtask) -> String {
    let mut p = format!(
        "Overall task:\n{}\n\nSubtask `{}`:\n{}\n",
        g.task_input, node.id, node.description
    );
    let before = g.predecessors(&node.id);
    if !before.is_empty() {
        p.push_str(&format!("It runs after: {}\n", before.join(", ")));
    }
    p.push_str(&format!(
        "\nIf splitting this subtask into smaller steps would make each step easier to carry out well, \
         propose at most {MAX_SUB_NODES} sub-subtasks. Reply with a JSON object \
         {{\"nodes\": [{{\"id\": string, \"description\": string, \"depends_on\": [ids]}}]}} \
         using fresh ids. Reply {{\"nodes\": []}} to keep the subtask as it is."
    ));
    p
}

/// One relaxation pass over the nodes of `g` in topological order.
/// Unusable proposals are recorded and skipped; backend and estimator
/// failures abort the pass.
pub fn relax_pass(
    g: &TaskFlowGraph,
    scorer: &mut Scorer<'_>,
    llm: &mut Llm<impl ChatBackend>,
) -> Result<RelaxOutcome, RelaxError> {
    let order = topological_order(g)?;
    let mut graph = g.clone();
    let mut applied = 0;
    let mut attempts = Vec::new();
    for id in order {
        let Some(node) = graph.node(&id).cloned() else { continue };
        let reply = llm.ask(AssistantKind::Decomposer, &node.description, &decomposition_prompt(&graph, &node))?;
        let mut proposal = match parse_proposal(&id, &reply) {
            Ok(p) if p.sub_nodes.is_empty() => {
                attempts.push(RelaxAttempt { parent: id, verdict: RelaxVerdict::Empty, advantage: None, sub_nodes: vec![] });
                continue;
            }
            Ok(p) => p,
            Err(e) => {
                log::debug!("skipping decomposition of `{id}`: {e}");
                let verdict = RelaxVerdict::Invalid { reason: e.to_string() };
                attempts.push(RelaxAttempt { parent: id, verdict, advantage: None, sub_nodes: vec![] });
                continue;
            }
        };
        let sub_ids: Vec<String> = proposal.sub_nodes.iter().map(|n| n.id.clone()).collect();
        let parent_score = scorer.estimate(&node.description, llm)?.effective;
        let mut sub_scores = Vec::with_capacity(proposal.sub_nodes.len());
        for n in &proposal.sub_nodes {
            sub_scores.push(scorer.estimate(&n.description, llm)?.effective);
        }
        let da = decompose_advantage(&sub_scores, parent_score).unwrap_or(0.0);
        proposal.advantage = da;
        let verdict = if da > 0.0 {
            match apply_decomposition(&graph, &proposal) {
                Ok(next) => {
                    graph = next;
                    applied += 1;
                    RelaxVerdict::Applied
                }
                Err(e) => RelaxVerdict::Invalid { reason: e.to_string() },
            }
        } else {
            RelaxVerdict::NoAdvantage
        };
        attempts.push(RelaxAttempt { parent: id, verdict, advantage: Some(da), sub_nodes: sub_ids });
    }
    Ok(RelaxOutcome { graph, applied, attempts })
}
