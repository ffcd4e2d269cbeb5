//! Subtask workflows: small declarative programs of assistant-invoking
//! nodes joined by sequence, conditional and loop links.
//!
//! Source format, one construct per line:
//!
//! ```text
//! entry draft
//!
//! # REPLACE-START
//! node draft coder
//!     Write the function.
//! node review reasoner
//!     Check the function against the requirements.
//! link draft -> review
//! link review -> draft loop: 2
//! # REPLACE-END
//! ```
//!
//! Nodes and links between `# REPLACE-START` and `# REPLACE-END` are
//! evolvable; everything else is frozen.

mod exec;
mod source;

pub use exec::{execute_workflow, ExecError, StepRecord, WorkflowResult, DEFAULT_STEP_BUDGET};
pub use source::{frozen_lines, parse_workflow, serialize_workflow, ParseError, REPLACE_END, REPLACE_START};

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::llm::AssistantKind;
use crate::prelude::*;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowNode {
    pub id: String,
    pub assistant: AssistantKind,
    /// Instruction prompt, one trimmed non-empty line per source line.
    pub prompt: String,
    pub evolvable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkKind {
    Sequence,
    Conditional { condition: String },
    Loop { max_repeats: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowLink {
    pub from: String,
    pub to: String,
    #[serde(flatten)]
    pub kind: LinkKind,
    pub evolvable: bool,
}

impl WorkflowLink {
    fn sort_key(&self) -> (&str, &str, &LinkKind) {
        (&self.from, &self.to, &self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workflow {
    pub nodes: Vec<WorkflowNode>,
    pub links: Vec<WorkflowLink>,
    pub entry: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum WorkflowViolation {
    NoNodes,
    DuplicateNode { id: String },
    EmptyPrompt { node: String },
    MarkerInPrompt { node: String },
    UnknownEntry { entry: String },
    DanglingLink { from: String, to: String, missing: String },
    DuplicateLink { from: String, to: String },
    ZeroLoop { from: String, to: String },
    EmptyCondition { from: String, to: String },
    Unreachable { node: String },
    NothingEvolvable,
}

impl fmt::Display for WorkflowViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoNodes => write!(f, "workflow has no nodes"),
            Self::DuplicateNode { id } => write!(f, "node `{id}` is declared twice"),
            Self::EmptyPrompt { node } => write!(f, "node `{node}` has an empty prompt"),
            Self::MarkerInPrompt { node } => write!(f, "prompt of `{node}` contains a replace-block marker"),
            Self::UnknownEntry { entry } => write!(f, "entry `{entry}` is not a node"),
            Self::DanglingLink { from, to, missing } => write!(f, "link {from} -> {to} references unknown node `{missing}`"),
            Self::DuplicateLink { from, to } => write!(f, "link {from} -> {to} is declared twice"),
            Self::ZeroLoop { from, to } => write!(f, "loop {from} -> {to} must repeat at least once"),
            Self::EmptyCondition { from, to } => write!(f, "conditional link {from} -> {to} has no condition"),
            Self::Unreachable { node } => write!(f, "node `{node}` is unreachable from the entry"),
            Self::NothingEvolvable => write!(f, "no node lies inside a replace block"),
        }
    }
}

impl Workflow {
    /// One evolvable node, which is also the entry.
    pub fn single(id: &str, assistant: AssistantKind, prompt: &str) -> Self {
        Self {
            nodes: vec![WorkflowNode { id: id.to_owned(), assistant, prompt: prompt.to_owned(), evolvable: true }],
            links: Vec::new(),
            entry: id.to_owned(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&WorkflowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Sum of prompt lengths in characters.
    pub fn prompt_chars(&self) -> usize {
        self.nodes.iter().map(|n| n.prompt.chars().count()).sum()
    }

    /// Total number of extra passes loop links may grant.
    pub fn loop_allowance(&self) -> u64 {
        self.links
            .iter()
            .map(|l| match l.kind {
                LinkKind::Loop { max_repeats } => u64::from(max_repeats),
                _ => 0,
            })
            .sum()
    }

    /// Links sorted by `(from, to, kind)`.
    pub fn canonical(&self) -> Workflow {
        let mut w = self.clone();
        w.links.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        w
    }

    pub fn validate(&self) -> Vec<WorkflowViolation> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            out.push(WorkflowViolation::NoNodes);
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                out.push(WorkflowViolation::DuplicateNode { id: n.id.clone() });
            }
            if n.prompt.trim().is_empty() {
                out.push(WorkflowViolation::EmptyPrompt { node: n.id.clone() });
            }
            if n.prompt.lines().any(|l| matches!(l.trim(), REPLACE_START | REPLACE_END)) {
                out.push(WorkflowViolation::MarkerInPrompt { node: n.id.clone() });
            }
        }
        if !self.nodes.is_empty() && !ids.contains(self.entry.as_str()) {
            out.push(WorkflowViolation::UnknownEntry { entry: self.entry.clone() });
        }
        let mut seen = BTreeSet::new();
        for l in &self.links {
            for end in [&l.from, &l.to] {
                if !ids.contains(end.as_str()) {
                    out.push(WorkflowViolation::DanglingLink { from: l.from.clone(), to: l.to.clone(), missing: end.clone() });
                }
            }
            if !seen.insert(l.sort_key()) {
                out.push(WorkflowViolation::DuplicateLink { from: l.from.clone(), to: l.to.clone() });
            }
            match &l.kind {
                LinkKind::Loop { max_repeats: 0 } => {
                    out.push(WorkflowViolation::ZeroLoop { from: l.from.clone(), to: l.to.clone() })
                }
                LinkKind::Conditional { condition } if condition.trim().is_empty() => {
                    out.push(WorkflowViolation::EmptyCondition { from: l.from.clone(), to: l.to.clone() })
                }
                _ => {}
            }
        }
        if ids.contains(self.entry.as_str()) {
            let mut reached = BTreeSet::from([self.entry.as_str()]);
            let mut stack = vec![self.entry.as_str()];
            while let Some(cur) = stack.pop() {
                for l in self.links.iter().filter(|l| l.from == cur) {
                    if ids.contains(l.to.as_str()) && reached.insert(l.to.as_str()) {
                        stack.push(l.to.as_str());
                    }
                }
            }
            for n in &self.nodes {
                if !reached.contains(n.id.as_str()) {
                    out.push(WorkflowViolation::Unreachable { node: n.id.clone() });
                }
            }
        }
        if !self.nodes.is_empty() && !self.nodes.iter().any(|n| n.evolvable) {
            out.push(WorkflowViolation::NothingEvolvable);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid workflow: {}", join(.0))]
    Invalid(Vec<WorkflowViolation>),
}

fn join(v: &[WorkflowViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// First frozen line of `reference` that `candidate` does not reproduce.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("frozen region differs at frozen line {index}: expected {expected:?}, found {found:?}")]
pub struct FrozenMismatch {
    pub index: usize,
    pub expected: Option<String>,
    pub found: Option<String>,
}

/// Compares the frozen (outside replace blocks) lines of both workflows in
/// canonical form.
pub fn check_frozen(reference: &Workflow, candidate: &Workflow) -> Result<(), FrozenMismatch> {
    let a = frozen_lines(reference);
    let b = frozen_lines(candidate);
    for index in 0..a.len().max(b.len()) {
        if a.get(index) != b.get(index) {
            return Err(FrozenMismatch { index, expected: a.get(index).cloned(), found: b.get(index).cloned() });
        }
    }
    Ok(())
}
