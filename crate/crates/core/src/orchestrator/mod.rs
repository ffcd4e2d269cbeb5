//! The end-to-end pipeline: decompose the task, optimize the graph, run
//! every subtask as a judged workflow (evolving the ones that score below
//! the trigger threshold), follow the planner, aggregate the answer and
//! write the observed scores back into the score database.

mod record;
mod run;

pub use record::{
    Clock, EffectiveScores, EvolutionReport, FixedClock, PlannerDecision, RunRecord, RunStatus, Stage, StageMark,
    SubtaskReport, TickClock,
};
pub use run::{run, write_back_scores, WriteBackReport};

use serde::{Deserialize, Serialize};

use crate::evolution::{extract_source, EvolveConfig};
use crate::graph::{validate_graph, ExecutionLimits, FlowEdge, Subtask, TaskFlowGraph};
use crate::graph_opt::VCycleConfig;
use crate::llm::{extract_json_object, AssistantKind, BackendError, ChatBackend, ChatMessage, Llm};
use crate::prelude::*;
use crate::score_db::DEFAULT_DIMENSION;
use crate::workflow::{parse_workflow, Workflow, DEFAULT_STEP_BUDGET};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    #[default]
    Scripted,
    Live,
}

/// Keyword rule: a subtask whose description has a word starting with
/// one of `keywords` goes to `assistant`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRule {
    pub assistant: AssistantKind,
    pub keywords: Vec<String>,
}

/// Picks the assistant for fallback workflows. Rules are tried in order;
/// the first match wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub rules: Vec<RoutingRule>,
    pub fallback: AssistantKind,
}

impl Default for RoutingTable {
    fn default() -> Self {
        let rule = |assistant, words: &[&str]| RoutingRule {
            assistant,
            keywords: words.iter().map(|w| (*w).to_owned()).collect(),
        };
        Self {
            rules: vec![
                rule(
                    AssistantKind::Coder,
                    &["code", "test", "implement", "function", "program", "script", "debug", "compile"],
                ),
                rule(AssistantKind::FileReader, &["file", "document", "read", "datasheet", "pdf", "csv"]),
            ],
            fallback: AssistantKind::Reasoner,
        }
    }
}

impl RoutingTable {
    pub fn route(&self, description: &str) -> AssistantKind {
        let lower = description.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        self.rules
            .iter()
            .find(|r| r.keywords.iter().any(|k| words.iter().any(|w| w.starts_with(k.as_str()))))
            .map_or(self.fallback, |r| r.assistant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendMode,
    pub vcycle: VCycleConfig,
    pub evolve: EvolveConfig,
    /// Off for unoptimized seeding runs.
    pub optimize_graph: bool,
    pub evolve_enabled: bool,
    pub rerun_limit: u32,
    pub jump_budget: u32,
    /// Applies to every workflow execution, including those inside evolution.
    pub step_budget: u32,
    pub score_db_path: Option<String>,
    pub embedding_dimension: usize,
    pub decompose_retries: u32,
    pub score_retries: u32,
    pub routing: RoutingTable,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let limits = ExecutionLimits::default();
        Self {
            backend: BackendMode::Scripted,
            vcycle: VCycleConfig::default(),
            evolve: EvolveConfig::default(),
            optimize_graph: true,
            evolve_enabled: true,
            rerun_limit: limits.rerun_limit,
            jump_budget: limits.jump_budget,
            step_budget: DEFAULT_STEP_BUDGET,
            score_db_path: None,
            embedding_dimension: DEFAULT_DIMENSION,
            decompose_retries: 1,
            score_retries: 2,
            routing: RoutingTable::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.vcycle.validate()?;
        self.evolve.validate()?;
        if self.rerun_limit == 0 || self.jump_budget == 0 || self.step_budget == 0 {
            return Err("rerun limit, jump budget and step budget must be positive".into());
        }
        if self.embedding_dimension == 0 {
            return Err("embedding dimension must be positive".into());
        }
        Ok(())
    }

    pub fn limits(&self) -> ExecutionLimits {
        ExecutionLimits { rerun_limit: self.rerun_limit, jump_budget: self.jump_budget }
    }

    /// Evolution settings for one subtask: the run's step budget and a
    /// seed derived from the run seed and the node id.
    pub fn evolve_for(&self, node_id: &str) -> EvolveConfig {
        EvolveConfig {
            step_budget: self.step_budget,
            seed: self.seed ^ crate::fnv1a64(node_id.as_bytes()),
            ..self.evolve.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OrchestratorError {
    #[error("task input is empty")]
    EmptyTask,
    #[error("decomposition invalid after {attempts} attempts: {reason}")]
    DecompositionInvalid { attempts: u32, reason: String },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Deserialize)]
struct Decomposition {
    nodes: Vec<Subtask>,
    #[serde(default)]
    edges: Vec<FlowEdge>,
}

fn parse_decomposition(task: &str, reply: &str) -> Result<TaskFlowGraph, String> {
    let json = extract_json_object(reply).ok_or("reply contains no JSON object")?;
    let d: Decomposition = serde_json::from_str(json).map_err(|e| format!("malformed graph JSON: {e}"))?;
    let mut g = TaskFlowGraph { task_input: task.to_owned(), nodes: d.nodes, edges: d.edges };
    g.normalize();
    let report = validate_graph(&g);
    if report.is_valid() {
        Ok(g)
    } else {
        Err(report.to_string())
    }
}

/// Asks the planner for the initial task flow graph. An unusable reply is
/// sent back with the reason, up to `retries` times.
pub fn decompose_task(
    task: &str,
    llm: &mut Llm<impl ChatBackend>,
    retries: u32,
) -> Result<TaskFlowGraph, OrchestratorError> {
    if task.trim().is_empty() {
        return Err(OrchestratorError::EmptyTask);
    }
    let prompt = format!(
        "Decompose the task below into subtasks that can each be solved and verified on their own.\n\
         Reply with one JSON object: {{\"nodes\": [{{\"id\": string, \"description\": string, \"depends_on\": [ids]}}], \
         \"edges\": [{{\"from\": id, \"to\": id, \"kind\": \"jump\", \"jump_condition\": string}}]}}.\n\
         Dependencies must form an acyclic graph. Use `edges` only for jump logic (returning to an earlier \
         subtask when a condition holds); it may be empty.\n\n## Task\n{task}"
    );
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = llm.chat(AssistantKind::Planner, task, &messages)?;
        match parse_decomposition(task, &reply) {
            Ok(g) => return Ok(g),
            Err(reason) => {
                if attempts > retries {
                    return Err(OrchestratorError::DecompositionInvalid { attempts, reason });
                }
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "That graph cannot be used: {reason}. Reply again with the corrected JSON object."
                )));
            }
        }
    }
}

/// The workflow used when the generator's reply is unusable: one
/// evolvable node running the routed assistant on the description.
pub fn fallback_workflow(subtask: &Subtask, routing: &RoutingTable) -> Workflow {
    let prompt = if subtask.description.trim().is_empty() { "Solve the subtask." } else { subtask.description.trim() };
    Workflow::single("solve", routing.route(&subtask.description), prompt)
}

/// Asks the generator for the subtask's first workflow. Never fails:
/// anything unusable, including a backend error, yields the fallback.
/// The returned flag is true when the fallback was used.
pub fn synthesize_initial_workflow(
    subtask: &Subtask,
    routing: &RoutingTable,
    llm: &mut Llm<impl ChatBackend>,
) -> (Workflow, bool) {
    let suggested = routing.route(&subtask.description);
    let prompt = format!(
        "Write a workflow that solves the subtask below.\n\n\
         Workflow format: `entry <id>`; `node <id> <assistant>` followed by the node's instruction prompt on \
         indented lines; `link <from> -> <to>` optionally followed by `if: <condition>` or `loop: <n>`. \
         Assistants: coder, reasoner, file_reader, planner, decomposer, estimator, judge, workflow_generator. \
         Wrap the nodes and links that later optimization may rewrite in `# REPLACE-START` / `# REPLACE-END`; \
         at least one node must be inside such a block.\n\
         Suggested main assistant: {suggested}.\n\n## Subtask ({})\n{}\n\n\
         Reply with the workflow source only.",
        subtask.id, subtask.description
    );
    let subject = format!("initial:{}", subtask.id);
    let reply = match llm.ask(AssistantKind::WorkflowGenerator, &subject, &prompt) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("workflow generator failed for `{}`: {e}", subtask.id);
            return (fallback_workflow(subtask, routing), true);
        }
    };
    match parse_workflow(extract_source(&reply)) {
        Ok(w) => (w, false),
        Err(e) => {
            log::info!("generated workflow for `{}` rejected: {e}", subtask.id);
            (fallback_workflow(subtask, routing), true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{BackendScript, ScriptRule, ScriptedBackend};

    fn planner(replies: &[&str]) -> Llm<ScriptedBackend> {
        let mut rule = ScriptRule::reply(replies[0]).kind(AssistantKind::Planner);
        for r in &replies[1..] {
            rule = rule.then(*r);
        }
        Llm::new(ScriptedBackend::new(BackendScript::with_default("x").rule(rule)))
    }

    const CHAIN: &str = r#"{"nodes":[{"id":"a","description":"read the spec"},{"id":"b","description":"write code","depends_on":["a"]},{"id":"c","description":"test it","depends_on":["b"]}]}"#;
    const CYCLE: &str = r#"{"nodes":[{"id":"a","description":"x","depends_on":["b"]},{"id":"b","description":"y","depends_on":["a"]}]}"#;

    #[test]
    fn chain_decomposes() {
        let mut l = planner(&[CHAIN]);
        let g = decompose_task("build it", &mut l, 1).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.task_input, "build it");
        assert_eq!(g.dependency_pairs().len(), 2);
    }

    #[test]
    fn cyclic_then_fixed_uses_the_fix() {
        let mut l = planner(&[CYCLE, CHAIN]);
        let g = decompose_task("build it", &mut l, 1).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(l.count(AssistantKind::Planner), 2);
        assert!(l.log()[1].excerpt.starts_with("That graph cannot be used"));
    }

    #[test]
    fn cyclic_twice_is_an_error() {
        let mut l = planner(&[CYCLE]);
        let err = decompose_task("build it", &mut l, 1).unwrap_err();
        assert!(matches!(err, OrchestratorError::DecompositionInvalid { attempts: 2, .. }));
    }

    #[test]
    fn empty_task_is_rejected_without_calls() {
        let mut l = planner(&[CHAIN]);
        assert_eq!(decompose_task("  ", &mut l, 1).unwrap_err(), OrchestratorError::EmptyTask);
        assert!(l.log().is_empty());
    }

    #[test]
    fn routing_table() {
        let t = RoutingTable::default();
        assert_eq!(t.route("Implement the parser"), AssistantKind::Coder);
        assert_eq!(t.route("write unit tests"), AssistantKind::Coder);
        assert_eq!(t.route("Read the datasheet"), AssistantKind::FileReader);
        assert_eq!(t.route("summarize the CSV files"), AssistantKind::FileReader);
        assert_eq!(t.route("prove the lemma"), AssistantKind::Reasoner);
        // first rule wins
        assert_eq!(t.route("read the file and write code"), AssistantKind::Coder);
    }

    #[test]
    fn synthesized_source_is_used() {
        let src = "entry s\n\n# REPLACE-START\nnode s reasoner\n    Think.\n# REPLACE-END\n";
        let script = BackendScript::with_default("x")
            .rule(ScriptRule::reply(format!("```\n{src}```")).kind(AssistantKind::WorkflowGenerator));
        let mut l = Llm::new(ScriptedBackend::new(script));
        let (w, fallback) = synthesize_initial_workflow(&Subtask::new("t", "prove it"), &RoutingTable::default(), &mut l);
        assert!(!fallback);
        assert_eq!(w.entry, "s");
    }

    #[test]
    fn garbage_falls_back_to_routed_single_node() {
        let script = BackendScript::with_default("garbage");
        let mut l = Llm::new(ScriptedBackend::new(script));
        let sub = Subtask::new("t", "implement a function");
        let (w, fallback) = synthesize_initial_workflow(&sub, &RoutingTable::default(), &mut l);
        assert!(fallback);
        assert_eq!(w, Workflow::single("solve", AssistantKind::Coder, "implement a function"));
        assert!(w.validate().is_empty());
    }

    #[test]
    fn frozen_only_source_falls_back() {
        let src = "entry s\n\nnode s reasoner\n    Think.\n";
        let script = BackendScript::with_default(src);
        let mut l = Llm::new(ScriptedBackend::new(script));
        let (_, fallback) = synthesize_initial_workflow(&Subtask::new("t", "x"), &RoutingTable::default(), &mut l);
        assert!(fallback);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig { rerun_limit: 0, ..Default::default() }.validate().is_err());
        let json = serde_json::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, RunConfig::default());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7, "backend": "live"}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.backend, BackendMode::Live);
    }
}
