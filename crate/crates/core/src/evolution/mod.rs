//! Reflection-guided evolutionary search over workflow sources.
//!
//! Candidates are judged on instruction following, correctness and plan
//! progress. A program database keeps them on islands and in a MAP-Elites
//! grid keyed by workflow shape. Each iteration samples a prompt context
//! from one island, asks the generator for a new source, and judges and
//! admits the result.

mod database;
mod search;

pub use database::{
    cell_of, AdmissionOutcome, Candidate, Cell, ContextEntry, ProgramDatabase, PromptContext, LENGTH_BUCKETS,
};
pub(crate) use search::extract_source;
pub use search::{evolve, propose, EvolveError, EvolveOutcome, HistoryEntry, HistoryOutcome, ProposeError, Proposal};

use serde::{Deserialize, Serialize};

use crate::graph::{ExecutionState, SubtaskInput};
use crate::llm::{AssistantKind, ChatBackend, Llm, Schema, StructuredError};
use crate::prelude::*;
use crate::workflow::{execute_workflow, ExecError, Workflow, WorkflowResult, DEFAULT_STEP_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub instruction_following: f64,
    pub correctness: f64,
    pub plan_progress: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { instruction_following: 0.25, correctness: 0.5, plan_progress: 0.25 }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), String> {
        let w = [self.instruction_following, self.correctness, self.plan_progress];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err("score weights must be finite and non-negative".into());
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(format!("score weights must sum to 1, got {}", w.iter().sum::<f64>()));
        }
        Ok(())
    }

    pub fn combine(&self, instruction_following: f64, correctness: f64, plan_progress: f64) -> f64 {
        self.instruction_following * instruction_following
            + self.correctness * correctness
            + self.plan_progress * plan_progress
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationScores {
    pub instruction_following: f64,
    pub correctness: f64,
    pub plan_progress: f64,
    pub combined: f64,
    #[serde(default)]
    pub reflections: String,
}

impl EvaluationScores {
    /// Clamps the components into `[0, 1]` and combines them.
    pub fn new(weights: &ScoreWeights, instruction_following: f64, correctness: f64, plan_progress: f64, reflections: impl Into<String>) -> Self {
        let (i, c, p) = (instruction_following.clamp(0.0, 1.0), correctness.clamp(0.0, 1.0), plan_progress.clamp(0.0, 1.0));
        Self {
            instruction_following: i,
            correctness: c,
            plan_progress: p,
            combined: weights.combine(i, c, p),
            reflections: reflections.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveConfig {
    pub max_iterations: u32,
    pub trigger_threshold: f64,
    pub islands: usize,
    pub migration_interval: u32,
    pub sample_size: usize,
    pub weights: ScoreWeights,
    pub propose_retries: u32,
    pub judge_retries: u32,
    pub step_budget: u32,
    pub seed: u64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            max_iterations: 15,
            trigger_threshold: 0.8,
            islands: 2,
            migration_interval: 5,
            sample_size: 3,
            weights: ScoreWeights::default(),
            propose_retries: 2,
            judge_retries: 2,
            step_budget: DEFAULT_STEP_BUDGET,
            seed: 0,
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.weights.validate()?;
        if !(self.trigger_threshold > 0.0 && self.trigger_threshold <= 1.0) {
            return Err(format!("trigger threshold {} is outside (0, 1]", self.trigger_threshold));
        }
        if self.max_iterations == 0 || self.islands == 0 || self.migration_interval == 0 || self.sample_size == 0 {
            return Err("iterations, islands, migration interval and sample size must be positive".into());
        }
        if self.step_budget == 0 {
            return Err("workflow step budget must be positive".into());
        }
        Ok(())
    }
}

/// Everything the judge sees besides the workflow output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalContext {
    pub input: SubtaskInput,
    pub graph_summary: String,
}

impl EvalContext {
    pub fn new(state: &ExecutionState, input: SubtaskInput) -> Self {
        Self { graph_summary: state.graph().summary(), input }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: EvaluationScores,
    pub run: WorkflowResult,
    /// Judge requests it took, including corrective re-prompts.
    pub judge_attempts: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("workflow execution: {0}")]
    Exec(#[from] ExecError),
    #[error("judge: {0}")]
    Judge(#[from] StructuredError),
}

pub(crate) fn judge_schema() -> Schema {
    Schema::new()
        .number("instruction_following", 0.0, 1.0)
        .number("correctness", 0.0, 1.0)
        .number("plan_progress", 0.0, 1.0)
        .text("reflections")
}

/// Judges one workflow output. Used directly by the orchestrator for
/// write-back scores as well as inside [`evaluate`].
pub fn judge_output(
    ctx: &EvalContext,
    output: &str,
    weights: &ScoreWeights,
    llm: &mut Llm<impl ChatBackend>,
    retries: u32,
) -> Result<(EvaluationScores, u32), StructuredError> {
    let prompt = format!(
        "Evaluate the response produced for one subtask of a larger task.\n\n\
         ## User instructions\n{}\n\n## Subtask ({})\n{}\n\n## Task flow graph status\n{}\n## Response\n{}\n\n\
         Score instruction_following (how well the response follows the instructions), correctness \
         (whether it is right and complete) and plan_progress (how well it advances the overall plan), \
         each in [0, 1]. In reflections, say concretely what the workflow should do differently.",
        ctx.input.task_input, ctx.input.subtask_id, ctx.input.description, ctx.graph_summary, output
    );
    let subject = format!("judge:{}", ctx.input.subtask_id);
    let out = llm.ask_structured(AssistantKind::Judge, &subject, &prompt, &judge_schema(), retries)?;
    let scores = EvaluationScores::new(
        weights,
        out.number("instruction_following"),
        out.number("correctness"),
        out.number("plan_progress"),
        out.text("reflections"),
    );
    Ok((scores, out.attempts))
}

/// Runs `w` on the subtask input and judges the output.
pub fn evaluate(
    w: &Workflow,
    ctx: &EvalContext,
    cfg: &EvolveConfig,
    llm: &mut Llm<impl ChatBackend>,
) -> Result<Evaluation, EvalError> {
    let run = execute_workflow(w, &ctx.input, llm, cfg.step_budget)?;
    let (scores, judge_attempts) = judge_output(ctx, &run.output, &cfg.weights, llm, cfg.judge_retries)?;
    Ok(Evaluation { scores, run, judge_attempts })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graph::{ExecutionLimits, TaskFlowGraph};
    use crate::llm::{BackendScript, ScriptRule, ScriptedBackend};
    use proptest::prelude::*;

    pub(crate) fn eval_ctx() -> EvalContext {
        let g = TaskFlowGraph::new("Write a sorting function").with_node("s", "implement sort");
        let state = ExecutionState::new(g, ExecutionLimits::default()).unwrap();
        let input = SubtaskInput {
            task_input: "Write a sorting function".into(),
            subtask_id: "s".into(),
            description: "implement sort".into(),
            predecessors: vec![],
        };
        EvalContext::new(&state, input)
    }

    fn judge(reply: &str) -> Llm<ScriptedBackend> {
        Llm::new(ScriptedBackend::new(
            BackendScript::with_default("draft").rule(ScriptRule::reply(reply).kind(AssistantKind::Judge)),
        ))
    }

    #[test]
    fn perfect_judge_gives_one() {
        let w = Workflow::single("solve", AssistantKind::Coder, "Solve.");
        let mut l = judge(r#"{"instruction_following":1,"correctness":1,"plan_progress":1,"reflections":""}"#);
        let e = evaluate(&w, &eval_ctx(), &EvolveConfig::default(), &mut l).unwrap();
        assert!((e.scores.combined - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_weights_arithmetic() {
        let w = Workflow::single("solve", AssistantKind::Coder, "Solve.");
        let mut l = judge(r#"{"instruction_following":0.8,"correctness":0.9,"plan_progress":1.0,"reflections":"fine"}"#);
        let e = evaluate(&w, &eval_ctx(), &EvolveConfig::default(), &mut l).unwrap();
        // 0.25*0.8 + 0.5*0.9 + 0.25*1.0
        assert!((e.scores.combined - 0.9).abs() < 1e-12);
        assert_eq!(e.scores.reflections, "fine");
        assert_eq!(e.run.output, "draft");
    }

    #[test]
    fn judge_retry_contract() {
        let w = Workflow::single("solve", AssistantKind::Coder, "Solve.");
        let rule = ScriptRule::reply("I think it is good")
            .then(r#"{"instruction_following": 0.5}"#)
            .then(r#"{"instruction_following":0.4,"correctness":0.6,"plan_progress":0.8}"#)
            .kind(AssistantKind::Judge);
        let mut l = Llm::new(ScriptedBackend::new(BackendScript::with_default("draft").rule(rule)));
        let e = evaluate(&w, &eval_ctx(), &EvolveConfig::default(), &mut l).unwrap();
        assert_eq!(e.judge_attempts, 3);
        assert!((e.scores.combined - (0.1 + 0.3 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn always_malformed_judge_fails_after_retries() {
        let w = Workflow::single("solve", AssistantKind::Coder, "Solve.");
        let mut l = judge("no json");
        let err = evaluate(&w, &eval_ctx(), &EvolveConfig::default(), &mut l).unwrap_err();
        assert!(matches!(err, EvalError::Judge(StructuredError::Malformed { attempts: 3, .. })));
    }

    #[test]
    fn config_validation() {
        assert!(EvolveConfig::default().validate().is_ok());
        let bad = EvolveConfig { weights: ScoreWeights { instruction_following: 0.5, correctness: 0.5, plan_progress: 0.5 }, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(EvolveConfig { trigger_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(EvolveConfig { trigger_threshold: 1.0, ..Default::default() }.validate().is_ok());
    }

    proptest! {
        #[test]
        fn combined_is_weighted_sum(i in 0.0f64..=1.0, c in 0.0f64..=1.0, p in 0.0f64..=1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let w = ScoreWeights { instruction_following: lo, correctness: hi - lo, plan_progress: 1.0 - hi };
            let s = EvaluationScores::new(&w, i, c, p, "");
            prop_assert!((s.combined - (lo * i + (hi - lo) * c + (1.0 - hi) * p)).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s.combined));
        }
    }
}
