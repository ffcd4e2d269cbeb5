use super::record::{Clock, EffectiveScores, EvolutionReport, PlannerDecision, RunRecord, RunStatus, Stage, SubtaskReport};
use super::{decompose_task, synthesize_initial_workflow, RunConfig};
use crate::evolution::{evolve, judge_output, judge_schema, EvalContext, Evaluation, EvolveError, EvaluationScores};
use crate::graph::{aggregate_final_answer, assemble_input, ExecutionState, GraphError, PlannerAction, SubtaskStatus};
use crate::graph_opt::v_cycle;
use crate::llm::{extract_json_object, AssistantKind, BackendError, ChatBackend, Llm, Schema, StructuredError};
use crate::prelude::*;
use crate::score_db::{Embedder, ScoreDb, ScoreDbError, SubtaskRecord};
use crate::workflow::{execute_workflow, serialize_workflow, ExecError, Workflow};

/// Aborts the run; carries the reason into the record.
struct Abort(String);

impl<E: core::fmt::Display> From<E> for Abort {
    fn from(e: E) -> Self {
        Abort(e.to_string())
    }
}

/// Backend failures no other subtask or retry can recover from.
fn fatal(e: &BackendError) -> bool {
    !e.is_retryable()
}

fn effective_schema() -> Schema {
    Schema::new().number("complexity", 0.0, 1.0).number("completeness", 0.0, 1.0).text("reflection")
}

struct CachedWorkflow {
    workflow: Workflow,
    initial_source: String,
    fallback: bool,
}

struct Runner<'a, B> {
    cfg: &'a RunConfig,
    db: &'a ScoreDb,
    embedder: &'a dyn Embedder,
    llm: &'a mut Llm<B>,
    clock: &'a mut dyn Clock,
    record: RunRecord,
    state: Option<ExecutionState>,
    workflows: BTreeMap<String, CachedWorkflow>,
}

/// Runs the whole pipeline for `task` and returns its record. Failures
/// never escape: they yield a record with status `failed`, the error and
/// everything traced up to that point.
pub fn run<B: ChatBackend>(
    run_id: &str,
    task: &str,
    cfg: &RunConfig,
    db: &ScoreDb,
    embedder: &dyn Embedder,
    llm: &mut Llm<B>,
    clock: &mut dyn Clock,
) -> RunRecord {
    let log_start = llm.log().len();
    let mut runner = Runner {
        cfg,
        db,
        embedder,
        llm,
        clock,
        record: RunRecord::new(run_id, task, cfg),
        state: None,
        workflows: BTreeMap::new(),
    };
    runner.record.mark(Stage::Started, runner.clock);
    if let Err(Abort(reason)) = runner.drive(task) {
        log::error!("run {run_id} failed: {reason}");
        runner.record.status = RunStatus::Failed;
        runner.record.error = Some(reason);
    }
    let Runner { mut record, state, llm, clock, .. } = runner;
    if let Some(state) = state {
        record.trace = state.trace().to_vec();
        record.final_graph = Some(state.graph().clone());
    }
    record.requests = llm.log()[log_start..].to_vec();
    record.mark(Stage::Finished, clock);
    record
}

impl<B: ChatBackend> Runner<'_, B> {
    fn drive(&mut self, task: &str) -> Result<(), Abort> {
        self.cfg.validate()?;
        let g0 = decompose_task(task, self.llm, self.cfg.decompose_retries)?;
        self.record.initial_graph = Some(g0.clone());
        self.record.mark(Stage::Decomposed, self.clock);

        let graph = if self.cfg.optimize_graph {
            match v_cycle(&g0, &self.cfg.vcycle, self.db, self.embedder, self.llm) {
                Ok(out) => {
                    self.record.levels = out.levels;
                    self.record.cold_start = out.cold_start;
                    out.graph
                }
                Err(e) => {
                    self.record.levels = e.levels.clone();
                    self.record.optimized_graph = Some(e.last_valid.clone());
                    return Err(Abort(format!("graph optimization: {e}")));
                }
            }
        } else {
            g0
        };
        self.record.optimized_graph = Some(graph.clone());
        self.record.mark(Stage::Optimized, self.clock);

        let nodes = graph.nodes.len() as u64;
        self.state = Some(ExecutionState::new(graph, self.cfg.limits())?);
        let guard = nodes * (u64::from(self.cfg.rerun_limit) + 1) * (u64::from(self.cfg.jump_budget) + 1);
        let mut executions = 0u64;
        loop {
            let state = self.state.as_mut().expect("state set above");
            if state.is_finished() {
                break;
            }
            let Some(id) = state.current().map(str::to_owned) else { break };
            if executions >= guard {
                return Err(Abort(format!("execution guard of {guard} node runs reached")));
            }
            executions += 1;
            if executions == 1 {
                self.record.mark(Stage::FirstExecution, self.clock);
            }
            state.begin_current()?;
            let report = self.execute_subtask(&id)?;
            let state = self.state.as_mut().expect("state set above");
            match (&report.result, &report.error) {
                (Some(r), None) => state.complete_current(r.clone())?,
                (_, err) => state.fail_current(err.clone().unwrap_or_default())?,
            }
            self.upsert(report);
            self.consult_planner(&id)?;
        }

        let state = self.state.as_mut().expect("state set above");
        if !state.is_finished() {
            state.apply(PlannerAction::Finalize)?;
        }
        let answer = aggregate_final_answer(state, self.llm)?;
        self.record.final_score = self.score_final_answer(&answer)?;
        self.record.final_answer = Some(answer);
        self.record.mark(Stage::Answered, self.clock);
        Ok(())
    }

    fn score_final_answer(&mut self, answer: &str) -> Result<Option<EvaluationScores>, Abort> {
        let state = self.state.as_ref().expect("state set");
        let prompt = format!(
            "Evaluate the final answer to the task below.\n\n## Task\n{}\n\n## Task flow graph status\n{}\n\
             ## Final answer\n{answer}\n\nScore instruction_following, correctness and plan_progress (how \
             completely the answer covers the task), each in [0, 1]. In reflections, say what is missing or wrong.",
            self.record.task_input,
            state.graph().summary()
        );
        match self.llm.ask_structured(AssistantKind::Judge, "final-answer", &prompt, &judge_schema(), self.cfg.score_retries) {
            Ok(out) => Ok(Some(EvaluationScores::new(
                &self.cfg.evolve.weights,
                out.number("instruction_following"),
                out.number("correctness"),
                out.number("plan_progress"),
                out.text("reflections"),
            ))),
            Err(StructuredError::Backend(e)) if fatal(&e) => Err(e.into()),
            Err(e) => {
                log::warn!("final answer left unscored: {e}");
                Ok(None)
            }
        }
    }

    fn upsert(&mut self, mut report: SubtaskReport) {
        match self.record.subtasks.iter_mut().find(|s| s.node_id == report.node_id) {
            Some(slot) => {
                report.executions = slot.executions + 1;
                *slot = report;
            }
            None => self.record.subtasks.push(report),
        }
    }

    /// Synthesizes (once per node), executes, judges and, when the score
    /// is below the trigger threshold, evolves the node's workflow.
    fn execute_subtask(&mut self, id: &str) -> Result<SubtaskReport, Abort> {
        let state = self.state.as_ref().expect("state set");
        let node = state.graph().node(id).expect("cursor node exists").clone();
        let input = match assemble_input(state.graph(), id, state.results()) {
            Ok(i) => i,
            Err(GraphError::MissingDependency { missing, .. }) => {
                let cached = self.workflows.get(id);
                return Ok(SubtaskReport {
                    node_id: id.to_owned(),
                    description: node.description,
                    executions: 1,
                    fallback_workflow: cached.is_some_and(|c| c.fallback),
                    initial_source: cached.map(|c| c.initial_source.clone()).unwrap_or_default(),
                    final_source: cached.map(|c| serialize_workflow(&c.workflow)).unwrap_or_default(),
                    initial_scores: None,
                    final_scores: None,
                    evolution: None,
                    effective: None,
                    result: None,
                    error: Some(format!("blocked: dependency `{missing}` has no result")),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let ctx = EvalContext::new(state, input);
        if !self.workflows.contains_key(id) {
            let (workflow, fallback) = synthesize_initial_workflow(&node, &self.cfg.routing, self.llm);
            let initial_source = serialize_workflow(&workflow);
            self.workflows.insert(id.to_owned(), CachedWorkflow { workflow, initial_source, fallback });
        }
        let cached = &self.workflows[id];
        let workflow = cached.workflow.clone();
        let mut report = SubtaskReport {
            node_id: id.to_owned(),
            description: node.description.clone(),
            executions: 1,
            fallback_workflow: cached.fallback,
            initial_source: cached.initial_source.clone(),
            final_source: serialize_workflow(&workflow),
            initial_scores: None,
            final_scores: None,
            evolution: None,
            effective: None,
            result: None,
            error: None,
        };
        let ev_cfg = self.cfg.evolve_for(id);

        let run = match execute_workflow(&workflow, &ctx.input, self.llm, self.cfg.step_budget) {
            Ok(r) => r,
            Err(ExecError::Backend { source, .. }) if fatal(&source) => return Err(source.into()),
            Err(e) => {
                report.error = Some(e.to_string());
                return Ok(report);
            }
        };
        let (scores, judge_attempts) =
            match judge_output(&ctx, &run.output, &ev_cfg.weights, self.llm, ev_cfg.judge_retries) {
                Ok(s) => s,
                Err(StructuredError::Backend(e)) if fatal(&e) => return Err(e.into()),
                Err(e) => {
                    report.error = Some(format!("judge: {e}"));
                    return Ok(report);
                }
            };
        report.initial_scores = Some(scores.clone());

        let (final_scores, output) = if self.cfg.evolve_enabled && scores.combined < ev_cfg.trigger_threshold {
            let initial = Evaluation { scores, run, judge_attempts };
            let out = evolve(&workflow, &initial, &ctx, &ev_cfg, self.llm).map_err(|e| match e {
                EvolveError::Backend(b) => Abort(format!("evolution of `{id}`: {b}")),
                EvolveError::Config(c) => Abort(format!("evolution of `{id}`: {c}")),
            })?;
            report.evolution = Some(EvolutionReport {
                iterations: out.history.len() as u32,
                reached_threshold: out.reached_threshold,
                all_invalid: out.all_invalid,
                best_candidate: out.best.id.clone(),
                generator_calls: out.generator_calls,
                judge_calls: out.judge_calls,
                history: out.history,
            });
            report.final_source = serialize_workflow(&out.best_workflow);
            self.workflows.get_mut(id).expect("cached above").workflow = out.best_workflow;
            (out.best.scores.expect("best candidate is scored"), out.best_output)
        } else {
            (scores, run.output)
        };

        report.effective = self.score_effective(&ctx, &output, &final_scores)?;
        report.final_scores = Some(final_scores);
        report.result = Some(output);
        Ok(report)
    }

    /// Judges tractability and completeness for write-back. A malformed
    /// reply only costs the record.
    fn score_effective(
        &mut self,
        ctx: &EvalContext,
        output: &str,
        scores: &EvaluationScores,
    ) -> Result<Option<EffectiveScores>, Abort> {
        let prompt = format!(
            "Score the finished subtask below for the historical score database, each in [0, 1].\n\
             complexity: how tractable the subtask is at its granularity; higher means it was executed well \
             without needing further decomposition.\n\
             completeness: how completely the response solves the subtask.\n\
             reflection: one or two sentences on what made it easy or hard.\n\n\
             ## Subtask ({})\n{}\n\n## Response\n{}\n\n## Judge reflections\n{}",
            ctx.input.subtask_id, ctx.input.description, output, scores.reflections
        );
        let subject = format!("effective:{}", ctx.input.subtask_id);
        match self.llm.ask_structured(AssistantKind::Judge, &subject, &prompt, &effective_schema(), self.cfg.score_retries) {
            Ok(out) => Ok(Some(EffectiveScores {
                complexity: out.number("complexity"),
                completeness: out.number("completeness"),
                reflection: out.text("reflection").to_owned(),
            })),
            Err(StructuredError::Backend(e)) if fatal(&e) => Err(e.into()),
            Err(e) => {
                log::warn!("no effective scores for `{}`: {e}", ctx.input.subtask_id);
                Ok(None)
            }
        }
    }

    /// Asks the planner what to do after `id`. Unusable or refused
    /// actions fall back to proceeding.
    fn consult_planner(&mut self, id: &str) -> Result<(), Abort> {
        let state = self.state.as_ref().expect("state set");
        let g = state.graph();
        let node = g.node(id).expect("node exists");
        let outcome = match (node.status, state.results().get(id)) {
            (SubtaskStatus::Done, Some(r)) => format!("completed with result:\n{r}"),
            _ => format!(
                "failed: {}",
                self.record.subtask(id).and_then(|s| s.error.clone()).unwrap_or_default()
            ),
        };
        let jumps: Vec<String> = g
            .jump_edges()
            .filter(|e| e.from == id)
            .map(|e| format!("- to {} if {}", e.to, e.jump_condition.as_deref().unwrap_or("")))
            .collect();
        let prompt = format!(
            "You monitor the execution of a task flow graph.\n\n## Task\n{}\n\n## Graph status\n{}\n\
             ## Subtask {} {}\n\n## Jump options from {}\n{}\n\n\
             Choose the next action. Reply with one JSON object: {{\"action\": \"proceed\"}}, \
             {{\"action\": \"rerun\", \"target\": id}}, {{\"action\": \"jump\", \"target\": id}} or \
             {{\"action\": \"finalize\"}}. Rerun at most {} times per subtask.",
            g.task_input,
            g.summary(),
            id,
            outcome,
            id,
            if jumps.is_empty() { "none".to_owned() } else { jumps.join("\n") },
            self.cfg.rerun_limit,
        );
        let subject = format!("monitor:{id}");
        let reply = match self.llm.ask(AssistantKind::Planner, &subject, &prompt) {
            Ok(r) => Some(r),
            Err(e) if fatal(&e) => return Err(e.into()),
            Err(e) => {
                log::warn!("planner unavailable after `{id}`: {e}");
                None
            }
        };
        let requested: Option<PlannerAction> =
            reply.as_deref().and_then(extract_json_object).and_then(|j| serde_json::from_str(j).ok());
        let state = self.state.as_mut().expect("state set");
        let decision = match requested.clone() {
            Some(action) => match state.apply(action.clone()) {
                Ok(()) => PlannerDecision { node: id.to_owned(), requested, applied: action, note: None },
                Err(e) => {
                    state.apply(PlannerAction::Proceed)?;
                    PlannerDecision {
                        node: id.to_owned(),
                        requested,
                        applied: PlannerAction::Proceed,
                        note: Some(format!("refused: {e}")),
                    }
                }
            },
            None => {
                state.apply(PlannerAction::Proceed)?;
                let note = if reply.is_some() { "unparseable planner reply" } else { "planner unavailable" };
                PlannerDecision { node: id.to_owned(), requested: None, applied: PlannerAction::Proceed, note: Some(note.into()) }
            }
        };
        self.record.planner.push(decision);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WriteBackReport {
    pub inserted: Vec<String>,
    pub duplicates: Vec<String>,
    /// Subtasks without effective scores or whose record was refused.
    pub skipped: Vec<String>,
}

/// Inserts one record per executed subtask of `record`, id
/// `"{run_id}:{node_id}"`, then reclusters. Re-applying the same record
/// changes nothing.
pub fn write_back_scores(record: &RunRecord, db: &mut ScoreDb, embedder: &dyn Embedder) -> WriteBackReport {
    let mut report = WriteBackReport::default();
    for s in record.subtasks.iter().filter(|s| s.executed()) {
        let id = format!("{}:{}", record.run_id, s.node_id);
        let Some(eff) = &s.effective else {
            report.skipped.push(id);
            continue;
        };
        let embedding = match embedder.embed(&s.description) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("cannot embed `{id}`: {e}");
                report.skipped.push(id);
                continue;
            }
        };
        let rec = SubtaskRecord::new(&id, &s.description, embedding, eff.complexity, eff.completeness, &eff.reflection);
        match db.insert(rec) {
            Ok(()) => report.inserted.push(id),
            Err(ScoreDbError::DuplicateId(_)) => report.duplicates.push(id),
            Err(e) => {
                log::warn!("record `{id}` refused: {e}");
                report.skipped.push(id);
            }
        }
    }
    if !report.inserted.is_empty() {
        if let Err(e) = db.recluster(db.threshold()) {
            log::warn!("recluster failed: {e}");
        }
    }
    report
}
