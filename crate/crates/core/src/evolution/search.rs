use serde::{Deserialize, Serialize};

use super::database::{cell_of, AdmissionOutcome, Candidate, Cell, ProgramDatabase, PromptContext};
use super::{evaluate, EvalContext, EvalError, Evaluation, EvaluationScores, EvolveConfig};
use crate::llm::{AssistantKind, BackendError, ChatBackend, ChatMessage, Llm, StructuredError};
use crate::prelude::*;
use crate::workflow::{check_frozen, parse_workflow, serialize_workflow, Workflow, REPLACE_END, REPLACE_START};

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub workflow: Workflow,
    /// Canonical source of `workflow`.
    pub source: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProposeError {
    #[error("generator: {0}")]
    Backend(#[from] BackendError),
    #[error("invalid proposal after {attempts} attempts: {reason}")]
    Invalid { attempts: u32, reason: String },
}

/// Workflow text from a reply. A fenced block wins over the bare reply.
pub(crate) fn extract_source(reply: &str) -> &str {
    let Some(open) = reply.find("```") else { return reply };
    let after = &reply[open + 3..];
    let body = after.find('\n').map_or(after, |k| &after[k + 1..]);
    body.find("```").map_or(body, |k| &body[..k])
}

fn generator_prompt(ctx: &PromptContext, reference: &Workflow) -> String {
    let mut p = format!(
        "Write an improved workflow for the problem below.\n\n\
         Workflow format: `entry <id>`; `node <id> <assistant>` followed by the node's instruction prompt on \
         indented lines; `link <from> -> <to>` optionally followed by `if: <condition>` or `loop: <n>`. \
         Assistants: coder, reasoner, file_reader, planner, decomposer, estimator, judge, workflow_generator.\n\
         Only lines between `{REPLACE_START}` and `{REPLACE_END}` may change. Every other line must be \
         reproduced exactly. Use the scores and reflections of earlier workflows as guidance.\n\
         Reply with the complete workflow source and nothing else.\n\n"
    );
    p.push_str(&ctx.render());
    if ctx.entries.is_empty() {
        p.push_str("\n## Current workflow\n```\n");
        p.push_str(&serialize_workflow(reference));
        p.push_str("```\n");
    }
    p
}

/// Asks the generator for a new workflow. A reply that does not parse or
/// changes a frozen line of `reference` is sent back with the reason, up
/// to `retries` times.
pub fn propose(
    ctx: &PromptContext,
    reference: &Workflow,
    subject: &str,
    llm: &mut Llm<impl ChatBackend>,
    retries: u32,
) -> Result<Proposal, ProposeError> {
    let mut messages = vec![ChatMessage::user(generator_prompt(ctx, reference))];
    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = llm.chat(AssistantKind::WorkflowGenerator, subject, &messages)?;
        let checked = parse_workflow(extract_source(&reply))
            .map_err(|e| e.to_string())
            .and_then(|w| check_frozen(reference, &w).map(|_| w).map_err(|e| e.to_string()));
        match checked {
            Ok(workflow) => {
                let source = serialize_workflow(&workflow);
                return Ok(Proposal { workflow, source, attempts });
            }
            Err(reason) => {
                if attempts > retries {
                    return Err(ProposeError::Invalid { attempts, reason });
                }
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "That workflow was rejected: {reason}. Reply again with the complete corrected workflow source."
                )));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum HistoryOutcome {
    NewCell,
    Displaced { incumbent: String },
    RejectedByCell,
    InvalidProposal { reason: String },
}

impl From<AdmissionOutcome> for HistoryOutcome {
    fn from(o: AdmissionOutcome) -> Self {
        match o {
            AdmissionOutcome::NewCell => Self::NewCell,
            AdmissionOutcome::Displaced { incumbent } => Self::Displaced { incumbent },
            AdmissionOutcome::RejectedByCell => Self::RejectedByCell,
        }
    }
}

/// One evolution iteration; serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u32,
    pub island: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<EvaluationScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(flatten)]
    pub outcome: HistoryOutcome,
    pub proposal_attempts: u32,
    pub judge_attempts: u32,
    /// Best combined score in the database after this iteration.
    pub best_combined: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub migrated: Vec<String>,
}

impl HistoryEntry {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOutcome {
    pub best: Candidate,
    pub best_workflow: Workflow,
    pub best_output: String,
    pub history: Vec<HistoryEntry>,
    pub database: ProgramDatabase,
    pub reached_threshold: bool,
    /// Every proposal was rejected; `best` is the initial workflow.
    pub all_invalid: bool,
    pub generator_calls: u32,
    pub judge_calls: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvolveError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("backend failure: {0}")]
    Backend(BackendError),
}

/// Failures that no retry or other candidate can fix.
fn fatal(e: &BackendError) -> bool {
    !e.is_retryable()
}

/// Evolves `initial`, whose evaluation the caller already ran.
///
/// Island 0 is seeded with the initial candidate. Iteration `k` works on
/// island `(k - 1) % islands`; every `migration_interval` iterations the
/// islands exchange their bests. The search stops at the first candidate
/// reaching the trigger threshold or after `max_iterations`.
pub fn evolve(
    initial: &Workflow,
    initial_eval: &Evaluation,
    ctx: &EvalContext,
    cfg: &EvolveConfig,
    llm: &mut Llm<impl ChatBackend>,
) -> Result<EvolveOutcome, EvolveError> {
    cfg.validate().map_err(EvolveError::Config)?;
    let mut db = ProgramDatabase::new(cfg.islands, cfg.seed);
    let mut outputs: BTreeMap<String, String> = BTreeMap::new();
    let mut workflows: BTreeMap<String, Workflow> = BTreeMap::new();
    let seed_id = db.fresh_id();
    db.admit(Candidate {
        id: seed_id.clone(),
        source: serialize_workflow(initial),
        scores: Some(initial_eval.scores.clone()),
        error: None,
        parent_id: None,
        generation: 0,
        island: 0,
        cell: Some(cell_of(initial)),
        order: 0,
    });
    outputs.insert(seed_id.clone(), initial_eval.run.output.clone());
    workflows.insert(seed_id.clone(), initial.clone());

    let subject = format!("evolve:{}", ctx.input.subtask_id);
    let problem = format!(
        "Task: {}\nSubtask ({}): {}",
        ctx.input.task_input, ctx.input.subtask_id, ctx.input.description
    );
    let mut history = Vec::new();
    let mut generator_calls = 0;
    let mut judge_calls = 0;
    let mut reached = false;
    let mut any_valid = false;

    for iteration in 1..=cfg.max_iterations {
        let island = (iteration as usize - 1) % cfg.islands;
        let context = db.sample_context(island, cfg.sample_size, &problem);
        let (parent_id, reference) = match context.best() {
            Some(e) => (e.id.clone(), workflows[&e.id].clone()),
            None => (seed_id.clone(), initial.clone()),
        };
        let parent_generation = db.get(&parent_id).map_or(0, |c| c.generation);

        let proposal = match propose(&context, &reference, &subject, llm, cfg.propose_retries) {
            Ok(p) => {
                generator_calls += p.attempts;
                p
            }
            Err(ProposeError::Invalid { attempts, reason }) => {
                generator_calls += attempts;
                log::info!("iteration {iteration}: proposal rejected: {reason}");
                let mut entry = HistoryEntry {
                    iteration,
                    island,
                    candidate_id: None,
                    parent_id: Some(parent_id),
                    cell: None,
                    scores: None,
                    error: None,
                    outcome: HistoryOutcome::InvalidProposal { reason },
                    proposal_attempts: attempts,
                    judge_attempts: 0,
                    best_combined: 0.0,
                    migrated: Vec::new(),
                };
                migrate_if_due(&mut db, cfg, iteration, &mut entry, &mut outputs, &mut workflows);
                entry.best_combined = db.best().and_then(Candidate::combined).unwrap_or(0.0);
                history.push(entry);
                continue;
            }
            Err(ProposeError::Backend(e)) => {
                generator_calls += 1;
                if fatal(&e) {
                    return Err(EvolveError::Backend(e));
                }
                log::warn!("iteration {iteration}: generator unavailable: {e}");
                let mut entry = HistoryEntry {
                    iteration,
                    island,
                    candidate_id: None,
                    parent_id: Some(parent_id),
                    cell: None,
                    scores: None,
                    error: Some(e.to_string()),
                    outcome: HistoryOutcome::InvalidProposal { reason: e.to_string() },
                    proposal_attempts: 1,
                    judge_attempts: 0,
                    best_combined: 0.0,
                    migrated: Vec::new(),
                };
                migrate_if_due(&mut db, cfg, iteration, &mut entry, &mut outputs, &mut workflows);
                entry.best_combined = db.best().and_then(Candidate::combined).unwrap_or(0.0);
                history.push(entry);
                continue;
            }
        };
        any_valid = true;

        let id = db.fresh_id();
        let cell = cell_of(&proposal.workflow);
        let (scores, error, judge_attempts) = match evaluate(&proposal.workflow, ctx, cfg, llm) {
            Ok(ev) => {
                outputs.insert(id.clone(), ev.run.output.clone());
                (Some(ev.scores), None, ev.judge_attempts)
            }
            Err(EvalError::Judge(StructuredError::Backend(e))) | Err(EvalError::Exec(crate::workflow::ExecError::Backend { source: e, .. }))
                if fatal(&e) =>
            {
                return Err(EvolveError::Backend(e));
            }
            Err(e) => {
                let attempts = match &e {
                    EvalError::Judge(StructuredError::Malformed { attempts, .. }) => *attempts,
                    EvalError::Judge(_) => 1,
                    EvalError::Exec(_) => 0,
                };
                (None, Some(e.to_string()), attempts)
            }
        };
        judge_calls += judge_attempts;
        workflows.insert(id.clone(), proposal.workflow);
        let candidate = Candidate {
            id: id.clone(),
            source: proposal.source,
            scores: scores.clone(),
            error: error.clone(),
            parent_id: Some(parent_id.clone()),
            generation: parent_generation + 1,
            island,
            cell: Some(cell),
            order: 0,
        };
        let outcome = db.admit(candidate);
        let hit = scores.as_ref().is_some_and(|s| s.combined >= cfg.trigger_threshold);
        let mut entry = HistoryEntry {
            iteration,
            island,
            candidate_id: Some(id),
            parent_id: Some(parent_id),
            cell: Some(cell),
            scores,
            error,
            outcome: outcome.into(),
            proposal_attempts: proposal.attempts,
            judge_attempts,
            best_combined: 0.0,
            migrated: Vec::new(),
        };
        if !hit {
            migrate_if_due(&mut db, cfg, iteration, &mut entry, &mut outputs, &mut workflows);
        }
        entry.best_combined = db.best().and_then(Candidate::combined).unwrap_or(0.0);
        history.push(entry);
        if hit {
            reached = true;
            break;
        }
    }

    let best = db.best().cloned().expect("seed candidate is scored");
    Ok(EvolveOutcome {
        best_workflow: workflows[&best.id].clone(),
        best_output: outputs.get(&best.id).cloned().unwrap_or_default(),
        best,
        history,
        database: db,
        reached_threshold: reached,
        all_invalid: !any_valid,
        generator_calls,
        judge_calls,
    })
}

fn migrate_if_due(
    db: &mut ProgramDatabase,
    cfg: &EvolveConfig,
    iteration: u32,
    entry: &mut HistoryEntry,
    outputs: &mut BTreeMap<String, String>,
    workflows: &mut BTreeMap<String, Workflow>,
) {
    if !iteration.is_multiple_of(cfg.migration_interval) || db.island_count() < 2 {
        return;
    }
    for copy in db.migrate() {
        let parent = db.get(&copy).and_then(|c| c.parent_id.clone()).expect("copies record their origin");
        if let Some(o) = outputs.get(&parent).cloned() {
            outputs.insert(copy.clone(), o);
        }
        let w = workflows[&parent].clone();
        workflows.insert(copy.clone(), w);
        entry.migrated.push(copy);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::tests::eval_ctx;
    use crate::llm::{BackendScript, FaultKind, ScriptReply, ScriptRule, ScriptedBackend};
    use crate::workflow::WorkflowResult;

    const BASE: &str = "entry frame\n\nnode frame reasoner\n    Restate the goal.\n# REPLACE-START\nnode solve coder\n    Solve it.\n# REPLACE-END\n\nlink frame -> solve\n";

    fn base() -> Workflow {
        parse_workflow(BASE).unwrap()
    }

    /// The evolvable prompt replaced by `marker`.
    fn variant(marker: &str) -> String {
        BASE.replace("Solve it.", marker)
    }

    fn initial_eval(combined: f64) -> Evaluation {
        let w = crate::evolution::ScoreWeights { instruction_following: 0.0, correctness: 1.0, plan_progress: 0.0 };
        Evaluation {
            scores: EvaluationScores::new(&w, 0.0, combined, 0.0, "too terse"),
            run: WorkflowResult { output: "initial output".into(), transcript: vec![], steps_executed: 1 },
            judge_attempts: 1,
        }
    }

    fn judged(reply_for: &[(&str, f64)]) -> BackendScript {
        // coder echoes the marker of its prompt; judge scores by marker
        let mut script = BackendScript::with_default("ok");
        for (marker, score) in reply_for {
            script = script
                .rule(ScriptRule::reply(format!("out-{marker}")).kind(AssistantKind::Coder).containing(*marker))
                .rule(
                    ScriptRule::reply(format!(
                        r#"{{"instruction_following":{score},"correctness":{score},"plan_progress":{score},"reflections":"r-{marker}"}}"#
                    ))
                    .kind(AssistantKind::Judge)
                    .containing(format!("out-{marker}")),
                );
        }
        script
    }

    fn generator(script: BackendScript, replies: &[String]) -> BackendScript {
        let mut rule = ScriptRule::reply(replies[0].clone()).kind(AssistantKind::WorkflowGenerator);
        for r in &replies[1..] {
            rule = rule.then(r.clone());
        }
        script.rule(rule)
    }

    #[test]
    fn extract_source_handles_fences() {
        assert_eq!(extract_source("entry a\n"), "entry a\n");
        assert_eq!(extract_source("Here:\n```text\nentry a\n```\nthanks"), "entry a\n");
    }

    #[test]
    fn valid_echo_is_accepted() {
        let ctx = PromptContext { problem: "p".into(), island: 0, entries: vec![] };
        let script = generator(BackendScript::with_default("x"), &[variant("Solve it carefully.")]);
        let mut l = Llm::new(ScriptedBackend::new(script));
        let p = propose(&ctx, &base(), "s", &mut l, 2).unwrap();
        assert_eq!(p.attempts, 1);
        assert!(p.source.contains("Solve it carefully."));
    }

    #[test]
    fn frozen_edit_is_rejected() {
        let ctx = PromptContext { problem: "p".into(), island: 0, entries: vec![] };
        let bad = BASE.replace("Restate the goal.", "Ignore the goal.");
        let script = generator(BackendScript::with_default("x"), &[bad]);
        let mut l = Llm::new(ScriptedBackend::new(script));
        match propose(&ctx, &base(), "s", &mut l, 2) {
            Err(ProposeError::Invalid { attempts: 3, reason }) => assert!(reason.contains("frozen")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unparseable_twice_then_valid() {
        let ctx = PromptContext { problem: "p".into(), island: 0, entries: vec![] };
        let script = generator(BackendScript::with_default("x"), &["garbage".into(), "node".into(), variant("v3")]);
        let mut l = Llm::new(ScriptedBackend::new(script));
        let p = propose(&ctx, &base(), "s", &mut l, 2).unwrap();
        assert_eq!(p.attempts, 3);
        assert!(l.log()[1].excerpt.starts_with("That workflow was rejected"));
    }

    #[test]
    fn stops_at_first_candidate_over_threshold() {
        let script = generator(
            judged(&[("m1", 0.3), ("m2", 0.5), ("m3", 0.95), ("m4", 1.0)]),
            &[variant("m1"), variant("m2"), variant("m3"), variant("m4")],
        );
        let mut l = Llm::new(ScriptedBackend::new(script));
        let out = evolve(&base(), &initial_eval(0.4), &eval_ctx(), &EvolveConfig::default(), &mut l).unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(out.reached_threshold);
        assert!((out.best.combined().unwrap() - 0.95).abs() < 1e-9);
        assert_eq!(out.best_output, "out-m3");
        assert!(out.best.source.contains("m3"));
        let best: Vec<f64> = out.history.iter().map(|h| h.best_combined).collect();
        assert!(best.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn never_better_keeps_initial_and_runs_full_budget() {
        let markers: Vec<String> = (0..15).map(|k| format!("k{k:02}")).collect();
        let table: Vec<(&str, f64)> = markers.iter().map(|m| (m.as_str(), 0.1)).collect();
        let sources: Vec<String> = markers.iter().map(|m| variant(m)).collect();
        let script = generator(judged(&table), &sources);
        let mut l = Llm::new(ScriptedBackend::new(script));
        let out = evolve(&base(), &initial_eval(0.4), &eval_ctx(), &EvolveConfig::default(), &mut l).unwrap();
        assert_eq!(out.history.len(), 15);
        assert_eq!(out.best.id, "c000");
        assert_eq!(out.best_output, "initial output");
        assert!(!out.reached_threshold && !out.all_invalid);
        // migrations at 5, 10 and 15
        assert_eq!(out.history.iter().filter(|h| !h.migrated.is_empty()).count(), 3);
        assert!(out.generator_calls <= 15 * 3 && out.judge_calls <= 15 * 3);
    }

    #[test]
    fn all_invalid_returns_initial_flagged() {
        let script = generator(BackendScript::with_default("x"), &["nonsense".into()]);
        let mut l = Llm::new(ScriptedBackend::new(script));
        let out = evolve(&base(), &initial_eval(0.4), &eval_ctx(), &EvolveConfig::default(), &mut l).unwrap();
        assert!(out.all_invalid);
        assert_eq!(out.best.id, "c000");
        assert_eq!(out.history.len(), 15);
        assert_eq!(out.generator_calls, 45);
        assert_eq!(l.count(AssistantKind::WorkflowGenerator), 45);
    }

    #[test]
    fn failed_evaluation_is_recorded() {
        let script = generator(BackendScript::with_default("x"), &[variant("m1")])
            .rule(ScriptRule::reply("not json").kind(AssistantKind::Judge));
        let mut l = Llm::new(ScriptedBackend::new(script));
        let cfg = EvolveConfig { max_iterations: 2, ..Default::default() };
        let out = evolve(&base(), &initial_eval(0.4), &eval_ctx(), &cfg, &mut l).unwrap();
        let h = &out.history[0];
        assert!(h.scores.is_none() && h.error.is_some());
        assert_eq!(h.outcome, HistoryOutcome::RejectedByCell);
        assert_eq!(h.judge_attempts, 3);
        // the failure shows up in the next context of the same island
        // (iteration 2 uses island 1, which is empty, so check the db)
        assert!(out.database.get("c001").unwrap().error.is_some());
    }

    #[test]
    fn auth_failure_aborts() {
        let fault = ScriptReply::Fault { fault: FaultKind::Auth, message: "no key".into() };
        let script = BackendScript::with_default("x").rule(ScriptRule::reply(fault).kind(AssistantKind::WorkflowGenerator));
        let mut l = Llm::new(ScriptedBackend::new(script));
        let err = evolve(&base(), &initial_eval(0.4), &eval_ctx(), &EvolveConfig::default(), &mut l).unwrap_err();
        assert!(matches!(err, EvolveError::Backend(BackendError::Auth(_))));
    }

    #[test]
    fn seeded_reruns_are_identical() {
        let run = || {
            let script = generator(
                judged(&[("m1", 0.3), ("m2", 0.5), ("m3", 0.6), ("m4", 0.7)]),
                &[variant("m1"), variant("m2"), variant("m3"), variant("m4")],
            );
            let mut l = Llm::new(ScriptedBackend::new(script));
            let cfg = EvolveConfig { seed: 42, ..Default::default() };
            let out = evolve(&base(), &initial_eval(0.4), &eval_ctx(), &cfg, &mut l).unwrap();
            let lines: Vec<String> = out.history.iter().map(HistoryEntry::to_json_line).collect();
            (lines, l.into_backend().transcript().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn history_lines_round_trip() {
        let script = generator(judged(&[("m1", 0.3)]), &[variant("m1"), "bad".into()]);
        let mut l = Llm::new(ScriptedBackend::new(script));
        let cfg = EvolveConfig { max_iterations: 3, ..Default::default() };
        let out = evolve(&base(), &initial_eval(0.4), &eval_ctx(), &cfg, &mut l).unwrap();
        for h in &out.history {
            let back: HistoryEntry = serde_json::from_str(&h.to_json_line()).unwrap();
            assert_eq!(&back, h);
        }
    }
}
