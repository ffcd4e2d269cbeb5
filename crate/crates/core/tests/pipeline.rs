use polymath_core::llm::{AssistantKind, BackendScript, Llm, ScriptRule, ScriptedBackend};
use polymath_core::orchestrator::{run, write_back_scores, FixedClock, RunConfig, RunStatus};
use polymath_core::score_db::{HashEmbedder, ScoreDb};

const GRAPH: &str = r#"{"nodes": [
  {"id": "read", "description": "read the input file"},
  {"id": "sum", "description": "implement a function that sums the values", "depends_on": ["read"]}
]}"#;

fn script() -> BackendScript {
    BackendScript::with_default("done")
        .rule(ScriptRule::reply(GRAPH).kind(AssistantKind::Planner).containing("Decompose the task"))
        .rule(ScriptRule::reply("The sum is 42.").kind(AssistantKind::Planner).containing("Produce the final answer"))
        .rule(ScriptRule::reply(r#"{"action": "proceed"}"#).kind(AssistantKind::Planner))
        .rule(
            ScriptRule::reply(r#"{"instruction_following":0.9,"correctness":0.9,"plan_progress":0.9,"reflections":"fine"}"#)
                .kind(AssistantKind::Judge)
                .subject_containing("judge:"),
        )
        .rule(
            ScriptRule::reply(r#"{"instruction_following":1,"correctness":0.6,"plan_progress":0.8,"reflections":"no units"}"#)
                .kind(AssistantKind::Judge)
                .subject("final-answer"),
        )
        .rule(
            ScriptRule::reply(r#"{"complexity":0.7,"completeness":0.9,"reflection":"clean split"}"#)
                .kind(AssistantKind::Judge)
                .subject_containing("effective:"),
        )
        .rule(ScriptRule::reply(r#"{"d": 0.9, "c": 0.9}"#).kind(AssistantKind::Estimator).subject_containing("\n---\n"))
        .rule(ScriptRule::reply(r#"{"d": 0.6, "c": 0.6}"#).kind(AssistantKind::Estimator))
        .rule(ScriptRule::reply(r#"{"nodes": []}"#).kind(AssistantKind::Decomposer))
}

#[test]
fn cold_run_then_warm_run() {
    let cfg = RunConfig { embedding_dimension: 64, ..RunConfig::default() };
    let emb = HashEmbedder::new(64);
    let mut db = ScoreDb::new(64);

    let mut llm = Llm::new(ScriptedBackend::new(script()));
    let first = run("first", "Sum the numbers in data.csv", &cfg, &db, &emb, &mut llm, &mut FixedClock(0));
    assert_eq!(first.status, RunStatus::Completed, "{:?}", first.error);
    assert!(first.cold_start);
    assert_eq!(first.final_answer.as_deref(), Some("The sum is 42."));
    assert_eq!(first.subtasks.len(), 2);
    let graded = first.final_score.as_ref().unwrap();
    assert!((graded.combined - 0.75).abs() < 1e-12);
    assert_eq!(graded.reflections, "no units");

    let report = write_back_scores(&first, &mut db, &emb);
    assert_eq!(report.inserted.len(), 2);
    assert!(db.get("first:read").is_some());

    let mut llm = Llm::new(ScriptedBackend::new(script()));
    let second = run("second", "Sum the numbers in data.csv", &cfg, &db, &emb, &mut llm, &mut FixedClock(0));
    assert_eq!(second.status, RunStatus::Completed, "{:?}", second.error);
    assert!(!second.cold_start);
    // the merged pair scores 0.81 against 0.36 apiece, so the chain collapses
    let g = second.optimized_graph.as_ref().unwrap();
    assert_eq!(g.node_ids().collect::<Vec<_>>(), ["read+sum"]);
    assert_eq!(second.subtasks.len(), 1);
}
