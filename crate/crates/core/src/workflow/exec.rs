use alloc::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{LinkKind, Workflow, WorkflowLink};
use crate::graph::SubtaskInput;
use crate::llm::{AssistantKind, BackendError, ChatBackend, Llm};
use crate::prelude::*;

pub const DEFAULT_STEP_BUDGET: u32 = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub node: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowResult {
    pub output: String,
    pub transcript: Vec<StepRecord>,
    pub steps_executed: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("workflow step budget of {budget} exhausted")]
    BudgetExhausted { budget: u32, partial: WorkflowResult },
    #[error("backend failure at node `{node}`: {source}")]
    Backend { node: String, source: BackendError },
}

fn affirmative(reply: &str) -> bool {
    let r = reply.trim_start().trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    r.starts_with("yes") || r.starts_with("true")
}

fn transcript_text(steps: &[StepRecord]) -> String {
    steps.iter().map(|s| format!("[{}] {}\n", s.node, s.response)).collect()
}

/// Runs `w` from its entry.
///
/// Nodes are queued first-in first-out and run at most once until a loop
/// re-arms them. After a node runs its loop links are considered first: a
/// loop with allowance left is taken when the backend says so, which
/// re-arms its target and everything reachable from it without crossing
/// another loop. Otherwise sequence links are followed and conditional
/// links are followed when the backend judges the condition true. The
/// output is the response of the last node that ran.
pub fn execute_workflow(
    w: &Workflow,
    input: &SubtaskInput,
    llm: &mut Llm<impl ChatBackend>,
    step_budget: u32,
) -> Result<WorkflowResult, ExecError> {
    let links = w.canonical().links;
    let mut loops_left: Vec<u32> = links
        .iter()
        .map(|l| match l.kind {
            LinkKind::Loop { max_repeats } => max_repeats,
            _ => 0,
        })
        .collect();
    let mut result = WorkflowResult::default();
    let mut latest: BTreeMap<&str, String> = BTreeMap::new();
    let mut done: BTreeSet<String> = BTreeSet::new();
    let mut queue: VecDeque<String> = VecDeque::from([w.entry.clone()]);
    let rendered = input.render();

    while let Some(id) = queue.pop_front() {
        if done.contains(&id) {
            continue;
        }
        let Some(node) = w.node(&id) else { continue };
        if result.steps_executed >= step_budget {
            return Err(ExecError::BudgetExhausted { budget: step_budget, partial: result });
        }
        let mut prompt = format!("{}\n\n{}", node.prompt, rendered);
        let feeding: Vec<&WorkflowLink> = links.iter().filter(|l| l.to == id && latest.contains_key(l.from.as_str())).collect();
        if !feeding.is_empty() {
            prompt.push_str("\n## Outputs of earlier workflow steps\n");
            let mut listed = BTreeSet::new();
            for l in feeding {
                if listed.insert(l.from.as_str()) {
                    prompt.push_str(&format!("### {}\n{}\n", l.from, latest[l.from.as_str()]));
                }
            }
        }
        let subject = format!("{}:{}", input.subtask_id, id);
        let response = llm
            .ask(node.assistant, &subject, &prompt)
            .map_err(|source| ExecError::Backend { node: id.clone(), source })?;
        result.steps_executed += 1;
        result.transcript.push(StepRecord { node: id.clone(), prompt, response: response.clone() });
        result.output = response.clone();
        latest.insert(node.id.as_str(), response);
        done.insert(id.clone());

        let mut looped = false;
        for (k, l) in links.iter().enumerate() {
            if l.from != id || !matches!(l.kind, LinkKind::Loop { .. }) || loops_left[k] == 0 {
                continue;
            }
            let question = format!(
                "Decide whether the workflow should repeat from step `{}` after step `{}`. Answer yes or no.\n\n## Subtask\n{}\n\n## Transcript so far\n{}",
                l.to, l.from, input.description, transcript_text(&result.transcript)
            );
            let reply = llm
                .ask(AssistantKind::Judge, &format!("loop {} -> {}", l.from, l.to), &question)
                .map_err(|source| ExecError::Backend { node: id.clone(), source })?;
            if affirmative(&reply) {
                loops_left[k] -= 1;
                for r in rearm_set(&links, &l.to) {
                    done.remove(&r);
                }
                queue.push_back(l.to.clone());
                looped = true;
                break;
            }
        }
        if looped {
            continue;
        }
        for l in links.iter().filter(|l| l.from == id) {
            match &l.kind {
                LinkKind::Sequence => queue.push_back(l.to.clone()),
                LinkKind::Conditional { condition } => {
                    let question = format!(
                        "Answer yes or no: {condition}\n\n## Subtask\n{}\n\n## Transcript so far\n{}",
                        input.description,
                        transcript_text(&result.transcript)
                    );
                    let reply = llm
                        .ask(AssistantKind::Judge, &format!("if: {condition}"), &question)
                        .map_err(|source| ExecError::Backend { node: id.clone(), source })?;
                    if affirmative(&reply) {
                        queue.push_back(l.to.clone());
                    }
                }
                LinkKind::Loop { .. } => {}
            }
        }
    }
    Ok(result)
}

/// `start` plus everything reachable from it over non-loop links.
fn rearm_set(links: &[WorkflowLink], start: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::from([start.to_owned()]);
    let mut stack = vec![start.to_owned()];
    while let Some(cur) = stack.pop() {
        for l in links.iter().filter(|l| l.from == cur && !matches!(l.kind, LinkKind::Loop { .. })) {
            if seen.insert(l.to.clone()) {
                stack.push(l.to.clone());
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{BackendScript, ScriptRule, ScriptedBackend};
    use crate::workflow::parse_workflow;
    use proptest::prelude::*;

    fn input() -> SubtaskInput {
        SubtaskInput { task_input: "task".into(), subtask_id: "s".into(), description: "do it".into(), predecessors: vec![] }
    }

    fn llm(script: BackendScript) -> Llm<ScriptedBackend> {
        Llm::new(ScriptedBackend::new(script))
    }

    #[test]
    fn two_node_sequence() {
        let w = parse_workflow("entry a\n# REPLACE-START\nnode a coder\n    A\nnode b coder\n    B\nlink a -> b\n# REPLACE-END\n").unwrap();
        let mut l = llm(BackendScript::with_default("?").rule(ScriptRule::reply("x").subject("s:a")).rule(ScriptRule::reply("y").subject("s:b")));
        let r = execute_workflow(&w, &input(), &mut l, DEFAULT_STEP_BUDGET).unwrap();
        assert_eq!(r.output, "y");
        assert_eq!(r.steps_executed, 2);
        assert_eq!(r.transcript.len(), 2);
        assert!(r.transcript[1].prompt.contains("### a\nx"));
    }

    #[test]
    fn always_loop_runs_node_three_times() {
        let w = parse_workflow("entry a\n# REPLACE-START\nnode a coder\n    A\nlink a -> a loop: 2\n# REPLACE-END\n");
        // a self-loop is fine in a workflow; only task graphs forbid them
        let w = w.unwrap();
        let mut l = llm(BackendScript::with_default("yes"));
        let r = execute_workflow(&w, &input(), &mut l, DEFAULT_STEP_BUDGET).unwrap();
        assert_eq!(r.steps_executed, 3);
        assert!(r.transcript.iter().all(|s| s.node == "a"));
    }

    #[test]
    fn loop_reruns_the_body() {
        let w = parse_workflow(
            "entry a\n# REPLACE-START\nnode a coder\n    A\nnode b reasoner\n    B\nnode c coder\n    C\n\
             link a -> b\nlink b -> a loop: 1\nlink b -> c\n# REPLACE-END\n",
        )
        .unwrap();
        let mut l = llm(BackendScript::with_default("yes"));
        let r = execute_workflow(&w, &input(), &mut l, DEFAULT_STEP_BUDGET).unwrap();
        let order: Vec<&str> = r.transcript.iter().map(|s| s.node.as_str()).collect();
        assert_eq!(order, ["a", "b", "a", "b", "c"]);
    }

    #[test]
    fn false_condition_skips_branch() {
        let w = parse_workflow(
            "entry a\n# REPLACE-START\nnode a coder\n    A\nnode b coder\n    B\nlink a -> b if: the draft needs fixing\n# REPLACE-END\n",
        )
        .unwrap();
        let mut l = llm(BackendScript::with_default("done").rule(ScriptRule::reply("no").kind(AssistantKind::Judge)));
        let r = execute_workflow(&w, &input(), &mut l, DEFAULT_STEP_BUDGET).unwrap();
        assert!(r.transcript.iter().all(|s| s.node != "b"));
        assert_eq!(l.backend().served(AssistantKind::Judge), 1);
        let mut l = llm(BackendScript::with_default("done").rule(ScriptRule::reply("Yes.").kind(AssistantKind::Judge)));
        assert_eq!(execute_workflow(&w, &input(), &mut l, DEFAULT_STEP_BUDGET).unwrap().steps_executed, 2);
    }

    #[test]
    fn budget_exhaustion_keeps_partial_transcript() {
        let w = parse_workflow("entry a\n# REPLACE-START\nnode a coder\n    A\nlink a -> a loop: 100\n# REPLACE-END\n").unwrap();
        let mut l = llm(BackendScript::with_default("yes"));
        match execute_workflow(&w, &input(), &mut l, 5) {
            Err(ExecError::BudgetExhausted { budget: 5, partial }) => assert_eq!(partial.steps_executed, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn backend_failure_names_node() {
        use crate::llm::{FaultKind, ScriptReply};
        let w = crate::workflow::tests::two_step();
        let fault = ScriptReply::Fault { fault: FaultKind::Auth, message: "bad key".into() };
        let mut l = llm(BackendScript::with_default("ok").rule(ScriptRule::reply(fault).subject("s:frame")));
        match execute_workflow(&w, &input(), &mut l, DEFAULT_STEP_BUDGET) {
            Err(ExecError::Backend { node, .. }) => assert_eq!(node, "frame"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn terminates_within_bound(repeats in proptest::collection::vec(1u32..4, 1..4), yes in any::<bool>(), budget in 1u32..60) {
            let mut src = String::from("entry n0\n# REPLACE-START\n");
            for i in 0..=repeats.len() {
                src.push_str(&format!("node n{i} coder\n    step {i}\n"));
            }
            for (i, r) in repeats.iter().enumerate() {
                src.push_str(&format!("link n{i} -> n{}\nlink n{} -> n{i} loop: {r}\n", i + 1, i + 1));
            }
            src.push_str("# REPLACE-END\n");
            let w = parse_workflow(&src).unwrap();
            let reply = if yes { "yes" } else { "no" };
            let run = |w: &Workflow| {
                let mut l = llm(BackendScript::with_default(reply));
                let r = execute_workflow(w, &input(), &mut l, budget);
                (r, l.into_backend().transcript().to_vec())
            };
            let (first, t1) = run(&w);
            let (second, t2) = run(&w);
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(t1, t2);
            let bound = (w.nodes.len() as u64 * (1 + w.loop_allowance())).min(u64::from(budget));
            match first {
                Ok(r) => {
                    prop_assert!(u64::from(r.steps_executed) <= bound);
                    prop_assert_eq!(r.steps_executed as usize, r.transcript.len());
                }
                Err(ExecError::BudgetExhausted { partial, .. }) => prop_assert_eq!(partial.steps_executed, budget),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
