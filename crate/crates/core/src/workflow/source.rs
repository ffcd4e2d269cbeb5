use core::str::FromStr;

use super::{LinkKind, Workflow, WorkflowError, WorkflowLink, WorkflowNode};
use crate::llm::AssistantKind;
use crate::prelude::*;

pub const REPLACE_START: &str = "# REPLACE-START";
pub const REPLACE_END: &str = "# REPLACE-END";
const INDENT: &str = "    ";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

fn err(line: usize, column: usize, message: impl Into<String>) -> ParseError {
    ParseError { line, column, message: message.into() }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// 1-based column of `part`, which must be a subslice of `line`.
fn column_of(line: &str, part: &str) -> usize {
    (part.as_ptr() as usize).saturating_sub(line.as_ptr() as usize) + 1
}

/// Parses workflow source and validates the result.
pub fn parse_workflow(text: &str) -> Result<Workflow, WorkflowError> {
    let mut nodes: Vec<WorkflowNode> = Vec::new();
    let mut prompts: Vec<Vec<String>> = Vec::new();
    let mut links = Vec::new();
    let mut entry: Option<String> = None;
    let mut block_start: Option<usize> = None;
    let mut open_node: Option<usize> = None;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed == REPLACE_START {
            if let Some(start) = block_start {
                return Err(err(lineno, 1, format!("replace block opened at line {start} is still open")).into());
            }
            block_start = Some(lineno);
            open_node = None;
            continue;
        }
        if trimmed == REPLACE_END {
            if block_start.take().is_none() {
                return Err(err(lineno, 1, "replace block end without a start").into());
            }
            open_node = None;
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        if line.starts_with(char::is_whitespace) {
            match open_node {
                Some(k) => {
                    prompts[k].push(trimmed.to_owned());
                    continue;
                }
                None => return Err(err(lineno, column_of(line, trimmed), "indented line outside a node prompt").into()),
            }
        }
        open_node = None;
        if trimmed.starts_with('#') {
            continue;
        }
        let evolvable = block_start.is_some();
        let mut words = trimmed.split_whitespace();
        let keyword = words.next().unwrap_or_default();
        match keyword {
            "node" => {
                let id = words.next().ok_or_else(|| err(lineno, line.len() + 1, "expected a node id"))?;
                if !valid_id(id) {
                    return Err(err(lineno, column_of(line, id), format!("invalid node id `{id}`")).into());
                }
                let kind = words.next().ok_or_else(|| err(lineno, line.len() + 1, "expected an assistant kind"))?;
                let assistant = AssistantKind::from_str(kind)
                    .map_err(|e| err(lineno, column_of(line, kind), e.to_string()))?;
                if let Some(extra) = words.next() {
                    return Err(err(lineno, column_of(line, extra), "unexpected text after the assistant kind").into());
                }
                nodes.push(WorkflowNode { id: id.to_owned(), assistant, prompt: String::new(), evolvable });
                prompts.push(Vec::new());
                open_node = Some(nodes.len() - 1);
            }
            "link" => links.push(parse_link(line, lineno, trimmed[4..].trim_start(), evolvable)?),
            "entry" => {
                let id = words.next().ok_or_else(|| err(lineno, line.len() + 1, "expected an entry id"))?;
                if let Some(extra) = words.next() {
                    return Err(err(lineno, column_of(line, extra), "unexpected text after the entry id").into());
                }
                if entry.is_some() {
                    return Err(err(lineno, 1, "entry declared twice").into());
                }
                entry = Some(id.to_owned());
            }
            other => return Err(err(lineno, column_of(line, other), format!("unknown directive `{other}`")).into()),
        }
    }
    if let Some(start) = block_start {
        return Err(err(start, 1, "replace block is never closed").into());
    }
    let entry = entry.ok_or_else(|| err(text.lines().count() + 1, 1, "missing `entry` line"))?;
    for (n, lines) in nodes.iter_mut().zip(prompts) {
        n.prompt = lines.join("\n");
    }
    let w = Workflow { nodes, links, entry };
    let violations = w.validate();
    if violations.is_empty() {
        Ok(w)
    } else {
        Err(WorkflowError::Invalid(violations))
    }
}

fn parse_link(line: &str, lineno: usize, rest: &str, evolvable: bool) -> Result<WorkflowLink, ParseError> {
    let (from, tail) = rest.split_once("->").ok_or_else(|| err(lineno, column_of(line, rest), "expected `from -> to`"))?;
    let from = from.trim();
    if !valid_id(from) {
        return Err(err(lineno, column_of(line, rest), format!("invalid node id `{from}`")));
    }
    let tail = tail.trim_start();
    let (to, modifier) = match tail.find(char::is_whitespace) {
        Some(k) => (&tail[..k], tail[k..].trim()),
        None => (tail, ""),
    };
    if !valid_id(to) {
        return Err(err(lineno, column_of(line, tail), format!("invalid node id `{to}`")));
    }
    let kind = if modifier.is_empty() {
        LinkKind::Sequence
    } else if let Some(cond) = modifier.strip_prefix("if:") {
        LinkKind::Conditional { condition: cond.trim().to_owned() }
    } else if let Some(n) = modifier.strip_prefix("loop:") {
        let n = n.trim();
        let max_repeats = n
            .parse::<u32>()
            .map_err(|_| err(lineno, column_of(line, modifier), format!("loop count `{n}` is not a non-negative integer")))?;
        LinkKind::Loop { max_repeats }
    } else {
        return Err(err(lineno, column_of(line, modifier), "expected `if: <condition>` or `loop: <n>`"));
    };
    Ok(WorkflowLink { from: from.to_owned(), to: to.to_owned(), kind, evolvable })
}

fn write_runs<T>(out: &mut String, items: &[T], evolvable: impl Fn(&T) -> bool, mut write: impl FnMut(&mut String, &T)) {
    let mut open = false;
    for item in items {
        let e = evolvable(item);
        if e && !open {
            out.push_str(REPLACE_START);
            out.push('\n');
        } else if !e && open {
            out.push_str(REPLACE_END);
            out.push('\n');
        }
        open = e;
        write(out, item);
    }
    if open {
        out.push_str(REPLACE_END);
        out.push('\n');
    }
}

/// Canonical source: `entry`, then nodes in declaration order, then links
/// sorted by `(from, to, kind)`. Consecutive evolvable items share one
/// replace block.
pub fn serialize_workflow(w: &Workflow) -> String {
    let w = w.canonical();
    let mut out = format!("entry {}\n\n", w.entry);
    write_runs(&mut out, &w.nodes, |n| n.evolvable, |out, n| {
        out.push_str(&format!("node {} {}\n", n.id, n.assistant));
        for l in n.prompt.lines().map(str::trim).filter(|l| !l.is_empty()) {
            out.push_str(INDENT);
            out.push_str(l);
            out.push('\n');
        }
    });
    if !w.links.is_empty() {
        out.push('\n');
    }
    write_runs(&mut out, &w.links, |l| l.evolvable, |out, l| {
        out.push_str(&format!("link {} -> {}", l.from, l.to));
        match &l.kind {
            LinkKind::Sequence => {}
            LinkKind::Conditional { condition } => out.push_str(&format!(" if: {condition}")),
            LinkKind::Loop { max_repeats } => out.push_str(&format!(" loop: {max_repeats}")),
        }
        out.push('\n');
    });
    out
}

/// Non-blank canonical source lines outside replace blocks, in order.
pub fn frozen_lines(w: &Workflow) -> Vec<String> {
    let mut inside = false;
    let mut out = Vec::new();
    for line in serialize_workflow(w).lines() {
        match line {
            REPLACE_START => inside = true,
            REPLACE_END => inside = false,
            l if !inside && !l.trim().is_empty() => out.push(l.to_owned()),
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::WorkflowViolation;
    use proptest::prelude::*;

    #[test]
    fn minimal_source() {
        let w = parse_workflow("entry solve\n# REPLACE-START\nnode solve reasoner\n    Solve it.\n# REPLACE-END\n").unwrap();
        assert_eq!(w.nodes.len(), 1);
        assert_eq!(w.entry, "solve");
        assert!(w.nodes[0].evolvable);
        assert_eq!(w.nodes[0].prompt, "Solve it.");
    }

    #[test]
    fn dangling_link_names_the_node() {
        let e = parse_workflow("entry a\n# REPLACE-START\nnode a coder\n    p\nlink a -> q\n# REPLACE-END\n").unwrap_err();
        match e {
            WorkflowError::Invalid(v) => assert!(v.iter().any(|x| matches!(x,
                WorkflowViolation::DanglingLink { missing, .. } if missing == "q"))),
            other => panic!("{other:?}"),
        }
        assert!(e_to_string_contains("entry a\n# REPLACE-START\nnode a coder\n    p\nlink a -> q\n# REPLACE-END\n", "`q`"));
    }

    fn e_to_string_contains(src: &str, needle: &str) -> bool {
        parse_workflow(src).unwrap_err().to_string().contains(needle)
    }

    #[test]
    fn parse_errors_carry_positions() {
        let cases = [
            ("entry a\nnode a wizard\n    p\n", 2, 8),
            ("entry a\nfrobnicate\n", 2, 1),
            ("entry a\n    stray\n", 2, 5),
            ("entry a\n# REPLACE-START\nnode a coder\n    p\n", 2, 1),
            ("entry a\n# REPLACE-END\n", 2, 1),
            ("entry a\nnode a coder\n    p\nlink a -> a loop: many\n", 4, 13),
            ("node a coder\n    p\n", 3, 1),
        ];
        for (src, line, column) in cases {
            match parse_workflow(src) {
                Err(WorkflowError::Parse(e)) => assert_eq!((e.line, e.column), (line, column), "{src:?}: {e}"),
                other => panic!("{src:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn link_modifiers() {
        let w = parse_workflow(
            "entry a\n# REPLACE-START\nnode a coder\n    p\nnode b judge\n    q\n\
             link a -> b if: the draft compiles\nlink b -> a loop: 2\n# REPLACE-END\n",
        )
        .unwrap();
        assert_eq!(w.links[0].kind, LinkKind::Conditional { condition: "the draft compiles".into() });
        assert_eq!(w.links[1].kind, LinkKind::Loop { max_repeats: 2 });
    }

    #[test]
    fn zero_loop_is_invalid() {
        let e = parse_workflow("entry a\n# REPLACE-START\nnode a coder\n    p\nlink a -> a loop: 0\n# REPLACE-END\n");
        assert!(matches!(e, Err(WorkflowError::Invalid(v)) if v.iter().any(|x| matches!(x, WorkflowViolation::ZeroLoop { .. }))));
    }

    #[test]
    fn serialization_is_canonical_and_stable() {
        let src = "# a comment\nentry a\n# REPLACE-START\nnode a coder\n  Draft.\n   Then refine.\nnode b reasoner\n    Check.\n# REPLACE-END\nnode c judge\n    Rate.\n\
                   link b -> c\n# REPLACE-START\nlink a -> b\n# REPLACE-END\n";
        let w = parse_workflow(src).unwrap();
        let once = serialize_workflow(&w);
        assert_eq!(once, serialize_workflow(&w));
        assert_eq!(
            once,
            "entry a\n\n# REPLACE-START\nnode a coder\n    Draft.\n    Then refine.\nnode b reasoner\n    Check.\n# REPLACE-END\nnode c judge\n    Rate.\n\n\
             # REPLACE-START\nlink a -> b\n# REPLACE-END\nlink b -> c\n"
        );
        assert_eq!(parse_workflow(&once).unwrap(), w.canonical());
    }

    #[test]
    fn markers_surround_exactly_the_evolvable_nodes() {
        let w = crate::workflow::tests::two_step();
        let text = serialize_workflow(&w);
        let inside: Vec<&str> = text
            .split(REPLACE_START)
            .skip(1)
            .map(|chunk| chunk.split(REPLACE_END).next().unwrap())
            .collect();
        assert_eq!(inside, ["\nnode draft coder\n    Write the function.\n"]);
        assert_eq!(frozen_lines(&w), ["entry draft", "node frame reasoner", "    Restate the goal.", "link draft -> frame"]);
    }

    #[test]
    fn three_node_round_trip() {
        let src = "entry x\n\n# REPLACE-START\nnode x coder\n    one\nnode y coder\n    two\nnode z judge\n    three\n# REPLACE-END\n\n\
                   # REPLACE-START\nlink x -> y\nlink y -> z if: looks right\nlink z -> x loop: 1\n# REPLACE-END\n";
        let w = parse_workflow(src).unwrap();
        assert_eq!(serialize_workflow(&w), src);
        assert_eq!(parse_workflow(&serialize_workflow(&w)).unwrap(), w);
    }

    fn arb_workflow() -> impl Strategy<Value = Workflow> {
        let kinds = proptest::sample::select(AssistantKind::ALL.to_vec());
        let line = "[A-Za-z][A-Za-z0-9 ,.?]{0,30}[A-Za-z0-9.]";
        let node = (kinds, proptest::collection::vec(line, 1..3), any::<bool>());
        (proptest::collection::vec(node, 1..6), proptest::collection::vec((any::<u8>(), any::<u8>(), 0u8..3, 1u32..4, any::<bool>()), 0..8))
            .prop_map(|(nodes, raw_links)| {
                let mut nodes: Vec<WorkflowNode> = nodes
                    .into_iter()
                    .enumerate()
                    .map(|(i, (assistant, lines, evolvable))| WorkflowNode {
                        id: format!("n{i}"),
                        assistant,
                        prompt: lines.join("\n"),
                        evolvable,
                    })
                    .collect();
                nodes[0].evolvable = true;
                let n = nodes.len();
                // a spine keeps every node reachable
                let mut links: Vec<WorkflowLink> = (1..n)
                    .map(|i| WorkflowLink { from: format!("n{}", i - 1), to: format!("n{i}"), kind: LinkKind::Sequence, evolvable: i % 2 == 0 })
                    .collect();
                for (a, b, k, reps, evolvable) in raw_links {
                    let kind = match k {
                        0 => LinkKind::Sequence,
                        1 => LinkKind::Conditional { condition: format!("check {a}") },
                        _ => LinkKind::Loop { max_repeats: reps },
                    };
                    let l = WorkflowLink { from: format!("n{}", a as usize % n), to: format!("n{}", b as usize % n), kind, evolvable };
                    if !links.iter().any(|x| x.sort_key() == l.sort_key()) {
                        links.push(l);
                    }
                }
                Workflow { nodes, links, entry: "n0".into() }
            })
    }

    proptest! {
        #[test]
        fn round_trip(w in arb_workflow()) {
            prop_assert!(w.validate().is_empty(), "{:?}", w.validate());
            let text = serialize_workflow(&w);
            let back = parse_workflow(&text).unwrap();
            prop_assert_eq!(&back, &w.canonical());
            prop_assert_eq!(serialize_workflow(&back), text);
        }
    }
}
