use serde::{Deserialize, Serialize};

use super::{merge_advantage, Scorer};
use crate::graph::{topological_order, validate_graph, FlowEdge, Subtask, TaskFlowGraph, ValidationReport};
use crate::llm::{ChatBackend, Llm};
use crate::prelude::*;
use crate::score_db::{EffectiveScoreEstimate, EstimateError};

/// Line placed between the two descriptions of a merged subtask.
pub const MERGE_SEPARATOR: &str = "\n---\n";

pub fn merged_id(i: &str, j: &str) -> String {
    format!("{i}+{j}")
}

pub fn merged_description(i: &str, j: &str) -> String {
    format!("{i}{MERGE_SEPARATOR}{j}")
}

/// A dependency edge `node_i -> node_j` considered for contraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeCandidate {
    pub node_i: String,
    pub node_j: String,
    pub advantage: f64,
    pub score_i: f64,
    pub score_j: f64,
    pub merged_estimate: EffectiveScoreEstimate,
}

impl MergeCandidate {
    /// Candidate with the given advantage and neutral estimates; used where
    /// only the advantage matters.
    pub fn bare(node_i: impl Into<String>, node_j: impl Into<String>, advantage: f64) -> Self {
        Self {
            node_i: node_i.into(),
            node_j: node_j.into(),
            advantage,
            score_i: 0.0,
            score_j: 0.0,
            merged_estimate: EffectiveScoreEstimate::prior(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MergeCandidate>,
    pub used: BTreeSet<String>,
}

impl Matching {
    pub fn total(&self) -> f64 {
        self.pairs.iter().map(|p| p.advantage).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Adds `c` if neither endpoint is used yet.
    pub fn try_add(&mut self, c: &MergeCandidate) -> bool {
        if c.node_i == c.node_j || self.used.contains(&c.node_i) || self.used.contains(&c.node_j) {
            return false;
        }
        self.used.insert(c.node_i.clone());
        self.used.insert(c.node_j.clone());
        self.pairs.push(c.clone());
        true
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoarsenError {
    #[error("merge candidates are not sorted by descending advantage at position {index}")]
    Unsorted { index: usize },
}

/// Sorted greedy matching: scan in order, stop at the first negative
/// advantage, take a pair when both endpoints are still free.
pub fn greedy_coarsen(edges: &[MergeCandidate]) -> Result<Matching, CoarsenError> {
    if let Some(index) = edges.iter().position(|e| e.advantage.is_nan()) {
        return Err(CoarsenError::Unsorted { index });
    }
    if let Some(index) = edges.windows(2).position(|w| w[0].advantage < w[1].advantage) {
        return Err(CoarsenError::Unsorted { index: index + 1 });
    }
    let mut m = Matching::default();
    for e in edges {
        if e.advantage < 0.0 {
            break;
        }
        m.try_add(e);
    }
    Ok(m)
}

/// One candidate per dependency edge, sorted by descending advantage and
/// then ascending `(node_i, node_j)`.
pub fn score_merge_candidates(
    g: &TaskFlowGraph,
    scorer: &mut Scorer<'_>,
    llm: &mut Llm<impl ChatBackend>,
) -> Result<Vec<MergeCandidate>, EstimateError> {
    let mut out = Vec::new();
    for (i, j) in g.dependency_pairs() {
        let (Some(ni), Some(nj)) = (g.node(&i), g.node(&j)) else { continue };
        let si = scorer.estimate(&ni.description, llm)?.effective;
        let sj = scorer.estimate(&nj.description, llm)?.effective;
        let merged = scorer.estimate(&merged_description(&ni.description, &nj.description), llm)?;
        out.push(MergeCandidate {
            advantage: merge_advantage(si, sj, merged.effective),
            node_i: i,
            node_j: j,
            score_i: si,
            score_j: sj,
            merged_estimate: merged,
        });
    }
    // pairs come out of a sorted set, so a stable sort keeps id order on ties
    out.sort_by(|a, b| b.advantage.total_cmp(&a.advantage));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MergeError {
    #[error("invalid matching: {0}")]
    InvalidMatching(String),
    #[error("merging produced an invalid graph: {0}")]
    Invalid(ValidationReport),
}

/// Contracts every pair without validating the outcome.
fn contract(g: &TaskFlowGraph, pairs: &[MergeCandidate]) -> TaskFlowGraph {
    let mut out = g.clone();
    out.normalize();
    let mut rename: BTreeMap<String, String> = BTreeMap::new();
    for p in pairs {
        let id = merged_id(&p.node_i, &p.node_j);
        rename.insert(p.node_i.clone(), id.clone());
        rename.insert(p.node_j.clone(), id);
    }
    let mut nodes = Vec::with_capacity(out.nodes.len());
    for n in &out.nodes {
        if let Some(p) = pairs.iter().find(|p| p.node_i == n.id) {
            let j = out.node(&p.node_j).map(|x| x.description.as_str()).unwrap_or_default();
            nodes.push(Subtask::new(merged_id(&p.node_i, &p.node_j), merged_description(&n.description, j)));
        } else if !pairs.iter().any(|p| p.node_j == n.id) {
            nodes.push(n.clone());
        }
    }
    let map = |id: &String| rename.get(id).cloned().unwrap_or_else(|| id.clone());
    let mut seen = BTreeSet::new();
    let mut edges = Vec::with_capacity(out.edges.len());
    for e in &out.edges {
        let edge = FlowEdge { from: map(&e.from), to: map(&e.to), ..e.clone() };
        if edge.from != edge.to && seen.insert(edge.clone()) {
            edges.push(edge);
        }
    }
    out.nodes = nodes;
    out.edges = edges;
    out.sync_depends_on();
    out
}

/// Projects `g` to the next coarser level. Each pair becomes one node with
/// id `i+j`; edges are re-pointed to merged nodes, duplicates collapse and
/// self-loops vanish.
pub fn apply_merges(g: &TaskFlowGraph, m: &Matching) -> Result<TaskFlowGraph, MergeError> {
    if m.pairs.is_empty() {
        return Ok(g.clone());
    }
    let pairs = g.dependency_pairs();
    let mut seen = BTreeSet::new();
    for p in &m.pairs {
        if !pairs.contains(&(p.node_i.clone(), p.node_j.clone())) {
            return Err(MergeError::InvalidMatching(format!("{} -> {} is not a dependency edge", p.node_i, p.node_j)));
        }
        for end in [&p.node_i, &p.node_j] {
            if !seen.insert(end.as_str()) {
                return Err(MergeError::InvalidMatching(format!("`{end}` appears in two pairs")));
            }
        }
        let id = merged_id(&p.node_i, &p.node_j);
        if g.contains(&id) {
            return Err(MergeError::InvalidMatching(format!("merged id `{id}` already exists")));
        }
    }
    let out = contract(g, &m.pairs);
    let report = validate_graph(&out);
    if !report.is_valid() {
        return Err(MergeError::Invalid(report));
    }
    Ok(out)
}

/// Keeps the pairs of `m`, in selection order, whose joint contraction
/// keeps the dependency relation acyclic. Returns the kept matching and the
/// dropped pairs.
pub fn select_acyclic(g: &TaskFlowGraph, m: &Matching) -> (Matching, Vec<MergeCandidate>) {
    let mut kept = Matching::default();
    let mut dropped = Vec::new();
    for p in &m.pairs {
        let mut trial = kept.pairs.clone();
        trial.push(p.clone());
        if !g.contains(&merged_id(&p.node_i, &p.node_j)) && topological_order(&contract(g, &trial)).is_ok() {
            kept.try_add(p);
        } else {
            dropped.push(p.clone());
        }
    }
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{topological_order, FlowEdge};
    use crate::graph_opt::testkit::{table_backend, warm_db};
    use crate::graph_opt::{exact_matching_oracle, Scorer};
    use crate::score_db::HashEmbedder;
    use proptest::prelude::*;

    fn c(i: &str, j: &str, a: f64) -> MergeCandidate {
        MergeCandidate::bare(i, j, a)
    }

    fn pair_ids(m: &Matching) -> Vec<(String, String)> {
        m.pairs.iter().map(|p| (p.node_i.clone(), p.node_j.clone())).collect()
    }

    fn chain3() -> TaskFlowGraph {
        TaskFlowGraph::new("t")
            .with_node("a", "A")
            .with_node("b", "B")
            .with_node("c", "C")
            .with_dependency("a", "b")
            .with_dependency("b", "c")
    }

    #[test]
    fn greedy_path_is_optimal() {
        let edges = [c("a", "b", 0.5), c("b", "c", 0.4), c("c", "d", 0.3)];
        let m = greedy_coarsen(&edges).unwrap();
        assert_eq!(pair_ids(&m), [("a".into(), "b".into()), ("c".into(), "d".into())]);
        assert!((m.total() - 0.8).abs() < 1e-12);
        assert!((exact_matching_oracle(&edges).unwrap().total() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn greedy_breaks_on_negative() {
        let m = greedy_coarsen(&[c("c", "d", 0.2), c("a", "b", -0.1)]).unwrap();
        assert_eq!(pair_ids(&m), [("c".into(), "d".into())]);
    }

    #[test]
    fn greedy_half_approximation_example() {
        let edges = [c("b", "c", 0.5), c("a", "b", 0.4), c("c", "d", 0.4)];
        let greedy = greedy_coarsen(&edges).unwrap();
        let exact = exact_matching_oracle(&edges).unwrap();
        assert_eq!(pair_ids(&greedy), [("b".into(), "c".into())]);
        assert!((exact.total() - 0.8).abs() < 1e-12);
        assert!((greedy.total() / exact.total() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_is_eligible() {
        let m = greedy_coarsen(&[c("a", "b", 0.0)]).unwrap();
        assert_eq!(m.pairs.len(), 1);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        assert_eq!(
            greedy_coarsen(&[c("a", "b", 0.1), c("c", "d", 0.2)]),
            Err(CoarsenError::Unsorted { index: 1 })
        );
        assert!(greedy_coarsen(&[c("a", "b", f64::NAN)]).is_err());
    }

    #[test]
    fn merging_chain_head() {
        let g = chain3();
        let mut m = Matching::default();
        m.try_add(&c("a", "b", 0.1));
        let out = apply_merges(&g, &m).unwrap();
        assert_eq!(out.node_ids().collect::<Vec<_>>(), ["a+b", "c"]);
        assert_eq!(out.node("a+b").unwrap().description, "A\n---\nB");
        assert_eq!(out.dependency_pairs().into_iter().collect::<Vec<_>>(), [("a+b".into(), "c".into())]);
        assert_eq!(out.node("c").unwrap().depends_on, ["a+b"]);
    }

    #[test]
    fn merging_diamond_middle_collapses_duplicates() {
        let g = crate::graph::tests::diamond();
        let mut m = Matching::default();
        m.try_add(&c("b", "c", 0.1));
        // b and c are siblings, not an edge
        assert!(matches!(apply_merges(&g, &m), Err(MergeError::InvalidMatching(_))));
        // with a b -> c edge the contraction collapses a->b, a->c and b->d, c->d
        let g = g.with_dependency("b", "c");
        let out = apply_merges(&g, &m).unwrap();
        let pairs: Vec<(String, String)> = out.dependency_pairs().into_iter().collect();
        assert_eq!(pairs, [("a".into(), "b+c".into()), ("b+c".into(), "d".into())]);
        assert_eq!(out.edges.len(), 2);
    }

    #[test]
    fn empty_matching_is_identity() {
        let g = chain3();
        assert_eq!(apply_merges(&g, &Matching::default()).unwrap(), g);
    }

    #[test]
    fn jump_edges_follow_merges() {
        let g = chain3().with_edge(FlowEdge::jump("c", "a", "retry")).with_edge(FlowEdge::jump("b", "a", "again"));
        let mut m = Matching::default();
        m.try_add(&c("a", "b", 0.1));
        let out = apply_merges(&g, &m).unwrap();
        let jumps: Vec<(&str, &str)> = out.jump_edges().map(|e| (e.from.as_str(), e.to.as_str())).collect();
        assert_eq!(jumps, [("c", "a+b")]);
    }

    #[test]
    fn transitive_edge_contraction_is_dropped() {
        // a -> b -> c plus a -> c: contracting a -> c would close a cycle
        let g = chain3().with_dependency("a", "c");
        let mut m = Matching::default();
        m.try_add(&c("a", "c", 0.5));
        assert!(matches!(apply_merges(&g, &m), Err(MergeError::Invalid(_))));
        let (kept, dropped) = select_acyclic(&g, &m);
        assert!(kept.is_empty());
        assert_eq!(dropped.len(), 1);
    }

    #[test]
    fn jointly_cyclic_pairs_are_dropped() {
        // a->b, c->d, a->d, c->b: each contraction alone is fine, both close a cycle
        let g = TaskFlowGraph::new("t")
            .with_node("a", "A")
            .with_node("b", "B")
            .with_node("c", "C")
            .with_node("d", "D")
            .with_dependency("a", "b")
            .with_dependency("c", "d")
            .with_dependency("a", "d")
            .with_dependency("c", "b");
        let mut m = Matching::default();
        m.try_add(&c("a", "b", 0.5));
        m.try_add(&c("c", "d", 0.4));
        let (kept, dropped) = select_acyclic(&g, &m);
        assert_eq!(pair_ids(&kept), [("a".into(), "b".into())]);
        assert_eq!(dropped[0].node_i, "c");
        assert!(apply_merges(&g, &kept).is_ok());
    }

    #[test]
    fn no_edges_no_candidates() {
        let g = TaskFlowGraph::new("t").with_node("a", "A");
        let db = warm_db();
        let e = HashEmbedder::default();
        let mut scorer = Scorer::new(&db, &e);
        let mut llm = Llm::new(table_backend(BTreeMap::new(), BTreeMap::new(), 0.5));
        assert!(score_merge_candidates(&g, &mut scorer, &mut llm).unwrap().is_empty());
    }

    #[test]
    fn uniform_scores_give_zero_advantage() {
        let db = warm_db();
        let e = HashEmbedder::default();
        let mut scorer = Scorer::new(&db, &e);
        let mut llm = Llm::new(table_backend(BTreeMap::new(), BTreeMap::new(), 0.5));
        let cands = score_merge_candidates(&crate::graph::tests::diamond(), &mut scorer, &mut llm).unwrap();
        assert_eq!(cands.len(), 4);
        assert!(cands.iter().all(|c| c.advantage == 0.0));
        // ties keep ascending (i, j) order
        let ids: Vec<(String, String)> = cands.iter().map(|c| (c.node_i.clone(), c.node_j.clone())).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn table_scores_match_hand_computation() {
        let g = chain3();
        let table: BTreeMap<String, f64> = [
            ("A", 0.6),
            ("B", 0.8),
            ("C", 0.4),
            ("A\n---\nB", 0.9),
            ("B\n---\nC", 0.3),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        let db = warm_db();
        let e = HashEmbedder::default();
        let mut scorer = Scorer::new(&db, &e);
        let mut llm = Llm::new(table_backend(table, BTreeMap::new(), 0.0));
        let cands = score_merge_candidates(&g, &mut scorer, &mut llm).unwrap();
        // 0.9 - (0.6 + 0.8)/2 = 0.2 ; 0.3 - (0.8 + 0.4)/2 = -0.3
        assert_eq!(cands[0].node_i, "a");
        assert!((cands[0].advantage - 0.2).abs() < 1e-12);
        assert!((cands[1].advantage + 0.3).abs() < 1e-12);
        // five distinct contents, five estimator calls
        assert_eq!(llm.log().len(), 5);
    }

    fn random_dag() -> impl Strategy<Value = TaskFlowGraph> {
        (2usize..9).prop_flat_map(|n| {
            proptest::collection::vec(any::<bool>(), n * (n - 1) / 2).prop_map(move |bits| {
                let mut g = TaskFlowGraph::new("t");
                for i in 0..n {
                    g = g.with_node(&format!("n{i}"), &format!("d{i}"));
                }
                let mut k = 0;
                for i in 0..n {
                    for j in (i + 1)..n {
                        if bits[k] {
                            g = g.with_dependency(&format!("n{i}"), &format!("n{j}"));
                        }
                        k += 1;
                    }
                }
                g
            })
        })
    }

    proptest! {
        #[test]
        fn safe_matchings_preserve_validity(g in random_dag(), seed in any::<u64>()) {
            let mut cands: Vec<MergeCandidate> = g
                .dependency_pairs()
                .into_iter()
                .enumerate()
                .map(|(k, (i, j))| c(&i, &j, ((seed.rotate_left(k as u32 * 7) % 200) as f64 / 100.0) - 1.0))
                .collect();
            cands.sort_by(|a, b| b.advantage.total_cmp(&a.advantage));
            let m = greedy_coarsen(&cands).unwrap();
            prop_assert!(m.pairs.iter().all(|p| p.advantage >= 0.0));
            let (kept, _) = select_acyclic(&g, &m);
            let out = apply_merges(&g, &kept).unwrap();
            prop_assert!(validate_graph(&out).is_valid());
            prop_assert!(topological_order(&out).is_ok());
            prop_assert_eq!(out.nodes.len(), g.nodes.len() - kept.pairs.len());
        }
    }
}
