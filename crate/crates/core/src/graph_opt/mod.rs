//! Multilevel reshaping of task flow graphs.
//!
//! Coarsening contracts dependency edges whose merged subtask is estimated
//! to score better than the mean of its parts. Relaxation asks the
//! decomposer to split single subtasks and keeps a split when its
//! sub-subtasks score better on average than the parent. The V-cycle runs
//! coarsening level by level and then relaxation level by level.

mod coarsen;
mod oracle;
mod relax;
mod vcycle;

pub use coarsen::{
    apply_merges, greedy_coarsen, merged_description, merged_id, score_merge_candidates, select_acyclic,
    CoarsenError, Matching, MergeCandidate, MergeError, MERGE_SEPARATOR,
};
pub use oracle::{exact_matching_oracle, OracleError, ORACLE_NODE_LIMIT};
pub use relax::{
    apply_decomposition, parse_proposal, relax_pass, DecompositionProposal, ProposalError, RelaxAttempt,
    RelaxError, RelaxOutcome, RelaxVerdict, MAX_SUB_NODES,
};
pub use vcycle::{v_cycle, LevelTrace, Phase, VCycleConfig, VCycleError, VCycleFailure, VCycleOutcome};

use crate::llm::{ChatBackend, Llm};
use crate::prelude::*;
use crate::score_db::{
    estimate_effective_score, Embedder, EffectiveScoreEstimate, EstimateError, ScoreDb, DEFAULT_TOP_K,
};

/// `s_ij - (s_i + s_j) / 2`.
pub fn merge_advantage(s_i: f64, s_j: f64, s_ij: f64) -> f64 {
    s_ij - (s_i + s_j) / 2.0
}

/// Mean sub-node score minus the parent score. An empty proposal has no
/// advantage.
pub fn decompose_advantage(sub_scores: &[f64], parent: f64) -> Option<f64> {
    if sub_scores.is_empty() {
        return None;
    }
    Some(sub_scores.iter().sum::<f64>() / sub_scores.len() as f64 - parent)
}

/// Effective-score estimation with a per-content cache, so that repeated
/// descriptions across levels cost one estimator call.
pub struct Scorer<'a> {
    db: &'a ScoreDb,
    embedder: &'a dyn Embedder,
    top_k: usize,
    retries: u32,
    cache: BTreeMap<String, EffectiveScoreEstimate>,
}

impl<'a> Scorer<'a> {
    pub fn new(db: &'a ScoreDb, embedder: &'a dyn Embedder) -> Self {
        Self { db, embedder, top_k: DEFAULT_TOP_K, retries: 2, cache: BTreeMap::new() }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn db(&self) -> &ScoreDb {
        self.db
    }

    pub fn estimate(
        &mut self,
        content: &str,
        llm: &mut Llm<impl ChatBackend>,
    ) -> Result<EffectiveScoreEstimate, EstimateError> {
        if let Some(hit) = self.cache.get(content) {
            return Ok(hit.clone());
        }
        let est = estimate_effective_score(self.db, self.embedder, content, self.top_k, llm, self.retries)?;
        self.cache.insert(content.to_owned(), est.clone());
        Ok(est)
    }
}

#[cfg(test)]
pub(crate) mod testkit {
    use super::*;
    use crate::llm::FnBackend;
    use crate::llm::{AssistantKind, BackendError, ChatRequest, ChatResponse};
    use crate::score_db::{HashEmbedder, SubtaskRecord};

    /// A one-record database, so estimates actually reach the backend.
    pub fn warm_db() -> ScoreDb {
        let e = HashEmbedder::default();
        let mut db = ScoreDb::new(e.dimension());
        db.insert(SubtaskRecord::new("seed", "seed record", e.embed("seed record").unwrap(), 0.5, 0.5, ""))
            .unwrap();
        db.recluster(0.8).unwrap();
        db
    }

    /// Backend answering estimator requests from a table keyed by
    /// content (score is returned as d = s, c = 1), and decomposer
    /// requests from a table keyed by description. Unknown content scores
    /// `fallback`; unknown decompositions are empty.
    pub fn table_backend(
        scores: BTreeMap<String, f64>,
        splits: BTreeMap<String, String>,
        fallback: f64,
    ) -> impl ChatBackend {
        FnBackend(move |r: &ChatRequest| -> Result<ChatResponse, BackendError> {
            let text = match r.kind {
                AssistantKind::Estimator => {
                    let s = scores.get(&r.subject).copied().unwrap_or(fallback);
                    format!("{{\"d\": {s}, \"c\": 1.0}}")
                }
                AssistantKind::Decomposer => {
                    splits.get(&r.subject).cloned().unwrap_or_else(|| "{\"nodes\": []}".to_owned())
                }
                _ => String::new(),
            };
            Ok(ChatResponse::text(text))
        })
    }
}
