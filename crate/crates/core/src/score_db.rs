//! Historical subtask records and retrieval-based effective-score
//! estimation.
//!
//! Records carry a unit-normalized content embedding plus judge-assigned
//! complexity `d` and completeness `c` in `[0, 1]`. Records are grouped by
//! greedy leader clustering on cosine similarity, and a new subtask's
//! effective score is estimated from its top-K neighbours and the
//! statistics of their clusters. The effective score is always `d * c`.
//!
//! Complexity is read as tractability: higher `d` means the subtask is
//! more likely to be executed well at its granularity.

use serde::{Deserialize, Serialize};

use crate::hash::fnv1a64;
use crate::llm::{AssistantKind, ChatBackend, Llm, Schema, StructuredError};
use crate::prelude::*;

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_TOP_K: usize = 5;
/// Complexity and completeness assumed when the database is empty.
pub const PRIOR_SCORE: f64 = 0.5;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

pub trait Embedder {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Token-hash bag of words. Deterministic and offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut v = vec![0.0; self.dimension];
        let mut any = false;
        for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let token = token.to_lowercase();
            v[(fnv1a64(token.as_bytes()) % self.dimension as u64) as usize] += 1.0;
            any = true;
        }
        if !any {
            // punctuation-only text still gets a deterministic direction
            v[(fnv1a64(text.as_bytes()) % self.dimension as u64) as usize] = 1.0;
        }
        normalize(&mut v);
        Ok(v)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskRecord {
    pub id: String,
    pub content: String,
    pub embedding: Vec<f64>,
    pub complexity: f64,
    pub completeness: f64,
    #[serde(default)]
    pub reflection: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<u32>,
}

impl SubtaskRecord {
    pub fn new(
        id: impl Into<String>,
        content: impl Into<String>,
        embedding: Vec<f64>,
        complexity: f64,
        completeness: f64,
        reflection: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            content: content.into(),
            embedding,
            complexity,
            completeness,
            reflection: reflection.into(),
            cluster_id: None,
        }
    }

    pub fn effective(&self) -> f64 {
        self.complexity * self.completeness
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub cluster_id: u32,
    pub leader: String,
    pub size: usize,
    pub mean_completeness: f64,
    pub std_completeness: f64,
    pub mean_complexity: f64,
    pub std_complexity: f64,
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var.max(0.0)))
}

/// Mean/std of complexity and completeness over a set of records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledStats {
    pub size: usize,
    pub mean_completeness: f64,
    pub std_completeness: f64,
    pub mean_complexity: f64,
    pub std_complexity: f64,
}

impl PooledStats {
    fn over<'a>(records: impl Iterator<Item = &'a SubtaskRecord>) -> Self {
        let (ds, cs): (Vec<f64>, Vec<f64>) = records.map(|r| (r.complexity, r.completeness)).unzip();
        let (mean_complexity, std_complexity) = mean_std(&ds);
        let (mean_completeness, std_completeness) = mean_std(&cs);
        Self { size: ds.len(), mean_completeness, std_completeness, mean_complexity, std_complexity }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreDbError {
    #[error("record `{0}` already exists")]
    DuplicateId(String),
    #[error("embedding has dimension {got}, database expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding of `{id}` is not unit-normalized (norm {norm})")]
    NotNormalized { id: String, norm: f64 },
    #[error("score {field} of `{id}` is {value}, outside [0, 1]")]
    ScoreOutOfRange { id: String, field: &'static str, value: f64 },
    #[error("similarity threshold {0} is outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("score database is empty")]
    EmptyDb,
    #[error("k must be positive")]
    InvalidK,
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDb {
    dimension: usize,
    threshold: f64,
    records: BTreeMap<String, SubtaskRecord>,
    #[serde(skip)]
    clusters: BTreeMap<u32, ClusterStats>,
}

impl ScoreDb {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, threshold: DEFAULT_THRESHOLD, records: BTreeMap::new(), clusters: BTreeMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Threshold used by the last recluster and by leader assignment.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SubtaskRecord> {
        self.records.get(id)
    }

    /// Records in ascending id order.
    pub fn records(&self) -> impl Iterator<Item = &SubtaskRecord> {
        self.records.values()
    }

    pub fn clusters(&self) -> &BTreeMap<u32, ClusterStats> {
        &self.clusters
    }

    pub fn cluster_members(&self, cluster_id: u32) -> impl Iterator<Item = &SubtaskRecord> {
        self.records.values().filter(move |r| r.cluster_id == Some(cluster_id))
    }

    /// Stores a record. Cluster assignment is left to [`Self::recluster`]
    /// or [`Self::assign_to_leader`].
    pub fn insert(&mut self, mut record: SubtaskRecord) -> Result<(), ScoreDbError> {
        if self.records.contains_key(&record.id) {
            return Err(ScoreDbError::DuplicateId(record.id));
        }
        if record.embedding.len() != self.dimension {
            return Err(ScoreDbError::DimensionMismatch { expected: self.dimension, got: record.embedding.len() });
        }
        let n = norm(&record.embedding);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(ScoreDbError::NotNormalized { id: record.id, norm: n });
        }
        for (field, value) in [("complexity", record.complexity), ("completeness", record.completeness)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ScoreDbError::ScoreOutOfRange { id: record.id, field, value });
            }
        }
        record.cluster_id = None;
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    /// Joins the first cluster whose leader is similar enough, or founds a
    /// new one. Only the affected cluster's statistics are recomputed.
    pub fn assign_to_leader(&mut self, id: &str) -> Result<u32, ScoreDbError> {
        let rec = self.records.get(id).ok_or_else(|| ScoreDbError::UnknownRecord(id.to_owned()))?;
        if let Some(c) = rec.cluster_id {
            return Ok(c);
        }
        let joined = self.clusters.values().find(|c| {
            let leader = &self.records[&c.leader];
            dot(&leader.embedding, &rec.embedding) >= self.threshold
        });
        let cid = match joined {
            Some(c) => c.cluster_id,
            None => {
                let cid = self.clusters.keys().next_back().map_or(0, |k| k + 1);
                self.clusters.insert(cid, self.empty_stats(cid, id));
                cid
            }
        };
        self.records.get_mut(id).expect("checked").cluster_id = Some(cid);
        self.refresh_stats(cid);
        Ok(cid)
    }

    fn empty_stats(&self, cluster_id: u32, leader: &str) -> ClusterStats {
        ClusterStats {
            cluster_id,
            leader: leader.to_owned(),
            size: 0,
            mean_completeness: 0.0,
            std_completeness: 0.0,
            mean_complexity: 0.0,
            std_complexity: 0.0,
        }
    }

    fn refresh_stats(&mut self, cluster_id: u32) {
        let pooled = PooledStats::over(self.cluster_members(cluster_id));
        let stats = self.clusters.get_mut(&cluster_id).expect("cluster exists");
        stats.size = pooled.size;
        stats.mean_completeness = pooled.mean_completeness;
        stats.std_completeness = pooled.std_completeness;
        stats.mean_complexity = pooled.mean_complexity;
        stats.std_complexity = pooled.std_complexity;
    }

    /// Greedy leader clustering from scratch: records are scanned in
    /// ascending id order and join the first (oldest) cluster whose leader
    /// has cosine similarity at least `threshold`.
    pub fn recluster(&mut self, threshold: f64) -> Result<(), ScoreDbError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(ScoreDbError::InvalidThreshold(threshold));
        }
        self.threshold = threshold;
        self.clusters.clear();
        for r in self.records.values_mut() {
            r.cluster_id = None;
        }
        let ids: Vec<String> = self.records.keys().cloned().collect();
        for id in ids {
            self.assign_to_leader(&id)?;
        }
        Ok(())
    }

    /// The `min(k, len)` records most similar to `query`, by descending
    /// cosine similarity with ties broken by ascending id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(f64, &SubtaskRecord)>, ScoreDbError> {
        if self.records.is_empty() {
            return Err(ScoreDbError::EmptyDb);
        }
        if k == 0 {
            return Err(ScoreDbError::InvalidK);
        }
        if query.len() != self.dimension {
            return Err(ScoreDbError::DimensionMismatch { expected: self.dimension, got: query.len() });
        }
        // records iterate in id order and the sort is stable, so equal
        // similarities stay in ascending id order
        let mut scored: Vec<(f64, &SubtaskRecord)> =
            self.records.values().map(|r| (dot(query, &r.embedding), r)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(k);
        Ok(scored)
    }

    /// Statistics pooled over every member of the given records' clusters.
    /// Unclustered records contribute themselves.
    pub fn neighborhood_stats(&self, neighbors: &[&SubtaskRecord]) -> PooledStats {
        let clusters: BTreeSet<u32> = neighbors.iter().filter_map(|r| r.cluster_id).collect();
        let loose: BTreeSet<&str> =
            neighbors.iter().filter(|r| r.cluster_id.is_none()).map(|r| r.id.as_str()).collect();
        PooledStats::over(self.records.values().filter(|r| {
            r.cluster_id.is_some_and(|c| clusters.contains(&c)) || loose.contains(r.id.as_str())
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveScoreEstimate {
    pub complexity_est: f64,
    pub completeness_est: f64,
    pub effective: f64,
    #[serde(default)]
    pub neighbors: Vec<String>,
}

impl EffectiveScoreEstimate {
    /// Builds an estimate from raw values, clamping both into `[0, 1]`.
    pub fn from_scores(complexity: f64, completeness: f64, neighbors: Vec<String>) -> Self {
        let d = complexity.clamp(0.0, 1.0);
        let c = completeness.clamp(0.0, 1.0);
        Self { complexity_est: d, completeness_est: c, effective: d * c, neighbors }
    }

    pub fn prior() -> Self {
        Self::from_scores(PRIOR_SCORE, PRIOR_SCORE, Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimateError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Db(#[from] ScoreDbError),
    #[error("estimator: {0}")]
    Estimator(#[from] StructuredError),
}

pub(crate) fn estimator_schema() -> Schema {
    Schema::new().number("d", 0.0, 1.0).number("c", 0.0, 1.0)
}

/// Estimates `d`, `c` and the effective score of `task_content` from its
/// nearest historical subtasks. An empty database yields the prior.
pub fn estimate_effective_score(
    db: &ScoreDb,
    embedder: &dyn Embedder,
    task_content: &str,
    k: usize,
    llm: &mut Llm<impl ChatBackend>,
    retries: u32,
) -> Result<EffectiveScoreEstimate, EstimateError> {
    if db.is_empty() {
        return Ok(EffectiveScoreEstimate::prior());
    }
    let query = embedder.embed(task_content)?;
    let neighbors = db.top_k(&query, k)?;
    let refs: Vec<&SubtaskRecord> = neighbors.iter().map(|(_, r)| *r).collect();
    let stats = db.neighborhood_stats(&refs);

    let mut prompt = String::from(
        "Estimate two scores for the subtask below, each in [0, 1].\n\
         d (complexity): how tractable the subtask is at its current granularity; higher means more likely to be executed well.\n\
         c (completeness): how completely a typical workflow will solve it.\n\n",
    );
    prompt.push_str(&format!("## Subtask\n{task_content}\n\n## Most similar past subtasks\n"));
    for (i, (sim, r)) in neighbors.iter().enumerate() {
        prompt.push_str(&format!(
            "{}. similarity {:.3}, d={:.3}, c={:.3}\n{}\n",
            i + 1,
            sim,
            r.complexity,
            r.completeness,
            r.content
        ));
        if !r.reflection.is_empty() {
            prompt.push_str(&format!("reflection: {}\n", r.reflection));
        }
    }
    prompt.push_str(&format!(
        "\n## Statistics of their clusters ({} records)\ncomplexity d: mean {:.3}, std {:.3}\ncompleteness c: mean {:.3}, std {:.3}\n",
        stats.size, stats.mean_complexity, stats.std_complexity, stats.mean_completeness, stats.std_completeness
    ));

    let out = llm.ask_structured(AssistantKind::Estimator, task_content, &prompt, &estimator_schema(), retries)?;
    Ok(EffectiveScoreEstimate::from_scores(
        out.number("d"),
        out.number("c"),
        refs.iter().map(|r| r.id.clone()).collect(),
    ))
}
