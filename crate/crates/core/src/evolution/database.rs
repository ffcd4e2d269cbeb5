use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvaluationScores;
use crate::hash::{fnv1a64_extend, fnv_offset};
use crate::prelude::*;
use crate::workflow::Workflow;

/// Upper bounds (exclusive) of the prompt-length buckets; the last bucket
/// is open-ended.
pub const LENGTH_BUCKETS: [usize; 3] = [200, 500, 1000];

/// MAP-Elites coordinates: node count (1 to 5, where 5 means five or
/// more) and total prompt length bucket (0 to 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub nodes: u8,
    pub length: u8,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = if self.nodes >= 5 { "5+".to_owned() } else { self.nodes.to_string() };
        let length = match self.length as usize {
            k if k < LENGTH_BUCKETS.len() => format!("<{}", LENGTH_BUCKETS[k]),
            _ => format!(">={}", LENGTH_BUCKETS[LENGTH_BUCKETS.len() - 1]),
        };
        write!(f, "({nodes}, {length})")
    }
}

pub fn cell_of(w: &Workflow) -> Cell {
    let nodes = w.nodes.len().clamp(1, 5) as u8;
    let chars = w.prompt_chars();
    let length = LENGTH_BUCKETS.iter().position(|b| chars < *b).unwrap_or(LENGTH_BUCKETS.len()) as u8;
    Cell { nodes, length }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<EvaluationScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub generation: u32,
    pub island: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<Cell>,
    /// Admission sequence number; earlier wins ties.
    pub order: u64,
}

impl Candidate {
    pub fn combined(&self) -> Option<f64> {
        self.scores.as_ref().map(|s| s.combined)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AdmissionOutcome {
    NewCell,
    Displaced { incumbent: String },
    RejectedByCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<EvaluationScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Sampled candidates plus the problem text. The first entry, when
/// present, is the island's best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub problem: String,
    pub island: usize,
    pub entries: Vec<ContextEntry>,
}

impl PromptContext {
    pub fn best(&self) -> Option<&ContextEntry> {
        self.entries.first()
    }

    /// Text embedded in the generator prompt.
    pub fn render(&self) -> String {
        let mut out = format!("## Problem\n{}\n", self.problem);
        for (k, e) in self.entries.iter().enumerate() {
            let label = if k == 0 { "best so far" } else { "earlier attempt" };
            out.push_str(&format!("\n## Workflow {} ({label}, {})\n", k + 1, e.id));
            match (&e.scores, &e.error) {
                (Some(s), _) => out.push_str(&format!(
                    "scores: instruction_following {:.3}, correctness {:.3}, plan_progress {:.3}, combined {:.3}\n",
                    s.instruction_following, s.correctness, s.plan_progress, s.combined
                )),
                (None, Some(err)) => out.push_str(&format!("FAILED: {err}\n")),
                (None, None) => out.push_str("not evaluated\n"),
            }
            if let Some(r) = e.scores.as_ref().map(|s| s.reflections.as_str()).filter(|r| !r.is_empty()) {
                out.push_str(&format!("reflections: {r}\n"));
            }
            out.push_str("```\n");
            out.push_str(&e.source);
            if !e.source.ends_with('\n') {
                out.push('\n');
            }
            out.push_str("```\n");
        }
        out
    }
}

const SAMPLE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramDatabase {
    candidates: Vec<Candidate>,
    islands: Vec<Vec<String>>,
    grid: BTreeMap<Cell, String>,
    rng_seed: u64,
    next_order: u64,
}

impl ProgramDatabase {
    pub fn new(islands: usize, rng_seed: u64) -> Self {
        Self { candidates: Vec::new(), islands: vec![Vec::new(); islands.max(1)], grid: BTreeMap::new(), rng_seed, next_order: 0 }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn island_count(&self) -> usize {
        self.islands.len()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn island(&self, island: usize) -> &[String] {
        self.islands.get(island).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn grid(&self) -> &BTreeMap<Cell, String> {
        &self.grid
    }

    pub fn get(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    /// Id for the next candidate.
    pub fn fresh_id(&self) -> String {
        format!("c{:03}", self.next_order)
    }

    fn best_of<'a>(&self, it: impl Iterator<Item = &'a Candidate>) -> Option<&'a Candidate> {
        it.filter(|c| c.scores.is_some()).fold(None, |best: Option<&Candidate>, c| match best {
            Some(b) if b.combined() >= c.combined() => Some(b),
            _ => Some(c),
        })
    }

    /// Highest combined score; ties go to the earliest admitted.
    pub fn best(&self) -> Option<&Candidate> {
        self.best_of(self.candidates.iter())
    }

    pub fn best_on(&self, island: usize) -> Option<&Candidate> {
        let ids: BTreeSet<&str> = self.island(island).iter().map(String::as_str).collect();
        self.best_of(self.candidates.iter().filter(|c| ids.contains(c.id.as_str())))
    }

    /// Stores `c` on its island and offers it its grid cell. Unscored
    /// candidates are stored but never take a cell.
    pub fn admit(&mut self, mut c: Candidate) -> AdmissionOutcome {
        c.island = c.island.min(self.islands.len() - 1);
        c.order = self.next_order;
        self.next_order += 1;
        self.islands[c.island].push(c.id.clone());
        let outcome = match (c.cell, c.combined()) {
            (Some(cell), Some(score)) => match self.grid.get(&cell) {
                None => {
                    self.grid.insert(cell, c.id.clone());
                    AdmissionOutcome::NewCell
                }
                Some(inc) => {
                    let inc_score = self.get(inc).and_then(Candidate::combined).unwrap_or(f64::NEG_INFINITY);
                    if score > inc_score {
                        let incumbent = self.grid.insert(cell, c.id.clone()).expect("occupied");
                        AdmissionOutcome::Displaced { incumbent }
                    } else {
                        AdmissionOutcome::RejectedByCell
                    }
                }
            },
            _ => AdmissionOutcome::RejectedByCell,
        };
        self.candidates.push(c);
        outcome
    }

    /// Up to `n` candidates from `island`: its best first, then picks
    /// drawn without replacement with probability proportional to the
    /// combined score (failed candidates get a small floor weight).
    /// Sampling is seeded from the database seed, the island and the
    /// current candidate count.
    pub fn sample_context(&self, island: usize, n: usize, problem: &str) -> PromptContext {
        let mut ctx = PromptContext { problem: problem.to_owned(), island, entries: Vec::new() };
        let members: Vec<&Candidate> = self.island(island).iter().filter_map(|id| self.get(id)).collect();
        if members.is_empty() || n == 0 {
            return ctx;
        }
        let entry = |c: &Candidate| ContextEntry {
            id: c.id.clone(),
            source: c.source.clone(),
            scores: c.scores.clone(),
            error: c.error.clone(),
        };
        let best = self.best_on(island).unwrap_or(members[0]);
        ctx.entries.push(entry(best));
        let mut pool: Vec<&Candidate> = members.into_iter().filter(|c| c.id != best.id).collect();
        let mut state = fnv_offset();
        for part in [self.rng_seed, island as u64, self.candidates.len() as u64] {
            state = fnv1a64_extend(state, &part.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(state);
        while ctx.entries.len() < n && !pool.is_empty() {
            let weights: Vec<f64> = pool.iter().map(|c| c.combined().unwrap_or(0.0).max(0.0) + SAMPLE_FLOOR).collect();
            let total: f64 = weights.iter().sum();
            let mut r = rng.gen::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                if r < *w {
                    pick = k;
                    break;
                }
                r -= w;
            }
            ctx.entries.push(entry(pool.remove(pick)));
        }
        ctx
    }

    /// Copies each island's best to the next island in ring order. Copies
    /// get fresh ids and keep source, scores and cell; the grid is left
    /// alone. Returns the ids of the copies.
    pub fn migrate(&mut self) -> Vec<String> {
        let k = self.islands.len();
        if k < 2 {
            log::warn!("migration needs at least two islands; skipped");
            return Vec::new();
        }
        let bests: Vec<Option<Candidate>> = (0..k).map(|i| self.best_on(i).cloned()).collect();
        let mut copies = Vec::new();
        for (i, best) in bests.into_iter().enumerate() {
            let Some(b) = best else { continue };
            let id = self.fresh_id();
            let copy = Candidate {
                id: id.clone(),
                parent_id: Some(b.id.clone()),
                island: (i + 1) % k,
                order: self.next_order,
                ..b
            };
            self.next_order += 1;
            self.islands[copy.island].push(id.clone());
            self.candidates.push(copy);
            copies.push(id);
        }
        copies
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::ScoreWeights;
    use crate::llm::AssistantKind;
    use proptest::prelude::*;

    fn scored(db: &ProgramDatabase, island: usize, combined: f64, cell: Cell) -> Candidate {
        let w = ScoreWeights { instruction_following: 0.0, correctness: 1.0, plan_progress: 0.0 };
        Candidate {
            id: db.fresh_id(),
            source: format!("src {combined}"),
            scores: Some(EvaluationScores::new(&w, 0.0, combined, 0.0, format!("r{combined}"))),
            error: None,
            parent_id: None,
            generation: 0,
            island,
            cell: Some(cell),
            order: 0,
        }
    }

    const CELL: Cell = Cell { nodes: 1, length: 0 };

    #[test]
    fn cells() {
        let w = Workflow::single("a", AssistantKind::Coder, &"x".repeat(100));
        assert_eq!(cell_of(&w), Cell { nodes: 1, length: 0 });
        assert_eq!(cell_of(&w).to_string(), "(1, <200)");
        let mut big = w.clone();
        for i in 0..5 {
            let mut n = big.nodes[0].clone();
            n.id = format!("n{i}");
            big.nodes.push(n);
        }
        assert_eq!(cell_of(&big).nodes, 5);
        assert_eq!(cell_of(&big).length, 2);
        assert_eq!(cell_of(&big).to_string(), "(5+, <1000)");
        assert_eq!(cell_of(&w), cell_of(&w.clone()));
        let huge = Workflow::single("a", AssistantKind::Coder, &"y".repeat(1000));
        assert_eq!(cell_of(&huge).to_string(), "(1, >=1000)");
    }

    #[test]
    fn admission_rules() {
        let mut db = ProgramDatabase::new(2, 0);
        let a = scored(&db, 0, 0.7, CELL);
        assert_eq!(db.admit(a), AdmissionOutcome::NewCell);
        let b = scored(&db, 0, 0.9, CELL);
        assert_eq!(db.admit(b), AdmissionOutcome::Displaced { incumbent: "c000".into() });
        let c = scored(&db, 1, 0.9, CELL);
        assert_eq!(db.admit(c), AdmissionOutcome::RejectedByCell);
        assert_eq!(db.grid()[&CELL], "c001");
        assert_eq!(db.len(), 3);
    }

    #[test]
    fn failed_candidate_takes_no_cell() {
        let mut db = ProgramDatabase::new(1, 0);
        let mut c = scored(&db, 0, 0.5, CELL);
        c.scores = None;
        c.error = Some("judge failed".into());
        assert_eq!(db.admit(c), AdmissionOutcome::RejectedByCell);
        assert!(db.grid().is_empty());
        let ctx = db.sample_context(0, 3, "p");
        assert_eq!(ctx.entries.len(), 1);
        assert!(ctx.render().contains("FAILED: judge failed"));
    }

    #[test]
    fn sampling_saturates_and_keeps_elite() {
        let mut db = ProgramDatabase::new(1, 7);
        let c = scored(&db, 0, 0.5, CELL);
        db.admit(c);
        let ctx = db.sample_context(0, 3, "problem");
        assert_eq!(ctx.entries.len(), 1);
        let c = scored(&db, 0, 0.9, Cell { nodes: 2, length: 0 });
        db.admit(c);
        let c = scored(&db, 0, 0.1, Cell { nodes: 3, length: 0 });
        db.admit(c);
        for n in 1..4 {
            let ctx = db.sample_context(0, n, "problem");
            assert_eq!(ctx.entries[0].id, "c001");
            assert_eq!(ctx.entries.len(), n);
            assert_eq!(ctx, db.sample_context(0, n, "problem"));
        }
        assert!(db.sample_context(0, 3, "problem").render().starts_with("## Problem\nproblem\n"));
    }

    #[test]
    fn empty_island_gives_problem_only() {
        let db = ProgramDatabase::new(2, 0);
        let ctx = db.sample_context(1, 3, "p");
        assert!(ctx.entries.is_empty());
        assert_eq!(ctx.render(), "## Problem\np\n");
    }

    #[test]
    fn migration_ring() {
        let mut db = ProgramDatabase::new(2, 0);
        for (island, s) in [(0, 0.3), (0, 0.6), (0, 0.2), (1, 0.4), (1, 0.8), (1, 0.1)] {
            let c = scored(&db, island, s, Cell { nodes: 1 + (db.len() % 5) as u8, length: 0 });
            db.admit(c);
        }
        let grid_before = db.grid().clone();
        assert_eq!(db.len(), 6);
        let copies = db.migrate();
        assert_eq!(db.len(), 8);
        assert_eq!(db.grid(), &grid_before);
        let c0 = db.get(&copies[0]).unwrap();
        assert_eq!((c0.island, c0.parent_id.as_deref(), c0.source.as_str()), (1, Some("c001"), "src 0.6"));
        let c1 = db.get(&copies[1]).unwrap();
        assert_eq!((c1.island, c1.parent_id.as_deref()), (0, Some("c004")));
    }

    #[test]
    fn single_island_migration_is_noop() {
        let mut db = ProgramDatabase::new(1, 0);
        let c = scored(&db, 0, 0.3, CELL);
        db.admit(c);
        assert!(db.migrate().is_empty());
        assert_eq!(db.len(), 1);
    }

    proptest! {
        #[test]
        fn grid_holds_cell_maximum(ops in proptest::collection::vec((0u8..3, 0u8..2, 0u32..100, 0usize..2), 1..40)) {
            let mut db = ProgramDatabase::new(2, 1);
            let mut best_per_cell: BTreeMap<Cell, f64> = BTreeMap::new();
            let mut best_seen = f64::NEG_INFINITY;
            for (nodes, length, score, island) in ops {
                let cell = Cell { nodes: nodes + 1, length };
                let s = score as f64 / 100.0;
                let c = scored(&db, island, s, cell);
                db.admit(c);
                let e = best_per_cell.entry(cell).or_insert(s);
                *e = e.max(s);
                for (cell, id) in db.grid() {
                    let held = db.get(id).unwrap().combined().unwrap();
                    prop_assert!((held - best_per_cell[cell]).abs() < 1e-12);
                }
                let now = db.best().unwrap().combined().unwrap();
                prop_assert!(now >= best_seen);
                best_seen = now;
                if db.len().is_multiple_of(5) {
                    db.migrate();
                }
            }
        }
    }
}
