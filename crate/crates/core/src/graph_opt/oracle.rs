//! Exact maximum-weight matching for small graphs, used to check the
//! greedy matcher.

use super::coarsen::{Matching, MergeCandidate};
use crate::prelude::*;

pub const ORACLE_NODE_LIMIT: usize = 16;

const TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("exact matching supports at most {limit} nodes, got {nodes}")]
    TooLarge { nodes: usize, limit: usize },
}

/// Maximum total advantage over all matchings of the non-negative
/// candidates. Among optimal matchings the one whose pairs, listed by their
/// smaller endpoint, form the lexicographically smallest id sequence wins.
pub fn exact_matching_oracle(edges: &[MergeCandidate]) -> Result<Matching, OracleError> {
    let ids: Vec<&str> = edges
        .iter()
        .flat_map(|e| [e.node_i.as_str(), e.node_j.as_str()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = ids.len();
    if n > ORACLE_NODE_LIMIT {
        return Err(OracleError::TooLarge { nodes: n, limit: ORACLE_NODE_LIMIT });
    }
    let index = |id: &str| ids.binary_search(&id).expect("collected above");

    // best candidate per unordered pair; first one wins ties
    let mut weight: Vec<Vec<Option<usize>>> = vec![vec![None; n]; n];
    for (k, e) in edges.iter().enumerate() {
        if e.advantage.is_nan() || e.advantage < 0.0 || e.node_i == e.node_j {
            continue;
        }
        let (u, v) = (index(&e.node_i), index(&e.node_j));
        let (u, v) = (u.min(v), u.max(v));
        match weight[u][v] {
            Some(prev) if edges[prev].advantage >= e.advantage => {}
            _ => weight[u][v] = Some(k),
        }
    }

    let full = (1usize << n) - 1;
    let mut memo: Vec<f64> = vec![f64::NAN; 1 << n];
    fn best(mask: usize, full: usize, n: usize, w: &[Vec<Option<usize>>], e: &[MergeCandidate], memo: &mut [f64]) -> f64 {
        if mask == full {
            return 0.0;
        }
        if !memo[mask].is_nan() {
            return memo[mask];
        }
        let u = (!mask).trailing_zeros() as usize;
        let mut value = best(mask | 1 << u, full, n, w, e, memo);
        for v in (u + 1)..n {
            if mask & (1 << v) == 0 {
                if let Some(k) = w[u][v] {
                    value = value.max(e[k].advantage + best(mask | 1 << u | 1 << v, full, n, w, e, memo));
                }
            }
        }
        memo[mask] = value;
        value
    }

    let mut out = Matching::default();
    if n == 0 {
        return Ok(out);
    }
    let mut mask = 0usize;
    while mask != full {
        let here = best(mask, full, n, &weight, edges, &mut memo);
        if here <= TIE {
            break;
        }
        let u = (!mask).trailing_zeros() as usize;
        let mut paired = false;
        for v in (u + 1)..n {
            if mask & (1 << v) != 0 {
                continue;
            }
            if let Some(k) = weight[u][v] {
                let next = mask | 1 << u | 1 << v;
                if (edges[k].advantage + best(next, full, n, &weight, edges, &mut memo) - here).abs() <= TIE {
                    out.try_add(&edges[k]);
                    mask = next;
                    paired = true;
                    break;
                }
            }
        }
        if !paired {
            mask |= 1 << u;
        }
    }
    Ok(out)
}
