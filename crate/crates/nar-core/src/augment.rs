//! Topology-preserving augmentation.
//!
//! A relabeling is flow-consistent when every edge still points from a
//! lower to a higher encoding position — exactly the linear extensions of
//! the DAG's partial order. The isomorphic superset (all relabelings,
//! flow-consistent or not) is kept as the ablation baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{ArchGraph, Permutation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    Flow,
    #[serde(alias = "iso")]
    Isomorphic,
}

impl std::str::FromStr for AugMode {
    type Err = crate::NarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(AugMode::Flow),
            "iso" | "isomorphic" => Ok(AugMode::Isomorphic),
            other => Err(crate::NarError::InvalidSpec(format!(
                "unknown augmentation mode {other:?}"
            ))),
        }
    }
}

/// Enumerates non-identity flow-consistent permutations by backtracking
/// over the in-degree-zero frontier, trying candidate nodes in ascending
/// order (so output order is deterministic and lexicographic in the chosen
/// node sequence). Stops after `cap` permutations.
pub fn enumerate_flow_consistent(g: &ArchGraph, cap: usize) -> Vec<Permutation> {
    let n = g.n_nodes();
    let mut indeg = vec![0usize; n];
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(src, dst) in g.edges() {
        indeg[dst] += 1;
        succs[src].push(dst);
    }
    let mut out = Vec::new();
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    backtrack(
        n,
        &mut indeg,
        &succs,
        &mut placed,
        &mut order,
        &mut out,
        cap,
    );
    out
}

fn backtrack(
    n: usize,
    indeg: &mut [usize],
    succs: &[Vec<usize>],
    placed: &mut [bool],
    order: &mut Vec<usize>,
    out: &mut Vec<Permutation>,
    cap: usize,
) {
    if out.len() >= cap {
        return;
    }
    if order.len() == n {
        if order.iter().enumerate().any(|(pos, &v)| pos != v) {
            let mut mapping = vec![0usize; n];
            for (pos, &v) in order.iter().enumerate() {
                mapping[v] = pos;
            }
            out.push(Permutation::new(mapping).expect("valid by construction"));
        }
        return;
    }
    for v in 0..n {
        if placed[v] || indeg[v] != 0 {
            continue;
        }
        placed[v] = true;
        order.push(v);
        for &s in &succs[v] {
            indeg[s] -= 1;
        }
        backtrack(n, indeg, succs, placed, order, out, cap);
        for &s in &succs[v] {
            indeg[s] += 1;
        }
        order.pop();
        placed[v] = false;
        if out.len() >= cap {
            return;
        }
    }
}

/// Enumerates all non-identity permutations of [0, N) in lexicographic
/// order, up to `cap`. Every relabeling yields an isomorphic graph, so this
/// strictly contains the flow-consistent set.
pub fn enumerate_isomorphic(g: &ArchGraph, cap: usize) -> Vec<Permutation> {
    let n = g.n_nodes();
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    while out.len() < cap && next_permutation(&mut current) {
        out.push(Permutation::new(current.clone()).expect("valid by construction"));
    }
    out
}

/// Advances to the next lexicographic permutation in place; false at the end.
fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Internal enumeration bound when sampling: large enough that small pools
/// are always exhaustive, bounded so huge pools stay cheap.
fn pool_cap(k: usize) -> usize {
    256usize.max(k.saturating_mul(4))
}

/// Seeded sample of up to `k` relabeled graphs without replacement from the
/// chosen enumeration. Relabelings that reproduce the original encoding
/// (automorphisms of the concrete node payloads) are dropped, so every
/// returned graph has a digest different from the input. Returns fewer than
/// `k` when the pool is smaller.
pub fn sample_augmented(
    g: &ArchGraph,
    k: usize,
    mode: AugMode,
    seed: u64,
) -> Result<Vec<ArchGraph>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let pool = match mode {
        AugMode::Flow => enumerate_flow_consistent(g, pool_cap(k)),
        AugMode::Isomorphic => enumerate_isomorphic(g, pool_cap(k)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    indices.shuffle(&mut rng);
    let original_hash = g.canonical_hash();
    let mut out = Vec::with_capacity(k.min(pool.len()));
    for idx in indices {
        if out.len() == k {
            break;
        }
        let relabeled = g.relabel(&pool[idx])?;
        if relabeled.canonical_hash() != original_hash {
            out.push(relabeled);
        }
    }
    Ok(out)
}
