//! Synthetic desk-scale benchmark: random connected DAGs with a hidden
//! deterministic target that only depends on isomorphism invariants
//! (op-type histogram, node count, capped source-sink path count), so every
//! relabeling of a graph keeps its target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataItem, Dataset, Split};
use crate::graph::{ArchGraph, NodeRecord, OpVocab};

pub const PATH_COUNT_CAP: u64 = 32;

/// Random connected DAG: every node after the first draws at least one
/// parent among its predecessors in index order, so edges always ascend
/// and the graph validates by construction.
pub fn random_dag(
    rng: &mut ChaCha8Rng,
    min_nodes: usize,
    max_nodes: usize,
    vocab_size: usize,
) -> ArchGraph {
    let n = rng.gen_range(min_nodes..=max_nodes);
    let nodes = (0..n)
        .map(|_| NodeRecord::op(rng.gen_range(0..vocab_size)))
        .collect();
    let mut edges = Vec::new();
    for dst in 1..n {
        let mut any = false;
        for src in 0..dst {
            if rng.gen_bool(0.35) {
                edges.push((src, dst));
                any = true;
            }
        }
        if !any {
            edges.push((rng.gen_range(0..dst), dst));
        }
    }
    ArchGraph::new(nodes, edges, None).expect("generated DAG is valid")
}

/// Number of source-to-sink paths, capped to keep targets bounded.
pub fn path_count(g: &ArchGraph) -> u64 {
    let n = g.n_nodes();
    let mut outdeg = vec![0usize; n];
    for &(src, _) in g.edges() {
        outdeg[src] += 1;
    }
    let order = g.topological_sort().expect("validated graph");
    let mut paths = vec![0u64; n];
    for &v in &order {
        let preds = g.predecessors(v).expect("in range");
        if preds == [-1] {
            paths[v] = 1;
        } else {
            paths[v] = preds
                .iter()
                .map(|&p| paths[p as usize])
                .fold(0u64, |acc, x| acc.saturating_add(x))
                .min(PATH_COUNT_CAP);
        }
    }
    (0..n)
        .filter(|&v| outdeg[v] == 0)
        .map(|v| paths[v])
        .fold(0u64, |acc, x| acc.saturating_add(x))
        .min(PATH_COUNT_CAP)
}

/// Hidden scoring weights drawn once per benchmark seed.
#[derive(Debug, Clone)]
pub struct SynthTarget {
    op_weights: Vec<f64>,
    depth_weight: f64,
    path_weight: f64,
}

impl SynthTarget {
    pub fn from_seed(seed: u64, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e17_ba5e);
        let op_weights = (0..vocab_size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SynthTarget {
            op_weights,
            depth_weight: rng.gen_range(-0.5..0.5),
            path_weight: rng.gen_range(-0.25..0.25),
        }
    }

    pub fn score(&self, g: &ArchGraph) -> f64 {
        let mut total = 0.0;
        for node in g.nodes() {
            total += self.op_weights.get(node.op_index).copied().unwrap_or(0.0);
        }
        total += self.depth_weight * g.n_nodes() as f64;
        total += self.path_weight * path_count(g) as f64;
        total
    }
}

fn op_name(i: usize, width: usize) -> String {
    format!("op{i:0width$}")
}

/// Zero-padded op names so lexicographic vocabulary order matches indices.
pub fn synth_vocab(vocab_size: usize) -> OpVocab {
    let width = (vocab_size.saturating_sub(1)).to_string().len();
    OpVocab::from_names((0..vocab_size).map(|i| op_name(i, width))).expect("non-empty")
}

/// Generates `n_graphs` unique random DAGs with deterministic targets and a
/// shuffled 75/12.5/12.5 train/val/test split.
pub fn synth_benchmark(seed: u64, n_graphs: usize, max_nodes: usize, vocab_size: usize) -> Dataset {
    assert!(n_graphs >= 1, "need at least one graph");
    assert!(max_nodes >= 2, "need at least two nodes");
    assert!(vocab_size >= 1, "need a non-empty vocabulary");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scorer = SynthTarget::from_seed(seed, vocab_size);
    let mut seen = std::collections::HashSet::new();
    let mut graphs = Vec::with_capacity(n_graphs);
    let mut attempts = 0usize;
    while graphs.len() < n_graphs {
        attempts += 1;
        assert!(
            attempts <= n_graphs.saturating_mul(1000),
            "graph space too small for {n_graphs} unique graphs at max_nodes={max_nodes}"
        );
        let g = random_dag(&mut rng, 2, max_nodes, vocab_size);
        if seen.insert(g.canonical_hash()) {
            graphs.push(g);
        }
    }

    let n_train = n_graphs * 3 / 4;
    let n_val = (n_graphs - n_train) / 2;
    let mut order: Vec<usize> = (0..n_graphs).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Test; n_graphs];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let items = graphs
        .into_iter()
        .zip(splits)
        .map(|(graph, split)| {
            let target = scorer.score(&graph);
            DataItem {
                graph,
                target,
                split,
            }
        })
        .collect();
    Dataset {
        items,
        vocab: synth_vocab(vocab_size),
    }
}
