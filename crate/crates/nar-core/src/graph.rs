//! DAG representation of neural architectures.
//!
//! A graph is a sequence of typed operation nodes plus a set of directed
//! edges between node indices. Node order is the encoding order: position
//! in the `nodes` array is the index every other module refers to.

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{NarError, Result};

pub const MAX_ATTRS: usize = 8;
pub const MAX_SHAPE: usize = 4;

/// Ordered map from operation-name string to a contiguous 0-based index.
/// Serializes as the vocabulary-file format: a JSON object name -> index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpVocab {
    names: Vec<String>,
}

impl Serialize for OpVocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.names.len()))?;
        for (i, name) in self.names.iter().enumerate() {
            m.serialize_entry(name, &i)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for OpVocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        OpVocab::from_map(map).map_err(D::Error::custom)
    }
}

impl OpVocab {
    /// Builds a vocabulary from names in the given order. Indices follow
    /// the iteration order; duplicates are rejected.
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(NarError::InvalidGraph(format!(
                    "duplicate op name {n:?} in vocabulary"
                )));
            }
        }
        if names.is_empty() {
            return Err(NarError::InvalidGraph("empty op vocabulary".into()));
        }
        Ok(OpVocab { names })
    }

    /// Parses the vocabulary file format: a JSON object mapping name -> index.
    /// Indices must be unique and contiguous from 0.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut names = vec![None; map.len()];
        for (name, idx) in map {
            if idx >= names.len() {
                return Err(NarError::InvalidGraph(format!(
                    "op index {idx} out of range for vocabulary of size {}",
                    names.len()
                )));
            }
            if names[idx].is_some() {
                return Err(NarError::InvalidGraph(format!("duplicate op index {idx}")));
            }
            names[idx] = Some(name);
        }
        OpVocab::from_names(names.into_iter().map(|n| n.unwrap()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), serde_json::Value::from(i)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| NarError::UnknownOp(name.to_string()))
    }

    pub fn name_of(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One operation node: vocabulary index, up to 8 numeric attributes and up
/// to 4 output-shape entries. Absent slots are treated as 0 downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub op_index: usize,
    pub attrs: Vec<f64>,
    pub output_shape: Vec<u32>,
}

impl NodeRecord {
    pub fn op(op_index: usize) -> Self {
        NodeRecord {
            op_index,
            attrs: Vec::new(),
            output_shape: Vec::new(),
        }
    }
}

/// A validated DAG of operation nodes. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchGraph {
    nodes: Vec<NodeRecord>,
    /// Sorted, deduplicated (src, dst) pairs.
    edges: Vec<(usize, usize)>,
    /// Predecessor lists per node, each sorted ascending.
    preds: Vec<Vec<usize>>,
    pub name: Option<String>,
}

impl ArchGraph {
    /// Validates and builds a graph. Rejects out-of-range edge indices,
    /// self-loops, duplicate edges, cycles and empty node lists.
    pub fn new(
        nodes: Vec<NodeRecord>,
        edges: Vec<(usize, usize)>,
        name: Option<String>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(NarError::InvalidGraph(
                "graph must have at least one node".into(),
            ));
        }
        for node in &nodes {
            if node.attrs.len() > MAX_ATTRS {
                return Err(NarError::InvalidGraph(format!(
                    "node has {} attrs, at most {MAX_ATTRS} allowed",
                    node.attrs.len()
                )));
            }
            if node.output_shape.len() > MAX_SHAPE {
                return Err(NarError::InvalidGraph(format!(
                    "node has {} output_shape entries, at most {MAX_SHAPE} allowed",
                    node.output_shape.len()
                )));
            }
            if !node.attrs.iter().all(|a| a.is_finite()) {
                return Err(NarError::InvalidGraph("node attrs must be finite".into()));
            }
        }
        let mut edges = edges;
        edges.sort_unstable();
        for w in edges.windows(2) {
            if w[0] == w[1] {
                return Err(NarError::InvalidGraph(format!("duplicate edge {:?}", w[0])));
            }
        }
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(src, dst) in &edges {
            if src >= n || dst >= n {
                return Err(NarError::InvalidGraph(format!(
                    "edge ({src}, {dst}) out of range for {n} nodes"
                )));
            }
            if src == dst {
                return Err(NarError::InvalidGraph(format!("self-loop on node {src}")));
            }
            preds[dst].push(src);
        }
        let g = ArchGraph {
            nodes,
            edges,
            preds,
            name,
        };
        g.topological_sort()?; // acyclicity check
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Predecessor indices of node `i`, or the `{-1}` sentinel when the
    /// node has no incoming edges.
    pub fn predecessors(&self, i: usize) -> Result<Vec<i64>> {
        let n = self.n_nodes();
        let preds = self.preds.get(i).ok_or(NarError::NodeIndexOutOfRange {
            index: i,
            n_nodes: n,
        })?;
        if preds.is_empty() {
            Ok(vec![-1])
        } else {
            Ok(preds.iter().map(|&p| p as i64).collect())
        }
    }

    /// Kahn topological sort with smallest-index-first tie breaking.
    /// Errors when a cycle prevents visiting every node.
    pub fn topological_sort(&self) -> Result<Vec<usize>> {
        let n = self.n_nodes();
        let mut indeg = vec![0usize; n];
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(src, dst) in &self.edges {
            indeg[dst] += 1;
            succs[src].push(dst);
        }
        let mut frontier: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
            .filter(|&i| indeg[i] == 0)
            .map(std::cmp::Reverse)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(std::cmp::Reverse(v)) = frontier.pop() {
            order.push(v);
            for &s in &succs[v] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    frontier.push(std::cmp::Reverse(s));
                }
            }
        }
        if order.len() != n {
            return Err(NarError::InvalidGraph("cycle detected".into()));
        }
        Ok(order)
    }

    /// True iff every edge (a, b) satisfies p[a] < p[b]: relabeling by `p`
    /// keeps information flowing from lower to higher encoding positions.
    pub fn is_flow_consistent_order(&self, p: &Permutation) -> Result<bool> {
        if p.len() != self.n_nodes() {
            return Err(NarError::PermutationLength {
                expected: self.n_nodes(),
                got: p.len(),
            });
        }
        Ok(self.edges.iter().all(|&(a, b)| p.map(a) < p.map(b)))
    }

    /// Moves the node at original position `i` to position `p[i]` and
    /// rewrites every edge accordingly. Node payloads are unchanged, so the
    /// result is isomorphic to `self`.
    pub fn relabel(&self, p: &Permutation) -> Result<ArchGraph> {
        let n = self.n_nodes();
        if p.len() != n {
            return Err(NarError::PermutationLength {
                expected: n,
                got: p.len(),
            });
        }
        let mut nodes = vec![NodeRecord::op(0); n];
        for (i, node) in self.nodes.iter().enumerate() {
            nodes[p.map(i)] = node.clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|&(a, b)| (p.map(a), p.map(b)))
            .collect();
        ArchGraph::new(nodes, edges, self.name.clone())
    }

    /// Content digest of the ordered (nodes, edges) form. Two graphs hash
    /// equal only when their concrete encodings match; isomorphic
    /// relabelings hash differently.
    pub fn canonical_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.nodes.len() as u64).to_le_bytes());
        for node in &self.nodes {
            h.update((node.op_index as u64).to_le_bytes());
            h.update([node.attrs.len() as u8]);
            for a in &node.attrs {
                h.update(a.to_le_bytes());
            }
            h.update([node.output_shape.len() as u8]);
            for s in &node.output_shape {
                h.update(s.to_le_bytes());
            }
        }
        h.update((self.edges.len() as u64).to_le_bytes());
        for &(a, b) in &self.edges {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

/// A bijection on [0, N): `mapping[i]` is the new position of original node `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(NarError::PermutationNotBijective(n));
            }
            seen[m] = true;
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn map(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    /// Composition `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation> {
        if self.len() != other.len() {
            return Err(NarError::PermutationLength {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(Permutation {
            mapping: other.mapping.iter().map(|&m| self.mapping[m]).collect(),
        })
    }
}

// --- JSON schema ------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawNode {
    op: String,
    #[serde(default)]
    attrs: Option<Vec<f64>>,
    #[serde(default)]
    output_shape: Option<Vec<u32>>,
}

#[derive(Debug, Deserialize)]
struct RawGraph {
    nodes: Vec<RawNode>,
    #[serde(default)]
    edges: Vec<(i64, i64)>,
    #[serde(default)]
    name: Option<String>,
}

/// Parses an architecture JSON document against `vocab`. Node order in the
/// file is the encoding order.
pub fn parse_arch(text: &str, vocab: &OpVocab) -> Result<ArchGraph> {
    let raw: RawGraph = serde_json::from_str(text)?;
    build_from_raw(raw, vocab)
}

/// Same as [`parse_arch`] but starting from an already-parsed JSON value
/// (dataset lines embed architecture objects directly).
pub fn parse_arch_value(value: &serde_json::Value, vocab: &OpVocab) -> Result<ArchGraph> {
    let raw: RawGraph = serde_json::from_value(value.clone())?;
    build_from_raw(raw, vocab)
}

fn build_from_raw(raw: RawGraph, vocab: &OpVocab) -> Result<ArchGraph> {
    let n = raw.nodes.len() as i64;
    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for rn in &raw.nodes {
        nodes.push(NodeRecord {
            op_index: vocab.index_of(&rn.op)?,
            attrs: rn.attrs.clone().unwrap_or_default(),
            output_shape: rn.output_shape.clone().unwrap_or_default(),
        });
    }
    let mut edges = Vec::with_capacity(raw.edges.len());
    for &(a, b) in &raw.edges {
        if a < 0 || b < 0 || a >= n || b >= n {
            return Err(NarError::InvalidGraph(format!(
                "edge ({a}, {b}) out of range for {n} nodes"
            )));
        }
        edges.push((a as usize, b as usize));
    }
    ArchGraph::new(nodes, edges, raw.name)
}

/// Collects every op name appearing in a JSON architecture value, for
/// deriving a vocabulary when none is supplied.
pub fn collect_op_names(value: &serde_json::Value, into: &mut std::collections::BTreeSet<String>) {
    if let Some(nodes) = value.get("nodes").and_then(|n| n.as_array()) {
        for node in nodes {
            if let Some(op) = node.get("op").and_then(|o| o.as_str()) {
                into.insert(op.to_string());
            }
        }
    }
}

/// Serializes a graph back to the architecture JSON schema.
pub fn arch_to_json(g: &ArchGraph, vocab: &OpVocab) -> Result<serde_json::Value> {
    let mut nodes = Vec::with_capacity(g.n_nodes());
    for node in g.nodes() {
        let name = vocab.name_of(node.op_index).ok_or_else(|| {
            NarError::InvalidGraph(format!("op index {} not in vocabulary", node.op_index))
        })?;
        let mut o = serde_json::Map::new();
        o.insert("op".into(), name.into());
        if !node.attrs.is_empty() {
            o.insert("attrs".into(), node.attrs.clone().into());
        }
        if !node.output_shape.is_empty() {
            o.insert(
                "output_shape".into(),
                serde_json::to_value(&node.output_shape)?,
            );
        }
        nodes.push(serde_json::Value::Object(o));
    }
    let edges: Vec<serde_json::Value> = g
        .edges()
        .iter()
        .map(|&(a, b)| serde_json::Value::Array(vec![a.into(), b.into()]))
        .collect();
    let mut out = serde_json::Map::new();
    out.insert("nodes".into(), nodes.into());
    out.insert("edges".into(), edges.into());
    if let Some(name) = &g.name {
        out.insert("name".into(), name.clone().into());
    }
    Ok(serde_json::Value::Object(out))
}
