//! Heterogeneous tagging graph over input tokens, retrieved neighbors with
//! their context windows, and neighbor label nodes.
//!
//! Node order is deterministic: input tokens first, then for each input
//! position and each of its neighbors (in retrieval order) the window nodes
//! left to right followed by the label node.

use std::fmt::{self, Write as _};

use gnnsl_tensor::Tensor;

use crate::datastore::{Datastore, Neighbor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeType {
    Input = 0,
    Neighbor = 1,
    Label = 2,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::Input, NodeType::Neighbor, NodeType::Label];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Input => "input",
            NodeType::Neighbor => "neighbor",
            NodeType::Label => "label",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    InputInput = 0,
    NeighborInput = 1,
    NeighborNeighbor = 2,
    LabelNeighbor = 3,
}

impl EdgeType {
    pub const ALL: [EdgeType; 4] = [
        EdgeType::InputInput,
        EdgeType::NeighborInput,
        EdgeType::NeighborNeighbor,
        EdgeType::LabelNeighbor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::InputInput => "InputInput",
            EdgeType::NeighborInput => "NeighborInput",
            EdgeType::NeighborNeighbor => "NeighborNeighbor",
            EdgeType::LabelNeighbor => "LabelNeighbor",
        }
    }

    /// The unordered pair of endpoint types this edge type joins.
    pub fn endpoints(self) -> (NodeType, NodeType) {
        match self {
            EdgeType::InputInput => (NodeType::Input, NodeType::Input),
            EdgeType::NeighborInput => (NodeType::Neighbor, NodeType::Input),
            EdgeType::NeighborNeighbor => (NodeType::Neighbor, NodeType::Neighbor),
            EdgeType::LabelNeighbor => (NodeType::Label, NodeType::Neighbor),
        }
    }

    pub fn admits(self, src: NodeType, dst: NodeType) -> bool {
        let (a, b) = self.endpoints();
        (src, dst) == (a, b) || (src, dst) == (b, a)
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a node's initial feature comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Input position; feature is the encoder representation.
    Input(usize),
    /// Datastore record; feature is its stored key.
    Record(usize),
    /// Sentence-boundary filler in a clipped window.
    Boundary,
    /// Label of a retrieved record; feature is a label-embedding row.
    Label(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeType,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// One-sided context radius.
    pub c: usize,
    pub include_labels: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { c: 3, include_labels: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    /// Input position → node id.
    pub query_map: Vec<usize>,
    /// Constant features (`nodes × d`); rows of boundary and label nodes are zero
    /// and are supplied from learnable tables.
    pub constant_features: Tensor,
}

impl TagGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn d(&self) -> usize {
        self.constant_features.shape()[1]
    }

    pub fn count_nodes(&self, kind: NodeType) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn count_edges(&self, kind: EdgeType) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Incoming edge indices per node.
    pub fn incoming(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.nodes.len()];
        for (i, e) in self.edges.iter().enumerate() {
            inc[e.dst].push(i);
        }
        inc
    }

    /// Full initial feature matrix given the label-embedding table
    /// (`labels × d`) and the boundary vector.
    pub fn initial_features(&self, label_table: &Tensor, boundary: &[f64]) -> Result<Tensor> {
        let d = self.d();
        if boundary.len() != d || label_table.dims2().is_none_or(|(_, w)| w != d) {
            return Err(Error::Dimension(format!(
                "label table {:?} / boundary {} do not match width {d}",
                label_table.shape(),
                boundary.len()
            )));
        }
        let mut x = self.constant_features.clone();
        for (i, n) in self.nodes.iter().enumerate() {
            let row = match n.provenance {
                Provenance::Boundary => boundary,
                Provenance::Label(l) => {
                    if l as usize >= label_table.shape()[0] {
                        return Err(Error::Label(format!("label {l} has no embedding row")));
                    }
                    label_table.row(l as usize)
                }
                _ => continue,
            };
            x.data_mut()[i * d..(i + 1) * d].copy_from_slice(row);
        }
        Ok(x)
    }

    /// One `src dst TYPE` line per directed edge.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            writeln!(out, "{} {} {}", e.src, e.dst, e.kind).expect("writing to a String");
        }
        out
    }
}

/// Builds the graph for one sentence with representations `reps` (one row
/// per token) and per-token neighbor sets drawn from `store`.
pub fn construct(reps: &[Vec<f64>], neighbors: &[Vec<Neighbor>], store: &Datastore, cfg: WindowConfig) -> Result<TagGraph> {
    if reps.len() != neighbors.len() {
        return Err(Error::Dimension(format!("{} representations for {} neighbor sets", reps.len(), neighbors.len())));
    }
    let d = reps.first().map_or(store.d(), Vec::len);
    if let Some(r) = reps.iter().find(|r| r.len() != d) {
        return Err(Error::Dimension(format!("representation of width {} among width {d}", r.len())));
    }
    if !neighbors.iter().all(Vec::is_empty) && store.d() != d {
        return Err(Error::Dimension(format!("store width {} differs from representation width {d}", store.d())));
    }
    let n = reps.len();
    let mut nodes = Vec::new();
    let mut feats: Vec<f64> = Vec::new();
    let mut edges = Vec::new();

    for (i, r) in reps.iter().enumerate() {
        nodes.push(Node {
            kind: NodeType::Input,
            provenance: Provenance::Input(i),
        });
        feats.extend_from_slice(r);
    }
    for s in 0..n {
        for t in 0..n {
            if s != t {
                edges.push(Edge {
                    src: s,
                    dst: t,
                    kind: EdgeType::InputInput,
                });
            }
        }
    }

    let push = |nodes: &mut Vec<Node>, feats: &mut Vec<f64>, kind, provenance, row: Option<&[f32]>| -> usize {
        nodes.push(Node { kind, provenance });
        match row {
            Some(k) => feats.extend(k.iter().map(|&v| v as f64)),
            None => feats.extend(std::iter::repeat_n(0.0, d)),
        }
        nodes.len() - 1
    };

    for (i, nset) in neighbors.iter().enumerate() {
        for nb in nset {
            if nb.record >= store.len() {
                return Err(Error::Consistency(format!("neighbor record {} outside store of {}", nb.record, store.len())));
            }
            let e = store.entry(nb.record);
            let len = store.sentence_len(e.sentence_id).ok_or_else(|| {
                Error::Consistency(format!("record {} points at unknown sentence {}", nb.record, e.sentence_id))
            })?;
            let p = e.token_index as usize;
            let lo = p.saturating_sub(cfg.c);
            let hi = (p + cfg.c).min(len - 1);
            let mut window = Vec::with_capacity(2 * cfg.c + 1);
            let mut center = 0;
            if p < cfg.c {
                window.push(push(&mut nodes, &mut feats, NodeType::Neighbor, Provenance::Boundary, None));
            }
            for q in lo..=hi {
                let rec = store.find(e.sentence_id, q as u32).ok_or_else(|| {
                    Error::Consistency(format!("sentence {} token {q} missing from store", e.sentence_id))
                })?;
                let id = push(&mut nodes, &mut feats, NodeType::Neighbor, Provenance::Record(rec), Some(store.key(rec)));
                if q == p {
                    center = id;
                }
                window.push(id);
            }
            if p + cfg.c >= len {
                window.push(push(&mut nodes, &mut feats, NodeType::Neighbor, Provenance::Boundary, None));
            }
            for &a in &window {
                for &b in &window {
                    if a != b {
                        edges.push(Edge {
                            src: a,
                            dst: b,
                            kind: EdgeType::NeighborNeighbor,
                        });
                    }
                }
            }
            edges.push(Edge {
                src: center,
                dst: i,
                kind: EdgeType::NeighborInput,
            });
            edges.push(Edge {
                src: i,
                dst: center,
                kind: EdgeType::NeighborInput,
            });
            if cfg.include_labels {
                let l = push(&mut nodes, &mut feats, NodeType::Label, Provenance::Label(e.label_id), None);
                edges.push(Edge {
                    src: l,
                    dst: center,
                    kind: EdgeType::LabelNeighbor,
                });
                edges.push(Edge {
                    src: center,
                    dst: l,
                    kind: EdgeType::LabelNeighbor,
                });
            }
        }
    }
    let constant_features = Tensor::matrix(nodes.len(), d, feats)?;
    Ok(TagGraph {
        nodes,
        edges,
        query_map: (0..n).collect(),
        constant_features,
    })
}
