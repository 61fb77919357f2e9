//! Multi-head heterogeneous attention over a [`TagGraph`].
//!
//! Per layer and head (width `d_h = d / g`), with row-vector features:
//!
//! ```text
//! K(s) = W^k_τ(s) h_s      Q(n) = W^q_τ(n) h_n      V(s) = W^v_τ(s) h_s
//! M(s,e)  = V(s) W_φ(e)
//! P(n,s)  = K(s) W_φ(e) Q(n)^T · μ[τ(s), φ(e), τ(n)] / √d_h
//! A(n,·)  = softmax of P over every incoming edge of n
//! h'_n    = h_n + W^o_τ(n) ( concat_i Σ_s A_i M_i  ·  W^O )
//! ```
//!
//! `μ` holds one scalar per (source type, edge type, target type), shared
//! across heads and layers. Every projection is stored as `g × d_h × d_h`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use gnnsl_tensor::{softmax, ParamId, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{hex, sha256, Checkpoint, GNN_MAGIC};
use crate::datastore::{Datastore, NeighborSet};
use crate::encoder::{Encoder, CLIP_NORM};
use crate::error::{Error, Result};
use crate::graph::{construct, EdgeType, NodeType, Provenance, TagGraph, WindowConfig};
use crate::corpus::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct GnnConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    /// Neighbors retrieved per token when building graphs.
    pub k: usize,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    /// Probability of zeroing an input node's whole feature row, training only.
    pub input_dropout: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 8,
            d: 64,
            k: 32,
            seed: 1,
            lr: 0.02,
            epochs: 4,
            input_dropout: 0.5,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Argument("the GNN needs at least one layer".into()));
        }
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Argument(format!("width {} is not divisible by {} heads", self.d, self.heads)));
        }
        if self.k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::Argument(format!("input dropout {} outside [0, 1)", self.input_dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Flat index into `μ` for a (source type, edge type, target type) triple.
pub fn relation_index(src: NodeType, edge: EdgeType, dst: NodeType) -> usize {
    src.index() * 12 + edge.index() * 3 + dst.index()
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub key: [ParamId; 3],
    pub query: [ParamId; 3],
    pub value: [ParamId; 3],
    pub edge: [ParamId; 4],
    pub merge: ParamId,
    pub out: [ParamId; 3],
}

#[derive(Debug, Clone)]
pub struct GnnParameters {
    pub config: GnnConfig,
    pub label_count: usize,
    pub params: ParamSet,
    pub layers: Vec<LayerIds>,
    pub mu: ParamId,
    pub label_embedding: ParamId,
    pub boundary: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Digest of the encoder whose representations and store this model consumes.
    pub encoder_digest: [u8; 32],
}

/// Node features recorded on a tape; `rows[node]` is the node's row of `x`
/// (`usize::MAX` when the node is not carried).
#[derive(Debug, Clone)]
pub struct Features {
    pub x: Var,
    pub rows: Vec<usize>,
}

impl Features {
    pub fn identity(x: Var, n: usize) -> Self {
        Self { x, rows: (0..n).collect() }
    }

    fn rows_of(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&n| match self.rows.get(n) {
                Some(&r) if r != usize::MAX => Ok(r),
                _ => Err(Error::Index(format!("node {n} has no feature row"))),
            })
            .collect()
    }
}

/// Attention state for the targets of one layer.
struct Attended {
    /// Edge indices in evaluation order.
    edges: Vec<usize>,
    /// `edges × g` attention weights.
    weights: Var,
    /// `edges × d` messages.
    messages: Var,
    /// Compact target slot of each edge's destination.
    slots: Vec<usize>,
}

impl GnnParameters {
    pub fn new(label_count: usize, config: GnnConfig, encoder_digest: [u8; 32]) -> Result<Self> {
        config.validate()?;
        if label_count == 0 {
            return Err(Error::Argument("label set is empty".into()));
        }
        let (d, g, h) = (config.d, config.heads, config.head_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut u = |shape: &[usize]| -> Tensor {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("shape")
        };
        let mut p = ParamSet::new();
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let mut per_type = |p: &mut ParamSet, what: &str| -> Result<[ParamId; 3]> {
                let mut ids = [ParamId(0); 3];
                for t in NodeType::ALL {
                    ids[t.index()] = p.add(format!("layer{l}.{what}.{}", t.name()), u(&[g, h, h]))?;
                }
                Ok(ids)
            };
            let key = per_type(&mut p, "key")?;
            let query = per_type(&mut p, "query")?;
            let value = per_type(&mut p, "value")?;
            let mut edge = [ParamId(0); 4];
            for e in EdgeType::ALL {
                edge[e.index()] = p.add(format!("layer{l}.edge.{}", e.name()), u(&[g, h, h]))?;
            }
            let merge = p.add(format!("layer{l}.merge"), u(&[d, d]))?;
            let mut out = [ParamId(0); 3];
            for t in NodeType::ALL {
                out[t.index()] = p.add(format!("layer{l}.out.{}", t.name()), u(&[d, d]))?;
            }
            layers.push(LayerIds {
                key,
                query,
                value,
                edge,
                merge,
                out,
            });
        }
        let mu = p.add("mu", Tensor::filled(&[3, 4, 3], 1.0))?;
        let label_embedding = p.add("label_embedding", u(&[label_count, d]))?;
        let boundary = p.add("boundary", u(&[1, d]))?;
        let head_w = p.add("head.w", u(&[d, label_count]))?;
        let head_b = p.add("head.b", Tensor::zeros(&[label_count]))?;
        Ok(Self {
            config,
            label_count,
            params: p,
            layers,
            mu,
            label_embedding,
            boundary,
            head_w,
            head_b,
            encoder_digest,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    fn check_graph(&self, graph: &TagGraph) -> Result<()> {
        if graph.d() != self.d() {
            return Err(Error::Dimension(format!("graph features have width {}, model expects {}", graph.d(), self.d())));
        }
        Ok(())
    }

    /// Initial node features: constants for input and neighbor nodes,
    /// learnable rows for boundary and label nodes.
    pub fn initial_on(&self, tape: &mut Tape, params: &ParamSet, graph: &TagGraph) -> Result<Features> {
        self.check_graph(graph)?;
        let d = self.d();
        let mut rows = vec![0; graph.len()];
        let (mut fixed, mut fixed_data) = (Vec::new(), Vec::new());
        let (mut label_nodes, mut label_ids, mut boundary_nodes) = (Vec::new(), Vec::new(), Vec::new());
        for (i, node) in graph.nodes.iter().enumerate() {
            match node.provenance {
                Provenance::Label(l) => {
                    label_nodes.push(i);
                    label_ids.push(l as usize);
                }
                Provenance::Boundary => boundary_nodes.push(i),
                _ => {
                    fixed.push(i);
                    fixed_data.extend_from_slice(graph.constant_features.row(i));
                }
            }
        }
        let mut parts = Vec::new();
        if !fixed.is_empty() {
            parts.push(tape.constant(Tensor::matrix(fixed.len(), d, fixed_data)?));
        }
        if !label_nodes.is_empty() {
            parts.push(tape.param_rows(params, self.label_embedding, &label_ids)?);
        }
        if !boundary_nodes.is_empty() {
            parts.push(tape.param_rows(params, self.boundary, &vec![0; boundary_nodes.len()])?);
        }
        for (r, &i) in fixed.iter().chain(&label_nodes).chain(&boundary_nodes).enumerate() {
            rows[i] = r;
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        Ok(Features { x, rows })
    }

    fn attend(&self, tape: &mut Tape, params: &ParamSet, layer: usize, graph: &TagGraph, feats: &Features, targets: &[usize]) -> Result<Option<Attended>> {
        let ids = self.layer_ids(layer)?;
        let (g, h) = (self.config.heads, self.config.head_dim());
        let mut slot_of = vec![usize::MAX; graph.len()];
        for (slot, &t) in targets.iter().enumerate() {
            slot_of[t] = slot;
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in graph.edges.iter().enumerate() {
            if slot_of[e.dst] != usize::MAX {
                let r = relation_index(graph.nodes[e.src].kind, e.kind, graph.nodes[e.dst].kind);
                groups.entry(r).or_default().push(i);
            }
        }
        if groups.is_empty() {
            return Ok(None);
        }

        // per-type projections of the nodes that are actually used
        let mut src_rows: [Vec<usize>; 3] = Default::default();
        let mut dst_rows: [Vec<usize>; 3] = Default::default();
        let mut src_pos = vec![usize::MAX; graph.len()];
        let mut dst_pos = vec![usize::MAX; graph.len()];
        for edges in groups.values() {
            for &i in edges {
                let e = graph.edges[i];
                let ts = graph.nodes[e.src].kind.index();
                if src_pos[e.src] == usize::MAX {
                    src_pos[e.src] = src_rows[ts].len();
                    src_rows[ts].push(e.src);
                }
                let td = graph.nodes[e.dst].kind.index();
                if dst_pos[e.dst] == usize::MAX {
                    dst_pos[e.dst] = dst_rows[td].len();
                    dst_rows[td].push(e.dst);
                }
            }
        }
        let mut keys: [Option<Var>; 3] = [None; 3];
        let mut values: [Option<Var>; 3] = [None; 3];
        let mut queries: [Option<Var>; 3] = [None; 3];
        for t in 0..3 {
            if !src_rows[t].is_empty() {
                let xs = tape.gather_rows(feats.x, &feats.rows_of(&src_rows[t])?)?;
                let wk = tape.param(params, ids.key[t]);
                let wv = tape.param(params, ids.value[t]);
                keys[t] = Some(tape.head_matmul(xs, wk, true)?);
                values[t] = Some(tape.head_matmul(xs, wv, true)?);
            }
            if !dst_rows[t].is_empty() {
                let xt = tape.gather_rows(feats.x, &feats.rows_of(&dst_rows[t])?)?;
                let wq = tape.param(params, ids.query[t]);
                queries[t] = Some(tape.head_matmul(xt, wq, true)?);
            }
        }

        let mu = tape.param(params, self.mu);
        let mu = tape.reshape(mu, &[1, 36])?;
        let mut edge_w: [Option<Var>; 4] = [None; 4];
        let (mut order, mut slots, mut scores, mut messages) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (&r, edges) in &groups {
            let e0 = graph.edges[edges[0]];
            let (ts, td, phi) = (graph.nodes[e0.src].kind.index(), graph.nodes[e0.dst].kind.index(), e0.kind.index());
            // one edge transform per distinct source
            let mut uniq: Vec<usize> = Vec::new();
            let mut uniq_pos: HashMap<usize, usize> = HashMap::new();
            let sp: Vec<usize> = edges
                .iter()
                .map(|&i| {
                    let p = src_pos[graph.edges[i].src];
                    *uniq_pos.entry(p).or_insert_with(|| {
                        uniq.push(p);
                        uniq.len() - 1
                    })
                })
                .collect();
            let dp: Vec<usize> = edges.iter().map(|&i| dst_pos[graph.edges[i].dst]).collect();
            let k = tape.gather_rows(keys[ts].expect("source projected"), &uniq)?;
            let v = tape.gather_rows(values[ts].expect("source projected"), &uniq)?;
            let q = tape.gather_rows(queries[td].expect("target projected"), &dp)?;
            let wphi = match edge_w[phi] {
                Some(w) => w,
                None => {
                    let w = tape.param(params, ids.edge[phi]);
                    edge_w[phi] = Some(w);
                    w
                }
            };
            let kw = tape.head_matmul(k, wphi, false)?;
            let kw = tape.gather_rows(kw, &sp)?;
            let s = tape.head_dot(kw, q, g)?;
            let m = tape.slice_cols(mu, r, r + 1)?;
            let s = tape.mul(s, m)?;
            scores.push(tape.scale(s, 1.0 / (h as f64).sqrt()));
            let m = tape.head_matmul(v, wphi, false)?;
            messages.push(tape.gather_rows(m, &sp)?);
            for &i in edges {
                order.push(i);
                slots.push(slot_of[graph.edges[i].dst]);
            }
        }
        let scores = tape.concat(&scores, 0)?;
        let weights = tape.segment_softmax(scores, &slots, targets.len())?;
        let messages = tape.concat(&messages, 0)?;
        Ok(Some(Attended {
            edges: order,
            weights,
            messages,
            slots,
        }))
    }

    fn layer_ids(&self, layer: usize) -> Result<LayerIds> {
        self.layers
            .get(layer)
            .copied()
            .ok_or_else(|| Error::Index(format!("layer {layer} of {}", self.layers.len())))
    }

    /// One message-passing layer evaluated at `targets`. The result holds
    /// one row per target, in order; other nodes are dropped.
    pub fn layer_on(&self, tape: &mut Tape, params: &ParamSet, layer: usize, graph: &TagGraph, feats: &Features, targets: &[usize]) -> Result<Features> {
        let ids = self.layer_ids(layer)?;
        let mut rows = vec![usize::MAX; graph.len()];
        for (slot, &t) in targets.iter().enumerate() {
            rows[t] = slot;
        }
        let residual = tape.gather_rows(feats.x, &feats.rows_of(targets)?)?;
        let Some(att) = self.attend(tape, params, layer, graph, feats, targets)? else {
            return Ok(Features { x: residual, rows });
        };
        let weighted = tape.head_scale(att.weights, att.messages)?;
        let agg = tape.scatter_add_rows(weighted, &att.slots, targets.len())?;
        let w_merge = tape.param(params, ids.merge);
        let merged = tape.matmul(agg, w_merge)?;
        let mut delta: Option<Var> = None;
        for t in NodeType::ALL {
            let slots: Vec<usize> = (0..targets.len()).filter(|&s| graph.nodes[targets[s]].kind == t).collect();
            if slots.is_empty() {
                continue;
            }
            let part = tape.gather_rows(merged, &slots)?;
            let wo = tape.param(params, ids.out[t.index()]);
            let wo_t = tape.transpose(wo)?;
            let o = tape.matmul(part, wo_t)?;
            let placed = tape.scatter_add_rows(o, &slots, targets.len())?;
            delta = Some(match delta {
                Some(acc) => tape.add(acc, placed)?,
                None => placed,
            });
        }
        let x = tape.add(residual, delta.expect("targets are nonempty"))?;
        Ok(Features { x, rows })
    }

    /// Targets per layer such that the final input-node features are exact:
    /// the last layer updates inputs only, each earlier layer also updates the
    /// sources feeding the next layer's targets.
    pub fn receptive_targets(&self, graph: &TagGraph) -> Vec<Vec<usize>> {
        let l = self.config.layers;
        let mut needed = vec![false; graph.len()];
        for &q in &graph.query_map {
            needed[q] = true;
        }
        let mut out = vec![Vec::new(); l];
        for layer in (0..l).rev() {
            out[layer] = (0..graph.len()).filter(|&i| needed[i]).collect();
            if layer > 0 {
                let current = needed.clone();
                for e in &graph.edges {
                    if current[e.dst] {
                        needed[e.src] = true;
                    }
                }
            }
        }
        out
    }

    /// Final features of every input node (`n × d`).
    pub fn represent_on(&self, tape: &mut Tape, params: &ParamSet, graph: &TagGraph) -> Result<Var> {
        let mut feats = self.initial_on(tape, params, graph)?;
        for (layer, targets) in self.receptive_targets(graph).iter().enumerate() {
            feats = self.layer_on(tape, params, layer, graph, &feats, targets)?;
        }
        Ok(tape.gather_rows(feats.x, &feats.rows_of(&graph.query_map)?)?)
    }

    pub fn logits_on(&self, tape: &mut Tape, params: &ParamSet, graph: &TagGraph) -> Result<Var> {
        let h = self.represent_on(tape, params, graph)?;
        let w = tape.param(params, self.head_w);
        let b = tape.param(params, self.head_b);
        let z = tape.matmul(h, w)?;
        Ok(tape.add(z, b)?)
    }

    pub fn loss_on(&self, tape: &mut Tape, params: &ParamSet, graph: &TagGraph, gold: &[u32]) -> Result<Var> {
        if gold.len() != graph.query_map.len() {
            return Err(Error::Dimension(format!("{} gold labels for {} input nodes", gold.len(), graph.query_map.len())));
        }
        let logits = self.logits_on(tape, params, graph)?;
        let targets: Vec<usize> = gold.iter().map(|&l| l as usize).collect();
        Ok(tape.softmax_cross_entropy(logits, &targets)?)
    }

    /// Message from a source feature along an edge type, for one head.
    pub fn message(&self, layer: usize, head: usize, s_feat: &[f64], edge: EdgeType, s_type: NodeType) -> Result<Vec<f64>> {
        let ids = self.layer_ids(layer)?;
        let h = self.head_range(head, s_feat.len())?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, self.d(), s_feat.to_vec())?);
        let wv = tape.param(&self.params, ids.value[s_type.index()]);
        let wphi = tape.param(&self.params, ids.edge[edge.index()]);
        let v = tape.head_matmul(x, wv, true)?;
        let m = tape.head_matmul(v, wphi, false)?;
        Ok(tape.value(m).data()[h].to_vec())
    }

    fn head_range(&self, head: usize, width: usize) -> Result<std::ops::Range<usize>> {
        if width != self.d() {
            return Err(Error::Dimension(format!("feature width {width}, expected {}", self.d())));
        }
        if head >= self.config.heads {
            return Err(Error::Index(format!("head {head} of {}", self.config.heads)));
        }
        let h = self.config.head_dim();
        Ok(head * h..(head + 1) * h)
    }

    /// Attention weights of `target` over its incoming edges at `layer`,
    /// given node features `x`. Returns `(edge index, weight per head)` in
    /// edge-list order; empty for an isolated node.
    pub fn attention(&self, layer: usize, graph: &TagGraph, x: &Tensor, target: usize) -> Result<Vec<(usize, Vec<f64>)>> {
        if x.dims2() != Some((graph.len(), self.d())) {
            return Err(Error::Dimension(format!("features {:?} for {} nodes of width {}", x.shape(), graph.len(), self.d())));
        }
        if target >= graph.len() {
            return Err(Error::Index(format!("node {target} of {}", graph.len())));
        }
        let mut tape = Tape::new();
        let feats = Features::identity(tape.constant(x.clone()), graph.len());
        let Some(att) = self.attend(&mut tape, &self.params, layer, graph, &feats, &[target])? else {
            return Ok(Vec::new());
        };
        let g = self.config.heads;
        let w = tape.value(att.weights).data();
        let mut out: Vec<(usize, Vec<f64>)> = att
            .edges
            .iter()
            .enumerate()
            .map(|(row, &e)| (e, w[row * g..(row + 1) * g].to_vec()))
            .collect();
        out.sort_by_key(|p| p.0);
        Ok(out)
    }

    /// Applies one layer to every node.
    pub fn layer_forward(&self, layer: usize, graph: &TagGraph, x: &Tensor) -> Result<Tensor> {
        if x.dims2() != Some((graph.len(), self.d())) {
            return Err(Error::Dimension(format!("features {:?} for {} nodes of width {}", x.shape(), graph.len(), self.d())));
        }
        let mut tape = Tape::new();
        let feats = Features::identity(tape.constant(x.clone()), graph.len());
        let all: Vec<usize> = (0..graph.len()).collect();
        let y = self.layer_on(&mut tape, &self.params, layer, graph, &feats, &all)?;
        Ok(tape.value(y.x).clone())
    }

    /// Full initial feature matrix (constants plus learnable rows).
    pub fn initial_features(&self, graph: &TagGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let feats = self.initial_on(&mut tape, &self.params, graph)?;
        let all: Vec<usize> = (0..graph.len()).collect();
        let x = tape.gather_rows(feats.x, &feats.rows_of(&all)?)?;
        Ok(tape.value(x).clone())
    }

    /// Per input token, the softmax distribution over labels (`n × labels`).
    pub fn predict(&self, graph: &TagGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = self.logits_on(&mut tape, &self.params, graph)?;
        Ok(softmax(tape.value(z))?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(GNN_MAGIC);
        c.set("layers", self.config.layers);
        c.set("heads", self.config.heads);
        c.set("d", self.config.d);
        c.set("k", self.config.k);
        c.set("seed", self.config.seed);
        c.set("lr", self.config.lr);
        c.set("epochs", self.config.epochs);
        c.set("input_dropout", self.config.input_dropout);
        c.set("label_count", self.label_count);
        c.set("encoder_digest", hex(&self.encoder_digest));
        c.with_params(&self.params)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = GnnConfig {
            layers: c.parse("layers")?,
            heads: c.parse("heads")?,
            d: c.parse("d")?,
            k: c.parse("k")?,
            seed: c.parse("seed")?,
            lr: c.parse("lr")?,
            epochs: c.parse("epochs")?,
            input_dropout: c.parse("input_dropout")?,
        };
        let digest_hex = c.get("encoder_digest")?;
        let bad = || Error::Format {
            offset: 0,
            message: format!("malformed encoder digest `{digest_hex}`"),
        };
        if digest_hex.len() != 64 || !digest_hex.is_ascii() {
            return Err(bad());
        }
        let mut digest = [0u8; 32];
        for (i, b) in digest.iter_mut().enumerate() {
            *b = u8::from_str_radix(&digest_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut model = Self::new(c.parse("label_count")?, config, digest)?;
        c.load_params(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, GNN_MAGIC)?)
    }

    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.to_checkpoint().to_bytes())
    }

    /// Fails unless this model was trained on `encoder`'s representations.
    pub fn check_encoder(&self, encoder: &Encoder) -> Result<()> {
        if encoder.digest() != self.encoder_digest {
            return Err(Error::Consistency(format!(
                "GNN was trained against encoder {} but the given encoder is {}",
                hex(&self.encoder_digest),
                encoder.digest_hex()
            )));
        }
        if encoder.labels.len() != self.label_count || encoder.d() != self.d() {
            return Err(Error::Consistency("GNN and encoder disagree on labels or width".into()));
        }
        Ok(())
    }
}

/// Representations and neighbor sets for every sentence of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    /// Per sentence, one representation per token.
    pub reps: Vec<Vec<Vec<f64>>>,
    /// Per sentence, one neighbor set per token.
    pub neighbors: Vec<Vec<NeighborSet>>,
}

impl Retrieved {
    /// The same retrieval cut to the `k` nearest neighbors.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            reps: self.reps.clone(),
            neighbors: self
                .neighbors
                .iter()
                .map(|s| s.iter().map(|n| n[..n.len().min(k)].to_vec()).collect())
                .collect(),
        }
    }
}

/// Encodes every sentence and queries `k` neighbors per token; with
/// `exclude_self` each token's own `(sentence id, position)` record is skipped.
pub fn retrieve(encoder: &Encoder, store: &Datastore, dataset: &Dataset, k: usize, exclude_self: bool) -> Result<Retrieved> {
    let mut reps = Vec::with_capacity(dataset.len());
    let mut neighbors = Vec::with_capacity(dataset.len());
    for s in &dataset.sentences {
        let h = encoder.encode(s)?;
        let nb = h
            .iter()
            .enumerate()
            .map(|(t, hv)| store.knn_query(hv, k, exclude_self.then_some((s.id as u32, t as u32))))
            .collect::<Result<Vec<_>>>()?;
        reps.push(h);
        neighbors.push(nb);
    }
    Ok(Retrieved { reps, neighbors })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GnnTrainLog {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Mean per-sentence loss over `data` without updating parameters.
pub fn gnn_loss(model: &GnnParameters, store: &Datastore, data: &Dataset, retrieved: &Retrieved, window: WindowConfig) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in data.sentences.iter().enumerate() {
        let graph = construct(&retrieved.reps[i], &retrieved.neighbors[i], store, window)?;
        let mut tape = Tape::new();
        let l = model.loss_on(&mut tape, &model.params, &graph, &s.labels)?;
        total += tape.value(l).data()[0];
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains on precomputed training-set retrieval (built with self-exclusion).
pub fn train_gnn_with(
    model: &mut GnnParameters,
    store: &Datastore,
    train: &Dataset,
    retrieved: &Retrieved,
    window: WindowConfig,
) -> Result<GnnTrainLog> {
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if retrieved.reps.len() != train.len() {
        return Err(Error::Dimension(format!("retrieval covers {} of {} sentences", retrieved.reps.len(), train.len())));
    }
    let mut log = GnnTrainLog {
        initial_loss: gnn_loss(model, store, train, retrieved, window)?,
        epoch_losses: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=model.config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let mut graph = construct(&retrieved.reps[i], &retrieved.neighbors[i], store, window)?;
            let p = model.config.input_dropout;
            if p > 0.0 {
                let d = graph.d();
                let x = graph.constant_features.data_mut();
                for &q in &graph.query_map {
                    if rng.gen_bool(p) {
                        x[q * d..(q + 1) * d].fill(0.0);
                    }
                }
            }
            let mut tape = Tape::new();
            let loss = model.loss_on(&mut tape, &model.params, &graph, &train.sentences[i].labels)?;
            total += tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            model.params.zero_grad();
            grads.accumulate_into(&mut model.params)?;
            model.params.clip_grad_norm(CLIP_NORM);
            model.params.sgd_step(model.config.lr);
        }
        if !model.params.all_finite() {
            return Err(Error::Argument(format!("GNN training diverged at epoch {epoch}")));
        }
        let loss = total / train.len() as f64;
        log::info!("gnn epoch {epoch}: loss {loss:.4}");
        log.epoch_losses.push(loss);
    }
    Ok(log)
}

/// Trains a fresh GNN against a frozen encoder and its datastore.
pub fn train_gnn(encoder: &Encoder, store: &Datastore, train: &Dataset, window: WindowConfig, config: &GnnConfig) -> Result<(GnnParameters, GnnTrainLog)> {
    store.check_compatible(encoder)?;
    if config.d != encoder.d() {
        return Err(Error::Argument(format!("GNN width {} differs from encoder width {}", config.d, encoder.d())));
    }
    let mut model = GnnParameters::new(encoder.labels.len(), config.clone(), encoder.digest())?;
    let retrieved = retrieve(encoder, store, train, config.k, true)?;
    let log = train_gnn_with(&mut model, store, train, &retrieved, window)?;
    Ok((model, log))
}

/// GNN distributions for one sentence given its representations and neighbors.
pub fn gnn_predict(model: &GnnParameters, store: &Datastore, reps: &[Vec<f64>], neighbors: &[NeighborSet], window: WindowConfig) -> Result<Tensor> {
    let graph = construct(reps, neighbors, store, window)?;
    model.predict(&graph)
}
