//! Shared fixtures and a straight-line evaluation of one attention layer.
#![allow(dead_code)]

use gnnsl::datastore::{Datastore, Entry, Neighbor};
use gnnsl::gnn::{GnnConfig, GnnParameters};
use gnnsl::graph::{construct, EdgeType, NodeType, Provenance, TagGraph, WindowConfig};
use rand::Rng;
use gnnsl_tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const TYPES: [&str; 3] = ["input", "neighbor", "label"];

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_store(rng: &mut ChaCha8Rng, lens: &[usize], d: usize, labels: usize) -> Datastore {
    let mut entries = Vec::new();
    for (s, &len) in lens.iter().enumerate() {
        for t in 0..len {
            entries.push(Entry {
                sentence_id: s as u32,
                token_index: t as u32,
                label_id: rng.gen_range(0..labels) as u32,
            });
        }
    }
    let keys = (0..entries.len() * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let names = (0..labels).map(|i| format!("L{i}")).collect();
    Datastore::from_parts(d, names, [0; 32], entries, keys).unwrap()
}

/// Model with every parameter, μ included, drawn at random.
pub fn random_model(rng: &mut ChaCha8Rng, labels: usize, d: usize, heads: usize, layers: usize) -> GnnParameters {
    let cfg = GnnConfig {
        layers,
        heads,
        d,
        k: 2,
        seed: rng.gen(),
        ..GnnConfig::default()
    };
    let mut m = GnnParameters::new(labels, cfg, [0; 32]).unwrap();
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in m.params.value_mut(id).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    m
}

pub fn weights(m: &GnnParameters, name: &str) -> Vec<f64> {
    let id = m.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.params.value(id).data().to_vec()
}

// ---- straight-line oracle -------------------------------------------------

/// `W v` for head `i` of a stacked `g × h × h` weight.
pub fn wv(w: &[f64], i: usize, h: usize, v: &[f64]) -> Vec<f64> {
    (0..h).map(|j| (0..h).map(|a| w[i * h * h + j * h + a] * v[a]).sum()).collect()
}

/// `v W` for head `i`.
pub fn vw(v: &[f64], w: &[f64], i: usize, h: usize) -> Vec<f64> {
    (0..h).map(|j| (0..h).map(|a| v[a] * w[i * h * h + a * h + j]).sum()).collect()
}

pub fn slice(x: &[f64], i: usize, h: usize) -> &[f64] {
    &x[i * h..(i + 1) * h]
}

pub fn oracle_message(m: &GnnParameters, layer: usize, head: usize, s: &[f64], edge: EdgeType, st: NodeType) -> Vec<f64> {
    let h = m.d() / m.config.heads;
    let wv_ = weights(m, &format!("layer{layer}.value.{}", TYPES[st.index()]));
    let we = weights(m, &format!("layer{layer}.edge.{}", edge.name()));
    vw(&wv(&wv_, head, h, slice(s, head, h)), &we, head, h)
}

/// Per incoming edge of `n` (in edge-list order): `(edge index, weight per head)`.
pub fn oracle_attention(m: &GnnParameters, layer: usize, g: &TagGraph, x: &[Vec<f64>], n: usize) -> Vec<(usize, Vec<f64>)> {
    let heads = m.config.heads;
    let h = m.d() / heads;
    let mu = weights(m, "mu");
    let incoming: Vec<usize> = (0..g.edges.len()).filter(|&i| g.edges[i].dst == n).collect();
    let tn = g.nodes[n].kind;
    let wq = weights(m, &format!("layer{layer}.query.{}", TYPES[tn.index()]));
    let mut per_head = vec![Vec::new(); heads];
    for (i, scores) in per_head.iter_mut().enumerate() {
        let q = wv(&wq, i, h, slice(&x[n], i, h));
        for &e in &incoming {
            let edge = g.edges[e];
            let ts = g.nodes[edge.src].kind;
            let wk = weights(m, &format!("layer{layer}.key.{}", TYPES[ts.index()]));
            let we = weights(m, &format!("layer{layer}.edge.{}", edge.kind.name()));
            let k = wv(&wk, i, h, slice(&x[edge.src], i, h));
            let kw = vw(&k, &we, i, h);
            let dot: f64 = kw.iter().zip(&q).map(|(a, b)| a * b).sum();
            let r = ts.index() * 12 + edge.kind.index() * 3 + tn.index();
            scores.push(dot * mu[r] / (h as f64).sqrt());
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for s in scores.iter_mut() {
            *s = (*s - max).exp() / z;
        }
    }
    incoming
        .iter()
        .enumerate()
        .map(|(j, &e)| (e, (0..heads).map(|i| per_head[i][j]).collect()))
        .collect()
}

pub fn oracle_layer(m: &GnnParameters, layer: usize, g: &TagGraph, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (d, heads) = (m.d(), m.config.heads);
    let h = d / heads;
    let w_merge = weights(m, &format!("layer{layer}.merge"));
    (0..g.len())
        .map(|n| {
            let att = oracle_attention(m, layer, g, x, n);
            if att.is_empty() {
                return x[n].clone();
            }
            let mut agg = vec![0.0; d];
            for (e, w) in &att {
                let edge = g.edges[*e];
                for i in 0..heads {
                    let msg = oracle_message(m, layer, i, &x[edge.src], edge.kind, g.nodes[edge.src].kind);
                    for j in 0..h {
                        agg[i * h + j] += w[i] * msg[j];
                    }
                }
            }
            let merged: Vec<f64> = (0..d).map(|j| (0..d).map(|a| agg[a] * w_merge[a * d + j]).sum()).collect();
            let wo = weights(m, &format!("layer{layer}.out.{}", TYPES[g.nodes[n].kind.index()]));
            (0..d).map(|j| x[n][j] + (0..d).map(|a| wo[j * d + a] * merged[a]).sum::<f64>()).collect()
        })
        .collect()
}

pub fn oracle_initial(m: &GnnParameters, g: &TagGraph) -> Vec<Vec<f64>> {
    let d = m.d();
    let table = weights(m, "label_embedding");
    let boundary = weights(m, "boundary");
    g.nodes
        .iter()
        .enumerate()
        .map(|(i, n)| match n.provenance {
            Provenance::Label(l) => table[l as usize * d..(l as usize + 1) * d].to_vec(),
            Provenance::Boundary => boundary.clone(),
            _ => g.constant_features.row(i).to_vec(),
        })
        .collect()
}

pub fn oracle_predict(m: &GnnParameters, g: &TagGraph) -> Vec<Vec<f64>> {
    let mut x = oracle_initial(m, g);
    for l in 0..m.config.layers {
        x = oracle_layer(m, l, g, &x);
    }
    let (w, b) = (weights(m, "head.w"), weights(m, "head.b"));
    let c = b.len();
    g.query_map
        .iter()
        .map(|&q| {
            let z: Vec<f64> = (0..c).map(|y| b[y] + (0..m.d()).map(|a| x[q][a] * w[a * c + y]).sum::<f64>()).collect();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - max).exp()).sum();
            z.iter().map(|v| (v - max).exp() / s).collect()
        })
        .collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
    }
}

// ---- fixtures ---------------------------------------------------------------

/// One input token with one neighbor at the start of a two-token sentence:
/// input, boundary, two window tokens, label (5 nodes).
pub fn five_node_graph(rng: &mut ChaCha8Rng, d: usize) -> (TagGraph, Datastore) {
    let store = random_store(rng, &[2, 3], d, 3);
    let reps = vec![rand_vec(rng, d)];
    let nbs = vec![vec![Neighbor { record: 0, dist2: 0.5 }]];
    let g = construct(&reps, &nbs, &store, WindowConfig { c: 1, include_labels: true }).unwrap();
    assert_eq!(g.len(), 5);
    (g, store)
}

/// `n` inputs with `k` random neighbors each.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, k: usize, c: usize, d: usize, labels: bool) -> (TagGraph, Datastore) {
    let store = random_store(rng, &[3, 4, 2, 5], d, 3);
    let reps: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(rng, d)).collect();
    let nbs: Vec<Vec<Neighbor>> = (0..n)
        .map(|_| {
            (0..k)
                .map(|_| Neighbor {
                    record: rng.gen_range(0..store.len()),
                    dist2: 0.0,
                })
                .collect()
        })
        .collect();
    let g = construct(&reps, &nbs, &store, WindowConfig { c, include_labels: labels }).unwrap();
    (g, store)
}

