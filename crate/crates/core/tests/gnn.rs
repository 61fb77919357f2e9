mod common;

use common::*;
use gnnsl::corpus::generate_synthetic;
use gnnsl::datastore::{Datastore, Neighbor};
use gnnsl::encoder::{train_vanilla, EncoderConfig};
use gnnsl::gnn::{gnn_loss, gnn_predict, retrieve, train_gnn, GnnConfig, GnnParameters};
use gnnsl::graph::{construct, EdgeType, NodeType, WindowConfig};
use gnnsl::prob::{argmax, is_distribution};
use gnnsl_tensor::{grad_check_params, Tensor};
use rand::{Rng, SeedableRng};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

// ---- tests ------------------------------------------------------------------

#[test]
fn message_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..25 {
        let m = random_model(&mut rng, 3, 4, 2, 1);
        let s = rand_vec(&mut rng, 4);
        for edge in EdgeType::ALL {
            for st in NodeType::ALL {
                for head in 0..2 {
                    let got = m.message(0, head, &s, edge, st).unwrap();
                    assert_close(&got, &oracle_message(&m, 0, head, &s, edge, st), 1e-12);
                }
            }
        }
    }
}

#[test]
fn message_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = random_model(&mut rng, 3, 4, 2, 1);
    assert_eq!(m.message(0, 1, &[0.0; 4], EdgeType::InputInput, NodeType::Input).unwrap(), vec![0.0, 0.0]);
    for name in ["layer0.value.neighbor", "layer0.edge.NeighborInput"] {
        let id = m.params.id(name).unwrap();
        let w = m.params.value_mut(id).data_mut();
        w.fill(0.0);
        for i in 0..2 {
            w[i * 4] = 1.0;
            w[i * 4 + 3] = 1.0;
        }
    }
    let s = [0.1, 0.2, 0.3, 0.4];
    assert_eq!(m.message(0, 1, &s, EdgeType::NeighborInput, NodeType::Neighbor).unwrap(), vec![0.3, 0.4]);
    assert!(m.message(0, 2, &s, EdgeType::NeighborInput, NodeType::Neighbor).is_err());
}

#[test]
fn attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..25 {
        let (g, _) = five_node_graph(&mut rng, 4);
        let m = random_model(&mut rng, 3, 4, 2, 1);
        let x: Vec<Vec<f64>> = (0..g.len()).map(|_| rand_vec(&mut rng, 4)).collect();
        let xt = Tensor::from_rows(&x).unwrap();
        for n in 0..g.len() {
            let got = m.attention(0, &g, &xt, n).unwrap();
            let want = oracle_attention(&m, 0, &g, &x, n);
            assert_eq!(got.len(), want.len());
            for ((e1, w1), (e2, w2)) in got.iter().zip(&want) {
                assert_eq!(e1, e2);
                assert_close(w1, w2, 1e-9);
            }
            for head in 0..2 {
                let s: f64 = got.iter().map(|(_, w)| w[head]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn attention_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (g, _) = five_node_graph(&mut rng, 4);
    let m = random_model(&mut rng, 3, 4, 2, 1);
    let mut x: Vec<Vec<f64>> = (0..g.len()).map(|_| rand_vec(&mut rng, 4)).collect();
    // the label node (4) has one incoming edge
    let xt = Tensor::from_rows(&x).unwrap();
    let att = m.attention(0, &g, &xt, 4).unwrap();
    assert_eq!(att.len(), 1);
    assert_eq!(att[0].1, vec![1.0, 1.0]);
    // the center (2) hears from boundary (1) and right token (3) over the same
    // edge type; equal features give equal weights on those two edges
    x[3] = x[1].clone();
    let att = m.attention(0, &g, &Tensor::from_rows(&x).unwrap(), 2).unwrap();
    let nn: Vec<&Vec<f64>> = att.iter().filter(|(e, _)| g.edges[*e].kind == EdgeType::NeighborNeighbor).map(|p| &p.1).collect();
    assert_eq!(nn.len(), 2);
    assert_close(nn[0], nn[1], 1e-15);
}

#[test]
fn layer_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..25 {
        let (g, _) = if trial % 2 == 0 {
            five_node_graph(&mut rng, 4)
        } else {
            random_graph(&mut rng, 3, 2, 1, 4, true)
        };
        let m = random_model(&mut rng, 3, 4, 2, 1);
        let x: Vec<Vec<f64>> = (0..g.len()).map(|_| rand_vec(&mut rng, 4)).collect();
        let got = m.layer_forward(0, &g, &Tensor::from_rows(&x).unwrap()).unwrap();
        let want = oracle_layer(&m, 0, &g, &x);
        for (a, b) in rows(&got).iter().zip(&want) {
            assert_close(a, b, 1e-9);
        }
    }
}

#[test]
fn prediction_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let (g, _) = random_graph(&mut rng, 3, 2, 1, 4, true);
        let m = random_model(&mut rng, 3, 4, 2, 2);
        let got = m.predict(&g).unwrap();
        for (a, b) in rows(&got).iter().zip(&oracle_predict(&m, &g)) {
            assert_close(a, b, 1e-9);
        }
    }
}

#[test]
fn zero_output_matrices_make_layers_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (g, _) = random_graph(&mut rng, 4, 3, 2, 8, true);
    let mut m = random_model(&mut rng, 3, 8, 2, 2);
    for l in 0..2 {
        for t in TYPES {
            let id = m.params.id(&format!("layer{l}.out.{t}")).unwrap();
            m.params.value_mut(id).fill(0.0);
        }
    }
    let x = m.initial_features(&g).unwrap();
    for l in 0..2 {
        assert_eq!(m.layer_forward(l, &g, &x).unwrap(), x);
    }
}

#[test]
fn isolated_node_keeps_its_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let store = random_store(&mut rng, &[3], 4, 3);
    let g = construct(&[rand_vec(&mut rng, 4)], &[vec![]], &store, WindowConfig::default()).unwrap();
    let m = random_model(&mut rng, 3, 4, 2, 2);
    let x = m.initial_features(&g).unwrap();
    assert_eq!(m.layer_forward(0, &g, &x).unwrap(), x);
    assert!(m.attention(0, &g, &x, 0).unwrap().is_empty());
}

#[test]
fn large_negative_mu_silences_a_relation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (g, _) = five_node_graph(&mut rng, 4);
    let mut m = random_model(&mut rng, 3, 4, 2, 1);
    // identity transforms and positive features make every score positive
    let names = ["key.input", "key.neighbor", "key.label", "query.neighbor"]
        .iter()
        .map(|n| format!("layer0.{n}"))
        .chain(EdgeType::ALL.iter().map(|e| format!("layer0.edge.{}", e.name())));
    for l in names
    {
        let id = m.params.id(&l).unwrap();
        let w = m.params.value_mut(id).data_mut();
        w.fill(0.0);
        for i in 0..2 {
            w[i * 4] = 1.0;
            w[i * 4 + 3] = 1.0;
        }
    }
    let mu = m.params.id("mu").unwrap();
    m.params.value_mut(mu).fill(1.0);
    let x: Vec<Vec<f64>> = (0..g.len()).map(|_| (0..4).map(|_| rng.gen_range(0.1..1.0)).collect()).collect();
    let x = Tensor::from_rows(&x).unwrap();
    // the center (2) receives Neighbor→Neighbor, Input→Neighbor and Label→Neighbor edges
    let r = NodeType::Neighbor.index() * 12 + EdgeType::NeighborNeighbor.index() * 3 + NodeType::Neighbor.index();
    m.params.value_mut(mu).data_mut()[r] = -1e9;
    let att = m.attention(0, &g, &x, 2).unwrap();
    assert!(att.len() >= 3);
    for head in 0..2 {
        let mut rest = 0.0;
        for (e, w) in &att {
            if g.edges[*e].kind == EdgeType::NeighborNeighbor {
                assert_eq!(w[head], 0.0);
            } else {
                rest += w[head];
            }
        }
        assert!((rest - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_head_gives_uniform_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (g, _) = random_graph(&mut rng, 3, 2, 1, 4, true);
    let mut m = random_model(&mut rng, 4, 4, 2, 2);
    for name in ["head.w", "head.b"] {
        let id = m.params.id(name).unwrap();
        m.params.value_mut(id).fill(0.0);
    }
    for row in rows(&m.predict(&g).unwrap()) {
        assert_eq!(row, vec![0.25; 4]);
    }
}

#[test]
fn predictions_are_distributions_with_or_without_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for labels in [true, false] {
        for _ in 0..10 {
            let (g, _) = random_graph(&mut rng, 4, 3, 2, 8, labels);
            let m = random_model(&mut rng, 3, 8, 2, 2);
            let p = m.predict(&g).unwrap();
            for row in rows(&p) {
                assert!(is_distribution(&row, 1e-9));
            }
            assert_eq!(p, m.predict(&g).unwrap());
        }
    }
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (g, _) = random_graph(&mut rng, 5, 2, 1, 8, true);
    let mut m = random_model(&mut rng, 3, 8, 2, 2);
    // keep attention logits moderate so differences stay well conditioned
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        m.params.value_mut(id).scale_in_place(0.5);
    }
    let gold = [0, 1, 2, 1, 0];
    let model = m.clone();
    let report = grad_check_params(|tape, p| Ok(model.loss_on(tape, p, &g, &gold).unwrap()), &mut m.params, 1e-5, 1e-3).unwrap();
    assert!(report.passed, "worst {:?}", report.worst());
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = random_model(&mut rng, 3, 8, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gnn.bin");
    m.save(&path).unwrap();
    let back = GnnParameters::load(&path).unwrap();
    assert_eq!(back.to_checkpoint().to_bytes(), m.to_checkpoint().to_bytes());
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(GnnParameters::load(&path), Err(gnnsl::Error::Format { .. })));
}

fn small_gnn_cfg(epochs: usize) -> GnnConfig {
    GnnConfig {
        d: 16,
        heads: 2,
        k: 4,
        epochs,
        lr: 0.05,
        ..GnnConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (split, labels) = generate_synthetic(5, 200, 0.2).unwrap();
    let enc_cfg = EncoderConfig {
        d: 16,
        d_emb: 8,
        epochs: 3,
        ..EncoderConfig::default()
    };
    let (enc, _) = train_vanilla(&split.train, None, &labels, &enc_cfg).unwrap();
    let store = Datastore::build(&enc, &split.train).unwrap();
    let window = WindowConfig { c: 1, include_labels: true };
    let (a, log) = train_gnn(&enc, &store, &split.train, window, &small_gnn_cfg(3)).unwrap();
    let (b, _) = train_gnn(&enc, &store, &split.train, window, &small_gnn_cfg(3)).unwrap();
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
    assert!(log.epoch_losses.last().unwrap() < &log.initial_loss, "{log:?}");

    // retrieval during training never returns the query token itself
    let ret = retrieve(&enc, &store, &split.train, 4, true).unwrap();
    for (s, sets) in split.train.sentences.iter().zip(&ret.neighbors) {
        for (t, set) in sets.iter().enumerate() {
            assert!(set.iter().all(|n| {
                let e = store.entry(n.record);
                (e.sentence_id as usize, e.token_index as usize) != (s.id, t)
            }));
        }
    }
    let after = gnn_loss(&a, &store, &split.train, &ret, window).unwrap();
    assert!(after < log.initial_loss);

    let mut other = enc.clone();
    other.config.seed += 1;
    assert!(matches!(
        train_gnn(&other, &store, &split.train, window, &small_gnn_cfg(1)),
        Err(gnnsl::Error::Consistency(_))
    ));
}

/// A toy store where every retrieved neighbor of an unseen token carries the
/// same label: a fitted model follows that label.
#[test]
fn toy_model_follows_unanimous_neighbors() {
    let text = "\
the O\nmayor O\nof O\nBrill B-LOC\n\n\
the O\nmayor O\nof O\nKarn B-LOC\n\n\
the O\nmayor O\nof O\nDuse B-LOC\n\n\
mr. O\nVolk B-PER\nspoke O\n\n\
mr. O\nHask B-PER\nspoke O\n\n\
mr. O\nTamm B-PER\nspoke O\n";
    let p = gnnsl::corpus::parse_conll(text, "bio".parse().unwrap()).unwrap();
    let enc_cfg = EncoderConfig {
        d: 16,
        d_emb: 8,
        epochs: 60,
        lr: 0.1,
        dropout: 0.0,
        seed: 2,
    };
    let (enc, _) = train_vanilla(&p.dataset, None, &p.labels, &enc_cfg).unwrap();
    let store = Datastore::build(&enc, &p.dataset).unwrap();
    let window = WindowConfig { c: 1, include_labels: true };
    let cfg = GnnConfig {
        input_dropout: 0.5,
        k: 3,
        ..small_gnn_cfg(80)
    };
    let (model, _) = train_gnn(&enc, &store, &p.dataset, window, &cfg).unwrap();
    let query: Vec<String> = ["the", "mayor", "of", "Zorn"].iter().map(|s| s.to_string()).collect();
    let reps = enc.encode_tokens(&query).unwrap();
    let loc = p.labels.id("B-LOC").unwrap();
    let mut nbs: Vec<Vec<Neighbor>> = reps.iter().map(|h| store.knn_query(h, 3, None).unwrap()).collect();
    nbs[3] = (0..3).map(|s| Neighbor { record: store.find(s, 3).unwrap(), dist2: 0.0 }).collect();
    let probs = gnn_predict(&model, &store, &reps, &nbs, window).unwrap();
    assert_eq!(argmax(probs.row(3)) as u32, loc);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn attention_is_a_distribution_per_head(seed in any::<u64>(), n in 1usize..5, k in 0usize..4, c in 0usize..3, labels in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, _) = random_graph(&mut rng, n, k, c, 4, labels);
        let m = random_model(&mut rng, 3, 4, 2, 1);
        let x = m.initial_features(&g).unwrap();
        for node in 0..g.len() {
            let att = m.attention(0, &g, &x, node).unwrap();
            let incoming = g.edges.iter().filter(|e| e.dst == node).count();
            prop_assert_eq!(att.len(), incoming);
            for head in 0..2 {
                let s: f64 = att.iter().map(|(_, w)| w[head]).sum();
                prop_assert!(att.is_empty() || (s - 1.0).abs() < 1e-9);
                prop_assert!(att.iter().all(|(_, w)| w[head] >= 0.0));
            }
        }
    }
}
