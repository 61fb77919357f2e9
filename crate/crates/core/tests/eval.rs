use gnnsl::corpus::{Dataset, LabelScheme, LabelSet, TokenSequence};
use gnnsl::eval::{evaluate, f1};
use gnnsl::Error;
use proptest::prelude::*;

fn set() -> LabelSet {
    LabelSet::from_names(LabelScheme::Bio, &["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"]).unwrap()
}

fn data(seqs: &[Vec<u32>]) -> Dataset {
    Dataset::new(
        seqs.iter()
            .enumerate()
            .map(|(id, l)| TokenSequence {
                id,
                tokens: (0..l.len()).map(|i| format!("t{i}")).collect(),
                labels: l.clone(),
            })
            .collect(),
    )
}

#[test]
fn perfect_prediction() {
    let gold = data(&[vec![1, 2, 0, 3], vec![0, 5]]);
    let r = evaluate(&[vec![1, 2, 0, 3], vec![0, 5]], &gold, &set(), None).unwrap();
    assert_eq!((r.precision, r.recall, r.f1, r.token_accuracy), (100.0, 100.0, 100.0, 100.0));
    assert_eq!(r.counts.gold, 3);
    assert!(r.long_tail.is_none());
}

#[test]
fn all_outside_prediction() {
    let gold = data(&[vec![1, 2, 0, 3]]);
    let r = evaluate(&[vec![0; 4]], &gold, &set(), None).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    assert_eq!(r.token_accuracy, 25.0);
}

#[test]
fn one_wrong_type() {
    // gold (0,2,PER) (3,4,LOC); predicted (0,2,PER) (3,4,ORG)
    let gold = data(&[vec![1, 2, 0, 3]]);
    let r = evaluate(&[vec![1, 2, 0, 5]], &gold, &set(), None).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (50.0, 50.0, 50.0));
    assert_eq!(r.per_label["PER"].f1, 100.0);
    assert_eq!(r.per_label["LOC"].counts.predicted, 0);
    assert_eq!(r.per_label["ORG"].counts.gold, 0);
}

#[test]
fn boundary_errors_get_no_credit() {
    let gold = data(&[vec![1, 2, 2]]);
    let r = evaluate(&[vec![1, 2, 0]], &gold, &set(), None).unwrap();
    assert_eq!(r.f1, 0.0);
}

#[test]
fn misaligned_input_names_the_sentence() {
    let gold = data(&[vec![0, 1], vec![0, 0, 1]]);
    match evaluate(&[vec![0, 1], vec![0, 1]], &gold, &set(), None) {
        Err(Error::Alignment { sentence, .. }) => assert_eq!(sentence, 1),
        other => panic!("{other:?}"),
    }
    assert!(matches!(evaluate(&[vec![0, 1]], &gold, &set(), None), Err(Error::Alignment { .. })));
    assert!(matches!(evaluate(&[vec![0, 9], vec![0, 0, 0]], &gold, &set(), None), Err(Error::Label(_))));
}

#[test]
fn long_tail_counts_rare_surface_forms() {
    let set = set();
    let mk = |tokens: &[&str], labels: Vec<u32>, id| TokenSequence {
        id,
        tokens: tokens.iter().map(|s| s.to_string()).collect(),
        labels,
    };
    let train = Dataset::new(vec![
        mk(&["Ann", "met", "Bo"], vec![1, 0, 1], 0),
        mk(&["Ann", "left"], vec![1, 0], 1),
    ]);
    // Ann is frequent in training; Bo occurs once; Cy never
    let test = Dataset::new(vec![mk(&["Ann", "Bo", "Cy"], vec![1, 1, 1], 0)]);
    let r = evaluate(&[vec![1, 1, 0]], &test, &set, Some(&train)).unwrap();
    let lt = r.long_tail.as_ref().unwrap();
    assert_eq!((lt.counts.gold, lt.counts.predicted, lt.counts.correct), (2, 1, 1));
    assert_eq!(r.long_tail_f1(), Some(f1(100.0, 50.0)));
    assert!(r.to_kv().contains("long_tail_f1=66.67\n"));
}

#[test]
fn report_serializations() {
    let gold = data(&[vec![1, 2, 0, 3]]);
    let r = evaluate(&[vec![1, 2, 0, 5]], &gold, &set(), None).unwrap();
    let kv = r.to_kv();
    assert!(kv.starts_with("precision=50.00\nrecall=50.00\nf1=50.00\ntoken_accuracy=75.00\n"));
    let back: gnnsl::eval::EvalReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
}

fn bio(n: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..7, n).prop_map(|mut v| {
        for i in 0..v.len() {
            if v[i] % 2 == 0 && v[i] > 0 && (i == 0 || (v[i - 1] != v[i] && v[i - 1] != v[i] - 1)) {
                v[i] -= 1;
            }
        }
        v
    })
}

fn pair() -> impl Strategy<Value = Vec<(Vec<u32>, Vec<u32>)>> {
    prop::collection::vec((1usize..10).prop_flat_map(|n| (bio(n), bio(n))), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_are_bounded_and_consistent(rows in pair()) {
        let gold = data(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
        let pred: Vec<Vec<u32>> = rows.iter().map(|r| r.1.clone()).collect();
        let r = evaluate(&pred, &gold, &set(), None).unwrap();
        for m in [r.precision, r.recall, r.f1, r.token_accuracy] {
            prop_assert!((0.0..=100.0).contains(&m));
        }
        let expect = if r.precision + r.recall > 0.0 { 2.0 * r.precision * r.recall / (r.precision + r.recall) } else { 0.0 };
        prop_assert!((r.f1 - expect).abs() < 1e-12);
        if r.counts.gold > 0 {
            let me = evaluate(&gold.sentences.iter().map(|s| s.labels.clone()).collect::<Vec<_>>(), &gold, &set(), None).unwrap();
            prop_assert_eq!((me.precision, me.recall, me.f1), (100.0, 100.0, 100.0));
        }
    }

    #[test]
    fn sentence_order_does_not_matter(rows in pair(), seed in any::<u64>()) {
        let mut perm = rows.clone();
        let n = perm.len();
        for i in (1..n).rev() {
            perm.swap(i, (seed as usize ^ i.wrapping_mul(2654435761)) % (i + 1));
        }
        let eval = |rows: &[(Vec<u32>, Vec<u32>)]| {
            let gold = data(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
            evaluate(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>(), &gold, &set(), None).unwrap()
        };
        prop_assert_eq!(eval(&rows), eval(&perm));
    }

    #[test]
    fn swapping_roles_keeps_f1_when_counts_match(rows in pair()) {
        let swap: Vec<(Vec<u32>, Vec<u32>)> = rows.iter().map(|(a, b)| (b.clone(), a.clone())).collect();
        let eval = |rows: &[(Vec<u32>, Vec<u32>)]| {
            let gold = data(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
            evaluate(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>(), &gold, &set(), None).unwrap()
        };
        let (a, b) = (eval(&rows), eval(&swap));
        prop_assert_eq!(a.counts.correct, b.counts.correct);
        prop_assert_eq!((a.precision, a.recall), (b.recall, b.precision));
        if a.counts.gold == a.counts.predicted {
            prop_assert_eq!(a.f1, b.f1);
        }
    }
}
