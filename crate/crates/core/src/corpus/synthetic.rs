//! Seeded template corpus with a controlled long tail of entity names.
//!
//! Sentences are drawn from fixed templates whose slots are either
//! type-revealing ("the mayor of {LOC}") or ambiguous ("{ANY} made
//! headlines"). Head entities recur with Zipfian frequency across all
//! splits. Long-tail entities are fresh names that occur exactly once in
//! the training split and recur in the test split (sometimes also dev),
//! so only retrieval of that single training mention can identify them
//! in an ambiguous context.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, LabelScheme, LabelSet, SplitDataset, TokenSequence};
use crate::error::{Error, Result};

pub const SYNTHETIC_TYPES: [&str; 3] = ["PER", "LOC", "ORG"];

const TRAIN_SHARE: f64 = 0.7;
const DEV_SHARE: f64 = 0.1;
/// Distinct head names per entity type.
const HEAD_NAMES_PER_TYPE: usize = 40;

/// `None` = ambiguous slot, `Some(t)` = slot revealing type `t`.
type Slot = Option<usize>;

const TEMPLATES: &[&str] = &[
    // type-revealing
    "mr. {PER} said the plan would work .",
    "according to mrs. {PER} , prices will rise .",
    "{PER} , the chief executive , resigned on monday .",
    "the actor {PER} thanked the voters .",
    "heavy rain fell in the city of {LOC} .",
    "flights to {LOC} were cancelled .",
    "the mayor of {LOC} opened a new bridge .",
    "she moved to the town of {LOC} last year .",
    "shares of {ORG} rose sharply .",
    "{ORG} inc. reported higher profits .",
    "analysts expect the company {ORG} to cut jobs .",
    "the board of {ORG} approved the merger .",
    "mr. {PER} flew to {LOC} on friday .",
    "the mayor of {LOC} met the board of {ORG} .",
    // ambiguous
    "{ANY} was mentioned in the report .",
    "reporters asked about {ANY} again .",
    "nobody expected {ANY} to win .",
    "the story about {ANY} spread quickly .",
    "{ANY} made headlines this week .",
    "we talked about {ANY} for hours .",
    "many people admire {ANY} .",
    "the decision surprised {ANY} .",
    "{ANY} and {ANY} were discussed at the meeting .",
    "critics compared {ANY} with {ANY} .",
    "everyone was talking about {ANY} .",
    "a new film about {ANY} was released .",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "kl", "st"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s", "k"];

#[derive(Debug, Clone)]
enum Piece {
    Word(String),
    Slot(Slot),
}

fn parse_template(t: &str) -> Vec<Piece> {
    t.split(' ')
        .map(|w| match w {
            "{ANY}" => Piece::Slot(None),
            "{PER}" => Piece::Slot(Some(0)),
            "{LOC}" => Piece::Slot(Some(1)),
            "{ORG}" => Piece::Slot(Some(2)),
            other => Piece::Word(other.to_string()),
        })
        .collect()
}

/// Tokens of one entity name plus its type.
#[derive(Debug, Clone)]
struct Entity {
    tokens: Vec<String>,
    kind: usize,
}

struct NameMaker {
    used: HashSet<String>,
}

impl NameMaker {
    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
            }
            w.push_str(CODAS.choose(rng).unwrap());
            let mut cs = w.chars();
            let w: String = cs.next().unwrap().to_uppercase().chain(cs).collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    /// PER names are two tokens; ORG names one or two; LOC one.
    fn entity(&mut self, kind: usize, rng: &mut ChaCha8Rng) -> Entity {
        let n = match kind {
            0 => 2,
            2 if rng.gen_bool(0.4) => 2,
            _ => 1,
        };
        Entity {
            tokens: (0..n).map(|_| self.word(rng)).collect(),
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Train,
    Dev,
    Test,
}

struct Sentence {
    part: Part,
    template: usize,
    fills: Vec<Option<Entity>>,
}

/// Deterministic train/dev/test corpus with `long_tail_fraction` of all
/// entity mentions belonging to long-tail names.
pub fn generate_synthetic(seed: u64, n_sentences: usize, long_tail_fraction: f64) -> Result<(SplitDataset, LabelSet)> {
    if n_sentences < 10 {
        return Err(Error::Argument(format!("n_sentences must be ≥ 10, got {n_sentences}")));
    }
    if !(0.0..=0.5).contains(&long_tail_fraction) {
        return Err(Error::Argument(format!(
            "long_tail_fraction must lie in [0, 0.5], got {long_tail_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<Piece>> = TEMPLATES.iter().map(|t| parse_template(t)).collect();

    let n_train = ((n_sentences as f64) * TRAIN_SHARE).round() as usize;
    let n_dev = ((n_sentences as f64) * DEV_SHARE).round().max(1.0) as usize;

    let mut sentences: Vec<Sentence> = (0..n_sentences)
        .map(|i| {
            let part = if i < n_train {
                Part::Train
            } else if i < n_train + n_dev {
                Part::Dev
            } else {
                Part::Test
            };
            let template = rng.gen_range(0..templates.len());
            let slots = templates[template].iter().filter(|p| matches!(p, Piece::Slot(_))).count();
            Sentence {
                part,
                template,
                fills: vec![None; slots],
            }
        })
        .collect();

    // (sentence, slot index, slot kind) per split, shuffled
    let slots_of = |part: Part, rng: &mut ChaCha8Rng| {
        let mut v: Vec<(usize, usize, Slot)> = Vec::new();
        for (si, s) in sentences.iter().enumerate().filter(|(_, s)| s.part == part) {
            let kinds = templates[s.template].iter().filter_map(|p| match p {
                Piece::Slot(k) => Some(*k),
                Piece::Word(_) => None,
            });
            v.extend(kinds.enumerate().map(|(j, k)| (si, j, k)));
        }
        v.shuffle(rng);
        v
    };
    let train_slots = slots_of(Part::Train, &mut rng);
    let dev_slots = slots_of(Part::Dev, &mut rng);
    let test_slots = slots_of(Part::Test, &mut rng);
    let total_mentions = train_slots.len() + dev_slots.len() + test_slots.len();

    let mut names = NameMaker { used: HashSet::new() };
    let head: Vec<Vec<Entity>> = (0..SYNTHETIC_TYPES.len())
        .map(|k| (0..HEAD_NAMES_PER_TYPE).map(|_| names.entity(k, &mut rng)).collect())
        .collect();

    // Long-tail names: one training mention, one or two held-out mentions
    // (always at least one in test).
    let target_tail = (long_tail_fraction * total_mentions as f64).round() as usize;
    let mut taken: HashSet<(usize, usize)> = HashSet::new();
    let mut tail_mentions = 0;
    let mut train_iter = train_slots.iter();
    let dev_share = dev_slots.len() as f64 / (dev_slots.len() + test_slots.len()).max(1) as f64;
    let assign = |sentences: &mut Vec<Sentence>, (si, j): (usize, usize), e: &Entity| {
        sentences[si].fills[j] = Some(e.clone());
    };
    'tail: while tail_mentions < target_tail {
        let Some(&(si, j, kind)) = train_iter.next() else { break };
        let kind = kind.unwrap_or_else(|| rng.gen_range(0..SYNTHETIC_TYPES.len()));
        let compatible = |slot: &(usize, usize, Slot), taken: &HashSet<(usize, usize)>| {
            slot.2.is_none_or(|k| k == kind) && !taken.contains(&(slot.0, slot.1))
        };
        let Some(&first) = test_slots.iter().find(|s| compatible(s, &taken)) else { break 'tail };
        let entity = names.entity(kind, &mut rng);
        assign(&mut sentences, (si, j), &entity);
        assign(&mut sentences, (first.0, first.1), &entity);
        taken.insert((first.0, first.1));
        tail_mentions += 2;
        if rng.gen_bool(0.5) {
            let pool = if rng.gen_bool(dev_share) { &dev_slots } else { &test_slots };
            if let Some(&extra) = pool.iter().find(|s| compatible(s, &taken)) {
                assign(&mut sentences, (extra.0, extra.1), &entity);
                taken.insert((extra.0, extra.1));
                tail_mentions += 1;
            }
        }
    }

    // Zipfian head sampling for every remaining slot.
    let zipf: Vec<f64> = (1..=HEAD_NAMES_PER_TYPE).map(|r| 1.0 / r as f64).collect();
    let zipf_total: f64 = zipf.iter().sum();
    for s in sentences.iter_mut() {
        let kinds: Vec<Slot> = templates[s.template]
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(k) => Some(*k),
                Piece::Word(_) => None,
            })
            .collect();
        for (j, kind) in kinds.into_iter().enumerate() {
            if s.fills[j].is_some() {
                continue;
            }
            let kind = kind.unwrap_or_else(|| rng.gen_range(0..SYNTHETIC_TYPES.len()));
            let mut u = rng.gen_range(0.0..zipf_total);
            let mut pick = HEAD_NAMES_PER_TYPE - 1;
            for (r, w) in zipf.iter().enumerate() {
                if u < *w {
                    pick = r;
                    break;
                }
                u -= w;
            }
            s.fills[j] = Some(head[kind][pick].clone());
        }
    }

    let mut labels = LabelSet::new(LabelScheme::Bio);
    labels.intern("O")?;
    for t in SYNTHETIC_TYPES {
        labels.intern(&format!("B-{t}"))?;
        labels.intern(&format!("I-{t}"))?;
    }
    let outside = labels.id("O").unwrap();

    let mut parts: [Vec<TokenSequence>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for s in &sentences {
        let mut tokens = Vec::new();
        let mut ids = Vec::new();
        let mut fills = s.fills.iter();
        for piece in &templates[s.template] {
            match piece {
                Piece::Word(w) => {
                    tokens.push(w.clone());
                    ids.push(outside);
                }
                Piece::Slot(_) => {
                    let e = fills.next().unwrap().as_ref().unwrap();
                    let kind = SYNTHETIC_TYPES[e.kind];
                    for (i, t) in e.tokens.iter().enumerate() {
                        tokens.push(t.clone());
                        let prefix = if i == 0 { "B" } else { "I" };
                        ids.push(labels.id(&format!("{prefix}-{kind}")).unwrap());
                    }
                }
            }
        }
        let bucket = &mut parts[s.part as usize];
        bucket.push(TokenSequence {
            id: bucket.len(),
            tokens,
            labels: ids,
        });
    }
    let [train, dev, test] = parts;
    Ok((
        SplitDataset {
            train: Dataset::new(train),
            dev: Dataset::new(dev),
            test: Dataset::new(test),
        },
        labels,
    ))
}
