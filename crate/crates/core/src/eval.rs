//! Exact-match span scoring and token accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{spans_from_labels, Dataset, LabelSet, Span};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        pct(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        pct(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn pct(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl From<Counts> for LabelScore {
    fn from(counts: Counts) -> Self {
        Self {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_accuracy: f64,
    pub counts: Counts,
    pub per_label: BTreeMap<String, LabelScore>,
    /// Scores restricted to spans whose surface form occurs at most once
    /// among the training set's gold spans.
    pub long_tail: Option<LabelScore>,
}

impl EvalReport {
    pub fn long_tail_f1(&self) -> Option<f64> {
        self.long_tail.as_ref().map(|s| s.f1)
    }

    /// Flat `key=value` lines, two decimals.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k}={v}").expect("writing to a String");
        line("precision", format!("{:.2}", self.precision));
        line("recall", format!("{:.2}", self.recall));
        line("f1", format!("{:.2}", self.f1));
        line("token_accuracy", format!("{:.2}", self.token_accuracy));
        line("gold_spans", self.counts.gold.to_string());
        line("predicted_spans", self.counts.predicted.to_string());
        line("correct_spans", self.counts.correct.to_string());
        if let Some(lt) = &self.long_tail {
            line("long_tail_precision", format!("{:.2}", lt.precision));
            line("long_tail_recall", format!("{:.2}", lt.recall));
            line("long_tail_f1", format!("{:.2}", lt.f1));
            line("long_tail_gold_spans", lt.counts.gold.to_string());
        }
        for (label, s) in &self.per_label {
            line(&format!("label.{label}.f1"), format!("{:.2}", s.f1));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn surface(tokens: &[String], s: &Span) -> String {
    tokens[s.start..s.end].join(" ")
}

/// Gold-span surface-form counts over `train`.
pub fn surface_counts(train: &Dataset, labels: &LabelSet) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for s in &train.sentences {
        for sp in spans_from_labels(&s.labels, labels) {
            *counts.entry(surface(&s.tokens, &sp)).or_insert(0) += 1;
        }
    }
    counts
}

/// Scores `pred` against the gold labels of `gold`, sentence by sentence.
pub fn evaluate(pred: &[Vec<u32>], gold: &Dataset, labels: &LabelSet, train: Option<&Dataset>) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Alignment {
            sentence: pred.len().min(gold.len()),
            message: format!("{} predicted sentences for {} gold sentences", pred.len(), gold.len()),
        });
    }
    let tail = train.map(|t| surface_counts(t, labels));
    let is_tail = |s: &str| tail.as_ref().map(|c| c.get(s).copied().unwrap_or(0) <= 1);
    let mut counts = Counts::default();
    let mut tail_counts = Counts::default();
    let mut per: BTreeMap<String, Counts> = BTreeMap::new();
    let (mut tok_ok, mut tok_n) = (0usize, 0usize);
    for (i, (p, g)) in pred.iter().zip(&gold.sentences).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Alignment {
                sentence: i,
                message: format!("{} predicted labels for {} tokens", p.len(), g.len()),
            });
        }
        if let Some(&bad) = p.iter().find(|&&l| l as usize >= labels.len()) {
            return Err(Error::Label(format!("predicted label id {bad} outside {} labels", labels.len())));
        }
        tok_ok += p.iter().zip(&g.labels).filter(|(a, b)| a == b).count();
        tok_n += p.len();
        let gs = spans_from_labels(&g.labels, labels);
        let ps = spans_from_labels(p, labels);
        for s in &gs {
            counts.gold += 1;
            per.entry(s.kind.clone()).or_default().gold += 1;
            if is_tail(&surface(&g.tokens, s)) == Some(true) {
                tail_counts.gold += 1;
            }
        }
        for s in &ps {
            counts.predicted += 1;
            per.entry(s.kind.clone()).or_default().predicted += 1;
            let tail_span = is_tail(&surface(&g.tokens, s)) == Some(true);
            if tail_span {
                tail_counts.predicted += 1;
            }
            // spans from one sequence are disjoint, so exact matches are unique
            if gs.binary_search(s).is_ok() {
                counts.correct += 1;
                per.entry(s.kind.clone()).or_default().correct += 1;
                if tail_span {
                    tail_counts.correct += 1;
                }
            }
        }
    }
    Ok(EvalReport {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        token_accuracy: pct(tok_ok, tok_n),
        counts,
        per_label: per.into_iter().map(|(k, c)| (k, c.into())).collect(),
        long_tail: tail.map(|_| tail_counts.into()),
    })
}
