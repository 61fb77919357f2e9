//! Label sequences ↔ typed spans.
//!
//! BIO and BMES use conlleval's chunk-boundary rules, so ill-formed
//! predicted sequences still decode deterministically (an orphan `I-X`
//! opens a new chunk, exactly as the parse-time repair would).

use super::{split_tag, LabelScheme, LabelSet};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub kind: String,
}

impl Span {
    pub fn new(start: usize, end: usize, kind: impl Into<String>) -> Self {
        Self {
            start,
            end,
            kind: kind.into(),
        }
    }
}

/// Normalizes BMES `M` to `I` so one rule table covers both schemes.
fn prefix(p: char) -> char {
    if p == 'M' {
        'I'
    } else {
        p
    }
}

fn end_of_chunk(prev: char, tag: char, prev_ty: &str, ty: &str) -> bool {
    matches!(prev, 'E' | 'S')
        || (matches!(prev, 'B' | 'I') && matches!(tag, 'B' | 'S' | 'O'))
        || (prev != 'O' && prev_ty != ty)
}

fn start_of_chunk(prev: char, tag: char, prev_ty: &str, ty: &str) -> bool {
    matches!(tag, 'B' | 'S')
        || (matches!(prev, 'E' | 'S' | 'O') && matches!(tag, 'E' | 'I'))
        || (tag != 'O' && prev_ty != ty)
}

/// Maximal well-formed spans, ordered and disjoint.
pub fn spans_from_labels(labels: &[u32], set: &LabelSet) -> Vec<Span> {
    if set.scheme() == LabelScheme::Plain {
        return labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Span::new(i, i + 1, set.name(l)))
            .collect();
    }
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let (mut prev, mut prev_ty) = ('O', String::new());
    for (i, &l) in labels.iter().enumerate() {
        let (p, ty) = split_tag(set.name(l));
        let p = prefix(p);
        if end_of_chunk(prev, p, &prev_ty, ty) {
            if let Some((s, k)) = open.take() {
                spans.push(Span::new(s, i, k));
            }
        }
        if start_of_chunk(prev, p, &prev_ty, ty) {
            open = Some((i, ty.to_string()));
        }
        prev = p;
        prev_ty = ty.to_string();
    }
    if let Some((s, k)) = open {
        spans.push(Span::new(s, labels.len(), k));
    }
    spans
}

fn tag(prefix: &str, kind: &str) -> String {
    if kind.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix}-{kind}")
    }
}

/// Label names encoding `spans` over `n` tokens; tokens outside every span get `O`.
pub fn labels_from_spans(spans: &[Span], n: usize, scheme: LabelScheme) -> Vec<String> {
    let mut out = vec!["O".to_string(); n];
    for s in spans {
        match scheme {
            LabelScheme::Plain => out[s.start] = s.kind.clone(),
            LabelScheme::Bio => {
                out[s.start] = tag("B", &s.kind);
                for slot in &mut out[s.start + 1..s.end] {
                    *slot = tag("I", &s.kind);
                }
            }
            LabelScheme::Bmes => {
                if s.end - s.start == 1 {
                    out[s.start] = tag("S", &s.kind);
                } else {
                    out[s.start] = tag("B", &s.kind);
                    for slot in &mut out[s.start + 1..s.end - 1] {
                        *slot = tag("M", &s.kind);
                    }
                    out[s.end - 1] = tag("E", &s.kind);
                }
            }
        }
    }
    out
}
