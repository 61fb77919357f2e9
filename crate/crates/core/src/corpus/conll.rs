//! Two-column CoNLL reader.

use super::{split_tag, Dataset, LabelScheme, LabelSet, TokenSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Parsed {
    pub dataset: Dataset,
    pub labels: LabelSet,
    /// Orphan `I-X` tags rewritten to `B-X`.
    pub repairs: usize,
}

/// Parses `surface label` lines; blank lines separate sentences.
/// Sentence ids are assigned in order from 0; the label set is collected
/// from the data.
pub fn parse_conll(text: &str, scheme: LabelScheme) -> Result<Parsed> {
    let mut labels = LabelSet::new(scheme);
    let (dataset, repairs) = parse_conll_with(text, &mut labels)?;
    Ok(Parsed {
        dataset,
        labels,
        repairs,
    })
}

/// Like [`parse_conll`], reusing (and extending) an existing label set so
/// ids agree across splits. Returns the dataset and the repair count.
pub fn parse_conll_with(text: &str, labels: &mut LabelSet) -> Result<(Dataset, usize)> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut names: Vec<(usize, String)> = Vec::new();
    let mut repairs = 0;

    let mut flush = |tokens: &mut Vec<String>,
                     names: &mut Vec<(usize, String)>,
                     labels: &mut LabelSet,
                     sentences: &mut Vec<TokenSequence>|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        if labels.scheme() == LabelScheme::Bio {
            repairs += repair_bio(names);
        }
        let ids = names
            .iter()
            .map(|(line, n)| {
                labels.intern(n).map_err(|e| Error::Parse {
                    line: *line,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sentences.push(TokenSequence {
            id: sentences.len(),
            tokens: std::mem::take(tokens),
            labels: ids,
        });
        names.clear();
        Ok(())
    };

    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut names, labels, &mut sentences)?;
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 2 columns, found {}", cols.len()),
            });
        }
        tokens.push(cols[0].to_string());
        names.push((i + 1, cols[1].to_string()));
    }
    flush(&mut tokens, &mut names, labels, &mut sentences)?;

    if sentences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((Dataset::new(sentences), repairs))
}

/// Rewrites each `I-X` not preceded by `B-X`/`I-X` to `B-X`.
fn repair_bio(names: &mut [(usize, String)]) -> usize {
    let mut repairs = 0;
    let mut prev: Option<(char, String)> = None;
    for (line, name) in names.iter_mut() {
        let (p, ty) = split_tag(name);
        let ty = ty.to_string();
        if p == 'I' {
            let continues = matches!(&prev, Some((pp, pt)) if (*pp == 'B' || *pp == 'I') && *pt == ty);
            if !continues {
                log::warn!("line {line}: orphan {name} repaired to B-{ty}");
                *name = format!("B-{ty}");
                repairs += 1;
            }
        }
        prev = Some((split_tag(name).0, ty));
    }
    repairs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sentences_two_labels() {
        let p = parse_conll("Obama B-PER\n\nParis B-LOC", LabelScheme::Bio).unwrap();
        assert_eq!(p.dataset.len(), 2);
        assert_eq!(p.labels.names(), &["B-PER", "B-LOC"]);
        assert_eq!(p.dataset.sentences[1].id, 1);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(parse_conll("", LabelScheme::Bio), Err(Error::EmptyDataset)));
        assert!(matches!(parse_conll("\n\n  \n", LabelScheme::Bio), Err(Error::EmptyDataset)));
    }

    #[test]
    fn single_column_line_names_its_line() {
        match parse_conll("word", LabelScheme::Bio) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_conll("a O\nb O extra", LabelScheme::Bio) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crlf_is_accepted() {
        let p = parse_conll("a O\r\nb B-LOC\r\n\r\nc O\r\n", LabelScheme::Bio).unwrap();
        assert_eq!(p.dataset.len(), 2);
        assert_eq!(p.dataset.sentences[0].tokens, vec!["a", "b"]);
    }

    #[test]
    fn orphan_inside_tags_are_repaired_and_counted() {
        let p = parse_conll("a I-PER\nb I-PER\nc O\nd I-LOC\n\ne B-ORG\nf I-PER", LabelScheme::Bio).unwrap();
        assert_eq!(p.repairs, 3);
        let names = |s: usize| -> Vec<&str> {
            p.dataset.sentences[s].labels.iter().map(|&l| p.labels.name(l)).collect()
        };
        assert_eq!(names(0), vec!["B-PER", "I-PER", "O", "B-LOC"]);
        assert_eq!(names(1), vec!["B-ORG", "B-PER"]);
    }

    #[test]
    fn invalid_label_is_a_parse_error() {
        assert!(matches!(parse_conll("a Q-X", LabelScheme::Bio), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn shared_label_set_keeps_ids_stable() {
        let train = parse_conll("a B-PER\nb O", LabelScheme::Bio).unwrap();
        let mut labels = train.labels.clone();
        let (dev, _) = parse_conll_with("c O\nd B-LOC", &mut labels).unwrap();
        assert_eq!(dev.sentences[0].labels[0], train.labels.id("O").unwrap());
        assert_eq!(labels.len(), 3);
    }
}
