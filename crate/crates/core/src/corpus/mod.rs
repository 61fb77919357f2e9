//! Labeled token sequences, label schemes, and vocabularies.

mod conll;
mod spans;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use conll::{parse_conll, parse_conll_with, Parsed};
pub use spans::{labels_from_spans, spans_from_labels, Span};
pub use synthetic::{generate_synthetic, SYNTHETIC_TYPES};

/// One sentence with its gold labels. `id` doubles as datastore provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub id: usize,
    pub tokens: Vec<String>,
    pub labels: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub sentences: Vec<TokenSequence>,
}

impl Dataset {
    pub fn new(sentences: Vec<TokenSequence>) -> Self {
        Self { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(TokenSequence::len).sum()
    }

    /// Two-column CoNLL text, one blank line between sentences.
    pub fn to_conll(&self, labels: &LabelSet) -> String {
        let mut out = String::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for (tok, &lab) in s.tokens.iter().zip(&s.labels) {
                out.push_str(tok);
                out.push(' ');
                out.push_str(labels.name(lab));
                out.push('\n');
            }
        }
        out
    }

    pub fn digest(&self, labels: &LabelSet) -> [u8; 32] {
        Sha256::digest(self.to_conll(labels).as_bytes()).into()
    }

    pub fn check_labels(&self, labels: &LabelSet) -> Result<()> {
        for s in &self.sentences {
            if s.tokens.len() != s.labels.len() || s.tokens.is_empty() {
                return Err(Error::Alignment {
                    sentence: s.id,
                    message: format!("{} tokens, {} labels", s.tokens.len(), s.labels.len()),
                });
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l as usize >= labels.len()) {
                return Err(Error::Label(format!("sentence {} uses unknown label id {bad}", s.id)));
            }
        }
        Ok(())
    }
}

/// Train/dev/test partition; each part numbers its sentences from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelScheme {
    Bio,
    Bmes,
    Plain,
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" => Ok(Self::Bio),
            "bmes" => Ok(Self::Bmes),
            "plain" => Ok(Self::Plain),
            other => Err(Error::Argument(format!("unknown label scheme `{other}`"))),
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bio => "bio",
            Self::Bmes => "bmes",
            Self::Plain => "plain",
        })
    }
}

/// Splits a tag into its boundary prefix and entity type, e.g. `B-PER` → (`B`, `PER`).
/// `O` yields (`O`, ``); untyped BMES tags yield an empty type.
pub(crate) fn split_tag(name: &str) -> (char, &str) {
    if name == "O" {
        return ('O', "");
    }
    let mut chars = name.chars();
    match (chars.next(), chars.next()) {
        (Some(p), None) => (p, ""),
        (Some(p), Some('-')) => (p, &name[2..]),
        _ => ('?', name),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    scheme: LabelScheme,
    index: HashMap<String, u32>,
}

impl LabelSet {
    pub fn new(scheme: LabelScheme) -> Self {
        Self {
            names: Vec::new(),
            scheme,
            index: HashMap::new(),
        }
    }

    pub fn from_names<S: AsRef<str>>(scheme: LabelScheme, names: &[S]) -> Result<Self> {
        let mut set = Self::new(scheme);
        for n in names {
            let n = n.as_ref();
            if set.id(n).is_some() {
                return Err(Error::Label(format!("duplicate label `{n}`")));
            }
            set.intern(n)?;
        }
        Ok(set)
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
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

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn validate_name(&self, name: &str) -> Result<()> {
        let (prefix, ty) = split_tag(name);
        let ok = match self.scheme {
            LabelScheme::Plain => !name.is_empty() && !name.chars().any(char::is_whitespace),
            LabelScheme::Bio => prefix == 'O' || (matches!(prefix, 'B' | 'I') && !ty.is_empty()),
            LabelScheme::Bmes => matches!(prefix, 'B' | 'M' | 'E' | 'S'),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Label(format!("`{name}` is not a valid {} label", self.scheme)))
        }
    }

    /// Returns the id of `name`, adding it if absent.
    pub fn intern(&mut self, name: &str) -> Result<u32> {
        if let Some(id) = self.id(name) {
            return Ok(id);
        }
        self.validate_name(name)?;
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// The id of the `O` label, when the scheme has one.
    pub fn outside(&self) -> Option<u32> {
        self.id("O")
    }
}

/// Token vocabulary. Id 0 is the sentence-boundary token, id 1 is UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const BOUNDARY: usize = 0;
    pub const UNK: usize = 1;
    pub const BOUNDARY_TOKEN: &'static str = "<s>";
    pub const UNK_TOKEN: &'static str = "<unk>";

    pub fn new() -> Self {
        let tokens = vec![Self::BOUNDARY_TOKEN.to_string(), Self::UNK_TOKEN.to_string()];
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Vocabulary over every token of `dataset`, in first-appearance order.
    pub fn build(dataset: &Dataset) -> Self {
        let mut v = Self::new();
        for s in &dataset.sentences {
            for t in &s.tokens {
                v.insert(t);
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its token list (reserved entries included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != Self::BOUNDARY_TOKEN || tokens[1] != Self::UNK_TOKEN {
            return Err(Error::Argument("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Token id, with out-of-vocabulary tokens mapped to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}
