use std::fmt;
use std::str::FromStr;

use gnnsl::checkpoint::Checkpoint;
use gnnsl::datastore::Datastore;
use gnnsl::encoder::Encoder;
use gnnsl::gnn::{gnn_predict, GnnParameters};
use gnnsl::graph::WindowConfig;
use gnnsl::knnsl::{interpolate, knn_distribution, InterpConfig, KnnTagger};
use gnnsl::prob::argmax;
use rayon::prelude::*;

use crate::config::Config;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Vanilla,
    Knn,
    Gnn,
    GnnKnn,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "knn" => Ok(Mode::Knn),
            "gnn" => Ok(Mode::Gnn),
            "gnn+knn" => Ok(Mode::GnnKnn),
            _ => Err(format!("unknown mode {s:?}; expected vanilla, knn, gnn or gnn+knn")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Knn => "knn",
            Mode::Gnn => "gnn",
            Mode::GnnKnn => "gnn+knn",
        })
    }
}

pub struct Tagger {
    mode: Mode,
    encoder: Encoder,
    store: Option<Datastore>,
    gnn: Option<(GnnParameters, WindowConfig)>,
    interp: InterpConfig,
}

impl Tagger {
    pub fn new(mode: Mode, encoder: Encoder, store: Option<Datastore>, gnn: Option<&Checkpoint>, cfg: &Config) -> Result<Self, CliError> {
        let interp = cfg.interp()?;
        if let Some(s) = &store {
            s.check_compatible(&encoder)?;
        }
        let gnn = match gnn {
            Some(ck) => {
                let model = GnnParameters::from_checkpoint(ck)?;
                model.check_encoder(&encoder)?;
                // the window the model was trained with, when recorded
                let window = match (ck.parse("window.c"), ck.parse("window.include_labels")) {
                    (Ok(c), Ok(include_labels)) => WindowConfig { c, include_labels },
                    _ => cfg.window()?,
                };
                Some((model, window))
            }
            None => None,
        };
        Ok(Self {
            mode,
            encoder,
            store,
            gnn,
            interp,
        })
    }

    fn tag_gnn(&self, tokens: &[String]) -> gnnsl::Result<Vec<u32>> {
        let store = self.store.as_ref().expect("checked at construction");
        let (model, window) = self.gnn.as_ref().expect("checked at construction");
        let reps = self.encoder.encode_tokens(tokens)?;
        let nbs = reps
            .iter()
            .map(|h| store.knn_query(h, model.config.k, None))
            .collect::<gnnsl::Result<Vec<_>>>()?;
        let p = gnn_predict(model, store, &reps, &nbs, *window)?;
        p.data()
            .chunks(model.label_count)
            .zip(&nbs)
            .map(|(pg, nb)| {
                if self.mode == Mode::GnnKnn {
                    let pk = knn_distribution(store, nb, self.interp.temperature)?;
                    Ok(argmax(&interpolate(pg, &pk, self.interp.lambda)?) as u32)
                } else {
                    Ok(argmax(pg) as u32)
                }
            })
            .collect()
    }

    /// Tags every sentence of a CoNLL text, keeping each token field as is.
    pub fn tag_text(&self, text: &str, threads: usize) -> Result<String, CliError> {
        let sentences = split_sentences(text);
        let knn = match (self.mode, &self.store) {
            (Mode::Knn, Some(s)) => Some(KnnTagger::new(&self.encoder, s, self.interp)?),
            _ => None,
        };
        let tag_one = |tokens: &Vec<&str>| -> gnnsl::Result<Vec<u32>> {
            let owned: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
            match self.mode {
                Mode::Vanilla => self.encoder.tag(&owned),
                Mode::Knn => Ok(knn.as_ref().expect("built above").tag(&owned)?.into_iter().map(|p| p.0).collect()),
                Mode::Gnn | Mode::GnnKnn => self.tag_gnn(&owned),
            }
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
        let labels = pool.install(|| sentences.par_iter().map(tag_one).collect::<gnnsl::Result<Vec<_>>>())?;
        let mut out = String::new();
        for (i, (tokens, labs)) in sentences.iter().zip(&labels).enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for (tok, &l) in tokens.iter().zip(labs) {
                out.push_str(tok);
                out.push(' ');
                out.push_str(self.encoder.labels.name(l));
                out.push('\n');
            }
        }
        Ok(out)
    }
}

/// First whitespace-separated field of each line, grouped by blank lines.
fn split_sentences(text: &str) -> Vec<Vec<&str>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines() {
        match line.split_whitespace().next() {
            Some(tok) => cur.push(tok),
            None if !cur.is_empty() => out.push(std::mem::take(&mut cur)),
            None => {}
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
