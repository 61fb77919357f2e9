//! The vanilla tagger: token embeddings, a bidirectional Elman RNN producing
//! the representation `h` (also the datastore key), and an MLP softmax head.

use std::path::Path;

use gnnsl_tensor::{softmax, ParamId, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{hex, sha256, Checkpoint, ENCODER_MAGIC};
use crate::corpus::{Dataset, LabelScheme, LabelSet, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::prob::argmax;

pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Representation width; each RNN direction has `d / 2` units.
    pub d: usize,
    pub d_emb: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Embedding dropout, training only.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_emb: 32,
            lr: 0.05,
            epochs: 12,
            seed: 1,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::Argument(format!("encoder width d={} must be positive and even", self.d)));
        }
        if self.d_emb == 0 {
            return Err(Error::Argument("d_emb must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Direction {
    w_in: ParamId,
    w_rec: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    emb: ParamId,
    fwd: Direction,
    bwd: Direction,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub labels: LabelSet,
    pub params: ParamSet,
    ids: Ids,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn build_params(vocab: usize, labels: usize, cfg: &EncoderConfig) -> Result<(ParamSet, Ids)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, e, h) = (cfg.d, cfg.d_emb, cfg.d / 2);
    let mut p = ParamSet::new();
    let emb = p.add("embedding", uniform(&mut rng, &[vocab, e], 0.5))?;
    let mut dir = |p: &mut ParamSet, name: &str| -> Result<Direction> {
        Ok(Direction {
            w_in: p.add(format!("rnn.{name}.w_in"), uniform(&mut rng, &[e, h], 1.0 / (e as f64).sqrt()))?,
            w_rec: p.add(format!("rnn.{name}.w_rec"), uniform(&mut rng, &[h, h], 1.0 / (h as f64).sqrt()))?,
            bias: p.add(format!("rnn.{name}.bias"), Tensor::zeros(&[h]))?,
        })
    };
    let fwd = dir(&mut p, "fwd")?;
    let bwd = dir(&mut p, "bwd")?;
    let s = 1.0 / (d as f64).sqrt();
    let w1 = p.add("mlp.w1", uniform(&mut rng, &[d, d], s))?;
    let b1 = p.add("mlp.b1", Tensor::zeros(&[d]))?;
    let w2 = p.add("mlp.w2", uniform(&mut rng, &[d, labels], s))?;
    let b2 = p.add("mlp.b2", Tensor::zeros(&[labels]))?;
    Ok((p, Ids { emb, fwd, bwd, w1, b1, w2, b2 }))
}

impl Encoder {
    /// Freshly initialised (untrained) parameters.
    pub fn new(vocab: Vocab, labels: LabelSet, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        if labels.is_empty() {
            return Err(Error::Argument("label set is empty".into()));
        }
        let (params, ids) = build_params(vocab.len(), labels.len(), &config)?;
        Ok(Self {
            config,
            vocab,
            labels,
            params,
            ids,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn token_ids(&self, sentence: &TokenSequence) -> Vec<usize> {
        self.vocab.encode(&sentence.tokens)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Argument("cannot encode an empty sentence".into()));
        }
        match ids.iter().find(|&&i| i >= self.vocab.len()) {
            Some(bad) => Err(Error::Index(format!("token id {bad} outside vocabulary of {}", self.vocab.len()))),
            None => Ok(()),
        }
    }

    fn run_direction(&self, tape: &mut Tape, params: &ParamSet, x: Var, dir: Direction, reverse: bool) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        let w_in = tape.param(params, dir.w_in);
        let w_rec = tape.param(params, dir.w_rec);
        let bias = tape.param(params, dir.bias);
        let xw = tape.matmul(x, w_in)?;
        let pre_all = tape.add(xw, bias)?;
        let mut states: Vec<Option<Var>> = vec![None; n];
        let mut prev: Option<Var> = None;
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let mut pre = tape.slice_rows(pre_all, t, t + 1)?;
            if let Some(hp) = prev {
                let r = tape.matmul(hp, w_rec)?;
                pre = tape.add(pre, r)?;
            }
            let h = tape.tanh(pre);
            states[t] = Some(h);
            prev = Some(h);
        }
        let states: Vec<Var> = states.into_iter().map(|s| s.expect("every step visited")).collect();
        Ok(tape.concat(&states, 0)?)
    }

    /// Records the representation computation for `ids` on `tape`, reading
    /// weights from `params` (which must share this encoder's layout).
    /// `dropout_mask` multiplies the embedded inputs when given.
    pub fn represent_on(&self, tape: &mut Tape, params: &ParamSet, ids: &[usize], dropout_mask: Option<Tensor>) -> Result<Var> {
        self.check_ids(ids)?;
        let mut x = tape.param_rows(params, self.ids.emb, ids)?;
        if let Some(mask) = dropout_mask {
            let m = tape.constant(mask);
            x = tape.mul(x, m)?;
        }
        let f = self.run_direction(tape, params, x, self.ids.fwd, false)?;
        let b = self.run_direction(tape, params, x, self.ids.bwd, true)?;
        Ok(tape.concat(&[f, b], 1)?)
    }

    /// MLP logits for representations `h` (`n × d`).
    pub fn logits_on(&self, tape: &mut Tape, params: &ParamSet, h: Var) -> Result<Var> {
        let w1 = tape.param(params, self.ids.w1);
        let b1 = tape.param(params, self.ids.b1);
        let w2 = tape.param(params, self.ids.w2);
        let b2 = tape.param(params, self.ids.b2);
        let z = tape.matmul(h, w1)?;
        let z = tape.add(z, b1)?;
        let z = tape.tanh(z);
        let z = tape.matmul(z, w2)?;
        Ok(tape.add(z, b2)?)
    }

    /// Mean over sentences of each sentence's mean token cross-entropy.
    pub fn batch_loss_on(&self, tape: &mut Tape, params: &ParamSet, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let mut total: Option<Var> = None;
        for (ids, targets) in batch {
            let h = self.represent_on(tape, params, ids, None)?;
            let logits = self.logits_on(tape, params, h)?;
            let l = tape.softmax_cross_entropy(logits, targets)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        Ok(tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64))
    }

    /// Representations for already-mapped token ids, as an `n × d` tensor.
    pub fn encode_ids(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.represent_on(&mut tape, &self.params, ids, None)?;
        Ok(tape.value(h).clone())
    }

    /// One representation vector per token.
    pub fn encode(&self, sentence: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        self.encode_tokens(&sentence.tokens)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        let h = self.encode_ids(&self.vocab.encode(tokens))?;
        let d = self.d();
        Ok(h.data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Row-wise vanilla distributions for an `n × d` representation matrix.
    pub fn vanilla_probs(&self, h: &Tensor) -> Result<Tensor> {
        match h.dims2() {
            Some((_, w)) if w == self.d() => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "representation shape {:?} does not have width {}",
                    h.shape(),
                    self.d()
                )))
            }
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let logits = self.logits_on(&mut tape, &self.params, hv)?;
        Ok(softmax(tape.value(logits))?)
    }

    pub fn vanilla_predict(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.d() {
            return Err(Error::Dimension(format!("h has width {}, expected {}", h.len(), self.d())));
        }
        Ok(self.vanilla_probs(&Tensor::matrix(1, h.len(), h.to_vec())?)?.into_data())
    }

    /// Argmax labels of the vanilla head.
    pub fn tag(&self, tokens: &[String]) -> Result<Vec<u32>> {
        let h = self.encode_ids(&self.vocab.encode(tokens))?;
        let p = self.vanilla_probs(&h)?;
        let c = self.labels.len();
        Ok(p.data().chunks(c).map(|r| argmax(r) as u32).collect())
    }

    /// Mean token cross-entropy over `dataset`, without dropout.
    pub fn loss(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (mut total, mut n) = (0.0, 0usize);
        for s in &dataset.sentences {
            let mut tape = Tape::new();
            let h = self.represent_on(&mut tape, &self.params, &self.token_ids(s), None)?;
            let logits = self.logits_on(&mut tape, &self.params, h)?;
            let targets: Vec<usize> = s.labels.iter().map(|&l| l as usize).collect();
            let l = tape.softmax_cross_entropy(logits, &targets)?;
            total += tape.value(l).data()[0] * s.len() as f64;
            n += s.len();
        }
        Ok(total / n as f64)
    }

    pub fn token_accuracy(&self, dataset: &Dataset) -> Result<f64> {
        let (mut ok, mut n) = (0usize, 0usize);
        for s in &dataset.sentences {
            let pred = self.tag(&s.tokens)?;
            ok += pred.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
            n += s.len();
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(ok as f64 / n as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(ENCODER_MAGIC);
        c.set("d", self.config.d);
        c.set("d_emb", self.config.d_emb);
        c.set("lr", self.config.lr);
        c.set("epochs", self.config.epochs);
        c.set("seed", self.config.seed);
        c.set("dropout", self.config.dropout);
        c.set("scheme", self.labels.scheme());
        c.set("labels", self.labels.names().join("\n"));
        c.set("vocab", self.vocab.tokens().join("\n"));
        c.with_params(&self.params)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = EncoderConfig {
            d: c.parse("d")?,
            d_emb: c.parse("d_emb")?,
            lr: c.parse("lr")?,
            epochs: c.parse("epochs")?,
            seed: c.parse("seed")?,
            dropout: c.parse("dropout")?,
        };
        let scheme: LabelScheme = c.parse("scheme")?;
        let labels = LabelSet::from_names(scheme, &c.get("labels")?.split('\n').collect::<Vec<_>>())?;
        let vocab = Vocab::from_tokens(c.get("vocab")?.split('\n').map(String::from).collect())?;
        let mut enc = Self::new(vocab, labels, config)?;
        c.load_params(&mut enc.params)?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, ENCODER_MAGIC)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.to_checkpoint().to_bytes())
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }
}

/// Trains the vanilla tagger with per-sentence SGD on token cross-entropy.
/// The vocabulary is collected from `train`.
pub fn train_vanilla(train: &Dataset, dev: Option<&Dataset>, labels: &LabelSet, config: &EncoderConfig) -> Result<(Encoder, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    train.check_labels(labels)?;
    let mut enc = Encoder::new(Vocab::build(train), labels.clone(), config.clone())?;
    let mut log = TrainLog {
        initial_loss: enc.loss(train)?,
        epochs: Vec::new(),
    };
    let examples: Vec<(Vec<usize>, Vec<usize>)> = train
        .sentences
        .iter()
        .map(|s| (enc.token_ids(s), s.labels.iter().map(|&l| l as usize).collect()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let keep = 1.0 - config.dropout;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (ids, targets) = &examples[i];
            let mask = (config.dropout > 0.0).then(|| {
                let data = (0..ids.len() * config.d_emb)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                Tensor::matrix(ids.len(), config.d_emb, data).expect("mask shape")
            });
            let mut tape = Tape::new();
            let h = enc.represent_on(&mut tape, &enc.params, ids, mask)?;
            let logits = enc.logits_on(&mut tape, &enc.params, h)?;
            let loss = tape.softmax_cross_entropy(logits, targets)?;
            total += tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            enc.params.zero_grad();
            grads.accumulate_into(&mut enc.params)?;
            enc.params.clip_grad_norm(CLIP_NORM);
            enc.params.sgd_step(config.lr);
        }
        if !enc.params.all_finite() {
            return Err(Error::Argument(format!("training diverged at epoch {epoch}")));
        }
        let dev_accuracy = dev.map(|d| enc.token_accuracy(d)).transpose()?;
        let loss = total / examples.len() as f64;
        match dev_accuracy {
            Some(a) => log::info!("vanilla epoch {epoch}: loss {loss:.4}, dev accuracy {:.2}%", 100.0 * a),
            None => log::info!("vanilla epoch {epoch}: loss {loss:.4}"),
        }
        log.epochs.push(EpochLog { epoch, loss, dev_accuracy });
    }
    Ok((enc, log))
}
