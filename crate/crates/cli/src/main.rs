//! `gnnsl`: train, tag and evaluate retrieval-augmented sequence labelers.

mod config;
mod tagging;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gnnsl::checkpoint::{Checkpoint, GNN_MAGIC};
use gnnsl::corpus::{generate_synthetic, parse_conll, parse_conll_with, Dataset, LabelSet};
use gnnsl::datastore::Datastore;
use gnnsl::encoder::{train_vanilla, Encoder};
use gnnsl::eval::evaluate;
use gnnsl::gnn::train_gnn;
use gnnsl::harness::run_plan;

use crate::config::Config;
use crate::tagging::Mode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] gnnsl::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Data(gnnsl::Error::Argument(_)) => 1,
            CliError::Data(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gnnsl", version, about = "Retrieval-augmented sequence labeling")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// File of `key=value` lines; overridden by flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set any config key, e.g. `--set gnn.lr=0.01`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic train/dev/test corpus.
    GenData(GenData),
    /// Train the encoder and its softmax head.
    TrainVanilla(TrainVanilla),
    /// Encode every training token into a datastore file.
    BuildDatastore(BuildDatastore),
    /// Train the graph model over retrieved neighbors.
    TrainGnn(TrainGnn),
    /// Tag a CoNLL file; predicted labels go in the second column.
    Tag(Tag),
    /// Score a tagged file against gold labels.
    Evaluate(Evaluate),
    /// Run setups and ablation sweeps end to end.
    Ablate(Ablate),
}

#[derive(Debug, Args)]
struct GenData {
    /// Output directory for train.conll, dev.conll and test.conll.
    #[arg(long)]
    out: PathBuf,
    /// Corpus seed (synthetic.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sentences (synthetic.n).
    #[arg(long)]
    n: Option<usize>,
    /// Share of long-tail entity mentions (synthetic.long_tail_fraction).
    #[arg(long)]
    long_tail_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainVanilla {
    #[arg(long)]
    train: PathBuf,
    /// Optional dev file for per-epoch accuracy.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Encoder checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training seed (encoder.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs (encoder.epochs).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct BuildDatastore {
    /// Encoder checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Datastore file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainGnn {
    /// Encoder checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Datastore built from the same encoder and training file.
    #[arg(long)]
    datastore: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// GNN checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training seed (gnn.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs (gnn.epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Neighbors per token (gnn.k).
    #[arg(long)]
    k: Option<usize>,
    /// Context radius around each neighbor (window.c).
    #[arg(long)]
    radius: Option<usize>,
    /// Leave label nodes out of the graph (window.include_labels=false).
    #[arg(long)]
    no_labels: bool,
}

#[derive(Debug, Args)]
struct Tag {
    /// Encoder checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// One of vanilla, knn, gnn, gnn+knn.
    #[arg(long)]
    mode: Mode,
    /// Datastore; required by every mode except vanilla.
    #[arg(long)]
    datastore: Option<PathBuf>,
    /// GNN checkpoint; required by gnn and gnn+knn.
    #[arg(long)]
    gnn: Option<PathBuf>,
    /// CoNLL input; only the first column is read.
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads across sentences.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Neighbors for knn mode (knn.k).
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the model distribution (knn.lambda).
    #[arg(long)]
    lambda: Option<f64>,
    /// Retrieval temperature (knn.temperature).
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct Evaluate {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Training file; enables the long-tail breakdown.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Ablate {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Directory for result tables and the checkpoint cache.
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated seeds (plan.seeds).
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated setups (plan.setups).
    #[arg(long)]
    setups: Option<String>,
    /// Comma-separated k values (plan.k_sweep).
    #[arg(long)]
    k_sweep: Option<String>,
}

fn flag<T: ToString>(out: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

impl Command {
    /// Named flags as config overrides.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        match self {
            Command::GenData(c) => {
                flag(&mut o, "synthetic.seed", &c.seed);
                flag(&mut o, "synthetic.n", &c.n);
                flag(&mut o, "synthetic.long_tail_fraction", &c.long_tail_fraction);
            }
            Command::TrainVanilla(c) => {
                flag(&mut o, "encoder.seed", &c.seed);
                flag(&mut o, "encoder.epochs", &c.epochs);
            }
            Command::TrainGnn(c) => {
                flag(&mut o, "gnn.seed", &c.seed);
                flag(&mut o, "gnn.epochs", &c.epochs);
                flag(&mut o, "gnn.k", &c.k);
                flag(&mut o, "window.c", &c.radius);
                if c.no_labels {
                    o.push(("window.include_labels".into(), "false".into()));
                }
            }
            Command::Tag(c) => {
                flag(&mut o, "knn.k", &c.k);
                flag(&mut o, "knn.lambda", &c.lambda);
                flag(&mut o, "knn.temperature", &c.temperature);
            }
            Command::Ablate(c) => {
                flag(&mut o, "plan.seeds", &c.seeds);
                flag(&mut o, "plan.setups", &c.setups);
                flag(&mut o, "plan.k_sweep", &c.k_sweep);
            }
            Command::BuildDatastore(_) | Command::Evaluate(_) => {}
        }
        o
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| gnnsl::Error::io(path, e).into())
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| gnnsl::Error::io(path, e).into())
}

/// Parses a labeled file against an existing label set, which must not grow.
fn read_labeled(path: &Path, labels: &LabelSet) -> Result<Dataset, CliError> {
    let mut set = labels.clone();
    let (data, _) = parse_conll_with(&read(path)?, &mut set)?;
    if set.len() != labels.len() {
        let extra = &set.names()[labels.len()..];
        return Err(gnnsl::Error::Label(format!("{}: labels {extra:?} unknown to the model", path.display())).into());
    }
    Ok(data)
}

fn run(cmd: Command, cfg: &Config) -> Result<(), CliError> {
    match cmd {
        Command::GenData(c) => {
            let (split, labels) = generate_synthetic(
                cfg.get("synthetic.seed")?,
                cfg.get("synthetic.n")?,
                cfg.get("synthetic.long_tail_fraction")?,
            )?;
            std::fs::create_dir_all(&c.out).map_err(|e| gnnsl::Error::io(&c.out, e))?;
            for (name, part) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
                write(&c.out.join(format!("{name}.conll")), &part.to_conll(&labels))?;
            }
            log::info!("wrote {} / {} / {} sentences to {}", split.train.len(), split.dev.len(), split.test.len(), c.out.display());
        }
        Command::TrainVanilla(c) => {
            let parsed = parse_conll(&read(&c.train)?, cfg.scheme()?)?;
            let mut labels = parsed.labels;
            let dev = match &c.dev {
                Some(p) => Some(parse_conll_with(&read(p)?, &mut labels)?.0),
                None => None,
            };
            let (enc, log) = train_vanilla(&parsed.dataset, dev.as_ref(), &labels, &cfg.encoder()?)?;
            if let Some(last) = log.epochs.last() {
                log::info!("final loss {:.4}", last.loss);
            }
            enc.save(&c.out)?;
            log::info!("encoder {} written to {}", enc.digest_hex(), c.out.display());
        }
        Command::BuildDatastore(c) => {
            let enc = Encoder::load(&c.model)?;
            let train = read_labeled(&c.train, &enc.labels)?;
            let store = Datastore::build(&enc, &train)?;
            store.save(&c.out)?;
            log::info!("{} records written to {}", store.len(), c.out.display());
        }
        Command::TrainGnn(c) => {
            let enc = Encoder::load(&c.model)?;
            let store = Datastore::load(&c.datastore)?;
            let train = read_labeled(&c.train, &enc.labels)?;
            let window = cfg.window()?;
            let (model, _) = train_gnn(&enc, &store, &train, window, &cfg.gnn()?)?;
            let mut ck = model.to_checkpoint();
            ck.set("window.c", window.c);
            ck.set("window.include_labels", window.include_labels);
            ck.save(&c.out)?;
            log::info!("GNN written to {}", c.out.display());
        }
        Command::Tag(c) => {
            if c.threads == 0 {
                return Err(CliError::Usage("--threads must be at least 1".into()));
            }
            let needs_store = c.mode != Mode::Vanilla;
            let needs_gnn = matches!(c.mode, Mode::Gnn | Mode::GnnKnn);
            if needs_store && c.datastore.is_none() {
                return Err(CliError::Usage(format!("--mode {} requires --datastore", c.mode)));
            }
            if needs_gnn && c.gnn.is_none() {
                return Err(CliError::Usage(format!("--mode {} requires --gnn", c.mode)));
            }
            let enc = Encoder::load(&c.model)?;
            let store = c.datastore.as_deref().map(Datastore::load).transpose()?;
            let gnn = match c.gnn.as_deref().filter(|_| needs_gnn) {
                Some(p) => Some(Checkpoint::load(p, GNN_MAGIC)?),
                None => None,
            };
            let tagger = tagging::Tagger::new(c.mode, enc, store, gnn.as_ref(), cfg)?;
            let text = read(&c.input)?;
            let out = tagger.tag_text(&text, c.threads)?;
            match &c.out {
                Some(p) => write(p, &out)?,
                None => print!("{out}"),
            }
        }
        Command::Evaluate(c) => {
            let gold = parse_conll(&read(&c.gold)?, cfg.scheme()?)?;
            let mut labels = gold.labels;
            let (pred, _) = parse_conll_with(&read(&c.pred)?, &mut labels)?;
            if pred.len() != gold.dataset.len() {
                return Err(gnnsl::Error::Alignment {
                    sentence: pred.len().min(gold.dataset.len()),
                    message: format!("{} predicted sentences for {} gold sentences", pred.len(), gold.dataset.len()),
                }
                .into());
            }
            for (i, (p, g)) in pred.sentences.iter().zip(&gold.dataset.sentences).enumerate() {
                if p.tokens != g.tokens {
                    return Err(gnnsl::Error::Alignment {
                        sentence: i,
                        message: "token columns differ".into(),
                    }
                    .into());
                }
            }
            let train = match &c.train {
                Some(p) => Some(parse_conll_with(&read(p)?, &mut labels)?.0),
                None => None,
            };
            let labels_pred: Vec<Vec<u32>> = pred.sentences.into_iter().map(|s| s.labels).collect();
            let report = evaluate(&labels_pred, &gold.dataset, &labels, train.as_ref())?;
            print!("{}", report.to_kv());
            if let Some(p) = &c.json {
                write(p, &report.to_json())?;
            }
        }
        Command::Ablate(c) => {
            let plan = cfg.plan(c.out_dir.clone())?;
            let (split, labels) = gnnsl::harness::load_split(&c.train, &c.dev, &c.test, cfg.scheme()?)?;
            let outcome = run_plan(&plan, &split, &labels)?;
            log::info!(
                "trained {} encoders, {} datastores, {} GNNs; {} cache hits",
                outcome.counters.encoders_trained,
                outcome.counters.datastores_built,
                outcome.counters.gnns_trained,
                outcome.counters.cache_hits
            );
            log::info!("results in {} and {}", outcome.json_path.display(), outcome.summary_path.display());
            print!("{}", outcome.table.to_summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mut flags = cli.common.set.clone();
    flags.extend(cli.command.overrides());
    let result = Config::resolve(cli.common.config.as_deref(), &flags).and_then(|cfg| {
        log::info!("resolved config:\n{}", cfg.dump().trim_end());
        run(cli.command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code())
        }
    }
}
