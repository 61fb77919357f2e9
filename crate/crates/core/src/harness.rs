//! Experiment runner: control setups, one-factor ablations, cached stages.
//!
//! Every cell starts from a base configuration (`gnn.k` neighbors, window
//! radius `window.c`, label nodes on, retrieval keys from the trained
//! encoder) and varies at most one factor. Trained encoders, datastores and
//! GNNs are stored under `output_dir/cache`, named by the digest of
//! everything that determines them.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{hex, sha256, write_atomic};
use crate::corpus::{parse_conll_with, Dataset, LabelScheme, LabelSet, SplitDataset, Vocab};
use crate::datastore::Datastore;
use crate::encoder::{train_vanilla, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::gnn::{gnn_predict, retrieve, train_gnn, GnnConfig, GnnParameters, Retrieved};
use crate::graph::WindowConfig;
use crate::knnsl::{interpolate, knn_distribution};
use crate::prob::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setup {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "vanilla+knn")]
    VanillaKnn,
    #[serde(rename = "vanilla+gnn")]
    VanillaGnn,
    #[serde(rename = "vanilla+gnn+knn")]
    VanillaGnnKnn,
}

impl Setup {
    pub const ALL: [Setup; 4] = [Setup::Vanilla, Setup::VanillaKnn, Setup::VanillaGnn, Setup::VanillaGnnKnn];

    pub fn name(self) -> &'static str {
        match self {
            Setup::Vanilla => "vanilla",
            Setup::VanillaKnn => "vanilla+knn",
            Setup::VanillaGnn => "vanilla+gnn",
            Setup::VanillaGnnKnn => "vanilla+gnn+knn",
        }
    }

    pub fn retrieves(self) -> bool {
        self != Setup::Vanilla
    }

    pub fn uses_gnn(self) -> bool {
        matches!(self, Setup::VanillaGnn | Setup::VanillaGnnKnn)
    }

    pub fn interpolates(self) -> bool {
        matches!(self, Setup::VanillaKnn | Setup::VanillaGnnKnn)
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setup::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown setup {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub setups: Vec<Setup>,
    /// Neighbor counts to sweep; the base count is `gnn.k`.
    pub k_sweep: Vec<usize>,
    /// Context radii to sweep for graph setups; the base radius is `window.c`.
    pub radius_sweep: Vec<usize>,
    /// Add a graph arm without label nodes.
    pub ablate_labels: bool,
    /// Add an arm whose retrieval keys come from an untrained encoder.
    pub ablate_finetuned_keys: bool,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub gnn: GnnConfig,
    pub window: WindowConfig,
    /// Interpolation weights tried on the dev split.
    pub lambdas: Vec<f64>,
    /// Temperatures tried on the dev split.
    pub temperatures: Vec<f64>,
}

impl ExperimentPlan {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            setups: Setup::ALL.to_vec(),
            k_sweep: Vec::new(),
            radius_sweep: Vec::new(),
            ablate_labels: false,
            ablate_finetuned_keys: false,
            seeds: vec![1],
            output_dir: output_dir.into(),
            encoder: EncoderConfig::default(),
            gnn: GnnConfig::default(),
            window: WindowConfig::default(),
            lambdas: (1..=9).map(|i| i as f64 / 10.0).collect(),
            temperatures: vec![1.0, 10.0, 100.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Argument("plan needs at least one seed".into()));
        }
        if self.setups.is_empty() {
            return Err(Error::Argument("plan needs at least one setup".into()));
        }
        if self.k_sweep.contains(&0) {
            return Err(Error::Argument("k sweep values must be positive".into()));
        }
        if self.radius_sweep.contains(&0) {
            return Err(Error::Argument("radius sweep values must be positive".into()));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Argument("lambda grid must be nonempty and inside [0, 1]".into()));
        }
        if self.temperatures.is_empty() || self.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Argument("temperature grid must be nonempty and positive".into()));
        }
        self.encoder.validate()?;
        self.gnn.validate()?;
        if self.gnn.d != self.encoder.d {
            return Err(Error::Argument(format!(
                "GNN width {} differs from encoder width {}",
                self.gnn.d, self.encoder.d
            )));
        }
        Ok(())
    }

    /// Every cell of the plan, in output order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &setup in &self.setups {
                let base = Cell {
                    seed,
                    setup,
                    arm: Arm::Base,
                    k: self.gnn.k,
                    radius: self.window.c,
                    include_labels: self.window.include_labels,
                    finetuned_keys: true,
                };
                out.push(base);
                if !setup.retrieves() {
                    continue;
                }
                for &k in self.k_sweep.iter().filter(|&&k| k != base.k) {
                    out.push(Cell { arm: Arm::K, k, ..base });
                }
                if setup.uses_gnn() {
                    for &radius in self.radius_sweep.iter().filter(|&&c| c != base.radius) {
                        out.push(Cell { arm: Arm::Radius, radius, ..base });
                    }
                    if self.ablate_labels && base.include_labels {
                        out.push(Cell { arm: Arm::NoLabels, include_labels: false, ..base });
                    }
                }
                if self.ablate_finetuned_keys {
                    out.push(Cell { arm: Arm::UntrainedKeys, finetuned_keys: false, ..base });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Base,
    K,
    Radius,
    NoLabels,
    UntrainedKeys,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::K => "k",
            Arm::Radius => "radius",
            Arm::NoLabels => "no-labels",
            Arm::UntrainedKeys => "untrained-keys",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub seed: u64,
    pub setup: Setup,
    pub arm: Arm,
    pub k: usize,
    pub radius: usize,
    pub include_labels: bool,
    pub finetuned_keys: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub long_tail_f1: f64,
    pub token_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub seed: u64,
    pub setup: Setup,
    pub arm: Arm,
    pub k: Option<usize>,
    pub radius: Option<usize>,
    pub include_labels: Option<bool>,
    pub finetuned_keys: bool,
    pub lambda: Option<f64>,
    pub temperature: Option<f64>,
    pub digest: String,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
    pub note: Option<String>,
}

/// The best k of one (seed, setup) sweep, by test F1; ties keep the smaller k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestK {
    pub seed: u64,
    pub setup: Setup,
    pub k: usize,
    pub f1: f64,
    pub f1_at_k1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub plan_digest: String,
    pub rows: Vec<Row>,
    pub best_k: Vec<BestK>,
}

impl ResultTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// One `key=value` line per row, then one per best-k entry.
    pub fn to_summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mut line = format!("seed={} setup={} arm={}", r.seed, r.setup, r.arm.name());
            let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
            write!(
                line,
                " k={} radius={} labels={} finetuned_keys={} lambda={} temperature={}",
                opt(r.k.map(|v| v.to_string())),
                opt(r.radius.map(|v| v.to_string())),
                opt(r.include_labels.map(|v| v.to_string())),
                r.finetuned_keys,
                opt(r.lambda.map(|v| format!("{v:.1}"))),
                opt(r.temperature.map(|v| v.to_string())),
            )
            .expect("writing to a String");
            match (&r.metrics, &r.error) {
                (Some(m), _) => write!(
                    line,
                    " precision={:.2} recall={:.2} f1={:.2} long_tail_f1={:.2} token_accuracy={:.2}",
                    m.precision, m.recall, m.f1, m.long_tail_f1, m.token_accuracy
                ),
                (None, e) => write!(line, " error={:?}", e.as_deref().unwrap_or("unknown")),
            }
            .expect("writing to a String");
            write!(line, " digest={}", r.digest).expect("writing to a String");
            out.push_str(&line);
            out.push('\n');
        }
        for b in &self.best_k {
            let _ = writeln!(
                out,
                "best_k seed={} setup={} k={} f1={:.2} f1_at_k1={}",
                b.seed,
                b.setup,
                b.k,
                b.f1,
                b.f1_at_k1.map(|f| format!("{f:.2}")).unwrap_or_else(|| "-".into())
            );
        }
        out
    }

    pub fn row(&self, seed: u64, setup: Setup, arm: Arm) -> Option<&Row> {
        self.rows.iter().find(|r| r.seed == seed && r.setup == setup && r.arm == arm)
    }

    /// Mean of a metric over every error-free row matching the filter.
    pub fn mean(&self, filter: impl Fn(&Row) -> bool, metric: impl Fn(&Metrics) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| filter(r)).filter_map(|r| r.metrics.as_ref().map(&metric)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// How often each stage actually ran rather than being read from the cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageCounters {
    pub encoders_trained: usize,
    pub datastores_built: usize,
    pub gnns_trained: usize,
    pub cache_hits: usize,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub table: ResultTable,
    pub counters: StageCounters,
    pub json_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Parses three CoNLL files against one shared label set.
pub fn load_split(train: &Path, dev: &Path, test: &Path, scheme: LabelScheme) -> Result<(SplitDataset, LabelSet)> {
    let mut labels = LabelSet::new(scheme);
    let mut read = |p: &Path| -> Result<Dataset> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let (d, repairs) = parse_conll_with(&text, &mut labels)?;
        if repairs > 0 {
            log::warn!("{}: repaired {repairs} orphan inside tags", p.display());
        }
        Ok(d)
    };
    let split = SplitDataset {
        train: read(train)?,
        dev: read(dev)?,
        test: read(test)?,
    };
    Ok((split, labels))
}

fn split_digest(split: &SplitDataset, labels: &LabelSet) -> [u8; 32] {
    let mut bytes = Vec::new();
    for d in [&split.train, &split.dev, &split.test] {
        bytes.extend_from_slice(&d.digest(labels));
    }
    sha256(&bytes)
}

fn digest_of(parts: &[&str]) -> String {
    hex(&sha256(parts.join("\n").as_bytes()))
}

/// Per-sentence, per-token distributions.
type Probs = Vec<Vec<Vec<f64>>>;

struct SeedState {
    trained: Encoder,
    vanilla_dev: Probs,
    vanilla_test: Probs,
    keys: HashMap<bool, KeySpace>,
}

struct KeySpace {
    encoder: Encoder,
    store: Datastore,
    dev: Retrieved,
    test: Retrieved,
}

struct Runner<'a> {
    plan: &'a ExperimentPlan,
    split: &'a SplitDataset,
    labels: &'a LabelSet,
    data_digest: String,
    cache: PathBuf,
    counters: StageCounters,
    kmax: usize,
    /// GNN distributions on (dev, test), by GNN digest.
    gnn_probs: HashMap<String, (Probs, Probs)>,
}

impl Runner<'_> {
    fn cached<T>(&mut self, name: &str, load: impl Fn(&Path) -> Result<T>, make: impl FnOnce(&mut Self) -> Result<T>, save: impl Fn(&T, &Path) -> Result<()>) -> Result<T> {
        let path = self.cache.join(name);
        if path.exists() {
            match load(&path) {
                Ok(v) => {
                    self.counters.cache_hits += 1;
                    log::debug!("cache hit {name}");
                    return Ok(v);
                }
                Err(e) => log::warn!("ignoring unreadable cache entry {name}: {e}"),
            }
        }
        let v = make(self)?;
        save(&v, &path)?;
        Ok(v)
    }

    fn encoder_config(&self, seed: u64) -> EncoderConfig {
        EncoderConfig { seed, ..self.plan.encoder.clone() }
    }

    fn seed_state(&mut self, seed: u64) -> Result<SeedState> {
        let cfg = self.encoder_config(seed);
        let key = digest_of(&["encoder", &format!("{cfg:?}"), &self.data_digest]);
        let trained = self.cached(
            &format!("encoder-{key}.bin"),
            Encoder::load,
            |r| {
                r.counters.encoders_trained += 1;
                log::info!("training encoder, seed {seed}");
                Ok(train_vanilla(&r.split.train, Some(&r.split.dev), r.labels, &cfg)?.0)
            },
            |e, p| e.save(p),
        )?;
        let probs = |d: &Dataset| -> Result<Probs> {
            d.sentences
                .iter()
                .map(|s| {
                    let p = trained.vanilla_probs(&trained.encode_ids(&trained.token_ids(s))?)?;
                    Ok(p.data().chunks(trained.labels.len()).map(<[f64]>::to_vec).collect())
                })
                .collect()
        };
        let (vanilla_dev, vanilla_test) = (probs(&self.split.dev)?, probs(&self.split.test)?);
        Ok(SeedState {
            trained,
            vanilla_dev,
            vanilla_test,
            keys: HashMap::new(),
        })
    }

    fn key_space(&mut self, state: &mut SeedState, finetuned: bool) -> Result<()> {
        if state.keys.contains_key(&finetuned) {
            return Ok(());
        }
        let encoder = if finetuned {
            state.trained.clone()
        } else {
            Encoder::new(Vocab::build(&self.split.train), self.labels.clone(), state.trained.config.clone())?
        };
        let store = self.cached(
            &format!("datastore-{}.gsld", encoder.digest_hex()),
            Datastore::load,
            |r| {
                r.counters.datastores_built += 1;
                Datastore::build(&encoder, &r.split.train)
            },
            |s, p| s.save(p),
        )?;
        let dev = retrieve(&encoder, &store, &self.split.dev, self.kmax, false)?;
        let test = retrieve(&encoder, &store, &self.split.test, self.kmax, false)?;
        state.keys.insert(finetuned, KeySpace { encoder, store, dev, test });
        Ok(())
    }

    fn gnn_config(&self, cell: &Cell) -> GnnConfig {
        GnnConfig {
            k: cell.k,
            seed: cell.seed,
            ..self.plan.gnn.clone()
        }
    }

    fn window(cell: &Cell) -> WindowConfig {
        WindowConfig {
            c: cell.radius,
            include_labels: cell.include_labels,
        }
    }

    fn cell_digest(&self, cell: &Cell) -> String {
        let enc = self.encoder_config(cell.seed);
        let mut parts = vec![
            format!("setup={}", cell.setup),
            format!("seed={}", cell.seed),
            format!("encoder={enc:?}"),
            format!("data={}", self.data_digest),
        ];
        if cell.setup.retrieves() {
            parts.push(format!("k={} finetuned_keys={}", cell.k, cell.finetuned_keys));
        }
        if cell.setup.uses_gnn() {
            parts.push(format!("gnn={:?} window={:?}", self.gnn_config(cell), Self::window(cell)));
        }
        if cell.setup.interpolates() {
            parts.push(format!("lambdas={:?} temperatures={:?}", self.plan.lambdas, self.plan.temperatures));
        }
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        digest_of(&refs)
    }

    fn gnn_distributions(&mut self, state: &SeedState, cell: &Cell) -> Result<(Probs, Probs)> {
        let ks = &state.keys[&cell.finetuned_keys];
        let cfg = self.gnn_config(cell);
        let window = Self::window(cell);
        let key = digest_of(&["gnn", &format!("{cfg:?}"), &format!("{window:?}"), &ks.encoder.digest_hex(), &self.data_digest]);
        if let Some(p) = self.gnn_probs.get(&key) {
            return Ok(p.clone());
        }
        let model = self.cached(
            &format!("gnn-{key}.bin"),
            GnnParameters::load,
            |r| {
                r.counters.gnns_trained += 1;
                log::info!("training GNN, seed {} k {} radius {} labels {}", cell.seed, cell.k, cell.radius, cell.include_labels);
                Ok(train_gnn(&ks.encoder, &ks.store, &r.split.train, window, &cfg)?.0)
            },
            |m, p| m.save(p),
        )?;
        model.check_encoder(&ks.encoder)?;
        let run = |ret: &Retrieved| -> Result<Probs> {
            let ret = ret.truncated(cell.k);
            ret.reps
                .iter()
                .zip(&ret.neighbors)
                .map(|(reps, nbs)| {
                    let p = gnn_predict(&model, &ks.store, reps, nbs, window)?;
                    Ok(p.data().chunks(model.label_count).map(<[f64]>::to_vec).collect())
                })
                .collect()
        };
        let probs = (run(&ks.dev)?, run(&ks.test)?);
        self.gnn_probs.insert(key, probs.clone());
        Ok(probs)
    }

    fn run_cell(&mut self, state: &mut SeedState, cell: &Cell) -> Result<(Metrics, Option<(f64, f64)>)> {
        let (dev_base, test_base) = match cell.setup {
            Setup::Vanilla => (state.vanilla_dev.clone(), state.vanilla_test.clone()),
            Setup::VanillaKnn => {
                self.key_space(state, cell.finetuned_keys)?;
                (state.vanilla_dev.clone(), state.vanilla_test.clone())
            }
            Setup::VanillaGnn | Setup::VanillaGnnKnn => {
                self.key_space(state, cell.finetuned_keys)?;
                self.gnn_distributions(state, cell)?
            }
        };
        let mut tuned = None;
        let (dev, test) = (&self.split.dev, &self.split.test);
        let pred = if cell.setup.interpolates() {
            let ks = &state.keys[&cell.finetuned_keys];
            let mix = |base: &Probs, ret: &Retrieved, lambda: f64, t: f64| -> Result<Vec<Vec<u32>>> {
                base.iter()
                    .zip(&ret.neighbors)
                    .map(|(ps, nbs)| {
                        ps.iter()
                            .zip(nbs)
                            .map(|(p, nb)| {
                                let pk = knn_distribution(&ks.store, &nb[..nb.len().min(cell.k)], t)?;
                                Ok(argmax(&interpolate(p, &pk, lambda)?) as u32)
                            })
                            .collect()
                    })
                    .collect()
            };
            let mut best: Option<(f64, f64, f64)> = None;
            for &lambda in &self.plan.lambdas {
                for &t in &self.plan.temperatures {
                    let f = evaluate(&mix(&dev_base, &ks.dev, lambda, t)?, dev, self.labels, None)?.f1;
                    if best.map_or(true, |b| f > b.0) {
                        best = Some((f, lambda, t));
                    }
                }
            }
            let (_, lambda, t) = best.expect("grids are nonempty");
            tuned = Some((lambda, t));
            mix(&test_base, &ks.test, lambda, t)?
        } else {
            test_base.iter().map(|s| s.iter().map(|p| argmax(p) as u32).collect()).collect()
        };
        let r = evaluate(&pred, test, self.labels, Some(&self.split.train))?;
        let metrics = Metrics {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            long_tail_f1: r.long_tail_f1().unwrap_or(0.0),
            token_accuracy: r.token_accuracy,
        };
        Ok((metrics, tuned))
    }
}

/// Runs every cell of `plan`, writing the table and summary into
/// `plan.output_dir`. A failing cell is recorded in its row; the rest continue.
pub fn run_plan(plan: &ExperimentPlan, split: &SplitDataset, labels: &LabelSet) -> Result<PlanOutcome> {
    plan.validate()?;
    let cache = plan.output_dir.join("cache");
    std::fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
    let cells = plan.cells();
    let kmax = cells.iter().filter(|c| c.setup.retrieves()).map(|c| c.k).max().unwrap_or(1);
    let mut runner = Runner {
        plan,
        split,
        labels,
        data_digest: hex(&split_digest(split, labels)),
        cache,
        counters: StageCounters::default(),
        kmax,
        gnn_probs: HashMap::new(),
    };
    let mut rows = Vec::with_capacity(cells.len());
    let mut states: HashMap<u64, std::result::Result<SeedState, String>> = HashMap::new();
    for cell in &cells {
        if !states.contains_key(&cell.seed) {
            let s = runner.seed_state(cell.seed).map_err(|e| e.to_string());
            states.insert(cell.seed, s);
        }
        let outcome = match states.get_mut(&cell.seed).expect("inserted above") {
            Ok(state) => runner.run_cell(state, cell).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        let retrieves = cell.setup.retrieves();
        let graph = cell.setup.uses_gnn();
        let mut row = Row {
            seed: cell.seed,
            setup: cell.setup,
            arm: cell.arm,
            k: retrieves.then_some(cell.k),
            radius: graph.then_some(cell.radius),
            include_labels: graph.then_some(cell.include_labels),
            finetuned_keys: cell.finetuned_keys,
            lambda: None,
            temperature: None,
            digest: runner.cell_digest(cell),
            metrics: None,
            error: None,
            note: (!cell.finetuned_keys).then(|| "keys from an untrained encoder; an analogue of non-fine-tuned retrieval".to_string()),
        };
        match outcome {
            Ok((m, tuned)) => {
                log::info!("{} seed {} {}: f1 {:.2} long-tail {:.2}", cell.setup, cell.seed, cell.arm.name(), m.f1, m.long_tail_f1);
                row.metrics = Some(m);
                row.lambda = tuned.map(|t| t.0);
                row.temperature = tuned.map(|t| t.1);
            }
            Err(e) => {
                log::error!("{} seed {} {} failed: {e}", cell.setup, cell.seed, cell.arm.name());
                row.error = Some(e);
            }
        }
        rows.push(row);
    }

    let best_k = best_k_rows(plan, &rows);
    let digests: Vec<&str> = rows.iter().map(|r| r.digest.as_str()).collect();
    let plan_digest = digest_of(&digests)[..16].to_string();
    let table = ResultTable { plan_digest, rows, best_k };
    let json_path = plan.output_dir.join(format!("results-{}.json", table.plan_digest));
    let summary_path = plan.output_dir.join(format!("summary-{}.txt", table.plan_digest));
    write_atomic(&json_path, table.to_json().as_bytes())?;
    write_atomic(&summary_path, table.to_summary().as_bytes())?;
    Ok(PlanOutcome {
        table,
        counters: runner.counters,
        json_path,
        summary_path,
    })
}

fn best_k_rows(plan: &ExperimentPlan, rows: &[Row]) -> Vec<BestK> {
    if plan.k_sweep.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for &seed in &plan.seeds {
        for &setup in plan.setups.iter().filter(|s| s.retrieves()) {
            let sweep: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.seed == seed && r.setup == setup && matches!(r.arm, Arm::Base | Arm::K))
                .filter_map(|r| Some((r.k?, r.metrics.as_ref()?.f1)))
                .collect();
            let best = sweep.iter().copied().fold(None, |b: Option<(usize, f64)>, (k, f)| match b {
                Some((bk, bf)) if bf > f || (bf == f && bk < k) => Some((bk, bf)),
                _ => Some((k, f)),
            });
            if let Some((k, f1)) = best {
                let f1_at_k1 = sweep.iter().find(|p| p.0 == 1).map(|p| p.1);
                out.push(BestK { seed, setup, k, f1, f1_at_k1 });
            }
        }
    }
    out
}
