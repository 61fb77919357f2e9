//! Flat `key=value` configuration: defaults, then a file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gnnsl::corpus::LabelScheme;
use gnnsl::encoder::EncoderConfig;
use gnnsl::gnn::GnnConfig;
use gnnsl::graph::WindowConfig;
use gnnsl::harness::{ExperimentPlan, Setup};
use gnnsl::knnsl::InterpConfig;

use crate::CliError;

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Every recognized key with its default value.
pub fn defaults() -> BTreeMap<String, String> {
    let e = EncoderConfig::default();
    let g = GnnConfig::default();
    let w = WindowConfig::default();
    let i = InterpConfig::default();
    let p = ExperimentPlan::new(".");
    let pairs: Vec<(&str, String)> = vec![
        ("data.scheme", "bio".into()),
        ("synthetic.seed", "1".into()),
        ("synthetic.n", "2000".into()),
        ("synthetic.long_tail_fraction", "0.2".into()),
        ("encoder.d", e.d.to_string()),
        ("encoder.d_emb", e.d_emb.to_string()),
        ("encoder.lr", e.lr.to_string()),
        ("encoder.epochs", e.epochs.to_string()),
        ("encoder.seed", e.seed.to_string()),
        ("encoder.dropout", e.dropout.to_string()),
        ("gnn.layers", g.layers.to_string()),
        ("gnn.heads", g.heads.to_string()),
        ("gnn.d", g.d.to_string()),
        ("gnn.k", g.k.to_string()),
        ("gnn.seed", g.seed.to_string()),
        ("gnn.lr", g.lr.to_string()),
        ("gnn.epochs", g.epochs.to_string()),
        ("gnn.input_dropout", g.input_dropout.to_string()),
        ("window.c", w.c.to_string()),
        ("window.include_labels", w.include_labels.to_string()),
        ("knn.k", i.k.to_string()),
        ("knn.temperature", i.temperature.to_string()),
        ("knn.lambda", i.lambda.to_string()),
        ("plan.setups", list(&p.setups)),
        ("plan.seeds", list(&p.seeds)),
        ("plan.k_sweep", list(&p.k_sweep)),
        ("plan.radius_sweep", list(&p.radius_sweep)),
        ("plan.ablate_labels", p.ablate_labels.to_string()),
        ("plan.ablate_finetuned_keys", p.ablate_finetuned_keys.to_string()),
        ("plan.lambdas", list(&p.lambdas)),
        ("plan.temperatures", list(&p.temperatures)),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Defaults, overlaid by `file` (if any), overlaid by `flags`.
    pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<Self, CliError> {
        let mut values = defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
                set(&mut values, k.trim(), v.trim(), &format!("{}:{}", path.display(), n + 1))?;
            }
        }
        for (k, v) in flags {
            set(&mut values, k, v, "command line")?;
        }
        Ok(Self { values })
    }

    /// One `key=value` line per key, sorted.
    pub fn dump(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::Usage(format!("invalid value {raw:?} for {key}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Usage(format!("invalid list item {s:?} for {key}"))))
            .collect()
    }

    pub fn scheme(&self) -> Result<LabelScheme, CliError> {
        self.raw("data.scheme").parse().map_err(|e: gnnsl::Error| CliError::Usage(e.to_string()))
    }

    pub fn encoder(&self) -> Result<EncoderConfig, CliError> {
        let c = EncoderConfig {
            d: self.get("encoder.d")?,
            d_emb: self.get("encoder.d_emb")?,
            lr: self.get("encoder.lr")?,
            epochs: self.get("encoder.epochs")?,
            seed: self.get("encoder.seed")?,
            dropout: self.get("encoder.dropout")?,
        };
        c.validate().map_err(usage)?;
        Ok(c)
    }

    pub fn gnn(&self) -> Result<GnnConfig, CliError> {
        let c = GnnConfig {
            layers: self.get("gnn.layers")?,
            heads: self.get("gnn.heads")?,
            d: self.get("gnn.d")?,
            k: self.get("gnn.k")?,
            seed: self.get("gnn.seed")?,
            lr: self.get("gnn.lr")?,
            epochs: self.get("gnn.epochs")?,
            input_dropout: self.get("gnn.input_dropout")?,
        };
        c.validate().map_err(usage)?;
        Ok(c)
    }

    pub fn window(&self) -> Result<WindowConfig, CliError> {
        Ok(WindowConfig {
            c: self.get("window.c")?,
            include_labels: self.get("window.include_labels")?,
        })
    }

    pub fn interp(&self) -> Result<InterpConfig, CliError> {
        let c = InterpConfig {
            k: self.get("knn.k")?,
            temperature: self.get("knn.temperature")?,
            lambda: self.get("knn.lambda")?,
        };
        c.validate().map_err(usage)?;
        Ok(c)
    }

    pub fn plan(&self, output_dir: PathBuf) -> Result<ExperimentPlan, CliError> {
        let p = ExperimentPlan {
            setups: self.list::<Setup>("plan.setups")?,
            k_sweep: self.list("plan.k_sweep")?,
            radius_sweep: self.list("plan.radius_sweep")?,
            ablate_labels: self.get("plan.ablate_labels")?,
            ablate_finetuned_keys: self.get("plan.ablate_finetuned_keys")?,
            seeds: self.list("plan.seeds")?,
            output_dir,
            encoder: self.encoder()?,
            gnn: self.gnn()?,
            window: self.window()?,
            lambdas: self.list("plan.lambdas")?,
            temperatures: self.list("plan.temperatures")?,
        };
        p.validate().map_err(usage)?;
        Ok(p)
    }
}

fn usage(e: gnnsl::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn set(values: &mut BTreeMap<String, String>, key: &str, value: &str, origin: &str) -> Result<(), CliError> {
    match values.get_mut(key) {
        Some(slot) => {
            *slot = value.to_string();
            Ok(())
        }
        None => Err(CliError::Usage(format!("{origin}: unknown config key {key:?}"))),
    }
}
