//! Retrieval-interpolated tagging: a temperature RBF distribution over the
//! labels of retrieved neighbors, mixed linearly with a model distribution.

use crate::datastore::{Datastore, Neighbor};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::prob::argmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpConfig {
    pub k: usize,
    pub temperature: f64,
    /// Weight of the model distribution; `1 - lambda` goes to retrieval.
    pub lambda: f64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            k: 32,
            temperature: 1.0,
            lambda: 0.5,
        }
    }
}

impl InterpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Argument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Label distribution from `(label, distance)` pairs, with unsquared
/// distances. Mass for label `y` is `Σ exp(-d / T)` over pairs labelled `y`,
/// normalised over `label_count` labels.
pub fn label_distribution(pairs: &[(u32, f64)], temperature: f64, label_count: usize) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Argument("no neighbors to form a distribution".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("temperature {temperature} must be positive")));
    }
    let dmin = pairs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut p = vec![0.0; label_count];
    for &(label, d) in pairs {
        let slot = p
            .get_mut(label as usize)
            .ok_or_else(|| Error::Label(format!("neighbor label {label} outside {label_count} labels")))?;
        *slot += (-(d - dmin) / temperature).exp();
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

/// [`label_distribution`] over retrieved store records.
pub fn knn_distribution(store: &Datastore, neighbors: &[Neighbor], temperature: f64) -> Result<Vec<f64>> {
    let pairs: Vec<(u32, f64)> = neighbors
        .iter()
        .map(|n| (store.entry(n.record).label_id, n.distance()))
        .collect();
    label_distribution(&pairs, temperature, store.labels().len())
}

/// `lambda * p_model + (1 - lambda) * p_knn`.
pub fn interpolate(p_model: &[f64], p_knn: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if p_model.len() != p_knn.len() {
        return Err(Error::Dimension(format!(
            "cannot interpolate distributions of length {} and {}",
            p_model.len(),
            p_knn.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(p_model
        .iter()
        .zip(p_knn)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect())
}

/// Encoder plus store, checked once for compatibility.
pub struct KnnTagger<'a> {
    encoder: &'a Encoder,
    store: &'a Datastore,
    config: InterpConfig,
}

impl<'a> KnnTagger<'a> {
    pub fn new(encoder: &'a Encoder, store: &'a Datastore, config: InterpConfig) -> Result<Self> {
        config.validate()?;
        store.check_compatible(encoder)?;
        Ok(Self { encoder, store, config })
    }

    /// Per token: the predicted label and the interpolated distribution.
    pub fn tag(&self, tokens: &[String]) -> Result<Vec<(u32, Vec<f64>)>> {
        let h = self.encoder.encode_ids(&self.encoder.vocab.encode(tokens))?;
        let pv = self.encoder.vanilla_probs(&h)?;
        let (d, c) = (self.encoder.d(), self.encoder.labels.len());
        h.data()
            .chunks(d)
            .zip(pv.data().chunks(c))
            .map(|(hi, pvi)| {
                let nb = self.store.knn_query(hi, self.config.k, None)?;
                let pk = knn_distribution(self.store, &nb, self.config.temperature)?;
                let p = interpolate(pvi, &pk, self.config.lambda)?;
                Ok((argmax(&p) as u32, p))
            })
            .collect()
    }
}

pub fn tag_knn(encoder: &Encoder, store: &Datastore, tokens: &[String], config: InterpConfig) -> Result<Vec<(u32, Vec<f64>)>> {
    KnnTagger::new(encoder, store, config)?.tag(tokens)
}
