//! Exact L2 nearest-neighbor store over training-token representations.
//!
//! Keys are kept at 32-bit precision; distances are accumulated in 64-bit.
//! Ordering is total: squared distance, then sentence id, then token index.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::checkpoint::{hex, write_atomic};
use crate::corpus::Dataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GSLD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Entry {
    pub sentence_id: u32,
    pub token_index: u32,
    pub label_id: u32,
}

/// A retrieved record: its position in the store and squared L2 distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub record: usize,
    pub dist2: f64,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        self.dist2.sqrt()
    }
}

pub type NeighborSet = Vec<Neighbor>;

#[derive(Debug, Clone)]
pub struct Datastore {
    d: usize,
    labels: Vec<String>,
    digest: [u8; 32],
    entries: Vec<Entry>,
    keys: Vec<f32>,
    /// sentence id → (first record, token count)
    sentences: HashMap<u32, (usize, usize)>,
}

impl PartialEq for Datastore {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.labels == other.labels
            && self.digest == other.digest
            && self.entries == other.entries
            && self.keys.len() == other.keys.len()
            && self.keys.iter().zip(&other.keys).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    sentence_id: u32,
    token_index: u32,
    record: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.sentence_id.cmp(&other.sentence_id))
            .then(self.token_index.cmp(&other.token_index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Datastore {
    /// Assembles a store from parts, validating key width and provenance uniqueness.
    pub fn from_parts(d: usize, labels: Vec<String>, digest: [u8; 32], entries: Vec<Entry>, keys: Vec<f32>) -> Result<Self> {
        if keys.len() != entries.len() * d {
            return Err(Error::Dimension(format!("{} key values for {} records of width {d}", keys.len(), entries.len())));
        }
        if let Some(e) = entries.iter().find(|e| e.label_id as usize >= labels.len()) {
            return Err(Error::Label(format!("record label id {} outside {} labels", e.label_id, labels.len())));
        }
        if keys.iter().any(|k| !k.is_finite()) {
            return Err(Error::Argument("datastore keys must be finite".into()));
        }
        let mut sentences: HashMap<u32, (usize, usize)> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            let slot = sentences.entry(e.sentence_id).or_insert((i, 0));
            if slot.0 + slot.1 != i || e.token_index as usize != slot.1 {
                return Err(Error::Consistency(format!(
                    "record {i} (sentence {}, token {}) breaks contiguous corpus order",
                    e.sentence_id, e.token_index
                )));
            }
            slot.1 += 1;
        }
        Ok(Self {
            d,
            labels,
            digest,
            entries,
            keys,
            sentences,
        })
    }

    /// One record per token of `dataset`, in corpus order, keyed by the
    /// encoder's representations.
    pub fn build(encoder: &Encoder, dataset: &Dataset) -> Result<Self> {
        dataset.check_labels(&encoder.labels)?;
        let mut entries = Vec::with_capacity(dataset.num_tokens());
        let mut keys = Vec::with_capacity(dataset.num_tokens() * encoder.d());
        for s in &dataset.sentences {
            let h = encoder.encode_ids(&encoder.token_ids(s))?;
            keys.extend(h.data().iter().map(|&v| v as f32));
            for (t, &label_id) in s.labels.iter().enumerate() {
                entries.push(Entry {
                    sentence_id: s.id as u32,
                    token_index: t as u32,
                    label_id,
                });
            }
        }
        Self::from_parts(encoder.d(), encoder.labels.names().to_vec(), encoder.digest(), entries, keys)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn entry(&self, record: usize) -> Entry {
        self.entries[record]
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn key(&self, record: usize) -> &[f32] {
        &self.keys[record * self.d..(record + 1) * self.d]
    }

    /// Record index of `(sentence_id, token_index)`, if stored.
    pub fn find(&self, sentence_id: u32, token_index: u32) -> Option<usize> {
        let &(start, len) = self.sentences.get(&sentence_id)?;
        ((token_index as usize) < len).then_some(start + token_index as usize)
    }

    pub fn sentence_len(&self, sentence_id: u32) -> Option<usize> {
        self.sentences.get(&sentence_id).map(|s| s.1)
    }

    /// Fails unless `encoder` produced this store.
    pub fn check_compatible(&self, encoder: &Encoder) -> Result<()> {
        if encoder.d() != self.d {
            return Err(Error::Format {
                offset: 8,
                message: format!("datastore key width {} does not match encoder width {}", self.d, encoder.d()),
            });
        }
        let digest = encoder.digest();
        if digest != self.digest {
            return Err(Error::Consistency(format!(
                "datastore was built from checkpoint {} but the model is {}",
                hex(&self.digest),
                hex(&digest)
            )));
        }
        Ok(())
    }

    pub fn dist2(&self, h: &[f64], record: usize) -> f64 {
        self.key(record)
            .iter()
            .zip(h)
            .map(|(&k, &x)| {
                let diff = x - k as f64;
                diff * diff
            })
            .sum()
    }

    /// The `k` closest records to `h`, ascending, skipping `exclude`.
    pub fn knn_query(&self, h: &[f64], k: usize, exclude: Option<(u32, u32)>) -> Result<NeighborSet> {
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        if h.len() != self.d {
            return Err(Error::Dimension(format!("query width {} does not match store width {}", h.len(), self.d)));
        }
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for (i, e) in self.entries.iter().enumerate() {
            if exclude == Some((e.sentence_id, e.token_index)) {
                continue;
            }
            let c = Candidate {
                dist2: self.dist2(h, i),
                sentence_id: e.sentence_id,
                token_index: e.token_index,
                record: i,
            };
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(c);
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                record: c.record,
                dist2: c.dist2,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u32(self.d as u32);
        w.u64(self.entries.len() as u64);
        w.u32(self.labels.len() as u32);
        for l in &self.labels {
            w.u16(l.len() as u16);
            w.bytes(l.as_bytes());
        }
        w.bytes(&self.digest);
        for (i, e) in self.entries.iter().enumerate() {
            w.u32(e.sentence_id);
            w.u32(e.token_index);
            w.u32(e.label_id);
            for &v in self.key(i) {
                w.f32(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected GSLD".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let d = r.u32("key width")? as usize;
        let count = r.u64("record count")?;
        let n_labels = r.u32("label count")?;
        let mut labels = Vec::new();
        for _ in 0..n_labels {
            let len = r.u16("label length")? as usize;
            labels.push(r.utf8(len, "label")?);
        }
        let digest: [u8; 32] = r.take(32, "checkpoint digest")?.try_into().expect("32 bytes");
        let record_size = 12 + 4 * d as u64;
        let remaining = (bytes.len() as u64).saturating_sub(r.offset());
        if count.checked_mul(record_size).is_none_or(|need| need > remaining) {
            return Err(r.error(format!("truncated: {count} records of {record_size} bytes need more than {remaining} remaining")));
        }
        let count = count as usize;
        let mut entries = Vec::with_capacity(count);
        let mut keys = Vec::with_capacity(count * d);
        for _ in 0..count {
            entries.push(Entry {
                sentence_id: r.u32("sentence id")?,
                token_index: r.u32("token index")?,
                label_id: r.u32("label id")?,
            });
            for _ in 0..d {
                keys.push(r.f32("key")?);
            }
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes after last record"));
        }
        Self::from_parts(d, labels, digest, entries, keys)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
