//! Shared domain vocabulary: samples, labels, similarity, embeddings, hash
//! codes, and dataset splits.
//!
//! All types here are immutable after construction and safe to share across
//! threads.

use std::collections::BTreeSet;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Code lengths used by the benchmark protocol.
pub const PROTOCOL_CODE_LENGTHS: [usize; 4] = [16, 32, 48, 64];

/// Largest code length accepted by the library.
pub const MAX_CODE_LENGTH: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("label set must be non-empty")]
    EmptyLabelSet,
    #[error("pixel tensor has non-finite value at {0:?}")]
    NonFinitePixel((usize, usize, usize)),
    #[error("pixel tensor must have channels, height, width >= 1, got {0}x{1}x{2}")]
    DegenerateShape(usize, usize, usize),
    #[error("bit vector entry {index} is {value}, expected -1 or +1")]
    InvalidBit { index: usize, value: f64 },
    #[error("code length {0} outside supported range 1..={MAX_CODE_LENGTH}")]
    BadCodeLength(usize),
    #[error("embedding entry {index} is non-finite")]
    NonFiniteEmbedding { index: usize },
}

/// Set of non-negative class ids attached to a sample.
///
/// Singleton for single-label datasets, possibly multi-element for
/// multi-label datasets. Always non-empty for admitted samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet(BTreeSet<u32>);

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = u32>) -> Result<Self, TypeError> {
        let set: BTreeSet<u32> = labels.into_iter().collect();
        if set.is_empty() {
            return Err(TypeError::EmptyLabelSet);
        }
        Ok(LabelSet(set))
    }

    pub fn single(label: u32) -> Self {
        LabelSet(BTreeSet::from([label]))
    }

    pub fn contains(&self, label: u32) -> bool {
        self.0.contains(&label)
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intersects(&self, other: &LabelSet) -> bool {
        // iterate the smaller set
        let (small, big) = if self.0.len() <= other.0.len() {
            (&self.0, &other.0)
        } else {
            (&other.0, &self.0)
        };
        small.iter().any(|l| big.contains(l))
    }
}

/// Pairwise similarity: 1 iff the label sets share at least one class.
pub fn similarity(a: &LabelSet, b: &LabelSet) -> Result<u8, TypeError> {
    if a.is_empty() || b.is_empty() {
        return Err(TypeError::EmptyLabelSet);
    }
    Ok(u8::from(a.intersects(b)))
}

/// An image tensor plus a label set; the unit of ingestion.
///
/// Pixels are `(channels, height, width)` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub pixels: Array3<f64>,
    pub labels: LabelSet,
}

impl Sample {
    pub fn new(id: u64, pixels: Array3<f64>, labels: LabelSet) -> Result<Self, TypeError> {
        let (c, h, w) = pixels.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(TypeError::DegenerateShape(c, h, w));
        }
        for ((ci, hi, wi), &v) in pixels.indexed_iter() {
            if !v.is_finite() {
                return Err(TypeError::NonFinitePixel((ci, hi, wi)));
            }
        }
        Ok(Sample { id, pixels, labels })
    }
}

/// Pairwise relation s_ij in {0,1} materialized for a batch, symmetric with
/// unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<u8>,
}

impl SimilarityMatrix {
    /// Builds the full matrix from per-sample label sets.
    pub fn from_labels(labels: &[LabelSet]) -> Result<Self, TypeError> {
        let n = labels.len();
        let mut entries = vec![0u8; n * n];
        for i in 0..n {
            entries[i * n + i] = 1;
            for j in (i + 1)..n {
                let s = similarity(&labels[i], &labels[j])?;
                entries[i * n + j] = s;
                entries[j * n + i] = s;
            }
        }
        Ok(SimilarityMatrix { n, entries })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.n + j]
    }
}

/// A k-bit code over {-1,+1} stored bit-packed: ceil(k/64) little-endian
/// words, bit index = code index, bit set encodes +1, unused high bits zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    k: usize,
    words: Vec<u64>,
}

impl HashCode {
    /// Packs a +/-1 vector. Entries must be exactly -1.0 or +1.0.
    pub fn pack(bits: &[f64]) -> Result<Self, TypeError> {
        let k = bits.len();
        if k == 0 || k > MAX_CODE_LENGTH {
            return Err(TypeError::BadCodeLength(k));
        }
        let mut words = vec![0u64; k.div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            if b == 1.0 {
                words[i / 64] |= 1u64 << (i % 64);
            } else if b != -1.0 {
                return Err(TypeError::InvalidBit { index: i, value: b });
            }
        }
        Ok(HashCode { k, words })
    }

    /// Reconstitutes a code from its packed words; unused high bits must be zero.
    pub fn from_words(k: usize, words: Vec<u64>) -> Result<Self, TypeError> {
        if k == 0 || k > MAX_CODE_LENGTH || words.len() != k.div_ceil(64) {
            return Err(TypeError::BadCodeLength(k));
        }
        if k % 64 != 0 {
            let mask = !0u64 << (k % 64);
            if words[k / 64] & mask != 0 {
                return Err(TypeError::InvalidBit {
                    index: k,
                    value: 0.0,
                });
            }
        }
        Ok(HashCode { k, words })
    }

    /// Unpacks to a +/-1 vector of length k.
    pub fn unpack(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| {
                if self.words[i / 64] >> (i % 64) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> i8 {
        debug_assert!(i < self.k);
        if self.words[i / 64] >> (i % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }
}

/// Disjoint id pools: train feeds optimization, test/val are query pools,
/// database is the corpus searched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
    pub database_ids: Vec<u64>,
}

impl SplitSpec {
    /// Checks pairwise disjointness of the four pools.
    pub fn is_disjoint(&self) -> bool {
        let pools = [
            &self.train_ids,
            &self.test_ids,
            &self.val_ids,
            &self.database_ids,
        ];
        let mut seen = std::collections::HashSet::new();
        for pool in pools {
            for &id in pool.iter() {
                if !seen.insert(id) {
                    return false;
                }
            }
        }
        true
    }

    pub fn total(&self) -> usize {
        self.train_ids.len() + self.test_ids.len() + self.val_ids.len() + self.database_ids.len()
    }
}
