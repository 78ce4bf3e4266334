//! Learned binary codes for image retrieval.
//!
//! The crate is organized around a deep-hashing pipeline:
//!
//! - [`types`]: samples, label sets, similarity, embeddings, bit-packed hash codes
//! - [`backbone`]: multi-resolution convolutional feature extractor with an
//!   augmented multi-scale head
//! - [`head`]: the hash layer mapping pooled features to k-dim embeddings and
//!   binarizing them
//! - [`loss`]: pairwise hashing losses (CEL, DHN, DPSH, DCH, HashNet) with a
//!   quantization penalty
//! - [`trainer`]: seeded mini-batch training loop (Adam) and dataset encoding
//! - [`retrieval`]: bit-packed Hamming database with exact top-k search and a
//!   binary file format
//! - [`eval`]: AP@k / mAP@k and benchmark report rendering
//! - [`data`]: dataset ingestion, benchmark split protocols, synthetic data
//! - [`checkpoint`]: named-tensor model checkpoint container

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod head;
pub mod loss;
pub mod nn;
pub mod retrieval;
pub mod trainer;
pub mod types;

pub use types::{HashCode, LabelSet, Sample, SplitSpec};
