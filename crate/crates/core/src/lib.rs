//! Text-driven image transformation by embedding arithmetic.
//!
//! A transformation query `w1 -> w2` is turned into a delta vector in a shared
//! image/text embedding space, added to the embedding of a source image, and
//! the nearest image (by cosine similarity) is retrieved from the benchmark
//! database. The crate also covers the surrounding machinery:
//!
//! - [`store`]: the SMAT embedding container and the TSV bundle layout
//! - [`geometry`]: normalization, cosine similarity, exact top-k search
//! - [`transform`]: delta vectors and the three retrieval strategies
//! - [`dataset`]: benchmark construction from scene-graph triplets
//! - [`oracle`]: image/caption match probabilities (table, mock, remote)
//! - [`eval`]: weighted accuracy, recall@k, sweeps and per-target breakdowns
//! - [`train`]: adaptation heads trained with a symmetric InfoNCE objective
//! - [`synth`]: compositional synthetic worlds with exact ground truth

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod oracle;
pub mod store;
pub mod synth;
pub mod train;
pub mod transform;

mod io;

pub use error::{Error, Result};
pub use io::{atomic_write, read_tsv};
pub use geometry::{CosineIndex, RankedHit};
pub use store::{
    CaptionRecord, Dataset, EmbeddingMatrix, Field, ImageRecord, Split, TransformationQuery,
    Triplet, WordTable,
};
pub use transform::{DeltaMethod, DeltaVector, Strategy, TransformConfig};
