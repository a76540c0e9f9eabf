//! Delta vectors and retrieval strategies.
//!
//! A transformation `w1 -> w2` becomes the vector `E(w2) - E(w1)`; it is
//! scaled by `lambda` and added to the source image embedding, and the result
//! is used as a cosine query over the image database.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm, CosineIndex, RankedHit};
use crate::store::{CaptionRecord, Dataset, EmbeddingMatrix, Field, TransformationQuery, WordTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMethod {
    /// `E(w2) - E(w1)` from the word table.
    SingleWord,
    /// Mean of `E(s2) - E(s1)` over caption pairs differing only in the
    /// transformed slot. Uses the benchmark's own captions, so results built
    /// on it leak evaluation captions into the method.
    SentenceAverage,
}

impl DeltaMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DeltaMethod::SingleWord => "single_word",
            DeltaMethod::SentenceAverage => "sentence_average",
        }
    }
}

impl fmt::Display for DeltaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeltaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_word" | "word" => Ok(DeltaMethod::SingleWord),
            "sentence_average" | "sentence" => Ok(DeltaMethod::SentenceAverage),
            other => Err(Error::Argument(format!("unknown delta method {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector {
    pub vector: Vec<f64>,
    pub method: DeltaMethod,
    pub source: String,
    pub target: String,
    /// Number of differences averaged (always 1 for single-word deltas).
    pub support_count: usize,
}

impl DeltaVector {
    /// Same direction, unit length. A zero delta stays zero.
    pub fn unit(&self) -> DeltaVector {
        let n = norm(&self.vector);
        let mut out = self.clone();
        if n > 0.0 {
            out.vector.iter_mut().for_each(|v| *v /= n);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Image embedding plus scaled delta vector.
    #[serde(rename = "delta")]
    Delta,
    /// Nearest caption to the image, plus scaled delta vector.
    #[serde(rename = "i2t2i")]
    ImageToTextToImage,
    /// Target caption embedding used directly as the query.
    #[serde(rename = "t2i")]
    TextToImage,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Delta => "delta",
            Strategy::ImageToTextToImage => "i2t2i",
            Strategy::TextToImage => "t2i",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(Strategy::Delta),
            "i2t2i" | "image_to_text_to_image" => Ok(Strategy::ImageToTextToImage),
            "t2i" | "text_to_image" => Ok(Strategy::TextToImage),
            other => Err(Error::Argument(format!("unknown strategy {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub lambda: f64,
    pub strategy: Strategy,
    pub top_n: usize,
    pub exclude_self: bool,
    pub delta_method: DeltaMethod,
    /// Rescale every delta to unit norm before applying `lambda`.
    pub unit_delta: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            lambda: 1.0,
            strategy: Strategy::Delta,
            top_n: 1,
            exclude_self: true,
            delta_method: DeltaMethod::SingleWord,
            unit_delta: false,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        Ok(())
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub fn word_delta(words: &WordTable, w1: &str, w2: &str) -> Result<DeltaVector> {
    let a = words.get(w1)?;
    let b = words.get(w2)?;
    Ok(DeltaVector {
        vector: a
            .iter()
            .zip(b)
            .map(|(&x, &y)| f64::from(y) - f64::from(x))
            .collect(),
        method: DeltaMethod::SingleWord,
        source: w1.to_string(),
        target: w2.to_string(),
        support_count: 1,
    })
}

/// Mean caption-embedding difference over all caption pairs `(s1, s2)` where
/// `s1` has `w1` in `field`, and `s2` is `s1` with `w2` in that slot.
pub fn sentence_average_delta(
    captions: &[CaptionRecord],
    embeddings: &EmbeddingMatrix,
    w1: &str,
    w2: &str,
    field: Field,
) -> Result<DeltaVector> {
    let by_triplet: std::collections::HashMap<_, _> =
        captions.iter().map(|c| (&c.triplet, c)).collect();
    let mut sum = vec![0.0f64; embeddings.dim()];
    let mut count = 0usize;
    // Caption order fixes the summation order.
    for s1 in captions.iter().filter(|c| c.triplet.get(field) == w1) {
        let target = s1.triplet.with(field, w2);
        if let Some(s2) = by_triplet.get(&target) {
            let (a, b) = (embeddings.row(s1.embedding_row), embeddings.row(s2.embedding_row));
            for ((acc, &x), &y) in sum.iter_mut().zip(a).zip(b) {
                *acc += f64::from(y) - f64::from(x);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Coverage {
            context: format!("no caption pair realizes {} {} -> {}", field, w1, w2),
            missing: Vec::new(),
        });
    }
    let scale = 1.0 / count as f64;
    Ok(DeltaVector {
        vector: sum.into_iter().map(|v| v * scale).collect(),
        method: DeltaMethod::SentenceAverage,
        source: w1.to_string(),
        target: w2.to_string(),
        support_count: count,
    })
}

/// `image + lambda * delta`, without normalization.
pub fn apply_transform(image: &[f64], delta: &DeltaVector, lambda: f64) -> Result<Vec<f64>> {
    if image.len() != delta.vector.len() {
        return Err(Error::Argument(format!(
            "image dim {} != delta dim {}",
            image.len(),
            delta.vector.len()
        )));
    }
    Ok(image
        .iter()
        .zip(&delta.vector)
        .map(|(x, d)| x + lambda * d)
        .collect())
}

/// Precomputed indices over one dataset; answers queries under any config.
#[derive(Debug, Clone)]
pub struct Retriever<'a> {
    dataset: &'a Dataset,
    images: CosineIndex<'a>,
    captions: CosineIndex<'a>,
}

impl<'a> Retriever<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        Ok(Retriever {
            dataset,
            images: CosineIndex::new(dataset.image_embeddings(), dataset.image_ids())?,
            captions: CosineIndex::new(dataset.caption_embeddings(), dataset.caption_ids())?,
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn delta(&self, query: &TransformationQuery, cfg: &TransformConfig) -> Result<DeltaVector> {
        let d = match cfg.delta_method {
            DeltaMethod::SingleWord => {
                word_delta(self.dataset.words(), &query.source_word, &query.target_word)?
            }
            DeltaMethod::SentenceAverage => sentence_average_delta(
                self.dataset.captions(),
                self.dataset.caption_embeddings(),
                &query.source_word,
                &query.target_word,
                query.field,
            )?,
        };
        Ok(if cfg.unit_delta { d.unit() } else { d })
    }

    /// The query vector the configured strategy searches with.
    pub fn query_vector(&self, query: &TransformationQuery, cfg: &TransformConfig) -> Result<Vec<f64>> {
        let ds = self.dataset;
        match cfg.strategy {
            Strategy::Delta => {
                let image = self.image_row(&query.image_id)?;
                apply_transform(&image, &self.delta(query, cfg)?, cfg.lambda)
            }
            Strategy::ImageToTextToImage => {
                let image = self.image_row(&query.image_id)?;
                let nearest = self.captions.nearest(&image)?;
                let caption = to_f64(ds.caption_embeddings().row(nearest));
                apply_transform(&caption, &self.delta(query, cfg)?, cfg.lambda)
            }
            Strategy::TextToImage => {
                let row = ds.caption_position(&query.target_caption_id).ok_or_else(|| {
                    Error::Argument(format!("unknown caption id {}", query.target_caption_id))
                })?;
                Ok(to_f64(ds.caption_embeddings().row(row)))
            }
        }
    }

    pub fn run_query(&self, query: &TransformationQuery, cfg: &TransformConfig) -> Result<Vec<RankedHit>> {
        cfg.validate()?;
        let x = self.query_vector(query, cfg)?;
        let exclude: &[&str] = if cfg.exclude_self {
            &[query.image_id.as_str()]
        } else {
            &[]
        };
        self.images.top_k(&x, cfg.top_n, exclude)
    }

    /// Runs every query; results come back in input order.
    pub fn run_batch(
        &self,
        queries: &[&TransformationQuery],
        cfg: &TransformConfig,
    ) -> Vec<Result<Vec<RankedHit>>> {
        queries.par_iter().map(|q| self.run_query(q, cfg)).collect()
    }

    fn image_row(&self, image_id: &str) -> Result<Vec<f64>> {
        let row = self
            .dataset
            .image_position(image_id)
            .ok_or_else(|| Error::Argument(format!("unknown image id {}", image_id)))?;
        Ok(to_f64(self.dataset.image_embeddings().row(row)))
    }
}

/// Single query without reusing indices; see [`Retriever::run_query`].
pub fn run_query(
    dataset: &Dataset,
    query: &TransformationQuery,
    cfg: &TransformConfig,
) -> Result<Vec<RankedHit>> {
    Retriever::new(dataset)?.run_query(query, cfg)
}
