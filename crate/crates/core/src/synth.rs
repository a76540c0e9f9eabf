//! Synthetic compositional worlds.
//!
//! Every token gets a concept vector `u_w`. A caption embeds as
//! `normalize(u_S + u_R + u_O)`, a word as `u_w`, and an image as
//! `normalize(u_S + u_R + u_O + sigma * noise)` with `noise ~ N(0, I / dim)`.
//! With `sigma = 0` delta arithmetic is exact, which makes end-to-end scores
//! predictable.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_queries, caption_records, compute_weights, oracle_filter, split_dataset, BuildConfig, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::oracle::MockOracle;
use crate::store::{write_bundle, write_embeddings, Dataset, EmbeddingMatrix, ImageRecord, Split, Triplet, WordTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_subjects: usize,
    pub num_relations: usize,
    pub num_objects: usize,
    pub images_per_triplet: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Fraction of the subject x relation x object cube that is realized.
    pub triplet_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_subjects: 4,
            num_relations: 4,
            num_objects: 4,
            images_per_triplet: 5,
            dim: 16,
            noise_sigma: 0.0,
            triplet_density: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn vocab_size(&self) -> usize {
        self.num_subjects + self.num_relations + self.num_objects
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.num_subjects, self.num_relations, self.num_objects];
        if counts.contains(&0) || self.images_per_triplet == 0 || self.dim == 0 {
            return Err(Error::Config("synth counts and dim must be positive".into()));
        }
        if counts.iter().all(|&c| c < 2) {
            return Err(Error::Config("at least one axis needs two or more tokens".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.triplet_density > 0.0 && self.triplet_density <= 1.0) {
            return Err(Error::Config(format!(
                "triplet density must be in (0, 1], got {}",
                self.triplet_density
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub dataset: Dataset,
    /// Ground-truth concept vectors, one row per token in `concept_ids`.
    pub concepts: EmbeddingMatrix,
    pub concept_ids: Vec<String>,
}

impl SynthWorld {
    /// Standard bundle plus `concepts.smat` / `concepts.ids`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_bundle(&self.dataset, dir)?;
        write_embeddings(&self.concepts, &self.concept_ids, &dir.join("concepts.smat"))
    }
}

fn tokens(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("{}{:0w$}", prefix, i, w = width)).collect()
}

/// Gaussian vectors, orthonormalized when `dim >= count`, unit-normalized otherwise.
fn concept_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            if dim >= count {
                for u in &out {
                    let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                out.push(v);
                break;
            }
        }
    }
    out
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn generate_world(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subjects = tokens("s", cfg.num_subjects);
    let relations = tokens("r", cfg.num_relations);
    let objects = tokens("o", cfg.num_objects);
    let vocab: Vec<String> = subjects.iter().chain(&relations).chain(&objects).cloned().collect();
    let vectors = concept_vectors(vocab.len(), cfg.dim, &mut rng);
    let concept: HashMap<&str, &Vec<f64>> = vocab.iter().map(String::as_str).zip(&vectors).collect();

    let mut cube: Vec<Triplet> = Vec::with_capacity(vocab.len());
    for s in &subjects {
        for r in &relations {
            for o in &objects {
                cube.push(Triplet::new(s.as_str(), r.as_str(), o.as_str()));
            }
        }
    }
    let keep = ((cube.len() as f64 * cfg.triplet_density).round() as usize).clamp(1, cube.len());
    cube.shuffle(&mut rng);
    let realized: BTreeSet<Triplet> = cube.into_iter().take(keep).collect();

    let compose = |t: &Triplet| -> Vec<f64> {
        let (s, r, o) = (concept[t.subject.as_str()], concept[t.relation.as_str()], concept[t.object.as_str()]);
        (0..cfg.dim).map(|k| s[k] + r[k] + o[k]).collect()
    };

    let captions = caption_records(&realized, DEFAULT_TEMPLATE, &HashMap::new())?;
    let caption_rows: Vec<Vec<f64>> = captions.iter().map(|c| unit(compose(&c.triplet))).collect();

    let n_images = realized.len() * cfg.images_per_triplet;
    let width = n_images.saturating_sub(1).to_string().len().max(4);
    let noise = Normal::new(0.0, 1.0 / (cfg.dim as f64).sqrt()).expect("valid normal");
    let mut images = Vec::with_capacity(n_images);
    let mut image_rows = Vec::with_capacity(n_images);
    for t in &realized {
        let base = compose(t);
        for _ in 0..cfg.images_per_triplet {
            let row: Vec<f64> = base
                .iter()
                .map(|&b| {
                    let e: f64 = noise.sample(&mut rng);
                    b + cfg.noise_sigma * e
                })
                .collect();
            image_rows.push(unit(row));
            images.push(ImageRecord {
                image_id: format!("img{:0w$}", images.len(), w = width),
                triplet: t.clone(),
                split: Split::Dev,
                embedding_row: images.len(),
            });
        }
    }

    let (dev, test) = split_dataset(&images, cfg.seed);
    let mut images: Vec<ImageRecord> = dev.into_iter().chain(test).collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let queries = build_queries(&images, &captions);
    let oracle = MockOracle::from_records(&images, &captions);
    let defaults = BuildConfig::new(BTreeSet::new(), BTreeSet::new());
    let queries = oracle_filter(&queries, &images, &captions, &oracle, &defaults)?;
    if queries.is_empty() {
        return Err(Error::Generation("configuration yields no transformation queries".into()));
    }
    let queries = compute_weights(&queries);

    let mut words: Vec<String> = vocab.clone();
    words.sort();
    let word_rows: Vec<&Vec<f64>> = words.iter().map(|w| concept[w.as_str()]).collect();

    let dataset = Dataset::new(
        images,
        EmbeddingMatrix::from_f64_rows(&image_rows, cfg.dim, true)?,
        captions,
        EmbeddingMatrix::from_f64_rows(&caption_rows, cfg.dim, true)?,
        WordTable::new(words, EmbeddingMatrix::from_f64_rows(&word_rows, cfg.dim, true)?)?,
        queries,
    )?;
    Ok(SynthWorld {
        dataset,
        concepts: EmbeddingMatrix::from_f64_rows(&vectors, cfg.dim, true)?,
        concept_ids: vocab,
    })
}

/// Paired features where text is a fixed random linear map of the image
/// features: `text_i = A image_i`. Returns `(images, texts)`, row `i` paired.
pub fn alignable_features(pairs: usize, dim: usize, seed: u64) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let map: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect())
        .collect();
    let images: Vec<Vec<f64>> = (0..pairs)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let texts: Vec<Vec<f64>> = images
        .iter()
        .map(|x| map.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok((
        EmbeddingMatrix::from_f64_rows(&images, dim, false)?,
        EmbeddingMatrix::from_f64_rows(&texts, dim, false)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Field;

    #[test]
    fn small_world_counts_match_enumeration() {
        let cfg = SynthConfig {
            num_subjects: 2,
            num_relations: 1,
            num_objects: 2,
            images_per_triplet: 2,
            dim: 8,
            triplet_density: 1.0,
            ..SynthConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let ds = &world.dataset;
        assert_eq!(ds.images().len(), 8);
        assert_eq!(ds.captions().len(), 4);
        // Every image can swap its subject and its object: 2 queries each.
        let mut expected = BTreeSet::new();
        for img in ds.images() {
            for field in [Field::Subject, Field::Object] {
                let other = ds
                    .captions()
                    .iter()
                    .map(|c| c.triplet.get(field))
                    .find(|v| *v != img.triplet.get(field))
                    .unwrap();
                expected.insert(format!("{}:{}:{}", img.image_id, field, other));
            }
        }
        let got: BTreeSet<String> = ds.queries().iter().map(|q| q.query_id.clone()).collect();
        assert_eq!(got, expected);
        let dev = ds.images().iter().filter(|i| i.split == Split::Dev).count();
        assert_eq!(dev, 4);
    }

    #[test]
    fn concepts_are_orthonormal_when_room() {
        let world = generate_world(&SynthConfig { dim: 12, ..SynthConfig::default() }).unwrap();
        let c = &world.concepts;
        for i in 0..c.rows() {
            for j in 0..c.rows() {
                let d: f64 = c.row_f64(i).iter().zip(c.row_f64(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_world() {
        let cfg = SynthConfig { noise_sigma: 0.3, seed: 7, ..SynthConfig::default() };
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a.dataset.image_embeddings(), b.dataset.image_embeddings());
        assert_eq!(a.dataset.queries(), b.dataset.queries());
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = SynthConfig { num_subjects: 1, num_relations: 1, num_objects: 1, ..SynthConfig::default() };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig { triplet_density: 0.0, ..SynthConfig::default() };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn single_triplet_world_has_no_queries() {
        let cfg = SynthConfig {
            num_subjects: 2,
            num_relations: 1,
            num_objects: 1,
            triplet_density: 0.5,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Generation(_))));
    }
}
