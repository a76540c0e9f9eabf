//! Normalization, cosine similarity and exact top-k retrieval.
//!
//! All arithmetic is done in `f64`. Rows of a database are scored
//! independently, so the parallel path gives the same bits as the serial one.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

/// Work size (rows x dim) above which scoring is spread over the rayon pool.
const PARALLEL_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    /// Set when the input was the zero vector (returned unchanged).
    pub degenerate: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * f64::from(y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Argument("vector contains non-finite values".into()))
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Normalized> {
    check_finite(v)?;
    let n = norm(v);
    if n == 0.0 {
        return Ok(Normalized {
            vector: v.to_vec(),
            degenerate: true,
        });
    }
    Ok(Normalized {
        vector: v.iter().map(|x| x / n).collect(),
        degenerate: false,
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Argument("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One retrieval result. Lists are sorted by descending similarity, ties
/// broken by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub item_id: String,
    pub similarity: f64,
}

/// Exact cosine search over the rows of an [`EmbeddingMatrix`].
///
/// Row norms are computed once at construction. Zero rows score `0.0`
/// against every query.
#[derive(Debug, Clone)]
pub struct CosineIndex<'a> {
    matrix: &'a EmbeddingMatrix,
    ids: &'a [String],
    norms: Vec<f64>,
}

impl<'a> CosineIndex<'a> {
    pub fn new(matrix: &'a EmbeddingMatrix, ids: &'a [String]) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::Argument(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.rows()
            )));
        }
        let norms = (0..matrix.rows()).map(|i| matrix.row_norm(i)).collect();
        Ok(CosineIndex { matrix, ids, norms })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        self.ids
    }

    /// Cosine similarity of `query` against every row, in row order.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.matrix.dim() {
            return Err(Error::Argument(format!(
                "query has dim {}, index has dim {}",
                query.len(),
                self.matrix.dim()
            )));
        }
        check_finite(query)?;
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::Argument("zero query vector".into()));
        }
        let score = |i: usize| {
            let rn = self.norms[i];
            if rn == 0.0 {
                0.0
            } else {
                (dot_mixed(query, self.matrix.row(i)) / (qn * rn)).clamp(-1.0, 1.0)
            }
        };
        let n = self.matrix.rows();
        if n * self.matrix.dim() >= PARALLEL_THRESHOLD {
            Ok((0..n).into_par_iter().map(score).collect())
        } else {
            Ok((0..n).map(score).collect())
        }
    }

    /// The `k` most similar rows whose id is not in `exclude`.
    pub fn top_k(&self, query: &[f64], k: usize, exclude: &[&str]) -> Result<Vec<RankedHit>> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        let sims = self.similarities(query)?;
        let mut candidates: Vec<(f64, usize)> = sims
            .into_iter()
            .enumerate()
            .filter(|&(i, _)| !exclude.contains(&self.ids[i].as_str()))
            .map(|(i, s)| (s, i))
            .collect();
        if candidates.is_empty() {
            return Err(Error::EmptyResult);
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, order);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(order);
        Ok(candidates
            .into_iter()
            .map(|(s, i)| RankedHit {
                item_id: self.ids[i].clone(),
                similarity: s,
            })
            .collect())
    }

    /// Position of the most similar row (ties to the smallest id).
    pub fn nearest(&self, query: &[f64]) -> Result<usize> {
        let hit = self.top_k(query, 1, &[])?;
        Ok(self
            .ids
            .iter()
            .position(|id| *id == hit[0].item_id)
            .expect("hit id comes from the index"))
    }
}

/// One-shot exact top-k; see [`CosineIndex::top_k`].
pub fn top_k(
    query: &[f64],
    items: &EmbeddingMatrix,
    ids: &[String],
    k: usize,
    exclude: &[&str],
) -> Result<Vec<RankedHit>> {
    CosineIndex::new(items, ids)?.top_k(query, k, exclude)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((n.vector[0] - 0.6).abs() < 1e-12 && (n.vector[1] - 0.8).abs() < 1e-12);
        assert!(!n.degenerate);
        let unit = l2_normalize(&[0.0, 1.0]).unwrap();
        assert_eq!(unit.vector, vec![0.0, 1.0]);
        let z = l2_normalize(&[0.0, 0.0]).unwrap();
        assert_eq!(z.vector, vec![0.0, 0.0]);
        assert!(z.degenerate);
        assert!(l2_normalize(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]], 2, true).unwrap();
        let names = ids(&["a", "b"]);
        let hits = top_k(&[1.0, 0.0], &m, &names, 1, &[]).unwrap();
        assert_eq!(hits, vec![RankedHit { item_id: "a".into(), similarity: 1.0 }]);
        let hits = top_k(&[1.0, 0.0], &m, &names, 1, &["a"]).unwrap();
        assert_eq!(hits, vec![RankedHit { item_id: "b".into(), similarity: 0.0 }]);
        assert!(matches!(
            top_k(&[1.0, 0.0], &m, &names, 1, &["a", "b"]),
            Err(Error::EmptyResult)
        ));
    }

    #[test]
    fn ties_break_by_id() {
        let m = EmbeddingMatrix::from_rows(&[[0.0f32, 1.0], [1.0, 0.0], [-1.0, 0.0]], 2, true)
            .unwrap();
        let names = ids(&["b", "a", "c"]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let hits = top_k(&[h, h], &m, &names, 2, &[]).unwrap();
        assert_eq!(hits[0].item_id, "a");
        assert_eq!(hits[1].item_id, "b");
        assert!((hits[0].similarity - h).abs() < 1e-7);
        assert_eq!(hits[0].similarity, hits[1].similarity);
    }

    #[test]
    fn k_larger_than_database_returns_everything() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]], 2, false).unwrap();
        let hits = top_k(&[1.0, 1.0], &m, &ids(&["x", "y"]), 10, &[]).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(top_k(&[1.0, 1.0], &m, &ids(&["x", "y"]), 0, &[]).is_err());
    }
}
