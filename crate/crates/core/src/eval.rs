//! Scores and sweeps.
//!
//! The main score is a weighted accuracy: each query carries a weight `mu`
//! (renormalized over the evaluated subset) and succeeds when any of the
//! top-`n` retrieved images gets oracle probability above 0.5 for the target
//! caption.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CosineIndex, RankedHit};
use crate::oracle::{decide, Oracle, SUCCESS_THRESHOLD};
use crate::store::{
    CaptionRecord, Dataset, EmbeddingMatrix, Field, Split, TransformationQuery, WordTable,
};
use crate::train::{apply_head, AdaptationHead};
use crate::transform::{word_delta, DeltaMethod, Retriever, Strategy, TransformConfig};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub image_id: String,
    pub field: Field,
    pub source_word: String,
    pub target_word: String,
    pub target_caption_id: String,
    pub retrieved: Vec<RankedHit>,
    pub success: bool,
    /// Highest oracle probability among the retrieved images.
    pub oracle_prob_best: f64,
    /// Weight after renormalization over the evaluated subset.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub score: f64,
    /// Fraction of the total weight carried by this target.
    pub share: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Simat,
    AnnotationMatch,
    RetrievalUpperBound,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Simat => "simat",
            Metric::AnnotationMatch => "annotation_match",
            Metric::RetrievalUpperBound => "retrieval_upper_bound",
        }
    }
}

fn split_name(split: Option<Split>) -> &'static str {
    split.map_or("all", Split::as_str)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema: u32,
    pub metric: Metric,
    /// Weighted accuracy, percent.
    pub score: f64,
    /// Plain accuracy, percent.
    pub unweighted_score: f64,
    pub n: usize,
    pub lambda: f64,
    pub strategy: Strategy,
    pub delta_method: DeltaMethod,
    pub split: String,
    pub num_queries: usize,
    /// Deltas were estimated from the benchmark's own captions.
    pub caption_leaking: bool,
    pub note: Option<String>,
    pub per_target: BTreeMap<String, TargetScore>,
    pub outcomes: Vec<QueryOutcome>,
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub const CSV_HEADER: &'static str =
        "metric,strategy,delta_method,lambda,n,split,num_queries,score,unweighted_score";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.1},{:.1}",
            self.metric.as_str(),
            self.strategy,
            self.delta_method,
            self.lambda,
            self.n,
            self.split,
            self.num_queries,
            self.score,
            self.unweighted_score
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn breakdown_csv(&self) -> String {
        let mut out = String::from("target,score,share,count\n");
        for (target, t) in &self.per_target {
            writeln!(out, "{},{:.1},{:.6},{}", target, t.score, t.share, t.count).unwrap();
        }
        out
    }
}

/// Weighted and plain accuracy over `(weight, success)` pairs, in percent.
/// Numerator and denominator are summed in the same order, so an
/// all-success run scores exactly 100.
fn accuracy(items: impl Iterator<Item = (f64, bool)>) -> (f64, f64) {
    let (mut hit_w, mut total_w, mut hits, mut n) = (0.0, 0.0, 0usize, 0usize);
    for (w, ok) in items {
        total_w += w;
        n += 1;
        if ok {
            hit_w += w;
            hits += 1;
        }
    }
    let weighted = if total_w > 0.0 { 100.0 * hit_w / total_w } else { 0.0 };
    let plain = if n > 0 { 100.0 * hits as f64 / n as f64 } else { 0.0 };
    (weighted, plain)
}

/// Queries of `split` with weights renormalized to sum to one.
fn evaluated_queries(dataset: &Dataset, split: Option<Split>) -> Result<Vec<TransformationQuery>> {
    let qs = dataset.queries_in(split);
    if qs.is_empty() {
        return Err(Error::Argument(format!(
            "no queries to evaluate in split {}",
            split_name(split)
        )));
    }
    let total: f64 = qs.iter().map(|q| q.weight).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Argument("query weights sum to zero".into()));
    }
    Ok(qs
        .into_iter()
        .map(|q| TransformationQuery {
            weight: q.weight / total,
            ..q.clone()
        })
        .collect())
}

fn retrieve_all(
    retriever: &Retriever<'_>,
    queries: &[TransformationQuery],
    cfg: &TransformConfig,
) -> Result<Vec<Vec<RankedHit>>> {
    cfg.validate()?;
    let refs: Vec<&TransformationQuery> = queries.iter().collect();
    retriever.run_batch(&refs, cfg).into_iter().collect()
}

fn outcome(q: &TransformationQuery, retrieved: Vec<RankedHit>, success: bool, best: f64) -> QueryOutcome {
    QueryOutcome {
        query_id: q.query_id.clone(),
        image_id: q.image_id.clone(),
        field: q.field,
        source_word: q.source_word.clone(),
        target_word: q.target_word.clone(),
        target_caption_id: q.target_caption_id.clone(),
        retrieved,
        success,
        oracle_prob_best: best,
        weight: q.weight,
    }
}

fn report(
    metric: Metric,
    cfg: &TransformConfig,
    split: Option<Split>,
    outcomes: Vec<QueryOutcome>,
) -> ScoreReport {
    let (score, unweighted_score) = accuracy(outcomes.iter().map(|o| (o.weight, o.success)));
    let uses_delta = cfg.strategy != Strategy::TextToImage;
    let note = (uses_delta && cfg.lambda == 0.0)
        .then(|| "lambda = 0: equivalent to retrieving the nearest non-self image".to_string());
    ScoreReport {
        schema: REPORT_SCHEMA,
        metric,
        score,
        unweighted_score,
        n: cfg.top_n,
        lambda: cfg.lambda,
        strategy: cfg.strategy,
        delta_method: cfg.delta_method,
        split: split_name(split).to_string(),
        num_queries: outcomes.len(),
        caption_leaking: uses_delta && cfg.delta_method == DeltaMethod::SentenceAverage,
        note,
        per_target: breakdown_by_target(&outcomes),
        outcomes,
    }
}

/// Oracle-thresholded weighted accuracy over the queries of `split`.
///
/// A query succeeds when any of its top-`cfg.top_n` images has
/// `P(image, target caption) > 0.5`. Coverage gaps are reported all at once.
pub fn simat_score(
    retriever: &Retriever<'_>,
    oracle: &dyn Oracle,
    cfg: &TransformConfig,
    split: Option<Split>,
) -> Result<ScoreReport> {
    let queries = evaluated_queries(retriever.dataset(), split)?;
    let hits = retrieve_all(retriever, &queries, cfg)?;
    let pairs: Vec<(String, String)> = queries
        .iter()
        .zip(&hits)
        .flat_map(|(q, hs)| {
            hs.iter()
                .map(move |h| (h.item_id.clone(), q.target_caption_id.clone()))
        })
        .collect();
    let probs = oracle.score_many(&pairs)?;
    let mut probs = probs.into_iter();
    let outcomes = queries
        .iter()
        .zip(hits)
        .map(|(q, hs)| {
            let ps: Vec<f64> = probs.by_ref().take(hs.len()).collect();
            let best = ps.iter().copied().fold(0.0, f64::max);
            let success = ps.iter().any(|&p| decide(p, SUCCESS_THRESHOLD));
            outcome(q, hs, success, best)
        })
        .collect();
    Ok(report(Metric::Simat, cfg, split, outcomes))
}

/// Success iff the top-1 image is annotated with exactly the target triplet.
pub fn annotation_match_score(
    retriever: &Retriever<'_>,
    cfg: &TransformConfig,
    split: Option<Split>,
) -> Result<ScoreReport> {
    let dataset = retriever.dataset();
    let queries = evaluated_queries(dataset, split)?;
    let hits = retrieve_all(retriever, &queries, cfg)?;
    let outcomes = queries
        .iter()
        .zip(hits)
        .map(|(q, hs)| {
            let target = dataset.caption(&q.target_caption_id).map(|c| &c.triplet);
            let top = hs.first().and_then(|h| dataset.image(&h.item_id)).map(|i| &i.triplet);
            let success = target.is_some() && top == target;
            outcome(q, hs, success, if success { 1.0 } else { 0.0 })
        })
        .collect();
    Ok(report(Metric::AnnotationMatch, cfg, split, outcomes))
}

/// The text-to-image score: the target caption itself is the query.
pub fn retrieval_upper_bound(
    retriever: &Retriever<'_>,
    oracle: &dyn Oracle,
    cfg: &TransformConfig,
    split: Option<Split>,
) -> Result<ScoreReport> {
    let cfg = TransformConfig {
        strategy: Strategy::TextToImage,
        ..cfg.clone()
    };
    let mut r = simat_score(retriever, oracle, &cfg, split)?;
    r.metric = Metric::RetrievalUpperBound;
    Ok(r)
}

/// Weighted share of queries for which `E(source caption) + delta` is
/// nearest (over all captions, none excluded) to the target caption.
pub fn text_delta_accuracy(
    captions: &[CaptionRecord],
    queries: &[TransformationQuery],
    caption_embeddings: &EmbeddingMatrix,
    words: &WordTable,
) -> Result<f64> {
    let ids: Vec<String> = captions.iter().map(|c| c.caption_id.clone()).collect();
    let order: Vec<usize> = captions.iter().map(|c| c.embedding_row).collect();
    let embeddings = caption_embeddings.select_rows(&order)?;
    let index = CosineIndex::new(&embeddings, &ids)?;
    let by_id: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let by_triplet: BTreeMap<_, usize> = captions.iter().enumerate().map(|(i, c)| (&c.triplet, i)).collect();

    let mut results = Vec::with_capacity(queries.len());
    for q in queries {
        let &target = by_id.get(q.target_caption_id.as_str()).ok_or_else(|| {
            Error::Argument(format!("query {}: unknown caption {}", q.query_id, q.target_caption_id))
        })?;
        let source_triplet = captions[target].triplet.with(q.field, &q.source_word);
        let &source = by_triplet.get(&source_triplet).ok_or_else(|| {
            Error::Argument(format!("query {}: no caption for source {}", q.query_id, source_triplet))
        })?;
        let delta = word_delta(words, &q.source_word, &q.target_word)?;
        let x: Vec<f64> = embeddings
            .row(source)
            .iter()
            .zip(&delta.vector)
            .map(|(&e, d)| f64::from(e) + d)
            .collect();
        let nearest = index.nearest(&x)?;
        results.push((q.weight, nearest == target));
    }
    if results.is_empty() {
        return Err(Error::Argument("no queries".into()));
    }
    if results.iter().all(|(w, _)| *w == 0.0) {
        results.iter_mut().for_each(|(w, _)| *w = 1.0);
    }
    Ok(accuracy(results.into_iter()).0)
}

/// Rank of `target` among `sims` (0 = best): strictly better items plus
/// equal items with a smaller index.
fn rank_of(sims: &[f64], target: usize) -> usize {
    let t = sims[target];
    sims.iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// `(text R@k, image R@k)` in percent for ground-truth pairs
/// `(image row, text row)`. Text R@k ranks all texts for each image;
/// image R@k ranks all images for each text.
pub fn recall_at_k(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    pairs: &[(usize, usize)],
    k: usize,
) -> Result<(f64, f64)> {
    if k == 0 || pairs.is_empty() {
        return Err(Error::Argument("recall@k needs k >= 1 and at least one pair".into()));
    }
    let mut seen_i = std::collections::HashSet::new();
    let mut seen_t = std::collections::HashSet::new();
    for &(i, t) in pairs {
        if i >= images.rows() || t >= texts.rows() {
            return Err(Error::Argument(format!("pair ({}, {}) out of range", i, t)));
        }
        if !seen_i.insert(i) || !seen_t.insert(t) {
            return Err(Error::Argument("ground-truth pairs must be a bijection".into()));
        }
    }
    let image_ids: Vec<String> = (0..images.rows()).map(|i| i.to_string()).collect();
    let text_ids: Vec<String> = (0..texts.rows()).map(|i| i.to_string()).collect();
    let image_index = CosineIndex::new(images, &image_ids)?;
    let text_index = CosineIndex::new(texts, &text_ids)?;
    let mut text_hits = 0usize;
    let mut image_hits = 0usize;
    for &(i, t) in pairs {
        if rank_of(&text_index.similarities(&images.row_f64(i))?, t) < k {
            text_hits += 1;
        }
        if rank_of(&image_index.similarities(&texts.row_f64(t))?, i) < k {
            image_hits += 1;
        }
    }
    let n = pairs.len() as f64;
    Ok((100.0 * text_hits as f64 / n, 100.0 * image_hits as f64 / n))
}

/// Weighted accuracy per target word, with each target's share of the
/// total weight.
pub fn breakdown_by_target(outcomes: &[QueryOutcome]) -> BTreeMap<String, TargetScore> {
    let total: f64 = outcomes.iter().map(|o| o.weight).sum();
    let mut groups: BTreeMap<&str, Vec<&QueryOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups.entry(&o.target_word).or_default().push(o);
    }
    groups
        .into_iter()
        .map(|(target, members)| {
            let weight: f64 = members.iter().map(|o| o.weight).sum();
            let (score, _) = accuracy(members.iter().map(|o| (o.weight, o.success)));
            (
                target.to_string(),
                TargetScore {
                    score,
                    share: if total > 0.0 { weight / total } else { 0.0 },
                    count: members.len(),
                },
            )
        })
        .collect()
}

/// Image and text adaptation heads trained at one temperature.
#[derive(Debug, Clone)]
pub struct HeadPair {
    pub tau: f64,
    pub image: AdaptationHead,
    pub text: AdaptationHead,
}

/// Projects images with the image head, captions and words with the text head.
pub fn project_dataset(dataset: &Dataset, image: &AdaptationHead, text: &AdaptationHead) -> Result<Dataset> {
    dataset.with_embeddings(
        apply_head(image, dataset.image_embeddings())?,
        apply_head(text, dataset.caption_embeddings())?,
        apply_head(text, dataset.words().matrix())?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: Option<f64>,
    pub lambda: f64,
    pub strategy: Strategy,
    pub n: usize,
    pub split: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptimum {
    pub tau: Option<f64>,
    pub strategy: Strategy,
    pub lambda_star: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub optima: Vec<SweepOptimum>,
}

fn tau_label(tau: Option<f64>) -> String {
    tau.map_or_else(|| "none".to_string(), |t| t.to_string())
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,lambda,strategy,n,split,score\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.1}",
                tau_label(r.tau),
                r.lambda,
                r.strategy,
                r.n,
                r.split,
                r.score
            )
            .unwrap();
        }
        out
    }

    pub fn optima_csv(&self) -> String {
        let mut out = String::from("tau,strategy,lambda_star,score\n");
        for o in &self.optima {
            writeln!(out, "{},{},{},{:.1}", tau_label(o.tau), o.strategy, o.lambda_star, o.score).unwrap();
        }
        out
    }
}

/// Score over every (head, strategy, lambda) combination.
///
/// With no heads the dataset's own embeddings are used (`tau = None`).
/// `lambda*` per curve is the best-scoring lambda, ties to the smaller one.
pub fn sweep(
    dataset: &Dataset,
    lambdas: &[f64],
    strategies: &[Strategy],
    heads: &[HeadPair],
    oracle: &dyn Oracle,
    base: &TransformConfig,
    split: Option<Split>,
) -> Result<SweepResult> {
    if lambdas.is_empty() || strategies.is_empty() {
        return Err(Error::Config("sweep grids must be nonempty".into()));
    }
    let projected: Vec<(Option<f64>, Dataset)> = if heads.is_empty() {
        vec![(None, dataset.clone())]
    } else {
        heads
            .iter()
            .map(|h| Ok((Some(h.tau), project_dataset(dataset, &h.image, &h.text)?)))
            .collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    let mut optima = Vec::new();
    for (tau, ds) in &projected {
        let retriever = Retriever::new(ds)?;
        for &strategy in strategies {
            let mut best: Option<(f64, f64)> = None;
            for &lambda in lambdas {
                let cfg = TransformConfig {
                    lambda,
                    strategy,
                    ..base.clone()
                };
                let score = simat_score(&retriever, oracle, &cfg, split)?.score;
                rows.push(SweepRow {
                    tau: *tau,
                    lambda,
                    strategy,
                    n: cfg.top_n,
                    split: split_name(split).to_string(),
                    score,
                });
                best = match best {
                    Some((bl, bs)) if bs > score || (bs == score && bl <= lambda) => Some((bl, bs)),
                    _ => Some((lambda, score)),
                };
            }
            let (lambda_star, score) = best.expect("grid is nonempty");
            optima.push(SweepOptimum {
                tau: *tau,
                strategy,
                lambda_star,
                score,
            });
        }
    }
    Ok(SweepResult { rows, optima })
}
