//! Benchmark construction from `(image, triplet)` scene-graph records.
//!
//! Stages, in order: subject/relation allowlists, object filtering, rare
//! triplet removal, caption rendering, query enumeration, oracle filtering,
//! inverse-square-root weighting, and a seeded 50/50 image split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, read_tsv};
use crate::oracle::Oracle;
use crate::store::{CaptionRecord, Field, ImageRecord, Split, TransformationQuery, Triplet};

pub const DEFAULT_TEMPLATE: &str = "A {subject} {relation} a {object}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraphEntry {
    pub image_id: String,
    pub triplet: Triplet,
}

impl SceneGraphEntry {
    pub fn new(image_id: &str, subject: &str, relation: &str, object: &str) -> Self {
        SceneGraphEntry {
            image_id: image_id.to_string(),
            triplet: Triplet::new(subject, relation, object),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub subject_allowlist: BTreeSet<String>,
    pub relation_allowlist: BTreeSet<String>,
    pub max_objects_per_pair: usize,
    pub min_images_per_triplet: usize,
    pub oracle_hi: f64,
    pub oracle_lo: f64,
    pub split_seed: u64,
    pub caption_template: String,
}

impl BuildConfig {
    pub fn new(subjects: BTreeSet<String>, relations: BTreeSet<String>) -> Self {
        BuildConfig {
            subject_allowlist: subjects,
            relation_allowlist: relations,
            max_objects_per_pair: 10,
            min_images_per_triplet: 2,
            oracle_hi: 0.9,
            oracle_lo: 0.1,
            split_seed: 0,
            caption_template: DEFAULT_TEMPLATE.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject_allowlist.is_empty() {
            return Err(Error::Config("subject allowlist is empty".into()));
        }
        if self.relation_allowlist.is_empty() {
            return Err(Error::Config("relation allowlist is empty".into()));
        }
        if self.max_objects_per_pair == 0 {
            return Err(Error::Config("max_objects_per_pair must be at least 1".into()));
        }
        if !(0.0 <= self.oracle_lo && self.oracle_lo < self.oracle_hi && self.oracle_hi <= 1.0) {
            return Err(Error::Config(format!(
                "oracle thresholds must satisfy 0 <= lo < hi <= 1 (lo = {}, hi = {})",
                self.oracle_lo, self.oracle_hi
            )));
        }
        parse_template(&self.caption_template)?;
        Ok(())
    }
}

fn normalize_token(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Reads `image_id, subject, relation, object`; tokens are lowercased.
pub fn read_scene_graph(path: &Path) -> Result<Vec<SceneGraphEntry>> {
    let rows = read_tsv(path, &["image_id", "subject", "relation", "object"])?;
    Ok(rows
        .into_iter()
        .map(|r| SceneGraphEntry {
            image_id: r[0].trim().to_string(),
            triplet: Triplet::new(
                normalize_token(&r[1]),
                normalize_token(&r[2]),
                normalize_token(&r[3]),
            ),
        })
        .collect())
}

/// One token per line; blank lines and `#` comments are skipped.
pub fn read_allowlist(path: &Path) -> Result<BTreeSet<String>> {
    Ok(read_to_string(path)?
        .lines()
        .map(normalize_token)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

/// Optional per-triplet caption overrides: `subject, relation, object, text`.
pub fn read_caption_overrides(path: &Path) -> Result<HashMap<Triplet, String>> {
    let rows = read_tsv(path, &["subject", "relation", "object", "text"])?;
    Ok(rows
        .into_iter()
        .map(|r| {
            (
                Triplet::new(normalize_token(&r[0]), normalize_token(&r[1]), normalize_token(&r[2])),
                r[3].clone(),
            )
        })
        .collect())
}

pub fn filter_triplets(entries: &[SceneGraphEntry], cfg: &BuildConfig) -> Result<Vec<SceneGraphEntry>> {
    if cfg.subject_allowlist.is_empty() || cfg.relation_allowlist.is_empty() {
        return Err(Error::Config("allowlists must be nonempty".into()));
    }
    Ok(entries
        .iter()
        .filter(|e| {
            cfg.subject_allowlist.contains(&e.triplet.subject)
                && cfg.relation_allowlist.contains(&e.triplet.relation)
        })
        .cloned()
        .collect())
}

/// Drops objects seen with a single relation, then keeps, for every
/// (subject, relation) pair, only its `max_objects_per_pair` most frequent
/// objects (ties to the smaller token).
pub fn filter_objects(entries: &[SceneGraphEntry], cfg: &BuildConfig) -> Vec<SceneGraphEntry> {
    let mut relations_of: HashMap<&str, HashSet<&str>> = HashMap::new();
    for e in entries {
        relations_of
            .entry(&e.triplet.object)
            .or_default()
            .insert(&e.triplet.relation);
    }
    let step1: Vec<&SceneGraphEntry> = entries
        .iter()
        .filter(|e| relations_of[e.triplet.object.as_str()].len() >= 2)
        .collect();

    let mut counts: HashMap<(&str, &str), BTreeMap<&str, usize>> = HashMap::new();
    for e in &step1 {
        *counts
            .entry((&e.triplet.subject, &e.triplet.relation))
            .or_default()
            .entry(&e.triplet.object)
            .or_default() += 1;
    }
    let kept: HashMap<(&str, &str), HashSet<&str>> = counts
        .into_iter()
        .map(|(pair, objects)| {
            let mut ranked: Vec<(&str, usize)> = objects.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            let top = ranked
                .into_iter()
                .take(cfg.max_objects_per_pair)
                .map(|(o, _)| o)
                .collect();
            (pair, top)
        })
        .collect();

    step1
        .into_iter()
        .filter(|e| {
            kept[&(e.triplet.subject.as_str(), e.triplet.relation.as_str())]
                .contains(e.triplet.object.as_str())
        })
        .cloned()
        .collect()
}

/// Removes entries whose triplet has fewer than `min_images` distinct images.
pub fn filter_rare_triplets(entries: &[SceneGraphEntry], min_images: usize) -> Vec<SceneGraphEntry> {
    let mut images: HashMap<&Triplet, HashSet<&str>> = HashMap::new();
    for e in entries {
        images.entry(&e.triplet).or_default().insert(&e.image_id);
    }
    entries
        .iter()
        .filter(|e| images[&e.triplet].len() >= min_images)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot(Field),
}

fn parse_template(template: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = template;
    let mut seen = HashSet::new();
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(Error::Config(format!("unbalanced '}}' in template {:?}", template)));
        }
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::Config(format!("unclosed '{{' in template {:?}", template)))?;
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let name = &rest[open + 1..close];
        let field: Field = name.parse().map_err(|_| {
            Error::Config(format!("unknown placeholder {{{}}} in template {:?}", name, template))
        })?;
        seen.insert(field);
        pieces.push(Piece::Slot(field));
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    for field in Field::ALL {
        if !seen.contains(&field) {
            return Err(Error::Config(format!(
                "template {:?} lacks the {{{}}} placeholder",
                template, field
            )));
        }
    }
    Ok(pieces)
}

fn starts_with_vowel(token: &str) -> bool {
    matches!(token.chars().next(), Some('a' | 'e' | 'i' | 'o' | 'u' | 'A' | 'E' | 'I' | 'O' | 'U'))
}

/// If `text` ends with the article "a " or "an " (any case), returns the
/// prefix before it and whether the article was capitalized.
fn split_article(text: &str) -> Option<(&str, bool)> {
    let trimmed = text.strip_suffix(' ')?;
    let word_start = trimmed.rfind(char::is_whitespace).map_or(0, |i| i + 1);
    let word = &trimmed[word_start..];
    if word.eq_ignore_ascii_case("a") || word.eq_ignore_ascii_case("an") {
        let upper = word.starts_with(|c: char| c.is_uppercase());
        Some((&text[..word_start], upper))
    } else {
        None
    }
}

/// Fills the template and fixes the a/an article before subject and object.
pub fn render_caption(triplet: &Triplet, template: &str) -> Result<String> {
    let pieces = parse_template(template)?;
    let mut out = String::new();
    for piece in &pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(field) => {
                let token = triplet.get(*field);
                if *field != Field::Relation {
                    if let Some((prefix, upper)) = split_article(&out) {
                        let article = match (starts_with_vowel(token), upper) {
                            (true, true) => "An",
                            (true, false) => "an",
                            (false, true) => "A",
                            (false, false) => "a",
                        };
                        out = format!("{}{} ", prefix, article);
                    }
                }
                out.push_str(token);
            }
        }
    }
    let mut chars = out.chars();
    Ok(match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => out,
    })
}

/// One caption per distinct triplet, ids `c0000, c0001, ...` in triplet order.
pub fn caption_records(
    triplets: &BTreeSet<Triplet>,
    template: &str,
    overrides: &HashMap<Triplet, String>,
) -> Result<Vec<CaptionRecord>> {
    let width = triplets.len().saturating_sub(1).to_string().len().max(4);
    triplets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let text = match overrides.get(t) {
                Some(text) => text.clone(),
                None => render_caption(t, template)?,
            };
            Ok(CaptionRecord {
                caption_id: format!("c{:0width$}", i, width = width),
                triplet: t.clone(),
                text,
                embedding_row: i,
            })
        })
        .collect()
}

pub fn query_id(image_id: &str, field: Field, target: &str) -> String {
    format!("{}:{}:{}", image_id, field, target)
}

/// Enumerates every `(image, field, w1 -> w2)` whose substituted triplet has
/// a caption. Weights are left at zero. Output is sorted by query id.
pub fn build_queries(images: &[ImageRecord], captions: &[CaptionRecord]) -> Vec<TransformationQuery> {
    let by_triplet: HashMap<&Triplet, &CaptionRecord> =
        captions.iter().map(|c| (&c.triplet, c)).collect();
    // Alternatives per (field, the other two slots).
    let mut values: HashMap<(Field, Triplet), BTreeSet<&str>> = HashMap::new();
    for c in captions {
        for field in Field::ALL {
            values
                .entry((field, c.triplet.with(field, "")))
                .or_default()
                .insert(c.triplet.get(field));
        }
    }
    let mut out = Vec::new();
    for img in images {
        for field in Field::ALL {
            let current = img.triplet.get(field);
            let Some(alternatives) = values.get(&(field, img.triplet.with(field, ""))) else {
                continue;
            };
            for &alt in alternatives.iter().filter(|&&v| v != current) {
                let target = img.triplet.with(field, alt);
                let caption = by_triplet[&target];
                out.push(TransformationQuery {
                    query_id: query_id(&img.image_id, field, alt),
                    image_id: img.image_id.clone(),
                    field,
                    source_word: current.to_string(),
                    target_word: alt.to_string(),
                    target_caption_id: caption.caption_id.clone(),
                    weight: 0.0,
                });
            }
        }
    }
    out.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    out
}

/// Keeps a query iff `P(image, source caption) > hi` and
/// `P(image, target caption) < lo`.
pub fn oracle_filter(
    queries: &[TransformationQuery],
    images: &[ImageRecord],
    captions: &[CaptionRecord],
    oracle: &dyn Oracle,
    cfg: &BuildConfig,
) -> Result<Vec<TransformationQuery>> {
    let image_triplets: HashMap<&str, &Triplet> =
        images.iter().map(|i| (i.image_id.as_str(), &i.triplet)).collect();
    let caption_of: HashMap<&Triplet, &str> = captions
        .iter()
        .map(|c| (&c.triplet, c.caption_id.as_str()))
        .collect();
    let mut pairs = Vec::with_capacity(queries.len() * 2);
    for q in queries {
        let triplet = image_triplets
            .get(q.image_id.as_str())
            .ok_or_else(|| Error::Argument(format!("query {}: unknown image {}", q.query_id, q.image_id)))?;
        let source = caption_of.get(triplet).ok_or_else(|| {
            Error::Argument(format!("query {}: no caption for {}", q.query_id, triplet))
        })?;
        pairs.push((q.image_id.clone(), source.to_string()));
        pairs.push((q.image_id.clone(), q.target_caption_id.clone()));
    }
    let scores = oracle.score_many(&pairs)?;
    Ok(queries
        .iter()
        .zip(scores.chunks_exact(2))
        .filter(|(_, s)| s[0] > cfg.oracle_hi && s[1] < cfg.oracle_lo)
        .map(|(q, _)| q.clone())
        .collect())
}

/// Inverse-square-root reweighting over `(field, w1, w2)` groups,
/// normalized to sum to one.
pub fn compute_weights(queries: &[TransformationQuery]) -> Vec<TransformationQuery> {
    let mut sizes: HashMap<(Field, &str, &str), usize> = HashMap::new();
    for q in queries {
        *sizes
            .entry((q.field, &q.source_word, &q.target_word))
            .or_default() += 1;
    }
    let raw: Vec<f64> = queries
        .iter()
        .map(|q| 1.0 / (sizes[&(q.field, q.source_word.as_str(), q.target_word.as_str())] as f64).sqrt())
        .collect();
    let total: f64 = raw.iter().sum();
    queries
        .iter()
        .zip(raw)
        .map(|(q, r)| TransformationQuery {
            weight: r / total,
            ..q.clone()
        })
        .collect()
}

/// Seeded shuffle of images (taken in id order); the first half, rounded
/// up, becomes dev. Returns `(dev, test)` with `split` set.
pub fn split_dataset(images: &[ImageRecord], seed: u64) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    let mut shuffled: Vec<ImageRecord> = images.to_vec();
    shuffled.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = shuffled.len().div_ceil(2);
    let test = shuffled.split_off(n_dev);
    let dev = shuffled
        .into_iter()
        .map(|r| ImageRecord { split: Split::Dev, ..r })
        .collect();
    let test = test
        .into_iter()
        .map(|r| ImageRecord { split: Split::Test, ..r })
        .collect();
    (dev, test)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub entries_in: usize,
    pub after_triplet_filter: usize,
    pub after_object_filter: usize,
    pub after_rare_filter: usize,
    pub distinct_triplets: usize,
    pub queries_enumerated: usize,
    pub queries_kept: usize,
    pub oracle_filtered: bool,
}

/// Metadata of a benchmark bundle (embeddings are produced separately).
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub queries: Vec<TransformationQuery>,
    /// Every token used in any triplet slot, sorted.
    pub words: Vec<String>,
    pub stats: BuildStats,
}

/// Pipeline stage names, used for error reporting.
pub const STAGES: [&str; 7] = [
    "filter_triplets",
    "filter_objects",
    "build_queries",
    "render_caption",
    "oracle_filter",
    "compute_weights",
    "split_dataset",
];

/// Error tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn at<T>(stage: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|error| StageError { stage, error })
}

/// Images and captions that survive the filters, before any query exists.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub stats: BuildStats,
}

/// Filtering and caption rendering: the stages that do not need an oracle.
pub fn select_entries(
    entries: &[SceneGraphEntry],
    cfg: &BuildConfig,
    overrides: &HashMap<Triplet, String>,
) -> std::result::Result<Selection, StageError> {
    at("filter_triplets", cfg.validate())?;
    let mut stats = BuildStats {
        entries_in: entries.len(),
        ..Default::default()
    };
    let kept = at("filter_triplets", filter_triplets(entries, cfg))?;
    stats.after_triplet_filter = kept.len();
    let kept = filter_objects(&kept, cfg);
    stats.after_object_filter = kept.len();
    let kept = filter_rare_triplets(&kept, cfg.min_images_per_triplet);
    stats.after_rare_filter = kept.len();

    let mut seen = HashSet::new();
    let dupes: Vec<String> = kept
        .iter()
        .filter(|e| !seen.insert(e.image_id.as_str()))
        .map(|e| format!("image id {} appears more than once", e.image_id))
        .collect();
    if !dupes.is_empty() {
        return Err(StageError {
            stage: "filter_objects",
            error: Error::validation(dupes),
        });
    }

    let triplets: BTreeSet<Triplet> = kept.iter().map(|e| e.triplet.clone()).collect();
    stats.distinct_triplets = triplets.len();
    let captions = at(
        "render_caption",
        caption_records(&triplets, &cfg.caption_template, overrides),
    )?;

    let mut images: Vec<ImageRecord> = kept
        .iter()
        .map(|e| ImageRecord {
            image_id: e.image_id.clone(),
            triplet: e.triplet.clone(),
            split: Split::Dev,
            embedding_row: 0,
        })
        .collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for (i, img) in images.iter_mut().enumerate() {
        img.embedding_row = i;
    }
    Ok(Selection {
        images,
        captions,
        stats,
    })
}

/// Query enumeration, oracle filtering, weighting and the split. With
/// `oracle = None` the oracle filter is skipped.
pub fn finish_benchmark(
    selection: Selection,
    cfg: &BuildConfig,
    oracle: Option<&dyn Oracle>,
) -> std::result::Result<Benchmark, StageError> {
    let Selection {
        images,
        captions,
        mut stats,
    } = selection;
    let queries = build_queries(&images, &captions);
    stats.queries_enumerated = queries.len();
    let queries = match oracle {
        Some(o) => {
            stats.oracle_filtered = true;
            at("oracle_filter", oracle_filter(&queries, &images, &captions, o, cfg))?
        }
        None => queries,
    };
    stats.queries_kept = queries.len();
    let queries = compute_weights(&queries);

    let (dev, test) = split_dataset(&images, cfg.split_seed);
    let mut images: Vec<ImageRecord> = dev.into_iter().chain(test).collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let words: BTreeSet<String> = captions
        .iter()
        .flat_map(|c| Field::ALL.map(|f| c.triplet.get(f).to_string()))
        .collect();

    Ok(Benchmark {
        images,
        captions,
        queries,
        words: words.into_iter().collect(),
        stats,
    })
}

/// Runs the whole construction pipeline. With `oracle = None` the oracle
/// filter is skipped.
pub fn build_benchmark(
    entries: &[SceneGraphEntry],
    cfg: &BuildConfig,
    oracle: Option<&dyn Oracle>,
    overrides: &HashMap<Triplet, String>,
) -> std::result::Result<Benchmark, StageError> {
    finish_benchmark(select_entries(entries, cfg, overrides)?, cfg, oracle)
}
