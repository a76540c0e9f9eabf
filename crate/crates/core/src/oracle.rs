//! Image/caption match probabilities.
//!
//! An oracle answers `P(image, caption)`: the probability that the caption
//! describes the image. Three backends share the [`Oracle`] trait:
//! a TSV-backed table, a rule-based mock that compares annotated triplets,
//! and an HTTP client for a remote scoring service.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_tsv, tsv_string};
use crate::store::{CaptionRecord, Dataset, ImageRecord, Triplet};

/// Success threshold used by the benchmark score.
pub const SUCCESS_THRESHOLD: f64 = 0.5;

/// Strict threshold test: `probability > threshold`.
pub fn decide(probability: f64, threshold: f64) -> bool {
    probability > threshold
}

pub trait Oracle: Send + Sync {
    fn score(&self, image_id: &str, caption_id: &str) -> Result<f64>;

    /// Scores every pair. Coverage gaps are collected across all pairs and
    /// reported together; other errors abort immediately.
    fn score_many(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        let mut missing = Vec::new();
        for (image, caption) in pairs {
            match self.score(image, caption) {
                Ok(p) => out.push(p),
                Err(Error::Coverage { missing: m, .. }) if !m.is_empty() => missing.extend(m),
                Err(e) => return Err(e),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            missing.sort();
            missing.dedup();
            Err(Error::Coverage {
                context: format!("oracle has no score for {} pair(s)", missing.len()),
                missing,
            })
        }
    }
}

fn missing_pair(image_id: &str, caption_id: &str) -> Error {
    Error::Coverage {
        context: format!("oracle has no score for ({}, {})", image_id, caption_id),
        missing: vec![(image_id.to_string(), caption_id.to_string())],
    }
}

/// Probabilities keyed by `(image_id, caption_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleTable {
    scores: BTreeMap<(String, String), f64>,
}

const ORACLE_COLUMNS: [&str; 3] = ["image_id", "caption_id", "probability"];

fn check_probability(p: f64) -> std::result::Result<(), String> {
    if p.is_finite() && (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(format!("probability {} outside [0, 1]", p))
    }
}

impl OracleTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: &str, caption_id: &str, probability: f64) -> Result<()> {
        check_probability(probability).map_err(Error::Argument)?;
        self.scores
            .insert((image_id.to_string(), caption_id.to_string()), probability);
        Ok(())
    }

    pub fn get(&self, image_id: &str, caption_id: &str) -> Option<f64> {
        self.scores
            .get(&(image_id.to_string(), caption_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut problems = Vec::new();
        let mut scores = BTreeMap::new();
        for row in read_tsv(path, &ORACLE_COLUMNS)? {
            let p: f64 = match row[2].parse() {
                Ok(p) => p,
                Err(_) => {
                    problems.push(format!("({}, {}): bad probability {:?}", row[0], row[1], row[2]));
                    continue;
                }
            };
            if let Err(e) = check_probability(p) {
                problems.push(format!("({}, {}): {}", row[0], row[1], e));
            }
            let key = (row[0].clone(), row[1].clone());
            if scores.insert(key, p).is_some() {
                problems.push(format!("duplicate pair ({}, {})", row[0], row[1]));
            }
        }
        if problems.is_empty() {
            Ok(OracleTable { scores })
        } else {
            Err(Error::validation(
                problems
                    .into_iter()
                    .map(|p| format!("{}: {}", path.display(), p))
                    .collect(),
            ))
        }
    }

    pub fn to_tsv(&self) -> String {
        tsv_string(
            &ORACLE_COLUMNS,
            self.scores
                .iter()
                .map(|((i, c), p)| vec![i.clone(), c.clone(), format!("{}", p)]),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_tsv().as_bytes())
    }
}

impl Oracle for OracleTable {
    fn score(&self, image_id: &str, caption_id: &str) -> Result<f64> {
        self.get(image_id, caption_id)
            .ok_or_else(|| missing_pair(image_id, caption_id))
    }
}

/// Returns 1.0 when the image's annotated triplet equals the caption's
/// triplet, 0.0 otherwise.
#[derive(Debug, Clone, Default)]
pub struct MockOracle {
    images: HashMap<String, Triplet>,
    captions: HashMap<String, Triplet>,
}

impl MockOracle {
    pub fn new(images: HashMap<String, Triplet>, captions: HashMap<String, Triplet>) -> Self {
        MockOracle { images, captions }
    }

    pub fn from_records(images: &[ImageRecord], captions: &[CaptionRecord]) -> Self {
        MockOracle {
            images: images
                .iter()
                .map(|r| (r.image_id.clone(), r.triplet.clone()))
                .collect(),
            captions: captions
                .iter()
                .map(|r| (r.caption_id.clone(), r.triplet.clone()))
                .collect(),
        }
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self::from_records(dataset.images(), dataset.captions())
    }
}

impl Oracle for MockOracle {
    fn score(&self, image_id: &str, caption_id: &str) -> Result<f64> {
        match (self.images.get(image_id), self.captions.get(caption_id)) {
            (Some(a), Some(b)) => Ok(if a == b { 1.0 } else { 0.0 }),
            _ => Err(missing_pair(image_id, caption_id)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Service base URL; requests go to `<url>/score`.
    pub url: String,
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        RemoteConfig {
            url: url.into(),
            attempts: 3,
            initial_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
            max_in_flight: 8,
        }
    }

    fn endpoint(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/score") {
            base.to_string()
        } else {
            format!("{}/score", base)
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    image_id: &'a str,
    caption: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    probability: f64,
}

/// HTTP client for a remote scoring service, with a persistent local cache.
///
/// Protocol: `POST /score` with `{"image_id": ..., "caption": ...}`, answered
/// by `{"probability": p}`. Transport failures and 5xx responses are retried
/// with exponential backoff; any other non-2xx status fails at once.
pub struct RemoteOracle {
    config: RemoteConfig,
    agent: ureq::Agent,
    captions: HashMap<String, String>,
    cache: Mutex<OracleTable>,
    cache_path: Option<PathBuf>,
}

impl RemoteOracle {
    /// `captions` maps caption ids to the text sent to the service. When
    /// `cache_path` exists its scores are reused; new scores are written back.
    pub fn new(
        config: RemoteConfig,
        captions: HashMap<String, String>,
        cache_path: Option<PathBuf>,
    ) -> Result<Self> {
        let cache = match &cache_path {
            Some(p) if p.exists() => OracleTable::load(p)?,
            _ => OracleTable::new(),
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteOracle {
            config,
            agent,
            captions,
            cache: Mutex::new(cache),
            cache_path,
        })
    }

    pub fn cached(&self) -> OracleTable {
        self.cache.lock().unwrap().clone()
    }

    fn flush(&self) -> Result<()> {
        if let Some(path) = &self.cache_path {
            let cache = self.cache.lock().unwrap();
            cache.save(path)?;
        }
        Ok(())
    }

    fn request_once(&self, image_id: &str, caption: &str) -> std::result::Result<f64, (bool, String)> {
        let body = ScoreRequest { image_id, caption };
        let mut resp = self
            .agent
            .post(&self.config.endpoint())
            .send_json(&body)
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err((status >= 500, format!("HTTP status {}", status)));
        }
        let parsed: ScoreResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| (false, format!("bad response body: {}", e)))?;
        check_probability(parsed.probability).map_err(|e| (false, e))?;
        Ok(parsed.probability)
    }

    fn fetch(&self, image_id: &str, caption_id: &str) -> Result<f64> {
        let text = self
            .captions
            .get(caption_id)
            .ok_or_else(|| missing_pair(image_id, caption_id))?;
        let mut backoff = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 0..self.config.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.request_once(image_id, text) {
                Ok(p) => return Ok(p),
                Err((retryable, msg)) => {
                    last = msg;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(Error::Transport(format!(
            "({}, {}) via {}: {}",
            image_id,
            caption_id,
            self.config.endpoint(),
            last
        )))
    }
}

impl Oracle for RemoteOracle {
    fn score(&self, image_id: &str, caption_id: &str) -> Result<f64> {
        if let Some(p) = self.cache.lock().unwrap().get(image_id, caption_id) {
            return Ok(p);
        }
        let p = self.fetch(image_id, caption_id)?;
        self.cache.lock().unwrap().insert(image_id, caption_id, p)?;
        self.flush()?;
        Ok(p)
    }

    fn score_many(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        let mut todo: Vec<&(String, String)> = {
            let cache = self.cache.lock().unwrap();
            pairs.iter().filter(|(i, c)| cache.get(i, c).is_none()).collect()
        };
        todo.sort();
        todo.dedup();

        let missing: Vec<(String, String)> = todo
            .iter()
            .filter(|(_, c)| !self.captions.contains_key(c))
            .map(|p| (*p).clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Coverage {
                context: format!("no caption text for {} pair(s)", missing.len()),
                missing,
            });
        }

        let results: Vec<Mutex<Option<Result<f64>>>> = todo.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.max(1).min(todo.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= todo.len() {
                        break;
                    }
                    let (img, cap) = todo[i];
                    *results[i].lock().unwrap() = Some(self.fetch(img, cap));
                });
            }
        });

        let mut first_error = None;
        {
            let mut cache = self.cache.lock().unwrap();
            for (pair, slot) in todo.iter().zip(results) {
                match slot.into_inner().unwrap().expect("every slot is filled") {
                    Ok(p) => cache.insert(&pair.0, &pair.1, p)?,
                    Err(e) => {
                        if first_error.is_none() {
                            first_error = Some(e);
                        }
                    }
                }
            }
        }
        self.flush()?;
        if let Some(e) = first_error {
            return Err(e);
        }
        let cache = self.cache.lock().unwrap();
        Ok(pairs
            .iter()
            .map(|(i, c)| cache.get(i, c).expect("scored above"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decide_is_strict() {
        assert!(decide(0.51, SUCCESS_THRESHOLD));
        assert!(!decide(0.50, SUCCESS_THRESHOLD));
        assert!(!decide(0.0, SUCCESS_THRESHOLD));
    }

    #[test]
    fn table_lookup_and_miss() {
        let mut t = OracleTable::new();
        t.insert("img1", "cap3", 0.93).unwrap();
        assert_eq!(t.score("img1", "cap3").unwrap(), 0.93);
        assert_eq!(t.score("img1", "cap3").unwrap(), 0.93);
        match t.score("img2", "cap3") {
            Err(Error::Coverage { missing, .. }) => {
                assert_eq!(missing, vec![("img2".to_string(), "cap3".to_string())])
            }
            other => panic!("{:?}", other),
        }
        assert!(t.insert("a", "b", 1.2).is_err());
    }

    #[test]
    fn table_rejects_out_of_range_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.tsv");
        std::fs::write(&path, "image_id\tcaption_id\tprobability\nimg1\tc1\t1.2\n").unwrap();
        assert!(matches!(OracleTable::load(&path), Err(Error::Validation { .. })));
        std::fs::write(&path, "image_id\tcaption_id\tprobability\nimg1\tc1\t0.25\n").unwrap();
        let t = OracleTable::load(&path).unwrap();
        assert_eq!(t.get("img1", "c1"), Some(0.25));
        t.save(&path).unwrap();
        assert_eq!(OracleTable::load(&path).unwrap(), t);
    }

    #[test]
    fn score_many_collects_all_gaps() {
        let mut t = OracleTable::new();
        t.insert("a", "x", 0.7).unwrap();
        let pairs = vec![
            ("a".to_string(), "x".to_string()),
            ("b".to_string(), "x".to_string()),
            ("c".to_string(), "y".to_string()),
        ];
        match t.score_many(&pairs) {
            Err(Error::Coverage { missing, .. }) => assert_eq!(missing.len(), 2),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn mock_compares_triplets() {
        let t = Triplet::new("man", "riding", "horse");
        let u = Triplet::new("man", "riding", "bike");
        let m = MockOracle::new(
            [("i".to_string(), t.clone())].into(),
            [("c1".to_string(), t), ("c2".to_string(), u)].into(),
        );
        assert_eq!(m.score("i", "c1").unwrap(), 1.0);
        assert_eq!(m.score("i", "c2").unwrap(), 0.0);
        assert!(m.score("j", "c1").is_err());
    }

    #[test]
    fn endpoint_appends_score() {
        assert_eq!(RemoteConfig::new("http://h:1").endpoint(), "http://h:1/score");
        assert_eq!(RemoteConfig::new("http://h:1/").endpoint(), "http://h:1/score");
        assert_eq!(RemoteConfig::new("http://h:1/score").endpoint(), "http://h:1/score");
    }
}
