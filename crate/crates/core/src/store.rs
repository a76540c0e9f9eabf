//! Embedding containers, benchmark records and the on-disk bundle layout.
//!
//! A bundle directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `images.tsv` | `image_id, subject, relation, object, split` |
//! | `captions.tsv` | `caption_id, subject, relation, object, text` |
//! | `queries.tsv` | `query_id, image_id, field, source_word, target_word, target_caption_id, weight` |
//! | `words.tsv` | `word`, row order matching `words.smat` |
//! | `{images,captions,words}.smat` + `.ids` | SMAT embedding files with id sidecars |
//!
//! SMAT layout (little-endian): magic `SMAT`, version `u16 = 1`, flags `u16`
//! (bit 0: rows are L2-normalized), rows `u32`, dim `u32`, then `rows * dim`
//! `f32` values, row-major.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_to_string, read_tsv, tsv_string};

pub const SMAT_MAGIC: [u8; 4] = *b"SMAT";
pub const SMAT_VERSION: u16 = 1;
pub const SMAT_HEADER_LEN: usize = 16;
const FLAG_NORMALIZED: u16 = 1;

/// Tolerance on row norms when a matrix claims to be L2-normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Dense row-major `f32` matrix, one embedding per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Argument(format!(
                "data length {} does not match {} rows x {} dim",
                data.len(),
                rows,
                dim
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite value at row {}, column {}",
                pos / dim.max(1),
                pos % dim.max(1)
            )));
        }
        let m = EmbeddingMatrix {
            rows,
            dim,
            data,
            normalized,
        };
        if normalized {
            for i in 0..rows {
                let norm = m.row_norm(i);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::Argument(format!(
                        "row {} has norm {} but the matrix is flagged normalized",
                        i, norm
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            rows: 0,
            dim,
            data: Vec::new(),
            normalized: false,
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], dim: usize, normalized: bool) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Argument(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    dim
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data, normalized)
    }

    /// Builds a matrix from `f64` rows, narrowing to `f32`.
    pub fn from_f64_rows<R: AsRef<[f64]>>(rows: &[R], dim: usize, normalized: bool) -> Result<Self> {
        let narrowed: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&v| v as f32).collect())
            .collect();
        Self::from_rows(&narrowed, dim, normalized)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, order: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            if i >= self.rows {
                return Err(Error::Argument(format!(
                    "row index {} out of range for {} rows",
                    i, self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(EmbeddingMatrix {
            rows: order.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        })
    }

    /// Row-wise L2 normalization; zero rows are an error.
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            let norm = self.row_norm(i);
            if norm == 0.0 {
                return Err(Error::Argument(format!("row {} is zero, cannot normalize", i)));
            }
            data.extend(self.row(i).iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Self::new(self.rows, self.dim, data, true)
    }

    /// Raw SMAT bytes (header + payload).
    pub fn to_smat_bytes(&self) -> Result<Vec<u8>> {
        let rows = u32::try_from(self.rows)
            .map_err(|_| Error::Argument(format!("{} rows exceed u32", self.rows)))?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::Argument(format!("dim {} exceeds u32", self.dim)))?;
        let mut out = Vec::with_capacity(SMAT_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&SMAT_MAGIC);
        out.extend_from_slice(&SMAT_VERSION.to_le_bytes());
        let flags = if self.normalized { FLAG_NORMALIZED } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses SMAT bytes; `path` is used only for error messages.
    pub fn from_smat_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < SMAT_HEADER_LEN {
            return Err(Error::format(
                path,
                format!(
                    "file is {} bytes, shorter than the {}-byte header",
                    bytes.len(),
                    SMAT_HEADER_LEN
                ),
            ));
        }
        if bytes[0..4] != SMAT_MAGIC {
            return Err(Error::format(
                path,
                format!("bad magic {:02X?}, expected \"SMAT\"", &bytes[0..4]),
            ));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", version)));
        }
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        if flags & !FLAG_NORMALIZED != 0 {
            return Err(Error::format(path, format!("unknown flag bits {:#06x}", flags)));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, "declared size overflows"))?;
        let actual = bytes.len() - SMAT_HEADER_LEN;
        if actual != expected {
            return Err(Error::format(
                path,
                format!(
                    "payload is {} bytes, header declares {} rows x {} dim = {} bytes",
                    actual, rows, dim, expected
                ),
            ));
        }
        let data: Vec<f32> = bytes[SMAT_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(rows, dim, data, flags & FLAG_NORMALIZED != 0)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Sidecar id file for an embedding file: `<name>.smat` -> `<name>.ids`.
pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

fn check_token(kind: &str, value: &str) -> std::result::Result<(), String> {
    if value.is_empty() {
        return Err(format!("empty {}", kind));
    }
    if value.contains(['\t', '\n', '\r']) {
        return Err(format!("{} {:?} contains a tab or newline", kind, value));
    }
    Ok(())
}

/// Writes `matrix` as SMAT to `path` and its ids to the `.ids` sidecar.
pub fn write_embeddings(matrix: &EmbeddingMatrix, ids: &[String], path: &Path) -> Result<()> {
    if ids.len() != matrix.rows() {
        return Err(Error::Argument(format!(
            "{} ids for {} rows",
            ids.len(),
            matrix.rows()
        )));
    }
    for id in ids {
        check_token("id", id).map_err(Error::Argument)?;
    }
    let mut sidecar = String::new();
    for id in ids {
        sidecar.push_str(id);
        sidecar.push('\n');
    }
    atomic_write(path, &matrix.to_smat_bytes()?)?;
    atomic_write(&ids_path(path), sidecar.as_bytes())
}

/// Reads a SMAT file and its `.ids` sidecar.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingMatrix, Vec<String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let matrix = EmbeddingMatrix::from_smat_bytes(&bytes, path)?;
    let sidecar = ids_path(path);
    let ids: Vec<String> = read_to_string(&sidecar)?
        .lines()
        .map(str::to_string)
        .collect();
    if ids.len() != matrix.rows() {
        return Err(Error::format(
            &sidecar,
            format!("{} ids for {} rows", ids.len(), matrix.rows()),
        ));
    }
    Ok((matrix, ids))
}

/// Which slot of a triplet a transformation edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Subject,
    Relation,
    Object,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Subject, Field::Relation, Field::Object];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Subject => "subject",
            Field::Relation => "relation",
            Field::Object => "object",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject" => Ok(Field::Subject),
            "relation" => Ok(Field::Relation),
            "object" => Ok(Field::Object),
            other => Err(Error::Argument(format!("unknown field {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Triplet {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }

    pub fn get(&self, field: Field) -> &str {
        match field {
            Field::Subject => &self.subject,
            Field::Relation => &self.relation,
            Field::Object => &self.object,
        }
    }

    /// Copy of `self` with `field` replaced by `value`.
    pub fn with(&self, field: Field, value: &str) -> Triplet {
        let mut t = self.clone();
        match field {
            Field::Subject => t.subject = value.to_string(),
            Field::Relation => t.relation = value.to_string(),
            Field::Object => t.object = value.to_string(),
        }
        t
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for field in Field::ALL {
            let v = self.get(field);
            check_token(field.as_str(), v)?;
            if v != v.to_lowercase() {
                return Err(format!("{} {:?} is not lowercase", field, v));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub triplet: Triplet,
    pub split: Split,
    pub embedding_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub triplet: Triplet,
    pub text: String,
    pub embedding_row: usize,
}

/// One benchmark sample: transform `image_id` by replacing `source_word`
/// with `target_word` in `field`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformationQuery {
    pub query_id: String,
    pub image_id: String,
    pub field: Field,
    pub source_word: String,
    pub target_word: String,
    pub target_caption_id: String,
    pub weight: f64,
}

/// Token-keyed embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    matrix: EmbeddingMatrix,
}

impl WordTable {
    pub fn new(words: Vec<String>, matrix: EmbeddingMatrix) -> Result<Self> {
        if words.len() != matrix.rows() {
            return Err(Error::Argument(format!(
                "{} words for {} embedding rows",
                words.len(),
                matrix.rows()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate word {:?}", w)));
            }
        }
        Ok(WordTable {
            words,
            index,
            matrix,
        })
    }

    pub fn get(&self, word: &str) -> Result<&[f32]> {
        self.index
            .get(word)
            .map(|&i| self.matrix.row(i))
            .ok_or_else(|| Error::Lookup(word.to_string()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }
}

/// A validated benchmark bundle held in memory.
///
/// Records are sorted by id and embedding matrices are re-ordered so that
/// `images()[i].embedding_row == i` (likewise for captions).
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<ImageRecord>,
    image_embeddings: EmbeddingMatrix,
    captions: Vec<CaptionRecord>,
    caption_embeddings: EmbeddingMatrix,
    words: WordTable,
    queries: Vec<TransformationQuery>,
    image_ids: Vec<String>,
    caption_ids: Vec<String>,
    image_index: HashMap<String, usize>,
    caption_index: HashMap<String, usize>,
    triplet_index: HashMap<Triplet, usize>,
}

impl Dataset {
    pub fn new(
        mut images: Vec<ImageRecord>,
        image_embeddings: EmbeddingMatrix,
        mut captions: Vec<CaptionRecord>,
        caption_embeddings: EmbeddingMatrix,
        words: WordTable,
        mut queries: Vec<TransformationQuery>,
    ) -> Result<Self> {
        let mut problems = Vec::new();

        if image_embeddings.dim() != caption_embeddings.dim() {
            problems.push(format!(
                "image embedding dim {} != caption embedding dim {}",
                image_embeddings.dim(),
                caption_embeddings.dim()
            ));
        }
        if words.dim() != caption_embeddings.dim() {
            problems.push(format!(
                "word embedding dim {} != caption embedding dim {}",
                words.dim(),
                caption_embeddings.dim()
            ));
        }

        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        captions.sort_by(|a, b| a.caption_id.cmp(&b.caption_id));
        queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));

        let mut image_index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if let Err(e) = check_token("image id", &img.image_id) {
                problems.push(e);
            }
            if image_index.insert(img.image_id.clone(), i).is_some() {
                problems.push(format!("duplicate image id {}", img.image_id));
            }
            if let Err(e) = img.triplet.validate() {
                problems.push(format!("image {}: {}", img.image_id, e));
            }
            if img.embedding_row >= image_embeddings.rows() {
                problems.push(format!(
                    "image {}: embedding row {} out of range ({} rows)",
                    img.image_id,
                    img.embedding_row,
                    image_embeddings.rows()
                ));
            }
        }

        let mut caption_index = HashMap::with_capacity(captions.len());
        let mut triplet_index = HashMap::with_capacity(captions.len());
        for (i, cap) in captions.iter().enumerate() {
            if let Err(e) = check_token("caption id", &cap.caption_id) {
                problems.push(e);
            }
            if caption_index.insert(cap.caption_id.clone(), i).is_some() {
                problems.push(format!("duplicate caption id {}", cap.caption_id));
            }
            if let Err(e) = cap.triplet.validate() {
                problems.push(format!("caption {}: {}", cap.caption_id, e));
            }
            if let Err(e) = check_token("caption text", &cap.text) {
                problems.push(format!("caption {}: {}", cap.caption_id, e));
            }
            if let Some(prev) = triplet_index.insert(cap.triplet.clone(), i) {
                problems.push(format!(
                    "captions {} and {} share triplet {}",
                    captions[prev].caption_id, cap.caption_id, cap.triplet
                ));
            }
            if cap.embedding_row >= caption_embeddings.rows() {
                problems.push(format!(
                    "caption {}: embedding row {} out of range ({} rows)",
                    cap.caption_id,
                    cap.embedding_row,
                    caption_embeddings.rows()
                ));
            }
        }

        let mut seen_queries = HashSet::with_capacity(queries.len());
        for q in &queries {
            if let Err(e) = check_token("query id", &q.query_id) {
                problems.push(e);
            }
            if !seen_queries.insert(q.query_id.as_str()) {
                problems.push(format!("duplicate query id {}", q.query_id));
            }
            if q.source_word == q.target_word {
                problems.push(format!(
                    "query {}: source and target word are both {:?}",
                    q.query_id, q.source_word
                ));
            }
            if !(q.weight.is_finite() && q.weight >= 0.0) {
                problems.push(format!("query {}: invalid weight {}", q.query_id, q.weight));
            }
            for w in [&q.source_word, &q.target_word] {
                if !words.contains(w) {
                    problems.push(format!("query {}: no word embedding for {:?}", q.query_id, w));
                }
            }
            let image = image_index.get(&q.image_id).map(|&i| &images[i]);
            let caption = caption_index.get(&q.target_caption_id).map(|&i| &captions[i]);
            match image {
                None => problems.push(format!(
                    "query {}: unknown image id {}",
                    q.query_id, q.image_id
                )),
                Some(img) if img.triplet.get(q.field) != q.source_word => problems.push(format!(
                    "query {}: image {} has {} {:?}, not {:?}",
                    q.query_id,
                    img.image_id,
                    q.field,
                    img.triplet.get(q.field),
                    q.source_word
                )),
                Some(_) => {}
            }
            match (image, caption) {
                (_, None) => problems.push(format!(
                    "query {}: unknown caption id {}",
                    q.query_id, q.target_caption_id
                )),
                (Some(img), Some(cap)) => {
                    let expected = img.triplet.with(q.field, &q.target_word);
                    if cap.triplet != expected {
                        problems.push(format!(
                            "query {}: target caption {} describes {}, expected {}",
                            q.query_id, cap.caption_id, cap.triplet, expected
                        ));
                    }
                }
                (None, Some(_)) => {}
            }
        }

        if !problems.is_empty() {
            return Err(Error::validation(problems));
        }

        let image_order: Vec<usize> = images.iter().map(|r| r.embedding_row).collect();
        let image_embeddings = image_embeddings.select_rows(&image_order)?;
        for (i, img) in images.iter_mut().enumerate() {
            img.embedding_row = i;
        }
        let caption_order: Vec<usize> = captions.iter().map(|r| r.embedding_row).collect();
        let caption_embeddings = caption_embeddings.select_rows(&caption_order)?;
        for (i, cap) in captions.iter_mut().enumerate() {
            cap.embedding_row = i;
        }

        Ok(Dataset {
            image_ids: images.iter().map(|r| r.image_id.clone()).collect(),
            caption_ids: captions.iter().map(|r| r.caption_id.clone()).collect(),
            images,
            image_embeddings,
            captions,
            caption_embeddings,
            words,
            queries,
            image_index,
            caption_index,
            triplet_index,
        })
    }

    /// Same records with new embeddings (e.g. after projecting through
    /// adaptation heads). Rows must follow the current canonical order.
    pub fn with_embeddings(
        &self,
        image_embeddings: EmbeddingMatrix,
        caption_embeddings: EmbeddingMatrix,
        word_embeddings: EmbeddingMatrix,
    ) -> Result<Self> {
        if image_embeddings.rows() != self.images.len()
            || caption_embeddings.rows() != self.captions.len()
        {
            return Err(Error::Argument(
                "replacement embeddings must keep the row counts".into(),
            ));
        }
        let words = WordTable::new(self.words.words().to_vec(), word_embeddings)?;
        Dataset::new(
            self.images.clone(),
            image_embeddings,
            self.captions.clone(),
            caption_embeddings,
            words,
            self.queries.clone(),
        )
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn captions(&self) -> &[CaptionRecord] {
        &self.captions
    }

    pub fn queries(&self) -> &[TransformationQuery] {
        &self.queries
    }

    pub fn image_embeddings(&self) -> &EmbeddingMatrix {
        &self.image_embeddings
    }

    pub fn caption_embeddings(&self) -> &EmbeddingMatrix {
        &self.caption_embeddings
    }

    pub fn words(&self) -> &WordTable {
        &self.words
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn caption_ids(&self) -> &[String] {
        &self.caption_ids
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.image_index.get(id).map(|&i| &self.images[i])
    }

    pub fn image_position(&self, id: &str) -> Option<usize> {
        self.image_index.get(id).copied()
    }

    pub fn caption(&self, id: &str) -> Option<&CaptionRecord> {
        self.caption_index.get(id).map(|&i| &self.captions[i])
    }

    pub fn caption_position(&self, id: &str) -> Option<usize> {
        self.caption_index.get(id).copied()
    }

    pub fn caption_for(&self, triplet: &Triplet) -> Option<&CaptionRecord> {
        self.triplet_index.get(triplet).map(|&i| &self.captions[i])
    }

    pub fn query(&self, id: &str) -> Option<&TransformationQuery> {
        self.queries
            .binary_search_by(|q| q.query_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.queries[i])
    }

    pub fn query_split(&self, q: &TransformationQuery) -> Option<Split> {
        self.image(&q.image_id).map(|i| i.split)
    }

    /// Queries whose source image belongs to `split` (all queries for `None`),
    /// in query-id order.
    pub fn queries_in(&self, split: Option<Split>) -> Vec<&TransformationQuery> {
        self.queries
            .iter()
            .filter(|q| split.is_none() || self.query_split(q) == split)
            .collect()
    }
}

const IMAGE_COLUMNS: [&str; 5] = ["image_id", "subject", "relation", "object", "split"];
const CAPTION_COLUMNS: [&str; 5] = ["caption_id", "subject", "relation", "object", "text"];
const QUERY_COLUMNS: [&str; 7] = [
    "query_id",
    "image_id",
    "field",
    "source_word",
    "target_word",
    "target_caption_id",
    "weight",
];
const WORD_COLUMNS: [&str; 1] = ["word"];

fn row_lookup(ids: &[String]) -> BTreeMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

pub fn read_images_tsv(path: &Path) -> Result<Vec<(String, Triplet, Split)>> {
    read_tsv(path, &IMAGE_COLUMNS)?
        .into_iter()
        .map(|r| {
            let split = r[4].parse().map_err(|e: Error| Error::format(path, e.to_string()))?;
            Ok((r[0].clone(), Triplet::new(&*r[1], &*r[2], &*r[3]), split))
        })
        .collect()
}

pub fn read_captions_tsv(path: &Path) -> Result<Vec<(String, Triplet, String)>> {
    Ok(read_tsv(path, &CAPTION_COLUMNS)?
        .into_iter()
        .map(|r| (r[0].clone(), Triplet::new(&*r[1], &*r[2], &*r[3]), r[4].clone()))
        .collect())
}

pub fn read_queries_tsv(path: &Path) -> Result<Vec<TransformationQuery>> {
    read_tsv(path, &QUERY_COLUMNS)?
        .into_iter()
        .map(|r| {
            let field = r[2].parse().map_err(|e: Error| Error::format(path, e.to_string()))?;
            let weight: f64 = r[6]
                .parse()
                .map_err(|_| Error::format(path, format!("bad weight {:?}", r[6])))?;
            Ok(TransformationQuery {
                query_id: r[0].clone(),
                image_id: r[1].clone(),
                field,
                source_word: r[3].clone(),
                target_word: r[4].clone(),
                target_caption_id: r[5].clone(),
                weight,
            })
        })
        .collect()
}

/// Loads and validates a bundle directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let image_rows = read_images_tsv(&dir.join("images.tsv"))?;
    let caption_rows = read_captions_tsv(&dir.join("captions.tsv"))?;
    let queries = read_queries_tsv(&dir.join("queries.tsv"))?;
    let words_tsv: Vec<String> = read_tsv(&dir.join("words.tsv"), &WORD_COLUMNS)?
        .into_iter()
        .map(|mut r| r.remove(0))
        .collect();

    let (image_matrix, image_ids) = read_embeddings(&dir.join("images.smat"))?;
    let (caption_matrix, caption_ids) = read_embeddings(&dir.join("captions.smat"))?;
    let (word_matrix, word_ids) = read_embeddings(&dir.join("words.smat"))?;

    let mut problems = Vec::new();
    if words_tsv != word_ids {
        problems.push("words.tsv does not match the row order of words.smat".to_string());
    }
    let image_rows_by_id = row_lookup(&image_ids);
    let caption_rows_by_id = row_lookup(&caption_ids);

    let mut images = Vec::with_capacity(image_rows.len());
    for (image_id, triplet, split) in image_rows {
        match image_rows_by_id.get(image_id.as_str()) {
            Some(&row) => images.push(ImageRecord {
                image_id,
                triplet,
                split,
                embedding_row: row,
            }),
            None => problems.push(format!("image {} has no row in images.smat", image_id)),
        }
    }
    let mut captions = Vec::with_capacity(caption_rows.len());
    for (caption_id, triplet, text) in caption_rows {
        match caption_rows_by_id.get(caption_id.as_str()) {
            Some(&row) => captions.push(CaptionRecord {
                caption_id,
                triplet,
                text,
                embedding_row: row,
            }),
            None => problems.push(format!("caption {} has no row in captions.smat", caption_id)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::validation(problems));
    }
    let words = WordTable::new(words_tsv, word_matrix)?;
    Dataset::new(
        images,
        image_matrix,
        captions,
        caption_matrix,
        words,
        queries,
    )
}

pub fn images_tsv(images: &[ImageRecord]) -> String {
    tsv_string(
        &IMAGE_COLUMNS,
        images.iter().map(|r| {
            vec![
                r.image_id.clone(),
                r.triplet.subject.clone(),
                r.triplet.relation.clone(),
                r.triplet.object.clone(),
                r.split.to_string(),
            ]
        }),
    )
}

pub fn captions_tsv(captions: &[CaptionRecord]) -> String {
    tsv_string(
        &CAPTION_COLUMNS,
        captions.iter().map(|r| {
            vec![
                r.caption_id.clone(),
                r.triplet.subject.clone(),
                r.triplet.relation.clone(),
                r.triplet.object.clone(),
                r.text.clone(),
            ]
        }),
    )
}

pub fn queries_tsv(queries: &[TransformationQuery]) -> String {
    tsv_string(
        &QUERY_COLUMNS,
        queries.iter().map(|q| {
            vec![
                q.query_id.clone(),
                q.image_id.clone(),
                q.field.to_string(),
                q.source_word.clone(),
                q.target_word.clone(),
                q.target_caption_id.clone(),
                format!("{}", q.weight),
            ]
        }),
    )
}

pub fn words_tsv(words: &[String]) -> String {
    tsv_string(&WORD_COLUMNS, words.iter().map(|w| vec![w.clone()]))
}

/// Writes the metadata TSVs of a bundle (no embeddings).
pub fn write_metadata(
    dir: &Path,
    images: &[ImageRecord],
    captions: &[CaptionRecord],
    queries: &[TransformationQuery],
    words: &[String],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write(&dir.join("images.tsv"), images_tsv(images).as_bytes())?;
    atomic_write(&dir.join("captions.tsv"), captions_tsv(captions).as_bytes())?;
    atomic_write(&dir.join("queries.tsv"), queries_tsv(queries).as_bytes())?;
    atomic_write(&dir.join("words.tsv"), words_tsv(words).as_bytes())
}

/// Writes a complete bundle that [`load_dataset`] reads back unchanged.
pub fn write_bundle(dataset: &Dataset, dir: &Path) -> Result<()> {
    write_metadata(
        dir,
        dataset.images(),
        dataset.captions(),
        dataset.queries(),
        dataset.words().words(),
    )?;
    write_embeddings(dataset.image_embeddings(), dataset.image_ids(), &dir.join("images.smat"))?;
    write_embeddings(
        dataset.caption_embeddings(),
        dataset.caption_ids(),
        &dir.join("captions.smat"),
    )?;
    write_embeddings(
        dataset.words().matrix(),
        dataset.words().words(),
        &dir.join("words.smat"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn two_by_three_is_forty_bytes_and_round_trips() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]], 3, true).unwrap();
        let dir = tmp();
        let path = dir.path().join("m.smat");
        let ids = vec!["a".to_string(), "b".to_string()];
        write_embeddings(&m, &ids, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 40);
        let (back, back_ids) = read_embeddings(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_ids, ids);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &[0x53, 0x4D, 0x41, 0x54]);
        assert_eq!(&bytes[4..8], &[1, 0, 1, 0]);
    }

    #[test]
    fn empty_matrix_keeps_dim() {
        let dir = tmp();
        let path = dir.path().join("e.smat");
        write_embeddings(&EmbeddingMatrix::empty(7), &[], &path).unwrap();
        let (m, ids) = read_embeddings(&path).unwrap();
        assert_eq!((m.rows(), m.dim()), (0, 7));
        assert!(ids.is_empty());
    }

    #[test]
    fn nan_is_rejected() {
        let err = EmbeddingMatrix::new(1, 2, vec![f32::NAN, 0.0], false).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn normalized_flag_is_checked() {
        assert!(EmbeddingMatrix::new(1, 2, vec![3.0, 4.0], true).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![0.0, 0.0], true).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![0.6, 0.8], true).is_ok());
    }

    #[test]
    fn id_count_mismatch_is_argument_error() {
        let dir = tmp();
        let m = EmbeddingMatrix::new(1, 1, vec![1.0], false).unwrap();
        let err = write_embeddings(&m, &[], &dir.path().join("x.smat")).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let mut bytes = m.to_smat_bytes().unwrap();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            EmbeddingMatrix::from_smat_bytes(&bad, p),
            Err(Error::Format { .. })
        ));
        bytes.truncate(bytes.len() - 4);
        match EmbeddingMatrix::from_smat_bytes(&bytes, p) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("12 bytes"), "{}", message);
                assert!(message.contains("16 bytes"), "{}", message);
            }
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let m = EmbeddingMatrix::new(1, 1, vec![1.0], false).unwrap();
        let mut bytes = m.to_smat_bytes().unwrap();
        bytes[4] = 2;
        assert!(EmbeddingMatrix::from_smat_bytes(&bytes, Path::new("v")).is_err());
    }

    #[test]
    fn field_substitution() {
        let t = Triplet::new("man", "riding", "horse");
        assert_eq!(t.with(Field::Object, "bike"), Triplet::new("man", "riding", "bike"));
        assert_eq!(t.get(Field::Relation), "riding");
        assert!(Triplet::new("Man", "riding", "horse").validate().is_err());
        assert!(Triplet::new("man", "", "horse").validate().is_err());
    }
}
