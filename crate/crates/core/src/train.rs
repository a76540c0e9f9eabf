//! Adaptation heads trained with a symmetric InfoNCE objective.
//!
//! Frozen image and text features are projected by small heads (one affine
//! layer, or four with ReLU in between), L2-normalized, and aligned with
//!
//! ```text
//! C(I, T) = -1/n * sum_i log( exp(I_i . T_i / tau) / sum_j exp(I_i . T_j / tau) )
//! L       = C(I, T) / 2 + C(T, I) / 2
//! ```
//!
//! at a fixed temperature `tau`. Gradients are analytic; [`grad_check`]
//! compares them against central differences.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::store::{EmbeddingMatrix, NORM_TOLERANCE};

pub const HEAD_MAGIC: [u8; 4] = *b"SMHD";
pub const HEAD_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Mlp4,
}

impl HeadKind {
    fn code(self) -> u8 {
        match self {
            HeadKind::Linear => 0,
            HeadKind::Mlp4 => 1,
        }
    }

    fn layer_count(self) -> usize {
        match self {
            HeadKind::Linear => 1,
            HeadKind::Mlp4 => 4,
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "mlp4" => Ok(HeadKind::Mlp4),
            other => Err(Error::Argument(format!("unknown head kind {:?}", other))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::Mlp4 => "mlp4",
        })
    }
}

/// One affine map `y = x W^T + b`; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn uniform(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Layer {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Layer {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationHead {
    kind: HeadKind,
    layers: Vec<Layer>,
}

impl AdaptationHead {
    pub fn new(kind: HeadKind, layers: Vec<Layer>) -> Result<Self> {
        let head = AdaptationHead { kind, layers };
        head.validate()?;
        Ok(head)
    }

    /// Seeded uniform fan-in initialization, zero biases.
    pub fn init(kind: HeadKind, input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let dims: Vec<usize> = match kind {
            HeadKind::Linear => vec![input, output],
            HeadKind::Mlp4 => vec![input, hidden, hidden, hidden, output],
        };
        AdaptationHead {
            kind,
            layers: dims.windows(2).map(|w| Layer::uniform(w[0], w[1], rng)).collect(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        AdaptationHead {
            kind: HeadKind::Linear,
            layers: vec![Layer {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
        }
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.kind.layer_count() {
            return Err(Error::Argument(format!(
                "{} head needs {} layers, has {}",
                self.kind,
                self.kind.layer_count(),
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::Argument(format!("layer {}: bias length mismatch", i)));
            }
            if i > 0 && self.layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::Argument(format!("layer {}: input dim does not chain", i)));
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Argument(format!("layer {}: non-finite parameter", i)));
            }
        }
        Ok(())
    }

    /// Forward pass keeping pre-activations for backprop.
    /// Returns `(inputs to each layer, output)`.
    fn forward_cached(&self, x: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            inputs.push(a);
            a = if i < last { z.mapv(|v| v.max(0.0)) } else { z };
        }
        (inputs, a)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).1
    }

    /// Parameter gradients given the cached layer inputs and `d out`.
    fn backward(&self, inputs: &[Array2<f64>], d_out: Array2<f64>) -> Vec<Layer> {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut dz = d_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grads.push(Layer {
                weight: dz.t().dot(&inputs[i]),
                bias: dz.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut da = dz.dot(&layer.weight);
                // inputs[i] = relu(z_{i-1}), so it is zero exactly where relu clipped.
                Zip::from(&mut da).and(&inputs[i]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                dz = da;
            }
        }
        grads.reverse();
        grads
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(u8::try_from(self.layers.len()).map_err(|_| Error::Argument("too many layers".into()))?);
        for l in &self.layers {
            let rows = u32::try_from(l.weight.nrows()).map_err(|_| Error::Argument("layer too large".into()))?;
            let cols = u32::try_from(l.weight.ncols()).map_err(|_| Error::Argument("layer too large".into()))?;
            out.extend_from_slice(&rows.to_le_bytes());
            out.extend_from_slice(&cols.to_le_bytes());
            for v in l.weight.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in l.bias.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 8 || bytes[..4] != HEAD_MAGIC {
            return Err(bad("not a SMHD head checkpoint".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != HEAD_VERSION {
            return Err(bad(format!("unsupported version {}", version)));
        }
        let kind = match bytes[6] {
            0 => HeadKind::Linear,
            1 => HeadKind::Mlp4,
            k => return Err(bad(format!("unknown head kind {}", k))),
        };
        let count = bytes[7] as usize;
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| bad(format!("truncated at byte {}, need {} more", pos, n)))?;
            pos += n;
            Ok(s)
        };
        let floats = |b: &[u8]| -> Vec<f64> {
            b.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect()
        };
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let dims = take(8)?;
            let rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
            let w = floats(take(rows * cols * 4)?);
            let b = floats(take(rows * 4)?);
            layers.push(Layer {
                weight: Array2::from_shape_vec((rows, cols), w).expect("length checked"),
                bias: Array1::from(b),
            });
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        AdaptationHead::new(kind, layers).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn to_array(m: &EmbeddingMatrix) -> Array2<f64> {
    Array2::from_shape_fn((m.rows(), m.dim()), |(i, j)| f64::from(m.row(i)[j]))
}

/// Projects every row through `head` and L2-normalizes the result.
pub fn apply_head(head: &AdaptationHead, features: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if features.dim() != head.input_dim() {
        return Err(Error::Argument(format!(
            "features have dim {}, head expects {}",
            features.dim(),
            head.input_dim()
        )));
    }
    let out = head.forward(&to_array(features));
    let mut rows = Vec::with_capacity(out.nrows());
    for (i, row) in out.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Argument(format!("head output row {} cannot be normalized", i)));
        }
        rows.push(row.iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    if rows.is_empty() {
        return Ok(EmbeddingMatrix::empty(head.output_dim()));
    }
    EmbeddingMatrix::from_f64_rows(&rows, head.output_dim(), true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Negative log-likelihood of the matching pair (standard InfoNCE).
    InfoNce,
    /// Mean softmax probability of the matching pair, without the log.
    PaperLiteral,
}

impl FromStr for LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" | "info_nce" => Ok(LossForm::InfoNce),
            "paper_literal" | "paper-literal" => Ok(LossForm::PaperLiteral),
            other => Err(Error::Argument(format!("unknown loss {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_image: Array2<f64>,
    pub d_text: Array2<f64>,
}

fn check_batch(images: &ArrayView2<f64>, texts: &ArrayView2<f64>, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {}", tau)));
    }
    if images.dim() != texts.dim() {
        return Err(Error::Argument(format!(
            "batch shapes differ: {:?} vs {:?}",
            images.dim(),
            texts.dim()
        )));
    }
    if images.nrows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    Ok(())
}

fn check_normalized(m: &ArrayView2<f64>, name: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Argument(format!(
                "{} row {} has norm {}, expected unit norm",
                name, i, n
            )));
        }
    }
    Ok(())
}

/// Row-wise softmax with max subtraction. Returns `(probabilities, logsumexp)`.
fn softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut p = logits.clone();
    let mut lse = Array1::zeros(logits.nrows());
    for (mut row, l) in p.rows_mut().into_iter().zip(lse.iter_mut()) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        *l = max + sum.ln();
    }
    (p, lse)
}

/// Loss and gradients with respect to already-normalized embeddings.
pub fn contrastive_grad(
    images: ArrayView2<f64>,
    texts: ArrayView2<f64>,
    tau: f64,
    form: LossForm,
) -> Result<LossGrad> {
    check_batch(&images, &texts, tau)?;
    check_normalized(&images, "image")?;
    check_normalized(&texts, "text")?;
    Ok(unchecked_grad(images, texts, tau, form))
}

fn unchecked_grad(images: ArrayView2<f64>, texts: ArrayView2<f64>, tau: f64, form: LossForm) -> LossGrad {
    let n = images.nrows();
    let nf = n as f64;
    let logits = images.dot(&texts.t()) / tau;
    let (p_row, lse_row) = softmax_rows(&logits);
    let logits_t = logits.t().to_owned();
    let (p_col_t, lse_col) = softmax_rows(&logits_t);
    let p_col = p_col_t.t().to_owned();

    let mut g = Array2::<f64>::zeros((n, n));
    let loss = match form {
        LossForm::InfoNce => {
            let c_it: f64 = (0..n).map(|i| lse_row[i] - logits[[i, i]]).sum::<f64>() / nf;
            let c_ti: f64 = (0..n).map(|j| lse_col[j] - logits[[j, j]]).sum::<f64>() / nf;
            Zip::indexed(&mut g).for_each(|(i, j), v| {
                let eye = if i == j { 1.0 } else { 0.0 };
                *v = ((p_row[[i, j]] - eye) + (p_col[[i, j]] - eye)) / (2.0 * nf);
            });
            0.5 * c_it + 0.5 * c_ti
        }
        LossForm::PaperLiteral => {
            let c_it: f64 = (0..n).map(|i| p_row[[i, i]]).sum::<f64>() / nf;
            let c_ti: f64 = (0..n).map(|j| p_col[[j, j]]).sum::<f64>() / nf;
            Zip::indexed(&mut g).for_each(|(i, j), v| {
                let eye = if i == j { 1.0 } else { 0.0 };
                let row = p_row[[i, i]] * (eye - p_row[[i, j]]);
                let col = p_col[[j, j]] * (eye - p_col[[i, j]]);
                *v = (row + col) / (2.0 * nf);
            });
            0.5 * c_it + 0.5 * c_ti
        }
    };
    LossGrad {
        loss,
        d_image: g.dot(&texts) / tau,
        d_text: g.t().dot(&images) / tau,
    }
}

/// Symmetric InfoNCE on unit-norm rows.
pub fn infonce_loss(images: ArrayView2<f64>, texts: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(contrastive_grad(images, texts, tau, LossForm::InfoNce)?.loss)
}

/// Gradients of [`infonce_loss`] with respect to the unit-norm inputs.
pub fn infonce_grad(images: ArrayView2<f64>, texts: ArrayView2<f64>, tau: f64) -> Result<LossGrad> {
    contrastive_grad(images, texts, tau, LossForm::InfoNce)
}

fn normalize_rows(m: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Argument(format!("row {} cannot be normalized", i)));
    }
    let mut out = m.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    Ok((out, norms))
}

/// Pulls a gradient w.r.t. `y = x / |x|` back to `x`.
fn through_normalization(g: &Array2<f64>, y: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut row, y), &n) in out.rows_mut().into_iter().zip(y.rows()).zip(norms.iter()) {
        let gy = row.dot(&y);
        Zip::from(&mut row).and(&y).for_each(|r, &yv| *r = (*r - gy * yv) / n);
    }
    out
}

/// Loss and gradients for raw (unnormalized) embeddings, including the
/// Jacobian of the row normalization.
pub fn normalized_loss_grad(
    raw_images: ArrayView2<f64>,
    raw_texts: ArrayView2<f64>,
    tau: f64,
    form: LossForm,
) -> Result<LossGrad> {
    check_batch(&raw_images, &raw_texts, tau)?;
    let (yi, ni) = normalize_rows(&raw_images)?;
    let (yt, nt) = normalize_rows(&raw_texts)?;
    let lg = unchecked_grad(yi.view(), yt.view(), tau, form);
    Ok(LossGrad {
        loss: lg.loss,
        d_image: through_normalization(&lg.d_image, &yi, &ni),
        d_text: through_normalization(&lg.d_text, &yt, &nt),
    })
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest elementwise relative error between `analytic` and central
/// differences of `f` at `params`.
pub fn grad_check<F: Fn(&[f64]) -> f64>(f: F, params: &[f64], analytic: &[f64], eps: f64) -> f64 {
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    worst
}

/// Like [`grad_check`], but `delta(i, h)` returns `L(p + h e_i) - L(p)`
/// directly. Lets callers avoid subtracting two nearly equal losses.
pub fn grad_check_deltas<D: Fn(usize, f64) -> f64>(delta: D, analytic: &[f64], eps: f64) -> f64 {
    assert!(eps > 0.0, "eps must be positive");
    analytic
        .iter()
        .enumerate()
        .map(|(i, &a)| relative_error(a, (delta(i, eps) - delta(i, -eps)) / (2.0 * eps)))
        .fold(0.0, f64::max)
}

/// Loss changes of the symmetric InfoNCE under single-coordinate moves of
/// the raw rows. Only the logits in the moved row (or column) change, so
/// each change is computed from the base softmax with `expm1` / `ln_1p`
/// and stays accurate when it is tiny.
pub struct LossProbe {
    raw_images: Array2<f64>,
    raw_texts: Array2<f64>,
    images: Array2<f64>,
    texts: Array2<f64>,
    p_row: Array2<f64>,
    p_col: Array2<f64>,
    tau: f64,
}

impl LossProbe {
    pub fn new(raw_images: ArrayView2<f64>, raw_texts: ArrayView2<f64>, tau: f64) -> Result<Self> {
        check_batch(&raw_images, &raw_texts, tau)?;
        let (images, _) = normalize_rows(&raw_images)?;
        let (texts, _) = normalize_rows(&raw_texts)?;
        let logits = images.dot(&texts.t()) / tau;
        let (p_row, _) = softmax_rows(&logits);
        let (p_col_t, _) = softmax_rows(&logits.t().to_owned());
        Ok(LossProbe {
            raw_images: raw_images.to_owned(),
            raw_texts: raw_texts.to_owned(),
            images,
            texts,
            p_row,
            p_col: p_col_t.t().to_owned(),
            tau,
        })
    }

    /// `normalize(x + h e_k) - normalize(x)` without cancellation.
    fn unit_shift(x: ndarray::ArrayView1<f64>, k: usize, h: f64) -> Array1<f64> {
        let sq = x.dot(&x);
        let r = sq.sqrt();
        let r2 = (sq + 2.0 * h * x[k] + h * h).sqrt();
        let dr = (2.0 * h * x[k] + h * h) / (r2 + r);
        let mut out = x.mapv(|v| -v * dr);
        out[k] += h * r;
        out / (r * r2)
    }

    /// Loss change when the raw image row `row` (or text row, if
    /// `image_side` is false) moves by `h` along coordinate `k`.
    pub fn delta(&self, image_side: bool, row: usize, k: usize, h: f64) -> f64 {
        let n = self.images.nrows();
        let (raw, other) = if image_side {
            (&self.raw_images, &self.texts)
        } else {
            (&self.raw_texts, &self.images)
        };
        let shift = Self::unit_shift(raw.row(row), k, h);
        let ds: Array1<f64> = other.dot(&shift) / self.tau;
        // The moved row of S for an image, the moved column for a text.
        let (own_p, cross_p) = if image_side {
            (self.p_row.row(row), self.p_col.row(row))
        } else {
            (self.p_col.column(row), self.p_row.column(row))
        };
        let own = own_p
            .iter()
            .zip(ds.iter())
            .map(|(p, d)| p * d.exp_m1())
            .sum::<f64>()
            .ln_1p();
        let cross: f64 = cross_p
            .iter()
            .zip(ds.iter())
            .map(|(p, d)| (p * d.exp_m1()).ln_1p())
            .sum();
        (own + cross - 2.0 * ds[row]) / (2.0 * n as f64)
    }
}

/// Random raw batch (`n x d`, standard normal entries) for gradient checks.
pub fn random_batch(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

/// Gradient check of the contrastive loss (through the normalization) on
/// one random batch. Returns the max relative error.
pub fn check_contrastive_batch(n: usize, d: usize, tau: f64, eps: f64, form: LossForm, rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = random_batch(n, d, rng);
    let b = random_batch(n, d, rng);
    let lg = normalized_loss_grad(a.view(), b.view(), tau, form)?;
    let analytic: Vec<f64> = lg.d_image.iter().chain(lg.d_text.iter()).copied().collect();
    let half = n * d;
    match form {
        LossForm::InfoNce => {
            let probe = LossProbe::new(a.view(), b.view(), tau)?;
            Ok(grad_check_deltas(
                |i, h| {
                    let side = i < half;
                    let j = i % half;
                    probe.delta(side, j / d, j % d, h)
                },
                &analytic,
                eps,
            ))
        }
        LossForm::PaperLiteral => {
            let params: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            let f = |p: &[f64]| {
                let ai = ArrayView2::from_shape((n, d), &p[..half]).unwrap();
                let bi = ArrayView2::from_shape((n, d), &p[half..]).unwrap();
                normalized_loss_grad(ai, bi, tau, form).map(|g| g.loss).unwrap_or(f64::NAN)
            };
            Ok(grad_check(f, &params, &analytic, eps))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Argument(format!("unknown optimizer {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub head_kind: HeadKind,
    pub output_dim: usize,
    /// Hidden width of `mlp4` heads; defaults to the input dim.
    pub hidden_dim: Option<usize>,
    pub loss: LossForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.1,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 256,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            head_kind: HeadKind::Linear,
            output_dim: 512,
            hidden_dim: None,
            loss: LossForm::InfoNce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.output_dim == 0 {
            return Err(Error::Config("output dim must be positive".into()));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(head: &AdaptationHead) -> Self {
        Adam {
            m: head.layers.iter().map(Layer::zeros_like).collect(),
            v: head.layers.iter().map(Layer::zeros_like).collect(),
            step: 0,
        }
    }
}

fn sgd_step(head: &mut AdaptationHead, grads: &[Layer], lr: f64) {
    for (l, g) in head.layers.iter_mut().zip(grads) {
        l.weight.scaled_add(-lr, &g.weight);
        l.bias.scaled_add(-lr, &g.bias);
    }
}

fn adam_step(head: &mut AdaptationHead, grads: &[Layer], state: &mut Adam, lr: f64) {
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step);
    let c2 = 1.0 - BETA2.powi(state.step);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    };
    for (((l, g), m), v) in head
        .layers
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        Zip::from(&mut l.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Zip::from(&mut l.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub image_head: AdaptationHead,
    pub text_head: AdaptationHead,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
}

/// Loss history as `epoch,mean_loss` CSV (epochs counted from 1).
pub fn history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}

fn gather(m: &Array2<f64>, rows: impl Iterator<Item = usize>) -> Array2<f64> {
    let idx: Vec<usize> = rows.collect();
    m.select(Axis(0), &idx)
}

/// Mini-batch training of an image head and a text head on paired
/// features `(image row, text row)`. Batches of one pair are skipped.
pub fn train_heads(
    image_features: &EmbeddingMatrix,
    text_features: &EmbeddingMatrix,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for &(i, t) in pairs {
        if i >= image_features.rows() || t >= text_features.rows() {
            return Err(Error::Argument(format!("pair ({}, {}) out of range", i, t)));
        }
    }
    let xi = to_array(image_features);
    let xt = to_array(text_features);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden_i = cfg.hidden_dim.unwrap_or(image_features.dim());
    let hidden_t = cfg.hidden_dim.unwrap_or(text_features.dim());
    let mut image_head = AdaptationHead::init(cfg.head_kind, image_features.dim(), hidden_i, cfg.output_dim, &mut rng);
    let mut text_head = AdaptationHead::init(cfg.head_kind, text_features.dim(), hidden_t, cfg.output_dim, &mut rng);
    let mut adam_i = Adam::new(&image_head);
    let mut adam_t = Adam::new(&text_head);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let bi = gather(&xi, chunk.iter().map(|&k| pairs[k].0));
            let bt = gather(&xt, chunk.iter().map(|&k| pairs[k].1));
            let (cache_i, zi) = image_head.forward_cached(&bi);
            let (cache_t, zt) = text_head.forward_cached(&bt);
            let lg = match normalized_loss_grad(zi.view(), zt.view(), cfg.tau, cfg.loss) {
                Ok(lg) if lg.loss.is_finite() => lg,
                _ => return Err(Error::Divergence { epoch, batch: b }),
            };
            let gi = image_head.backward(&cache_i, lg.d_image);
            let gt = text_head.backward(&cache_t, lg.d_text);
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    sgd_step(&mut image_head, &gi, cfg.learning_rate);
                    sgd_step(&mut text_head, &gt, cfg.learning_rate);
                }
                OptimizerKind::Adam => {
                    adam_step(&mut image_head, &gi, &mut adam_i, cfg.learning_rate);
                    adam_step(&mut text_head, &gt, &mut adam_t, cfg.learning_rate);
                }
            }
            total += lg.loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, batch: batches });
        }
        history.push(mean);
    }
    image_head.validate().map_err(|_| Error::Divergence { epoch: cfg.epochs, batch: 0 })?;
    text_head.validate().map_err(|_| Error::Divergence { epoch: cfg.epochs, batch: 0 })?;
    Ok(TrainOutcome {
        image_head,
        text_head,
        history,
    })
}
