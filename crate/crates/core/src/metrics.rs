//! Embedders, Gaussian statistics and the Fréchet-distance family of image metrics.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};
use crate::image::RgbImage;
use crate::nets::Vae;
use crate::rng::{derive_seed, Stream};

pub const PROJECTION_SIDE: usize = 16;
pub const PROJECTION_DIM: usize = 32;
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Generated,
}

/// `n × D` embeddings with one group label (prompt id) per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    pub groups: Vec<String>,
    pub source: Source,
}

impl EmbeddingSet {
    pub fn new(dim: usize, source: Source) -> Self {
        Self { dim, data: Vec::new(), groups: Vec::new(), source }
    }

    pub fn from_rows(rows: &[Vec<f64>], source: Source) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut s = Self::new(dim, source);
        for r in rows {
            s.push(r, "")?;
        }
        Ok(s)
    }

    pub fn push(&mut self, row: &[f64], group: &str) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension(format!("embedding of length {} in a set of dim {}", row.len(), self.dim)));
        }
        self.data.extend_from_slice(row);
        self.groups.push(group.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1)).take(self.len())
    }

    /// Rows labelled `group`, keeping order.
    pub fn subset(&self, group: &str) -> Self {
        let mut s = Self::new(self.dim, self.source);
        for (i, g) in self.groups.iter().enumerate() {
            if g == group {
                s.data.extend_from_slice(self.row(i));
                s.groups.push(g.clone());
            }
        }
        s
    }

    /// Distinct group labels in first-seen order.
    pub fn group_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.groups {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Every row shifted by `v`.
    pub fn shifted(&self, v: &[f64]) -> Self {
        let mut s = self.clone();
        for (i, x) in s.data.iter_mut().enumerate() {
            *x += v[i % self.dim];
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedderKind {
    RandomProjection,
    VaeEncoder,
}

impl EmbedderKind {
    pub fn id(self) -> &'static str {
        match self {
            Self::RandomProjection => "random-projection",
            Self::VaeEncoder => "vae-encoder",
        }
    }
}

impl FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-projection" => Ok(Self::RandomProjection),
            "vae-encoder" => Ok(Self::VaeEncoder),
            other => config_err(format!("unknown embedder {other:?}")),
        }
    }
}

impl fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Frozen image feature extractor producing unit-norm vectors.
#[derive(Clone, Debug)]
pub enum Embedder {
    RandomProjection { matrix: Vec<f64> },
    VaeEncoder(Box<Vae>),
}

impl Embedder {
    pub fn random_projection(root_seed: u64) -> Self {
        let n = PROJECTION_SIDE * PROJECTION_SIDE;
        let mut r = Stream::new(derive_seed(root_seed, "embedder/random-projection"));
        let s = 1.0 / (n as f64).sqrt();
        Self::RandomProjection { matrix: r.normal_vec(PROJECTION_DIM * n).into_iter().map(|v| v * s).collect() }
    }

    /// Build by id; `vae-encoder` needs the trained VAE.
    pub fn from_id(id: &str, root_seed: u64, vae: Option<&Vae>) -> Result<Self> {
        match id.parse::<EmbedderKind>()? {
            EmbedderKind::RandomProjection => Ok(Self::random_projection(root_seed)),
            EmbedderKind::VaeEncoder => match vae {
                Some(v) => Ok(Self::VaeEncoder(Box::new(v.clone()))),
                None => config_err("the vae-encoder embedder needs a trained VAE"),
            },
        }
    }

    pub fn kind(&self) -> EmbedderKind {
        match self {
            Self::RandomProjection { .. } => EmbedderKind::RandomProjection,
            Self::VaeEncoder(_) => EmbedderKind::VaeEncoder,
        }
    }

    pub fn dim(&self, image_side: usize) -> usize {
        match self {
            Self::RandomProjection { .. } => PROJECTION_DIM,
            Self::VaeEncoder(v) => v.latent_shape(image_side, image_side).iter().product(),
        }
    }

    pub fn embed(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let raw = match self {
            Self::RandomProjection { matrix } => {
                let g = downsample_gray(img, PROJECTION_SIDE);
                matrix.chunks(g.len()).map(|row| row.iter().zip(&g).map(|(a, b)| a * b).sum()).collect()
            }
            Self::VaeEncoder(vae) => vae.encode_tensor(&img.to_tensor(), None)?.mean.into_data(),
        };
        Ok(normalize(raw))
    }

    /// Embed labelled images into one set.
    pub fn embed_all<'a>(&self, images: impl IntoIterator<Item = (&'a RgbImage, &'a str)>, source: Source) -> Result<EmbeddingSet> {
        let mut set: Option<EmbeddingSet> = None;
        for (img, group) in images {
            let e = self.embed(img)?;
            set.get_or_insert_with(|| EmbeddingSet::new(e.len(), source)).push(&e, group)?;
        }
        Ok(set.unwrap_or_else(|| EmbeddingSet::new(0, source)))
    }
}

/// Box-filter the luminance (mapped to [−1, 1]) onto a `side × side` grid.
fn downsample_gray(img: &RgbImage, side: usize) -> Vec<f64> {
    let g = img.gray();
    let mut out = vec![0.0; side * side];
    for oy in 0..side {
        let (y0, y1) = (oy * img.height / side, ((oy + 1) * img.height / side).max(oy * img.height / side + 1));
        for ox in 0..side {
            let (x0, x1) = (ox * img.width / side, ((ox + 1) * img.width / side).max(ox * img.width / side + 1));
            let mut acc = 0.0;
            for y in y0..y1.min(img.height) {
                for x in x0..x1.min(img.width) {
                    acc += g[y * img.width + x];
                }
            }
            let n = ((y1.min(img.height) - y0) * (x1.min(img.width) - x0)) as f64;
            out[oy * side + ox] = 2.0 * acc / n - 1.0;
        }
    }
    out
}

/// Scale to unit length; the zero vector maps to the first basis vector.
fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Full,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `D × D`.
    pub cov: Vec<f64>,
    pub mode: CovMode,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and (n−1)-denominator covariance plus `COV_RIDGE·I`.
pub fn fit_gaussian(set: &EmbeddingSet, mode: CovMode) -> Result<GaussianStats> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = set.dim();
    let mean = set.mean();
    let mut cov = vec![0.0; d * d];
    for r in set.rows() {
        for i in 0..d {
            let di = r[i] - mean[i];
            match mode {
                CovMode::Full => {
                    for j in i..d {
                        cov[i * d + j] += di * (r[j] - mean[j]);
                    }
                }
                CovMode::Diagonal => cov[i * d + i] += di * di,
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
        cov[i * d + i] += COV_RIDGE;
    }
    Ok(GaussianStats { mean, cov, mode })
}

fn check_square(m: &[f64], d: usize) -> Result<()> {
    if m.len() != d * d {
        return Err(Error::Dimension(format!("{} entries for a {d}×{d} matrix", m.len())));
    }
    if let Some(bad) = m.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite matrix entry {bad}")));
    }
    Ok(())
}

fn symmetric_eigen(m: &[f64], d: usize) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = DMatrix::from_fn(d, d, |i, j| 0.5 * (m[i * d + j] + m[j * d + i]));
    SymmetricEigen::new(sym)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are clamped to 0.
pub fn matrix_sqrt_spd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    check_square(m, d)?;
    let eig = symmetric_eigen(m, d);
    let v = &eig.eigenvectors;
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let s: f64 = (0..d).map(|k| v[(i, k)] * roots[k] * v[(j, k)]).sum();
            out[i * d + j] = s;
            out[j * d + i] = s;
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½), clamped at 0.
pub fn frechet_distance(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64> {
    let d = g1.dim();
    if g2.dim() != d || g1.mode != g2.mode {
        return contract_err(format!("Gaussians differ: dim {d} vs {}, mode {:?} vs {:?}", g2.dim(), g1.mode, g2.mode));
    }
    check_square(&g1.cov, d)?;
    check_square(&g2.cov, d)?;
    let mean_term: f64 = g1.mean.iter().zip(&g2.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let cross = match g1.mode {
        CovMode::Diagonal => (0..d).map(|i| (g1.cov[i * d + i].max(0.0) * g2.cov[i * d + i].max(0.0)).sqrt()).sum(),
        CovMode::Full => {
            let s1 = matrix_sqrt_spd(&g1.cov, d)?;
            let inner = matmul_sq(&matmul_sq(&s1, &g2.cov, d), &s1, d);
            symmetric_eigen(&inner, d).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum::<f64>()
        }
    };
    let v = mean_term + trace(&g1.cov) + trace(&g2.cov) - 2.0 * cross;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("Fréchet distance evaluated to {v}")));
    }
    Ok(v.max(0.0))
}

/// Covariance mode used for two sets: diagonal when either has fewer rows than dimensions.
pub fn fid_mode(real: &EmbeddingSet, generated: &EmbeddingSet) -> CovMode {
    if real.len().min(generated.len()) < real.dim() {
        CovMode::Diagonal
    } else {
        CovMode::Full
    }
}

pub fn fid(real: &EmbeddingSet, generated: &EmbeddingSet) -> Result<f64> {
    if real.dim() != generated.dim() {
        return contract_err(format!("embedding dims {} vs {}", real.dim(), generated.dim()));
    }
    let mode = fid_mode(real, generated);
    frechet_distance(&fit_gaussian(real, mode)?, &fit_gaussian(generated, mode)?)
}

/// Global FID over every prompt's images pooled together (lower is better).
pub fn fbd(all_real: &EmbeddingSet, all_generated: &EmbeddingSet) -> Result<f64> {
    fid(all_real, all_generated)
}

/// 1000 / (1 + mean FID).
pub fn fidelity(per_prompt_fids: &[f64]) -> Result<f64> {
    if per_prompt_fids.is_empty() {
        return contract_err("fidelity of an empty FID list");
    }
    if let Some(bad) = per_prompt_fids.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return contract_err(format!("FID values must be finite and non-negative, got {bad}"));
    }
    let mean = per_prompt_fids.iter().sum::<f64>() / per_prompt_fids.len() as f64;
    Ok(1000.0 / (1.0 + mean))
}

/// Cosine between the mean embeddings of each (original, rephrased) pair.
pub fn agreement_pairs(original: &[EmbeddingSet], rephrased: &[EmbeddingSet]) -> Result<Vec<f64>> {
    if original.len() != rephrased.len() || original.is_empty() {
        return contract_err(format!("{} original sets paired with {} rephrased sets", original.len(), rephrased.len()));
    }
    original
        .iter()
        .zip(rephrased)
        .map(|(o, r)| {
            if o.is_empty() || r.is_empty() || o.dim() != r.dim() {
                return contract_err("agreement pair with an empty or mismatched set");
            }
            Ok(cosine(&o.mean(), &r.mean()))
        })
        .collect()
}

pub fn agreement(original: &[EmbeddingSet], rephrased: &[EmbeddingSet]) -> Result<f64> {
    let p = agreement_pairs(original, rephrased)?;
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

/// Mean cosine distance over all unordered pairs of one prompt's images.
pub fn diversity(set: &EmbeddingSet) -> Result<f64> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += 1.0 - cosine(set.row(i), set.row(j));
        }
    }
    Ok(acc / (n * (n - 1) / 2) as f64)
}

/// Mean of [`diversity`] over prompt groups.
pub fn mean_diversity(sets: &[EmbeddingSet]) -> Result<f64> {
    if sets.is_empty() {
        return contract_err("diversity over zero prompts");
    }
    let mut acc = 0.0;
    for s in sets {
        acc += diversity(s)?;
    }
    Ok(acc / sets.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for RunStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Sample mean and (n−1) standard deviation over independent runs.
pub fn aggregate_runs(values: &[f64]) -> Result<RunStats> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(RunStats { mean, std: var.sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fidelity: f64,
    pub agreement: f64,
    pub diversity: f64,
    pub fbd: f64,
    pub fid_mean: f64,
    pub fid_std: f64,
    pub run_count: usize,
    pub embedder: String,
    pub assumptions: Vec<String>,
}

/// Modelling choices recorded with every report.
pub fn default_assumptions() -> Vec<String> {
    [
        "embeddings come from a frozen toy embedder, not a biomedical CLIP model",
        "per-prompt FID uses diagonal covariance when samples < embedding dim",
        "covariances carry a 1e-6 ridge",
        "diversity is mean pairwise cosine distance",
        "agreement is the cosine between per-prompt mean embeddings",
        "fidelity is 1000 / (1 + mean per-prompt FID)",
    ]
    .map(String::from)
    .to_vec()
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One row of the per-prompt detail table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub prompt_id: String,
    pub fid: f64,
    pub diversity: f64,
    pub agreement_pair: Option<f64>,
}

pub fn write_prompt_csv(path: impl AsRef<Path>, rows: &[PromptMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_prompt_csv(path: impl AsRef<Path>) -> Result<Vec<PromptMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writes `rows` to any sink as CSV with a header; used for small summary tables.
pub fn write_csv_rows<W: Write, S: Serialize>(sink: W, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
