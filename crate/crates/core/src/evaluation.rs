//! Quality metrics: Fréchet distance over a pluggable embedder, pairwise
//! diversity, attribute-consistency MSE, and the attribute/noise sweeps.
//!
//! The default embedder is the penultimate layer of a small attribute
//! classifier trained here on the real data. Fréchet distances are therefore
//! only comparable between runs that share a classifier, and not to
//! Inception-based FID numbers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{no_grad, Var};
use crate::checkpoint::Checkpoint;
use crate::codec::{beta_grid, interpolate_attributes, interpolate_noise, AttributeVector, NoiseVector};
use crate::datasets::StageData;
use crate::error::{Error, Result};
use crate::export::write_atomic;
use crate::generator::{Generator, MultimodalImageSet};
use crate::nn::{Adam, AdamConfig, Binder, Conv2d, Linear, Module, Param};
use crate::objectives::label_nll;
use crate::registry::Registry;
use crate::tensor::Tensor;
use crate::trainer::TrainedModel;

/// Asymmetry above this is averaged away before the eigendecomposition.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Gaussian fit of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl EmbeddingStats {
    /// Mean and unbiased covariance of the rows of `features` (`[N, E]`).
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, e) = rows_of(features)?;
        if n < 2 {
            return Err(Error::Input(format!("need at least 2 samples for statistics, got {n}")));
        }
        let x = DMatrix::from_row_iterator(n, e, features.data().iter().map(|&v| v as f64));
        let mean = DVector::from_iterator(e, x.column_iter().map(|c| c.mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn rows_of(features: &Tensor) -> Result<(usize, usize)> {
    match features.shape() {
        [n, e] => Ok((*n, *e)),
        s => Err(Error::Shape(format!("expected [N, E] features, got {s:?}"))),
    }
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let asym = (m - m.transpose()).abs().max();
    if asym > SYMMETRY_TOLERANCE {
        (m + m.transpose()) * 0.5
    } else {
        m.clone()
    }
}

/// Eigenvalues of a symmetric matrix, negatives clamped to zero.
fn psd_eigenvalues(m: DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(m).eigenvalues.map(|l| l.max(0.0))
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the cross term
/// computed as `tr((S1^(1/2) S2 S1^(1/2))^(1/2))`.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != (a.dim(), a.dim()) || b.cov.shape() != (b.dim(), b.dim()) {
        return Err(Error::Shape(format!(
            "statistics of dimension {} and {} cannot be compared",
            a.dim(),
            b.dim()
        )));
    }
    let s1 = symmetrized(&a.cov);
    let s2 = symmetrized(&b.cov);
    let root1 = sqrt_psd(&s1);
    let inner = symmetrized(&(&root1 * &s2 * &root1));
    let cross: f64 = psd_eigenvalues(inner).iter().map(|l| l.sqrt()).sum();
    let d = (&a.mean - &b.mean).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Maps images `[N, 3, R, R]` to feature rows `[N, E]`.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

/// Images average-pooled to `side x side` and flattened. Needs no training,
/// so it is useful for checks that must not depend on a classifier.
#[derive(Debug, Clone, Copy)]
pub struct PixelEmbedder {
    pub side: usize,
}

impl Default for PixelEmbedder {
    fn default() -> Self {
        Self { side: 4 }
    }
}

impl Embedder for PixelEmbedder {
    fn name(&self) -> &str {
        "pixels"
    }

    fn dim(&self) -> usize {
        3 * self.side * self.side
    }

    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let pooled = resize_to(images, self.side)?;
        let n = pooled.shape()[0];
        Ok(pooled.reshape(&[n, self.dim()]))
    }
}

pub fn embed_and_stats(embedder: &dyn Embedder, images: &Tensor) -> Result<EmbeddingStats> {
    EmbeddingStats::from_features(&embedder.embed(images)?)
}

/// Repeated 2x box downsampling until the images are `side` pixels wide.
pub fn resize_to(images: &Tensor, side: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::Shape(format!("expected [N, 3, R, R] images, got {s:?}")));
    }
    let mut x = images.clone();
    while x.shape()[2] > side && x.shape()[2] % 2 == 0 {
        x = x.downsample2x();
    }
    if x.shape()[2] != side {
        return Err(Error::Shape(format!("cannot bring {}x{} images to {side}x{side}", s[2], s[3])));
    }
    Ok(x)
}

pub trait Distance: Send + Sync {
    fn name(&self) -> &'static str;
    fn between(&self, a: &[f32], b: &[f32]) -> f64;
}

pub struct Euclidean;

impl Distance for Euclidean {
    fn name(&self) -> &'static str {
        "euclidean"
    }

    fn between(&self, a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// `1 - cos(a, b)`; zero vectors count as orthogonal to everything.
pub struct Cosine;

impl Distance for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn between(&self, a: &[f32], b: &[f32]) -> f64 {
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            dot += x as f64 * y as f64;
            na += (x as f64).powi(2);
            nb += (y as f64).powi(2);
        }
        if na == 0.0 || nb == 0.0 {
            return 1.0;
        }
        1.0 - dot / (na.sqrt() * nb.sqrt())
    }
}

pub fn distance_registry() -> &'static Registry<dyn Distance> {
    static REGISTRY: OnceLock<Registry<dyn Distance>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        Registry::new("distance")
            .with("euclidean", || Arc::new(Euclidean) as Arc<dyn Distance>)
            .with("cosine", || Arc::new(Cosine) as Arc<dyn Distance>)
    })
}

/// Mean distance over `pairs` random pairs of distinct rows of `features`.
pub fn pairwise_diversity(features: &Tensor, pairs: usize, distance: &dyn Distance, seed: u64) -> Result<f64> {
    let (n, e) = rows_of(features)?;
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 features for diversity, got {n}")));
    }
    if pairs == 0 {
        return Err(Error::Input("pairs must be at least 1".into()));
    }
    let rows: Vec<&[f32]> = features.data().chunks(e).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += distance.between(rows[i], rows[j]);
    }
    Ok(total / pairs as f64)
}

pub const EMBEDDING_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    /// Images per modality per step.
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Fraction of each modality's records kept out of training.
    pub holdout: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 16,
            lr: 4e-3,
            seed: 0,
            holdout: 0.1,
        }
    }
}

/// Held-out quality of a freshly trained classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub holdout_images: usize,
    pub attribute_mse: f64,
    /// Fraction of attribute slots whose predicted sign matches the label.
    pub attribute_accuracy: f64,
    pub modality_accuracy: f64,
}

/// Predictions for a batch of images.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// Attribute scores in [-1, 1], `[N, d_a]`.
    pub scores: Tensor,
    pub modalities: Vec<usize>,
    /// Penultimate features, `[N, EMBEDDING_DIM]`.
    pub embedding: Tensor,
}

/// Small convolutional network with an attribute head (scores in [-1, 1])
/// and a modality head, trained on real images.
#[derive(Debug, Clone)]
pub struct AttributeClassifier {
    resolution: usize,
    d_a: usize,
    c: usize,
    convs: Vec<Conv2d>,
    fc: Linear,
    head: Linear,
    trained_steps: usize,
}

const PREDICT_CHUNK: usize = 256;

impl AttributeClassifier {
    pub fn new(resolution: usize, d_a: usize, c: usize, seed: u64) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 4 {
            return Err(Error::Config(format!("classifier resolution must be a power of two >= 4, got {resolution}")));
        }
        if d_a == 0 || c == 0 {
            return Err(Error::Config("classifier needs at least one attribute and one modality".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (resolution.trailing_zeros() as usize).saturating_sub(2).max(1);
        let mut convs = Vec::with_capacity(stages);
        let mut width = 3;
        for i in 0..stages {
            let out = (16 << i).min(EMBEDDING_DIM);
            convs.push(Conv2d::new(&format!("cls.conv{i}"), width, out, 3, &mut rng));
            width = out;
        }
        Ok(Self {
            resolution,
            d_a,
            c,
            convs,
            fc: Linear::new("cls.fc", width * 16, EMBEDDING_DIM, &mut rng),
            head: Linear::new("cls.head", EMBEDDING_DIM, d_a + c, &mut rng),
            trained_steps: 0,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    fn forward(&self, b: &mut Binder, x: &Var) -> (Var, Var) {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(b, &h).leaky_relu(0.2);
            if h.shape()[2] > 4 {
                h = h.downsample2x();
            }
        }
        let n = h.shape()[0];
        let flat = h.reshape(&[n, h.value().numel() / n]);
        let emb = self.fc.forward(b, &flat).leaky_relu(0.2);
        let logits = self.head.forward(b, &emb);
        (emb, logits)
    }

    /// Trains on `data` (all modalities, balanced per step) and reports
    /// accuracy on the held-out records.
    pub fn fit(data: &StageData, cfg: &ClassifierConfig) -> Result<(Self, ClassifierReport)> {
        if cfg.steps == 0 || cfg.batch == 0 {
            return Err(Error::Config("classifier needs at least one step and one image per batch".into()));
        }
        if !(0.0..1.0).contains(&cfg.holdout) {
            return Err(Error::Config(format!("holdout fraction must be in [0, 1), got {}", cfg.holdout)));
        }
        let mut model = Self::new(data.resolution, data.d_a, data.c, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a5);
        let mut train = Vec::with_capacity(data.c);
        let mut held = Vec::with_capacity(data.c);
        for (m, md) in data.modalities.iter().enumerate() {
            let mut idx: Vec<usize> = (0..md.count).collect();
            idx.shuffle(&mut rng);
            let keep = (md.count as f32 * cfg.holdout).round() as usize;
            let (h, t) = idx.split_at(keep.min(md.count));
            if t.is_empty() {
                return Err(Error::Data(format!("modality {m} has no training records for the classifier")));
            }
            held.push(h.to_vec());
            train.push(t.to_vec());
        }
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        for _ in 0..cfg.steps {
            let mut images = Vec::with_capacity(data.c);
            let mut labels = Vec::with_capacity(data.c);
            for (m, pool) in train.iter().enumerate() {
                let pick: Vec<usize> = (0..cfg.batch).map(|_| pool[rng.random_range(0..pool.len())]).collect();
                let (x, y) = data.gather(m, &pick);
                images.push(x);
                labels.push(y);
            }
            let x = Tensor::concat(&images.iter().collect::<Vec<_>>(), 0);
            let y = Tensor::concat(&labels.iter().collect::<Vec<_>>(), 0);
            let mut b = Binder::trainable();
            let (_, logits) = model.forward(&mut b, &Var::constant(x));
            let loss = label_nll(&logits, &y, data.d_a)?;
            if !loss.item().is_finite() {
                return Err(Error::Numeric("classifier loss is not finite".into()));
            }
            let grads = b.gradients(&loss);
            adam.step(model.params_mut(), &grads)?;
        }
        model.trained_steps = cfg.steps;

        let mut sq = 0.0;
        let mut slots = 0usize;
        let mut signs = 0usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (m, idx) in held.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let (x, y) = data.gather(m, idx);
            let p = model.predict(&x)?;
            let w = data.d_a + data.c;
            for (i, row) in p.scores.data().chunks(data.d_a).enumerate() {
                for (j, &s) in row.iter().enumerate() {
                    let t = y.data()[i * w + j];
                    sq += (s as f64 - t as f64).powi(2);
                    signs += ((s > 0.0) == (t > 0.0)) as usize;
                    slots += 1;
                }
            }
            correct += p.modalities.iter().filter(|&&k| k == m).count();
            total += idx.len();
        }
        let report = ClassifierReport {
            holdout_images: total,
            attribute_mse: if slots > 0 { sq / slots as f64 } else { f64::NAN },
            attribute_accuracy: if slots > 0 { signs as f64 / slots as f64 } else { f64::NAN },
            modality_accuracy: if total > 0 { correct as f64 / total as f64 } else { f64::NAN },
        };
        Ok((model, report))
    }

    pub fn predict(&self, images: &Tensor) -> Result<Predictions> {
        if !self.is_trained() {
            return Err(Error::Validation("attribute classifier is untrained".into()));
        }
        let x = resize_to(images, self.resolution)?;
        let n = x.shape()[0];
        let mut scores = Vec::with_capacity(n * self.d_a);
        let mut embedding = Vec::with_capacity(n * EMBEDDING_DIM);
        let mut modalities = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = PREDICT_CHUNK.min(n - start);
            let (emb, logits) = no_grad(|| self.forward(&mut Binder::frozen(), &Var::constant(x.narrow(0, start, len))));
            embedding.extend_from_slice(emb.value().data());
            let w = self.d_a + self.c;
            for row in logits.value().data().chunks(w) {
                // 2 sigmoid(l) - 1 maps the Bernoulli logit to [-1, 1]
                scores.extend(row[..self.d_a].iter().map(|&l| (l * 0.5).tanh()));
                let best = row[self.d_a..]
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                modalities.push(best.0);
            }
            start += len;
        }
        Ok(Predictions {
            scores: Tensor::new(&[n, self.d_a], scores),
            modalities,
            embedding: Tensor::new(&[n, EMBEDDING_DIM], embedding),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), "attribute-classifier".into());
        ck.meta.insert("resolution".into(), self.resolution.to_string());
        ck.meta.insert("d_a".into(), self.d_a.to_string());
        ck.meta.insert("c".into(), self.c.to_string());
        ck.meta.insert("trained_steps".into(), self.trained_steps.to_string());
        for p in self.params() {
            ck.tensors.insert(format!("param/{}", p.name), p.value.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "attribute-classifier" {
            return Err(Error::Corrupt("not an attribute classifier checkpoint".into()));
        }
        let mut model = Self::new(ck.meta_parse("resolution")?, ck.meta_parse("d_a")?, ck.meta_parse("c")?, 0)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        model.trained_steps = ck.meta_parse("trained_steps")?;
        for p in model.params_mut() {
            let t = ck.tensor(&format!("param/{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Corrupt(format!("`{}` has shape {:?}", p.name, t.shape())));
            }
            p.value = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for AttributeClassifier {
    fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.convs.iter().flat_map(|c| c.params()).collect();
        out.extend([&self.fc.weight, &self.fc.bias, &self.head.weight, &self.head.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        out.extend([
            &mut self.fc.weight,
            &mut self.fc.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }
}

impl Embedder for AttributeClassifier {
    fn name(&self) -> &str {
        "classifier"
    }

    fn dim(&self) -> usize {
        EMBEDDING_DIM
    }

    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.predict(images)?.embedding)
    }
}

/// Mean squared error per split, with its mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MseSummary {
    pub splits: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for MseSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Squared error of each row of `scores` against `requested`, averaged
/// over the attribute slots.
fn row_errors(scores: &Tensor, requested: &Tensor) -> Result<Vec<f64>> {
    if scores.shape() != requested.shape() || scores.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "scores {:?} and requested attributes {:?} must both be [N, d_a]",
            scores.shape(),
            requested.shape()
        )));
    }
    let d = scores.shape()[1].max(1);
    Ok(scores
        .data()
        .chunks(d)
        .zip(requested.data().chunks(d))
        .map(|(s, r)| s.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / d as f64)
        .collect())
}

/// Splits per-sample errors into `splits` disjoint random subsets of equal
/// size and summarizes the per-subset means.
pub fn split_summary(errors: &[f64], splits: usize, seed: u64) -> Result<MseSummary> {
    if splits == 0 || errors.len() < splits {
        return Err(Error::Input(format!("cannot form {splits} splits from {} samples", errors.len())));
    }
    let mut idx: Vec<usize> = (0..errors.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = errors.len() / splits;
    let values: Vec<f64> = idx
        .chunks_exact(size)
        .take(splits)
        .map(|chunk| chunk.iter().map(|&i| errors[i]).sum::<f64>() / size as f64)
        .collect();
    let mean = values.iter().sum::<f64>() / splits as f64;
    let std = if splits > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (splits - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(MseSummary {
        splits: values,
        mean,
        std,
    })
}

/// Classifier scores of `generated` (`[N, 3, R, R]`) against the requested
/// attributes (`[N, d_a]`), summarized over `splits` random splits.
pub fn attribute_mse(
    classifier: &AttributeClassifier,
    generated: &Tensor,
    requested: &Tensor,
    splits: usize,
    seed: u64,
) -> Result<MseSummary> {
    if generated.shape().first() != requested.shape().first() {
        return Err(Error::Input(format!(
            "{} images but {} attribute vectors",
            generated.shape().first().unwrap_or(&0),
            requested.shape().first().unwrap_or(&0)
        )));
    }
    let p = classifier.predict(generated)?;
    split_summary(&row_errors(&p.scores, requested)?, splits, seed)
}

/// Fraction of `images` the classifier assigns to modality `m`.
pub fn modality_accuracy(classifier: &AttributeClassifier, images: &Tensor, m: usize) -> Result<f64> {
    let p = classifier.predict(images)?;
    if p.modalities.is_empty() {
        return Err(Error::Input("no images to classify".into()));
    }
    Ok(p.modalities.iter().filter(|&&k| k == m).count() as f64 / p.modalities.len() as f64)
}

/// What a manipulation sweep moves towards.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepTarget {
    /// Drive one attribute to the opposite extreme.
    Attribute(usize),
    /// Interpolate towards another noise code.
    Noise(NoiseVector),
}

/// Attribute `index` set to the extreme opposite its current sign
/// (a zero value goes to +1).
pub fn flipped_attributes(y_a: &AttributeVector, index: usize) -> Result<AttributeVector> {
    let v = *y_a
        .values()
        .get(index)
        .ok_or_else(|| Error::Input(format!("attribute index {index} out of range")))?;
    y_a.with(index, if v > 0.0 { -1.0 } else { 1.0 })
}

/// One frame per blend weight, running from the `from` codes to the `to` codes.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub betas: Vec<f32>,
    pub codes: Vec<(NoiseVector, AttributeVector)>,
    pub frames: Vec<MultimodalImageSet>,
}

impl Sweep {
    /// `cells[modality][step]`, each `[3, R, R]`.
    pub fn grid(&self) -> Vec<Vec<Tensor>> {
        let c = self.frames.first().map_or(0, |f| f.images.len());
        (0..c)
            .map(|m| self.frames.iter().map(|f| f.sample(0)[m].clone()).collect())
            .collect()
    }
}

/// Renders `steps` frames with blend weights from [`beta_grid`], each
/// synthesized on its own so frames match single-image synthesis exactly.
pub fn sweep_between(
    generator: &Generator,
    from: (&NoiseVector, &AttributeVector),
    to: (&NoiseVector, &AttributeVector),
    steps: usize,
) -> Result<Sweep> {
    if steps == 0 {
        return Err(Error::Input("a sweep needs at least one step".into()));
    }
    let betas = beta_grid(steps);
    let mut codes = Vec::with_capacity(steps);
    let mut frames = Vec::with_capacity(steps);
    for &beta in &betas {
        let z = interpolate_noise(from.0, to.0, beta)?;
        let y = interpolate_attributes(from.1, to.1, beta)?;
        frames.push(generator.synthesize(&z, &y)?);
        codes.push((z, y));
    }
    Ok(Sweep { betas, codes, frames })
}

pub fn manipulation_sweep(
    generator: &Generator,
    z: &NoiseVector,
    y_a: &AttributeVector,
    target: &SweepTarget,
    steps: usize,
) -> Result<Sweep> {
    match target {
        SweepTarget::Attribute(i) => {
            let flipped = flipped_attributes(y_a, *i)?;
            sweep_between(generator, (z, y_a), (z, &flipped), steps)
        }
        SweepTarget::Noise(z2) => sweep_between(generator, (z, y_a), (z2, y_a), steps),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Generated samples (each one image per modality).
    pub samples: usize,
    pub splits: usize,
    pub pairs: usize,
    pub distance: String,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            splits: 5,
            pairs: 10_000,
            distance: "euclidean".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityReport {
    pub name: String,
    pub fid: f64,
    /// Distance between the real images and uniform noise images.
    pub noise_fid: f64,
    pub diversity: f64,
    pub modality_accuracy: f64,
    pub attribute_mse: f64,
}

impl ModalityReport {
    pub fn fid_ratio(&self) -> f64 {
        self.fid / self.noise_fid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub embedder: String,
    pub samples: usize,
    pub modalities: Vec<ModalityReport>,
    pub attribute_mse: MseSummary,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "embedder: {} (Fréchet distances are relative to this embedder only)", self.embedder).unwrap();
        writeln!(out, "samples: {}", self.samples).unwrap();
        writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>8} {:>10} {:>10} {:>8}",
            "modality", "fid", "noise_fid", "ratio", "diversity", "attr_mse", "mod_acc"
        )
        .unwrap();
        for m in &self.modalities {
            writeln!(
                out,
                "{:<12} {:>10.4} {:>10.4} {:>8.4} {:>10.4} {:>10.4} {:>8.4}",
                m.name,
                m.fid,
                m.noise_fid,
                m.fid_ratio(),
                m.diversity,
                m.attribute_mse,
                m.modality_accuracy
            )
            .unwrap();
        }
        writeln!(
            out,
            "attribute_mse ({}) over {} splits: {}",
            self.modalities.first().map_or("-", |m| m.name.as_str()),
            self.attribute_mse.splits.len(),
            self.attribute_mse
        )
        .unwrap();
        out
    }

    /// One `key=value` per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "embedder={}", self.embedder).unwrap();
        writeln!(out, "samples={}", self.samples).unwrap();
        for m in &self.modalities {
            let n = &m.name;
            writeln!(out, "fid.{n}={}", m.fid).unwrap();
            writeln!(out, "noise_fid.{n}={}", m.noise_fid).unwrap();
            writeln!(out, "diversity.{n}={}", m.diversity).unwrap();
            writeln!(out, "modality_accuracy.{n}={}", m.modality_accuracy).unwrap();
            writeln!(out, "attribute_mse.{n}={}", m.attribute_mse).unwrap();
        }
        writeln!(out, "attribute_mse.mean={}", self.attribute_mse.mean).unwrap();
        writeln!(out, "attribute_mse.std={}", self.attribute_mse.std).unwrap();
        out
    }

    /// Writes `report.txt` and `report.kv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let table = dir.join("report.txt");
        let kv = dir.join("report.kv");
        write_atomic(&table, self.to_table().as_bytes())?;
        write_atomic(&kv, self.to_kv().as_bytes())?;
        Ok((table, kv))
    }
}

/// Parses the `key=value` report back into a map.
pub fn parse_kv(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

const GENERATION_CHUNK: usize = 100;

/// Scores a trained model against the real images in `data` (which must be
/// at the generator's resolution). Requested attributes are drawn from the
/// real label pool; Fréchet distances use as many generated images as there
/// are real ones. The split attribute MSE is measured on modality 0 (the
/// visible images); every modality's MSE is also listed in its row.
pub fn evaluate_model(
    model: &TrainedModel,
    data: &StageData,
    classifier: &AttributeClassifier,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let g = &model.generator;
    let (c, d_a, r) = (g.config().c, g.config().d_a, g.resolution());
    if data.resolution != r || data.c != c || data.d_a != d_a {
        return Err(Error::Input(format!(
            "data ({} modalities, {} attributes, {}px) does not match the model ({c}, {d_a}, {r}px)",
            data.c, data.d_a, data.resolution
        )));
    }
    if cfg.samples < cfg.splits.max(2) {
        return Err(Error::Input(format!("need at least {} samples", cfg.splits.max(2))));
    }
    let distance = distance_registry().create(&cfg.distance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let pool: Vec<&[f32]> = (0..c)
        .flat_map(|m| (0..data.modalities[m].count).map(move |i| (m, i)))
        .map(|(m, i)| data.attributes(m, i))
        .collect();
    if pool.is_empty() {
        return Err(Error::Data("no real records to draw attributes from".into()));
    }

    let mut requested = Vec::with_capacity(cfg.samples * d_a);
    let mut scores: Vec<Vec<f32>> = vec![Vec::new(); c];
    let mut embeddings: Vec<Vec<f32>> = vec![Vec::new(); c];
    let mut correct = vec![0usize; c];
    let mut done = 0;
    while done < cfg.samples {
        let len = GENERATION_CHUNK.min(cfg.samples - done);
        let mut z = Vec::with_capacity(len * g.config().z_dim);
        let mut y = Vec::with_capacity(len * d_a);
        for _ in 0..len {
            z.extend_from_slice(model.noise.sample_from(&mut rng).values());
            y.extend_from_slice(pool[rng.random_range(0..pool.len())]);
        }
        let z = Tensor::new(&[len, g.config().z_dim], z);
        let y = Tensor::new(&[len, d_a], y);
        let set = g.generate(&z, &y)?;
        for (m, images) in set.images.iter().enumerate() {
            let p = classifier.predict(images)?;
            scores[m].extend_from_slice(p.scores.data());
            embeddings[m].extend_from_slice(p.embedding.data());
            correct[m] += p.modalities.iter().filter(|&&k| k == m).count();
        }
        requested.extend_from_slice(y.data());
        done += len;
    }
    let requested = Tensor::new(&[cfg.samples, d_a], requested);

    let mut headline = Vec::new();
    let mut reports = Vec::with_capacity(c);
    for m in 0..c {
        let sc = Tensor::new(&[cfg.samples, d_a], std::mem::take(&mut scores[m]));
        let errs = row_errors(&sc, &requested)?;
        if m == 0 {
            headline = errs.clone();
        }
        let md = &data.modalities[m];
        let real = Tensor::new(&[md.count, 3, r, r], md.pixels.clone());
        let real_stats = embed_and_stats(classifier, &real)?;
        let n_fake = md.count.min(cfg.samples);
        let emb = Tensor::new(&[cfg.samples, EMBEDDING_DIM], std::mem::take(&mut embeddings[m]));
        let fake_stats = EmbeddingStats::from_features(&emb.narrow(0, 0, n_fake))?;
        let noise: Vec<f32> = (0..md.count * 3 * r * r).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        let noise_stats = embed_and_stats(classifier, &Tensor::new(&[md.count, 3, r, r], noise))?;
        reports.push(ModalityReport {
            name: model.modalities.get(m).cloned().unwrap_or_else(|| format!("modality{m}")),
            fid: frechet_distance(&fake_stats, &real_stats)?,
            noise_fid: frechet_distance(&noise_stats, &real_stats)?,
            diversity: pairwise_diversity(&emb, cfg.pairs, distance.as_ref(), cfg.seed.wrapping_add(m as u64))?,
            modality_accuracy: correct[m] as f64 / cfg.samples as f64,
            attribute_mse: errs.iter().sum::<f64>() / cfg.samples as f64,
        });
    }
    Ok(EvalReport {
        embedder: classifier.name().to_string(),
        samples: cfg.samples,
        modalities: reports,
        attribute_mse: split_summary(&headline, cfg.splits, cfg.seed)?,
    })
}
