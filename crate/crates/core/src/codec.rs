//! Attribute and label vector spaces.
//!
//! The generator is driven by an attribute vector in `[-1, 1]^d_a` plus a
//! 512-d noise code; the auxiliary classifier predicts a target label made
//! of the attributes followed by a one-hot modality code.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::registry::Registry;

/// Length of the noise code.
pub const Z_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    names: Vec<String>,
}

impl AttributeSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Schema("attribute schema needs at least one name".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid attribute name {name:?}")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector(Vec<f32>);

impl AttributeVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("empty attribute vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("attribute value {v} outside [-1, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with attribute `index` replaced by `value`.
    pub fn with(&self, index: usize, value: f32) -> Result<Self> {
        let mut values = self.0.clone();
        *values
            .get_mut(index)
            .ok_or_else(|| Error::Validation(format!("attribute index {index} out of range")))? = value;
        Self::new(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityCode {
    index: usize,
    count: usize,
}

impl ModalityCode {
    pub fn new(index: usize, count: usize) -> Result<Self> {
        if index >= count {
            return Err(Error::Validation(format!(
                "modality index {index} out of range for {count} modalities"
            )));
        }
        Ok(Self { index, count })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn one_hot(&self) -> Vec<f32> {
        (0..self.count).map(|i| if i == self.index { 1.0 } else { 0.0 }).collect()
    }
}

/// `[attributes, one-hot modality]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetLabel(Vec<f32>);

impl TargetLabel {
    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Wraps raw label values; structure is checked by [`decompose_target_label`].
    pub fn from_values(values: Vec<f32>) -> Self {
        Self(values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector(Vec<f32>);

impl NoiseVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != Z_DIM {
            return Err(Error::Validation(format!(
                "noise vector must have {Z_DIM} entries, got {}",
                values.len()
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

pub fn encode_attributes(raw: &BTreeMap<String, f32>, schema: &AttributeSchema) -> Result<AttributeVector> {
    if let Some(unknown) = raw.keys().find(|k| schema.index_of(k).is_none()) {
        return Err(Error::Schema(format!("unknown attribute {unknown:?}")));
    }
    let values = schema
        .names()
        .iter()
        .map(|name| {
            raw.get(name)
                .copied()
                .ok_or_else(|| Error::Schema(format!("missing attribute {name:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    AttributeVector::new(values)
}

/// Like [`encode_attributes`], but attributes left out of `raw` take the
/// neutral value 0.
pub fn encode_partial_attributes(raw: &BTreeMap<String, f32>, schema: &AttributeSchema) -> Result<AttributeVector> {
    let mut full: BTreeMap<String, f32> = schema.names().iter().map(|n| (n.clone(), 0.0)).collect();
    for (k, &v) in raw {
        match full.get_mut(k) {
            Some(slot) => *slot = v,
            None => return Err(Error::Schema(format!("unknown attribute {k:?}"))),
        }
    }
    encode_attributes(&full, schema)
}

pub fn compose_target_label(attributes: &AttributeVector, modality: ModalityCode) -> TargetLabel {
    let mut values = attributes.values().to_vec();
    values.extend(modality.one_hot());
    TargetLabel(values)
}

pub fn decompose_target_label(
    label: &TargetLabel,
    d_a: usize,
    c: usize,
) -> Result<(AttributeVector, ModalityCode)> {
    if label.len() != d_a + c {
        return Err(Error::MalformedLabel(format!(
            "label has {} entries, expected {d_a} + {c}",
            label.len()
        )));
    }
    let (attrs, tail) = label.values().split_at(d_a);
    let hot: Vec<usize> = tail
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    match hot[..] {
        [i] if tail[i] == 1.0 => {}
        _ => {
            return Err(Error::MalformedLabel(format!(
                "modality tail {tail:?} is not one-hot"
            )))
        }
    }
    let attributes = AttributeVector::new(attrs.to_vec()).map_err(|e| Error::MalformedLabel(e.to_string()))?;
    Ok((attributes, ModalityCode::new(hot[0], c)?))
}

/// Source of noise codes.
pub trait NoiseSampler: Send + Sync {
    fn name(&self) -> &'static str;

    fn fill(&self, rng: &mut dyn rand::RngCore, out: &mut [f32]);

    fn sample_from(&self, rng: &mut dyn rand::RngCore) -> NoiseVector {
        let mut values = vec![0.0; Z_DIM];
        self.fill(rng, &mut values);
        NoiseVector(values)
    }

    /// Deterministic noise code for `seed`.
    fn sample(&self, seed: u64) -> NoiseVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_from(&mut rng)
    }
}

/// i.i.d. standard normal entries.
pub struct NormalNoise;

impl NoiseSampler for NormalNoise {
    fn name(&self) -> &'static str {
        "normal"
    }

    fn fill(&self, mut rng: &mut dyn rand::RngCore, out: &mut [f32]) {
        for v in out {
            *v = (&mut rng).sample(StandardNormal);
        }
    }
}

/// i.i.d. uniform entries in `[-1, 1]`.
pub struct UniformNoise;

impl NoiseSampler for UniformNoise {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn fill(&self, mut rng: &mut dyn rand::RngCore, out: &mut [f32]) {
        for v in out {
            *v = (&mut rng).random_range(-1.0f32..=1.0);
        }
    }
}

pub fn noise_registry() -> &'static Registry<dyn NoiseSampler> {
    static REGISTRY: OnceLock<Registry<dyn NoiseSampler>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        Registry::new("noise")
            .with("normal", || Arc::new(NormalNoise) as Arc<dyn NoiseSampler>)
            .with("uniform", || Arc::new(UniformNoise) as Arc<dyn NoiseSampler>)
    })
}

/// Standard normal noise code for `seed`.
pub fn sample_noise(seed: u64) -> NoiseVector {
    NormalNoise.sample(seed)
}

fn check_beta(beta: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Validation(format!("blend weight {beta} outside [0, 1]")));
    }
    Ok(())
}

/// Equal entries pass through untouched, so blending a code with itself is
/// exact at every weight.
fn blend(a: &[f32], b: &[f32], beta: f32) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if x == y { x } else { beta * x + (1.0 - beta) * y })
        .collect()
}

/// `beta * y_a + (1 - beta) * y_a_star`: beta = 1 keeps the original code,
/// beta = 0 gives the flipped one.
pub fn interpolate_attributes(y_a: &AttributeVector, y_a_star: &AttributeVector, beta: f32) -> Result<AttributeVector> {
    check_beta(beta)?;
    if y_a.len() != y_a_star.len() {
        return Err(Error::Validation(format!(
            "attribute vectors differ in length ({} vs {})",
            y_a.len(),
            y_a_star.len()
        )));
    }
    // a convex combination of values in [-1, 1] stays in range
    let values = blend(y_a.values(), y_a_star.values(), beta)
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    AttributeVector::new(values)
}

pub fn interpolate_noise(z1: &NoiseVector, z2: &NoiseVector, beta: f32) -> Result<NoiseVector> {
    check_beta(beta)?;
    Ok(NoiseVector(blend(z1.values(), z2.values(), beta)))
}

/// `steps` evenly spaced blend weights from 1 down to 0 (a single step gives `[1]`).
pub fn beta_grid(steps: usize) -> Vec<f32> {
    match steps {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..steps)
            .map(|i| 1.0 - i as f32 / (steps - 1) as f32)
            .collect(),
    }
}
