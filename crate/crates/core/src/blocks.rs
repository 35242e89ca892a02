//! Network primitives shared by the generator and the discriminator:
//! per-pixel feature equalization (and the normalization alternatives used
//! for ablation), 2x resampling, and fade-in blending.

use std::sync::{Arc, OnceLock};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::registry::Registry;

pub const EQUALIZE_EPS: f32 = 1e-8;
pub const LEAKY_SLOPE: f32 = 0.2;

/// Divides every pixel's channel vector by its root mean square:
/// `f / sqrt(mean_c(f^2) + eps)`. Input is `[N, C, H, W]`.
pub fn pixel_equalize(f: &Var, eps: f32) -> Var {
    let (n, c, h, w) = f.value().dims4();
    let inv_rms = f
        .mul(f)
        .sum_to(&[n, 1, h, w])
        .scale(1.0 / c as f32)
        .add_scalar(eps)
        .powf(-0.5);
    f.mul(&inv_rms.broadcast_to(&[n, c, h, w]))
}

pub fn upsample2x(f: &Var) -> Result<Var> {
    if f.shape().len() != 4 {
        return Err(Error::Shape(format!("upsample2x needs [N, C, H, W], got {:?}", f.shape())));
    }
    Ok(f.upsample2x())
}

pub fn downsample2x(f: &Var) -> Result<Var> {
    match f.shape() {
        [_, _, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(f.downsample2x()),
        shape => Err(Error::Shape(format!("downsample2x needs even [N, C, H, W], got {shape:?}"))),
    }
}

/// `alpha * new_path + (1 - alpha) * old_path` for a one-element `alpha`.
pub fn fade_blend(new_path: &Var, old_path: &Var, alpha: &Var) -> Result<Var> {
    if new_path.shape() != old_path.shape() {
        return Err(Error::Shape(format!(
            "fade paths differ: {:?} vs {:?}",
            new_path.shape(),
            old_path.shape()
        )));
    }
    if alpha.value().numel() != 1 {
        return Err(Error::Shape("fade weight must be a single value".into()));
    }
    let shape = new_path.shape().to_vec();
    let a = alpha.broadcast_to(&shape);
    let one_minus = alpha.neg().add_scalar(1.0).broadcast_to(&shape);
    Ok(new_path.mul(&a).add(&old_path.mul(&one_minus)))
}

/// Blend weight of a freshly grown block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadeState {
    raw: f32,
    pub trainable: bool,
}

impl FadeState {
    pub fn new(raw: f32, trainable: bool) -> Self {
        Self { raw, trainable }
    }

    /// Start of a stage: the new path has no weight yet.
    pub fn start(trainable: bool) -> Self {
        Self::new(0.0, trainable)
    }

    pub fn raw(&self) -> f32 {
        self.raw
    }

    pub fn alpha(&self) -> f32 {
        self.raw.clamp(0.0, 1.0)
    }
}

/// Per-layer feature normalization applied after each 3x3 convolution.
pub trait FeatureNorm: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, f: &Var) -> Var;
}

pub struct PixelEqualize;

impl FeatureNorm for PixelEqualize {
    fn name(&self) -> &'static str {
        "equalize"
    }

    fn apply(&self, f: &Var) -> Var {
        pixel_equalize(f, EQUALIZE_EPS)
    }
}

/// Standardizes each channel with statistics over the batch and both
/// spatial axes (no affine parameters).
pub struct BatchNorm;

impl FeatureNorm for BatchNorm {
    fn name(&self) -> &'static str {
        "batch"
    }

    fn apply(&self, f: &Var) -> Var {
        let (_, c, _, _) = f.value().dims4();
        standardize(f, &[1, c, 1, 1])
    }
}

/// Standardizes each channel of each sample over its spatial axes.
pub struct InstanceNorm;

impl FeatureNorm for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance"
    }

    fn apply(&self, f: &Var) -> Var {
        let (n, c, _, _) = f.value().dims4();
        standardize(f, &[n, c, 1, 1])
    }
}

const STANDARDIZE_EPS: f32 = 1e-5;

fn standardize(f: &Var, stat_shape: &[usize]) -> Var {
    let shape = f.shape().to_vec();
    let count = (f.value().numel() / stat_shape.iter().product::<usize>()) as f32;
    let mean = f.sum_to(stat_shape).scale(1.0 / count);
    let centered = f.sub(&mean.broadcast_to(&shape));
    let inv_std = centered
        .mul(&centered)
        .sum_to(stat_shape)
        .scale(1.0 / count)
        .add_scalar(STANDARDIZE_EPS)
        .powf(-0.5);
    centered.mul(&inv_std.broadcast_to(&shape))
}

pub fn norm_registry() -> &'static Registry<dyn FeatureNorm> {
    static REGISTRY: OnceLock<Registry<dyn FeatureNorm>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        Registry::new("norm")
            .with("equalize", || Arc::new(PixelEqualize) as Arc<dyn FeatureNorm>)
            .with("batch", || Arc::new(BatchNorm) as Arc<dyn FeatureNorm>)
            .with("instance", || Arc::new(InstanceNorm) as Arc<dyn FeatureNorm>)
    })
}

/// How the fade-in weight of the newest block evolves within a stage.
pub trait FadePolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the weight is a parameter updated by the optimizer.
    fn trainable(&self) -> bool;

    /// Scheduled weight at `step` of a stage of `budget` steps, for
    /// policies that dictate it.
    fn scheduled_alpha(&self, step: usize, budget: usize, fade_fraction: f32) -> Option<f32>;
}

pub struct TrainableFade;

impl FadePolicy for TrainableFade {
    fn name(&self) -> &'static str {
        "trainable"
    }

    fn trainable(&self) -> bool {
        true
    }

    fn scheduled_alpha(&self, _step: usize, _budget: usize, _fade_fraction: f32) -> Option<f32> {
        None
    }
}

/// Ramps the weight from 0 to 1 over the first `fade_fraction` of a stage.
pub struct LinearFade;

impl FadePolicy for LinearFade {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn trainable(&self) -> bool {
        false
    }

    fn scheduled_alpha(&self, step: usize, budget: usize, fade_fraction: f32) -> Option<f32> {
        let span = (budget as f32 * fade_fraction).max(1.0);
        Some((step as f32 / span).clamp(0.0, 1.0))
    }
}

pub fn fade_registry() -> &'static Registry<dyn FadePolicy> {
    static REGISTRY: OnceLock<Registry<dyn FadePolicy>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        Registry::new("fade")
            .with("trainable", || Arc::new(TrainableFade) as Arc<dyn FadePolicy>)
            .with("linear", || Arc::new(LinearFade) as Arc<dyn FadePolicy>)
    })
}
