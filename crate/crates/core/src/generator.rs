//! The multimodal generator: one shared trunk and, per resolution, a
//! stretch-out head with one 1x1 convolution per modality.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{no_grad, Var};
use crate::blocks::{fade_blend, fade_registry, norm_registry, upsample2x, FadeState, FeatureNorm, LEAKY_SLOPE};
use crate::codec::{AttributeVector, NoiseVector, Z_DIM};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, Linear, Module, Param};
use crate::tensor::Tensor;

pub const BASE_RESOLUTION: usize = 4;
pub const MAX_SUPPORTED_RESOLUTION: usize = 256;

/// Shared by both networks: the discriminator mirrors the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub c: usize,
    pub d_a: usize,
    pub z_dim: usize,
    pub max_resolution: usize,
    pub width_factor: f32,
    pub norm: String,
    pub fade: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            c: 3,
            d_a: 3,
            z_dim: Z_DIM,
            max_resolution: 32,
            width_factor: 0.25,
            norm: "equalize".into(),
            fade: "trainable".into(),
        }
    }
}

/// Full-width trunk channels at resolution `r`: 512 up to 8x8, then halving.
pub fn table_width(r: usize) -> usize {
    (4096 / r).min(512)
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::Config("modality count c must be at least 1".into()));
        }
        if self.d_a == 0 {
            return Err(Error::Config("attribute dimension d_a must be at least 1".into()));
        }
        if self.z_dim != Z_DIM {
            return Err(Error::Config(format!("z_dim must be {Z_DIM}, got {}", self.z_dim)));
        }
        let r = self.max_resolution;
        if !r.is_power_of_two() || !(BASE_RESOLUTION..=MAX_SUPPORTED_RESOLUTION).contains(&r) {
            return Err(Error::Config(format!(
                "max_resolution must be a power of two in [4, 256], got {r}"
            )));
        }
        if !(self.width_factor.is_finite() && self.width_factor > 0.0 && self.width_factor <= 1.0) {
            return Err(Error::Config(format!(
                "width_factor must be in (0, 1], got {}",
                self.width_factor
            )));
        }
        if let Some((r, w)) = self.channel_plan().into_iter().find(|&(_, w)| w == 0) {
            return Err(Error::Config(format!("width_factor leaves {w} channels at {r}x{r}")));
        }
        norm_registry().create(&self.norm).map_err(|e| Error::Config(e.to_string()))?;
        fade_registry().create(&self.fade).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn resolutions(&self) -> Vec<usize> {
        std::iter::successors(Some(BASE_RESOLUTION), |r| Some(r * 2))
            .take_while(|&r| r <= self.max_resolution)
            .collect()
    }

    /// `(resolution, trunk width)` for every stage up to `max_resolution`.
    pub fn channel_plan(&self) -> Vec<(usize, usize)> {
        self.resolutions()
            .into_iter()
            .map(|r| (r, (table_width(r) as f32 * self.width_factor).round() as usize))
            .collect()
    }

    pub fn width(&self, r: usize) -> usize {
        (table_width(r) as f32 * self.width_factor).round() as usize
    }

    pub fn label_dim(&self) -> usize {
        self.d_a + self.c
    }

    pub fn fade_trainable(&self) -> Result<bool> {
        Ok(fade_registry().create(&self.fade)?.trainable())
    }
}

/// Recorded `(layer, activation shape)` pairs from a traced forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

pub(crate) fn record(trace: &mut Option<&mut ShapeTrace>, label: impl Into<String>, v: &Var) {
    if let Some(t) = trace.as_deref_mut() {
        t.push((label.into(), v.shape().to_vec()));
    }
}

/// Fade weight as it enters the graph. Trainable weights are leaves clamped
/// to [0, 1] with a straight-through gradient; scheduled ones are constants.
pub(crate) fn alpha_var(b: &mut Binder, alpha: &Param, trainable: bool) -> Var {
    if trainable {
        b.bind(alpha).clamp_unit_straight_through()
    } else {
        Var::constant(Tensor::scalar(alpha.value.item().clamp(0.0, 1.0)))
    }
}

/// A blend is only skipped when it is fixed at a weight of one.
pub(crate) fn is_settled(alpha: &Param, trainable: bool) -> bool {
    !trainable && alpha.value.item() >= 1.0
}

#[derive(Debug, Clone, PartialEq)]
struct TransitionBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    alpha: Param,
}

/// c images of identical shape `[N, 3, R, R]`, one per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalImageSet {
    pub images: Vec<Tensor>,
}

impl MultimodalImageSet {
    pub fn resolution(&self) -> usize {
        self.images.first().map(|t| t.shape()[3]).unwrap_or(0)
    }

    /// The single sample `i` of a batched set, as `[3, R, R]` images.
    pub fn sample(&self, i: usize) -> Vec<Tensor> {
        self.images
            .iter()
            .map(|t| {
                let s = t.shape();
                t.narrow(0, i, 1).reshape(&[s[1], s[2], s[3]])
            })
            .collect()
    }
}

pub struct Generator {
    cfg: GeneratorConfig,
    norm: Arc<dyn FeatureNorm>,
    trainable_fade: bool,
    mlp: Linear,
    initial: Conv2d,
    blocks: Vec<TransitionBlock>,
    heads: Vec<Vec<Conv2d>>,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("resolution", &self.resolution())
            .field("c", &self.cfg.c)
            .field("d_a", &self.cfg.d_a)
            .finish()
    }
}

fn stretch_out(cfg: &GeneratorConfig, r: usize, rng: &mut impl Rng) -> Vec<Conv2d> {
    (0..cfg.c)
        .map(|m| Conv2d::new(&format!("g.out{r}.m{m}"), cfg.width(r), 3, 1, rng))
        .collect()
}

impl Generator {
    /// A generator at 4x4: MLP, initial block and one stretch-out head.
    pub fn build(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let norm = norm_registry().create(&cfg.norm)?;
        let trainable_fade = cfg.fade_trainable()?;
        let w4 = cfg.width(BASE_RESOLUTION);
        let mlp = Linear::new("g.mlp", cfg.z_dim + cfg.d_a, w4 * 16, rng);
        let initial = Conv2d::new("g.initial", w4, w4, 3, rng);
        let heads = vec![stretch_out(&cfg, BASE_RESOLUTION, rng)];
        Ok(Self {
            cfg,
            norm,
            trainable_fade,
            mlp,
            initial,
            blocks: Vec::new(),
            heads,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn resolution(&self) -> usize {
        BASE_RESOLUTION << self.blocks.len()
    }

    pub fn stage(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Adds a transition block and a stretch-out head at twice the
    /// resolution. The new path starts with zero weight.
    pub fn grow(&mut self, rng: &mut impl Rng) -> Result<()> {
        let r = self.resolution();
        if r >= self.cfg.max_resolution {
            return Err(Error::Growth(format!(
                "generator already at its maximum resolution {r}"
            )));
        }
        let next = r * 2;
        let (w_in, w_out) = (self.cfg.width(r), self.cfg.width(next));
        self.blocks.push(TransitionBlock {
            conv1: Conv2d::new(&format!("g.block{next}.conv1"), w_in, w_out, 3, rng),
            conv2: Conv2d::new(&format!("g.block{next}.conv2"), w_out, w_out, 3, rng),
            alpha: Param::new(format!("g.alpha{next}"), Tensor::scalar(0.0)),
        });
        self.heads.push(stretch_out(&self.cfg, next, rng));
        Ok(())
    }

    /// Fade state of the newest block; `None` at 4x4.
    pub fn fade(&self) -> Option<FadeState> {
        self.blocks
            .last()
            .map(|b| FadeState::new(b.alpha.value.item(), self.trainable_fade))
    }

    /// Sets the newest block's fade weight (scheduled fade, or tests).
    pub fn set_alpha(&mut self, alpha: f32) -> Result<()> {
        let block = self
            .blocks
            .last_mut()
            .ok_or_else(|| Error::Growth("no faded block at 4x4".into()))?;
        block.alpha.value = Tensor::scalar(alpha);
        Ok(())
    }

    pub fn trainable_fade(&self) -> bool {
        self.trainable_fade
    }

    /// Maps `z` `[N, z_dim]` and `y_a` `[N, d_a]` to c image batches.
    pub fn forward(&self, b: &mut Binder, z: &Var, y_a: &Var) -> Result<Vec<Var>> {
        self.forward_traced(b, z, y_a, None)
    }

    pub fn forward_traced(
        &self,
        b: &mut Binder,
        z: &Var,
        y_a: &Var,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Vec<Var>> {
        let n = z.shape()[0];
        if z.shape() != [n, self.cfg.z_dim] || y_a.shape() != [n, self.cfg.d_a] {
            return Err(Error::Input(format!(
                "expected z [N, {}] and y_a [N, {}], got {:?} and {:?}",
                self.cfg.z_dim,
                self.cfg.d_a,
                z.shape(),
                y_a.shape()
            )));
        }
        let w4 = self.cfg.width(BASE_RESOLUTION);
        let code = Var::concat(&[z.clone(), y_a.clone()], 1);
        record(&mut trace, "input code", &code);
        let mut h = self
            .mlp
            .forward(b, &code)
            .leaky_relu(LEAKY_SLOPE)
            .reshape(&[n, w4, BASE_RESOLUTION, BASE_RESOLUTION]);
        record(&mut trace, "mlp", &h);
        h = self.conv_act(b, &self.initial, &h);
        record(&mut trace, "initial", &h);

        // Heads below the deepest settled blend never reach the output.
        let start = (1..=self.blocks.len())
            .rev()
            .find(|&j| is_settled(&self.blocks[j - 1].alpha, self.trainable_fade))
            .unwrap_or(0);

        let mut out = None;
        if start == 0 {
            out = Some(self.head(b, 0, &h));
            record(&mut trace, "stretch-out 4", &out.as_ref().unwrap()[0]);
        }
        for (j, block) in self.blocks.iter().enumerate().map(|(i, blk)| (i + 1, blk)) {
            let r = BASE_RESOLUTION << j;
            h = upsample2x(&h)?;
            record(&mut trace, format!("upsample {r}"), &h);
            h = self.conv_act(b, &block.conv1, &h);
            record(&mut trace, format!("conv1 {r}"), &h);
            h = self.conv_act(b, &block.conv2, &h);
            record(&mut trace, format!("conv2 {r}"), &h);
            if j < start {
                continue;
            }
            let new = self.head(b, j, &h);
            let blended = match out.take() {
                Some(prev) if !is_settled(&block.alpha, self.trainable_fade) => {
                    let alpha = alpha_var(b, &block.alpha, self.trainable_fade);
                    new.iter()
                        .zip(&prev)
                        .map(|(nw, old)| fade_blend(nw, &upsample2x(old)?, &alpha))
                        .collect::<Result<Vec<_>>>()?
                }
                _ => new,
            };
            record(&mut trace, format!("stretch-out {r}"), &blended[0]);
            out = Some(blended);
        }
        Ok(out.expect("at least one head is evaluated"))
    }

    fn conv_act(&self, b: &mut Binder, conv: &Conv2d, x: &Var) -> Var {
        self.norm.apply(&conv.forward(b, x).leaky_relu(LEAKY_SLOPE))
    }

    fn head(&self, b: &mut Binder, level: usize, h: &Var) -> Vec<Var> {
        self.heads[level].iter().map(|conv| conv.forward(b, h)).collect()
    }

    /// Inference on plain tensors with no tape.
    pub fn generate(&self, z: &Tensor, y_a: &Tensor) -> Result<MultimodalImageSet> {
        no_grad(|| {
            let out = self.forward(
                &mut Binder::frozen(),
                &Var::constant(z.clone()),
                &Var::constant(y_a.clone()),
            )?;
            Ok(MultimodalImageSet {
                images: out.into_iter().map(|v| v.value().clone()).collect(),
            })
        })
    }

    /// One `(z, y_a)` pair to c images of shape `[1, 3, R, R]`.
    pub fn synthesize(&self, z: &NoiseVector, y_a: &AttributeVector) -> Result<MultimodalImageSet> {
        if y_a.len() != self.cfg.d_a {
            return Err(Error::Input(format!(
                "attribute vector has {} values, generator expects {}",
                y_a.len(),
                self.cfg.d_a
            )));
        }
        let z = Tensor::new(&[1, self.cfg.z_dim], z.values().to_vec());
        let y = Tensor::new(&[1, self.cfg.d_a], y_a.values().to_vec());
        self.generate(&z, &y)
    }

    /// Zeroes modality `m`'s stretch-out convolutions at every resolution.
    pub fn zero_head(&mut self, m: usize) {
        for level in &mut self.heads {
            for p in level[m].params_mut() {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.mlp.weight, &self.mlp.bias];
        out.extend(self.initial.params());
        for (j, level) in self.heads.iter().enumerate() {
            if j > 0 {
                let blk = &self.blocks[j - 1];
                out.extend(blk.conv1.params());
                out.extend(blk.conv2.params());
                out.push(&blk.alpha);
            }
            for conv in level {
                out.extend(conv.params());
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.mlp.weight, &mut self.mlp.bias];
        out.extend(self.initial.params_mut());
        let mut blocks = self.blocks.iter_mut();
        for (j, level) in self.heads.iter_mut().enumerate() {
            if j > 0 {
                let blk = blocks.next().expect("one block per grown head");
                out.extend(blk.conv1.params_mut());
                out.extend(blk.conv2.params_mut());
                out.push(&mut blk.alpha);
            }
            for conv in level {
                out.extend(conv.params_mut());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(c: usize) -> GeneratorConfig {
        GeneratorConfig {
            c,
            d_a: 2,
            max_resolution: 16,
            width_factor: 1.0 / 32.0,
            ..GeneratorConfig::default()
        }
    }

    fn inputs(n: usize, d_a: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (0..n * Z_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..n * d_a).map(|_| rng.random_range(-1.0..1.0)).collect();
        (Tensor::new(&[n, Z_DIM], z), Tensor::new(&[n, d_a], y))
    }

    #[test]
    fn channel_plan_follows_table() {
        let full = GeneratorConfig {
            max_resolution: 256,
            width_factor: 1.0,
            ..GeneratorConfig::default()
        };
        assert_eq!(
            full.channel_plan(),
            vec![(4, 512), (8, 512), (16, 256), (32, 128), (64, 64), (128, 32), (256, 16)]
        );
        let desk = GeneratorConfig::default();
        assert_eq!(desk.channel_plan(), vec![(4, 128), (8, 128), (16, 64), (32, 32)]);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            GeneratorConfig { c: 0, ..tiny(1) },
            GeneratorConfig { max_resolution: 24, ..tiny(1) },
            GeneratorConfig { max_resolution: 512, ..tiny(1) },
            GeneratorConfig { width_factor: 0.0, ..tiny(1) },
            GeneratorConfig { width_factor: 1.0 / 1024.0, ..tiny(1) },
            GeneratorConfig { norm: "layer".into(), ..tiny(1) },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn forward_emits_c_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::build(tiny(3), &mut rng).unwrap();
        let (z, y) = inputs(2, 2, 5);
        let out = g.generate(&z, &y).unwrap();
        assert_eq!(out.images.len(), 3);
        for img in &out.images {
            assert_eq!(img.shape(), [2, 3, 4, 4]);
        }
        assert_eq!(g.generate(&z, &y).unwrap(), out);
    }

    #[test]
    fn wrong_input_dims_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::build(tiny(1), &mut rng).unwrap();
        let (z, _) = inputs(1, 2, 0);
        assert!(matches!(g.generate(&z, &Tensor::zeros(&[1, 3])), Err(Error::Input(_))));
    }

    #[test]
    fn growth_preserves_old_params_and_starts_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Generator::build(tiny(2), &mut rng).unwrap();
        let (z, y) = inputs(2, 2, 3);
        for _ in 0..2 {
            let before = g.generate(&z, &y).unwrap();
            let old: Vec<Param> = g.params().into_iter().cloned().collect();
            g.grow(&mut rng).unwrap();
            for p in &old {
                let now = g.params().into_iter().find(|q| q.name == p.name).unwrap();
                assert_eq!(now, p);
            }
            let after = g.generate(&z, &y).unwrap();
            for (a, b) in after.images.iter().zip(&before.images) {
                assert_eq!(a, &b.upsample2x());
            }
            g.set_alpha(0.37).unwrap();
        }
        assert_eq!(g.resolution(), 16);
        assert_eq!(g.head_count(), 3);
        assert!(matches!(g.grow(&mut rng), Err(Error::Growth(_))));
    }

    #[test]
    fn zeroing_a_head_only_changes_that_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Generator::build(tiny(3), &mut rng).unwrap();
        g.grow(&mut rng).unwrap();
        g.set_alpha(0.5).unwrap();
        let (z, y) = inputs(1, 2, 0);
        let before = g.generate(&z, &y).unwrap();
        g.zero_head(1);
        let after = g.generate(&z, &y).unwrap();
        assert_eq!(before.images[0], after.images[0]);
        assert_eq!(before.images[2], after.images[2]);
        assert!(after.images[1].data().iter().all(|&v| v == 0.0));
        assert_ne!(before.images[1], after.images[1]);
    }

    #[test]
    fn param_names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Generator::build(tiny(2), &mut rng).unwrap();
        g.grow(&mut rng).unwrap();
        let names: std::collections::HashSet<_> = g.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), g.params().len());
        assert_eq!(g.params_mut().len(), g.params().len());
    }
}
