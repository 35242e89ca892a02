//! The multimodal discriminator: per-resolution stretch-in convolutions
//! (one per modality) feeding a shared down-stream trunk and two heads,
//! a critic score and an auxiliary label estimate.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{no_grad, Var};
use crate::blocks::{downsample2x, fade_blend, norm_registry, FadeState, FeatureNorm, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::generator::{alpha_var, is_settled, record, GeneratorConfig, ShapeTrace, BASE_RESOLUTION};
use crate::nn::{Binder, Conv2d, Linear, Module, Param};
use crate::tensor::Tensor;

/// Width of the authentication head before it is averaged to one score.
pub const CRITIC_UNITS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    alpha: Param,
}

/// Critic scores `[N]` and label logits `[N, d_a + c]`.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub score: Var,
    pub logits: Var,
}

pub struct Discriminator {
    cfg: GeneratorConfig,
    norm: Arc<dyn FeatureNorm>,
    trainable_fade: bool,
    /// `stretch_in[j]` handles resolution `4 << j`.
    stretch_in: Vec<Vec<Conv2d>>,
    /// `blocks[j - 1]` takes resolution `4 << j` down to `4 << (j - 1)`.
    blocks: Vec<DownBlock>,
    base: Conv2d,
    head_a: Linear,
    head_c: Linear,
}

impl std::fmt::Debug for Discriminator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discriminator")
            .field("resolution", &self.resolution())
            .field("c", &self.cfg.c)
            .field("d_a", &self.cfg.d_a)
            .finish()
    }
}

fn stretch_in(cfg: &GeneratorConfig, r: usize, rng: &mut impl Rng) -> Vec<Conv2d> {
    (0..cfg.c)
        .map(|m| Conv2d::new(&format!("d.in{r}.m{m}"), 3, cfg.width(r), 1, rng))
        .collect()
}

impl Discriminator {
    pub fn build(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let norm = norm_registry().create(&cfg.norm)?;
        let trainable_fade = cfg.fade_trainable()?;
        let w4 = cfg.width(BASE_RESOLUTION);
        let stretch = vec![stretch_in(&cfg, BASE_RESOLUTION, rng)];
        let base = Conv2d::new("d.base", w4, w4, 3, rng);
        let head_a = Linear::new("d.head_a", w4 * 16, CRITIC_UNITS, rng);
        let head_c = Linear::new("d.head_c", w4 * 16, cfg.label_dim(), rng);
        Ok(Self {
            cfg,
            norm,
            trainable_fade,
            stretch_in: stretch,
            blocks: Vec::new(),
            base,
            head_a,
            head_c,
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

    pub fn stretch_in_count(&self) -> usize {
        self.stretch_in.len()
    }

    /// Prepends a stretch-in and a down-stream block at twice the resolution.
    pub fn grow(&mut self, rng: &mut impl Rng) -> Result<()> {
        let r = self.resolution();
        if r >= self.cfg.max_resolution {
            return Err(Error::Growth(format!(
                "discriminator already at its maximum resolution {r}"
            )));
        }
        let next = r * 2;
        let (w_hi, w_lo) = (self.cfg.width(next), self.cfg.width(r));
        self.stretch_in.push(stretch_in(&self.cfg, next, rng));
        self.blocks.push(DownBlock {
            conv1: Conv2d::new(&format!("d.block{next}.conv1"), w_hi, w_hi, 3, rng),
            conv2: Conv2d::new(&format!("d.block{next}.conv2"), w_hi, w_lo, 3, rng),
            alpha: Param::new(format!("d.alpha{next}"), Tensor::scalar(0.0)),
        });
        Ok(())
    }

    pub fn fade(&self) -> Option<FadeState> {
        self.blocks
            .last()
            .map(|b| FadeState::new(b.alpha.value.item(), self.trainable_fade))
    }

    pub fn set_alpha(&mut self, alpha: f32) -> Result<()> {
        let block = self
            .blocks
            .last_mut()
            .ok_or_else(|| Error::Growth("no faded block at 4x4".into()))?;
        block.alpha.value = Tensor::scalar(alpha);
        Ok(())
    }

    /// Scores a batch of images `[N, 3, R, R]` of modality `m`.
    pub fn forward(&self, b: &mut Binder, x: &Var, m: usize) -> Result<DiscOutput> {
        self.forward_groups(b, &[(m, x.clone())], None)
    }

    /// Scores several modality batches in one trunk pass. Outputs are
    /// concatenated in the order of `groups`.
    pub fn forward_groups(
        &self,
        b: &mut Binder,
        groups: &[(usize, Var)],
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<DiscOutput> {
        let r = self.resolution();
        if groups.is_empty() {
            return Err(Error::Input("no images to score".into()));
        }
        for (m, x) in groups {
            if *m >= self.cfg.c {
                return Err(Error::Input(format!(
                    "modality index {m} out of range for c = {}",
                    self.cfg.c
                )));
            }
            match x.shape() {
                [_, 3, h, w] if *h == r && *w == r => {}
                s => {
                    return Err(Error::Input(format!(
                        "discriminator at {r}x{r} expects [N, 3, {r}, {r}], got {s:?}"
                    )))
                }
            }
        }
        let k = self.blocks.len();
        let mut h = self.stretch(b, k, groups);
        record(&mut trace, format!("stretch-in {r}"), &h);

        // Inputs for the skip paths: images at each lower resolution.
        let mut lowered: Vec<Var> = groups.iter().map(|(_, x)| x.clone()).collect();
        for j in (1..=k).rev() {
            let block = &self.blocks[j - 1];
            let rj = BASE_RESOLUTION << j;
            h = self.conv_act(b, &block.conv1, &h);
            record(&mut trace, format!("conv1 {rj}"), &h);
            h = self.conv_act(b, &block.conv2, &h);
            record(&mut trace, format!("conv2 {rj}"), &h);
            h = downsample2x(&h)?;
            record(&mut trace, format!("downsample {rj}"), &h);
            let settled = is_settled(&block.alpha, self.trainable_fade);
            // Lower the raw images only while some shallower blend still needs them.
            let needed = (1..=j).any(|i| !is_settled(&self.blocks[i - 1].alpha, self.trainable_fade));
            if needed {
                lowered = lowered.iter().map(downsample2x).collect::<Result<_>>()?;
            }
            if !settled {
                let low: Vec<(usize, Var)> = groups
                    .iter()
                    .zip(&lowered)
                    .map(|((m, _), x)| (*m, x.clone()))
                    .collect();
                let skip = self.stretch(b, j - 1, &low);
                let alpha = alpha_var(b, &block.alpha, self.trainable_fade);
                h = fade_blend(&h, &skip, &alpha)?;
            }
        }
        h = self.conv_act(b, &self.base, &h);
        record(&mut trace, "base", &h);
        let n = h.shape()[0];
        let flat = h.reshape(&[n, h.value().numel() / n]);
        record(&mut trace, "reshape", &flat);
        let a = self.head_a.forward(b, &flat);
        record(&mut trace, "head_a", &a);
        let logits = self.head_c.forward(b, &flat);
        record(&mut trace, "head_c", &logits);
        let score = a.sum_to(&[n, 1]).scale(1.0 / CRITIC_UNITS as f32).reshape(&[n]);
        Ok(DiscOutput { score, logits })
    }

    fn stretch(&self, b: &mut Binder, level: usize, groups: &[(usize, Var)]) -> Var {
        let parts: Vec<Var> = groups
            .iter()
            .map(|(m, x)| self.stretch_in[level][*m].forward(b, x))
            .collect();
        if parts.len() == 1 {
            parts.into_iter().next().unwrap()
        } else {
            Var::concat(&parts, 0)
        }
    }

    fn conv_act(&self, b: &mut Binder, conv: &Conv2d, x: &Var) -> Var {
        self.norm.apply(&conv.forward(b, x).leaky_relu(LEAKY_SLOPE))
    }

    /// Tape-free scores and logits for one modality batch.
    pub fn evaluate(&self, x: &Tensor, m: usize) -> Result<(Tensor, Tensor)> {
        no_grad(|| {
            let out = self.forward(&mut Binder::frozen(), &Var::constant(x.clone()), m)?;
            Ok((out.score.value().clone(), out.logits.value().clone()))
        })
    }

    /// Stretch-in features of modality `m` at the current resolution.
    pub fn stretch_features(&self, x: &Tensor, m: usize) -> Tensor {
        no_grad(|| {
            self.stretch(&mut Binder::frozen(), self.blocks.len(), &[(m, Var::constant(x.clone()))])
                .value()
                .clone()
        })
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for (j, level) in self.stretch_in.iter().enumerate() {
            for conv in level {
                out.extend(conv.params());
            }
            if j > 0 {
                let blk = &self.blocks[j - 1];
                out.extend(blk.conv1.params());
                out.extend(blk.conv2.params());
                out.push(&blk.alpha);
            }
        }
        out.extend(self.base.params());
        out.extend([&self.head_a.weight, &self.head_a.bias, &self.head_c.weight, &self.head_c.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        let mut blocks = self.blocks.iter_mut();
        for (j, level) in self.stretch_in.iter_mut().enumerate() {
            for conv in level {
                out.extend(conv.params_mut());
            }
            if j > 0 {
                let blk = blocks.next().expect("one block per grown stretch-in");
                out.extend(blk.conv1.params_mut());
                out.extend(blk.conv2.params_mut());
                out.push(&mut blk.alpha);
            }
        }
        out.extend(self.base.params_mut());
        out.extend([
            &mut self.head_a.weight,
            &mut self.head_a.bias,
            &mut self.head_c.weight,
            &mut self.head_c.bias,
        ]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            c: 3,
            d_a: 5,
            max_resolution: 16,
            width_factor: 1.0 / 32.0,
            ..GeneratorConfig::default()
        }
    }

    fn images(n: usize, r: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[n, 3, r, r], (0..n * 3 * r * r).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn heads_have_expected_arity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::build(tiny(), &mut rng).unwrap();
        let (s, l) = d.evaluate(&images(2, 4, 1), 0).unwrap();
        assert_eq!(s.shape(), [2]);
        assert_eq!(l.shape(), [2, 8]);
    }

    #[test]
    fn rejects_wrong_resolution_and_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::build(tiny(), &mut rng).unwrap();
        assert!(matches!(d.evaluate(&images(1, 8, 1), 0), Err(Error::Input(_))));
        assert!(matches!(d.evaluate(&images(1, 4, 1), 3), Err(Error::Input(_))));
    }

    #[test]
    fn growth_starts_at_downsampled_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Discriminator::build(tiny(), &mut rng).unwrap();
        for r in [8, 16] {
            let x = images(2, r, r as u64);
            let before = d.evaluate(&x.downsample2x(), 1).unwrap();
            d.grow(&mut rng).unwrap();
            let after = d.evaluate(&x, 1).unwrap();
            assert_eq!(before, after);
            d.set_alpha(0.6).unwrap();
        }
        assert_eq!(d.stretch_in_count(), 3);
        assert!(d.grow(&mut rng).is_err());
    }

    #[test]
    fn grouped_pass_matches_separate_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Discriminator::build(tiny(), &mut rng).unwrap();
        d.grow(&mut rng).unwrap();
        d.set_alpha(0.3).unwrap();
        let (x0, x2) = (images(2, 8, 1), images(3, 8, 2));
        let joint = no_grad(|| {
            d.forward_groups(
                &mut Binder::frozen(),
                &[(0, Var::constant(x0.clone())), (2, Var::constant(x2.clone()))],
                None,
            )
            .unwrap()
        });
        let (s0, _) = d.evaluate(&x0, 0).unwrap();
        let (s2, _) = d.evaluate(&x2, 2).unwrap();
        let expect = Tensor::concat(&[&s0, &s2], 0);
        assert!(joint.score.value().max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn modality_branches_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Discriminator::build(tiny(), &mut rng).unwrap();
        let x = images(1, 4, 9);
        assert_ne!(d.stretch_features(&x, 0), d.stretch_features(&x, 1));
    }

    #[test]
    fn critic_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut d = Discriminator::build(tiny(), &mut rng).unwrap();
        d.grow(&mut rng).unwrap();
        d.set_alpha(0.5).unwrap();
        let x = images(1, 8, 3);
        let xv = Var::leaf(x.clone());
        let out = d.forward(&mut Binder::frozen(), &xv, 2).unwrap();
        let g = grad(&out.score.sum(), &[&xv], false)[0].clone().unwrap();
        let h = 1e-2f32;
        for idx in [0usize, 17, 64, 100, 191] {
            let mut plus = x.clone();
            plus.data_mut()[idx] += h;
            let mut minus = x.clone();
            minus.data_mut()[idx] -= h;
            let fd = (d.evaluate(&plus, 2).unwrap().0.item() - d.evaluate(&minus, 2).unwrap().0.item()) / (2.0 * h);
            let an = g.value().data()[idx];
            assert!((fd - an).abs() <= 2e-3 * an.abs().max(1.0), "{idx}: fd {fd} analytic {an}");
        }
    }
}
