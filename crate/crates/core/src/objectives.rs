//! WGAN-GP adversarial loss, auxiliary classification losses and their
//! combination into the discriminator and generator objectives.

use std::fmt;

use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_EPS: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_gp: f32,
    pub lambda_cls: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            lambda_cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0 && self.lambda_cls >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_gp={} lambda_cls={}",
                self.lambda_gp, self.lambda_cls
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub adv: f32,
    pub gp: f32,
    pub cls_real: f32,
    pub cls_fake: f32,
    pub total_d: f32,
    pub total_g: f32,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.adv, self.gp, self.cls_real, self.cls_fake, self.total_d, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "adv={} gp={} cls_real={} cls_fake={} total_D={} total_G={}",
            self.adv, self.gp, self.cls_real, self.cls_fake, self.total_d, self.total_g
        )
    }
}

/// `total_D = -adv + lambda_cls * cls_real`, `total_G = adv + lambda_cls * cls_fake`.
pub fn combine(adv: f32, gp: f32, cls_real: f32, cls_fake: f32, w: LossWeights) -> LossReport {
    LossReport {
        adv,
        gp,
        cls_real,
        cls_fake,
        total_d: -adv + w.lambda_cls * cls_real,
        total_g: adv + w.lambda_cls * cls_fake,
    }
}

/// Points on the segments between paired real and fake samples:
/// `t * real + (1 - t) * fake`, one `t` per sample.
pub fn interpolate(real: &Tensor, fake: &Tensor, t: &[f32]) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "real {:?} and fake {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.shape()[0];
    if t.len() != n {
        return Err(Error::Shape(format!("{} interpolation weights for {n} samples", t.len())));
    }
    let per = real.numel() / n.max(1);
    let mut out = real.clone();
    for ((o, f), i) in out.data_mut().iter_mut().zip(fake.data()).zip(0..) {
        let ti = t[i / per];
        *o = ti * *o + (1.0 - ti) * f;
    }
    Ok(out)
}

/// Per-sample input-gradient norms of `critic` at `x`, kept on the tape so
/// the result can itself be differentiated.
pub fn critic_gradient_norms(critic: impl FnOnce(&Var) -> Result<Var>, x: &Tensor) -> Result<Var> {
    let n = x.shape()[0];
    let xv = Var::leaf(x.clone());
    let scores = critic(&xv)?;
    if scores.shape() != [n] {
        return Err(Error::Shape(format!("critic returned {:?} for {n} samples", scores.shape())));
    }
    let g = grad(&scores.sum(), &[&xv], true)
        .pop()
        .flatten()
        .unwrap_or_else(|| Var::constant(Tensor::zeros(x.shape())));
    let per = x.numel() / n;
    let sq = g.mul(&g).reshape(&[n, per]).sum_to(&[n, 1]).reshape(&[n]);
    let norms = sq.add_scalar(NORM_EPS).sqrt();
    if !norms.value().all_finite() {
        return Err(Error::Numeric("non-finite critic gradient in the penalty".into()));
    }
    Ok(norms)
}

/// `lambda_gp * mean_i (||grad_x D_A(x*_i)|| - 1)^2` at `x* = t real + (1 - t) fake`.
pub fn gradient_penalty(
    critic: impl FnOnce(&Var) -> Result<Var>,
    real: &Tensor,
    fake: &Tensor,
    t: &[f32],
    lambda_gp: f32,
) -> Result<Var> {
    let x = interpolate(real, fake, t)?;
    let norms = critic_gradient_norms(critic, &x)?;
    let dev = norms.add_scalar(-1.0);
    Ok(dev.mul(&dev).mean().scale(lambda_gp))
}

/// `sum_i (E[D_A(x_i)] - E[D_A(x^_i)] - penalty_i)` over modalities.
pub fn adversarial_loss(real_scores: &[Var], fake_scores: &[Var], penalties: &[Var]) -> Result<Var> {
    if real_scores.len() != fake_scores.len() || real_scores.len() != penalties.len() {
        return Err(Error::Input(format!(
            "modality counts differ: {} real, {} fake, {} penalties",
            real_scores.len(),
            fake_scores.len(),
            penalties.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((r, f), p) in real_scores.iter().zip(fake_scores).zip(penalties) {
        let term = r.mean().sub(&f.mean()).sub(p);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    total.ok_or_else(|| Error::Input("no modalities".into()))
}

/// Batch-mean negative log-likelihood of target labels `[N, d_a + c]`:
/// one Bernoulli term per attribute slot (targets mapped from {-1, 1} to
/// {0, 1}) plus a categorical term over the modality slots.
pub fn label_nll(logits: &Var, labels: &Tensor, d_a: usize) -> Result<Var> {
    let shape = logits.shape().to_vec();
    if shape.len() != 2 || labels.shape() != shape.as_slice() || shape[1] <= d_a {
        return Err(Error::Shape(format!(
            "logits {:?} and labels {:?} must both be [N, d_a + c] with d_a = {d_a}",
            shape,
            labels.shape()
        )));
    }
    let (n, width) = (shape[0], shape[1]);
    let c = width - d_a;

    let attr_logits = logits.narrow(1, 0, d_a);
    let attr_targets = Var::constant(labels.narrow(1, 0, d_a).map(|v| (v + 1.0) * 0.5));
    let bernoulli = attr_logits.softplus().sub(&attr_logits.mul(&attr_targets));

    let mod_logits = logits.narrow(1, d_a, c);
    let row_max = {
        let v = mod_logits.value();
        let maxes: Vec<f32> = v
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect();
        Var::constant(Tensor::new(&[n, 1], maxes))
    };
    let shifted = mod_logits.sub(&row_max.broadcast_to(&[n, c]));
    let lse = shifted.exp().sum_to(&[n, 1]).ln();
    let onehot = Var::constant(labels.narrow(1, d_a, c));
    let picked = shifted.mul(&onehot).sum_to(&[n, 1]);
    let categorical = lse.sub(&picked);

    Ok(bernoulli.sum().add(&categorical.sum()).scale(1.0 / n as f32))
}

/// Sum over modalities of the batch-mean label NLL. Absent modalities
/// (`None`) are skipped and the sum rescaled to the full modality count.
pub fn classification_loss(per_modality: &[Option<(Var, Tensor)>], d_a: usize) -> Result<Var> {
    let c = per_modality.len();
    let mut total: Option<Var> = None;
    let mut present = 0;
    for (logits, labels) in per_modality.iter().flatten() {
        let term = label_nll(logits, labels, d_a)?;
        present += 1;
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Input("no modality present in the batch".into()))?;
    Ok(if present == c {
        total
    } else {
        total.scale(c as f32 / present as f32)
    })
}

/// The loss on real images drives the discriminator's estimation head.
pub fn classification_loss_real(per_modality: &[Option<(Var, Tensor)>], d_a: usize) -> Result<Var> {
    classification_loss(per_modality, d_a)
}

/// The same form on generated images drives the generator.
pub fn classification_loss_fake(per_modality: &[Option<(Var, Tensor)>], d_a: usize) -> Result<Var> {
    classification_loss(per_modality, d_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: f32) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    fn linear_critic(w: Vec<f32>) -> impl Fn(&Var) -> Result<Var> {
        move |x: &Var| {
            let n = x.shape()[0];
            let wv = Var::constant(Tensor::new(&[w.len(), 1], w.clone()));
            Ok(x.reshape(&[n, w.len()]).matmul(&wv).reshape(&[n]))
        }
    }

    #[test]
    fn penalty_of_unit_norm_linear_critic_is_zero() {
        let w = vec![0.6, 0.0, 0.8, 0.0];
        let real = Tensor::new(&[2, 1, 2, 2], vec![1.0; 8]);
        let fake = Tensor::zeros(&[2, 1, 2, 2]);
        let gp = gradient_penalty(linear_critic(w), &real, &fake, &[0.3, 0.9], 10.0).unwrap();
        assert!(gp.item().abs() < 1e-6);
    }

    #[test]
    fn penalty_of_doubling_critic_is_lambda() {
        let w = vec![2.0, 0.0, 0.0, 0.0];
        let real = Tensor::new(&[1, 4], vec![0.5, 0.1, -0.2, 0.3]);
        let fake = Tensor::zeros(&[1, 4]);
        let gp = gradient_penalty(linear_critic(w), &real, &fake, &[0.5], 10.0).unwrap();
        assert!((gp.item() - 10.0).abs() < 1e-6, "{}", gp.item());
    }

    #[test]
    fn penalty_gradient_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w1 = Tensor::new(&[6, 5], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w2 = Tensor::new(&[5, 1], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let critic_t = |x: &Tensor| -> f32 {
            let h = x.matmul(&w1).map(|v| if v > 0.0 { v } else { 0.2 * v });
            h.matmul(&w2).item()
        };
        let x = Tensor::new(&[1, 6], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let norms = critic_gradient_norms(
            |xv: &Var| {
                let h = xv.matmul(&Var::constant(w1.clone())).leaky_relu(0.2);
                Ok(h.matmul(&Var::constant(w2.clone())).reshape(&[1]))
            },
            &x,
        )
        .unwrap();
        let h = 1e-3;
        let mut sq = 0.0f64;
        for i in 0..6 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let d = ((critic_t(&p) - critic_t(&m)) / (2.0 * h)) as f64;
            sq += d * d;
        }
        let fd = sq.sqrt() as f32;
        assert!((norms.item() - fd).abs() <= 1e-3 * fd, "{} vs {fd}", norms.item());
    }

    #[test]
    fn penalty_is_differentiable_in_critic_params() {
        // critic x -> (w . x)^2 / 2 has input gradient (w . x) w
        let w = Var::leaf(Tensor::new(&[2, 1], vec![1.0, 2.0]));
        let x = Tensor::new(&[1, 2], vec![1.0, 0.0]);
        let w2 = w.clone();
        let norms = critic_gradient_norms(
            move |xv: &Var| {
                let d = xv.matmul(&w2).reshape(&[1]);
                Ok(d.mul(&d).scale(0.5))
            },
            &x,
        )
        .unwrap();
        // ||(w . x) w|| = 1 * sqrt(5)
        assert!((norms.item() - 5f32.sqrt()).abs() < 1e-5);
        let g = grad(&norms.sum(), &[&w], false)[0].clone().unwrap();
        // d/dw [ |w.x| ||w|| ] = x ||w|| + |w.x| w / ||w||
        let r5 = 5f32.sqrt();
        let expect = [r5 + 1.0 / r5, 2.0 / r5];
        for (a, e) in g.value().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn penalty_symmetric_in_real_and_fake_over_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let critic = |xv: &Var| Ok(xv.mul(xv).sum_to(&[xv.shape()[0], 1]).reshape(&[xv.shape()[0]]));
        let a = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]);
        let b = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]);
        let (mut ab, mut ba) = (0.0f64, 0.0f64);
        for _ in 0..10_000 {
            let t = [rng.random::<f32>()];
            ab += gradient_penalty(critic, &a, &b, &t, 10.0).unwrap().item() as f64;
            let t = [rng.random::<f32>()];
            ba += gradient_penalty(critic, &b, &a, &t, 10.0).unwrap().item() as f64;
        }
        assert!((ab - ba).abs() / ab.max(ba) < 0.02, "{ab} vs {ba}");
    }

    #[test]
    fn adversarial_loss_examples() {
        assert_eq!(adversarial_loss(&[s(0.4)], &[s(0.4)], &[s(0.0)]).unwrap().item(), 0.0);
        let loss = adversarial_loss(&[s(1.0), s(0.5)], &[s(0.2), s(0.1)], &[s(0.3), s(0.1)]).unwrap();
        assert!((loss.item() - 0.8).abs() < 1e-6);
        let one = adversarial_loss(&[s(1.0)], &[s(0.2)], &[s(0.3)]).unwrap().item();
        let two = adversarial_loss(&[s(0.5)], &[s(0.1)], &[s(0.1)]).unwrap().item();
        assert!((loss.item() - one - two).abs() < 1e-6);
        assert!(matches!(adversarial_loss(&[s(1.0)], &[], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn adversarial_loss_averages_batches() {
        let real = Var::constant(Tensor::new(&[2], vec![1.0, 3.0]));
        let fake = Var::constant(Tensor::new(&[4], vec![0.0, 0.0, 1.0, 1.0]));
        assert_eq!(adversarial_loss(&[real], &[fake], &[s(0.5)]).unwrap().item(), 1.0);
    }

    #[test]
    fn classification_loss_examples() {
        // d_a = 2, c = 3; label [1, -1 | 0 1 0]
        let labels = Tensor::new(&[1, 5], vec![1.0, -1.0, 0.0, 1.0, 0.0]);
        let confident = Var::constant(Tensor::new(&[1, 5], vec![30.0, -30.0, -30.0, 30.0, -30.0]));
        assert!(label_nll(&confident, &labels, 2).unwrap().item() < 1e-3);

        let uniform_mod = Var::constant(Tensor::new(&[1, 5], vec![30.0, -30.0, 0.0, 0.0, 0.0]));
        let v = label_nll(&uniform_mod, &labels, 2).unwrap().item();
        assert!((v - 3f32.ln()).abs() < 1e-6, "{v}");

        let zero_attr = Var::constant(Tensor::new(&[1, 5], vec![0.0, 0.0, -30.0, 30.0, -30.0]));
        let v = label_nll(&zero_attr, &labels, 2).unwrap().item();
        assert!((v - 2.0 * 2f32.ln()).abs() < 1e-6, "{v}");
    }

    #[test]
    fn classification_loss_sums_modalities_and_rescales_missing() {
        let labels = Tensor::new(&[1, 3], vec![1.0, 1.0, 0.0]);
        let logits = Var::constant(Tensor::zeros(&[1, 3]));
        let one = label_nll(&logits, &labels, 1).unwrap().item();
        let full = classification_loss(&[Some((logits.clone(), labels.clone())), Some((logits.clone(), labels.clone()))], 1)
            .unwrap()
            .item();
        assert!((full - 2.0 * one).abs() < 1e-6);
        let partial = classification_loss(&[Some((logits, labels)), None], 1).unwrap().item();
        assert!((partial - 2.0 * one).abs() < 1e-6);
        assert!(classification_loss(&[None, None], 1).is_err());
    }

    #[test]
    fn label_nll_gradient_matches_finite_differences() {
        let labels = Tensor::new(&[2, 4], vec![1.0, -1.0, 1.0, 0.0, -1.0, 1.0, 0.0, 1.0]);
        let base = Tensor::new(&[2, 4], vec![0.3, -1.2, 0.8, 0.1, 2.0, 0.4, -0.5, 1.5]);
        let lv = Var::leaf(base.clone());
        let g = grad(&label_nll(&lv, &labels, 2).unwrap(), &[&lv], false)[0].clone().unwrap();
        let f = |t: &Tensor| label_nll(&Var::constant(t.clone()), &labels, 2).unwrap().item();
        for i in 0..8 {
            let (mut p, mut m) = (base.clone(), base.clone());
            p.data_mut()[i] += 1e-2;
            m.data_mut()[i] -= 1e-2;
            let fd = (f(&p) - f(&m)) / 2e-2;
            assert!((fd - g.value().data()[i]).abs() < 1e-3, "{i}");
        }
    }

    #[test]
    fn combine_examples() {
        let w = LossWeights::default();
        let r = combine(0.0, 0.0, 0.0, 0.0, w);
        assert_eq!((r.total_d, r.total_g), (0.0, 0.0));
        let r = combine(0.8, 0.0, 0.5, 0.4, w);
        assert!((r.total_d + 0.3).abs() < 1e-6 && (r.total_g - 1.2).abs() < 1e-6);
        let pure = LossWeights { lambda_cls: 0.0, ..w };
        let r = combine(0.8, 0.1, 0.5, 0.4, pure);
        assert_eq!((r.total_d, r.total_g), (-0.8, 0.8));
    }

    proptest! {
        #[test]
        fn combine_identities(adv in -10.0f32..10.0, cr in 0.0f32..5.0, cf in 0.0f32..5.0, l in 0.0f32..3.0) {
            let r = combine(adv, 0.0, cr, cf, LossWeights { lambda_gp: 10.0, lambda_cls: l });
            prop_assert_eq!(r.total_d, -adv + l * cr);
            prop_assert_eq!(r.total_g, adv + l * cf);
        }

        #[test]
        fn label_nll_is_non_negative(vals in prop::collection::vec(-20.0f32..20.0, 5), bits in prop::collection::vec(any::<bool>(), 2), m in 0usize..3) {
            let mut label = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect::<Vec<f32>>();
            label.extend((0..3).map(|i| if i == m { 1.0 } else { 0.0 }));
            let v = label_nll(&Var::constant(Tensor::new(&[1, 5], vals)), &Tensor::new(&[1, 5], label), 2).unwrap().item();
            prop_assert!(v >= 0.0);
        }
    }
}
