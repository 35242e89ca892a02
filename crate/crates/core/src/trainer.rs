//! Progressive training: the resolution schedule, alternating critic and
//! generator updates, fade-in management, checkpoints and sample grids.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{no_grad, Var};
use crate::blocks::{fade_registry, FadePolicy};
use crate::checkpoint::Checkpoint;
use crate::codec::{noise_registry, AttributeSchema, NoiseSampler};
use crate::config::{ScheduleScale, TrainConfig};
use crate::datasets::{sample_batch, Dataset, StageData};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::export::{grid, save_png};
use crate::generator::{Generator, BASE_RESOLUTION};
use crate::nn::{Adam, AdamConfig, Binder, Module, Moments, Param};
use crate::objectives::{
    adversarial_loss, classification_loss_fake, classification_loss_real, combine, critic_gradient_norms,
    interpolate, LossReport,
};
use crate::tensor::Tensor;

/// Full-scale iteration budgets for 4x4 through 256x256.
pub const FULL_SCALE_BUDGETS: [usize; 7] = [48_000, 96_000, 96_000, 96_000, 96_000, 96_000, 200_000];
pub const FADE_FRACTION: f32 = 0.5;
pub const GRID_COLUMNS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub resolution: usize,
    pub budget: usize,
    pub fade_fraction: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionSchedule {
    pub stages: Vec<Stage>,
}

impl ResolutionSchedule {
    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.budget).sum()
    }
}

pub fn make_schedule(max_resolution: usize, scale: ScheduleScale) -> Result<ResolutionSchedule> {
    if !max_resolution.is_power_of_two() || !(4..=256).contains(&max_resolution) {
        return Err(Error::Config(format!(
            "max_resolution must be a power of two in [4, 256], got {max_resolution}"
        )));
    }
    let count = (max_resolution / BASE_RESOLUTION).trailing_zeros() as usize + 1;
    let stages = FULL_SCALE_BUDGETS[..count]
        .iter()
        .enumerate()
        .map(|(i, &b)| Stage {
            resolution: BASE_RESOLUTION << i,
            budget: match scale {
                ScheduleScale::Full => b,
                ScheduleScale::Desk(f) => (b / f as usize).max(1),
            },
            fade_fraction: FADE_FRACTION,
        })
        .collect();
    Ok(ResolutionSchedule { stages })
}

pub struct TrainState {
    pub config: TrainConfig,
    pub schema: AttributeSchema,
    pub modalities: Vec<String>,
    pub schedule: ResolutionSchedule,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub stage: usize,
    /// Steps completed in the current stage.
    pub step: usize,
    pub global_step: usize,
    pub rng: ChaCha8Rng,
    noise: Arc<dyn NoiseSampler>,
    fade: Arc<dyn FadePolicy>,
}

fn adam_config(lr: f32) -> AdamConfig {
    AdamConfig {
        lr,
        ..AdamConfig::default()
    }
}

fn clamp_alphas(params: Vec<&mut Param>) {
    for p in params {
        if p.name.contains(".alpha") {
            let v = p.value.item().clamp(0.0, 1.0);
            p.value = Tensor::scalar(v);
        }
    }
}

impl TrainState {
    pub fn new(config: TrainConfig, schema: AttributeSchema, modalities: Vec<String>) -> Result<Self> {
        config.validate()?;
        if schema.len() != config.d_a || modalities.len() != config.c {
            return Err(Error::Config(format!(
                "config expects c={} d_a={}, data has {} modalities and {} attributes",
                config.c,
                config.d_a,
                modalities.len(),
                schema.len()
            )));
        }
        let schedule = make_schedule(config.max_resolution, config.schedule_scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::build(config.network(), &mut rng)?;
        let discriminator = Discriminator::build(config.network(), &mut rng)?;
        let noise = noise_registry().create(&config.noise)?;
        let fade = fade_registry().create(&config.fade)?;
        Ok(Self {
            opt_g: Adam::new(adam_config(config.lr)),
            opt_d: Adam::new(adam_config(config.lr)),
            config,
            schema,
            modalities,
            schedule,
            generator,
            discriminator,
            stage: 0,
            step: 0,
            global_step: 0,
            rng,
            noise,
            fade,
        })
    }

    pub fn current_stage(&self) -> Stage {
        self.schedule.stages[self.stage]
    }

    pub fn resolution(&self) -> usize {
        self.generator.resolution()
    }

    pub fn is_last_stage(&self) -> bool {
        self.stage + 1 == self.schedule.stages.len()
    }

    pub fn stage_done(&self) -> bool {
        self.step >= self.current_stage().budget
    }

    pub fn alpha(&self) -> f32 {
        self.generator.fade().map(|f| f.alpha()).unwrap_or(1.0)
    }

    /// Grows both networks and moves to the next stage.
    pub fn advance_stage(&mut self) -> Result<()> {
        if self.is_last_stage() {
            return Err(Error::Growth("already at the final stage".into()));
        }
        self.generator.grow(&mut self.rng)?;
        self.discriminator.grow(&mut self.rng)?;
        self.stage += 1;
        self.step = 0;
        Ok(())
    }

    fn draw_codes(&mut self, n: usize, pool: &[&[f32]]) -> (Tensor, Tensor) {
        let z_dim = self.config.network().z_dim;
        let mut z = vec![0.0f32; n * z_dim];
        self.noise.fill(&mut self.rng, &mut z);
        let mut y = Vec::with_capacity(n * self.config.d_a);
        for _ in 0..n {
            let pick = self.rng.random_range(0..pool.len());
            y.extend_from_slice(pool[pick]);
        }
        (Tensor::new(&[n, z_dim], z), Tensor::new(&[n, self.config.d_a], y))
    }

    fn target_labels(&self, y: &Tensor, m: usize) -> Tensor {
        let (n, d_a, c) = (y.shape()[0], self.config.d_a, self.config.c);
        let mut out = Vec::with_capacity(n * (d_a + c));
        for row in y.data().chunks(d_a) {
            out.extend_from_slice(row);
            out.extend((0..c).map(|i| if i == m { 1.0 } else { 0.0 }));
        }
        Tensor::new(&[n, d_a + c], out)
    }

    /// One critic update followed by one generator update.
    pub fn train_step(&mut self, data: &StageData) -> Result<LossReport> {
        let r = self.resolution();
        if data.resolution != r {
            return Err(Error::Input(format!(
                "batch resolution {} does not match stage resolution {r}",
                data.resolution
            )));
        }
        let stage = self.current_stage();
        if let Some(a) = self.fade.scheduled_alpha(self.step, stage.budget, stage.fade_fraction) {
            if self.stage > 0 {
                self.generator.set_alpha(a)?;
                self.discriminator.set_alpha(a)?;
            }
        }
        let (c, d_a, b) = (self.config.c, self.config.d_a, self.config.batch);
        let weights = self.config.weights();

        let mut reals = Vec::with_capacity(c);
        for m in 0..c {
            reals.push(if data.modalities[m].count == 0 {
                None
            } else {
                Some(sample_batch(data, m, b, &mut self.rng)?)
            });
        }
        let present: Vec<usize> = (0..c).filter(|&m| reals[m].is_some()).collect();
        if present.is_empty() {
            return Err(Error::Data("every modality is empty".into()));
        }
        let pool_labels: Vec<Tensor> = reals.iter().flatten().map(|(_, l)| l.clone()).collect();
        let pool: Vec<&[f32]> = pool_labels
            .iter()
            .flat_map(|l| l.data().chunks(d_a + c).map(|row| &row[..d_a]))
            .collect();

        // Critic update.
        let (z, y) = self.draw_codes(b, &pool);
        let fakes = self.generator.generate(&z, &y)?.images;
        let t: Vec<f32> = (0..present.len() * b).map(|_| self.rng.random::<f32>()).collect();

        let mut db = Binder::trainable();
        let mut groups = Vec::with_capacity(2 * present.len());
        for &m in &present {
            groups.push((m, Var::constant(reals[m].as_ref().unwrap().0.clone())));
        }
        for &m in &present {
            groups.push((m, Var::constant(fakes[m].clone())));
        }
        let out = self.discriminator.forward_groups(&mut db, &groups, None)?;
        let k = present.len();
        let real_scores: Vec<Var> = (0..k).map(|i| out.score.narrow(0, i * b, b)).collect();
        let fake_scores: Vec<Var> = (0..k).map(|i| out.score.narrow(0, (k + i) * b, b)).collect();
        let mut cls_terms = vec![None; c];
        for (i, &m) in present.iter().enumerate() {
            let logits = out.logits.narrow(0, i * b, b);
            cls_terms[m] = Some((logits, reals[m].as_ref().unwrap().1.clone()));
        }

        let mixed: Vec<Tensor> = present
            .iter()
            .enumerate()
            .map(|(i, &m)| interpolate(&reals[m].as_ref().unwrap().0, &fakes[m], &t[i * b..(i + 1) * b]))
            .collect::<Result<_>>()?;
        let mixed_refs: Vec<&Tensor> = mixed.iter().collect();
        let x_hat = Tensor::concat(&mixed_refs, 0);
        let disc = &self.discriminator;
        let norms = critic_gradient_norms(
            |xv: &Var| {
                let groups: Vec<(usize, Var)> = present
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| (m, xv.narrow(0, i * b, b)))
                    .collect();
                Ok(disc.forward_groups(&mut db, &groups, None)?.score)
            },
            &x_hat,
        )?;
        let penalties: Vec<Var> = (0..k)
            .map(|i| {
                let dev = norms.narrow(0, i * b, b).add_scalar(-1.0);
                dev.mul(&dev).mean().scale(weights.lambda_gp)
            })
            .collect();
        let adv = adversarial_loss(&real_scores, &fake_scores, &penalties)?;
        let cls_real = classification_loss_real(&cls_terms, d_a)?;
        let total_d = adv.neg().add(&cls_real.scale(weights.lambda_cls));
        let gp_value: f32 = penalties.iter().map(|p| p.item()).sum();
        let (adv_value, cls_real_value) = (adv.item(), cls_real.item());
        if !(total_d.item().is_finite()) {
            let report = combine(adv_value, gp_value, cls_real_value, f32::NAN, weights);
            return Err(Error::Numeric(format!(
                "non-finite critic loss at step {}: {report}",
                self.global_step
            )));
        }
        let grads = db.gradients(&total_d);
        drop(db);
        self.opt_d.step(self.discriminator.params_mut(), &grads)?;
        clamp_alphas(self.discriminator.params_mut());

        // Generator update.
        let (z, y) = self.draw_codes(b, &pool);
        let mut gb = Binder::trainable();
        let fakes = self
            .generator
            .forward(&mut gb, &Var::constant(z), &Var::constant(y.clone()))?;
        let groups: Vec<(usize, Var)> = present.iter().map(|&m| (m, fakes[m].clone())).collect();
        let out = self.discriminator.forward_groups(&mut Binder::frozen(), &groups, None)?;
        let mut fake_mean: Option<Var> = None;
        let mut cls_terms = vec![None; c];
        for (i, &m) in present.iter().enumerate() {
            let s = out.score.narrow(0, i * b, b).mean();
            fake_mean = Some(match fake_mean {
                Some(acc) => acc.add(&s),
                None => s,
            });
            cls_terms[m] = Some((out.logits.narrow(0, i * b, b), self.target_labels(&y, m)));
        }
        let cls_fake = classification_loss_fake(&cls_terms, d_a)?;
        let loss_g = fake_mean
            .expect("at least one modality")
            .neg()
            .add(&cls_fake.scale(weights.lambda_cls));
        let report = combine(adv_value, gp_value, cls_real_value, cls_fake.item(), weights);
        if !report.is_finite() || !loss_g.item().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: {report}",
                self.global_step
            )));
        }
        let grads = gb.gradients(&loss_g);
        drop(gb);
        self.opt_g.step(self.generator.params_mut(), &grads)?;
        clamp_alphas(self.generator.params_mut());

        self.step += 1;
        self.global_step += 1;
        Ok(report)
    }

    /// Fixed codes for sample grids: seeds `0..8` for noise and the eight
    /// corners of the first three attributes.
    pub fn grid_codes(&self) -> (Tensor, Tensor) {
        grid_codes(self.noise.as_ref(), self.config.d_a)
    }

    /// Modalities as rows, the fixed codes as columns.
    pub fn sample_grid(&self) -> Result<Vec<Vec<Tensor>>> {
        sample_grid(&self.generator, self.noise.as_ref())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (k, v) in self.config.values() {
            ck.meta.insert(format!("config.{k}"), v);
        }
        for (i, a) in self.schema.names().iter().enumerate() {
            ck.meta.insert(format!("attribute.{i:03}"), a.clone());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            ck.meta.insert(format!("modality.{i:03}"), m.clone());
        }
        ck.meta.insert("stage".into(), self.stage.to_string());
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta.insert("global_step".into(), self.global_step.to_string());
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ck.meta.insert("rng.seed".into(), seed);
        ck.meta.insert("rng.stream".into(), self.rng.get_stream().to_string());
        ck.meta.insert("rng.word_pos".into(), self.rng.get_word_pos().to_string());
        for p in self.generator.params().into_iter().chain(self.discriminator.params()) {
            ck.tensors.insert(format!("param/{}", p.name), p.value.clone());
        }
        for (tag, opt) in [("g", &self.opt_g), ("d", &self.opt_d)] {
            for (name, st) in &opt.state {
                ck.tensors.insert(format!("adam.{tag}.m/{name}"), st.m.clone());
                ck.tensors.insert(format!("adam.{tag}.v/{name}"), st.v.clone());
                ck.meta.insert(format!("adam.{tag}.t/{name}"), st.t.to_string());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = config_from_checkpoint(ck)?;
        let schema = schema_from_checkpoint(ck)?;
        let modalities = modalities_from_checkpoint(ck);
        let mut state = Self::new(config, schema, modalities)?;
        let stage: usize = ck.meta_parse("stage")?;
        if stage >= state.schedule.stages.len() {
            return Err(Error::Corrupt(format!("stage {stage} beyond the schedule")));
        }
        for _ in 0..stage {
            state.advance_stage()?;
        }
        state.step = ck.meta_parse("step")?;
        state.global_step = ck.meta_parse("global_step")?;
        load_params(state.generator.params_mut(), ck)?;
        load_params(state.discriminator.params_mut(), ck)?;
        for (tag, opt) in [("g", &mut state.opt_g), ("d", &mut state.opt_d)] {
            let prefix = format!("adam.{tag}.t/");
            for (key, t) in ck.meta.range(prefix.clone()..) {
                let Some(name) = key.strip_prefix(&prefix) else { break };
                let t = t
                    .parse()
                    .map_err(|_| Error::Corrupt(format!("bad step count for {name}")))?;
                let m = ck.tensor(&format!("adam.{tag}.m/{name}"))?.clone();
                let v = ck.tensor(&format!("adam.{tag}.v/{name}"))?.clone();
                opt.state.insert(name.to_string(), Moments { m, v, t });
            }
        }
        state.rng = rng_from_checkpoint(ck)?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn grid_codes(noise: &dyn NoiseSampler, d_a: usize) -> (Tensor, Tensor) {
    let mut z = Vec::new();
    let mut y = Vec::new();
    for i in 0..GRID_COLUMNS {
        z.extend_from_slice(noise.sample(i as u64).values());
        y.extend((0..d_a).map(|j| if (i >> (j % 3)) & 1 == 1 { 1.0 } else { -1.0 }));
    }
    let z_dim = z.len() / GRID_COLUMNS;
    (Tensor::new(&[GRID_COLUMNS, z_dim], z), Tensor::new(&[GRID_COLUMNS, d_a], y))
}

pub fn sample_grid(generator: &Generator, noise: &dyn NoiseSampler) -> Result<Vec<Vec<Tensor>>> {
    let (z, y) = grid_codes(noise, generator.config().d_a);
    let set = generator.generate(&z, &y)?;
    Ok(set
        .images
        .iter()
        .map(|batch| {
            let s = batch.shape();
            (0..GRID_COLUMNS)
                .map(|i| batch.narrow(0, i, 1).reshape(&[s[1], s[2], s[3]]))
                .collect()
        })
        .collect())
}

fn load_params(params: Vec<&mut Param>, ck: &Checkpoint) -> Result<()> {
    for p in params {
        let t = ck.tensor(&format!("param/{}", p.name))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Corrupt(format!(
                "`{}` has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

fn config_from_checkpoint(ck: &Checkpoint) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (key, value) in ck.meta.range("config.".to_string()..) {
        let Some(k) = key.strip_prefix("config.") else { break };
        if k == "data_manifest" && value.is_empty() {
            cfg.data_manifest = None;
            continue;
        }
        cfg.set(k, value, Path::new(""))
            .map_err(|e| Error::Corrupt(format!("stored config: {e}")))?;
    }
    Ok(cfg)
}

fn schema_from_checkpoint(ck: &Checkpoint) -> Result<AttributeSchema> {
    let names: Vec<String> = ck
        .meta
        .range("attribute.".to_string()..)
        .take_while(|(k, _)| k.starts_with("attribute."))
        .map(|(_, v)| v.clone())
        .collect();
    AttributeSchema::new(names).map_err(|e| Error::Corrupt(e.to_string()))
}

fn modalities_from_checkpoint(ck: &Checkpoint) -> Vec<String> {
    ck.meta
        .range("modality.".to_string()..)
        .take_while(|(k, _)| k.starts_with("modality."))
        .map(|(_, v)| v.clone())
        .collect()
}

fn rng_from_checkpoint(ck: &Checkpoint) -> Result<ChaCha8Rng> {
    let hex = ck.meta("rng.seed")?;
    if hex.len() != 64 {
        return Err(Error::Corrupt("bad rng seed".into()));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| Error::Corrupt("bad rng seed".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(ck.meta_parse("rng.stream")?);
    rng.set_word_pos(ck.meta_parse("rng.word_pos")?);
    Ok(rng)
}

/// A generator restored for inference, with the names it was trained on.
pub struct TrainedModel {
    pub config: TrainConfig,
    pub schema: AttributeSchema,
    pub modalities: Vec<String>,
    pub generator: Generator,
    pub noise: Arc<dyn NoiseSampler>,
}

impl TrainedModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let state = TrainState::from_checkpoint(ck)?;
        Ok(Self {
            noise: state.noise.clone(),
            config: state.config,
            schema: state.schema,
            modalities: state.modalities,
            generator: state.generator,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub const LOG_HEADER: &str = "# step resolution alpha adv gp cls_real cls_fake total_D total_G";

pub fn log_line(step: usize, resolution: usize, alpha: f32, r: &LossReport) -> String {
    format!(
        "{step} {resolution} {alpha} {} {} {} {} {} {}",
        r.adv, r.gp, r.cls_real, r.cls_fake, r.total_d, r.total_g
    )
}

pub fn checkpoint_path(out_dir: &Path, resolution: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_{resolution}.a2mf"))
}

pub fn grid_path(out_dir: &Path, resolution: usize) -> PathBuf {
    out_dir.join(format!("grid_{resolution}.png"))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub grids: Vec<PathBuf>,
    pub log: PathBuf,
    pub steps: usize,
}

/// Runs every remaining stage of `state`, writing the log, one checkpoint
/// and one sample grid per stage into `out_dir`.
pub fn run_progressive_training(
    state: &mut TrainState,
    dataset: &Dataset,
    out_dir: &Path,
    mut on_step: impl FnMut(&TrainState, &LossReport),
) -> Result<TrainOutcome> {
    if dataset.manifest.c() != state.config.c || dataset.manifest.d_a() != state.config.d_a {
        return Err(Error::Data(format!(
            "dataset has {} modalities and {} attributes, config expects c={} d_a={}",
            dataset.manifest.c(),
            dataset.manifest.d_a(),
            state.config.c,
            state.config.d_a
        )));
    }
    if let Some(m) = dataset.manifest.records.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!(
            "modality `{}` has no records",
            dataset.manifest.modalities[m]
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train.log");
    let resume = state.global_step > 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    if !resume {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let mut outcome = TrainOutcome {
        checkpoints: Vec::new(),
        grids: Vec::new(),
        log: log_path.clone(),
        steps: 0,
    };
    loop {
        let r = state.resolution();
        let data = no_grad(|| dataset.at_resolution(r));
        while !state.stage_done() {
            let report = state.train_step(&data)?;
            writeln!(log, "{}", log_line(state.global_step, r, state.alpha(), &report))
                .map_err(|e| Error::io(&log_path, e))?;
            outcome.steps += 1;
            on_step(state, &report);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let ck = checkpoint_path(out_dir, r);
        state.save(&ck)?;
        let gp = grid_path(out_dir, r);
        save_png(&grid(&state.sample_grid()?)?, &gp)?;
        outcome.checkpoints.push(ck);
        outcome.grids.push(gp);
        if state.is_last_stage() {
            break;
        }
        state.advance_stage()?;
    }
    Ok(outcome)
}
