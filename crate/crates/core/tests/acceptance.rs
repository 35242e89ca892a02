//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Trains three desk-scale models (two identical runs and one unpaired
//! run), so a full pass takes over an hour on a single core. Artifacts are
//! kept under the cargo target tmpdir for inspection.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mmface::autograd::Var;
use mmface::blocks::{pixel_equalize, EQUALIZE_EPS};
use mmface::codec::AttributeVector;
use mmface::config::TrainConfig;
use mmface::datasets::{generate_synth_dataset, Dataset, SynthSpec};
use mmface::discriminator::Discriminator;
use mmface::evaluation::{
    frechet_distance, manipulation_sweep, modality_accuracy, AttributeClassifier, ClassifierConfig,
    EmbeddingStats, EvalConfig, EvalReport, SweepTarget,
};
use mmface::generator::{table_width, Generator, GeneratorConfig, ShapeTrace};
use mmface::nn::Binder;
use mmface::objectives::{
    adversarial_loss, classification_loss_fake, classification_loss_real, combine, critic_gradient_norms,
    gradient_penalty, LossWeights,
};
use mmface::tensor::Tensor;
use mmface::trainer::{checkpoint_path, run_progressive_training, TrainOutcome, TrainState, TrainedModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLOSED_FORM_TOL: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-3;
const IDENTITY_TOL: f32 = 1e-6;
const RUNTIME_BUDGET: Duration = Duration::from_secs(30 * 60);
const PER_MODALITY: usize = 2000;
const UNPAIRED_COUNTS: [usize; 3] = [2000, 1200, 600];
const MANIPULATION_SEEDS: u64 = 50;
const SWEEP_STEPS: usize = 5;

type Outcome = Result<String, String>;

struct Suite {
    failures: Vec<String>,
}

impl Suite {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f32();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("FAIL {name} ({secs:.1}s): {detail}");
                self.failures.push(name.to_string());
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= CLOSED_FORM_TOL, || format!("{name}: got {got}, want {want}"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn formula_oracles() -> Outcome {
    // Pixel equalization of the channel vector (3, 4) over N = 2 channels.
    let f = Var::constant(Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]));
    let out = pixel_equalize(&f, EQUALIZE_EPS);
    let denom = (12.5f64 + EQUALIZE_EPS as f64).sqrt();
    close("pixel_equalize[0]", out.value().data()[0] as f64, 3.0 / denom)?;
    close("pixel_equalize[1]", out.value().data()[1] as f64, 4.0 / denom)?;

    // Fréchet distance closed forms.
    let d = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let id = EmbeddingStats {
        mean: DVector::zeros(3),
        cov: DMatrix::identity(3, 3),
    };
    let shifted = EmbeddingStats {
        mean: d.clone(),
        cov: DMatrix::identity(3, 3),
    };
    close("frechet equal covariances", frechet_distance(&id, &shifted).map_err(err)?, d.norm_squared())?;
    let (a, b): ([f64; 3], [f64; 3]) = ([0.5, 2.0, 3.0], [1.5, 0.25, 3.0]);
    let diag = |v: [f64; 3]| EmbeddingStats {
        mean: DVector::zeros(3),
        cov: DMatrix::from_diagonal(&DVector::from_vec(v.to_vec())),
    };
    let want: f64 = a.iter().zip(&b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    close("frechet diagonal", frechet_distance(&diag(a), &diag(b)).map_err(err)?, want)?;

    // Gradient penalty: the critic 2 x_1 has gradient norm 2 everywhere.
    let doubling = |x: &Var| {
        let n = x.shape()[0];
        let w = Var::constant(Tensor::new(&[4, 1], vec![2.0, 0.0, 0.0, 0.0]));
        Ok(x.reshape(&[n, 4]).matmul(&w).reshape(&[n]))
    };
    let real = Tensor::new(&[2, 4], vec![0.3, -0.1, 0.8, 0.2, -0.6, 0.4, 0.0, 0.9]);
    let gp = gradient_penalty(doubling, &real, &Tensor::zeros(&[2, 4]), &[0.25, 0.75], 10.0).map_err(err)?;
    close("gradient penalty", gp.item() as f64, 10.0)?;

    // Analytic gradient norm of a random tiny critic against central differences.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w1 = Tensor::new(&[6, 5], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
    let w2 = Tensor::new(&[5, 1], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
    let x = Tensor::new(&[1, 6], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
    let critic_value = |x: &[f64]| -> f64 {
        let h: Vec<f64> = (0..5)
            .map(|j| {
                let v: f64 = (0..6).map(|i| x[i] * w1.data()[i * 5 + j] as f64).sum();
                if v > 0.0 {
                    v
                } else {
                    0.2 * v
                }
            })
            .collect();
        h.iter().zip(w2.data()).map(|(h, w)| h * *w as f64).sum()
    };
    let norms = critic_gradient_norms(
        |xv: &Var| {
            let h = xv.matmul(&Var::constant(w1.clone())).leaky_relu(0.2);
            Ok(h.matmul(&Var::constant(w2.clone())).reshape(&[1]))
        },
        &x,
    )
    .map_err(err)?;
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let step = 1e-5;
    let fd = (0..6)
        .map(|i| {
            let (mut p, mut m) = (base.clone(), base.clone());
            p[i] += step;
            m[i] -= step;
            ((critic_value(&p) - critic_value(&m)) / (2.0 * step)).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let rel = (norms.item() as f64 - fd).abs() / fd;
    ensure(rel <= FD_REL_TOL, || format!("gradient norm {} vs finite differences {fd}", norms.item()))?;

    // Adversarial sum over two modalities.
    let s = |v: f32| Var::constant(Tensor::new(&[1], vec![v]));
    let adv = adversarial_loss(&[s(1.0), s(0.5)], &[s(0.2), s(0.1)], &[s(0.3), s(0.1)]).map_err(err)?;
    close("adversarial loss", adv.item() as f64, 0.8)?;

    // Classification losses at zero logits: ln 3 for the modality term
    // (c = 3), ln 2 per attribute slot (d_a = 2).
    let logits = Var::constant(Tensor::zeros(&[2, 5]));
    let labels = Tensor::new(&[2, 5], vec![1.0, -1.0, 0.0, 1.0, 0.0, -1.0, -1.0, 0.0, 0.0, 1.0]);
    let want = 3f64.ln() + 2.0 * 2f64.ln();
    for loss in [classification_loss_real, classification_loss_fake] {
        let got = loss(&[Some((logits.clone(), labels.clone()))], 2).map_err(err)?;
        ensure((got.item() as f64 - want).abs() <= 1e-6, || format!("classification loss {} vs {want}", got.item()))?;
    }

    // Total objectives.
    let r = combine(0.8, 0.0, 0.5, 0.4, LossWeights { lambda_cls: 1.0, ..LossWeights::default() });
    close("total_D", r.total_d as f64, -0.3)?;
    close("total_G", r.total_g as f64, 1.2)?;
    Ok("equalization, Fréchet, gradient penalty, adversarial, classification and total losses".into())
}

fn full_width(max_resolution: usize) -> GeneratorConfig {
    GeneratorConfig {
        max_resolution,
        width_factor: 1.0,
        ..GeneratorConfig::default()
    }
}

fn expected_generator_rows(r: usize, d_a: usize) -> Vec<(String, Vec<usize>)> {
    if r == 4 {
        return vec![
            ("input code".into(), vec![1, 512 + d_a]),
            ("mlp".into(), vec![1, 512, 4, 4]),
            ("initial".into(), vec![1, 512, 4, 4]),
            ("stretch-out 4".into(), vec![1, 3, 4, 4]),
        ];
    }
    vec![
        (format!("upsample {r}"), vec![1, table_width(r / 2), r, r]),
        (format!("conv1 {r}"), vec![1, table_width(r), r, r]),
        (format!("conv2 {r}"), vec![1, table_width(r), r, r]),
        (format!("stretch-out {r}"), vec![1, 3, r, r]),
    ]
}

fn expected_discriminator_rows(r: usize, out: usize) -> Vec<(String, Vec<usize>)> {
    let mut rows = vec![(format!("stretch-in {r}"), vec![1, table_width(r), r, r])];
    if r == 4 {
        rows.extend([
            ("base".into(), vec![1, 512, 4, 4]),
            ("reshape".into(), vec![1, 8192]),
            ("head_a".into(), vec![1, 16]),
            ("head_c".into(), vec![1, out]),
        ]);
    } else {
        rows.extend([
            (format!("conv1 {r}"), vec![1, table_width(r), r, r]),
            (format!("conv2 {r}"), vec![1, table_width(r / 2), r, r]),
            (format!("downsample {r}"), vec![1, table_width(r / 2), r / 2, r / 2]),
        ]);
    }
    rows
}

/// Compares every traced row against its expected shape and returns the
/// labels that were seen.
fn audit(trace: &ShapeTrace, expected: &[(String, Vec<usize>)]) -> Result<Vec<String>, String> {
    let mut seen = Vec::new();
    for (label, shape) in trace {
        if let Some((_, want)) = expected.iter().find(|(l, _)| l == label) {
            ensure(shape == want, || format!("{label}: got {shape:?}, want {want:?}"))?;
            seen.push(label.clone());
        }
    }
    Ok(seen)
}

fn architecture_audit() -> Outcome {
    let cfg = full_width(256);
    let (d_a, c) = (cfg.d_a, cfg.c);
    let resolutions = [4usize, 8, 16, 32, 64, 128, 256];
    let gen_rows: Vec<_> = resolutions.iter().flat_map(|&r| expected_generator_rows(r, d_a)).collect();
    let disc_rows: Vec<_> = resolutions
        .iter()
        .flat_map(|&r| expected_discriminator_rows(r, d_a + c))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Generator::build(cfg.clone(), &mut rng).map_err(err)?;
    let mut d = Discriminator::build(cfg.clone(), &mut rng).map_err(err)?;
    let z = Var::constant(Tensor::new(&[1, cfg.z_dim], vec![0.1; cfg.z_dim]));
    let y = Var::constant(Tensor::new(&[1, d_a], vec![0.5; d_a]));
    let (mut gen_seen, mut disc_seen) = (Vec::new(), Vec::new());
    for (stage, &r) in resolutions.iter().enumerate() {
        if stage > 1 {
            g.set_alpha(1.0).map_err(err)?;
            d.set_alpha(1.0).map_err(err)?;
        }
        if stage > 0 {
            g.grow(&mut rng).map_err(err)?;
            d.grow(&mut rng).map_err(err)?;
            // Mid-fade, so both the new and the previous heads are traced.
            g.set_alpha(0.5).map_err(err)?;
            d.set_alpha(0.5).map_err(err)?;
        }
        let mut trace = ShapeTrace::new();
        mmface::autograd::no_grad(|| g.forward_traced(&mut Binder::frozen(), &z, &y, Some(&mut trace)))
            .map_err(err)?;
        gen_seen.extend(audit(&trace, &gen_rows)?);

        let x = Var::constant(Tensor::zeros(&[1, 3, r, r]));
        let mut trace = ShapeTrace::new();
        mmface::autograd::no_grad(|| d.forward_groups(&mut Binder::frozen(), &[(0, x)], Some(&mut trace)))
            .map_err(err)?;
        disc_seen.extend(audit(&trace, &disc_rows)?);
    }
    for (rows, seen, who) in [(&gen_rows, &gen_seen, "generator"), (&disc_rows, &disc_seen, "discriminator")] {
        if let Some((label, _)) = rows.iter().find(|(l, _)| !seen.contains(l)) {
            return Err(format!("{who} row `{label}` was never produced"));
        }
    }
    Ok(format!(
        "{} generator and {} discriminator rows at 4..256",
        gen_rows.len(),
        disc_rows.len()
    ))
}

fn growth_identities() -> Outcome {
    let cfg = GeneratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Generator::build(cfg.clone(), &mut rng).map_err(err)?;
    let mut d = Discriminator::build(cfg.clone(), &mut rng).map_err(err)?;
    let mut data = ChaCha8Rng::seed_from_u64(2);
    let n = 3;
    let z = Tensor::new(&[n, cfg.z_dim], (0..n * cfg.z_dim).map(|_| data.random_range(-1.0..1.0)).collect());
    let y = Tensor::new(&[n, cfg.d_a], (0..n * cfg.d_a).map(|_| data.random_range(-1.0..1.0)).collect());
    let mut worst = 0.0f32;
    for r in [8usize, 16, 32] {
        let before = g.generate(&z, &y).map_err(err)?;
        g.grow(&mut rng).map_err(err)?;
        let after = g.generate(&z, &y).map_err(err)?;
        for (a, b) in after.images.iter().zip(&before.images) {
            worst = worst.max(a.max_abs_diff(&b.upsample2x()));
        }
        let x = Tensor::new(&[n, 3, r, r], (0..n * 3 * r * r).map(|_| data.random_range(-1.0..1.0)).collect());
        let before: Vec<_> = (0..cfg.c)
            .map(|m| d.evaluate(&x.downsample2x(), m))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        d.grow(&mut rng).map_err(err)?;
        for (m, (s0, l0)) in before.iter().enumerate() {
            let (s1, l1) = d.evaluate(&x, m).map_err(err)?;
            worst = worst.max(s0.max_abs_diff(&s1)).max(l0.max_abs_diff(&l1));
        }
        // Leave the fade mid-way so the next growth starts from a blended network.
        g.set_alpha(0.4).map_err(err)?;
        d.set_alpha(0.4).map_err(err)?;
    }
    ensure(worst <= IDENTITY_TOL, || format!("max deviation {worst:e}"))?;
    Ok(format!("generator and discriminator at 8, 16, 32: max deviation {worst:e}"))
}

fn desk_config(out_dir: &Path, manifest: &Path) -> TrainConfig {
    TrainConfig {
        data_manifest: Some(manifest.to_path_buf()),
        out_dir: out_dir.to_path_buf(),
        ..TrainConfig::default()
    }
}

struct Run {
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn train(dataset: &Dataset, manifest: &Path, out_dir: &Path) -> Result<Run, String> {
    let cfg = desk_config(out_dir, manifest);
    let mut state = TrainState::new(cfg, dataset.manifest.schema.clone(), dataset.manifest.modalities.clone())
        .map_err(err)?;
    let started = Instant::now();
    let outcome = run_progressive_training(&mut state, dataset, out_dir, |_, _| {}).map_err(err)?;
    Ok(Run {
        outcome,
        elapsed: started.elapsed(),
    })
}

/// Trains in `work/run` and then moves the run to `work/name`, so runs that
/// only differ in name also share the output directory stored in their
/// checkpoints.
fn train_as(dataset: &Dataset, manifest: &Path, work: &Path, name: &str) -> Result<Run, String> {
    let (scratch, dest) = (work.join("run"), work.join(name));
    let _ = std::fs::remove_dir_all(&scratch);
    let mut run = train(dataset, manifest, &scratch)?;
    std::fs::rename(&scratch, &dest).map_err(err)?;
    let moved = |p: &PathBuf| dest.join(p.strip_prefix(&scratch).unwrap_or(p));
    let o = &mut run.outcome;
    o.checkpoints = o.checkpoints.iter().map(moved).collect();
    o.grids = o.grids.iter().map(moved).collect();
    o.log = moved(&o.log);
    Ok(run)
}

fn synth(dir: &Path, counts: Vec<usize>) -> Result<(Dataset, PathBuf), String> {
    let spec = SynthSpec {
        c: 3,
        resolution: 32,
        counts,
        seed: 0,
    };
    generate_synth_dataset(&spec, dir).map_err(err)?;
    let manifest = dir.join("manifest.txt");
    Ok((Dataset::load(&manifest).map_err(err)?, manifest))
}

fn modality_bar(report: &EvalReport) -> Outcome {
    let accs: Vec<String> = report
        .modalities
        .iter()
        .map(|m| format!("{} {:.1}%", m.name, 100.0 * m.modality_accuracy))
        .collect();
    let ok = report.modalities.iter().all(|m| m.modality_accuracy >= 0.9);
    let detail = format!("modality accuracy {}", accs.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let mut suite = Suite { failures: Vec::new() };
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).expect("work directory");

    suite.check("formula oracles", formula_oracles);
    suite.check("architecture audit (full width, 4..256)", architecture_audit);
    suite.check("progressive-growth identities", growth_identities);

    let paired = synth(&work.join("data"), vec![PER_MODALITY; 3]);
    let run_a = paired
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|(ds, manifest)| train_as(ds, manifest, &work, "run-a"));
    let run_b = paired
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|(ds, manifest)| train_as(ds, manifest, &work, "run-b"));

    suite.check("determinism (two desk runs, same seed)", || {
        let (a, b) = (run_a.as_ref().map_err(Clone::clone)?, run_b.as_ref().map_err(Clone::clone)?);
        let log_a = std::fs::read(&a.outcome.log).map_err(err)?;
        let log_b = std::fs::read(&b.outcome.log).map_err(err)?;
        ensure(log_a == log_b, || "loss logs differ".into())?;
        let final_a = std::fs::read(a.outcome.checkpoints.last().unwrap()).map_err(err)?;
        let final_b = std::fs::read(b.outcome.checkpoints.last().unwrap()).map_err(err)?;
        ensure(final_a == final_b, || "final checkpoints differ".into())?;
        Ok(format!(
            "{} log lines and {} checkpoint bytes identical",
            log_a.iter().filter(|&&b| b == b'\n').count(),
            final_a.len()
        ))
    });

    let model = run_a
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|_| TrainedModel::load(&checkpoint_path(&work.join("run-a"), 32)).map_err(err));
    let real32 = paired.as_ref().map(|(ds, _)| ds.at_resolution(32)).map_err(Clone::clone);
    let classifier = real32.as_ref().map_err(Clone::clone).and_then(|data| {
        let (cls, report) = AttributeClassifier::fit(data, &ClassifierConfig::default()).map_err(err)?;
        println!(
            "  classifier: held-out attribute MSE {:.4}, attribute accuracy {:.2}%, modality accuracy {:.2}% on {} images",
            report.attribute_mse,
            100.0 * report.attribute_accuracy,
            100.0 * report.modality_accuracy,
            report.holdout_images
        );
        Ok((cls, report))
    });
    let report = model.as_ref().map_err(Clone::clone).and_then(|m| {
        let (data, (cls, _)) = (real32.as_ref().map_err(Clone::clone)?, classifier.as_ref().map_err(Clone::clone)?);
        let r = mmface::evaluation::evaluate_model(m, data, cls, &EvalConfig::default()).map_err(err)?;
        print!("{}", r.to_table().lines().map(|l| format!("  {l}\n")).collect::<String>());
        let _ = r.write(&work.join("run-a"));
        Ok(r)
    });

    suite.check("end-to-end desk run: runtime and classifier floor", || {
        let run = run_a.as_ref().map_err(Clone::clone)?;
        let (_, cls_report) = classifier.as_ref().map_err(Clone::clone)?;
        let stages = run.outcome.checkpoints.len();
        ensure(stages == 4, || format!("{stages} stage checkpoints, expected 4"))?;
        ensure(run.elapsed <= RUNTIME_BUDGET, || format!("training took {:.1} min", run.elapsed.as_secs_f32() / 60.0))?;
        ensure(cls_report.attribute_mse <= 0.02, || {
            format!("classifier floor {:.4} > 0.02", cls_report.attribute_mse)
        })?;
        Ok(format!(
            "{} steps in {:.1} min on {} core(s); classifier floor {:.4}",
            run.outcome.steps,
            run.elapsed.as_secs_f32() / 60.0,
            std::thread::available_parallelism().map_or(1, |n| n.get()),
            cls_report.attribute_mse
        ))
    });
    suite.check("end-to-end (a): attribute MSE of generated images", || {
        let r = report.as_ref().map_err(Clone::clone)?;
        let detail = format!("attribute MSE {} (visible images)", r.attribute_mse);
        ensure(r.attribute_mse.mean <= 0.15, || detail.clone())?;
        Ok(detail)
    });
    suite.check("end-to-end (b): modality classification of generated images", || {
        modality_bar(report.as_ref().map_err(Clone::clone)?)
    });
    suite.check("end-to-end (c): FID relative to uniform noise", || {
        let r = report.as_ref().map_err(Clone::clone)?;
        let ratios: Vec<String> = r
            .modalities
            .iter()
            .map(|m| format!("{} {:.3} ({:.2}/{:.2})", m.name, m.fid_ratio(), m.fid, m.noise_fid))
            .collect();
        let detail = format!("FID ratio {}", ratios.join(", "));
        ensure(r.modalities.iter().all(|m| m.fid_ratio() <= 0.5), || detail.clone())?;
        Ok(detail)
    });

    suite.check("manipulation: attribute sweeps flip the target", || {
        let m = model.as_ref().map_err(Clone::clone)?;
        let (cls, _) = classifier.as_ref().map_err(Clone::clone)?;
        let d_a = m.schema.len();
        let mut flips = 0;
        for seed in 0..MANIPULATION_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let y = AttributeVector::new((0..d_a).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
                .map_err(err)?;
            let target = seed as usize % d_a;
            let z = m.noise.sample(seed);
            let s = manipulation_sweep(&m.generator, &z, &y, &SweepTarget::Attribute(target), SWEEP_STEPS)
                .map_err(err)?;
            let first = cls.predict(&s.frames[0].images[0]).map_err(err)?.scores.data()[target];
            let last = cls.predict(&s.frames[SWEEP_STEPS - 1].images[0]).map_err(err)?.scores.data()[target];
            let want = s.codes[SWEEP_STEPS - 1].1.values()[target];
            if (first > 0.0) != (last > 0.0) && (last > 0.0) == (want > 0.0) {
                flips += 1;
            }
        }
        let detail = format!("{flips}/{MANIPULATION_SEEDS} seeds flipped the predicted sign");
        ensure(flips * 10 >= MANIPULATION_SEEDS * 9, || detail.clone())?;
        Ok(detail)
    });

    suite.check("manipulation: noise sweeps preserve attributes", || {
        let m = model.as_ref().map_err(Clone::clone)?;
        let (cls, _) = classifier.as_ref().map_err(Clone::clone)?;
        let d_a = m.schema.len();
        let mut sq = vec![0.0f64; SWEEP_STEPS];
        for seed in 0..MANIPULATION_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
            let y = AttributeVector::new((0..d_a).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
                .map_err(err)?;
            let target = SweepTarget::Noise(m.noise.sample(1_000_000 + seed));
            let s = manipulation_sweep(&m.generator, &m.noise.sample(seed), &y, &target, SWEEP_STEPS).map_err(err)?;
            for (k, frame) in s.frames.iter().enumerate() {
                let p = cls.predict(&frame.images[0]).map_err(err)?;
                sq[k] += p
                    .scores
                    .data()
                    .iter()
                    .zip(y.values())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>();
            }
        }
        let per_frame: Vec<f64> = sq.iter().map(|s| s / (MANIPULATION_SEEDS as f64 * d_a as f64)).collect();
        let detail = format!(
            "per-frame attribute MSE {}",
            per_frame.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
        );
        ensure(per_frame.iter().all(|&v| v <= 0.15), || detail.clone())?;
        Ok(detail)
    });

    suite.check("unpaired training (100/60/30%) passes (b)", || {
        let (dataset, manifest) = synth(&work.join("data-unpaired"), UNPAIRED_COUNTS.to_vec())?;
        let run = train(&dataset, &manifest, &work.join("run-unpaired"))?;
        let model = TrainedModel::load(run.outcome.checkpoints.last().unwrap()).map_err(err)?;
        let (cls, _) = classifier.as_ref().map_err(Clone::clone)?;
        let mut accs = Vec::new();
        for (mi, name) in model.modalities.iter().enumerate() {
            let mut images = Vec::new();
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(30_000 + seed);
                let n = 100;
                let z = Tensor::new(
                    &[n, model.generator.config().z_dim],
                    (0..n).flat_map(|_| model.noise.sample_from(&mut rng).values().to_vec()).collect(),
                );
                let y = Tensor::new(
                    &[n, model.schema.len()],
                    (0..n * model.schema.len())
                        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                        .collect(),
                );
                images.push(model.generator.generate(&z, &y).map_err(err)?.images.swap_remove(mi));
            }
            let refs: Vec<&Tensor> = images.iter().collect();
            let acc = modality_accuracy(cls, &Tensor::concat(&refs, 0), mi).map_err(err)?;
            accs.push((name.clone(), acc));
        }
        let detail = format!(
            "{} steps; modality accuracy {}",
            run.outcome.steps,
            accs.iter()
                .map(|(n, a)| format!("{n} {:.1}%", 100.0 * a))
                .collect::<Vec<_>>()
                .join(", ")
        );
        ensure(accs.iter().all(|(_, a)| *a >= 0.9), || detail.clone())?;
        Ok(detail)
    });

    if suite.failures.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: {} failing: {}", suite.failures.len(), suite.failures.join("; "));
        // The FAIL lines above are the report. Set ACCEPTANCE_STRICT=1 to turn them into a failing exit status.
        if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
