use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use mmface::codec::{encode_partial_attributes, AttributeVector};
use mmface::config::{TrainConfig, CONFIG_KEYS};
use mmface::datasets::{generate_synth_dataset, Dataset, SynthSpec};
use mmface::evaluation::{evaluate_model, manipulation_sweep, AttributeClassifier, ClassifierConfig, EvalConfig, SweepTarget};
use mmface::export::{grid, save_png, to_rgb8};
use mmface::trainer::{run_progressive_training, TrainState, TrainedModel};
use mmface::Error;
use mmface_service::{ServiceError, DEFAULT_PORT};

/// Multimodal conditional face synthesis: data, training, inference.
#[derive(Parser, Debug)]
#[command(name = "mmface", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic shapes dataset and its manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Images per modality (paired data).
        #[arg(long, default_value_t = 2000, conflicts_with = "counts")]
        per_modality: usize,
        /// Comma-separated images per modality (unpaired data), e.g. 2000,1200,600.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 3)]
        c: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train progressively from 4x4 up to the configured resolution.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override one config key, e.g. --set seed=3. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print a progress line every N steps (0 disables).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Write one PNG per modality for a single code.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated name=value pairs; unnamed attributes are 0.
        #[arg(long, default_value = "")]
        attributes: String,
        /// Noise seed; a random one is drawn and printed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against real data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attribute classifier to reuse; trained on the manifest when absent.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        splits: usize,
        #[arg(long, default_value = "euclidean")]
        distance: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a manipulation sweep as one grid (columns: steps, rows: modalities).
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Attribute name to flip, or `noise` to move to another noise code.
        #[arg(long)]
        flip: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "")]
        attributes: String,
        /// Target noise seed for `--flip noise`; defaults to seed + 1.
        #[arg(long)]
        to_seed: Option<u64>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
    },
}

fn config_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut text = String::from("Config keys (one `key = value` per line, `#` starts a comment):\n");
    for (key, about) in CONFIG_KEYS {
        text.push_str(&format!("  {key:<width$}  {about}\n"));
    }
    text
}

/// Process exit status for a library error: 1 for bad configuration or
/// input, 2 for unreadable data or files, 3 for numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::UnknownStrategy { .. }
        | Error::Schema(_)
        | Error::Validation(_)
        | Error::Input(_)
        | Error::Shape(_)
        | Error::Growth(_)
        | Error::MalformedLabel(_) => 1,
        Error::Data(_) | Error::Io { .. } | Error::Image(_) | Error::Corrupt(_) | Error::Version { .. } => 2,
        Error::Numeric(_) => 3,
    }
}

fn parse_attributes(text: &str) -> Result<BTreeMap<String, f32>, Error> {
    let mut out = BTreeMap::new();
    for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("expected name=value, got `{pair}`")))?;
        let value: f32 = value
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("attribute `{name}` has non-numeric value `{value}`")))?;
        if out.insert(name.trim().to_string(), value).is_some() {
            return Err(Error::Input(format!("attribute `{name}` given twice")));
        }
    }
    Ok(out)
}

fn model_attributes(model: &TrainedModel, text: &str) -> Result<AttributeVector, Error> {
    encode_partial_attributes(&parse_attributes(text)?, &model.schema)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth_data(out: &Path, spec: SynthSpec) -> Result<(), Error> {
    let manifest = generate_synth_dataset(&spec, out)?;
    let counts: Vec<String> = manifest.records.iter().map(|r| r.len().to_string()).collect();
    println!(
        "wrote {} ({} images per modality: {})",
        out.join("manifest.txt").display(),
        counts.join("/"),
        manifest.modalities.join(", ")
    );
    Ok(())
}

fn train(config: &Path, resume: Option<&Path>, overrides: &[String], progress: usize) -> Result<(), Error> {
    let mut cfg = TrainConfig::load(config)?;
    let base = std::env::current_dir().map_err(|e| Error::io(Path::new("."), e))?;
    for item in overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{item}`")))?;
        cfg.set(k.trim(), v.trim(), &base)?;
    }
    cfg.validate()?;
    let manifest = cfg
        .data_manifest
        .clone()
        .ok_or_else(|| Error::Config("`data_manifest` is not set".into()))?;
    let dataset = Dataset::load(&manifest)?;
    let mut state = match resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            if state.config != cfg {
                eprintln!("note: resuming with the configuration stored in {}", path.display());
            }
            state
        }
        None => TrainState::new(cfg, dataset.manifest.schema.clone(), dataset.manifest.modalities.clone())?,
    };
    let out_dir = state.config.out_dir.clone();
    let outcome = run_progressive_training(&mut state, &dataset, &out_dir, |s, r| {
        if progress > 0 && s.global_step % progress == 0 {
            eprintln!("step {} {}x{} alpha={:.3} {r}", s.global_step, s.resolution(), s.resolution(), s.alpha());
        }
    })?;
    println!("trained {} steps", outcome.steps);
    for path in outcome.checkpoints.iter().chain(&outcome.grids) {
        println!("wrote {}", path.display());
    }
    println!("wrote {}", outcome.log.display());
    Ok(())
}

fn synthesize(checkpoint: &Path, attributes: &str, seed: Option<u64>, out: &Path) -> Result<(), Error> {
    let model = TrainedModel::load(checkpoint)?;
    let y = model_attributes(&model, attributes)?;
    let seed = seed.unwrap_or_else(mmface_service::random_seed);
    let set = model.generator.synthesize(&model.noise.sample(seed), &y)?;
    create_dir(out)?;
    for (name, image) in model.modalities.iter().zip(&set.images) {
        let path = out.join(format!("{name}.png"));
        save_png(&to_rgb8(image)?, &path)?;
        println!("wrote {}", path.display());
    }
    println!("seed {seed}");
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    classifier: Option<&Path>,
    cfg: EvalConfig,
) -> Result<(), Error> {
    let model = TrainedModel::load(checkpoint)?;
    let dataset = Dataset::load(manifest)?;
    if dataset.manifest.schema != model.schema || dataset.manifest.modalities != model.modalities {
        return Err(Error::Data(format!(
            "{} does not match the checkpoint's attributes and modalities",
            manifest.display()
        )));
    }
    let data = dataset.at_resolution(model.generator.resolution());
    create_dir(out)?;
    let classifier = match classifier {
        Some(path) => AttributeClassifier::load(path)?,
        None => {
            let (classifier, report) = AttributeClassifier::fit(&data, &ClassifierConfig::default())?;
            println!(
                "classifier: held-out attribute MSE {:.4}, modality accuracy {:.3} on {} images",
                report.attribute_mse, report.modality_accuracy, report.holdout_images
            );
            let path = out.join("classifier.a2mf");
            classifier.save(&path)?;
            println!("wrote {}", path.display());
            classifier
        }
    };
    let report = evaluate_model(&model, &data, &classifier, &cfg)?;
    print!("{}", report.to_table());
    let (table, kv) = report.write(out)?;
    println!("wrote {}", table.display());
    println!("wrote {}", kv.display());
    Ok(())
}

fn sweep(
    checkpoint: &Path,
    flip: &str,
    steps: usize,
    out: &Path,
    seed: u64,
    attributes: &str,
    to_seed: Option<u64>,
) -> Result<(), Error> {
    let model = TrainedModel::load(checkpoint)?;
    let y = model_attributes(&model, attributes)?;
    let target = if flip == "noise" {
        SweepTarget::Noise(model.noise.sample(to_seed.unwrap_or(seed.wrapping_add(1))))
    } else {
        let index = model.schema.index_of(flip).ok_or_else(|| {
            Error::Schema(format!(
                "unknown attribute {flip:?}; choose one of {} or `noise`",
                model.schema.names().join(", ")
            ))
        })?;
        SweepTarget::Attribute(index)
    };
    let s = manipulation_sweep(&model.generator, &model.noise.sample(seed), &y, &target, steps)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_png(&grid(&s.grid())?, out)?;
    let betas: Vec<String> = s.betas.iter().map(|b| format!("{b:.4}")).collect();
    println!("wrote {} (rows: {}; beta: {})", out.display(), model.modalities.join(", "), betas.join(" "));
    Ok(())
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::SynthData {
            out,
            per_modality,
            counts,
            resolution,
            c,
            seed,
        } => {
            let counts = counts.unwrap_or_else(|| vec![per_modality; c]);
            synth_data(&out, SynthSpec { c, resolution, counts, seed })
        }
        Command::Train {
            config,
            resume,
            overrides,
            progress,
        } => train(&config, resume.as_deref(), &overrides, progress),
        Command::Synthesize {
            checkpoint,
            attributes,
            seed,
            out,
        } => synthesize(&checkpoint, &attributes, seed, &out),
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            classifier,
            samples,
            splits,
            distance,
            seed,
        } => evaluate(
            &checkpoint,
            &manifest,
            &out,
            classifier.as_deref(),
            EvalConfig {
                samples,
                splits,
                distance,
                seed,
                ..EvalConfig::default()
            },
        ),
        Command::Sweep {
            checkpoint,
            flip,
            steps,
            out,
            seed,
            attributes,
            to_seed,
        } => sweep(&checkpoint, &flip, steps, &out, seed, &attributes, to_seed),
        Command::Serve { checkpoint, port } => match mmface_service::run(checkpoint, port) {
            Ok(()) => Ok(()),
            Err(ServiceError::Load(e)) => Err(e),
            Err(ServiceError::Bind { addr, source }) => Err(Error::io(Path::new(&addr.to_string()), source)),
            Err(ServiceError::Serve(source)) => Err(Error::io(Path::new("server"), source)),
        },
    }
}

fn main() -> ExitCode {
    let help = config_help();
    let command = Cli::command()
        .after_help(help.clone())
        .mut_subcommand("train", |c| c.after_help(help));
    let cli = match command
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
