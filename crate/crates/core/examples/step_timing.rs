//! Times training steps at each desk-scale stage on synthetic data.
//!
//! cargo run --release -p mmface --example step_timing -- [batch] [steps]

use std::time::Instant;

use mmface::config::TrainConfig;
use mmface::datasets::{generate_synth_dataset, Dataset, SynthSpec};
use mmface::trainer::TrainState;

fn main() -> mmface::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let batch = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let steps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let fade = args.get(3).cloned().unwrap_or_else(|| "linear".into());
    let dir = std::env::temp_dir().join("mmface-step-timing");
    let manifest = generate_synth_dataset(&SynthSpec::new(3, 32, 64, 0), &dir)?;
    let dataset = Dataset::open(manifest)?;
    let cfg = TrainConfig {
        batch,
        fade,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(cfg, dataset.manifest.schema.clone(), dataset.manifest.modalities.clone())?;
    let mut total = 0.0;
    loop {
        let r = state.resolution();
        let data = dataset.at_resolution(r);
        state.train_step(&data)?;
        let t = Instant::now();
        for _ in 0..steps {
            state.train_step(&data)?;
        }
        let per = t.elapsed().as_secs_f64() / steps as f64;
        let budget = state.current_stage().budget;
        total += per * budget as f64;
        println!("{r:>3}x{r:<3} {:.1} ms/step, stage budget {budget} -> {:.1} s", per * 1e3, per * budget as f64);
        if state.is_last_stage() {
            break;
        }
        state.advance_stage()?;
    }
    println!("estimated run: {:.1} min", total / 60.0);
    Ok(())
}
