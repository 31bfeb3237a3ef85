//! Compares RJCA, GRJCA and HGRJCA on synthetic clips with and without
//! audio corruption.
//!
//! Overrides come from the environment: P, EPOCHS, LR, WD, DROPOUT, BATCH,
//! SEEDS, SEED0. With GATES set, a GRJCA model is also trained on the first
//! seed and its mean audio gate scores on corrupted and clean validation
//! frames are printed.

use std::time::Instant;

use avfusion::benchmark::{gate_profile, run_seed, BenchmarkConfig};
use avfusion::fusion::FusionMode;
use avfusion::model::Target;
use avfusion::synthdata::generate;
use avfusion::training::train;

fn main() -> avfusion::Result<()> {
    let var = |k: &str| std::env::var(k).ok().and_then(|s| s.parse::<f64>().ok());
    let d = BenchmarkConfig::default();
    let cfg = BenchmarkConfig {
        corruption_prob: var("P").unwrap_or(d.corruption_prob),
        epochs: var("EPOCHS").map_or(d.epochs, |v| v as usize),
        lr: var("LR").unwrap_or(d.lr),
        weight_decay: var("WD").unwrap_or(d.weight_decay),
        dropout: var("DROPOUT").unwrap_or(d.dropout),
        batch_size: var("BATCH").map_or(d.batch_size, |v| v as usize),
        ..d
    };
    let first = var("SEED0").map_or(0, |v| v as u64);
    let seeds = var("SEEDS").map_or(5, |v| v as u64);
    let modes = [FusionMode::Rjca, FusionMode::Grjca, FusionMode::Hgrjca];
    for seed in first..first + seeds {
        let t0 = Instant::now();
        let r = run_seed(&cfg, seed, &modes)?;
        let cells: Vec<String> = r.scores.iter().map(|(m, s)| format!("{m}={s:.4}")).collect();
        println!("p={} seed {seed}: {}  ({:.1}s)", cfg.corruption_prob, cells.join("  "), t0.elapsed().as_secs_f64());
    }
    if std::env::var("GATES").is_ok() {
        let clips = generate(&cfg.gen(first))?;
        let (train_set, val_set) = clips.split_at(cfg.train_clips);
        let out = train(train_set, val_set, &cfg.model(FusionMode::Grjca), Target::Valence, &cfg.train(first))?;
        let p = gate_profile(&out.model, &out.params, val_set)?;
        println!("GRJCA audio gate (X0..XM), corrupted frames: {:.3?}", p.corrupted);
        println!("GRJCA audio gate (X0..XM), clean frames:     {:.3?}", p.clean);
    }
    Ok(())
}
