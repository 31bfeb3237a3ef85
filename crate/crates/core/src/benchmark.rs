//! Weak-complementarity benchmark: RJCA against the gated variants on
//! synthetic clips whose audio stream is partly replaced by noise.

use serde::{Deserialize, Serialize};

use crate::fusion::FusionMode;
use crate::model::{Model, ModelConfig, Target};
use crate::numcore::{ParamSet, Tape};
use crate::synthdata::{generate, GenConfig, LabeledClip};
use crate::training::{train, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub corruption_prob: f64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub frames: usize,
    pub dim: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            corruption_prob: 0.5,
            train_clips: 200,
            val_clips: 50,
            frames: 64,
            dim: 16,
            iterations: 3,
            temperature: 0.1,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 5e-3,
            dropout: 0.2,
            batch_size: 12,
        }
    }
}

impl BenchmarkConfig {
    pub fn gen(&self, seed: u64) -> GenConfig {
        GenConfig {
            num_videos: self.train_clips + self.val_clips,
            frames: self.frames,
            d_audio: self.dim,
            d_visual: self.dim,
            corruption_prob: self.corruption_prob,
            seed,
            ..Default::default()
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.epochs,
            init_lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            warmup_epochs: 1,
            window_length: self.frames,
            window_stride: self.frames,
            seed,
            ..Default::default()
        }
    }

    pub fn model(&self, mode: FusionMode) -> ModelConfig {
        ModelConfig {
            mode,
            iterations: self.iterations,
            temperature: self.temperature,
            dropout: self.dropout,
            ..Default::default()
        }
    }
}

/// Best validation valence CCC of each mode for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub scores: Vec<(FusionMode, f64)>,
}

impl SeedResult {
    pub fn get(&self, mode: FusionMode) -> Option<f64> {
        self.scores.iter().find(|(m, _)| *m == mode).map(|s| s.1)
    }
}

/// Generates the seed's dataset, trains every mode on the first
/// `train_clips` clips and validates on the rest.
pub fn run_seed(cfg: &BenchmarkConfig, seed: u64, modes: &[FusionMode]) -> Result<SeedResult> {
    let clips = generate(&cfg.gen(seed))?;
    let (train_set, val_set) = clips.split_at(cfg.train_clips);
    let tc = cfg.train(seed);
    let scores = modes
        .iter()
        .map(|&mode| Ok((mode, train(train_set, val_set, &cfg.model(mode), Target::Valence, &tc)?.best_val_ccc)))
        .collect::<Result<_>>()?;
    Ok(SeedResult { seed, scores })
}

/// Mean audio gate score per candidate over corrupted and clean frames.
#[derive(Debug, Clone, PartialEq)]
pub struct GateProfile {
    pub corrupted: Vec<f64>,
    pub clean: Vec<f64>,
}

/// Averages the first gate layer's audio scores of a trained gated model.
pub fn gate_profile(model: &Model, params: &ParamSet, clips: &[LabeledClip]) -> Result<GateProfile> {
    let mut sums: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut counts = [0usize; 2];
    for c in clips {
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let out = model.forward(&mut tape, &b, &c.audio, &c.visual, &c.valid, None)?;
        let g = out.fusion.gates.first().ok_or_else(|| Error::config(format!("{} has no gates", model.config.mode)))?;
        let scores = tape.value(g.scores_audio);
        for t in (0..c.len()).filter(|&t| c.valid[t]) {
            let k = usize::from(!c.corrupt_audio[t]);
            sums[k].resize(scores.cols(), 0.0);
            counts[k] += 1;
            for (j, s) in sums[k].iter_mut().enumerate() {
                *s += scores.get(t, j);
            }
        }
    }
    let [corrupted, clean] = [0, 1].map(|k| sums[k].iter().map(|s| s / counts[k].max(1) as f64).collect());
    Ok(GateProfile { corrupted, clean })
}
