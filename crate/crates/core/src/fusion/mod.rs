//! Joint cross-attention fusion of two modality feature streams.
//!
//! Four variants share one set of building blocks:
//!
//! * **JCA** – a single joint cross-attention pass.
//! * **RJCA** – the pass applied `M` times, each round consuming the
//!   previous round's attended features.
//! * **GRJCA** – RJCA followed by a per-frame softmax gate over the original
//!   features and the attended features of every round.
//! * **HGRJCA** – a two-way gate inside every round (input vs. output of the
//!   round) followed by a high-level gate across the gated rounds.
//!
//! Shapes: audio features are `d_a × L`, visual `d_v × L`, `d = d_a + d_v`.
//! `W_ja` is `d_a × d`, `W_jv` is `d_v × d`, and `W_ca, W_cv, W_ha, W_hv` are
//! `L × L`, so a fusion layout is tied to one window length `L`.

mod ops;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ops::{
    attended_features, attention_maps, gate, grjca_gate, hgrjca_final_gate, hgrjca_iteration_gate, joint_correlation,
    joint_representation,
};

use crate::numcore::{Bindings, Matrix, ParamId, ParamSet, Real, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "JCA")]
    Jca,
    #[serde(rename = "RJCA")]
    Rjca,
    #[serde(rename = "GRJCA")]
    Grjca,
    #[serde(rename = "HGRJCA")]
    Hgrjca,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::Jca, FusionMode::Rjca, FusionMode::Grjca, FusionMode::Hgrjca];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Jca => "JCA",
            FusionMode::Rjca => "RJCA",
            FusionMode::Grjca => "GRJCA",
            FusionMode::Hgrjca => "HGRJCA",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "JCA" => Ok(FusionMode::Jca),
            "RJCA" => Ok(FusionMode::Rjca),
            "GRJCA" => Ok(FusionMode::Grjca),
            "HGRJCA" => Ok(FusionMode::Hgrjca),
            other => Err(Error::config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_audio: usize,
    pub d_visual: usize,
    /// Window length `L`.
    pub length: usize,
    /// Recursion depth `M`.
    pub iterations: usize,
    /// Gate softmax temperature `T`.
    pub temperature: f64,
    /// Apply a learnable `d × d` map after concatenating the modalities.
    pub joint_projection: bool,
    /// Multiplier on the Xavier draw of the `L × L` weights (`W_c·`, `W_h·`).
    /// `None` uses `1/√L`, which keeps activations from growing with `L`
    /// across rounds.
    #[serde(default)]
    pub time_weight_gain: Option<f64>,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_audio == 0 || self.d_visual == 0 || self.length == 0 {
            return Err(Error::config("fusion dimensions and length must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("recursion depth M must be at least 1"));
        }
        if self.mode == FusionMode::Jca && self.iterations != 1 {
            return Err(Error::config(format!("JCA is a single pass, got M = {}", self.iterations)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("gate temperature must be positive, got {}", self.temperature)));
        }
        if let Some(g) = self.time_weight_gain {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::config(format!("time_weight_gain must be positive, got {g}")));
            }
        }
        Ok(())
    }

    pub fn joint_dim(&self) -> usize {
        self.d_audio + self.d_visual
    }

    pub fn time_gain(&self) -> f64 {
        self.time_weight_gain.unwrap_or(1.0 / (self.length as f64).sqrt())
    }
}

/// Per-clip inputs to the fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures<T = f64> {
    pub audio: Matrix<T>,
    pub visual: Matrix<T>,
}

impl<T: Real> ModalityFeatures<T> {
    pub fn new(audio: Matrix<T>, visual: Matrix<T>) -> Result<Self> {
        if audio.cols() != visual.cols() {
            return Err(Error::config(format!("audio has {} frames but visual has {}", audio.cols(), visual.cols())));
        }
        if !audio.is_finite() || !visual.is_finite() {
            return Err(crate::numcore::NumError::NonFinite("modality features".into()).into());
        }
        Ok(Self { audio, visual })
    }

    pub fn length(&self) -> usize {
        self.audio.cols()
    }
}

/// Parameters of one joint cross-attention round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationWeights {
    pub projection: Option<ParamId>,
    pub w_ja: ParamId,
    pub w_jv: ParamId,
    pub w_ca: ParamId,
    pub w_cv: ParamId,
    pub w_ha: ParamId,
    pub w_hv: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GateWeights {
    None,
    /// One `d_· × (M+1)` gate per modality.
    Flat {
        audio: ParamId,
        visual: ParamId,
    },
    /// `d_· × 2` gates per round plus `d_· × M` final gates.
    Hierarchical {
        audio: Vec<ParamId>,
        visual: Vec<ParamId>,
        final_audio: ParamId,
        final_visual: ParamId,
    },
}

/// Where each fusion parameter lives inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionLayout {
    pub config: FusionConfig,
    pub rounds: Vec<IterationWeights>,
    pub gates: GateWeights,
}

/// Xavier/Glorot uniform initialisation.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.random_range(-bound..=bound)))
}

impl FusionLayout {
    /// Registers fusion parameters under `prefix`. Attention weights are
    /// Xavier-uniform (the `L × L` ones scaled by [`FusionConfig::time_gain`]);
    /// gate weights start at zero so every gate is uniform.
    /// Round parameters are created before gate parameters, so JCA and
    /// RJCA(M=1) draw identical weights from the same generator state.
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: &FusionConfig,
        params: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (da, dv, l, d, m) = (config.d_audio, config.d_visual, config.length, config.joint_dim(), config.iterations);
        let gain = T::from_f64(config.time_gain());
        let time = |rng: &mut R| xavier_uniform::<T, R>(l, l, rng).scale(gain);
        let mut rounds = Vec::with_capacity(m);
        for t in 1..=m {
            let name = |w: &str| format!("{prefix}round{t}.{w}");
            let projection = config.joint_projection.then(|| params.add(name("w_joint"), xavier_uniform(d, d, rng)));
            rounds.push(IterationWeights {
                projection,
                w_ja: params.add(name("w_ja"), xavier_uniform(da, d, rng)),
                w_jv: params.add(name("w_jv"), xavier_uniform(dv, d, rng)),
                w_ca: params.add(name("w_ca"), time(rng)),
                w_cv: params.add(name("w_cv"), time(rng)),
                w_ha: params.add(name("w_ha"), time(rng)),
                w_hv: params.add(name("w_hv"), time(rng)),
            });
        }
        let gates = match config.mode {
            FusionMode::Jca | FusionMode::Rjca => GateWeights::None,
            FusionMode::Grjca => GateWeights::Flat {
                audio: params.add(format!("{prefix}gate.audio"), Matrix::zeros(da, m + 1)),
                visual: params.add(format!("{prefix}gate.visual"), Matrix::zeros(dv, m + 1)),
            },
            FusionMode::Hgrjca => {
                let mut audio = Vec::with_capacity(m);
                let mut visual = Vec::with_capacity(m);
                for t in 1..=m {
                    audio.push(params.add(format!("{prefix}gate{t}.audio"), Matrix::zeros(da, 2)));
                    visual.push(params.add(format!("{prefix}gate{t}.visual"), Matrix::zeros(dv, 2)));
                }
                GateWeights::Hierarchical {
                    audio,
                    visual,
                    final_audio: params.add(format!("{prefix}gate_final.audio"), Matrix::zeros(da, m)),
                    final_visual: params.add(format!("{prefix}gate_final.visual"), Matrix::zeros(dv, m)),
                }
            }
        };
        Ok(Self { config: config.clone(), rounds, gates })
    }

    /// Runs the layout's own mode with frozen parameters and returns every
    /// intermediate.
    pub fn forward_values<T: Real>(&self, params: &ParamSet<T>, feats: &ModalityFeatures<T>) -> Result<FusionState<T>> {
        let mut tape = Tape::new();
        let bindings = params.bind_frozen(&mut tape);
        let xa = tape.constant(feats.audio.clone());
        let xv = tape.constant(feats.visual.clone());
        let trace = fusion_forward(&mut tape, self, &bindings, xa, xv, self.config.mode)?;
        Ok(trace.state(&tape))
    }
}

/// Tape handles for one round.
#[derive(Debug, Clone, Copy)]
pub struct RoundTrace {
    pub joint: Var,
    pub corr_audio: Var,
    pub corr_visual: Var,
    pub map_audio: Var,
    pub map_visual: Var,
    pub attended_audio: Var,
    pub attended_visual: Var,
}

/// Tape handles for one gating layer: `L × K` scores per modality.
#[derive(Debug, Clone, Copy)]
pub struct GateTrace {
    pub scores_audio: Var,
    pub scores_visual: Var,
}

#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub input_audio: Var,
    pub input_visual: Var,
    pub rounds: Vec<RoundTrace>,
    /// GRJCA: one entry. HGRJCA: one per round, then the final gate.
    pub gates: Vec<GateTrace>,
    /// HGRJCA per-round gated features.
    pub round_gated: Vec<(Var, Var)>,
    pub output_audio: Var,
    pub output_visual: Var,
    /// `(d_a + d_v) × L` concatenation of the outputs.
    pub fused: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState<T> {
    pub joint: Matrix<T>,
    pub corr_audio: Matrix<T>,
    pub corr_visual: Matrix<T>,
    pub map_audio: Matrix<T>,
    pub map_visual: Matrix<T>,
    pub attended_audio: Matrix<T>,
    pub attended_visual: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateState<T> {
    pub scores_audio: Matrix<T>,
    pub scores_visual: Matrix<T>,
}

/// Values of every fusion intermediate for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState<T = f64> {
    pub rounds: Vec<RoundState<T>>,
    pub gates: Vec<GateState<T>>,
    pub round_gated: Vec<(Matrix<T>, Matrix<T>)>,
    pub output_audio: Matrix<T>,
    pub output_visual: Matrix<T>,
    pub fused: Matrix<T>,
}

impl FusionTrace {
    pub fn state<T: Real>(&self, tape: &Tape<T>) -> FusionState<T> {
        let v = |x: Var| tape.value(x).clone();
        FusionState {
            rounds: self
                .rounds
                .iter()
                .map(|r| RoundState {
                    joint: v(r.joint),
                    corr_audio: v(r.corr_audio),
                    corr_visual: v(r.corr_visual),
                    map_audio: v(r.map_audio),
                    map_visual: v(r.map_visual),
                    attended_audio: v(r.attended_audio),
                    attended_visual: v(r.attended_visual),
                })
                .collect(),
            gates: self
                .gates
                .iter()
                .map(|g| GateState { scores_audio: v(g.scores_audio), scores_visual: v(g.scores_visual) })
                .collect(),
            round_gated: self.round_gated.iter().map(|&(a, b)| (v(a), v(b))).collect(),
            output_audio: v(self.output_audio),
            output_visual: v(self.output_visual),
            fused: v(self.fused),
        }
    }
}

/// Chains `M` joint cross-attention rounds. `J` is rebuilt every round from
/// that round's input features.
pub fn rjca_forward<T: Real>(
    tape: &mut Tape<T>,
    layout: &FusionLayout,
    bindings: &Bindings,
    xa: Var,
    xv: Var,
    iterations: usize,
) -> Result<Vec<RoundTrace>> {
    if iterations > layout.rounds.len() {
        return Err(Error::config(format!("requested {iterations} rounds but the layout has {}", layout.rounds.len())));
    }
    let mut rounds = Vec::with_capacity(iterations);
    let (mut prev_a, mut prev_v) = (xa, xv);
    for (t, w) in layout.rounds.iter().take(iterations).enumerate() {
        let joint = joint_representation(tape, prev_a, prev_v, w.projection.map(|p| bindings.var(p)))?;
        let (corr_audio, corr_visual) =
            joint_correlation(tape, prev_a, prev_v, joint, bindings.var(w.w_ja), bindings.var(w.w_jv))?;
        let (map_audio, map_visual) =
            attention_maps(tape, prev_a, prev_v, corr_audio, corr_visual, bindings.var(w.w_ca), bindings.var(w.w_cv))?;
        let (attended_audio, attended_visual) =
            attended_features(tape, prev_a, prev_v, map_audio, map_visual, bindings.var(w.w_ha), bindings.var(w.w_hv))?;
        if !tape.value(attended_audio).is_finite() || !tape.value(attended_visual).is_finite() {
            return Err(crate::numcore::NumError::NonFinite(format!("fusion round {}", t + 1)).into());
        }
        rounds.push(RoundTrace { joint, corr_audio, corr_visual, map_audio, map_visual, attended_audio, attended_visual });
        prev_a = attended_audio;
        prev_v = attended_visual;
    }
    Ok(rounds)
}

/// Runs `mode` over the layout. A layout can be run in any mode whose
/// parameters it contains: RJCA works on any layout, GRJCA needs flat gates,
/// HGRJCA needs hierarchical gates and JCA needs `M = 1`.
pub fn fusion_forward<T: Real>(
    tape: &mut Tape<T>,
    layout: &FusionLayout,
    bindings: &Bindings,
    xa: Var,
    xv: Var,
    mode: FusionMode,
) -> Result<FusionTrace> {
    let cfg = &layout.config;
    let m = cfg.iterations;
    let (ra, ca) = tape.shape(xa);
    let (rv, cv) = tape.shape(xv);
    if ra != cfg.d_audio || rv != cfg.d_visual || ca != cfg.length || cv != cfg.length {
        return Err(Error::config(format!(
            "fusion expects audio {}x{} and visual {}x{}, got {ra}x{ca} and {rv}x{cv}",
            cfg.d_audio, cfg.length, cfg.d_visual, cfg.length
        )));
    }
    let temperature = T::from_f64(cfg.temperature);
    let mut gates = Vec::new();
    let mut round_gated = Vec::new();

    let (rounds, output_audio, output_visual) = match (mode, &layout.gates) {
        (FusionMode::Jca, _) if m != 1 => {
            return Err(Error::config(format!("JCA needs a single-round layout, this one has M = {m}")));
        }
        (FusionMode::Jca | FusionMode::Rjca, _) => {
            let rounds = rjca_forward(tape, layout, bindings, xa, xv, m)?;
            let last = rounds[m - 1];
            (rounds, last.attended_audio, last.attended_visual)
        }
        (FusionMode::Grjca, GateWeights::Flat { audio, visual }) => {
            let rounds = rjca_forward(tape, layout, bindings, xa, xv, m)?;
            let (oa, ov, g) = grjca_gate(tape, xa, xv, &rounds, bindings.var(*audio), bindings.var(*visual), temperature)?;
            gates.push(g);
            (rounds, oa, ov)
        }
        (FusionMode::Hgrjca, GateWeights::Hierarchical { audio, visual, final_audio, final_visual }) => {
            let rounds = rjca_forward(tape, layout, bindings, xa, xv, m)?;
            let (mut prev_a, mut prev_v) = (xa, xv);
            for (t, r) in rounds.iter().enumerate() {
                let (ga, sa) = hgrjca_iteration_gate(tape, prev_a, r.attended_audio, bindings.var(audio[t]), temperature)?;
                let (gv, sv) = hgrjca_iteration_gate(tape, prev_v, r.attended_visual, bindings.var(visual[t]), temperature)?;
                gates.push(GateTrace { scores_audio: sa, scores_visual: sv });
                round_gated.push((ga, gv));
                prev_a = r.attended_audio;
                prev_v = r.attended_visual;
            }
            let gated_a: Vec<Var> = round_gated.iter().map(|g| g.0).collect();
            let gated_v: Vec<Var> = round_gated.iter().map(|g| g.1).collect();
            let (oa, sa) = hgrjca_final_gate(tape, &gated_a, bindings.var(*final_audio), temperature)?;
            let (ov, sv) = hgrjca_final_gate(tape, &gated_v, bindings.var(*final_visual), temperature)?;
            gates.push(GateTrace { scores_audio: sa, scores_visual: sv });
            (rounds, oa, ov)
        }
        (mode, _) => {
            return Err(Error::config(format!("{mode} needs gate parameters this {} layout does not have", cfg.mode)));
        }
    };
    let fused = tape.concat_rows(output_audio, output_visual)?;
    Ok(FusionTrace { input_audio: xa, input_visual: xv, rounds, gates, round_gated, output_audio, output_visual, fused })
}
