//! Full per-clip network: per-modality TCN, fusion block, dropout on the
//! fused features and the MLP head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{fusion_forward, FusionConfig, FusionLayout, FusionMode, FusionTrace};
use crate::numcore::{Bindings, Matrix, ParamSet, Real, Tape, Var};
use crate::temporal::{head_forward, tcn_forward, Dropout, HeadConfig, HeadLayout, TcnConfig, TcnLayout};
use crate::{Error, Result};

/// Which label(s) a model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Valence,
    Arousal,
    /// One model with two outputs, trained on the summed loss.
    Joint,
}

impl Target {
    pub fn outputs(self) -> usize {
        match self {
            Target::Joint => 2,
            _ => 1,
        }
    }

    /// Label channels covered by the model's output rows, in row order.
    pub fn channels(self) -> &'static [Target] {
        match self {
            Target::Valence => &[Target::Valence],
            Target::Arousal => &[Target::Arousal],
            Target::Joint => &[Target::Valence, Target::Arousal],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Valence => "valence",
            Target::Arousal => "arousal",
            Target::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: FusionMode,
    /// Recursion depth `M`.
    pub iterations: usize,
    /// Gate temperature `T`.
    pub temperature: f64,
    pub joint_projection: bool,
    /// See [`FusionConfig::time_weight_gain`].
    pub time_weight_gain: Option<f64>,
    pub tcn: TcnConfig,
    pub head_hidden: Vec<usize>,
    /// Dropout on the fused features before the head.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Hgrjca,
            iterations: 3,
            temperature: 0.1,
            joint_projection: true,
            time_weight_gain: None,
            tcn: TcnConfig::default(),
            head_hidden: vec![32],
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tcn.validate()?;
        self.fusion(1, 1, 1).validate()?;
        if self.head_hidden.contains(&0) {
            return Err(Error::config("head layer sizes must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn fusion(&self, d_audio: usize, d_visual: usize, length: usize) -> FusionConfig {
        FusionConfig {
            mode: self.mode,
            d_audio,
            d_visual,
            length,
            iterations: self.iterations,
            temperature: self.temperature,
            joint_projection: self.joint_projection,
            time_weight_gain: self.time_weight_gain,
        }
    }
}

/// Parameter layout of a full model. The weights themselves live in a
/// separate [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub target: Target,
    pub tcn_audio: TcnLayout,
    pub tcn_visual: TcnLayout,
    pub fusion: FusionLayout,
    pub head: HeadLayout,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `outputs × L` predictions.
    pub prediction: Var,
    pub fusion: FusionTrace,
}

impl Model {
    /// Builds the layout and draws initial weights from `seed`. Parameters
    /// are registered in the order TCN (audio, visual), fusion, head.
    pub fn init<T: Real>(
        config: &ModelConfig,
        target: Target,
        d_audio: usize,
        d_visual: usize,
        length: usize,
        seed: u64,
    ) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let tcn_audio = TcnLayout::init(&config.tcn, d_audio, &mut params, "tcn_audio.", &mut rng)?;
        let tcn_visual = TcnLayout::init(&config.tcn, d_visual, &mut params, "tcn_visual.", &mut rng)?;
        let fusion = FusionLayout::init(&config.fusion(d_audio, d_visual, length), &mut params, "fusion.", &mut rng)?;
        let head_cfg = HeadConfig { hidden: config.head_hidden.clone(), outputs: target.outputs() };
        let head = HeadLayout::init(&head_cfg, d_audio + d_visual, &mut params, "head.", &mut rng)?;
        Ok((Self { config: config.clone(), target, tcn_audio, tcn_visual, fusion, head }, params))
    }

    pub fn length(&self) -> usize {
        self.fusion.config.length
    }

    /// Forward pass for one clip. Features at frames where `valid` is false
    /// are zeroed before anything else, so they cannot influence the output.
    /// `dropout_seed` enables training-mode dropout with that mask stream.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bindings: &Bindings,
        audio: &Matrix<T>,
        visual: &Matrix<T>,
        valid: &[bool],
        dropout_seed: Option<u64>,
    ) -> Result<ModelOutput> {
        let l = self.length();
        if audio.cols() != l || visual.cols() != l || valid.len() != l {
            return Err(Error::config(format!(
                "model expects {l} frames, got audio {}, visual {}, mask {}",
                audio.cols(),
                visual.cols(),
                valid.len()
            )));
        }
        let xa = tape.constant(mask_frames(audio, valid));
        let xv = tape.constant(mask_frames(visual, valid));
        let mut tcn_drop = dropout_seed.map(|s| Dropout::new(self.config.tcn.dropout, s ^ 0x7463_6e00));
        let ha = tcn_forward(tape, &self.tcn_audio, bindings, xa, tcn_drop.as_mut())?;
        let hv = tcn_forward(tape, &self.tcn_visual, bindings, xv, tcn_drop.as_mut())?;
        let trace = fusion_forward(tape, &self.fusion, bindings, ha, hv, self.config.mode)?;
        let mut fused = trace.fused;
        if let Some(s) = dropout_seed {
            fused = Dropout::new(self.config.dropout, s).apply(tape, fused)?;
        }
        let prediction = head_forward(tape, &self.head, bindings, fused)?;
        Ok(ModelOutput { prediction, fusion: trace })
    }

    /// Evaluation-mode prediction (`outputs × L`).
    pub fn predict<T: Real>(
        &self,
        params: &ParamSet<T>,
        audio: &Matrix<T>,
        visual: &Matrix<T>,
        valid: &[bool],
    ) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &b, audio, visual, valid, None)?;
        Ok(tape.value(out.prediction).clone())
    }
}

fn mask_frames<T: Real>(x: &Matrix<T>, valid: &[bool]) -> Matrix<T> {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| if valid[c] { x.get(r, c) } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(d: usize, l: usize, phase: f64) -> Matrix {
        Matrix::from_fn(d, l, |r, c| ((r as f64 + 1.0) * 0.7 + c as f64 * 0.9 + phase).sin())
    }

    #[test]
    fn jca_and_rjca_one_round_agree() {
        let mut cfg = ModelConfig { mode: FusionMode::Jca, iterations: 1, ..Default::default() };
        let (jca, pj) = Model::init::<f64>(&cfg, Target::Valence, 4, 3, 7, 5).unwrap();
        cfg.mode = FusionMode::Rjca;
        let (rjca, pr) = Model::init::<f64>(&cfg, Target::Valence, 4, 3, 7, 5).unwrap();
        assert_eq!(pj.len(), pr.len());
        let (a, v) = (inputs(4, 7, 0.0), inputs(3, 7, 1.0));
        let valid = vec![true; 7];
        assert_eq!(jca.predict(&pj, &a, &v, &valid).unwrap(), rjca.predict(&pr, &a, &v, &valid).unwrap());
    }

    #[test]
    fn masked_frames_have_no_effect() {
        let cfg = ModelConfig::default();
        let (m, p) = Model::init::<f64>(&cfg, Target::Joint, 4, 4, 6, 1).unwrap();
        let (a, v) = (inputs(4, 6, 0.2), inputs(4, 6, 0.4));
        let mut valid = vec![true; 6];
        valid[4] = false;
        let base = m.predict(&p, &a, &v, &valid).unwrap();
        let mut a2 = a.clone();
        a2.set(1, 4, 9.0);
        assert_eq!(m.predict(&p, &a2, &v, &valid).unwrap(), base);
        assert_eq!(base.shape(), (2, 6));
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let cfg = ModelConfig { dropout: 0.5, ..Default::default() };
        let (m, p) = Model::init::<f64>(&cfg, Target::Valence, 3, 3, 5, 2).unwrap();
        let (a, v) = (inputs(3, 5, 0.0), inputs(3, 5, 0.3));
        let valid = vec![true; 5];
        let run = |seed: Option<u64>| {
            let mut tape = Tape::new();
            let b = p.bind_frozen(&mut tape);
            let out = m.forward(&mut tape, &b, &a, &v, &valid, seed).unwrap();
            tape.value(out.prediction).clone()
        };
        assert_eq!(run(None), m.predict(&p, &a, &v, &valid).unwrap());
        assert_eq!(run(Some(4)), run(Some(4)));
        assert_ne!(run(Some(4)), run(None));
    }

    #[test]
    fn wrong_length_is_rejected() {
        let (m, p) = Model::init::<f64>(&ModelConfig::default(), Target::Valence, 3, 3, 5, 0).unwrap();
        let err = m.predict(&p, &inputs(3, 4, 0.0), &inputs(3, 4, 0.0), &[true; 4]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
