//! Gradient-check suite over every fusion mode and recursion depth, run
//! through the full model (TCN with dropout, fusion, fused dropout, head)
//! and a masked joint CCC loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fusion::FusionMode;
use crate::model::{Model, ModelConfig, Target};
use crate::numcore::{
    gradcheck, gradcheck_extended, Bindings, GradcheckOptions, GradcheckReport, Matrix, NumError, Objective, ParamSet, Real,
    Tape, Var,
};
use crate::synthdata::mix_seed;
use crate::temporal::TcnConfig;
use crate::Result;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub d_audio: usize,
    pub d_visual: usize,
    pub length: usize,
    pub max_iterations: usize,
    /// Parameter-name suffix whose analytic gradient is corrupted.
    pub inject_fault: Option<String>,
    pub seed: u64,
    /// Evaluate the central differences in double-double arithmetic.
    pub extended: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            tolerance: 1e-5,
            d_audio: 8,
            d_visual: 8,
            length: 6,
            max_iterations: 3,
            inject_fault: None,
            seed: 7,
            extended: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    /// `"<mode> M=<m> <parameter>"`.
    pub group: String,
    pub worst_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Flat index, analytic and numeric derivative of the worst entry.
    pub worst_entry: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| !(g.worst_rel_err < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn worst(&self) -> Option<&GroupResult> {
        self.groups.iter().max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
    }
}

/// Every (mode, M) pair the suite covers.
pub fn suite_configs(max_iterations: usize) -> Vec<(FusionMode, usize)> {
    let mut out = vec![(FusionMode::Jca, 1)];
    for mode in [FusionMode::Rjca, FusionMode::Grjca, FusionMode::Hgrjca] {
        out.extend((1..=max_iterations).map(|m| (mode, m)));
    }
    out
}

fn num(e: crate::Error) -> NumError {
    match e {
        crate::Error::Num(n) => n,
        other => NumError::Parameter(other.to_string()),
    }
}

/// One (mode, M) configuration of the suite: a model, its parameters at the
/// check point, one clip and the fixed dropout stream.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub mode: FusionMode,
    pub iterations: usize,
    pub model: Model,
    pub params: ParamSet<f64>,
    pub audio: Matrix,
    pub visual: Matrix,
    pub valid: Vec<bool>,
    pub valence: Vec<f64>,
    pub arousal: Vec<f64>,
    pub dropout_seed: u64,
}

impl SuiteCase {
    /// Gate weights and biases are drawn from `±0.5` so gates are not
    /// uniform; the last frame is masked out.
    pub fn build(opts: &SuiteOptions, mode: FusionMode, iterations: usize) -> Result<Self> {
        let (da, dv, l) = (opts.d_audio, opts.d_visual, opts.length);
        let case_seed = mix_seed(opts.seed, ((mode as u64) << 8) | iterations as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let audio = Matrix::from_fn(da, l, |_, _| rng.random_range(-1.0..1.0));
        let visual = Matrix::from_fn(dv, l, |_, _| rng.random_range(-1.0..1.0));
        let mut valid = vec![true; l];
        valid[l - 1] = false;
        let cfg = ModelConfig {
            mode,
            iterations,
            temperature: 0.1,
            joint_projection: true,
            time_weight_gain: None,
            tcn: TcnConfig { dropout: 0.2, ..Default::default() },
            head_hidden: vec![8],
            dropout: 0.5,
        };
        let (model, mut params) = Model::init::<f64>(&cfg, Target::Joint, da, dv, l, case_seed)?;
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id);
            if name.contains("gate") || name.ends_with("bias") {
                let (r, c) = params.get(id).shape();
                *params.get_mut(id) = Matrix::from_fn(r, c, |_, _| rng.random_range(-0.5..0.5));
            }
        }
        let dropout_seed = case_seed.wrapping_add(99);
        let valence = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let arousal = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(Self { mode, iterations, model, params, audio, visual, valid, valence, arousal, dropout_seed })
    }

    /// Summed valence and arousal CCC loss over the valid frames.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, b: &Bindings) -> std::result::Result<Var, NumError> {
        let cast = |v: &[f64]| -> Vec<T> { v.iter().map(|&x| T::from_f64(x)).collect() };
        let (audio, visual) = (self.audio.cast::<T>(), self.visual.cast::<T>());
        let out = self.model.forward(tape, b, &audio, &visual, &self.valid, Some(self.dropout_seed)).map_err(num)?;
        let pv = tape.slice_rows(out.prediction, 0, 1)?;
        let pa = tape.slice_rows(out.prediction, 1, 1)?;
        let (lv, _) = tape.ccc_loss(pv, &cast(&self.valence), Some(&self.valid))?;
        let (la, _) = tape.ccc_loss(pa, &cast(&self.arousal), Some(&self.valid))?;
        tape.add(lv, la)
    }

    pub fn check(&self, opts: &SuiteOptions) -> Result<GradcheckReport> {
        let inject = opts
            .inject_fault
            .as_ref()
            .and_then(|f| self.params.ids().map(|i| self.params.name(i)).find(|n| n.ends_with(f.as_str())).map(str::to_string));
        let go = GradcheckOptions { epsilon: opts.epsilon, max_samples_per_param: None, seed: opts.seed, inject_fault: inject };
        Ok(if opts.extended {
            gradcheck_extended(&self.params, &go, self)?
        } else {
            gradcheck(&self.params, &go, |tape, b| self.loss(tape, b))?
        })
    }
}

impl Objective for SuiteCase {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, b: &Bindings) -> std::result::Result<Var, NumError> {
        self.loss(tape, b)
    }
}

/// Runs every suite case and collects one group per (mode, M, parameter).
pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut groups = Vec::new();
    for (mode, m) in suite_configs(opts.max_iterations) {
        let report = SuiteCase::build(opts, mode, m)?.check(opts)?;
        for p in report.params {
            groups.push(GroupResult {
                group: format!("{mode} M={m} {}", p.name),
                worst_rel_err: p.worst_rel_err,
                checked: p.checked,
                skipped_kinks: p.skipped_kinks,
                worst_entry: p.worst_entry,
            });
        }
    }
    Ok(SuiteReport { tolerance: opts.tolerance, groups })
}
