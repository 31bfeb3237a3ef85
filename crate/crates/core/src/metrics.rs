//! Concordance Correlation Coefficient, its loss, and evaluation reports.
//!
//! All moments are population (1/N) moments. When a validity mask is given,
//! only frames with `mask[i] == true` enter the statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::fusion::FusionMode;
use crate::numcore::{NumError, Real};

/// Moments behind one CCC evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccParts<T> {
    pub ccc: T,
    /// `1 − ccc`, evaluated as `E[(p − t)²] / (σp² + σt² + (μp − μt)²)` so it
    /// keeps full relative precision as `ccc → 1`.
    pub loss: T,
    /// Both inputs were constant over the valid frames; `ccc` is reported as 0.
    pub degenerate: bool,
    pub n: usize,
    pub mean_pred: T,
    pub mean_truth: T,
    pub var_pred: T,
    pub var_truth: T,
    pub cov: T,
}

impl<T: Real> CccParts<T> {
    pub fn compute(pred: &[T], truth: &[T], mask: Option<&[bool]>) -> Result<Self, NumError> {
        if pred.len() != truth.len() {
            return Err(NumError::dimension("ccc", (1, pred.len()), (1, truth.len())));
        }
        if let Some(m) = mask {
            if m.len() != pred.len() {
                return Err(NumError::dimension("ccc mask", (1, m.len()), (1, pred.len())));
            }
        }
        let valid = |i: usize| mask.is_none_or(|m| m[i]);
        let n = (0..pred.len()).filter(|&i| valid(i)).count();
        if n < 2 {
            return Err(NumError::Parameter(format!("ccc needs at least 2 valid frames, got {n}")));
        }
        let nf = T::from_f64(n as f64);
        let mut sp = T::zero();
        let mut st = T::zero();
        for i in (0..pred.len()).filter(|&i| valid(i)) {
            sp = sp + pred[i];
            st = st + truth[i];
        }
        let mean_pred = sp / nf;
        let mean_truth = st / nf;
        let mut vp = T::zero();
        let mut vt = T::zero();
        let mut cv = T::zero();
        let mut sd = T::zero();
        for i in (0..pred.len()).filter(|&i| valid(i)) {
            let dp = pred[i] - mean_pred;
            let dt = truth[i] - mean_truth;
            let e = pred[i] - truth[i];
            vp = vp + dp * dp;
            vt = vt + dt * dt;
            cv = cv + dp * dt;
            sd = sd + e * e;
        }
        let var_pred = vp / nf;
        let var_truth = vt / nf;
        let cov = cv / nf;
        let diff = mean_pred - mean_truth;
        let denom = var_pred + var_truth + diff * diff;
        let degenerate = (var_pred == T::zero() && var_truth == T::zero()) || denom == T::zero();
        let ccc = if degenerate { T::zero() } else { (cov + cov) / denom };
        let loss = if degenerate { T::one() } else { sd / nf / denom };
        Ok(Self { ccc, loss, degenerate, n, mean_pred, mean_truth, var_pred, var_truth, cov })
    }

    /// `∂ccc/∂pred_i`; zero at masked frames and for degenerate inputs.
    pub fn gradient(&self, pred: &[T], truth: &[T], mask: Option<&[bool]>) -> Vec<T> {
        if self.degenerate {
            return vec![T::zero(); pred.len()];
        }
        let two = T::from_f64(2.0);
        let nf = T::from_f64(self.n as f64);
        let diff = self.mean_pred - self.mean_truth;
        let num = two * self.cov;
        let den = self.var_pred + self.var_truth + diff * diff;
        (0..pred.len())
            .map(|i| {
                if mask.is_some_and(|m| !m[i]) {
                    return T::zero();
                }
                let d_num = two * (truth[i] - self.mean_truth) / nf;
                let d_den = two * (pred[i] - self.mean_pred) / nf + two * diff / nf;
                (d_num * den - num * d_den) / (den * den)
            })
            .collect()
    }
}

/// CCC value plus the degenerate-input flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ccc<T = f64> {
    pub value: T,
    pub degenerate: bool,
}

pub fn ccc<T: Real>(pred: &[T], truth: &[T]) -> Result<Ccc<T>, NumError> {
    ccc_masked(pred, truth, None)
}

pub fn ccc_masked<T: Real>(pred: &[T], truth: &[T], mask: Option<&[bool]>) -> Result<Ccc<T>, NumError> {
    let p = CccParts::compute(pred, truth, mask)?;
    Ok(Ccc { value: p.ccc, degenerate: p.degenerate })
}

/// `Σ_c (1 − CCC(pred_c, truth_c))` over the supplied targets. Pass one pair
/// for a single-target model, two for joint valence/arousal training.
pub fn ccc_loss<T: Real>(targets: &[(&[T], &[T])]) -> Result<Ccc<T>, NumError> {
    let mut loss = T::zero();
    let mut degenerate = false;
    for (pred, truth) in targets {
        let c = CccParts::compute(pred, truth, None)?;
        loss = loss + c.loss;
        degenerate |= c.degenerate;
    }
    Ok(Ccc { value: loss, degenerate })
}

/// Validation outcome for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: usize,
    pub mode: FusionMode,
    pub iterations: usize,
    pub temperature: f64,
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub frames: usize,
    /// Per-clip CCC for diagnostics; `None` where a clip is too short or
    /// degenerate.
    pub per_clip: Vec<(String, Option<f64>)>,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 6] = ["fold", "mode", "M", "T", "ccc_v", "ccc_a"];

    /// The reported score: valence CCC, else arousal CCC, averaged when both exist.
    pub fn score(&self) -> f64 {
        match (self.ccc_valence, self.ccc_arousal) {
            (Some(v), Some(a)) => 0.5 * (v + a),
            (Some(v), None) => v,
            (None, Some(a)) => a,
            (None, None) => f64::NEG_INFINITY,
        }
    }

    pub fn csv_record(&self) -> [String; 6] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.fold.to_string(),
            self.mode.to_string(),
            self.iterations.to_string(),
            self.temperature.to_string(),
            opt(self.ccc_valence),
            opt(self.ccc_arousal),
        ]
    }
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[EvalReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EvalReport::CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}
