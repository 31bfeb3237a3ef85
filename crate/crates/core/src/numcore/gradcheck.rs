//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dd::Dd;
use super::matrix::Real;
use super::params::{Bindings, ParamSet};
use super::tape::{Tape, Var};
use super::NumError;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Finite-difference step, must lie in `[1e-7, 1e-3]`.
    pub epsilon: f64,
    /// Check at most this many entries per parameter (`None` = all).
    pub max_samples_per_param: Option<usize>,
    pub seed: u64,
    /// Negative control: scales the analytic gradient of the named
    /// parameter by 1.5 before comparison, so the check must fail on it.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-6, max_samples_per_param: None, seed: 0, inject_fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub worst_rel_err: f64,
    pub checked: usize,
    /// Entries skipped because a ReLU changed sides between `θ-ε` and `θ+ε`.
    pub skipped_kinks: usize,
    /// Flat index, analytic and numeric value of the worst entry.
    pub worst_entry: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.worst_rel_err))
    }

    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
    }
}

/// Relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// A scalar objective that can be built on a tape of any precision.
pub trait Objective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, bindings: &Bindings) -> Result<Var, NumError>;
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences for every (or a seeded sample of) parameter entry.
/// Both sides are evaluated at precision `T`.
pub fn gradcheck<T, F>(params: &ParamSet<T>, opts: &GradcheckOptions, f: F) -> Result<GradcheckReport, NumError>
where
    T: Real,
    F: Fn(&mut Tape<T>, &Bindings) -> Result<Var, NumError>,
{
    check_epsilon(opts)?;
    let analytic = analytic_gradients(params, opts, &f)?;
    compare(params, opts, &analytic, |p| {
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let out = f(&mut tape, &b)?;
        Ok((tape, out))
    })
}

/// Like [`gradcheck`], but the central differences are evaluated in
/// double-double arithmetic while the analytic gradient comes from the
/// 64-bit reverse pass. The numeric side is then limited by truncation
/// only, so gradients far below `f64` rounding of the objective can be
/// checked.
pub fn gradcheck_extended<O: Objective>(
    params: &ParamSet<f64>,
    opts: &GradcheckOptions,
    objective: &O,
) -> Result<GradcheckReport, NumError> {
    check_epsilon(opts)?;
    let analytic = analytic_gradients(params, opts, &|tape: &mut Tape<f64>, b: &Bindings| objective.eval(tape, b))?;
    compare(&params.cast::<Dd>(), opts, &analytic, |p| {
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let out = objective.eval(&mut tape, &b)?;
        Ok((tape, out))
    })
}

fn check_epsilon(opts: &GradcheckOptions) -> Result<(), NumError> {
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(NumError::Parameter(format!("gradcheck epsilon {} outside [1e-7, 1e-3]", opts.epsilon)));
    }
    Ok(())
}

fn analytic_gradients<T, F>(params: &ParamSet<T>, opts: &GradcheckOptions, f: &F) -> Result<Vec<Vec<f64>>, NumError>
where
    T: Real,
    F: Fn(&mut Tape<T>, &Bindings) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let out = f(&mut tape, &bindings)?;
    scalar(&tape, out, "loss at the unperturbed point")?;
    let grads = tape.backward(out)?;
    let fault = opts.inject_fault.as_deref().and_then(|n| params.find(n));
    Ok(bindings
        .gradients(&tape, &grads)
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let k = if fault.is_some_and(|id| id.index() == i) { 1.5 } else { 1.0 };
            g.data().iter().map(|v| v.as_f64() * k).collect()
        })
        .collect())
}

fn compare<U, E>(
    params: &ParamSet<U>,
    opts: &GradcheckOptions,
    analytic: &[Vec<f64>],
    eval: E,
) -> Result<GradcheckReport, NumError>
where
    U: Real,
    E: Fn(&ParamSet<U>) -> Result<(Tape<U>, Var), NumError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = U::from_f64(opts.epsilon);
    let mut work = params.clone();
    let mut report = GradcheckReport::default();

    for id in params.ids() {
        let name = params.name(id).to_string();
        let n = params.get(id).data().len();
        let coords: Vec<usize> = match opts.max_samples_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck { name: name.clone(), worst_rel_err: 0.0, checked: 0, skipped_kinks: 0, worst_entry: None };
        for &k in &coords {
            let orig = params.get(id).data()[k];
            let mut at = |delta: U| -> Result<(U, Vec<bool>), NumError> {
                work.get_mut(id).data_mut()[k] = orig + delta;
                let (tape, out) = eval(&work)?;
                work.get_mut(id).data_mut()[k] = orig;
                Ok((scalar(&tape, out, &name)?, tape.relu_pattern()))
            };
            let (fp, pattern_p) = at(eps)?;
            let (fm, pattern_m) = at(-eps)?;
            if pattern_p != pattern_m {
                check.skipped_kinks += 1;
                continue;
            }
            let (a, num) = (analytic[id.index()][k], ((fp - fm) / (eps + eps)).as_f64());
            let err = relative_error(a, num);
            if check.worst_entry.is_none() || err > check.worst_rel_err {
                check.worst_rel_err = err;
                check.worst_entry = Some((k, a, num));
            }
            check.checked += 1;
        }
        report.params.push(check);
    }
    Ok(report)
}

fn scalar<T: Real>(tape: &Tape<T>, out: Var, context: &str) -> Result<T, NumError> {
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(NumError::dimension("gradcheck output", v.shape(), (1, 1)));
    }
    let x = v.get(0, 0);
    if !x.is_finite() {
        return Err(NumError::NonFinite(format!("gradcheck loss while perturbing {context}")));
    }
    Ok(x)
}
