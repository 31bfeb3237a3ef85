//! Shared fixtures: a straight-line nalgebra reimplementation of the fusion
//! equations and random fusion configurations.

#![allow(dead_code)]

use avfusion::fusion::{gate as gate_op, FusionConfig, FusionLayout, FusionMode, GateWeights};
use avfusion::numcore::{Matrix, ParamId, ParamSet, Tape};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

pub fn max_abs_diff(a: &Matrix, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    (to_na(a) - b).abs().max()
}

pub fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

/// Row-wise softmax of `x / t`.
pub fn softmax_rows(x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = ((*v - max) / t).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// `ReLU(Σ_k cand_k ⊙ 1·S[:,k]ᵀ)` with `S = softmax(selᵀ W / t)`.
pub fn gate(sel: &DMatrix<f64>, cands: &[DMatrix<f64>], w: &DMatrix<f64>, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let scores = softmax_rows(&(sel.transpose() * w), t);
    let mut acc = DMatrix::zeros(sel.nrows(), sel.ncols());
    for (k, c) in cands.iter().enumerate() {
        for col in 0..c.ncols() {
            let s = scores[(col, k)];
            for row in 0..c.nrows() {
                acc[(row, col)] += c[(row, col)] * s;
            }
        }
    }
    (relu(&acc), scores)
}

pub struct OracleRound {
    pub corr_audio: DMatrix<f64>,
    pub corr_visual: DMatrix<f64>,
    pub attended_audio: DMatrix<f64>,
    pub attended_visual: DMatrix<f64>,
}

pub struct OracleOutput {
    pub rounds: Vec<OracleRound>,
    pub scores: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    pub fused: DMatrix<f64>,
}

/// Runs `mode` straight through the equations with nalgebra products.
pub fn oracle(layout: &FusionLayout, params: &ParamSet, xa: &Matrix, xv: &Matrix, mode: FusionMode) -> OracleOutput {
    let cfg = &layout.config;
    let p = |id: ParamId| to_na(params.get(id));
    let d = (cfg.d_audio + cfg.d_visual) as f64;
    let (x0a, x0v) = (to_na(xa), to_na(xv));
    let (mut a, mut v) = (x0a.clone(), x0v.clone());
    let mut rounds = Vec::new();
    for w in &layout.rounds {
        let mut j = DMatrix::zeros(a.nrows() + v.nrows(), a.ncols());
        j.rows_mut(0, a.nrows()).copy_from(&a);
        j.rows_mut(a.nrows(), v.nrows()).copy_from(&v);
        if let Some(proj) = w.projection {
            j = p(proj) * j;
        }
        let ca = (a.transpose() * (p(w.w_ja) * &j) / d.sqrt()).map(f64::tanh);
        let cv = (v.transpose() * (p(w.w_jv) * &j) / d.sqrt()).map(f64::tanh);
        let ha = relu(&(&a * p(w.w_ca) * &ca));
        let hv = relu(&(&v * p(w.w_cv) * &cv));
        let na = ha * p(w.w_ha) + &a;
        let nv = hv * p(w.w_hv) + &v;
        rounds.push(OracleRound { corr_audio: ca, corr_visual: cv, attended_audio: na.clone(), attended_visual: nv.clone() });
        a = na;
        v = nv;
    }
    let t = cfg.temperature;
    let mut scores = Vec::new();
    let (oa, ov) = match (&layout.gates, mode) {
        (_, FusionMode::Jca | FusionMode::Rjca) => (a, v),
        (GateWeights::Flat { audio, visual }, FusionMode::Grjca) => {
            let ca: Vec<_> = std::iter::once(x0a).chain(rounds.iter().map(|r| r.attended_audio.clone())).collect();
            let cv: Vec<_> = std::iter::once(x0v).chain(rounds.iter().map(|r| r.attended_visual.clone())).collect();
            let (ga, sa) = gate(&a, &ca, &p(*audio), t);
            let (gv, sv) = gate(&v, &cv, &p(*visual), t);
            scores.push((sa, sv));
            (ga, gv)
        }
        (GateWeights::Hierarchical { audio, visual, final_audio, final_visual }, FusionMode::Hgrjca) => {
            let (mut pa, mut pv) = (x0a, x0v);
            let (mut gated_a, mut gated_v) = (Vec::new(), Vec::new());
            for (k, r) in rounds.iter().enumerate() {
                let (ga, sa) = gate(&r.attended_audio, &[pa, r.attended_audio.clone()], &p(audio[k]), t);
                let (gv, sv) = gate(&r.attended_visual, &[pv, r.attended_visual.clone()], &p(visual[k]), t);
                scores.push((sa, sv));
                gated_a.push(ga);
                gated_v.push(gv);
                pa = r.attended_audio.clone();
                pv = r.attended_visual.clone();
            }
            let sum = |g: &[DMatrix<f64>]| g.iter().skip(1).fold(g[0].clone(), |acc, x| acc + x);
            let (fa, sa) = gate(&sum(&gated_a), &gated_a, &p(*final_audio), t);
            let (fv, sv) = gate(&sum(&gated_v), &gated_v, &p(*final_visual), t);
            scores.push((sa, sv));
            (fa, fv)
        }
        _ => panic!("layout lacks the gates for {mode}"),
    };
    let mut fused = DMatrix::zeros(oa.nrows() + ov.nrows(), oa.ncols());
    fused.rows_mut(0, oa.nrows()).copy_from(&oa);
    fused.rows_mut(oa.nrows(), ov.nrows()).copy_from(&ov);
    OracleOutput { rounds, scores, fused }
}

pub struct Case {
    pub layout: FusionLayout,
    pub params: ParamSet,
    pub audio: Matrix,
    pub visual: Matrix,
}

/// Random layout with Xavier attention weights, gate weights drawn from
/// `±gate_scale` and inputs from `±1`.
pub fn random_case<R: Rng>(rng: &mut R, config: FusionConfig, gate_scale: f64) -> Case {
    let mut params = ParamSet::new();
    let layout = FusionLayout::init(&config, &mut params, "", rng).unwrap();
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).starts_with("gate") {
            let (r, c) = params.get(id).shape();
            *params.get_mut(id) = Matrix::from_fn(r, c, |_, _| rng.random_range(-gate_scale..=gate_scale));
        }
    }
    let audio = Matrix::from_fn(config.d_audio, config.length, |_, _| rng.random_range(-1.0..=1.0));
    let visual = Matrix::from_fn(config.d_visual, config.length, |_, _| rng.random_range(-1.0..=1.0));
    Case { layout, params, audio, visual }
}

/// Draws a small configuration: `d_a, d_v, L ≤ 8`, `M ≤ max_m`.
pub fn random_config<R: Rng>(rng: &mut R, mode: FusionMode, max_m: usize) -> FusionConfig {
    FusionConfig {
        mode,
        d_audio: rng.random_range(1..=8),
        d_visual: rng.random_range(1..=8),
        length: rng.random_range(1..=8),
        iterations: if mode == FusionMode::Jca { 1 } else { rng.random_range(1..=max_m) },
        temperature: [0.1, 0.5, 1.0][rng.random_range(0..3)],
        joint_projection: rng.random_bool(0.5),
        time_weight_gain: None,
    }
}

/// Runs the gate op on random candidates and, at frames whose top two
/// logits differ by at least 0.1, compares against the argmax candidate.
/// Returns the worst deviation and the number of frames compared.
pub fn hard_selection_error(seed: u64, k: usize, t: f64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, l) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let sel = Matrix::from_fn(d, l, |_, _| rng.random_range(-1.0..1.0));
    let w = Matrix::from_fn(d, k, |_, _| rng.random_range(-2.0..2.0));
    let cands: Vec<Matrix> = (0..k).map(|_| Matrix::from_fn(d, l, |_, _| rng.random_range(-1.0..1.0))).collect();
    let mut tape = Tape::new();
    let s = tape.constant(sel.clone());
    let wv = tape.constant(w.clone());
    let cv: Vec<_> = cands.iter().map(|c| tape.constant(c.clone())).collect();
    let (out, _) = gate_op(&mut tape, s, &cv, wv, t).unwrap();
    let out = tape.value(out).clone();
    let logits = to_na(&sel).transpose() * to_na(&w);
    let (mut worst, mut frames) = (0.0f64, 0);
    for col in 0..l {
        let mut row: Vec<(usize, f64)> = logits.row(col).iter().copied().enumerate().collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1));
        if k > 1 && row[0].1 - row[1].1 < 0.1 {
            continue;
        }
        frames += 1;
        for r in 0..d {
            worst = worst.max((out.get(r, col) - cands[row[0].0].get(r, col).max(0.0)).abs());
        }
    }
    (worst, frames)
}

/// Worst deviation of the modular forward pass from [`oracle`] over
/// correlations, attended features, gate scores and the fused output.
pub fn oracle_error(case: &Case, mode: FusionMode) -> f64 {
    let feats = avfusion::fusion::ModalityFeatures::new(case.audio.clone(), case.visual.clone()).unwrap();
    let state = case.layout.forward_values(&case.params, &feats).unwrap();
    let o = oracle(&case.layout, &case.params, &case.audio, &case.visual, mode);
    let mut worst = max_abs_diff(&state.fused, &o.fused);
    for (r, orr) in state.rounds.iter().zip(&o.rounds) {
        worst = worst
            .max(max_abs_diff(&r.corr_audio, &orr.corr_audio))
            .max(max_abs_diff(&r.corr_visual, &orr.corr_visual))
            .max(max_abs_diff(&r.attended_audio, &orr.attended_audio))
            .max(max_abs_diff(&r.attended_visual, &orr.attended_visual));
    }
    assert_eq!(state.gates.len(), o.scores.len());
    for (g, (sa, sv)) in state.gates.iter().zip(&o.scores) {
        worst = worst.max(max_abs_diff(&g.scores_audio, sa)).max(max_abs_diff(&g.scores_visual, sv));
    }
    worst
}
