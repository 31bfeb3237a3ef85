//! Individual fusion equations as tape operations.

use crate::numcore::{Axis, NumError, Real, Tape, Var};
use crate::{Error, Result};

use super::{GateTrace, RoundTrace};

/// `J = [X_a ; X_v]`, optionally followed by a `d × d` linear map.
pub fn joint_representation<T: Real>(tape: &mut Tape<T>, xa: Var, xv: Var, projection: Option<Var>) -> Result<Var> {
    let joint = tape.concat_rows(xa, xv)?;
    Ok(match projection {
        Some(w) => tape.matmul(w, joint)?,
        None => joint,
    })
}

/// `C_a = tanh(X_aᵀ W_ja J / √d)` and likewise for the visual stream.
pub fn joint_correlation<T: Real>(tape: &mut Tape<T>, xa: Var, xv: Var, joint: Var, w_ja: Var, w_jv: Var) -> Result<(Var, Var)> {
    let d = tape.shape(joint).0;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut corr = |x: Var, w: Var| -> Result<Var> {
        let xt = tape.transpose(x);
        let wj = tape.matmul(w, joint)?;
        let raw = tape.matmul(xt, wj)?;
        let scaled = tape.scale(raw, scale);
        Ok(tape.tanh(scaled))
    };
    Ok((corr(xa, w_ja)?, corr(xv, w_jv)?))
}

/// `H_a = ReLU(X_a W_ca C_a)` and likewise for the visual stream.
pub fn attention_maps<T: Real>(
    tape: &mut Tape<T>,
    xa: Var,
    xv: Var,
    ca: Var,
    cv: Var,
    w_ca: Var,
    w_cv: Var,
) -> Result<(Var, Var)> {
    let mut map = |x: Var, w: Var, c: Var| -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let xwc = tape.matmul(xw, c)?;
        Ok(tape.relu(xwc))
    };
    Ok((map(xa, w_ca, ca)?, map(xv, w_cv, cv)?))
}

/// `X_att = H W_h + X_prev` for both streams.
pub fn attended_features<T: Real>(
    tape: &mut Tape<T>,
    xa_prev: Var,
    xv_prev: Var,
    ha: Var,
    hv: Var,
    w_ha: Var,
    w_hv: Var,
) -> Result<(Var, Var)> {
    let mut att = |h: Var, w: Var, prev: Var| -> Result<Var> {
        let hw = tape.matmul(h, w)?;
        Ok(tape.add(hw, prev)?)
    };
    Ok((att(ha, w_ha, xa_prev)?, att(hv, w_hv, xv_prev)?))
}

/// Softmax gate over `candidates` (each `d × L`).
///
/// Logits are `selectorᵀ · weights` (`L × K`, one row per frame), turned
/// into scores with a temperature softmax along each row. Column `k` of the
/// scores is replicated to `d × L` and multiplied with candidate `k`; the
/// products are summed and passed through ReLU. Returns `(output, scores)`.
pub fn gate<T: Real>(tape: &mut Tape<T>, selector: Var, candidates: &[Var], weights: Var, temperature: T) -> Result<(Var, Var)> {
    let k = tape.shape(weights).1;
    if k != candidates.len() {
        return Err(NumError::Parameter(format!("gate has {k} output columns but {} candidates", candidates.len())).into());
    }
    let rows = tape.shape(selector).0;
    let st = tape.transpose(selector);
    let logits = tape.matmul(st, weights)?;
    let scores = tape.softmax_temp(logits, temperature, Axis::Rows)?;
    let mut acc: Option<Var> = None;
    for (col, &cand) in candidates.iter().enumerate() {
        let rep = tape.replicate_column(scores, col, rows)?;
        let term = tape.mul(cand, rep)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| Error::config("gate needs at least one candidate"))?;
    Ok((tape.relu(acc), scores))
}

/// Flat gate over the original features (`t = 0`) and the attended
/// features of every round. Logits come from the last round's features.
pub fn grjca_gate<T: Real>(
    tape: &mut Tape<T>,
    xa: Var,
    xv: Var,
    rounds: &[RoundTrace],
    w_audio: Var,
    w_visual: Var,
    temperature: T,
) -> Result<(Var, Var, GateTrace)> {
    let last = rounds.last().ok_or_else(|| Error::config("GRJCA needs at least one round"))?;
    let cand_a: Vec<Var> = std::iter::once(xa).chain(rounds.iter().map(|r| r.attended_audio)).collect();
    let cand_v: Vec<Var> = std::iter::once(xv).chain(rounds.iter().map(|r| r.attended_visual)).collect();
    let (oa, sa) = gate(tape, last.attended_audio, &cand_a, w_audio, temperature)?;
    let (ov, sv) = gate(tape, last.attended_visual, &cand_v, w_visual, temperature)?;
    Ok((oa, ov, GateTrace { scores_audio: sa, scores_visual: sv }))
}

/// Two-way gate between a round's input (score column 0) and output (score
/// column 1). Logits come from the round's output.
pub fn hgrjca_iteration_gate<T: Real>(
    tape: &mut Tape<T>,
    previous: Var,
    current: Var,
    weights: Var,
    temperature: T,
) -> Result<(Var, Var)> {
    gate(tape, current, &[previous, current], weights, temperature)
}

/// High-level gate across the per-round gated features. Logits come from
/// the sum of the gated features.
pub fn hgrjca_final_gate<T: Real>(tape: &mut Tape<T>, gated: &[Var], weights: Var, temperature: T) -> Result<(Var, Var)> {
    let (&first, rest) = gated.split_first().ok_or_else(|| Error::config("final gate needs at least one round"))?;
    let mut total = first;
    for &g in rest {
        total = tape.add(total, g)?;
    }
    gate(tape, total, gated, weights, temperature)
}
