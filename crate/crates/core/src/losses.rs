//! Training objectives over tape variables.

use serde::Serialize;

use crate::config::{ExperimentConfig, LossKind, Mode, TransitionKind};
use crate::error::{Error, Result};
use crate::model::ForwardOutputs;
use crate::ndgrad::{Tape, Tensor, Var};

/// Floor on per-column standard deviation in [`cross_correlation`].
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda_o: f64,
    pub lambda_d: f64,
    pub lambda_a: f64,
    pub temperature: f64,
}

/// Scalar values of one evaluation of the objective. Components that did
/// not contribute to `total` are `None`, except the decorrelation terms,
/// which are always measured.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: Option<f64>,
    pub decorr: f64,
    pub decorr_on_diag: f64,
    pub decorr_off_diag: f64,
    pub contrastive: Option<f64>,
    pub action: Option<f64>,
    pub recon: Option<f64>,
    pub weights: LossWeights,
}

fn seq_dims(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [n, t, d] => Ok((n, t, d)),
        ref s => Err(Error::invalid(op, format!("expected [N, T, d], got {s:?}"))),
    }
}

fn check_same(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch { op, lhs: tape.shape(a).to_vec(), rhs: tape.shape(b).to_vec() });
    }
    Ok(())
}

/// `(1/(N(T-k))) Σ ‖q[:, t] - z[:, t+k]‖²` over `t < T-k`.
pub fn similarity_distance(tape: &mut Tape, q: Var, z: Var, k: usize) -> Result<Var> {
    check_same(tape, q, z, "similarity_distance")?;
    let (n, t, _) = seq_dims(tape, q, "similarity_distance")?;
    if k == 0 || k >= t {
        return Err(Error::invalid("similarity_distance", format!("shift k = {k} must satisfy 1 ≤ k < T = {t}")));
    }
    let qs = tape.slice(q, 1, 0, t - k)?;
    let zs = tape.slice(z, 1, k, t)?;
    let diff = tape.sub(qs, zs)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / (n * (t - k)) as f64)
}

/// `½·D(q1, sg(z2)) + ½·D(q2, sg(z1))`.
pub fn similarity_loss(tape: &mut Tape, q1: Var, q2: Var, z1: Var, z2: Var, k: usize) -> Result<Var> {
    let t2 = tape.stop_gradient(z2);
    let t1 = tape.stop_gradient(z1);
    let a = similarity_distance(tape, q1, t2, k)?;
    let b = similarity_distance(tape, q2, t1, k)?;
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

fn standardize(tape: &mut Tape, z: Var) -> Result<Var> {
    let mean = tape.mean_axis(z, 0)?;
    let centered = tape.sub(z, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis(sq, 0)?;
    let var = tape.clamp_min(var, STD_FLOOR * STD_FLOOR)?;
    let std = tape.sqrt(var)?;
    tape.div(centered, std)
}

/// Column-standardized cross-correlation `[d, d]` of two `[M, d]`
/// matrices (population std with floor), divided by `M`.
pub fn cross_correlation(tape: &mut Tape, z1: Var, z2: Var) -> Result<Var> {
    check_same(tape, z1, z2, "cross_correlation")?;
    let m = match *tape.shape(z1) {
        [m, _] => m,
        ref s => return Err(Error::invalid("cross_correlation", format!("expected [M, d], got {s:?}"))),
    };
    if m < 2 {
        return Err(Error::invalid("cross_correlation", format!("need at least 2 rows, got {m}")));
    }
    let a = standardize(tape, z1)?;
    let b = standardize(tape, z2)?;
    let at = tape.transpose(a, 0, 1)?;
    let c = tape.matmul(at, b)?;
    tape.scale(c, 1.0 / m as f64)
}

/// `(Σ (1 - C_ii)² + λ_o Σ_{i≠j} C_ij², on-diagonal, off-diagonal)`.
pub fn decorrelation_loss(tape: &mut Tape, c: Var, lambda_o: f64) -> Result<(Var, Var, Var)> {
    let d = match *tape.shape(c) {
        [a, b] if a == b => a,
        ref s => return Err(Error::invalid("decorrelation_loss", format!("expected a square matrix, got {s:?}"))),
    };
    let eye = tape.constant(Tensor::eye(d));
    let off_mask = tape.constant(Tensor::eye(d).map(|v| 1.0 - v));
    let diff = tape.sub(eye, c)?;
    let diff_sq = tape.mul(diff, diff)?;
    let on = tape.mul(diff_sq, eye)?;
    let on = tape.sum(on)?;
    let c_sq = tape.mul(c, c)?;
    let off = tape.mul(c_sq, off_mask)?;
    let off = tape.sum(off)?;
    let weighted = tape.scale(off, lambda_o)?;
    let total = tape.add(on, weighted)?;
    Ok((total, on, off))
}

/// Mean over rows of `-log softmax(q zᵀ / τ)_{mm}`.
pub fn contrastive_loss(tape: &mut Tape, q: Var, z: Var, temperature: f64) -> Result<Var> {
    check_same(tape, q, z, "contrastive_loss")?;
    if !(temperature > 0.0) {
        return Err(Error::invalid("contrastive_loss", format!("temperature must be positive, got {temperature}")));
    }
    let m = tape.shape(q)[0];
    let zt = tape.transpose(z, 0, 1)?;
    let logits = tape.matmul(q, zt)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    let ls = tape.log_softmax(logits)?;
    let eye = tape.constant(Tensor::eye(m));
    let picked = tape.mul(ls, eye)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / m as f64)
}

fn shifted_rows(tape: &mut Tape, x: Var, start: usize, len: usize) -> Result<Var> {
    let (n, _, d) = seq_dims(tape, x, "contrastive_loss")?;
    let s = tape.slice(x, 1, start, start + len)?;
    tape.reshape(s, &[n * len, d])
}

/// Symmetrized contrastive loss on `k`-step pairs: predictions at `t`
/// against cross-view targets at `t + k`, negatives are every other row of
/// the flattened `[N(T-k), d]` target matrix.
pub fn contrastive_sym(tape: &mut Tape, q1: Var, q2: Var, z1: Var, z2: Var, k: usize, temperature: f64) -> Result<Var> {
    let (_, t, _) = seq_dims(tape, q1, "contrastive_loss")?;
    if k == 0 || k >= t {
        return Err(Error::invalid("contrastive_loss", format!("shift k = {k} must satisfy 1 ≤ k < T = {t}")));
    }
    let mut sides = Vec::with_capacity(2);
    for (q, z) in [(q1, z2), (q2, z1)] {
        let target = tape.stop_gradient(z);
        let qr = shifted_rows(tape, q, 0, t - k)?;
        let zr = shifted_rows(tape, target, k, t - k)?;
        sides.push(contrastive_loss(tape, qr, zr, temperature)?);
    }
    let s = tape.add(sides[0], sides[1])?;
    tape.scale(s, 0.5)
}

/// Mean negative log-likelihood of `actions` under `logits: [..., n_a]`.
pub fn action_loss(tape: &mut Tape, logits: Var, actions: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let classes = *shape.last().ok_or_else(|| Error::invalid("action_loss", "scalar logits"))?;
    let rows = shape.iter().product::<usize>() / classes;
    if rows != actions.len() {
        return Err(Error::invalid("action_loss", format!("{} actions for {rows} logit rows", actions.len())));
    }
    if let Some(&bad) = actions.iter().find(|&&a| a >= classes) {
        return Err(Error::invalid("action_loss", format!("action {bad} out of range for {classes} classes")));
    }
    let flat = tape.reshape(logits, &[rows, classes])?;
    let ls = tape.log_softmax(flat)?;
    let mut onehot = Tensor::zeros(&[rows, classes]);
    for (r, &a) in actions.iter().enumerate() {
        onehot.data_mut()[r * classes + a] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let picked = tape.mul(ls, onehot)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / rows as f64)
}

/// Mean squared distance between `q` and `z` over the masked
/// `(sequence, position)` pairs.
pub fn recon_loss(tape: &mut Tape, q: Var, z: Var, masked: &[Vec<usize>]) -> Result<Var> {
    check_same(tape, q, z, "recon_loss")?;
    let (n, t, d) = seq_dims(tape, q, "recon_loss")?;
    let count: usize = masked.iter().map(Vec::len).sum();
    if count == 0 || masked.len() != n {
        return Err(Error::invalid("recon_loss", "empty mask set"));
    }
    let mut m = Tensor::zeros(&[n, t, d]);
    for (seq, positions) in masked.iter().enumerate() {
        for &p in positions {
            if p >= t {
                return Err(Error::invalid("recon_loss", format!("masked position {p} out of range for T = {t}")));
            }
            m.data_mut()[(seq * t + p) * d..(seq * t + p + 1) * d].fill(1.0);
        }
    }
    let m = tape.constant(m);
    let diff = tape.sub(q, z)?;
    let sq = tape.mul(diff, diff)?;
    let sel = tape.mul(sq, m)?;
    let s = tape.sum(sel)?;
    tape.scale(s, 1.0 / count as f64)
}

/// Flattens `[N, T, d]` to `[N·T, d]`.
fn rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let (n, t, d) = seq_dims(tape, x, "total_loss")?;
    tape.reshape(x, &[n * t, d])
}

/// Assembles the configured objective from pipeline outputs. Returns the
/// differentiable total and the breakdown of its components.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutputs,
    actions: &[usize],
    cfg: &ExperimentConfig,
) -> Result<(Var, LossBreakdown)> {
    let [z1, z2] = out.z;
    let [q1, q2] = out.q;
    let weights = LossWeights {
        lambda_o: cfg.lambda_o,
        lambda_d: cfg.lambda_d,
        lambda_a: cfg.lambda_a,
        temperature: cfg.temperature,
    };
    let mut terms: Vec<(f64, Var)> = Vec::new();
    let (mut sim, mut contrastive, mut recon, mut action) = (None, None, None, None);

    if cfg.transition == TransitionKind::NonCausal {
        let masks = out.masks.as_ref().ok_or_else(|| Error::invalid("total_loss", "missing mask positions"))?;
        let t2 = tape.stop_gradient(z2);
        let t1 = tape.stop_gradient(z1);
        let a = recon_loss(tape, q1, t2, &masks[0])?;
        let b = recon_loss(tape, q2, t1, &masks[1])?;
        let s = tape.add(a, b)?;
        let r = tape.scale(s, 0.5)?;
        recon = Some(r);
        terms.push((1.0, r));
    } else if cfg.loss == LossKind::Contrastive {
        let c = contrastive_sym(tape, q1, q2, z1, z2, cfg.k, cfg.temperature)?;
        contrastive = Some(c);
        terms.push((1.0, c));
    } else {
        let s = similarity_loss(tape, q1, q2, z1, z2, cfg.k)?;
        sim = Some(s);
        terms.push((1.0, s));
    }
    if terms.is_empty() {
        return Err(Error::invalid("total_loss", "no similarity-type component is active"));
    }

    let decorr_active = cfg.loss == LossKind::Decorrelation && cfg.lambda_d > 0.0;
    let (a, b) = if decorr_active {
        (z1, z2)
    } else {
        (tape.stop_gradient(z1), tape.stop_gradient(z2))
    };
    let a = rows(tape, a)?;
    let b = rows(tape, b)?;
    let c = cross_correlation(tape, a, b)?;
    let (decorr, on, off) = decorrelation_loss(tape, c, cfg.lambda_o)?;
    if decorr_active {
        terms.push((cfg.lambda_d, decorr));
    }

    if cfg.mode == Mode::Demo {
        let [l1, l2] = out.logits.ok_or_else(|| Error::invalid("total_loss", "demonstration mode needs action logits"))?;
        let a1 = action_loss(tape, l1, actions)?;
        let a2 = action_loss(tape, l2, actions)?;
        let s = tape.add(a1, a2)?;
        let act = tape.scale(s, 0.5)?;
        action = Some(act);
        terms.push((cfg.lambda_a, act));
    }

    let mut total = terms[0].1;
    for &(w, v) in &terms[1..] {
        let wv = tape.scale(v, w)?;
        total = tape.add(total, wv)?;
    }
    let val = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        total: val(total),
        sim: sim.map(val),
        decorr: val(decorr),
        decorr_on_diag: val(on),
        decorr_off_diag: val(off),
        contrastive: contrastive.map(val),
        action: action.map(val),
        recon: recon.map(val),
        weights,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((total, breakdown))
}
