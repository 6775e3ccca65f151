//! Loop-based reference implementations used to check the main path.
//!
//! Nothing here touches the tape, the model code or the vectorized losses:
//! each oracle is written index-by-index in 64-bit over plain slices, so
//! agreement with the main path is evidence rather than tautology. The
//! only shared piece is the [`Tensor`] container.

use std::fmt;

use crate::ndgrad::Tensor;

/// Outcome of comparing a computation against an oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub oracle: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub cases: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    pub fn new(oracle: impl Into<String>, tolerance: f64) -> Self {
        OracleReport {
            oracle: oracle.into(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            cases: 0,
            tolerance,
            passed: true,
        }
    }

    /// Records one scalar case; relative error is `|a-b| / max(|b|, 1e-12)`.
    pub fn record(&mut self, actual: f64, expected: f64) {
        let abs = (actual - expected).abs();
        let rel = abs / expected.abs().max(1e-12);
        self.record_errors(abs, rel);
    }

    /// Records one vector case using the norm-wise relative error
    /// `‖a-b‖ / max(‖b‖, 1e-12)`.
    pub fn record_vec(&mut self, actual: &[f64], expected: &[f64]) {
        assert_eq!(actual.len(), expected.len(), "oracle length mismatch");
        let mut diff = 0.0;
        let mut norm = 0.0;
        let mut abs: f64 = 0.0;
        for (a, e) in actual.iter().zip(expected) {
            diff += (a - e) * (a - e);
            norm += e * e;
            abs = abs.max((a - e).abs());
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-12);
        self.record_errors(abs, rel);
    }

    fn record_errors(&mut self, abs: f64, rel: f64) {
        self.cases += 1;
        // NaN must fail.
        let abs = if abs.is_nan() { f64::INFINITY } else { abs };
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
        self.passed = self.max_rel_err <= self.tolerance;
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} over {} cases (max rel {:.3e}, max abs {:.3e}, tol {:.1e})",
            self.oracle,
            if self.passed { "PASS" } else { "FAIL" },
            self.cases,
            self.max_rel_err,
            self.max_abs_err,
            self.tolerance
        )
    }
}

// ---- losses --------------------------------------------------------------

/// Raw inputs for [`oracle_loss`]. Sequence tensors are flat `[n, t, d]`.
#[derive(Clone, Debug)]
pub enum LossCase<'a> {
    /// Mean squared distance between `q[:, s]` and `z[:, s + k]`.
    Similarity { q: &'a [f64], z: &'a [f64], n: usize, t: usize, d: usize, k: usize },
    /// Half of each one-sided distance, crossing views.
    SymmetricSimilarity {
        q1: &'a [f64],
        q2: &'a [f64],
        z1: &'a [f64],
        z2: &'a [f64],
        n: usize,
        t: usize,
        d: usize,
        k: usize,
    },
    /// Decorrelation of a `d×d` matrix.
    Decorrelation { c: &'a [f64], d: usize, lambda_off: f64 },
    /// Standardized cross-correlation of two `[m, d]` matrices followed by decorrelation.
    StandardizedDecorrelation { z1: &'a [f64], z2: &'a [f64], m: usize, d: usize, lambda_off: f64 },
    /// One-sided InfoNCE over rows of `[m, d]` matrices.
    Contrastive { q: &'a [f64], z: &'a [f64], m: usize, d: usize, temperature: f64 },
    /// Mean negative log-likelihood over `[m, classes]` logits.
    Action { logits: &'a [f64], actions: &'a [usize], classes: usize },
    /// Mean squared distance restricted to masked `(sequence, position)` pairs.
    Recon { q: &'a [f64], z: &'a [f64], t: usize, d: usize, masked: &'a [(usize, usize)] },
    /// Weighted sum of already-computed components.
    Total { components: &'a [(f64, f64)] },
}

pub fn oracle_loss(case: &LossCase<'_>) -> f64 {
    match *case {
        LossCase::Similarity { q, z, n, t, d, k } => similarity(q, z, n, t, d, k),
        LossCase::SymmetricSimilarity { q1, q2, z1, z2, n, t, d, k } => {
            0.5 * similarity(q1, z2, n, t, d, k) + 0.5 * similarity(q2, z1, n, t, d, k)
        }
        LossCase::Decorrelation { c, d, lambda_off } => decorrelation(c, d, lambda_off).0,
        LossCase::StandardizedDecorrelation { z1, z2, m, d, lambda_off } => {
            decorrelation(&cross_correlation(z1, z2, m, d), d, lambda_off).0
        }
        LossCase::Contrastive { q, z, m, d, temperature } => contrastive(q, z, m, d, temperature),
        LossCase::Action { logits, actions, classes } => {
            let mut total = 0.0;
            for (r, &a) in actions.iter().enumerate() {
                let row = &logits[r * classes..(r + 1) * classes];
                let mut mx = f64::NEG_INFINITY;
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut s = 0.0;
                for &v in row {
                    s += (v - mx).exp();
                }
                total += -(row[a] - mx - s.ln());
            }
            total / actions.len() as f64
        }
        LossCase::Recon { q, z, t, d, masked } => {
            let mut total = 0.0;
            for &(sn, st) in masked {
                let base = (sn * t + st) * d;
                let mut dist = 0.0;
                for i in 0..d {
                    let diff = q[base + i] - z[base + i];
                    dist += diff * diff;
                }
                total += dist;
            }
            total / masked.len() as f64
        }
        LossCase::Total { components } => {
            let mut total = 0.0;
            for &(w, v) in components {
                total += w * v;
            }
            total
        }
    }
}

fn similarity(q: &[f64], z: &[f64], n: usize, t: usize, d: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for sn in 0..n {
        for st in 0..t - k {
            let mut dist = 0.0;
            for i in 0..d {
                let diff = q[(sn * t + st) * d + i] - z[(sn * t + st + k) * d + i];
                dist += diff * diff;
            }
            total += dist;
        }
    }
    total / (n * (t - k)) as f64
}

/// Column-standardized cross-correlation `[d, d]` of two `[m, d]` matrices
/// (population standard deviation, floor 1e-8), divided by `m`.
pub fn cross_correlation(z1: &[f64], z2: &[f64], m: usize, d: usize) -> Vec<f64> {
    let standardize = |z: &[f64]| {
        let mut out = vec![0.0; m * d];
        for j in 0..d {
            let mut mean = 0.0;
            for r in 0..m {
                mean += z[r * d + j];
            }
            mean /= m as f64;
            let mut var = 0.0;
            for r in 0..m {
                var += (z[r * d + j] - mean).powi(2);
            }
            let std = (var / m as f64).sqrt().max(1e-8);
            for r in 0..m {
                out[r * d + j] = (z[r * d + j] - mean) / std;
            }
        }
        out
    };
    let (a, b) = (standardize(z1), standardize(z2));
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for r in 0..m {
                s += a[r * d + i] * b[r * d + j];
            }
            c[i * d + j] = s / m as f64;
        }
    }
    c
}

/// `(total, on-diagonal, off-diagonal)` decorrelation terms.
pub fn decorrelation(c: &[f64], d: usize, lambda_off: f64) -> (f64, f64, f64) {
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                on += (1.0 - c[i * d + j]).powi(2);
            } else {
                off += c[i * d + j].powi(2);
            }
        }
    }
    (on + lambda_off * off, on, off)
}

fn contrastive(q: &[f64], z: &[f64], m: usize, d: usize, temperature: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..m {
        let mut logits = vec![0.0; m];
        for b in 0..m {
            let mut dot = 0.0;
            for i in 0..d {
                dot += q[a * d + i] * z[b * d + i];
            }
            logits[b] = dot / temperature;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for &l in &logits {
            s += (l - mx).exp();
        }
        total += -(logits[a] - mx - s.ln());
    }
    total / m as f64
}

// ---- gradients -----------------------------------------------------------

/// Central finite differences of `f` with respect to every entry of
/// every tensor in `params`.
pub fn oracle_grad(
    mut f: impl FnMut(&[Tensor]) -> f64,
    params: &[Tensor],
    step: f64,
) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = f(&work);
            work[p].data_mut()[i] = orig - step;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

// ---- singular values -----------------------------------------------------

pub const POWER_ITERATION_CAP: usize = 10_000;

/// Singular values of `z: [n, d]` by power iteration on `ZᵀZ`, deflating
/// each found direction by orthogonal projection. Returns `None` if an
/// iteration fails to settle within the cap.
pub fn oracle_singular_values(z: &Tensor) -> Option<Vec<f64>> {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let zd = z.data();
    let apply = |v: &[f64]| -> Vec<f64> {
        // ZᵀZ v, two explicit passes.
        let mut zv = vec![0.0; n];
        for r in 0..n {
            for c in 0..d {
                zv[r] += zd[r * d + c] * v[c];
            }
        }
        let mut out = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += zd[r * d + c] * zv[r];
            }
        }
        out
    };
    // Two Gram-Schmidt passes keep null-space iterates orthogonal.
    let project_out = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for b in basis.iter().chain(basis) {
            let mut dot = 0.0;
            for i in 0..d {
                dot += v[i] * b[i];
            }
            for i in 0..d {
                v[i] -= dot * b[i];
            }
        }
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut sigmas = Vec::with_capacity(d);
    let mut top = 0.0;
    for idx in 0..d {
        // Deterministic start not aligned with any earlier direction.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + idx * 13) % 11) as f64 * 0.1).collect();
        project_out(&mut v, &basis);
        let nv = norm(&v);
        if nv == 0.0 {
            v = vec![0.0; d];
            v[idx] = 1.0;
            project_out(&mut v, &basis);
        }
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut lambda = 0.0;
        let mut settled = false;
        for _ in 0..POWER_ITERATION_CAP {
            let mut w = apply(&v);
            project_out(&mut w, &basis);
            let nw = norm(&w);
            if nw <= 1e-13 * top {
                lambda = 0.0;
                settled = true;
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / nw).collect();
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            // Close eigenvalue pairs stall the vector long after the value settles.
            let converged = (nw - lambda).abs() <= 1e-12 * nw.max(1e-300) || delta < 1e-14;
            lambda = nw;
            if converged {
                settled = true;
                break;
            }
        }
        if idx == 0 {
            top = lambda;
        }
        if !settled && lambda > 1e-20 {
            return None;
        }
        // Re-orthogonalize and measure σ = ‖Z P v‖ directly.
        project_out(&mut v, &basis);
        let nv = norm(&v);
        if nv > 0.0 {
            v.iter_mut().for_each(|x| *x /= nv);
        }
        let mut zv = vec![0.0; n];
        for r in 0..n {
            for c in 0..d {
                zv[r] += zd[r * d + c] * v[c];
            }
        }
        sigmas.push(norm(&zv));
        basis.push(v);
    }
    sigmas.sort_by(|a, b| b.total_cmp(a));
    Some(sigmas)
}

// ---- convolution ---------------------------------------------------------

/// Direct 2-D convolution of one image `[c, h, w]` with `[o, c, kh, kw]`
/// weights; `replicate` selects edge replication instead of zero padding.
#[allow(clippy::too_many_arguments)]
pub fn oracle_conv2d(
    image: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    (c, h, w): (usize, usize, usize),
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    replicate: bool,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = bias.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut iy = (y * stride + ky) as i64 - pad as i64;
                            let mut ix = (x * stride + kx) as i64 - pad as i64;
                            let inside = iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64;
                            if !inside {
                                if !replicate {
                                    continue;
                                }
                                iy = iy.clamp(0, h as i64 - 1);
                                ix = ix.clamp(0, w as i64 - 1);
                            }
                            let pix = image[ic * h * w + iy as usize * w + ix as usize];
                            s += pix * weight[((oc * c + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * oh + y) * ow + x] = s;
            }
        }
    }
    out
}

// ---- cosine curve --------------------------------------------------------

/// Exhaustive cosine-vs-lag curve over per-state embeddings
/// `[trajectories, length, d]`, using every start `t ≤ length-1-k_max`.
pub fn oracle_cosine_curve(emb: &[f64], trajectories: usize, length: usize, d: usize, k_max: usize) -> Vec<f64> {
    let mut curve = vec![0.0; k_max];
    let mut count = 0usize;
    for tr in 0..trajectories {
        for t in 0..length - k_max {
            count += 1;
            for k in 1..=k_max {
                let a = &emb[(tr * length + t) * d..(tr * length + t + 1) * d];
                let b = &emb[(tr * length + t + k) * d..(tr * length + t + k + 1) * d];
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for i in 0..d {
                    dot += a[i] * b[i];
                    na += a[i] * a[i];
                    nb += b[i] * b[i];
                }
                curve[k - 1] += dot / (na.sqrt().max(1e-12) * nb.sqrt().max(1e-12));
            }
        }
    }
    curve.iter_mut().for_each(|c| *c /= count as f64);
    curve
}

// ---- environment ---------------------------------------------------------

/// Discrepancy found while re-simulating a moving-dot trajectory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResimMismatch {
    pub trajectory: usize,
    pub step: usize,
    pub reason: &'static str,
}

/// Re-simulates moving-dot dynamics from rendered frames and recorded
/// actions. `frames` is `[trajectories, length, h, w]` with one lit pixel
/// per frame; actions are 0 no-op, 1 up, 2 down, 3 left, 4 right; walls
/// reflect; reaching `goal` gives reward 1 in that frame and the next
/// frame is a respawn anywhere off the goal.
#[allow(clippy::too_many_arguments)]
pub fn oracle_resimulate(
    frames: &[u8],
    actions: &[u8],
    rewards: &[u8],
    trajectories: usize,
    length: usize,
    h: usize,
    w: usize,
    goal: (usize, usize),
) -> Result<(), ResimMismatch> {
    let find = |tr: usize, t: usize| -> Option<(usize, usize)> {
        let base = (tr * length + t) * h * w;
        let mut found = None;
        for y in 0..h {
            for x in 0..w {
                if frames[base + y * w + x] > 0 {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((y, x));
                }
            }
        }
        found
    };
    let reflect = |p: i64, n: usize| -> usize {
        if p < 0 {
            (-p) as usize
        } else if p >= n as i64 {
            (2 * (n as i64 - 1) - p) as usize
        } else {
            p as usize
        }
    };
    for tr in 0..trajectories {
        for t in 0..length {
            let err = |reason| ResimMismatch { trajectory: tr, step: t, reason };
            let pos = find(tr, t).ok_or_else(|| err("frame does not contain exactly one dot"))?;
            let expect_reward = u8::from(pos == goal);
            if rewards[tr * length + t] != expect_reward {
                return Err(err("reward disagrees with goal occupancy"));
            }
            if t == 0 && pos == goal {
                return Err(err("trajectory starts on the goal"));
            }
            if t + 1 == length {
                continue;
            }
            let next = find(tr, t + 1).ok_or_else(|| err("next frame malformed"))?;
            if pos == goal {
                if next == goal {
                    return Err(err("respawned onto the goal"));
                }
                continue;
            }
            let (dy, dx): (i64, i64) = match actions[tr * length + t] {
                0 => (0, 0),
                1 => (-1, 0),
                2 => (1, 0),
                3 => (0, -1),
                4 => (0, 1),
                _ => return Err(err("action out of range")),
            };
            let expect = (reflect(pos.0 as i64 + dy, h), reflect(pos.1 as i64 + dx, w));
            if next != expect {
                return Err(err("transition disagrees with dynamics"));
            }
        }
    }
    Ok(())
}
