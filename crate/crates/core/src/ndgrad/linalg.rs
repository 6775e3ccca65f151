//! Non-differentiable linear algebra used by the rank diagnostics.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_REL_TOL: f64 = 1e-10;

/// `ZᵀZ` for `z: [n, d]`, accumulated in 64-bit.
pub fn gram(z: &Tensor) -> Result<Vec<f64>> {
    if z.ndim() != 2 {
        return Err(Error::invalid("gram", format!("expected a matrix, got {:?}", z.shape())));
    }
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let zd = z.data();
    let mut g = vec![0.0; d * d];
    for r in 0..n {
        let row = &zd[r * d..(r + 1) * d];
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                g[i * d + j] += ri * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[i * d + j] = g[j * d + i];
        }
    }
    Ok(g)
}

/// Eigenvalues of a symmetric `d×d` matrix by cyclic Jacobi rotations,
/// sorted descending. Fails with the final off-diagonal residual if the
/// sweep cap is reached first.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, d: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = JACOBI_REL_TOL * fro;
    let max_off = |a: &[f64]| {
        let mut m: f64 = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                m = m.max(a[i * d + j].abs());
            }
        }
        m
    };
    let mut sweeps = 0;
    loop {
        let off = max_off(&a);
        if off <= tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * d + p], a[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
        sweeps += 1;
    }
    let mut ev: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    Ok(ev)
}

/// Eigenvalues of `ZᵀZ`, descending and clamped at zero. Their square
/// roots are the singular values of `Z`.
pub fn gram_eigenvalues(z: &Tensor) -> Result<Vec<f64>> {
    if z.ndim() != 2 {
        return Err(Error::invalid("gram_eigenvalues", format!("expected a matrix, got {:?}", z.shape())));
    }
    if !z.all_finite() {
        return Err(Error::NonFinite { op: "gram_eigenvalues" });
    }
    let d = z.shape()[1];
    let ev = symmetric_eigenvalues(gram(z)?, d)?;
    Ok(ev.into_iter().map(|v| v.max(0.0)).collect())
}
