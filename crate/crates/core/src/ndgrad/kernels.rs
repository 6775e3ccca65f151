//! Slice-level numeric kernels shared by the forward and backward passes.

/// `c += a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `c: [m, n]`.
pub fn gemm_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c += aᵀ · b` with `a: [k, m]`, `b: [k, n]`, `c: [m, n]`.
pub fn gemm_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `x` (rows of width `w`) plus an optional additive
/// mask broadcast over rows with period `mask.len()`.
pub fn softmax_rows(x: &[f64], w: usize, mask: Option<&[f64]>, out: &mut [f64]) {
    for (r, (xr, or)) in x.chunks(w).zip(out.chunks_mut(w)).enumerate() {
        let mrow = mask.map(|m| {
            let rows = m.len() / w;
            let mr = r % rows;
            &m[mr * w..(mr + 1) * w]
        });
        let mut mx = f64::NEG_INFINITY;
        for j in 0..w {
            let v = xr[j] + mrow.map_or(0.0, |m| m[j]);
            or[j] = v;
            mx = mx.max(v);
        }
        let mut s = 0.0;
        for v in or.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - mx).exp() };
            s += *v;
        }
        for v in or.iter_mut() {
            *v /= s;
        }
    }
}

pub fn log_softmax_rows(x: &[f64], w: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks(w).zip(out.chunks_mut(w)) {
        let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + xr.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (o, v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `x` (with `shape`) into the axis order `perm`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return x.to_vec();
    }
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x[src]);
        // Increment the multi-index, carrying through exhausted axes.
        let mut a = nd;
        while a > 0 {
            a -= 1;
            idx[a] += 1;
            src += src_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            src -= src_strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_acc(&a, &b, &mut c, 2, 3, 4);
        // Reference triple loop.
        let mut r = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    r[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        assert_eq!(c, r);
        let bt = permute(&b, &[3, 4], &[1, 0]);
        let mut c2 = vec![0.0; 8];
        gemm_bt_acc(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c2, r);
        let at = permute(&a, &[2, 3], &[1, 0]);
        let mut c3 = vec![0.0; 8];
        gemm_at_acc(&at, &b, &mut c3, 2, 3, 4);
        assert_eq!(c3, r);
    }

    #[test]
    fn permute_3d() {
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let y = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 4.0);
        assert_eq!(y[3], 12.0);
        assert_eq!(y[6], 1.0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
