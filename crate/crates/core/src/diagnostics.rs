//! Collapse diagnostics: feature rank, cosine-vs-lag curves,
//! cross-correlation summaries and embedding export.

use std::fmt::Display;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::losses::cross_correlation;
use crate::model::{project_states, ModelBundle};
use crate::ndgrad::{gram_eigenvalues, Precision, Tape, Tensor};
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub feature_rank: usize,
    pub singular_values: Vec<f64>,
    pub n_samples: usize,
    pub epsilon: f64,
}

/// Number of singular values of `z: [n, d]` above `epsilon`.
pub fn feature_rank(z: &Tensor, epsilon: f64) -> Result<RankReport> {
    if z.ndim() != 2 || z.shape()[0] == 0 {
        return Err(Error::invalid("feature_rank", format!("expected a non-empty [n, d] matrix, got {:?}", z.shape())));
    }
    let singular_values: Vec<f64> = gram_eigenvalues(z)?.into_iter().map(f64::sqrt).collect();
    let feature_rank = singular_values.iter().filter(|&&s| s > epsilon).count();
    Ok(RankReport { feature_rank, singular_values, n_samples: z.shape()[0], epsilon })
}

/// `n` states drawn uniformly over all `(trajectory, t)`.
pub fn sample_states(dataset: &Dataset, n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| (rng.random_range(0..dataset.num_trajectories()), rng.random_range(0..dataset.trajectory_length())))
        .collect()
}

/// Divides every row by its Euclidean norm (floored).
pub fn normalize_rows(z: &Tensor) -> Tensor {
    let d = z.shape()[1];
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::ndgrad::NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Evaluation-mode projections of the picked states, `[len, d]`.
pub fn projections_at(
    bundle: &ModelBundle,
    dataset: &Dataset,
    picks: &[(usize, usize)],
    precision: Precision,
    normalized: bool,
) -> Result<Tensor> {
    let z = project_states(bundle, &dataset.states(picks), precision)?;
    Ok(if normalized { normalize_rows(&z) } else { z })
}

/// `n` uniformly sampled states, encoded and projected.
pub fn collect_projections(
    bundle: &ModelBundle,
    dataset: &Dataset,
    n: usize,
    rng: &mut impl Rng,
    precision: Precision,
) -> Result<Tensor> {
    let picks = sample_states(dataset, n, rng);
    projections_at(bundle, dataset, &picks, precision, false)
}

/// Every valid start `(trajectory, t)` with `t + k_max < len`.
pub fn all_starts(dataset: &Dataset, k_max: usize) -> Vec<(usize, usize)> {
    let len = dataset.trajectory_length();
    (0..dataset.num_trajectories()).flat_map(|tr| (0..len - k_max).map(move |t| (tr, t))).collect()
}

/// `n_pairs` uniform starts for [`cosine_curve_at`].
pub fn sample_starts(dataset: &Dataset, k_max: usize, n_pairs: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if k_max == 0 || k_max >= dataset.trajectory_length() {
        return Err(Error::invalid(
            "cosine_curve",
            format!("k_max = {k_max} must satisfy 1 ≤ k_max < {}", dataset.trajectory_length()),
        ));
    }
    let span = dataset.trajectory_length() - k_max;
    Ok((0..n_pairs).map(|_| (rng.random_range(0..dataset.num_trajectories()), rng.random_range(0..span))).collect())
}

/// Mean `cos(z_t, z_{t+k})` for `k = 1..=k_max` over the given starts.
pub fn cosine_curve_at(
    bundle: &ModelBundle,
    dataset: &Dataset,
    k_max: usize,
    starts: &[(usize, usize)],
    precision: Precision,
) -> Result<Vec<f64>> {
    if starts.is_empty() {
        return Err(Error::invalid("cosine_curve", "no start states"));
    }
    if let Some(&(tr, t)) = starts.iter().find(|&&(_, t)| t + k_max >= dataset.trajectory_length()) {
        return Err(Error::invalid("cosine_curve", format!("start ({tr}, {t}) leaves no room for lag {k_max}")));
    }
    let picks: Vec<(usize, usize)> =
        starts.iter().flat_map(|&(tr, t)| (0..=k_max).map(move |j| (tr, t + j))).collect();
    let z = projections_at(bundle, dataset, &picks, precision, true)?;
    let d = z.shape()[1];
    let mut curve = vec![0.0; k_max];
    for s in 0..starts.len() {
        let base = s * (k_max + 1);
        let anchor = z.row(base);
        for k in 1..=k_max {
            let other = z.row(base + k);
            curve[k - 1] += (0..d).map(|i| anchor[i] * other[i]).sum::<f64>();
        }
    }
    curve.iter_mut().for_each(|c| *c /= starts.len() as f64);
    Ok(curve)
}

pub fn cosine_curve(
    bundle: &ModelBundle,
    dataset: &Dataset,
    k_max: usize,
    n_pairs: usize,
    rng: &mut impl Rng,
    precision: Precision,
) -> Result<Vec<f64>> {
    let starts = sample_starts(dataset, k_max, n_pairs, rng)?;
    cosine_curve_at(bundle, dataset, k_max, &starts, precision)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorrStats {
    pub mean_abs_off_diag: f64,
    pub mean_on_diag: f64,
    pub max_abs_off_diag: f64,
}

/// Summary of a square `d×d` matrix.
pub fn corr_stats(c: &[f64], d: usize) -> Result<CorrStats> {
    if d == 0 || c.len() != d * d {
        return Err(Error::invalid("corr_stats", format!("{} entries do not form a {d}×{d} matrix", c.len())));
    }
    let mut on = 0.0;
    let mut off_sum = 0.0;
    let mut off_max: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = c[i * d + j];
            if i == j {
                on += v;
            } else {
                off_sum += v.abs();
                off_max = off_max.max(v.abs());
            }
        }
    }
    let off_count = d * d - d;
    Ok(CorrStats {
        mean_abs_off_diag: if off_count == 0 { 0.0 } else { off_sum / off_count as f64 },
        mean_on_diag: on / d as f64,
        max_abs_off_diag: off_max,
    })
}

/// Cross-correlation of normalized projections of two augmented views of
/// the picked states.
pub fn view_cross_correlation(
    bundle: &ModelBundle,
    dataset: &Dataset,
    picks: &[(usize, usize)],
    augmentation: &AugmentConfig,
    rngs: (&mut impl Rng, &mut impl Rng),
    precision: Precision,
) -> Result<Tensor> {
    let states = dataset.states(picks);
    let v1 = normalize_rows(&project_states(bundle, &augment(&states, augmentation, rngs.0)?, precision)?);
    let v2 = normalize_rows(&project_states(bundle, &augment(&states, augmentation, rngs.1)?, precision)?);
    let mut tape = Tape::inference(Precision::F64);
    let a = tape.constant(v1);
    let b = tape.constant(v2);
    let c = cross_correlation(&mut tape, a, b)?;
    Ok(tape.value(c).clone())
}

/// Writes `dim_0,...,dim_{d-1},label` rows with shortest round-trip
/// decimal formatting.
pub fn export_embeddings<L: Display>(z: &Tensor, labels: &[L], path: &Path) -> Result<()> {
    if z.ndim() != 2 || z.shape()[0] != labels.len() {
        return Err(Error::invalid("export_embeddings", format!("{} labels for shape {:?}", labels.len(), z.shape())));
    }
    let d = z.shape()[1];
    let mut out = String::new();
    let header: Vec<String> = (0..d).map(|i| format!("dim_{i}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for (r, label) in labels.iter().enumerate() {
        for v in z.row(r) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_embeddings`].
pub fn import_embeddings(path: &Path) -> Result<(Tensor, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("import_embeddings", "empty file"))?;
    let d = header.split(',').count() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::invalid("import_embeddings", format!("row has {} fields, expected {}", fields.len(), d + 1)));
        }
        for f in &fields[..d] {
            data.push(f.parse::<f64>().map_err(|e| Error::invalid("import_embeddings", e.to_string()))?);
        }
        labels.push(fields[d].to_string());
    }
    Ok((Tensor::new(vec![labels.len(), d], data)?, labels))
}
