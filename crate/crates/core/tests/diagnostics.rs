mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use simtpr_core::config::ExperimentConfig;
use simtpr_core::diagnostics::*;
use simtpr_core::model::ModelBundle;
use simtpr_core::synthdata::{generate, EnvConfig};
use simtpr_core::verify::{oracle_cosine_curve, oracle_singular_values};
use simtpr_core::{Precision, Tensor};

const EPS: f64 = 0.01;

/// Columns of a random `[n, k]` matrix made orthonormal by Gram–Schmidt.
fn orthonormal(n: usize, k: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < k {
        let mut v: Vec<f64> = normal(&[n], r).into_data();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    cols
}

/// `U diag(s) Vᵀ` with the given singular values.
fn with_spectrum(n: usize, d: usize, s: &[f64], r: &mut impl Rng) -> Tensor {
    let u = orthonormal(n, s.len(), r);
    let v = orthonormal(d, s.len(), r);
    Tensor::from_fn(&[n, d], |idx| {
        let (i, j) = (idx / d, idx % d);
        s.iter().enumerate().map(|(k, sk)| sk * u[k][i] * v[k][j]).sum()
    })
}

/// Log-uniform singular values in [1e-4, 10], none within 10% of ε and
/// each pair at least 5% apart so power iteration can separate them.
fn spectrum(k: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(k);
    while out.len() < k {
        let s = 10f64.powf(r.random_range(-4.0..1.0));
        let apart = out.iter().all(|&o| (s / o - 1.0).abs() > 0.05 && (o / s - 1.0).abs() > 0.05);
        if (s / EPS - 1.0).abs() > 0.1 && apart {
            out.push(s);
        }
    }
    out
}

#[test]
fn rank_matches_power_iteration_on_random_matrices() {
    let mut r = rng(0);
    for case in 0..100 {
        let n = r.random_range(2..=128);
        let d = r.random_range(1..=32);
        let k = r.random_range(1..=n.min(d));
        let s = spectrum(k, &mut r);
        let z = with_spectrum(n, d, &s, &mut r);
        let expected = s.iter().filter(|&&v| v > EPS).count();
        let oracle = oracle_singular_values(&z).expect("power iteration settles");
        let oracle_rank = oracle.iter().filter(|&&v| v > EPS).count();
        let got = feature_rank(&z, EPS).unwrap();
        assert_eq!(got.feature_rank, oracle_rank, "case {case}: n={n} d={d}");
        assert_eq!(got.feature_rank, expected, "case {case}");
        assert_eq!(got.singular_values.len(), d);
        assert!(got.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn constructed_rank_three_at_default_sample_size() {
    let mut r = rng(1);
    let z = with_spectrum(1000, 64, &[5.0, 1.0, 0.2], &mut r);
    let rep = feature_rank(&z, EPS).unwrap();
    assert_eq!(rep.feature_rank, 3);
    assert_eq!(rep.n_samples, 1000);
    for (got, want) in rep.singular_values.iter().zip([5.0, 1.0, 0.2]) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn rank_edge_cases() {
    assert_eq!(feature_rank(&Tensor::zeros(&[10, 4]), EPS).unwrap().feature_rank, 0);
    let ones = Tensor::full(&[10, 4], 1.0);
    assert_eq!(feature_rank(&ones, EPS).unwrap().feature_rank, 1);
    let eye = Tensor::eye(6);
    assert_eq!(feature_rank(&eye, EPS).unwrap().feature_rank, 6);
    assert!(feature_rank(&Tensor::zeros(&[0, 4]), EPS).is_err());
    assert!(feature_rank(&Tensor::zeros(&[4]), EPS).is_err());
    let mut bad = Tensor::zeros(&[3, 3]);
    bad.data_mut()[4] = f64::NAN;
    assert!(feature_rank(&bad, EPS).is_err());
}

fn small_setup() -> (ModelBundle, simtpr_core::synthdata::Dataset) {
    let cfg = ExperimentConfig::default();
    let ds = generate(&EnvConfig::default(), 3, 4, 12).unwrap();
    (ModelBundle::from_config(&cfg, ds.frame_shape(), 5).unwrap(), ds)
}

#[test]
fn cosine_curve_matches_exhaustive_oracle() {
    let (b, ds) = small_setup();
    let k_max = 5;
    let curve = cosine_curve_at(&b, &ds, k_max, &all_starts(&ds, k_max), Precision::F64).unwrap();
    let picks: Vec<(usize, usize)> = (0..4).flat_map(|tr| (0..12).map(move |t| (tr, t))).collect();
    let emb = projections_at(&b, &ds, &picks, Precision::F64, false).unwrap();
    let expected = oracle_cosine_curve(emb.data(), 4, 12, emb.shape()[1], k_max);
    assert_eq!(curve.len(), k_max);
    for (a, e) in curve.iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(a));
    }
}

#[test]
fn cosine_curve_rejects_bad_lags() {
    let (b, ds) = small_setup();
    assert!(cosine_curve(&b, &ds, 0, 8, &mut rng(0), Precision::F64).is_err());
    assert!(cosine_curve(&b, &ds, 12, 8, &mut rng(0), Precision::F64).is_err());
    assert!(cosine_curve_at(&b, &ds, 3, &[(0, 9)], Precision::F64).is_err());
    assert!(cosine_curve_at(&b, &ds, 3, &[], Precision::F64).is_err());
    let c = cosine_curve(&b, &ds, 11, 8, &mut rng(0), Precision::F64).unwrap();
    assert_eq!(c.len(), 11);
}

#[test]
fn constant_embeddings_have_unit_cosine() {
    let emb = vec![0.5; 2 * 6 * 3];
    let c = oracle_cosine_curve(&emb, 2, 6, 3, 4);
    assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn corr_stats_summaries() {
    let s = corr_stats(Tensor::eye(4).data(), 4).unwrap();
    assert_eq!((s.mean_on_diag, s.mean_abs_off_diag, s.max_abs_off_diag), (1.0, 0.0, 0.0));
    let s = corr_stats(&[1.0, -0.5, 0.25, 0.5], 2).unwrap();
    assert_eq!(s.mean_on_diag, 0.75);
    assert_eq!(s.mean_abs_off_diag, 0.375);
    assert_eq!(s.max_abs_off_diag, 0.5);
    assert!(corr_stats(&[1.0; 3], 2).is_err());
}

#[test]
fn view_correlation_is_bounded_and_square() {
    let (b, ds) = small_setup();
    let picks = sample_states(&ds, 40, &mut rng(2));
    let c = view_cross_correlation(
        &b,
        &ds,
        &picks,
        &simtpr_core::augment::AugmentConfig::default(),
        (&mut rng(3), &mut rng(4)),
        Precision::F64,
    )
    .unwrap();
    assert_eq!(c.shape(), &[64, 64]);
    assert!(c.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
}

#[test]
fn embedding_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    let z = normal(&[5, 3], &mut rng(5));
    let labels = ["0", "1", "2", "0", "4"];
    export_embeddings(&z, &labels, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("dim_0,dim_1,dim_2,label\n"));
    let (back, back_labels) = import_embeddings(&path).unwrap();
    assert_eq!(back, z);
    assert_eq!(back_labels, labels);
    assert!(export_embeddings(&z, &labels[..2], &path).is_err());
    assert!(export_embeddings(&z, &labels, &dir.path().join("missing/emb.csv")).unwrap_err().is_io());
}

#[test]
fn collected_projections_have_requested_size() {
    let (b, ds) = small_setup();
    let z = collect_projections(&b, &ds, 33, &mut rng(6), Precision::F32).unwrap();
    assert_eq!(z.shape(), &[33, 64]);
    let n = normalize_rows(&z);
    for row in n.data().chunks(64) {
        assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rank_is_bounded_and_scale_monotone(seed in 0u64..1000, n in 1usize..20, d in 1usize..10) {
        let z = normal(&[n, d], &mut rng(seed));
        let r = feature_rank(&z, EPS).unwrap();
        prop_assert!(r.feature_rank <= n.min(d));
        // Shrinking the matrix can only lower the count.
        let small = z.map(|v| v * 0.01);
        prop_assert!(feature_rank(&small, EPS).unwrap().feature_rank <= r.feature_rank);
        // Squared singular values sum to the Frobenius norm.
        let fro: f64 = z.data().iter().map(|v| v * v).sum();
        let sum: f64 = r.singular_values.iter().map(|s| s * s).sum();
        prop_assert!((fro - sum).abs() <= 1e-8 * fro.max(1.0));
    }
}

#[test]
fn low_rank_product_with_small_noise() {
    let mut r = rng(7);
    let a = normal(&[100, 3], &mut r);
    let b = normal(&[3, 16], &mut r);
    let noise = normal(&[100, 16], &mut r);
    let z = Tensor::from_fn(&[100, 16], |idx| {
        let (i, j) = (idx / 16, idx % 16);
        (0..3).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum::<f64>() + 1e-6 * noise.data()[idx]
    });
    assert_eq!(feature_rank(&z, EPS).unwrap().feature_rank, 3);
    let oracle = oracle_singular_values(&z).unwrap();
    assert!(oracle[3] < EPS && oracle[2] > EPS);
}

#[test]
fn orthogonal_step_embeddings_have_zero_cosine() {
    // Each step of a trajectory gets its own basis vector.
    let (len, d) = (6, 6);
    let emb: Vec<f64> = (0..len * d).map(|i| if i / d == i % d { 2.0 } else { 0.0 }).collect();
    assert!(oracle_cosine_curve(&emb, 1, len, d, 4).iter().all(|&c| c == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rank_ignores_row_order_and_column_rotation(seed in 0u64..1000, n in 2usize..40, d in 2usize..8) {
        let mut r = rng(seed);
        let k = r.random_range(1..=n.min(d));
        let z = with_spectrum(n, d, &spectrum(k, &mut r), &mut r);
        let base = feature_rank(&z, EPS).unwrap().feature_rank;
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let permuted = Tensor::from_fn(&[n, d], |idx| z.data()[order[idx / d] * d + idx % d]);
        prop_assert_eq!(feature_rank(&permuted, EPS).unwrap().feature_rank, base);
        let q = orthonormal(d, d, &mut r);
        let rotated = Tensor::from_fn(&[n, d], |idx| {
            let (i, j) = (idx / d, idx % d);
            (0..d).map(|c| z.data()[i * d + c] * q[j][c]).sum()
        });
        prop_assert_eq!(feature_rank(&rotated, EPS).unwrap().feature_rank, base);
    }

    #[test]
    fn scaling_moves_the_threshold(seed in 0u64..1000, c in 0.1f64..10.0) {
        let mut r = rng(seed);
        let z = with_spectrum(30, 6, &spectrum(5, &mut r), &mut r);
        let scaled = z.map(|v| v * c);
        let a = feature_rank(&scaled, EPS).unwrap();
        let b = feature_rank(&z, EPS / c).unwrap();
        prop_assert_eq!(a.feature_rank, b.feature_rank);
        // Squared values: zero singular values sit at sqrt(roundoff).
        let top = c * b.singular_values[0];
        for (x, y) in a.singular_values.iter().zip(&b.singular_values) {
            prop_assert!((x * x - c * c * y * y).abs() <= 1e-12 * top * top);
        }
    }
}
