//! CLI contract checks shared by the smoke suite and the acceptance run.
//! Each check returns a description of the first violation it finds.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use simtpr_core::config::ExperimentConfig;
use simtpr_core::diagnostics::{collect_projections, feature_rank};
use simtpr_core::model::load_checkpoint;
use simtpr_core::rng;
use simtpr_core::synthdata::Dataset;
use simtpr_core::train::CSV_HEADER;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn simtpr(args: &[&str]) -> Run {
    let Output { status, stdout, stderr } =
        Command::new(env!("CARGO_BIN_EXE_simtpr")).args(args).output().expect("the binary starts");
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

fn expect_code(run: &Run, code: i32, what: &str) -> Check {
    ensure!(run.code == code, "{what}: exit {} instead of {code}; stderr: {}", run.code, run.stderr.trim());
    Ok(())
}

fn json(text: &str, what: &str) -> Result<Value, String> {
    serde_json::from_str(text).map_err(|e| format!("{what}: stdout is not JSON ({e}): {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("temp paths are UTF-8")
}

fn sha(path: &Path) -> String {
    rng::sha256_hex(&fs::read(path).expect("file exists"))
}

/// A small dataset and a fast training config in a scratch directory.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub config: PathBuf,
}

pub const TINY_CONFIG: &str = r#"{
  "batch.n": 2,
  "batch.t": 4,
  "model.d": 8,
  "model.heads": 2,
  "model.layers": 1,
  "model.encoder_channels": [4, 4],
  "train.epochs": 1,
  "train.steps_per_epoch": 3,
  "train.log_interval": 1,
  "diag.rank_samples": 32,
  "diag.cosine_pairs": 8
}"#;

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().expect("temp dir");
        let data = dir.path().join("d.stpr");
        let run = simtpr(&["gen-data", "--seed", "3", "--traj", "10", "--len", "12", "--out", s(&data)]);
        assert_eq!(run.code, 0, "fixture dataset: {}", run.stderr);
        let config = dir.path().join("base.json");
        fs::write(&config, TINY_CONFIG).expect("write config");
        Fixture { dir, data, config }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn base_config(&self) -> ExperimentConfig {
        ExperimentConfig::from_json_str(TINY_CONFIG).expect("tiny config parses")
    }

    /// Pretrains with extra overrides and returns the run directory.
    pub fn pretrain(&self, sets: &[&str], out: &str) -> Result<PathBuf, String> {
        let out = self.path(out);
        let mut args = vec!["pretrain", "--config", s(&self.config), "--data", s(&self.data), "--out", s(&out)];
        for set in sets {
            args.extend(["--set", set]);
        }
        let run = simtpr(&args);
        expect_code(&run, 0, "pretrain")?;
        Ok(PathBuf::from(run.stdout.trim()))
    }
}

pub fn gen_data_writes_dataset_and_manifest(f: &Fixture) -> Check {
    let out = f.path("g1.stpr");
    let run = simtpr(&["gen-data", "--seed", "7", "--traj", "6", "--len", "9", "--out", s(&out)]);
    expect_code(&run, 0, "gen-data")?;
    let printed = json(&run.stdout, "gen-data")?;
    let manifest_path = f.path("g1.stpr.manifest.json");
    let stored = json(&fs::read_to_string(&manifest_path).map_err(|e| format!("manifest: {e}"))?, "manifest file")?;
    ensure!(printed == stored, "printed manifest differs from the stored one");
    ensure!(stored["sha256"] == Value::from(sha(&out)), "manifest hash does not match the dataset bytes");
    for key in ["generator", "num_actions", "bytes"] {
        ensure!(stored.get(key).is_some(), "manifest lacks `{key}`");
    }
    ensure!(stored["generator"]["seed"] == 7 && stored["generator"]["trajectory_length"] == 9, "generator block wrong");
    let data = Dataset::load(&out).map_err(|e| e.to_string())?;
    ensure!(data.num_trajectories() == 6 && data.trajectory_length() == 9, "dataset dimensions wrong");

    let again = f.path("g2.stpr");
    let run = simtpr(&["gen-data", "--seed", "7", "--traj", "6", "--len", "9", "--out", s(&again)]);
    expect_code(&run, 0, "gen-data repeat")?;
    ensure!(json(&run.stdout, "gen-data repeat")?["sha256"] == stored["sha256"], "repeated generation changed the hash");
    Ok(())
}

pub fn gen_data_rejects_bad_input(f: &Fixture) -> Check {
    expect_code(&simtpr(&["gen-data", "--len", "1", "--out", s(&f.path("x.stpr"))]), 2, "--len 1")?;
    expect_code(&simtpr(&["gen-data", "--traj", "0", "--out", s(&f.path("x.stpr"))]), 2, "--traj 0")?;
    expect_code(&simtpr(&["gen-data", "--seed", "1"]), 2, "missing --out")?;
    expect_code(&simtpr(&["gen-data", "--seed", "x", "--out", "y"]), 2, "non-numeric seed")?;
    let unwritable = f.path("no/such/dir/d.stpr");
    expect_code(&simtpr(&["gen-data", "--len", "4", "--traj", "2", "--out", s(&unwritable)]), 3, "unwritable output")?;
    ensure!(!f.path("x.stpr").exists(), "a rejected invocation left a file behind");
    Ok(())
}

pub fn pretrain_writes_run_directory(f: &Fixture) -> Check {
    let before = sha(&f.data);
    let dir = f.pretrain(&["lambda_d=0", "seed=5"], "runs")?;
    let expected = f.base_config().with_overrides(&["lambda_d=0", "seed=5"]).map_err(|e| e.to_string())?;
    ensure!(dir == f.path("runs").join(expected.hash16()), "run directory {} is not named by the config hash", dir.display());
    let resolved = ExperimentConfig::from_json_str(&fs::read_to_string(dir.join("config.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure!(resolved == expected, "resolved config is not the file merged with the overrides");
    ensure!(resolved.lambda_d == 0.0 && resolved.seed == 5, "overrides were not applied");
    let csv = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure!(lines[0] == CSV_HEADER, "metrics header: {}", lines[0]);
    ensure!(lines.len() == 5, "expected records for steps 0..=3, got {} lines", lines.len());
    let ck = load_checkpoint(&dir.join("final.ckpt")).map_err(|e| e.to_string())?;
    ensure!(ck.step == 3 && ck.config == expected, "final checkpoint has step {} or a different config", ck.step);
    ensure!(sha(&f.data) == before, "pretrain modified its dataset");
    Ok(())
}

pub fn pretrain_is_idempotent(f: &Fixture) -> Check {
    let a = f.pretrain(&["seed=9"], "rep_a")?;
    let b = f.pretrain(&["seed=9"], "rep_b")?;
    for name in ["metrics.csv", "final.ckpt", "config.json"] {
        ensure!(sha(&a.join(name)) == sha(&b.join(name)), "{name} differs between identical runs");
    }
    Ok(())
}

pub fn pretrain_exit_codes(f: &Fixture) -> Check {
    let (cfg, data) = (s(&f.config), s(&f.data));
    let out = s(&f.dir.path().join("bad_runs")).to_string();
    let base = ["pretrain", "--config", cfg, "--data", data, "--out", &out];
    let with = |extra: &[&str]| simtpr(&[&base[..], extra].concat());
    expect_code(&with(&["--set", "no.such.key=1"]), 2, "unknown key")?;
    expect_code(&with(&["--set", "model.heads=3"]), 2, "d not divisible by heads")?;
    expect_code(&with(&["--set", "lambda_d"]), 2, "override without value")?;
    expect_code(&simtpr(&["pretrain", "--config", cfg, "--data", s(&f.path("missing.stpr")), "--out", &out]), 3, "missing dataset")?;
    expect_code(&simtpr(&["pretrain", "--config", s(&f.path("missing.json")), "--data", data, "--out", &out]), 3, "missing config")?;
    let blowup = with(&["--set", "optim.lr=1e30", "--set", "optim.max_grad_norm=1e30"]);
    expect_code(&blowup, 4, "diverging run")?;
    ensure!(blowup.stderr.contains("step 1"), "numeric failure does not name the step: {}", blowup.stderr);
    ensure!(blowup.stdout.is_empty(), "failed run printed to stdout");
    Ok(())
}

pub fn diagnose_reports_rank_and_curves(f: &Fixture) -> Check {
    let dir = f.pretrain(&["train.epochs=0"], "fresh")?;
    let ckpt = dir.join("final.ckpt");
    let export = f.path("emb.csv");
    let run = simtpr(&["diagnose", "--ckpt", s(&ckpt), "--data", s(&f.data), "--export", s(&export), "--k-max", "4"]);
    expect_code(&run, 0, "diagnose")?;
    let report = json(&run.stdout, "diagnose")?;
    for key in ["feature_rank", "singular_values", "cosine_curve", "corr_stats"] {
        ensure!(report.get(key).is_some(), "diagnose report lacks `{key}`");
    }
    let rank = report["feature_rank"].as_u64().ok_or("feature_rank is not an integer")?;
    ensure!(rank > 0, "a random model has rank 0");
    ensure!(report["cosine_curve"].as_array().map(Vec::len) == Some(4), "cosine curve length differs from --k-max");
    ensure!(report["singular_values"].as_array().map(Vec::len) == Some(8), "expected d = 8 singular values");

    let ck = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let data = Dataset::load(&f.data).map_err(|e| e.to_string())?;
    let cfg = &ck.config;
    let z = collect_projections(
        &ck.bundle,
        &data,
        cfg.diag.rank_samples,
        &mut rng::stream(cfg.seed, "probe-set", 0),
        cfg.precision,
    )
    .map_err(|e| e.to_string())?;
    let library = feature_rank(&z, cfg.diag.rank_epsilon).map_err(|e| e.to_string())?;
    ensure!(library.feature_rank as u64 == rank, "CLI rank {rank} != library rank {}", library.feature_rank);
    let rows = fs::read_to_string(&export).map_err(|e| e.to_string())?.lines().count();
    ensure!(rows == cfg.diag.rank_samples + 1, "export has {rows} lines");

    let garbage = f.path("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").map_err(|e| e.to_string())?;
    expect_code(&simtpr(&["diagnose", "--ckpt", s(&garbage), "--data", s(&f.data)]), 3, "corrupt checkpoint")?;
    expect_code(&simtpr(&["diagnose", "--ckpt", s(&f.path("none.ckpt")), "--data", s(&f.data)]), 3, "missing checkpoint")?;
    let other = f.path("other.stpr");
    expect_code(&simtpr(&["gen-data", "--size", "8", "--traj", "5", "--len", "6", "--out", s(&other)]), 0, "gen-data 8×8")?;
    expect_code(&simtpr(&["diagnose", "--ckpt", s(&ckpt), "--data", s(&other)]), 2, "incompatible dataset")?;
    Ok(())
}

pub fn probe_reports_scores(f: &Fixture) -> Check {
    let dir = f.pretrain(&[], "probe_runs")?;
    let ckpt = dir.join("final.ckpt");
    let args = ["probe", "--ckpt", s(&ckpt), "--data", s(&f.data), "--epochs", "5"];
    let first = simtpr(&args);
    expect_code(&first, 0, "probe")?;
    let report = json(&first.stdout, "probe")?;
    for key in ["act_f1", "rew_f1"] {
        let v = report[key].as_f64().ok_or(format!("`{key}` missing"))?;
        ensure!((0.0..=1.0).contains(&v), "{key} = {v} outside [0, 1]");
    }
    let ck = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    ensure!(report["encoder_fingerprint"] == Value::from(ck.bundle.fingerprint()), "probing changed the encoder");
    let second = simtpr(&args);
    ensure!(second.stdout == first.stdout, "probing twice with one seed gave different output");
    let random = simtpr(&[&args[..], &["--random-init"]].concat());
    expect_code(&random, 0, "probe --random-init")?;
    ensure!(json(&random.stdout, "probe --random-init")?["random_init"] == true, "random_init flag not reported");
    expect_code(&simtpr(&["probe", "--ckpt", s(&f.path("none.ckpt")), "--data", s(&f.data)]), 3, "missing checkpoint")?;
    Ok(())
}

pub fn sweep_aggregates_cells(f: &Fixture) -> Check {
    let out = f.path("sweep");
    let csv = f.path("sweep.csv");
    let run = simtpr(&[
        "sweep", "--config", s(&f.config), "--data", s(&f.data), "--param", "lambda_d",
        "--values", "0.001,0.01,0.1", "--seeds", "2", "--out", s(&out), "--csv", s(&csv),
    ]);
    expect_code(&run, 0, "sweep")?;
    ensure!(run.stdout.trim() == s(&csv), "sweep should print the CSV path, got {}", run.stdout);
    let text = fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    for col in ["value", "seed", "status", "feat_rank", "cos_k1", "loss_total", "loss_sim", "loss_decorr"] {
        ensure!(header.contains(&col), "sweep CSV lacks column `{col}`");
    }
    ensure!(lines.len() == 1 + 3 * 2, "expected 6 cells, got {} rows", lines.len() - 1);
    ensure!(lines[1..].iter().all(|l| l.split(',').count() == header.len()), "ragged sweep rows");
    ensure!(lines[1..].iter().all(|l| l.contains(",ok,")), "a healthy cell failed");

    // A one-value sweep reproduces the single run's final record.
    let single = f.pretrain(&["lambda_d=0.01"], "single")?;
    let metrics = fs::read_to_string(single.join("metrics.csv")).map_err(|e| e.to_string())?;
    let last: Vec<&str> = metrics.lines().last().unwrap_or_default().split(',').collect();
    let cell: Vec<&str> = lines.iter().find(|l| l.starts_with("lambda_d,0.01,0,")).ok_or("cell missing")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).expect("column exists");
    ensure!(cell[col("feat_rank")] == last[10], "sweep rank differs from the single run");
    ensure!(cell[col("loss_total")] == last[2] && cell[col("cos_k1")] == last[11], "sweep losses differ from the single run");
    Ok(())
}

pub fn sweep_records_failing_cells(f: &Fixture) -> Check {
    let base = ["sweep", "--config", s(&f.config), "--data", s(&f.data), "--param", "lambda_d", "--seeds", "1"];
    let csv = f.path("mixed.csv");
    let run = simtpr(&[&base[..], &["--values", "0.01,oops", "--out", s(&f.path("mixed")), "--csv", s(&csv)]].concat());
    expect_code(&run, 0, "sweep with one bad cell")?;
    let text = fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let statuses: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap_or("")).collect();
    ensure!(statuses == ["ok", "error"], "statuses {statuses:?}");
    let all_bad = simtpr(&[&base[..], &["--values", "x,y", "--out", s(&f.path("bad"))]].concat());
    ensure!(all_bad.code != 0, "a sweep without successes exited 0");
    expect_code(&simtpr(&[&base[..], &["--values", "1", "--param", "nope"]].concat()), 2, "unknown sweep key")?;
    Ok(())
}

pub fn usage_errors_exit_two(_: &Fixture) -> Check {
    expect_code(&simtpr(&["frobnicate"]), 2, "unknown subcommand")?;
    expect_code(&simtpr(&[]), 2, "no subcommand")?;
    let help = simtpr(&["--help"]);
    expect_code(&help, 0, "--help")?;
    ensure!(help.stdout.contains("pretrain"), "help does not list subcommands");
    Ok(())
}

pub const CHECKS: &[(&str, fn(&Fixture) -> Check)] = &[
    ("gen-data writes dataset and manifest", gen_data_writes_dataset_and_manifest),
    ("gen-data rejects bad input", gen_data_rejects_bad_input),
    ("pretrain writes run directory", pretrain_writes_run_directory),
    ("pretrain is idempotent", pretrain_is_idempotent),
    ("pretrain exit codes", pretrain_exit_codes),
    ("diagnose reports rank and curves", diagnose_reports_rank_and_curves),
    ("probe reports scores", probe_reports_scores),
    ("sweep aggregates cells", sweep_aggregates_cells),
    ("sweep records failing cells", sweep_records_failing_cells),
    ("usage errors exit 2", usage_errors_exit_two),
];
