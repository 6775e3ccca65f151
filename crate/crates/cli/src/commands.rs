use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use simtpr_core::config::ExperimentConfig;
use simtpr_core::diagnostics::{
    corr_stats, cosine_curve_at, export_embeddings, feature_rank, projections_at, sample_starts, sample_states,
    view_cross_correlation,
};
use simtpr_core::model::{load_checkpoint, save_checkpoint, Architecture, Checkpoint, ModelBundle};
use simtpr_core::probe::{run_probes, ProbeConfig};
use simtpr_core::rng;
use simtpr_core::synthdata::{generate, Dataset, EnvConfig};
use simtpr_core::train::{MetricsRecord, Trainer, CSV_HEADER};
use simtpr_core::Error;

use crate::{ConfigArgs, DiagnoseArgs, GenDataArgs, PretrainArgs, ProbeArgs, SweepArgs};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_io() {
            EXIT_IO
        } else if e.is_numeric() {
            EXIT_NUMERIC
        } else {
            EXIT_USAGE
        };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult<T = String> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn write_file(path: &Path, text: &str) -> CmdResult<()> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON values serialize")
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn gen_data(a: &GenDataArgs) -> CmdResult {
    let env = EnvConfig { size: a.size, goal: a.goal.unwrap_or((a.size / 2, a.size / 2)), epsilon: a.epsilon };
    let data = generate(&env, a.seed, a.traj, a.len)?;
    let bytes = data.to_bytes();
    fs::write(&a.out, &bytes).map_err(|e| io_failure(&a.out, e))?;
    let manifest = json!({
        "dataset": a.out.file_name().map(|n| n.to_string_lossy().into_owned()),
        "sha256": rng::sha256_hex(&bytes),
        "bytes": bytes.len(),
        "generator": {
            "seed": a.seed,
            "num_trajectories": a.traj,
            "trajectory_length": a.len,
            "env": env,
        },
        "num_actions": data.num_actions(),
        "frame_shape": data.frame_shape(),
    });
    let text = pretty(&manifest);
    write_file(&manifest_path(&a.out), &format!("{text}\n"))?;
    eprintln!("wrote {} ({} states)", a.out.display(), data.header.num_states());
    Ok(text)
}

pub fn resolve_config(a: &ConfigArgs) -> CmdResult<ExperimentConfig> {
    let base = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            ExperimentConfig::from_json_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&a.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> CmdResult<Dataset> {
    Ok(Dataset::load(path)?)
}

/// Trains one configuration into `<out>/<hash16>/`. Returns the run
/// directory and the last metrics record.
pub fn run_training(cfg: ExperimentConfig, data: &Dataset, out: &Path) -> CmdResult<(PathBuf, MetricsRecord)> {
    let dir = out.join(cfg.hash16());
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    write_file(&dir.join("config.json"), &format!("{}\n", cfg.to_pretty_json()))?;
    let metrics_path = dir.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| io_failure(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{CSV_HEADER}").map_err(|e| io_failure(&metrics_path, e))?;
    let mut trainer = Trainer::new(cfg, data)?;
    let checkpoint_dir = (trainer.config.train.checkpoint_interval > 0).then_some(dir.as_path());
    let mut last = None;
    let mut csv_error = None;
    let outcome = trainer.run(None, checkpoint_dir, &mut |r| {
        eprintln!("step {:>6}  loss {:.6}  rank {}", r.step, r.loss.total, r.feature_rank);
        if let Err(e) = writeln!(csv, "{}", r.csv_row()).and_then(|_| csv.flush()) {
            csv_error = Some(e);
        }
        last = Some(r.clone());
        Ok(())
    });
    if let Some(e) = csv_error {
        return Err(io_failure(&metrics_path, e));
    }
    outcome?;
    save_checkpoint(&trainer.checkpoint(), &dir.join("final.ckpt"))?;
    Ok((dir, last.expect("a fresh run emits a step-0 record")))
}

pub fn pretrain(a: &PretrainArgs) -> CmdResult {
    let cfg = resolve_config(&a.config)?;
    let data = load_dataset(&a.data)?;
    let (dir, _) = run_training(cfg, &data, &a.out)?;
    Ok(dir.display().to_string())
}

/// Loads a checkpoint and checks it against the dataset's frame shape and
/// action count.
fn load_for(ckpt: &Path, data: &Dataset) -> CmdResult<Checkpoint> {
    let ck = load_checkpoint(ckpt)?;
    let expected = Architecture::from_config(&ck.config, data.frame_shape(), data.num_actions());
    if ck.bundle.arch != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint expects frames {:?} with {} actions, dataset has {:?} with {}",
            ck.bundle.arch.frame,
            ck.bundle.arch.num_actions,
            expected.frame,
            expected.num_actions
        ))
        .into());
    }
    Ok(ck)
}

pub fn diagnose(a: &DiagnoseArgs) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let ck = load_for(&a.ckpt, &data)?;
    let cfg = &ck.config;
    let seed = a.seed.unwrap_or(cfg.seed);
    let samples = a.samples.unwrap_or(cfg.diag.rank_samples);
    let epsilon = a.epsilon.unwrap_or(cfg.diag.rank_epsilon);
    if samples == 0 || !(epsilon >= 0.0) {
        return Err(usage("--samples must be positive and --epsilon non-negative"));
    }
    let picks = sample_states(&data, samples, &mut rng::stream(seed, "probe-set", 0));
    let z = projections_at(&ck.bundle, &data, &picks, cfg.precision, cfg.diag.rank_normalized)?;
    let rank = feature_rank(&z, epsilon)?;

    let k_max = a.k_max.min(data.trajectory_length() - 1);
    let pairs = a.pairs.unwrap_or(cfg.diag.cosine_pairs).max(1);
    let starts = sample_starts(&data, k_max, pairs, &mut rng::stream(seed, "cosine", 0))?;
    let curve = cosine_curve_at(&ck.bundle, &data, k_max, &starts, cfg.precision)?;

    let c = view_cross_correlation(
        &ck.bundle,
        &data,
        &picks,
        &cfg.augment_config(),
        (&mut rng::stream(seed, "diag-aug1", 0), &mut rng::stream(seed, "diag-aug2", 0)),
        cfg.precision,
    )?;
    let stats = corr_stats(c.data(), cfg.model.d)?;

    if let Some(path) = &a.export {
        let labels: Vec<usize> = picks.iter().map(|&(tr, t)| data.action(tr, t)).collect();
        export_embeddings(&z, &labels, path)?;
        eprintln!("exported {} embeddings to {}", labels.len(), path.display());
    }
    let report = json!({
        "checkpoint_step": ck.step,
        "config_hash": cfg.hash16(),
        "seed": seed,
        "feature_rank": rank.feature_rank,
        "singular_values": rank.singular_values,
        "n_samples": rank.n_samples,
        "epsilon": rank.epsilon,
        "cosine_curve": curve,
        "corr_stats": stats,
    });
    Ok(pretty(&report))
}

pub fn probe(a: &ProbeArgs) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let ck = load_for(&a.ckpt, &data)?;
    let bundle = if a.random_init {
        ModelBundle::from_config(&ck.config, data.frame_shape(), data.num_actions())?
    } else {
        ck.bundle
    };
    let defaults = ProbeConfig::default();
    let pc = ProbeConfig {
        seed: a.seed,
        epochs: a.epochs.unwrap_or(defaults.epochs),
        lr: a.lr.unwrap_or(defaults.lr),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        ..defaults
    };
    let before = bundle.fingerprint();
    let (action, reward) = run_probes(&bundle, &data, &pc, ck.config.precision)?;
    let after = bundle.fingerprint();
    assert_eq!(before, after, "probing must not modify the encoder");
    let report = json!({
        "act_f1": action.f1,
        "rew_f1": reward.f1,
        "random_init": a.random_init,
        "encoder_fingerprint": after,
        "probe_config": pc,
        "action": action,
        "reward": reward,
    });
    Ok(pretty(&report))
}

pub const SWEEP_HEADER: &str = "param,value,seed,status,steps,feat_rank,cos_k1,cos_k3,cos_k5,loss_total,loss_sim,\
loss_decorr,loss_decorr_on,loss_decorr_off,loss_contrastive,loss_action,loss_recon,run_dir,error";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// CSV-safe single-line text.
fn sanitize(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

pub fn sweep(a: &SweepArgs) -> CmdResult {
    if a.param == "seed" {
        return Err(usage("sweep seeds with --seeds, not --param seed"));
    }
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let base = resolve_config(&a.config)?;
    if !base.to_flat().contains_key(&a.param) {
        return Err(usage(format!("unknown config key `{}`", a.param)));
    }
    let data = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let csv_path = a.csv.clone().unwrap_or_else(|| a.out.join("sweep.csv"));
    let mut rows = vec![SWEEP_HEADER.to_string()];
    let mut first_failure: Option<Failure> = None;
    let mut succeeded = 0;
    for value in &a.values {
        for i in 0..a.seeds {
            let seed = base.seed + i;
            eprintln!("cell {}={value} seed={seed}", a.param);
            let cell = base
                .with_overrides(&[format!("{}={value}", a.param), format!("seed={seed}")])
                .map_err(Failure::from)
                .and_then(|cfg| {
                    cfg.validate()?;
                    run_training(cfg, &data, &a.out)
                });
            let prefix = format!("{},{},{seed}", a.param, sanitize(value));
            match cell {
                Ok((dir, r)) => {
                    succeeded += 1;
                    let l = &r.loss;
                    rows.push(format!(
                        "{prefix},ok,{},{},{},{},{},{},{},{},{},{},{},{},{},{},",
                        r.step,
                        r.feature_rank,
                        opt(r.cos[0]),
                        opt(r.cos[1]),
                        opt(r.cos[2]),
                        l.total,
                        opt(l.sim),
                        l.decorr,
                        l.decorr_on_diag,
                        l.decorr_off_diag,
                        opt(l.contrastive),
                        opt(l.action),
                        opt(l.recon),
                        sanitize(&dir.display().to_string()),
                    ));
                }
                Err(f) => {
                    eprintln!("cell failed: {}", f.message);
                    rows.push(format!("{prefix},error,,,,,,,,,,,,,,,{}", sanitize(&f.message)));
                    first_failure.get_or_insert(f);
                }
            }
        }
    }
    rows.push(String::new());
    write_file(&csv_path, &rows.join("\n"))?;
    match (succeeded, first_failure) {
        (0, Some(f)) => Err(Failure { code: f.code, message: format!("every cell failed; first: {}", f.message) }),
        _ => Ok(csv_path.display().to_string()),
    }
}
