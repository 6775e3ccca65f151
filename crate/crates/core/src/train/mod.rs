//! The pretraining loop: sample, augment, forward, loss, backward, clip,
//! AdamW; periodic diagnostics and checkpoints.

mod metrics;
mod optim;

use std::path::Path;
use std::time::Instant;

pub use metrics::{parse_csv, MetricsRecord, CSV_HEADER};
pub use optim::{clip_global_norm, global_norm, AdamW};

use crate::augment::make_views;
use crate::config::{ExperimentConfig, Mode};
use crate::diagnostics::{cosine_curve_at, feature_rank, projections_at, sample_starts, sample_states};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{save_checkpoint, Architecture, Checkpoint, ModelBundle, Session};
use crate::ndgrad::Tensor;
use crate::rng;
use crate::synthdata::Dataset;

/// Lags reported in each metrics record.
pub const COSINE_LAGS: [usize; 3] = [1, 3, 5];

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

pub struct Trainer<'d> {
    pub config: ExperimentConfig,
    pub bundle: ModelBundle,
    pub optimizer: AdamW,
    dataset: &'d Dataset,
    rank_states: Vec<(usize, usize)>,
    cosine_starts: Vec<(usize, usize)>,
    cosine_lag: usize,
    steps_per_epoch: u64,
    started: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(config: ExperimentConfig, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::from_config(&config, dataset.frame_shape(), dataset.num_actions())?;
        let optimizer = AdamW::new(&bundle.params, config.optim.clone(), config.precision);
        Self::assemble(config, dataset, bundle, optimizer)
    }

    /// Continues from a checkpoint. The architecture must match the
    /// dataset; the training config is taken from the checkpoint.
    pub fn resume(checkpoint: Checkpoint, dataset: &'d Dataset) -> Result<Self> {
        let Checkpoint { config, bundle, optimizer, step } = checkpoint;
        let expected = Architecture::from_config(&config, dataset.frame_shape(), dataset.num_actions());
        if bundle.arch != expected {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint expects frames {:?} with {} actions, dataset has {:?} with {}",
                bundle.arch.frame,
                bundle.arch.num_actions,
                expected.frame,
                expected.num_actions
            )));
        }
        let optimizer = AdamW::from_state(&bundle.params, &optimizer, step, config.optim.clone(), config.precision)?;
        Self::assemble(config, dataset, bundle, optimizer)
    }

    fn assemble(config: ExperimentConfig, dataset: &'d Dataset, bundle: ModelBundle, optimizer: AdamW) -> Result<Self> {
        if config.batch.t > dataset.trajectory_length() {
            return Err(Error::Config(format!(
                "batch.t = {} exceeds the dataset trajectory length {}",
                config.batch.t,
                dataset.trajectory_length()
            )));
        }
        let rank_states =
            sample_states(dataset, config.diag.rank_samples, &mut rng::stream(config.seed, "probe-set", 0));
        let cosine_lag = COSINE_LAGS[2].min(dataset.trajectory_length() - 1);
        let cosine_starts = sample_starts(
            dataset,
            cosine_lag,
            config.diag.cosine_pairs.max(1),
            &mut rng::stream(config.seed, "cosine", 0),
        )?;
        let steps_per_epoch = match config.train.steps_per_epoch {
            0 => dataset.num_trajectories() * dataset.trajectory_length() / (config.batch.n * config.batch.t),
            s => s,
        }
        .max(1) as u64;
        Ok(Self {
            config,
            bundle,
            optimizer,
            dataset,
            rank_states,
            cosine_starts,
            cosine_lag,
            steps_per_epoch,
            started: Instant::now(),
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.epochs as u64 * self.steps_per_epoch
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        if step == 0 { 0 } else { (step - 1) / self.steps_per_epoch }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            bundle: self.bundle.clone(),
            optimizer: self.optimizer.state(&self.bundle.params),
            step: self.optimizer.step,
        }
    }

    /// Forward pass and loss on the batch for `index`, without updating
    /// anything. Returns the session for an optional backward pass.
    fn forward(&self, index: u64) -> Result<(Session<'_>, crate::ndgrad::Var, LossBreakdown, Vec<usize>)> {
        self.forward_on("", index)
    }

    /// `prefix` selects a family of rng streams; training uses the empty one.
    fn forward_on(&self, prefix: &str, index: u64) -> Result<(Session<'_>, crate::ndgrad::Var, LossBreakdown, Vec<usize>)> {
        let cfg = &self.config;
        let stream = |name: &str| rng::stream(cfg.seed, &format!("{prefix}{name}"), index);
        let batch = self.dataset.sample_batch(cfg.batch.n, cfg.batch.t, &mut stream("data"))?;
        let views = make_views(&batch.observations, &cfg.augment_config(), &mut stream("aug1"), &mut stream("aug2"))?;
        let mut session = Session::training(&self.bundle, cfg.precision);
        let out = match cfg.mode {
            Mode::State => session.forward_state(&views.view1, &views.view2, cfg.mask_ratio, &mut stream("mask"))?,
            Mode::Demo => session.forward_demo(&views.view1, &views.view2, &batch.actions)?,
        };
        let (total, breakdown) = total_loss(&mut session.tape, &out, &batch.actions, cfg)?;
        Ok((session, total, breakdown, batch.actions))
    }

    /// Loss on the batch for `index` without any update.
    pub fn evaluate_loss(&self, index: u64) -> Result<LossBreakdown> {
        Ok(self.forward(index)?.2)
    }

    /// Mean cosine between normalized predictions and their targets over
    /// `batches` held-out batches drawn from dedicated streams. Only
    /// defined for variants with a similarity term.
    pub fn prediction_cosine(&self, batches: u64) -> Result<Option<f64>> {
        let mut sum = 0.0;
        for i in 0..batches {
            match self.forward_on("eval-", i)?.2.sim {
                // Unit vectors: ‖q − z‖² = 2 − 2·cos.
                Some(d) => sum += 1.0 - d / 2.0,
                None => return Ok(None),
            }
        }
        Ok(Some(sum / batches.max(1) as f64))
    }

    /// One optimizer step on the batch for the next step index.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let index = self.optimizer.step + 1;
        let wrap = |e: Error, s: &Self| Error::Step { epoch: s.epoch_of(index), step: index, source: Box::new(e) };
        let (mut session, total, loss, _) = self.forward(index).map_err(|e| wrap(e, self))?;
        let mut grads = session.tape.backward(total).map_err(|e| wrap(e, self))?;
        let mut param_grads = session.param_grads(&mut grads);
        let bn = session.take_bn_updates();
        drop(session);
        let grad_norm = clip_global_norm(&mut param_grads, self.config.optim.max_grad_norm);
        if !grad_norm.is_finite() {
            let name = param_grads
                .iter()
                .enumerate()
                .find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite()))
                .map(|(i, _)| self.bundle.params.at(i).0.to_string())
                .unwrap_or_default();
            return Err(wrap(Error::NonFiniteGradient { param: name }, self));
        }
        self.optimizer.update(&mut self.bundle.params, &param_grads).map_err(|e| wrap(e, self))?;
        self.bundle.apply_bn_updates(&bn);
        Ok(StepReport { loss, grad_norm })
    }

    /// Feature rank on the fixed probe states and mean cosine at each of
    /// [`COSINE_LAGS`].
    pub fn diagnose(&self) -> Result<(usize, [Option<f64>; 3])> {
        let cfg = &self.config;
        let z = projections_at(&self.bundle, self.dataset, &self.rank_states, cfg.precision, cfg.diag.rank_normalized)?;
        let rank = feature_rank(&z, cfg.diag.rank_epsilon)?.feature_rank;
        let curve = cosine_curve_at(&self.bundle, self.dataset, self.cosine_lag, &self.cosine_starts, cfg.precision)?;
        let cos = COSINE_LAGS.map(|k| curve.get(k - 1).copied());
        Ok((rank, cos))
    }

    fn record(&self, step: u64, loss: LossBreakdown) -> Result<MetricsRecord> {
        let (feature_rank, cos) = self.diagnose()?;
        Ok(MetricsRecord {
            epoch: self.epoch_of(step),
            step,
            loss,
            feature_rank,
            cos,
            wall_secs: (!self.config.deterministic).then(|| self.started.elapsed().as_secs_f64()),
        })
    }

    /// Trains until `until` (or the configured total) steps are complete,
    /// passing each metrics record to `sink`. A fresh run first emits a
    /// step-0 record. Checkpoints go to `checkpoint_dir` when periodic
    /// checkpointing is on.
    pub fn run(
        &mut self,
        until: Option<u64>,
        checkpoint_dir: Option<&Path>,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        let total = self.total_steps();
        let stop = until.unwrap_or(total).min(total);
        if self.step() == 0 {
            let at = |e| Error::Step { epoch: 0, step: 0, source: Box::new(e) };
            let loss = self.evaluate_loss(0).map_err(at)?;
            sink(&self.record(0, loss).map_err(at)?)?;
        }
        while self.step() < stop {
            let report = self.train_step()?;
            let step = self.step();
            if step % self.config.train.log_interval as u64 == 0 || step == total {
                let record = self.record(step, report.loss).map_err(|e| Error::Step {
                    epoch: self.epoch_of(step),
                    step,
                    source: Box::new(e),
                })?;
                sink(&record)?;
            }
            let every = self.config.train.checkpoint_interval as u64;
            if let (Some(dir), true) = (checkpoint_dir, every > 0 && step % every == 0) {
                save_checkpoint(&self.checkpoint(), &dir.join(format!("step-{step}.ckpt")))?;
            }
        }
        Ok(())
    }
}

/// Runs a full pretraining and returns the final bundle with every
/// metrics record.
pub fn pretrain(config: ExperimentConfig, dataset: &Dataset) -> Result<(ModelBundle, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(config, dataset)?;
    let mut records = Vec::new();
    trainer.run(None, None, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.bundle, records))
}

/// Metrics records as CSV text including the header.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Copies every parameter; convenient for before/after comparisons.
pub fn snapshot(bundle: &ModelBundle) -> Vec<Tensor> {
    bundle.params.iter().map(|(_, t)| t.clone()).collect()
}
