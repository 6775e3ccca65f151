//! Linear probes on frozen encoder features: multiclass action prediction
//! with focal loss and binary reward prediction with logistic loss.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{encode_states, ModelBundle};
use crate::ndgrad::{Precision, Tape, Tensor, Var};
use crate::rng;
use crate::synthdata::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Action,
    Reward,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lr: 0.2, epochs: 50, batch_size: 256, weight_decay: 1e-6, lr_step: 10, lr_gamma: 0.1, focal_gamma: 2.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub task: ProbeTask,
    /// Positive-class F1 for rewards, macro F1 over present classes for actions.
    pub f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub train_size: usize,
    pub eval_size: usize,
}

/// Deterministic 4:1 split of trajectory indices: every fifth trajectory
/// is held out.
pub fn split_trajectories(num_trajectories: usize) -> (Vec<usize>, Vec<usize>) {
    (0..num_trajectories).partition(|i| i % 5 != 4)
}

#[derive(Clone, Debug)]
pub struct ProbeData {
    /// `[M, F]` encoder features.
    pub features: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<usize>,
}

/// Evaluation-mode encoder features for every state of the given trajectories.
pub fn extract_features(
    bundle: &ModelBundle,
    dataset: &Dataset,
    trajectories: &[usize],
    precision: Precision,
) -> Result<ProbeData> {
    let picks: Vec<(usize, usize)> =
        trajectories.iter().flat_map(|&tr| (0..dataset.trajectory_length()).map(move |t| (tr, t))).collect();
    let features = encode_states(bundle, &dataset.states(&picks), precision)?;
    Ok(ProbeData {
        features,
        actions: picks.iter().map(|&(tr, t)| dataset.action(tr, t)).collect(),
        rewards: picks.iter().map(|&(tr, t)| dataset.reward(tr, t) as usize).collect(),
    })
}

/// A linear classifier over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub task: ProbeTask,
    pub classes: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[F, outputs]`; one output for the binary task.
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearProbe {
    pub fn zeros(task: ProbeTask, classes: usize, width: usize) -> Self {
        let outputs = outputs(task, classes);
        Self {
            task,
            classes,
            mean: vec![0.0; width],
            std: vec![1.0; width],
            w: Tensor::zeros(&[width, outputs]),
            b: Tensor::zeros(&[outputs]),
        }
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let f = self.mean.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    /// Class logits `[M, classes]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference(Precision::F64);
        let (w, b) = (tape.constant(self.w.clone()), tape.constant(self.b.clone()));
        let xv = tape.constant(self.standardize(x));
        let l = class_logits(&mut tape, self.task, xv, w, b)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        let c = l.shape()[1];
        Ok(l.data()
            .chunks(c)
            .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
            .collect())
    }
}

fn outputs(task: ProbeTask, classes: usize) -> usize {
    match task {
        ProbeTask::Action => classes,
        ProbeTask::Reward => 1,
    }
}

/// Multiclass logits directly; the binary score `s` becomes `[0, s]`.
fn class_logits(tape: &mut Tape, task: ProbeTask, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.matmul(x, w)?;
    let s = tape.add(s, b)?;
    match task {
        ProbeTask::Action => Ok(s),
        ProbeTask::Reward => {
            let zeros = tape.constant(Tensor::zeros(tape.shape(s)));
            tape.concat(&[zeros, s], 1)
        }
    }
}

/// Mean focal loss `-(1 - p_y)^γ log p_y` (plain cross-entropy at γ = 0).
pub fn focal_loss(tape: &mut Tape, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let (m, c) = (s[0], s[1]);
    let mut onehot = Tensor::zeros(&[m, c]);
    for (r, &y) in labels.iter().enumerate() {
        onehot.data_mut()[r * c + y] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, onehot)?;
    let logp = tape.sum_axis(picked, 1)?;
    let per = if gamma == 0.0 {
        logp
    } else {
        let p = tape.exp(logp)?;
        let q = tape.neg(p)?;
        let q = tape.add_scalar(q, 1.0)?;
        let modulator = tape.powf(q, gamma)?;
        tape.mul(modulator, logp)?
    };
    let total = tape.sum(per)?;
    tape.scale(total, -1.0 / m as f64)
}

/// Loss and gradients `(loss, dw, db)` of the probe objective on a batch
/// of already-standardized features.
pub fn probe_loss_and_grad(probe: &LinearProbe, x: &Tensor, labels: &[usize], focal_gamma: f64) -> Result<(f64, Tensor, Tensor)> {
    let mut tape = Tape::new(Precision::F64);
    let w = tape.param(probe.w.clone());
    let b = tape.param(probe.b.clone());
    let xv = tape.constant(x.clone());
    let logits = class_logits(&mut tape, probe.task, xv, w, b)?;
    let gamma = match probe.task {
        ProbeTask::Action => focal_gamma,
        ProbeTask::Reward => 0.0,
    };
    let loss = focal_loss(&mut tape, logits, labels, gamma)?;
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    let gw = g.take(w).unwrap_or_else(|| Tensor::zeros(probe.w.shape()));
    let gb = g.take(b).unwrap_or_else(|| Tensor::zeros(probe.b.shape()));
    Ok((value, gw, gb))
}

/// Mini-batch SGD with coupled weight decay and step learning-rate decay.
pub fn fit_linear_probe(
    features: &Tensor,
    labels: &[usize],
    task: ProbeTask,
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    let (m, f) = match *features.shape() {
        [m, f] => (m, f),
        ref s => return Err(Error::invalid("fit_linear_probe", format!("expected [M, F] features, got {s:?}"))),
    };
    if m != labels.len() || m == 0 {
        return Err(Error::invalid("fit_linear_probe", format!("{} labels for {m} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid("fit_linear_probe", format!("label {bad} out of range for {classes} classes")));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::invalid("fit_linear_probe", "training labels contain a single class"));
    }
    let mut probe = LinearProbe::zeros(task, classes, f);
    for j in 0..f {
        let col: Vec<f64> = (0..m).map(|r| features.data()[r * f + j]).collect();
        let mean = col.iter().sum::<f64>() / m as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        probe.mean[j] = mean;
        probe.std[j] = var.sqrt().max(1e-6);
    }
    let x = probe.standardize(features);
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = rng::stream(cfg.seed, "probe", task as u64);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_gamma.powi((epoch / cfg.lr_step.max(1)) as i32);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * f);
            for &r in chunk {
                data.extend_from_slice(&x.data()[r * f..(r + 1) * f]);
            }
            let xb = Tensor::new(vec![chunk.len(), f], data)?;
            let yb: Vec<usize> = chunk.iter().map(|&r| labels[r]).collect();
            let (_, gw, gb) = probe_loss_and_grad(&probe, &xb, &yb, cfg.focal_gamma)?;
            for (p, g) in [(&mut probe.w, &gw), (&mut probe.b, &gb)] {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * (gv + cfg.weight_decay * *pv);
                }
            }
        }
    }
    Ok(probe)
}

/// Confusion matrix and F1 scores.
pub fn f1_report(predictions: &[usize], labels: &[usize], task: ProbeTask, classes: usize) -> Result<ProbeResult> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid("f1_report", format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::invalid("f1_report", format!("class index out of range for {classes} classes")));
        }
        confusion[y][p] += 1;
    }
    let per_class_f1: Vec<f64> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let fp = (0..classes).filter(|&y| y != c).map(|y| confusion[y][c]).sum::<usize>() as f64;
            let fn_ = (0..classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum::<usize>() as f64;
            if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) }
        })
        .collect();
    let f1 = match task {
        ProbeTask::Reward => per_class_f1[1.min(classes - 1)],
        ProbeTask::Action => {
            let present: Vec<usize> = (0..classes).filter(|&c| confusion[c].iter().sum::<usize>() > 0).collect();
            present.iter().map(|&c| per_class_f1[c]).sum::<f64>() / present.len() as f64
        }
    };
    Ok(ProbeResult { task, f1, per_class_f1, confusion, train_size: 0, eval_size: labels.len() })
}

/// Both probes on the 4:1 trajectory split.
pub fn run_probes(
    bundle: &ModelBundle,
    dataset: &Dataset,
    cfg: &ProbeConfig,
    precision: Precision,
) -> Result<(ProbeResult, ProbeResult)> {
    let (train_ids, eval_ids) = split_trajectories(dataset.num_trajectories());
    if train_ids.is_empty() || eval_ids.is_empty() {
        return Err(Error::invalid("probe", "at least 5 trajectories are needed for a 4:1 split"));
    }
    let train = extract_features(bundle, dataset, &train_ids, precision)?;
    let eval = extract_features(bundle, dataset, &eval_ids, precision)?;
    let mut results = Vec::with_capacity(2);
    for (task, classes) in [(ProbeTask::Action, dataset.num_actions()), (ProbeTask::Reward, 2)] {
        let (ytr, yev) = match task {
            ProbeTask::Action => (&train.actions, &eval.actions),
            ProbeTask::Reward => (&train.rewards, &eval.rewards),
        };
        let probe = fit_linear_probe(&train.features, ytr, task, classes, cfg)?;
        let mut r = f1_report(&probe.predict(&eval.features)?, yev, task, classes)?;
        r.train_size = ytr.len();
        results.push(r);
    }
    let reward = results.pop().expect("two results");
    let action = results.pop().expect("two results");
    Ok((action, reward))
}
