//! Finite-difference check of the full training objective.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{ExperimentConfig, Mode};
use crate::losses::total_loss;
use crate::model::{ModelBundle, Session};
use crate::ndgrad::Tensor;
use crate::rng;
use crate::verify::oracle_grad;
use crate::Result;

/// Comparison of analytic and numeric gradients over all parameters.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / ‖numeric‖` over the concatenated parameters.
    pub rel_err: f64,
    /// Worst per-tensor relative error and its parameter name.
    pub worst: (String, f64),
    pub numeric_norm: f64,
    pub checked: usize,
}

struct Eval {
    loss: f64,
    grads: Vec<Option<Tensor>>,
    detached: Vec<Tensor>,
}

fn evaluate(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    views: &(Tensor, Tensor),
    actions: &[usize],
    replay: Option<Vec<Tensor>>,
) -> Result<Eval> {
    let mut s = Session::training(bundle, cfg.precision);
    let backward = replay.is_none();
    match replay {
        Some(v) => s.tape.replay_detached(v),
        None => s.tape.capture_detached(),
    }
    let out = match cfg.mode {
        Mode::State => s.forward_state(&views.0, &views.1, cfg.mask_ratio, &mut rng::stream(cfg.seed, "mask", 0))?,
        Mode::Demo => s.forward_demo(&views.0, &views.1, actions)?,
    };
    let (total, _) = total_loss(&mut s.tape, &out, actions, cfg)?;
    let loss = s.value(total).data()[0];
    if !backward {
        return Ok(Eval { loss, grads: Vec::new(), detached: Vec::new() });
    }
    let detached = s.tape.detached_values().to_vec();
    let mut g = s.tape.backward(total)?;
    let grads = s.param_grads(&mut g);
    Ok(Eval { loss, grads, detached })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&d) / norm(n).max(1e-12)
}

/// Adds `scale`-sized Gaussian noise to every parameter. Zero biases place
/// dead ReLU windows exactly on the kink, where finite differences and the
/// analytic derivative legitimately disagree.
pub fn jitter_params(bundle: &mut ModelBundle, scale: f64, rng: &mut impl Rng) {
    for i in 0..bundle.params.len() {
        for v in bundle.params.at_mut(i).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Central differences of the total loss for every parameter entry, with
/// stop-gradient outputs held at their base values so that targets act as
/// constants, compared against the tape's gradients.
pub fn check_gradients(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    views: &(Tensor, Tensor),
    actions: &[usize],
    step: f64,
) -> Result<GradCheck> {
    let base = evaluate(cfg, bundle, views, actions, None)?;
    let params: Vec<Tensor> = bundle.params.iter().map(|(_, t)| t.clone()).collect();
    let mut work = bundle.clone();
    let mut failure = None;
    let numeric = oracle_grad(
        |ps| {
            for (i, p) in ps.iter().enumerate() {
                *work.params.at_mut(i) = p.clone();
            }
            match evaluate(cfg, &work, views, actions, Some(base.detached.clone())) {
                Ok(e) => e.loss,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &params,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let (mut a_all, mut n_all) = (Vec::new(), Vec::new());
    let mut worst = (String::new(), 0.0);
    for (i, num) in numeric.iter().enumerate() {
        let a = base.grads[i].clone().unwrap_or_else(|| Tensor::zeros(num.shape()));
        // Tensors with negligible gradient say nothing about relative error.
        if norm(num.data()) > 1e-3 {
            let r = rel(a.data(), num.data());
            if r > worst.1 {
                worst = (bundle.params.at(i).0.to_string(), r);
            }
        }
        a_all.extend_from_slice(a.data());
        n_all.extend_from_slice(num.data());
    }
    Ok(GradCheck { rel_err: rel(&a_all, &n_all), worst, numeric_norm: norm(&n_all), checked: n_all.len() })
}
