use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::model::NamedTensors;
use crate::ndgrad::{Precision, Tensor};

/// Decoupled-weight-decay Adam over a [`NamedTensors`] parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub precision: Precision,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed updates.
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &NamedTensors, config: OptimConfig, precision: Precision) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { config, precision, m: zeros(), v: zeros(), step: 0 }
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn update(&mut self, params: &mut NamedTensors, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("adamw_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let (name, p) = params.at(i);
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch { op: "adamw_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient { param: name.to_string() });
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let r = |x: f64| self.precision.round(x);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.at_mut(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = r(c.beta1 * m[j] + (1.0 - c.beta1) * gj);
                v[j] = r(c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj);
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pj = r(*pj - c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *pj));
            }
        }
        Ok(())
    }

    /// Moments as `m.<param>` / `v.<param>` tensors.
    pub fn state(&self, params: &NamedTensors) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (i, (name, _)) in params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].clone());
            out.insert(format!("v.{name}"), self.v[i].clone());
        }
        out
    }

    pub fn from_state(
        params: &NamedTensors,
        state: &NamedTensors,
        step: u64,
        config: OptimConfig,
        precision: Precision,
    ) -> Result<Self> {
        let mut opt = Self::new(params, config, precision);
        opt.step = step;
        for (i, (name, p)) in params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let t = state
                    .get(&format!("{prefix}.{name}"))
                    .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing optimizer moment {prefix}.{name}")))?;
                if t.shape() != p.shape() {
                    return Err(Error::IncompatibleCheckpoint(format!("moment {prefix}.{name} has the wrong shape")));
                }
                *slot = t.clone();
            }
        }
        Ok(opt)
    }
}

/// Global ℓ2 norm over all present gradients.
pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
