//! Encoder, projector, transition, predictor and action head, with the
//! state and demonstration forward pipelines.

mod checkpoint;
mod params;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use params::NamedTensors;

use crate::config::{BnConfig, ExperimentConfig, Mode, ModelConfig, TransitionKind};
use crate::error::{Error, Result};
use crate::ndgrad::{Conv2dSpec, Gradients, NormStats, PadMode, Precision, Tape, Tensor, Var, NORM_FLOOR};
use crate::rng;

/// Running-average factor for batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;
const EMBED_STD: f64 = 0.02;

/// Everything that fixes parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    pub bn: BnConfig,
    pub transition: TransitionKind,
    pub mode: Mode,
    /// `[C, H, W]`.
    pub frame: [usize; 3],
    pub num_actions: usize,
}

impl Architecture {
    pub fn from_config(cfg: &ExperimentConfig, frame: [usize; 3], num_actions: usize) -> Self {
        Self {
            model: cfg.model.clone(),
            bn: cfg.bn.clone(),
            transition: cfg.transition,
            mode: cfg.mode,
            frame,
            num_actions,
        }
    }

    /// `(channels, height, width)` after each encoder block.
    pub fn encoder_shapes(&self) -> Vec<(usize, usize, usize)> {
        let [_, mut h, mut w] = self.frame;
        let s = self.model.encoder_stride;
        self.model
            .encoder_channels
            .iter()
            .map(|&c| {
                h = (h + 2 - 3) / s + 1;
                w = (w + 2 - 3) / s + 1;
                (c, h, w)
            })
            .collect()
    }

    /// Flattened encoder width `F`.
    pub fn feature_dim(&self) -> usize {
        let (c, h, w) = *self.encoder_shapes().last().expect("at least one block");
        c * h * w
    }
}

/// Parameters and batch-norm buffers of the full stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub params: NamedTensors,
    pub buffers: NamedTensors,
}

enum Init {
    Uniform(f64),
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    seed: u64,
    params: NamedTensors,
    buffers: NamedTensors,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let mut r = rng::stream(self.seed, &format!("init/{name}"), 0);
        let t = match init {
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Tensor::from_fn(shape, |_| dist.sample(&mut r))
            }
            Init::Normal => {
                let dist = Normal::new(0.0, EMBED_STD).expect("positive std");
                Tensor::from_fn(shape, |_| dist.sample(&mut r))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        };
        self.params.insert(name, t.rounded(Precision::F32));
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) {
        let bound = 1.0 / (input as f64).sqrt();
        self.add(format!("{prefix}.w"), &[input, output], Init::Uniform(bound));
        self.add(format!("{prefix}.b"), &[output], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, width: usize) {
        self.add(format!("{prefix}.gamma"), &[width], Init::Ones);
        self.add(format!("{prefix}.beta"), &[width], Init::Zeros);
    }

    fn batch_norm(&mut self, prefix: &str, width: usize) {
        self.norm(prefix, width);
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[width]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::ones(&[width]));
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize, bn: bool) {
        self.linear(&format!("{prefix}.fc1"), input, hidden);
        if bn {
            self.batch_norm(&format!("{prefix}.bn"), hidden);
        }
        self.linear(&format!("{prefix}.fc2"), hidden, output);
    }
}

impl ModelBundle {
    /// Fresh parameters. Each tensor draws from its own stream keyed by
    /// `(seed, name)`, so adding a component leaves the others unchanged.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let m = &arch.model;
        if m.d % m.heads != 0 {
            return Err(Error::Config(format!("model.d = {} is not a multiple of heads = {}", m.d, m.heads)));
        }
        let mut b = Builder { seed, params: NamedTensors::new(), buffers: NamedTensors::new() };
        let mut in_ch = arch.frame[0];
        for (i, &c) in m.encoder_channels.iter().enumerate() {
            let fan_in = in_ch * 9;
            b.add(format!("encoder.conv{i}.w"), &[c, in_ch, 3, 3], Init::Uniform(1.0 / (fan_in as f64).sqrt()));
            b.add(format!("encoder.conv{i}.b"), &[c], Init::Zeros);
            in_ch = c;
        }
        let (d, f) = (m.d, arch.feature_dim());
        b.mlp("projector", f, m.proj_hidden(), d, arch.bn.projector);
        match arch.transition {
            TransitionKind::CausalTransformer | TransitionKind::NonCausal => {
                b.add("transition.pos".into(), &[m.max_positions, d], Init::Normal);
                if arch.transition == TransitionKind::NonCausal {
                    b.add("transition.mask_token".into(), &[d], Init::Normal);
                }
                for l in 0..m.layers {
                    let p = format!("transition.block{l}");
                    b.norm(&format!("{p}.ln1"), d);
                    b.linear(&format!("{p}.attn.qkv"), d, 3 * d);
                    b.linear(&format!("{p}.attn.out"), d, d);
                    b.norm(&format!("{p}.ln2"), d);
                    b.linear(&format!("{p}.mlp.fc1"), d, m.mlp_hidden());
                    b.linear(&format!("{p}.mlp.fc2"), m.mlp_hidden(), d);
                }
                b.norm("transition.ln_f", d);
            }
            TransitionKind::Gru => {
                for l in 0..m.layers {
                    b.linear(&format!("transition.gru{l}.ih"), d, 3 * d);
                    b.linear(&format!("transition.gru{l}.hh"), d, 3 * d);
                }
            }
        }
        b.mlp("predictor", d, m.pred_hidden(), d, arch.bn.predictor);
        b.add("action_embedding".into(), &[arch.num_actions, d], Init::Normal);
        b.mlp("action_head", d, m.action_hidden(), arch.num_actions, false);
        Ok(Self { arch, params: b.params, buffers: b.buffers })
    }

    pub fn from_config(cfg: &ExperimentConfig, frame: [usize; 3], num_actions: usize) -> Result<Self> {
        Self::new(Architecture::from_config(cfg, frame, num_actions), cfg.seed)
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let buf = self
                    .buffers
                    .get_mut(&format!("{}.{suffix}", u.prefix))
                    .expect("batch-norm buffers exist for every batch-norm layer");
                for (r, b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = Precision::F32.round(BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
                }
            }
        }
    }

    /// Hash of every parameter and buffer.
    pub fn fingerprint(&self) -> String {
        format!("{}{}", self.params.fingerprint(), self.buffers.fingerprint())
    }
}

/// Batch statistics observed by one batch-norm layer during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward (and optional backward) pass over a borrowed bundle.
/// Parameters are bound onto the tape on first use.
pub struct Session<'a> {
    pub tape: Tape,
    bundle: &'a ModelBundle,
    bound: Vec<Option<Var>>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    /// Gradient-tracing session using per-batch normalization statistics.
    pub fn training(bundle: &'a ModelBundle, precision: Precision) -> Self {
        let tape = Tape::new(precision).with_finite_checks(cfg!(debug_assertions));
        Self::with_tape(bundle, tape, true)
    }

    /// Untraced session using running normalization statistics.
    pub fn eval(bundle: &'a ModelBundle, precision: Precision) -> Self {
        Self::with_tape(bundle, Tape::inference(precision), false)
    }

    pub fn with_tape(bundle: &'a ModelBundle, tape: Tape, training: bool) -> Self {
        Self { tape, bundle, bound: vec![None; bundle.params.len()], training, bn_updates: Vec::new() }
    }

    pub fn arch(&self) -> &Architecture {
        &self.bundle.arch
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .bundle
            .params
            .position(name)
            .ok_or_else(|| Error::invalid("param", format!("no parameter named `{name}`")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let value = self.bundle.params.at(i).1.clone();
        let v = if self.tape.is_tracing() { self.tape.param(value) } else { self.tape.constant(value) };
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Gradient for each bundle parameter, in bundle order; `None` when
    /// the parameter did not take part in the pass.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    // ---- layers ---------------------------------------------------------

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, g, b)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        if self.training {
            let (y, mean, var) = self.tape.batch_norm(x, g, b, NormStats::Batch)?;
            self.bn_updates.push(BnUpdate { prefix: prefix.to_string(), mean, var });
            Ok(y)
        } else {
            let buffers = &self.bundle.buffers;
            let mean = buffers.get(&format!("{prefix}.running_mean")).expect("buffer exists").data();
            let var = buffers.get(&format!("{prefix}.running_var")).expect("buffer exists").data();
            Ok(self.tape.batch_norm(x, g, b, NormStats::Fixed { mean, var })?.0)
        }
    }

    /// `fc2(relu([bn](fc1(x))))`.
    pub fn mlp(&mut self, prefix: &str, x: Var, bn: bool) -> Result<Var> {
        let mut h = self.linear(&format!("{prefix}.fc1"), x)?;
        if bn {
            h = self.batch_norm(&format!("{prefix}.bn"), h)?;
        }
        let h = self.tape.relu(h)?;
        self.linear(&format!("{prefix}.fc2"), h)
    }

    // ---- components -----------------------------------------------------

    /// `[..., C, H, W]` → `[..., F]`.
    pub fn encode(&mut self, x: Var) -> Result<Var> {
        let shape = self.tape.shape(x).to_vec();
        let frame = self.arch().frame;
        if shape.len() < 4 || shape[shape.len() - 3..] != frame {
            return Err(Error::ShapeMismatch { op: "encode", lhs: shape, rhs: frame.to_vec() });
        }
        let lead = &shape[..shape.len() - 3];
        let images: usize = lead.iter().product();
        let mut h = self.tape.reshape(x, &[images, frame[0], frame[1], frame[2]])?;
        let spec = Conv2dSpec { stride: self.arch().model.encoder_stride, padding: 1, pad_mode: PadMode::Zero };
        for i in 0..self.arch().model.encoder_channels.len() {
            let w = self.param(&format!("encoder.conv{i}.w"))?;
            let b = self.param(&format!("encoder.conv{i}.b"))?;
            h = self.tape.conv2d(h, w, Some(b), spec)?;
            h = self.tape.relu(h)?;
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(self.arch().feature_dim());
        self.tape.reshape(h, &out_shape)
    }

    pub fn project(&mut self, features: Var) -> Result<Var> {
        let bn = self.arch().bn.projector;
        self.mlp("projector", features, bn)
    }

    pub fn predict(&mut self, context: Var) -> Result<Var> {
        let bn = self.arch().bn.predictor;
        self.mlp("predictor", context, bn)
    }

    pub fn action_logits(&mut self, context: Var) -> Result<Var> {
        self.mlp("action_head", context, false)
    }

    pub fn embed_actions(&mut self, actions: &[usize], n: usize, t: usize) -> Result<Var> {
        let table = self.param("action_embedding")?;
        self.tape.embedding(table, actions, &[n, t])
    }

    fn add_positions(&mut self, x: Var) -> Result<Var> {
        let len = self.tape.shape(x)[1];
        let max = self.arch().model.max_positions;
        if len > max {
            return Err(Error::invalid("transition", format!("sequence length {len} exceeds {max} positions")));
        }
        let table = self.param("transition.pos")?;
        let pos = self.tape.slice(table, 0, 0, len)?;
        self.tape.add(x, pos)
    }

    fn attention(&mut self, prefix: &str, x: Var, causal: bool) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (n, l, d) = (s[0], s[1], s[2]);
        let heads = self.arch().model.heads;
        let dh = d / heads;
        let qkv = self.linear(&format!("{prefix}.qkv"), x)?;
        let qkv = self.tape.reshape(qkv, &[n, l, 3, heads, dh])?;
        let qkv = self.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = self.tape.reshape(qkv, &[3, n * heads, l, dh])?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let sl = self.tape.slice(qkv, 0, i, i + 1)?;
            *p = self.tape.reshape(sl, &[n * heads, l, dh])?;
        }
        let [q, k, v] = parts;
        let kt = self.tape.transpose(k, 1, 2)?;
        let scores = self.tape.matmul(q, kt)?;
        let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let mask = causal.then(|| causal_mask(l));
        let att = self.tape.softmax(scores, mask.as_ref())?;
        let ctx = self.tape.matmul(att, v)?;
        let ctx = self.tape.reshape(ctx, &[n, heads, l, dh])?;
        let ctx = self.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.tape.reshape(ctx, &[n, l, d])?;
        self.linear(&format!("{prefix}.out"), ctx)
    }

    /// Pre-norm transformer over `[N, L, d]` with learned positions and a
    /// final layer norm.
    pub fn transformer(&mut self, x: Var, causal: bool) -> Result<Var> {
        let mut h = self.add_positions(x)?;
        for layer in 0..self.arch().model.layers {
            let p = format!("transition.block{layer}");
            let a = self.layer_norm(&format!("{p}.ln1"), h)?;
            let a = self.attention(&format!("{p}.attn"), a, causal)?;
            h = self.tape.add(h, a)?;
            let m = self.layer_norm(&format!("{p}.ln2"), h)?;
            let m = self.linear(&format!("{p}.mlp.fc1"), m)?;
            let m = self.tape.gelu(m)?;
            let m = self.linear(&format!("{p}.mlp.fc2"), m)?;
            h = self.tape.add(h, m)?;
        }
        self.layer_norm("transition.ln_f", h)
    }

    /// Stacked GRU over `[N, L, d]` with zero initial state.
    pub fn gru(&mut self, x: Var) -> Result<Var> {
        let mut h_seq = x;
        for layer in 0..self.arch().model.layers {
            h_seq = self.gru_layer(&format!("transition.gru{layer}"), h_seq)?;
        }
        Ok(h_seq)
    }

    fn gru_layer(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (n, l) = (s[0], s[1]);
        let gates_x = self.linear(&format!("{prefix}.ih"), x)?;
        let w_hh = self.param(&format!("{prefix}.hh.w"))?;
        let hidden = self.tape.shape(w_hh)[0];
        let b_hh = self.param(&format!("{prefix}.hh.b"))?;
        let mut h = self.tape.constant(Tensor::zeros(&[n, hidden]));
        let mut outputs = Vec::with_capacity(l);
        for t in 0..l {
            let gx = self.tape.slice(gates_x, 1, t, t + 1)?;
            let gx = self.tape.reshape(gx, &[n, 3 * hidden])?;
            let gh = self.tape.matmul(h, w_hh)?;
            let gh = self.tape.add(gh, b_hh)?;
            let part = |tape: &mut Tape, g: Var, i: usize| tape.slice(g, 1, i * hidden, (i + 1) * hidden);
            let (xr, xz, xn) = (part(&mut self.tape, gx, 0)?, part(&mut self.tape, gx, 1)?, part(&mut self.tape, gx, 2)?);
            let (hr, hz, hn) = (part(&mut self.tape, gh, 0)?, part(&mut self.tape, gh, 1)?, part(&mut self.tape, gh, 2)?);
            let r = self.tape.add(xr, hr)?;
            let r = self.tape.sigmoid(r)?;
            let z = self.tape.add(xz, hz)?;
            let z = self.tape.sigmoid(z)?;
            let rn = self.tape.mul(r, hn)?;
            let cand = self.tape.add(xn, rn)?;
            let cand = self.tape.tanh(cand)?;
            // h' = (1 - z)·n + z·h = n + z·(h - n)
            let diff = self.tape.sub(h, cand)?;
            let gated = self.tape.mul(z, diff)?;
            h = self.tape.add(cand, gated)?;
            outputs.push(self.tape.reshape(h, &[n, 1, hidden])?);
        }
        self.tape.concat(&outputs, 1)
    }

    /// Replaces the positions in `masked` (per sequence) with the mask token.
    pub fn apply_mask_token(&mut self, z: Var, masked: &[Vec<usize>]) -> Result<Var> {
        let s = self.tape.shape(z).to_vec();
        let (n, l, d) = (s[0], s[1], s[2]);
        let mut m = Tensor::zeros(&[n, l, d]);
        for (seq, positions) in masked.iter().enumerate() {
            for &p in positions {
                m.data_mut()[(seq * l + p) * d..(seq * l + p + 1) * d].fill(1.0);
            }
        }
        let keep = m.map(|v| 1.0 - v);
        let keep = self.tape.constant(keep);
        let m = self.tape.constant(m);
        let token = self.param("transition.mask_token")?;
        let kept = self.tape.mul(z, keep)?;
        let filled = self.tape.mul(m, token)?;
        self.tape.add(kept, filled)
    }

    /// Causal transformer or GRU over `[N, L, d]`.
    pub fn transition_causal(&mut self, z: Var) -> Result<Var> {
        match self.arch().transition {
            TransitionKind::Gru => self.gru(z),
            _ => self.transformer(z, true),
        }
    }

    /// Masks `⌈ratio·L⌉` positions per sequence and runs the
    /// bidirectional transformer. Returns the context and the masked
    /// positions (sorted) of each sequence.
    pub fn transition_noncausal(&mut self, z: Var, ratio: f64, rng: &mut impl Rng) -> Result<(Var, Vec<Vec<usize>>)> {
        let s = self.tape.shape(z).to_vec();
        let masked = sample_mask(s[0], s[1], ratio, rng)?;
        let x = self.apply_mask_token(z, &masked)?;
        Ok((self.transformer(x, false)?, masked))
    }

    // ---- pipelines ------------------------------------------------------

    fn project_view(&mut self, x: &Tensor) -> Result<Var> {
        let xv = self.tape.constant(x.clone());
        let f = self.encode(xv)?;
        self.project(f)
    }

    fn normalize(&mut self, x: Var) -> Result<Var> {
        let axis = self.tape.shape(x).len() - 1;
        self.tape.l2_normalize(x, axis, NORM_FLOOR)
    }

    /// State pipeline on two views `[N, T, C, H, W]`.
    pub fn forward_state(
        &mut self,
        view1: &Tensor,
        view2: &Tensor,
        mask_ratio: f64,
        mask_rng: &mut impl Rng,
    ) -> Result<ForwardOutputs> {
        let mut z = Vec::with_capacity(2);
        let mut zn = Vec::with_capacity(2);
        let mut qn = Vec::with_capacity(2);
        let mut masks: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
        let masked = self.arch().transition == TransitionKind::NonCausal;
        for (i, view) in [view1, view2].into_iter().enumerate() {
            let zi = self.project_view(view)?;
            let c = if masked {
                let (c, m) = self.transition_noncausal(zi, mask_ratio, mask_rng)?;
                masks[i] = m;
                c
            } else {
                self.transition_causal(zi)?
            };
            let q = self.predict(c)?;
            zn.push(self.normalize(zi)?);
            qn.push(self.normalize(q)?);
            z.push(zi);
        }
        Ok(ForwardOutputs { z_raw: pair(z), z: pair(zn), q: pair(qn), logits: None, masks: masked.then_some(masks) })
    }

    /// Demonstration pipeline: states and embedded actions are interleaved
    /// and run through the causal transition; predictions are read at action
    /// tokens and action logits at state tokens.
    pub fn forward_demo(&mut self, view1: &Tensor, view2: &Tensor, actions: &[usize]) -> Result<ForwardOutputs> {
        let (n, t) = (view1.shape()[0], view1.shape()[1]);
        let mut z = Vec::with_capacity(2);
        let mut zn = Vec::with_capacity(2);
        let mut qn = Vec::with_capacity(2);
        let mut logits = Vec::with_capacity(2);
        let y = self.embed_actions(actions, n, t)?;
        for view in [view1, view2] {
            let zi = self.project_view(view)?;
            let tau = interleave(&mut self.tape, zi, y)?;
            let c = self.transition_causal(tau)?;
            let (state_ctx, action_ctx) = deinterleave(&mut self.tape, c)?;
            let q = self.predict(action_ctx)?;
            logits.push(self.action_logits(state_ctx)?);
            zn.push(self.normalize(zi)?);
            qn.push(self.normalize(q)?);
            z.push(zi);
        }
        Ok(ForwardOutputs { z_raw: pair(z), z: pair(zn), q: pair(qn), logits: Some(pair(logits)), masks: None })
    }
}

fn pair(v: Vec<Var>) -> [Var; 2] {
    [v[0], v[1]]
}

/// Handles produced by a forward pipeline, indexed by view.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Projections before normalization.
    pub z_raw: [Var; 2],
    /// Normalized projections.
    pub z: [Var; 2],
    /// Normalized predictions.
    pub q: [Var; 2],
    /// Action logits `[N, T, n_a]` in demonstration mode.
    pub logits: Option<[Var; 2]>,
    /// Masked positions per sequence for the non-causal transition.
    pub masks: Option<[Vec<Vec<usize>>; 2]>,
}

/// Additive mask with `-inf` above the diagonal.
pub fn causal_mask(l: usize) -> Tensor {
    Tensor::from_fn(&[l, l], |i| if i % l > i / l { f64::NEG_INFINITY } else { 0.0 })
}

/// Number of masked tokens for a ratio: `⌈ratio·len⌉`.
pub fn mask_count(ratio: f64, len: usize) -> usize {
    // Round away representation error before the ceiling (0.3·10 = 3.0000000000000004).
    let raw = ratio * len as f64;
    let snapped = (raw * 1e9).round() / 1e9;
    (snapped.ceil() as usize).min(len)
}

/// Uniform `⌈ratio·len⌉`-subsets per sequence, each sorted.
pub fn sample_mask(n: usize, len: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("transition_noncausal", format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let count = mask_count(ratio, len);
    Ok((0..n)
        .map(|_| {
            let mut v = rand::seq::index::sample(rng, len, count).into_vec();
            v.sort_unstable();
            v
        })
        .collect())
}

/// `[z₁, y₁, z₂, y₂, ...]` from two `[N, T, d]` sequences.
pub fn interleave(tape: &mut Tape, z: Var, y: Var) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    if tape.shape(y) != zs.as_slice() || zs.len() != 3 {
        return Err(Error::ShapeMismatch { op: "interleave", lhs: zs, rhs: tape.shape(y).to_vec() });
    }
    let (n, t, d) = (zs[0], zs[1], zs[2]);
    let z4 = tape.reshape(z, &[n, t, 1, d])?;
    let y4 = tape.reshape(y, &[n, t, 1, d])?;
    let pairs = tape.concat(&[z4, y4], 2)?;
    tape.reshape(pairs, &[n, 2 * t, d])
}

/// Splits `[N, 2T, d]` into (state-token, action-token) sequences.
pub fn deinterleave(tape: &mut Tape, tau: Var) -> Result<(Var, Var)> {
    let s = tape.shape(tau).to_vec();
    if s.len() != 3 || s[1] % 2 != 0 {
        return Err(Error::invalid("deinterleave", format!("expected [N, 2T, d], got {s:?}")));
    }
    let (n, t, d) = (s[0], s[1] / 2, s[2]);
    let pairs = tape.reshape(tau, &[n, t, 2, d])?;
    let states = tape.slice(pairs, 2, 0, 1)?;
    let actions = tape.slice(pairs, 2, 1, 2)?;
    Ok((tape.reshape(states, &[n, t, d])?, tape.reshape(actions, &[n, t, d])?))
}

/// 0-based token positions of `(states, actions)` in an interleaved
/// sequence of `t` pairs.
pub fn token_positions(t: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..t).map(|i| 2 * i).collect(), (0..t).map(|i| 2 * i + 1).collect())
}

/// Evaluation-mode encoder features `[M, F]` for states `[M, C, H, W]`,
/// processed in chunks.
pub fn encode_states(bundle: &ModelBundle, states: &Tensor, precision: Precision) -> Result<Tensor> {
    map_states(bundle, states, precision, |s, x| s.encode(x))
}

/// Evaluation-mode projections `[M, d]` (not normalized).
pub fn project_states(bundle: &ModelBundle, states: &Tensor, precision: Precision) -> Result<Tensor> {
    map_states(bundle, states, precision, |s, x| {
        let f = s.encode(x)?;
        s.project(f)
    })
}

fn map_states(
    bundle: &ModelBundle,
    states: &Tensor,
    precision: Precision,
    f: impl Fn(&mut Session<'_>, Var) -> Result<Var>,
) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let m = states.shape()[0];
    let per: usize = states.shape()[1..].iter().product();
    let mut out = Vec::new();
    let mut width = 0;
    for start in (0..m).step_by(CHUNK) {
        let end = (start + CHUNK).min(m);
        let mut shape = states.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, states.data()[start * per..end * per].to_vec())?;
        let mut s = Session::eval(bundle, precision);
        let x = s.tape.constant(chunk);
        let y = f(&mut s, x)?;
        width = *s.tape.shape(y).last().expect("non-scalar output");
        out.extend_from_slice(s.tape.value(y).data());
    }
    Tensor::new(vec![m, width], out)
}
