//! Experiment configuration with flat dotted keys (`batch.n`, `model.d`, ...).

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::ndgrad::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    State,
    Demo,
}

/// Collapse-prevention objective paired with (or replacing) similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Similarity plus weighted decorrelation.
    Decorrelation,
    /// Symmetrized InfoNCE replaces similarity; no decorrelation.
    Contrastive,
    /// Similarity alone.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionKind {
    CausalTransformer,
    NonCausal,
    Gru,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub n: usize,
    pub t: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { n: 8, t: 10 }
    }
}

/// Widths set to 0 resolve to a default derived from `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub proj_hidden: usize,
    pub pred_hidden: usize,
    pub action_hidden: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_stride: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 2,
            layers: 2,
            mlp_hidden: 0,
            proj_hidden: 0,
            pred_hidden: 0,
            action_hidden: 0,
            encoder_channels: vec![16, 32, 32],
            encoder_stride: 2,
            max_positions: 32,
        }
    }
}

impl ModelConfig {
    pub fn mlp_hidden(&self) -> usize {
        if self.mlp_hidden == 0 { 4 * self.d } else { self.mlp_hidden }
    }

    pub fn proj_hidden(&self) -> usize {
        if self.proj_hidden == 0 { self.d } else { self.proj_hidden }
    }

    pub fn pred_hidden(&self) -> usize {
        if self.pred_hidden == 0 { self.d } else { self.pred_hidden }
    }

    pub fn action_hidden(&self) -> usize {
        if self.action_hidden == 0 { self.d } else { self.action_hidden }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnConfig {
    pub projector: bool,
    pub predictor: bool,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self { projector: false, predictor: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub shift_pad: usize,
    pub jitter_scale: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        Self { shift_pad: a.shift_pad, jitter_scale: a.jitter_scale }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1.5e-5, weight_decay: 1e-6, max_grad_norm: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// 0 derives one epoch from the dataset size and batch geometry.
    pub steps_per_epoch: usize,
    pub log_interval: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, steps_per_epoch: 100, log_interval: 100, checkpoint_interval: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    pub rank_samples: usize,
    pub rank_epsilon: f64,
    pub rank_normalized: bool,
    pub cosine_pairs: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { rank_samples: 1000, rank_epsilon: 0.01, rank_normalized: false, cosine_pairs: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub loss: LossKind,
    pub transition: TransitionKind,
    pub mask_ratio: f64,
    pub lambda_o: f64,
    pub lambda_d: f64,
    pub lambda_a: f64,
    pub temperature: f64,
    pub k: usize,
    pub seed: u64,
    pub precision: Precision,
    pub deterministic: bool,
    pub batch: BatchConfig,
    pub model: ModelConfig,
    pub bn: BnConfig,
    pub augment: AugmentSection,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub diag: DiagConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::State,
            loss: LossKind::Decorrelation,
            transition: TransitionKind::CausalTransformer,
            mask_ratio: 0.5,
            lambda_o: 0.005,
            lambda_d: 0.01,
            lambda_a: 1.0,
            temperature: 0.1,
            k: 1,
            seed: 0,
            precision: Precision::F32,
            deterministic: true,
            batch: BatchConfig::default(),
            model: ModelConfig::default(),
            bn: BnConfig::default(),
            augment: AugmentSection::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            diag: DiagConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Large-scale settings: 512-wide latents, 8 heads, 2048-wide MLPs,
    /// 64×10 batches and ±4 pixel shifts.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.batch = BatchConfig { n: 64, t: 10 };
        c.model.d = 512;
        c.model.heads = 8;
        c.model.mlp_hidden = 2048;
        c.augment.shift_pad = 4;
        c
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig { shift_pad: self.augment.shift_pad, jitter_scale: self.augment.jitter_scale }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        if self.batch.n == 0 || self.batch.t < 2 {
            return bad(format!("batch needs n ≥ 1 and t ≥ 2, got n={} t={}", self.batch.n, self.batch.t));
        }
        if self.k == 0 || self.k >= self.batch.t {
            return bad(format!("k must satisfy 1 ≤ k < batch.t = {}, got {}", self.batch.t, self.k));
        }
        if m.d == 0 || m.heads == 0 || m.d % m.heads != 0 {
            return bad(format!("model.d = {} must be a positive multiple of model.heads = {}", m.d, m.heads));
        }
        if m.layers == 0 {
            return bad("model.layers must be positive".into());
        }
        if m.encoder_channels.is_empty() || m.encoder_channels.contains(&0) || m.encoder_stride == 0 {
            return bad("encoder needs at least one block with positive channels and stride".into());
        }
        let tokens = match self.mode {
            Mode::State => self.batch.t,
            Mode::Demo => 2 * self.batch.t,
        };
        if tokens > m.max_positions {
            return bad(format!("{tokens} transition tokens exceed model.max_positions = {}", m.max_positions));
        }
        if self.transition == TransitionKind::NonCausal {
            if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
                return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
            }
            if self.mode == Mode::Demo {
                return bad("the non-causal transition is only available in state mode".into());
            }
            if self.loss == LossKind::Contrastive {
                return bad("the non-causal transition replaces similarity with reconstruction; contrastive is incompatible".into());
            }
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, v) in [("lambda_o", self.lambda_o), ("lambda_d", self.lambda_d), ("lambda_a", self.lambda_a)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        let o = &self.optim;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer needs lr ≥ 0, betas in [0, 1) and eps > 0".into());
        }
        if !(o.max_grad_norm > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("optim.max_grad_norm must be positive and optim.weight_decay non-negative".into());
        }
        if self.train.log_interval == 0 {
            return bad("train.log_interval must be positive".into());
        }
        if self.diag.rank_samples == 0 || !(self.diag.rank_epsilon >= 0.0) {
            return bad("diag.rank_samples must be positive and diag.rank_epsilon non-negative".into());
        }
        if self.augment.jitter_scale < 0.0 {
            return bad("augment.jitter_scale must be non-negative".into());
        }
        Ok(())
    }

    /// Flat `{ "a.b": value }` form with keys sorted.
    pub fn to_flat(&self) -> Map<String, Value> {
        let nested = serde_json::to_value(self).expect("config serializes");
        let mut out = Map::new();
        flatten("", &nested, &mut out);
        out
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut nested = Map::new();
        for (key, value) in flat {
            let parts: Vec<&str> = key.split('.').collect();
            let mut cursor = &mut nested;
            for part in &parts[..parts.len() - 1] {
                let entry = cursor.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
                cursor = match entry {
                    Value::Object(m) => m,
                    _ => return Err(Error::Config(format!("key `{key}` nests under a scalar"))),
                };
            }
            cursor.insert(parts[parts.len() - 1].to_string(), value.clone());
        }
        serde_json::from_value(Value::Object(nested)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        match value {
            Value::Object(flat) => Self::from_flat(&flat),
            _ => Err(Error::Config("config must be a JSON object".into())),
        }
    }

    /// Canonical text: flat keys, sorted, compact.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&Value::Object(self.to_flat())).expect("config serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash16(&self) -> String {
        crate::rng::sha256_hex(self.to_canonical_json().as_bytes())[..16].to_string()
    }

    /// Applies `key=value` overrides. Values are parsed as JSON and fall
    /// back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut flat = self.to_flat();
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            if !flat.contains_key(key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            flat.insert(key.to_string(), value);
        }
        Self::from_flat(&flat)
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}
