//! Run configuration: model shape, training schedule and dataset, loaded
//! from JSON and adjusted by `GF2_*` environment variables and dotted
//! `key=value` overrides, in that order of precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::discriminators::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::executor::{ExecutorConfig, GateMode};
use crate::losses::LossWeights;
use crate::planner::{levels_for, CountDistribution, PlannerConfig};
use crate::toydata::{ToyConfig, NUM_CLASSES};

/// Prefix of configuration environment variables.
pub const ENV_PREFIX: &str = "GF2_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub res: usize,
    pub classes: usize,
    /// Layout capacity `k_max`.
    pub max_segments: usize,
    /// Planning steps `T`; 0 is the non-compositional mode.
    pub steps: usize,
    pub z_dim: usize,
    pub u_dim: usize,
    pub w_dim: usize,
    pub mapping_depth: usize,
    pub planner_channels: Vec<usize>,
    pub executor_channels: Vec<usize>,
    pub attn_dim: usize,
    pub heads: usize,
    pub pos_dim: usize,
    pub depth_dim: usize,
    pub slots: usize,
    pub gate: GateMode,
    pub gate_dim: usize,
    pub noise: bool,
    pub d_stem: [usize; 3],
    pub d_segment_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            res: 32,
            classes: NUM_CLASSES,
            max_segments: 8,
            steps: 2,
            z_dim: 16,
            u_dim: 16,
            w_dim: 16,
            mapping_depth: 2,
            planner_channels: vec![16, 16, 16, 8],
            executor_channels: vec![16, 16, 16, 8],
            attn_dim: 16,
            heads: 1,
            pos_dim: 8,
            depth_dim: 8,
            slots: 0,
            gate: GateMode::Full,
            gate_dim: 8,
            noise: true,
            d_stem: [16, 16, 32],
            d_segment_hidden: 16,
        }
    }
}

impl ModelConfig {
    /// Planner configuration with a placeholder count distribution; the
    /// trainer replaces it with one fitted to the data.
    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            res: self.res,
            classes: self.classes,
            steps: self.steps,
            channels: self.planner_channels.clone(),
            z_dim: self.z_dim,
            u_dim: self.u_dim,
            mapping_depth: self.mapping_depth,
            attn_dim: self.attn_dim,
            heads: self.heads,
            pos_dim: self.pos_dim,
            depth_dim: self.depth_dim,
            slots: self.slots,
            max_segments: self.max_segments,
            count: CountDistribution { mu: 2.0, sigma: 1.0, k_min: 1, k_max: self.max_segments },
        }
    }

    pub fn executor(&self) -> ExecutorConfig {
        ExecutorConfig {
            res: self.res,
            classes: self.classes,
            max_segments: self.max_segments,
            channels: self.executor_channels.clone(),
            z_dim: self.z_dim,
            w_dim: self.w_dim,
            mapping_depth: self.mapping_depth,
            gate: self.gate,
            gate_dim: self.gate_dim,
            noise: self.noise,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            res: self.res,
            classes: self.classes,
            max_segments: self.max_segments,
            stem: self.d_stem,
            segment_hidden: self.d_segment_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        levels_for(self.res)?;
        self.planner().validate()?;
        self.executor().validate()?;
        self.discriminator().validate()
    }
}

/// How the two stages are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Planning, then execution on ground-truth pairs, then joint fine-tuning.
    #[default]
    Paired,
    /// Planning, then joint training without image-layout correspondence.
    Unpaired,
    /// Both stages jointly from scratch.
    Parallel,
}

/// Layout-image consistency objective of the execution stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Unconditional critic, no consistency term.
    None,
    /// Critic sees the layout concatenated to the image.
    Concat,
    /// Edge matching between the layout and the segmentation head.
    Edge,
    /// Semantic matching.
    #[default]
    Sm,
    /// Perceptual feature matching; needs a pretrained network.
    Vgg,
}

impl Baseline {
    pub const TRAINABLE: [Baseline; 4] = [Baseline::None, Baseline::Concat, Baseline::Edge, Baseline::Sm];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::None => "none",
            Baseline::Concat => "concat",
            Baseline::Edge => "edge",
            Baseline::Sm => "sm",
            Baseline::Vgg => "vgg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSteps {
    pub plan: usize,
    pub exec: usize,
    pub joint: usize,
}

impl Default for PhaseSteps {
    fn default() -> Self {
        Self { plan: 2000, exec: 2000, joint: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
    pub losses: LossWeights,
    /// Hierarchical layout-noise σ.
    pub noise_sigma: f64,
    pub schedule: Schedule,
    pub baseline: Baseline,
    pub segment_fidelity: bool,
    pub steps: PhaseSteps,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ema_decay: 0.999,
            losses: LossWeights::default(),
            noise_sigma: 0.2,
            schedule: Schedule::Paired,
            baseline: Baseline::Sm,
            segment_fidelity: true,
            steps: PhaseSteps::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::BadConfig("batch must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::BadConfig(format!("optimizer settings lr {}, β {} {}, eps {}", self.lr, self.beta1, self.beta2, self.eps)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(self.noise_sigma >= 0.0) || self.losses.r1_interval == 0 {
            return Err(Error::BadConfig("EMA decay, noise σ or R1 interval out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub toy: ToyConfig,
    pub count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { toy: ToyConfig::default(), count: 2000, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.toy.validate()?;
        if self.data.toy.res != self.model.res {
            return Err(Error::BadConfig(format!("data resolution {} differs from model resolution {}", self.data.toy.res, self.model.res)));
        }
        if self.data.toy.n_max + 1 > self.model.max_segments {
            return Err(Error::BadConfig(format!("{} shapes plus background exceed layout capacity {}", self.data.toy.n_max, self.model.max_segments)));
        }
        Ok(())
    }

    /// Resolves a configuration: defaults, then the JSON file, then
    /// `GF2_*` variables from `env`, then `overrides` (`dotted.key=value`).
    pub fn resolve<I, K, V>(file: Option<&Path>, env: I, overrides: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        Self::resolve_from(Config::default(), file, env, overrides)
    }

    /// [`Config::resolve`] starting from `base` instead of the defaults.
    pub fn resolve_from<I, K, V>(base: Config, file: Option<&Path>, env: I, overrides: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut tree = serde_json::to_value(base)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
            merge(&mut tree, user, "")?;
        }
        let keys = leaf_keys(&tree);
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.as_ref().strip_prefix(ENV_PREFIX).map(|s| (s.to_string(), v.as_ref().to_string())))
            .collect();
        env.sort();
        for (name, raw) in env {
            let key = keys
                .iter()
                .find(|k| k.replace('.', "_").eq_ignore_ascii_case(&name))
                .ok_or_else(|| Error::BadConfig(format!("{ENV_PREFIX}{name} names no configuration key")))?;
            set_key(&mut tree, key, &raw)?;
        }
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| Error::BadConfig(format!("override {item:?} is not key=value")))?;
            set_key(&mut tree, key.trim(), raw)?;
        }
        let cfg: Config = serde_json::from_value(tree).map_err(|e| Error::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key from its textual value, type-checked against the schema.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        set_key(&mut tree, key, raw)?;
        let cfg: Config = serde_json::from_value(tree).map_err(|e| Error::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dotted paths of every non-object value.
fn leaf_keys(v: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &path, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(v, "", &mut out);
    out
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_u64() => "unsigned integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Whether `new` may replace `old`: same JSON kind, integers only where
/// integers are stored, and arrays of the same length.
fn compatible(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Number(o), Value::Number(n)) => !o.is_u64() || n.is_u64(),
        (Value::Array(o), Value::Array(n)) => o.first().zip(n.first()).is_none_or(|(a, b)| compatible(a, b)),
        (Value::Object(_), Value::Object(_)) => true,
        _ => kind(old) == kind(new),
    }
}

fn merge(tree: &mut Value, user: Value, prefix: &str) -> Result<()> {
    match (tree, user) {
        (Value::Object(base), Value::Object(over)) => {
            for (k, v) in over {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = base.get_mut(&k).ok_or_else(|| Error::BadConfig(format!("unknown configuration key {path}")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (slot, v) => {
            if !compatible(slot, &v) {
                return Err(Error::BadConfig(format!("{prefix}: expected {}, got {}", kind(slot), kind(&v))));
            }
            *slot = v;
            Ok(())
        }
    }
}

fn set_key(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut slot = &mut *tree;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::BadConfig(format!("unknown configuration key {key}")))?;
    }
    let parsed = match serde_json::from_str::<Value>(raw.trim()) {
        Ok(v) if !slot.is_string() || v.is_string() => v,
        _ if slot.is_string() => Value::String(raw.to_string()),
        _ => return Err(Error::BadConfig(format!("{key}: cannot parse {raw:?} as {}", kind(slot)))),
    };
    if !compatible(slot, &parsed) {
        return Err(Error::BadConfig(format!("{key}: expected {}, got {} ({raw:?})", kind(slot), kind(&parsed))));
    }
    *slot = parsed;
    Ok(())
}
