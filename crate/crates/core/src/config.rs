//! Experiment configuration.
//!
//! The on-disk form is flat `section.key = value` text (valid TOML with
//! dotted keys). Command-line overrides use the same dotted paths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Activation, LossKind, MlpSpec};
use crate::tasks::{PoolConfig, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Inner step size.
    pub alpha: f64,
    pub inner_steps: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { alpha: 0.01, inner_steps: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Meta step size.
    pub eta: f64,
    pub batch_m: usize,
    pub batch_n: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig { eta: 0.001, batch_m: 10, batch_n: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Empty selects the default for the task kind.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { layer_widths: Vec::new(), activation: Activation::Relu, init_scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Instance,
    Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypergradMode {
    Exact,
    Approx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// 1.0 for the task scheme, 0.005 for the instance scheme.
    Default,
    /// `reweight.init_value` everywhere.
    Constant,
    /// Uniform in `[0, 1)`.
    UniformRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightConfig {
    /// Weight step size.
    pub gamma: f64,
    pub scheme: Scheme,
    pub hypergrad: HypergradMode,
    /// Number of weight-sharing clusters; 0 disables sharing.
    pub clusters: usize,
    pub weight_init: WeightInit,
    pub init_value: f64,
    pub normalize_weights: bool,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig {
            gamma: 0.1,
            scheme: Scheme::Task,
            hypergrad: HypergradMode::Approx,
            clusters: 0,
            weight_init: WeightInit::Default,
            init_value: 1.0,
            normalize_weights: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Maml,
    Rwmaml,
    /// MAML with ground-truth corrupt tasks or instances removed.
    Skyline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub iterations: usize,
    pub eval_every: usize,
    pub baseline: Baseline,
    /// Weight dump interval in iterations; 0 dumps only at termination.
    pub dump_every: usize,
    pub out_dir: String,
    /// Offsets the batch-sampling streams; the pool is always built from `seed`.
    pub seed_offset: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 5000,
            eval_every: 100,
            baseline: Baseline::Rwmaml,
            dump_every: 0,
            out_dir: "runs/default".into(),
            seed_offset: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pool: PoolConfig,
    pub model: ModelConfig,
    pub adapt: AdaptConfig,
    pub meta: MetaConfig,
    pub reweight: ReweightConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn loss(&self) -> LossKind {
        match self.pool.task_kind {
            TaskKind::SineOod => LossKind::Mse,
            TaskKind::ClassifyNoise => LossKind::CrossEntropy,
        }
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        let mut spec = if self.model.layer_widths.is_empty() {
            match self.pool.task_kind {
                TaskKind::SineOod => MlpSpec::sine_default(),
                TaskKind::ClassifyNoise => MlpSpec::classifier_default(self.pool.ways),
            }
        } else {
            MlpSpec::new(self.model.layer_widths.clone(), self.model.activation)
        };
        spec.activation = self.model.activation;
        spec.init_scale = self.model.init_scale;
        spec.init_seed = self.seed;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        let spec = self.mlp_spec();
        spec.validate()?;
        let (in_dim, out_dim) = match self.pool.task_kind {
            TaskKind::SineOod => (1, 1),
            TaskKind::ClassifyNoise => (2, self.pool.ways),
        };
        if spec.input_dim() != in_dim || spec.output_dim() != out_dim {
            return Err(Error::config(
                "model.layer_widths",
                format!("task kind needs input width {in_dim} and output width {out_dim}"),
            ));
        }
        if !(self.adapt.alpha >= 0.0 && self.adapt.alpha.is_finite()) {
            return Err(Error::config("adapt.alpha", "must be finite and non-negative"));
        }
        if self.adapt.inner_steps == 0 {
            return Err(Error::config("adapt.inner_steps", "must be at least 1"));
        }
        if !(self.meta.eta >= 0.0 && self.meta.eta.is_finite()) {
            return Err(Error::config("meta.eta", "must be finite and non-negative"));
        }
        if self.meta.batch_m == 0 || self.meta.batch_m > self.pool.m {
            return Err(Error::config("meta.batch_m", "need 1 <= batch_m <= pool.m"));
        }
        if self.meta.batch_n == 0 || self.meta.batch_n > self.pool.n {
            return Err(Error::config("meta.batch_n", "need 1 <= batch_n <= pool.n"));
        }
        if !(self.reweight.gamma >= 0.0 && self.reweight.gamma.is_finite()) {
            return Err(Error::config("reweight.gamma", "must be finite and non-negative"));
        }
        if self.reweight.hypergrad == HypergradMode::Exact && self.adapt.inner_steps != 1 {
            return Err(Error::config("reweight.hypergrad", "exact mode needs adapt.inner_steps = 1"));
        }
        if self.reweight.weight_init == WeightInit::Constant && !(self.reweight.init_value >= 0.0) {
            return Err(Error::config("reweight.init_value", "must be non-negative"));
        }
        let units = match self.reweight.scheme {
            Scheme::Task => self.pool.m,
            Scheme::Instance => self.pool.m * self.pool.k_query,
        };
        if self.reweight.clusters > units {
            return Err(Error::config(
                "reweight.clusters",
                format!("{} clusters for {units} weighted units", self.reweight.clusters),
            ));
        }
        if self.run.eval_every == 0 {
            return Err(Error::config("run.eval_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        Self::from_table(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(field_of(&e), e.message().to_string()))?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// scalars or arrays, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov, "override must look like key=value"))?;
            let key = key.trim().trim_start_matches("--");
            let value = parse_value(raw.trim());
            set_path(&mut table, key, value)?;
        }
        Self::from_table(table)
    }

    /// Flat dotted-key text, one setting per line.
    pub fn to_flat_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn field_of(e: &toml::de::Error) -> String {
    // serde reports the offending key in the message; keep it readable.
    let msg = e.message();
    match msg.split('`').nth(1) {
        Some(field) => field.to_string(),
        None => "<config>".into(),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = table;
    for part in parts {
        cur = match cur.get_mut(part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::config(key, "unknown config section")),
        };
    }
    match cur.get(last) {
        None => return Err(Error::config(key, "unknown config key")),
        Some(toml::Value::Table(_)) => return Err(Error::config(key, "names a section, not a value")),
        Some(old) => {
            // Integers given where floats are expected, and vice versa.
            let value = match (old, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            cur.insert(last.to_string(), value);
        }
    }
    Ok(())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            // scalars first so the root `seed` precedes sections
            let (tables, scalars): (Vec<_>, Vec<_>) = t.iter().partition(|(_, v)| v.is_table());
            for (k, v) in scalars.into_iter().chain(tables) {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push(format!("{prefix} = {v}")),
    }
}
