//! Flat `key = value` configuration files.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! steps = 400
//! model.layout = SMSMAM
//! model.rope_mode = both
//! model.length_base = none
//! task.kind = mqar
//! adam.weight_decay = 0.01
//! ```
//!
//! Keys are the field paths of [`TrainConfig`]; unknown keys are errors.
//! Values are read as JSON scalars where possible, otherwise as strings, and
//! `none` means an absent optional value.

use serde_json::Value;

use crate::blocks::OtceConfig;
use crate::error::{Error, Result};
use crate::harness::optim::AdamConfig;
use crate::tasks::TaskSpec;
use crate::tensor::DType;

/// Environment variable that replaces `seed` when set.
pub const SEED_ENV: &str = "OTCE_SEED";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub model: OtceConfig,
    pub task: TaskSpec,
    pub steps: u64,
    pub batch: usize,
    pub warmup_frac: f64,
    /// Multiplies the Noam rate.
    pub lr_scale: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Model initialisation seed. Data order comes from `task.seed`.
    pub seed: u64,
    pub numeric_mode: DType,
    pub eval_every: u64,
    pub eval_batches: usize,
    pub eval_batch: usize,
    /// Adds `wall_ms` to metrics records; off keeps metrics reproducible.
    pub wall_time: bool,
    /// Layouts for the `layout` ablation axis.
    pub ablate_layouts: Vec<String>,
    /// Restricts an ablation axis to these values.
    pub ablate_values: Vec<String>,
    /// Pads the tail MLP of each ablation row to the first row's size.
    pub ablate_equalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut model = OtceConfig::small("SMSMAMSMAM", 64, 65).expect("default layout");
        model.n_heads = 4;
        model.kv_groups = 2;
        model.ffn_hidden = 128;
        model.moe_hidden = 64;
        TrainConfig {
            model,
            task: TaskSpec::mqar(),
            steps: 300,
            batch: 16,
            warmup_frac: 0.1,
            lr_scale: 1.0,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            numeric_mode: DType::F32,
            eval_every: 100,
            eval_batches: 4,
            eval_batch: 16,
            wall_time: false,
            ablate_layouts: Vec::new(),
            ablate_values: Vec::new(),
            ablate_equalize: false,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_frac * self.steps as f64).round() as u64).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0
            || self.batch == 0
            || self.eval_batches == 0
            || self.eval_batch == 0
            || self.eval_every == 0
        {
            return Err(Error::Config(
                "steps, batch, eval_every and eval sizes must be positive".into(),
            ));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac <= 1.0) || self.lr_scale <= 0.0 {
            return Err(Error::Config(
                "warmup_frac must be in (0, 1] and lr_scale positive".into(),
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || a.eps <= 0.0
            || a.weight_decay < 0.0
        {
            return Err(Error::Config(
                "adam betas must be in [0, 1), eps positive, decay non-negative".into(),
            ));
        }
        self.model.validate()?;
        self.task.validate()?;
        if self.task.vocab_size > self.model.vocab {
            return Err(Error::Config(format!(
                "task vocabulary {} exceeds model vocabulary {}",
                self.task.vocab_size, self.model.vocab
            )));
        }
        if self.task.seq_len > self.model.max_len {
            return Err(Error::Config(format!(
                "task seq_len {} exceeds model max_len {}",
                self.task.seq_len, self.model.max_len
            )));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply(&self, text: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            set_path(&mut tree, key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        let cfg: TrainConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Defaults, then `text`, then the seed override from the environment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default().apply(text)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The flat `key = value` form of this config.
    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        flatten(&serde_json::to_value(self)?, "", &mut out);
        Ok(out)
    }
}

fn scalar(text: &str) -> Value {
    match text {
        "none" | "null" => Value::Null,
        _ => serde_json::from_str::<Value>(text)
            .ok()
            .filter(|v| !v.is_object())
            .unwrap_or_else(|| Value::String(text.to_string())),
    }
}

fn set_path(tree: &mut Value, key: &str, value: &str) -> std::result::Result<(), String> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| format!("unknown key `{key}`"))?;
    }
    *node = match node {
        Value::Array(_) => Value::Array(
            value
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.into()))
                .collect(),
        ),
        Value::String(_) => Value::String(value.to_string()),
        _ => scalar(value),
    };
    Ok(())
}

fn flatten(v: &Value, prefix: &str, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(v, &key, out);
            }
        }
        Value::Null => out.push_str(&format!("{prefix} = none\n")),
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
        Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|x| x.as_str().map_or_else(|| x.to_string(), str::to_string))
                .collect();
            out.push_str(&format!("{prefix} = {}\n", parts.join(",")));
        }
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::positional::RopeMode;

    #[test]
    fn keys_override_defaults() {
        let cfg = TrainConfig::default()
            .apply("steps = 7 # short\nmodel.rope_mode = ssm\nmodel.length_base = 64\ntask.n_pairs = 2\nadam.beta2 = 0.95\n")
            .unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.model.rope_mode, RopeMode::Ssm);
        assert_eq!(cfg.model.length_base, Some(64));
        assert_eq!(cfg.task.n_pairs, 2);
        assert_eq!(cfg.adam.beta2, 0.95);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let d = TrainConfig::default();
        assert!(matches!(d.apply("model.nope = 1"), Err(Error::Config(_))));
        assert!(matches!(d.apply("steps = many"), Err(Error::Config(_))));
        assert!(matches!(
            d.apply("model.layout = SQ"),
            Err(Error::Config(_))
        ));
        assert!(matches!(d.apply("just words"), Err(Error::Config(_))));
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = TrainConfig {
            ablate_layouts: vec!["SMAM".into(), "SMSM".into()],
            ..TrainConfig::default()
        };
        cfg.model.tail_ffn_hidden = Some(96);
        let back = TrainConfig::default()
            .apply(&cfg.render().unwrap())
            .unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn warmup_is_a_rounded_fraction() {
        let cfg = TrainConfig {
            steps: 35,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 4);
        let cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 1);
    }
}
