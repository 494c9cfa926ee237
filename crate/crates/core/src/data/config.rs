use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::SyntheticSpec;
use crate::detection::{DecodeConfig, LossConfig};
use crate::eval::{validate_thresholds, SoftNmsConfig, THUMOS_THRESHOLDS};
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub decode: DecodeConfig,
    pub nms: SoftNmsConfig,
    /// Evaluate every this many epochs (and after the last one).
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: THUMOS_THRESHOLDS.to_vec(),
            decode: DecodeConfig::default(),
            nms: SoftNmsConfig::default(),
            every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory for training; synthetic data when unset.
    pub train_dir: Option<String>,
    /// Dataset directory for validation; the synthetic held-out split when
    /// unset.
    pub val_dir: Option<String>,
    pub synthetic: SyntheticSpec,
    /// Videos generated in addition to `synthetic.num_videos` for validation.
    pub synthetic_holdout: usize,
}

/// Everything a run needs. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            epochs: 43,
            warmup_epochs: 20,
            batch_size: 2,
            seed: 0,
            eval: EvalConfig::default(),
            data: DataConfig {
                synthetic_holdout: 8,
                ..DataConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate(self.model.pyramid_levels)?;
        self.eval.nms.validate()?;
        validate_thresholds(&self.eval.thresholds)?;
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval.every == 0 {
            return Err(Error::Config("eval.every must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) || !(o.grad_clip >= 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.data.train_dir.is_none() {
            self.data.synthetic.validate()?;
            if self.data.synthetic.input_dim != self.model.input_dim {
                return Err(Error::Config(format!(
                    "synthetic input_dim {} differs from model input_dim {}",
                    self.data.synthetic.input_dim, self.model.input_dim
                )));
            }
            if self.data.synthetic.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "synthetic num_classes {} differs from model num_classes {}",
                    self.data.synthetic.num_classes, self.model.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Parses JSON (starting with `{`) or `key = value` lines with dotted
    /// keys; `#` starts a comment. Not validated.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")));
        }
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets a dotted key such as `model.embed_dim`. The value is read as
    /// JSON, falling back to a plain string. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.optim.lr, 1e-4);
        assert_eq!(cfg.model.pyramid_levels, 6);
        assert_eq!(cfg.eval.thresholds, vec![0.3, 0.4, 0.5, 0.6, 0.7]);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["model.embed_dim=64", "model.module_toggle=cam_only", "eval.thresholds=[0.5]"])
            .unwrap();
        assert_eq!(cfg.model.embed_dim, 64);
        assert_eq!(cfg.model.module_toggle, crate::model::ModuleToggle::CamOnly);
        assert_eq!(cfg.eval.thresholds, vec![0.5]);
        cfg.set("data.train_dir", "/tmp/x").unwrap();
        assert_eq!(cfg.data.train_dir.as_deref(), Some("/tmp/x"));
    }

    #[test]
    fn unknown_or_mistyped_keys_fail() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("model.embed_dims", "3").unwrap_err().is_config());
        assert!(cfg.set("nope", "3").unwrap_err().is_config());
        assert!(cfg.set("model.embed_dim", "big").unwrap_err().is_config());
        assert!(RunConfig::parse(r#"{"epoch": 3}"#).unwrap_err().is_config());
    }

    #[test]
    fn key_value_and_json_agree() {
        let kv = RunConfig::parse("epochs = 5 # short\nwarmup_epochs=1\n\nmodel.num_classes = 3\n").unwrap();
        let json = RunConfig::parse(r#"{"epochs":5,"warmup_epochs":1,"model":{"num_classes":3}}"#).unwrap();
        assert_eq!(kv, json);
        let back = RunConfig::parse(&kv.to_json().unwrap()).unwrap();
        assert_eq!(back, kv);
    }

    #[test]
    fn warmup_must_be_shorter_than_training() {
        let mut cfg = RunConfig::default();
        cfg.data.train_dir = Some("x".into());
        cfg.epochs = 5;
        cfg.warmup_epochs = 5;
        assert!(cfg.validate().unwrap_err().is_config());
        cfg.warmup_epochs = 4;
        cfg.validate().unwrap();
    }
}
