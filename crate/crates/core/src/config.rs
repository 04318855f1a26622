//! Training configuration: fail-closed JSON parsing with defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::ConsistencyVariant;
use crate::optim::AdamW;
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// The current student, under stop-gradient.
    Copy,
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_u: f64,
    pub variant: ConsistencyVariant,
    pub teacher: TeacherKind,
    pub ema_decay: f64,
    pub synth: SynthConfig,
    pub optimizer: AdamW,
    pub warmup_epochs: u64,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub labeled_batch: usize,
    pub synthetic_batch: usize,
    pub patience: u64,
    pub val_fraction: f64,
    /// Weight positives by `ln(P_total / P_pos)`; plain BCE otherwise.
    pub class_weighting: bool,
    pub threshold: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_u: 0.01,
            variant: ConsistencyVariant::Mse,
            teacher: TeacherKind::Ema,
            ema_decay: 0.99,
            synth: SynthConfig::default(),
            optimizer: AdamW::default(),
            warmup_epochs: 10,
            epochs: 60,
            steps_per_epoch: 10,
            labeled_batch: 4,
            synthetic_batch: 4,
            patience: 10,
            val_fraction: 0.1,
            class_weighting: true,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Labeled-only training: no synthetic term.
    pub fn supervised(mut self) -> Self {
        self.lambda_u = 0.0;
        self.variant = ConsistencyVariant::None;
        self
    }

    pub fn uses_synthesis(&self) -> bool {
        self.lambda_u > 0.0 && self.synthetic_batch > 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u.is_finite() && self.lambda_u >= 0.0) {
            return Err(Error::invalid("lambda_u", format!("must be >= 0, got {}", self.lambda_u)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay", "must lie in [0, 1]"));
        }
        self.synth.validate().map_err(|e| prefix_key("synth", e))?;
        self.optimizer.validate()?;
        if self.warmup_epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::invalid("warmup_epochs", "need 0 < warmup_epochs < epochs"));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::invalid("steps_per_epoch", "must be at least 1"));
        }
        if self.labeled_batch == 0 {
            return Err(Error::invalid("labeled_batch", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction", "must lie in [0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn prefix_key(prefix: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument { name, detail } => Error::InvalidArgument { name: format!("{prefix}.{name}"), detail },
        other => other,
    }
}

/// Parses a config, naming the offending key on unknown fields, type errors
/// and invariant violations.
pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("`{path}`: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Fully resolved config, pretty-printed.
pub fn echo_config(cfg: &TrainConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = parse_config_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.lambda_u, 0.01);
    }

    #[test]
    fn negative_lambda_names_key() {
        let err = parse_config_str(r#"{"lambda_u": -1}"#).unwrap_err();
        assert!(err.to_string().contains("lambda_u"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_key() {
        let err = parse_config_str(r#"{"lamda_u": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("lamda_u"), "{err}");
        let err = parse_config_str(r#"{"synth": {"mask_blur": "yes"}}"#).unwrap_err();
        assert!(err.to_string().contains("synth.mask_blur"), "{err}");
        let err = parse_config_str(r#"{"synth": {"top_k": 0}}"#).unwrap_err();
        assert!(err.to_string().contains("synth.top_k"), "{err}");
        let err = parse_config_str(r#"{"variant": "l1"}"#).unwrap_err();
        assert!(err.to_string().contains("variant"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.variant = ConsistencyVariant::WholeImage;
        cfg.teacher = TeacherKind::Copy;
        cfg.synth.color_matching = false;
        cfg.lambda_u = 0.03;
        let text = echo_config(&cfg).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), cfg);
    }
}
