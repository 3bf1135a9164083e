use std::path::{Path, PathBuf};

use cbt_core::{Error, ModelConfig};
use serde::{Deserialize, Serialize};

/// Alphas swept when none are given.
pub const DEFAULT_ALPHAS: [f64; 5] = [0.7, 0.8, 0.9, 0.95, 0.99];
pub const DEFAULT_BETA: f64 = 0.998;
pub const DEFAULT_IGNORE_LABEL: u8 = 255;

/// Synthetic dataset shape for `generate-fixtures`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataShape {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataShape {
    fn default() -> Self {
        Self {
            num_images: 16,
            height: 32,
            width: 32,
        }
    }
}

/// Parameters of one run. Each field can come from the JSON file given by
/// `--config` or from a flag; flags win. The resolved value is embedded in
/// every report the run writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    /// `false` disables the ignore label entirely.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore_label: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Thread count; 0 lets rayon pick. Never embedded in reports since it
    /// cannot change their content.
    #[serde(skip_serializing)]
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_shape: Option<DataShape>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    /// Fields set in `flags` replace those in `self`.
    pub fn overlay(self, flags: RunConfig) -> RunConfig {
        RunConfig {
            command: flags.command.or(self.command),
            model: flags.model.or(self.model),
            dataset: flags.dataset.or(self.dataset),
            alpha: flags.alpha.or(self.alpha),
            alphas: flags.alphas.or(self.alphas),
            beta: flags.beta.or(self.beta),
            policy: flags.policy.or(self.policy),
            ignore: flags.ignore.or(self.ignore),
            ignore_label: flags.ignore_label.or(self.ignore_label),
            seed: flags.seed.or(self.seed),
            jobs: flags.jobs.or(self.jobs),
            out: flags.out.or(self.out),
            model_config: flags.model_config.or(self.model_config),
            data_shape: flags.data_shape.or(self.data_shape),
        }
    }

    pub fn model_path(&self) -> anyhow::Result<&Path> {
        self.model.as_deref().ok_or_else(|| missing("model"))
    }

    pub fn dataset_path(&self) -> anyhow::Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| missing("dataset"))
    }

    pub fn policy_spec(&self) -> anyhow::Result<&str> {
        self.policy.as_deref().ok_or_else(|| missing("policy"))
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(DEFAULT_BETA)
    }

    pub fn ignore_label(&self) -> Option<u8> {
        match self.ignore {
            Some(false) => None,
            _ => Some(self.ignore_label.unwrap_or(DEFAULT_IGNORE_LABEL)),
        }
    }

    pub fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    /// Fills defaults in so the embedded copy records what actually ran.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        if matches!(c.command.as_deref(), Some("calibrate" | "sweep")) {
            c.beta.get_or_insert(DEFAULT_BETA);
        }
        let label = self.ignore_label();
        c.ignore = Some(label.is_some());
        c.ignore_label = label;
        c
    }
}

fn missing(flag: &str) -> anyhow::Error {
    Error::Config(format!("--{flag} is required (flag or config file)")).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: RunConfig =
            serde_json::from_str(r#"{"alpha": 0.8, "beta": 0.99, "seed": 3}"#).unwrap();
        let flags = RunConfig {
            alpha: Some(0.9),
            ..Default::default()
        };
        let c = file.overlay(flags);
        assert_eq!((c.alpha, c.beta, c.seed), (Some(0.9), Some(0.99), Some(3)));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"alhpa": 0.8}"#).is_err());
    }

    #[test]
    fn ignore_label_resolution() {
        assert_eq!(RunConfig::default().ignore_label(), Some(255));
        let off = RunConfig {
            command: Some("calibrate".into()),
            ignore: Some(false),
            ignore_label: Some(7),
            ..Default::default()
        };
        assert_eq!(off.ignore_label(), None);
        let r = off.resolved();
        assert_eq!(
            (r.ignore, r.ignore_label, r.beta),
            (Some(false), None, Some(0.998))
        );
    }

    #[test]
    fn jobs_not_embedded() {
        let c = RunConfig {
            jobs: Some(4),
            seed: Some(1),
            ..Default::default()
        };
        assert_eq!(serde_json::to_string(&c).unwrap(), r#"{"seed":1}"#);
    }
}
