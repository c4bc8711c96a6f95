use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use meant::dataset::{BuildConfig, Manifest};
use meant::model::ModelConfig;
use meant::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub prices: Option<PathBuf>,
    pub tweets: Option<PathBuf>,
    /// Built dataset directory.
    pub dataset: Option<PathBuf>,
    pub build: BuildConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.data.build.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Shape agreement between a model and a stored dataset.
pub fn check_compat(model: &ModelConfig, m: &Manifest) -> anyhow::Result<()> {
    let mut problems = Vec::new();
    if model.lag != m.lag {
        problems.push(format!("model lag {} but dataset lag {}", model.lag, m.lag));
    }
    if model.seq_len != m.seq_len {
        problems.push(format!(
            "model seq_len {} but dataset seq_len {}",
            model.seq_len, m.seq_len
        ));
    }
    if model.vocab_size < m.vocab_size {
        problems.push(format!(
            "model vocab_size {} smaller than dataset vocabulary {}",
            model.vocab_size, m.vocab_size
        ));
    }
    if model.fusion.modalities.image && model.image != m.image_shape {
        problems.push(format!(
            "model image {:?} but dataset images {:?}",
            model.image, m.image_shape
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("config does not fit the dataset: {}", problems.join("; "))
    }
}

/// Pretty JSON with sorted object keys and a trailing newline.
pub fn sorted_json(value: &impl Serialize) -> anyhow::Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = sorted_json(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"fusion": {"pool": "mean"}}}"#).is_err());
    }
}
