//! The experiment document: one JSON file describing codec, prompts,
//! dataset, training and distortions, all driven by a single seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use safemark_core::codec::WatermarkKey;
use safemark_core::distort::{default_grid, DistortionSpec};
use safemark_core::editor::{EditorGeometry, PromptTable};
use safemark_core::synth::{DatasetSpec, SynthKind};
use safemark_core::trainer::{MessageMode, Optimizer, Schedule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSettings {
    pub b_bits: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CodecSettings {
    fn default() -> Self {
        Self {
            b_bits: WatermarkKey::DEFAULT_BITS,
            alpha: WatermarkKey::DEFAULT_ALPHA,
            beta: WatermarkKey::DEFAULT_BETA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorSettings {
    pub kernel: usize,
    pub residual: usize,
}

impl Default for EditorSettings {
    fn default() -> Self {
        let g = EditorGeometry::new(3);
        Self {
            kernel: g.kernel,
            residual: g.residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kinds: Vec<SynthKind>,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            count: d.count,
            height: d.height,
            width: d.width,
            channels: d.channels,
            kinds: d.kinds,
        }
    }
}

/// [`TrainConfig`] without its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub tau: f64,
    pub lambda_sem: f64,
    pub lambda_wm: f64,
    pub eta: f64,
    pub schedule: Schedule,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: Optimizer,
    pub messages: MessageMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            tau: t.tau,
            lambda_sem: t.lambda_sem,
            lambda_wm: t.lambda_wm,
            eta: t.eta,
            schedule: t.schedule,
            steps: t.steps,
            batch: t.batch,
            optimizer: t.optimizer,
            messages: t.messages,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the key patterns, dataset, reference editor, minibatches and
    /// evaluation messages (each through its own stream).
    pub seed: u64,
    pub codec: CodecSettings,
    pub prompts: PromptTable,
    pub editor: EditorSettings,
    pub dataset: DatasetSettings,
    pub train: TrainSettings,
    pub distortions: Vec<DistortionSpec>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            codec: CodecSettings::default(),
            prompts: PromptTable::desk_default(),
            editor: EditorSettings::default(),
            dataset: DatasetSettings::default(),
            train: TrainSettings::default(),
            distortions: default_grid(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn key(&self) -> WatermarkKey {
        WatermarkKey {
            seed: self.seed,
            b_bits: self.codec.b_bits,
            alpha: self.codec.alpha,
            beta: self.codec.beta,
        }
    }

    pub fn geometry(&self) -> EditorGeometry {
        EditorGeometry {
            channels: self.dataset.channels,
            kernel: self.editor.kernel,
            residual: self.editor.residual,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.dataset.count,
            height: self.dataset.height,
            width: self.dataset.width,
            channels: self.dataset.channels,
            kinds: self.dataset.kinds.clone(),
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            tau: t.tau,
            lambda_sem: t.lambda_sem,
            lambda_wm: t.lambda_wm,
            eta: t.eta,
            schedule: t.schedule.clone(),
            steps: t.steps,
            batch: t.batch,
            seed: self.seed,
            optimizer: t.optimizer.clone(),
            messages: t.messages,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.key().validate()?;
        self.prompts.validate()?;
        self.train_config().validate()?;
        for d in &self.distortions {
            d.validate()?;
        }
        let ds = &self.dataset;
        if ds.count == 0 || ds.height == 0 || ds.width == 0 {
            bail!("dataset must have at least one non-empty image");
        }
        if !matches!(ds.channels, 1 | 3) {
            bail!("dataset channels must be 1 or 3, got {}", ds.channels);
        }
        if ds.kinds.is_empty() {
            bail!("dataset needs at least one image kind");
        }
        if self.editor.kernel.is_multiple_of(2) || self.editor.residual == 0 {
            bail!("editor kernel must be odd and the residual grid non-empty");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"taus": 1}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"codec": {"seed": 1}}"#).is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let cfg = ExperimentConfig {
            seed: 42,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.key().seed, 42);
        assert_eq!(cfg.dataset_spec().seed, 42);
        assert_eq!(cfg.train_config().seed, 42);
        assert_ne!(cfg.hash().unwrap(), ExperimentConfig::default().hash().unwrap());
    }

    #[test]
    fn invalid_sections_fail_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.tau = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.channels = 2;
        assert!(cfg.validate().is_err());
    }
}
