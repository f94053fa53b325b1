use std::path::{Path, PathBuf};

use rsak_core::data::Scenario;
use rsak_core::training::{TrainConfig, TrainMode};
use rsak_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Dataset files. Relative paths are resolved against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Everything one training run needs, read from a TOML file:
///
/// ```toml
/// mode = "rsadapter"
/// scenario = "standard"
///
/// [model]
/// d = 64
/// # ...every ModelConfig field
///
/// [train]
/// epochs = 6
/// # ...every TrainConfig field
///
/// [data]
/// train = "train.jsonl"
/// test = "test.jsonl"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TrainMode,
    /// `standard`, or `random_image_train` to train on swapped images.
    pub scenario: Scenario,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves the dataset paths relative to it.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.train = base.join(&cfg.data.train);
        cfg.data.test = base.join(&cfg.data.test);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn check(&self) -> CliResult<()> {
        if !matches!(self.scenario, Scenario::Standard | Scenario::RandomImageTrain) {
            return Err(CliError::Config(format!(
                "training scenario must be standard or random_image_train, not {}",
                self.scenario.name()
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// The configuration the model is actually built with.
    pub fn model_config(&self) -> ModelConfig {
        self.mode.configure(&self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunConfig {
        RunConfig {
            mode: TrainMode::Rsadapter,
            scenario: Scenario::Standard,
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            data: DataPaths {
                train: "train.jsonl".into(),
                test: "test.jsonl".into(),
            },
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = sample();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn missing_key_is_named() {
        let text = sample().to_toml().replace("batch_size = 64\n", "");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = sample().to_toml().replace("epochs = 10", "epochs = 10\nepocs = 3");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("epocs"), "{err}");
    }

    #[test]
    fn evaluation_only_scenarios_are_rejected() {
        let text = sample()
            .to_toml()
            .replace("scenario = \"standard\"", "scenario = \"question_only\"");
        assert!(RunConfig::parse(&text).is_err());
    }
}
