//! Run configuration document shared by the command-line tools.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::discrimination::DiscriminationConfig;
use crate::error::{Error, Result};
use crate::evaluation::ChallengeConfig;
use crate::model::ModelConfig;
use crate::synth::SyntheticConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub discrimination: DiscriminationConfig,
    pub challenges: ChallengeConfig,
    /// Seed for model initialization, shuffling and challenge generation.
    pub seed: u64,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.model.validate()?;
        self.challenges.noise.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Applies `path.to.field=value`. The value is read as JSON when it
    /// parses, otherwise as a bare string. Unknown paths are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::Validation(format!(
                "override {assignment:?} is not of the form key=value"
            ))
        })?;
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| Error::Validation(format!("unknown config key {path:?}")))?;
        }
        *slot = value;
        let updated: RunConfig = serde_json::from_value(doc)
            .map_err(|e| Error::Validation(format!("override {assignment:?}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        assignments
            .iter()
            .try_for_each(|a| self.apply_override(a.as_ref()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonVariant;

    #[test]
    fn json_round_trip() {
        let config = RunConfig::desk();
        assert_eq!(
            RunConfig::from_json(&config.to_json().unwrap()).unwrap(),
            config
        );
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"hiden_size": 3}}"#).is_err());
        let mut config = RunConfig::default();
        assert!(config.apply_override("model.hiden_size=3").is_err());
        assert!(config.apply_override("model.hidden_size").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut config = RunConfig::default();
        config
            .apply_overrides(&[
                "model.hidden_size=32",
                "model.skeleton_variant=V",
                "synthetic.split_sizes.train=10",
                "seed=9",
            ])
            .unwrap();
        assert_eq!(config.model.hidden_size, 32);
        assert_eq!(config.model.skeleton_variant, SkeletonVariant::V);
        assert_eq!(config.synthetic.split_sizes.train, 10);
        assert_eq!(config.seed, 9);
        config
            .apply_override("synthetic.perturbation=null")
            .unwrap();
        assert_eq!(config.synthetic.perturbation, None);
    }

    #[test]
    fn invalid_values_leave_config_untouched() {
        let mut config = RunConfig::default();
        assert!(config.apply_override("model.dropout=1.5").is_err());
        assert!(config.apply_override("model.hidden_size=-1").is_err());
        assert_eq!(config, RunConfig::default());
    }
}
