//! Pipeline configuration, loaded from a TOML file.
//!
//! ```toml
//! [pipeline]
//! backend = "rulebook"      # or "llm"
//! stages = "1,2,3,4,5"
//!
//! [selection]
//! flicker_max_duration = 0.3
//! flicker_weight = 0.5
//!
//! [bass]
//! max_no_chord_fraction = 0.5
//! min_in_key_fraction = 0.7
//!
//! [anomaly]
//! max_fill_duration = 1.0
//!
//! [beat_align]
//! threshold = 0.125
//! max_violation_fraction = 0.5
//!
//! [llm]
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! model = "gpt-4o"
//! temperature = 0.0
//! retry_count = 2
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::StageId;
use crate::beat_align::SnapConfig;
use crate::gateway::GatewayConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Rulebook,
    Llm,
}

impl FromStr for Backend {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "rulebook" => Ok(Backend::Rulebook),
            "llm" => Ok(Backend::Llm),
            other => Err(ConfigError::Invalid(format!("unknown backend {other:?}"))),
        }
    }
}

/// Enabled stage set, written as `"1,2,3,4,5"` or `"1-5"` or `"1,3-5"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSet(BTreeSet<StageId>);

impl StageSet {
    pub fn all() -> Self {
        StageSet(StageId::ALL.into_iter().collect())
    }

    pub fn none() -> Self {
        StageSet(BTreeSet::new())
    }

    pub fn contains(&self, stage: StageId) -> bool {
        self.0.contains(&stage)
    }
}

impl FromStr for StageSet {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Invalid(format!("bad stage list {s:?}"));
        let mut set = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (lo, hi) = match part.split_once('-') {
                Some((a, b)) => (a.trim().parse::<u8>().map_err(|_| bad())?, b.trim().parse::<u8>().map_err(|_| bad())?),
                None => {
                    let n = part.parse::<u8>().map_err(|_| bad())?;
                    (n, n)
                }
            };
            for n in lo..=hi {
                set.insert(StageId::from_number(n).ok_or_else(bad)?);
            }
        }
        Ok(StageSet(set))
    }
}

impl fmt::Display for StageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| s.number().to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for StageSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StageSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    pub backend: Backend,
    pub stages: StageSet,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            backend: Backend::Rulebook,
            stages: StageSet::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSection {
    /// Segments shorter than this count as flicker.
    pub flicker_max_duration: f64,
    pub flicker_weight: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            flicker_max_duration: 0.3,
            flicker_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BassSection {
    pub max_no_chord_fraction: f64,
    pub min_in_key_fraction: f64,
}

impl Default for BassSection {
    fn default() -> Self {
        BassSection {
            max_no_chord_fraction: 0.5,
            min_in_key_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalySection {
    /// Longest `N` run that may be filled from identical neighbors.
    pub max_fill_duration: f64,
}

impl Default for AnomalySection {
    fn default() -> Self {
        AnomalySection { max_fill_duration: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSection {
    #[serde(flatten)]
    pub gateway: GatewayConfig,
    /// Extra attempts when a reply fails validation.
    pub retry_count: u32,
    /// Directory overriding the built-in prompt templates.
    pub prompt_dir: Option<PathBuf>,
}

impl Default for LlmSection {
    fn default() -> Self {
        LlmSection {
            gateway: GatewayConfig::default(),
            retry_count: 2,
            prompt_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub pipeline: PipelineSection,
    pub selection: SelectionSection,
    pub bass: BassSection,
    pub anomaly: AnomalySection,
    pub beat_align: SnapConfig,
    pub llm: LlmSection,
}

impl RefinementConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RefinementConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = RefinementConfig::from_toml(&text)?;
        if let (Some(dir), Some(parent)) = (config.llm.prompt_dir.as_mut(), path.parent()) {
            if dir.is_relative() {
                *dir = parent.join(&*dir);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("selection.flicker_max_duration", self.selection.flicker_max_duration),
            ("anomaly.max_fill_duration", self.anomaly.max_fill_duration),
            ("beat_align.threshold", self.beat_align.threshold),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        let fractions = [
            ("bass.max_no_chord_fraction", self.bass.max_no_chord_fraction),
            ("bass.min_in_key_fraction", self.bass.min_in_key_fraction),
            ("beat_align.max_violation_fraction", self.beat_align.max_violation_fraction),
        ];
        for (name, value) in fractions {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConfigError::Invalid(format!("{name} must be within [0, 1]")));
            }
        }
        if self.selection.flicker_weight < 0.0 {
            return Err(ConfigError::Invalid("selection.flicker_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RefinementConfig::default();
        let back = RefinementConfig::from_toml(&config.to_toml()).unwrap();
        assert_eq!(back, config);
        assert_eq!(config.beat_align.threshold, 0.125);
        assert_eq!(config.llm.gateway.max_attempts, 5);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let config = RefinementConfig::from_toml(
            "[pipeline]\nbackend = \"llm\"\nstages = \"1,3-5\"\n[llm]\nmodel = \"local-model\"\nretry_count = 0\n",
        )
        .unwrap();
        assert_eq!(config.pipeline.backend, Backend::Llm);
        assert!(!config.pipeline.stages.contains(StageId::BassCorrection));
        assert!(config.pipeline.stages.contains(StageId::AnomalyDetection));
        assert_eq!(config.llm.gateway.model, "local-model");
        assert_eq!(config.llm.retry_count, 0);
        assert_eq!(config.anomaly.max_fill_duration, 1.0);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RefinementConfig::from_toml("[beat_align]\nthreshold = 0.0\n").is_err());
        assert!(RefinementConfig::from_toml("[bass]\nmin_in_key_fraction = 1.5\n").is_err());
        assert!(RefinementConfig::from_toml("[pipeline]\nstages = \"7\"\n").is_err());
        assert!(RefinementConfig::from_toml("[pipeline]\nbackend = \"oracle\"\n").is_err());
    }

    #[test]
    fn stage_lists() {
        assert_eq!("1-5".parse::<StageSet>().unwrap(), StageSet::all());
        assert_eq!("".parse::<StageSet>().unwrap(), StageSet::none());
        assert_eq!("2,4".parse::<StageSet>().unwrap().to_string(), "2,4");
    }
}
