//! Service configuration: scoring weights, routing threshold, feedback
//! learning rate, and log durability. Everything has a sensible default;
//! an absent config file means "all defaults".

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resolver::ResolverConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub resolver: ResolverConfig,
    pub router: RouterConfig,
    pub feedback: FeedbackConfig,
    pub tracker: TrackerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    /// Requests whose best combined score falls below this yield
    /// `no_matching_tool` instead of a plan.
    pub no_match_threshold: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            no_match_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    /// EMA learning rate in (0,1].
    pub alpha: f64,
    /// When false, ratings are accepted but ignored and routing scores
    /// every tool with the default preference weight.
    pub enabled: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            alpha: 0.2,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// fsync the audit log on every append (durable but slower).
    pub fsync: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { fsync: true }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl Config {
    /// Read and validate a JSON config file.
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let body = std::fs::read_to_string(path)?;
        let config: Config = serde_json::from_str(&body)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resolver.validate().map_err(ConfigError::Invalid)?;
        let threshold = self.router.no_match_threshold;
        if !(0.0..=1.0).contains(&threshold) || !threshold.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "router.no_match_threshold must lie in [0,1], got {threshold}"
            )));
        }
        let alpha = self.feedback.alpha;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "feedback.alpha must lie in (0,1], got {alpha}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_documented_values() {
        let config = Config::default();
        assert_eq!(config.resolver.w_lex, 0.7);
        assert_eq!(config.resolver.w_pref, 0.3);
        assert_eq!(config.router.no_match_threshold, 0.1);
        assert_eq!(config.feedback.alpha, 0.2);
        assert!(config.feedback.enabled);
        assert!(config.tracker.fsync);
        assert!(config.validate().is_ok());
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"router": {"no_match_threshold": 0.25}}"#).unwrap();
        let config = Config::load(&path).unwrap();
        assert_eq!(config.router.no_match_threshold, 0.25);
        assert_eq!(config.resolver.w_lex, 0.7);
    }

    #[test]
    fn bad_values_are_rejected() {
        let cases = [
            r#"{"resolver": {"w_lex": 0.9, "w_pref": 0.3}}"#,
            r#"{"router": {"no_match_threshold": 1.5}}"#,
            r#"{"feedback": {"alpha": 0.0}}"#,
            r#"{"feedback": {"alpha": 1.2}}"#,
        ];
        let dir = tempfile::tempdir().unwrap();
        for (i, body) in cases.iter().enumerate() {
            let path = dir.path().join(format!("config{i}.json"));
            std::fs::write(&path, body).unwrap();
            assert!(
                matches!(Config::load(&path), Err(ConfigError::Invalid(_))),
                "case {i} should be invalid"
            );
        }
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"resolevr": {}}"#).unwrap();
        assert!(matches!(Config::load(&path), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            Config::load(Path::new("/definitely/missing/config.json")),
            Err(ConfigError::Io(_))
        ));
    }

    #[test]
    fn round_trips_through_json() {
        let config = Config::default();
        let json = serde_json::to_string(&config).unwrap();
        let back: Config = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }
}
