//! Nested key-value configuration file (TOML) with flag > config > default
//! precedence. Each section mirrors one stage's config struct; absent keys
//! fall back to the stage defaults.

use anyhow::{Context, Result};
use latentdd_core::codec::CodecTrainConfig;
use latentdd_core::distill::{DCConfig, DMConfig, ExpertTrainConfig, MTTConfig};
use latentdd_core::eval::EvalProtocol;
use latentdd_core::toyset::ToyConfig;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub toy: Option<ToyConfig>,
    #[serde(default)]
    pub codec: Option<CodecTrainConfig>,
    #[serde(default)]
    pub dc: Option<DCConfig>,
    #[serde(default)]
    pub dm: Option<DMConfig>,
    #[serde(default)]
    pub mtt: Option<MTTConfig>,
    #[serde(default)]
    pub expert: Option<ExpertTrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalProtocol>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// Apply an optional flag over a config field (flag wins).
pub fn override_opt<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_over_config_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[dc]\niterations = 7\neta_base = 0.25\n").unwrap();
        let file = FileConfig::load(Some(&path)).unwrap();
        let mut dc = file.dc.clone().unwrap_or_default();
        // Config overrides the default...
        assert_eq!(dc.iterations, 7);
        assert_eq!(dc.eta_base, 0.25);
        // ...and untouched keys keep their defaults.
        assert_eq!(dc.outer_loops, DCConfig::default().outer_loops);
        // Flags override the config.
        override_opt(&mut dc.iterations, Some(3));
        override_opt(&mut dc.eta_base, None);
        assert_eq!(dc.iterations, 3);
        assert_eq!(dc.eta_base, 0.25);
    }

    #[test]
    fn unknown_sections_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[nonsense]\nx = 1\n").unwrap();
        assert!(FileConfig::load(Some(&path)).is_err());
    }
}
