//! Run configuration: JSON file form, defaults and validation.

use std::path::{Path, PathBuf};

use geomatch::cfi::AttentionKind;
use geomatch::dataset::GenConfig;
use geomatch::metrics::RansacConfig;
use geomatch::pipeline::MatchConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Overrides every output directory when set.
pub const OUT_ENV: &str = "GEOMATCH_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// Weight container; when absent the weights are initialised from `seed`.
    pub weights: Option<PathBuf>,
    pub seed: Option<u64>,
    pub attention: AttentionKind,
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub generate: GenConfig,
    pub out: Option<PathBuf>,
    /// 0 means one worker per core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            weights: None,
            seed: None,
            attention: AttentionKind::Linear,
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            generate: GenConfig::default(),
            out: None,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg = |e: geomatch::Error| CliError::Config(e.to_string());
        self.matching.validate().map_err(cfg)?;
        self.ransac.validate().map_err(cfg)?;
        self.generate.validate().map_err(cfg)
    }

    /// Output directory after the environment override.
    pub fn output_dir(&self) -> CliResult<PathBuf> {
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            return Ok(PathBuf::from(dir));
        }
        self.out.clone().ok_or_else(|| CliError::Config("no output directory (--out or GEOMATCH_OUT)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_losslessly() {
        let mut cfg = RunConfig { seed: Some(7), ..Default::default() };
        cfg.matching.temperature = 0.123456789;
        cfg.matching.refine_config.temperature = Some(0.04);
        cfg.ransac.epipolar_threshold = 2.5e-4;
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "matching": {"match_threshold": 0.2}}"#).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.matching.match_threshold, 0.2);
        assert_eq!(cfg.matching.temperature, MatchConfig::default().temperature);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).is_err());
    }

    #[test]
    fn validation_catches_ranges() {
        let mut cfg = RunConfig::default();
        cfg.matching.covisible_threshold = 2.0;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
