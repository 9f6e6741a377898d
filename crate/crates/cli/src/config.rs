//! Config loading, flag overrides and artifact headers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use covrecon::planner::SpectralProfile;
use covrecon::StudyConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Overrides the output directory when `--out` is absent.
pub const OUT_ENV: &str = "COVRECON_OUT";

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let at = e
            .span()
            .map(|s| {
                let line = text[..s.start].matches('\n').count() + 1;
                format!(" (line {line})")
            })
            .unwrap_or_default();
        CliError::Config(format!("{}: {}{at}", path.display(), e.message().trim()))
    })
}

pub fn load_study(path: &Path, seed: Option<u64>, workers: Option<usize>) -> Result<StudyConfig, CliError> {
    let mut cfg: StudyConfig = parse_toml(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Accuracy target and covariance profile for `plan`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub regime: Option<u8>,
    #[serde(default = "default_profile")]
    pub profile: SpectralProfile,
}

fn default_profile() -> SpectralProfile {
    SpectralProfile::brownian(1)
}

pub fn load_plan(path: Option<&Path>) -> Result<PlanConfig, CliError> {
    match path {
        Some(p) => parse_toml(p),
        None => Ok(PlanConfig { epsilon: None, regime: None, profile: default_profile() }),
    }
}

/// `--out`, then the environment, then the config, then `out`.
pub fn output_dir(flag: Option<&Path>, config: Option<&str>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config.map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

/// The config as embedded in artifacts: output location and thread count
/// do not affect results and are left out.
pub fn embedded_json<T: Serialize>(cfg: &T) -> Result<String, CliError> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("out");
        obj.remove("workers");
    }
    Ok(serde_json::to_string(&v)?)
}

/// `# version=` and `# config=` lines that open every text artifact.
pub fn header(config_json: &str) -> String {
    format!("# version={}\n# config={config_json}\n", covrecon::VERSION)
}

/// Writes through a temporary file so an interrupted run never leaves a
/// truncated artifact behind.
pub fn write_atomic(path: &Path, body: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(body)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
