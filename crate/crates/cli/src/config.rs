//! Configuration file layout and override plumbing.

use std::path::{Path, PathBuf};

use gmbua::config::UnmixConfig;
use gmbua::evalkit::{BenchConfig, GridConfig, Method, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable overriding the master seed of every command.
pub const SEED_ENV: &str = "UNMIX_SEED";

/// Top-level config file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CliConfig {
    pub synth: SynthSpec,
    pub unmix: UnmixConfig,
    pub bench: BenchConfig,
    pub grid: GridConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalSection {
    pub methods: Vec<Method>,
    /// Grid-search each method's parameters before the Monte-Carlo runs.
    pub tune: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            methods: vec![Method::Fclsu, Method::Fractional, Method::Gmbua],
            tune: false,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        let path = dir.join("resolved-config.toml");
        std::fs::write(&path, text).map_err(|e| CliError::Io(path.clone(), e))?;
        Ok(path)
    }
}

/// Seed from `UNMIX_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not a 64-bit unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{SEED_ENV}: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse() {
        let cfg: CliConfig = toml::from_str(
            "[unmix]\nlambda = 0.5\nruns = 3\n[unmix.penalty]\nkind = \"group\"\n[synth]\nsnr-db = inf\n[eval]\nmethods = [\"fclsu\", \"gmbua\"]",
        )
        .unwrap();
        assert_eq!(cfg.unmix.lambda, 0.5);
        assert_eq!(cfg.unmix.runs, 3);
        assert_eq!(cfg.synth.snr_db, f64::INFINITY);
        assert_eq!(cfg.eval.methods, vec![Method::Fclsu, Method::Gmbua]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<CliConfig>("[unmix]\nlambada = 1.0").is_err());
        assert!(toml::from_str::<CliConfig>("[solver]\nrho = 1.0").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = CliConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: CliConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
