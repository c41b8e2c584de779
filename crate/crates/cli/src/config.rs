//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qadp::hydrology::ClusterMethod;
use qadp::vfit::QuadraticValueFunction;

use crate::error::CliError;

/// Initial storage levels for reservoir 0, the others held at fixed
/// fractions of capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub levels: Vec<f64>,
    #[serde(default)]
    pub fractions: Vec<f64>,
}

/// Paths are relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: PathBuf,
    #[serde(default)]
    pub inflows: Option<PathBuf>,
    #[serde(default = "default_method")]
    pub method: ClusterMethod,
    pub n_states: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: Vec<usize>,
    #[serde(default = "default_draws")]
    pub noise_draws: usize,
    #[serde(default)]
    pub ridge: Option<f64>,
    #[serde(default)]
    pub terminal: Option<QuadraticValueFunction>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Half-full storage when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Middle state when absent.
    #[serde(default)]
    pub e0: Option<usize>,
    /// Inclusive range of historical years to replay.
    #[serde(default)]
    pub years: Option<(i32, i32)>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// Defaults to `model.json` in the output directory.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Defaults to `policy.json` in the output directory.
    #[serde(default)]
    pub policy: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_method() -> ClusterMethod {
    ClusterMethod::Pca
}
fn default_draws() -> usize {
    10
}
fn default_trials() -> usize {
    105
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, CliError> {
        serde_json::from_str(s).map_err(|e| CliError::config(format!("invalid run config: {e}")))
    }

    /// Reads `path`, applies the overrides, makes every path absolute and
    /// validates the counts.
    pub fn load(path: &Path, over: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = absolute(&base)?;
        cfg.resolve(&base, over)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path, over: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = over.seed {
            self.seed = seed;
        }
        let cwd = absolute(Path::new("."))?;
        let join = |root: &Path, p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        self.out = match &over.out {
            Some(o) => join(&cwd, o),
            None => join(base, &self.out),
        };
        self.system = join(base, &self.system);
        self.inflows = self.inflows.as_deref().map(|p| join(base, p));
        self.model = Some(match &self.model {
            Some(p) => join(base, p),
            None => self.out.join("model.json"),
        });
        self.policy = Some(match &self.policy {
            Some(p) => join(base, p),
            None => self.out.join("policy.json"),
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_states == 0 {
            return Err(CliError::config("n_states must be at least 1"));
        }
        if self.trials == 0 || self.noise_draws == 0 {
            return Err(CliError::config("trials and noise_draws must be at least 1"));
        }
        if self.grid.contains(&0) {
            return Err(CliError::config("grid counts must be at least 1"));
        }
        if let Some(e0) = self.e0 {
            if e0 >= self.n_states {
                return Err(CliError::config(format!("e0 = {e0} is not a state of 0..{}", self.n_states)));
            }
        }
        if let Some((a, b)) = self.years {
            if a > b {
                return Err(CliError::config(format!("empty year range {a}..={b}")));
            }
        }
        if let Some(s) = &self.sweep {
            if s.levels.is_empty() {
                return Err(CliError::config("sweep needs at least one level"));
            }
        }
        Ok(())
    }

    pub fn model_path(&self) -> &Path {
        self.model.as_deref().expect("resolved")
    }

    pub fn policy_path(&self) -> &Path {
        self.policy.as_deref().expect("resolved")
    }

    pub fn e0(&self) -> usize {
        self.e0.unwrap_or(self.n_states / 2)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the resolved config as `<command>_config.json` in the output
    /// directory; running the command on it reproduces the outputs.
    pub fn echo(&self, command: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(format!("{command}_config.json"));
        crate::commands::write_text(&path, &self.to_json())?;
        Ok(path)
    }
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"system": "sys.json", "n_states": 3}"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!((c.trials, c.noise_draws, c.method), (105, 10, ClusterMethod::Pca));
        assert_eq!(c.e0(), 1);
        assert_eq!(c.out, PathBuf::from("out"));
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let e = RunConfig::from_json(r#"{"system": "s", "n_states": 1, "seeed": 3}"#).unwrap_err();
        assert_eq!(e.code, 2);
    }

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, MINIMAL).unwrap();
        let c = RunConfig::load(&path, &Overrides { seed: Some(9), out: None }).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.system, dir.path().join("sys.json"));
        assert_eq!(c.model_path(), dir.path().join("out").join("model.json"));
        let again = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn bad_counts_are_rejected() {
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.e0 = Some(3);
        assert!(c.validate().is_err());
        c.e0 = None;
        c.grid = vec![2, 0];
        assert!(c.validate().is_err());
    }
}
