use std::path::Path;

use anyhow::{Context, Result};
use mechxfer_core::{ExperimentConfig, PanelSchema, SynthConfig};
use serde::{Deserialize, Serialize};

/// Settings of `verify-theory`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub kernels_per_cell: usize,
    pub expectation_configs: usize,
    pub mc_n: usize,
    pub mc_reps: usize,
    pub mc_reference_draws: usize,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            kernels_per_cell: 10,
            expectation_configs: 10,
            mc_n: 5,
            mc_reps: 20_000,
            mc_reference_draws: 1_000_000,
            seed: 0,
        }
    }
}

/// Contents of a `--config` file: one TOML table per section.
///
/// ```toml
/// [experiment]
/// target = "U.S.A."
/// repeats = 10
/// methods = ["Prop", "TarOnly", "LOO"]
///
/// [experiment.grid]
/// psi_hidden = [10, 20]
///
/// [synth]
/// kind = "laplace"
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub synth: SynthConfig,
    /// Column mapping of the input CSVs; defaults to a `schema.json` next to
    /// the data, then to the gasoline panel.
    pub schema: Option<PanelSchema>,
    pub theory: TheoryConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flags win over the file.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.experiment.seed = s;
            self.synth.seed = s;
            self.theory.seed = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_are_optional() {
        let c: RunConfig = toml::from_str("[experiment]\nrepeats = 3\n").unwrap();
        assert_eq!(c.experiment.repeats, 3);
        assert_eq!(c.synth, SynthConfig::default());
    }

    #[test]
    fn bad_kind_names_the_field() {
        let err = toml::from_str::<RunConfig>("[synth]\nkind = \"cauchy\"\n").unwrap_err().to_string();
        assert!(err.contains("kind") && err.contains("cauchy"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[experiment]\nrepeets = 3\n").is_err());
    }

    #[test]
    fn seed_flag_overrides_every_section() {
        let mut c = RunConfig::default();
        c.apply_seed(Some(9));
        assert_eq!((c.experiment.seed, c.synth.seed, c.theory.seed), (9, 9, 9));
    }
}
