//! Experiment configuration documents and the bundled presets.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use icl_core::{ProblemSpec, SpecDocument, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Default number of Monte-Carlo episodes per risk estimate.
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;

/// Context lengths swept by the gap-scaling suite unless overridden.
pub const DEFAULT_GAP_N_VALUES: [usize; 7] = [8, 16, 32, 64, 128, 256, 512];

/// An experiment suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Suite {
    /// Closed-form losses with Monte-Carlo estimates and ordering checks.
    Landscape,
    /// Closed-form losses checked against Monte-Carlo estimates.
    #[value(alias = "theory-vs-mc")]
    TheoryVsMc,
    /// Trained risks against the closed forms.
    #[value(alias = "train-vs-theory")]
    TrainVsTheory,
    /// Equality of all settings when every task mean is zero.
    #[value(alias = "zero-mean")]
    ZeroMean,
    /// Log-log slopes of the loss gaps in the context length.
    #[value(alias = "gap-scaling")]
    GapScaling,
    /// Moment and derivative identities.
    #[value(alias = "verify-lemmas")]
    Lemmas,
    /// Attention constructions against their reduced predictors.
    Equivalence,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Landscape,
        Suite::TheoryVsMc,
        Suite::TrainVsTheory,
        Suite::ZeroMean,
        Suite::GapScaling,
        Suite::Lemmas,
        Suite::Equivalence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Landscape => "landscape",
            Suite::TheoryVsMc => "theory_vs_mc",
            Suite::TrainVsTheory => "train_vs_theory",
            Suite::ZeroMean => "zero_mean",
            Suite::GapScaling => "gap_scaling",
            Suite::Lemmas => "lemmas",
            Suite::Equivalence => "equivalence",
        }
    }

    /// Label mixed into the experiment seed so suites draw from disjoint streams.
    pub(crate) fn seed_label(self) -> u64 {
        100 + Suite::ALL.iter().position(|&s| s == self).expect("suite is listed") as u64
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_mc_samples() -> usize {
    DEFAULT_MC_SAMPLES
}

fn default_output_path() -> PathBuf {
    PathBuf::from("results.csv")
}

fn default_gap_n_values() -> Vec<usize> {
    DEFAULT_GAP_N_VALUES.to_vec()
}

/// A complete experiment: the problem without its context length, the
/// context lengths to sweep, the suites to run and their budgets.
///
/// The experiment `seed` is the root of every random stream; it replaces
/// `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: SpecDocument,
    pub n_values: Vec<usize>,
    #[serde(default)]
    pub suites: Vec<Suite>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_output_path")]
    pub output_path: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gap_n_values")]
    pub gap_n_values: Vec<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(CliError::InvalidConfig(msg));
        if self.spec.n.is_some() {
            return invalid("spec.n must be omitted; context lengths come from n_values".into());
        }
        check_increasing("n_values", &self.n_values)?;
        check_increasing("gap_n_values", &self.gap_n_values)?;
        if self.mc_samples < 1000 {
            return invalid(format!("mc_samples must be at least 1000, got {}", self.mc_samples));
        }
        self.train.validate()?;
        self.spec.instantiate(self.n_values[0])?;
        Ok(())
    }

    /// The problem at context length `n`.
    pub fn spec_at(&self, n: usize) -> Result<ProblemSpec> {
        Ok(self.spec.instantiate(n)?)
    }
}

fn check_increasing(field: &str, values: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(CliError::InvalidConfig(format!("{field} must not be empty")));
    }
    if values[0] == 0 {
        return Err(CliError::InvalidConfig(format!("{field} must contain positive context lengths")));
    }
    if let Some(w) = values.windows(2).find(|w| w[0] >= w[1]) {
        return Err(CliError::InvalidConfig(format!(
            "{field} must be strictly increasing, found {} before {}",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Bundled configurations, addressable as `@name`.
pub const PRESETS: [(&str, &str); 8] = [
    ("fig2a", include_str!("../configs/fig2a.json")),
    ("fig2b", include_str!("../configs/fig2b.json")),
    ("fig2c", include_str!("../configs/fig2c.json")),
    ("fig2d", include_str!("../configs/fig2d.json")),
    ("appendix-noisy", include_str!("../configs/appendix-noisy.json")),
    ("appendix-noniso", include_str!("../configs/appendix-noniso.json")),
    ("zero-mean", include_str!("../configs/zero-mean.json")),
    ("desk", include_str!("../configs/desk.json")),
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| CliError::UnknownPreset {
            name: name.to_string(),
            available: PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "),
        })?;
    parse_config(text, &format!("@{name}"))
}

/// Parses and validates a config document; `origin` names it in diagnostics.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let key = err.path().to_string();
        let inner = err.into_inner();
        CliError::Parse {
            origin: origin.to_string(),
            key,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

/// Loads `@preset` or a JSON file.
pub fn load_config(source: &str) -> Result<ExperimentConfig> {
    if let Some(name) = source.strip_prefix('@') {
        return preset(name);
    }
    let path = Path::new(source);
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for (name, _) in PRESETS {
            let config = preset(name).unwrap();
            assert!(!config.n_values.is_empty(), "{name}");
        }
    }

    #[test]
    fn non_increasing_n_values_are_rejected() {
        let mut config = preset("fig2a").unwrap();
        config.n_values = vec![1, 5, 5];
        assert!(matches!(config.validate(), Err(CliError::InvalidConfig(_))));
        config.n_values = vec![];
        assert!(config.validate().is_err());
    }

    #[test]
    fn parse_errors_name_the_key() {
        let text = include_str!("../configs/desk.json").replace("\"pi\": 0.3", "\"pi\": \"x\"");
        match parse_config(&text, "desk.json") {
            Err(CliError::Parse { key, line, .. }) => {
                assert_eq!(key, "spec.tasks[0].pi");
                assert!(line > 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = include_str!("../configs/desk.json").replace("\"seed\": 0", "\"seed\": 0, \"extra\": 1");
        assert!(matches!(parse_config(&text, "x"), Err(CliError::Parse { .. })));
    }

    #[test]
    fn explicit_context_length_is_rejected() {
        let text = include_str!("../configs/desk.json").replace("\"d\": 5,", "\"d\": 5, \"n\": 3,");
        assert!(matches!(parse_config(&text, "x"), Err(CliError::InvalidConfig(_))));
    }

    #[test]
    fn unknown_preset_lists_alternatives() {
        let err = preset("fig9").unwrap_err().to_string();
        assert!(err.contains("fig2a") && err.contains("desk"));
    }
}
