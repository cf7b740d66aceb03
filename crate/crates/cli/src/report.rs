//! Result rows and their CSV encoding.

use std::io::Write;

use serde::Serialize;

use crate::config::Suite;
use crate::error::Result;

/// Header of the loss table.
pub const LANDSCAPE_HEADER: [&str; 8] = [
    "suite",
    "setting",
    "n",
    "theory_loss",
    "mc_loss",
    "mc_stderr",
    "trained_loss",
    "normalized",
];

/// Header of the check table.
pub const CHECK_HEADER: [&str; 7] = ["suite", "check", "n", "value", "lower", "upper", "passed"];

/// One loss measurement for a setting at a context length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeRow {
    pub suite: Suite,
    pub setting: String,
    pub n: usize,
    pub theory_loss: f64,
    pub mc_loss: f64,
    pub mc_stderr: f64,
    pub trained_loss: Option<f64>,
    pub normalized: bool,
}

impl LandscapeRow {
    /// Divides every loss column by `scale` and marks the row normalized.
    pub fn normalized_by(mut self, scale: f64) -> Self {
        self.theory_loss /= scale;
        self.mc_loss /= scale;
        self.mc_stderr /= scale;
        self.trained_loss = self.trained_loss.map(|t| t / scale);
        self.normalized = true;
        self
    }

    fn record(&self) -> [String; 8] {
        [
            self.suite.name().to_string(),
            self.setting.clone(),
            self.n.to_string(),
            float(self.theory_loss),
            float(self.mc_loss),
            float(self.mc_stderr),
            self.trained_loss.map(float).unwrap_or_default(),
            self.normalized.to_string(),
        ]
    }
}

/// A pass/fail assertion: `value` must lie in `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub suite: Suite,
    pub check: String,
    pub n: Option<usize>,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub passed: bool,
}

impl CheckRow {
    pub fn within(suite: Suite, check: impl Into<String>, n: Option<usize>, value: f64, lower: f64, upper: f64) -> Self {
        Self {
            suite,
            check: check.into(),
            n,
            value,
            lower,
            upper,
            passed: value >= lower && value <= upper,
        }
    }

    pub fn at_most(suite: Suite, check: impl Into<String>, n: Option<usize>, value: f64, upper: f64) -> Self {
        Self::within(suite, check, n, value, f64::NEG_INFINITY, upper)
    }

    /// A measurement recorded for reference; it always passes.
    pub fn info(suite: Suite, check: impl Into<String>, n: Option<usize>, value: f64) -> Self {
        Self {
            passed: true,
            ..Self::within(suite, check, n, value, f64::NEG_INFINITY, f64::INFINITY)
        }
    }

    fn record(&self) -> [String; 7] {
        [
            self.suite.name().to_string(),
            self.check.clone(),
            self.n.map(|n| n.to_string()).unwrap_or_default(),
            float(self.value),
            float(self.lower),
            float(self.upper),
            self.passed.to_string(),
        ]
    }
}

/// Rows produced by one or more suites.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteOutput {
    pub rows: Vec<LandscapeRow>,
    pub checks: Vec<CheckRow>,
}

impl SuiteOutput {
    pub fn extend(&mut self, other: SuiteOutput) {
        self.rows.extend(other.rows);
        self.checks.extend(other.checks);
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn all_passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Run-level metadata written as a leading comment line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetadata {
    pub mc_samples: usize,
    pub seed: u64,
}

/// 17 significant digits, so every value round-trips exactly.
pub fn float(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.16e}")
    } else if value.is_nan() {
        "nan".to_string()
    } else if value > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

fn write_table<W: Write, const N: usize>(
    mut out: W,
    meta: RunMetadata,
    header: [&str; N],
    records: impl Iterator<Item = [String; N]>,
) -> Result<()> {
    writeln!(out, "# mc_samples={} seed={}", meta.mc_samples, meta.seed).map_err(csv::Error::from)?;
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(header)?;
    for record in records {
        writer.write_record(&record)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_landscape<W: Write>(out: W, meta: RunMetadata, rows: &[LandscapeRow]) -> Result<()> {
    write_table(out, meta, LANDSCAPE_HEADER, rows.iter().map(LandscapeRow::record))
}

pub fn write_checks<W: Write>(out: W, meta: RunMetadata, checks: &[CheckRow]) -> Result<()> {
    write_table(out, meta, CHECK_HEADER, checks.iter().map(CheckRow::record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 30.5, 1e-300, -2.5e17] {
            assert_eq!(float(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(float(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn empty_table_has_metadata_and_header() {
        let mut buf = Vec::new();
        write_landscape(&mut buf, RunMetadata { mc_samples: 10, seed: 3 }, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# mc_samples=10 seed=3\nsuite,setting,n,theory_loss,mc_loss,mc_stderr,trained_loss,normalized\n"
        );
    }

    #[test]
    fn normalization_touches_only_losses() {
        let row = LandscapeRow {
            suite: Suite::Landscape,
            setting: "PT".into(),
            n: 4,
            theory_loss: 10.0,
            mc_loss: 12.0,
            mc_stderr: 1.0,
            trained_loss: Some(14.0),
            normalized: false,
        };
        let scaled = row.clone().normalized_by(2.0);
        assert_eq!((scaled.n, scaled.setting.as_str()), (4, "PT"));
        assert_eq!((scaled.theory_loss, scaled.mc_loss, scaled.mc_stderr), (5.0, 6.0, 0.5));
        assert_eq!(scaled.trained_loss, Some(7.0));
        assert!(scaled.normalized);
    }

    #[test]
    fn check_bounds_are_inclusive() {
        assert!(CheckRow::within(Suite::Lemmas, "c", None, 1.0, 0.0, 1.0).passed);
        assert!(!CheckRow::at_most(Suite::Lemmas, "c", None, 1.5, 1.0).passed);
        assert!(!CheckRow::at_most(Suite::Lemmas, "c", None, f64::NAN, 1.0).passed);
    }
}
