//! JSON documents and CSV tables written by the commands.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use covsteer::program::ProgramStats;
use covsteer::rollout::CantelliRow;
use covsteer::solve::Verification;
use covsteer::{ControllerSolution, ProblemSpec, RolloutReport, Saturation};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONTROLLER_FILE: &str = "controller.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROGRAM_FILE: &str = "program.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const VIOLATIONS_FILE: &str = "violations.csv";
pub const TRAJECTORY_PLOT: &str = "trajectories.svg";
pub const INPUT_PLOT: &str = "inputs.svg";

/// SHA-256 of the canonical JSON form of a normalized spec.
pub fn spec_hash(spec: &ProblemSpec<f64>) -> String {
    let bytes = serde_json::to_vec(spec).expect("spec serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Replacement for the `saturation` section given on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationOverride {
    Infinite,
    Multiplier(f64),
    /// `n_x` values shared by `ζ_0` and `w`, or `2 n_x` values split as
    /// initial then noise.
    Values(Vec<f64>),
}

impl FromStr for SaturationOverride {
    type Err = String;

    /// `inf`, a multiplier such as `3` or `sigma:3`, or `values:a,b,..`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("none") {
            return Ok(SaturationOverride::Infinite);
        }
        let number = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}"));
        if let Some(list) = s.strip_prefix("values:") {
            let values = list.split(',').map(number).collect::<Result<Vec<_>, _>>()?;
            return Ok(SaturationOverride::Values(values));
        }
        let m = number(s.strip_prefix("sigma:").unwrap_or(s))?;
        if !(m > 0.0) {
            return Err("multiplier must be positive".into());
        }
        Ok(SaturationOverride::Multiplier(m))
    }
}

/// Command-line changes applied on top of the config. Recorded in the
/// controller document so `simulate` rebuilds the same problem.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub no_input_constraints: bool,
    pub saturation: Option<SaturationOverride>,
}

impl Overrides {
    pub fn apply(&self, mut spec: ProblemSpec<f64>) -> Result<ProblemSpec<f64>> {
        if self.no_input_constraints {
            spec.input_constraints.clear();
        }
        match &self.saturation {
            None => {}
            Some(SaturationOverride::Infinite) => spec.saturation = Saturation::Disabled,
            Some(SaturationOverride::Multiplier(m)) => spec.saturation = Saturation::SigmaMultiplier(*m),
            Some(SaturationOverride::Values(v)) => {
                let n = spec.state_dim();
                let (initial, noise) = if v.len() == n {
                    (v.clone(), v.clone())
                } else if v.len() == 2 * n {
                    (v[..n].to_vec(), v[n..].to_vec())
                } else {
                    bail!("--saturation values: expected {n} or {} numbers, got {}", 2 * n, v.len());
                };
                spec.saturation = Saturation::Limits { initial: DVector::from_vec(initial), noise: DVector::from_vec(noise) };
            }
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerDocument {
    pub spec_hash: String,
    pub overrides: Overrides,
    pub controller: ControllerSolution<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveSummary {
    pub spec_hash: String,
    pub status: covsteer::SolutionStatus,
    pub objective: f64,
    /// Objective without the `x_0` stage term, which no decision affects.
    pub objective_excluding_initial_stage: f64,
    pub iterations: u32,
    pub solve_time: f64,
    pub program: ProgramStats,
    pub verification: Verification,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportDocument {
    pub spec_hash: String,
    /// The simulated problem, kept so plots can draw its constraints.
    pub spec: ProblemSpec<f64>,
    pub dt: Option<f64>,
    pub controller_objective: f64,
    pub report: RolloutReport<f64>,
    pub cantelli: Vec<CantelliRow>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// One row per retained sample and step; inputs are blank at `k = N`.
pub fn write_trajectories_csv<W: Write>(out: W, report: &RolloutReport<f64>) -> Result<()> {
    let first = report.trajectories.first();
    let n = first.map_or(0, |t| t.states[0].len());
    let m = first.and_then(|t| t.inputs.first()).map_or(0, |u| u.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string(), "k".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    for t in &report.trajectories {
        for (k, x) in t.states.iter().enumerate() {
            let mut row = vec![t.sample.to_string(), k.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            match t.inputs.get(k) {
                Some(u) => row.extend(u.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_violations_csv<W: Write>(out: W, rows: &[CantelliRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["j", "k", "empirical", "se", "allocated", "cantelli_bound", "flagged"])?;
    for r in rows {
        w.write_record([
            r.j.to_string(),
            r.k.to_string(),
            r.empirical.to_string(),
            r.se.to_string(),
            r.allocated.to_string(),
            r.cantelli_bound.to_string(),
            r.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn check_hash(doc: &ControllerDocument, spec: &ProblemSpec<f64>) -> Result<()> {
    let hash = spec_hash(spec);
    ensure!(
        hash == doc.spec_hash,
        "controller was solved for a different problem (spec hash {} but config gives {hash})",
        doc.spec_hash
    );
    Ok(())
}
