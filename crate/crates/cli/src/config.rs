//! TOML problem description.
//!
//! Matrices are row-major nested arrays, or `{ blkdiag = [..] }` for
//! diagonal ones. Unknown keys are rejected everywhere.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use covsteer::program::ObjectiveForm;
use covsteer::{
    CostWeights, Gaussian, InputHalfspace, LmiEncoding, ProblemSpec, ProgramOptions, Saturation, SolverSettings,
    SplitWeights, StateHalfspace,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixDoc {
    // Tried first: a struct also accepts the sequence form `[[..]]`.
    Rows(Vec<Vec<f64>>),
    Blkdiag(Blkdiag),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blkdiag {
    pub blkdiag: Vec<f64>,
}

impl MatrixDoc {
    pub fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixDoc::Blkdiag(b) => Ok(DMatrix::from_diagonal(&DVector::from_row_slice(&b.blkdiag))),
            MatrixDoc::Rows(rows) => {
                let ncols = rows.first().map_or(0, Vec::len);
                ensure!(!rows.is_empty() && ncols > 0, "{name}: empty matrix");
                if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
                    bail!("{name}: row {i} has {} entries, row 0 has {ncols}", rows[i].len());
                }
                Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
            }
        }
    }

    /// Diagonal matrices are written with `blkdiag`.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let diagonal = m.is_square() && m.iter().enumerate().all(|(idx, &v)| idx % m.nrows() == idx / m.nrows() || v == 0.0);
        if diagonal {
            MatrixDoc::Blkdiag(Blkdiag { blkdiag: m.diagonal().iter().copied().collect() })
        } else {
            MatrixDoc::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDoc {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<MatrixDoc>,
    #[serde(rename = "A_seq", default, skip_serializing_if = "Option::is_none")]
    pub a_seq: Option<Vec<MatrixDoc>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixDoc>,
    #[serde(rename = "B_seq", default, skip_serializing_if = "Option::is_none")]
    pub b_seq: Option<Vec<MatrixDoc>>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<MatrixDoc>,
    #[serde(rename = "D_seq", default, skip_serializing_if = "Option::is_none")]
    pub d_seq: Option<Vec<MatrixDoc>>,
    /// Sampling period; only used to label plots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianDoc {
    pub mu: Vec<f64>,
    #[serde(rename = "Sigma")]
    pub sigma: MatrixDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostDoc {
    #[serde(rename = "Q")]
    pub q: MatrixDoc,
    #[serde(rename = "R")]
    pub r: MatrixDoc,
    #[serde(rename = "Qm", default, skip_serializing_if = "Option::is_none")]
    pub q_mean: Option<MatrixDoc>,
    #[serde(rename = "Qv", default, skip_serializing_if = "Option::is_none")]
    pub q_cov: Option<MatrixDoc>,
    #[serde(rename = "Rm", default, skip_serializing_if = "Option::is_none")]
    pub r_mean: Option<MatrixDoc>,
    #[serde(rename = "Rv", default, skip_serializing_if = "Option::is_none")]
    pub r_cov: Option<MatrixDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConstraintDoc {
    pub alpha: Vec<f64>,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConstraintDoc {
    pub alpha: Vec<f64>,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskDoc {
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LimitsDoc {
    /// Same limits for the initial deviation and the noise.
    Shared(Vec<f64>),
    Split { initial: Vec<f64>, noise: Vec<f64> },
}

/// At most one key may be given; an absent section disables saturation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturationDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<LimitsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_multiplier: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverDoc {
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub max_iter: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_limit: Option<f64>,
    pub verbose: bool,
    pub lmi: LmiEncoding,
    pub objective: ObjectiveForm,
}

impl Default for SolverDoc {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            tol_gap: s.tol_gap,
            tol_feas: s.tol_feas,
            max_iter: s.max_iter,
            time_limit: s.time_limit,
            verbose: s.verbose,
            lmi: LmiEncoding::default(),
            objective: ObjectiveForm::default(),
        }
    }
}

impl SolverDoc {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            max_iter: self.max_iter,
            tol_gap: self.tol_gap,
            tol_feas: self.tol_feas,
            verbose: self.verbose,
            time_limit: self.time_limit,
        }
    }

    pub fn program(&self) -> ProgramOptions {
        ProgramOptions { lmi: self.lmi, objective: self.objective }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutDoc {
    pub samples: usize,
    pub seed: u64,
    /// Sample paths kept for plotting.
    pub retain: usize,
}

impl Default for RolloutDoc {
    fn default() -> Self {
        Self { samples: 10_000, seed: 0, retain: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub horizon: usize,
    pub system: SystemDoc,
    pub initial: GaussianDoc,
    pub terminal: GaussianDoc,
    pub cost: CostDoc,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub state_constraints: Vec<StateConstraintDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_constraints: Vec<InputConstraintDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation: Option<SaturationDoc>,
    #[serde(default)]
    pub solver: SolverDoc,
    #[serde(default)]
    pub rollout: RolloutDoc,
}

fn sequence(
    horizon: usize,
    name: &str,
    single: &Option<MatrixDoc>,
    seq: &Option<Vec<MatrixDoc>>,
) -> Result<Vec<DMatrix<f64>>> {
    match (single, seq) {
        (Some(m), None) => Ok(vec![m.to_matrix(name)?; horizon]),
        (None, Some(list)) => {
            ensure!(list.len() == horizon, "system.{name}_seq: {} matrices for horizon {horizon}", list.len());
            list.iter().enumerate().map(|(k, m)| m.to_matrix(&format!("system.{name}_seq[{k}]"))).collect()
        }
        (Some(_), Some(_)) => bail!("system: give either {name} or {name}_seq, not both"),
        (None, None) => bail!("system: missing {name} (or {name}_seq)"),
    }
}

/// A constant sequence collapses back to the single-matrix key.
fn sequence_doc(seq: &[DMatrix<f64>]) -> (Option<MatrixDoc>, Option<Vec<MatrixDoc>>) {
    match seq.first() {
        Some(first) if seq.iter().all(|m| m == first) => (Some(MatrixDoc::from_matrix(first)), None),
        _ => (None, Some(seq.iter().map(MatrixDoc::from_matrix).collect())),
    }
}

fn gaussian(doc: &GaussianDoc, name: &str) -> Result<Gaussian<f64>> {
    Ok(Gaussian::new(DVector::from_row_slice(&doc.mu), doc.sigma.to_matrix(&format!("{name}.Sigma"))?))
}

fn gaussian_doc(g: &Gaussian<f64>) -> GaussianDoc {
    GaussianDoc { mu: g.mean.iter().copied().collect(), sigma: MatrixDoc::from_matrix(&g.cov) }
}

impl ConfigDocument {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Builds the problem instance. Shape and definiteness checks are left to
    /// [`covsteer::validate_spec`].
    pub fn to_spec(&self) -> Result<ProblemSpec<f64>> {
        let n = self.horizon;
        ensure!(n > 0, "horizon must be positive");
        let sys = &self.system;
        let cost = &self.cost;
        let split = match (&cost.q_mean, &cost.q_cov, &cost.r_mean, &cost.r_cov) {
            (None, None, None, None) => None,
            (Some(qm), Some(qv), Some(rm), Some(rv)) => Some(SplitWeights {
                q_mean: qm.to_matrix("cost.Qm")?,
                q_cov: qv.to_matrix("cost.Qv")?,
                r_mean: rm.to_matrix("cost.Rm")?,
                r_cov: rv.to_matrix("cost.Rv")?,
            }),
            _ => bail!("cost: split weights need all of Qm, Qv, Rm, Rv"),
        };
        let saturation = match &self.saturation {
            None => Saturation::Disabled,
            Some(SaturationDoc { limits: None, sigma_multiplier: None }) => Saturation::Disabled,
            Some(SaturationDoc { limits: None, sigma_multiplier: Some(m) }) => Saturation::SigmaMultiplier(*m),
            Some(SaturationDoc { limits: Some(l), sigma_multiplier: None }) => {
                let (initial, noise) = match l {
                    LimitsDoc::Shared(v) => (v.clone(), v.clone()),
                    LimitsDoc::Split { initial, noise } => (initial.clone(), noise.clone()),
                };
                Saturation::Limits { initial: DVector::from_vec(initial), noise: DVector::from_vec(noise) }
            }
            Some(_) => bail!("saturation: give either limits or sigma_multiplier, not both"),
        };
        Ok(ProblemSpec {
            horizon: n,
            a: sequence(n, "A", &sys.a, &sys.a_seq)?,
            b: sequence(n, "B", &sys.b, &sys.b_seq)?,
            d: sequence(n, "D", &sys.d, &sys.d_seq)?,
            initial: gaussian(&self.initial, "initial")?,
            terminal: gaussian(&self.terminal, "terminal")?,
            cost: CostWeights { q: cost.q.to_matrix("cost.Q")?, r: cost.r.to_matrix("cost.R")?, split },
            state_constraints: self
                .state_constraints
                .iter()
                .map(|c| StateHalfspace { alpha: DVector::from_row_slice(&c.alpha), beta: c.beta, p: c.p })
                .collect(),
            input_constraints: self
                .input_constraints
                .iter()
                .map(|c| InputHalfspace { alpha: DVector::from_row_slice(&c.alpha), beta: c.beta })
                .collect(),
            epsilon: self.risk.as_ref().map(|r| r.epsilon),
            saturation,
        })
    }

    pub fn from_spec(spec: &ProblemSpec<f64>, dt: Option<f64>, solver: SolverDoc, rollout: RolloutDoc) -> Self {
        let (a, a_seq) = sequence_doc(&spec.a);
        let (b, b_seq) = sequence_doc(&spec.b);
        let (d, d_seq) = sequence_doc(&spec.d);
        let split = spec.cost.split.as_ref();
        let saturation = match &spec.saturation {
            Saturation::Disabled => None,
            Saturation::SigmaMultiplier(m) => Some(SaturationDoc { limits: None, sigma_multiplier: Some(*m) }),
            Saturation::Limits { initial, noise } => {
                let limits = if initial == noise {
                    LimitsDoc::Shared(initial.iter().copied().collect())
                } else {
                    LimitsDoc::Split { initial: initial.iter().copied().collect(), noise: noise.iter().copied().collect() }
                };
                Some(SaturationDoc { limits: Some(limits), sigma_multiplier: None })
            }
        };
        ConfigDocument {
            horizon: spec.horizon,
            system: SystemDoc { a, a_seq, b, b_seq, d, d_seq, dt },
            initial: gaussian_doc(&spec.initial),
            terminal: gaussian_doc(&spec.terminal),
            cost: CostDoc {
                q: MatrixDoc::from_matrix(&spec.cost.q),
                r: MatrixDoc::from_matrix(&spec.cost.r),
                q_mean: split.map(|s| MatrixDoc::from_matrix(&s.q_mean)),
                q_cov: split.map(|s| MatrixDoc::from_matrix(&s.q_cov)),
                r_mean: split.map(|s| MatrixDoc::from_matrix(&s.r_mean)),
                r_cov: split.map(|s| MatrixDoc::from_matrix(&s.r_cov)),
            },
            state_constraints: spec
                .state_constraints
                .iter()
                .map(|c| StateConstraintDoc { alpha: c.alpha.iter().copied().collect(), beta: c.beta, p: c.p })
                .collect(),
            input_constraints: spec
                .input_constraints
                .iter()
                .map(|c| InputConstraintDoc { alpha: c.alpha.iter().copied().collect(), beta: c.beta })
                .collect(),
            risk: spec.epsilon.map(|epsilon| RiskDoc { epsilon }),
            saturation,
            solver,
            rollout,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
horizon = 3

[system]
A = [[1.0, 0.1], [0.0, 1.0]]
B = [[0.0], [0.1]]
D = { blkdiag = [0.01, 0.01] }

[initial]
mu = [1.0, 0.0]
Sigma = { blkdiag = [0.1, 0.1] }

[terminal]
mu = [0.0, 0.0]
Sigma = { blkdiag = [0.5, 0.5] }

[cost]
Q = { blkdiag = [1.0, 1.0] }
R = [[1.0]]

[[state_constraints]]
alpha = [1.0, 0.0]
beta = 2.0

[[input_constraints]]
alpha = [1.0]
beta = 3.0

[risk]
epsilon = 0.1

[saturation]
sigma_multiplier = 3.0
"#;

    #[test]
    fn parses_small_config() {
        let doc = ConfigDocument::parse(SMALL).unwrap();
        let spec = doc.to_spec().unwrap();
        assert_eq!(spec.horizon, 3);
        assert_eq!(spec.a.len(), 3);
        assert_eq!(spec.a[2][(0, 1)], 0.1);
        assert_eq!(spec.d[0], DMatrix::from_diagonal_element(2, 2, 0.01));
        assert_eq!(spec.saturation, Saturation::SigmaMultiplier(3.0));
        assert_eq!(spec.epsilon, Some(0.1));
        assert_eq!(doc.rollout, RolloutDoc::default());
        covsteer::validate_spec(&spec).unwrap();
    }

    #[test]
    fn round_trip_preserves_spec() {
        let doc = ConfigDocument::parse(SMALL).unwrap();
        let spec = doc.to_spec().unwrap();
        let written = ConfigDocument::from_spec(&spec, None, doc.solver.clone(), doc.rollout.clone());
        let again = ConfigDocument::parse(&written.to_toml().unwrap()).unwrap();
        assert_eq!(again.to_spec().unwrap(), spec);
        assert_eq!(again, written);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = SMALL.replace("sigma_multiplier", "sigma_multiplyer");
        assert!(ConfigDocument::parse(&typo).is_err());
        let extra = SMALL.replace("[risk]", "[risk]\ndelta = 0.2");
        assert!(ConfigDocument::parse(&extra).is_err());
        let top = format!("colour = \"red\"\n{SMALL}");
        assert!(ConfigDocument::parse(&top).is_err());
    }

    #[test]
    fn single_row_is_not_a_blkdiag() {
        let doc: SystemDoc = toml::from_str("B = [[0.5, 0.25]]").unwrap();
        assert_eq!(doc.b, Some(MatrixDoc::Rows(vec![vec![0.5, 0.25]])));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let ragged = SMALL.replace("A = [[1.0, 0.1], [0.0, 1.0]]", "A = [[1.0, 0.1], [0.0]]");
        let err = ConfigDocument::parse(&ragged).unwrap().to_spec().unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn sequences_and_limits() {
        let seq = SMALL
            .replace("A = [[1.0, 0.1], [0.0, 1.0]]", "A_seq = [[[1.0, 0.1], [0.0, 1.0]], [[1.0, 0.2], [0.0, 1.0]], [[1.0, 0.3], [0.0, 1.0]]]")
            .replace("sigma_multiplier = 3.0", "limits = { initial = [1.0, 2.0], noise = [0.1, 0.2] }");
        let doc = ConfigDocument::parse(&seq).unwrap();
        let spec = doc.to_spec().unwrap();
        assert_eq!(spec.a[1][(0, 1)], 0.2);
        assert!(matches!(spec.saturation, Saturation::Limits { .. }));
        let text = ConfigDocument::from_spec(&spec, None, doc.solver.clone(), doc.rollout.clone()).to_toml().unwrap();
        assert_eq!(ConfigDocument::parse(&text).unwrap().to_spec().unwrap(), spec);

        let short = SMALL.replace("A = [[1.0, 0.1], [0.0, 1.0]]", "A_seq = [[[1.0, 0.1], [0.0, 1.0]]]");
        assert!(ConfigDocument::parse(&short).unwrap().to_spec().is_err());
        let both = SMALL.replace("sigma_multiplier = 3.0", "sigma_multiplier = 3.0\nlimits = [1.0, 1.0]");
        assert!(ConfigDocument::parse(&both).unwrap().to_spec().is_err());
    }

    #[test]
    fn zero_terminal_covariance_fails_validation() {
        let zero = SMALL.replace("Sigma = { blkdiag = [0.5, 0.5] }", "Sigma = { blkdiag = [0.0, 0.0] }");
        let spec = ConfigDocument::parse(&zero).unwrap().to_spec().unwrap();
        let err = covsteer::validate_spec(&spec).unwrap_err();
        assert!(err.to_string().contains("terminal covariance not PD"), "{err}");
    }
}
