//! Problem-file schema "smpv-1": a JSON-compatible description of a problem
//! and its candidate control, with polynomial coefficients stored as term
//! lists (coefficient, t power, x powers, u powers).

use crate::error::{Error, Result};
use crate::poly::{PolyMap, Polynomial, Term};
use crate::problem::{
    ControlKind, ControlLaw, ControlRegion, GradientSupplier, Mode, ProblemSpec,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PROBLEM_SCHEMA: &str = "smpv-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSpec {
    Constant(Vec<f64>),
    Grid(Vec<Vec<f64>>),
    /// Feedback polynomial terms in (t, x), one list per control component.
    Feedback(Vec<Vec<Term>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSpec {
    Zero,
    Unavailable,
    /// Closed-form polynomial terms in (t, x), one list per component.
    ClosedForm(Vec<Vec<Term>>),
}

/// On-disk problem document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub schema: String,
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    pub mode: Mode,
    pub control_region: ControlRegion,
    pub drift: Vec<Vec<Term>>,
    pub diffusion: Vec<Vec<Term>>,
    pub running_cost: Vec<Term>,
    pub terminal_cost: Vec<Term>,
    pub control: ControlSpec,
    pub control_gradient: GradientSpec,
}

fn poly_from_terms(terms: &[Term], n: usize, m: usize) -> Result<Polynomial> {
    for t in terms {
        if t.x_pows.len() != n || t.u_pows.len() != m {
            return Err(Error::InvalidProblem(format!(
                "term power lists must have lengths {n} and {m}"
            )));
        }
    }
    Ok(Polynomial {
        state_dim: n,
        control_dim: m,
        terms: terms.to_vec(),
    })
}

fn map_from_terms(lists: &[Vec<Term>], n: usize, m: usize) -> Result<PolyMap> {
    let components = lists
        .iter()
        .map(|terms| poly_from_terms(terms, n, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(PolyMap::new(components))
}

impl ProblemFile {
    /// Convert into a validated problem and control law.
    pub fn into_problem(self) -> Result<(ProblemSpec, ControlLaw, String)> {
        if self.schema != PROBLEM_SCHEMA {
            return Err(Error::SchemaMismatch(format!(
                "expected problem schema {PROBLEM_SCHEMA}, found {}",
                self.schema
            )));
        }
        let (n, m) = (self.state_dim, self.control_dim);
        let spec = ProblemSpec {
            state_dim: n,
            control_dim: m,
            horizon: self.horizon,
            initial_state: self.initial_state.clone(),
            drift: map_from_terms(&self.drift, n, m)?,
            diffusion: map_from_terms(&self.diffusion, n, m)?,
            running_cost: poly_from_terms(&self.running_cost, n, m)?,
            terminal_cost: poly_from_terms(&self.terminal_cost, n, m)?,
            control_region: self.control_region.clone(),
            mode: self.mode,
        };
        spec.validate()?;
        let kind = match &self.control {
            ControlSpec::Constant(v) => {
                if v.len() != m {
                    return Err(Error::InvalidProblem(
                        "constant control has wrong dimension".into(),
                    ));
                }
                ControlKind::OpenLoopConstant(v.clone())
            }
            ControlSpec::Grid(vals) => {
                if vals.iter().any(|v| v.len() != m) {
                    return Err(Error::InvalidProblem(
                        "grid control values have wrong dimension".into(),
                    ));
                }
                ControlKind::OpenLoopGrid(vals.clone())
            }
            ControlSpec::Feedback(lists) => {
                if lists.len() != m {
                    return Err(Error::InvalidProblem(
                        "feedback law needs one component per control dimension".into(),
                    ));
                }
                let map = map_from_terms(lists, n, 0)?;
                for p in &map.components {
                    if p.degree_xu() > 4 {
                        return Err(Error::InvalidProblem(
                            "feedback polynomial degree exceeds 4".into(),
                        ));
                    }
                }
                ControlKind::Feedback(map)
            }
        };
        let gradient = match &self.control_gradient {
            GradientSpec::Zero => GradientSupplier::Zero,
            GradientSpec::Unavailable => GradientSupplier::Unavailable,
            GradientSpec::ClosedForm(lists) => {
                GradientSupplier::ClosedForm(map_from_terms(lists, n, 0)?)
            }
        };
        let law = ControlLaw { kind, gradient };
        law.check_admissible(&spec.control_region)?;
        Ok((spec, law, self.name))
    }

    /// Build the document for a problem and its candidate.
    pub fn from_problem(name: &str, spec: &ProblemSpec, law: &ControlLaw) -> ProblemFile {
        let terms_of = |p: &Polynomial| p.simplified().terms;
        let control = match &law.kind {
            ControlKind::OpenLoopConstant(v) => ControlSpec::Constant(v.clone()),
            ControlKind::OpenLoopGrid(vals) => ControlSpec::Grid(vals.clone()),
            ControlKind::Feedback(map) => {
                ControlSpec::Feedback(map.components.iter().map(terms_of).collect())
            }
        };
        let control_gradient = match &law.gradient {
            GradientSupplier::Zero => GradientSpec::Zero,
            GradientSupplier::Unavailable => GradientSpec::Unavailable,
            GradientSupplier::ClosedForm(map) => {
                GradientSpec::ClosedForm(map.components.iter().map(terms_of).collect())
            }
        };
        ProblemFile {
            schema: PROBLEM_SCHEMA.into(),
            name: name.into(),
            state_dim: spec.state_dim,
            control_dim: spec.control_dim,
            horizon: spec.horizon,
            initial_state: spec.initial_state.clone(),
            mode: spec.mode,
            control_region: spec.control_region.clone(),
            drift: spec.drift.components.iter().map(terms_of).collect(),
            diffusion: spec.diffusion.components.iter().map(terms_of).collect(),
            running_cost: terms_of(&spec.running_cost),
            terminal_cost: terms_of(&spec.terminal_cost),
            control,
            control_gradient,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<ProblemFile> {
        let text = std::fs::read_to_string(path)?;
        let file: ProblemFile = serde_json::from_str(&text)?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    #[test]
    fn scenario_round_trips() {
        for scenario in scenarios::builtin_scenarios() {
            let file = ProblemFile::from_problem(scenario.name, &scenario.spec, &scenario.control);
            let json = file.to_json().unwrap();
            let parsed: ProblemFile = serde_json::from_str(&json).unwrap();
            let (spec, law, name) = parsed.into_problem().unwrap();
            assert_eq!(name, scenario.name);
            assert_eq!(spec.state_dim, scenario.spec.state_dim);
            assert_eq!(spec.horizon, scenario.spec.horizon);
            // identical dynamics at a probe point
            let (t, x, u) = (0.3, vec![0.7], vec![-0.2]);
            assert_eq!(
                spec.drift.eval(t, &x, &u),
                scenario.spec.drift.eval(t, &x, &u)
            );
            assert_eq!(
                spec.diffusion.eval(t, &x, &u),
                scenario.spec.diffusion.eval(t, &x, &u)
            );
            let _ = law;
        }
    }

    #[test]
    fn wrong_schema_rejected() {
        let scenario = scenarios::find("NULL").unwrap();
        let mut file = ProblemFile::from_problem("x", &scenario.spec, &scenario.control);
        file.schema = "smpv-0".into();
        let err = file.into_problem().unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }
}
