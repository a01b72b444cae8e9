//! Long-time classification of a free-boundary run: extinction below the
//! threshold, and the `ud ≤ u ≤ ol` sandwich above it.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{build_chain, EquilibriumChain};
use crate::error::{Error, Result};
use crate::fbsim::{run, InitialData, RunOptions, SimState, Trajectory};
use crate::model::{basic_reproduction_number, persistence_condition, ubar1_closed_form, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Extinction,
    PersistenceVerified,
    /// Above threshold with the persistence condition failing; only upper bounds are checked.
    PersistenceUnverified,
    /// The predicted branch was not confirmed by the run.
    Inconclusive,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Extinction => "Extinction",
            Regime::PersistenceVerified => "PersistenceVerified",
            Regime::PersistenceUnverified => "PersistenceUnverified",
            Regime::Inconclusive => "Inconclusive",
        }
    }
}

/// Branch implied by `R0` and the persistence condition alone.
pub fn predicted_regime(p: &ModelParams) -> Regime {
    if basic_reproduction_number(p) <= 1.0 {
        Regime::Extinction
    } else if persistence_condition(p) {
        Regime::PersistenceVerified
    } else {
        Regime::PersistenceUnverified
    }
}

/// `200/min(c, q)` for extinction, `300/min(c, q)` otherwise.
pub fn default_horizon(p: &ModelParams) -> f64 {
    let rate = p.c.min(p.q);
    match predicted_regime(p) {
        Regime::Extinction => 200.0 / rate,
        _ => 300.0 / rate,
    }
}

/// One measured criterion. `margin = allowed − measured`, so passing means `margin ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub allowed: f64,
    pub margin: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, measured: f64, allowed: f64) -> Self {
        let margin = allowed - measured;
        Self {
            name: name.into(),
            measured,
            allowed,
            margin,
            passed: margin >= 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyOptions {
    pub window: f64,
    pub slack_rel: f64,
    pub slack_abs: f64,
    /// Bound on the final sup norms of infected cells and virus.
    pub extinction_tol: f64,
    /// Bound on `|u₁ − ol U₁|` over the window in the extinction branch.
    pub u1_tol: f64,
    /// Relative sup-norm drift over the last 10% of the run that counts as quiescent.
    pub quiescence_tol: f64,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            window: 10.0,
            slack_rel: 0.02,
            slack_abs: 1e-3,
            extinction_tol: 1e-4,
            u1_tol: 1e-3,
            quiescence_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationResult {
    #[serde(rename = "R0")]
    pub r0: f64,
    pub persistence_condition: bool,
    pub predicted: Regime,
    pub regime: Regime,
    /// Sup norms settled over the last 10% of the run.
    pub quiescent: bool,
    pub t_end: f64,
    pub h_end: f64,
    pub evidence: Vec<Check>,
}

impl ClassificationResult {
    pub fn worst_margin(&self) -> f64 {
        self.evidence.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Largest relative sup-norm change between the records in the last 10% of the run
/// and the final record, with the extinction tolerance as the scale floor.
fn quiescence_drift(traj: &Trajectory, floor: f64) -> f64 {
    let last = traj.final_record();
    let start = 0.9 * last.t;
    traj.records
        .iter()
        .filter(|r| r.t >= start)
        .flat_map(|r| (0..3).map(move |i| (r.sup[i] - last.sup[i]).abs() / last.sup[i].abs().max(floor)))
        .fold(0.0, f64::max)
}

/// Nodes of the final state with `x ≤ window`.
fn window_nodes(state: &SimState, window: f64) -> impl Iterator<Item = (usize, f64)> + '_ {
    let dx = state.h * state.dy();
    (0..state.u[0].len())
        .map(move |j| (j, j as f64 * dx))
        .take_while(move |(_, x)| *x <= window * (1.0 + 1e-12))
}

pub fn classify(
    p: &ModelParams,
    traj: &Trajectory,
    chain: Option<&EquilibriumChain>,
    opts: &ClassifyOptions,
) -> Result<ClassificationResult> {
    let predicted = predicted_regime(p);
    let state = &traj.final_state;
    if state.h < opts.window {
        return Err(Error::Input(format!(
            "habitat h = {:.4} has not reached the window {}",
            state.h, opts.window
        )));
    }
    let mut evidence = Vec::new();
    match predicted {
        Regime::Extinction => {
            evidence.push(Check::at_most("sup_u2", state.sup(1), opts.extinction_tol));
            evidence.push(Check::at_most("sup_u3", state.sup(2), opts.extinction_tol));
            let dev = window_nodes(state, opts.window)
                .map(|(j, x)| (state.u[0][j] - ubar1_closed_form(p, p.d1, x)).abs())
                .fold(0.0, f64::max);
            evidence.push(Check::at_most("u1_minus_ol_u1", dev, opts.u1_tol));
        }
        _ => {
            let chain = chain.ok_or_else(|| Error::Input("persistence classification needs the equilibrium chain".into()))?;
            let names = ["u1", "u2", "u3"];
            for (i, name) in names.iter().enumerate() {
                let slack = |v: f64| opts.slack_rel * v.abs() + opts.slack_abs;
                let mut above = f64::NEG_INFINITY;
                let mut below = f64::NEG_INFINITY;
                for (j, x) in window_nodes(state, opts.window) {
                    let u = state.u[i][j];
                    let up = chain.upper_sample(i, x);
                    above = above.max(u - up - slack(up));
                    if let Some(lo) = chain.lower_sample(i, x) {
                        below = below.max(lo - slack(lo) - u);
                    }
                }
                evidence.push(Check::at_most(&format!("{name}_above_ol"), above, 0.0));
                if predicted == Regime::PersistenceVerified {
                    if !chain.is_complete() {
                        return Err(Error::Input("lower sandwich needs a complete chain".into()));
                    }
                    evidence.push(Check::at_most(&format!("{name}_below_ud"), below, 0.0));
                }
            }
        }
    }
    let regime = if evidence.iter().all(|c| c.passed) {
        predicted
    } else {
        Regime::Inconclusive
    };
    let last = traj.final_record();
    Ok(ClassificationResult {
        r0: basic_reproduction_number(p),
        persistence_condition: persistence_condition(p),
        predicted,
        regime,
        quiescent: quiescence_drift(traj, opts.extinction_tol) < opts.quiescence_tol,
        t_end: last.t,
        h_end: last.h,
        evidence,
    })
}

/// Settings for [`run_and_classify`].
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub initial: InitialData,
    /// End time; `None` uses [`default_horizon`].
    pub t_end: Option<f64>,
    pub dt: Option<f64>,
    pub n: usize,
    pub observers: usize,
    pub rtol: f64,
    pub classify: ClassifyOptions,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            initial: InitialData::default(),
            t_end: None,
            dt: None,
            n: 2000,
            observers: 100,
            rtol: 1e-6,
            classify: ClassifyOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub trajectory: Trajectory,
    pub chain: Option<EquilibriumChain>,
    pub result: ClassificationResult,
}

/// Simulation, equilibrium chain (above threshold) and classification in one go.
pub fn run_and_classify(p: &ModelParams, exp: &Experiment) -> Result<ExperimentOutcome> {
    let t_end = exp.t_end.unwrap_or_else(|| default_horizon(p));
    let mut opts = RunOptions::uniform(t_end, exp.n, exp.observers.max(1));
    opts.dt = exp.dt;
    let trajectory = run(&exp.initial, p, &opts)?;
    let chain = if predicted_regime(p) == Regime::Extinction {
        None
    } else {
        Some(build_chain(p, exp.classify.window, exp.rtol)?)
    };
    let result = classify(p, &trajectory, chain.as_ref(), &exp.classify)?;
    Ok(ExperimentOutcome {
        trajectory,
        chain,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(n: usize, t_end: f64) -> Experiment {
        Experiment {
            t_end: Some(t_end),
            n,
            observers: 20,
            ..Experiment::default()
        }
    }

    #[test]
    fn predicted_branches() {
        assert_eq!(predicted_regime(&ModelParams::kinetic(1.0, 1.0, 1.0, 2.0, 1.0, 1.0)), Regime::Extinction);
        assert_eq!(predicted_regime(&ModelParams::kinetic(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)), Regime::Extinction);
        assert_eq!(
            predicted_regime(&ModelParams::kinetic(1.0, 1.0, 2.0, 1.0, 1.0, 1.0)),
            Regime::PersistenceVerified
        );
        assert_eq!(
            predicted_regime(&ModelParams::kinetic(1.0, 1.0, 20.0, 1.0, 0.06, 1.0)),
            Regime::PersistenceUnverified
        );
    }

    #[test]
    fn horizon_scales_with_slowest_decay() {
        assert_eq!(default_horizon(&ModelParams::kinetic(1.0, 1.0, 1.0, 2.0, 1.0, 1.0)), 200.0);
        assert_eq!(default_horizon(&ModelParams::kinetic(1.0, 1.0, 2.0, 1.0, 1.0, 0.5)), 600.0);
    }

    #[test]
    fn extinction_run_is_classified() {
        let p = ModelParams::kinetic(1.0, 1.0, 1.0, 2.0, 1.0, 1.0);
        let out = run_and_classify(&p, &short(1200, 60.0)).unwrap();
        assert_eq!(out.result.regime, Regime::Extinction, "{:?}", out.result.evidence);
        assert!(out.chain.is_none());
    }

    #[test]
    fn too_short_run_is_inconclusive() {
        let p = ModelParams::kinetic(1.0, 1.0, 1.0, 2.0, 1.0, 1.0);
        let out = run_and_classify(&p, &short(400, 15.0)).unwrap();
        assert_eq!(out.result.predicted, Regime::Extinction);
        assert_eq!(out.result.regime, Regime::Inconclusive);
        assert!(!out.result.quiescent);
    }

    #[test]
    fn persistence_needs_chain() {
        let p = ModelParams::kinetic(1.0, 1.0, 2.0, 1.0, 1.0, 1.0);
        let traj = run(&InitialData::default(), &p, &RunOptions::uniform(20.0, 200, 4)).unwrap();
        assert!(matches!(
            classify(&p, &traj, None, &ClassifyOptions::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn classification_is_deterministic() {
        let p = ModelParams::kinetic(1.0, 1.0, 2.0, 1.0, 1.0, 1.0);
        let a = run_and_classify(&p, &short(600, 80.0)).unwrap().result;
        let b = run_and_classify(&p, &short(600, 80.0)).unwrap().result;
        assert_eq!(a, b);
        assert_eq!(a.regime, Regime::PersistenceVerified, "{:?}", a.evidence);
        assert_eq!(a.evidence.len(), 6);
    }
}
