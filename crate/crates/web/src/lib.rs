//! WebAssembly bindings for the browser demo. Every export takes the model
//! constants as a JSON object and returns a JSON string; failures come back as
//! `{"error": kind, "message": text}`.

use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

use viralfront::behavior::predicted_regime;
use viralfront::equilibrium::build_chain;
use viralfront::fbsim::{run, InitialData, RunOptions};
use viralfront::model::{
    basic_reproduction_number, farfield_limits, persistence_condition, udbar1_farfield, ModelParams,
};
use viralfront::Error;

const MAX_POINTS: usize = 400;

fn parse(params: &str) -> Result<ModelParams, Error> {
    let p: ModelParams = serde_json::from_str(params).map_err(|e| Error::Input(e.to_string()))?;
    p.validate()?;
    Ok(p)
}

fn respond<T: Serialize>(result: Result<T, Error>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| json!({"error": "internal", "message": e.to_string()}).to_string()),
        Err(e) => json!({"error": e.kind(), "message": e.to_string()}).to_string(),
    }
}

/// Every `stride`-th index so at most `MAX_POINTS` samples reach the page.
fn stride(len: usize) -> usize {
    len.div_ceil(MAX_POINTS).max(1)
}

pub fn threshold_json(params: &str) -> String {
    respond(parse(params).map(|p| {
        let r0 = basic_reproduction_number(&p);
        let ol = farfield_limits(&p, p.virus_free_level()).ok();
        let ud1 = udbar1_farfield(&p).ok();
        let ud = ud1.and_then(|u| farfield_limits(&p, u).ok());
        json!({
            "R0": r0,
            "persistence_condition": persistence_condition(&p),
            "predicted": predicted_regime(&p).as_str(),
            "b_star": p.a * p.c * p.q / (p.k * p.theta),
            "ol_farfield": ol.map(|(v, w)| [p.virus_free_level(), v, w]),
            "ud_farfield": ud.zip(ud1).map(|((v, w), u)| [u, v, w]),
        })
    }))
}

pub fn chain_json(params: &str, window: f64) -> String {
    respond(parse(params).and_then(|p| {
        let chain = build_chain(&p, window, 1e-6)?;
        let grid = *chain.ol_u1.profile.grid();
        let s = stride(grid.len());
        let idx: Vec<usize> = (0..grid.len()).step_by(s).collect();
        let x: Vec<f64> = idx.iter().map(|&j| grid.x(j)).collect();
        let upper: Vec<Vec<f64>> = (0..3).map(|i| idx.iter().map(|&j| chain.upper_at(j)[i]).collect()).collect();
        let lower: Option<Vec<Vec<f64>>> = chain
            .ud_u23
            .as_ref()
            .map(|_| (0..3).map(|i| idx.iter().map(|&j| chain.lower_at(j).unwrap()[i]).collect()).collect());
        Ok(json!({ "x": x, "upper": upper, "lower": lower, "complete": chain.is_complete() }))
    }))
}

pub fn simulate_json(params: &str, t_end: f64, n: usize) -> String {
    respond(parse(params).and_then(|p| {
        let traj = run(&InitialData::default(), &p, &RunOptions::uniform(t_end, n, 200))?;
        let s = &traj.final_state;
        let dx = s.h * s.dy();
        let k = stride(s.u[0].len());
        let idx: Vec<usize> = (0..s.u[0].len()).step_by(k).collect();
        Ok(json!({
            "t": traj.records.iter().map(|r| r.t).collect::<Vec<_>>(),
            "h": traj.records.iter().map(|r| r.h).collect::<Vec<_>>(),
            "sup": traj.records.iter().map(|r| r.sup).collect::<Vec<_>>(),
            "x": idx.iter().map(|&j| j as f64 * dx).collect::<Vec<_>>(),
            "u": (0..3).map(|i| idx.iter().map(|&j| s.u[i][j]).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "min_h_prime": traj.min_h_prime,
        }))
    }))
}

/// R0, the persistence condition, the predicted regime and closed-form plateaus.
#[wasm_bindgen]
pub fn threshold(params: &str) -> String {
    threshold_json(params)
}

/// Upper and lower equilibrium profiles on `[0, window]`.
#[wasm_bindgen]
pub fn equilibrium_chain(params: &str, window: f64) -> String {
    chain_json(params, window)
}

/// Free boundary run from unit bumps: `h(t)`, sup norms and the final profiles.
#[wasm_bindgen]
pub fn simulate(params: &str, t_end: f64, n: usize) -> String {
    simulate_json(params, t_end, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    const R0_TWO: &str = r#"{"theta":1,"a":1,"b":2,"c":1,"k":1,"q":1}"#;

    fn value(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn threshold_reports_branch() {
        let v = value(&threshold(R0_TWO));
        assert_eq!(v["R0"], 2.0);
        assert_eq!(v["predicted"], "PersistenceVerified");
        assert!((v["ol_farfield"][2].as_f64().unwrap() - (2f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bad_params_come_back_as_errors() {
        let v = value(&threshold(r#"{"theta":-1,"a":1,"b":2,"c":1,"k":1,"q":1}"#));
        assert_eq!(v["error"], "invalid_parameter");
        assert_eq!(value(&simulate("{", 1.0, 50))["error"], "input");
    }

    #[test]
    fn chain_is_downsampled() {
        let v = value(&equilibrium_chain(R0_TWO, 10.0));
        let x = v["x"].as_array().unwrap();
        assert!(x.len() <= MAX_POINTS && x.len() > 50);
        assert_eq!(v["upper"][1].as_array().unwrap().len(), x.len());
        assert_eq!(v["complete"], true);
    }

    #[test]
    fn simulation_expands() {
        let v = value(&simulate(R0_TWO, 5.0, 200));
        let h = v["h"].as_array().unwrap();
        assert!(h.last().unwrap().as_f64().unwrap() > h[0].as_f64().unwrap());
        assert!(v["min_h_prime"].as_f64().unwrap() > 0.0);
    }
}
