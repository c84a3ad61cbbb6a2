//! WebAssembly bindings for the browser demo. Each export returns a JSON
//! string; the plain functions behind them are usable natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use platoon_perl::disturbance::DisturbanceKind;
use platoon_perl::metrics::{compute_metrics, ErrorSummary};
use platoon_perl::scenario::{run_experiment, ControllerKind, ExperimentConfig, ScenarioKind, ScenarioSpec};

#[derive(Debug, Serialize)]
pub struct Simulation {
    pub times: Vec<f64>,
    /// Platoon-mean `v − v*` per step.
    pub mean_v_error: Vec<f64>,
    /// `p − p*` per vehicle, then per step.
    pub position_error: Vec<Vec<f64>>,
    pub metrics: ErrorSummary,
    pub infeasible_steps: usize,
    pub spacing_flags: usize,
}

#[derive(Debug, Serialize)]
pub struct Profile {
    pub times: Vec<f64>,
    pub speed: Vec<f64>,
    pub accel: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub commanded: Vec<f64>,
    pub actual: Vec<f64>,
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

pub fn simulate_run(scenario: &str, error: &str, controller: &str, seed: u64) -> Result<Simulation, String> {
    let cfg = ExperimentConfig::new(parse(scenario)?, parse(error)?, parse(controller)?, seed);
    let log = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let metrics = compute_metrics(&log).map_err(|e| e.to_string())?.total;
    let n = log.n_vehicles();
    let position_error = (0..n)
        .map(|i| {
            log.records
                .iter()
                .map(|r| r.state.positions[i] - r.reference.positions[i])
                .collect()
        })
        .collect();
    Ok(Simulation {
        times: log.records.iter().map(|r| r.time).collect(),
        mean_v_error: log.mean_velocity_error(),
        position_error,
        metrics,
        infeasible_steps: log.infeasible_steps(),
        spacing_flags: log.spacing_flags(),
    })
}

pub fn reference(scenario: &str) -> Result<Profile, String> {
    let spec = ScenarioSpec::new(parse::<ScenarioKind>(scenario)?);
    let times: Vec<f64> = (0..=spec.steps()).map(|k| k as f64 * spec.dt).collect();
    let states: Vec<_> = times.iter().map(|&t| spec.head_reference(t)).collect();
    Ok(Profile {
        speed: states.iter().map(|s| s.1).collect(),
        accel: states.iter().map(|s| s.2).collect(),
        times,
    })
}

/// Noise-free actuation response over 0–30 m/s.
pub fn actuation(error: &str) -> Result<Curve, String> {
    let kind: DisturbanceKind = parse(error)?;
    let commanded: Vec<f64> = (0..=60).map(|i| i as f64 * 0.5).collect();
    Ok(Curve {
        actual: commanded.iter().map(|&u| kind.nominal(u)).collect(),
        commanded,
    })
}

fn to_json<T: Serialize>(value: Result<T, String>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate(scenario: &str, error: &str, controller: &str, seed: u32) -> Result<String, JsError> {
    to_json(simulate_run(scenario, error, controller, u64::from(seed)))
}

#[wasm_bindgen]
pub fn reference_profile(scenario: &str) -> Result<String, JsError> {
    to_json(reference(scenario))
}

#[wasm_bindgen]
pub fn actuation_curve(error: &str) -> Result<String, JsError> {
    to_json(actuation(error))
}

/// Controller identifiers accepted by `simulate`, with display labels.
#[wasm_bindgen]
pub fn controllers() -> String {
    let pairs: Vec<(&str, &str)> = ControllerKind::ALL.iter().map(|c| (c.as_str(), c.label())).collect();
    serde_json::to_string(&pairs).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_run_tracks() {
        let sim = simulate_run("uniform", "none", "mpc_only", 1).unwrap();
        assert_eq!(sim.times.len(), 150);
        assert_eq!(sim.position_error.len(), 5);
        assert!(sim.metrics.mae_p < 1e-6);
    }

    #[test]
    fn residual_reduces_position_error() {
        let m = simulate_run("variable", "affine", "mpc_only", 2).unwrap();
        let q = simulate_run("variable", "affine", "mpc_q", 2).unwrap();
        assert!(q.metrics.cae_p < m.metrics.cae_p);
    }

    #[test]
    fn profile_has_trough() {
        let p = reference("variable").unwrap();
        assert_eq!(p.times.len(), 151);
        let (i, _) = p
            .speed
            .iter()
            .enumerate()
            .fold((0, f64::MAX), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        assert!((p.times[i] - 7.5).abs() < 0.11);
    }

    #[test]
    fn curves_and_errors() {
        let c = actuation("none").unwrap();
        assert_eq!(c.commanded, c.actual);
        assert!(actuation("sideways").is_err());
        assert!(simulate_run("uniform", "none", "pid", 1).is_err());
    }
}
