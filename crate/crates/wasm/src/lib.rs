//! Browser bindings: teacher ODE trajectories on a two-component mixture, a
//! solver error study against the high-resolution reference, and the exact
//! per-pair teacher cost.

use flowmap_core::diagnostics::{nfe_per_pair, NfeScheme};
use flowmap_core::numcore::Array;
use flowmap_core::oracle::{analytic_drift, GmmSpec, ReferenceFlow};
use flowmap_core::schedule::{time_grid, GridKind, Schedule};
use flowmap_core::solvers::{solve, SolverMethod};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn method(name: &str) -> flowmap_core::Result<SolverMethod> {
    SolverMethod::parse(name, 3, 2)
}

/// Evenly spaced start points over ±2.5 prior standard deviations.
pub fn anchors(sched: &Schedule, count: usize) -> Vec<f64> {
    let std = sched.sigma(sched.t_max).hypot(sched.alpha(sched.t_max));
    (0..count)
        .map(|i| -2.5 * std + 5.0 * std * (i as f64 + 0.5) / count as f64)
        .collect()
}

/// Trajectories from `T` to `t_min` as rows `[t, x_1 .. x_count]`, ordered from `T` down.
pub fn trajectory_table(mu: f64, solver: &str, steps: usize, count: usize) -> flowmap_core::Result<Vec<f64>> {
    let sched = Schedule::edm();
    let gmm = GmmSpec::symmetric_pair(mu, 0.25)?;
    let drift = analytic_drift(&gmm, &sched);
    let grid = time_grid(&sched, steps, GridKind::Power)?;
    let traj = solve(&drift, &grid, &Array::vector(anchors(&sched, count)), method(solver)?)?;
    let mut out = Vec::with_capacity((steps + 1) * (count + 1));
    for i in (0..=steps).rev() {
        out.push(grid.t(i));
        out.extend_from_slice(traj.states[i].data());
    }
    Ok(out)
}

/// RMS endpoint error per solver and step count, as JSON `{solver: [[M, err], ..]}`.
pub fn error_study(mu: f64, steps: &[usize]) -> flowmap_core::Result<serde_json::Value> {
    let sched = Schedule::edm();
    let gmm = GmmSpec::symmetric_pair(mu, 0.25)?;
    let drift = analytic_drift(&gmm, &sched);
    let x = Array::vector(anchors(&sched, 9));
    let exact = ReferenceFlow::new(gmm, sched).flow_map(&x, sched.t_max, sched.terminal())?;
    let mut report = serde_json::Map::new();
    for name in ["euler", "heun", "multistep"] {
        let mut rows = Vec::new();
        for &m in steps {
            let grid = time_grid(&sched, m, GridKind::Power)?;
            let end = solve(&drift, &grid, &x, method(name)?)?;
            let sq: f64 = end
                .endpoint()
                .data()
                .iter()
                .zip(exact.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            rows.push(serde_json::json!([m, (sq / x.len() as f64).sqrt()]));
        }
        report.insert(name.into(), rows.into());
    }
    Ok(report.into())
}

#[wasm_bindgen]
pub fn trajectories(mu: f64, solver: &str, steps: usize, count: usize) -> Result<Vec<f64>, JsValue> {
    trajectory_table(mu, solver, steps, count).map_err(js)
}

#[wasm_bindgen]
pub fn solver_errors(mu: f64) -> Result<String, JsValue> {
    error_study(mu, &[4, 8, 16, 32, 64]).map(|v| v.to_string()).map_err(js)
}

/// Exact teacher evaluations per training pair, e.g. `"17/16"`.
#[wasm_bindgen]
pub fn teacher_cost(m: u32, k: u32, warmup: u32) -> Result<String, JsValue> {
    nfe_per_pair(NfeScheme::Cmt {
        m: m.into(),
        k: k.into(),
        warmup_cost: warmup.into(),
    })
    .map(|r| r.to_string())
    .map_err(js)
}
