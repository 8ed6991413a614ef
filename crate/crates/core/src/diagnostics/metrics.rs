use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numcore::{Array, RngState};
use crate::schedule::{GridKind, TimeGrid};
use crate::solvers::{round_trip, solve, DriftModel, SolverMethod};

/// Least-squares slope of `log err` against `log h`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderFit {
    pub slope: f64,
    pub r2: f64,
    /// Every error is at round-off level; slope and r² are then meaningless.
    pub exact: bool,
    /// `(h, err)` per resolution.
    pub points: Vec<(f64, f64)>,
}

const EXACT_TOL: f64 = 1e-12;

pub fn fit_order(points: &[(f64, f64)], scale: f64) -> Result<OrderFit> {
    if points.len() < 4 {
        return Err(Error::domain(format!(
            "order fit needs at least 4 resolutions, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(h, e)| !(h > 0.0) || !e.is_finite() || e < 0.0) {
        return Err(Error::domain("order fit needs positive step sizes and finite errors"));
    }
    if points.iter().all(|&(_, e)| e <= EXACT_TOL * scale.max(1.0)) {
        return Ok(OrderFit {
            slope: f64::NAN,
            r2: f64::NAN,
            exact: true,
            points: points.to_vec(),
        });
    }
    if points.iter().any(|&(_, e)| e == 0.0) {
        return Err(Error::domain("order fit mixes zero and nonzero errors"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("order fit needs distinct step sizes"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(OrderFit {
        slope,
        r2,
        exact: false,
        points: points.to_vec(),
    })
}

/// Root mean square of per-row Euclidean errors.
fn rms_error(a: &Array, b: &Array, dim: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let rows = (a.len() / dim).max(1) as f64;
    let total: f64 = a
        .data()
        .chunks(dim)
        .zip(b.data().chunks(dim))
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
        .sum();
    Ok((total / rows).sqrt())
}

fn max_abs(x: &Array) -> f64 {
    x.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Endpoint error of `method` from `t` to `s` against `reference`, fitted over `ms` step counts.
#[allow(clippy::too_many_arguments)]
pub fn solver_order_fit(
    drift: &DriftModel,
    method: SolverMethod,
    x: &Array,
    t: f64,
    s: f64,
    ms: &[usize],
    grid: GridKind,
    reference: &Array,
) -> Result<OrderFit> {
    let rho = drift.schedule().rho;
    let mut points = Vec::with_capacity(ms.len());
    for &m in ms {
        let g = TimeGrid::between(t, s, m, grid, rho)?;
        let out = solve(drift, &g, x, method)?;
        points.push((
            (t - s).abs() / m as f64,
            rms_error(out.endpoint(), reference, drift.dim())?,
        ));
    }
    fit_order(&points, max_abs(reference))
}

/// Error of `Φ_{s→t}(Φ_{t→s}(x))` against `x`, fitted over `ms` step counts.
pub fn round_trip_order_fit(
    drift: &DriftModel,
    method: SolverMethod,
    x: &Array,
    t: f64,
    s: f64,
    ms: &[usize],
) -> Result<OrderFit> {
    let mut points = Vec::with_capacity(ms.len());
    for &m in ms {
        let back = round_trip(drift, x, t, s, m, method)?;
        points.push(((t - s).abs() / m as f64, rms_error(&back, x, drift.dim())?));
    }
    fit_order(&points, max_abs(x))
}

/// Both sides of the two-time consistency identity: `g = x − t·h` regresses onto
/// `x + t/(t−s)·∫` exactly when `h` regresses onto the average drift `∫/(s−t)`,
/// with the losses equal up to the factor `t²`.
///
/// Returns `(‖g − x − t/(t−s)·∫‖² / t², ‖h − ∫/(s−t)‖²)`.
pub fn ctm_mf_identity(g: &[f64], h: &[f64], x: &[f64], t: f64, s: f64, integral: &[f64]) -> Result<(f64, f64)> {
    let d = x.len();
    if g.len() != d || h.len() != d || integral.len() != d {
        return Err(Error::shape(d, format!("{}/{}/{}", g.len(), h.len(), integral.len())));
    }
    if t == 0.0 {
        return Err(Error::domain("identity needs t != 0"));
    }
    if (t - s).abs() < 1e-9 {
        return Err(Error::domain("identity needs |t − s| >= 1e-9"));
    }
    for k in 0..d {
        let want = x[k] - t * h[k];
        if (g[k] - want).abs() > 1e-9 * (1.0 + want.abs()) {
            return Err(Error::domain(format!("g is not x − t·h at component {k}")));
        }
    }
    let lhs = (0..d)
        .map(|k| (g[k] - x[k] - t / (t - s) * integral[k]).powi(2))
        .sum::<f64>()
        / (t * t);
    let rhs = (0..d).map(|k| (h[k] - integral[k] / (s - t)).powi(2)).sum();
    Ok((lhs, rhs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NfeScheme {
    /// Mid-training on solver trajectories with a `k`-step multistep teacher.
    Cmt { m: u64, k: u64, warmup_cost: u64 },
    /// Distillation with a `q`-evaluation one-step teacher.
    Cd { q: u64 },
    /// Consistency training, no teacher.
    Ct,
}

/// Amortized teacher evaluations per supervised `(x_t, target)` pair.
pub fn nfe_per_pair(scheme: NfeScheme) -> Result<Ratio<u64>> {
    match scheme {
        NfeScheme::Cmt { m, k, warmup_cost } => {
            if k == 0 || m < k {
                return Err(Error::domain(format!(
                    "trajectory needs M >= k >= 1, got M = {m}, k = {k}"
                )));
            }
            if warmup_cost == 0 {
                return Err(Error::domain("warmup cost must be positive"));
            }
            Ok(Ratio::from_integer(1) + Ratio::new((warmup_cost - 1) * (k - 1), m))
        }
        NfeScheme::Cd { q } => {
            if q == 0 {
                return Err(Error::domain("distillation needs q >= 1"));
            }
            Ok(Ratio::from_integer(q))
        }
        NfeScheme::Ct => Ok(Ratio::from_integer(0)),
    }
}

/// Quantiles of `sorted` at the `n` midpoints `(i + ½)/n`.
fn midpoint_quantiles(sorted: &[f64], n: usize) -> Vec<f64> {
    let m = sorted.len();
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            sorted[((u * m as f64) as usize).min(m - 1)]
        })
        .collect()
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            what: "sample".into(),
            index: Some(i),
        });
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// `W₂` between two empirical distributions on the line via the quantile coupling.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("Wasserstein distance needs non-empty samples"));
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    let n = a.len().max(b.len());
    let (qa, qb) = if a.len() == b.len() {
        (sa, sb)
    } else {
        (midpoint_quantiles(&sa, n), midpoint_quantiles(&sb, n))
    };
    let cost = qa.iter().zip(&qb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    Ok(cost.sqrt())
}

/// Mean of `W₂` over `n_proj` uniformly random directions.
pub fn sliced_w2(a: &Array, b: &Array, n_proj: usize, rng: &mut RngState) -> Result<f64> {
    let d = a.cols();
    if b.cols() != d || a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape(format!("[_, {d}]"), format!("{:?}", b.shape())));
    }
    if n_proj == 0 {
        return Err(Error::domain("sliced distance needs at least one projection"));
    }
    let project = |x: &Array, dir: &[f64]| -> Vec<f64> {
        x.data()
            .chunks(d)
            .map(|r| r.iter().zip(dir).map(|(u, v)| u * v).sum())
            .collect()
    };
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir = rng.normals(d);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir = vec![0.0; d];
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|v| *v /= norm);
        }
        total += wasserstein_1d(&project(a, &dir), &project(b, &dir))?;
    }
    Ok(total / n_proj as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.0; 5], &[1.0; 5]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0, 1.0]).unwrap() - 0.25).abs() < 1e-15);
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn nfe_examples() {
        let r = nfe_per_pair(NfeScheme::Cmt {
            m: 16,
            k: 3,
            warmup_cost: 2,
        })
        .unwrap();
        assert_eq!(r, Ratio::new(9, 8));
        assert_eq!(
            nfe_per_pair(NfeScheme::Cmt {
                m: 8,
                k: 1,
                warmup_cost: 2
            })
            .unwrap(),
            Ratio::from_integer(1)
        );
        assert_eq!(nfe_per_pair(NfeScheme::Cd { q: 2 }).unwrap(), Ratio::from_integer(2));
        assert!(nfe_per_pair(NfeScheme::Cmt {
            m: 2,
            k: 3,
            warmup_cost: 2
        })
        .is_err());
    }

    #[test]
    fn identity_domain() {
        assert!(ctm_mf_identity(&[1.0], &[0.0], &[1.0], 0.0, 0.5, &[0.0]).is_err());
        assert!(ctm_mf_identity(&[1.0], &[0.0], &[1.0], 0.5, 0.5, &[0.0]).is_err());
        assert!(ctm_mf_identity(&[2.0], &[0.0], &[1.0], 0.5, 0.1, &[0.0]).is_err());
    }

    #[test]
    fn fit_needs_four_points() {
        assert!(fit_order(&[(1.0, 1.0), (0.5, 0.5), (0.25, 0.25)], 1.0).is_err());
        let f = fit_order(&[(1.0, 1.0), (0.5, 0.25), (0.25, 0.0625), (0.125, 0.015625)], 1.0).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
    }
}
