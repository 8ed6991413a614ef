//! Noise schedules, perturbation kernels, the denoiser/velocity conversion and
//! time grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Array;

const RANGE_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `α_t = 1`, `σ_t = t`.
    Edm,
    /// `α_t = 1 - t`, `σ_t = t`.
    Fm,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Edm => "edm",
            ScheduleKind::Fm => "fm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "edm" => Ok(ScheduleKind::Edm),
            "fm" => Ok(ScheduleKind::Fm),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
    /// Exponent of the power time grid.
    pub rho: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64, rho: f64) -> Result<Self> {
        let ok = match kind {
            ScheduleKind::Edm => t_min > 0.0 && t_max > t_min,
            ScheduleKind::Fm => t_min >= 0.0 && t_max > t_min && t_max <= 1.0,
        };
        if !ok || rho <= 0.0 {
            return Err(Error::Config(format!(
                "invalid {} schedule range [{t_min}, {t_max}] (rho {rho})",
                kind.name()
            )));
        }
        Ok(Self {
            kind,
            t_min,
            t_max,
            rho,
        })
    }

    /// EDM on `[0.002, 10]`.
    pub fn edm() -> Self {
        Self::edm_with(10.0)
    }

    pub fn edm_with(t_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Edm,
            t_min: 0.002,
            t_max,
            rho: 7.0,
        }
    }

    /// Linear interpolation on `[0, 1]`.
    pub fn fm() -> Self {
        Self {
            kind: ScheduleKind::Fm,
            t_min: 0.0,
            t_max: 1.0,
            rho: 7.0,
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Edm => 1.0,
            ScheduleKind::Fm => 1.0 - t,
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    pub fn alpha_prime(&self, _t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Edm => 0.0,
            ScheduleKind::Fm => -1.0,
        }
    }

    pub fn sigma_prime(&self, _t: f64) -> f64 {
        1.0
    }

    /// Clean endpoint `t_0` of trajectories.
    pub fn terminal(&self) -> f64 {
        self.t_min
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min - RANGE_SLACK && t <= self.t_max + RANGE_SLACK
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "t = {t} outside [{}, {}]",
                self.t_min, self.t_max
            )))
        }
    }

    /// Time value fed to the network: `ln(t)/4` for EDM, `t` for FM.
    pub fn cond_time(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Edm => t.ln() / 4.0,
            ScheduleKind::Fm => t,
        }
    }

    pub fn cond_time_deriv(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Edm => 0.25 / t,
            ScheduleKind::Fm => 1.0,
        }
    }

    /// Coefficient of `D` in the velocity: `α' - α σ'/σ`.
    fn denoiser_coef(&self, t: f64) -> f64 {
        self.alpha_prime(t) - self.alpha(t) * self.sigma_prime(t) / self.sigma(t)
    }

    pub(crate) fn denoiser_to_velocity_into(&self, d: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
        let a = self.denoiser_coef(t);
        let b = self.sigma_prime(t) / self.sigma(t);
        for ((o, &dv), &xv) in out.iter_mut().zip(d).zip(x) {
            *o = a * dv + b * xv;
        }
    }

    pub(crate) fn velocity_to_denoiser_into(&self, v: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
        let a = self.denoiser_coef(t);
        let b = self.sigma_prime(t) / self.sigma(t);
        for ((o, &vv), &xv) in out.iter_mut().zip(v).zip(x) {
            *o = (vv - b * xv) / a;
        }
    }
}

fn same_shape(a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// `α_t x0 + σ_t ε`.
pub fn perturb(sched: &Schedule, x0: &Array, eps: &Array, t: f64) -> Result<Array> {
    sched.check_time(t)?;
    same_shape(x0, eps)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + s * e).collect();
    Array::new(x0.shape().to_vec(), data)
}

/// `v = (α' - α σ'/σ) D + (σ'/σ) x`.
pub fn denoiser_to_velocity(sched: &Schedule, d_val: &Array, x: &Array, t: f64) -> Result<Array> {
    same_shape(d_val, x)?;
    if sched.sigma(t) <= 0.0 {
        return Err(Error::Singular(format!("σ({t}) = 0")));
    }
    let mut out = vec![0.0; x.len()];
    sched.denoiser_to_velocity_into(d_val.data(), x.data(), t, &mut out);
    Array::new(x.shape().to_vec(), out)
}

/// Algebraic inverse of [`denoiser_to_velocity`].
pub fn velocity_to_denoiser(sched: &Schedule, v_val: &Array, x: &Array, t: f64) -> Result<Array> {
    same_shape(v_val, x)?;
    if sched.sigma(t) <= 0.0 {
        return Err(Error::Singular(format!("σ({t}) = 0")));
    }
    if sched.denoiser_coef(t).abs() < 1e-300 {
        return Err(Error::Singular(format!("α' - α σ'/σ vanishes at t = {t}")));
    }
    let mut out = vec![0.0; x.len()];
    sched.velocity_to_denoiser_into(v_val.data(), x.data(), t, &mut out);
    Array::new(x.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Uniform,
    Power,
}

impl GridKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(GridKind::Uniform),
            "power" => Ok(GridKind::Power),
            other => Err(Error::Config(format!("unknown grid kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Uniform => "uniform",
            GridKind::Power => "power",
        }
    }
}

/// Time discretisation indexed so that `t(M)` is the start and `t(0)` the end.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Builds a grid from times listed by index (`times[i] = t_i`).
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::domain("a time grid needs at least two points"));
        }
        let dir = (times[1] - times[0]).signum();
        if dir == 0.0 || times.windows(2).any(|w| (w[1] - w[0]).signum() != dir) {
            return Err(Error::domain("grid times must be strictly monotone"));
        }
        Ok(Self { times })
    }

    /// `m` steps from `start` (index `m`) to `end` (index 0), spaced uniformly
    /// or in `t^(1/rho)`.
    pub fn between(start: f64, end: f64, m: usize, kind: GridKind, rho: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::domain("grid needs M >= 1"));
        }
        if start == end {
            return Err(Error::domain("grid endpoints coincide"));
        }
        let mut times = Vec::with_capacity(m + 1);
        for i in 0..=m {
            let frac = i as f64 / m as f64;
            let t = match kind {
                GridKind::Uniform => end + frac * (start - end),
                GridKind::Power => {
                    let (a, b) = (start.powf(1.0 / rho), end.powf(1.0 / rho));
                    (a + (1.0 - frac) * (b - a)).powf(rho)
                }
            };
            times.push(t);
        }
        times[0] = end;
        times[m] = start;
        Self::from_times(times)
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `t_i`.
    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Times in integration order, `t_M` first.
    pub fn descending(&self) -> impl Iterator<Item = f64> + '_ {
        self.times.iter().rev().copied()
    }

    /// Same points traversed in the opposite direction.
    pub fn mirrored(&self) -> Self {
        Self {
            times: self.times.iter().rev().copied().collect(),
        }
    }
}

/// Grid from `t_max` down to the schedule's clean endpoint.
pub fn time_grid(sched: &Schedule, m: usize, kind: GridKind) -> Result<TimeGrid> {
    TimeGrid::between(sched.t_max, sched.terminal(), m, kind, sched.rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Array {
        Array::vector(x.to_vec())
    }

    #[test]
    fn perturb_examples() {
        let fm = Schedule::fm();
        assert_eq!(perturb(&fm, &v(&[1.5]), &v(&[9.0]), 0.0).unwrap().data(), &[1.5]);
        assert_eq!(perturb(&fm, &v(&[1.0]), &v(&[-1.0]), 0.5).unwrap().data(), &[0.0]);
        let edm = Schedule::edm();
        assert_eq!(perturb(&edm, &v(&[1.0]), &v(&[2.0]), 3.0).unwrap().data(), &[7.0]);
        assert!(matches!(
            perturb(&edm, &v(&[1.0]), &v(&[2.0]), 11.0),
            Err(Error::Domain(_))
        ));
        assert!(perturb(&edm, &v(&[1.0]), &v(&[2.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn edm_velocity_examples() {
        let edm = Schedule::edm();
        let x = v(&[2.0]);
        assert_eq!(denoiser_to_velocity(&edm, &x, &x, 1.0).unwrap().data(), &[0.0]);
        assert_eq!(denoiser_to_velocity(&edm, &v(&[1.0]), &x, 1.0).unwrap().data(), &[1.0]);
        assert_eq!(velocity_to_denoiser(&edm, &v(&[0.0]), &x, 1.0).unwrap().data(), &[2.0]);
    }

    #[test]
    fn fm_velocity_example() {
        // (-1 - 1) * 1 + 2 * 1
        let fm = Schedule::fm();
        let out = denoiser_to_velocity(&fm, &v(&[1.0]), &v(&[1.0]), 0.5).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn singular_at_sigma_zero() {
        let fm = Schedule::fm();
        assert!(matches!(
            denoiser_to_velocity(&fm, &v(&[1.0]), &v(&[1.0]), 0.0),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn edm_identity_is_exact() {
        let edm = Schedule::edm();
        for &(d, x, t) in &[(0.25, 2.0, 0.5), (-1.0, 3.0, 4.0), (0.125, -0.5, 2.0)] {
            let vel = denoiser_to_velocity(&edm, &v(&[d]), &v(&[x]), t).unwrap();
            assert_eq!(vel.data()[0] * t + d, x);
        }
    }

    #[test]
    fn uniform_fm_grid_of_eight() {
        let g = time_grid(&Schedule::fm(), 8, GridKind::Uniform).unwrap();
        let expected: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
        assert_eq!(g.times(), expected.as_slice());
        assert_eq!(g.descending().next(), Some(1.0));
    }

    #[test]
    fn single_step_grid() {
        let s = Schedule::edm();
        let g = time_grid(&s, 1, GridKind::Power).unwrap();
        assert_eq!(g.times(), &[s.t_min, s.t_max]);
        assert!(time_grid(&s, 0, GridKind::Uniform).is_err());
    }

    #[test]
    fn power_grid_is_monotone_with_exact_endpoints() {
        let s = Schedule::new(ScheduleKind::Edm, 0.002, 80.0, 7.0).unwrap();
        let g = time_grid(&s, 16, GridKind::Power).unwrap();
        assert_eq!(g.t(16), 80.0);
        assert_eq!(g.t(0), 0.002);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        // i = 8: (80^(1/7) + 0.5 (0.002^(1/7) - 80^(1/7)))^7
        let mid = (80f64.powf(1.0 / 7.0) + 0.5 * (0.002f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0))).powi(7);
        assert!((g.t(8) - mid).abs() < 1e-12);
    }

    #[test]
    fn fm_denoiser_coefficient_never_vanishes() {
        // -1 - (1-t)/t = -1/t
        let fm = Schedule::fm();
        for i in 1..100 {
            let t = i as f64 / 100.0;
            assert!((fm.denoiser_coef(t) + 1.0 / t).abs() < 1e-12);
        }
    }
}
