//! Analytic ground truth for Gaussian-mixture data: posterior means, exact
//! drifts, reference flow maps and the oracle consistency losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ConsistencyHead;
use crate::numcore::{sq_dist, Array, RngState};
use crate::schedule::{GridKind, Schedule, ScheduleKind};
use crate::solvers::{DriftModel, DriftSource};

/// Mixture of isotropic Gaussians sharing one per-coordinate variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variance: f64,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::Config("need one weight per mixture mean".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || ((weights.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
            return Err(Error::Config("mixture weights must lie on the simplex".into()));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!(
                "mixture variance must be positive, got {variance}"
            )));
        }
        Ok(Self {
            weights,
            means,
            variance,
        })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self::new(vec![1.0], vec![vec![0.0; dim]], 1.0).expect("valid standard normal")
    }

    /// Equal-weight 1D mixture at `±mu`.
    pub fn symmetric_pair(mu: f64, variance: f64) -> Result<Self> {
        Self::new(vec![0.5, 0.5], vec![vec![-mu], vec![mu]], variance)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Draws `n` clean samples as an `n x dim` array.
    pub fn sample(&self, rng: &mut RngState, n: usize) -> Array {
        let d = self.dim();
        let mut comp_rng = rng.derive("component");
        let mut noise = rng.derive("noise");
        *rng = rng.derive("next");
        let sd = self.variance.sqrt();
        let mut out = vec![0.0; n * d];
        for row in out.chunks_mut(d) {
            let u = comp_rng.uniforms(1)[0];
            let mut k = 0;
            let mut acc = self.weights[0];
            while u >= acc && k + 1 < self.weights.len() {
                k += 1;
                acc += self.weights[k];
            }
            noise.fill_normal(row);
            for (o, m) in row.iter_mut().zip(&self.means[k]) {
                *o = m + sd * *o;
            }
        }
        Array::matrix(n, d, out).expect("consistent shape")
    }

    /// Draws `n` samples of the diffused marginal `p_t`.
    pub fn sample_marginal(&self, sched: &Schedule, rng: &mut RngState, n: usize, t: f64) -> Array {
        let x0 = self.sample(rng, n);
        let mut eps = rng.derive("marginal-eps");
        *rng = rng.derive("next");
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let mut data = x0.into_data();
        let mut noise = vec![0.0; data.len()];
        eps.fill_normal(&mut noise);
        for (x, e) in data.iter_mut().zip(&noise) {
            *x = a * *x + s * e;
        }
        Array::matrix(n, self.dim(), data).expect("consistent shape")
    }

    /// Posterior responsibilities and per-component quantities at one row.
    fn visit_row(&self, sched: &Schedule, x: &[f64], t: f64, mut f: impl FnMut(f64, &[f64], f64, &[f64])) {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let var = a * a * self.variance + s * s;
        let d = x.len();
        let mut diff = vec![0.0; d];
        if self.weights.len() == 1 {
            for ((o, xv), m) in diff.iter_mut().zip(x).zip(&self.means[0]) {
                *o = xv - a * m;
            }
            f(1.0, &self.means[0], var, &diff);
            return;
        }
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let q: f64 = x.iter().zip(m).map(|(xv, mv)| (xv - a * mv).powi(2)).sum();
                if *w > 0.0 {
                    w.ln() - q / (2.0 * var)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        for (m, l) in self.means.iter().zip(&logits) {
            let r = (l - top).exp() / z;
            if r == 0.0 {
                continue;
            }
            for ((o, xv), mv) in diff.iter_mut().zip(x).zip(m) {
                *o = xv - a * mv;
            }
            f(r, m, var, &diff);
        }
    }

    /// `E[x_0 | x_t = x]` for each row of `x` at per-row times.
    pub fn posterior_mean_rows(&self, sched: &Schedule, x: &[f64], t: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for ((row, o), &tr) in x.chunks(d).zip(out.chunks_mut(d)).zip(t) {
            o.fill(0.0);
            let a = sched.alpha(tr);
            let gain_num = a * self.variance;
            self.visit_row(sched, row, tr, |r, m, var, diff| {
                for ((ov, mv), dv) in o.iter_mut().zip(m).zip(diff) {
                    *ov += r * (mv + gain_num / var * dv);
                }
            });
        }
    }

    /// Exact PF-ODE velocity `α' E[x_0|x] + σ' E[ε|x]`; finite at `σ = 0`.
    pub fn velocity_rows(&self, sched: &Schedule, x: &[f64], t: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for ((row, o), &tr) in x.chunks(d).zip(out.chunks_mut(d)).zip(t) {
            o.fill(0.0);
            let (a, s) = (sched.alpha(tr), sched.sigma(tr));
            let (da, ds) = (sched.alpha_prime(tr), sched.sigma_prime(tr));
            let gain_num = da * a * self.variance + ds * s;
            self.visit_row(sched, row, tr, |r, m, var, diff| {
                for ((ov, mv), dv) in o.iter_mut().zip(m).zip(diff) {
                    *ov += r * (da * mv + gain_num / var * dv);
                }
            });
        }
    }

    /// Closed-form flow map, available for a single component only.
    pub fn gaussian_flow_map(&self, sched: &Schedule, x: &[f64], t: f64, u: f64) -> Result<Vec<f64>> {
        if self.weights.len() != 1 {
            return Err(Error::domain("closed-form flow map needs a single Gaussian"));
        }
        let s2 = self.variance;
        let (at, st) = (sched.alpha(t), sched.sigma(t));
        let (au, su) = (sched.alpha(u), sched.sigma(u));
        let scale = ((au * au * s2 + su * su) / (at * at * s2 + st * st)).sqrt();
        let mu = &self.means[0];
        Ok(x.chunks(mu.len())
            .flat_map(|row| {
                row.iter()
                    .zip(mu)
                    .map(|(xv, m)| au * m + (xv - at * m) * scale)
                    .collect::<Vec<_>>()
            })
            .collect())
    }
}

/// `E[x_0 | x_t]` under the mixture.
pub fn posterior_mean(gmm: &GmmSpec, sched: &Schedule, x: &Array, t: f64) -> Result<Array> {
    sched.check_time(t)?;
    check_rows(x, gmm.dim())?;
    let mut out = vec![0.0; x.len()];
    let n = x.len() / gmm.dim();
    gmm.posterior_mean_rows(sched, x.data(), &vec![t; n], &mut out);
    Array::new(x.shape().to_vec(), out)
}

/// Exact drift of the mixture's PF-ODE, with the posterior mean attached as denoiser.
pub fn analytic_drift(gmm: &GmmSpec, sched: &Schedule) -> DriftModel<'static> {
    let (g1, g2, s) = (gmm.clone(), gmm.clone(), *sched);
    let d = gmm.dim();
    DriftModel::from_fn(d, s, DriftSource::AnalyticOracle, move |x, t, out| {
        g1.velocity_rows(&s, x, t, out);
        Ok(())
    })
    .with_denoiser(move |x, t, out| {
        g2.posterior_mean_rows(&s, x, t, out);
        Ok(())
    })
}

fn check_rows(x: &Array, d: usize) -> Result<()> {
    if x.len() % d != 0 {
        return Err(Error::shape(format!("rows of width {d}"), format!("{:?}", x.shape())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceMethod {
    Heun,
    Rk4,
}

/// High-resolution integrator of the exact mixture drift.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFlow {
    pub gmm: GmmSpec,
    pub sched: Schedule,
    pub fine_grid_m: usize,
    pub method: ReferenceMethod,
}

impl ReferenceFlow {
    pub fn new(gmm: GmmSpec, sched: Schedule) -> Self {
        Self {
            gmm,
            sched,
            fine_grid_m: 4096,
            method: ReferenceMethod::Rk4,
        }
    }

    pub fn with_resolution(mut self, m: usize, method: ReferenceMethod) -> Self {
        self.fine_grid_m = m.max(1);
        self.method = method;
        self
    }

    pub fn drift(&self) -> DriftModel<'static> {
        analytic_drift(&self.gmm, &self.sched)
    }

    pub fn dim(&self) -> usize {
        self.gmm.dim()
    }

    /// `Ψ_{t→s}` applied to every row of `x`.
    pub fn flow_map(&self, x: &Array, t: f64, s: f64) -> Result<Array> {
        check_rows(x, self.dim())?;
        let n = x.len() / self.dim();
        let out = self.flow_map_rows(x.data(), &vec![t; n], &vec![s; n])?;
        Array::new(x.shape().to_vec(), out)
    }

    /// `Ψ_{t_r→s_r}` with per-row start and end times.
    pub fn flow_map_rows(&self, x: &[f64], t: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let n = x.len() / d;
        if x.len() != n * d || t.len() != n || s.len() != n {
            return Err(Error::shape(
                format!("{n} rows"),
                format!("{} / {} times", t.len(), s.len()),
            ));
        }
        for (&a, &b) in t.iter().zip(s) {
            self.sched.check_time(a)?;
            self.sched.check_time(b)?;
        }
        let m = self.fine_grid_m;
        let power = self.sched.kind == ScheduleKind::Edm;
        let rho = self.sched.rho;
        let warp: Vec<(f64, f64)> = t
            .iter()
            .zip(s)
            .map(|(&a, &b)| {
                if power {
                    (a.powf(1.0 / rho), b.powf(1.0 / rho))
                } else {
                    (a, b)
                }
            })
            .collect();
        let time_at = |r: usize, k: usize| -> f64 {
            // k counts steps taken from the start
            if k == 0 {
                return t[r];
            }
            if k == m {
                return s[r];
            }
            let (a, b) = warp[r];
            let u = a + (k as f64 / m as f64) * (b - a);
            if power {
                u.powf(rho)
            } else {
                u
            }
        };
        let active: Vec<bool> = t.iter().zip(s).map(|(a, b)| a != b).collect();
        let mut state = x.to_vec();
        let mut t0 = vec![0.0; n];
        let mut t1 = vec![0.0; n];
        let mut tm = vec![0.0; n];
        let mut k1 = vec![0.0; x.len()];
        let mut k2 = vec![0.0; x.len()];
        let mut k3 = vec![0.0; x.len()];
        let mut k4 = vec![0.0; x.len()];
        let mut tmp = vec![0.0; x.len()];
        let gmm = &self.gmm;
        let sched = &self.sched;
        for k in 0..m {
            for r in 0..n {
                t0[r] = time_at(r, k);
                t1[r] = time_at(r, k + 1);
                tm[r] = 0.5 * (t0[r] + t1[r]);
            }
            gmm.velocity_rows(sched, &state, &t0, &mut k1);
            match self.method {
                ReferenceMethod::Heun => {
                    for i in 0..state.len() {
                        tmp[i] = state[i] + (t1[i / d] - t0[i / d]) * k1[i];
                    }
                    gmm.velocity_rows(sched, &tmp, &t1, &mut k2);
                    for i in 0..state.len() {
                        if active[i / d] {
                            state[i] += 0.5 * (t1[i / d] - t0[i / d]) * (k1[i] + k2[i]);
                        }
                    }
                }
                ReferenceMethod::Rk4 => {
                    for i in 0..state.len() {
                        tmp[i] = state[i] + 0.5 * (t1[i / d] - t0[i / d]) * k1[i];
                    }
                    gmm.velocity_rows(sched, &tmp, &tm, &mut k2);
                    for i in 0..state.len() {
                        tmp[i] = state[i] + 0.5 * (t1[i / d] - t0[i / d]) * k2[i];
                    }
                    gmm.velocity_rows(sched, &tmp, &tm, &mut k3);
                    for i in 0..state.len() {
                        tmp[i] = state[i] + (t1[i / d] - t0[i / d]) * k3[i];
                    }
                    gmm.velocity_rows(sched, &tmp, &t1, &mut k4);
                    for i in 0..state.len() {
                        if active[i / d] {
                            let h = t1[i / d] - t0[i / d];
                            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                        }
                    }
                }
            }
        }
        Ok(state)
    }
}

/// Reference flow map `Ψ_{t→s}(x)`.
pub fn reference_flow_map(rf: &ReferenceFlow, x: &Array, t: f64, s: f64) -> Result<Array> {
    rf.flow_map(x, t, s)
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        }
    }

    /// Whether two independent estimates agree within `k` combined standard errors.
    pub fn agrees_with(&self, other: &Self, k: f64) -> bool {
        (self.mean - other.mean).abs() <= k * self.stderr.hypot(other.stderr)
    }
}

/// Evaluation points `(t, x_t)` with their fixed oracle targets `Ψ_{t→t_min}`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSet {
    pub dim: usize,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub target: Vec<f64>,
}

impl OracleSet {
    /// Forward form: `t ~ U[t_min, T]`, `x_t ~ p_t` from the mixture.
    pub fn forward(rf: &ReferenceFlow, rng: &mut RngState, n: usize) -> Result<Self> {
        let sched = rf.sched;
        let d = rf.dim();
        let mut trng = rng.derive("oracle-t");
        let t: Vec<f64> = (0..n)
            .map(|_| trng.uniform_range(sched.terminal(), sched.t_max))
            .collect();
        let x0 = rf.gmm.sample(&mut rng.derive("oracle-x0"), n);
        let mut eps = vec![0.0; n * d];
        rng.derive("oracle-eps").fill_normal(&mut eps);
        *rng = rng.derive("next");
        let mut x = x0.into_data();
        for (r, row) in x.chunks_mut(d).enumerate() {
            let (a, s) = (sched.alpha(t[r]), sched.sigma(t[r]));
            for (xv, e) in row.iter_mut().zip(&eps[r * d..(r + 1) * d]) {
                *xv = a * *xv + s * e;
            }
        }
        let target = rf.flow_map_rows(&x, &t, &vec![sched.terminal(); n])?;
        Ok(Self { dim: d, t, x, target })
    }

    /// Reverse-time form: `x_t = Ψ_{T→t}(x_T)` for prior draws `x_T`, target `Ψ_{T→t_min}(x_T)`.
    pub fn reverse(rf: &ReferenceFlow, prior: &Array, rng: &mut RngState) -> Result<Self> {
        let sched = rf.sched;
        let d = rf.dim();
        check_rows(prior, d)?;
        let n = prior.len() / d;
        let mut trng = rng.derive("oracle-t");
        *rng = rng.derive("next");
        let t: Vec<f64> = (0..n)
            .map(|_| trng.uniform_range(sched.terminal(), sched.t_max))
            .collect();
        let big_t = vec![sched.t_max; n];
        let x = rf.flow_map_rows(prior.data(), &big_t, &t)?;
        let target = rf.flow_map_rows(prior.data(), &big_t, &vec![sched.terminal(); n])?;
        Ok(Self { dim: d, t, x, target })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Per-sample squared errors `‖pred − target‖²`.
    pub fn sq_errors(&self, pred: &[f64]) -> Vec<f64> {
        pred.chunks(self.dim)
            .zip(self.target.chunks(self.dim))
            .map(|(p, q)| sq_dist(p, q))
            .collect()
    }

    pub fn cm_loss(&self, head: &ConsistencyHead) -> Result<McEstimate> {
        let pred = head.eval_batch(&self.x, &self.t)?;
        Ok(McEstimate::from_samples(&self.sq_errors(&pred)))
    }
}

/// Oracle CM loss `E‖f(x_t,t) − Ψ_{t→0}(x_t)‖²` with `x_t ~ p_t`.
pub fn oracle_cm_loss(head: &ConsistencyHead, rf: &ReferenceFlow, t: &[f64], x_t: &Array) -> Result<McEstimate> {
    check_rows(x_t, rf.dim())?;
    let n = t.len();
    let target = rf.flow_map_rows(x_t.data(), t, &vec![rf.sched.terminal(); n])?;
    let set = OracleSet {
        dim: rf.dim(),
        t: t.to_vec(),
        x: x_t.data().to_vec(),
        target,
    };
    set.cm_loss(head)
}

/// Reverse-time form `E‖f(Ψ_{T→t}(x_T), t) − Ψ_{T→0}(x_T)‖²` with `x_T` from the prior.
pub fn oracle_cm_loss_reverse(
    head: &ConsistencyHead,
    rf: &ReferenceFlow,
    t: &[f64],
    x_big_t: &Array,
) -> Result<McEstimate> {
    check_rows(x_big_t, rf.dim())?;
    let n = t.len();
    let big_t = vec![rf.sched.t_max; n];
    let x = rf.flow_map_rows(x_big_t.data(), &big_t, t)?;
    let target = rf.flow_map_rows(x_big_t.data(), &big_t, &vec![rf.sched.terminal(); n])?;
    let set = OracleSet {
        dim: rf.dim(),
        t: t.to_vec(),
        x,
        target,
    };
    set.cm_loss(head)
}

/// Grid used by the reference integrator for a schedule.
pub fn reference_grid_kind(sched: &Schedule) -> GridKind {
    match sched.kind {
        ScheduleKind::Edm => GridKind::Power,
        ScheduleKind::Fm => GridKind::Uniform,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_mean_examples() {
        let g = GmmSpec::standard(1);
        let edm = Schedule::edm();
        let d = posterior_mean(&g, &edm, &Array::vector(vec![2.0]), 1.0).unwrap();
        assert!((d.data()[0] - 1.0).abs() < 1e-14);
        let near = posterior_mean(&g, &edm, &Array::vector(vec![0.7]), edm.t_min).unwrap();
        assert!((near.data()[0] - 0.7).abs() < 1e-5);
        let pair = GmmSpec::symmetric_pair(2.0, 0.1).unwrap();
        let z = posterior_mean(&pair, &edm, &Array::vector(vec![0.0]), 3.0).unwrap();
        assert_eq!(z.data()[0], 0.0);
    }

    #[test]
    fn drift_examples() {
        let g = GmmSpec::standard(1);
        let v = analytic_drift(&g, &Schedule::edm());
        assert!((v.velocity(&[2.0], 1.0).unwrap()[0] - 1.0).abs() < 1e-14);
        let pair = GmmSpec::symmetric_pair(1.5, 0.2).unwrap();
        assert_eq!(
            analytic_drift(&pair, &Schedule::edm()).velocity(&[0.0], 2.0).unwrap()[0],
            0.0
        );
        let fm = analytic_drift(&g, &Schedule::fm());
        for x in [-2.0, 0.3, 5.0] {
            assert!(fm.velocity(&[x], 0.5).unwrap()[0].abs() < 1e-14);
        }
        // finite at the clean end of FM
        assert!(fm.velocity(&[1.0], 0.0).unwrap()[0].is_finite());
    }

    #[test]
    fn reference_flow_hits_closed_form() {
        let g = GmmSpec::standard(1);
        let rf = ReferenceFlow::new(g.clone(), Schedule::edm());
        let x = Array::vector(vec![2.0]);
        let out = rf.flow_map(&x, 1.0, 0.002).unwrap();
        let want = 2.0f64.sqrt() * (1.0 + 0.002f64 * 0.002).sqrt();
        assert!((out.data()[0] - want).abs() < 1e-8, "{}", out.data()[0] - want);
        for (t, s) in [(10.0, 0.002), (10.0, 1.0), (0.5, 7.0)] {
            let got = rf.flow_map(&x, t, s).unwrap().data()[0];
            let want = g.gaussian_flow_map(&Schedule::edm(), &[2.0], t, s).unwrap()[0];
            assert!((got - want).abs() < 1e-10);
        }
        let same = rf.flow_map(&x, 3.0, 3.0).unwrap();
        assert_eq!(same.data(), x.data());
    }

    #[test]
    fn mc_estimate_basics() {
        let e = McEstimate::from_samples(&[1.0, 3.0]);
        assert_eq!(e.mean, 2.0);
        assert!((e.stderr - 1.0).abs() < 1e-15);
    }
}
