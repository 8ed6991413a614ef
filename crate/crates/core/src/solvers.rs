//! Deterministic PF-ODE integrators: Euler, Heun and the data-prediction
//! multistep exponential integrator of orders 1-3, plus trajectory recording.
//!
//! States are batches (`n x dim`); one drift evaluation on the whole batch
//! counts as one NFE of every trajectory in it.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::heads::{AvgDriftHead, DenoiserHead, VelocityHead};
use crate::numcore::Array;
use crate::schedule::{GridKind, Schedule, ScheduleKind, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DriftSource {
    TeacherDenoiser,
    TeacherVelocity,
    AnalyticOracle,
    Custom,
}

type EvalFn<'a> = dyn Fn(&[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'a;

/// Velocity field `v(x, t)` of a PF-ODE, optionally with a direct denoiser.
///
/// Evaluators receive a batch of rows and one time per row.
pub struct DriftModel<'a> {
    dim: usize,
    sched: Schedule,
    source: DriftSource,
    velocity: Box<EvalFn<'a>>,
    denoiser: Option<Box<EvalFn<'a>>>,
}

impl<'a> DriftModel<'a> {
    /// Wraps a batched velocity closure `(x, t_per_row, out)`.
    pub fn from_fn<F>(dim: usize, sched: Schedule, source: DriftSource, velocity: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'a,
    {
        Self {
            dim,
            sched,
            source,
            velocity: Box::new(velocity),
            denoiser: None,
        }
    }

    /// Wraps a batched denoiser closure; the velocity follows from the schedule.
    pub fn from_denoiser_fn<F>(dim: usize, sched: Schedule, source: DriftSource, denoiser: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync + Clone + 'a,
    {
        let d2 = denoiser.clone();
        let velocity = move |x: &[f64], t: &[f64], out: &mut [f64]| {
            let mut d = vec![0.0; x.len()];
            d2(x, t, &mut d)?;
            for (r, &tr) in t.iter().enumerate() {
                let span = r * dim..(r + 1) * dim;
                sched.denoiser_to_velocity_into(&d[span.clone()], &x[span.clone()], tr, &mut out[span]);
            }
            Ok(())
        };
        Self {
            dim,
            sched,
            source,
            velocity: Box::new(velocity),
            denoiser: Some(Box::new(denoiser)),
        }
    }

    /// Attaches a direct denoiser used by data-prediction solvers.
    pub fn with_denoiser<F>(mut self, denoiser: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'a,
    {
        self.denoiser = Some(Box::new(denoiser));
        self
    }

    pub fn zero(dim: usize, sched: Schedule) -> Self {
        Self::from_fn(dim, sched, DriftSource::Custom, |_, _, out| {
            out.fill(0.0);
            Ok(())
        })
    }

    /// Teacher drift from a trained denoiser.
    pub fn from_denoiser(head: &'a DenoiserHead) -> Self {
        let sched = *head.schedule();
        Self::from_denoiser_fn(head.dim(), sched, DriftSource::TeacherDenoiser, move |x, t, out| {
            out.copy_from_slice(&head.eval_batch(x, t)?);
            Ok(())
        })
    }

    /// Teacher drift from a trained velocity field.
    pub fn from_velocity(head: &'a VelocityHead) -> Self {
        Self::from_fn(
            head.dim(),
            head.sched,
            DriftSource::TeacherVelocity,
            move |x, t, out| {
                out.copy_from_slice(&head.eval_batch(x, t)?);
                Ok(())
            },
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schedule(&self) -> &Schedule {
        &self.sched
    }

    pub fn source(&self) -> DriftSource {
        self.source
    }

    fn check(&self, x: &[f64], t: &[f64], out: &[f64]) -> Result<()> {
        if x.len() != t.len() * self.dim || out.len() != x.len() {
            return Err(Error::shape(
                format!("{} rows of width {}", t.len(), self.dim),
                format!("{} inputs / {} outputs", x.len(), out.len()),
            ));
        }
        Ok(())
    }

    /// Velocity with one time per row.
    pub fn velocity_rows_into(&self, x: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(x, t, out)?;
        (self.velocity)(x, t, out)
    }

    pub fn velocity_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.velocity_rows_into(x, &vec![t; x.len() / self.dim.max(1)], out)
    }

    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.velocity_into(x, t, &mut out)?;
        Ok(out)
    }

    /// Data prediction `D(x, t)` with one time per row; derived from the
    /// velocity when no denoiser is attached.
    pub fn denoise_rows_into(&self, x: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(x, t, out)?;
        match &self.denoiser {
            Some(d) => d(x, t, out),
            None => {
                if let Some(&bad) = t.iter().find(|&&tr| self.sched.sigma(tr) <= 0.0) {
                    return Err(Error::Singular(format!("data prediction at σ({bad}) = 0")));
                }
                let mut v = vec![0.0; x.len()];
                self.velocity_rows_into(x, t, &mut v)?;
                let dim = self.dim;
                for (r, &tr) in t.iter().enumerate() {
                    let span = r * dim..(r + 1) * dim;
                    self.sched
                        .velocity_to_denoiser_into(&v[span.clone()], &x[span.clone()], tr, &mut out[span]);
                }
                Ok(())
            }
        }
    }

    pub fn denoise_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.denoise_rows_into(x, &vec![t; x.len() / self.dim.max(1)], out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SolverMethod {
    Euler,
    Heun,
    /// Data-prediction multistep of order `order`; the first `order - 1` steps
    /// bootstrap at `warmup_cost` NFEs each (1: lower-order steps, 2: Heun).
    Multistep {
        order: usize,
        warmup_cost: usize,
    },
}

impl SolverMethod {
    pub fn parse(name: &str, order: usize, warmup_cost: usize) -> Result<Self> {
        match name {
            "euler" => Ok(SolverMethod::Euler),
            "heun" => Ok(SolverMethod::Heun),
            "multistep" | "dpm" => {
                if !(1..=3).contains(&order) || !(1..=2).contains(&warmup_cost) {
                    return Err(Error::Config(format!(
                        "multistep order must be 1-3 and warmup cost 1-2, got {order}/{warmup_cost}"
                    )));
                }
                Ok(SolverMethod::Multistep { order, warmup_cost })
            }
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Heun => "heun",
            SolverMethod::Multistep { .. } => "multistep",
        }
    }

    /// Nominal global order.
    pub fn order(&self) -> usize {
        match self {
            SolverMethod::Euler => 1,
            SolverMethod::Heun => 2,
            SolverMethod::Multistep { order, .. } => *order,
        }
    }

    /// NFEs spent on an `m`-step trajectory: `M + (s-1)(k-1)` for multistep.
    pub fn trajectory_nfes(&self, m: usize) -> usize {
        match *self {
            SolverMethod::Euler => m,
            SolverMethod::Heun => 2 * m,
            SolverMethod::Multistep { order, warmup_cost } => {
                let boot = (order - 1).min(m);
                boot * warmup_cost + (m - boot)
            }
        }
    }
}

fn euler_into(drift: &DriftModel, x: &[f64], t: f64, s: f64, nfe: &mut usize) -> Result<Vec<f64>> {
    if s == t {
        return Ok(x.to_vec());
    }
    let v = drift.velocity(x, t)?;
    *nfe += 1;
    Ok(x.iter().zip(&v).map(|(a, b)| a + (s - t) * b).collect())
}

fn heun_from(drift: &DriftModel, x: &[f64], v_t: &[f64], t: f64, s: f64, nfe: &mut usize) -> Result<Vec<f64>> {
    let pred: Vec<f64> = x.iter().zip(v_t).map(|(a, b)| a + (s - t) * b).collect();
    let v_s = drift.velocity(&pred, s)?;
    *nfe += 1;
    Ok(x.iter()
        .zip(v_t)
        .zip(&v_s)
        .map(|((a, b), c)| a + 0.5 * (s - t) * (b + c))
        .collect())
}

fn heun_into(drift: &DriftModel, x: &[f64], t: f64, s: f64, nfe: &mut usize) -> Result<Vec<f64>> {
    if s == t {
        return Ok(x.to_vec());
    }
    let v_t = drift.velocity(x, t)?;
    *nfe += 1;
    heun_from(drift, x, &v_t, t, s, nfe)
}

/// `x + (s - t) v(x, t)`.
pub fn euler_step(drift: &DriftModel, x: &Array, t: f64, s: f64) -> Result<Array> {
    let out = euler_into(drift, x.data(), t, s, &mut 0)?;
    Array::new(x.shape().to_vec(), out)
}

/// Explicit trapezoidal (Heun) step; two drift evaluations.
pub fn heun_step(drift: &DriftModel, x: &Array, t: f64, s: f64) -> Result<Array> {
    let out = heun_into(drift, x.data(), t, s, &mut 0)?;
    Array::new(x.shape().to_vec(), out)
}

/// History of a multistep integration: previous `(t, D)` pairs, newest last.
#[derive(Clone, Debug, PartialEq)]
pub struct MultistepState {
    pub order: usize,
    pub warmup_cost: usize,
    history: Vec<(f64, Vec<f64>)>,
}

impl MultistepState {
    pub fn new(order: usize, warmup_cost: usize) -> Result<Self> {
        if !(1..=3).contains(&order) || !(1..=2).contains(&warmup_cost) {
            return Err(Error::domain(format!(
                "multistep order {order} / warmup cost {warmup_cost} unsupported"
            )));
        }
        Ok(Self {
            order,
            warmup_cost,
            history: Vec::new(),
        })
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }
}

fn lambda(sched: &Schedule, t: f64) -> f64 {
    (sched.alpha(t) / sched.sigma(t)).ln()
}

fn multistep_into(
    drift: &DriftModel,
    mut ms: MultistepState,
    x: &[f64],
    t: f64,
    s: f64,
    nfe: &mut usize,
) -> Result<(Vec<f64>, MultistepState)> {
    let sched = *drift.schedule();
    if sched.kind != ScheduleKind::Edm {
        return Err(Error::domain("multistep solver is restricted to EDM schedules"));
    }
    if sched.sigma(t) <= 0.0 || sched.sigma(s) <= 0.0 {
        return Err(Error::domain("multistep solver needs σ > 0 at both ends"));
    }
    if s == t {
        return Err(Error::domain("multistep step of zero length"));
    }
    let dir = (s - t).signum();
    let mut prev = t;
    for &(th, _) in ms.history.iter().rev() {
        if (prev - th).signum() != dir {
            return Err(Error::domain("multistep history times are not monotone with the step"));
        }
        prev = th;
    }

    let mut d0 = vec![0.0; x.len()];
    drift.denoise_into(x, t, &mut d0)?;
    *nfe += 1;

    let k = ms.order;
    let bootstrapping = ms.history.len() + 1 < k;
    let out = if bootstrapping && ms.warmup_cost == 2 {
        let mut v_t = vec![0.0; x.len()];
        sched.denoiser_to_velocity_into(&d0, x, t, &mut v_t);
        heun_from(drift, x, &v_t, t, s, nfe)?
    } else {
        let eff = k.min(ms.history.len() + 1);
        let (lt, ls) = (lambda(&sched, t), lambda(&sched, s));
        let h = ls - lt;
        let ratio = sched.sigma(s) / sched.sigma(t);
        let a_s = sched.alpha(s);
        let phi1 = (-h).exp_m1(); // e^{-h} - 1
        let mut out: Vec<f64> = x.iter().zip(&d0).map(|(xv, dv)| ratio * xv - a_s * phi1 * dv).collect();
        match eff {
            1 => {}
            2 => {
                let (t1, d1) = &ms.history[ms.history.len() - 1];
                let r0 = (lt - lambda(&sched, *t1)) / h;
                for ((o, a), b) in out.iter_mut().zip(&d0).zip(d1) {
                    *o -= 0.5 * a_s * phi1 * (a - b) / r0;
                }
            }
            _ => {
                let (t1, d1) = &ms.history[ms.history.len() - 1];
                let (t2, d2) = &ms.history[ms.history.len() - 2];
                let (l1, l2) = (lambda(&sched, *t1), lambda(&sched, *t2));
                let r0 = (lt - l1) / h;
                let r1 = (l1 - l2) / h;
                let c1 = phi1 / h + 1.0;
                let c2 = (phi1 + h) / (h * h) - 0.5;
                for (i, o) in out.iter_mut().enumerate() {
                    let d1_0 = (d0[i] - d1[i]) / r0;
                    let d1_1 = (d1[i] - d2[i]) / r1;
                    let first = d1_0 + r0 / (r0 + r1) * (d1_0 - d1_1);
                    // ≈ h² D'', so its weight is the full third φ-integral
                    let second = 2.0 * (d1_0 - d1_1) / (r0 + r1);
                    *o += a_s * c1 * first - a_s * c2 * second;
                }
            }
        }
        out
    };
    ms.history.push((t, d0));
    if ms.history.len() > k.saturating_sub(1) {
        let drop = ms.history.len() - k.saturating_sub(1);
        ms.history.drain(..drop);
    }
    Ok((out, ms))
}

/// One step of the multistep integrator; returns the new state and history.
pub fn multistep_step(
    drift: &DriftModel,
    ms: MultistepState,
    x: &Array,
    t: f64,
    s: f64,
) -> Result<(Array, MultistepState)> {
    let (out, ms) = multistep_into(drift, ms, x.data(), t, s, &mut 0)?;
    Ok((Array::new(x.shape().to_vec(), out)?, ms))
}

/// Integrates each row from `t[r]` to `s[r]` in `substeps` uniform Euler or
/// Heun steps; returns the end states and the NFEs spent per row.
pub fn integrate_rows(
    drift: &DriftModel,
    x: &[f64],
    t: &[f64],
    s: &[f64],
    substeps: usize,
    method: SolverMethod,
) -> Result<(Vec<f64>, usize)> {
    let d = drift.dim();
    if x.len() != t.len() * d || s.len() != t.len() {
        return Err(Error::shape(format!("{} rows", t.len()), format!("{} values", x.len())));
    }
    if substeps == 0 {
        if t != s {
            return Err(Error::domain("zero substeps need coinciding start and end times"));
        }
        return Ok((x.to_vec(), 0));
    }
    let heun = match method {
        SolverMethod::Euler => false,
        SolverMethod::Heun => true,
        SolverMethod::Multistep { .. } => {
            return Err(Error::Config("per-row integration supports euler and heun only".into()))
        }
    };
    let mut state = x.to_vec();
    let mut v0 = vec![0.0; x.len()];
    let mut v1 = vec![0.0; x.len()];
    let mut pred = vec![0.0; x.len()];
    let mut ta = vec![0.0; t.len()];
    let mut tb = vec![0.0; t.len()];
    let mut nfe = 0;
    for k in 0..substeps {
        for r in 0..t.len() {
            ta[r] = t[r] + (s[r] - t[r]) * (k as f64 / substeps as f64);
            tb[r] = if k + 1 == substeps {
                s[r]
            } else {
                t[r] + (s[r] - t[r]) * ((k + 1) as f64 / substeps as f64)
            };
        }
        drift.velocity_rows_into(&state, &ta, &mut v0)?;
        nfe += 1;
        if heun {
            for i in 0..state.len() {
                pred[i] = state[i] + (tb[i / d] - ta[i / d]) * v0[i];
            }
            drift.velocity_rows_into(&pred, &tb, &mut v1)?;
            nfe += 1;
            for i in 0..state.len() {
                state[i] += 0.5 * (tb[i / d] - ta[i / d]) * (v0[i] + v1[i]);
            }
        } else {
            for i in 0..state.len() {
                state[i] += (tb[i / d] - ta[i / d]) * v0[i];
            }
        }
    }
    Ok((state, nfe))
}

/// Solver states at every grid point, `states[i]` at `t_i`; `states[M]` is the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Array>,
    /// Teacher evaluations spent per trajectory.
    pub teacher_nfes: usize,
}

impl Trajectory {
    pub fn anchor(&self) -> &Array {
        &self.states[self.grid.steps()]
    }

    pub fn endpoint(&self) -> &Array {
        &self.states[0]
    }

    pub fn n_anchors(&self) -> usize {
        self.states[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.states[0].cols()
    }

    /// CSV with header `anchor,i,t,teacher_nfes,x0,..`; rows ordered by anchor then `i` descending.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let dim = self.dim();
        let mut line = String::from("anchor,i,t,teacher_nfes");
        for k in 0..dim {
            let _ = write!(line, ",x{k}");
        }
        writeln!(w, "{line}")?;
        for a in 0..self.n_anchors() {
            for i in (0..=self.grid.steps()).rev() {
                line.clear();
                let _ = write!(line, "{a},{i},{},{}", self.grid.t(i), self.teacher_nfes);
                for v in self.states[i].row(a) {
                    let _ = write!(line, ",{v}");
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    /// Parses the format written by [`Trajectory::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty trajectory file".into()))?
            .map_err(|e| Error::Format(e.to_string()))?;
        let dim = header.split(',').count().saturating_sub(4);
        if dim == 0 || !header.starts_with("anchor,i,t,teacher_nfes") {
            return Err(Error::Format("bad trajectory header".into()));
        }
        let mut rows: Vec<(usize, usize, f64, usize, Vec<f64>)> = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != dim + 4 {
                return Err(Error::Format(format!("bad trajectory row `{line}`")));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
            let u = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad index `{s}`")))
            };
            let xs = f[4..].iter().map(|s| p(s)).collect::<Result<Vec<_>>>()?;
            rows.push((u(f[0])?, u(f[1])?, p(f[2])?, u(f[3])?, xs));
        }
        let n_anchors = rows.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
        let m = rows.iter().map(|r| r.1).max().unwrap_or(0);
        if n_anchors == 0 || rows.len() != n_anchors * (m + 1) {
            return Err(Error::Format("incomplete trajectory file".into()));
        }
        let mut times = vec![f64::NAN; m + 1];
        let mut states = vec![vec![0.0; n_anchors * dim]; m + 1];
        let nfes = rows[0].3;
        for (a, i, t, _, xs) in rows {
            times[i] = t;
            states[i][a * dim..(a + 1) * dim].copy_from_slice(&xs);
        }
        let grid = TimeGrid::from_times(times)?;
        let states = states
            .into_iter()
            .map(|d| Array::matrix(n_anchors, dim, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            states,
            teacher_nfes: nfes,
        })
    }
}

fn as_batch(x: &Array, dim: usize) -> Result<Array> {
    if dim == 0 || x.len() % dim != 0 {
        return Err(Error::shape(format!("rows of width {dim}"), format!("{:?}", x.shape())));
    }
    Array::matrix(x.len() / dim, dim, x.data().to_vec())
}

/// Integrates from `grid.t(M)` to `grid.t(0)` recording every state.
pub fn solve(drift: &DriftModel, grid: &TimeGrid, x_start: &Array, method: SolverMethod) -> Result<Trajectory> {
    let start = as_batch(x_start, drift.dim())?;
    let (rows, dim) = (start.rows(), start.cols());
    let m = grid.steps();
    let mut states = vec![Array::zeros(vec![rows, dim]); m + 1];
    states[m] = start;
    let mut nfe = 0;
    let mut ms = match method {
        SolverMethod::Multistep { order, warmup_cost } => Some(MultistepState::new(order, warmup_cost)?),
        _ => None,
    };
    for i in (1..=m).rev() {
        let (t, s) = (grid.t(i), grid.t(i - 1));
        let x = states[i].data();
        let next = match method {
            SolverMethod::Euler => euler_into(drift, x, t, s, &mut nfe)?,
            SolverMethod::Heun => heun_into(drift, x, t, s, &mut nfe)?,
            SolverMethod::Multistep { .. } => {
                let (out, next_ms) = multistep_into(drift, ms.take().unwrap(), x, t, s, &mut nfe)?;
                ms = Some(next_ms);
                out
            }
        };
        states[i - 1] = Array::matrix(rows, dim, next)?;
    }
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        teacher_nfes: nfe,
    })
}

/// Integrates `t -> s` on a uniform `m`-step grid and back on the mirrored grid.
pub fn round_trip(drift: &DriftModel, x: &Array, t: f64, s: f64, m: usize, method: SolverMethod) -> Result<Array> {
    if t == s {
        return Err(Error::domain("round trip needs t != s"));
    }
    let there = TimeGrid::between(t, s, m, GridKind::Uniform, 1.0)?;
    let out = solve(drift, &there, x, method)?;
    let back = solve(drift, &there.mirrored(), out.endpoint(), method)?;
    Array::new(x.shape().to_vec(), back.endpoint().data().to_vec())
}

/// Deterministic multi-step sampler of a mean-flow model along `grid`, usable
/// as a teacher trajectory.
pub fn meanflow_trajectory(head: &AvgDriftHead, grid: &TimeGrid, x_start: &Array) -> Result<Trajectory> {
    let start = as_batch(x_start, head.dim())?;
    let (rows, dim) = (start.rows(), start.cols());
    let m = grid.steps();
    let mut states = vec![Array::zeros(vec![rows, dim]); m + 1];
    states[m] = start;
    for i in (1..=m).rev() {
        let (t, s) = (grid.t(i), grid.t(i - 1));
        let next = head.flowmap_batch(states[i].data(), &vec![t; rows], &vec![s; rows])?;
        states[i - 1] = Array::matrix(rows, dim, next)?;
    }
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        teacher_nfes: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_edm() -> DriftModel<'static> {
        // N(0,1) data: v = x t / (1 + t^2)
        DriftModel::from_fn(1, Schedule::edm(), DriftSource::AnalyticOracle, |x, t, out| {
            for ((o, v), t) in out.iter_mut().zip(x).zip(t) {
                *o = v * t / (1.0 + t * t);
            }
            Ok(())
        })
    }

    fn linear() -> DriftModel<'static> {
        DriftModel::from_fn(1, Schedule::fm(), DriftSource::Custom, |x, _, out| {
            out.copy_from_slice(x);
            Ok(())
        })
    }

    fn constant(c: f64) -> DriftModel<'static> {
        DriftModel::from_fn(1, Schedule::fm(), DriftSource::Custom, move |_, _, out| {
            out.fill(c);
            Ok(())
        })
    }

    fn v(x: f64) -> Array {
        Array::vector(vec![x])
    }

    #[test]
    fn euler_examples() {
        let zero = DriftModel::zero(1, Schedule::edm());
        assert_eq!(euler_step(&zero, &v(1.5), 2.0, 1.0).unwrap().data(), &[1.5]);
        assert_eq!(euler_step(&gaussian_edm(), &v(2.0), 1.0, 0.5).unwrap().data(), &[1.5]);
        assert_eq!(euler_step(&gaussian_edm(), &v(2.0), 1.0, 1.0).unwrap().data(), &[2.0]);
    }

    #[test]
    fn heun_examples() {
        assert_eq!(heun_step(&linear(), &v(1.0), 0.0, 1.0).unwrap().data(), &[2.5]);
        assert_eq!(euler_step(&linear(), &v(1.0), 0.0, 1.0).unwrap().data(), &[2.0]);
        assert_eq!(
            heun_step(&constant(0.75), &v(1.0), 0.8, 0.3).unwrap().data(),
            &[1.0 - 0.5 * 0.75]
        );
    }

    #[test]
    fn first_order_multistep_is_euler() {
        let d = gaussian_edm();
        for &(x, t, s) in &[(2.0, 1.0, 0.5), (-0.3, 9.0, 7.5), (1.1, 0.1, 0.002)] {
            let ms = MultistepState::new(1, 1).unwrap();
            let (a, _) = multistep_step(&d, ms, &v(x), t, s).unwrap();
            let b = euler_step(&d, &v(x), t, s).unwrap();
            assert!((a.data()[0] - b.data()[0]).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn multistep_nfe_accounting() {
        let d = gaussian_edm();
        let grid = crate::schedule::time_grid(&Schedule::edm(), 16, GridKind::Power).unwrap();
        for order in 1..=3 {
            for warm in 1..=2 {
                let method = SolverMethod::Multistep {
                    order,
                    warmup_cost: warm,
                };
                let traj = solve(&d, &grid, &v(3.0), method).unwrap();
                assert_eq!(traj.teacher_nfes, 16 + (warm - 1) * (order - 1));
                assert_eq!(traj.teacher_nfes, method.trajectory_nfes(16));
            }
        }
        let m = SolverMethod::Multistep {
            order: 3,
            warmup_cost: 2,
        };
        assert_eq!(m.trajectory_nfes(16), 18);
    }

    #[test]
    fn multistep_rejects_fm_and_non_monotone_history() {
        let fm = DriftModel::zero(1, Schedule::fm());
        assert!(multistep_step(&fm, MultistepState::new(2, 1).unwrap(), &v(1.0), 0.5, 0.4).is_err());
        let d = gaussian_edm();
        let (x, ms) = multistep_step(&d, MultistepState::new(3, 1).unwrap(), &v(1.0), 2.0, 1.0).unwrap();
        assert!(multistep_step(&d, ms, &x, 1.0, 1.5).is_err());
    }

    #[test]
    fn single_step_euler_solve_matches_step() {
        let d = gaussian_edm();
        let grid = TimeGrid::between(3.0, 1.0, 1, GridKind::Uniform, 1.0).unwrap();
        let traj = solve(&d, &grid, &v(2.0), SolverMethod::Euler).unwrap();
        assert_eq!(
            traj.endpoint().data(),
            euler_step(&d, &v(2.0), 3.0, 1.0).unwrap().data()
        );
        assert_eq!(traj.states.len(), 2);
        assert_eq!(traj.anchor().data(), &[2.0]);
    }

    #[test]
    fn per_row_integration_matches_steps() {
        let d = gaussian_edm();
        let x = [2.0, -1.0];
        let (out, nfe) = integrate_rows(&d, &x, &[1.0, 4.0], &[0.5, 3.0], 1, SolverMethod::Euler).unwrap();
        assert_eq!(nfe, 1);
        assert_eq!(out[0], 1.5);
        assert_eq!(out[1], euler_step(&d, &v(-1.0), 4.0, 3.0).unwrap().data()[0]);
        let (h, nfe) = integrate_rows(&d, &x, &[1.0, 4.0], &[0.5, 3.0], 1, SolverMethod::Heun).unwrap();
        assert_eq!(nfe, 2);
        assert_eq!(h[1], heun_step(&d, &v(-1.0), 4.0, 3.0).unwrap().data()[0]);
        assert!(integrate_rows(&d, &x, &[1.0, 4.0], &[0.5, 3.0], 0, SolverMethod::Heun).is_err());
        let (same, nfe) = integrate_rows(&d, &x, &[1.0, 4.0], &[1.0, 4.0], 0, SolverMethod::Heun).unwrap();
        assert_eq!((same.as_slice(), nfe), (&x[..], 0));
    }

    #[test]
    fn zero_drift_round_trip_is_identity() {
        let zero = DriftModel::zero(1, Schedule::edm());
        let out = round_trip(&zero, &v(0.7), 5.0, 0.5, 10, SolverMethod::Heun).unwrap();
        assert_eq!(out.data(), &[0.7]);
    }

    #[test]
    fn csv_round_trip() {
        let d = gaussian_edm();
        let grid = crate::schedule::time_grid(&Schedule::edm(), 4, GridKind::Power).unwrap();
        let x = Array::matrix(2, 1, vec![1.0, -2.5]).unwrap();
        let traj = solve(&d, &grid, &x, SolverMethod::Heun).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
    }
}
