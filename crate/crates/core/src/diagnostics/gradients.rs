//! Bias, variance and mean squared error of consistency-training gradients
//! measured against the oracle gradient on a Gaussian-mixture testbed.
//!
//! All three quantities are unbiased U-statistics over per-sample gradients.
//! Samples are split into groups and standard errors come from a
//! delete-one-group jackknife, so no per-sample gradient is stored.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::ConsistencyHead;
use crate::numcore::{dot, norm_sq, NetParams, RngState};
use crate::oracle::{analytic_drift, GmmSpec, McEstimate, OracleSet, ReferenceFlow};
use crate::schedule::Schedule;
use crate::solvers::{integrate_rows, DriftModel, SolverMethod};
use crate::training::{train_observed, Dataset, Stage, Teacher, TrainConfig};

pub const MIN_GRAD_SAMPLES: usize = 100;
const JACKKNIFE_GROUPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradStats {
    /// `‖E g_oracle − E g_cm‖²`.
    pub bias_sq: f64,
    /// `E‖g_cm − E g_cm‖²`.
    pub variance: f64,
    /// `E‖g_cm − ∇L_oracle‖²`, estimated against an independent oracle sample.
    pub mse: f64,
    pub n_samples: usize,
    pub stderr_bias: f64,
    pub stderr_var: f64,
    pub stderr_mse: f64,
    /// Jackknife standard error of `mse − (bias_sq + variance)`.
    pub stderr_gap: f64,
}

impl GradStats {
    pub fn decomposition_gap(&self) -> f64 {
        self.mse - (self.bias_sq + self.variance)
    }

    /// Whether `mse` matches `bias_sq + variance` within `k` standard errors.
    pub fn decomposition_holds(&self, k: f64) -> bool {
        self.decomposition_gap().abs() <= k * self.stderr_gap
    }
}

/// Per-sample gradients for one index of the estimator.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub cm: Vec<f64>,
    /// Oracle gradient on the same draw as `cm`.
    pub oracle: Vec<f64>,
    /// Oracle gradient on an independent draw.
    pub oracle_indep: Vec<f64>,
}

/// Per-group sums of a vector statistic and of its squared norm.
struct Channel {
    sums: Vec<Vec<f64>>,
    sq: Vec<f64>,
    count: Vec<usize>,
}

impl Channel {
    fn new(groups: usize) -> Self {
        Self {
            sums: vec![Vec::new(); groups],
            sq: vec![0.0; groups],
            count: vec![0; groups],
        }
    }

    fn push(&mut self, g: usize, v: &[f64]) -> Result<()> {
        let s = &mut self.sums[g];
        if s.is_empty() {
            s.resize(v.len(), 0.0);
        } else if s.len() != v.len() {
            return Err(Error::shape(s.len(), v.len()));
        }
        for (a, b) in s.iter_mut().zip(v) {
            *a += b;
        }
        self.sq[g] += norm_sq(v);
        self.count[g] += 1;
        Ok(())
    }

    /// `(Σ v, Σ ‖v‖², n)` over all groups except `skip`.
    fn totals(&self, skip: Option<usize>) -> (Vec<f64>, f64, f64) {
        let p = self.sums.iter().map(Vec::len).max().unwrap_or(0);
        let mut s = vec![0.0; p];
        let (mut q, mut n) = (0.0, 0usize);
        for g in 0..self.sums.len() {
            if Some(g) == skip {
                continue;
            }
            for (a, b) in s.iter_mut().zip(&self.sums[g]) {
                *a += b;
            }
            q += self.sq[g];
            n += self.count[g];
        }
        (s, q, n as f64)
    }
}

/// Unbiased `‖E v‖²`.
fn mean_sq_norm(s: &[f64], q: f64, n: f64) -> f64 {
    (dot(s, s) - q) / (n * (n - 1.0))
}

/// Unbiased `E‖v − E v‖²`.
fn trace_var(s: &[f64], q: f64, n: f64) -> f64 {
    (q - dot(s, s) / n) / (n - 1.0)
}

fn jackknife<F>(groups: usize, f: F) -> Estimate
where
    F: Fn(Option<usize>) -> f64,
{
    let value = f(None);
    let loo: Vec<f64> = (0..groups).map(|g| f(Some(g))).collect();
    let k = groups as f64;
    let mean = loo.iter().sum::<f64>() / k;
    let var = (k - 1.0) / k * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    Estimate {
        value,
        stderr: var.sqrt(),
    }
}

fn group_count(n: usize) -> Result<usize> {
    if n < MIN_GRAD_SAMPLES {
        return Err(Error::domain(format!(
            "gradient statistics need at least {MIN_GRAD_SAMPLES} samples, got {n}"
        )));
    }
    Ok(JACKKNIFE_GROUPS.min(n / 2))
}

/// `‖E[g_oracle − g_cm]‖²` from paired per-sample gradients.
pub fn grad_bias<F>(n: usize, mut pair: F) -> Result<Estimate>
where
    F: FnMut(usize) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let k = group_count(n)?;
    let mut d = Channel::new(k);
    for i in 0..n {
        let (cm, oracle) = pair(i)?;
        d.push(i % k, &diff(&cm, &oracle)?)?;
    }
    Ok(jackknife(k, |skip| {
        let (s, q, m) = d.totals(skip);
        mean_sq_norm(&s, q, m)
    }))
}

/// Trace of the per-sample gradient covariance.
pub fn grad_variance<F>(n: usize, mut grad: F) -> Result<Estimate>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let k = group_count(n)?;
    let mut c = Channel::new(k);
    for i in 0..n {
        c.push(i % k, &grad(i)?)?;
    }
    Ok(jackknife(k, |skip| {
        let (s, q, m) = c.totals(skip);
        trace_var(&s, q, m)
    }))
}

fn mse_from(c: &Channel, o: &Channel, skip: Option<usize>) -> f64 {
    let (sc, gc, n) = c.totals(skip);
    let (so, ho, no) = o.totals(skip);
    gc / n - 2.0 * dot(&sc, &so) / (n * no) + mean_sq_norm(&so, ho, no)
}

/// `E‖g_cm − E g_oracle‖²` from `(g_cm, g_oracle)` pairs on independent draws.
pub fn grad_mse<F>(n: usize, mut pair: F) -> Result<Estimate>
where
    F: FnMut(usize) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let k = group_count(n)?;
    let (mut c, mut o) = (Channel::new(k), Channel::new(k));
    for i in 0..n {
        let (cm, oracle) = pair(i)?;
        c.push(i % k, &cm)?;
        o.push(i % k, &oracle)?;
    }
    Ok(jackknife(k, |skip| mse_from(&c, &o, skip)))
}

/// Bias, variance and MSE in one pass, with a joint jackknife for the decomposition gap.
pub fn grad_stats<F>(n: usize, mut sample: F) -> Result<GradStats>
where
    F: FnMut(usize) -> Result<GradSample>,
{
    let k = group_count(n)?;
    let (mut d, mut c, mut o) = (Channel::new(k), Channel::new(k), Channel::new(k));
    for i in 0..n {
        let g = sample(i)?;
        d.push(i % k, &diff(&g.cm, &g.oracle)?)?;
        c.push(i % k, &g.cm)?;
        o.push(i % k, &g.oracle_indep)?;
    }
    let bias = |skip| {
        let (s, q, m) = d.totals(skip);
        mean_sq_norm(&s, q, m)
    };
    let var = |skip| {
        let (s, q, m) = c.totals(skip);
        trace_var(&s, q, m)
    };
    let mse = |skip| mse_from(&c, &o, skip);
    let b = jackknife(k, bias);
    let v = jackknife(k, var);
    let e = jackknife(k, mse);
    let gap = jackknife(k, |skip| mse(skip) - bias(skip) - var(skip));
    for (what, x) in [("bias", b), ("variance", v), ("mse", e)] {
        if !x.value.is_finite() {
            return Err(Error::Numeric {
                what: format!("gradient {what}"),
                index: None,
            });
        }
    }
    Ok(GradStats {
        bias_sq: b.value,
        variance: v.value,
        mse: e.value,
        n_samples: n,
        stderr_bias: b.stderr,
        stderr_var: v.stderr,
        stderr_mse: e.stderr,
        stderr_gap: gap.stderr,
    })
}

fn diff(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surrogate {
    /// Target `f_θ⁻(α_s x_0 + σ_s ε, s)` with the same noise.
    Ct,
    /// Target `f_θ⁻(Φ_{t→s}(x_t), s)` with one step of the exact mixture drift.
    Cd(SolverMethod),
}

impl Surrogate {
    pub fn name(self) -> &'static str {
        match self {
            Surrogate::Ct => "ct",
            Surrogate::Cd(_) => "cd",
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            Surrogate::Ct => Stage::PosttrainCt,
            Surrogate::Cd(_) => Stage::PosttrainCd,
        }
    }
}

/// Draws `ξ = (t, x_0, ε)` with `t ~ U[t_min + Δt, T]` and their oracle targets.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSamples {
    pub dim: usize,
    pub t: Vec<f64>,
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub x_t: Vec<f64>,
    pub oracle_target: Vec<f64>,
}

impl GradSamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Consistency-training gradient testbed on a mixture with exact oracles.
#[derive(Clone, Debug)]
pub struct CmProblem {
    pub reference: ReferenceFlow,
    pub sigma_data: f64,
    pub delta_t: f64,
    pub surrogate: Surrogate,
}

impl CmProblem {
    pub fn new(gmm: GmmSpec, sched: Schedule, sigma_data: f64, delta_t: f64, surrogate: Surrogate) -> Result<Self> {
        if !(delta_t > 0.0) || sched.terminal() + delta_t >= sched.t_max {
            return Err(Error::domain(format!("Δt = {delta_t} leaves no room on the schedule")));
        }
        Ok(Self {
            reference: ReferenceFlow::new(gmm, sched),
            sigma_data,
            delta_t,
            surrogate,
        })
    }

    pub fn gmm(&self) -> &GmmSpec {
        &self.reference.gmm
    }

    pub fn schedule(&self) -> Schedule {
        self.reference.sched
    }

    pub fn head(&self, params: &NetParams) -> Result<ConsistencyHead> {
        ConsistencyHead::new(params.clone(), self.schedule(), self.sigma_data)
    }

    pub fn draw(&self, rng: &mut RngState, n: usize) -> Result<GradSamples> {
        let sched = self.schedule();
        let d = self.gmm().dim();
        let mut tr = rng.derive("t");
        let t: Vec<f64> = (0..n)
            .map(|_| tr.uniform_range(sched.terminal() + self.delta_t, sched.t_max))
            .collect();
        let x0 = self.gmm().sample(&mut rng.derive("x0"), n).into_data();
        let mut eps = vec![0.0; n * d];
        rng.derive("eps").fill_normal(&mut eps);
        *rng = rng.derive("next");
        let x_t = perturb_rows(&sched, &x0, &eps, &t, d);
        let oracle_target = self.reference.flow_map_rows(&x_t, &t, &vec![sched.terminal(); n])?;
        Ok(GradSamples {
            dim: d,
            t,
            x0,
            eps,
            x_t,
            oracle_target,
        })
    }

    /// Surrogate targets `f_θ⁻(x_s, s)` with `θ⁻ = θ` for every sample.
    pub fn cm_targets(&self, head: &ConsistencyHead, xs: &GradSamples) -> Result<Vec<f64>> {
        let sched = self.schedule();
        let s: Vec<f64> = xs.t.iter().map(|t| (t - self.delta_t).max(sched.terminal())).collect();
        let x_s = match self.surrogate {
            Surrogate::Ct => perturb_rows(&sched, &xs.x0, &xs.eps, &s, xs.dim),
            Surrogate::Cd(method) => {
                let drift = analytic_drift(self.gmm(), &sched);
                integrate_rows(&drift, &xs.x_t, &xs.t, &s, 1, method)?.0
            }
        };
        head.eval_batch(&x_s, &s)
    }

    /// `(g_cm, g_oracle)` at sample `i`, both `2 Jᵀ(f − target)`.
    fn grads_at(
        &self,
        head: &ConsistencyHead,
        xs: &GradSamples,
        cm_target: Option<&[f64]>,
        i: usize,
    ) -> Result<(Option<Vec<f64>>, Vec<f64>)> {
        let d = xs.dim;
        let rows = i * d..(i + 1) * d;
        let (f, cache) = head.forward_cached(&xs.x_t[rows.clone()], &xs.t[i..=i])?;
        let back = |target: &[f64]| {
            let d_out: Vec<f64> = f.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            let mut g = vec![0.0; head.params().len()];
            head.backward(&cache, &d_out, &mut g);
            g
        };
        Ok((cm_target.map(|c| back(&c[rows.clone()])), back(&xs.oracle_target[rows])))
    }

    /// Paired and independent draws shared by every parameter vector under comparison.
    pub fn draws(&self, rng: &RngState, n: usize) -> Result<GradDraws> {
        group_count(n)?;
        Ok(GradDraws {
            paired: self.draw(&mut rng.derive("paired"), n)?,
            independent: self.draw(&mut rng.derive("independent"), n)?,
        })
    }

    /// Bias, variance and MSE of the surrogate gradient at `params`.
    pub fn stats(&self, params: &NetParams, draws: &GradDraws) -> Result<GradStats> {
        let (a, b) = (&draws.paired, &draws.independent);
        let head = self.head(params)?;
        let cm_target = self.cm_targets(&head, a)?;
        grad_stats(a.len().min(b.len()), |i| {
            let (cm, oracle) = self.grads_at(&head, a, Some(&cm_target), i)?;
            let (_, oracle_indep) = self.grads_at(&head, b, None, i)?;
            Ok(GradSample {
                cm: cm.expect("surrogate target given"),
                oracle,
                oracle_indep,
            })
        })
    }

    pub fn bias(&self, params: &NetParams, draws: &GradDraws) -> Result<Estimate> {
        let a = &draws.paired;
        let head = self.head(params)?;
        let cm_target = self.cm_targets(&head, a)?;
        grad_bias(a.len(), |i| {
            let (cm, oracle) = self.grads_at(&head, a, Some(&cm_target), i)?;
            Ok((cm.expect("surrogate target given"), oracle))
        })
    }

    pub fn variance(&self, params: &NetParams, draws: &GradDraws) -> Result<Estimate> {
        let a = &draws.paired;
        let head = self.head(params)?;
        let cm_target = self.cm_targets(&head, a)?;
        grad_variance(a.len(), |i| {
            Ok(self
                .grads_at(&head, a, Some(&cm_target), i)?
                .0
                .expect("surrogate target given"))
        })
    }

    pub fn mse(&self, params: &NetParams, draws: &GradDraws) -> Result<Estimate> {
        let (a, b) = (&draws.paired, &draws.independent);
        let head = self.head(params)?;
        let cm_target = self.cm_targets(&head, a)?;
        grad_mse(a.len().min(b.len()), |i| {
            let cm = self
                .grads_at(&head, a, Some(&cm_target), i)?
                .0
                .expect("surrogate target given");
            Ok((cm, self.grads_at(&head, b, None, i)?.1))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradDraws {
    pub paired: GradSamples,
    pub independent: GradSamples,
}

fn perturb_rows(sched: &Schedule, x0: &[f64], eps: &[f64], t: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x0.len());
    for (r, &tr) in t.iter().enumerate() {
        let (a, s) = (sched.alpha(tr), sched.sigma(tr));
        out.extend((r * d..(r + 1) * d).map(|k| a * x0[k] + s * eps[k]));
    }
    out
}

/// Post-training run shared by every initialization in [`compare_inits`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostTrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub oracle_loss: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InitComparison {
    pub scheme: String,
    pub stats: GradStats,
    pub curve: Vec<CurvePoint>,
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InitReport {
    pub surrogate: String,
    pub delta_t: f64,
    pub comparisons: Vec<InitComparison>,
    pub notes: Vec<String>,
}

impl CmProblem {
    /// Configuration for post-training a head with this problem's surrogate.
    pub fn post_config(&self, params: &NetParams, spec: &PostTrainSpec) -> TrainConfig {
        let mut c = TrainConfig::new(self.surrogate.stage(), Dataset::Gmm(self.gmm().clone()));
        c.schedule = self.schedule();
        c.sigma_data = self.sigma_data;
        c.hidden = params.arch.hidden_widths.clone();
        c.activation = params.arch.activation;
        c.delta_t = self.delta_t;
        if let Surrogate::Cd(m) = self.surrogate {
            c.teacher_solver = m;
        }
        c.batch = spec.batch;
        c.lr = spec.lr;
        c.steps = spec.steps;
        c.seed = spec.seed;
        c.log_every = 0;
        c
    }
}

/// Gradient statistics at each initialization, then an identical post-training
/// run from each, tracking the oracle loss on `eval`.
pub fn compare_inits(
    problem: &CmProblem,
    inits: &[(String, NetParams)],
    spec: &PostTrainSpec,
    eval: &OracleSet,
    n_grad: usize,
    rng: &RngState,
) -> Result<InitReport> {
    let drift: DriftModel = analytic_drift(problem.gmm(), &problem.schedule());
    let draws = problem.draws(&rng.derive("grad-stats"), n_grad)?;
    let mut comparisons = Vec::with_capacity(inits.len());
    for (scheme, params) in inits {
        let stats = problem.stats(params, &draws)?;
        let config = problem.post_config(params, spec);
        let mut curve = Vec::new();
        let every = spec.eval_every.max(1);
        let run = train_observed(&config, params.clone(), Teacher::Drift(&drift), |step, p| {
            if step % every == 0 || step == spec.steps {
                let est: McEstimate = eval.cm_loss(&problem.head(p)?)?;
                curve.push(CurvePoint {
                    step,
                    oracle_loss: est.mean,
                    stderr: est.stderr,
                });
            }
            Ok(())
        });
        let diverged_at = match run {
            Ok(_) => None,
            Err(Error::Diverged { step, .. }) => Some(step),
            Err(e) => return Err(e),
        };
        comparisons.push(InitComparison {
            scheme: scheme.clone(),
            stats,
            curve,
            diverged_at,
        });
    }
    let mut notes = vec![
        "gradient bias mixes the O(Δt²) discretisation error with the approximation error of f_θ; the two are not separated".to_string(),
    ];
    if problem.gmm().n_components() == 1 {
        notes.push(
            "single Gaussian: the flow map is linear in x, so a denoiser initialization is already close to it and the ordering of schemes is uninformative"
                .to_string(),
        );
    }
    Ok(InitReport {
        surrogate: problem.surrogate.name().to_string(),
        delta_t: problem.delta_t,
        comparisons,
        notes,
    })
}
