//! Stage dispatch and the optimisation loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{first_non_finite, Error, Result};
use crate::heads::{AvgDriftHead, ConsistencyHead, DenoiserHead, VelocityHead};
use crate::numcore::{optimizer_step, Activation, MlpArch, NetParams, OptimizerKind, OptimizerState, RngState};
use crate::schedule::{time_grid, GridKind, Schedule};
use crate::solvers::{meanflow_trajectory, solve, DriftModel, SolverMethod, Trajectory};

use super::data::{Batch, Dataset, Prior};
use super::losses::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    PretrainDm,
    PretrainFm,
    MidtrainCm,
    MidtrainMf,
    PosttrainCt,
    PosttrainCd,
    PosttrainGcd,
    PosttrainMf,
}

/// Which network head a stage trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Denoiser,
    Velocity,
    Consistency,
    AvgDrift,
}

impl HeadKind {
    pub fn time_inputs(self) -> usize {
        match self {
            HeadKind::AvgDrift => 2,
            _ => 1,
        }
    }
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::PretrainDm,
        Stage::PretrainFm,
        Stage::MidtrainCm,
        Stage::MidtrainMf,
        Stage::PosttrainCt,
        Stage::PosttrainCd,
        Stage::PosttrainGcd,
        Stage::PosttrainMf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainDm => "pretrain-dm",
            Stage::PretrainFm => "pretrain-fm",
            Stage::MidtrainCm => "midtrain-cm",
            Stage::MidtrainMf => "midtrain-mf",
            Stage::PosttrainCt => "posttrain-ct",
            Stage::PosttrainCd => "posttrain-cd",
            Stage::PosttrainGcd => "posttrain-gcd",
            Stage::PosttrainMf => "posttrain-mf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    pub fn head(self) -> HeadKind {
        match self {
            Stage::PretrainDm => HeadKind::Denoiser,
            Stage::PretrainFm => HeadKind::Velocity,
            Stage::MidtrainCm | Stage::PosttrainCt | Stage::PosttrainCd | Stage::PosttrainGcd => HeadKind::Consistency,
            Stage::MidtrainMf | Stage::PosttrainMf => HeadKind::AvgDrift,
        }
    }

    /// Schedule family the stage runs on by default.
    pub fn default_schedule(self) -> Schedule {
        match self {
            Stage::PretrainFm | Stage::MidtrainMf | Stage::PosttrainMf => Schedule::fm(),
            _ => Schedule::edm(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitKind {
    Random,
    Dm,
    Cmt,
    Gcd,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::Dm => "dm",
            InitKind::Cmt => "cmt",
            InitKind::Gcd => "gcd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitKind::Random),
            "dm" => Ok(InitKind::Dm),
            "cmt" => Ok(InitKind::Cmt),
            "gcd" => Ok(InitKind::Gcd),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Learning-rate schedule over the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// `lr · ½(1 + cos(π step / steps))`.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule `{other}`"))),
        }
    }

    pub fn at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

/// Distribution of training times on `[lo, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeSampler {
    Uniform,
    /// Uniform in `ln t`; requires `lo > 0`.
    LogUniform,
}

impl TimeSampler {
    pub fn name(self) -> &'static str {
        match self {
            TimeSampler::Uniform => "uniform",
            TimeSampler::LogUniform => "log-uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TimeSampler::Uniform),
            "log-uniform" => Ok(TimeSampler::LogUniform),
            other => Err(Error::Config(format!("unknown time sampler `{other}`"))),
        }
    }

    fn draw(self, rng: &mut RngState, lo: f64, hi: f64) -> f64 {
        match self {
            TimeSampler::Uniform => rng.uniform_range(lo, hi),
            TimeSampler::LogUniform => rng.uniform_range(lo.ln(), hi.ln()).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MfVelocity {
    Conditional,
    Teacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub dataset: Dataset,
    pub schedule: Schedule,
    pub sigma_data: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub t_sampler: TimeSampler,
    /// CT/CD time gap.
    pub delta_t: f64,
    pub gcd_u: f64,
    pub gcd_substeps: usize,
    /// Teacher solver for CD/gCD targets and mid-training trajectories.
    pub teacher_solver: SolverMethod,
    /// Mid-training trajectory steps `M`.
    pub teacher_steps: usize,
    pub grid_kind: GridKind,
    /// Mid-training points per trajectory (CM indices or MF pairs); 0 uses all.
    pub picks_per_traj: usize,
    pub mf_diag_prob: f64,
    pub mf_velocity: MfVelocity,
    /// Isotropic Gaussian prior of this std for anchors and sampling; `None` uses the exact `p_T`.
    pub prior_std: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
    pub init: InitKind,
}

impl TrainConfig {
    pub fn new(stage: Stage, dataset: Dataset) -> Self {
        let sched = stage.default_schedule();
        let mf = stage.head() == HeadKind::AvgDrift;
        Self {
            stage,
            schedule: sched,
            sigma_data: if dataset.dim() == 1 { 1.0 } else { 0.5 },
            dataset,
            hidden: vec![128; 3],
            activation: Activation::Silu,
            batch: 128,
            steps: 1000,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::Adam,
            t_sampler: TimeSampler::Uniform,
            delta_t: 0.02,
            gcd_u: sched.terminal(),
            gcd_substeps: 4,
            teacher_solver: if mf || matches!(stage, Stage::PosttrainCd | Stage::PosttrainGcd) {
                SolverMethod::Heun
            } else {
                SolverMethod::Multistep {
                    order: 3,
                    warmup_cost: 2,
                }
            },
            teacher_steps: if mf { 7 } else { 16 },
            grid_kind: if mf { GridKind::Uniform } else { GridKind::Power },
            picks_per_traj: 0,
            mf_diag_prob: 0.25,
            mf_velocity: MfVelocity::Conditional,
            prior_std: None,
            seed: 0,
            log_every: 10,
            init: InitKind::Random,
        }
    }

    pub fn arch(&self) -> MlpArch {
        let d = self.dataset.dim();
        MlpArch {
            input_dim: d,
            time_inputs: self.stage.head().time_inputs(),
            hidden_widths: self.hidden.clone(),
            output_dim: d,
            activation: self.activation,
        }
    }

    pub fn prior(&self) -> Prior {
        match self.prior_std {
            None => Prior::Diffused(self.dataset.clone()),
            Some(std) => Prior::Isotropic {
                dim: self.dataset.dim(),
                std,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        MlpArch::new(
            self.dataset.dim(),
            self.stage.head().time_inputs(),
            self.hidden.clone(),
            self.dataset.dim(),
            self.activation,
        )?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        let sched = &self.schedule;
        match self.stage {
            Stage::PosttrainCt | Stage::PosttrainCd => {
                if !(self.delta_t > 0.0) || sched.terminal() + self.delta_t >= sched.t_max {
                    return Err(Error::Config(format!(
                        "delta_t = {} leaves no room on the schedule",
                        self.delta_t
                    )));
                }
            }
            Stage::PosttrainGcd => {
                if !sched.contains(self.gcd_u) || self.gcd_u >= sched.t_max {
                    return Err(Error::Config(format!("gcd_u = {} outside [t_min, T)", self.gcd_u)));
                }
            }
            Stage::MidtrainCm | Stage::MidtrainMf => {
                if self.teacher_steps == 0 {
                    return Err(Error::Config("teacher_steps must be positive".into()));
                }
            }
            _ => {}
        }
        if let Some(std) = self.prior_std {
            if !(std > 0.0) {
                return Err(Error::Config("prior std must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.mf_diag_prob) {
            return Err(Error::Config("mf_diag_prob must lie in [0, 1]".into()));
        }
        if self.t_sampler == TimeSampler::LogUniform && sched.terminal() <= 0.0 {
            return Err(Error::Config("log-uniform times need t_min > 0".into()));
        }
        Ok(())
    }

    /// Whether the stage cannot run without a teacher.
    pub fn needs_teacher(&self) -> bool {
        match self.stage {
            Stage::MidtrainCm | Stage::MidtrainMf | Stage::PosttrainCd | Stage::PosttrainGcd => true,
            Stage::PosttrainMf => self.mf_velocity == MfVelocity::Teacher,
            _ => false,
        }
    }
}

/// Loss record emitted during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub loss: f64,
    pub aux: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn grad_norm(&self) -> f64 {
        self.aux.get("grad_norm").copied().unwrap_or(f64::NAN)
    }
}

/// Teacher available to a training stage.
#[derive(Clone, Copy)]
pub enum Teacher<'a> {
    None,
    Drift(&'a DriftModel<'a>),
    MeanFlow(&'a AvgDriftHead),
    /// Pre-generated trajectories; anchors are drawn from the pool.
    Trajectories(&'a [Trajectory]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub reports: Vec<LossReport>,
}

/// Runs `config.steps` optimizer iterations from `init`.
pub fn train(config: &TrainConfig, init: NetParams, teacher: Teacher) -> Result<TrainOutcome> {
    train_observed(config, init, teacher, |_, _| Ok(()))
}

/// As [`train`], calling `observe(step, params)` before every step and once at the end.
pub fn train_observed<F>(
    config: &TrainConfig,
    init: NetParams,
    teacher: Teacher,
    mut observe: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &NetParams) -> Result<()>,
{
    config.validate()?;
    if init.arch != config.arch() {
        return Err(Error::Config(
            "initial parameters do not match the configured architecture".into(),
        ));
    }
    if config.needs_teacher() && matches!(teacher, Teacher::None) {
        return Err(Error::Config(format!("stage {} needs a teacher", config.stage.name())));
    }
    let base = RngState::new(config.seed).derive("train");
    let mut params = init;
    let mut opt = OptimizerState::new(config.optimizer, params.len(), config.lr, 0.9, 0.999, 1e-8);
    if config.optimizer == OptimizerKind::Sgd {
        opt.beta1 = 0.0;
        opt.beta2 = 0.0;
    }
    let mut reports = Vec::new();
    for step in 0..config.steps {
        observe(step, &params)?;
        let mut rng = base.derive_indexed("step", step as u64);
        let (loss, grad) = stage_loss(config, &params, teacher, &mut rng).map_err(|e| match e {
            Error::Numeric { what, .. } => Error::Diverged { step, reason: what },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        if let Some(i) = first_non_finite(&grad) {
            return Err(Error::Diverged {
                step,
                reason: format!("gradient entry {i} is not finite"),
            });
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        opt.lr = config.lr_schedule.at(config.lr, step, config.steps);
        let (p, o) = optimizer_step(params, &grad, opt).map_err(|e| Error::Diverged {
            step,
            reason: e.to_string(),
        })?;
        params = p;
        opt = o;
        if let Some(i) = first_non_finite(&params.values) {
            return Err(Error::Diverged {
                step,
                reason: format!("parameter {i} is not finite"),
            });
        }
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            reports.push(LossReport {
                step,
                loss,
                aux: BTreeMap::from([("grad_norm".to_string(), grad_norm)]),
            });
        }
    }
    observe(config.steps, &params)?;
    Ok(TrainOutcome { params, reports })
}

fn draw_times(config: &TrainConfig, rng: &mut RngState, lo: f64, n: usize) -> Vec<f64> {
    let hi = config.schedule.t_max;
    let mut r = rng.derive("times");
    (0..n).map(|_| config.t_sampler.draw(&mut r, lo, hi)).collect()
}

/// Samples a training batch with per-row times on `[lo, T]`.
pub fn draw_batch(config: &TrainConfig, rng: &mut RngState, lo: f64) -> Result<Batch> {
    let n = config.batch;
    let d = config.dataset.dim();
    let x0 = config.dataset.sample(&mut rng.derive("x0"), n);
    let mut eps = vec![0.0; n * d];
    rng.derive("eps").fill_normal(&mut eps);
    let t = draw_times(config, rng, lo, n);
    Batch::new(d, x0.into_data(), eps, t, vec![])
}

fn draw_mf_batch(config: &TrainConfig, rng: &mut RngState) -> Result<Batch> {
    let mut b = draw_batch(config, rng, config.schedule.terminal())?;
    let mut other = draw_times(
        config,
        &mut rng.derive("second-time"),
        config.schedule.terminal(),
        b.len(),
    );
    let mut diag = rng.derive("diagonal");
    for (r, o) in other.iter_mut().enumerate() {
        if diag.uniforms(1)[0] < config.mf_diag_prob {
            *o = b.t[r];
        }
    }
    let (t, s): (Vec<f64>, Vec<f64>) = b.t.iter().zip(&other).map(|(&a, &c)| (a.max(c), a.min(c))).unzip();
    b.t = t;
    b.s = s;
    Ok(b)
}

/// Trajectories for one mid-training step: fresh from the teacher, or drawn from a pool.
fn step_trajectory(config: &TrainConfig, teacher: Teacher, rng: &mut RngState) -> Result<Trajectory> {
    let grid = time_grid(&config.schedule, config.teacher_steps, config.grid_kind)?;
    let anchors = || {
        config
            .prior()
            .draw(&config.schedule, &mut rng.derive("anchors"), config.batch)
    };
    match teacher {
        Teacher::Drift(drift) => solve(drift, &grid, &anchors(), config.teacher_solver),
        Teacher::MeanFlow(head) => meanflow_trajectory(head, &grid, &anchors()),
        Teacher::Trajectories(pool) => pooled_trajectory(pool, config.batch, rng),
        Teacher::None => Err(Error::Config("mid-training needs a teacher".into())),
    }
}

fn pooled_trajectory(pool: &[Trajectory], n: usize, rng: &mut RngState) -> Result<Trajectory> {
    let first = pool
        .first()
        .ok_or_else(|| Error::Config("trajectory pool is empty".into()))?;
    if pool.iter().any(|p| p.grid != first.grid || p.dim() != first.dim()) {
        return Err(Error::Config(
            "pooled trajectories must share grid and dimension".into(),
        ));
    }
    let total: usize = pool.iter().map(|p| p.n_anchors()).sum();
    let mut pick = rng.derive("pool");
    let d = first.dim();
    let m = first.grid.steps();
    let mut states = vec![Vec::with_capacity(n * d); m + 1];
    for _ in 0..n {
        let mut k = pick.index(total);
        let mut which = 0;
        while k >= pool[which].n_anchors() {
            k -= pool[which].n_anchors();
            which += 1;
        }
        for (i, st) in states.iter_mut().enumerate() {
            st.extend_from_slice(pool[which].states[i].row(k));
        }
    }
    Ok(Trajectory {
        grid: first.grid.clone(),
        states: states
            .into_iter()
            .map(|s| crate::numcore::Array::matrix(n, d, s))
            .collect::<Result<Vec<_>>>()?,
        teacher_nfes: first.teacher_nfes,
    })
}

fn choose<T: Copy>(all: &[T], k: usize, rng: &mut RngState) -> Vec<T> {
    if k == 0 || k >= all.len() {
        return all.to_vec();
    }
    (0..k).map(|_| all[rng.index(all.len())]).collect()
}

/// Loss and gradient of the configured stage on one freshly drawn batch.
pub fn stage_loss(
    config: &TrainConfig,
    params: &NetParams,
    teacher: Teacher,
    rng: &mut RngState,
) -> Result<(f64, Vec<f64>)> {
    let sched = config.schedule;
    let sd = config.sigma_data;
    match config.stage {
        Stage::PretrainDm => {
            let head = DenoiserHead::new(params.clone(), sched, sd)?;
            loss_pretrain_dm_grad(&head, &draw_batch(config, rng, sched.terminal())?)
        }
        Stage::PretrainFm => {
            let head = VelocityHead::new(params.clone(), sched)?;
            loss_pretrain_fm_grad(&head, &draw_batch(config, rng, sched.terminal())?)
        }
        Stage::MidtrainCm => {
            let head = ConsistencyHead::new(params.clone(), sched, sd)?;
            let traj = step_trajectory(config, teacher, rng)?;
            let idx: Vec<usize> = (1..=traj.grid.steps()).collect();
            let mut pick = rng.derive("picks");
            let mut picks = Vec::new();
            for a in 0..traj.n_anchors() {
                picks.extend(
                    choose(&idx, config.picks_per_traj, &mut pick)
                        .into_iter()
                        .map(|i| (a, i)),
                );
            }
            loss_cmt_cm_grad(&head, &traj, &picks)
        }
        Stage::MidtrainMf => {
            let head = AvgDriftHead::new(params.clone(), sched)?;
            let traj = step_trajectory(config, teacher, rng)?;
            let pairs = mf_pairs(traj.grid.steps() + 1);
            let mut pick = rng.derive("picks");
            let mut picks = Vec::new();
            for a in 0..traj.n_anchors() {
                picks.extend(
                    choose(&pairs, config.picks_per_traj, &mut pick)
                        .into_iter()
                        .map(|(i, j)| (a, i, j)),
                );
            }
            loss_cmt_mf_grad(&head, &traj, &picks)
        }
        Stage::PosttrainCt | Stage::PosttrainCd => {
            let head = ConsistencyHead::new(params.clone(), sched, sd)?;
            let frozen = head.clone();
            let batch = draw_batch(config, rng, sched.terminal() + config.delta_t)?;
            if config.stage == Stage::PosttrainCt {
                loss_ct_grad(&head, &frozen, &batch, config.delta_t)
            } else {
                let Teacher::Drift(drift) = teacher else {
                    return Err(Error::Config("consistency distillation needs a drift teacher".into()));
                };
                loss_cd_grad(&head, &frozen, drift, &batch, config.delta_t, config.teacher_solver)
            }
        }
        Stage::PosttrainGcd => {
            let head = ConsistencyHead::new(params.clone(), sched, sd)?;
            let frozen = head.clone();
            let Teacher::Drift(drift) = teacher else {
                return Err(Error::Config("gCD needs a drift teacher".into()));
            };
            let batch = draw_batch(config, rng, config.gcd_u)?;
            loss_gcd_grad(
                &head,
                &frozen,
                drift,
                &batch,
                config.gcd_u,
                config.gcd_substeps,
                config.teacher_solver,
            )
        }
        Stage::PosttrainMf => {
            let head = AvgDriftHead::new(params.clone(), sched)?;
            let frozen = head.clone();
            let batch = draw_mf_batch(config, rng)?;
            let source = match (config.mf_velocity, teacher) {
                (MfVelocity::Conditional, _) => VelocitySource::Conditional,
                (MfVelocity::Teacher, Teacher::Drift(d)) => VelocitySource::Teacher(d),
                (MfVelocity::Teacher, _) => {
                    return Err(Error::Config("teacher-velocity MF needs a drift teacher".into()))
                }
            };
            loss_mf_grad(&head, &frozen, &batch, source)
        }
    }
}

/// Fresh parameters for a stage's head: small random hidden layers, zero output layer.
pub fn init_params(config: &TrainConfig) -> NetParams {
    let mut rng = RngState::new(config.seed).derive("init");
    NetParams::init(config.arch(), &mut rng)
}
