//! Turns flat settings into core types: datasets, schedules, training
//! configurations and teachers.

use std::path::{Path, PathBuf};

use flowmap_core::heads::{AvgDriftHead, DenoiserHead, VelocityHead};
use flowmap_core::numcore::{Activation, OptimizerKind};
use flowmap_core::oracle::{analytic_drift, GmmSpec};
use flowmap_core::schedule::{GridKind, Schedule, ScheduleKind};
use flowmap_core::solvers::{DriftModel, SolverMethod};
use flowmap_core::training::{Checkpoint, Dataset, InitKind, LrSchedule, MfVelocity, Stage, TimeSampler, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

pub fn dataset(s: &Settings, default_kind: &str) -> CliResult<Dataset> {
    match s.str_or("dataset", default_kind).as_str() {
        "gaussian" => Ok(Dataset::gaussian(s.get("dataset.dim", 1usize)?)),
        "gmm-pair" => Ok(Dataset::Gmm(GmmSpec::symmetric_pair(
            s.get("dataset.mu", 1.5)?,
            s.get("dataset.variance", 0.25)?,
        )?)),
        "two-moons" => Ok(Dataset::TwoMoons {
            noise: s.get("dataset.noise", 0.05)?,
        }),
        other => Err(CliError::config(format!("unknown dataset `{other}`"))),
    }
}

pub fn schedule(s: &Settings, default: Schedule) -> CliResult<Schedule> {
    let kind = ScheduleKind::parse(&s.str_or("schedule", default.kind.name()))?;
    let base = match kind {
        _ if kind == default.kind => default,
        ScheduleKind::Edm => Schedule::edm(),
        ScheduleKind::Fm => Schedule::fm(),
    };
    Ok(Schedule::new(
        kind,
        s.get("schedule.t_min", base.t_min)?,
        s.get("schedule.t_max", base.t_max)?,
        s.get("schedule.rho", base.rho)?,
    )?)
}

pub fn solver(s: &Settings, prefix: &str, default: SolverMethod) -> CliResult<SolverMethod> {
    let (order, warm) = match default {
        SolverMethod::Multistep { order, warmup_cost } => (order, warmup_cost),
        _ => (3, 2),
    };
    let name = s.str_or(&format!("{prefix}.solver"), default.name());
    let (order, warm) = if name == "multistep" {
        (
            s.get(&format!("{prefix}.order"), order)?,
            s.get(&format!("{prefix}.warmup"), warm)?,
        )
    } else {
        (order, warm)
    };
    Ok(SolverMethod::parse(&name, order, warm)?)
}

fn parse_optimizer(v: &str) -> CliResult<OptimizerKind> {
    match v {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(CliError::config(format!("unknown optimizer `{other}`"))),
    }
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    }
}

/// Full training configuration for `stage`, every field overridable by key.
pub fn train_config(s: &Settings, stage: Stage) -> CliResult<TrainConfig> {
    let ds = dataset(s, "two-moons")?;
    let mut c = TrainConfig::new(stage, ds);
    c.seed = s.get("seed", 0u64)?;
    c.schedule = schedule(s, c.schedule)?;
    c.sigma_data = s.get("sigma_data", c.sigma_data)?;
    c.hidden = s.list("model.hidden", "64,64,64")?;
    c.activation = Activation::parse(&s.str_or("model.activation", c.activation.name()))?;
    c.batch = s.get("train.batch", c.batch)?;
    c.steps = s.get("train.steps", c.steps)?;
    c.lr = s.get("train.lr", c.lr)?;
    c.lr_schedule = LrSchedule::parse(&s.str_or("train.lr_schedule", c.lr_schedule.name()))?;
    c.optimizer = parse_optimizer(&s.str_or("train.optimizer", optimizer_name(c.optimizer)))?;
    c.t_sampler = TimeSampler::parse(&s.str_or("train.t_sampler", c.t_sampler.name()))?;
    c.log_every = s.get("train.log_every", c.log_every)?;
    c.prior_std = match s.str_or("prior", "diffused").as_str() {
        "diffused" => None,
        "isotropic" => Some(s.get("prior.std", c.schedule.sigma(c.schedule.t_max))?),
        other => return Err(CliError::config(format!("unknown prior `{other}`"))),
    };
    match stage {
        Stage::PosttrainCt | Stage::PosttrainCd => c.delta_t = s.get("ct.delta_t", c.delta_t)?,
        Stage::PosttrainGcd => {
            c.gcd_u = s.get("gcd.u", c.schedule.terminal())?;
            c.gcd_substeps = s.get("gcd.substeps", c.gcd_substeps)?;
        }
        Stage::MidtrainCm | Stage::MidtrainMf => {
            c.teacher_steps = s.get("teacher.steps", c.teacher_steps)?;
            c.grid_kind = GridKind::parse(&s.str_or("teacher.grid", c.grid_kind.name()))?;
            c.picks_per_traj = s.get("midtrain.picks", c.picks_per_traj)?;
        }
        Stage::PosttrainMf => {
            c.mf_diag_prob = s.get("mf.diag_prob", c.mf_diag_prob)?;
            c.mf_velocity = match s.str_or("mf.velocity", "conditional").as_str() {
                "conditional" => MfVelocity::Conditional,
                "teacher" => MfVelocity::Teacher,
                other => return Err(CliError::config(format!("unknown mf.velocity `{other}`"))),
            };
        }
        Stage::PretrainDm | Stage::PretrainFm => {}
    }
    if matches!(
        stage,
        Stage::PosttrainCd | Stage::PosttrainGcd | Stage::MidtrainCm | Stage::MidtrainMf
    ) {
        c.teacher_solver = solver(s, "teacher", c.teacher_solver)?;
    }
    c.init = InitKind::Random;
    c.validate()?;
    Ok(c)
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    Ok(Checkpoint::load(path)?)
}

/// A loaded teacher: a drift source or a two-time head.
pub enum TeacherSource {
    Analytic(GmmSpec, Schedule),
    Denoiser(DenoiserHead),
    Velocity(VelocityHead),
    MeanFlow(AvgDriftHead),
}

impl TeacherSource {
    pub fn drift(&self) -> Option<DriftModel<'_>> {
        match self {
            TeacherSource::Analytic(g, sched) => Some(analytic_drift(g, sched)),
            TeacherSource::Denoiser(h) => Some(DriftModel::from_denoiser(h)),
            TeacherSource::Velocity(h) => Some(DriftModel::from_velocity(h)),
            TeacherSource::MeanFlow(_) => None,
        }
    }

    pub fn schedule(&self) -> Schedule {
        match self {
            TeacherSource::Analytic(_, s) => *s,
            TeacherSource::Denoiser(h) => *h.schedule(),
            TeacherSource::Velocity(h) => h.sched,
            TeacherSource::MeanFlow(h) => h.sched,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> CliResult<Self> {
        match ck.stage {
            Stage::PretrainDm => Ok(TeacherSource::Denoiser(ck.denoiser()?)),
            Stage::PretrainFm => Ok(TeacherSource::Velocity(ck.velocity()?)),
            Stage::MidtrainMf | Stage::PosttrainMf => Ok(TeacherSource::MeanFlow(ck.avgdrift()?)),
            other => Err(CliError::config(format!(
                "a {} checkpoint cannot act as a teacher",
                other.name()
            ))),
        }
    }
}

/// Teacher named by `teacher` (`analytic`, `checkpoint` or `none`), checked against `sched`.
pub fn teacher(s: &Settings, dataset: &Dataset, sched: Schedule, required: bool) -> CliResult<Option<TeacherSource>> {
    let default = if required { "checkpoint" } else { "none" };
    let src = match s.str_or("teacher", default).as_str() {
        "none" => return Ok(None),
        "analytic" => {
            let g = dataset
                .gmm()
                .ok_or_else(|| CliError::config("the analytic teacher needs a Gaussian-mixture dataset"))?;
            TeacherSource::Analytic(g.clone(), sched)
        }
        "checkpoint" => {
            let path = PathBuf::from(
                s.opt_str("teacher.checkpoint")
                    .ok_or_else(|| CliError::config("teacher = checkpoint needs teacher.checkpoint"))?,
            );
            TeacherSource::from_checkpoint(&load_checkpoint(&path)?)?
        }
        other => return Err(CliError::config(format!("unknown teacher `{other}`"))),
    };
    if src.schedule() != sched {
        return Err(CliError::config(
            "teacher schedule differs from the configured schedule",
        ));
    }
    Ok(Some(src))
}
