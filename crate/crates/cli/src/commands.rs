use std::fmt::Write as _;
use std::path::PathBuf;

use flowmap_core::diagnostics::{
    compare_inits, nfe_per_pair, sliced_w2, wasserstein_1d, CmProblem, InitBudget, NfeScheme, PostTrainSpec, Surrogate,
};
use flowmap_core::numcore::{Array, NetParams, RngState};
use flowmap_core::oracle::{reference_grid_kind, OracleSet, ReferenceMethod};
use flowmap_core::schedule::{time_grid, GridKind, Schedule, ScheduleKind};
use flowmap_core::solvers::{solve, SolverMethod, Trajectory};
use flowmap_core::training::{
    init_params, sample, train_observed, Checkpoint, FewStepModel, HeadKind, InitKind, Prior, Stage, Teacher,
    TrainConfig,
};

use crate::build::{self, load_checkpoint, TeacherSource};
use crate::error::{CliError, CliResult};
use crate::manifest::Outputs;
use crate::settings::Settings;

pub const CHECKPOINT: &str = "checkpoint.bin";

fn stage_for(s: &Settings, family: &str) -> CliResult<Stage> {
    let default = match family {
        "pretrain" => "pretrain-dm",
        "midtrain" => "midtrain-cm",
        _ => "posttrain-ct",
    };
    let stage = Stage::parse(&s.str_or("stage", default))?;
    if !stage.name().starts_with(family) {
        return Err(CliError::config(format!(
            "stage {} does not belong to `{family}`",
            stage.name()
        )));
    }
    Ok(stage)
}

fn initial_params(s: &Settings, config: &TrainConfig) -> CliResult<NetParams> {
    match s.str_or("init", "random").as_str() {
        "random" => Ok(init_params(config)),
        "checkpoint" => {
            let path = PathBuf::from(
                s.opt_str("init.checkpoint")
                    .ok_or_else(|| CliError::config("init = checkpoint needs init.checkpoint"))?,
            );
            let ck = load_checkpoint(&path)?;
            if ck.params.arch != config.arch() {
                return Err(CliError::config(format!(
                    "{} does not match the configured architecture",
                    path.display()
                )));
            }
            if ck.schedule != config.schedule {
                return Err(CliError::config(format!(
                    "{} uses a different schedule",
                    path.display()
                )));
            }
            Ok(ck.params)
        }
        other => Err(CliError::config(format!("unknown init `{other}`"))),
    }
}

fn load_pool(s: &Settings) -> CliResult<Vec<Trajectory>> {
    let raw = s
        .opt_str("teacher.trajectories")
        .ok_or_else(|| CliError::config("teacher = trajectories needs teacher.trajectories"))?;
    raw.split(',')
        .map(|p| {
            let path = PathBuf::from(p.trim());
            let f = std::fs::File::open(&path).map_err(|_| CliError::missing(&path))?;
            Ok(Trajectory::read_csv(std::io::BufReader::new(f))?)
        })
        .collect()
}

/// `pretrain`, `midtrain` and `posttrain`.
pub fn train_stage(family: &str, s: &Settings, out: &mut Outputs) -> CliResult<u64> {
    let stage = stage_for(s, family)?;
    let config = build::train_config(s, stage)?;
    let pool;
    let source;
    let drift;
    let teacher = if s.has("teacher") && s.str_or("teacher", "none") == "trajectories" {
        pool = load_pool(s)?;
        Teacher::Trajectories(&pool)
    } else {
        source = build::teacher(s, &config.dataset, config.schedule, config.needs_teacher())?;
        match &source {
            None => Teacher::None,
            Some(TeacherSource::MeanFlow(h)) => Teacher::MeanFlow(h),
            Some(src) => {
                drift = src.drift().expect("drift teachers yield a drift");
                Teacher::Drift(&drift)
            }
        }
    };
    let init = initial_params(s, &config)?;
    let outcome = train_observed(&config, init, teacher, |_, _| Ok(()))?;
    let ck = Checkpoint {
        stage,
        schedule: config.schedule,
        sigma_data: config.sigma_data,
        seed: config.seed,
        step: config.steps,
        params: outcome.params,
    };
    out.write(CHECKPOINT, &ck.to_bytes())?;
    let mut csv = String::from("step,loss,grad_norm\n");
    for r in &outcome.reports {
        writeln!(csv, "{},{},{}", r.step, r.loss, r.grad_norm()).expect("string write");
    }
    out.write("losses.csv", csv.as_bytes())?;
    Ok(config.seed)
}

fn samples_csv(x: &Array, dim: usize) -> String {
    let mut csv = (0..dim).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for row in x.data().chunks(dim) {
        csv.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    csv
}

fn generate(ck: &Checkpoint, s: &Settings, prior: &Prior, rng: &mut RngState, n: usize) -> CliResult<Array> {
    let steps = s.get("sample.steps", 1usize)?;
    match ck.stage.head() {
        HeadKind::Consistency => Ok(sample(
            FewStepModel::Consistency(&ck.consistency()?),
            steps,
            prior,
            rng,
            n,
        )?),
        HeadKind::AvgDrift => Ok(sample(FewStepModel::MeanFlow(&ck.avgdrift()?), steps, prior, rng, n)?),
        HeadKind::Denoiser | HeadKind::Velocity => {
            let solver = build::solver(s, "sample", SolverMethod::Heun)?;
            let src = TeacherSource::from_checkpoint(ck)?;
            let drift = src.drift().expect("pre-trained heads are drifts");
            let grid = time_grid(&ck.schedule, steps, reference_grid_kind(&ck.schedule))?;
            let x_big_t = prior.draw(&ck.schedule, &mut rng.derive("prior"), n);
            Ok(solve(&drift, &grid, &x_big_t, solver)?.endpoint().clone())
        }
    }
}

pub fn sample_cmd(s: &Settings, out: &mut Outputs) -> CliResult<u64> {
    let path = PathBuf::from(
        s.opt_str("checkpoint")
            .ok_or_else(|| CliError::config("sample needs `checkpoint`"))?,
    );
    let ck = load_checkpoint(&path)?;
    let dataset = build::dataset(s, "two-moons")?;
    let dim = dataset.dim();
    if ck.params.arch.input_dim != dim {
        return Err(CliError::config("checkpoint dimension differs from the dataset"));
    }
    let seed = s.get("seed", 0u64)?;
    let n = s.get("sample.n", 1000usize)?;
    let eval_n = s.get("sample.eval_n", 2000usize)?;
    let n_proj = s.get("sample.projections", 64usize)?;
    let prior = match s.str_or("prior", "diffused").as_str() {
        "diffused" => Prior::Diffused(dataset.clone()),
        "isotropic" => Prior::Isotropic {
            dim,
            std: s.get("prior.std", ck.schedule.sigma(ck.schedule.t_max))?,
        },
        other => return Err(CliError::config(format!("unknown prior `{other}`"))),
    };
    let rng = RngState::new(seed).derive("sample");
    let steps = s.get("sample.steps", 1usize)?;
    let x = if n == 0 {
        Array::zeros(vec![0, dim])
    } else {
        generate(&ck, s, &prior, &mut rng.derive("draw"), n)?
    };
    out.write("samples.csv", samples_csv(&x, dim).as_bytes())?;
    let (mut w2, mut sw2) = (None, None);
    if n > 0 && eval_n > 0 {
        let data = dataset.sample(&mut rng.derive("eval-data"), eval_n);
        if dim == 1 {
            w2 = Some(wasserstein_1d(x.data(), data.data())?);
        }
        sw2 = Some(sliced_w2(&x, &data, n_proj, &mut rng.derive("projections"))?);
    }
    let metrics = serde_json::json!({
        "checkpoint_stage": ck.stage.name(),
        "n": n,
        "steps": steps,
        "eval_n": eval_n,
        "w2": w2,
        "sliced_w2": sw2,
    });
    out.write("metrics.json", json_bytes(&metrics).as_slice())?;
    Ok(seed)
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(v).expect("report serializes");
    text.push('\n');
    text.into_bytes()
}

pub fn trajectories_cmd(s: &Settings, out: &mut Outputs) -> CliResult<u64> {
    let dataset = build::dataset(s, "gaussian")?;
    let sched = build::schedule(s, Schedule::edm())?;
    let seed = s.get("seed", 0u64)?;
    let src = build::teacher(s, &dataset, sched, true)?.expect("teacher required");
    let m = s.get("teacher.steps", 16usize)?;
    let default_grid = match sched.kind {
        ScheduleKind::Edm => GridKind::Power,
        ScheduleKind::Fm => GridKind::Uniform,
    };
    let grid_kind = GridKind::parse(&s.str_or("teacher.grid", default_grid.name()))?;
    let anchors = s.get("traj.anchors", 16usize)?;
    let grid = time_grid(&sched, m, grid_kind)?;
    let prior = Prior::Diffused(dataset);
    let x_big_t = prior.draw(
        &sched,
        &mut RngState::new(seed).derive("trajectories").derive("anchors"),
        anchors,
    );
    let traj = match &src {
        TeacherSource::MeanFlow(h) => flowmap_core::solvers::meanflow_trajectory(h, &grid, &x_big_t)?,
        other => {
            let default = match sched.kind {
                ScheduleKind::Edm => SolverMethod::Multistep {
                    order: 3,
                    warmup_cost: 2,
                },
                ScheduleKind::Fm => SolverMethod::Heun,
            };
            let method = build::solver(s, "teacher", default)?;
            solve(&other.drift().expect("drift teacher"), &grid, &x_big_t, method)?
        }
    };
    let mut bytes = Vec::new();
    traj.write_csv(&mut bytes)?;
    out.write("trajectories.csv", &bytes)?;
    Ok(seed)
}

fn parse_schemes(raw: &str) -> CliResult<Vec<InitKind>> {
    raw.split(',').map(|w| Ok(InitKind::parse(w.trim())?)).collect()
}

pub fn diagnose_cmd(s: &Settings, out: &mut Outputs) -> CliResult<u64> {
    let dataset = build::dataset(s, "gmm-pair")?;
    let gmm = dataset
        .gmm()
        .cloned()
        .ok_or_else(|| CliError::config("diagnose needs a Gaussian-mixture dataset"))?;
    let sched = build::schedule(s, Schedule::edm())?;
    let seed = s.get("seed", 0u64)?;
    let sigma_data = s.get("sigma_data", if gmm.dim() == 1 { 1.0 } else { 0.5 })?;
    let delta_t = s.get("diagnose.delta_t", 0.02)?;
    let surrogate = match s.str_or("diagnose.surrogate", "cd").as_str() {
        "ct" => Surrogate::Ct,
        "cd" => Surrogate::Cd(build::solver(s, "diagnose.cd", SolverMethod::Euler)?),
        other => return Err(CliError::config(format!("unknown surrogate `{other}`"))),
    };
    let mut problem = CmProblem::new(gmm, sched, sigma_data, delta_t, surrogate)?;
    let ref_steps = s.get("diagnose.reference_steps", 4096usize)?;
    problem.reference = problem
        .reference
        .clone()
        .with_resolution(ref_steps, ReferenceMethod::Rk4);
    let defaults = InitBudget::default();
    let budget = InitBudget {
        hidden: s.list("model.hidden", "64,64,64")?,
        steps: s.get("diagnose.budget", defaults.steps)?,
        batch: s.get("diagnose.batch", defaults.batch)?,
        dm_batch: s.get("diagnose.dm_batch", defaults.dm_batch)?,
        lr: s.get("diagnose.lr", defaults.lr)?,
        teacher_steps: s.get("diagnose.teacher_steps", defaults.teacher_steps)?,
        seed,
    };
    let spec = PostTrainSpec {
        steps: s.get("post.steps", 200usize)?,
        batch: s.get("post.batch", 64usize)?,
        lr: s.get("post.lr", 1e-4)?,
        seed,
        eval_every: s.get("post.eval_every", 50usize)?,
    };
    let n_grad = s.get("diagnose.n_grad", 10_000usize)?;
    let eval_n = s.get("post.eval_n", 2000usize)?;
    let schemes = parse_schemes(&s.str_or("diagnose.schemes", "cmt,dm,gcd,random"))?;
    let mut inits = Vec::with_capacity(schemes.len());
    for scheme in schemes {
        let key = format!("diagnose.{}.checkpoint", scheme.name());
        let params = match s.opt_str(&key) {
            Some(p) => load_checkpoint(&PathBuf::from(p))?.params,
            None => {
                let params = problem.prepare_init(scheme, &budget)?;
                let ck = Checkpoint {
                    stage: Stage::MidtrainCm,
                    schedule: sched,
                    sigma_data,
                    seed,
                    step: if scheme == InitKind::Random { 0 } else { budget.steps },
                    params: params.clone(),
                };
                out.write(&format!("init_{}.bin", scheme.name()), &ck.to_bytes())?;
                params
            }
        };
        inits.push((scheme.name().to_string(), params));
    }
    let rng = RngState::new(seed).derive("diagnose");
    let eval = OracleSet::forward(&problem.reference, &mut rng.derive("eval"), eval_n)?;
    let report = compare_inits(&problem, &inits, &spec, &eval, n_grad, &rng)?;
    out.write("grad_stats.json", &json_bytes(&report))?;
    let mut csv = String::from("scheme,step,oracle_loss,stderr\n");
    for c in &report.comparisons {
        for p in &c.curve {
            writeln!(csv, "{},{},{},{}", c.scheme, p.step, p.oracle_loss, p.stderr).expect("string write");
        }
    }
    out.write("curves.csv", csv.as_bytes())?;
    Ok(seed)
}

/// Teacher-cost rows: CSV key columns, exact ratio, decimal value.
pub fn nfe_rows(m: u64) -> CliResult<Vec<(String, String, f64)>> {
    let mut rows = Vec::new();
    for k in [2u64, 3] {
        for warm in [1u64, 2] {
            let r = nfe_per_pair(NfeScheme::Cmt {
                m,
                k,
                warmup_cost: warm,
            })?;
            rows.push((
                format!("cmt,{m},{k},{warm}"),
                r.to_string(),
                *r.numer() as f64 / *r.denom() as f64,
            ));
        }
    }
    for q in [1u64, 2] {
        let r = nfe_per_pair(NfeScheme::Cd { q })?;
        rows.push((format!("cd-q{q},,,"), r.to_string(), *r.numer() as f64));
    }
    let r = nfe_per_pair(NfeScheme::Ct)?;
    rows.push(("ct,,,".to_string(), r.to_string(), 0.0));
    Ok(rows)
}

pub fn nfe_table_cmd(s: &Settings, out: &mut Outputs) -> CliResult<u64> {
    let m = s.get("nfe.m", 16u64)?;
    let mut csv = String::from("scheme,M,k,s,nfe_exact,nfe\n");
    for (key, exact, dec) in nfe_rows(m)? {
        writeln!(csv, "{key},{exact},{dec}").expect("string write");
    }
    print!("{csv}");
    out.write("nfe_table.csv", csv.as_bytes())?;
    Ok(0)
}
