//! Training objectives of all three stages. Every loss is the batch mean of a
//! squared Euclidean distance (`w(t) = 1`); the `_grad` variants also return
//! the parameter gradient, with targets held constant.

use crate::error::{Error, Result};
use crate::heads::{AvgDriftHead, ConsistencyHead, DenoiserHead, VelocityHead};
use crate::numcore::Array;
use crate::solvers::{integrate_rows, DriftModel, SolverMethod, Trajectory};

use super::data::Batch;

/// `(mean_r ‖pred_r − target_r‖², ∂/∂pred)`.
fn mse(pred: &[f64], target: &[f64], rows: usize) -> (f64, Vec<f64>) {
    let n = rows.max(1) as f64;
    let mut value = 0.0;
    let d_out = pred
        .iter()
        .zip(target)
        .map(|(p, q)| {
            let r = p - q;
            value += r * r;
            2.0 * r / n
        })
        .collect();
    (value / n, d_out)
}

fn consistency_fit(
    head: &ConsistencyHead,
    x: &[f64],
    t: &[f64],
    target: &[f64],
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (pred, cache) = head.forward_cached(x, t)?;
    let (value, d_out) = mse(&pred, target, t.len());
    if !grad {
        return Ok((value, None));
    }
    let mut g = vec![0.0; head.params().len()];
    head.backward(&cache, &d_out, &mut g);
    Ok((value, Some(g)))
}

fn avgdrift_fit(
    head: &AvgDriftHead,
    x: &[f64],
    t: &[f64],
    s: &[f64],
    target: &[f64],
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (pred, cache) = head.forward_cached(x, t, s)?;
    let (value, d_out) = mse(&pred, target, t.len());
    if !grad {
        return Ok((value, None));
    }
    let mut g = vec![0.0; head.params.len()];
    head.backward(&cache, &d_out, &mut g);
    Ok((value, Some(g)))
}

fn dm(head: &DenoiserHead, batch: &Batch, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let x_t = batch.x_t(head.schedule());
    let (pred, cache) = head.forward_cached(&x_t, &batch.t)?;
    let (value, d_out) = mse(&pred, &batch.x0, batch.len());
    if !grad {
        return Ok((value, None));
    }
    let mut g = vec![0.0; head.params().len()];
    head.backward(&cache, &d_out, &mut g);
    Ok((value, Some(g)))
}

fn fm(head: &VelocityHead, batch: &Batch, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let x_t = batch.x_t(&head.sched);
    let target = batch.conditional_velocity(&head.sched);
    let (pred, cache) = head.forward_cached(&x_t, &batch.t)?;
    let (value, d_out) = mse(&pred, &target, batch.len());
    if !grad {
        return Ok((value, None));
    }
    let mut g = vec![0.0; head.params.len()];
    head.backward(&cache, &d_out, &mut g);
    Ok((value, Some(g)))
}

macro_rules! loss_pair {
    ($name:ident, $grad_name:ident, $inner:ident, ($($arg:ident : $ty:ty),*)) => {
        pub fn $name($($arg: $ty),*) -> Result<f64> {
            Ok($inner($($arg),*, false)?.0)
        }

        pub fn $grad_name($($arg: $ty),*) -> Result<(f64, Vec<f64>)> {
            let (v, g) = $inner($($arg),*, true)?;
            Ok((v, g.expect("gradient requested")))
        }
    };
}

loss_pair!(loss_pretrain_dm, loss_pretrain_dm_grad, dm, (head: &DenoiserHead, batch: &Batch));
loss_pair!(loss_pretrain_fm, loss_pretrain_fm_grad, fm, (head: &VelocityHead, batch: &Batch));

fn cmt_cm(
    head: &ConsistencyHead,
    traj: &Trajectory,
    picks: &[(usize, usize)],
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if picks.is_empty() {
        return Err(Error::domain("mid-training index set is empty"));
    }
    let d = traj.dim();
    let m = traj.grid.steps();
    let mut x = Vec::with_capacity(picks.len() * d);
    let mut t = Vec::with_capacity(picks.len());
    let mut target = Vec::with_capacity(picks.len() * d);
    for &(a, i) in picks {
        if i == 0 || i > m || a >= traj.n_anchors() {
            return Err(Error::domain(format!("index ({a}, {i}) outside anchors x 1..={m}")));
        }
        x.extend_from_slice(traj.states[i].row(a));
        t.push(traj.grid.t(i));
        target.extend_from_slice(traj.states[0].row(a));
    }
    consistency_fit(head, &x, &t, &target, grad)
}

loss_pair!(
    loss_cmt_cm,
    loss_cmt_cm_grad,
    cmt_cm,
    (head: &ConsistencyHead, traj: &Trajectory, picks: &[(usize, usize)])
);

fn cmt_mf(
    head: &AvgDriftHead,
    traj: &Trajectory,
    picks: &[(usize, usize, usize)],
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if picks.is_empty() {
        return Err(Error::domain("mid-training pair set is empty"));
    }
    let d = traj.dim();
    let m = traj.grid.steps();
    let mut x = Vec::with_capacity(picks.len() * d);
    let (mut t, mut s) = (Vec::with_capacity(picks.len()), Vec::with_capacity(picks.len()));
    let mut target = Vec::with_capacity(picks.len() * d);
    for &(a, i, j) in picks {
        if i <= j || i > m || a >= traj.n_anchors() {
            return Err(Error::domain(format!("pair ({i}, {j}) needs M >= i > j")));
        }
        let (ti, tj) = (traj.grid.t(i), traj.grid.t(j));
        if ti <= tj {
            return Err(Error::domain("pair times must satisfy t_i > t_j"));
        }
        let (xi, xj) = (traj.states[i].row(a), traj.states[j].row(a));
        x.extend_from_slice(xi);
        t.push(ti);
        s.push(tj);
        target.extend(xi.iter().zip(xj).map(|(p, q)| (p - q) / (ti - tj)));
    }
    avgdrift_fit(head, &x, &t, &s, &target, grad)
}

loss_pair!(
    loss_cmt_mf,
    loss_cmt_mf_grad,
    cmt_mf,
    (head: &AvgDriftHead, traj: &Trajectory, picks: &[(usize, usize, usize)])
);

/// All ordered pairs `i > j` among `n_points` grid points.
pub fn mf_pairs(n_points: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 1..n_points {
        for j in 0..i {
            out.push((i, j));
        }
    }
    out
}

fn shifted_times(head_t: &[f64], delta_t: f64, t_min: f64) -> Result<Vec<f64>> {
    if !(delta_t > 0.0) {
        return Err(Error::domain("Δt must be positive"));
    }
    head_t
        .iter()
        .map(|&t| {
            let s = t - delta_t;
            if s < t_min - 1e-12 {
                Err(Error::domain(format!("t − Δt = {s} below t_min")))
            } else {
                Ok(s.max(t_min))
            }
        })
        .collect()
}

fn ct(
    head: &ConsistencyHead,
    frozen: &ConsistencyHead,
    batch: &Batch,
    delta_t: f64,
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let sched = head.schedule();
    let s = shifted_times(&batch.t, delta_t, sched.terminal())?;
    let x_s = batch.perturbed_at(sched, &s);
    let target = frozen.eval_batch(&x_s, &s)?;
    consistency_fit(head, &batch.x_t(sched), &batch.t, &target, grad)
}

loss_pair!(
    loss_ct,
    loss_ct_grad,
    ct,
    (head: &ConsistencyHead, frozen: &ConsistencyHead, batch: &Batch, delta_t: f64)
);

fn cd(
    head: &ConsistencyHead,
    frozen: &ConsistencyHead,
    teacher: &DriftModel,
    batch: &Batch,
    delta_t: f64,
    method: SolverMethod,
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let sched = head.schedule();
    let s = shifted_times(&batch.t, delta_t, sched.terminal())?;
    let x_t = batch.x_t(sched);
    let (x_s, _) = integrate_rows(teacher, &x_t, &batch.t, &s, 1, method)?;
    let target = frozen.eval_batch(&x_s, &s)?;
    consistency_fit(head, &x_t, &batch.t, &target, grad)
}

loss_pair!(
    loss_cd,
    loss_cd_grad,
    cd,
    (
        head: &ConsistencyHead,
        frozen: &ConsistencyHead,
        teacher: &DriftModel,
        batch: &Batch,
        delta_t: f64,
        method: SolverMethod
    )
);

#[allow(clippy::too_many_arguments)]
fn gcd(
    head: &ConsistencyHead,
    frozen: &ConsistencyHead,
    teacher: &DriftModel,
    batch: &Batch,
    u: f64,
    substeps: usize,
    method: SolverMethod,
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let sched = head.schedule();
    sched.check_time(u)?;
    if let Some(&t) = batch.t.iter().find(|&&t| t < u) {
        return Err(Error::domain(format!("gCD anchor u = {u} exceeds sampled t = {t}")));
    }
    let x_t = batch.x_t(sched);
    let s = vec![u; batch.len()];
    let (x_u, _) = integrate_rows(teacher, &x_t, &batch.t, &s, substeps, method)?;
    let target = frozen.eval_batch(&x_u, &s)?;
    consistency_fit(head, &x_t, &batch.t, &target, grad)
}

loss_pair!(
    loss_gcd,
    loss_gcd_grad,
    gcd,
    (
        head: &ConsistencyHead,
        frozen: &ConsistencyHead,
        teacher: &DriftModel,
        batch: &Batch,
        u: f64,
        substeps: usize,
        method: SolverMethod
    )
);

/// `v − (t − s)(v ∂_x h + ∂_t h)` of the frozen head, one JVP along `(v, 1, 0)` per row.
pub fn mf_target_rows(frozen: &AvgDriftHead, v_val: &[f64], x: &[f64], t: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    let n = t.len();
    let (_, dh) = frozen.jvp_batch(x, t, s, v_val, &vec![1.0; n], &vec![0.0; n])?;
    let d = frozen.dim();
    let mut out = v_val.to_vec();
    for r in 0..n {
        let gap = t[r] - s[r];
        if gap == 0.0 {
            continue;
        }
        for k in r * d..(r + 1) * d {
            out[k] -= gap * dh[k];
        }
    }
    Ok(out)
}

pub fn mf_target(frozen: &AvgDriftHead, v_val: &Array, x: &Array, t: f64, s: f64) -> Result<Array> {
    if v_val.len() != x.len() {
        return Err(Error::shape(format!("{:?}", x.shape()), format!("{:?}", v_val.shape())));
    }
    let n = x.len() / frozen.dim();
    let out = mf_target_rows(frozen, v_val.data(), x.data(), &vec![t; n], &vec![s; n])?;
    Array::new(x.shape().to_vec(), out)
}

/// Source of the instantaneous velocity inside the MF target.
#[derive(Clone, Copy)]
pub enum VelocitySource<'a> {
    /// `α'_t x_0 + σ'_t ε` (training from scratch).
    Conditional,
    /// A pre-trained drift evaluated at `x_t` (distillation).
    Teacher(&'a DriftModel<'a>),
}

fn mf(
    head: &AvgDriftHead,
    frozen: &AvgDriftHead,
    batch: &Batch,
    v_source: VelocitySource,
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let x_t = batch.x_t(&head.sched);
    let v = match v_source {
        VelocitySource::Conditional => batch.conditional_velocity(&head.sched),
        VelocitySource::Teacher(drift) => {
            let mut v = vec![0.0; x_t.len()];
            drift.velocity_rows_into(&x_t, &batch.t, &mut v)?;
            v
        }
    };
    let target = mf_target_rows(frozen, &v, &x_t, &batch.t, &batch.s)?;
    avgdrift_fit(head, &x_t, &batch.t, &batch.s, &target, grad)
}

loss_pair!(
    loss_mf,
    loss_mf_grad,
    mf,
    (head: &AvgDriftHead, frozen: &AvgDriftHead, batch: &Batch, v_source: VelocitySource)
);
