//! Few-step samplers for consistency and mean-flow models.

use crate::error::{Error, Result};
use crate::heads::{AvgDriftHead, ConsistencyHead};
use crate::numcore::{Array, RngState};
use crate::schedule::{GridKind, Schedule, ScheduleKind, TimeGrid};

use super::data::Prior;

/// Re-noising times between the denoising passes of an `n`-step CM sampler:
/// geometric between `T` and `t_min` for EDM, uniform for FM.
pub fn cm_intermediate_times(sched: &Schedule, n_steps: usize) -> Vec<f64> {
    let (hi, lo) = (sched.t_max, sched.terminal());
    (1..n_steps)
        .map(|k| {
            let frac = k as f64 / n_steps as f64;
            match sched.kind {
                ScheduleKind::Edm => hi * (lo / hi).powf(frac),
                ScheduleKind::Fm => hi + frac * (lo - hi),
            }
        })
        .collect()
}

/// Multistep consistency sampling starting from given prior draws.
pub fn sample_cm_from(head: &ConsistencyHead, n_steps: usize, x_big_t: &Array, rng: &mut RngState) -> Result<Array> {
    if n_steps == 0 {
        return Err(Error::domain("sampler needs at least one step"));
    }
    let sched = *head.schedule();
    let n = x_big_t.len() / head.dim();
    let mut x = head.eval_batch(x_big_t.data(), &vec![sched.t_max; n])?;
    let mut noise = rng.derive("cm-renoise");
    *rng = rng.derive("next");
    for tau in cm_intermediate_times(&sched, n_steps) {
        let (a, s) = (sched.alpha(tau), sched.sigma(tau));
        let mut eps = vec![0.0; x.len()];
        noise.fill_normal(&mut eps);
        let noisy: Vec<f64> = x.iter().zip(&eps).map(|(v, e)| a * v + s * e).collect();
        x = head.eval_batch(&noisy, &vec![tau; n])?;
    }
    Array::new(x_big_t.shape().to_vec(), x)
}

/// Deterministic mean-flow sampling along a uniform grid from given prior draws.
pub fn sample_mf_from(head: &AvgDriftHead, n_steps: usize, x_big_t: &Array) -> Result<Array> {
    if n_steps == 0 {
        return Err(Error::domain("sampler needs at least one step"));
    }
    let sched = head.sched;
    let grid = TimeGrid::between(sched.t_max, sched.terminal(), n_steps, GridKind::Uniform, 1.0)?;
    let n = x_big_t.len() / head.dim();
    let mut x = x_big_t.data().to_vec();
    for i in (1..=n_steps).rev() {
        x = head.flowmap_batch(&x, &vec![grid.t(i); n], &vec![grid.t(i - 1); n])?;
    }
    Array::new(x_big_t.shape().to_vec(), x)
}

/// A generator that can be sampled in a few steps.
#[derive(Clone, Copy)]
pub enum FewStepModel<'a> {
    Consistency(&'a ConsistencyHead),
    MeanFlow(&'a AvgDriftHead),
}

/// Draws `count` samples: prior draws from `rng`, then `n_steps` model steps.
pub fn sample(model: FewStepModel, n_steps: usize, prior: &Prior, rng: &mut RngState, count: usize) -> Result<Array> {
    let sched = match model {
        FewStepModel::Consistency(h) => *h.schedule(),
        FewStepModel::MeanFlow(h) => h.sched,
    };
    let x_big_t = prior.draw(&sched, &mut rng.derive("prior"), count);
    let mut steps_rng = rng.derive("steps");
    *rng = rng.derive("next");
    match model {
        FewStepModel::Consistency(h) => sample_cm_from(h, n_steps, &x_big_t, &mut steps_rng),
        FewStepModel::MeanFlow(h) => sample_mf_from(h, n_steps, &x_big_t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{MlpArch, NetParams};
    use crate::training::Dataset;

    #[test]
    fn two_step_midpoint_is_geometric() {
        let t = cm_intermediate_times(&Schedule::edm(), 2);
        assert_eq!(t.len(), 1);
        assert!((t[0] - (0.002f64 * 10.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_mf_head_returns_prior() {
        let head = AvgDriftHead::new(NetParams::zeros(MlpArch::standard(2, 2)), Schedule::fm()).unwrap();
        let prior = Prior::Diffused(Dataset::two_moons());
        let mut r1 = RngState::new(4);
        let out = sample(FewStepModel::MeanFlow(&head), 1, &prior, &mut r1, 5).unwrap();
        let direct = prior.draw(&Schedule::fm(), &mut RngState::new(4).derive("prior"), 5);
        assert_eq!(out, direct);
    }

    #[test]
    fn one_step_cm_is_generate() {
        let mut rng = RngState::new(9);
        let head = ConsistencyHead::new(
            NetParams::random(MlpArch::standard(1, 1), &mut rng),
            Schedule::edm(),
            1.0,
        )
        .unwrap();
        let prior = Prior::Isotropic { dim: 1, std: 10.0 };
        let out = sample(FewStepModel::Consistency(&head), 1, &prior, &mut RngState::new(2), 4).unwrap();
        let x = prior.draw(&Schedule::edm(), &mut RngState::new(2).derive("prior"), 4);
        assert_eq!(out.data(), head.generate(x.data()).unwrap().as_slice());
    }
}
