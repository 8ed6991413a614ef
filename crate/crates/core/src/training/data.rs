//! Synthetic datasets, priors and training batches.

use crate::error::{Error, Result};
use crate::numcore::{Array, RngState};
use crate::oracle::GmmSpec;
use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Gmm(GmmSpec),
    /// Two interleaved half circles, centred and scaled by 1/2, with Gaussian jitter.
    TwoMoons {
        noise: f64,
    },
}

impl Dataset {
    pub fn gaussian(dim: usize) -> Self {
        Dataset::Gmm(GmmSpec::standard(dim))
    }

    pub fn two_moons() -> Self {
        Dataset::TwoMoons { noise: 0.05 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset::Gmm(g) => g.dim(),
            Dataset::TwoMoons { .. } => 2,
        }
    }

    pub fn gmm(&self) -> Option<&GmmSpec> {
        match self {
            Dataset::Gmm(g) => Some(g),
            Dataset::TwoMoons { .. } => None,
        }
    }

    pub fn sample(&self, rng: &mut RngState, n: usize) -> Array {
        match self {
            Dataset::Gmm(g) => g.sample(rng, n),
            Dataset::TwoMoons { noise } => {
                let mut angles = rng.derive("moon-angle");
                let mut side = rng.derive("moon-side");
                let mut jitter = rng.derive("moon-noise");
                *rng = rng.derive("next");
                let mut out = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    let th = std::f64::consts::PI * angles.uniforms(1)[0];
                    let (x, y) = if side.uniforms(1)[0] < 0.5 {
                        (th.cos(), th.sin())
                    } else {
                        (1.0 - th.cos(), 0.5 - th.sin())
                    };
                    let e = jitter.normals(2);
                    out.push(0.5 * (x - 0.5 + noise * e[0]));
                    out.push(0.5 * (y - 0.25 + noise * e[1]));
                }
                Array::matrix(n, 2, out).expect("consistent shape")
            }
        }
    }

    /// Exact draws from the diffused marginal `p_t`.
    pub fn sample_marginal(&self, sched: &Schedule, rng: &mut RngState, n: usize, t: f64) -> Array {
        let x0 = self.sample(rng, n);
        let mut eps = vec![0.0; x0.len()];
        rng.derive("marginal-eps").fill_normal(&mut eps);
        *rng = rng.derive("next");
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let data = x0.data().iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
        Array::matrix(n, self.dim(), data).expect("consistent shape")
    }
}

/// Distribution of the anchor `x_T`.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    /// The data diffused to `t_max` (exact `p_T`).
    Diffused(Dataset),
    Isotropic {
        dim: usize,
        std: f64,
    },
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Diffused(d) => d.dim(),
            Prior::Isotropic { dim, .. } => *dim,
        }
    }

    pub fn draw(&self, sched: &Schedule, rng: &mut RngState, n: usize) -> Array {
        match self {
            Prior::Diffused(d) => d.sample_marginal(sched, rng, n, sched.t_max),
            Prior::Isotropic { dim, std } => {
                let mut v = vec![0.0; n * dim];
                rng.fill_normal(&mut v);
                v.iter_mut().for_each(|x| *x *= std);
                Array::matrix(n, *dim, v).expect("consistent shape")
            }
        }
    }
}

/// Clean samples, noise and per-row times (`s` used by two-time objectives).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
}

impl Batch {
    pub fn new(dim: usize, x0: Vec<f64>, eps: Vec<f64>, t: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        let n = t.len();
        if dim == 0 || x0.len() != n * dim || eps.len() != n * dim || !(s.is_empty() || s.len() == n) {
            return Err(Error::shape(
                format!("{n} rows of width {dim}"),
                format!("x0 {} / eps {} / s {}", x0.len(), eps.len(), s.len()),
            ));
        }
        let s = if s.is_empty() { t.clone() } else { s };
        Ok(Self { dim, x0, eps, t, s })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `α_t x_0 + σ_t ε` at the given per-row times.
    pub fn perturbed_at(&self, sched: &Schedule, times: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.x0.len()];
        for (r, &tr) in times.iter().enumerate() {
            let (a, s) = (sched.alpha(tr), sched.sigma(tr));
            for k in r * d..(r + 1) * d {
                out[k] = a * self.x0[k] + s * self.eps[k];
            }
        }
        out
    }

    pub fn x_t(&self, sched: &Schedule) -> Vec<f64> {
        self.perturbed_at(sched, &self.t)
    }

    /// Conditional velocity `α'_t x_0 + σ'_t ε`.
    pub fn conditional_velocity(&self, sched: &Schedule) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.x0.len()];
        for (r, &tr) in self.t.iter().enumerate() {
            let (da, ds) = (sched.alpha_prime(tr), sched.sigma_prime(tr));
            for k in r * d..(r + 1) * d {
                out[k] = da * self.x0[k] + ds * self.eps[k];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_is_centred_and_small() {
        let x = Dataset::two_moons().sample(&mut RngState::new(3), 20_000);
        let (mut mx, mut my) = (0.0, 0.0);
        for r in 0..x.rows() {
            mx += x.row(r)[0];
            my += x.row(r)[1];
        }
        let n = x.rows() as f64;
        assert!((mx / n).abs() < 0.02 && (my / n).abs() < 0.02);
        assert!(x.data().iter().all(|v| v.abs() < 1.5));
    }

    #[test]
    fn batch_perturbation() {
        let b = Batch::new(1, vec![1.0], vec![1.0], vec![1.0], vec![]).unwrap();
        assert_eq!(b.x_t(&Schedule::edm()), vec![2.0]);
        assert_eq!(b.conditional_velocity(&Schedule::fm()), vec![0.0]);
        assert_eq!(b.s, b.t);
    }

    #[test]
    fn diffused_prior_variance() {
        let sched = Schedule::edm();
        let x = Prior::Diffused(Dataset::gaussian(1)).draw(&sched, &mut RngState::new(1), 50_000);
        let var = x.data().iter().map(|v| v * v).sum::<f64>() / 50_000.0;
        assert!((var / 101.0 - 1.0).abs() < 0.03);
    }
}
