//! Model heads over the raw MLP: denoiser `D`, velocity `v`, consistency
//! function `f` and two-time average drift `h`.
//!
//! Batched entry points take `x` as `n x dim` row-major and one time per row.

use crate::error::{Error, Result};
use crate::numcore::{Array, MlpCache, NetParams};
use crate::schedule::Schedule;

/// EDM-style skip/out/in coefficients. `shift` moves the point where
/// `c_skip = 1` and `c_out = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioner {
    pub sigma_data: f64,
    pub shift: f64,
}

impl Preconditioner {
    pub fn c_skip(&self, t: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        let u = t - self.shift;
        sd2 / (sd2 + u * u)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        let sd = self.sigma_data;
        sd * (t - self.shift) / (sd * sd + t * t).sqrt()
    }

    pub fn c_in(&self, t: f64) -> f64 {
        1.0 / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }
}

/// Cached forward pass of a head, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct HeadCache {
    mlp: MlpCache,
    out_scale: Vec<f64>,
}

fn check_data_dim(params: &NetParams, time_inputs: usize) -> Result<usize> {
    let a = &params.arch;
    if a.input_dim != a.output_dim || a.time_inputs != time_inputs {
        return Err(Error::shape(
            format!("square net with {time_inputs} time input(s)"),
            format!(
                "{} -> {} with {} time input(s)",
                a.input_dim, a.output_dim, a.time_inputs
            ),
        ));
    }
    Ok(a.input_dim)
}

fn rows(x: &[f64], dim: usize, n: usize) -> Result<()> {
    if x.len() != n * dim {
        return Err(Error::shape(format!("{n} x {dim} values"), x.len()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
struct Preconditioned {
    params: NetParams,
    sched: Schedule,
    pre: Preconditioner,
}

impl Preconditioned {
    fn net_inputs(&self, x: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dim = self.params.arch.input_dim;
        let mut scaled = Vec::with_capacity(x.len());
        for (r, &tr) in t.iter().enumerate() {
            let c = self.pre.c_in(tr);
            scaled.extend(x[r * dim..(r + 1) * dim].iter().map(|v| c * v));
        }
        let cond = t.iter().map(|&tr| self.sched.cond_time(tr)).collect();
        (scaled, cond)
    }

    fn combine(&self, x: &[f64], t: &[f64], raw: &[f64]) -> Vec<f64> {
        let dim = self.params.arch.input_dim;
        let mut out = Vec::with_capacity(x.len());
        for (r, &tr) in t.iter().enumerate() {
            let (cs, co) = (self.pre.c_skip(tr), self.pre.c_out(tr));
            for k in r * dim..(r + 1) * dim {
                out.push(cs * x[k] + co * raw[k]);
            }
        }
        out
    }

    fn eval_batch(&self, x: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        let dim = self.params.arch.input_dim;
        rows(x, dim, t.len())?;
        for &tr in t {
            self.sched.check_time(tr)?;
        }
        let (xin, cond) = self.net_inputs(x, t);
        let (raw, _) = self.params.forward_batch(&xin, &cond, t.len())?;
        Ok(self.combine(x, t, &raw))
    }

    fn forward_cached(&self, x: &[f64], t: &[f64]) -> Result<(Vec<f64>, HeadCache)> {
        let dim = self.params.arch.input_dim;
        rows(x, dim, t.len())?;
        for &tr in t {
            self.sched.check_time(tr)?;
        }
        let (xin, cond) = self.net_inputs(x, t);
        let (raw, mlp) = self.params.forward_batch(&xin, &cond, t.len())?;
        let out_scale = t.iter().map(|&tr| self.pre.c_out(tr)).collect();
        Ok((self.combine(x, t, &raw), HeadCache { mlp, out_scale }))
    }

    fn backward(&self, cache: &HeadCache, d_out: &[f64], grad: &mut [f64]) {
        let dim = self.params.arch.input_dim;
        let d_raw: Vec<f64> = d_out
            .iter()
            .enumerate()
            .map(|(k, d)| d * cache.out_scale[k / dim])
            .collect();
        self.params.backward(&cache.mlp, &d_raw, grad);
    }
}

macro_rules! preconditioned_head {
    ($name:ident) => {
        impl $name {
            pub fn params(&self) -> &NetParams {
                &self.inner.params
            }

            pub fn schedule(&self) -> &Schedule {
                &self.inner.sched
            }

            pub fn sigma_data(&self) -> f64 {
                self.inner.pre.sigma_data
            }

            pub fn preconditioner(&self) -> Preconditioner {
                self.inner.pre
            }

            pub fn dim(&self) -> usize {
                self.inner.params.arch.input_dim
            }

            /// Same head with different parameters of the same architecture.
            pub fn with_params(&self, params: NetParams) -> Self {
                debug_assert_eq!(params.arch, self.inner.params.arch);
                let mut inner = self.inner.clone();
                inner.params = params;
                Self { inner }
            }

            pub fn into_params(self) -> NetParams {
                self.inner.params
            }

            pub fn eval(&self, x: &Array, t: f64) -> Result<Array> {
                Ok(Array::vector(self.inner.eval_batch(x.data(), &[t])?))
            }

            pub fn eval_batch(&self, x: &[f64], t: &[f64]) -> Result<Vec<f64>> {
                self.inner.eval_batch(x, t)
            }

            pub fn forward_cached(&self, x: &[f64], t: &[f64]) -> Result<(Vec<f64>, HeadCache)> {
                self.inner.forward_cached(x, t)
            }

            /// Accumulates the parameter pullback of `d_out` into `grad`.
            pub fn backward(&self, cache: &HeadCache, d_out: &[f64], grad: &mut [f64]) {
                self.inner.backward(cache, d_out, grad)
            }
        }
    };
}

/// `D(x, t) = c_skip x + c_out F(c_in x, t)` with the EDM preconditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserHead {
    inner: Preconditioned,
}

impl DenoiserHead {
    pub fn new(params: NetParams, sched: Schedule, sigma_data: f64) -> Result<Self> {
        check_data_dim(&params, 1)?;
        if sigma_data <= 0.0 {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        Ok(Self {
            inner: Preconditioned {
                params,
                sched,
                pre: Preconditioner { sigma_data, shift: 0.0 },
            },
        })
    }
}

preconditioned_head!(DenoiserHead);

/// Consistency function `f(x, t)`.
///
/// Uses the denoiser preconditioner shifted to the clean endpoint, so
/// `f(x, t_0) = x` holds exactly for any parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyHead {
    inner: Preconditioned,
}

impl ConsistencyHead {
    pub fn new(params: NetParams, sched: Schedule, sigma_data: f64) -> Result<Self> {
        check_data_dim(&params, 1)?;
        if sigma_data <= 0.0 {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        Ok(Self {
            inner: Preconditioned {
                params,
                sched,
                pre: Preconditioner {
                    sigma_data,
                    shift: sched.terminal(),
                },
            },
        })
    }

    /// One-step generation from a prior draw at `t_max`.
    pub fn generate(&self, x_t: &[f64]) -> Result<Vec<f64>> {
        let n = x_t.len() / self.dim();
        self.eval_batch(x_t, &vec![self.inner.sched.t_max; n])
    }
}

preconditioned_head!(ConsistencyHead);

/// Raw network velocity `v(x, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityHead {
    pub params: NetParams,
    pub sched: Schedule,
}

impl VelocityHead {
    pub fn new(params: NetParams, sched: Schedule) -> Result<Self> {
        check_data_dim(&params, 1)?;
        Ok(Self { params, sched })
    }

    pub fn dim(&self) -> usize {
        self.params.arch.input_dim
    }

    pub fn with_params(&self, params: NetParams) -> Self {
        Self {
            params,
            sched: self.sched,
        }
    }

    pub fn eval_batch(&self, x: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        rows(x, self.dim(), t.len())?;
        let cond: Vec<f64> = t.iter().map(|&v| self.sched.cond_time(v)).collect();
        Ok(self.params.forward_batch(x, &cond, t.len())?.0)
    }

    pub fn eval(&self, x: &Array, t: f64) -> Result<Array> {
        Ok(Array::vector(self.eval_batch(x.data(), &[t])?))
    }

    pub fn forward_cached(&self, x: &[f64], t: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        rows(x, self.dim(), t.len())?;
        let cond: Vec<f64> = t.iter().map(|&v| self.sched.cond_time(v)).collect();
        self.params.forward_batch(x, &cond, t.len())
    }

    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut [f64]) {
        self.params.backward(cache, d_out, grad);
    }
}

/// Average drift `h(x, t, s)` over `[s, t]`; raw network output, no preconditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct AvgDriftHead {
    pub params: NetParams,
    pub sched: Schedule,
}

impl AvgDriftHead {
    pub fn new(params: NetParams, sched: Schedule) -> Result<Self> {
        check_data_dim(&params, 2)?;
        Ok(Self { params, sched })
    }

    pub fn dim(&self) -> usize {
        self.params.arch.input_dim
    }

    pub fn with_params(&self, params: NetParams) -> Self {
        Self {
            params,
            sched: self.sched,
        }
    }

    fn cond(&self, t: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        if t.len() != s.len() {
            return Err(Error::shape(format!("{} end times", t.len()), s.len()));
        }
        let mut cond = Vec::with_capacity(2 * t.len());
        for (&tr, &sr) in t.iter().zip(s) {
            if tr < sr {
                return Err(Error::domain(format!("average drift needs t >= s, got t={tr} s={sr}")));
            }
            cond.push(self.sched.cond_time(tr));
            cond.push(self.sched.cond_time(sr));
        }
        Ok(cond)
    }

    pub fn eval_batch(&self, x: &[f64], t: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        rows(x, self.dim(), t.len())?;
        let cond = self.cond(t, s)?;
        Ok(self.params.forward_batch(x, &cond, t.len())?.0)
    }

    pub fn eval(&self, x: &Array, t: f64, s: f64) -> Result<Array> {
        Ok(Array::vector(self.eval_batch(x.data(), &[t], &[s])?))
    }

    pub fn forward_cached(&self, x: &[f64], t: &[f64], s: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        rows(x, self.dim(), t.len())?;
        let cond = self.cond(t, s)?;
        self.params.forward_batch(x, &cond, t.len())
    }

    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut [f64]) {
        self.params.backward(cache, d_out, grad);
    }

    /// `(h, ∂h[tx, tt, ts])` for per-row tangents on `x`, `t` and `s`.
    pub fn jvp_batch(
        &self,
        x: &[f64],
        t: &[f64],
        s: &[f64],
        tx: &[f64],
        tt: &[f64],
        ts: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        rows(x, self.dim(), t.len())?;
        let cond = self.cond(t, s)?;
        let mut dcond = Vec::with_capacity(cond.len());
        for r in 0..t.len() {
            dcond.push(self.sched.cond_time_deriv(t[r]) * tt[r]);
            dcond.push(self.sched.cond_time_deriv(s[r]) * ts[r]);
        }
        self.params.jvp_batch(x, &cond, tx, &dcond, t.len())
    }

    /// `x + (s - t) h(x, t, s)` for each row.
    pub fn flowmap_batch(&self, x: &[f64], t: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let h = self.eval_batch(x, t, s)?;
        let dim = self.dim();
        let mut out = x.to_vec();
        for (r, (&tr, &sr)) in t.iter().zip(s).enumerate() {
            if tr == sr {
                continue;
            }
            for k in r * dim..(r + 1) * dim {
                out[k] += (sr - tr) * h[k];
            }
        }
        Ok(out)
    }
}

pub fn denoiser_eval(head: &DenoiserHead, x: &Array, t: f64) -> Result<Array> {
    head.eval(x, t)
}

pub fn consistency_eval(head: &ConsistencyHead, x: &Array, t: f64) -> Result<Array> {
    head.eval(x, t)
}

pub fn avgdrift_eval(head: &AvgDriftHead, x: &Array, t: f64, s: f64) -> Result<Array> {
    head.eval(x, t, s)
}

/// `Ψ̂_{t→s}(x) = x + (s - t) h(x, t, s)`; returns `x` unchanged when `t == s`.
pub fn flowmap_from_drift(head: &AvgDriftHead, x: &Array, t: f64, s: f64) -> Result<Array> {
    Ok(Array::vector(head.flowmap_batch(x.data(), &[t], &[s])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Activation, MlpArch, RngState};

    fn arch(time_inputs: usize) -> MlpArch {
        MlpArch::new(2, time_inputs, vec![16, 16], 2, Activation::Silu).unwrap()
    }

    fn random(time_inputs: usize, seed: u64) -> NetParams {
        NetParams::random(arch(time_inputs), &mut RngState::new(seed))
    }

    #[test]
    fn zero_net_denoiser_is_skip_scaled_input() {
        let h = DenoiserHead::new(NetParams::zeros(arch(1)), Schedule::edm(), 0.5).unwrap();
        let x = Array::vector(vec![1.0, -2.0]);
        let out = denoiser_eval(&h, &x, 1.3).unwrap();
        let cs = h.preconditioner().c_skip(1.3);
        assert_eq!(out.data(), &[cs, -2.0 * cs]);
    }

    #[test]
    fn denoiser_near_t_min_is_almost_identity() {
        let h = DenoiserHead::new(random(1, 1), Schedule::edm(), 1.0).unwrap();
        let x = Array::vector(vec![0.4, 0.9]);
        let out = h.eval(&x, 0.002).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-2);
        }
    }

    #[test]
    fn preconditioner_algebra() {
        let p = Preconditioner {
            sigma_data: 0.5,
            shift: 0.0,
        };
        for &t in &[0.002, 0.1, 1.0, 3.7, 10.0] {
            let base = p.sigma_data.powi(2) + t * t;
            assert!((p.c_skip(t) * base - p.sigma_data.powi(2)).abs() < 1e-12);
            assert!((p.c_out(t).powi(2) * base - p.sigma_data.powi(2) * t * t).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_boundary_is_exact() {
        let s = Schedule::edm();
        for seed in 0..5 {
            let h = ConsistencyHead::new(random(1, seed), s, 0.5).unwrap();
            let x = Array::vector(vec![0.3 * seed as f64, -1.7]);
            assert_eq!(consistency_eval(&h, &x, s.t_min).unwrap(), x);
        }
    }

    #[test]
    fn zero_net_consistency_is_skip_scaled() {
        let h = ConsistencyHead::new(NetParams::zeros(arch(1)), Schedule::edm(), 0.5).unwrap();
        let out = h.eval(&Array::vector(vec![2.0, 1.0]), 4.0).unwrap();
        let cs = h.preconditioner().c_skip(4.0);
        assert_eq!(out.data(), &[2.0 * cs, cs]);
    }

    #[test]
    fn avgdrift_rejects_reversed_times() {
        let h = AvgDriftHead::new(random(2, 3), Schedule::fm()).unwrap();
        assert!(matches!(
            h.eval(&Array::vector(vec![0.0, 0.0]), 0.2, 0.5),
            Err(Error::Domain(_))
        ));
        assert!(h.eval(&Array::vector(vec![0.0, 0.0]), 0.5, 0.5).is_ok());
    }

    #[test]
    fn zero_drift_is_identity_map() {
        let h = AvgDriftHead::new(NetParams::zeros(arch(2)), Schedule::fm()).unwrap();
        let x = Array::vector(vec![0.3, -0.1]);
        assert_eq!(h.eval(&x, 0.9, 0.1).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(flowmap_from_drift(&h, &x, 0.9, 0.1).unwrap(), x);
    }

    #[test]
    fn equal_times_return_input_bitwise() {
        let h = AvgDriftHead::new(random(2, 9), Schedule::fm()).unwrap();
        let x = Array::vector(vec![0.123456789, -9.87654321]);
        assert_eq!(flowmap_from_drift(&h, &x, 0.4, 0.4).unwrap(), x);
    }

    #[test]
    fn wrong_time_inputs_rejected() {
        assert!(AvgDriftHead::new(random(1, 0), Schedule::fm()).is_err());
        assert!(ConsistencyHead::new(random(2, 0), Schedule::edm(), 0.5).is_err());
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let s = Schedule::edm();
        let h = ConsistencyHead::new(random(1, 4), s, 0.5).unwrap();
        let x = [0.3, -0.7, 1.2, 0.1];
        let t = [0.7, 4.0];
        let w = [0.5, -1.0, 0.25, 2.0];
        let (_, cache) = h.forward_cached(&x, &t).unwrap();
        let mut g = vec![0.0; h.params().len()];
        h.backward(&cache, &w, &mut g);
        let f = |p: NetParams| -> f64 {
            let y = h.with_params(p).eval_batch(&x, &t).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        for i in (0..g.len()).step_by(7) {
            let mut plus = h.params().clone();
            plus.values[i] += 1e-6;
            let mut minus = h.params().clone();
            minus.values[i] -= 1e-6;
            let fd = (f(plus) - f(minus)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
