//! Time-conditioned MLP with batched forward, reverse-mode backward and
//! forward-mode tangent propagation.
//!
//! Parameters are one flat vector; layer `l` stores its weight matrix
//! (`out x in`, row-major) followed by its bias.

use matrixmultiply::dgemm;
use serde::{Deserialize, Serialize};

use super::{Array, RngState};
use crate::error::{Error, Result};

/// Width of the sinusoidal embedding of each time input.
pub const TIME_EMBED_WIDTH: usize = 16;

const EMBED_FREQS: usize = TIME_EMBED_WIDTH / 2;

fn embed_freq(k: usize) -> f64 {
    // geometric ladder from 1 to 16 rad per unit of conditioning time
    (k as f64 * 4.0 / (EMBED_FREQS - 1) as f64).exp2()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Silu => a / (1.0 + (-a).exp()),
        }
    }

    #[inline]
    fn deriv(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 + a * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub time_inputs: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpArch {
    pub fn new(
        input_dim: usize,
        time_inputs: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if hidden_widths.is_empty() {
            return Err(Error::Config("MLP needs at least one hidden layer".into()));
        }
        if input_dim == 0 || output_dim == 0 || hidden_widths.contains(&0) {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        Ok(Self {
            input_dim,
            time_inputs,
            hidden_widths,
            output_dim,
            activation,
        })
    }

    /// Three SiLU layers of width 128.
    pub fn standard(data_dim: usize, time_inputs: usize) -> Self {
        Self {
            input_dim: data_dim,
            time_inputs,
            hidden_widths: vec![128; 3],
            output_dim: data_dim,
            activation: Activation::Silu,
        }
    }

    pub fn net_input_width(&self) -> usize {
        self.input_dim + TIME_EMBED_WIDTH * self.time_inputs
    }

    /// `(fan_in, fan_out)` of every affine layer, first to last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.net_input_width();
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Activations retained by a batched forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    n: usize,
    times: Vec<f64>,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.n
    }
}

/// Gradients of a scalar with respect to the network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGrad {
    pub x: Vec<f64>,
    pub times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub arch: MlpArch,
    pub values: Vec<f64>,
}

impl NetParams {
    pub fn new(arch: MlpArch, values: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(Error::shape(format!("{expected} parameters"), values.len()));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: MlpArch) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            values: vec![0.0; n],
        }
    }

    /// Scaled-uniform hidden layers, zero output layer: the raw net starts at 0.
    pub fn init(arch: MlpArch, rng: &mut RngState) -> Self {
        let mut p = Self::random(arch, rng);
        let (fan_in, fan_out) = *p.arch.layer_dims().last().unwrap();
        let n = p.values.len();
        p.values[n - fan_in * fan_out - fan_out..].fill(0.0);
        p
    }

    /// Every layer scaled-uniform, including the output layer.
    pub fn random(arch: MlpArch, rng: &mut RngState) -> Self {
        let mut values = Vec::with_capacity(arch.param_count());
        for (fan_in, fan_out) in arch.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let u = rng.uniforms(fan_in * fan_out + fan_out);
            values.extend(u.iter().map(|v| bound * (2.0 * v - 1.0)));
        }
        Self { arch, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_batch(&self, x: &[f64], times: &[f64], n: usize) -> Result<()> {
        let a = &self.arch;
        if x.len() != n * a.input_dim {
            return Err(Error::shape(
                format!("{} input values ({n} x {})", n * a.input_dim, a.input_dim),
                x.len(),
            ));
        }
        if times.len() != n * a.time_inputs {
            return Err(Error::shape(
                format!("{} time values ({n} x {})", n * a.time_inputs, a.time_inputs),
                times.len(),
            ));
        }
        Ok(())
    }

    fn build_input(&self, x: &[f64], times: &[f64], n: usize) -> Vec<f64> {
        let a = &self.arch;
        let width = a.net_input_width();
        let mut input = vec![0.0; n * width];
        for r in 0..n {
            let row = &mut input[r * width..(r + 1) * width];
            row[..a.input_dim].copy_from_slice(&x[r * a.input_dim..(r + 1) * a.input_dim]);
            for j in 0..a.time_inputs {
                let tau = times[r * a.time_inputs + j];
                let emb = &mut row[a.input_dim + j * TIME_EMBED_WIDTH..][..TIME_EMBED_WIDTH];
                for k in 0..EMBED_FREQS {
                    let w = embed_freq(k);
                    emb[2 * k] = (w * tau).sin();
                    emb[2 * k + 1] = (w * tau).cos();
                }
            }
        }
        input
    }

    fn build_input_tangent(&self, tx: &[f64], times: &[f64], tt: &[f64], n: usize) -> Vec<f64> {
        let a = &self.arch;
        let width = a.net_input_width();
        let mut out = vec![0.0; n * width];
        for r in 0..n {
            let row = &mut out[r * width..(r + 1) * width];
            row[..a.input_dim].copy_from_slice(&tx[r * a.input_dim..(r + 1) * a.input_dim]);
            for j in 0..a.time_inputs {
                let tau = times[r * a.time_inputs + j];
                let dtau = tt[r * a.time_inputs + j];
                let emb = &mut row[a.input_dim + j * TIME_EMBED_WIDTH..][..TIME_EMBED_WIDTH];
                for k in 0..EMBED_FREQS {
                    let w = embed_freq(k);
                    emb[2 * k] = w * (w * tau).cos() * dtau;
                    emb[2 * k + 1] = -w * (w * tau).sin() * dtau;
                }
            }
        }
        out
    }

    /// Single-input evaluation of the raw network.
    pub fn forward(&self, x: &Array, times: &[f64]) -> Result<Array> {
        let (out, _) = self.forward_batch(x.data(), times, 1)?;
        Ok(Array::vector(out))
    }

    /// Evaluates `n` rows at once; `x` is `n x input_dim`, `times` is `n x time_inputs`.
    pub fn forward_batch(&self, x: &[f64], times: &[f64], n: usize) -> Result<(Vec<f64>, MlpCache)> {
        self.check_batch(x, times, n)?;
        let input = self.build_input(x, times, n);
        let dims = self.arch.layer_dims();
        let last = dims.len() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(last);
        let mut offset = 0;
        let mut output = Vec::new();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let (w, b) = self.layer(offset, fan_in, fan_out);
            offset += fan_in * fan_out + fan_out;
            let src: &[f64] = if l == 0 { &input } else { &post[l - 1] };
            let z = affine(src, w, b, n, fan_in, fan_out);
            if l == last {
                output = z;
            } else {
                let act = self.arch.activation;
                let h = z.iter().map(|&a| act.apply(a)).collect();
                pre.push(z);
                post.push(h);
            }
        }
        let cache = MlpCache {
            n,
            times: times.to_vec(),
            input,
            pre,
            post,
        };
        Ok((output, cache))
    }

    fn layer(&self, offset: usize, fan_in: usize, fan_out: usize) -> (&[f64], &[f64]) {
        let w = &self.values[offset..offset + fan_in * fan_out];
        let b = &self.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        (w, b)
    }

    /// Reverse pass: accumulates `d_out`'s pullback into `grad` and returns the
    /// pullback onto the embedded network input (`n x net_input_width`).
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n = cache.n;
        let dims = self.arch.layer_dims();
        assert_eq!(d_out.len(), n * self.arch.output_dim);
        assert_eq!(grad.len(), self.values.len());
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(i, o) in &dims {
            offsets.push(off);
            off += i * o + o;
        }
        let mut delta = d_out.to_vec();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let src: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let off = offsets[l];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                // gW += delta^T src
                unsafe {
                    dgemm(
                        fan_out,
                        n,
                        fan_in,
                        1.0,
                        delta.as_ptr(),
                        1,
                        fan_out as isize,
                        src.as_ptr(),
                        fan_in as isize,
                        1,
                        1.0,
                        gw.as_mut_ptr(),
                        fan_in as isize,
                        1,
                    );
                }
                for r in 0..n {
                    for (g, d) in gb.iter_mut().zip(&delta[r * fan_out..(r + 1) * fan_out]) {
                        *g += d;
                    }
                }
            }
            let (w, _) = self.layer(off, fan_in, fan_out);
            let mut d_src = vec![0.0; n * fan_in];
            unsafe {
                dgemm(
                    n,
                    fan_out,
                    fan_in,
                    1.0,
                    delta.as_ptr(),
                    fan_out as isize,
                    1,
                    w.as_ptr(),
                    fan_in as isize,
                    1,
                    0.0,
                    d_src.as_mut_ptr(),
                    fan_in as isize,
                    1,
                );
            }
            if l > 0 {
                let act = self.arch.activation;
                for (d, &a) in d_src.iter_mut().zip(&cache.pre[l - 1]) {
                    *d *= act.deriv(a);
                }
            }
            delta = d_src;
        }
        delta
    }

    /// Maps a pullback on the embedded input back to raw `x` and time inputs.
    pub fn input_grad(&self, cache: &MlpCache, d_input: &[f64]) -> InputGrad {
        let a = &self.arch;
        let width = a.net_input_width();
        let n = cache.n;
        let mut gx = Vec::with_capacity(n * a.input_dim);
        let mut gt = vec![0.0; n * a.time_inputs];
        for r in 0..n {
            let row = &d_input[r * width..(r + 1) * width];
            gx.extend_from_slice(&row[..a.input_dim]);
            for j in 0..a.time_inputs {
                let tau = cache.times[r * a.time_inputs + j];
                let emb = &row[a.input_dim + j * TIME_EMBED_WIDTH..][..TIME_EMBED_WIDTH];
                let mut acc = 0.0;
                for k in 0..EMBED_FREQS {
                    let w = embed_freq(k);
                    acc += emb[2 * k] * w * (w * tau).cos() - emb[2 * k + 1] * w * (w * tau).sin();
                }
                gt[r * a.time_inputs + j] = acc;
            }
        }
        InputGrad { x: gx, times: gt }
    }

    /// Pullback of `w` through the network onto its inputs (a VJP).
    pub fn vjp_inputs(&self, x: &[f64], times: &[f64], n: usize, w: &[f64]) -> Result<InputGrad> {
        let (_, cache) = self.forward_batch(x, times, n)?;
        let mut scratch = vec![0.0; self.values.len()];
        let d_input = self.backward(&cache, w, &mut scratch);
        Ok(self.input_grad(&cache, &d_input))
    }

    /// Forward-mode pass: returns `(F(x, times), dF[tangent_x, tangent_times])`.
    pub fn jvp_batch(
        &self,
        x: &[f64],
        times: &[f64],
        tangent_x: &[f64],
        tangent_times: &[f64],
        n: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_batch(x, times, n)?;
        if tangent_x.len() != x.len() || tangent_times.len() != times.len() {
            return Err(Error::shape(
                format!("tangents of length {} and {}", x.len(), times.len()),
                format!("{} and {}", tangent_x.len(), tangent_times.len()),
            ));
        }
        let mut h = self.build_input(x, times, n);
        let mut dh = self.build_input_tangent(tangent_x, times, tangent_times, n);
        let dims = self.arch.layer_dims();
        let last = dims.len() - 1;
        let act = self.arch.activation;
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let (w, b) = self.layer(offset, fan_in, fan_out);
            offset += fan_in * fan_out + fan_out;
            let z = affine(&h, w, b, n, fan_in, fan_out);
            let dz = affine(&dh, w, &[], n, fan_in, fan_out);
            if l == last {
                return Ok((z, dz));
            }
            h = z.iter().map(|&a| act.apply(a)).collect();
            dh = z.iter().zip(&dz).map(|(&a, &da)| act.deriv(a) * da).collect();
        }
        unreachable!("network has an output layer")
    }

    /// Single-input JVP.
    pub fn jvp(&self, x: &Array, times: &[f64], tangent_x: &Array, tangent_times: &[f64]) -> Result<(Array, Array)> {
        let (y, dy) = self.jvp_batch(x.data(), times, tangent_x.data(), tangent_times, 1)?;
        Ok((Array::vector(y), Array::vector(dy)))
    }
}

/// `src (n x fan_in) . W^T + b`, with `W` stored `fan_out x fan_in`; empty `b` means no bias.
fn affine(src: &[f64], w: &[f64], b: &[f64], n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut z = vec![0.0; n * fan_out];
    if !b.is_empty() {
        for r in 0..n {
            z[r * fan_out..(r + 1) * fan_out].copy_from_slice(b);
        }
    }
    unsafe {
        dgemm(
            n,
            fan_in,
            fan_out,
            1.0,
            src.as_ptr(),
            fan_in as isize,
            1,
            w.as_ptr(),
            1,
            fan_in as isize,
            if b.is_empty() { 0.0 } else { 1.0 },
            z.as_mut_ptr(),
            fan_out as isize,
            1,
        );
    }
    z
}

/// Runs `loss`, which writes `dL/dθ` into the provided zeroed buffer, and
/// validates the result.
pub fn grad_reverse<F>(params: &NetParams, loss: F) -> Result<(f64, Array)>
where
    F: FnOnce(&NetParams, &mut [f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; params.len()];
    let value = loss(params, &mut grad)?;
    if !value.is_finite() {
        return Err(Error::Numeric {
            what: "loss".into(),
            index: crate::error::first_non_finite(&grad),
        });
    }
    if let Some(i) = crate::error::first_non_finite(&grad) {
        return Err(Error::Numeric {
            what: "gradient".into(),
            index: Some(i),
        });
    }
    Ok((value, Array::vector(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> MlpArch {
        MlpArch::new(2, 1, vec![8, 8], 2, Activation::Silu).unwrap()
    }

    #[test]
    fn param_count_matches_layers() {
        let a = arch();
        // (2+16)*8+8 + 8*8+8 + 8*2+2
        assert_eq!(a.param_count(), 152 + 72 + 18);
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = RngState::new(1);
        let p = NetParams::init(arch(), &mut rng);
        let y = p.forward(&Array::vector(vec![0.3, -1.0]), &[0.7]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        let p = NetParams::random(arch(), &mut RngState::new(4));
        let x = Array::vector(vec![0.1, 0.2]);
        assert_eq!(p.forward(&x, &[0.5]).unwrap(), p.forward(&x, &[0.5]).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = NetParams::zeros(arch());
        assert!(matches!(
            p.forward(&Array::vector(vec![1.0]), &[0.0]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            p.forward(&Array::vector(vec![1.0, 2.0]), &[0.0, 1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn batch_rows_match_single_evaluations() {
        let p = NetParams::random(arch(), &mut RngState::new(8));
        let x = [0.1, 0.2, -0.4, 0.9, 1.5, -2.0];
        let t = [0.1, 0.5, 0.9];
        let (batch, _) = p.forward_batch(&x, &t, 3).unwrap();
        for r in 0..3 {
            let single = p
                .forward(&Array::vector(x[2 * r..2 * r + 2].to_vec()), &t[r..r + 1])
                .unwrap();
            for k in 0..2 {
                assert!((single.data()[k] - batch[2 * r + k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_params() {
        let p = NetParams::random(arch(), &mut RngState::new(2));
        let (_, g) = grad_reverse(&p, |p, g| {
            g.copy_from_slice(&p.values);
            Ok(0.5 * p.values.iter().map(|v| v * v).sum::<f64>())
        })
        .unwrap();
        assert_eq!(g.data(), p.values.as_slice());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = NetParams::random(arch(), &mut RngState::new(2));
        let (v, g) = grad_reverse(&p, |_, _| Ok(3.0)).unwrap();
        assert_eq!(v, 3.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let p = NetParams::zeros(arch());
        let err = grad_reverse(&p, |_, g| {
            g[7] = f64::NAN;
            Ok(1.0)
        })
        .unwrap_err();
        assert_eq!(
            err,
            Error::Numeric {
                what: "gradient".into(),
                index: Some(7)
            }
        );
        assert!(grad_reverse(&p, |_, _| Ok(f64::INFINITY)).is_err());
    }

    #[test]
    fn zero_tangent_gives_zero_jvp() {
        let p = NetParams::random(arch(), &mut RngState::new(3));
        let (_, dy) = p.jvp_batch(&[0.5, 0.1], &[0.3], &[0.0, 0.0], &[0.0], 1).unwrap();
        assert_eq!(dy, vec![0.0, 0.0]);
    }

    #[test]
    fn jvp_shape_mismatch() {
        let p = NetParams::zeros(arch());
        assert!(p.jvp_batch(&[0.5, 0.1], &[0.3], &[0.0], &[0.0], 1).is_err());
    }
}
