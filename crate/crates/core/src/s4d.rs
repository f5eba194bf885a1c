//! Diagonal structured state-space (S4D) layer.
//!
//! Each of the `H` input channels runs its own single-input single-output
//! state-space model of size `N`:
//!
//! ```text
//! x_k = Ā x_{k-1} + B̄ u_k        y_k = Re(C x_k) + D u_k
//! Ā = exp(A Δ)                    B̄ = (Ā − I) A⁻¹ B
//! ```
//!
//! `A` is diagonal and shared (tied) by all channels, `B` is the constant
//! all-ones vector, while `C`, `D` and the timestep `Δ` are per channel.
//! The real parts of `A` are kept negative by construction:
//! `Re(A_n) = −exp(a_raw_n)`.
//!
//! The layer can be evaluated as a recurrence (scan) or, equivalently, as a
//! causal convolution with the materialised kernel
//! `K = [C B̄, C Ā B̄, …, C Ā^{L−1} B̄]`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::complex::{exprel, Complex};
use crate::numerics::{
    causal_conv1d, linear_scan, ConvOptions, ConvPath, FftConvolver, ScanMode, ScanOptions, Tape,
    Tensor, TimeSeries, Var,
};

/// Initialisation and parameterisation of the diagonal `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum S4DScheme {
    /// Complex `A_n = −1/2 + iπn`; real and imaginary parts both trainable.
    Lin,
    /// Real `A_n = −(n + 1)`.
    Real,
}

impl std::fmt::Display for S4DScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            S4DScheme::Lin => "lin",
            S4DScheme::Real => "real",
        })
    }
}

/// Layer hyperparameters that are independent of the channel count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct S4DConfig {
    pub scheme: S4DScheme,
    pub n_state: usize,
    /// Range of the log-uniform timestep initialisation.
    pub dt_min: f64,
    pub dt_max: f64,
}

impl S4DConfig {
    pub const DEFAULT_DT_MIN: f64 = 1e-3;
    pub const DEFAULT_DT_MAX: f64 = 1e-1;

    pub fn new(scheme: S4DScheme, n_state: usize) -> Self {
        Self {
            scheme,
            n_state,
            dt_min: Self::DEFAULT_DT_MIN,
            dt_max: Self::DEFAULT_DT_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_state == 0 {
            return Err(Error::config("n_state", "must be at least 1"));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max && self.dt_max.is_finite()) {
            return Err(Error::config(
                "dt_min",
                format!(
                    "timestep range must satisfy 0 < dt_min ≤ dt_max, got [{}, {}]",
                    self.dt_min, self.dt_max
                ),
            ));
        }
        Ok(())
    }
}

/// Trainable parameters of one S4D layer over `H` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct S4DParams {
    pub scheme: S4DScheme,
    pub n_state: usize,
    pub n_channels: usize,
    /// Unconstrained parameters of `Re(A)`, shared across channels, `[N]`.
    pub a_raw: Vec<f64>,
    /// `Im(A)` for the `Lin` scheme, `[N]`; `None` for `Real`.
    pub a_imag: Option<Vec<f64>>,
    /// Readout `C`, row-major `[H × N]`.
    pub c: Vec<Complex>,
    /// Residual `D`, one scalar per channel.
    pub d: Vec<f64>,
    /// `log Δ` per channel.
    pub log_dt: Vec<f64>,
}

/// Zero-order-hold discretisation, row-major `[H × N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteS4D {
    pub n_state: usize,
    pub a_bar: Vec<Complex>,
    pub b_bar: Vec<Complex>,
}

/// Hidden state of every channel, `[H × N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct S4DState {
    pub x: Vec<Complex>,
}

impl S4DState {
    pub fn zeros(n_channels: usize, n_state: usize) -> Self {
        Self {
            x: vec![Complex::new(0.0, 0.0); n_channels * n_state],
        }
    }

    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
    }
}

/// How [`s4d_forward`] evaluates the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Run the recurrence from a zero state.
    Scan(ScanMode),
    /// Convolve with the length-`T` kernel and add the residual.
    Conv(ConvPath),
}

impl ForwardMode {
    pub const SCAN: ForwardMode = ForwardMode::Scan(ScanMode::Sequential);
    pub const CONV: ForwardMode = ForwardMode::Conv(ConvPath::Fft);
}

/// Trainable-scalar counts of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Tied recurrent parameters: `N` (Real) or `2N` (Lin).
    pub a: usize,
    /// Readout: two reals per complex entry, `2HN`.
    pub c: usize,
    pub d: usize,
    pub log_dt: usize,
}

impl ParamCount {
    /// Recurrent plus readout parameters.
    pub fn core(&self) -> usize {
        self.a + self.c
    }

    pub fn total(&self) -> usize {
        self.core() + self.d + self.log_dt
    }
}

/// The `a_raw` value whose image under `−exp` lands closest to `−target`.
fn log_for_exp(target: f64) -> f64 {
    let mut best = target.ln();
    let mut best_err = (best.exp() - target).abs();
    for step in [f64::next_up, f64::next_down] {
        let mut y = best;
        for _ in 0..4 {
            y = step(y);
            let err = (y.exp() - target).abs();
            if err < best_err {
                best = y;
                best_err = err;
            }
        }
    }
    best
}

/// Initialises a layer with the default timestep range.
pub fn init_s4d(
    scheme: S4DScheme,
    n_state: usize,
    n_channels: usize,
    seed: u64,
) -> Result<S4DParams> {
    S4DParams::init(&S4DConfig::new(scheme, n_state), n_channels, seed)
}

impl S4DParams {
    /// `A` starts at `−1/2 + iπn` (Lin) or `−(n+1)` (Real); `C` is standard
    /// normal per component; `D = 1`; `log Δ` is uniform on
    /// `[ln dt_min, ln dt_max]`.
    pub fn init(cfg: &S4DConfig, n_channels: usize, seed: u64) -> Result<Self> {
        if cfg.n_state == 0 || n_channels == 0 {
            return Err(Error::invalid(format!(
                "S4D layer needs N ≥ 1 and H ≥ 1, got N = {}, H = {n_channels}",
                cfg.n_state
            )));
        }
        cfg.validate()
            .map_err(|e| Error::invalid(format!("S4D config: {e}")))?;
        let n = cfg.n_state;
        let (a_raw, a_imag) = match cfg.scheme {
            S4DScheme::Lin => (
                vec![0.5_f64.ln(); n],
                Some((0..n).map(|k| std::f64::consts::PI * k as f64).collect()),
            ),
            S4DScheme::Real => ((0..n).map(|k| log_for_exp((k + 1) as f64)).collect(), None),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (0..n_channels * n)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex::new(re, im)
            })
            .collect();
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let log_dt = (0..n_channels)
            .map(|_| lo + rng.random::<f64>() * (hi - lo))
            .collect();
        Ok(Self {
            scheme: cfg.scheme,
            n_state: n,
            n_channels,
            a_raw,
            a_imag,
            c,
            d: vec![1.0; n_channels],
            log_dt,
        })
    }

    pub fn dt(&self) -> Vec<f64> {
        self.log_dt.iter().map(|v| v.exp()).collect()
    }

    pub fn discretize(&self) -> Result<DiscreteS4D> {
        discretize_zoh(&constrain_a(self), &self.dt())
    }

    fn check_shapes(&self) -> Result<()> {
        let (n, h) = (self.n_state, self.n_channels);
        let imag_ok = match (&self.a_imag, self.scheme) {
            (Some(v), S4DScheme::Lin) => v.len() == n,
            (None, S4DScheme::Real) => true,
            _ => false,
        };
        if self.a_raw.len() != n
            || !imag_ok
            || self.c.len() != h * n
            || self.d.len() != h
            || self.log_dt.len() != h
        {
            return Err(Error::invalid("S4D parameters have inconsistent shapes"));
        }
        Ok(())
    }

    /// Puts the parameters on a tape as leaves.
    pub fn bind(&self, tape: &mut Tape) -> S4dVars {
        let (h, n) = (self.n_channels, self.n_state);
        let c: Vec<f64> = self.c.iter().flat_map(|z| [z.re, z.im]).collect();
        S4dVars {
            a_raw: tape.leaf(Tensor::from_vec(self.a_raw.clone())),
            a_imag: self
                .a_imag
                .as_ref()
                .map(|v| tape.leaf(Tensor::from_vec(v.clone()))),
            c: tape.leaf(Tensor::new(vec![h, n, 2], c).expect("c shape")),
            d: tape.leaf(Tensor::from_vec(self.d.clone())),
            log_dt: tape.leaf(Tensor::from_vec(self.log_dt.clone())),
            n_state: n,
        }
    }
}

/// `A_n` with `Re(A_n) = −exp(a_raw_n)` and the imaginary part passed
/// through (Lin) or zero (Real).
pub fn constrain_a(params: &S4DParams) -> Vec<Complex> {
    params
        .a_raw
        .iter()
        .enumerate()
        .map(|(k, raw)| {
            let im = params.a_imag.as_ref().map_or(0.0, |v| v[k]);
            Complex::new(-raw.exp(), im)
        })
        .collect()
}

/// `Ā = exp(A Δ_h)`, `B̄ = (exp(A Δ_h) − 1)/A` for every channel `h`.
pub fn discretize_zoh(a: &[Complex], dt: &[f64]) -> Result<DiscreteS4D> {
    if a.is_empty() || dt.is_empty() {
        return Err(Error::invalid("discretize_zoh: empty A or Δ"));
    }
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) || dt.iter().any(|v| !v.is_finite())
    {
        return Err(Error::invalid("discretize_zoh: non-finite input"));
    }
    if let Some(bad) = a.iter().find(|z| z.re >= 0.0) {
        return Err(Error::invalid(format!(
            "discretize_zoh: Re(A) must be negative, got {bad}"
        )));
    }
    if let Some(bad) = dt.iter().find(|&&v| v <= 0.0) {
        return Err(Error::invalid(format!(
            "discretize_zoh: Δ must be positive, got {bad}"
        )));
    }
    let mut a_bar = Vec::with_capacity(a.len() * dt.len());
    let mut b_bar = Vec::with_capacity(a.len() * dt.len());
    for &step in dt {
        for &an in a {
            let z = an * step;
            a_bar.push(z.exp());
            // (e^z − 1)/A = Δ · (e^z − 1)/z
            b_bar.push(exprel(z) * step);
        }
    }
    Ok(DiscreteS4D {
        n_state: a.len(),
        a_bar,
        b_bar,
    })
}

/// `K[h, k] = Re Σ_n C[h,n] Ā[h,n]^k B̄[h,n]` for `k < len`, laid out
/// `[H × len]`. Powers are accumulated one step at a time, so a shorter
/// kernel is always an exact prefix of a longer one.
pub fn materialize_kernel(params: &S4DParams, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::invalid(
            "materialize_kernel: length must be at least 1",
        ));
    }
    params.check_shapes()?;
    let disc = params.discretize()?;
    Ok(kernel_from_discrete(params, &disc, len))
}

fn kernel_from_discrete(params: &S4DParams, disc: &DiscreteS4D, len: usize) -> Tensor {
    let (h, n) = (params.n_channels, params.n_state);
    let mut out = vec![0.0; h * len];
    for hi in 0..h {
        let row = &mut out[hi * len..(hi + 1) * len];
        for ni in 0..n {
            let i = hi * n + ni;
            let mut p = params.c[i] * disc.b_bar[i];
            for slot in row.iter_mut() {
                *slot += p.re;
                p *= disc.a_bar[i];
            }
        }
    }
    Tensor::matrix(h, len, out).expect("kernel shape")
}

/// `Re Σ_n c_n x_n`, summed in index order.
#[inline]
fn readout(c: &[Complex], x: &[Complex]) -> f64 {
    let mut y = 0.0;
    for (ci, xi) in c.iter().zip(x) {
        y += ci.re * xi.re - ci.im * xi.im;
    }
    y
}

/// Evaluates the layer over a whole sequence from a zero state.
pub fn s4d_forward(
    params: &S4DParams,
    input: &TimeSeries,
    mode: ForwardMode,
) -> Result<TimeSeries> {
    params.check_shapes()?;
    let (h, n) = (params.n_channels, params.n_state);
    if input.channels() != h {
        return Err(Error::invalid(format!(
            "s4d_forward: input has {} channels, layer has {h}",
            input.channels()
        )));
    }
    let t_len = input.steps();
    let disc = params.discretize()?;
    let mut out = vec![0.0; t_len * h];
    match mode {
        ForwardMode::Scan(scan_mode) => {
            for hi in 0..h {
                let a = &disc.a_bar[hi * n..(hi + 1) * n];
                let b = &disc.b_bar[hi * n..(hi + 1) * n];
                let c = &params.c[hi * n..(hi + 1) * n];
                let mut drive = Vec::with_capacity(t_len * n);
                for t in 0..t_len {
                    let u = input.at(t, hi);
                    drive.extend(b.iter().map(|bi| *bi * u));
                }
                let states = linear_scan(a, &drive, scan_mode)?;
                for t in 0..t_len {
                    let u = input.at(t, hi);
                    out[t * h + hi] = readout(c, &states[t * n..(t + 1) * n]) + params.d[hi] * u;
                }
            }
        }
        ForwardMode::Conv(path) => {
            let kernel = kernel_from_discrete(params, &disc, t_len);
            let fft = matches!(path, ConvPath::Fft).then(|| FftConvolver::new(t_len, t_len));
            for hi in 0..h {
                let u = input.channel(hi);
                let k = kernel.row(hi);
                let y = match &fft {
                    Some(conv) => conv.convolve(&u, k),
                    None => causal_conv1d(&u, k, ConvPath::Direct)?,
                };
                for t in 0..t_len {
                    out[t * h + hi] = y[t] + params.d[hi] * u[t];
                }
            }
        }
    }
    TimeSeries::new(t_len, h, out)
}

/// Advances every channel by one frame and returns that frame's output.
pub fn s4d_step(
    params: &S4DParams,
    disc: &DiscreteS4D,
    state: &mut S4DState,
    u: &[f64],
) -> Result<Vec<f64>> {
    let (h, n) = (params.n_channels, params.n_state);
    if u.len() != h || state.x.len() != h * n || disc.a_bar.len() != h * n {
        return Err(Error::invalid(format!(
            "s4d_step: expected {h} inputs and a {h} × {n} state"
        )));
    }
    let mut y = vec![0.0; h];
    for hi in 0..h {
        let x = &mut state.x[hi * n..(hi + 1) * n];
        for ni in 0..n {
            let i = hi * n + ni;
            x[ni] = disc.a_bar[i] * x[ni] + disc.b_bar[i] * u[hi];
        }
        y[hi] = readout(&params.c[hi * n..(hi + 1) * n], x) + params.d[hi] * u[hi];
    }
    Ok(y)
}

pub fn param_count(params: &S4DParams) -> ParamCount {
    let a = params.a_raw.len() + params.a_imag.as_ref().map_or(0, Vec::len);
    ParamCount {
        a,
        c: 2 * params.c.len(),
        d: params.d.len(),
        log_dt: params.log_dt.len(),
    }
}

/// Tape handles for one S4D layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct S4dVars {
    pub a_raw: Var,
    pub a_imag: Option<Var>,
    /// `[H × N × 2]`
    pub c: Var,
    pub d: Var,
    pub log_dt: Var,
    pub n_state: usize,
}

/// Discretised weights on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DiscreteVars {
    pub a_bar: Var,
    pub b_bar: Var,
}

impl S4dVars {
    /// Builds `Ā` and `B̄` (each `[H × N × 2]`) from the raw parameters.
    pub fn discretize(&self, tape: &mut Tape) -> Result<DiscreteVars> {
        let e = tape.exp(self.a_raw)?;
        let a_re = tape.neg(e)?;
        let dt = tape.exp(self.log_dt)?;
        let z_re = tape.outer(dt, a_re)?;
        let z_im = match self.a_imag {
            Some(im) => tape.outer(dt, im)?,
            None => {
                let shape = tape.value(z_re).shape().to_vec();
                tape.constant(Tensor::zeros(shape))
            }
        };
        let z = tape.pack(z_re, z_im)?;
        let a_bar = tape.cexp(z)?;
        let rel = tape.cexprel(z)?;
        let b_bar = tape.cscale_rows(rel, dt)?;
        Ok(DiscreteVars { a_bar, b_bar })
    }

    /// Materialised kernel `[H × len]` (without the `D` residual).
    pub fn kernel(&self, tape: &mut Tape, disc: DiscreteVars, len: usize) -> Result<Var> {
        let w = tape.cmul(self.c, disc.b_bar)?;
        tape.ssm_kernel(w, disc.a_bar, len)
    }

    /// Kernel with the residual folded into tap 0: `K[h,0] += D[h]`.
    pub fn kernel_with_residual(&self, tape: &mut Tape, kernel: Var) -> Result<Var> {
        let len = tape.value(kernel).cols();
        let mut e0 = vec![0.0; len];
        e0[0] = 1.0;
        let e0 = tape.constant(Tensor::from_vec(e0));
        let dk = tape.outer(self.d, e0)?;
        tape.add(kernel, dk)
    }

    /// Recurrent evaluation over `[B·T × H]` input plus the `D` residual.
    pub fn forward_scan(
        &self,
        tape: &mut Tape,
        disc: DiscreteVars,
        u: Var,
        opts: ScanOptions,
    ) -> Result<Var> {
        let (y, _) = self.forward_scan_with_node(tape, disc, u, opts)?;
        Ok(y)
    }

    /// Like [`S4dVars::forward_scan`], also returning the scan node so the
    /// caller can read its final state.
    pub fn forward_scan_with_node(
        &self,
        tape: &mut Tape,
        disc: DiscreteVars,
        u: Var,
        opts: ScanOptions,
    ) -> Result<(Var, Var)> {
        let scan = tape.ssm_scan(disc.a_bar, disc.b_bar, self.c, u, opts)?;
        let res = tape.mul_row(u, self.d)?;
        Ok((tape.add(scan, res)?, scan))
    }

    /// Convolutional evaluation over `[B·T × H]` input plus the residual.
    pub fn forward_conv(
        &self,
        tape: &mut Tape,
        disc: DiscreteVars,
        u: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let k = self.kernel(tape, disc, seq_len)?;
        let conv = tape.depthwise_conv(
            u,
            k,
            ConvOptions {
                seq_len,
                right: 0,
                prefix: None,
            },
        )?;
        let res = tape.mul_row(u, self.d)?;
        tape.add(conv, res)
    }
}

#[cfg(test)]
#[path = "../tests/support/oracles.rs"]
mod oracles;
