//! Causal 1-D convolution, by direct summation or through the FFT.

use rustfft::FftPlanner;

use super::complex::Complex;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPath {
    Direct,
    Fft,
}

/// `output[t] = sum_{j=0..min(t, L-1)} kernel[j] * input[t-j]`.
///
/// Kernel tap 0 multiplies the current step; the input is implicitly
/// left-padded with `L - 1` zeros, so the output has the input's length.
pub fn causal_conv1d(input: &[f64], kernel: &[f64], path: ConvPath) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Err(Error::invalid("causal_conv1d: empty input"));
    }
    if kernel.is_empty() {
        return Err(Error::invalid("causal_conv1d: empty kernel"));
    }
    Ok(match path {
        ConvPath::Direct => direct(input, kernel),
        ConvPath::Fft => FftConvolver::new(input.len(), kernel.len()).convolve(input, kernel),
    })
}

fn direct(input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for (t, o) in out.iter_mut().enumerate() {
        let taps = kernel.len().min(t + 1);
        let mut acc = 0.0;
        for j in 0..taps {
            acc += kernel[j] * input[t - j];
        }
        *o = acc;
    }
    out
}

/// Reusable FFT plan for many causal convolutions of one `(T, L)` size.
///
/// The transform length is the next power of two at or above `T + L - 1`,
/// which makes the circular convolution equal to the linear one on `[0, T)`.
pub struct FftConvolver {
    len: usize,
    n_fft: usize,
    forward: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inverse: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl FftConvolver {
    pub fn new(input_len: usize, kernel_len: usize) -> Self {
        let n_fft = (input_len + kernel_len - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            len: input_len,
            n_fft,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn fft_len(&self) -> usize {
        self.n_fft
    }

    pub fn convolve(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.len);
        let mut a = self.padded(input);
        let mut b = self.padded(kernel);
        self.forward.process(&mut a);
        self.forward.process(&mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x *= *y;
        }
        self.inverse.process(&mut a);
        let scale = 1.0 / self.n_fft as f64;
        a[..self.len].iter().map(|z| z.re * scale).collect()
    }

    fn padded(&self, src: &[f64]) -> Vec<Complex> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for (dst, &v) in buf.iter_mut().zip(src.iter().take(self.n_fft)) {
            dst.re = v;
        }
        buf
    }
}
