//! Numerical substrate: complex helpers, causal convolution, linear-recurrence
//! scans and the reverse-mode tape.

pub mod complex;
pub mod conv;
pub mod scan;
pub mod tape;
pub mod tensor;

pub use complex::Complex;
pub use conv::{causal_conv1d, ConvPath, FftConvolver};
pub use scan::{linear_scan, ScanMode};
pub use tape::{AttentionPrefix, ConvOptions, Gradients, ScanOptions, Tape, Var};
pub use tensor::{max_abs_error, max_relative_error, Tensor};

use crate::error::{Error, Result};

/// A `[T × H]` real sequence: `T` time steps of `H` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries(Tensor);

impl TimeSeries {
    pub fn new(steps: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if steps == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "time series needs T ≥ 1 and H ≥ 1, got {steps} × {channels}"
            )));
        }
        let t = Tensor::matrix(steps, channels, data)?;
        if !t.all_finite() {
            return Err(Error::invalid("time series contains non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn zeros(steps: usize, channels: usize) -> Result<Self> {
        Self::new(steps, channels, vec![0.0; steps * channels])
    }

    pub fn steps(&self) -> usize {
        self.0.rows()
    }

    pub fn channels(&self) -> usize {
        self.0.cols()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn at(&self, t: usize, h: usize) -> f64 {
        self.0.at(t, h)
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    /// Samples of one channel over time.
    pub fn channel(&self, h: usize) -> Vec<f64> {
        (0..self.steps()).map(|t| self.at(t, h)).collect()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl TryFrom<Tensor> for TimeSeries {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        let (rows, cols) = (t.rows(), t.cols());
        Self::new(rows, cols, t.into_data())
    }
}
