//! Wall-time comparison of the four ways to run an S4D layer.

use std::fmt;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{max_relative_error, ConvPath, ScanMode, TimeSeries};
use crate::s4d::{s4d_forward, s4d_step, ForwardMode, S4DParams, S4DState};

pub const BENCH_LENGTHS: [usize; 3] = [256, 1024, 4096];
pub const MIN_REPS: usize = 5;
/// All modes must agree with the step-by-step recurrence this closely
/// before anything is timed.
pub const GATE_TOL: f64 = 1e-8;
pub const CSV_HEADER: &str = "mode,T,median_ns,reps";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    SequentialStep,
    ParallelScan,
    DirectConv,
    FftConv,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [
        BenchMode::SequentialStep,
        BenchMode::ParallelScan,
        BenchMode::DirectConv,
        BenchMode::FftConv,
    ];

    fn run(self, params: &S4DParams, u: &TimeSeries) -> Result<Vec<f64>> {
        let mode = match self {
            BenchMode::SequentialStep => return stepwise(params, u),
            BenchMode::ParallelScan => ForwardMode::Scan(ScanMode::Parallel),
            BenchMode::DirectConv => ForwardMode::Conv(ConvPath::Direct),
            BenchMode::FftConv => ForwardMode::Conv(ConvPath::Fft),
        };
        Ok(s4d_forward(params, u, mode)?.into_tensor().into_data())
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::SequentialStep => "sequential_step",
            BenchMode::ParallelScan => "parallel_scan",
            BenchMode::DirectConv => "direct_conv",
            BenchMode::FftConv => "fft_conv",
        })
    }
}

fn stepwise(params: &S4DParams, u: &TimeSeries) -> Result<Vec<f64>> {
    let disc = params.discretize()?;
    let mut state = S4DState::zeros(params.n_channels, params.n_state);
    let mut out = Vec::with_capacity(u.data().len());
    for t in 0..u.steps() {
        out.extend(s4d_step(params, &disc, &mut state, u.frame(t))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub t: usize,
    pub median_ns: u128,
    pub reps: usize,
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2
    } else {
        v[m]
    }
}

/// Largest disagreement of any mode with the sequential recurrence, per
/// length. Errors if one exceeds [`GATE_TOL`].
pub fn correctness_gate(params: &S4DParams, lengths: &[usize], seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, &t) in lengths.iter().enumerate() {
        let u = input(params, t, seed.wrapping_add(i as u64));
        let reference = stepwise(params, &u)?;
        for mode in &BenchMode::ALL[1..] {
            let err = max_relative_error(&reference, &mode.run(params, &u)?);
            if !(err < GATE_TOL) {
                return Err(Error::invalid(format!(
                    "correctness gate: {mode} differs from sequential_step by {err:.3e} at T={t}"
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn input(params: &S4DParams, t: usize, seed: u64) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = params.n_channels;
    TimeSeries::new(
        t,
        h,
        (0..t * h).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("bench input")
}

/// Passes the correctness gate, then times every mode at every length.
pub fn bench(
    params: &S4DParams,
    lengths: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if reps < MIN_REPS {
        return Err(Error::invalid(format!(
            "need at least {MIN_REPS} repetitions, got {reps}"
        )));
    }
    correctness_gate(params, lengths, seed)?;
    let mut rows = Vec::new();
    for (i, &t) in lengths.iter().enumerate() {
        let u = input(params, t, seed.wrapping_add(i as u64));
        for mode in BenchMode::ALL {
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                std::hint::black_box(mode.run(params, &u)?);
                times.push(start.elapsed().as_nanos());
            }
            rows.push(BenchRow {
                mode,
                t,
                median_ns: median(times),
                reps,
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.mode, r.t, r.median_ns, r.reps));
    }
    s
}
