//! Invariant suites run against a stored model by `s4former check`.

use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv_module::{Model, S4Eval};
use crate::error::{Error, Result};
use crate::numerics::{max_relative_error, ConvPath, ScanMode, TimeSeries};
use crate::s4d::{param_count, s4d_forward, ForwardMode, S4DParams};
use crate::streaming::{open_stream, process_chunk};
use crate::training::{grad_check, random_projection_loss, GradCheckOptions};

pub const DUALITY_TOL: f64 = 1e-8;
pub const STREAMING_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;
/// Core parameter window for a layer with `H = 512`, `N = 4`.
pub const PARAM_WINDOW: (usize, usize) = (3500, 4600);

const PROBE_LEN: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Duality,
    Causality,
    Streaming,
    Grads,
    Params,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Duality,
        Suite::Causality,
        Suite::Streaming,
        Suite::Grads,
        Suite::Params,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Duality => "duality",
            Suite::Causality => "causality",
            Suite::Streaming => "streaming",
            Suite::Grads => "grads",
            Suite::Params => "params",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown suite {s:?}; expected one of duality, causality, streaming, grads, params")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn bound(name: impl Into<String>, measured: f64, tol: f64) -> Self {
        Self::new(
            name,
            measured < tol,
            format!("max relative error {measured:.3e} (limit {tol:.0e})"),
        )
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn random_series(t: usize, h: usize, rng: &mut ChaCha8Rng) -> TimeSeries {
    TimeSeries::new(
        t,
        h,
        (0..t * h).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("series")
}

fn s4_layers<M: Model + ?Sized>(model: &M) -> Vec<(String, S4DParams)> {
    model
        .layout()
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            b.conv
                .s4
                .as_ref()
                .map(|ids| (format!("blocks.{i}.conv.s4"), ids.params(model.store())))
        })
        .collect()
}

pub fn run_suite<M: Model + ?Sized>(model: &mut M, suite: Suite, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = match suite {
        Suite::Duality => duality(model, &mut rng)?,
        Suite::Causality => causality(model, &mut rng)?,
        Suite::Streaming => streaming(model, &mut rng)?,
        Suite::Grads => grads(model, seed)?,
        Suite::Params => params(model),
    };
    Ok(SuiteReport { suite, checks })
}

fn duality<M: Model + ?Sized>(model: &M, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, p) in s4_layers(model) {
        let u = random_series(PROBE_LEN, p.n_channels, rng);
        let scan = s4d_forward(&p, &u, ForwardMode::Scan(ScanMode::Sequential))?;
        for (label, mode) in [
            ("parallel scan", ForwardMode::Scan(ScanMode::Parallel)),
            ("direct conv", ForwardMode::Conv(ConvPath::Direct)),
            ("fft conv", ForwardMode::Conv(ConvPath::Fft)),
        ] {
            let y = s4d_forward(&p, &u, mode)?;
            out.push(CheckResult::bound(
                format!("{name} sequential scan vs {label}"),
                max_relative_error(scan.data(), y.data()),
                DUALITY_TOL,
            ));
        }
    }
    let x = random_series(PROBE_LEN, model.input_width(), rng);
    let a = model.eval_with(&x, S4Eval::Scan)?;
    let b = model.eval_with(&x, S4Eval::Conv)?;
    out.push(CheckResult::bound(
        "model scan vs convolution evaluation",
        max_relative_error(a.data(), b.data()),
        DUALITY_TOL,
    ));
    Ok(out)
}

/// Earliest output frame that changes when frame `t0` of the input does.
fn first_divergence<M: Model + ?Sized>(
    model: &M,
    x: &TimeSeries,
    t0: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<usize>> {
    let base = model.eval(x)?;
    let w = x.channels();
    let mut data = x.data().to_vec();
    for v in &mut data[t0 * w..(t0 + 1) * w] {
        *v += rng.random_range(0.5..1.5);
    }
    let moved = model.eval(&TimeSeries::new(x.steps(), w, data)?)?;
    Ok((0..x.steps()).find(|&t| base.frame(t) != moved.frame(t)))
}

fn causality<M: Model + ?Sized>(model: &M, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let x = random_series(PROBE_LEN, model.input_width(), rng);
    let mut out = Vec::new();
    for t0 in [0, 1, PROBE_LEN / 4, PROBE_LEN / 2, PROBE_LEN - 1] {
        let name = format!("perturb input at t={t0}");
        out.push(match first_divergence(model, &x, t0, rng)? {
            Some(t) if t < t0 => CheckResult::new(
                name,
                false,
                format!("output first diverges at t={t}, before the perturbation"),
            ),
            Some(t) => CheckResult::new(
                name,
                true,
                format!("outputs before t={t0} unchanged (first change at t={t})"),
            ),
            None => CheckResult::new(name, true, "no output changed"),
        });
    }
    Ok(out)
}

fn streaming<M: Model + ?Sized>(model: &M, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    if !model.layout().spec.is_online() {
        return Ok(vec![CheckResult::new(
            "open stream",
            false,
            "model has offline (centred) convolutions and cannot stream",
        )]);
    }
    let x = random_series(PROBE_LEN, model.input_width(), rng);
    let full = model.eval(&x)?;
    let mut partitions: Vec<(String, Vec<usize>)> = [1, 5, 16]
        .into_iter()
        .map(|c| (format!("chunk size {c}"), vec![c; PROBE_LEN.div_ceil(c)]))
        .collect();
    partitions.push((
        "random partition".into(),
        (0..PROBE_LEN).map(|_| rng.random_range(1..=12)).collect(),
    ));
    let mut out = Vec::new();
    for (name, sizes) in partitions {
        let mut state = open_stream(model)?;
        let mut rows = Vec::with_capacity(full.data().len());
        let mut t = 0;
        for size in sizes {
            let end = (t + size).min(PROBE_LEN);
            if t == end {
                break;
            }
            let w = x.channels();
            let chunk = TimeSeries::new(end - t, w, x.data()[t * w..end * w].to_vec())?;
            rows.extend_from_slice(process_chunk(model, &mut state, &chunk)?.data());
            t = end;
        }
        out.push(CheckResult::bound(
            name,
            max_relative_error(full.data(), &rows),
            STREAMING_TOL,
        ));
    }
    Ok(out)
}

fn grads<M: Model + ?Sized>(model: &mut M, seed: u64) -> Result<Vec<CheckResult>> {
    let (t, batch) = (12, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_series(t * batch, model.input_width(), &mut rng).into_tensor();
    let opts = GradCheckOptions {
        max_per_param: Some(3),
        seed,
        ..GradCheckOptions::default()
    };
    let r = grad_check(model, &x, t, random_projection_loss(seed), &opts)?;
    Ok(vec![CheckResult::new(
        "finite differences vs tape gradients",
        r.max_rel_error < GRAD_TOL,
        format!(
            "max relative error {:.3e} at {} over {} coordinates (limit {GRAD_TOL:.0e})",
            r.max_rel_error, r.worst, r.coordinates
        ),
    )])
}

fn params<M: Model + ?Sized>(model: &M) -> Vec<CheckResult> {
    let layers = s4_layers(model);
    if layers.is_empty() {
        return vec![CheckResult::new(
            "trainable parameters",
            true,
            format!("{} (no S4D layers)", model.store().trainable_scalars()),
        )];
    }
    let mut out = Vec::new();
    for (name, p) in layers {
        let count = param_count(&p);
        let (h, n) = (p.n_channels, p.n_state);
        let a_expected = match p.scheme {
            crate::s4d::S4DScheme::Lin => 2 * n,
            crate::s4d::S4DScheme::Real => n,
        };
        let expected = a_expected + 2 * h * n;
        let mut detail = format!(
            "core count {} (A {} + C {}), expected {expected}",
            count.core(),
            count.a,
            count.c
        );
        let mut passed = count.core() == expected;
        if (h, n) == (512, 4) {
            let (lo, hi) = PARAM_WINDOW;
            let inside = (lo..=hi).contains(&count.core());
            detail.push_str(&format!(
                ", window {lo}–{hi} {}",
                if inside { "met" } else { "missed" }
            ));
            passed &= inside;
        }
        out.push(CheckResult::new(
            format!("{name} parameters"),
            passed,
            detail,
        ));
    }
    out
}
