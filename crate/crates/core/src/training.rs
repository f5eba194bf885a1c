//! Synthetic tasks, Adam, the training loop and a finite-difference
//! gradient checker.

use std::io::Write;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv_module::{apply_bn_updates, Forward, Model, Network, SequenceModel};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, TimeSeries, Var};
use crate::params::{ParamId, ParamStore};
use crate::s4d::constrain_a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `target[t] = input[t − delay]`, ignored for `t < delay`.
    DelayedEcho,
    /// `target[t] = max(input[t−2], input[t−1], input[t])`, ignored for `t < 2`.
    LocalPattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    #[serde(default)]
    pub delay: usize,
    pub vocab: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be at least 1"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab", "needs at least 2 symbols"));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::config(
                "train_size",
                "train and eval sets must be non-empty",
            ));
        }
        if self.kind == TaskKind::DelayedEcho && self.delay >= self.seq_len {
            return Err(Error::config(
                "delay",
                format!(
                    "delay {} must be smaller than seq_len {}",
                    self.delay, self.seq_len
                ),
            ));
        }
        Ok(())
    }
}

/// One labelled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<Option<usize>>,
}

impl Example {
    /// The input as a one-hot `[T × V]` series.
    pub fn one_hot(&self, vocab: usize) -> TimeSeries {
        let t = self.input.len();
        let mut data = vec![0.0; t * vocab];
        for (i, &u) in self.input.iter().enumerate() {
            data[i * vocab + u] = 1.0;
        }
        TimeSeries::new(t, vocab, data).expect("one-hot")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: usize,
    pub seq_len: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

fn label(kind: TaskKind, delay: usize, input: &[usize]) -> Vec<Option<usize>> {
    (0..input.len())
        .map(|t| match kind {
            TaskKind::DelayedEcho => (t >= delay).then(|| input[t - delay]),
            TaskKind::LocalPattern => {
                (t >= 2).then(|| input[t - 2].max(input[t - 1]).max(input[t]))
            }
        })
        .collect()
}

fn examples(spec: &TaskSpec, rng: &mut ChaCha8Rng, count: usize) -> Vec<Example> {
    (0..count)
        .map(|_| {
            let input: Vec<usize> = (0..spec.seq_len)
                .map(|_| rng.random_range(0..spec.vocab))
                .collect();
            let target = label(spec.kind, spec.delay, &input);
            Example { input, target }
        })
        .collect()
}

/// Draws the train and eval splits from two separate ChaCha streams of the
/// same seed.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate().map_err(|e| match e {
        Error::Config { field, message } if field == "delay" => {
            Error::invalid(format!("{field}: {message}"))
        }
        other => other,
    })?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(0);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    eval_rng.set_stream(1);
    Ok(Dataset {
        vocab: spec.vocab,
        seq_len: spec.seq_len,
        train: examples(spec, &mut train_rng, spec.train_size),
        eval: examples(spec, &mut eval_rng, spec.eval_size),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// `lr · (1 + cos(π · step / steps)) / 2`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    pub schedule: Schedule,
    pub eval_interval: usize,
    /// Stop after an evaluation reaching this accuracy.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 1000,
            batch: 8,
            seed: 0,
            clip: 1.0,
            schedule: Schedule::Constant,
            eval_interval: 250,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::config("clip", "must be non-negative"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be at least 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine if self.steps == 0 => self.lr,
            Schedule::Cosine => {
                let frac = step.min(self.steps) as f64 / self.steps as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).len()])
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= update;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g)
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grads
            .iter_mut()
            .flat_map(|(_, g)| g.iter_mut())
            .for_each(|v| *v *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl std::fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} split={} loss={:.6} accuracy={:.4}",
            self.step, self.split, self.loss, self.accuracy
        )
    }
}

fn batch_tensor(examples: &[&Example], vocab: usize) -> (Tensor, Vec<Option<usize>>) {
    let t = examples[0].input.len();
    let mut data = vec![0.0; examples.len() * t * vocab];
    let mut targets = Vec::with_capacity(examples.len() * t);
    for (b, ex) in examples.iter().enumerate() {
        for (i, &u) in ex.input.iter().enumerate() {
            data[(b * t + i) * vocab + u] = 1.0;
        }
        targets.extend_from_slice(&ex.target);
    }
    (
        Tensor::matrix(examples.len() * t, vocab, data).expect("batch"),
        targets,
    )
}

fn accuracy(logits: &Tensor, targets: &[Option<usize>]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (r, target) in targets.iter().enumerate() {
        if let Some(t) = target {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            correct += usize::from(best == *t);
            total += 1;
        }
    }
    (correct, total)
}

/// Mean cross-entropy and accuracy of an eval-mode forward over `examples`.
pub fn evaluate(model: &SequenceModel, examples: &[Example], vocab: usize) -> Result<(f64, f64)> {
    const CHUNK: usize = 8;
    let (mut loss_sum, mut correct, mut total) = (0.0, 0, 0);
    for group in examples.chunks(CHUNK) {
        let refs: Vec<&Example> = group.iter().collect();
        let (x, targets) = batch_tensor(&refs, vocab);
        let mut f = Forward::eval(model.store(), group[0].input.len());
        let xv = f.input(x);
        let logits = model.forward(&mut f, xv, None)?;
        let loss = f.tape.softmax_cross_entropy(logits, &targets)?;
        let (c, n) = accuracy(f.tape.value(logits), &targets);
        loss_sum += f.tape.value(loss).data()[0] * n as f64;
        correct += c;
        total += n;
    }
    let total = total.max(1) as f64;
    Ok((loss_sum / total, correct as f64 / total))
}

/// Where metric lines go besides the returned history.
pub trait MetricSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()>;
}

/// Discards records.
pub struct NoSink;

impl MetricSink for NoSink {
    fn record(&mut self, _: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes each record as one line to every writer.
pub struct LineSink<W: Write>(pub Vec<W>);

impl<W: Write> MetricSink for LineSink<W> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        for w in &mut self.0 {
            writeln!(w, "{rec}")?;
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<MetricRecord>,
    /// Optimizer steps actually taken.
    pub steps_taken: usize,
}

impl History {
    pub fn last_eval(&self) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.split == Split::Eval)
    }

    pub fn best_eval_accuracy(&self) -> f64 {
        self.records
            .iter()
            .filter(|r| r.split == Split::Eval)
            .map(|r| r.accuracy)
            .fold(0.0, f64::max)
    }
}

/// Trains `model` on the dataset. Evaluates at step 0, every
/// `eval_interval` steps and after the last step.
pub fn train(
    model: &mut SequenceModel,
    data: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn MetricSink,
) -> Result<History> {
    cfg.validate()?;
    if model.vocab() != data.vocab {
        return Err(Error::invalid(format!(
            "model vocabulary {} does not match task vocabulary {}",
            model.vocab(),
            data.vocab
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.store(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut history = History::default();
    let mut last_finite: Option<(usize, f64)> = None;
    // loss sum, batches, correct, counted targets since the last report
    let mut train_loss = (0.0, 0usize, 0usize, 0usize);
    let mut step = 0;
    loop {
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            if train_loss.1 > 0 {
                let rec = MetricRecord {
                    step,
                    split: Split::Train,
                    loss: train_loss.0 / train_loss.1 as f64,
                    accuracy: train_loss.2 as f64 / train_loss.3.max(1) as f64,
                };
                sink.record(&rec)?;
                history.records.push(rec);
                train_loss = (0.0, 0, 0, 0);
            }
            let (loss, acc) = evaluate(model, &data.eval, data.vocab)?;
            let rec = MetricRecord {
                step,
                split: Split::Eval,
                loss,
                accuracy: acc,
            };
            sink.record(&rec)?;
            history.records.push(rec);
            if cfg.stop_at_accuracy.is_some_and(|target| acc >= target) {
                break;
            }
        }
        if step == cfg.steps {
            break;
        }
        let picks: Vec<&Example> = (0..cfg.batch)
            .map(|_| &data.train[rng.random_range(0..data.train.len())])
            .collect();
        let (x, targets) = batch_tensor(&picks, data.vocab);
        let (loss, mut grads, updates, (correct, total)) = {
            let mut f = Forward::train(model.store(), data.seq_len);
            let xv = f.input(x);
            let logits = model.forward(&mut f, xv, None)?;
            let loss = f.tape.softmax_cross_entropy(logits, &targets)?;
            let acc = accuracy(f.tape.value(logits), &targets);
            let value = f.tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_finite_step: last_finite.map(|p| p.0),
                    last_finite_loss: last_finite.map(|p| p.1),
                });
            }
            let g = f.tape.backward(loss)?;
            (
                value,
                f.param_grads(&g),
                std::mem::take(&mut f.bn_updates),
                acc,
            )
        };
        last_finite = Some((step, loss));
        train_loss.0 += loss;
        train_loss.1 += 1;
        train_loss.2 += correct;
        train_loss.3 += total;
        clip_global_norm(&mut grads, cfg.clip);
        adam.step(model.store_mut(), &grads, cfg.lr_at(step));
        apply_bn_updates(model.store_mut(), &updates);
        step += 1;
        history.steps_taken = step;
    }
    Ok(history)
}

/// Largest `|ā|` and largest `Re(A_n)` over every S4 layer of the model.
pub fn stability_report<M: Model + ?Sized>(model: &M) -> Result<Option<(f64, f64)>> {
    let mut worst: Option<(f64, f64)> = None;
    for block in &model.layout().blocks {
        if let Some(ids) = &block.conv.s4 {
            let p = ids.params(model.store());
            let max_re = constrain_a(&p)
                .iter()
                .map(|z| z.re)
                .fold(f64::NEG_INFINITY, f64::max);
            let max_abar = p
                .discretize()?
                .a_bar
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            let (a, r) = worst.unwrap_or((0.0, f64::NEG_INFINITY));
            worst = Some((a.max(max_abar), r.max(max_re)));
        }
    }
    Ok(worst)
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and coordinate of the worst disagreement, e.g.
    /// `blocks.0.conv.s4.c[3]`.
    pub worst: String,
    pub coordinates: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many random coordinates per parameter tensor.
    pub max_per_param: Option<usize>,
    /// Use batch statistics in batch norm.
    pub training: bool,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_param: None,
            training: true,
            seed: 0,
            floor: 1e-5,
        }
    }
}

/// Compares tape gradients of `loss(model(input))` against central finite
/// differences for every trainable parameter coordinate.
pub fn grad_check<M, L>(
    model: &mut M,
    input: &Tensor,
    seq_len: usize,
    loss: L,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Network + ?Sized,
    L: Fn(&mut Tape, Var) -> Result<Var>,
{
    let run = |model: &M, grads: bool| -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
        let mut f = Forward::eval(model.store(), seq_len);
        f.training = opts.training;
        f.grads = grads;
        let x = f.input(input.clone());
        let y = model.forward(&mut f, x, None)?;
        let l = loss(&mut f.tape, y)?;
        let value = f.tape.value(l).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = f.tape.backward(l)?;
        Ok((value, f.param_grads(&g)))
    };
    let (_, analytic) = run(model, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coordinates: 0,
    };
    for (id, grad) in analytic {
        let mut coords: Vec<usize> = (0..grad.len()).collect();
        if let Some(k) = opts.max_per_param {
            // partial Fisher-Yates
            for i in 0..k.min(coords.len()) {
                let j = rng.random_range(i..coords.len());
                coords.swap(i, j);
            }
            coords.truncate(k);
        }
        for i in coords {
            let orig = model.store().get(id).data()[i];
            model.store_mut().get_mut(id).data_mut()[i] = orig + opts.step;
            let up = run(model, false)?.0;
            model.store_mut().get_mut(id).data_mut()[i] = orig - opts.step;
            let down = run(model, false)?.0;
            model.store_mut().get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * opts.step);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(opts.floor);
            report.coordinates += 1;
            if report.worst.is_empty() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{}[{i}]", model.store().name(id));
            }
        }
    }
    Ok(report)
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, a generic probe loss for
/// gradient checks on encoders.
pub fn random_projection_loss(seed: u64) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |tape: &mut Tape, y: Var| {
        let shape = tape.value(y).shape().to_vec();
        let n = tape.value(y).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }
}
