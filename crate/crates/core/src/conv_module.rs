//! The gated convolution module, its four cores, and a small encoder.
//!
//! A module maps `x ↦ x + P(swish(BN(core(GLU(W·LN(x))))))` where the core
//! is one of
//!
//! - [`Approach::Baseline`]: depthwise convolution with `kernel_size` taps,
//! - [`Approach::Dir`]: an S4D layer,
//! - [`Approach::Com`]: a short depthwise convolution followed by an S4D layer,
//! - [`Approach::Rep`]: depthwise convolution whose kernel is the S4D kernel
//!   truncated to `rep_left_context` taps (with `D` folded into tap 0).
//!
//! Every parameter lives in a [`ParamStore`]; module structs only hold ids.
//! Forward passes are recorded on a [`Tape`] through a [`Forward`] context.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AttentionPrefix;
use crate::numerics::{ConvOptions, Gradients, ScanOptions, Tape, Tensor, TimeSeries, Var};
use crate::params::{ParamId, ParamStore};
use crate::s4d::{S4DConfig, S4DParams, S4DScheme, S4dVars};
use crate::streaming::{BlockCarry, ModuleCarry};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Fraction of the old running statistic kept per training step.
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    Baseline,
    Dir,
    Com,
    Rep,
}

impl Approach {
    pub const ALL: [Approach; 4] = [
        Approach::Baseline,
        Approach::Dir,
        Approach::Com,
        Approach::Rep,
    ];

    pub fn uses_s4(self) -> bool {
        self != Approach::Baseline
    }
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Approach::Baseline => "baseline",
            Approach::Dir => "dir",
            Approach::Com => "com",
            Approach::Rep => "rep",
        })
    }
}

/// Whether convolutions may look at future frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    /// Left context only.
    #[default]
    Online,
    /// Centred convolutions: `⌈(k−1)/2⌉` past and `⌊(k−1)/2⌋` future taps.
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvModuleSpec {
    pub approach: Approach,
    pub h: usize,
    /// Taps of the Baseline convolution or of COM's pre-S4 convolution.
    pub kernel_size: usize,
    /// Truncated kernel length for REP.
    pub rep_left_context: usize,
    pub s4d: Option<S4DConfig>,
    pub context: Context,
}

impl ConvModuleSpec {
    pub fn baseline(h: usize, kernel_size: usize, context: Context) -> Self {
        Self {
            approach: Approach::Baseline,
            h,
            kernel_size,
            rep_left_context: 0,
            s4d: None,
            context,
        }
    }

    pub fn dir(h: usize, s4d: S4DConfig, context: Context) -> Self {
        Self {
            approach: Approach::Dir,
            h,
            kernel_size: 0,
            rep_left_context: 0,
            s4d: Some(s4d),
            context,
        }
    }

    pub fn com(h: usize, kernel_size: usize, s4d: S4DConfig, context: Context) -> Self {
        Self {
            approach: Approach::Com,
            kernel_size,
            ..Self::dir(h, s4d, context)
        }
    }

    pub fn rep(h: usize, rep_left_context: usize, s4d: S4DConfig, context: Context) -> Self {
        Self {
            approach: Approach::Rep,
            rep_left_context,
            ..Self::dir(h, s4d, context)
        }
    }

    /// Checks the field combination. Errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::config("h", "channel width must be at least 1"));
        }
        match (self.approach, &self.s4d) {
            (Approach::Baseline, Some(_)) => {
                return Err(Error::config(
                    "s4d",
                    "the baseline module takes no S4D configuration",
                ))
            }
            (Approach::Baseline, None) => {}
            (approach, None) => {
                return Err(Error::config(
                    "s4d",
                    format!("approach {approach} needs an S4D configuration"),
                ))
            }
            (_, Some(cfg)) => cfg.validate()?,
        }
        match self.approach {
            Approach::Baseline | Approach::Com if self.kernel_size == 0 => Err(Error::config(
                "kernel_size",
                format!("approach {} needs kernel_size ≥ 1", self.approach),
            )),
            Approach::Rep if self.rep_left_context == 0 => Err(Error::config(
                "rep_left_context",
                "REP needs rep_left_context ≥ 1",
            )),
            _ => Ok(()),
        }
    }

    /// Taps of the module's depthwise convolution, if it has one.
    pub fn conv_taps(&self) -> Option<usize> {
        match self.approach {
            Approach::Baseline | Approach::Com => Some(self.kernel_size),
            Approach::Rep => Some(self.rep_left_context),
            Approach::Dir => None,
        }
    }

    fn right_pad(&self, taps: usize) -> usize {
        match self.context {
            Context::Online => 0,
            Context::Offline => (taps - 1) / 2,
        }
    }
}

/// How S4 cores are evaluated on the tape during a full-sequence pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum S4Eval {
    #[default]
    Scan,
    Conv,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Context for one forward pass: the tape, the parameters and the mode.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    /// Batch statistics in batch norm (and running-stat updates).
    pub training: bool,
    /// Bind trainable parameters as differentiable leaves.
    pub grads: bool,
    /// Rows per sequence; inputs are `[B·seq_len × C]`.
    pub seq_len: usize,
    pub s4_eval: S4Eval,
    bound: Vec<Option<Var>>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Forward<'a> {
    /// Evaluation mode without gradients.
    pub fn eval(store: &'a ParamStore, seq_len: usize) -> Self {
        Self {
            tape: Tape::new(),
            store,
            training: false,
            grads: false,
            seq_len,
            s4_eval: S4Eval::Scan,
            bound: vec![None; store.len()],
            bn_updates: Vec::new(),
        }
    }

    /// Training mode with gradients.
    pub fn train(store: &'a ParamStore, seq_len: usize) -> Self {
        Self {
            training: true,
            grads: true,
            ..Self::eval(store, seq_len)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable of a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.store.bind(&mut self.tape, id, self.grads);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.tape.constant(x)
    }

    /// Gradients of every parameter bound as a leaf.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .filter(|&(_, v)| self.tape.requires_grad(v))
            .map(|(i, v)| (ParamId::from_index(i), grads.wrt(v)))
            .collect()
    }
}

/// Applies running-statistic updates: `r ← m·r + (1−m)·batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    let m = BATCH_NORM_MOMENTUM;
    for u in updates {
        for (id, batch) in [
            (u.running_mean, &u.batch_mean),
            (u.running_var, &u.batch_var),
        ] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Dense projection `x W + b`, `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights and bias uniform on `±1/√fan_in`.
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, vec![fan_in, fan_out], bound),
            true,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform(rng, vec![fan_out], bound),
                true,
            )
        });
        Self { weight, bias }
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, h: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![h], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![h]), true),
        }
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = f.tape.layer_norm(x, LAYER_NORM_EPS)?;
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let y = f.tape.mul_row(y, g)?;
        f.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, name: &str, h: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![h], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![h]), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(vec![h]),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(vec![h], 1.0),
                false,
            ),
        }
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = if f.training {
            let (y, mean, var) = f.tape.batch_norm(x, BATCH_NORM_EPS)?;
            f.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch_mean: mean,
                batch_var: var,
            });
            y
        } else {
            let store = f.store();
            let shift: Vec<f64> = store
                .get(self.running_mean)
                .data()
                .iter()
                .map(|m| -m)
                .collect();
            let scale: Vec<f64> = store
                .get(self.running_var)
                .data()
                .iter()
                .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
                .collect();
            let shift = f.tape.constant(Tensor::from_vec(shift));
            let scale = f.tape.constant(Tensor::from_vec(scale));
            let y = f.tape.add_row(x, shift)?;
            f.tape.mul_row(y, scale)?
        };
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let y = f.tape.mul_row(y, g)?;
        f.tape.add_row(y, b)
    }
}

/// Store ids of one S4D layer's parameters.
#[derive(Clone, Debug)]
pub struct S4Ids {
    pub scheme: S4DScheme,
    pub n_state: usize,
    pub n_channels: usize,
    pub a_raw: ParamId,
    pub a_imag: Option<ParamId>,
    /// `[H × N × 2]`
    pub c: ParamId,
    pub d: ParamId,
    pub log_dt: ParamId,
}

impl S4Ids {
    pub fn register(store: &mut ParamStore, name: &str, p: &S4DParams) -> Self {
        let (h, n) = (p.n_channels, p.n_state);
        let c = p.c.iter().flat_map(|z| [z.re, z.im]).collect();
        Self {
            scheme: p.scheme,
            n_state: n,
            n_channels: h,
            a_raw: store.add(
                format!("{name}.a_raw"),
                Tensor::from_vec(p.a_raw.clone()),
                true,
            ),
            a_imag: p
                .a_imag
                .as_ref()
                .map(|v| store.add(format!("{name}.a_imag"), Tensor::from_vec(v.clone()), true)),
            c: store.add(
                format!("{name}.c"),
                Tensor::new(vec![h, n, 2], c).expect("c shape"),
                true,
            ),
            d: store.add(format!("{name}.d"), Tensor::from_vec(p.d.clone()), true),
            log_dt: store.add(
                format!("{name}.log_dt"),
                Tensor::from_vec(p.log_dt.clone()),
                true,
            ),
        }
    }

    /// Reads the layer's current parameters out of the store.
    pub fn params(&self, store: &ParamStore) -> S4DParams {
        let c = store.get(self.c).data();
        S4DParams {
            scheme: self.scheme,
            n_state: self.n_state,
            n_channels: self.n_channels,
            a_raw: store.get(self.a_raw).data().to_vec(),
            a_imag: self.a_imag.map(|id| store.get(id).data().to_vec()),
            c: c.chunks_exact(2)
                .map(|p| crate::numerics::Complex::new(p[0], p[1]))
                .collect(),
            d: store.get(self.d).data().to_vec(),
            log_dt: store.get(self.log_dt).data().to_vec(),
        }
    }

    /// Overwrites the stored parameters (shapes must match).
    pub fn write(&self, store: &mut ParamStore, p: &S4DParams) -> Result<()> {
        let (h, n) = (self.n_channels, self.n_state);
        store.set(self.a_raw, Tensor::from_vec(p.a_raw.clone()))?;
        if let (Some(id), Some(v)) = (self.a_imag, &p.a_imag) {
            store.set(id, Tensor::from_vec(v.clone()))?;
        }
        let c = p.c.iter().flat_map(|z| [z.re, z.im]).collect();
        store.set(self.c, Tensor::new(vec![h, n, 2], c)?)?;
        store.set(self.d, Tensor::from_vec(p.d.clone()))?;
        store.set(self.log_dt, Tensor::from_vec(p.log_dt.clone()))
    }

    pub fn bind(&self, f: &mut Forward) -> S4dVars {
        S4dVars {
            a_raw: f.param(self.a_raw),
            a_imag: self.a_imag.map(|id| f.param(id)),
            c: f.param(self.c),
            d: f.param(self.d),
            log_dt: f.param(self.log_dt),
            n_state: self.n_state,
        }
    }
}

/// One convolution module; weights live in the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub spec: ConvModuleSpec,
    pub pre_norm: LayerNorm,
    pub glu_proj: Linear,
    /// Depthwise kernel `[H × kernel_size]` (Baseline, COM).
    pub kernel: Option<ParamId>,
    pub s4: Option<S4Ids>,
    pub batch_norm: BatchNorm,
    pub post_proj: Linear,
}

impl ConvModule {
    /// Validates `spec` and registers freshly initialised weights under
    /// `name`.
    pub fn new(
        spec: &ConvModuleSpec,
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let h = spec.h;
        let pre_norm = LayerNorm::new(store, &format!("{name}.ln"), h);
        let glu_proj = Linear::new(store, &format!("{name}.glu_proj"), h, 2 * h, true, rng);
        let kernel = matches!(spec.approach, Approach::Baseline | Approach::Com).then(|| {
            let k = spec.kernel_size;
            let scale = 1.0 / (k as f64).sqrt();
            let data = (0..h * k)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            store.add(
                format!("{name}.depthwise.kernel"),
                Tensor::matrix(h, k, data).expect("kernel"),
                true,
            )
        });
        let s4 = match &spec.s4d {
            Some(cfg) => {
                let p = S4DParams::init(cfg, h, rng.next_u64())?;
                Some(S4Ids::register(store, &format!("{name}.s4"), &p))
            }
            None => None,
        };
        let batch_norm = BatchNorm::new(store, &format!("{name}.bn"), h);
        let post_proj = Linear::new(store, &format!("{name}.post_proj"), h, h, true, rng);
        Ok(Self {
            spec: spec.clone(),
            pre_norm,
            glu_proj,
            kernel,
            s4,
            batch_norm,
            post_proj,
        })
    }

    /// Sets the output projection to zero so the module is the identity.
    pub fn zero_residual_projection(&self, store: &mut ParamStore) {
        self.post_proj.zero(store);
    }

    /// Records the module on the tape. With `carry`, the input is the next
    /// chunk of a single online stream and `carry` is advanced.
    pub fn forward(&self, f: &mut Forward, x: Var, carry: Option<&mut ModuleCarry>) -> Result<Var> {
        let y = self.pre_norm.forward(f, x)?;
        let y = self.glu_proj.forward(f, y)?;
        let y = f.tape.glu(y)?;
        let y = self.core(f, y, carry)?;
        let y = self.batch_norm.forward(f, y)?;
        let y = f.tape.swish(y)?;
        let y = self.post_proj.forward(f, y)?;
        f.tape.add(x, y)
    }

    /// The variant-specific part, mapping `[B·T × H]` to `[B·T × H]`.
    pub fn core(
        &self,
        f: &mut Forward,
        x: Var,
        mut carry: Option<&mut ModuleCarry>,
    ) -> Result<Var> {
        match self.spec.approach {
            Approach::Baseline => {
                let k = f.param(self.kernel.expect("baseline kernel"));
                self.depthwise(f, x, k, carry)
            }
            Approach::Dir => self.s4_core(f, x, carry),
            Approach::Com => {
                let k = f.param(self.kernel.expect("com kernel"));
                let y = self.depthwise(f, x, k, carry.as_deref_mut())?;
                self.s4_core(f, y, carry)
            }
            Approach::Rep => {
                let ids = self.s4.as_ref().expect("rep s4");
                let vars = ids.bind(f);
                let len = self.spec.rep_left_context;
                let kernel = match carry.as_ref().and_then(|c| c.rep_kernel.clone()) {
                    Some(cached) => f.tape.constant(cached),
                    None => {
                        let disc = vars.discretize(&mut f.tape)?;
                        vars.kernel(&mut f.tape, disc, len)?
                    }
                };
                let kernel = vars.kernel_with_residual(&mut f.tape, kernel)?;
                self.depthwise(f, x, kernel, carry)
            }
        }
    }

    fn depthwise(
        &self,
        f: &mut Forward,
        x: Var,
        kernel: Var,
        carry: Option<&mut ModuleCarry>,
    ) -> Result<Var> {
        let taps = f.tape.value(kernel).cols();
        let right = self.spec.right_pad(taps);
        let Some(carry) = carry else {
            let opts = ConvOptions {
                seq_len: f.seq_len,
                right,
                prefix: None,
            };
            return f.tape.depthwise_conv(x, kernel, opts);
        };
        if right != 0 {
            return Err(Error::invalid("streaming needs an online (causal) module"));
        }
        let opts = ConvOptions {
            seq_len: f.seq_len,
            right,
            prefix: Some(carry.conv_tail.clone()),
        };
        let y = f.tape.depthwise_conv(x, kernel, opts)?;
        carry.push_conv_input(f.tape.value(x), taps - 1);
        Ok(y)
    }

    fn s4_core(&self, f: &mut Forward, x: Var, carry: Option<&mut ModuleCarry>) -> Result<Var> {
        let ids = self.s4.as_ref().expect("s4 ids");
        let vars = ids.bind(f);
        let disc = vars.discretize(&mut f.tape)?;
        match carry {
            Some(carry) => {
                let opts = ScanOptions {
                    seq_len: f.seq_len,
                    init: carry.s4_state.clone(),
                };
                let (y, scan) = vars.forward_scan_with_node(&mut f.tape, disc, x, opts)?;
                carry.s4_state = Some(f.tape.scan_final_state(scan).expect("scan node").to_vec());
                Ok(y)
            }
            None if f.s4_eval == S4Eval::Conv => vars.forward_conv(&mut f.tape, disc, x, f.seq_len),
            None => {
                let opts = ScanOptions {
                    seq_len: f.seq_len,
                    init: None,
                };
                vars.forward_scan(&mut f.tape, disc, x, opts)
            }
        }
    }

    /// Full-sequence forward of one `[T × H]` input outside any model.
    pub fn apply(&self, store: &ParamStore, x: &TimeSeries, training: bool) -> Result<TimeSeries> {
        let mut f = Forward::eval(store, x.steps());
        f.training = training;
        let xv = f.input(x.as_tensor().clone());
        let y = self.forward(&mut f, xv, None)?;
        TimeSeries::try_from(f.tape.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Feed-forward half residual, optional causal attention, convolution
/// module, final layer norm.
#[derive(Clone, Debug)]
pub struct Block {
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub attention: Option<Attention>,
    pub conv: ConvModule,
    pub out_norm: LayerNorm,
}

impl Block {
    fn new(
        spec: &EncoderSpec,
        module: &ConvModuleSpec,
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h = spec.width;
        let inner = spec.ff_mult * h;
        let ff_norm = LayerNorm::new(store, &format!("{name}.ff.ln"), h);
        let ff_in = Linear::new(store, &format!("{name}.ff.linear1"), h, inner, true, rng);
        let ff_out = Linear::new(store, &format!("{name}.ff.linear2"), inner, h, true, rng);
        let attention = spec.with_attention.then(|| Attention {
            norm: LayerNorm::new(store, &format!("{name}.attn.ln"), h),
            q: Linear::new(store, &format!("{name}.attn.q"), h, h, false, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), h, h, false, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), h, h, false, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), h, h, true, rng),
        });
        let conv = ConvModule::new(module, store, &format!("{name}.conv"), rng)?;
        let out_norm = LayerNorm::new(store, &format!("{name}.ln"), h);
        Ok(Self {
            ff_norm,
            ff_in,
            ff_out,
            attention,
            conv,
            out_norm,
        })
    }

    fn forward(&self, f: &mut Forward, x: Var, carry: Option<&mut BlockCarry>) -> Result<Var> {
        let y = self.ff_norm.forward(f, x)?;
        let y = self.ff_in.forward(f, y)?;
        let y = f.tape.swish(y)?;
        let y = self.ff_out.forward(f, y)?;
        let y = f.tape.scale(y, 0.5)?;
        let mut x = f.tape.add(x, y)?;
        let (attn_carry, module_carry) = match carry {
            Some(c) => (Some(&mut c.attention), Some(&mut c.module)),
            None => (None, None),
        };
        if let Some(att) = &self.attention {
            let a = att.norm.forward(f, x)?;
            let q = att.q.forward(f, a)?;
            let k = att.k.forward(f, a)?;
            let v = att.v.forward(f, a)?;
            let prefix = attn_carry.as_ref().map(|c| AttentionPrefix {
                keys: c.keys.clone(),
                values: c.values.clone(),
            });
            let y = f.tape.causal_attention(q, k, v, f.seq_len, prefix)?;
            if let Some(c) = attn_carry {
                c.append(f.tape.value(k), f.tape.value(v));
            }
            let y = att.out.forward(f, y)?;
            x = f.tape.add(x, y)?;
        }
        let x = self.conv.forward(f, x, module_carry)?;
        self.out_norm.forward(f, x)
    }
}

/// Shape of an encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub width: usize,
    pub blocks: Vec<ConvModuleSpec>,
    pub with_attention: bool,
    /// Hidden width of the feed-forward sublayer as a multiple of `width`.
    pub ff_mult: usize,
}

impl EncoderSpec {
    pub const DEFAULT_FF_MULT: usize = 4;

    /// `blocks` copies of the same module.
    pub fn uniform(module: ConvModuleSpec, blocks: usize, with_attention: bool) -> Self {
        Self {
            width: module.h,
            blocks: vec![module; blocks],
            with_attention,
            ff_mult: Self::DEFAULT_FF_MULT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config(
                "blocks",
                "an encoder needs at least one block",
            ));
        }
        if self.ff_mult == 0 {
            return Err(Error::config("ff_mult", "must be at least 1"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.h != self.width {
                return Err(Error::invalid(format!(
                    "block {i} has width {} but the encoder width is {}",
                    b.h, self.width
                )));
            }
        }
        Ok(())
    }

    /// True when every block only looks at past frames.
    pub fn is_online(&self) -> bool {
        self.blocks.iter().all(|b| b.context == Context::Online)
    }
}

/// Blocks of an encoder without the parameter storage.
#[derive(Clone, Debug)]
pub struct EncoderLayout {
    pub spec: EncoderSpec,
    pub blocks: Vec<Block>,
}

impl EncoderLayout {
    fn new(spec: &EncoderSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, m)| Block::new(spec, m, store, &format!("blocks.{i}"), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn forward(
        &self,
        f: &mut Forward,
        mut x: Var,
        mut carries: Option<&mut [BlockCarry]>,
    ) -> Result<Var> {
        for (i, block) in self.blocks.iter().enumerate() {
            let carry = carries.as_deref_mut().map(|c| &mut c[i]);
            x = block.forward(f, x, carry)?;
        }
        Ok(x)
    }
}

/// Parameters plus a forward pass from `[B·T × in]` rows to `[B·T × out]`
/// rows.
pub trait Network {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// With `carries`, `x` is the next chunk of one online stream.
    fn forward(&self, f: &mut Forward, x: Var, carries: Option<&mut [BlockCarry]>) -> Result<Var>;
}

/// A network built from an [`EncoderLayout`].
pub trait Model: Network {
    fn layout(&self) -> &EncoderLayout;
    fn input_width(&self) -> usize;
    fn output_width(&self) -> usize;

    /// Eval-mode forward over a single sequence.
    fn eval(&self, x: &TimeSeries) -> Result<TimeSeries> {
        self.eval_with(x, S4Eval::Scan)
    }

    fn eval_with(&self, x: &TimeSeries, s4_eval: S4Eval) -> Result<TimeSeries> {
        if x.channels() != self.input_width() {
            return Err(Error::invalid(format!(
                "model expects {} input channels, got {}",
                self.input_width(),
                x.channels()
            )));
        }
        let mut f = Forward::eval(self.store(), x.steps());
        f.s4_eval = s4_eval;
        let xv = f.input(x.as_tensor().clone());
        let y = self.forward(&mut f, xv, None)?;
        TimeSeries::try_from(f.tape.value(y).clone())
    }
}

/// A trainable encoder over `width` channels.
#[derive(Clone, Debug)]
pub struct Encoder {
    store: ParamStore,
    layout: EncoderLayout,
}

/// Builds an encoder with weights drawn from `seed`.
pub fn build_encoder(spec: &EncoderSpec, seed: u64) -> Result<Encoder> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layout = EncoderLayout::new(spec, &mut store, &mut rng)?;
    Ok(Encoder { store, layout })
}

impl Encoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.layout.spec
    }

    /// Zeroes every residual branch's output projection (feed-forward,
    /// attention and convolution module).
    pub fn zero_residual_projections(&mut self) {
        for b in &self.layout.blocks {
            b.ff_out.zero(&mut self.store);
            if let Some(a) = &b.attention {
                a.out.zero(&mut self.store);
            }
            b.conv.zero_residual_projection(&mut self.store);
        }
    }
}

impl Network for Encoder {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, f: &mut Forward, x: Var, carries: Option<&mut [BlockCarry]>) -> Result<Var> {
        self.layout.forward(f, x, carries)
    }
}

impl Model for Encoder {
    fn layout(&self) -> &EncoderLayout {
        &self.layout
    }

    fn input_width(&self) -> usize {
        self.layout.spec.width
    }

    fn output_width(&self) -> usize {
        self.layout.spec.width
    }
}

/// Token classifier: one-hot `[T × V]` input, embedding, encoder, readout to
/// `V` logits per frame.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    store: ParamStore,
    layout: EncoderLayout,
    pub embed: Linear,
    pub readout: Linear,
    vocab: usize,
}

impl SequenceModel {
    pub fn new(spec: &EncoderSpec, vocab: usize, seed: u64) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::config("vocab", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "embed", vocab, spec.width, true, &mut rng);
        let layout = EncoderLayout::new(spec, &mut store, &mut rng)?;
        let readout = Linear::new(&mut store, "readout", spec.width, vocab, true, &mut rng);
        Ok(Self {
            store,
            layout,
            embed,
            readout,
            vocab,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.layout.spec
    }
}

impl Network for SequenceModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, f: &mut Forward, x: Var, carries: Option<&mut [BlockCarry]>) -> Result<Var> {
        let h = self.embed.forward(f, x)?;
        let h = self.layout.forward(f, h, carries)?;
        self.readout.forward(f, h)
    }
}

impl Model for SequenceModel {
    fn layout(&self) -> &EncoderLayout {
        &self.layout
    }

    fn input_width(&self) -> usize {
        self.vocab
    }

    fn output_width(&self) -> usize {
        self.vocab
    }
}

/// One convolution module with its own parameters.
#[derive(Clone, Debug)]
pub struct ModuleNet {
    store: ParamStore,
    pub module: ConvModule,
}

impl ModuleNet {
    pub fn new(spec: &ConvModuleSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let module = ConvModule::new(spec, &mut store, "module", &mut rng)?;
        Ok(Self { store, module })
    }
}

impl Network for ModuleNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, f: &mut Forward, x: Var, carries: Option<&mut [BlockCarry]>) -> Result<Var> {
        match carries {
            Some(c) if c.len() == 1 => self.module.forward(f, x, Some(&mut c[0].module)),
            Some(_) => Err(Error::invalid("a single module takes exactly one carry")),
            None => self.module.forward(f, x, None),
        }
    }
}

/// A bare S4D layer with its own parameters.
#[derive(Clone, Debug)]
pub struct S4DNet {
    store: ParamStore,
    pub ids: S4Ids,
}

impl S4DNet {
    pub fn new(params: &S4DParams) -> Self {
        let mut store = ParamStore::new();
        let ids = S4Ids::register(&mut store, "s4", params);
        Self { store, ids }
    }
}

impl Network for S4DNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, f: &mut Forward, x: Var, carries: Option<&mut [BlockCarry]>) -> Result<Var> {
        if carries.is_some() {
            return Err(Error::invalid("use s4d_step to stream a bare S4D layer"));
        }
        let vars = self.ids.bind(f);
        let disc = vars.discretize(&mut f.tape)?;
        match f.s4_eval {
            S4Eval::Scan => vars.forward_scan(
                &mut f.tape,
                disc,
                x,
                ScanOptions {
                    seq_len: f.seq_len,
                    init: None,
                },
            ),
            S4Eval::Conv => vars.forward_conv(&mut f.tape, disc, x, f.seq_len),
        }
    }
}

#[cfg(test)]
mod tests;
