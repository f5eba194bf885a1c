//! Run configuration: a sectioned key-value text file (TOML syntax).
//!
//! ```toml
//! [model]
//! approach = "rep"          # baseline | dir | com | rep
//! scheme = "lin"            # lin | real
//! n_state = 4
//! h = 64
//! kernel_size = 4           # baseline, and com's pre-S4 convolution
//! rep_left_context = 128    # rep only
//! blocks = 2
//! with_attention = false
//! context = "online"        # online | offline
//! dt_min = 0.001
//! dt_max = 0.1
//! ff_mult = 4
//! seed = 0
//!
//! [task]
//! kind = "delayed_echo"     # delayed_echo | local_pattern
//! seq_len = 256
//! delay = 64
//! vocab = 8
//! train_size = 4096
//! eval_size = 32
//! seed = 0
//!
//! [train]
//! lr = 0.003
//! steps = 2000
//! batch = 8
//! schedule = "cosine"       # constant | cosine
//! eval_interval = 250
//! seed = 0
//!
//! [io]
//! checkpoint = "run.s4fm"
//! log = "run.log"
//! ```
//!
//! Every key except `model.approach`, `model.h` and the `[task]` section has
//! a default. Errors carry the dotted path of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv_module::{Approach, Context, ConvModuleSpec, EncoderSpec, SequenceModel};
use crate::error::{Error, Result};
use crate::s4d::{S4DConfig, S4DScheme};
use crate::training::{TaskSpec, TrainConfig};

fn default_n_state() -> usize {
    4
}
fn default_kernel_size() -> usize {
    4
}
fn default_blocks() -> usize {
    2
}
fn default_dt_min() -> f64 {
    S4DConfig::DEFAULT_DT_MIN
}
fn default_dt_max() -> f64 {
    S4DConfig::DEFAULT_DT_MAX
}
fn default_ff_mult() -> usize {
    EncoderSpec::DEFAULT_FF_MULT
}
fn default_scheme() -> S4DScheme {
    S4DScheme::Lin
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub approach: Approach,
    #[serde(default = "default_scheme")]
    pub scheme: S4DScheme,
    #[serde(default = "default_n_state")]
    pub n_state: usize,
    pub h: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default)]
    pub rep_left_context: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub with_attention: bool,
    #[serde(default)]
    pub context: Context,
    #[serde(default = "default_dt_min")]
    pub dt_min: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Parameter initialisation seed.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn s4d(&self) -> S4DConfig {
        S4DConfig {
            scheme: self.scheme,
            n_state: self.n_state,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
        }
    }

    pub fn module_spec(&self) -> ConvModuleSpec {
        let s4 = self.s4d();
        match self.approach {
            Approach::Baseline => ConvModuleSpec::baseline(self.h, self.kernel_size, self.context),
            Approach::Dir => ConvModuleSpec::dir(self.h, s4, self.context),
            Approach::Com => ConvModuleSpec::com(self.h, self.kernel_size, s4, self.context),
            Approach::Rep => ConvModuleSpec::rep(self.h, self.rep_left_context, s4, self.context),
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            ff_mult: self.ff_mult,
            ..EncoderSpec::uniform(self.module_spec(), self.blocks, self.with_attention)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_spec()
            .validate()
            .map_err(|e| prefixed("model", e))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    /// Final checkpoint of `train`.
    pub checkpoint: Option<PathBuf>,
    /// Metric log of `train`, one record per line.
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub io: IoConfig,
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{section}.{field}"),
            message,
        },
        Error::InvalidArgument(message) => Error::Config {
            field: section.to_string(),
            message,
        },
        other => other,
    }
}

/// The backticked name in serde's "unknown field `x`" and "missing field `x`".
fn quoted_field(message: &str) -> Option<&str> {
    let rest = message
        .strip_prefix("unknown field `")
        .or_else(|| message.strip_prefix("missing field `"))?;
    rest.split('`').next()
}

impl RunConfig {
    /// Parses and validates a configuration text.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config("config", e.message().to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().message().to_string();
            let field = match (quoted_field(&message), path.as_str()) {
                (Some(name), ".") => name.to_string(),
                (Some(name), p) if p != name && !p.ends_with(&format!(".{name}")) => {
                    format!("{p}.{name}")
                }
                (_, p) => p.to_string(),
            };
            Error::Config { field, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate().map_err(|e| prefixed("task", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))
    }

    /// Replaces the model, task and training seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.task.seed = seed;
        self.train.seed = seed;
    }

    /// Fresh model with the configured architecture and seed.
    pub fn build_model(&self) -> Result<SequenceModel> {
        SequenceModel::new(&self.model.encoder_spec(), self.task.vocab, self.model.seed)
    }

    /// SHA-256 over a canonical rendering of everything that determines
    /// tensor names and shapes: the model section without its seed, plus the
    /// vocabulary size.
    pub fn digest(&self) -> [u8; 32] {
        let m = &self.model;
        let canonical = format!(
            "approach={}\nscheme={}\nn_state={}\nh={}\nkernel_size={}\nrep_left_context={}\nblocks={}\n\
             with_attention={}\ncontext={}\ndt_min={:e}\ndt_max={:e}\nff_mult={}\nvocab={}\n",
            m.approach,
            m.scheme,
            m.n_state,
            m.h,
            m.kernel_size,
            m.rep_left_context,
            m.blocks,
            m.with_attention,
            match m.context {
                Context::Online => "online",
                Context::Offline => "offline",
            },
            m.dt_min,
            m.dt_max,
            m.ff_mult,
            self.task.vocab,
        );
        Sha256::digest(canonical.as_bytes()).into()
    }
}
