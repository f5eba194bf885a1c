use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s4former::bench::{bench, to_csv, BENCH_LENGTHS, MIN_REPS};
use s4former::checkpoint;
use s4former::checks::{run_suite, Suite};
use s4former::config::RunConfig;
use s4former::conv_module::{Model, Network, SequenceModel};
use s4former::numerics::TimeSeries;
use s4former::s4d::S4DParams;
use s4former::streaming::{open_stream, process_chunk};
use s4former::training::{evaluate, generate_task, stability_report, train, LineSink};
use s4former::Error;

#[derive(Parser)]
#[command(
    name = "s4former",
    version,
    about = "Train, stream and check S4D convolution-module encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (sectioned key-value text).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its final checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides io.checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the task's eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Run an online model over frame rows read from standard input.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Frames per processed chunk.
        #[arg(long, value_name = "U32", default_value_t = 1)]
        chunk_size: u32,
    },
    /// Run an invariant suite against a model.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// duality, causality, streaming, grads or params.
        #[arg(long, value_name = "NAME")]
        suite: String,
    },
    /// Time sequential, parallel-scan, direct and FFT evaluation of one S4D layer.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

/// A failure and its exit code.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&common.config).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("{}: {io}", common.config.display())),
        other => usage(other),
    })?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

/// The configured model, with the checkpoint's tensors if one is given.
fn load_model(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<SequenceModel, Failure> {
    let mut model = cfg.build_model().map_err(usage)?;
    if let Some(path) = ckpt {
        checkpoint::load_into(path, &cfg.digest(), model.store_mut()).map_err(runtime)?;
    }
    Ok(model)
}

fn cmd_train(common: &Common, ckpt: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    let path = ckpt
        .or_else(|| cfg.io.checkpoint.clone())
        .ok_or_else(|| Failure::Usage("io.checkpoint: no checkpoint path configured".into()))?;
    let data = generate_task(&cfg.task).map_err(usage)?;
    let mut model = cfg.build_model().map_err(usage)?;
    let mut writers: Vec<Box<dyn Write>> = vec![Box::new(io::stdout())];
    if let Some(log) = &cfg.io.log {
        let f = File::create(log)
            .map_err(|e| Failure::Usage(format!("io.log: {}: {e}", log.display())))?;
        writers.push(Box::new(BufWriter::new(f)));
    }
    if cfg.train.steps > 0 {
        train(&mut model, &data, &cfg.train, &mut LineSink(writers)).map_err(runtime)?;
    }
    checkpoint::save(&path, cfg.digest(), model.store()).map_err(runtime)?;
    if let Some((abar, re)) = stability_report(&model).map_err(runtime)? {
        eprintln!("max |a_bar| = {abar:.6}, max Re(A) = {re:.6}");
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    let data = generate_task(&cfg.task).map_err(usage)?;
    let model = load_model(&cfg, ckpt.as_deref())?;
    let (loss, acc) = evaluate(&model, &data.eval, data.vocab).map_err(runtime)?;
    println!(
        "split=eval sequences={} loss={loss:.6} accuracy={acc:.4}",
        data.eval.len()
    );
    Ok(())
}

fn parse_row(line: &str, width: usize, lineno: usize) -> Result<Vec<f64>, Failure> {
    let row: Vec<f64> = line
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("stdin line {lineno}: {e}")))?;
    if row.len() != width {
        return Err(Failure::Usage(format!(
            "stdin line {lineno}: expected {width} values, found {}",
            row.len()
        )));
    }
    Ok(row)
}

fn cmd_stream(common: &Common, ckpt: Option<PathBuf>, chunk_size: u32) -> Outcome {
    if chunk_size == 0 {
        return Err(Failure::Usage("--chunk-size must be at least 1".into()));
    }
    let cfg = load_config(common)?;
    let model = load_model(&cfg, ckpt.as_deref())?;
    let mut state =
        open_stream(&model).map_err(|e| Failure::Usage(format!("model.context: {e}")))?;
    let width = model.input_width();
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut pending: Vec<f64> = Vec::new();
    let mut flush = |pending: &mut Vec<f64>, out: &mut dyn Write| -> Outcome {
        if pending.is_empty() {
            return Ok(());
        }
        let chunk = TimeSeries::new(pending.len() / width, width, std::mem::take(pending))
            .map_err(runtime)?;
        let y = process_chunk(&model, &mut state, &chunk).map_err(runtime)?;
        for t in 0..y.steps() {
            let row: Vec<String> = y.frame(t).iter().map(f64::to_string).collect();
            writeln!(out, "{}", row.join(" ")).map_err(runtime)?;
        }
        out.flush().map_err(runtime)
    };
    for (i, line) in io::stdin().lock().lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        pending.extend(parse_row(&line, width, i + 1)?);
        if pending.len() == chunk_size as usize * width {
            flush(&mut pending, &mut out)?;
        }
    }
    flush(&mut pending, &mut out)
}

fn cmd_check(common: &Common, ckpt: Option<PathBuf>, suite: &str) -> Outcome {
    let suite: Suite = suite.parse().map_err(usage)?;
    let cfg = load_config(common)?;
    let mut model = load_model(&cfg, ckpt.as_deref())?;
    let report =
        run_suite(&mut model, suite, common.seed.unwrap_or(cfg.model.seed)).map_err(runtime)?;
    for c in &report.checks {
        println!("{c}");
    }
    if report.passed() {
        println!("suite {suite}: pass");
        Ok(())
    } else {
        Err(Failure::Runtime(format!("suite {suite}: fail")))
    }
}

fn cmd_bench(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let s4 = cfg.model.s4d();
    s4.validate().map_err(|e| usage(prefix_model(e)))?;
    if cfg.model.h == 0 {
        return Err(Failure::Usage(
            "model.h: channel width must be at least 1".into(),
        ));
    }
    let params = S4DParams::init(&s4, cfg.model.h, cfg.model.seed).map_err(usage)?;
    let rows = bench(&params, &BENCH_LENGTHS, MIN_REPS, cfg.model.seed).map_err(runtime)?;
    print!("{}", to_csv(&rows));
    Ok(())
}

fn prefix_model(e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::Config {
            field: format!("model.{field}"),
            message,
        },
        other => other,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { common, checkpoint } => cmd_train(&common, checkpoint),
        Command::Eval { common, checkpoint } => cmd_eval(&common, checkpoint),
        Command::Stream {
            common,
            checkpoint,
            chunk_size,
        } => cmd_stream(&common, checkpoint, chunk_size),
        Command::Check {
            common,
            checkpoint,
            suite,
        } => cmd_check(&common, checkpoint, &suite),
        Command::Bench { common } => cmd_bench(&common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
