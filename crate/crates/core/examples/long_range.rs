//! Delayed-echo training run: `cargo run --release --example long_range -- dir [steps]`.

use s4former::conv_module::{Context, ConvModuleSpec, EncoderSpec, SequenceModel};
use s4former::s4d::{S4DConfig, S4DScheme};
use s4former::training::{
    generate_task, train, LineSink, Schedule, TaskKind, TaskSpec, TrainConfig,
};

fn main() -> s4former::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map_or("dir", String::as_str);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let s4 = S4DConfig {
        dt_max: 1.0,
        ..S4DConfig::new(S4DScheme::Lin, 4)
    };
    let module = match variant {
        "baseline" => ConvModuleSpec::baseline(64, 4, Context::Online),
        "dir" => ConvModuleSpec::dir(64, s4, Context::Online),
        "com" => ConvModuleSpec::com(64, 2, s4, Context::Online),
        "rep8" => ConvModuleSpec::rep(64, 8, s4, Context::Online),
        "rep128" => ConvModuleSpec::rep(64, 128, s4, Context::Online),
        other => panic!("unknown variant {other}"),
    };
    let task = TaskSpec {
        kind: TaskKind::DelayedEcho,
        seq_len: 256,
        delay: 64,
        vocab: 8,
        train_size: 16384,
        eval_size: 32,
        seed: 0,
    };
    let data = generate_task(&task)?;
    let mut model = SequenceModel::new(&EncoderSpec::uniform(module, 2, false), 8, 0)?;
    let cfg = TrainConfig {
        lr: 3e-3,
        steps,
        batch: 8,
        schedule: Schedule::Cosine,
        eval_interval: 250,
        stop_at_accuracy: Some(0.95),
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let history = train(
        &mut model,
        &data,
        &cfg,
        &mut LineSink(vec![std::io::stdout()]),
    )?;
    eprintln!(
        "{variant}: best eval accuracy {:.4} after {} steps in {:.1?}",
        history.best_eval_accuracy(),
        history.steps_taken,
        start.elapsed()
    );
    Ok(())
}
