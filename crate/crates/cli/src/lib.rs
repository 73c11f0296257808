//! The `mmea` command line: synthetic data, training, evaluation,
//! alignment export and plot data.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmea_core::dataset::{load_dataset_dir, write_dataset_dir, Dataset};
use mmea_core::eval::{emit_plot_data, export_alignments, similarity_for, Direction, PlotQuantity};
use mmea_core::kg::synth::{generate_synthetic_pair, SynthConfig};
use mmea_core::kg::Side;
use mmea_core::trainer::{
    embeddings, evaluate_state, final_checkpoint_path, history_path, load_checkpoint, run_training, TrainConfig,
};
use mmea_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mmea", version, about = "Multi-modal entity alignment between knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic graph pair with features to a directory.
    Synth(SynthArgs),
    /// Train from a config file on a dataset directory.
    Train(TrainArgs),
    /// Rank the test alignments with a checkpoint.
    Eval(EvalArgs),
    /// Export top-1 alignment predictions.
    Predict(PredictArgs),
    /// Turn a training history into CSV curves.
    PlotData(PlotArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of relation triples rewired on the target side.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; defaults to `<data>/run`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    SrcToTgt,
    TgtToSrc,
    Mean,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::SrcToTgt => Direction::SourceToTarget,
            DirectionArg::TgtToSrc => Direction::TargetToSource,
            DirectionArg::Mean => Direction::Mean,
        }
    }
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    /// Checkpoint file, or a training output directory holding `checkpoint.ckpt`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Rank against every target entity instead of the test targets only.
    #[arg(long)]
    all_targets: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, value_enum, default_value_t = DirectionArg::SrcToTgt)]
    direction: DirectionArg,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    out: PathBuf,
    /// Keep only predictions scoring at least this much.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    history: PathBuf,
    /// hits1_vs_epoch, mrr_vs_epoch, loss_vs_epoch, or `all`.
    #[arg(long, default_value = "all")]
    quantity: String,
    /// Output CSV file, or a directory when `--quantity all`.
    #[arg(long)]
    out: PathBuf,
}

/// Exit code of an error: 2 for filesystem failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        2
    } else {
        1
    }
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::PlotData(a) => plot(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig { n_entities: a.entities, rng_seed: a.seed, structure_noise: a.noise, ..Default::default() };
    let bench = generate_synthetic_pair(&cfg)?;
    write_dataset_dir(&bench, &a.out)?;
    println!("wrote {} aligned entity pairs to {}", bench.seeds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.epochs {
        cfg.epochs = n;
    }
    cfg.validate()?;
    let data = load_dataset_dir(&a.data, &cfg.data_options(), cfg.train_fraction, cfg.rng_seed)?;
    let out = a.out.unwrap_or_else(|| a.data.join("run"));
    let state = run_training(&data, &cfg, &out, a.resume.as_deref())?;
    cfg.save(&out.join("config.toml"))?;
    println!(
        "trained {} epochs; {} pseudo-labels; history {}; checkpoint {}",
        state.epoch,
        state.pseudo.promoted.len(),
        history_path(&out).display(),
        final_checkpoint_path(&out).display()
    );
    Ok(())
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        final_checkpoint_path(path)
    } else {
        path.to_path_buf()
    }
}

fn load_for_eval(a: &CheckpointArgs) -> Result<(mmea_core::trainer::TrainState, TrainConfig, Dataset)> {
    let (state, mut cfg) = load_checkpoint(&checkpoint_file(&a.checkpoint))?;
    cfg.eval_all_targets |= a.all_targets;
    let data = load_dataset_dir(&a.data, &cfg.data_options(), cfg.train_fraction, cfg.rng_seed)?;
    Ok((state, cfg, data))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (state, cfg, data) = load_for_eval(&a.ckpt)?;
    let report = evaluate_state(&state, &cfg, &data, a.direction.into())?;
    println!("{report}");
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.clone(), source: e })?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let (state, cfg, data) = load_for_eval(&a.ckpt)?;
    let (src, tgt) = embeddings(&state, &cfg, &data)?;
    let test = data.pair.test_seeds.pairs();
    let rows: Vec<usize> = test.iter().map(|p| p.source).collect();
    let cols: Vec<usize> = if cfg.eval_all_targets {
        (0..data.shape.n_target).collect()
    } else {
        test.iter().map(|p| p.target).collect()
    };
    let sim = similarity_for(&src.joint, &tgt.joint, &rows, &cols)?;
    let names = (data.pair.graph(Side::Source).entities.as_slice(), data.pair.graph(Side::Target).entities.as_slice());
    let n = export_alignments(&sim, names, a.threshold, &a.out)?;
    println!("wrote {n} predictions to {}", a.out.display());
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    if a.quantity == "all" {
        fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
        for q in PlotQuantity::ALL {
            let path = a.out.join(format!("{}.csv", q.name()));
            let n = emit_plot_data(&a.history, q, &path)?;
            println!("{}: {n} rows", path.display());
        }
    } else {
        let q = PlotQuantity::parse(&a.quantity)?;
        let n = emit_plot_data(&a.history, q, &a.out)?;
        println!("{}: {n} rows", a.out.display());
    }
    Ok(())
}
