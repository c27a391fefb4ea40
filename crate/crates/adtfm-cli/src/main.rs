//! Command-line pipeline: synthesize, augment, train, evaluate, infer,
//! and gradient-check.
//!
//! Outputs are plain CSV/JSON with no timestamps, so any command rerun
//! with the same `--seed` writes byte-identical files. The seed falls
//! back to the `ADTFM_SEED` environment variable, then to 42. Training
//! options resolve as CLI flag > `--config` JSON file > built-in default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use adtfm_core::augment::{augment_dataset, augment_dataset_exact, SlideConfig};
use adtfm_core::checkpoint::{self, Checkpoint};
use adtfm_core::data::{
    self, apply_normalization, load_csv, load_csv_with_cycle, save_csv, split, to_packets,
    to_packets_with_classes, Dataset, FaultClass,
};
use adtfm_core::gradcheck::finite_diff_check;
use adtfm_core::model::{build_model, forward, forward_on_tape, ModelConfig, Variant};
use adtfm_core::simulate::{synth_dataset, CircuitParams};
use adtfm_core::tape::Tape;
use adtfm_core::train::{cross_entropy_node, evaluate, train, TrainConfig};
use adtfm_core::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "adtfm",
    about = "Incipient-fault classification toolkit for three-phase waveforms",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset CSV.
    Simulate(SimulateArgs),
    /// Expand a dataset by phase switching and temporal sliding.
    Augment(AugmentArgs),
    /// Train a model and write a checkpoint plus a history CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a labeled dataset.
    Eval(EvalArgs),
    /// Classify one record and print its attention weights.
    Infer(InferArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output dataset CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-class record counts, e.g. "IPSF=200,TGF=200,Normal=200".
    #[arg(long, default_value = "IPSF=50,TGF=50,SGF=50,MTF=50,Normal=50")]
    counts: String,
    #[arg(long, default_value_t = 100)]
    samples_per_cycle: usize,
    #[arg(long, default_value_t = 2)]
    cycles: usize,
    /// Gaussian noise standard deviation, per-unit.
    #[arg(long, default_value_t = 0.02)]
    noise_std: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Input dataset CSV.
    #[arg(long)]
    input: PathBuf,
    /// Output dataset CSV.
    #[arg(long)]
    output: PathBuf,
    /// Also phase-switch fault records (Normal records only slide).
    #[arg(long)]
    phase: bool,
    /// Window length H in samples (default: one cycle).
    #[arg(long)]
    window: Option<usize>,
    /// Slide stride in samples (default: the window length).
    #[arg(long, conflicts_with = "slides")]
    stride: Option<usize>,
    /// Cut exactly this many windows per record instead of a fixed stride.
    #[arg(long)]
    slides: Option<usize>,
    /// Pin the cycle length instead of inferring it from the file.
    #[arg(long)]
    samples_per_cycle: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint JSON.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// TFM, AD-TFM, TFM-AT, AD-TFM-AT, or LSTM.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    j: Option<usize>,
    #[arg(long)]
    omega0: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    /// Train fraction of the stratified split.
    #[arg(long)]
    split: Option<f64>,
    /// Stop once held-out accuracy reaches this value.
    #[arg(long)]
    target_acc: Option<f64>,
    #[arg(long)]
    samples_per_cycle: Option<usize>,
    /// JSON config file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Metrics report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// ROC points CSV (class,fpr,tpr).
    #[arg(long)]
    roc: Option<PathBuf>,
    #[arg(long)]
    samples_per_cycle: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV holding the record to classify.
    #[arg(long)]
    data: PathBuf,
    /// Record to classify (default: the first in the file).
    #[arg(long)]
    record_id: Option<String>,
    #[arg(long)]
    samples_per_cycle: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    j: usize,
    /// Sequence length of the probe input.
    #[arg(long, default_value_t = 6)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Number of random model/input draws to check.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value = "AD-TFM-AT")]
    variant: String,
    #[arg(long)]
    seed: Option<u64>,
}

fn resolved_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("ADTFM_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(42)
}

fn load_dataset(path: &Path, samples_per_cycle: Option<usize>) -> Result<Dataset> {
    let ds = match samples_per_cycle {
        Some(spc) => load_csv_with_cycle(path, spc),
        None => load_csv(path),
    }
    .with_context(|| format!("loading {}", path.display()))?;
    Ok(ds)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut counts: BTreeMap<FaultClass, usize> = BTreeMap::new();
    for part in args.counts.split(',').filter(|p| !p.is_empty()) {
        let (name, count) = part
            .split_once('=')
            .with_context(|| format!("counts entry {part:?} is not NAME=COUNT"))?;
        let class: FaultClass = name.trim().parse()?;
        counts.insert(class, count.trim().parse::<usize>()?);
    }
    let seed = resolved_seed(args.seed);
    let ds = synth_dataset(
        &counts,
        &CircuitParams::default(),
        args.samples_per_cycle,
        args.cycles,
        args.noise_std,
        seed,
    )?;
    save_csv(&ds, &args.out)?;
    println!(
        "wrote {} records ({} classes, {} samples/cycle) to {}",
        ds.len(),
        ds.class_names.len(),
        ds.samples_per_cycle,
        args.out.display()
    );
    Ok(())
}

fn cmd_augment(args: &AugmentArgs) -> Result<()> {
    let ds = load_dataset(&args.input, args.samples_per_cycle)?;
    let window = args.window.unwrap_or(ds.samples_per_cycle);
    let out = match args.slides {
        Some(count) => augment_dataset_exact(&ds, window, count, args.phase)?,
        None => {
            let sc = SlideConfig {
                window,
                stride: args.stride.unwrap_or(window),
            };
            augment_dataset(&ds, &sc, args.phase)?
        }
    };
    save_csv(&out, &args.output)?;
    println!(
        "augmented {} records into {} ({})",
        ds.len(),
        out.len(),
        args.output.display()
    );
    Ok(())
}

/// Optional settings accepted in the `--config` JSON file.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct FileConfig {
    variant: Option<String>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    d: Option<usize>,
    k: Option<usize>,
    j: Option<usize>,
    omega0: Option<f64>,
    num_layers: Option<usize>,
    split: Option<f64>,
    target_acc: Option<f64>,
    seed: Option<u64>,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file: FileConfig = match &args.config {
        None => FileConfig::default(),
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
    };

    let variant: Variant = args
        .variant
        .clone()
        .or(file.variant)
        .unwrap_or_else(|| "AD-TFM-AT".to_string())
        .parse()?;
    let epochs = args
        .epochs
        .or(file.epochs)
        .context("--epochs is required (flag or config file)")?;
    let seed = args.seed.or(file.seed).unwrap_or_else(|| resolved_seed(None));

    let ds = load_dataset(&args.data, args.samples_per_cycle)?;
    let ratio = args.split.or(file.split).unwrap_or(0.8);
    let (train_ds, test_ds) = split(&ds, ratio, seed)?;
    let (train_normed, stats) = data::normalize(&train_ds)?;
    let test_normed = apply_normalization(&test_ds, &stats)?;
    let train_packets = to_packets(&train_normed)?;
    let test_packets = to_packets(&test_normed)?;

    let mut config = ModelConfig::new(variant, ds.class_names.len());
    config.d = args.d.or(file.d).unwrap_or(config.d);
    config.k = args.k.or(file.k).unwrap_or(config.k);
    config.j = args.j.or(file.j).unwrap_or(config.j);
    config.omega0 = args.omega0.or(file.omega0).unwrap_or(config.omega0);
    config.num_layers = args.layers.or(file.num_layers).unwrap_or(config.num_layers);
    let mut params = build_model(config, seed)?;

    let mut tc = TrainConfig::new(epochs);
    tc.learning_rate = args.lr.or(file.learning_rate).unwrap_or(tc.learning_rate);
    tc.batch_size = args.batch.or(file.batch_size).unwrap_or(tc.batch_size);
    tc.seed = seed;
    tc.target_val_acc = args.target_acc.or(file.target_acc);

    println!(
        "training {} (D={} K={} J={} omega0={} layers={}) on {} packets, validating on {}",
        variant, config.d, config.k, config.j, config.omega0, config.num_layers,
        train_packets.len(),
        test_packets.len()
    );
    let history = train(&mut params, &train_packets, &test_packets, &tc)?;
    let last = history.epochs.last().context("no epochs were run")?;
    println!(
        "finished after {} epochs: loss {:.4}, train acc {:.4}, val acc {:.4}",
        history.epochs.len(),
        last.loss,
        last.train_acc,
        last.val_acc
    );

    checkpoint::save(
        &Checkpoint {
            params,
            class_names: ds.class_names.clone(),
            norm: Some(stats),
        },
        &args.checkpoint,
    )?;
    println!("checkpoint: {}", args.checkpoint.display());
    if let Some(path) = &args.history {
        history.save_csv(path)?;
        println!("history: {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data, args.samples_per_cycle)?;
    let ds = match &ckpt.norm {
        Some(stats) => apply_normalization(&ds, stats)?,
        None => ds,
    };
    let packets = to_packets_with_classes(&ds, &ckpt.class_names)?;
    let report = evaluate(&ckpt.params, &packets, &ckpt.class_names)?;

    println!(
        "accuracy {:.4}  macroP {:.4}  macroR {:.4}  macroF1 {:.4}",
        report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1
    );
    for (name, auc) in ckpt.class_names.iter().zip(&report.auc) {
        match auc {
            Some(v) => println!("AUC[{name}] {v:.4}"),
            None => println!("AUC[{name}] undefined (degenerate class)"),
        }
    }
    if let Some(path) = &args.report {
        report.save_json(path)?;
        println!("report: {}", path.display());
    }
    if let Some(path) = &args.roc {
        report.save_roc_csv(path)?;
        println!("roc: {}", path.display());
    }
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data, args.samples_per_cycle)?;
    let ds = match &ckpt.norm {
        Some(stats) => apply_normalization(&ds, stats)?,
        None => ds,
    };
    let record = match &args.record_id {
        Some(id) => ds
            .records
            .iter()
            .find(|r| &r.id == id)
            .with_context(|| format!("record {id:?} not found"))?,
        None => ds.records.first().context("dataset file has no records")?,
    };
    let spc = ds.samples_per_cycle;
    if record.len() < spc {
        bail!("record {:?} is shorter than one cycle", record.id);
    }
    let mut cycle = Vec::with_capacity(spc * 6);
    for t in 0..spc {
        cycle.extend_from_slice(record.samples.row(t));
    }
    let prediction = forward(&ckpt.params, &Tensor::new(vec![spc, 6], cycle)?)?;

    println!("record: {}", record.id);
    println!("predicted: {}", ckpt.class_names[prediction.predicted_class]);
    for (name, p) in ckpt.class_names.iter().zip(&prediction.probabilities) {
        println!("p[{name}] {p:.6}");
    }
    let weights: Vec<String> = prediction.attn_weights.iter().map(|w| format!("{w:.6}")).collect();
    println!("attention: [{}]", weights.join(", "));
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    use rand::{Rng, SeedableRng};
    let variant: Variant = args.variant.parse()?;
    let base_seed = resolved_seed(args.seed);
    let config = ModelConfig {
        variant,
        d: args.d,
        k: args.k,
        j: args.j,
        omega0: 16.0,
        input_dim: 6,
        num_layers: args.layers,
        num_classes: args.classes,
    };

    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for round in 0..args.seeds {
        let seed = base_seed.wrapping_add(round as u64);
        let params = build_model(config, seed)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = Tensor::new(
            vec![args.steps, 6],
            (0..args.steps * 6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let label = rng.random_range(0..args.classes);

        let mut flat = BTreeMap::new();
        params.visit(&mut |name, t| {
            flat.insert(name, t.clone());
        });
        let report = finite_diff_check(
            |tape: &mut Tape, ps: &BTreeMap<String, Tensor>| {
                let mut patched = params.clone();
                patched.visit_mut(&mut |name, t| *t = ps[&name].clone());
                let nodes = patched.register(tape)?;
                let fwd = forward_on_tape(tape, &nodes, &patched.config, &x)?;
                cross_entropy_node(tape, fwd.probs, label)
            },
            &flat,
            args.step,
        )?;
        println!(
            "seed {seed}: max rel err {:.3e}, max abs err (small grads) {:.3e}",
            report.max_rel_error, report.max_abs_error
        );
        worst_rel = worst_rel.max(report.max_rel_error);
        worst_abs = worst_abs.max(report.max_abs_error);
    }
    println!(
        "gradcheck {} over {} seeds: max rel err {:.3e} (tolerance {:.1e})",
        variant, args.seeds, worst_rel, args.tolerance
    );
    if worst_rel <= args.tolerance && worst_abs <= 1e-7 {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args).map(|()| ExitCode::SUCCESS),
        Command::Augment(args) => cmd_augment(args).map(|()| ExitCode::SUCCESS),
        Command::Train(args) => cmd_train(args).map(|()| ExitCode::SUCCESS),
        Command::Eval(args) => cmd_eval(args).map(|()| ExitCode::SUCCESS),
        Command::Infer(args) => cmd_infer(args).map(|()| ExitCode::SUCCESS),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
