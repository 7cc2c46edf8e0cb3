//! antidote CLI: train/eval/flops/sweep/compare experiments over the
//! dynamic-pruning engine. Exit codes: 0 ok, 2 usage, 3 missing artifact,
//! 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use antidote::config::{
    load_file_config, load_model_spec, CliOverrides, ExperimentConfig, FileConfig,
};
use antidote::data::{load_cifar10_binary, synth_shapes, Dataset, NormalizeSpec};
use antidote::error::Error;
use antidote::flops::{dynamic_flops, measured_macs, PruneRatios};
use antidote::fsio::atomic_write;
use antidote::model::{build_model, toy_vgg_spec_with_input, Model, ModelSpec, PruneSettings};
use antidote::train::{
    compare_criteria, evaluate, sensitivity_sweep, sweep_csv, ttd_train,
};

#[derive(Parser)]
#[command(name = "antidote", version, about = "Attention-based dynamic feature-map pruning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with targeted dropout and write checkpoint + history CSV
    Train(CommonArgs),
    /// Evaluate a checkpoint unpruned and pruned, with measured vs analytical FLOPs
    Eval(CommonArgs),
    /// Analytical FLOPs report for a model spec (no weights needed)
    Flops(CommonArgs),
    /// Accuracy-vs-ratio sensitivity sweep per block (needs a checkpoint)
    Sweep(CommonArgs),
    /// Attention vs random vs inverse pruning comparison (needs a checkpoint)
    Compare(CommonArgs),
}

#[derive(Args, Default)]
struct CommonArgs {
    /// Built-in model name (toy-vgg, vgg16-cifar, vgg16-imagenet,
    /// resnet56-cifar) or path to a TOML model spec
    #[arg(long)]
    model: Option<String>,
    /// "synthetic" or a path to CIFAR-10 binary data (file or directory)
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV/JSON artifacts and checkpoints
    #[arg(long)]
    out: Option<String>,
    /// Per-block channel prune ratios, e.g. 0.2,0.2,0.6
    #[arg(long, value_delimiter = ',')]
    ratios_ch: Option<Vec<f64>>,
    /// Per-block spatial prune ratios
    #[arg(long, value_delimiter = ',')]
    ratios_sp: Option<Vec<f64>>,
    /// Mask criterion: attention | random | inverse
    #[arg(long)]
    criterion: Option<String>,
    /// Optional TOML config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Training set size (synthetic) or cap (file data)
    #[arg(long)]
    train_n: Option<usize>,
    #[arg(long)]
    test_n: Option<usize>,
    /// Enable or disable flip/pad/crop augmentation
    #[arg(long)]
    augment: Option<bool>,
    /// Warm-up prune ratio for the ascent schedule
    #[arg(long)]
    warmup: Option<f64>,
    /// Ascent step size
    #[arg(long)]
    step: Option<f64>,
    /// Convergence window in epochs
    #[arg(long)]
    window: Option<usize>,
    /// Relative loss-improvement threshold for the plateau rule
    #[arg(long)]
    eps: Option<f64>,
    /// Ratio grid for sweep/compare, e.g. 0,0.25,0.5
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Block index for sweep/compare (default: all blocks / last block)
    #[arg(long)]
    block: Option<usize>,
    /// Number of seeds the random criterion averages over
    #[arg(long)]
    random_seeds: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let file = match &self.config {
            Some(path) => load_file_config(path)?,
            None => FileConfig::default(),
        };
        let cli = CliOverrides {
            model: self.model.clone(),
            data: self.data.clone(),
            seed: self.seed,
            out: self.out.clone(),
            ratios_ch: self.ratios_ch.clone(),
            ratios_sp: self.ratios_sp.clone(),
            criterion: self.criterion.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            train_n: self.train_n,
            test_n: self.test_n,
            augment: self.augment,
            warmup: self.warmup,
            step: self.step,
            window: self.window,
            eps: self.eps,
            grid: self.grid.clone(),
            block: self.block,
            random_seeds: self.random_seeds,
        };
        ExperimentConfig::resolve(&cli, &file)
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. }
        | Error::InvalidRatio { .. }
        | Error::BlockMismatch { .. }
        | Error::SpecInvalid { .. } => 2,
        Error::MissingArtifact { .. } => 3,
        Error::NonFiniteLoss { .. } | Error::ScheduleStep { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Flops(args) => cmd_flops(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Load train/test splits. Synthetic data derives both splits from the run
/// seed; file data loads CIFAR-10 records and splits 2:1 in file order when
/// no separate test file exists.
fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset), Error> {
    if config.data == "synthetic" {
        let train = synth_shapes(config.train_n, 10, 1000 + config.seed)?;
        let test = synth_shapes(config.test_n, 10, 2000 + config.seed)?;
        return Ok((train, test));
    }
    let path = Path::new(&config.data);
    let cap_per_class = (config.train_n + config.test_n).div_ceil(10);
    let all = load_cifar10_binary(path, cap_per_class, &NormalizeSpec::cifar10())?;
    let n_train = (all.len() * 2 / 3).min(config.train_n).max(1);
    let n_test = (all.len() - n_train).min(config.test_n).max(1);
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
    let (train_images, train_labels) = all.gather(&train_idx)?;
    let (test_images, test_labels) = all.gather(&test_idx)?;
    Ok((
        Dataset {
            images: train_images,
            labels: train_labels,
            class_count: all.class_count,
            split: "train".into(),
        },
        Dataset {
            images: test_images,
            labels: test_labels,
            class_count: all.class_count,
            split: "test".into(),
        },
    ))
}

/// Resolve the model spec; toy-vgg adapts its input dims to the dataset.
fn resolve_spec(
    config: &ExperimentConfig,
    data_dims: Option<(usize, usize, usize)>,
) -> Result<ModelSpec, Error> {
    let spec = load_model_spec(&config.model)?;
    if let Some(dims) = data_dims {
        if spec.input != dims && config.model == "toy-vgg" {
            let adapted = toy_vgg_spec_with_input(dims.0, dims.1, dims.2);
            adapted.validate()?;
            return Ok(adapted);
        }
    }
    Ok(spec)
}

fn checkpoint_stem(config: &ExperimentConfig) -> PathBuf {
    config.out.join("model")
}

fn cmd_train(args: &CommonArgs) -> Result<(), Error> {
    let config = args.resolve()?;
    let (train_ds, test_ds) = load_data(&config)?;
    let spec = resolve_spec(&config, Some(train_ds.image_dims()))?;
    let prune_config = config.prune_config(spec.block_count())?;
    let params = config.train_params();

    let mut model = build_model(&spec, config.seed)?;
    let run = ttd_train(&mut model, &train_ds, &test_ds, &prune_config, &params)?;

    atomic_write(&config.out.join("history.csv"), run.to_csv().as_bytes())?;
    model.save_checkpoint(&checkpoint_stem(&config))?;

    let target = prune_config.target_settings()?;
    let train_acc = evaluate(&model, &train_ds, &target, params.eval_batch)?;
    let test_acc = evaluate(&model, &test_ds, &target, params.eval_batch)?;
    println!("epochs run: {}", run.epochs_run);
    println!("final train accuracy: {train_acc:.4}");
    println!("final test accuracy: {test_acc:.4}");
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<(), Error> {
    let config = args.resolve()?;
    let (_, test_ds) = load_data(&config)?;
    let spec = resolve_spec(&config, Some(test_ds.image_dims()))?;
    let model = Model::load_checkpoint(&spec, &checkpoint_stem(&config))?;
    let prune_config = config.prune_config(spec.block_count())?;

    let unpruned =
        evaluate(&model, &test_ds, &PruneSettings::disabled(spec.block_count()), 128)?;
    let target = prune_config.target_settings()?;
    let pruned = evaluate(&model, &test_ds, &target, 128)?;

    // measured vs analytical MACs over one batch
    let macs_batch = test_ds.len().min(config.batch_size.max(1));
    let indices: Vec<usize> = (0..macs_batch).collect();
    let (batch, _) = test_ds.gather(&indices)?;
    let measured = measured_macs(&model, &batch, &target)?;

    let ratios = PruneRatios {
        channel: prune_config.channel_prune.clone(),
        spatial: prune_config.spatial_prune.clone(),
    };
    let planned = dynamic_flops(&spec, &ratios)?;

    println!("unpruned accuracy: {unpruned:.4}");
    println!("pruned accuracy:   {pruned:.4}");
    println!(
        "planned FLOPs: dense {} dynamic {} reduction {:.1}%",
        planned.dense_total, planned.dynamic_total, planned.reduction_pct
    );
    println!(
        "measured MACs over batch of {macs_batch}: {} (analytic {})",
        measured.measured_total(),
        measured.analytic_total()
    );

    let json = serde_json::json!({
        "unpruned_accuracy": unpruned,
        "pruned_accuracy": pruned,
        "planned_dense_total": planned.dense_total,
        "planned_dynamic_total": planned.dynamic_total,
        "planned_reduction_pct": planned.reduction_pct,
        "measured_macs_total": measured.measured_total(),
        "measured_analytic_total": measured.analytic_total(),
        "measured_batch": macs_batch,
        "per_layer_measured": measured.per_layer.iter()
            .map(|(name, m, a)| serde_json::json!({"layer": name, "measured": m, "analytic": a}))
            .collect::<Vec<_>>(),
    });
    atomic_write(
        &config.out.join("eval.json"),
        serde_json::to_string_pretty(&json).expect("json").as_bytes(),
    )?;
    Ok(())
}

fn cmd_flops(args: &CommonArgs) -> Result<(), Error> {
    let config = args.resolve()?;
    let spec = resolve_spec(&config, None)?;
    let blocks = spec.block_count();
    let pad = |v: &Vec<f64>| if v.is_empty() { vec![0.0; blocks] } else { v.clone() };
    let ratios =
        PruneRatios { channel: pad(&config.ratios_ch), spatial: pad(&config.ratios_sp) };
    let report = dynamic_flops(&spec, &ratios)?;
    atomic_write(&config.out.join("flops.csv"), report.to_csv().as_bytes())?;
    atomic_write(&config.out.join("flops.json"), report.to_json().as_bytes())?;
    println!("model: {}", report.model);
    println!("dense FLOPs:   {}", report.dense_total);
    println!("dynamic FLOPs: {}", report.dynamic_total);
    println!("reduction: {:.1}%", report.reduction_pct);
    println!(
        "attribution: channel {:.1}% spatial {:.1}% interaction {:.1}%",
        report.channel_attrib_pct, report.spatial_attrib_pct, report.interaction_pct
    );
    Ok(())
}

fn cmd_sweep(args: &CommonArgs) -> Result<(), Error> {
    let config = args.resolve()?;
    let (_, test_ds) = load_data(&config)?;
    let spec = resolve_spec(&config, Some(test_ds.image_dims()))?;
    let model = Model::load_checkpoint(&spec, &checkpoint_stem(&config))?;
    let blocks: Vec<usize> = match config.block {
        Some(b) => vec![b],
        None => (0..spec.block_count()).collect(),
    };
    let mut curves = Vec::new();
    for block in blocks {
        curves.push(sensitivity_sweep(&model, &test_ds, block, &config.grid)?);
    }
    atomic_write(&config.out.join("sweep.csv"), sweep_csv(&curves).as_bytes())?;
    for curve in &curves {
        let line: Vec<String> =
            curve.points.iter().map(|(r, a)| format!("{r:.2}:{a:.3}")).collect();
        println!("block {}: {}", curve.block, line.join(" "));
    }
    Ok(())
}

fn cmd_compare(args: &CommonArgs) -> Result<(), Error> {
    let config = args.resolve()?;
    let (_, test_ds) = load_data(&config)?;
    let spec = resolve_spec(&config, Some(test_ds.image_dims()))?;
    let model = Model::load_checkpoint(&spec, &checkpoint_stem(&config))?;
    let block = config.block.unwrap_or(spec.block_count() - 1);
    let seeds: Vec<u64> = (1..=config.random_seeds as u64).collect();
    let cmp = compare_criteria(&model, &test_ds, block, &config.grid, &seeds)?;
    atomic_write(&config.out.join("compare.csv"), cmp.to_csv().as_bytes())?;
    for (i, ratio) in cmp.grid.iter().enumerate() {
        println!(
            "ratio {ratio:.2}: attention {:.3} random {:.3} inverse {:.3}",
            cmp.attention[i], cmp.random_mean[i], cmp.inverse[i]
        );
    }
    Ok(())
}
