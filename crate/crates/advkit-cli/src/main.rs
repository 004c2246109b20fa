//! Command-line front end: train encoders and attacks, evaluate artifacts,
//! run defenses, execute experiment plans, and emit reports.
//!
//! Every verb reads and writes flat files; nothing here holds state between
//! invocations. The only environment dependency is the optional `ADVKIT_CACHE`
//! directory for sharing trained toy encoders between plan runs.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use advkit::attack::{load_artifact, save_artifact, train_advencoder};
use advkit::config::AttackConfig;
use advkit::data::resolve_dataset;
use advkit::defenses::DefenseSpec;
use advkit::encoders::{
    load_encoder, save_encoder, train_linear_probe, train_toy_encoder, Method,
};
use advkit::evaluation::eval_reports_to_csv;
use advkit::plan::{
    baseline_row, emit_report, evaluate_artifact, evaluate_defense, run_experiment_with,
    DefenseContext, PretrainSpec, ReportFormat, RunOptions, CACHE_ENV,
};

#[derive(Parser)]
#[command(
    name = "advkit",
    version,
    about = "Universal adversarial noise against frozen image encoders",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and save encoders.
    #[command(subcommand)]
    Encoder(EncoderCmd),
    /// Train and save attack artifacts.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Evaluate artifacts against an encoder and probe.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Evaluate defenses against a trained artifact.
    #[command(subcommand)]
    Defense(DefenseCmd),
    /// Render reports from a finished run directory.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Execute multi-stage experiment plans.
    #[command(subcommand)]
    Plan(PlanCmd),
}

#[derive(Subcommand)]
enum EncoderCmd {
    /// Pre-train the toy contrastive encoder and write a checkpoint.
    Train(EncoderTrain),
}

#[derive(Args)]
struct EncoderTrain {
    /// Dataset spec, e.g. "synthetic:n=2000,classes=10,seed=100" or
    /// "cifar10:<dir>:train".
    #[arg(long)]
    dataset: String,
    /// Image shape as C,H,W.
    #[arg(long, default_value = "3,64,64", value_parser = parse_shape)]
    shape: Shape,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    seed: u64,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Train universal noise against a frozen encoder checkpoint.
    Train(AttackTrain),
}

#[derive(Args)]
struct AttackTrain {
    /// Attack config TOML (mode, epsilon, epochs, ...).
    #[arg(long)]
    config: PathBuf,
    /// Encoder checkpoint directory.
    #[arg(long)]
    encoder: PathBuf,
    /// Surrogate dataset spec the noise trains against.
    #[arg(long)]
    surrogate: String,
    /// Artifact directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Train a linear probe and evaluate one artifact on a held-out set.
    Run(EvalRun),
}

#[derive(Args)]
struct EvalRun {
    /// Artifact directory from `attack train`.
    #[arg(long)]
    artifact: PathBuf,
    /// Encoder checkpoint directory.
    #[arg(long)]
    encoder: PathBuf,
    /// Labeled dataset spec the probe trains on.
    #[arg(long)]
    train: String,
    /// Labeled dataset spec metrics are computed on.
    #[arg(long)]
    test: String,
    #[arg(long, default_value_t = 10)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 100)]
    seed: u64,
    /// Metrics CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DefenseCmd {
    /// Evaluate one defense against one artifact.
    Run(DefenseRun),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DefenseKind {
    Corruption,
    Prune,
    Finetune,
    AdversarialTraining,
}

#[derive(Args)]
struct DefenseRun {
    /// Which defense to apply.
    #[arg(long, value_enum)]
    kind: DefenseKind,
    /// Artifact directory the defense is tested against.
    #[arg(long)]
    artifact: PathBuf,
    /// Encoder checkpoint directory.
    #[arg(long)]
    encoder: PathBuf,
    /// Labeled dataset spec for probe training and fine-tuning.
    #[arg(long)]
    train: String,
    /// Labeled dataset spec metrics are computed on.
    #[arg(long)]
    test: String,
    #[arg(long, default_value_t = 10)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 100)]
    seed: u64,
    /// Metrics CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// corruption: noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// prune: fraction of conv weights to zero.
    #[arg(long)]
    rate: Option<f64>,
    /// finetune / adversarial-training: training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// finetune: encoder body learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// adversarial-training: PGD steps per batch.
    #[arg(long)]
    pgd_steps: Option<usize>,
    /// adversarial-training: PGD radius in [0,1] pixel units.
    #[arg(long)]
    pgd_epsilon: Option<f64>,
    /// adversarial-training: dataset spec to re-pre-train on.
    #[arg(long)]
    pretrain: Option<String>,
    /// adversarial-training: pre-training batch size.
    #[arg(long, default_value_t = 64)]
    pretrain_batch: usize,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Render one report format into a run directory.
    Emit(ReportEmit),
}

#[derive(Args)]
struct ReportEmit {
    /// Run directory produced by `plan run`.
    #[arg(long)]
    run: PathBuf,
    /// csv, markdown_table, or png_curves.
    #[arg(long)]
    format: String,
}

#[derive(Subcommand)]
enum PlanCmd {
    /// Validate and execute a plan file into a fresh directory.
    Run(PlanRun),
}

#[derive(Args)]
struct PlanRun {
    /// Plan TOML file.
    #[arg(long)]
    plan: PathBuf,
    /// Run directory to create (must be absent or empty).
    #[arg(long)]
    out: PathBuf,
    /// Encoder cache directory; defaults to $ADVKIT_CACHE when set.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy)]
struct Shape([usize; 3]);

fn parse_shape(s: &str) -> Result<Shape, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected C,H,W, got {s:?}"));
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("bad dimension {part:?}: {e}"))?;
        if *slot == 0 {
            return Err(format!("zero dimension in {s:?}"));
        }
    }
    Ok(Shape(dims))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Encoder(EncoderCmd::Train(args)) => encoder_train(args),
        Command::Attack(AttackCmd::Train(args)) => attack_train(args),
        Command::Eval(EvalCmd::Run(args)) => eval_run(args),
        Command::Defense(DefenseCmd::Run(args)) => defense_run(args),
        Command::Report(ReportCmd::Emit(args)) => report_emit(args),
        Command::Plan(PlanCmd::Run(args)) => plan_run(args),
    }
}

fn encoder_train(args: EncoderTrain) -> Result<()> {
    let Shape([c, h, w]) = args.shape;
    let dataset = resolve_dataset(&args.dataset, (c, h, w))
        .with_context(|| format!("resolving dataset {:?}", args.dataset))?;
    let encoder = train_toy_encoder(
        &dataset,
        Method::SimclrStyle,
        args.seed,
        args.epochs,
        args.batch_size,
    )?;
    save_encoder(&encoder, &args.out)?;
    println!(
        "trained encoder {} on {} images -> {}",
        encoder.id,
        dataset.len(),
        args.out.display()
    );
    Ok(())
}

fn attack_train(args: AttackTrain) -> Result<()> {
    let config = AttackConfig::from_path(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let encoder = load_encoder(&args.encoder)
        .with_context(|| format!("loading encoder {}", args.encoder.display()))?;
    let [c, h, w] = config.image_shape;
    let surrogate = resolve_dataset(&args.surrogate, (c, h, w))
        .with_context(|| format!("resolving surrogate {:?}", args.surrogate))?;
    let artifact = train_advencoder(&config, &encoder, &surrogate)?;
    save_artifact(&artifact, &args.out)?;
    let last = artifact.loss_trace.last();
    println!(
        "trained {} noise in {} steps (final loss {}) -> {}",
        artifact.mode,
        artifact.loss_trace.len(),
        last.map(|r| r.total.to_string()).unwrap_or_else(|| "n/a".into()),
        args.out.display()
    );
    Ok(())
}

/// Shared loading for eval/defense: encoder, artifact, probe, datasets.
struct EvalSetup {
    encoder: advkit::encoders::EncoderHandle,
    probe: advkit::encoders::DownstreamHead,
    artifact: advkit::attack::NoiseArtifact,
    train_ds: advkit::data::Dataset,
    test_ds: advkit::data::Dataset,
}

fn load_eval_setup(
    encoder_dir: &PathBuf,
    artifact_dir: &PathBuf,
    train: &str,
    test: &str,
    probe_epochs: usize,
    seed: u64,
) -> Result<EvalSetup> {
    let encoder = load_encoder(encoder_dir)
        .with_context(|| format!("loading encoder {}", encoder_dir.display()))?;
    let artifact = load_artifact(artifact_dir)
        .with_context(|| format!("loading artifact {}", artifact_dir.display()))?;
    let (c, h, w) = encoder.input_shape();
    let train_ds = resolve_dataset(train, (c, h, w))
        .with_context(|| format!("resolving train dataset {train:?}"))?;
    let test_ds = resolve_dataset(test, (c, h, w))
        .with_context(|| format!("resolving test dataset {test:?}"))?;
    let probe = train_linear_probe(&encoder, &train_ds, probe_epochs, seed)?;
    Ok(EvalSetup {
        encoder,
        probe,
        artifact,
        train_ds,
        test_ds,
    })
}

fn eval_run(args: EvalRun) -> Result<()> {
    let setup = load_eval_setup(
        &args.encoder,
        &args.artifact,
        &args.train,
        &args.test,
        args.probe_epochs,
        args.seed,
    )?;
    let attack_name = artifact_name(&args.artifact);
    let rows = vec![
        baseline_row(&setup.encoder, &setup.probe, &setup.test_ds, args.seed)?,
        evaluate_artifact(
            &setup.encoder,
            &setup.probe,
            &setup.test_ds,
            &setup.artifact,
            &attack_name,
            "cli",
            args.seed,
        )?,
    ];
    write_csv(&args.out, &rows)?;
    let asr = rows[1].attack_success_rate.unwrap_or(f64::NAN);
    println!(
        "evaluated {attack_name}: clean_acc={} asr={asr} -> {}",
        rows[1].clean_accuracy.unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn defense_run(args: DefenseRun) -> Result<()> {
    let spec = build_defense_spec(&args)?;
    let setup = load_eval_setup(
        &args.encoder,
        &args.artifact,
        &args.train,
        &args.test,
        args.probe_epochs,
        args.seed,
    )?;
    let pretrain_ds = match (&spec, &args.pretrain) {
        (DefenseSpec::AdversarialTraining { .. }, Some(spec_str)) => {
            let (c, h, w) = setup.encoder.input_shape();
            Some(resolve_dataset(spec_str, (c, h, w))?)
        }
        (DefenseSpec::AdversarialTraining { .. }, None) => {
            bail!("--kind adversarial-training requires --pretrain <dataset spec>")
        }
        _ => None,
    };
    let dctx = DefenseContext {
        probe_dataset: &setup.train_ds,
        probe_epochs: args.probe_epochs,
        pretrain: pretrain_ds.as_ref().map(|dataset| PretrainSpec {
            dataset,
            batch_size: args.pretrain_batch,
        }),
        seed: args.seed,
    };
    let attack_name = artifact_name(&args.artifact);
    let rows = vec![
        evaluate_artifact(
            &setup.encoder,
            &setup.probe,
            &setup.test_ds,
            &setup.artifact,
            &attack_name,
            "cli",
            args.seed,
        )?,
        evaluate_defense(
            &setup.encoder,
            &setup.probe,
            &setup.test_ds,
            &spec,
            &attack_name,
            &setup.artifact,
            "cli",
            &dctx,
        )?,
    ];
    write_csv(&args.out, &rows)?;
    println!(
        "defense {}({}) vs {attack_name}: asr {} -> {} ({})",
        spec.kind(),
        spec.param(),
        rows[0].attack_success_rate.unwrap_or(f64::NAN),
        rows[1].attack_success_rate.unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn build_defense_spec(args: &DefenseRun) -> Result<DefenseSpec> {
    let spec = match args.kind {
        DefenseKind::Corruption => DefenseSpec::Corruption {
            sigma: args
                .sigma
                .context("--kind corruption requires --sigma")?,
        },
        DefenseKind::Prune => DefenseSpec::Prune {
            rate: args.rate.context("--kind prune requires --rate")?,
        },
        DefenseKind::Finetune => DefenseSpec::Finetune {
            epochs: args
                .epochs
                .context("--kind finetune requires --epochs")?,
            lr: args.lr.context("--kind finetune requires --lr")?,
        },
        DefenseKind::AdversarialTraining => DefenseSpec::AdversarialTraining {
            pgd_steps: args
                .pgd_steps
                .context("--kind adversarial-training requires --pgd-steps")?,
            pgd_epsilon: args
                .pgd_epsilon
                .context("--kind adversarial-training requires --pgd-epsilon")?,
            epochs: args
                .epochs
                .context("--kind adversarial-training requires --epochs")?,
        },
    };
    spec.validate()?;
    Ok(spec)
}

fn report_emit(args: ReportEmit) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    let written = emit_report(&args.run, format)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    println!("{} file(s) for format {format}", written.len());
    Ok(())
}

fn plan_run(args: PlanRun) -> Result<()> {
    let options = match args.cache {
        Some(dir) => RunOptions {
            cache_dir: Some(dir),
        },
        None => RunOptions::from_env(),
    };
    if options.cache_dir.is_none() && std::env::var_os(CACHE_ENV).is_some() {
        // Set but empty: treat as disabled, which from_env already did.
    }
    let manifest = run_experiment_with(&args.plan, &args.out, &options)?;
    println!(
        "run {} finished in {:.1}s: {} output file(s) -> {}",
        manifest.run_id,
        manifest.duration_seconds,
        manifest.outputs.len(),
        args.out.display()
    );
    Ok(())
}

fn artifact_name(dir: &PathBuf) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string())
}

fn write_csv(path: &PathBuf, rows: &[advkit::config::EvalReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, eval_reports_to_csv(rows))?;
    Ok(())
}
