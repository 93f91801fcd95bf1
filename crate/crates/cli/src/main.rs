use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use moe_health::checkpoint::Checkpoint;
use moe_health::data::{
    self, file_digest, load_dataset, split, write_atomic, write_dataset, DatasetHeader,
    GeneratorConfig, SplitSpec,
};
use moe_health::encoders::ModalityKind;
use moe_health::gradcheck::{gradcheck, GradcheckConfig};
use moe_health::trainer::{self, evaluate, AblationMode, TrainConfig};

mod ablate;

/// Exit status for filesystem failures.
const EXIT_IO: u8 = 3;
/// Exit status for invalid configuration or data.
const EXIT_INVALID: u8 = 4;
/// Exit status when a gradient check runs but fails.
const EXIT_CHECK_FAILED: u8 = 5;

#[derive(Parser)]
#[command(name = "moe-health", version, about = "Mixture-of-experts fusion of incomplete multimodal records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and print its summary.
    Generate(GenerateArgs),
    /// Split, pretrain, train and evaluate one configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Train every ablation under the same seeds and tabulate AUROC.
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON file with a `generator` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// JSON file with optional `split` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Seeds both the split and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<AblationMode>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which part of the dataset to score, using the split stored with the
    /// checkpoint: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// First seed; seeds `seed .. seed + seeds` are run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Optional sections of a `--config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    generator: Option<GeneratorConfig>,
    split: Option<SplitSpec>,
    train: Option<TrainConfig>,
}

fn read_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| moe_health::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        moe_health::Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        }
        .into()
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| moe_health::Error::io(dir, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn tool_meta(command: &str) -> Value {
    json!({
        "tool": "moe-health",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
    })
}

fn run_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let mut cfg = read_config(args.config.as_deref())?.generator.unwrap_or_default();
    if let Some(n) = args.n {
        cfg.n_samples = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    tracing::info!(n = cfg.n_samples, seed = cfg.seed, "generating");
    let samples = data::generate(&cfg)?;
    let mut header = DatasetHeader::new(cfg.dims);
    header.meta = json!({ "run": tool_meta("generate"), "generator": cfg });
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_dataset(&args.out, &header, &samples)?;

    let n = samples.len() as f64;
    let counts = data::combination_counts(&samples);
    let missing = |m: ModalityKind| samples.iter().filter(|s| !s.has(m)).count() as f64 / n;
    let fractions: BTreeMap<&String, f64> = counts.iter().map(|(k, &c)| (k, c as f64 / n)).collect();
    let summary = json!({
        "meta": header.meta,
        "path": args.out,
        "digest": file_digest(&args.out)?,
        "n_samples": samples.len(),
        "positive_rate": data::positive_rate(&samples),
        "combination_counts": counts,
        "combination_fractions": fractions,
        "missing_text_fraction": missing(ModalityKind::Text),
        "missing_image_fraction": missing(ModalityKind::Image),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Dataset, split and training configuration resolved from files and flags.
struct Prepared {
    dataset: data::Dataset,
    digest: String,
    split_spec: SplitSpec,
    train: TrainConfig,
}

fn prepare(flags: &TrainFlags) -> anyhow::Result<Prepared> {
    let run = read_config(flags.config.as_deref())?;
    let mut train = run.train.unwrap_or_default();
    if let Some(alpha) = flags.alpha {
        train.alpha = alpha;
    }
    if let Some(k) = flags.topk {
        train.k = k;
    }
    if let Some(e) = flags.epochs {
        train.max_epochs = e;
    }
    if let Some(p) = flags.patience {
        train.patience = p;
    }
    let split_spec = run.split.unwrap_or_default();
    split_spec.validate()?;
    let dataset = load_dataset(&flags.data)?;
    let digest = file_digest(&flags.data)?;
    create_dir(&flags.out)?;
    Ok(Prepared {
        dataset,
        digest,
        split_spec,
        train,
    })
}

/// Trains one configuration and returns the report with provenance.
fn train_one(prep: &Prepared, train: &TrainConfig, command: &str) -> anyhow::Result<(Value, Checkpoint)> {
    train.validate()?;
    let spec = SplitSpec {
        seed: train.seed,
        ..prep.split_spec
    };
    let splits = split(&prep.dataset.samples, &spec)?;
    let outcome = trainer::train(&splits, prep.dataset.header.dims, train)?;
    let meta = json!({
        "run": tool_meta(command),
        "dataset_digest": prep.digest,
        "seed": train.seed,
        "ablation": train.ablation,
        "split": spec,
        "train": train,
    });
    let mut checkpoint = outcome.checkpoint;
    checkpoint.meta = meta.clone();
    let report = json!({ "meta": meta, "report": outcome.report });
    Ok((report, checkpoint))
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut prep = prepare(&args.flags)?;
    if let Some(seed) = args.seed {
        prep.train.seed = seed;
    }
    if let Some(mode) = args.ablation {
        prep.train.ablation = mode;
    }
    let train = prep.train;
    let (report, checkpoint) = train_one(&prep, &train, "train")?;
    let out = &args.flags.out;
    checkpoint.save(&out.join("checkpoint.json"))?;
    write_json(&out.join("report.json"), &report)?;
    let metrics = json!({ "meta": report["meta"], "test": report["report"]["test"] });
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    if dataset.header.dims != checkpoint.dims {
        return Err(moe_health::Error::Config(format!(
            "dataset dimensions {:?} do not match checkpoint {:?}",
            dataset.header.dims, checkpoint.dims
        ))
        .into());
    }
    let samples = if args.split == "all" {
        dataset.samples
    } else {
        let spec: SplitSpec = serde_json::from_value(checkpoint.meta["split"].clone())
            .unwrap_or(SplitSpec {
                seed: checkpoint.config.seed,
                ..SplitSpec::default()
            });
        let parts = split(&dataset.samples, &spec)?;
        match args.split.as_str() {
            "train" => parts.train,
            "val" => parts.val,
            "test" => parts.test,
            other => {
                return Err(moe_health::Error::Config(format!(
                    "unknown split `{other}`; expected train, val, test or all"
                ))
                .into())
            }
        }
    };
    let report = evaluate(&checkpoint, &samples)?;
    let doc = json!({
        "meta": {
            "run": tool_meta("evaluate"),
            "dataset_digest": file_digest(&args.data)?,
            "checkpoint_digest": file_digest(&args.checkpoint)?,
            "split": args.split,
        },
        "metrics": report,
    });
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("evaluation.json"), &doc)?;
    }
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let cfg = GradcheckConfig {
        seed: args.seed.unwrap_or(0),
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg)?;
    let doc = json!({ "meta": { "run": tool_meta("gradcheck"), "config": cfg }, "report": report });
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &doc)?;
    }
    println!("{}", serde_json::to_string_pretty(&doc)?);
    println!(
        "gradcheck {}: max relative error {:.3e} at {}[{}] (tolerance {:.0e})",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_relative_error,
        report.worst_parameter,
        report.worst_index,
        report.tolerance
    );
    Ok(report.passed)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<moe_health::Error>() {
            return if e.is_io() { EXIT_IO } else { EXIT_INVALID };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => run_generate(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Evaluate(a) => run_evaluate(a).map(|_| true),
        Command::Ablate(a) => ablate::run(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
