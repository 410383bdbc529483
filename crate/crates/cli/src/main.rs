use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pcsl_core::ablation::{AblationAxis, AblationRunner};
use pcsl_core::dataset::write_atomic;
use pcsl_core::trainer::config::apply_overrides;
use pcsl_core::trainer::{EpochState, TrainObserver};
use pcsl_core::{evaluate, generate_synthetic, train, Checkpoint, Dataset, SynthSpec, TrainConfig, TrainLog};
use serde::Serialize;

mod output;

use output::{CliError, Staging};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "pcsl", version, about = "Cross-camera soft-label re-identification from intra-camera labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/query/gallery splits.
    Gen(GenArgs),
    /// Train an embedding model.
    Train(TrainArgs),
    /// Score a checkpoint on query/gallery splits.
    Eval(EvalArgs),
    /// Train and compare every setting of one ablation axis.
    Ablate(AblateArgs),
    /// Re-serialize a training log as CSV or JSON.
    ExportMetrics(ExportArgs),
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (must not exist).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train: PathBuf,
    /// Validation query split (requires --gallery).
    #[arg(long, requires = "gallery")]
    query: Option<PathBuf>,
    #[arg(long, requires = "query")]
    gallery: Option<PathBuf>,
    /// Output directory (must not exist).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// Write the result as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// One of: inter_mode, mining_mode, mask_same_camera, positive_sampling,
    /// weighting_mode, lambda_sweep, k_sweep.
    #[arg(long)]
    axis: String,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// Comma-separated training seeds shared by every setting.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct ExportArgs {
    /// A `trainlog.json` written by `train`.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Destination file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
    inputs: Vec<(&'a str, String)>,
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()).into());
    }
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = read_text(path)?;
    Dataset::read_from(text.as_bytes()).with_context(|| format!("loading dataset {}", path.display()))
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(&str, &str)>> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{kv}` is not KEY=VALUE")).into())
        })
        .collect()
}

/// defaults < config file < `--set` < `--seed`.
fn resolve<T>(args: &ConfigArgs) -> Result<T>
where
    T: Default + Serialize + serde::de::DeserializeOwned,
{
    let base: T = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => T::default(),
    };
    let mut merged = apply_overrides(&base, parse_overrides(&args.overrides)?)?;
    if let Some(seed) = args.seed {
        merged = apply_overrides(&merged, [("seed", seed.to_string().as_str())])?;
    }
    Ok(merged)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let spec: SynthSpec = resolve(&args.config)?;
    let splits = generate_synthetic(&spec)?;
    let stage = Staging::new(&args.out)?;
    stage.write("spec.json", to_json(&spec)?)?;
    stage.write("train.txt", splits.train.to_text())?;
    stage.write("query.txt", splits.query.to_text())?;
    stage.write("gallery.txt", splits.gallery.to_text())?;
    stage.write(
        "run.json",
        to_json(&RunInfo {
            version: VERSION,
            command: "gen",
            seed: spec.seed,
            inputs: Vec::new(),
        })?,
    )?;
    stage.commit()?;
    eprintln!(
        "wrote {} train / {} query / {} gallery samples to {}",
        splits.train.len(),
        splits.query.len(),
        splits.gallery.len(),
        args.out.display()
    );
    Ok(())
}

struct CheckpointWriter<'a> {
    stage: &'a Staging,
    every: usize,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn epoch_end(&mut self, state: &EpochState<'_>) -> pcsl_core::Result<()> {
        let r = state.record;
        eprintln!(
            "epoch {:>4} {:<6} intra {:.5} inter {:.5}{}",
            r.epoch,
            format!("{:?}", r.phase).to_lowercase(),
            r.intra_loss,
            r.inter_loss,
            r.val_map.map(|m| format!(" val mAP {m:.4}")).unwrap_or_default()
        );
        if self.every > 0 && r.epoch % self.every == 0 {
            let name = format!("checkpoint-epoch-{:04}.txt", r.epoch);
            self.stage.write(&name, state.checkpoint().to_text()).map_err(|e| {
                pcsl_core::Error::Io(std::io::Error::other(format!("{name}: {e:#}")))
            })?;
        }
        Ok(())
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config: TrainConfig = resolve(&args.config)?;
    config.validate()?;
    let train_ds = load_dataset(&args.train)?;
    let validation = match (&args.query, &args.gallery) {
        (Some(q), Some(g)) => Some((load_dataset(q)?, load_dataset(g)?)),
        _ => None,
    };
    let stage = Staging::new(&args.out)?;
    stage.write("config.json", to_json(&config)?)?;
    let mut inputs = vec![("train", args.train.display().to_string())];
    if let (Some(q), Some(g)) = (&args.query, &args.gallery) {
        inputs.push(("query", q.display().to_string()));
        inputs.push(("gallery", g.display().to_string()));
    }
    stage.write(
        "run.json",
        to_json(&RunInfo {
            version: VERSION,
            command: "train",
            seed: config.seed,
            inputs,
        })?,
    )?;
    let mut observer = CheckpointWriter {
        stage: &stage,
        every: config.checkpoint_every,
    };
    let out = train(
        &train_ds,
        &config,
        validation.as_ref().map(|(q, g)| (q, g)),
        &mut observer,
    )?;
    stage.write("checkpoint.txt", out.checkpoint().to_text())?;
    stage.write("trainlog.json", out.log.to_json()? + "\n")?;
    stage.write("trainlog.csv", out.log.to_csv()?)?;
    if let Some(a) = &out.last_affinity {
        let mut buf = Vec::new();
        a.write_sparse(&mut buf)?;
        stage.write("affinity.txt", buf)?;
    }
    if let Some((q, g)) = &validation {
        let r = evaluate(&out.model, q, g)?;
        stage.write("result.json", to_json(&r)?)?;
        print!("{}", r.to_text());
    }
    stage.commit()?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let text = read_text(&args.checkpoint)?;
    let ckpt = Checkpoint::from_text(&text).with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let query = load_dataset(&args.query)?;
    let gallery = load_dataset(&args.gallery)?;
    let r = evaluate(&ckpt.model, &query, &gallery)?;
    if let Some(path) = &args.out {
        write_atomic(path, to_json(&r)?.as_bytes())?;
    }
    print!("{}", r.to_text());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let axis: AblationAxis = args.axis.parse()?;
    let base: TrainConfig = resolve(&args.config)?;
    base.validate()?;
    if args.seeds.is_empty() {
        bail!(CliError::Config("--seeds is empty".into()));
    }
    let train_ds = load_dataset(&args.train)?;
    let query = load_dataset(&args.query)?;
    let gallery = load_dataset(&args.gallery)?;
    let stage = Staging::new(&args.out)?;
    let report = AblationRunner::new(&train_ds, &query, &gallery).run_axis(&base, axis, &args.seeds)?;
    stage.write("config.json", to_json(&base)?)?;
    stage.write(
        "run.json",
        to_json(&RunInfo {
            version: VERSION,
            command: "ablate",
            seed: base.seed,
            inputs: vec![
                ("axis", axis.as_str().to_string()),
                ("seeds", format!("{:?}", args.seeds)),
                ("train", args.train.display().to_string()),
                ("query", args.query.display().to_string()),
                ("gallery", args.gallery.display().to_string()),
            ],
        })?,
    )?;
    stage.write("table.txt", report.table.to_text())?;
    stage.write("table.json", report.table.to_json()? + "\n")?;
    for (label, seed, log) in &report.logs {
        let safe: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        stage.write(&format!("logs/{safe}_s{seed}.csv"), log.to_csv()?)?;
    }
    stage.commit()?;
    print!("{}", report.table.to_text());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let text = read_text(&args.log)?;
    let log = TrainLog::from_json(&text).with_context(|| format!("loading {}", args.log.display()))?;
    let body = match args.format {
        Format::Csv => log.to_csv()?,
        Format::Json => log.to_json()? + "\n",
    };
    match &args.out {
        Some(path) => write_atomic(path, body.as_bytes())?,
        None => print!("{body}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportMetrics(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = output::classify(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("pcsl: error[{}]: {msg}", kind.tag());
            ExitCode::from(kind.code())
        }
    }
}
