//! `heteroseg`: train, fine-tune, evaluate and apply lesion segmentation
//! models on heterogeneous multi-modal MRI databases.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use heteroseg::config::{FinetuneSection, RunConfig, DATA_ROOT_ENV};
use heteroseg::dataset::{Split, MANIFEST_FILE};
use heteroseg::metrics::MetricsReport;
use heteroseg::models::{Family, Model};
use heteroseg::pipeline::{
    run_evaluate, run_finetune, run_predict, run_train, synthesize, EvaluateRequest,
    PredictRequest, RunResult, SynthRequest,
};
use heteroseg::training::{Control, FinetuneMode, StepInfo};
use heteroseg::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(
    name = "heteroseg",
    version,
    about = "Lesion segmentation across databases with heterogeneous MRI modalities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model jointly on one or more databases.
    Train(TrainArgs),
    /// Fine-tune a pretrained checkpoint on a target database.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on the eval split of manifest databases.
    Evaluate(EvaluateArgs),
    /// Segment one subject from NIfTI images.
    Predict(PredictArgs),
    /// Generate synthetic databases with a manifest.
    Synth(SynthArgs),
}

/// Settings shared by `train` and `finetune`; each overrides the config file.
#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory that manifests and images resolve against.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Manifest file (repeatable), relative to the data root.
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    /// Run directory for checkpoints, logs and reports.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Patch edge length, or `none` to train on whole volumes.
    #[arg(long)]
    patch: Option<String>,
    /// Enable random modality dropping.
    #[arg(long, overrides_with = "no_drop")]
    drop: bool,
    /// Disable random modality dropping.
    #[arg(long)]
    no_drop: bool,
    /// Print progress every this many steps (0 disables).
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Architecture: multi_unet, lf_unet, maf_unet or progressive.
    #[arg(long)]
    family: Option<Family>,
    /// Database to train on (repeatable); all manifest databases by default.
    #[arg(long = "database")]
    databases: Vec<String>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained checkpoint.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target database id.
    #[arg(long)]
    target: Option<String>,
    /// scratch, finetune or progressive.
    #[arg(long)]
    mode: Option<FinetuneMode>,
    /// Number of labelled target cases, or `all`.
    #[arg(long)]
    budget: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV, default_value = ".")]
    data_root: PathBuf,
    /// Manifest file (repeatable), relative to the data root.
    #[arg(long = "manifest", default_value = MANIFEST_FILE)]
    manifests: Vec<PathBuf>,
    /// Database to evaluate (repeatable); all by default.
    #[arg(long = "database")]
    databases: Vec<String>,
    /// Evaluate the training split instead of the eval split.
    #[arg(long)]
    train_split: bool,
    /// Comma-separated modalities to keep; the rest are zero-filled.
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<String>>,
    /// Evaluate every non-empty modality subset.
    #[arg(long)]
    subset_sweep: bool,
    /// Directory for metrics.csv and metrics.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `MODALITY=path.nii.gz` (repeatable).
    #[arg(long = "input", value_parser = parse_input, required = true)]
    inputs: Vec<(String, PathBuf)>,
    #[arg(long)]
    output: PathBuf,
    /// Write lesion probabilities instead of a binary mask.
    #[arg(long)]
    probabilities: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives one folder per database and manifest.toml.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    databases: usize,
    /// Modalities per database: `FLAIR,T1;T1` gives two databases.
    #[arg(long, default_value = "FLAIR,T1,T2")]
    modalities: String,
    /// Cases per database.
    #[arg(long, default_value_t = 8)]
    cases: usize,
    /// Trailing cases per database assigned to the eval split.
    #[arg(long, default_value_t = 2)]
    eval_cases: usize,
    /// Cube edge length in voxels.
    #[arg(long, default_value_t = 32)]
    shape: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synth")]
    prefix: String,
}

fn parse_input(s: &str) -> Result<(String, PathBuf), String> {
    let (m, p) = s
        .split_once('=')
        .ok_or_else(|| format!("expected MODALITY=PATH, got `{s}`"))?;
    Ok((m.to_string(), PathBuf::from(p)))
}

fn load_config(path: Option<&Path>) -> heteroseg::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::MissingFile(p) => {
                Error::Config(format!("config file {} does not exist", p.display()))
            }
            other => other,
        }),
    }
}

fn apply_run_args(cfg: &mut RunConfig, args: &RunArgs) -> heteroseg::Result<()> {
    if !args.manifests.is_empty() {
        cfg.manifests = args.manifests.clone();
    }
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    if let Some(p) = &args.patch {
        cfg.sampler.patch.shape = match p.as_str() {
            "none" => None,
            edge => {
                let e: usize = edge.parse().map_err(|_| {
                    Error::Config(format!(
                        "--patch expects an edge length or `none`, got `{edge}`"
                    ))
                })?;
                Some([e; 3])
            }
        };
    }
    if args.drop {
        cfg.sampler.drop.enabled = true;
    }
    if args.no_drop {
        cfg.sampler.drop.enabled = false;
    }
    Ok(())
}

fn progress(every: usize) -> impl FnMut(&StepInfo, &Model<f32>) -> Control {
    move |info, _| {
        if every > 0 && info.step % every == 0 {
            eprintln!(
                "epoch {:>4}  step {:>6}  loss {:.4}  lr {:.1e}",
                info.epoch, info.step, info.loss, info.lr
            );
        }
        Control::Continue
    }
}

fn print_report(report: &MetricsReport) {
    for (db, agg) in &report.per_database {
        println!(
            "{db}: dice {:.4} sensitivity {:.4} precision {:.4} ({} cases)",
            agg.dice, agg.sensitivity, agg.precision, agg.cases
        );
    }
    let o = &report.overall;
    println!(
        "overall: dice {:.4} sensitivity {:.4} precision {:.4} ({} cases)",
        o.dice, o.sensitivity, o.precision, o.cases
    );
    if let Some(s) = &report.sweep {
        for (db, subsets) in &s.subset_dice {
            for (subset, dice) in subsets {
                println!("{db} [{subset}]: dice {dice:.4}");
            }
        }
        println!("mean dice drop over subsets: {:.4}", s.mean_dice_drop);
    }
}

fn finish_run(result: RunResult) {
    println!(
        "trained {} epochs ({} steps); run directory {}",
        result.summary.epochs_completed,
        result.summary.steps,
        result.dir.display()
    );
    if let Some(r) = &result.report {
        print_report(r);
    }
}

fn cmd_train(args: TrainArgs) -> heteroseg::Result<()> {
    let mut cfg = load_config(args.run.config.as_deref())?;
    apply_run_args(&mut cfg, &args.run)?;
    if let Some(f) = args.family {
        cfg.model.family = f;
    }
    if !args.databases.is_empty() {
        cfg.databases = args.databases;
    }
    if let Some(l) = args.levels {
        cfg.model.backbone.levels = l;
    }
    if let Some(w) = args.base_width {
        cfg.model.backbone.base_width = w;
    }
    let cfg = cfg.resolved(args.run.data_root);
    finish_run(run_train(&cfg, &mut progress(args.run.log_every))?);
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> heteroseg::Result<()> {
    let mut cfg = load_config(args.run.config.as_deref())?;
    apply_run_args(&mut cfg, &args.run)?;
    let budget = match args.budget.as_deref() {
        None => None,
        Some("all") => Some(None),
        Some(b) => Some(Some(b.parse::<usize>().map_err(|_| {
            Error::Config(format!("--budget expects a number or `all`, got `{b}`"))
        })?)),
    };
    let section = match (cfg.finetune.take(), args.source, args.target, args.mode) {
        (Some(mut s), source, target, mode) => {
            s.source = source.unwrap_or(s.source);
            s.target_database = target.unwrap_or(s.target_database);
            s.mode = mode.unwrap_or(s.mode);
            s
        }
        (None, Some(source), Some(target_database), mode) => FinetuneSection {
            source,
            target_database,
            mode: mode.unwrap_or(FinetuneMode::Finetune),
            budget: None,
        },
        (None, _, _, _) => {
            return Err(Error::Config(
                "fine-tuning needs --source and --target or a [finetune] config section".into(),
            ))
        }
    };
    cfg.finetune = Some(FinetuneSection {
        budget: budget.unwrap_or(section.budget),
        ..section
    });
    let cfg = cfg.resolved(args.run.data_root);
    finish_run(run_finetune(&cfg, &mut progress(args.run.log_every))?);
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> heteroseg::Result<()> {
    let req = EvaluateRequest {
        checkpoint: args.checkpoint,
        manifests: args
            .manifests
            .iter()
            .map(|m| args.data_root.join(m))
            .collect(),
        data_root: args.data_root,
        databases: args.databases,
        split: if args.train_split {
            Split::Train
        } else {
            Split::Eval
        },
        modalities: args.modalities,
        subset_sweep: args.subset_sweep,
        load: Default::default(),
        out_dir: args.out,
    };
    print_report(&run_evaluate(&req)?);
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> heteroseg::Result<()> {
    let req = PredictRequest {
        checkpoint: args.checkpoint,
        inputs: args.inputs,
        output: args.output,
        probabilities: args.probabilities,
    };
    let vol = run_predict(&req)?;
    let positive = vol.data.iter().filter(|&&v| v >= 0.5).count();
    println!(
        "wrote {} ({positive} voxels at or above 0.5)",
        req.output.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> heteroseg::Result<()> {
    let req = SynthRequest {
        modalities: SynthRequest::parse_modalities(&args.modalities, args.databases)?,
        out_dir: args.out,
        cases: args.cases,
        eval_cases: args.eval_cases,
        shape: [args.shape; 3],
        seed: args.seed,
        prefix: args.prefix,
    };
    let manifest = synthesize(&req)?;
    for db in &manifest.databases {
        println!(
            "{}: {} cases, modalities {}",
            db.database_id,
            db.cases.len(),
            db.modalities.join(",")
        );
    }
    println!("manifest: {}", req.out_dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Divergence => 4,
        ErrorKind::Other => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
