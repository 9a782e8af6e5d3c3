use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bicnet::harness::{
    ablate, dump_attention, evaluate, expected_probe_factor, generate_synthetic, grad_check, load_any_checkpoint,
    load_dataset, save_checkpoint, train_from, zero_probe, AnyCheckpoint, Checkpoint, Dataset, GradCheckConfig,
    SyntheticSpec, TrainConfig,
};
use bicnet::numerics::{Scalar, ScalarKind};
use bicnet::relation::RegionSequence;
use bicnet::{BiCNet, Dims, Parallelism, SrtVariant};

#[derive(Parser)]
#[command(
    name = "bicnet",
    version,
    about = "Bi-branch text-video retrieval over precomputed features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset (manifest plus feature blobs).
    Synth(SynthArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print retrieval metrics.
    Eval(EvalArgs),
    /// Train every SRT variant from one seed and print a comparison table.
    Ablate(AblateArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the attention weights of one item as blobs.
    DumpAttention(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    test_pairs: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    captions_per_video: usize,
    #[arg(long, default_value_t = 4)]
    min_tokens: usize,
    #[arg(long, default_value_t = 8)]
    max_tokens: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 5)]
    proposals: usize,
    #[arg(long, default_value_t = 40)]
    region_dim: usize,
    #[arg(long, default_value_t = 32)]
    appearance_dim: usize,
    #[arg(long, default_value_t = 24)]
    motion_dim: usize,
    #[arg(long, default_value_t = 48)]
    token_dim: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Train only on items with this split tag.
    #[arg(long)]
    split: Option<String>,
    /// Print the loss every this many steps (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only items with this split tag; every item when omitted.
    #[arg(long)]
    split: Option<String>,
    /// Override the checkpoint's fusion weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    train_split: Option<String>,
    /// Split to evaluate on; the training items when omitted.
    #[arg(long)]
    eval_split: Option<String>,
    /// Instead of training, run the zero-weight probe on the first item.
    #[arg(long)]
    probe: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Restrict the check to one variant.
    #[arg(long)]
    variant: Option<SrtVariant>,
    /// Perturb the analytic gradient of this parameter group.
    #[arg(long, hide = true)]
    corrupt_group: Option<String>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Video id, or its position in the manifest.
    #[arg(long)]
    item: String,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn load_split(path: &Path, split: Option<&str>) -> Result<Dataset> {
    let data = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(match split {
        Some(tag) => data.split(tag),
        None => data,
    })
}

fn print_records(metrics: &bicnet::retrieval::BidirectionalMetrics) {
    print!("{metrics}");
}

fn run_train<S: Scalar>(cfg: &TrainConfig, data: &Dataset, out: &Path, log_every: usize) -> Result<()> {
    let (model, store) = BiCNet::build::<S>(cfg.model_spec(data.dims), cfg.variant, cfg.seed)?;
    let outcome = train_from(cfg, data, model, store, |rec, _| {
        if log_every > 0 && rec.step % log_every == 0 {
            eprintln!("step={} epoch={} loss={:.6}", rec.step, rec.epoch, rec.loss);
        }
        ControlFlow::Continue(())
    })?;
    save_checkpoint(&outcome.checkpoint, out)?;
    if let Some(loss) = outcome.final_epoch_loss() {
        println!("final_epoch_loss={loss:.6}");
    }
    println!("steps={}", outcome.checkpoint.step);
    println!("checkpoint={}", out.display());
    Ok(())
}

fn run_eval<S: Scalar>(ckpt: &Checkpoint<S>, data: &Dataset, lambda: Option<f64>, mode: Parallelism) -> Result<()> {
    print_records(&evaluate(ckpt, data, lambda, mode)?);
    Ok(())
}

fn run_ablate<S: Scalar>(cfg: &TrainConfig, train_data: &Dataset, eval_data: &Dataset) -> Result<()> {
    let table = ablate::<S>(cfg, train_data, eval_data)?;
    print!("{table}");
    Ok(())
}

fn run_probe<S: Scalar>(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    let Some(first) = data.videos.first() else {
        bail!("the probe needs at least one item");
    };
    let regions = RegionSequence::with_counts(first.regions.tensor().cast::<S>(), first.regions.counts().to_vec())?;
    for row in zero_probe(cfg, data.dims, &regions)? {
        println!(
            "{:<18} factor={:.6} expected={}",
            row.variant.name(),
            row.factor(),
            expected_probe_factor(row.variant, cfg.layers)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                pairs: a.pairs,
                test_pairs: a.test_pairs,
                latent_dim: a.latent_dim,
                noise_scale: a.noise,
                dims: Dims {
                    frames: a.frames,
                    proposals: a.proposals,
                    region_dim: a.region_dim,
                    appearance_dim: a.appearance_dim,
                    motion_dim: a.motion_dim,
                    token_dim: a.token_dim,
                },
                seed: a.seed,
                captions_per_video: a.captions_per_video,
                min_tokens: a.min_tokens,
                max_tokens: a.max_tokens,
            };
            let manifest = generate_synthetic(&spec, &a.out)?;
            println!("manifest={}", manifest.display());
        }
        Command::Train(a) => {
            let cfg = load_config(a.config.as_deref())?;
            let data = load_split(&a.data, a.split.as_deref())?;
            match cfg.scalar_kind {
                ScalarKind::Training32 => run_train::<f32>(&cfg, &data, &a.out, a.log_every)?,
                ScalarKind::Verification64 => run_train::<f64>(&cfg, &data, &a.out, a.log_every)?,
            }
        }
        Command::Eval(a) => {
            let data = load_split(&a.data, a.split.as_deref())?;
            let mode = Parallelism::from_flag(!a.sequential);
            let ckpt = load_any_checkpoint(&a.checkpoint)
                .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
            match ckpt {
                AnyCheckpoint::Training32(c) => run_eval(&c, &data, a.lambda, mode)?,
                AnyCheckpoint::Verification64(c) => run_eval(&c, &data, a.lambda, mode)?,
            }
        }
        Command::Ablate(a) => {
            let cfg = load_config(a.config.as_deref())?;
            let train_data = load_split(&a.data, a.train_split.as_deref())?;
            if a.probe {
                match cfg.scalar_kind {
                    ScalarKind::Training32 => run_probe::<f32>(&cfg, &train_data)?,
                    ScalarKind::Verification64 => run_probe::<f64>(&cfg, &train_data)?,
                }
                return Ok(ExitCode::SUCCESS);
            }
            let eval_data = match a.eval_split.as_deref() {
                Some(_) => load_split(&a.data, a.eval_split.as_deref())?,
                None => train_data.clone(),
            };
            match cfg.scalar_kind {
                ScalarKind::Training32 => run_ablate::<f32>(&cfg, &train_data, &eval_data)?,
                ScalarKind::Verification64 => run_ablate::<f64>(&cfg, &train_data, &eval_data)?,
            }
        }
        Command::Gradcheck(a) => {
            let mut cfg = GradCheckConfig {
                seed: a.seed,
                corrupt_group: a.corrupt_group,
                ..GradCheckConfig::default()
            };
            if let Some(v) = a.variant {
                cfg.variants = vec![v];
            }
            let report = grad_check(&cfg)?;
            print!("{report}");
            let failures = report.failures();
            if !failures.is_empty() {
                for (variant, group) in failures {
                    eprintln!(
                        "gradient check failed: {variant} {} (max relative error {:.3e})",
                        group.group, group.max_rel_error
                    );
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpAttention(a) => {
            let data = load_split(&a.data, None)?;
            let written = match load_any_checkpoint(&a.checkpoint)? {
                AnyCheckpoint::Training32(c) => dump_attention(&c, &data, &a.item, &a.out)?,
                AnyCheckpoint::Verification64(c) => dump_attention(&c, &data, &a.item, &a.out)?,
            };
            for path in written {
                println!("{}", path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
