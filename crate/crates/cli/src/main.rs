mod config;
mod preview;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use recdet::audit::{count_params, estimate_flops, millions, RunManifest};
use recdet::decoder::{DecoderConfig, Sharing};
use recdet::numerics::suite::{run_gradient_suite_with, DEFAULT_SUITE_SEED, SUITE_EPS, SUITE_TOLERANCE};
use recdet::numerics::{DType, Scalar};
use recdet::pipeline::data::open_eval_dataset;
use recdet::pipeline::eval::{evaluate_stages, stage_curve_rows, EvalOptions, CONVERGENCE_HEADER, STAGE_CURVE_HEADER};
use recdet::pipeline::train::{checkpoint_dtype, write_csv, FINAL_CHECKPOINT, METRICS_FILE};
use recdet::pipeline::{load_trained, APReport, Backbone, PipelineError, Trainer};
use recdet::posenc::CenternessVariant;

use config::{FileConfig, RunConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "recdet", version, about = "Recursive region-based detector: train, evaluate and audit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes (or COCO JSON) and write metrics and checkpoints.
    Train(TrainArgs),
    /// AP of a checkpoint, optionally truncated to fewer decoding stages.
    Eval(EvalArgs),
    /// Exact parameter and FLOP audit of a decoder configuration.
    Audit(AuditArgs),
    /// Finite-difference check of every learnable operation.
    Gradcheck(GradcheckArgs),
    /// Convergence and stage-truncation curves of a training run.
    Curves(CurvesArgs),
    /// Write synthetic scenes with their ground-truth boxes as PNG files.
    SynthPreview(PreviewArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "RECDET_OUT_DIR", default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutDir,
    /// Continue from a checkpoint written by the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Decoding stages used at inference; defaults to all trained stages.
    #[arg(long)]
    stages: Option<usize>,
    /// Report every depth from 1 to `--stages` and write the curve CSV.
    #[arg(long)]
    sweep: bool,
    /// Evaluation images.
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct AuditArgs {
    /// Configuration file whose decoder section is audited.
    #[arg(long, conflicts_with = "paper_scale")]
    config: Option<PathBuf>,
    /// Full-size decoder: c=256, d=64, N=300, six stages.
    #[arg(long)]
    paper_scale: bool,
    /// cascade, shared_all or first_independent.
    #[arg(long)]
    sharing: Option<Sharing>,
    /// Dyn/Out passes per stage.
    #[arg(long)]
    depth: Option<usize>,
    /// Add the box positional-encoding heads.
    #[arg(long)]
    box_pe: bool,
    /// Add a centerness mask: static, learnable or adjust.
    #[arg(long)]
    centerness: Option<CenternessVariant>,
    /// Proposals used for the FLOP estimate; defaults to the configuration's.
    #[arg(long)]
    proposals: Option<usize>,
    /// Square input extent used for the backbone FLOPs.
    #[arg(long)]
    image_size: Option<usize>,
    /// Also write the parameter table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_SUITE_SEED)]
    seed: u64,
    #[arg(long, default_value_t = SUITE_EPS)]
    eps: f64,
    #[arg(long, default_value_t = SUITE_TOLERANCE)]
    tolerance: f64,
    /// Write the reports as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Evaluation images per point.
    #[arg(long, default_value_t = 200)]
    images: usize,
    /// Where to write the CSVs; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[command(flatten)]
    out: OutDir,
}

/// A failed numerical check; maps to its own exit status.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct NumericalFailure(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Audit(a) => audit(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Curves(a) => curves(a),
        Command::SynthPreview(a) => preview::write_previews(a.count, a.seed, a.size, &a.out.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.is::<NumericalFailure>() || matches!(c.downcast_ref::<PipelineError>(), Some(PipelineError::NonFinite { .. }))
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => FileConfig::load(p)?.resolve(),
        None => Ok(RunConfig::default()),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    match cfg.dtype {
        DType::Float32 => train_as::<f32>(cfg, &a),
        DType::Float64 => train_as::<f64>(cfg, &a),
    }
}

fn train_as<T: Scalar>(cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    let dir = &a.out.out;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::<T>::resume(cfg.train.clone(), ckpt)?,
        None => Trainer::<T>::new(cfg.train.clone())?,
    };
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let manifest = RunManifest::new(&cfg.train, cfg.train.seed, &trainer.params)?;
    std::fs::write(dir.join("manifest.json"), manifest.to_json())?;
    println!(
        "training {} iterations from {} ({} parameters, {}) into {}",
        cfg.train.iterations,
        trainer.iteration,
        trainer.params.num_scalars(),
        T::DTYPE.name(),
        dir.display()
    );
    let every = a.log_every;
    trainer.run(Some(dir), |_, row| {
        if every > 0 && (row.iteration + 1) % every == 0 {
            println!(
                "iter {:>6}  lr {:.2e}  loss {:.4}  t {:.0}s",
                row.iteration + 1,
                row.lr,
                row.total_loss,
                row.wall_seconds
            );
        }
        Ok(())
    })?;
    println!("wrote {} and {}", dir.join(METRICS_FILE).display(), dir.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let reports = match checkpoint_dtype(&a.checkpoint)? {
        DType::Float32 => sweep::<f32>(&a.checkpoint, a.stages, a.images)?,
        DType::Float64 => sweep::<f64>(&a.checkpoint, a.stages, a.images)?,
    };
    if a.sweep {
        for (k, r) in reports.iter().enumerate() {
            print_report(&format!("stages {}", k + 1), r);
        }
        std::fs::create_dir_all(&a.out.out)?;
        let path = a.out.out.join("stage_curve.csv");
        write_csv(&path, &STAGE_CURVE_HEADER, stage_curve_rows(&reports))?;
        println!("wrote {}", path.display());
    } else {
        let r = reports.last().expect("at least one stage");
        print_report(&format!("stages {}", reports.len()), r);
        for (c, ap) in r.per_class.iter().enumerate() {
            match ap {
                Some(ap) => println!("  class {c}: AP {ap:.4}"),
                None => println!("  class {c}: no ground truth"),
            }
        }
    }
    Ok(())
}

/// Reports for depths `1..=stages` of a checkpoint.
fn sweep<T: Scalar>(checkpoint: &Path, stages: Option<usize>, images: usize) -> Result<Vec<APReport>> {
    let m = load_trained::<T>(checkpoint)?;
    let stages = stages.unwrap_or(m.cfg.decoder.n_stages);
    let data = open_eval_dataset(&m.cfg.data, m.cfg.image_size)?;
    let opts = EvalOptions {
        num_images: images,
        ..Default::default()
    };
    Ok(evaluate_stages(&m.model, &m.params, data.as_ref(), stages, &opts)?)
}

fn print_report(label: &str, r: &APReport) {
    println!("{label}: AP {:.4}  AP50 {:.4}  AP75 {:.4}", r.ap, r.ap50, r.ap75);
}

fn audit(a: AuditArgs) -> Result<()> {
    let mut cfg = if a.paper_scale {
        DecoderConfig::paper_scale()
    } else {
        config::decoder_of(a.config.as_deref())?
    };
    if let Some(s) = a.sharing {
        cfg.sharing = s;
    }
    if let Some(d) = a.depth {
        cfg.in_stage_depth = d;
    }
    if a.box_pe {
        cfg.use_box_pe = true;
    }
    if let Some(v) = a.centerness {
        cfg.use_centerness = true;
        cfg.centerness_variant = v;
    }
    cfg.validate()?;
    let audit = count_params(&cfg);
    print!("{}", audit.to_table());
    let n = a.proposals.unwrap_or(cfg.num_proposals);
    let size = a.image_size.unwrap_or(if a.paper_scale { 800 } else { 128 });
    let flops = estimate_flops(&cfg, n, size, Backbone::macs_for(cfg.c, size, size));
    let s = &flops.per_stage;
    println!();
    println!("MACs per stage at N={n} (in-stage depth {}):", cfg.in_stage_depth);
    for (name, v) in [
        ("self_attention", s.self_attention),
        ("dyn", s.dyn_layer),
        ("dynamic_conv", s.dynamic_conv),
        ("out", s.out),
        ("ffn", s.ffn),
        ("stage", s.total()),
    ] {
        println!("  {name:<15} {v:>16}  {:>8}G", giga(v));
    }
    println!("  {:<15} {:>16}  {:>8}G", "decoder", flops.decoder_total, giga(flops.decoder_total));
    println!("  {:<15} {:>16}  {:>8}G  ({size}x{size} input)", "backbone", flops.backbone, giga(flops.backbone));
    println!(
        "decoder parameters: {} ({}M) under {}",
        audit.decoder_total,
        millions(audit.decoder_total),
        audit.policy
    );
    if let Some(path) = a.csv {
        std::fs::write(&path, audit.to_csv()).with_context(|| format!("cannot write {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn giga(n: u64) -> String {
    format!("{:.2}", n as f64 / 1e9)
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = run_gradient_suite_with(a.seed, a.eps, a.tolerance);
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        let note = r.failure.as_deref().unwrap_or("");
        println!("{status:<4} {:<32} max rel error {:.3e} {note}", r.op_name, r.max_rel_error);
    }
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&reports)?;
        std::fs::write(path, json).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op_name.as_str()).collect();
    println!("{} of {} checks passed (seed {})", reports.len() - failed.len(), reports.len(), a.seed);
    if !failed.is_empty() {
        return Err(NumericalFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

fn curves(a: CurvesArgs) -> Result<()> {
    let final_ckpt = a.run.join(FINAL_CHECKPOINT);
    if !final_ckpt.exists() {
        bail!("{} has no {FINAL_CHECKPOINT}", a.run.display());
    }
    let mut points: Vec<(usize, PathBuf)> = std::fs::read_dir(&a.run)
        .with_context(|| format!("cannot list {}", a.run.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let it = stem.strip_prefix("checkpoint_")?.parse().ok()?;
            (p.extension()? == "ckpt").then_some((it, p))
        })
        .collect();
    points.sort();
    let out = a.out.unwrap_or_else(|| a.run.clone());
    std::fs::create_dir_all(&out)?;
    let dtype = checkpoint_dtype(&final_ckpt)?;
    let run = |p: &Path, stages: Option<usize>| match dtype {
        DType::Float32 => sweep::<f32>(p, stages, a.images),
        DType::Float64 => sweep::<f64>(p, stages, a.images),
    };
    let stage_reports = run(&final_ckpt, None)?;
    let final_iteration = match dtype {
        DType::Float32 => load_trained::<f32>(&final_ckpt)?.iteration,
        DType::Float64 => load_trained::<f64>(&final_ckpt)?.iteration,
    };
    let mut convergence = Vec::new();
    for (it, p) in &points {
        let ap = run(p, None)?.last().expect("at least one stage").ap;
        println!("iteration {it:>6}: AP {ap:.4}");
        convergence.push(vec![it.to_string(), ap.to_string()]);
    }
    let final_ap = stage_reports.last().expect("at least one stage").ap;
    println!("iteration {final_iteration:>6}: AP {final_ap:.4}");
    convergence.push(vec![final_iteration.to_string(), final_ap.to_string()]);
    for (k, r) in stage_reports.iter().enumerate() {
        print_report(&format!("stages {}", k + 1), r);
    }
    let conv_path = out.join("convergence.csv");
    let stage_path = out.join("stage_curve.csv");
    write_csv(&conv_path, &CONVERGENCE_HEADER, convergence)?;
    write_csv(&stage_path, &STAGE_CURVE_HEADER, stage_curve_rows(&stage_reports))?;
    println!("wrote {} and {}", conv_path.display(), stage_path.display());
    Ok(())
}
