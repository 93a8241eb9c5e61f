//! Command-line front end for the detection pipeline.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metdetect::case::{load_case, load_cases, save_case};
use metdetect::eval::{binarize, case_metrics, match_lesions, EvalParams};
use metdetect::experiment::{
    self, load_per_case_csv, render_tables, report_from_records, run_experiment, DataSource,
    ExperimentConfig, PerCaseRecord,
};
use metdetect::overlay::write_overlays;
use metdetect::phantom::{generate_dataset, PhantomParams};
use metdetect::registration::{align_case, register_affine, RegistrationOptions};
use metdetect::training::{make_folds, train};
use metdetect::unet::{infer_volume, load_checkpoint, save_checkpoint, Arm, InputConfiguration};
use metdetect::volume::{load_volume, resample, save_volume, Interp};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "metdetect",
    version,
    about = "Dual-time-point computer-aided detection of brain metastases on synthetic MRI phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset tools.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Affine registration between two volumes or within one case.
    Register(RegisterArgs),
    /// Train one arm on one fold of a dataset.
    Train(TrainArgs),
    /// Run inference with a checkpoint over one case.
    Infer(InferArgs),
    /// Lesion-wise evaluation of heat maps against ground truth.
    Evaluate(EvaluateArgs),
    /// Summaries and paired tests over per-case metric CSVs.
    Stats(StatsArgs),
    /// Run the full experiment matrix from a config file or profile.
    Run(RunArgs),
    /// Re-render report tables from a run directory's per-case records.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Generate a seeded dataset of paired-time-point cases.
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        cases: usize,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with phantom parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Named parameter profile when no file is given: default, desk, paper.
        #[arg(long, default_value = "default")]
        profile: String,
        /// Override individual values, e.g. --set dims=[64,64,16]
        #[arg(long = "set")]
        sets: Vec<String>,
    },
}

#[derive(Args)]
struct RegisterArgs {
    /// Fixed volume (pair mode).
    #[arg(long, requires = "moving", conflicts_with = "case")]
    fixed: Option<PathBuf>,
    /// Moving volume (pair mode).
    #[arg(long)]
    moving: Option<PathBuf>,
    /// Case directory: registers prediag ceT1w to diagnosis ceT1w and aligns
    /// all prediag sequences.
    #[arg(long)]
    case: Option<PathBuf>,
    /// Registration options JSON.
    #[arg(long)]
    opts: Option<PathBuf>,
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Output transform JSON.
    #[arg(long)]
    out_transform: Option<PathBuf>,
    /// Optimizer trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Moving volume resampled onto the fixed grid (pair mode).
    #[arg(long)]
    resampled: Option<PathBuf>,
    /// Aligned case output directory (case mode).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON (provides dataset, training and registration
    /// settings).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    arm: String,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Output directory for checkpoint and history.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    case: PathBuf,
    /// Heat-map output volume path (.vol or .nii).
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-slice PNG overlays.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Registration options for aligning dual-arm cases.
    #[arg(long)]
    reg_opts: Option<PathBuf>,
    /// Skip registration even for dual arms (case already aligned).
    #[arg(long, default_value_t = false)]
    aligned: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory with <case_id>.vol heat maps.
    #[arg(long)]
    heatmaps: PathBuf,
    /// Dataset directory with the ground-truth cases.
    #[arg(long)]
    data: PathBuf,
    /// Arm label recorded in the combined CSV.
    #[arg(long)]
    arm: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 6.0)]
    dilation_radius: f64,
    /// 6 or 26.
    #[arg(long, default_value_t = 26)]
    connectivity: u8,
}

#[derive(Args)]
struct StatsArgs {
    /// One or more per-case CSVs (metdetect format).
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Bootstrap seed for confidence intervals.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Build the config from a profile instead: desk or paper.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config value by dotted path, e.g.
    /// --set train.epochs=5 --set evaluation.threshold=0.6
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing per_case.csv (+ provenance sidecar).
    #[arg(long)]
    run_dir: PathBuf,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Applies `key=value` overrides to a JSON tree by dotted path; values parse
/// as JSON when possible and fall back to strings.
fn apply_sets(value: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .with_context(|| format!("override {s:?} is not key=value"))?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut cur = &mut *value;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let last = i + 1 == parts.len();
            if last {
                match cur {
                    serde_json::Value::Object(map) => {
                        map.insert(part.to_string(), parsed.clone());
                    }
                    _ => bail!("cannot set {path}: parent is not an object"),
                }
            } else {
                cur = match cur {
                    serde_json::Value::Object(map) => map
                        .entry(part.to_string())
                        .or_insert_with(|| serde_json::Value::Object(Default::default())),
                    _ => bail!("cannot descend into {part} in {path}"),
                };
            }
        }
    }
    Ok(())
}

fn load_json_with_sets<T: serde::de::DeserializeOwned + serde::Serialize>(
    path: Option<&Path>,
    default: Option<T>,
    sets: &[String],
) -> Result<T> {
    let mut value = match (path, default) {
        (Some(p), _) => serde_json::from_str(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        (None, Some(d)) => serde_json::to_value(d)?,
        (None, None) => bail!("a config file is required"),
    };
    apply_sets(&mut value, sets)?;
    Ok(serde_json::from_value(value)?)
}

fn connectivity_from(v: u8) -> Result<metdetect::volume::Connectivity> {
    match v {
        6 => Ok(metdetect::volume::Connectivity::Six),
        26 => Ok(metdetect::volume::Connectivity::TwentySix),
        _ => bail!("connectivity must be 6 or 26, got {v}"),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom { command } => phantom_cmd(command),
        Command::Register(args) => register_cmd(args),
        Command::Train(args) => train_cmd(args),
        Command::Infer(args) => infer_cmd(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Stats(args) => stats_cmd(args),
        Command::Run(args) => run_cmd(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn phantom_cmd(command: PhantomCommand) -> Result<()> {
    let PhantomCommand::Generate {
        seed,
        cases,
        out,
        params,
        profile,
        sets,
    } = command;
    let default = match profile.as_str() {
        "default" => PhantomParams::default(),
        "desk" => experiment::profiles::desk_phantom(),
        "paper" => PhantomParams {
            dims: [512, 512, 32],
            spacing: [0.5, 0.5, 4.0],
            ..Default::default()
        },
        other => bail!("unknown phantom profile {other:?}"),
    };
    let params: PhantomParams = load_json_with_sets(params.as_deref(), Some(default), &sets)?;
    let dataset = generate_dataset(seed, &params, cases)?;
    std::fs::create_dir_all(&out)?;
    let mut ids = Vec::new();
    for case in &dataset {
        save_case(case, &out.join(&case.id))?;
        ids.push(case.id.clone());
    }
    let manifest = serde_json::json!({
        "seed": seed,
        "cases": ids,
        "params": params,
    });
    std::fs::write(
        out.join("dataset.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {} cases to {}", dataset.len(), out.display());
    Ok(())
}

fn register_cmd(args: RegisterArgs) -> Result<()> {
    let opts: RegistrationOptions = load_json_with_sets(
        args.opts.as_deref(),
        Some(RegistrationOptions::default()),
        &args.sets,
    )?;
    if let Some(case_dir) = &args.case {
        let out = args.out.clone().context("--out is required in case mode")?;
        let case = load_case(case_dir)?;
        let (aligned, xform, trace) = align_case(&case, &opts)?;
        save_case(&aligned, &out)?;
        std::fs::write(
            out.join("transform.json"),
            serde_json::to_string_pretty(&xform)?,
        )?;
        trace.write_csv(&out.join("registration_trace.csv"))?;
        println!("aligned case written to {}", out.display());
        return Ok(());
    }
    let fixed_path = args.fixed.context("--fixed/--moving or --case required")?;
    let moving_path = args.moving.context("--moving required")?;
    let fixed = load_volume(&fixed_path)?;
    let moving = load_volume(&moving_path)?;
    let (xform, trace) = register_affine(&fixed, &moving, &opts)?;
    if let Some(p) = &args.out_transform {
        std::fs::write(p, serde_json::to_string_pretty(&xform)?)?;
    }
    if let Some(p) = &args.trace {
        trace.write_csv(p)?;
    }
    if let Some(p) = &args.resampled {
        let out = resample(&moving, fixed.geometry(), &xform, Interp::CubicBspline)?;
        save_volume(&out, p)?;
    }
    println!(
        "registered in {} iterations; translation = {:?} mm",
        trace.rows.len(),
        xform.translation
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = load_json_with_sets(Some(&args.config), None, &args.sets)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
        cfg.train.seed = seed;
    }
    let arm = Arm::parse(&args.arm)?;
    let input = InputConfiguration::new(arm);
    let cases = match &cfg.data {
        DataSource::PhantomDir { path } => load_cases(path)?,
        DataSource::Generate { cases, params } => {
            generate_dataset(cfg.master_seed, params, *cases)?
        }
    };
    let cases = if input.is_dual() {
        let mut aligned = Vec::with_capacity(cases.len());
        for case in &cases {
            aligned.push(align_case(case, &cfg.registration)?.0);
        }
        aligned
    } else {
        cases
    };
    let split = make_folds(&cases, cfg.train.folds, cfg.master_seed)?;
    let outcome = train(&cases, &input, &cfg.train, &split, args.fold)?;
    std::fs::create_dir_all(&args.out)?;
    let stem = format!("{}_fold{}.ckpt", arm.name().replace('+', "_"), args.fold);
    save_checkpoint(&outcome.net, &args.out.join(stem))?;
    outcome.history.write_csv(&args.out.join("history.csv"))?;
    let last = outcome.history.epochs.last().unwrap();
    println!(
        "trained {} fold {} for {} epochs; final train loss {:.4}",
        arm,
        args.fold,
        outcome.history.epochs.len(),
        last.train_loss
    );
    Ok(())
}

fn infer_cmd(args: InferArgs) -> Result<()> {
    let net = load_checkpoint(&args.checkpoint)?;
    let case = load_case(&args.case)?;
    let case = if net.input.is_dual() && !args.aligned {
        let opts: RegistrationOptions = load_json_with_sets(
            args.reg_opts.as_deref(),
            Some(RegistrationOptions::default()),
            &[],
        )?;
        align_case(&case, &opts)?.0
    } else {
        case
    };
    let heat = infer_volume(&net, &case)?;
    save_volume(&heat, &args.out)?;
    if let Some(png_dir) = &args.png {
        let base = &case.diagnosis[&metdetect::case::SequenceKind::CeT1w];
        let n = write_overlays(base, &heat, Some(&case.gt_mask), png_dir)?;
        println!("wrote {n} overlay slices to {}", png_dir.display());
    }
    println!("heat map written to {}", args.out.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let arm = Arm::parse(&args.arm)?;
    let params = EvalParams {
        threshold: args.threshold,
        dilation_radius_voxels: args.dilation_radius,
        connectivity: connectivity_from(args.connectivity)?,
    };
    let cases = load_cases(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let mut records = Vec::new();
    for case in &cases {
        if !args.heatmaps.join(format!("{}.vol.raw", case.id)).exists() {
            continue;
        }
        let heat = load_volume(&args.heatmaps.join(format!("{}.vol", case.id)))?;
        let pred = binarize(&heat, params.threshold)?;
        let mut m = match_lesions(&pred, &case.gt_mask, &params)?;
        m.case_id = case.id.clone();
        let metrics = case_metrics(&m);
        let detail = serde_json::json!({
            "match": m,
            "metrics": metrics,
        });
        std::fs::write(
            args.out.join(format!("{}.json", case.id)),
            serde_json::to_string_pretty(&detail)?,
        )?;
        records.push(PerCaseRecord {
            arm,
            case_id: case.id.clone(),
            fold: 0,
            tp: m.true_positives,
            fn_: m.false_negatives,
            fp: m.false_positives,
            sensitivity: metrics.sensitivity,
            ppv: metrics.ppv,
            f1: metrics.f1,
        });
    }
    if records.is_empty() {
        bail!(
            "no heat maps matching case ids found in {}",
            args.heatmaps.display()
        );
    }
    experiment::write_per_case_csv(&records, &args.out.join("per_case.csv"))?;
    println!(
        "evaluated {} cases; combined CSV at {}",
        records.len(),
        args.out.join("per_case.csv").display()
    );
    Ok(())
}

fn stats_cmd(args: StatsArgs) -> Result<()> {
    let mut records = Vec::new();
    for input in &args.inputs {
        records.extend(load_per_case_csv(input)?);
    }
    let report = report_from_records(records, args.seed, "stats-cli".into());
    render_tables(&report, &args.out)?;
    println!(
        "summary and test tables for {} arms written to {}",
        report.arms.len(),
        args.out.display()
    );
    Ok(())
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let cfg: ExperimentConfig = if args.config.is_some() {
        load_json_with_sets(args.config.as_deref(), None, &args.sets)?
    } else {
        let profile = args
            .profile
            .as_deref()
            .context("either --config or --profile is required")?;
        let seed = args.seed.unwrap_or(0);
        let cases = args.cases.unwrap_or(20);
        let out = args.out.clone().context("--out is required with --profile")?;
        let base = match profile {
            "desk" => experiment::profiles::desk_config(seed, cases, out),
            "paper" => experiment::profiles::paper_config(seed, cases, out),
            other => bail!("unknown profile {other:?}"),
        };
        load_json_with_sets(None, Some(base), &args.sets)?
    };
    let report = run_experiment(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "experiment finished: {} arms, {} tests; tables in {}",
        report.arms.len(),
        report.tests.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let per_case = args.run_dir.join("per_case.csv");
    let records = load_per_case_csv(&per_case)?;
    let sidecar = args.run_dir.join("per_case.csv.provenance.json");
    let (seed, hash) = if sidecar.exists() {
        let p: experiment::Provenance =
            serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        (p.master_seed, p.config_hash)
    } else {
        (0, "unknown".to_string())
    };
    let report = report_from_records(records, seed, hash);
    let out = args.out.unwrap_or(args.run_dir);
    render_tables(&report, &out)?;
    println!("tables re-rendered to {}", out.display());
    Ok(())
}
