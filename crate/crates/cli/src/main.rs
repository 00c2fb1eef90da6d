use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use maskaudit::auditors::{
    read_predictions, refine_loop, run_auditor, write_predictions, CommandRegenerator,
    RefineOptions,
};
use maskaudit::dataset::{
    build_benchmark, eval_samples, load_instances, read_manifest, verify_manifest, BuildConfig,
    BuildProtocol, GenerationConfig, Manifest, MANIFEST_FILE,
};
use maskaudit::metrics::{evaluate, EvalOptions, PrecisionMode, Protocol};
use maskaudit::perturb::{IoUTarget, LabelRules, MergeThresholds, DEFAULT_MAX_NEGATIVES};
use maskaudit::{
    Auditor, ConstantAuditor, ConstantPolicy, NoiseParams, NoisyOracle, OracleAuditor,
};

const EXIT_VIOLATIONS: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(
    name = "maskaudit",
    version,
    about = "Build, verify and score mask-quality audit benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate labelled candidate masks and a manifest from an instances file.
    Build(BuildArgs),
    /// Re-read a built benchmark and check every label and count.
    Verify {
        /// Manifest file or the directory holding it.
        manifest: PathBuf,
        /// Also write the report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a predictions file against a manifest.
    Evaluate(EvaluateArgs),
    /// Run a built-in auditor over a manifest and write its predictions.
    Baseline(BaselineArgs),
    /// Regenerate masks the predictions flag and report J/F before and after.
    Refine(RefineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Image,
    Video,
    Both,
}

#[derive(clap::Args)]
struct BuildArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "image")]
    protocol: ProtocolArg,
    /// Worker threads (0 = one per core). Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Hard IoU interval `lo,hi` (half-open).
    #[arg(long, value_parser = parse_pair)]
    hard_range: Option<(f64, f64)>,
    /// Medium IoU interval `lo,hi` (half-open).
    #[arg(long, value_parser = parse_pair)]
    medium_range: Option<(f64, f64)>,
    /// Merge action thresholds `minor,major`.
    #[arg(long, value_parser = parse_pair)]
    merge_thresholds: Option<(f64, f64)>,
    #[arg(long, default_value_t = DEFAULT_MAX_NEGATIVES)]
    max_neg: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalProtocol {
    Image,
    Video,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    manifest: PathBuf,
    predictions: PathBuf,
    #[arg(long, value_enum, default_value = "image")]
    protocol: EvalProtocol,
    /// Per-column precision over the column instead of the whole split.
    #[arg(long)]
    subset_precision: bool,
    /// Score recovered parses as failed.
    #[arg(long)]
    strict_parse: bool,
    /// Directory for report_<protocol>.{json,md}; defaults to the predictions file's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Oracle,
    Noisy,
    Accept,
    Reject,
}

#[derive(clap::Args)]
struct BaselineArgs {
    manifest: PathBuf,
    #[arg(long, value_enum)]
    kind: BaselineKind,
    #[arg(long, default_value_t = 0.0)]
    iou_sigma: f64,
    /// Sets both the type and the action flip probability.
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long)]
    type_flip_prob: Option<f64>,
    #[arg(long)]
    action_flip_prob: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReauditKind {
    Oracle,
}

#[derive(clap::Args)]
struct RefineArgs {
    manifest: PathBuf,
    predictions: PathBuf,
    /// Shell command; receives a JSON request on stdin, prints a mask path.
    #[arg(long)]
    regen_cmd: String,
    #[arg(long, default_value_t = 1)]
    iterations: usize,
    /// Also regenerate samples predicted as reject.
    #[arg(long)]
    trigger_reject: bool,
    /// Auditor for regenerated masks; required when iterations > 1.
    #[arg(long, value_enum)]
    reaudit: Option<ReauditKind>,
    /// Output directory; defaults to `refined/` beside the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated numbers, got '{s}'"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}"));
    Ok((num(a)?, num(b)?))
}

fn manifest_location(p: &Path) -> (PathBuf, PathBuf) {
    let file = if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    (file, root)
}

fn load(p: &Path) -> Result<(Manifest, PathBuf)> {
    let (file, root) = manifest_location(p);
    let manifest = read_manifest(&file)?;
    Ok((manifest, root))
}

fn cmd_build(args: BuildArgs) -> Result<ExitCode> {
    let mut rules = LabelRules::default();
    if let Some((lo, hi)) = args.hard_range {
        rules.hard = IoUTarget::new(lo, hi)?;
    }
    if let Some((lo, hi)) = args.medium_range {
        rules.medium = IoUTarget::new(lo, hi)?;
    }
    if let Some((minor, major)) = args.merge_thresholds {
        rules.merge = MergeThresholds { minor, major };
    }
    rules.validate()?;
    let protocol = match args.protocol {
        ProtocolArg::Image => BuildProtocol::Image,
        ProtocolArg::Video => BuildProtocol::Video,
        ProtocolArg::Both => BuildProtocol::Both,
    };
    let (instances, base) = load_instances(&args.instances)?;
    let config = BuildConfig {
        generation: GenerationConfig {
            protocol,
            rules,
            max_negatives: args.max_neg,
        },
        global_seed: args.seed,
        out_dir: args.out,
        jobs: args.jobs,
    };
    let manifest = build_benchmark(&instances, &base, &config)?;
    print!("{}", manifest.composition.to_table());
    println!(
        "{} instances, {} samples, {} generation failures",
        manifest.instances.len(),
        manifest.samples.len(),
        manifest.failures.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(manifest: &Path, report: Option<PathBuf>) -> Result<ExitCode> {
    let (m, root) = load(manifest)?;
    let r = verify_manifest(&m, &root);
    print!("{}", r.composition.to_table());
    for row in &r.composition.rows {
        println!("{}", row.table_row());
    }
    for v in &r.violations {
        println!(
            "violation {:?} {}: {}",
            v.kind,
            v.sample_id.as_deref().unwrap_or("-"),
            v.detail
        );
    }
    println!(
        "{} samples checked, {} violations",
        r.samples_checked,
        r.violations.len()
    );
    if let Some(path) = report {
        write_file(&path, &serde_json::to_string_pretty(&r)?)?;
    }
    Ok(if r.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VIOLATIONS)
    })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let (m, _) = load(&args.manifest)?;
    let (preds, stats) = read_predictions(&args.predictions)?;
    if stats.unattributed > 0 {
        tracing::warn!(
            lines = stats.unattributed,
            "prediction lines without a sample id were skipped"
        );
    }
    let protocol = match args.protocol {
        EvalProtocol::Image => Protocol::ImageBased,
        EvalProtocol::Video => Protocol::VideoBased,
    };
    let options = EvalOptions {
        precision: if args.subset_precision {
            PrecisionMode::Subset
        } else {
            PrecisionMode::Global
        },
        strict_parse: args.strict_parse,
    };
    let samples = eval_samples(&m, &preds, protocol, args.strict_parse)?;
    let report = evaluate(protocol, &samples, options)?;
    let out = match args.out {
        Some(d) => d,
        None => args
            .predictions
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let stem = match protocol {
        Protocol::ImageBased => "report_image",
        Protocol::VideoBased => "report_video",
    };
    let md = report.to_markdown();
    write_file(&out.join(format!("{stem}.json")), &report.to_json())?;
    write_file(&out.join(format!("{stem}.md")), &md)?;
    print!("{md}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_baseline(args: BaselineArgs) -> Result<ExitCode> {
    let (m, _) = load(&args.manifest)?;
    let auditor: Box<dyn Auditor> = match args.kind {
        BaselineKind::Oracle => Box::new(OracleAuditor),
        BaselineKind::Accept => Box::new(ConstantAuditor(ConstantPolicy::AlwaysAccept)),
        BaselineKind::Reject => Box::new(ConstantAuditor(ConstantPolicy::AlwaysReject)),
        BaselineKind::Noisy => {
            let flip = args.flip_prob.unwrap_or(0.0);
            let noise = NoiseParams {
                iou_sigma: args.iou_sigma,
                type_flip_prob: args.type_flip_prob.unwrap_or(flip),
                action_flip_prob: args.action_flip_prob.unwrap_or(flip),
            };
            Box::new(NoisyOracle::new(noise, args.seed)?)
        }
    };
    let preds = run_auditor(auditor.as_ref(), &m)?;
    write_predictions(&args.out, &preds)?;
    println!(
        "{} predictions written to {}",
        preds.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_refine(args: RefineArgs) -> Result<ExitCode> {
    let (m, root) = load(&args.manifest)?;
    let (preds, _) = read_predictions(&args.predictions)?;
    if args.iterations > 1 && args.reaudit.is_none() {
        bail!("--iterations {} needs --reaudit", args.iterations);
    }
    let reauditor: Option<&dyn Auditor> = args
        .reaudit
        .map(|ReauditKind::Oracle| &OracleAuditor as &dyn Auditor);
    let regen = CommandRegenerator {
        command: args.regen_cmd,
        root: root.clone(),
    };
    let options = RefineOptions {
        trigger_on_reject: args.trigger_reject,
        iterations: args.iterations,
    };
    let outcome = refine_loop(&m, &root, &preds, &regen, options, reauditor)?;
    let out = args.out.unwrap_or_else(|| root.join("refined"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    outcome.write_masks(&m, &out)?;
    let md = outcome.report.to_markdown();
    write_file(
        &out.join("refine_report.json"),
        &serde_json::to_string_pretty(&outcome.report)?,
    )?;
    write_file(&out.join("refine_report.md"), &md)?;
    print!("{md}");
    Ok(ExitCode::SUCCESS)
}

fn init_logging() {
    let filter =
        EnvFilter::try_from_env("MASKAUDIT_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Build(a) => cmd_build(a),
        Cmd::Verify { manifest, report } => cmd_verify(&manifest, report),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Baseline(a) => cmd_baseline(a),
        Cmd::Refine(a) => cmd_refine(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            tracing::error!(error = %format!("{e:#}"), "command failed");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
