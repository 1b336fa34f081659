//! `hcvt`: synthetic data, cross-validated training, evaluation, ablation,
//! paired comparison and saliency maps.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hcvt_core::dataio::{generate_synthetic, Dataset, SynthOptions};
use hcvt_core::explain::{self, Heatmap, Sidecar};
use hcvt_core::model::load_checkpoint;
use hcvt_core::training::{
    compare_runs, evaluate, load_report, run_cv, Cohort, Comparison, FoldSplit, RunReport,
};
use hcvt_core::ndarray::Array2;
use hcvt_core::{HcvtError, Sequence, Variant};

use crate::config::{resolve, ConfigFile, Resolved};

#[derive(Parser, Debug)]
#[command(name = "hcvt", version, about = "Multi-sequence volume + clinical data classifier")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort with a planted lesion signal.
    Synth(SynthArgs),
    /// Cross-validate one model variant.
    Train(TrainArgs),
    /// Score a fold checkpoint on one split of its fold.
    Eval(EvalArgs),
    /// Cross-validate several variants on one fold plan and compare each to `full`.
    Ablate(AblateArgs),
    /// Paired t-test of per-fold test AUCs of two runs.
    Compare(CompareArgs),
    /// Render CNN activation and ViT attention maps for one slice.
    Cam(CamArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of patients (at least 10).
    #[arg(long)]
    n: usize,
    /// Share of positive patients.
    #[arg(long, default_value_t = 0.62)]
    prevalence: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// 64x64 slices, 8 to 24 per sequence.
    #[arg(long)]
    tiny: bool,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset directory written by `hcvt synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON file with optional keys profile, data, out, folds, model, train.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of cross-validation folds [default: 5].
    #[arg(long)]
    folds: Option<usize>,
    /// Seed for the fold plan, initialization and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Desk-scale profile: 64x64 input, depth 8, two ViT blocks, short schedule.
    #[arg(long)]
    tiny: bool,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Model variant (full, no_local_gam, no_global_gam, no_gam, single_branch,
    /// conditional_single_branch, mri_only).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated variants [default: all]; `full` is always included.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Vec<Variant>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Fold checkpoint, e.g. runs/full/fold0/ckpt.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fold split [default: split.json next to the checkpoint].
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Which patients of the split to score.
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// Also write predictions and metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Run directory to test; the comparison is recorded in its report.json.
    #[arg(long)]
    run: PathBuf,
    /// Baseline run directory; must share the fold plan.
    #[arg(long)]
    baseline: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MapMethod {
    Cnn,
    Vit,
    Both,
}

#[derive(Args, Debug)]
struct CamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Patient id, e.g. P0003.
    #[arg(long)]
    patient: String,
    /// adc, t2 or dwi.
    #[arg(long, value_parser = parse_sequence)]
    sequence: Sequence,
    /// Slice index after depth resampling.
    #[arg(long)]
    slice: usize,
    #[arg(long, value_enum, default_value_t = MapMethod::Both)]
    method: MapMethod,
    /// Compose blocks 1 and 2 by attention rollout for the ViT map.
    #[arg(long)]
    rollout: bool,
    /// Clinical normalization source [default: split.json next to the checkpoint].
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Output directory for the PNG and JSON files.
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: HcvtError| e.to_string())
}

fn parse_sequence(s: &str) -> Result<Sequence, String> {
    s.parse().map_err(|e: HcvtError| e.to_string())
}

/// Exit status with a message for stderr.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<HcvtError> for Failure {
    fn from(e: HcvtError) -> Self {
        let code = match &e {
            HcvtError::Config(_)
            | HcvtError::Validation(_)
            | HcvtError::Format { .. }
            | HcvtError::Json(_)
            | HcvtError::Csv(_) => 2,
            HcvtError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Cam(a) => cmd_cam(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut opts = SynthOptions::new(a.n, a.seed);
    opts.prevalence = a.prevalence;
    opts.tiny = a.tiny;
    opts.force = a.force;
    let m = generate_synthetic(&opts, &a.out)?;
    println!(
        "wrote {} patients ({} positive, {} negative) to {}; slices {}x{}, depths {}-{}",
        m.n_patients,
        m.class_counts.positive,
        m.class_counts.negative,
        a.out.display(),
        m.native_size[0],
        m.native_size[1],
        m.depth_range[0],
        m.depth_range[1]
    );
    Ok(())
}

/// Profile, config file and flags merged, in increasing priority.
fn settings(a: &RunArgs) -> Result<(Resolved, PathBuf, PathBuf), Failure> {
    let file = a.config.as_deref().map(ConfigFile::load).transpose()?;
    let mut r = resolve(file.as_ref(), a.tiny)?;
    if let Some(v) = a.folds {
        r.folds = v;
    }
    if let Some(v) = a.seed {
        r.train.seed = v;
    }
    if let Some(v) = a.lr {
        r.train.lr = v;
    }
    if let Some(v) = a.max_epochs {
        r.train.max_epochs = v;
    }
    if let Some(v) = a.patience {
        r.train.patience = v;
    }
    if let Some(v) = a.batch_size {
        r.train.batch_size = v;
    }
    r.model.validate()?;
    r.train.validate()?;
    let data = a
        .data
        .clone()
        .or_else(|| r.data.clone())
        .ok_or_else(|| Failure::usage("no dataset given (--data or `data` in the config)"))?;
    let out = a
        .out
        .clone()
        .or_else(|| r.out.clone())
        .ok_or_else(|| Failure::usage("no run directory given (--out or `out` in the config)"))?;
    Ok((r, data, out))
}

/// Makes `dir` ready for a new run. An existing run is only replaced with
/// `force`; a non-empty directory that holds no run is never touched.
fn prepare_run_dir(dir: &Path, force: bool) -> CmdResult {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if !occupied {
        return Ok(());
    }
    let is_run = dir.join("config.json").exists() || dir.join("report.json").exists();
    if !is_run {
        return Err(Failure::usage(format!(
            "{} is not empty and holds no run; refusing to write there",
            dir.display()
        )));
    }
    if !force {
        return Err(Failure::usage(format!(
            "{} already holds a run (use --force to replace it)",
            dir.display()
        )));
    }
    fs::remove_dir_all(dir).map_err(|e| HcvtError::io(dir, e))?;
    Ok(())
}

fn fold_failures(report: &RunReport) -> Option<Failure> {
    let failed = report.failed_folds();
    if failed.is_empty() {
        return None;
    }
    let lines: Vec<String> = failed
        .iter()
        .map(|f| format!("fold {} failed: {}", f.fold, f.error.as_deref().unwrap_or("unknown error")))
        .collect();
    Some(Failure::runtime(lines.join("\n")))
}

fn summary_line(report: &RunReport) -> String {
    match &report.summary {
        Some(s) => s.line(),
        None => "no fold completed".into(),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let (mut r, data, out) = settings(&a.run)?;
    if let Some(v) = a.variant {
        r.model.variant = v;
    }
    prepare_run_dir(&out, a.run.force)?;
    let cohort = Cohort::prepare(Dataset::open(&data)?, &r.model.input)?;
    let report = run_cv(&cohort, &r.model, &r.train, r.folds, Some(&out))?;
    println!("{}", summary_line(&report));
    match fold_failures(&report) {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

/// Replaces any earlier comparison against the same baseline.
fn record_comparison(report: &mut RunReport, cmp: Comparison) {
    report.comparisons.retain(|c| c.baseline_run != cmp.baseline_run);
    report.comparisons.push(cmp);
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let (r, data, out) = settings(&a.run)?;
    let mut variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    if !variants.contains(&Variant::Full) {
        variants.insert(0, Variant::Full);
    }
    variants.dedup();
    for v in &variants {
        prepare_run_dir(&out.join(v.as_str()), a.run.force)?;
    }
    let cohort = Cohort::prepare(Dataset::open(&data)?, &r.model.input)?;
    let mut failures = Vec::new();
    for v in &variants {
        let cfg = r.model.clone().with_variant(*v);
        let report = run_cv(&cohort, &cfg, &r.train, r.folds, Some(&out.join(v.as_str())))?;
        eprintln!("{v}: {}", summary_line(&report));
        failures.extend(fold_failures(&report).map(|f| format!("{v}: {}", f.message)));
    }
    let full = out.join(Variant::Full.as_str());
    for v in &variants {
        let dir = out.join(v.as_str());
        let mut report = load_report(&dir)?;
        let mut line = format!("{:<26} {}", v.as_str(), summary_line(&report));
        if *v != Variant::Full {
            match compare_runs(&dir, &full) {
                Ok((_, _, cmp)) => {
                    line.push_str(&format!(" | p = {:.4} vs full", cmp.p_value));
                    record_comparison(&mut report, cmp);
                    report.save(&dir)?;
                }
                Err(e) => line.push_str(&format!(" | no comparison: {e}")),
            }
        }
        println!("{line}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(failures.join("\n")))
    }
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let (mut ra, rb, cmp) = compare_runs(&a.run, &a.baseline)?;
    println!("{}: {}", a.run.display(), summary_line(&ra));
    println!("{}: {}", a.baseline.display(), summary_line(&rb));
    let t = cmp.t_statistic.map_or("undefined".to_string(), |t| format!("{t:.4}"));
    println!("{} p = {} (t = {t}, {} folds)", cmp.test, cmp.p_value, ra.k);
    record_comparison(&mut ra, cmp);
    ra.save(&a.run)?;
    Ok(())
}

fn default_split(ckpt: &Path, given: Option<&Path>) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| {
        ckpt.parent().unwrap_or(Path::new(".")).join("split.json")
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => "undefined".into(),
    }
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (model, _) = load_checkpoint::<f32>(&a.ckpt)?;
    let split = FoldSplit::load(&default_split(&a.ckpt, a.split_file.as_deref()))?;
    let ids = match a.split {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    };
    let cohort = Cohort::prepare_ids(Dataset::open(&a.data)?, &model.config().input, ids)?;
    let samples = cohort.samples(ids, &split.norm_stats)?;
    let e = evaluate(&model, &samples)?;
    println!(
        "fold {} {}: n={} auc={} precision={} recall={}",
        split.fold,
        format!("{:?}", a.split).to_lowercase(),
        e.ids.len(),
        fmt_metric(Some(e.metrics.auc)),
        fmt_metric(e.metrics.precision),
        fmt_metric(e.metrics.recall)
    );
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&e).map_err(HcvtError::from)?;
        fs::write(path, text + "\n").map_err(|err| HcvtError::io(path, err))?;
    }
    Ok(())
}

fn write_map(heat: &Heatmap, slice: &Array2<f32>, out: &Path, hash: &str) -> CmdResult {
    let stem = format!(
        "{}_{}_slice{}_{}",
        heat.patient_id,
        heat.sequence,
        heat.slice_index,
        heat.source.as_str()
    );
    let png = out.join(format!("{stem}.png"));
    explain::overlay(slice, heat, &png)?;
    Sidecar::new(heat, hash).write(&out.join(format!("{stem}.json")))?;
    println!("{}", png.display());
    Ok(())
}

fn cmd_cam(a: CamArgs) -> CmdResult {
    let (model, hash) = load_checkpoint::<f32>(&a.ckpt)?;
    let dataset = Dataset::open(&a.data)?;
    dataset.record(&a.patient)?;
    let split_path = default_split(&a.ckpt, a.split_file.as_deref());
    let ids = vec![a.patient.clone()];
    let cohort = Cohort::prepare_ids(dataset, &model.config().input, &ids)?;
    let stats = if split_path.exists() {
        FoldSplit::load(&split_path)?.norm_stats
    } else {
        log::warn!(
            "{} not found; normalizing clinical features over the whole dataset",
            split_path.display()
        );
        cohort.norm_stats(&cohort.dataset.manifest.ids())?
    };
    let sample = cohort.samples(&ids, &stats)?.remove(0).sample;
    let image = sample.volume(a.sequence)?.slice(a.slice).ok_or_else(|| {
        Failure::usage(format!(
            "slice {} out of range for depth {}",
            a.slice,
            model.config().input.depth
        ))
    })?;
    fs::create_dir_all(&a.out).map_err(|e| HcvtError::io(&a.out, e))?;
    if matches!(a.method, MapMethod::Cnn | MapMethod::Both) {
        let heat = explain::cnn_cam(&model, &sample, a.sequence, a.slice)?;
        write_map(&heat, &image, &a.out, &hash)?;
    }
    if matches!(a.method, MapMethod::Vit | MapMethod::Both) {
        let heat = explain::vit_attention_map(&model, &sample, a.sequence, a.slice, a.rollout)?;
        write_map(&heat, &image, &a.out, &hash)?;
    }
    Ok(())
}
