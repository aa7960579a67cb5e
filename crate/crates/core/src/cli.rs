//! Command-line front end.
//!
//! Every subcommand is a thin wrapper over a library call. Structured output
//! goes to files in the run directory; standard output gets one summary line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or artifact
//! error, 3 training divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{synth_generate, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::WeightTriple;
use crate::model::{Arch, ModelParams};
use crate::pipeline::{
    select_folds, compare_stages, defaults, evaluate, kfold_table, render_sweep, stage1, stage2,
    sweep, RunDir, Stage, Stage2Scheme, SweepGrid, TeacherSignal, TrainConfig,
};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "MARGINKD_RUN_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Feature dimension used when hashing text records.
const DEFAULT_FEATURE_DIM: usize = 64;

#[derive(Debug, Parser)]
#[command(
    name = "marginkd",
    version,
    about = "Two-stage knowledge distillation with margin-based sample selection",
    after_help = "Run directories default to $MARGINKD_RUN_ROOT/<name> (or runs/<name>)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic long-tail dataset with label noise.
    Synth(SynthArgs),
    /// Fold teachers, soft-label cache and distilled fold students.
    Stage1(Stage1Args),
    /// Score and categorize each fold's training samples without training.
    Select(SelectArgs),
    /// Refine each fold student on its selected samples.
    Stage2(Stage2Args),
    /// Evaluate one checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run both stages over a grid of weights, δ and K.
    Sweep(SweepArgs),
    /// Compare stage-one and stage-two metrics of a run (or render a sweep).
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 3000)]
    n: usize,
    /// Class r gets size proportional to (r+1)^-imbalance.
    #[arg(long, default_value_t = 1.0)]
    imbalance: f64,
    #[arg(long, default_value_t = 0.2)]
    boundary_noise: f64,
    #[arg(long, default_value_t = 0.1)]
    flip_noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().prototype_scale)]
    prototype_scale: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise_std)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; dataset.jsonl is written inside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Adaptive,
    Uniform,
}

impl From<SchemeArg> for Stage2Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Adaptive => Stage2Scheme::Adaptive,
            SchemeArg::Uniform => Stage2Scheme::Uniform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SignalArg {
    Cached,
    EnsembleMean,
}

impl From<SignalArg> for TeacherSignal {
    fn from(s: SignalArg) -> Self {
        match s {
            SignalArg::Cached => TeacherSignal::Cached,
            SignalArg::EnsembleMean => TeacherSignal::EnsembleMean,
        }
    }
}

/// Full training configuration with its defaults.
#[derive(Debug, Args)]
struct TrainArgs {
    /// `linear` or `hidden:<width>`.
    #[arg(long, default_value = defaults::TEACHER_ARCH)]
    teacher_arch: Arch,
    #[arg(long, default_value = defaults::STUDENT_ARCH)]
    student_arch: Arch,
    /// Number of folds.
    #[arg(long, default_value_t = defaults::K)]
    k: usize,
    /// Softmax temperature.
    #[arg(long, default_value_t = defaults::TAU)]
    tau: f64,
    /// Near-miss margin threshold.
    #[arg(long, default_value_t = defaults::DELTA)]
    delta: f64,
    #[arg(long, default_value_t = defaults::ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = defaults::BETA)]
    beta: f64,
    #[arg(long, default_value_t = defaults::GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = defaults::LR_TEACHER)]
    lr_teacher: f64,
    #[arg(long, default_value_t = defaults::LR_STUDENT)]
    lr_student: f64,
    #[arg(long, default_value_t = defaults::STAGE2_LR)]
    stage2_lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = defaults::MAX_GRAD_NORM)]
    max_grad_norm: f64,
    #[arg(long, default_value_t = defaults::TEACHER_EPOCHS)]
    teacher_epochs: usize,
    #[arg(long, default_value_t = defaults::STUDENT_EPOCHS)]
    student_epochs: usize,
    #[arg(long, default_value_t = defaults::STAGE2_EPOCHS)]
    stage2_epochs: usize,
    #[arg(long, default_value_t = defaults::BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = defaults::SEED)]
    seed: u64,
    /// Stage-two loss weighting of selected samples.
    #[arg(long, value_enum, default_value_t = SchemeArg::Adaptive)]
    scheme: SchemeArg,
    /// Teacher distribution used for stage-two selection.
    #[arg(long, value_enum, default_value_t = SignalArg::Cached)]
    teacher_signal: SignalArg,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            teacher_arch: self.teacher_arch,
            student_arch: self.student_arch,
            k: self.k,
            tau: self.tau,
            delta: self.delta,
            stage1_weights: WeightTriple::new(self.alpha, self.beta, self.gamma),
            lr_teacher: self.lr_teacher,
            lr_student: self.lr_student,
            stage2_lr: self.stage2_lr,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
            teacher_epochs: self.teacher_epochs,
            student_epochs: self.student_epochs,
            stage2_epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            stage2_scheme: self.scheme.into(),
            teacher_signal: self.teacher_signal.into(),
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// JSONL dataset.
    #[arg(long)]
    data: PathBuf,
    /// Hashed feature dimension for text records.
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    dim: usize,
}

#[derive(Debug, Args)]
struct Stage1Args {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum folds trained at once; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

/// Overrides applied on top of a run's stored config.json.
#[derive(Debug, Args)]
struct RunOverrides {
    /// Dataset; defaults to the copy stored in the run directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    dim: usize,
    /// Near-miss margin threshold [default: the run's value].
    #[arg(long)]
    delta: Option<f64>,
    /// [default: the run's value]
    #[arg(long, value_enum)]
    teacher_signal: Option<SignalArg>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    overrides: RunOverrides,
}

#[derive(Debug, Args)]
struct Stage2Args {
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    overrides: RunOverrides,
    /// [default: the run's value]
    #[arg(long)]
    stage2_lr: Option<f64>,
    /// [default: the run's value]
    #[arg(long)]
    stage2_epochs: Option<usize>,
    /// [default: the run's value]
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint JSON file.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = defaults::TAU)]
    tau: f64,
    /// Where to write the metrics report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Stage-one weight triple `a,b,c`; repeat for several.
    #[arg(long = "weights")]
    weights: Vec<WeightTriple>,
    /// Comma-separated δ values.
    #[arg(long, value_delimiter = ',')]
    deltas: Vec<f64>,
    /// Comma-separated fold counts.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) | Error::Config(_) => EXIT_USAGE,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::InvalidInput(_)
        | Error::Io { .. }
        | Error::Parse { .. }
        | Error::UnknownLabel { .. }
        | Error::DuplicateId(_)
        | Error::MissingArtifact(_) => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn default_run_dir(name: &str) -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(name)
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Stage1(a) => cmd_stage1(a),
        Command::Select(a) => cmd_select(a),
        Command::Stage2(a) => cmd_stage2(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<String> {
    let cfg = SynthConfig {
        classes: a.classes,
        dim: a.dim,
        n: a.n,
        imbalance_exponent: a.imbalance,
        boundary_noise_rate: a.boundary_noise,
        flip_noise_rate: a.flip_noise,
        prototype_scale: a.prototype_scale,
        noise_std: a.noise_std,
        seed: a.seed,
    };
    let ds = synth_generate(&cfg)?;
    let out = a.out.unwrap_or_else(|| default_run_dir("synth"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("dataset.jsonl");
    ds.save_jsonl(&path)?;
    Ok(format!(
        "synth: {} samples, {} classes, {} features -> {}",
        ds.len(),
        ds.num_classes(),
        ds.num_features(),
        path.display()
    ))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn cmd_stage1(a: Stage1Args) -> Result<String> {
    let config = a.train.config();
    config.validate()?;
    let ds = Dataset::load_jsonl(&a.data.data, a.data.dim)?;
    let run = RunDir::new(a.out.unwrap_or_else(|| default_run_dir("latest")));
    let artifacts = stage1(&ds, &config, a.jobs)?;
    run.save_stage1(&artifacts, &config)?;
    let stored = run.dataset_path();
    if !same_file(&a.data.data, &stored) {
        ds.save_jsonl(&stored)?;
    }
    let t = artifacts.teacher_summary();
    Ok(format!(
        "stage1: K={} student MAP@3 {:.4}±{:.4} acc {:.4} | teacher MAP@3 {:.4} -> {}",
        config.k,
        artifacts.summary.mean.map_at_3,
        artifacts.summary.std.map_at_3,
        artifacts.summary.mean.accuracy,
        t.mean.map_at_3,
        run.root().display()
    ))
}

/// Loads the run's config, applies overrides and loads its dataset.
fn open_run(run: &RunDir, o: &RunOverrides) -> Result<(TrainConfig, Dataset)> {
    if !run.root().is_dir() {
        return Err(Error::MissingArtifact(run.root().to_path_buf()));
    }
    // The soft-label cache is the artifact everything downstream needs; check it first.
    if !run.softlabels_path().exists() {
        return Err(Error::MissingArtifact(run.softlabels_path()));
    }
    let mut config = run.load_config()?;
    if let Some(d) = o.delta {
        config.delta = d;
    }
    if let Some(s) = o.teacher_signal {
        config.teacher_signal = s.into();
    }
    let data = o.data.clone().unwrap_or_else(|| run.dataset_path());
    if !data.exists() {
        return Err(Error::MissingArtifact(data));
    }
    let ds = Dataset::load_jsonl(&data, o.dim)?;
    Ok((config, ds))
}

fn mean_fraction(fractions: &[f64]) -> f64 {
    fractions.iter().sum::<f64>() / fractions.len().max(1) as f64
}

fn cmd_select(a: SelectArgs) -> Result<String> {
    let run = RunDir::new(&a.run);
    let (config, ds) = open_run(&run, &a.overrides)?;
    config.validate()?;
    let artifacts = run.load_stage1(&ds)?;
    let reports = select_folds(&artifacts, &ds, &config, a.overrides.jobs)?;
    run.save_selection(&reports)?;
    let fractions: Vec<f64> = reports.iter().map(|r| r.selected_fraction).collect();
    let mut totals = [0usize; 5];
    for r in &reports {
        totals[0] += r.counts.nm_close;
        totals[1] += r.counts.nm_far;
        totals[2] += r.counts.hh_close;
        totals[3] += r.counts.hh_far;
        totals[4] += r.counts.unselected;
    }
    Ok(format!(
        "select: delta={} selected fraction {:.4} (NMclose {} NMfar {} HHclose {} HHfar {} Unselected {})",
        config.delta,
        mean_fraction(&fractions),
        totals[0],
        totals[1],
        totals[2],
        totals[3],
        totals[4]
    ))
}

fn cmd_stage2(a: Stage2Args) -> Result<String> {
    let run = RunDir::new(&a.run);
    let (mut config, ds) = open_run(&run, &a.overrides)?;
    if let Some(lr) = a.stage2_lr {
        config.stage2_lr = lr;
    }
    if let Some(e) = a.stage2_epochs {
        config.stage2_epochs = e;
    }
    if let Some(s) = a.scheme {
        config.stage2_scheme = s.into();
    }
    config.validate()?;
    let s1 = run.load_stage1(&ds)?;
    let s2 = stage2(&s1, &ds, &config, a.overrides.jobs)?;
    run.save_stage2(&s2)?;
    let fractions = s2.selected_fractions().unwrap_or_default();
    let mut line = format!(
        "stage2: MAP@3 {:.4}±{:.4} (stage1 {:.4}) acc {:.4} selected {:.4}",
        s2.summary.mean.map_at_3,
        s2.summary.std.map_at_3,
        s1.summary.mean.map_at_3,
        s2.summary.mean.accuracy,
        mean_fraction(&fractions)
    );
    if !s2.noop_folds.is_empty() {
        line.push_str(&format!(" no-op folds {:?}", s2.noop_folds));
    }
    Ok(line)
}

fn cmd_eval(a: EvalArgs) -> Result<String> {
    if !a.checkpoint.exists() {
        return Err(Error::MissingArtifact(a.checkpoint));
    }
    let text = std::fs::read_to_string(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
    let params = ModelParams::from_checkpoint_json(&text).map_err(|e| Error::Parse {
        source_name: a.checkpoint.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let ds = Dataset::load_jsonl(&a.data.data, a.data.dim)?;
    let report = evaluate(&params, &ds, a.tau)?;
    if let Some(out) = &a.out {
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        std::fs::write(out, json).map_err(|e| Error::io(out, e))?;
    }
    Ok(format!(
        "eval: n={} MAP@3 {:.4} MAP@10 {:.4} acc {:.4} F1@3 {:.4}",
        report.n, report.map_at_3, report.map_at_10, report.accuracy, report.f1_at_3
    ))
}

fn cmd_sweep(a: SweepArgs) -> Result<String> {
    let base = a.train.config();
    let ds = Dataset::load_jsonl(&a.data.data, a.data.dim)?;
    let grid = SweepGrid {
        weights: a.weights,
        deltas: a.deltas,
        ks: a.ks,
    };
    let table = sweep(&ds, &base, &grid, a.jobs)?;
    let run = RunDir::new(a.out.unwrap_or_else(|| default_run_dir("sweep")));
    run.create()?;
    run.save_config(&base)?;
    run.write_json(&run.sweep_json_path(), &table)?;
    let csv_path = run.sweep_csv_path();
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    table.write_csv(file).map_err(|e| Error::Parse {
        source_name: csv_path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut tables = String::new();
    for r in table.rows.iter().filter(|r| r.error.is_none()) {
        tables.push_str(&format!("# delta={} K={} (stage 2)\n", r.delta, r.k));
        tables.push_str(&kfold_table(r.weights, &r.stage2_per_fold));
        tables.push('\n');
    }
    run.write_text(&run.root().join("kfold_tables.txt"), &tables)?;
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    let best = table.argmax.map(|i| &table.rows[i]);
    Ok(match best {
        Some(b) => format!(
            "sweep: {} points ({failed} failed), best weights ({}) delta {} K {} stage2 MAP@3 {:.4} -> {}",
            table.rows.len(),
            b.weights,
            b.delta,
            b.k,
            b.score().unwrap_or(f64::NAN),
            run.root().display()
        ),
        None => format!("sweep: {} points, all failed -> {}", table.rows.len(), run.root().display()),
    })
}

fn cmd_report(a: ReportArgs) -> Result<String> {
    let run = RunDir::new(&a.run);
    let s2_path = run.metrics_path(Stage::Two);
    if !s2_path.exists() && run.sweep_json_path().exists() {
        let table: crate::pipeline::SweepTable = run.read_json(&run.sweep_json_path())?;
        let text = render_sweep(&table);
        run.write_text(&run.root().join("report.txt"), &text)?;
        return Ok(format!(
            "report: sweep with {} rows -> {}",
            table.rows.len(),
            run.root().join("report.txt").display()
        ));
    }
    let s1 = run.load_metrics(Stage::One)?;
    let s2 = run.load_metrics(Stage::Two)?;
    let labels = Dataset::load_jsonl(&run.dataset_path(), DEFAULT_FEATURE_DIM)
        .ok()
        .map(|d| d.labels.names().to_vec());
    let cmp = compare_stages(&s1, &s2, labels.as_deref());
    run.write_text(&run.root().join("report.txt"), &cmp.render())?;
    run.write_text(&run.root().join("report.json"), &(cmp.to_json() + "\n"))?;
    let d = &cmp.metrics[0];
    Ok(format!(
        "report: MAP@3 {:.4} -> {:.4} ({:+.4}); acc {:.4} -> {:.4}",
        d.stage1, d.stage2, d.delta, cmp.metrics[2].stage1, cmp.metrics[2].stage2
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("marginkd").chain(args.iter().copied()))
    }

    #[test]
    fn flag_defaults_match_config_defaults() {
        let cli = parse(&["stage1", "--data", "x.jsonl"]).unwrap();
        let Command::Stage1(a) = cli.command else { panic!() };
        assert_eq!(a.train.config(), TrainConfig::default());
    }

    #[test]
    fn unknown_and_short_flags_are_rejected() {
        assert!(parse(&["stage1", "--data", "x", "--bogus", "1"]).is_err());
        assert!(parse(&["stage1", "--data", "x", "-d", "0.1"]).is_err());
        assert!(parse(&[]).is_err());
    }

    #[test]
    fn help_exits_zero_and_usage_errors_exit_one() {
        assert_eq!(run(["marginkd", "--help"]), EXIT_OK);
        assert_eq!(run(["marginkd", "stage1", "--help"]), EXIT_OK);
        assert_eq!(run(["marginkd", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config(String::new())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::MissingArtifact("softlabels.csv".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Divergence(String::new())), EXIT_DIVERGENCE);
    }

    #[test]
    fn sweep_lists_parse() {
        let cli = parse(&[
            "sweep", "--data", "d", "--weights", "1,0,0", "--weights", "0.33,0.33,0.34", "--deltas",
            "0.01,0.05", "--ks", "3,5,8",
        ])
        .unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(a.weights, vec![WeightTriple::CE_ONLY, WeightTriple::BALANCED]);
        assert_eq!(a.deltas, vec![0.01, 0.05]);
        assert_eq!(a.ks, vec![3, 5, 8]);
    }
}
