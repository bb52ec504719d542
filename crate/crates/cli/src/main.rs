//! `hbu` command-line entry point.
//!
//! Every command writes into its `--out` directory only, records the fully
//! resolved configuration as `config.toml` there, and holds `.hbu.lock`
//! while running. Exit codes: 0 success, 1 invalid input or configuration,
//! 2 runtime or data error. Log verbosity comes from `HBU_LOG`
//! (`error`, `warn`, `info`, `debug`; default `warn`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use hbu_core::eaws::DetectParams;
use hbu_core::error::Error as CoreError;
use hbu_core::manifest::load_manifest;
use hbu_core::metrics::DEFAULT_PCK_THRESHOLD_MM;
use hbu_core::pipeline::{analyze, ingest, merge_datasets, progress_windows, Bundle, IngestParams, WindowParams};
use hbu_core::progress::{
    evaluate, grad_check, separable_windows, trace_to_csv, train, EvalReport, ModelConfig, SplitMode, TrainConfig, Transformer,
    WindowDataset,
};
use hbu_core::softdtw::ExemplarLibrary;
use hbu_core::synth::{generate, ScenarioSpec};

#[derive(Parser)]
#[command(name = "hbu", version, about = "Posture analysis and assembly-progress monitoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording (pose streams, annotations, manifest).
    Synth(SynthArgs),
    /// Normalize a manifest's recordings into a 30 Hz bundle.
    Ingest(IngestArgs),
    /// Detect postures in a bundle and write the per-minute report.
    Analyze(AnalyzeArgs),
    /// Train the progress classifier on bundles or window files.
    Train(TrainArgs),
    /// Score a checkpoint on windows, or a bundle's poses against its ground truth.
    Evaluate(EvaluateArgs),
    /// Compare analytic and numeric gradients of a small classifier.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Scenario {
    /// All seven classes, occlusions and a bystander.
    Standard,
    /// Exemplar-cutting recording.
    Library,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    scenario: Scenario,
    /// Full scenario file (TOML); replaces `--scenario`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cycle_s: Option<f64>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-joint confidence a joint needs to count as valid.
    #[arg(long, default_value_t = IngestParams::default().joint_conf_threshold)]
    joint_conf: f64,
    /// Fraction of valid joints a view needs.
    #[arg(long, default_value_t = IngestParams::default().valid_fraction)]
    valid_fraction: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Exemplar library file, or a bundle with posture episodes to cut one from.
    #[arg(long)]
    exemplars: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DetectParams::default().gamma)]
    gamma: f64,
    #[arg(long, default_value_t = DetectParams::default().k)]
    k: usize,
    #[arg(long, default_value_t = DetectParams::default().feature_stride)]
    stride: usize,
    /// Also label a window with every class scoring at or below this.
    #[arg(long)]
    multi_label_threshold: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Ingested bundles with subgoal annotations, one per cycle.
    #[arg(long = "bundle")]
    bundles: Vec<PathBuf>,
    /// Window files (as written to `windows.csv`).
    #[arg(long = "windows")]
    windows: Vec<PathBuf>,
    /// Generated separable set: `<classes>x<per_class>`, for smoke runs.
    #[arg(long)]
    separable: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Resolved configuration of an earlier run; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    no_positional: bool,
    /// Keep whole cycles in one split.
    #[arg(long)]
    split_by_cycle: bool,
    /// Add door yaw to the tokens.
    #[arg(long)]
    door_orientation: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires = "windows")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    windows: Option<PathBuf>,
    /// Bundle whose poses are scored against its ground-truth stream.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PCK_THRESHOLD_MM)]
    pck_mm: f64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 51)]
    d_in: usize,
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    ffn: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

/// Bad flags or configuration; maps to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<CoreError>() {
        Some(
            CoreError::Manifest(_)
            | CoreError::Invalid(_)
            | CoreError::Dimension { .. }
            | CoreError::OutOfRange { .. }
            | CoreError::MissingJoint(_),
        ) => 1,
        _ => 2,
    }
}

/// Exclusive claim on an output directory for the life of a command.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".hbu.lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is in use by another run (remove {} if stale)", dir.display(), path.display()))?;
        Ok(Self(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write(dir: &Path, name: &str, text: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn write_config<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    write(dir, "config.toml", toml::to_string(cfg)?)
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct SynthRun {
    command: &'static str,
    scenario: ScenarioSpec,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_toml(p)?,
        None => match a.scenario {
            Scenario::Standard => ScenarioSpec::standard(7),
            Scenario::Library => ScenarioSpec::library(7),
        },
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(c) = a.cycle_s {
        spec.cycle_duration_s = c;
        spec.episodes.retain(|e| e.start_s + e.duration_s <= c);
    }
    let _lock = OutputLock::acquire(&a.out)?;
    let cycle = generate(&spec)?;
    let manifest = cycle.write(&a.out)?;
    write_config(&a.out, &SynthRun { command: "synth", scenario: spec })?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct IngestRun {
    command: &'static str,
    manifest: PathBuf,
    params: IngestParams,
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let params = IngestParams {
        joint_conf_threshold: a.joint_conf,
        valid_fraction: a.valid_fraction,
        ..IngestParams::default()
    };
    let m = load_manifest(&a.manifest)?;
    let _lock = OutputLock::acquire(&a.out)?;
    let bundle = ingest(&m, &params)?;
    bundle.write(&a.out)?;
    write_config(
        &a.out,
        &IngestRun {
            command: "ingest",
            manifest: a.manifest,
            params,
        },
    )?;
    let dropped = bundle.provenance.iter().filter(|p| p.camera.is_none()).count();
    println!("{} frames, {} dropped", bundle.poses.len(), dropped);
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeRun {
    command: &'static str,
    bundle: PathBuf,
    exemplars: PathBuf,
    window_s: f64,
    hop_s: f64,
    gamma: f64,
    k: usize,
    feature_stride: usize,
    multi_label_threshold: Option<f64>,
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let params = DetectParams {
        gamma: a.gamma,
        k: a.k,
        feature_stride: a.stride,
        multi_label_threshold: a.multi_label_threshold,
        ..DetectParams::default()
    };
    if !(params.gamma > 0.0) || params.k == 0 || params.feature_stride == 0 {
        return Err(usage("gamma, k and stride must be positive"));
    }
    let bundle = Bundle::read(&a.bundle)?;
    let (library, curated) = if a.exemplars.is_dir() {
        (Bundle::read(&a.exemplars)?.exemplars(&params)?, true)
    } else {
        (ExemplarLibrary::read(&a.exemplars)?, false)
    };
    let _lock = OutputLock::acquire(&a.out)?;
    let analysis = analyze(&bundle, &library, &params)?;
    analysis.write(&a.out)?;
    if curated {
        library.write(&a.out.join("exemplars.txt"))?;
    }
    write_config(
        &a.out,
        &AnalyzeRun {
            command: "analyze",
            bundle: a.bundle,
            exemplars: a.exemplars,
            window_s: params.window_s,
            hop_s: params.hop_s,
            gamma: params.gamma,
            k: params.k,
            feature_stride: params.feature_stride,
            multi_label_threshold: params.multi_label_threshold,
        },
    )?;
    let valid = analysis.detection.segments.iter().filter(|s| s.valid).count();
    println!("{} windows, {} valid posture segments", analysis.detection.windows.len(), valid);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainRun {
    command: String,
    bundles: Vec<PathBuf>,
    windows: Vec<PathBuf>,
    separable: Option<String>,
    window: WindowParams,
    model: ModelConfig,
    train: TrainConfig,
}

fn parse_separable(s: &str) -> Result<(usize, usize)> {
    let (c, n) = s.split_once('x').ok_or_else(|| usage(format!("--separable `{s}` is not <classes>x<per_class>")))?;
    let parse = |v: &str| v.parse::<usize>().map_err(|_| usage(format!("--separable `{s}` is not <classes>x<per_class>")));
    Ok((parse(c)?, parse(n)?))
}

fn load_windows(run: &TrainRun, seed: u64) -> Result<WindowDataset> {
    let mut sets = Vec::new();
    for (cycle, b) in run.bundles.iter().enumerate() {
        sets.push(progress_windows(&Bundle::read(b)?, cycle, &run.window)?);
    }
    for w in &run.windows {
        sets.push(WindowDataset::read(w)?);
    }
    if let Some(s) = &run.separable {
        let (c, n) = parse_separable(s)?;
        sets.push(separable_windows(c, n, 3 * 15 + 6, 0.3, seed)?);
    }
    if sets.is_empty() {
        return Err(usage("give at least one --bundle, --windows or --separable"));
    }
    Ok(merge_datasets(&sets)?)
}

fn eval_text(r: &EvalReport, names: &[String]) -> String {
    let mut out = r.scores.to_text();
    let _ = writeln!(out, "\nmean loss: {:.6}\n", r.mean_loss);
    out.push_str(&r.scores.confusion.to_text());
    match &r.roc {
        Some(roc) => {
            out.push('\n');
            out.push_str(&roc.to_text(names));
        }
        None => out.push_str("\nROC: no class has both positives and negatives\n"),
    }
    out
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => read_toml::<TrainRun>(p)?,
        None => TrainRun {
            command: "train".into(),
            bundles: Vec::new(),
            windows: Vec::new(),
            separable: None,
            window: WindowParams::default(),
            model: ModelConfig::with_io(0, 0),
            train: TrainConfig::default(),
        },
    };
    if !a.bundles.is_empty() || !a.windows.is_empty() || a.separable.is_some() {
        run.bundles = a.bundles;
        run.windows = a.windows;
        run.separable = a.separable;
    }
    if let Some(s) = a.seed {
        run.model.seed = s;
        run.train.seed = s;
    }
    let m = &mut run.model;
    let t = &mut run.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.d_model {
        m.d_model = v;
    }
    if let Some(v) = a.heads {
        m.n_heads = v;
    }
    if let Some(v) = a.layers {
        m.n_layers = v;
    }
    if let Some(v) = a.ffn {
        m.d_ffn = v;
    }
    if let Some(v) = a.dropout {
        m.dropout_rate = v;
    }
    if a.no_positional {
        m.positional = false;
    }
    if a.split_by_cycle {
        t.split_mode = SplitMode::Cycle;
    }
    if a.door_orientation {
        run.window.door_orientation = true;
    }

    let ds = load_windows(&run, run.train.seed)?;
    run.model.d_in = ds.d_in;
    run.model.n_classes = ds.class_names.len();
    run.model.validate().map_err(|e| usage(e.to_string()))?;
    run.train.validate().map_err(|e| usage(e.to_string()))?;

    let _lock = OutputLock::acquire(&a.out)?;
    let outcome = train(&ds, &run.model, &run.train)?;
    ds.write(&a.out.join("windows.csv"))?;
    outcome.model.save(&a.out.join("model.bin"))?;
    write(&a.out, "trace.csv", trace_to_csv(&outcome.trace))?;
    let mut split = String::from("split,index\n");
    for (name, idx) in [("train", &outcome.split.train), ("val", &outcome.split.val), ("test", &outcome.split.test)] {
        for i in idx {
            let _ = writeln!(split, "{name},{i}");
        }
    }
    write(&a.out, "split.csv", split)?;
    if let Some(test) = &outcome.test {
        write(&a.out, "test_report.txt", eval_text(test, &ds.class_names))?;
    }
    write_config(&a.out, &run)?;
    for e in &outcome.trace {
        println!(
            "epoch {} loss {:.4} train_acc {:.4} val_recall {:.4} val_f1 {:.4} val_auc {:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_recall, e.val_f1, e.val_auc
        );
    }
    if let Some(test) = &outcome.test {
        println!("test accuracy {:.4}", test.scores.overall_accuracy);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateRun {
    command: &'static str,
    model: Option<PathBuf>,
    windows: Option<PathBuf>,
    bundle: Option<PathBuf>,
    pck_mm: f64,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    if a.model.is_none() && a.bundle.is_none() {
        return Err(usage("give --model with --windows, or --bundle"));
    }
    let _lock = OutputLock::acquire(&a.out)?;
    if let (Some(mp), Some(wp)) = (&a.model, &a.windows) {
        let model = Transformer::load(mp)?;
        let ds = WindowDataset::read(wp)?;
        if ds.class_names != model.class_names {
            bail!(usage("window classes differ from the checkpoint's classes"));
        }
        let all: Vec<usize> = (0..ds.windows.len()).collect();
        let report = evaluate(&model, &ds, &all)?;
        write(&a.out, "classification.txt", eval_text(&report, &ds.class_names))?;
        println!("accuracy {:.4}", report.scores.overall_accuracy);
    }
    if let Some(bp) = &a.bundle {
        let table = Bundle::read(bp)?.pose_errors(a.pck_mm)?;
        write(&a.out, "pose_errors.txt", table.to_text())?;
        println!("MPJPE {:.1} mm, PCK@{} {:.1}%", table.mean_mpjpe_mm, a.pck_mm, 100.0 * table.mean_pck);
    }
    write_config(
        &a.out,
        &EvaluateRun {
            command: "evaluate",
            model: a.model,
            windows: a.windows,
            bundle: a.bundle,
            pck_mm: a.pck_mm,
        },
    )
}

#[derive(Serialize)]
struct GradCheckRun {
    command: &'static str,
    model: ModelConfig,
    tolerance: f64,
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    let mc = ModelConfig {
        d_in: a.d_in,
        d_model: a.d_model,
        n_heads: a.heads,
        n_layers: a.layers,
        d_ffn: a.ffn,
        n_classes: a.classes,
        dropout_rate: 0.0,
        positional: true,
        seed: a.seed,
    };
    mc.validate().map_err(|e| usage(e.to_string()))?;
    if a.d_model > 16 {
        return Err(usage("gradient check is meant for d_model <= 16"));
    }
    let names = (1..=a.classes).map(|c| format!("subgoal{c}")).collect();
    let model = Transformer::new(mc, names)?;
    let sample = &separable_windows(a.classes, 1, a.d_in, 0.3, a.seed)?.windows[0];
    let report = grad_check(&model, &sample.tokens, sample.label)?;
    let mut text = String::from("tensor,max_relative_error\n");
    for (name, e) in &report.per_tensor {
        let _ = writeln!(text, "{name},{e:.3e}");
    }
    let _ = writeln!(text, "max,{:.3e}", report.max_rel_error);
    match &a.out {
        Some(dir) => {
            let _lock = OutputLock::acquire(dir)?;
            write(dir, "grad_check.csv", &text)?;
            write_config(
                dir,
                &GradCheckRun {
                    command: "grad-check",
                    model: mc,
                    tolerance: a.tolerance,
                },
            )?;
        }
        None => print!("{text}"),
    }
    println!("max relative error {:.3e}", report.max_rel_error);
    if report.max_rel_error > a.tolerance {
        return Err(anyhow!("gradient check failed: {:.3e} > {:.1e}", report.max_rel_error, a.tolerance));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HBU_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
