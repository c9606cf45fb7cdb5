use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cwgan_dehaze::checkpoint::load_checkpoint;
use cwgan_dehaze::config::{Preset, RunConfig};
use cwgan_dehaze::data::{generate_synthetic_dataset, load_manifest, split, DatasetManifest, MANIFEST_FILE};
use cwgan_dehaze::dcp::dcp_dehaze;
use cwgan_dehaze::image::{load_image, save_image};
use cwgan_dehaze::report::{evaluate_set, markdown_table, MetricsReport};
use cwgan_dehaze::trainer::{hex, JsonlLog, Phase, TrainLogRecord, Trainer, FINAL_CHECKPOINT};
use cwgan_dehaze::Error;

const CONFIG_ECHO: &str = "config.toml";
const LOG_FILE: &str = "train.jsonl";
const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Parser, Debug)]
#[command(name = "cwgan", version, about = "Dehazing with a conditional Wasserstein GAN")]
struct Cli {
    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in defaults to start from when no config file is given.
    #[arg(long, global = true, value_enum, conflicts_with = "config")]
    preset: Option<PresetArg>,
    /// Seed for the command: run seed, synthesis seed or split seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where results go. Each command has its own default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset.
    Synthesize(SynthesizeArgs),
    /// Split a dataset into train and test manifests.
    Split(SplitArgs),
    /// Train from scratch, or continue with --resume.
    Train(TrainArgs),
    /// Fine-tune a trained checkpoint on another dataset.
    Transfer(TransferArgs),
    /// Dehaze one image or a directory of images.
    Dehaze(DehazeArgs),
    /// Score dehazed outputs against a dataset.
    Evaluate(EvaluateArgs),
    /// Combine saved evaluation reports into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    k_min: Option<f32>,
    #[arg(long)]
    k_max: Option<f32>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Dataset root or manifest file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Dataset root or manifest file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    epochs: Option<u64>,
    /// Stop after this many generator steps.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Suffix of the run directory name.
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Continue an interrupted run from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start transfer learning from this checkpoint instead.
    #[arg(long, conflicts_with = "resume")]
    transfer: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Checkpoint of the source model.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Cwgan,
    Dcp,
}

#[derive(Args, Debug)]
struct DehazeArgs {
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "cwgan")]
    method: Method,
    /// Trained checkpoint; required for cwgan.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset root or manifest file the outputs belong to.
    #[arg(long)]
    dataset: PathBuf,
    /// `name=dir` of one method's outputs; repeat for more columns.
    #[arg(long = "method", required = true, value_parser = parse_method)]
    methods: Vec<(String, PathBuf)>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON reports written by `evaluate`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn parse_method(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        Some(_) => Err(format!("expected name=dir, got {s:?}")),
        None => {
            let dir = PathBuf::from(s);
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).ok_or("empty method path")?;
            Ok((name, dir))
        }
    }
}

/// Bad invocation detected after parsing.
#[derive(Debug)]
struct UsageError(String);

/// Input data missing or unusable.
#[derive(Debug)]
struct DataError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for DataError {}

/// 1 usage, 2 data, 3 runtime or numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<DataError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidParameter(_) | Error::Config(_) => 1,
                Error::EmptyDataset(_) | Error::DatasetContract(_) | Error::Io { .. } | Error::Image { .. } | Error::Json(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(PresetArg::Desk)) => RunConfig::preset(Preset::Desk),
        (None, _) => RunConfig::preset(Preset::Paper),
    };
    if let Some(seed) = cli.seed {
        match &cli.command {
            Command::Synthesize(_) => cfg.synthetic.seed = seed,
            Command::Split(_) => cfg.data.split_seed = seed,
            _ => cfg.seed = seed,
        }
    }
    match &cli.command {
        Command::Synthesize(a) => {
            let s = &mut cfg.synthetic;
            s.count = a.n.unwrap_or(s.count);
            s.size = a.size.unwrap_or(s.size);
            s.k_range = (a.k_min.unwrap_or(s.k_range.0), a.k_max.unwrap_or(s.k_range.1));
        }
        Command::Split(a) => cfg.data.test_ratio = a.ratio.unwrap_or(cfg.data.test_ratio),
        Command::Train(TrainArgs { stage, .. }) | Command::Transfer(TransferArgs { stage, .. }) => {
            let t = &mut cfg.train;
            if let Some(e) = stage.epochs {
                if is_transfer(&cli.command) {
                    t.transfer_epochs = e;
                } else {
                    t.epochs = e;
                }
            }
            t.batch_size = stage.batch_size.unwrap_or(t.batch_size);
            t.max_generator_steps = stage.max_steps.or(t.max_generator_steps);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_transfer(c: &Command) -> bool {
    matches!(c, Command::Transfer(_) | Command::Train(TrainArgs { transfer: Some(_), .. }))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match &cli.command {
        Command::Synthesize(_) => cmd_synthesize(&cfg, out.unwrap_or_else(|| "data/synthetic".into())),
        Command::Split(a) => cmd_split(&cfg, a, out.unwrap_or_else(|| "splits".into())),
        Command::Train(a) => cmd_train(&cfg, cli.config.is_some(), a, out.unwrap_or_else(|| "runs".into())),
        Command::Transfer(a) => cmd_transfer(&cfg, a, out.unwrap_or_else(|| "runs".into())),
        Command::Dehaze(a) => cmd_dehaze(&cfg, cli.config.is_some(), a, out.unwrap_or_else(|| "dehazed".into())),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a, out.unwrap_or_else(|| "evaluation".into())),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// A dataset root (with or without a saved manifest) or a manifest file.
/// Paths are made absolute so manifests written elsewhere stay valid.
fn resolve_dataset(path: &Path, cfg: &RunConfig) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(DataError(format!("dataset path {} does not exist", path.display())).into());
    }
    let path = fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))?;
    if path.is_file() {
        return Ok(DatasetManifest::load(&path)?);
    }
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(DatasetManifest::load(&path.join(MANIFEST_FILE))?);
    }
    let report = load_manifest(&path, &cfg.data.layout)?;
    for d in &report.diagnostics {
        log::warn!("{d}");
    }
    Ok(report.manifest)
}

/// `<root>/<timestamp>-<tag>`, with a counter if that name is taken.
fn run_dir_path(root: &Path, tag: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-{tag}"));
    let mut candidate = base.clone();
    let mut i = 1;
    while candidate.exists() {
        candidate = PathBuf::from(format!("{}-{i}", base.display()));
        i += 1;
    }
    candidate
}

fn cmd_synthesize(cfg: &RunConfig, out: PathBuf) -> Result<()> {
    let m = generate_synthetic_dataset(&out, &cfg.synthetic)?;
    echo_config(&out, cfg)?;
    println!("wrote {} pairs to {}", m.len(), out.display());
    Ok(())
}

fn cmd_split(cfg: &RunConfig, args: &SplitArgs, out: PathBuf) -> Result<()> {
    let manifest = resolve_dataset(&args.dataset, cfg)?;
    let s = split(&manifest, cfg.data.test_ratio, cfg.data.split_seed)?;
    create_dir(&out)?;
    s.train.save(&out.join("train.json"))?;
    s.test.save(&out.join("test.json"))?;
    echo_config(&out, cfg)?;
    println!("{} train, {} test in {}", s.train.len(), s.test.len(), out.display());
    Ok(())
}

fn log_progress(r: &TrainLogRecord) {
    if r.phase == Phase::Generator && r.generator_step % 10 == 0 {
        log::info!(
            "step {} epoch {}: L_G {:.4} l1 {:.4}",
            r.generator_step,
            r.epoch,
            r.generator_objective.unwrap_or(f32::NAN),
            r.l1.unwrap_or(f32::NAN)
        );
    }
}

/// Runs a prepared stage, appending every update to the JSONL log.
fn drive(mut trainer: Trainer, mut log: JsonlLog, run_dir: &Path) -> Result<()> {
    let result = trainer.run(&mut |r| {
        log_progress(r);
        log.append(r)
    });
    log.flush()?;
    result?;
    let s = trainer.state();
    println!(
        "{} generator / {} critic steps; final checkpoint {}",
        s.generator_steps,
        s.critic_steps,
        run_dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, explicit_config: bool, args: &TrainArgs, out: PathBuf) -> Result<()> {
    if let Some(source) = &args.transfer {
        return transfer(cfg, &args.stage, source, out);
    }
    let manifest = resolve_dataset(&args.stage.dataset, cfg)?;
    if let Some(ckpt) = &args.resume {
        return resume(cfg, explicit_config, args, ckpt, &manifest, &out);
    }
    let run_dir = run_dir_path(&out, args.stage.tag.as_deref().unwrap_or("train"));
    let trainer = Trainer::new(cfg.train_config(Some(run_dir.join(CHECKPOINT_DIR))), &manifest)?;
    create_dir(&run_dir.join(CHECKPOINT_DIR))?;
    echo_config(&run_dir, cfg)?;
    println!("run directory {}", run_dir.display());
    drive(trainer, JsonlLog::create(&run_dir.join(LOG_FILE))?, &run_dir)
}

/// Continues inside the checkpoint's own run directory when it has one.
fn resume(
    cfg: &RunConfig,
    explicit_config: bool,
    args: &TrainArgs,
    ckpt: &Path,
    manifest: &DatasetManifest,
    out: &Path,
) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let run_dir = ckpt
        .parent()
        .and_then(Path::parent)
        .filter(|d| d.join(LOG_FILE).is_file())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir_path(out, args.stage.tag.as_deref().unwrap_or("resume")));
    let mut train_cfg = if explicit_config {
        cfg.train_config(None)
    } else {
        state.config.clone()
    };
    train_cfg.checkpoint_dir = Some(run_dir.join(CHECKPOINT_DIR));
    if let Some(e) = args.stage.epochs {
        train_cfg.epochs = e;
    }
    if let Some(m) = args.stage.max_steps {
        train_cfg.max_generator_steps = Some(m);
    }
    let step = state.generator_steps + state.critic_steps;
    let trainer = Trainer::resume(state, Some(train_cfg), manifest)?;
    create_dir(&run_dir.join(CHECKPOINT_DIR))?;
    if !run_dir.join(CONFIG_ECHO).exists() {
        echo_config(&run_dir, cfg)?;
    }
    println!("resuming at update {step} in {}", run_dir.display());
    drive(trainer, JsonlLog::resume(&run_dir.join(LOG_FILE), step)?, &run_dir)
}

fn cmd_transfer(cfg: &RunConfig, args: &TransferArgs, out: PathBuf) -> Result<()> {
    transfer(cfg, &args.stage, &args.checkpoint, out)
}

fn transfer(cfg: &RunConfig, stage: &StageArgs, checkpoint: &Path, out: PathBuf) -> Result<()> {
    let manifest = resolve_dataset(&stage.dataset, cfg)?;
    let source = load_checkpoint(checkpoint)?;
    let run_dir = run_dir_path(&out, stage.tag.as_deref().unwrap_or("transfer"));
    let trainer = Trainer::transfer(source, cfg.transfer_config(Some(run_dir.join(CHECKPOINT_DIR))), &manifest)?;
    create_dir(&run_dir.join(CHECKPOINT_DIR))?;
    echo_config(&run_dir, cfg)?;
    println!("run directory {}", run_dir.display());
    drive(trainer, JsonlLog::create(&run_dir.join(LOG_FILE))?, &run_dir)
}

fn image_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(DataError(format!("input {} does not exist", input.display())).into());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError(format!("no images in {}", input.display())).into());
    }
    Ok(files)
}

fn cmd_dehaze(cfg: &RunConfig, explicit_config: bool, args: &DehazeArgs, out: PathBuf) -> Result<()> {
    let inputs = image_inputs(&args.input)?;
    let generator = match args.method {
        Method::Dcp => None,
        Method::Cwgan => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| UsageError("--checkpoint is required for --method cwgan".into()))?;
            let state = load_checkpoint(path)?;
            let want = cfg.train_config(None).fingerprint();
            if explicit_config && state.fingerprint != want {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{} has architecture {} but the config describes {}",
                    path.display(),
                    hex(&state.fingerprint),
                    hex(&want)
                ))
                .into());
            }
            Some((state.generator, state.config.image_size))
        }
    };
    create_dir(&out)?;
    for input in &inputs {
        let hazy = load_image(input)?;
        let restored = match &generator {
            Some((g, size)) => g.dehaze(&hazy, *size)?,
            None => dcp_dehaze(&hazy, &cfg.dcp)?,
        };
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        save_image(&out.join(format!("{stem}.png")), &restored)?;
    }
    echo_config(&out, cfg)?;
    println!("dehazed {} images into {}", inputs.len(), out.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs, out: PathBuf) -> Result<()> {
    let manifest = resolve_dataset(&args.dataset, cfg)?;
    for (_, dir) in &args.methods {
        if !dir.is_dir() {
            return Err(DataError(format!("outputs directory {} does not exist", dir.display())).into());
        }
    }
    let mut reports = Vec::with_capacity(args.methods.len());
    for (name, dir) in &args.methods {
        reports.push(evaluate_set(&manifest, dir, &cfg.metrics, name)?);
    }
    create_dir(&out)?;
    for r in &reports {
        r.write_csv(&out.join(format!("{}.csv", r.method)))?;
        r.save_json(&out.join(format!("{}.json", r.method)))?;
    }
    let table = markdown_table(&reports);
    fs::write(out.join("table.md"), &table).context("writing table.md")?;
    echo_config(&out, cfg)?;
    print!("{table}");
    Ok(())
}

fn cmd_report(args: &ReportArgs, out: Option<PathBuf>) -> Result<()> {
    let reports = args
        .reports
        .iter()
        .map(|p| MetricsReport::load_json(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let table = markdown_table(&reports);
    match out {
        Some(path) => fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{table}"),
    }
    Ok(())
}
