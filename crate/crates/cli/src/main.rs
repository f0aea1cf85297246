use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use matir::model::LayerKind;
use matir::pipeline::{
    self, evaluate, psnr, report_header, restore, train, y_channel_for, Dataset, Degradation, DegradationSpec,
    ImagePlane, TrainReport, TrainSpec,
};
use matir::verify::{self, Subject};
use matir::{Error, MatIrConfig, MatIrModel, Task};

#[derive(Parser)]
#[command(name = "matir", version, about = "MatIR image restoration: train, restore, evaluate and verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a folder of clean images.
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score a checkpoint on a folder of clean images.
    Evaluate(EvaluateArgs),
    /// Run the property suites; exit 1 if any check fails.
    Verify(VerifyArgs),
    /// Train a reduced model next to the full one under the same seed and budget.
    Ablate(AblateArgs),
    /// Print parameter census, MAC estimate and layer pattern.
    Info(InfoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Sr,
    Denoise,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Sr => Task::Sr,
            TaskArg::Denoise => Task::Denoise,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Drop {
    Twla,
    Cga,
    Irss,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model configuration (TOML). Defaults to the built-in default config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Super-resolution factor (2, 3 or 4).
    #[arg(long)]
    scale: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self, fallback: Option<&Path>) -> anyhow::Result<MatIrConfig> {
        let path = self.config.as_deref().or(fallback.filter(|p| p.exists()));
        let mut config = match path {
            Some(p) => MatIrConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => MatIrConfig::default(),
        };
        if let Some(t) = self.task {
            config.task = t.into();
            if config.task == Task::Denoise && self.scale.is_none() {
                config.scale = 1;
            }
        }
        if let Some(s) = self.scale {
            config.scale = s;
        }
        if config.task == Task::Sr && config.scale == 1 {
            config.scale = 2;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[command(flatten)]
    model: ModelArgs,
    /// Folder of clean training images.
    #[arg(long)]
    dataset: PathBuf,
    /// Optional folder of held-out validation images.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Seeds both the model initialization and the training loop.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise level for denoising (8-bit units).
    #[arg(long, default_value_t = 25.0)]
    sigma: f64,
    /// Ground-truth patch size; defaults to 64 for SR and 128 for denoising.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 250)]
    val_every: usize,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Output folder for model.ckpt, config.toml and train_report.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RestoreArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint; a config.toml next to it is used when --config is absent.
    #[arg(long = "model")]
    model_path: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, alias = "out")]
    output: PathBuf,
    /// Ground truth to report PSNR against.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint; a config.toml next to it is used when --config is absent.
    #[arg(long = "model")]
    model_path: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the per-image CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite name (ssm, scan, attention, grad, metrics) or suite/check.
    #[arg(long)]
    filter: Option<String>,
    /// Replace the scan recurrence with a sign-flipped one.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, value_enum)]
    drop: Option<Drop>,
    /// Scan directions of the reduced model.
    #[arg(long, default_value_t = 4)]
    dirs: usize,
    /// Where to write the comparison report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InfoArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Resolution for the MAC estimate, `H` or `HxW`.
    #[arg(long, default_value = "256")]
    size: String,
}

/// Exit status 1: a check or run failed on valid input.
#[derive(Debug)]
struct Failure(String);

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failure {}

fn threads() -> anyhow::Result<usize> {
    match std::env::var("MATIR_THREADS") {
        Ok(v) => v.trim().parse().with_context(|| format!("MATIR_THREADS must be an integer, got {v:?}")),
        Err(_) => Ok(0),
    }
}

fn degradation(task: Task, scale: usize, sigma: f64) -> Degradation {
    match task {
        Task::Sr => Degradation::BicubicDown(scale),
        Task::Denoise => Degradation::GaussianNoise(sigma),
    }
}

fn train_spec(o: &TrainOpts, config: &MatIrConfig) -> anyhow::Result<TrainSpec> {
    let patch = o.patch.unwrap_or(match config.task {
        Task::Sr => 64,
        Task::Denoise => 128,
    });
    Ok(TrainSpec {
        patch,
        batch: o.batch,
        lr: o.lr,
        augment: !o.no_augment,
        max_steps: o.steps,
        seed: o.seed,
        val_every: o.val_every,
        threads: threads()?,
        ..TrainSpec::default()
    })
}

fn load_data(o: &TrainOpts) -> anyhow::Result<Dataset> {
    let mut data = Dataset::load(&o.dataset)?;
    if let Some(val) = &o.val {
        data.val = Dataset::load(val)?.train;
    }
    Ok(data)
}

fn run_training(o: &TrainOpts, mut config: MatIrConfig, data: &Dataset) -> anyhow::Result<(MatIrModel, TrainReport)> {
    config.seed = o.seed;
    let mut model = MatIrModel::build(&config)?;
    let spec = train_spec(o, &config)?;
    let report = train(&mut model, data, degradation(config.task, config.scale, o.sigma), &spec)?;
    Ok((model, report))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let config = a.opts.model.resolve(None)?;
    let data = load_data(&a.opts)?;
    let (model, report) = run_training(&a.opts, config, &data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    model.save_checkpoint(&a.out.join("model.ckpt"))?;
    std::fs::write(a.out.join("config.toml"), model.config.to_toml())?;
    let text = report.to_text();
    std::fs::write(a.out.join("train_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn load_model(args: &ModelArgs, ckpt: &Path) -> anyhow::Result<MatIrModel> {
    let sibling = ckpt.parent().map(|d| d.join("config.toml"));
    let config = args.resolve(sibling.as_deref())?;
    Ok(MatIrModel::load_checkpoint(ckpt, &config)?)
}

fn cmd_restore(a: RestoreArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model, &a.model_path)?;
    let input = ImagePlane::read(&a.input)?;
    let out = restore(&model, &input)?;
    out.write(&a.output)?;
    println!("# {}", report_header("restore", &model.config, model.config.seed));
    println!(
        "{} {}x{} -> {} {}x{}",
        a.input.display(),
        input.width,
        input.height,
        a.output.display(),
        out.width,
        out.height
    );
    if let Some(r) = &a.reference {
        let reference = ImagePlane::read(r)?.to_rgb();
        let db = psnr(&out, &reference, y_channel_for(model.config.task))?;
        println!("psnr_db {db:.4}");
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model, &a.model_path)?;
    let spec = match model.config.task {
        Task::Sr => DegradationSpec::bicubic(model.scale(), a.seed),
        Task::Denoise => DegradationSpec::noise(a.sigma, a.seed),
    };
    let report = evaluate(&model, &a.dataset, &spec, y_channel_for(model.config.task))?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    }
    if report.rows.is_empty() {
        bail!(Failure(format!("no readable images in {}", a.dataset.display())));
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<()> {
    let subject = if a.inject_fault { Subject::faulty() } else { Subject::default() };
    let checks = verify::run(a.filter.as_deref(), &subject)?;
    println!("# matir {} verify", pipeline::VERSION);
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.full_name()).collect();
    println!("# {} checks, {} failed", checks.len(), failed.len());
    if !failed.is_empty() {
        bail!(Failure(format!("failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let full = a.opts.model.resolve(None)?;
    let mut reduced = full.clone();
    match a.drop {
        Some(Drop::Twla) => reduced.remove_twla = true,
        Some(Drop::Cga) => reduced.remove_cga = true,
        Some(Drop::Irss) => reduced.remove_irss = true,
        None => {}
    }
    reduced.scan_directions = a.dirs;
    reduced.validate()?;
    let data = load_data(&a.opts)?;
    let (m_full, r_full) = run_training(&a.opts, full, &data)?;
    let (m_red, r_red) = run_training(&a.opts, reduced, &data)?;
    let label = match a.drop {
        Some(Drop::Twla) => format!("drop=twla dirs={}", a.dirs),
        Some(Drop::Cga) => format!("drop=cga dirs={}", a.dirs),
        Some(Drop::Irss) => format!("drop=irss dirs={}", a.dirs),
        None => format!("dirs={}", a.dirs),
    };
    let (pf, pr) = (
        r_full.final_val_psnr().unwrap_or(f64::NAN),
        r_red.final_val_psnr().unwrap_or(f64::NAN),
    );
    let mut out = String::new();
    writeln!(out, "# {}", report_header("ablate", &m_full.config, a.opts.seed))?;
    writeln!(out, "# reduced config_hash={} {label}", m_red.config.hash())?;
    writeln!(out, "# steps={} batch={} sigma={}", a.opts.steps, a.opts.batch, a.opts.sigma)?;
    writeln!(out, "{:<16} {:>14} {:>14}", "", "full", "reduced")?;
    writeln!(out, "{:<16} {:>14} {:>14}", "pattern", m_full.pattern(), m_red.pattern())?;
    writeln!(out, "{:<16} {:>14} {:>14}", "params", m_full.count_params(), m_red.count_params())?;
    writeln!(out, "{:<16} {:>14.4} {:>14.4}", "final_val_psnr", pf, pr)?;
    writeln!(out, "delta_db {:+.4}", pr - pf)?;
    print!("{out}");
    if let Some(path) = &a.out {
        std::fs::write(path, &out)?;
    }
    Ok(())
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let parse = |v: &str| v.trim().parse::<usize>().with_context(|| format!("bad size {s:?}"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (parse(h)?, parse(w)?),
        None => (parse(s)?, parse(s)?),
    };
    if h == 0 || w == 0 {
        bail!(Error::Config {
            field: "size".into(),
            reason: "must be positive".into(),
        });
    }
    Ok((h, w))
}

fn cmd_info(a: InfoArgs) -> anyhow::Result<()> {
    let config = a.model.resolve(None)?;
    let (h, w) = parse_size(&a.size)?;
    let model = MatIrModel::build(&config)?;
    let mut params = [0usize; 2];
    let mut macs = [0u64; 2];
    for l in &model.layers {
        let i = match l.kind() {
            LayerKind::Transformer => 0,
            LayerKind::Mamba => 1,
        };
        params[i] += l.numel();
        macs[i] += l.macs(h, w);
    }
    let total_params = model.count_params();
    let total_macs = model.estimate_flops(h, w);
    let stem = (model.stem.numel(), model.stem.macs(h, w));
    let head = (
        total_params - stem.0 - params[0] - params[1],
        total_macs - stem.1 - macs[0] - macs[1],
    );
    println!("# {}", report_header("info", &config, config.seed));
    println!("task {} scale {}", config.task, config.scale);
    println!("pattern {}", model.pattern());
    println!("{:<12} {:>12} {:>18}", "part", "params", format!("macs@{h}x{w}"));
    for (name, p, m) in [
        ("stem", stem.0, stem.1),
        ("transformer", params[0], macs[0]),
        ("irss", params[1], macs[1]),
        ("head", head.0, head.1),
        ("total", total_params, total_macs),
    ] {
        println!("{name:<12} {p:>12} {m:>18}");
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Failure>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Restore(a) => cmd_restore(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Info(a) => cmd_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
