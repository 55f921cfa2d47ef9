//! Command-line front end: synthetic data, training, calibration, evaluation
//! and the diagnostic experiments, each reading and writing plain files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use calib_lab::analysis::{
    calibrated_confidences, default_a_values, k_sweep, loss_surface, wrongness_experiment,
    BandSide, WrongnessSetup, DEFAULT_BANDS,
};
use calib_lab::baselines::{apply_global, fit_global_temperature, log_grid, uncalibrated};
use calib_lab::calibrator::{calibrate_dataset, Architecture, DEFAULT_TAU_MIN};
use calib_lab::datagen::{generate, SynthConfig};
use calib_lab::io;
use calib_lab::metrics::{report, DEFAULT_BINS};
use calib_lab::{train, DiscrepancyMode, LossKind, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

const THREADS_ENV: &str = "CALIB_LAB_THREADS";

#[derive(Parser)]
#[command(
    name = "calib-lab",
    version,
    about = "Sample-adaptive temperature calibration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    Synth(SynthArgs),
    /// Train a calibrator and write its parameters and training trace
    Train(TrainArgs),
    /// Write per-record calibrated confidences
    Apply(ApplyArgs),
    /// Write a metrics report for one or more calibration methods
    Eval(EvalArgs),
    /// Write the loss surface of a wrongly predicted template sample
    Surface(SurfaceArgs),
    /// Compare uncalibrated, CE and CA calibrators across wrongness bands
    Wrongness(WrongnessArgs),
    /// Train one CA calibrator per top-k size
    Ksweep(KSweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().n)]
    n: usize,
    #[arg(long, default_value_t = SynthConfig::default().num_classes)]
    classes: usize,
    #[arg(long, default_value_t = SynthConfig::default().num_transforms)]
    transforms: usize,
    /// Probability that a record is correctly predicted
    #[arg(long, default_value_t = SynthConfig::default().target_rho)]
    rho: f64,
    #[arg(long, default_value_t = SynthConfig::default().sharpness)]
    sharpness: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise_std)]
    noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().p_agree_correct)]
    p_agree_correct: f64,
    #[arg(long, default_value_t = SynthConfig::default().p_agree_wrong)]
    p_agree_wrong: f64,
    #[arg(long, default_value_t = SynthConfig::default().concentration)]
    concentration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Ca,
    Ce,
    Mse,
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::Ca => LossKind::Ca,
            Loss::Ce => LossKind::Ce,
            Loss::Mse => LossKind::Mse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    L1,
    Sq,
}

impl From<Mode> for DiscrepancyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::L1 => DiscrepancyMode::L1,
            Mode::Sq => DiscrepancyMode::SquaredL2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    OneHidden,
    TwoHidden,
}

/// Training settings shared by every subcommand that trains.
#[derive(Args)]
struct TrainFlags {
    #[arg(long, value_enum, default_value = "ca")]
    loss: Loss,
    #[arg(long, value_enum, default_value = "sq")]
    mode: Mode,
    #[arg(long, default_value_t = TrainConfig::default().k)]
    k: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TAU_MIN)]
    tau_min: f64,
    #[arg(long, value_enum, default_value = "one-hidden")]
    arch: Arch,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss.into(),
            mode: self.mode.into(),
            k: self.k,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            tau_min: self.tau_min,
            architecture: match self.arch {
                Arch::OneHidden => Architecture::OneHidden,
                Arch::TwoHidden => Architecture::TwoHidden,
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Parameter file to write
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.trace.csv`
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset to evaluate on
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Include the uncalibrated model
    #[arg(long)]
    uncalibrated: bool,
    /// Include global temperature scaling fitted on this dataset
    #[arg(long, value_name = "TRAIN")]
    global_ts: Option<PathBuf>,
    /// Include a trained calibrator
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Write metrics as fractions instead of percentages
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct SurfaceArgs {
    #[arg(long)]
    out: PathBuf,
    /// Loss to sweep; repeat for several. Defaults to all three.
    #[arg(long, value_enum)]
    loss: Vec<Loss>,
    #[arg(long, value_enum, default_value = "sq")]
    mode: Mode,
    #[arg(long, default_value_t = 0.05)]
    tau_low: f64,
    #[arg(long, default_value_t = 20.0)]
    tau_high: f64,
    #[arg(long, default_value_t = 200)]
    tau_points: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Test,
    Train,
}

#[derive(Args)]
struct WrongnessArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which side is restricted to the wrongness band
    #[arg(long, value_enum, default_value = "test")]
    side: Side,
    /// Comma-separated `low:high` wrongness-ratio bands
    #[arg(long, value_parser = parse_band, value_delimiter = ',')]
    bands: Vec<(f64, f64)>,
    #[arg(long, default_value_t = 500)]
    wrong_count: usize,
    #[arg(long, default_value_t = 1000)]
    correct_count: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct KSweepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated top-k sizes
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("band `{s}` is not of the form low:high"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|e| format!("band `{s}`: {e}"))
    };
    Ok((parse(lo)?, parse(hi)?))
}

fn load(path: &Path) -> anyhow::Result<calib_lab::Dataset> {
    io::load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    io::atomic_write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn default_trace_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".trace.csv");
    out.with_file_name(name)
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        num_classes: a.classes,
        num_transforms: a.transforms,
        n: a.n,
        target_rho: a.rho,
        sharpness: a.sharpness,
        noise_std: a.noise,
        p_agree_correct: a.p_agree_correct,
        p_agree_wrong: a.p_agree_wrong,
        concentration: a.concentration,
        seed: a.seed,
    };
    let d = generate(&cfg)?;
    write(&a.out, io::dataset_to_jsonl(&d)?.as_bytes())?;
    log::info!("wrote {} records to {}", d.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let d = load(&a.data)?;
    let (params, trace) = train(&d, &a.flags.config())?;
    let trace_path = a.trace.unwrap_or_else(|| default_trace_path(&a.out));
    let params_json = io::params_to_json(&params)?;
    let trace_bytes = io::trace_csv(&trace)?;
    write(&a.out, params_json.as_bytes())?;
    write(&trace_path, &trace_bytes)?;
    log::info!(
        "loss {:.6} -> {:.6} over {} epochs",
        trace.initial_loss,
        trace.final_loss(),
        trace.epoch_losses.len()
    );
    Ok(())
}

fn apply(a: ApplyArgs) -> anyhow::Result<()> {
    let d = load(&a.data)?;
    let params =
        io::load_params(&a.params).with_context(|| format!("loading {}", a.params.display()))?;
    let out = calibrate_dataset(&params, &d)?;
    write(&a.out, &io::calibrated_csv(&d, &out)?)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let d = load(&a.data)?;
    let uncal = a.uncalibrated || (a.global_ts.is_none() && a.params.is_none());
    let mut rows = Vec::new();
    if uncal {
        rows.push(report(&d, &uncalibrated(&d), "uncalibrated", a.bins)?);
    }
    if let Some(path) = &a.global_ts {
        let t = fit_global_temperature(&load(path)?);
        log::info!("global temperature {}", t.tau);
        rows.push(report(&d, &apply_global(&d, t), "global_ts", a.bins)?);
    }
    if let Some(path) = &a.params {
        let params =
            io::load_params(path).with_context(|| format!("loading {}", path.display()))?;
        rows.push(report(
            &d,
            &calibrated_confidences(&params, &d)?,
            "calibrator",
            a.bins,
        )?);
    }
    write(&a.out, &io::metrics_csv(&rows, a.raw)?)
}

fn surface(a: SurfaceArgs) -> anyhow::Result<()> {
    let valid = a.tau_low > 0.0 && a.tau_high > a.tau_low && a.tau_high.is_finite();
    if a.tau_points < 2 || !valid {
        bail!("temperature grid needs 0 < tau-low < tau-high and at least 2 points");
    }
    let losses = if a.loss.is_empty() {
        vec![Loss::Ca, Loss::Ce, Loss::Mse]
    } else {
        a.loss
    };
    let taus = log_grid(a.tau_low, a.tau_high, a.tau_points);
    let grids = losses
        .into_iter()
        .map(|l| loss_surface(l.into(), a.mode.into(), &default_a_values(), &taus))
        .collect::<calib_lab::Result<Vec<_>>>()?;
    write(&a.out, &io::surface_csv(&grids)?)
}

fn wrongness(a: WrongnessArgs) -> anyhow::Result<()> {
    let (train_set, test) = (load(&a.train)?, load(&a.test)?);
    let setup = WrongnessSetup {
        bands: if a.bands.is_empty() {
            DEFAULT_BANDS.to_vec()
        } else {
            a.bands
        },
        side: match a.side {
            Side::Test => BandSide::Test,
            Side::Train => BandSide::Train,
        },
        wrong_count: a.wrong_count,
        correct_count: a.correct_count,
        bins: a.bins,
    };
    let rows = wrongness_experiment(&train_set, &test, &setup, &a.flags.config())?;
    write(&a.out, &io::wrongness_csv(&rows, a.raw)?)
}

fn ksweep(a: KSweepArgs) -> anyhow::Result<()> {
    let (train_set, test) = (load(&a.train)?, load(&a.test)?);
    let rows = k_sweep(&train_set, &test, &a.ks, &a.flags.config())?;
    write(&a.out, &io::k_sweep_csv(&rows, a.raw)?)
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Apply(a) => apply(a),
        Command::Eval(a) => eval(a),
        Command::Surface(a) => surface(a),
        Command::Wrongness(a) => wrongness(a),
        Command::Ksweep(a) => ksweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
