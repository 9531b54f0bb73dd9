use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bsskit::experiment::{self, Curve, ExperimentConfig};
use bsskit::mixture::{make_scene, write_scene, SceneManifest, SceneSpec, SourceKind};
use bsskit::separation::{self, Method, SeparationConfig};
use bsskit::signal::{read_report, read_wav, write_report, write_wav, WavEncoding};
use bsskit::stft::{window_len_from_ms, StftEngine, WindowKind};
use bsskit::{Error, Result};

#[derive(Parser)]
#[command(name = "bsskit", version, about = "Determined blind source separation with consistent ILRMA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Separate a multichannel WAV file.
    Separate(SeparateArgs),
    /// Run a seeded experiment grid from a JSON config.
    Experiment(ExperimentArgs),
    /// Turn run reports into plot-ready CSV tables.
    Diagnose(DiagnoseArgs),
    /// Generate synthetic scenes and a scene manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SeparateArgs {
    /// Input mixture with at least two channels.
    input: PathBuf,
    #[arg(long, default_value = "consistent-ilrma-bp")]
    method: Method,
    #[arg(long, default_value = "hann")]
    window: WindowKind,
    #[arg(long, default_value_t = 256.0)]
    win_len_ms: f64,
    /// Frame shift as a fraction 1/N of the window length.
    #[arg(long, default_value_t = 4)]
    shift_div: usize,
    /// NMF bases per source.
    #[arg(long, default_value_t = 2)]
    bases: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of sources; must equal the channel count.
    #[arg(long)]
    sources: Option<usize>,
    /// One-based channel the outputs are scaled to.
    #[arg(long, default_value_t = 1)]
    ref_channel: usize,
    /// Write the demixed signals without back projection.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value = "float32")]
    encoding: Encoding,
    /// Output directory for source_<n>.wav and report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Encoding {
    Pcm16,
    Pcm24,
    Float32,
    Float64,
}

impl From<Encoding> for WavEncoding {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Pcm16 => WavEncoding::Pcm16,
            Encoding::Pcm24 => WavEncoding::Pcm24,
            Encoding::Float32 => WavEncoding::Float32,
            Encoding::Float64 => WavEncoding::Float64,
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    config: PathBuf,
    /// Worker threads, capped by BSSKIT_THREADS; defaults to the core count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Run reports to overlay.
    reports: Vec<PathBuf>,
    /// Output directory; without it the likelihood table goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mono source WAV for the real/imaginary dependence table.
    #[arg(long)]
    suc: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    suc_bins: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value = "speech-like")]
    kind: SourceKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
    #[arg(long, default_value_t = 16000)]
    rate: u32,
    #[arg(long, default_value_t = 32)]
    taps: usize,
    #[arg(long, default_value_t = 1.0)]
    decay_ms: f64,
    #[arg(long, default_value_t = 0.6)]
    cross_gain: f64,
    #[arg(long, default_value_t = 4)]
    max_delay: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 3,
        Error::Format(_) => 4,
        Error::InvalidArgument(_) => 5,
        Error::Unsupported(_) => 6,
        Error::NonInvertibleFrame { .. }
        | Error::SingularMatrix { .. }
        | Error::ContractViolation(_)
        | Error::UndefinedRatio(_)
        | Error::DegenerateScale { .. } => 7,
        Error::Json(_) | Error::Csv(_) => 8,
    }
}

fn stft_engine(window: WindowKind, win_len_ms: f64, shift_div: usize, rate: u32) -> Result<StftEngine<f64>> {
    let q = window_len_from_ms(win_len_ms, rate);
    if shift_div == 0 || !q.is_multiple_of(shift_div) {
        return Err(Error::InvalidArgument(format!(
            "window of {q} samples is not divisible by {shift_div}"
        )));
    }
    StftEngine::new(window, q, q / shift_div)
}

fn separate(args: SeparateArgs) -> Result<()> {
    let mixture = read_wav(&args.input)?;
    let m = mixture.n_channels();
    if let Some(n) = args.sources {
        if n != m {
            return Err(Error::Unsupported(format!(
                "{n} sources from {m} channels; only determined mixtures are supported"
            )));
        }
    }
    if args.ref_channel == 0 || args.ref_channel > m {
        return Err(Error::InvalidArgument(format!("reference channel must be in 1..={m}")));
    }
    let engine = stft_engine(args.window, args.win_len_ms, args.shift_div, mixture.sample_rate())?;
    let config = SeparationConfig {
        method: args.method,
        iterations: args.iters,
        n_bases: args.bases,
        seed: args.seed,
        ref_channel: args.ref_channel - 1,
        sample_rate: mixture.sample_rate(),
        track_inconsistency: true,
    };
    let out = separation::run(engine.forward_all(&mixture), &engine, &config)?;
    let specs = if args.raw {
        out.state.separated.clone()
    } else {
        out.state.back_project(config.ref_channel)?.1
    };
    let estimates = engine.inverse_all(&specs, mixture.len(), mixture.sample_rate())?;

    fs::create_dir_all(&args.out)?;
    for (n, source) in estimates.split().iter().enumerate() {
        let path = args.out.join(format!("source_{}.wav", n + 1));
        let stats = write_wav(&path, source, args.encoding.into())?;
        if stats.clipped > 0 {
            log::warn!("{}: {} samples clipped", path.display(), stats.clipped);
        }
    }
    write_report(args.out.join("report.json"), &out.report)?;
    if let Some(err) = &out.report.error {
        return Err(Error::ContractViolation(format!("run aborted: {err}")));
    }
    Ok(())
}

fn run_experiment(args: ExperimentArgs) -> Result<()> {
    let config = ExperimentConfig::read(&args.config)?;
    let threads = match (args.threads, experiment::threads_from_env()) {
        (Some(a), Some(cap)) => Some(a.min(cap)),
        (a, cap) => a.or(cap),
    };
    let result = experiment::run_experiment(&config, threads)?;
    let failed = result.reports.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "{} cells, {failed} failed; summary in {}",
        result.reports.len(),
        config.output_dir.join("summary.csv").display()
    );
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    if args.reports.is_empty() && args.suc.is_none() {
        return Err(Error::InvalidArgument("nothing to diagnose".into()));
    }
    let reports = args
        .reports
        .iter()
        .map(|p| {
            let report = read_report(p)?;
            Ok((report.method.clone(), report))
        })
        .collect::<Result<Vec<_>>>()?;
    let write = |name: &str, text: String, dir: &Path| -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), text)?;
        Ok(())
    };
    if !reports.is_empty() {
        let nll = experiment::curves_csv(&reports, Curve::Nll)?;
        match &args.out {
            Some(dir) => {
                write("nll.csv", nll, dir)?;
                write("inconsistency.csv", experiment::curves_csv(&reports, Curve::Inconsistency)?, dir)?;
            }
            None => print!("{nll}"),
        }
    }
    if let Some(path) = &args.suc {
        let source = read_wav(path)?;
        let rows = experiment::suc_table(
            source.channel(0),
            source.sample_rate(),
            &WindowKind::TABLE,
            &experiment::GRID_WINDOW_LENGTHS_MS,
            &experiment::GRID_SHIFT_DIVISORS,
            args.suc_bins,
        )?;
        let text = experiment::suc_csv(&rows)?;
        match &args.out {
            Some(dir) => write("suc.csv", text, dir)?,
            None => print!("{text}"),
        }
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    if !(args.duration > 0.0) {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let spec = SceneSpec {
        kind: args.kind,
        n_sources: args.sources,
        n_channels: args.sources,
        length: (args.duration * args.rate as f64).round() as usize,
        sample_rate: args.rate,
        ir_taps: args.taps,
        decay_ms: args.decay_ms,
        cross_gain: args.cross_gain,
        max_delay: args.max_delay,
        ref_channel: 0,
    };
    let mut manifest = SceneManifest::default();
    for k in 0..args.count {
        let seed = args.seed + k as u64;
        let scene = make_scene(&spec, seed)?;
        manifest.scenes.push(write_scene(&scene, &format!("scene{k:03}"), &args.out)?);
    }
    manifest.write(args.out.join("scenes.json"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Separate(a) => experiment::with_pool(experiment::threads_from_env(), || separate(a)).and_then(|r| r),
        Command::Experiment(a) => run_experiment(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
