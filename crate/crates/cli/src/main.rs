//! `qbench`: noise, SNR and resolution-normalised quality for magnitude
//! volumes.
//!
//! Exit codes: 0 success, 1 output write failure, 2 usage error,
//! 3 input load failure, 4 estimation failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qbench::container::{load_volume, save_container, write_atomic, Dtype, LoadedVolume};
use qbench::noise::{estimate, GridKind, SearchConfig, SearchMode};
use qbench::phantom::{generate, PhantomSpec};
use qbench::report::{InputSummary, QualityReport};
use qbench::resolution::{
    noise_resolution_curve, normalize_quality, ExponentSource, DEFAULT_EXPONENT_M,
    DEFAULT_REFERENCE_MM,
};

const EXIT_OUTPUT: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_LOAD: u8 = 3;
const EXIT_ESTIMATION: u8 = 4;

#[derive(Parser)]
#[command(
    name = "qbench",
    version,
    about = "Automatic noise and SNR benchmark for magnitude MR volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate noise, signal and SNR of a volume.
    Estimate {
        /// QVOL1 container, .pgm file, or directory of .pgm slices.
        input: PathBuf,
        #[command(flatten)]
        search: SearchFlags,
        #[command(flatten)]
        score: ScoreFlags,
        /// Write the JSON report here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Generate a phantom volume from a JSON or TOML spec.
    Synth {
        spec: PathBuf,
        output: PathBuf,
        /// Sample type; defaults to u16 for quantised specs and f32 otherwise.
        #[arg(long, value_enum)]
        dtype: Option<DtypeArg>,
    },
    /// Measure noise across downsampling factors and fit the scaling exponent.
    Curve {
        input: PathBuf,
        /// Comma-separated downsampling factors, each >= 1.
        #[arg(long, value_delimiter = ',', required = true)]
        factors: Vec<f64>,
        #[command(flatten)]
        search: SearchFlags,
        #[command(flatten)]
        score: ScoreFlags,
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Curve CSV path. Defaults to the report path with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SearchFlags {
    #[arg(long, default_value_t = qbench::noise::search::DEFAULT_T_START)]
    t_start: f64,
    #[arg(long, default_value_t = qbench::noise::search::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = qbench::noise::search::DEFAULT_GRID_STEP)]
    grid_step: f64,
    #[arg(long, default_value_t = qbench::noise::search::DEFAULT_CORRECTION_FACTOR)]
    correction_factor: f64,
    /// bracketed-minimum or exhaustive.
    #[arg(long, default_value = "bracketed-minimum")]
    search_mode: SearchMode,
    /// uniform or distinct-values.
    #[arg(long, default_value = "uniform")]
    grid: GridKind,
    /// Keep t-start and epsilon fixed for volumes beyond the 12-bit range.
    #[arg(long)]
    no_auto_scale: bool,
}

impl SearchFlags {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            t_start: self.t_start,
            epsilon: self.epsilon,
            grid_step: self.grid_step,
            correction_factor: self.correction_factor,
            search_mode: self.search_mode,
            grid: self.grid,
            auto_scale: !self.no_auto_scale,
        }
    }
}

#[derive(Args)]
struct ScoreFlags {
    /// Reference resolution for the normalised SNR, in mm.
    #[arg(long, default_value_t = DEFAULT_REFERENCE_MM)]
    ref_resolution: f64,
    /// Scaling exponent m: a number, or "fitted" (curve only).
    #[arg(long)]
    exponent_m: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    U16,
    F32,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

enum Exponent {
    Fixed(f64, ExponentSource),
    Fitted,
}

fn parse_exponent(flag: &Option<String>, allow_fitted: bool) -> Result<Exponent, Failure> {
    match flag.as_deref() {
        None => Ok(Exponent::Fixed(DEFAULT_EXPONENT_M, ExponentSource::Default)),
        Some("fitted") if allow_fitted => Ok(Exponent::Fitted),
        Some("fitted") => Err(fail(
            EXIT_USAGE,
            "--exponent-m fitted is only available with `curve`",
        )),
        Some(s) => match s.parse::<f64>() {
            Ok(m) if m.is_finite() => Ok(Exponent::Fixed(m, ExponentSource::User)),
            _ => Err(fail(
                EXIT_USAGE,
                format!("--exponent-m expects a number or \"fitted\", got {s:?}"),
            )),
        },
    }
}

fn check_usage(cfg: &SearchConfig, ref_mm: f64) -> Result<(), Failure> {
    cfg.validate().map_err(|e| fail(EXIT_USAGE, e))?;
    if !(ref_mm.is_finite() && ref_mm > 0.0) {
        return Err(fail(
            EXIT_USAGE,
            format!("--ref-resolution must be positive, got {ref_mm}"),
        ));
    }
    Ok(())
}

fn load(path: &Path) -> Result<LoadedVolume, Failure> {
    load_volume(path).map_err(|e| fail(EXIT_LOAD, format!("cannot load {}: {e}", path.display())))
}

fn emit(text: &str, output: Option<&Path>) -> Result<(), Failure> {
    match output {
        Some(path) => write_atomic(path, text.as_bytes()).map_err(|e| fail(EXIT_OUTPUT, e)),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| fail(EXIT_OUTPUT, format!("cannot write report: {e}"))),
    }
}

fn print_warnings(report: &QualityReport) {
    if report.threshold.no_object {
        eprintln!("WARNING: no object detected; SNR is reported as 0");
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn run_estimate(
    input: &Path,
    search: &SearchFlags,
    score: &ScoreFlags,
    output: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = search.config();
    check_usage(&cfg, score.ref_resolution)?;
    let Exponent::Fixed(m, source) = parse_exponent(&score.exponent_m, false)? else {
        unreachable!("fitted is rejected for estimate")
    };
    let loaded = load(input)?;
    let est = estimate(&loaded.volume, &cfg).map_err(|e| fail(EXIT_ESTIMATION, e))?;
    let summary = InputSummary::new(&loaded.volume, loaded.digest.clone(), loaded.format.clone());
    let quality = normalize_quality(
        est.snr,
        summary.effective_resolution_mm,
        m,
        score.ref_resolution,
        source,
    )
    .map_err(|e| fail(EXIT_ESTIMATION, e))?;
    let report = QualityReport::new(
        "estimate",
        summary,
        cfg,
        &est,
        None,
        Some(quality),
        &loaded.warnings,
    );
    print_warnings(&report);
    emit(&report.to_json(), output)
}

fn run_curve(
    input: &Path,
    factors: &[f64],
    search: &SearchFlags,
    score: &ScoreFlags,
    output: Option<&Path>,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = search.config();
    check_usage(&cfg, score.ref_resolution)?;
    if factors.len() < 2 {
        return Err(fail(
            EXIT_USAGE,
            format!("--factors needs at least 2 values, got {}", factors.len()),
        ));
    }
    if let Some(f) = factors.iter().find(|f| !(f.is_finite() && **f >= 1.0)) {
        return Err(fail(
            EXIT_USAGE,
            format!("downsampling factors must be >= 1, got {f}"),
        ));
    }
    let exponent = parse_exponent(&score.exponent_m, true)?;
    let loaded = load(input)?;
    let est = estimate(&loaded.volume, &cfg).map_err(|e| fail(EXIT_ESTIMATION, e))?;
    let curve = noise_resolution_curve(&loaded.volume, factors, &cfg)
        .map_err(|e| fail(EXIT_ESTIMATION, e))?;
    let (m, source) = match exponent {
        Exponent::Fixed(m, s) => (m, s),
        Exponent::Fitted => (curve.gradient_m(), ExponentSource::Fitted),
    };
    let summary = InputSummary::new(&loaded.volume, loaded.digest.clone(), loaded.format.clone());
    let quality = normalize_quality(
        est.snr,
        summary.effective_resolution_mm,
        m,
        score.ref_resolution,
        source,
    )
    .map_err(|e| fail(EXIT_ESTIMATION, e))?;

    let mut table = Vec::new();
    curve.write_csv(&mut table).expect("writing to memory");
    let report = QualityReport::new(
        "curve",
        summary,
        cfg,
        &est,
        Some(curve),
        Some(quality),
        &loaded.warnings,
    );
    print_warnings(&report);

    let csv_path = csv
        .map(Path::to_path_buf)
        .or_else(|| output.map(|o| o.with_extension("csv")));
    match csv_path {
        Some(p) => write_atomic(&p, &table).map_err(|e| fail(EXIT_OUTPUT, e))?,
        None => eprintln!("note: no --output or --csv given; curve CSV not written"),
    }
    emit(&report.to_json(), output)
}

fn run_synth(spec_path: &Path, output: &Path, dtype: Option<DtypeArg>) -> Result<(), Failure> {
    let spec = PhantomSpec::from_path(spec_path).map_err(|e| fail(EXIT_LOAD, e))?;
    let volume = generate(&spec).map_err(|e| fail(EXIT_LOAD, e))?;
    let dtype = match dtype {
        Some(DtypeArg::U16) => Dtype::U16,
        Some(DtypeArg::F32) => Dtype::F32,
        None if spec.quantize => Dtype::U16,
        None => Dtype::F32,
    };
    match save_container(&volume, dtype, output) {
        Ok(()) => Ok(()),
        Err(e @ qbench::Error::NotRepresentable { .. }) => Err(fail(EXIT_USAGE, e)),
        Err(e) => Err(fail(EXIT_OUTPUT, e)),
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("QBENCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        fail(
            EXIT_USAGE,
            format!("QBENCH_THREADS must be a positive integer, got {raw:?}"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| fail(EXIT_USAGE, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Estimate {
            input,
            search,
            score,
            output,
        } => run_estimate(input, search, score, output.as_deref()),
        Command::Synth {
            spec,
            output,
            dtype,
        } => run_synth(spec, output, *dtype),
        Command::Curve {
            input,
            factors,
            search,
            score,
            output,
            csv,
        } => run_curve(
            input,
            factors,
            search,
            score,
            output.as_deref(),
            csv.as_deref(),
        ),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("qbench: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
