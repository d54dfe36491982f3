use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use leggp::bench::{bench_likelihood, loglog_slope};
use leggp::kernel::{
    c_leg_many, celerite_eval, celerite_to_leg, leg_sum, simple_real_sm, sm_eval, sm_to_leg, CeleriteTerm,
    LegParams,
};
use leggp::learn::{fit, FitConfig, FitResult};
use leggp::{log_likelihood, posterior_predictive, simulate, TimeSeries};
use log::{info, warn};
use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

mod formats;

use formats::{fmt_f64, parse_list, parse_sizes, parse_times, read_params, read_series, read_times_file};

/// Exit statuses.
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Absolute tolerance (relative to the kernel scale) for `convert`'s check.
const CONVERT_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "leggp", version, about = "Fit and apply LEG Gaussian-process models to time series")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LEG_THREADS")]
    threads: Option<usize>,

    /// More logging on standard error (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit parameters by maximum likelihood.
    Fit(FitArgs),
    /// Posterior predictive at target times (latent band by default).
    Smooth(PredictArgs),
    /// Posterior predictive at target times (predictive band by default).
    Forecast(PredictArgs),
    /// Draw one series from a model.
    Simulate(SimulateArgs),
    /// Log-likelihood of a series under a model.
    Loglik(LoglikArgs),
    /// Build parameters from a Celerite or spectral-mixture kernel.
    Convert(ConvertArgs),
    /// Time the likelihood across sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Series CSV; repeat for independent series.
    #[arg(long = "input", short = 'i', required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    max_iter: u64,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Best of this many runs, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: u64,
    /// Fit only the diagonal of Lambda.
    #[arg(long)]
    diag_lambda: bool,
    /// Starting parameters for the first run.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Band {
    /// Include observation noise.
    Predictive,
    /// Uncertainty of `B z(t)` only.
    Latent,
}

#[derive(Args)]
struct PredictArgs {
    input: PathBuf,
    params: PathBuf,
    /// `t0:t1:step` or a comma-separated list.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "targets_file", required_unless_present = "targets_file")]
    targets: Option<String>,
    /// One target time per line.
    #[arg(long)]
    targets_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    band: Option<Band>,
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Output CSV (standard output when omitted).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    params: PathBuf,
    /// `t0:t1:step` or a comma-separated list; repeated times share a latent.
    #[arg(long, allow_hyphen_values = true)]
    times: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct LoglikArgs {
    input: PathBuf,
    params: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
}

#[derive(Args)]
struct ConvertArgs {
    /// Celerite term `a,b,c,d`; repeat to sum terms.
    #[arg(long, allow_hyphen_values = true)]
    celerite: Vec<String>,
    /// Simple real spectral-mixture term `re,im,mu,gamma`; repeat to sum terms.
    #[arg(long, allow_hyphen_values = true)]
    sm: Vec<String>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    /// `2^a..2^b` or a comma-separated list.
    #[arg(long, default_value = "2^12..2^20")]
    sizes: String,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    repeats: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Marks a failed self-check, which exits with the numeric status.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<leggp::Error>() {
            return match e {
                leggp::Error::DimensionMismatch(_)
                | leggp::Error::InvalidConfig(_)
                | leggp::Error::UnsortedInput { .. }
                | leggp::Error::EmptyInput => EXIT_USAGE,
                _ => EXIT_NUMERIC,
            };
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Smooth(a) => cmd_predict(a, Band::Latent),
        Cmd::Forecast(a) => cmd_predict(a, Band::Predictive),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Loglik(a) => cmd_loglik(a),
        Cmd::Convert(a) => cmd_convert(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

#[derive(Serialize)]
struct Trace<'a> {
    nats_trajectory: &'a [f64],
    final_nats: f64,
    grad_norm: f64,
    n_obj_evals: usize,
    n_grad_evals: usize,
    status: String,
    message: &'a str,
    restart_final_nats: Vec<f64>,
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let series: Vec<TimeSeries> = a.inputs.iter().map(|p| read_series(p)).collect::<Result<_>>()?;
    let n = series[0].obs_dim();
    if let Some((p, ts)) = a.inputs.iter().zip(&series).find(|(_, ts)| ts.obs_dim() != n) {
        bail!("{} has {} value columns, the first input has {n}", p.display(), ts.obs_dim());
    }
    let mut cfg = FitConfig::new(a.rank as usize);
    cfg.max_iter = a.max_iter as usize;
    cfg.grad_tol = a.grad_tol;
    cfg.diag_lambda = a.diag_lambda;
    cfg.jitter = a.jitter;
    cfg.validate()?;
    let init = a.init.as_deref().map(read_params).transpose()?;

    let mut best: Option<FitResult> = None;
    let mut finals = Vec::new();
    for k in 0..a.restarts {
        let run = FitConfig {
            seed: a.seed.wrapping_add(k),
            ..cfg.clone()
        };
        let start = if k == 0 { init.as_ref() } else { None };
        let res = fit(&series, &run, start)?;
        info!("run {k} (seed {}): {:.6} nats, {:?}", run.seed, res.final_nats, res.status);
        finals.push(res.final_nats);
        if best.as_ref().is_none_or(|b| res.final_nats < b.final_nats) {
            best = Some(res);
        }
    }
    let best = best.expect("at least one run");
    let obs: usize = series.iter().map(TimeSeries::len).sum();
    let meta = serde_json::json!({
        "final_nats": best.final_nats,
        "nats_per_observation": best.final_nats / obs as f64,
        "status": format!("{:?}", best.status),
    });
    formats::write_params(&a.output, &best.params, Some(meta))?;
    let trace = Trace {
        nats_trajectory: &best.nats_trajectory,
        final_nats: best.final_nats,
        grad_norm: best.grad_norm,
        n_obj_evals: best.n_obj_evals,
        n_grad_evals: best.n_grad_evals,
        status: format!("{:?}", best.status),
        message: &best.message,
        restart_final_nats: finals,
    };
    let trace_path = PathBuf::from(format!("{}.trace.json", a.output.display()));
    formats::write_json(&trace_path, &trace)?;
    info!("wrote {} and {}", a.output.display(), trace_path.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs, default_band: Band) -> Result<()> {
    let ts = read_series(&a.input)?;
    let params = read_params(&a.params)?;
    let targets = match (&a.targets, &a.targets_file) {
        (Some(spec), _) => parse_times(spec)?,
        (None, Some(path)) => read_times_file(path)?,
        (None, None) => bail!("one of --targets or --targets-file is required"),
    };
    let band = a.band.unwrap_or(default_band);
    let preds = posterior_predictive(&ts, &params, &targets, a.jitter)?;
    let n = params.obs_dim();
    let mut out = open_output(a.output.as_deref())?;
    write_prediction_csv(&mut out, &targets, &preds, n, band)?;
    out.flush()?;
    Ok(())
}

fn write_prediction_csv(
    out: &mut dyn Write,
    targets: &[f64],
    preds: &[leggp::Prediction],
    n: usize,
    band: Band,
) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|j| format!("mean_{j}")));
    header.extend((1..=n).map(|j| format!("sd_{j}")));
    writeln!(out, "{}", header.join(","))?;
    for (t, p) in targets.iter().zip(preds) {
        let var = match band {
            Band::Predictive => &p.predictive_var,
            Band::Latent => &p.uncertainty,
        };
        let mut row = vec![fmt_f64(*t)];
        row.extend(p.mean.iter().map(|v| fmt_f64(*v)));
        row.extend((0..n).map(|j| fmt_f64(var[(j, j)].max(0.0).sqrt())));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let params = read_params(&a.params)?;
    let mut times = parse_times(&a.times)?;
    if times.windows(2).any(|w| w[1] < w[0]) {
        warn!("--times are not sorted; sorting them");
        times.sort_by(f64::total_cmp);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let noise = std::iter::repeat_with(move || -> f64 { StandardNormal.sample(&mut rng) });
    let sim = simulate(&times, &params, noise)?;
    let mut out = open_output(a.output.as_deref())?;
    formats::write_series_csv(&mut out, &sim.series.row_times(), sim.series.values())?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LoglikReport {
    log_likelihood: f64,
    nats: f64,
    observations: usize,
    nats_per_observation: f64,
}

fn cmd_loglik(a: LoglikArgs) -> Result<()> {
    let ts = read_series(&a.input)?;
    let params = read_params(&a.params)?;
    let ll = log_likelihood(&ts, &params, a.jitter)?;
    let report = LoglikReport {
        log_likelihood: ll,
        nats: -ll,
        observations: ts.len(),
        nats_per_observation: -ll / ts.len() as f64,
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

enum Source {
    Celerite(CeleriteTerm),
    Sm { b: Complex64, mu: f64, gamma: f64 },
}

impl Source {
    fn eval(&self, tau: f64) -> Result<f64> {
        Ok(match self {
            Source::Celerite(t) => celerite_eval(tau, t),
            Source::Sm { b, mu, gamma } => {
                let pair = simple_real_sm(&DVector::from_element(1, *b), *mu, *gamma)?;
                sm_eval(tau, &pair)?[(0, 0)].re
            }
        })
    }

    fn to_leg(&self) -> Result<LegParams> {
        Ok(match self {
            Source::Celerite(t) => celerite_to_leg(t)?,
            Source::Sm { b, mu, gamma } => sm_to_leg(&DVector::from_element(1, *b), *mu, *gamma)?,
        })
    }
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let mut sources = Vec::new();
    for spec in &a.celerite {
        let v = parse_list(spec, 4).with_context(|| format!("--celerite {spec}"))?;
        sources.push(Source::Celerite(CeleriteTerm::new(v[0], v[1], v[2], v[3])));
    }
    for spec in &a.sm {
        let v = parse_list(spec, 4).with_context(|| format!("--sm {spec}"))?;
        sources.push(Source::Sm {
            b: Complex64::new(v[0], v[1]),
            mu: v[2],
            gamma: v[3],
        });
    }
    if sources.is_empty() {
        bail!("give at least one --celerite or --sm term");
    }
    let mut params: Option<LegParams> = None;
    for s in &sources {
        let p = s.to_leg()?;
        params = Some(match params {
            None => p,
            Some(acc) => leg_sum(&acc, &p)?,
        });
    }
    let params = params.expect("non-empty");

    // check the kernel on a grid before writing anything
    let grid: Vec<f64> = (0..50).map(|k| 5.0 * k as f64 / 49.0).collect();
    let leg = c_leg_many(&grid, &params)?;
    let mut worst = 0.0f64;
    let mut scale = 1.0f64;
    for (tau, c) in grid.iter().zip(&leg) {
        let want: f64 = sources.iter().map(|s| s.eval(*tau)).sum::<Result<f64>>()?;
        scale = scale.max(want.abs());
        worst = worst.max((c[(0, 0)] - want).abs());
    }
    if !(worst <= CONVERT_TOL * scale) {
        return Err(anyhow!(VerificationFailed(format!(
            "converted kernel deviates from the source by {worst:.3e} on the check grid"
        ))));
    }
    info!("conversion verified on 50 lags, max deviation {worst:.3e}");
    let meta = serde_json::json!({ "verified_max_deviation": worst });
    formats::write_params(&a.output, &params, Some(meta))
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let sizes = parse_sizes(&a.sizes)?;
    let points = bench_likelihood(a.rank as usize, &sizes, a.repeats as usize, a.seed)?;
    let mut out = open_output(a.output.as_deref())?;
    writeln!(out, "m,median_seconds")?;
    for p in &points {
        writeln!(out, "{},{}", p.m, fmt_f64(p.median_seconds))?;
    }
    out.flush()?;
    if points.len() >= 2 {
        eprintln!("log-log slope: {:.4}", loglog_slope(&points));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&anyhow!("parse failure")), EXIT_USAGE);
        assert_eq!(exit_code(&anyhow::Error::from(leggp::Error::SingularNoise)), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow::Error::from(leggp::Error::EmptyInput)), EXIT_USAGE);
        let wrapped = anyhow::Error::from(leggp::Error::DefectiveMatrix).context("while fitting");
        assert_eq!(exit_code(&wrapped), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow!(VerificationFailed("x".into()))), EXIT_NUMERIC);
    }

    #[test]
    fn prediction_csv_layout() {
        let p = leggp::Prediction {
            mean: DVector::from_vec(vec![1.0, 2.0]),
            uncertainty: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0])),
            predictive_var: DMatrix::from_diagonal(&DVector::from_vec(vec![16.0, 25.0])),
        };
        let mut buf = Vec::new();
        write_prediction_csv(&mut buf, &[0.5], std::slice::from_ref(&p), 2, Band::Latent).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,mean_1,mean_2,sd_1,sd_2"));
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, vec![0.5, 1.0, 2.0, 2.0, 3.0]);
    }
}
