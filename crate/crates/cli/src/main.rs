//! `gridfreq` command-line driver.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gridfreq_core::contingency::run_study_on;
use gridfreq_core::gpf::solve_pf;
use gridfreq_core::{
    balance_base_case, build_droop_curves, diagnose, emit_report, solve_gpf, DiagConfig,
    DroopOptions, Format, GenId, NetworkCase, RatingBase, Report, SolverConfig, StudySpec, Verdict,
};

/// Exit code for solver nonconvergence; results are still written.
const EXIT_NONCONVERGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "gridfreq",
    version,
    about = "Governor power flow and sparse frequency diagnosis"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classic slack-bus power flow of the case as given.
    Pf(CaseArgs),
    /// Governor power flow of the balanced case, optionally after a disturbance.
    Gpf(RunArgs),
    /// Sparse compensation diagnosis of one disturbance.
    Diagnose(RunArgs),
    /// N-1 sweep over the largest generator outages.
    Study(StudyArgs),
}

#[derive(Args, Debug)]
struct CaseArgs {
    /// MATPOWER case file.
    #[arg(long)]
    case: PathBuf,
    /// Nominal system frequency, Hz.
    #[arg(long)]
    f_nominal: Option<f64>,
    /// Residual tolerance, p.u.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Output formats, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "json")]
    format: Vec<String>,
    /// Directory for report files; stdout when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Accepted for reproducible invocations; the solvers are deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DroopArgs {
    /// Droop as a fraction of nominal frequency spanning the unit rating.
    #[arg(long, default_value_t = 0.04)]
    droop_pct: f64,
    /// Upper bound on the droop corner smoothing half-width, Hz.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, value_enum, default_value_t = Rating::Pmax)]
    rating: Rating,
    /// Lower frequency-deviation bound, Hz.
    #[arg(long, default_value_t = -0.06, allow_hyphen_values = true)]
    fmin: f64,
    /// Upper frequency-deviation bound, Hz.
    #[arg(long, default_value_t = 0.06, allow_hyphen_values = true)]
    fmax: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    droop: DroopArgs,
    /// Trip the generator with this 1-based row index.
    #[arg(long, conflicts_with_all = ["outage_bus", "trip_largest", "load_step"])]
    outage: Option<usize>,
    /// Trip the largest in-service generator at this bus.
    #[arg(long, conflicts_with_all = ["trip_largest", "load_step"])]
    outage_bus: Option<i64>,
    /// Trip the largest in-service generator.
    #[arg(long, conflicts_with = "load_step")]
    trip_largest: bool,
    /// Add load at a bus: BUS:MW[:MVAR].
    #[arg(long)]
    load_step: Option<String>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    droop: DroopArgs,
    /// Number of largest outages to study; all units when omitted.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, env = "GRIDFREQ_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Rating {
    Pmax,
    Mbase,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NONCONVERGED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether every solve converged.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Pf(a) => run_pf(&a),
        Command::Gpf(a) => run_gpf(&a),
        Command::Diagnose(a) => run_diagnose(&a),
        Command::Study(a) => run_study(&a),
    }
}

fn solver_config(a: &CaseArgs) -> SolverConfig {
    SolverConfig {
        tol_residual: a.tol,
        max_iters: a.max_iters,
        ..SolverConfig::default()
    }
}

fn formats(a: &CaseArgs) -> Result<Vec<Format>> {
    let f: Vec<Format> = a
        .format
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?;
    if f.is_empty() {
        bail!("--format needs at least one of json, csv");
    }
    Ok(f)
}

fn load(a: &CaseArgs) -> Result<(NetworkCase, String)> {
    if !a.case.exists() {
        bail!("case file {} does not exist", a.case.display());
    }
    let mut net = NetworkCase::load(&a.case)?;
    if let Some(f) = a.f_nominal {
        if f.is_nan() || f <= 0.0 {
            bail!("--f-nominal must be positive, got {f}");
        }
        net = net.with_nominal_frequency(f);
    }
    let name = a
        .case
        .file_stem()
        .map_or_else(|| "case".to_string(), |s| s.to_string_lossy().into_owned());
    Ok((net, name))
}

fn droop_options(d: &DroopArgs) -> DroopOptions {
    DroopOptions {
        droop_pct: d.droop_pct,
        smoothing_halfwidth: d.delta,
        rating: match d.rating {
            Rating::Pmax => RatingBase::Pmax,
            Rating::Mbase => RatingBase::MBase,
        },
    }
}

fn diag_config(d: &DroopArgs, solver: SolverConfig) -> Result<DiagConfig> {
    if !(d.fmin < 0.0 && d.fmax > 0.0) {
        bail!(
            "frequency bounds [{}, {}] Hz must straddle zero",
            d.fmin,
            d.fmax
        );
    }
    Ok(DiagConfig {
        solver,
        ..DiagConfig::default().with_bounds(d.fmin, d.fmax)
    })
}

/// `BUS:MW[:MVAR]`
fn parse_load_step(s: &str) -> Result<(i64, f64, f64)> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        bail!("--load-step expects BUS:MW[:MVAR], got {s:?}");
    }
    let bus = parts[0]
        .trim()
        .parse()
        .with_context(|| format!("bad bus id in {s:?}"))?;
    let mw = parts[1]
        .trim()
        .parse()
        .with_context(|| format!("bad MW value in {s:?}"))?;
    let mvar = match parts.get(2) {
        Some(q) => q
            .trim()
            .parse()
            .with_context(|| format!("bad MVAr value in {s:?}"))?,
        None => 0.0,
    };
    Ok((bus, mw, mvar))
}

/// Apply the disturbance selected on the command line, if any.
fn disturb(base: &NetworkCase, a: &RunArgs) -> Result<Option<NetworkCase>> {
    let gen = if let Some(g) = a.outage {
        Some(GenId(g))
    } else if let Some(bus) = a.outage_bus {
        let idx = base
            .bus_index(bus)
            .with_context(|| format!("unknown bus {bus}"))?;
        let g = base
            .gens
            .iter()
            .filter(|g| g.bus == idx)
            .max_by(|x, y| x.pg.total_cmp(&y.pg).then(y.id.cmp(&x.id)))
            .with_context(|| format!("no in-service generator at bus {bus}"))?;
        Some(g.id)
    } else if a.trip_largest {
        Some(
            base.largest_generator()
                .context("case has no in-service generator")?,
        )
    } else {
        None
    };
    if let Some(g) = gen {
        return Ok(Some(base.apply_contingency(g)?));
    }
    if let Some(s) = &a.load_step {
        let (bus, mw, mvar) = parse_load_step(s)?;
        return Ok(Some(base.apply_load_step(bus, mw, mvar)?));
    }
    Ok(None)
}

/// Stdout writer that treats a closed pipe as the reader being done.
fn stdout(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_or_write(text: &str, dir: Option<&Path>, file: &str) -> Result<()> {
    match dir {
        Some(d) => {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            let path = d.join(file);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => stdout(&format!("{text}\n"))?,
    }
    Ok(())
}

fn output_report(report: &Report, a: &CaseArgs) -> Result<()> {
    let formats = formats(a)?;
    match &a.out_dir {
        Some(dir) => {
            for p in emit_report(report, &formats, dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
        None => {
            for f in &formats {
                match f {
                    Format::Json => stdout(&format!("{}\n", report.to_json()?))?,
                    Format::Csv => stdout(&report.to_csv()?)?,
                }
            }
        }
    }
    Ok(())
}

fn run_pf(a: &CaseArgs) -> Result<bool> {
    formats(a)?;
    let (net, name) = load(a)?;
    let cfg = solver_config(a);
    let (converged, body) = match solve_pf(&net, &cfg) {
        Ok(sol) => {
            let v = sol.state.voltages();
            let vm: Vec<f64> = v.iter().map(|z| z.norm()).collect();
            let va: Vec<f64> = v.iter().map(|z| z.arg().to_degrees()).collect();
            let balanced = balance_base_case(&net, &cfg)?;
            let slack_pg: f64 = balanced
                .gens
                .iter()
                .filter(|g| g.bus == net.slack)
                .map(|g| g.pg * net.base_mva)
                .sum();
            (
                true,
                json!({
                    "case": name,
                    "converged": true,
                    "iterations": sol.iterations,
                    "residual_pu": sol.residual,
                    "slack_pg_mw": slack_pg,
                    "bus_ids": net.buses.iter().map(|b| b.id).collect::<Vec<_>>(),
                    "vm_pu": vm,
                    "va_deg": va,
                }),
            )
        }
        Err(e) => (
            false,
            json!({ "case": name, "converged": false, "message": e.to_string() }),
        ),
    };
    print_or_write(
        &serde_json::to_string_pretty(&body)?,
        a.out_dir.as_deref(),
        &format!("{name}_pf.json"),
    )?;
    Ok(converged)
}

fn run_gpf(a: &RunArgs) -> Result<bool> {
    formats(&a.case)?;
    let (net, name) = load(&a.case)?;
    let cfg = solver_config(&a.case);
    let base = balance_base_case(&net, &cfg).context("balancing the base case")?;
    let post = disturb(&base, a)?.unwrap_or_else(|| base.clone());
    let droop = droop_options(&a.droop);
    let curves = build_droop_curves(&post, &droop)?;
    let sol = solve_gpf(&post, &curves, &cfg)?;
    let body = json!({
        "case": name,
        "mw_lost": post.mw_lost(),
        "converged": sol.converged,
        "iterations": sol.iterations,
        "residual_pu": sol.residual,
        "df_hz": sol.df,
        "n_inf_pu": sol.n.inf_norm(),
        "objective": sol.objective,
        "droop_pct": droop.droop_pct,
        "delta_hz": droop.smoothing_halfwidth,
    });
    print_or_write(
        &serde_json::to_string_pretty(&body)?,
        a.case.out_dir.as_deref(),
        &format!("{name}_gpf.json"),
    )?;
    Ok(sol.converged)
}

fn run_diagnose(a: &RunArgs) -> Result<bool> {
    formats(&a.case)?;
    let (net, name) = load(&a.case)?;
    let cfg = solver_config(&a.case);
    let diag = diag_config(&a.droop, cfg)?;
    let base = balance_base_case(&net, &cfg).context("balancing the base case")?;
    let post = disturb(&base, a)?.context(
        "diagnose needs a disturbance: --outage, --outage-bus, --trip-largest or --load-step",
    )?;
    let droop = droop_options(&a.droop);
    let curves = build_droop_curves(&post, &droop)?;
    let d = diagnose(&post, &curves, &diag)?;
    let report = Report::from_diagnosis(&name, &post, diag.bounds, &droop, &d);
    output_report(&report, &a.case)?;
    Ok(d.verdict != Verdict::Nonconverged)
}

fn run_study(a: &StudyArgs) -> Result<bool> {
    formats(&a.case)?;
    if a.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let (net, name) = load(&a.case)?;
    let cfg = solver_config(&a.case);
    let spec = StudySpec {
        case_path: a.case.case.clone(),
        top_k: a.top_k,
        droop: droop_options(&a.droop),
        diag: diag_config(&a.droop, cfg)?,
        workers: a.workers,
        f_nominal: a.case.f_nominal,
    };
    let study = run_study_on(&net, &name, &spec)?;
    let report = Report::from_study(&study);
    output_report(&report, &a.case)?;
    Ok(study.stats.nonconverged == 0)
}
