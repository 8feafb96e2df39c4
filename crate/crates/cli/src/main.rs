use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spinlife::io::{
    atomic_write, fit_report, histogram_to_csv, oracle_csv, parse_fit_report, read_histogram,
    sweep_delta_csv, sweep_records_csv, sweep_summary, ConfigDocument,
};
use spinlife::simulator::oracle_histogram;
use spinlife::sweep::{PointStatus, SweepRecord};
use spinlife::*;

#[derive(Parser)]
#[command(name = "spinlife", version, about = "Spin-precession PL decay simulation and lifetime fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration document; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo histogram for the configured geometry and polarization.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// IRF as `s,t0` (ns); defaults to the config's [irf] section.
        #[arg(long)]
        irf: Option<String>,
        /// Emit raw decay times without IRF smearing.
        #[arg(long, conflicts_with = "irf")]
        no_irf: bool,
    },
    /// Biexponential reconvolution fit of a histogram CSV.
    Fit {
        histogram: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// IRF as `s,t0` (ns) or a path to a calibration histogram.
        #[arg(long)]
        irf: Option<String>,
        /// Fit a single exponential instead.
        #[arg(long)]
        mono: bool,
    },
    /// Gaussian IRF estimate from a scatter/pulse histogram.
    CalibrateIrf {
        histogram: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Field/azimuth sweep; writes points.csv, delta.csv and summary.txt into `--out`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Fit noise-free expected histograms instead of simulating.
        #[arg(long)]
        oracle: bool,
    },
    /// Expected-decay curve for the configured geometry and polarization.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Smear expected counts with this IRF (`s,t0`).
        #[arg(long)]
        irf: Option<String>,
    },
    /// Lifetime-difference table from fit reports of both polarizations.
    Delta {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::StepTooCoarse { .. } => 3,
            Error::IllConditioned { .. } | Error::NonConvergence { .. } | Error::FitFailed(_) => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn with_path(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn load_config(common: &Common) -> Result<ConfigDocument, Failure> {
    let mut doc = match &common.config {
        Some(p) => ConfigDocument::load(p)?,
        None => ConfigDocument::default(),
    };
    if let Some(seed) = common.seed {
        doc.seed = seed;
    }
    Ok(doc)
}

fn parse_irf_literal(spec: &str) -> Result<IrfModel, Failure> {
    spec.parse().map_err(|e: Error| Failure {
        code: 2,
        message: format!("--irf {spec:?}: {e}"),
    })
}

/// `s,t0` literal, or a histogram path to calibrate from.
fn resolve_irf(spec: &str) -> Result<IrfModel, Failure> {
    let path = Path::new(spec);
    if path.exists() {
        let h = read_histogram(path).map_err(with_path(path))?;
        return Ok(calibrate_irf(&h).map_err(with_path(path))?.irf);
    }
    parse_irf_literal(spec)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            common,
            out,
            irf,
            no_irf,
        } => {
            let doc = load_config(&common)?;
            let run = SimRun::new(doc.spin_params()?, doc.geometry()?, doc.polarization()?, doc.seed);
            let mut h = if no_irf {
                simulate_decay(&run)?
            } else {
                let irf = match irf {
                    Some(s) => parse_irf_literal(&s)?,
                    None => doc.irf()?,
                };
                simulate_with_irf(&run, &irf)?
            };
            let hash = doc.hash();
            h.meta.config_hash = Some(hash.clone());
            atomic_write(&out, &histogram_to_csv(&h))?;
            // sidecar: the effective configuration, enough to reproduce the file
            let mut meta = String::new();
            let _ = writeln!(meta, "# seed = {}\n# config_hash = {hash}", doc.seed);
            meta.push_str(&doc.to_toml());
            atomic_write(&sidecar(&out), &meta)?;
        }
        Command::Fit {
            histogram,
            common,
            out,
            irf,
            mono,
        } => {
            let doc = load_config(&common)?;
            let h = read_histogram(&histogram).map_err(with_path(&histogram))?;
            let irf = match irf {
                Some(s) => resolve_irf(&s)?,
                None => doc.irf()?,
            };
            let text = if mono {
                mono_report(&fit_mono_irf(&h, &irf, &doc.fit_config()?)?, &h.meta)
            } else {
                fit_report(&fit_biexp_irf(&h, &irf, &doc.fit_config()?)?, &h.meta)
            };
            atomic_write(&out, &text)?;
        }
        Command::CalibrateIrf { histogram, out } => {
            let h = read_histogram(&histogram).map_err(with_path(&histogram))?;
            let c = calibrate_irf(&h)?;
            let mut text = String::new();
            let _ = writeln!(text, "# seed = {}", h.meta.seed);
            let _ = writeln!(text, "# config_hash = {}", h.meta.config_hash.as_deref().unwrap_or("none"));
            let _ = writeln!(text, "s_ns = {}", c.irf.s);
            let _ = writeln!(text, "t0_ns = {}", c.irf.t0);
            let _ = writeln!(text, "amplitude = {}", c.amplitude);
            let _ = writeln!(text, "baseline = {}", c.baseline);
            let _ = writeln!(text, "resolution_limited = {}", c.resolution_limited);
            atomic_write(&out, &text)?;
        }
        Command::Sweep { common, out, oracle } => {
            let doc = load_config(&common)?;
            let mut plan = doc.sweep_plan()?;
            if oracle {
                plan.mode = SweepMode::Oracle;
            }
            let result = run_sweep(&plan, &doc.spin_params()?, &doc.irf()?)?;
            let hash = doc.hash();
            let extrema: Vec<_> = plan.phi_values.iter().map(|&phi| (phi, first_extremum(&result, phi))).collect();
            let cosine: Vec<_> = doc.sweep.cosine_fields.iter().map(|&b| (b, cosine_fit(&result, b))).collect();
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            atomic_write(&out.join("points.csv"), &sweep_records_csv(&result, doc.seed, Some(&hash)))?;
            atomic_write(&out.join("delta.csv"), &sweep_delta_csv(&result, doc.seed, Some(&hash)))?;
            atomic_write(
                &out.join("summary.txt"),
                &sweep_summary(&result, &cosine, &extrema, doc.seed, Some(&hash)),
            )?;
            let failed = result.failures().count();
            if failed > 0 {
                eprintln!("warning: {failed} of {} points failed; see summary.txt", result.records.len());
            }
            if failed == result.records.len() {
                return Err(Failure {
                    code: 5,
                    message: "every sweep point failed".into(),
                });
            }
        }
        Command::Oracle { common, out, irf } => {
            let doc = load_config(&common)?;
            let (params, geom, pol) = (doc.spin_params()?, doc.geometry()?, doc.polarization()?);
            let irf = irf.map(|s| parse_irf_literal(&s)).transpose()?;
            let o = oracle_histogram(&params, &geom, pol, irf.as_ref())?;
            let phi0 = initial_phase(pol);
            let text = oracle_csv(&o, |t| expected_decay(&params, &geom, phi0, t), doc.seed, Some(&doc.hash()));
            atomic_write(&out, &text)?;
        }
        Command::Delta { reports, out } => {
            let mut records = Vec::with_capacity(reports.len());
            let mut seed = None;
            for path in &reports {
                let text = std::fs::read_to_string(path).map_err(|e| with_path(path)(e.into()))?;
                let r = parse_fit_report(&text).map_err(with_path(path))?;
                seed.get_or_insert(r.seed);
                records.push(SweepRecord {
                    b_gauss: r.b_gauss,
                    phi_deg: r.phi_deg,
                    polarization: r.polarization,
                    tau_long: r.params.tau1,
                    tau_long_err: r.tau1_err,
                    chi2_reduced: r.chi2_reduced,
                    seed: r.seed,
                    status: if r.converged {
                        PointStatus::Biexp
                    } else {
                        PointStatus::Failed("not converged".into())
                    },
                });
            }
            let result = SweepResult::from_records(records);
            if result.deltas.is_empty() {
                return Err(Failure {
                    code: 2,
                    message: "no (B, phi) point has converged reports for both polarizations".into(),
                });
            }
            atomic_write(&out, &sweep_delta_csv(&result, seed.unwrap_or(0), None))?;
        }
    }
    Ok(())
}

fn mono_report(r: &MonoFitResult, meta: &AcquisitionMeta) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# seed = {}", meta.seed);
    let _ = writeln!(out, "# config_hash = {}", meta.config_hash.as_deref().unwrap_or("none"));
    let _ = writeln!(out, "# irf_s_ns = {}\n# irf_t0_ns = {}", r.irf.s, r.irf.t0);
    let _ = writeln!(out, "amplitude = {}", r.amplitude);
    let _ = writeln!(out, "tau_ns = {}", r.tau);
    let _ = writeln!(out, "c_offset = {}", r.c_offset);
    let _ = writeln!(out, "tau_err_ns = {}", r.tau_err());
    let _ = writeln!(out, "chi2_reduced = {}", r.chi2_reduced);
    let _ = writeln!(out, "converged = {}", r.converged);
    let _ = writeln!(out, "iterations = {}", r.iterations);
    let _ = writeln!(out, "B_gauss = {}", meta.field.magnitude());
    let _ = writeln!(out, "phi_deg = {}", meta.field.phi_deg());
    let _ = writeln!(out, "theta_deg = {}", meta.field.theta_deg());
    let _ = writeln!(out, "polarization = {}", meta.polarization);
    out
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.toml");
    out.with_file_name(name)
}
