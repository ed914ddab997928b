use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use detmlp::cost;
use detmlp::estimate;
use detmlp::hypothesis;
use detmlp::mlp::{self, ParameterMask, WeightVector};
use detmlp::simulate;
use detmlp::CostKind;
use serde::Serialize;

mod config;
use config::{Overrides, Resolved, RunConfig};

/// Version of the report layout.
const SPEC_VERSION: &str = "1.0";
const GRAD_TOLERANCE: f64 = 1e-5;
const HESSIAN_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "detmlp",
    version,
    about = "Fit perceptrons under the log-det cost and test nested models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the full model (or the masked one when `mask` is set).
    Fit(Common),
    /// Test the restricted model given by `mask` against the full model.
    Test(Common),
    /// Monte Carlo study of the test statistics on generated data.
    Simulate(Common),
    /// Compare analytic derivatives of the cost with finite differences.
    Gradcheck(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `reps`.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Output(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) | CliError::Output(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Output(m) => write!(f, "cannot write output: {m}"),
        }
    }
}

fn numerical(context: &str) -> impl Fn(detmlp::Error) -> CliError + '_ {
    move |e| CliError::Numerical(format!("{context}: {e}"))
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    spec_version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    result: T,
}

fn json<T: Serialize>(resolved: &Resolved, command: &str, result: T) -> Result<Vec<u8>, CliError> {
    let envelope = Envelope {
        spec_version: SPEC_VERSION,
        command,
        config: &resolved.config,
        result,
    };
    let mut bytes = serde_json::to_vec_pretty(&envelope).map_err(|e| CliError::Output(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Stages every file in the output directory, then renames them into place,
/// so a failure never leaves a partial set behind.
fn write_outputs(dir: &Path, files: Vec<(&str, Vec<u8>)>) -> Result<(), CliError> {
    use std::io::Write;
    let io = |e: std::io::Error| CliError::Output(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, target) in staged {
        tmp.persist(&target)
            .map_err(|e| CliError::Output(format!("{}: {}", target.display(), e.error)))?;
    }
    Ok(())
}

fn run_fit(r: &Resolved, quiet: bool) -> Result<(), CliError> {
    let data = r.dataset().map_err(numerical("generate"))?;
    let arch = r.config.architecture;
    let mask = r.restricted.clone().unwrap_or_else(|| ParameterMask::all_free(arch));
    let fit =
        estimate::minimize(&data, arch, &mask, &r.fit_config(), &CostKind::LogDet).map_err(numerical("estimate"))?;
    if !quiet {
        println!(
            "U_n = {:.10}  gradient max-norm {:.3e}  converged {}  distinct minima {}",
            fit.cost, fit.gradient_norm, fit.converged, fit.distinct_minima
        );
    }
    write_outputs(&r.config.output_dir, vec![("fit_result.json", json(r, "fit", &fit)?)])
}

fn run_test(r: &Resolved, quiet: bool) -> Result<(), CliError> {
    let data = r.dataset().map_err(numerical("generate"))?;
    let mask = r.restricted.as_ref().expect("validated");
    let report =
        hypothesis::run_test(&data, r.config.architecture, mask, &r.fit_config()).map_err(numerical("hypothesis"))?;
    write_outputs(
        &r.config.output_dir,
        vec![("test_report.json", json(r, "test", &report)?)],
    )?;
    if !quiet {
        print!("{}", report.table());
    }
    Ok(())
}

fn run_simulate(r: &Resolved, quiet: bool) -> Result<(), CliError> {
    let spec = r.generator().expect("validated");
    let mask = r.restricted.as_ref().expect("validated");
    let mc = simulate::run_replications(spec, mask, &r.fit_config(), r.config.reps, &r.config.statistics)
        .map_err(numerical("simulate"))?;
    let mut stats = Vec::new();
    let mut qq = Vec::new();
    mc.write_statistics_csv(&mut stats).map_err(numerical("simulate"))?;
    mc.write_qq_csv(&mut qq).map_err(numerical("simulate"))?;
    write_outputs(
        &r.config.output_dir,
        vec![
            ("simulate_report.json", json(r, "simulate", &mc)?),
            ("replications.csv", stats),
            ("qq.csv", qq),
        ],
    )?;
    if !quiet {
        for (name, summary) in [("T_n", &mc.t_summary), ("S_n", &mc.s_summary)] {
            if let Some(s) = summary {
                println!(
                    "{name}: {} replications, mean {:.4} (dof {}), KS vs chi2 {:.4} (1% critical {:.4})",
                    s.count, s.mean, mc.dof, s.ks_vs_chi2, s.ks_critical_1pct
                );
            }
        }
    }
    if !mc.valid {
        return Err(CliError::Numerical(format!(
            "{} of {} replications failed; report written but marked invalid",
            mc.failures, mc.replications
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckRow {
    quantity: &'static str,
    max_relative_error: f64,
    tolerance: f64,
    pass: bool,
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn shifted(w: &WeightVector, k: usize, h: f64) -> WeightVector {
    let mut v = w.clone();
    v.weights[k] += h;
    v
}

fn gradcheck_rows(w: &WeightVector, data: &detmlp::Dataset) -> detmlp::Result<Vec<CheckRow>> {
    let s = w.arch().param_count();
    let grad = cost::grad_u_n(w, data)?;
    let h = 1e-6;
    let mut fd = Vec::with_capacity(s);
    for k in 0..s {
        fd.push((cost::u_n(&shifted(w, k, h), data)? - cost::u_n(&shifted(w, k, -h), data)?) / (2.0 * h));
    }
    let grad_err = max_abs(grad.iter().zip(&fd).map(|(a, b)| a - b)) / max_abs(grad.iter().copied()).max(1e-12);

    let hess = cost::hessian_u_n(w, data)?;
    let h = 1e-5;
    let mut hess_err: f64 = 0.0;
    for l in 0..s {
        let gp = cost::grad_u_n(&shifted(w, l, h), data)?;
        let gm = cost::grad_u_n(&shifted(w, l, -h), data)?;
        for k in 0..s {
            hess_err = hess_err.max((hess.as_slice()[k * s + l] - (gp[k] - gm[k]) / (2.0 * h)).abs());
        }
    }
    let hess_err = hess_err / max_abs(hess.as_slice().iter().copied()).max(1e-12);
    Ok(vec![
        CheckRow {
            quantity: "gradient",
            max_relative_error: grad_err,
            tolerance: GRAD_TOLERANCE,
            pass: grad_err < GRAD_TOLERANCE,
        },
        CheckRow {
            quantity: "hessian",
            max_relative_error: hess_err,
            tolerance: HESSIAN_TOLERANCE,
            pass: hess_err < HESSIAN_TOLERANCE,
        },
    ])
}

fn run_gradcheck(r: &Resolved, quiet: bool) -> Result<(), CliError> {
    let data = r.dataset().map_err(numerical("generate"))?;
    let arch = r.config.architecture;
    let w = mlp::random_init(arch, &ParameterMask::all_free(arch), r.config.seed);
    let rows = gradcheck_rows(&w, &data).map_err(numerical("cost"))?;
    write_outputs(
        &r.config.output_dir,
        vec![("gradcheck.json", json(r, "gradcheck", &rows)?)],
    )?;
    if !quiet {
        println!(
            "{:<10} {:>16} {:>10} {:>6}",
            "quantity", "max rel. error", "tolerance", "status"
        );
        for row in &rows {
            println!(
                "{:<10} {:>16.3e} {:>10.0e} {:>6}",
                row.quantity,
                row.max_relative_error,
                row.tolerance,
                if row.pass { "PASS" } else { "FAIL" }
            );
        }
    }
    if rows.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(CliError::Numerical(
            "analytic derivatives disagree with finite differences".into(),
        ))
    }
}

type Runner = fn(&Resolved, bool) -> Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, run): (&str, &Common, Runner) = match &cli.command {
        Command::Fit(c) => ("fit", c, run_fit),
        Command::Test(c) => ("test", c, run_test),
        Command::Simulate(c) => ("simulate", c, run_simulate),
        Command::Gradcheck(c) => ("gradcheck", c, run_gradcheck),
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        reps: common.reps,
    };
    let outcome = config::load(&common.config, name, &overrides).and_then(|resolved| run(&resolved, common.quiet));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("detmlp {name}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
