use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::json;

use polyreg::bregman::{bregman_poly, poly_subgradient, verify_subgradient};
use polyreg::config::{Config, Start};
use polyreg::field::{energy, MatrixField};
use polyreg::gradcheck::{run_suite, suite_integrands};
use polyreg::io::{write_certificate, write_field_csv, write_pgm};
use polyreg::rates::{choose_alpha, run_rates, RateExperiment};
use polyreg::registration::{add_noise, lq_distance, rotation_field, warp, warp_clamped};
use polyreg::solver::{minimize, TikhonovProblem};
use polyreg::Result;

#[derive(Parser)]
#[command(name = "polyreg", version, about = "Registration with polyconvex regularizers")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of the energy gradients. Exit 0 iff all pass.
    CheckGradient {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        fields: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// A single regularized solve at noise level `delta`.
    Register {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the parameter choice rule.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Full convergence-rate sweep; writes the report CSV and slopes.json.
    Rates {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sampled certificate of the subgradient at the exact rotation. Exit 0
    /// iff there are no violations.
    VerifySubgradient {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the certificate bundle here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn check_gradient(cfg: &Config, fields: usize, n: usize, seed: u64) -> Result<bool> {
    let mut integrands = suite_integrands()?;
    let configured = cfg.build_integrand()?;
    if !integrands
        .iter()
        .any(|f| f.name() == configured.name() && f.parameters() == configured.parameters())
    {
        integrands.push(configured);
    }
    let checks = run_suite(&integrands, fields, n, seed)?;
    let mut ok = true;
    for c in &checks {
        println!(
            "{} {}: relative error {:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.relative_error
        );
        ok &= c.passed;
    }
    Ok(ok)
}

fn register(cfg: &Config, delta: f64, out: &Path, seed: u64, alpha: Option<f64>) -> Result<()> {
    let exp = RateExperiment::from_config(cfg)?;
    let e = &cfg.experiment;
    let alpha = match alpha {
        Some(a) => a,
        None if delta > 0.0 => choose_alpha(delta, e.q, e.alpha0, e.epsilon)?,
        None => choose_alpha(e.delta0 * 0.5f64.powi(e.levels as i32), e.q, e.alpha0, e.epsilon)?,
    };
    let noisy = add_noise(&exp.exact_data, delta, e.q, seed)?;
    let id = MatrixField::identity(&exp.grid);
    let problem = TikhonovProblem::new(
        exp.integrand.clone(),
        exp.reference.clone(),
        noisy.image.clone(),
        e.q,
        alpha,
        id.clone(),
    )?;
    let mut best = None;
    for s in &cfg.solver.starts {
        let start = match s {
            Start::Identity => id.clone(),
            Start::Random => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let phi = polyreg::field::random_smooth_field(&exp.grid, 2, 3, cfg.solver.random_amplitude, &mut rng)?;
                id.add_scaled(&phi, 1.0)?
            }
            Start::Warm => continue,
        };
        let m = minimize(&problem.restarted(start)?, &cfg.solver.options())?;
        log::info!("start {s:?}: objective {} after {} iterations", m.objective, m.iterations);
        if best.as_ref().is_none_or(|b: &polyreg::solver::Minimizer| m.objective < b.objective) {
            best = Some(m);
        }
    }
    let m = best.ok_or_else(|| polyreg::Error::Config("no usable start in solver.starts".into()))?;
    let (ku, admissible) = match warp(&exp.reference, &m.u) {
        Ok(img) => (img, true),
        Err(err) => {
            log::warn!("{err}");
            (warp_clamped(&exp.reference, &m.u), false)
        }
    };
    std::fs::create_dir_all(out)?;
    write_field_csv(&out.join("field.csv"), &m.u)?;
    write_pgm(&out.join("warped.pgm"), &ku)?;
    write_pgm(&out.join("data.pgm"), &noisy.image)?;
    let f = exp.integrand.as_ref();
    let summary = json!({
        "delta": delta,
        "alpha": alpha,
        "seed": seed,
        "objective": m.objective,
        "iterations": m.iterations,
        "converged": m.converged,
        "stop_reason": m.reason,
        "admissible": admissible,
        "energy": energy(&m.u, f)?.value,
        "energy_exact": energy(&exp.u_dagger, f)?.value,
        "D_poly": bregman_poly(f, &m.u, &exp.u_dagger, &exp.w)?,
        "residual": lq_distance(&ku, &noisy.image, e.q)?,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn rates(cfg: &Config, out: &Path) -> Result<()> {
    let exp = RateExperiment::from_config(cfg)?;
    let report = run_rates(&exp)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    report.write(out)?;
    for (name, fit) in [("D_poly", report.d_fit), ("residual", report.residual_fit)] {
        match fit {
            Some(f) => println!("{name}: slope {:.4} (r2 {:.4}, {} rows)", f.slope, f.r2, f.rows),
            None => println!("{name}: no fit"),
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if report.d_superlinear() {
        log::warn!("D_poly decays faster than linearly; consistent with an O(delta) bound");
    }
    Ok(())
}

fn verify(cfg: &Config, out: Option<&Path>) -> Result<bool> {
    let grid = cfg.build_grid()?;
    let f: Arc<dyn polyreg::integrands::Integrand> = cfg.build_integrand()?;
    let rot = rotation_field(cfg.experiment.theta, &grid);
    if let Some(w) = &rot.warning {
        log::warn!("{w}");
    }
    let w = poly_subgradient(f.as_ref(), &rot.field)?;
    let report = verify_subgradient(f.as_ref(), &w, &cfg.certificate)?;
    if let Some(dir) = out {
        write_certificate(dir, &w, &cfg.certificate)?;
    }
    println!(
        "{} trials, {} violations, worst gap {:e}",
        report.trials, report.violations, report.worst_gap
    );
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::CheckGradient {
            config,
            fields,
            n,
            seed,
        } => load(config).and_then(|c| check_gradient(&c, *fields, *n, *seed)),
        Command::Register {
            config,
            delta,
            out,
            seed,
            alpha,
        } => load(config).and_then(|c| register(&c, *delta, out, *seed, *alpha)).map(|_| true),
        Command::Rates { config, out } => load(config).and_then(|c| rates(&c, out)).map(|_| true),
        Command::VerifySubgradient { config, out } => {
            load(config).and_then(|c| verify(&c, out.as_deref()))
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
