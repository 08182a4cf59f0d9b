//! Convergence-rate experiments: the a-priori parameter choice, sweeps over
//! noise levels, and log-log slope fits.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bregman::{bregman_poly, poly_subgradient, PolySubgradient, SourceConditionParams};
use crate::config::{Config, Start, SubgradientChoice};
use crate::error::{Error, Result};
use crate::field::{energy, random_smooth_field, MatrixField};
use crate::grid::Grid;
use crate::integrands::Integrand;
use crate::parallel::Execution;
use crate::registration::{add_noise, lq_distance, rotation_field, warp, warp_clamped, ScalarImage};
use crate::solver::{minimize, SolverOptions, TikhonovProblem};

/// `α(δ) = α₀ δ^{q−1}` for `q > 1` and `α₀ δ^ε` for `q = 1`.
pub fn choose_alpha(delta: f64, q: f64, alpha0: f64, epsilon: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::domain(format!("delta must be positive, got {delta}")));
    }
    if !(q >= 1.0) {
        return Err(Error::domain(format!("q must be >= 1, got {q}")));
    }
    if q == 1.0 {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::domain(format!("epsilon must lie in [0, 1), got {epsilon}")));
        }
        Ok(alpha0 * delta.powf(epsilon))
    } else {
        Ok(alpha0 * delta.powf(q - 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub rows: usize,
}

/// Least squares fit of `log value = slope·log δ + intercept` over the rows
/// with positive values.
pub fn fit_slope(rows: &[(f64, f64)]) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(d, v)| *d > 0.0 && *v > 0.0)
        .map(|(d, v)| (d.ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("all deltas are equal, slope is undefined"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
        rows: pts.len(),
    })
}

/// A sweep over `δ_k = δ₀ 2^{−k}`, `k = 1..levels`, for registration by the
/// rotation `u†`, plus an exact-data row.
#[derive(Debug, Clone)]
pub struct RateExperiment {
    pub integrand: Arc<dyn Integrand>,
    pub grid: Grid,
    pub reference: ScalarImage,
    pub u_dagger: MatrixField,
    pub exact_data: ScalarImage,
    pub w: PolySubgradient,
    pub source: SourceConditionParams,
    pub q: f64,
    pub delta0: f64,
    pub levels: usize,
    pub alpha0: f64,
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    pub solver: SolverOptions,
    pub starts: Vec<Start>,
    pub random_amplitude: f64,
    pub fit_levels: usize,
    pub warnings: Vec<String>,
}

impl RateExperiment {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.build_grid()?;
        let integrand = cfg.build_integrand()?;
        let reference = cfg.reference_image(&grid);
        let e = &cfg.experiment;
        let rot = rotation_field(e.theta, &grid);
        let mut warnings: Vec<String> = rot.warning.into_iter().collect();
        let u_dagger = rot.field;
        let exact_data = warp(&reference, &u_dagger)?;
        let r_dagger = energy(&u_dagger, integrand.as_ref())?.value;
        let w = match e.subgradient {
            SubgradientChoice::Zero => {
                PolySubgradient::zero(integrand.layout().clone(), u_dagger.clone(), r_dagger)?
            }
            SubgradientChoice::Integrand => poly_subgradient(integrand.as_ref(), &u_dagger)?,
        };
        let alpha_bar = cfg.alpha_bar();
        let rho = e.rho.unwrap_or(10.0 * alpha_bar * r_dagger);
        let source = SourceConditionParams::new(e.beta1, e.beta2, rho, alpha_bar)?;
        source.check_against(r_dagger)?;
        if e.levels < e.fit_levels {
            warnings.push(format!(
                "only {} levels, fewer than the {} used for the fit",
                e.levels, e.fit_levels
            ));
        }
        Ok(RateExperiment {
            integrand,
            grid,
            reference,
            u_dagger,
            exact_data,
            w,
            source,
            q: e.q,
            delta0: e.delta0,
            levels: e.levels,
            alpha0: e.alpha0,
            epsilon: e.epsilon,
            seeds: e.seeds.clone(),
            solver: cfg.solver.options(),
            starts: cfg.solver.starts.clone(),
            random_amplitude: cfg.solver.random_amplitude,
            fit_levels: e.fit_levels,
            warnings,
        })
    }

    /// `δ₀ 2^{−k}` for `k = 1..=levels`, largest first.
    pub fn delta_levels(&self) -> Vec<f64> {
        (1..=self.levels).map(|k| self.delta0 * 0.5f64.powi(k as i32)).collect()
    }

    fn alpha(&self, delta: f64) -> Result<f64> {
        let alpha = choose_alpha(delta, self.q, self.alpha0, self.epsilon)?;
        if self.q == 1.0 && self.epsilon == 0.0 && !(alpha * self.source.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "q = 1 with epsilon = 0 needs alpha*beta2 < 1, got {}",
                alpha * self.source.beta2
            )));
        }
        Ok(alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub delta: f64,
    pub alpha: f64,
    pub seed: u64,
    pub d_poly: f64,
    /// `‖K(u^δ_α) − v^δ‖_{L^q}`.
    pub residual: f64,
    pub objective: f64,
    pub iterations: usize,
    /// False if the solver hit its iteration cap or the minimizer is not
    /// admissible; such rows are excluded from fits.
    pub converged: bool,
    /// `R(u^δ_α)`.
    pub energy: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Exact-data rows (`δ = 0`), excluded from fits.
    pub sanity: Vec<RateRow>,
    pub r_dagger: f64,
    /// Fits over the smallest `fit_levels` levels.
    pub d_fit: Option<SlopeFit>,
    pub residual_fit: Option<SlopeFit>,
    /// Fits over all levels.
    pub d_fit_full: Option<SlopeFit>,
    pub residual_fit_full: Option<SlopeFit>,
    pub fit_range: [f64; 2],
    pub excluded_zero: usize,
    pub excluded_unconverged: usize,
    pub warnings: Vec<String>,
}

fn derive_seed(seed: u64, level: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((level as u64) << 8)
        .wrapping_add(stream)
}

struct Solved {
    u: MatrixField,
    objective: f64,
    iterations: usize,
    converged: bool,
}

/// Solves from every start and keeps the lowest objective (first wins ties).
fn solve_multistart(
    exp: &RateExperiment,
    problem: &TikhonovProblem,
    starts: &[MatrixField],
) -> Result<Solved> {
    let mut best: Option<Solved> = None;
    for s in starts {
        let p = problem.restarted(s.clone())?;
        let m = minimize(&p, &exp.solver)?;
        if best.as_ref().is_none_or(|b| m.objective < b.objective) {
            best = Some(Solved {
                u: m.u,
                objective: m.objective,
                iterations: m.iterations,
                converged: m.converged,
            });
        }
    }
    best.ok_or_else(|| Error::Config("no start fields".into()))
}

fn evaluate_row(
    exp: &RateExperiment,
    delta: f64,
    alpha: f64,
    seed: u64,
    data: &ScalarImage,
    solved: &Solved,
    started: Instant,
) -> Result<RateRow> {
    let f = exp.integrand.as_ref();
    let (ku, admissible) = match warp(&exp.reference, &solved.u) {
        Ok(img) => (img, true),
        Err(Error::DomainViolation { .. }) => (warp_clamped(&exp.reference, &solved.u), false),
        Err(e) => return Err(e),
    };
    Ok(RateRow {
        delta,
        alpha,
        seed,
        d_poly: bregman_poly(f, &solved.u, &exp.u_dagger, &exp.w)?,
        residual: lq_distance(&ku, data, exp.q)?,
        objective: solved.objective,
        iterations: solved.iterations,
        converged: solved.converged && admissible,
        energy: energy(&solved.u, f)?.value,
        wallclock: started.elapsed().as_secs_f64(),
    })
}

/// One seed's chain over all levels, largest `δ` first, warm-starting each
/// level from the previous minimizer.
fn run_chain(exp: &RateExperiment, seed: u64) -> Result<Vec<RateRow>> {
    let id = MatrixField::identity(&exp.grid);
    let mut rows = Vec::with_capacity(exp.levels);
    let mut warm: Option<MatrixField> = None;
    for (k, delta) in exp.delta_levels().into_iter().enumerate() {
        let started = Instant::now();
        let alpha = exp.alpha(delta)?;
        let noisy = add_noise(&exp.exact_data, delta, exp.q, derive_seed(seed, k, 0))?;
        let mut starts = Vec::new();
        for s in &exp.starts {
            match s {
                Start::Identity => starts.push(id.clone()),
                Start::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k, 1));
                    let phi = random_smooth_field(&exp.grid, 2, 3, exp.random_amplitude, &mut rng)?;
                    starts.push(id.add_scaled(&phi, 1.0)?);
                }
                Start::Warm => {
                    if let Some(w) = &warm {
                        starts.push(w.clone());
                    }
                }
            }
        }
        let problem = TikhonovProblem::new(
            exp.integrand.clone(),
            exp.reference.clone(),
            noisy.image.clone(),
            exp.q,
            alpha,
            id.clone(),
        )?;
        let solved = solve_multistart(exp, &problem, &starts)?;
        rows.push(evaluate_row(exp, delta, alpha, seed, &noisy.image, &solved, started)?);
        warm = Some(solved.u);
    }
    Ok(rows)
}

fn sanity_row(exp: &RateExperiment) -> Result<RateRow> {
    let started = Instant::now();
    let smallest = exp.delta0 * 0.5f64.powi(exp.levels as i32);
    let alpha = exp.alpha(smallest)?;
    let problem = TikhonovProblem::new(
        exp.integrand.clone(),
        exp.reference.clone(),
        exp.exact_data.clone(),
        exp.q,
        alpha,
        exp.u_dagger.clone(),
    )?;
    let mut starts = vec![exp.u_dagger.clone()];
    if exp.starts.contains(&Start::Identity) {
        starts.push(MatrixField::identity(&exp.grid));
    }
    let solved = solve_multistart(exp, &problem, &starts)?;
    evaluate_row(exp, 0.0, alpha, 0, &exp.exact_data, &solved, started)
}

/// Runs every seed chain (in parallel) and the exact-data row, then fits
/// slopes of `D^poly` and of the residual against `δ`.
pub fn run_rates(exp: &RateExperiment) -> Result<RateReport> {
    let chains = Execution::default().map(exp.seeds.len(), |i| run_chain(exp, exp.seeds[i]));
    let chains: Vec<Vec<RateRow>> = chains.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(exp.levels * exp.seeds.len());
    for k in 0..exp.levels {
        for chain in &chains {
            rows.push(chain[k].clone());
        }
    }
    let sanity = vec![sanity_row(exp)?];
    let r_dagger = energy(&exp.u_dagger, exp.integrand.as_ref())?.value;

    let levels = exp.delta_levels();
    let cut = levels[levels.len().saturating_sub(exp.fit_levels)..]
        .first()
        .copied()
        .unwrap_or(f64::INFINITY);
    let fit_range = [*levels.last().unwrap_or(&0.0), cut];
    let usable: Vec<&RateRow> = rows.iter().filter(|r| r.converged).collect();
    let excluded_unconverged = rows.len() - usable.len();
    let excluded_zero = usable.iter().filter(|r| !(r.d_poly > 0.0)).count();
    let pick = |full: bool, value: fn(&RateRow) -> f64| -> Vec<(f64, f64)> {
        usable
            .iter()
            .filter(|r| full || r.delta <= cut)
            .map(|r| (r.delta, value(r)))
            .collect()
    };
    let mut warnings = exp.warnings.clone();
    let mut fit = |full: bool, name: &str, value: fn(&RateRow) -> f64| match fit_slope(&pick(full, value)) {
        Ok(f) => Some(f),
        Err(e) => {
            warnings.push(format!("{name} fit unavailable: {e}"));
            None
        }
    };
    let d_fit = fit(false, "D_poly", |r| r.d_poly);
    let residual_fit = fit(false, "residual", |r| r.residual);
    let d_fit_full = fit(true, "full-range D_poly", |r| r.d_poly);
    let residual_fit_full = fit(true, "full-range residual", |r| r.residual);
    if excluded_unconverged > 0 {
        warnings.push(format!("{excluded_unconverged} rows did not converge and were excluded"));
    }
    Ok(RateReport {
        rows,
        sanity,
        r_dagger,
        d_fit,
        residual_fit,
        d_fit_full,
        residual_fit_full,
        fit_range,
        excluded_zero,
        excluded_unconverged,
        warnings,
    })
}

/// Lower and upper bound of the slope range that counts as the linear rate.
pub const LINEAR_RATE: [f64; 2] = [0.8, 1.2];

impl RateReport {
    /// Mean of `value` per level, largest `δ` first.
    pub fn level_means(&self, value: fn(&RateRow) -> f64) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.delta => {
                    last.1 += value(r);
                    last.2 += 1;
                }
                _ => out.push((r.delta, value(r), 1)),
            }
        }
        out.into_iter().map(|(d, s, n)| (d, s / n as f64)).collect()
    }

    /// True when the mean `D^poly` strictly decreases with `δ`.
    pub fn d_monotone(&self) -> bool {
        self.level_means(|r| r.d_poly).windows(2).all(|w| w[1].1 < w[0].1)
    }

    /// Slope above the linear range with monotone `D`: consistent with an
    /// `O(δ)` bound, reported with a warning.
    pub fn d_superlinear(&self) -> bool {
        self.d_fit.is_some_and(|f| f.slope > LINEAR_RATE[1]) && self.d_monotone()
    }

    pub fn d_rate_ok(&self) -> bool {
        self.d_fit.is_some_and(|f| {
            (LINEAR_RATE[0]..=LINEAR_RATE[1]).contains(&f.slope) || self.d_superlinear()
        })
    }

    pub fn residual_rate_ok(&self) -> bool {
        self.residual_fit
            .is_some_and(|f| (LINEAR_RATE[0]..=LINEAR_RATE[1]).contains(&f.slope))
    }

    /// `delta,alpha,seed,D_poly,residual,objective,iters,converged`, noisy
    /// levels first, then the exact-data rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,alpha,seed,D_poly,residual,objective,iters,converged\n");
        for r in self.rows.iter().chain(&self.sanity) {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.delta, r.alpha, r.seed, r.d_poly, r.residual, r.objective, r.iterations, r.converged
            )
            .unwrap();
        }
        out
    }

    pub fn slopes_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Slopes<'a> {
            d_poly: Option<SlopeFit>,
            residual: Option<SlopeFit>,
            d_poly_full: Option<SlopeFit>,
            residual_full: Option<SlopeFit>,
            fit_range: [f64; 2],
            excluded_zero: usize,
            excluded_unconverged: usize,
            d_monotone: bool,
            superlinear: bool,
            warnings: &'a [String],
        }
        let s = Slopes {
            d_poly: self.d_fit,
            residual: self.residual_fit,
            d_poly_full: self.d_fit_full,
            residual_full: self.residual_fit_full,
            fit_range: self.fit_range,
            excluded_zero: self.excluded_zero,
            excluded_unconverged: self.excluded_unconverged,
            d_monotone: self.d_monotone(),
            superlinear: self.d_superlinear(),
            warnings: &self.warnings,
        };
        Ok(serde_json::to_string_pretty(&s)? + "\n")
    }

    /// Writes the CSV to `csv` and `slopes.json` next to it.
    pub fn write(&self, csv: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv())?;
        let dir = csv.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::write(dir.join("slopes.json"), self.slopes_json()?)?;
        Ok(())
    }
}
