//! Minimization of the Tikhonov functional
//! `T_α(u; v^δ) = ‖K(u) − v^δ‖^q + α R(u)` by limited-memory BFGS with
//! Armijo backtracking.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{energy, energy_and_gradient, MatrixField};
use crate::integrands::Integrand;
use crate::parallel::Execution;
use crate::registration::{data_term, misfit_and_gradient, warp_clamped, ScalarImage};

const ARMIJO_C1: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 50;
const STALL_WINDOW: usize = 5;
/// Largest nodal displacement of the first (steepest-descent) trial step.
const FIRST_STEP: f64 = 1e-2;

/// A smooth function on `ℝ^d`.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Value at `x`, writing the gradient into `grad`. `+∞` marks points
    /// outside the effective domain; `grad` is then unspecified.
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Size of a gradient used by the stopping test.
    fn stationarity(&self, grad: &[f64]) -> f64 {
        grad.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            max_iter: 3000,
            memory: 10,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("solver tol must be positive, got {}", self.tol)));
        }
        if self.memory == 0 {
            return Err(Error::Config("solver memory must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Gradient,
    Stalled,
    LineSearch,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub reason: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: `d = −H g`.
fn direction(pairs: &VecDeque<Pair>, g: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = pairs.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (p, a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

/// Minimizes `obj` from `x0`. Every accepted step satisfies the Armijo
/// condition, so the objective never increases between iterates.
pub fn lbfgs(obj: &dyn Objective, x0: Vec<f64>, opts: &SolverOptions) -> Result<LbfgsResult> {
    opts.validate()?;
    let n = obj.dim();
    if x0.len() != n {
        return Err(Error::mismatch(format!("start has {} entries, expected {n}", x0.len())));
    }
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = obj.evaluate(&x, &mut g)?;
    if !f.is_finite() {
        return Err(Error::Contract("objective is not finite at the start".into()));
    }
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let mut history: VecDeque<f64> = VecDeque::with_capacity(STALL_WINDOW + 1);
    history.push_back(f);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    let finish = |x, value, iterations, reason| LbfgsResult {
        x,
        value,
        iterations,
        converged: reason != StopReason::MaxIter,
        reason,
    };

    for iter in 0..opts.max_iter {
        if obj.stationarity(&g) < opts.tol {
            return Ok(finish(x, f, iter, StopReason::Gradient));
        }
        let mut d = direction(&pairs, &g);
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&d, &g);
        }
        let mut t = if pairs.is_empty() {
            FIRST_STEP / sup(&d).max(f64::MIN_POSITIVE)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for ((xn, xi), di) in x_new.iter_mut().zip(&x).zip(&d) {
                *xn = xi + t * di;
            }
            let fn_ = obj.evaluate(&x_new, &mut g_new)?;
            if fn_.is_finite() && fn_ <= f + ARMIJO_C1 * t * slope {
                accepted = Some(fn_);
                break;
            }
            t *= SHRINK;
        }
        let Some(f_next) = accepted else {
            if pairs.is_empty() {
                return Ok(finish(x, f, iter, StopReason::LineSearch));
            }
            pairs.clear();
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_next;

        history.push_back(f);
        if history.len() > STALL_WINDOW + 1 {
            history.pop_front();
        }
        if history.len() == STALL_WINDOW + 1 {
            let drop = history[0] - f;
            if drop <= opts.tol * opts.tol * f.abs().max(f64::MIN_POSITIVE) {
                return Ok(finish(x, f, iter + 1, StopReason::Stalled));
            }
        }
    }
    let reason = if obj.stationarity(&g) < opts.tol {
        StopReason::Gradient
    } else {
        StopReason::MaxIter
    };
    Ok(finish(x, f, opts.max_iter, reason))
}

/// `T_α(u; v^δ)` for registration with a polyconvex regularizer. Iterates
/// are evaluated with clamped sampling.
#[derive(Debug, Clone)]
pub struct TikhonovProblem {
    integrand: Arc<dyn Integrand>,
    reference: ScalarImage,
    data: ScalarImage,
    q: f64,
    alpha: f64,
    initial: MatrixField,
    weights: Vec<f64>,
    exec: Execution,
}

impl TikhonovProblem {
    pub fn new(
        integrand: Arc<dyn Integrand>,
        reference: ScalarImage,
        data: ScalarImage,
        q: f64,
        alpha: f64,
        initial: MatrixField,
    ) -> Result<Self> {
        if !(q >= 1.0) {
            return Err(Error::domain(format!("data exponent q must be >= 1, got {q}")));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
        }
        let grid = initial.grid();
        reference.grid().check_same(grid, "reference image")?;
        data.grid().check_same(grid, "data")?;
        if initial.ncomp() != 2 {
            return Err(Error::mismatch("deformations must have 2 components"));
        }
        let weights = grid.node_weights();
        let problem = TikhonovProblem {
            integrand,
            reference,
            data,
            q,
            alpha,
            initial,
            weights,
            exec: Execution::default(),
        };
        if !problem.objective(&problem.initial)?.is_finite() {
            return Err(Error::Contract(
                "initial field has infinite objective, dom R ∩ D(K) is not witnessed".into(),
            ));
        }
        Ok(problem)
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// The same problem started from `initial`.
    pub fn restarted(&self, initial: MatrixField) -> Result<Self> {
        TikhonovProblem::new(
            self.integrand.clone(),
            self.reference.clone(),
            self.data.clone(),
            self.q,
            self.alpha,
            initial,
        )
        .map(|p| p.with_execution(self.exec))
    }

    pub fn integrand(&self) -> &dyn Integrand {
        self.integrand.as_ref()
    }

    pub fn reference(&self) -> &ScalarImage {
        &self.reference
    }

    pub fn data(&self) -> &ScalarImage {
        &self.data
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn initial(&self) -> &MatrixField {
        &self.initial
    }

    /// `T_α(u)` with clamped sampling.
    pub fn objective(&self, u: &MatrixField) -> Result<f64> {
        let misfit = data_term(&warp_clamped(&self.reference, u), &self.data, self.q)?;
        Ok(misfit + self.alpha * energy(u, self.integrand.as_ref())?.value)
    }
}

impl Objective for TikhonovProblem {
    fn dim(&self) -> usize {
        self.initial.values().len()
    }

    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let u = MatrixField::from_values(self.initial.grid(), 2, x.to_vec())?;
        let (reg, rg) = match energy_and_gradient(&u, self.integrand.as_ref(), self.exec) {
            Ok(v) => v,
            Err(Error::InfiniteEnergy | Error::Integrability { .. }) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let (misfit, mg) =
            misfit_and_gradient(&self.reference, &self.data, &u, self.q, &self.weights, self.exec);
        for ((g, m), r) in grad.iter_mut().zip(&mg).zip(rg.values()) {
            *g = m + self.alpha * r;
        }
        Ok(misfit + self.alpha * reg)
    }

    /// Sup-norm of the lumped-mass gradient of `T_α/α`, i.e.
    /// `max_k |∂T/∂u_k| / (α m_k)`. Independent of the grid and of the
    /// scale of `α`.
    fn stationarity(&self, grad: &[f64]) -> f64 {
        grad.chunks(2)
            .zip(&self.weights)
            .filter(|(_, &m)| m > 0.0)
            .fold(0.0f64, |acc, (g, m)| acc.max(g[0].abs().max(g[1].abs()) / m))
            / self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct Minimizer {
    pub u: MatrixField,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub reason: StopReason,
}

pub fn minimize(problem: &TikhonovProblem, opts: &SolverOptions) -> Result<Minimizer> {
    let r = lbfgs(problem, problem.initial.values().to_vec(), opts)?;
    Ok(Minimizer {
        u: MatrixField::from_values(problem.initial.grid(), 2, r.x)?,
        objective: r.value,
        iterations: r.iterations,
        converged: r.converged,
        reason: r.reason,
    })
}
