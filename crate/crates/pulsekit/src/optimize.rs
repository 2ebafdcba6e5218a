//! Bounded quasi-Newton driver: projected L-BFGS with a backtracking
//! sufficient-decrease line search along the projected path. The core
//! iteration works on any (value, gradient) evaluator; a wrapper ties it
//! to the gate-design objective and its adjoint gradient.

use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::adjoint_engine::{compute_gradient, AccumulationMethod};
use crate::controls::Problem;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::hermite_integrator::{HermiteScheme, KrylovOptions, TimeGrid};
use crate::objectives::{GateTarget, ObjectiveConfig};
use crate::state_core::RealStateMatrix;

/// Stopping rules and quasi-Newton configuration.
#[derive(Clone, Debug)]
pub struct OptimizeOptions {
    /// Per-parameter [lo, hi] box; `None` means unconstrained.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub max_iterations: usize,
    pub max_wall_time: Option<Duration>,
    /// Stop when the projected-gradient step ‖P(x − ∇f) − x‖₂ falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step decreases the objective by less than
    /// this fraction of max(1, |f|).
    pub objective_decrease_tolerance: f64,
    /// Stop as soon as the objective reaches this value.
    pub target_objective: Option<f64>,
    /// Number of curvature pairs kept for the two-loop recursion.
    pub memory: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            bounds: None,
            max_iterations: 500,
            max_wall_time: None,
            gradient_tolerance: 1e-8,
            objective_decrease_tolerance: 1e-14,
            target_objective: None,
            memory: 10,
        }
    }
}

impl OptimizeOptions {
    pub fn validate(&self, n_params: usize) -> Result<()> {
        if let Some(bounds) = &self.bounds {
            if bounds.len() != n_params {
                return Err(Error::Optimize(format!(
                    "{} bound pairs for {n_params} parameters",
                    bounds.len()
                )));
            }
            for (k, (lo, hi)) in bounds.iter().enumerate() {
                if !(lo <= hi) {
                    return Err(Error::Optimize(format!(
                        "bound {k} has lo {lo} > hi {hi}"
                    )));
                }
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::Optimize("max_iterations must be positive".into()));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.objective_decrease_tolerance > 0.0) {
            return Err(Error::Optimize("tolerances must be positive".into()));
        }
        if self.memory == 0 {
            return Err(Error::Optimize("memory must be at least 1".into()));
        }
        Ok(())
    }
}

/// Why the iteration stopped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    ObjectiveDecrease,
    TargetObjective,
    IterationLimit,
    TimeLimit,
    /// No step along the projected descent path produced sufficient
    /// decrease (objective is flat to machine precision along it).
    LineSearchExhausted,
    /// An objective/gradient evaluation failed; the trace up to that
    /// point is returned with the last accepted iterate.
    EvaluationFailure(String),
}

/// One row of the iteration log. `gradient_norm` is the projected-gradient
/// step norm ‖P(x − ∇f) − x‖₂; `step_length` is the accepted line-search
/// parameter of the step that produced this iterate (0 for the first row);
/// `wall_time` is cumulative.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub infidelity: f64,
    pub guard_value: f64,
    pub gradient_norm: f64,
    pub step_length: f64,
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct OptimizeTrace {
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

/// One objective/gradient evaluation. `infidelity` and `guard` only feed
/// the iteration log; the optimizer decides on `value` and `grad`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub infidelity: f64,
    pub guard: f64,
    pub grad: Vec<f64>,
}

fn project(x: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(bounds) = bounds {
        for (xi, (lo, hi)) in x.iter_mut().zip(bounds) {
            *xi = xi.clamp(*lo, *hi);
        }
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ‖P(x − g) − x‖₂: zero exactly at a stationary point of the box-
/// constrained problem.
fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: Option<&[(f64, f64)]>) -> f64 {
    let mut step: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - gi).collect();
    project(&mut step, bounds);
    step.iter()
        .zip(x)
        .map(|(s, xi)| (s - xi) * (s - xi))
        .sum::<f64>()
        .sqrt()
}

/// Two-loop recursion: d = −H g from the stored curvature pairs, with
/// initial scaling sᵀy/yᵀy from the most recent pair.
/// Steepest descent, damped to unit length when the gradient is large so
/// the first trial of a fresh line search stays near the iterate instead
/// of jumping by ‖∇f‖.
fn damped_steepest(g: &[f64]) -> Vec<f64> {
    let scale = -1.0 / norm2(g).max(1.0);
    g.iter().map(|v| scale * v).collect()
}

fn two_loop_direction(g: &[f64], pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    if pairs.is_empty() {
        return damped_steepest(g);
    }
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; pairs.len()];
    for (idx, (s, y)) in pairs.iter().enumerate().rev() {
        let rho = 1.0 / dot(y, s);
        let alpha = rho * dot(s, &q);
        alphas[idx] = alpha;
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
    }
    let (s_last, y_last) = pairs.last().unwrap();
    let gamma = dot(s_last, y_last) / dot(y_last, y_last);
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for (idx, (s, y)) in pairs.iter().enumerate() {
        let rho = 1.0 / dot(y, s);
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alphas[idx] - beta) * si;
        }
    }
    for v in q.iter_mut() {
        *v = -*v;
    }
    q
}

const ARMIJO_C1: f64 = 1e-4;
const CONTRACTION: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

/// Projected L-BFGS on an arbitrary evaluator. Every trial point is the
/// box projection of x + α d, and sufficient decrease is measured against
/// the actual displacement: f(x⁺) ≤ f(x) + c₁ ∇fᵀ(x⁺ − x).
pub fn minimize_projected<F>(
    mut eval: F,
    theta0: &[f64],
    opts: &OptimizeOptions,
) -> Result<(Vec<f64>, OptimizeTrace)>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    opts.validate(theta0.len())?;
    let bounds = opts.bounds.as_deref();
    if let Some(bounds) = bounds {
        for (k, (xi, (lo, hi))) in theta0.iter().zip(bounds).enumerate() {
            if xi < lo || xi > hi {
                return Err(Error::Optimize(format!(
                    "initial parameter {k} = {xi} outside [{lo}, {hi}]"
                )));
            }
        }
    }

    let started = Instant::now();
    let mut trace = OptimizeTrace {
        iterations: Vec::new(),
        termination: Termination::IterationLimit,
    };
    let mut x = theta0.to_vec();

    let mut current = match eval(&x) {
        Ok(e) => e,
        Err(err) => {
            trace.termination = Termination::EvaluationFailure(err.to_string());
            return Ok((x, trace));
        }
    };
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut last_step = 0.0;
    let mut pending_stop: Option<Termination> = None;

    for iteration in 0..=opts.max_iterations {
        let pg_norm = projected_gradient_norm(&x, &current.grad, bounds);
        trace.iterations.push(IterationRecord {
            iteration,
            objective: current.value,
            infidelity: current.infidelity,
            guard_value: current.guard,
            gradient_norm: pg_norm,
            step_length: last_step,
            wall_time: started.elapsed(),
        });

        if let Some(target) = opts.target_objective {
            if current.value <= target {
                trace.termination = Termination::TargetObjective;
                return Ok((x, trace));
            }
        }
        if let Some(stop) = pending_stop.take() {
            trace.termination = stop;
            return Ok((x, trace));
        }
        if pg_norm <= opts.gradient_tolerance {
            trace.termination = Termination::GradientTolerance;
            return Ok((x, trace));
        }
        if let Some(limit) = opts.max_wall_time {
            if started.elapsed() >= limit {
                trace.termination = Termination::TimeLimit;
                return Ok((x, trace));
            }
        }
        if iteration == opts.max_iterations {
            trace.termination = Termination::IterationLimit;
            return Ok((x, trace));
        }

        // Direction: two-loop recursion, falling back to steepest descent
        // if the quasi-Newton direction fails to descend.
        let mut d = two_loop_direction(&current.grad, &pairs);
        if dot(&d, &current.grad) >= 0.0 {
            pairs.clear();
            d = damped_steepest(&current.grad);
        }

        // Backtracking along the projected path.
        let mut tried_steepest = false;
        let (x_new, eval_new, alpha) = 'search: loop {
            let mut alpha = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                project(&mut xt, bounds);
                let displacement: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
                if norm2(&displacement) == 0.0 {
                    break; // fully blocked by the box
                }
                let predicted = dot(&current.grad, &displacement);
                match eval(&xt) {
                    Ok(trial) => {
                        if trial.value.is_finite()
                            && trial.value <= current.value + ARMIJO_C1 * predicted
                            && predicted < 0.0
                        {
                            break 'search (xt, trial, alpha);
                        }
                    }
                    Err(err) => {
                        trace.termination = Termination::EvaluationFailure(err.to_string());
                        return Ok((x, trace));
                    }
                }
                alpha *= CONTRACTION;
            }
            if !tried_steepest && !pairs.is_empty() {
                // Quasi-Newton step failed everywhere: drop the memory and
                // retry once along the raw gradient.
                tried_steepest = true;
                pairs.clear();
                d = damped_steepest(&current.grad);
                continue 'search;
            }
            trace.termination = Termination::LineSearchExhausted;
            return Ok((x, trace));
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = eval_new.grad.iter().zip(&current.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if pairs.len() == opts.memory {
                pairs.remove(0);
            }
            pairs.push((s, y));
        }

        let decrease = current.value - eval_new.value;
        if decrease <= opts.objective_decrease_tolerance * current.value.abs().max(1.0) {
            pending_stop = Some(Termination::ObjectiveDecrease);
        }
        x = x_new;
        current = eval_new;
        last_step = alpha;
    }
    unreachable!("loop exits through a termination branch");
}

/// Gate-design optimization: minimize the composite objective over the
/// control parameters using adjoint gradients.
#[allow(clippy::too_many_arguments)]
pub fn optimize(
    problem: &Problem,
    theta0: &[f64],
    config: &ObjectiveConfig,
    scheme: &HermiteScheme,
    grid: &TimeGrid,
    initial: &RealStateMatrix,
    target: &GateTarget,
    opts: &OptimizeOptions,
    krylov: &KrylovOptions,
    method: AccumulationMethod,
    mode: ExecMode,
) -> Result<(Vec<f64>, OptimizeTrace)> {
    let n_params = theta0.len();
    let eval = |theta: &[f64]| {
        match compute_gradient(
            problem, theta, scheme, grid, initial, config, target, krylov, method, mode,
        ) {
            Ok((parts, report)) => Ok(Evaluation {
                value: parts.total,
                infidelity: parts.infidelity,
                guard: parts.guard_penalty,
                grad: report.grad,
            }),
            // A diverged linear solve marks the trial point unevaluable
            // rather than aborting: the infinite objective fails the
            // sufficient-decrease test and the line search backtracks into
            // the solvable region. Structural errors stay fatal.
            Err(Error::SolveFailed { .. }) => Ok(Evaluation {
                value: f64::INFINITY,
                infidelity: f64::INFINITY,
                guard: 0.0,
                grad: vec![0.0; n_params],
            }),
            Err(e) => Err(e),
        }
    };
    minimize_projected(eval, theta0, opts)
}

/// Uniform random starting controls in [−amplitude, amplitude],
/// deterministic under the seed.
pub fn random_initial_controls(n_params: usize, amplitude: f64, seed: u64) -> Result<Vec<f64>> {
    if !(amplitude >= 0.0) {
        return Err(Error::Optimize(format!(
            "amplitude must be non-negative, got {amplitude}"
        )));
    }
    if amplitude == 0.0 {
        return Ok(vec![0.0; n_params]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_params)
        .map(|_| rng.gen_range(-amplitude..=amplitude))
        .collect())
}
