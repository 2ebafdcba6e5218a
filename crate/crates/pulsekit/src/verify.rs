//! Measurement harnesses and independent oracles: the closed-form
//! two-level Rabi problem (propagator, sensitivities, infidelity
//! gradient), finite-difference gradients, convergence studies with rate
//! estimation, and step-count recommendation from measured error tables.

use num_complex::Complex64;

use crate::controls::{ControlEnsemble, Problem, PulseShape};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::hermite_integrator::{forward_evolve, HermiteScheme, KrylovOptions, TimeGrid};
use crate::state_core::{complex_to_real, RealStateMatrix, SparseReal, StructuredOperator};

/// 2×2 complex matrix in row-major layout.
pub type Mat2 = [[Complex64; 2]; 2];

/// Two-level system driven by H = θ₁(a + a†) + θ₂ i(a − a†) with
/// Ω = θ₁ + iθ₂, evolved for a fixed duration.
#[derive(Clone, Copy, Debug)]
pub struct RabiSpec {
    pub omega: Complex64,
    pub t_final: f64,
}

impl RabiSpec {
    pub fn new(omega: Complex64, t_final: f64) -> Result<Self> {
        if omega.norm() == 0.0 {
            return Err(Error::Verify("drive amplitude must be nonzero".into()));
        }
        if !(t_final > 0.0) {
            return Err(Error::Verify("duration must be positive".into()));
        }
        Ok(RabiSpec { omega, t_final })
    }

    /// The configuration used throughout the convergence and gradient
    /// studies: |Ω| = 0.05, phase π/4, duration 9.5 oscillation periods
    /// (T = 9.5 π/|Ω|).
    pub fn study_protocol() -> Self {
        let omega = Complex64::from_polar(0.05, std::f64::consts::FRAC_PI_4);
        RabiSpec {
            omega,
            t_final: 9.5 * std::f64::consts::PI / 0.05,
        }
    }

    pub fn theta(&self) -> [f64; 2] {
        [self.omega.re, self.omega.im]
    }

    /// Period of the population oscillation, π/|Ω|.
    pub fn period(&self) -> f64 {
        std::f64::consts::PI / self.omega.norm()
    }
}

/// Closed-form propagator: U(t) = cos(|Ω|t) I − i sin(|Ω|t) H/|Ω| for the
/// constant drive H = [[0, Ω], [Ω̄, 0]].
pub fn rabi_unitary(spec: &RabiSpec, t: f64) -> Mat2 {
    let a = spec.omega.norm();
    let (s, c) = (a * t).sin_cos();
    let phase = spec.omega / a;
    let mi = Complex64::new(0.0, -1.0);
    [
        [Complex64::new(c, 0.0), mi * phase * s],
        [mi * phase.conj() * s, Complex64::new(c, 0.0)],
    ]
}

/// Entry-wise derivatives (∂U/∂θ₁, ∂U/∂θ₂) of the closed-form propagator.
pub fn rabi_sensitivities(spec: &RabiSpec, t: f64) -> (Mat2, Mat2) {
    let t1 = spec.omega.re;
    let t2 = spec.omega.im;
    let a = spec.omega.norm();
    let (s, c) = (a * t).sin_cos();
    let i = Complex64::new(0.0, 1.0);
    let diag1 = Complex64::new(-(t1 * t) / a * s, 0.0);
    let diag2 = Complex64::new(-(t2 * t) / a * s, 0.0);

    let du1 = [
        [
            diag1,
            -(Complex64::new(t2 / a * s, 0.0) + i * t1 * t * c) / Complex64::new(t1, -t2),
        ],
        [
            (Complex64::new(t2 / a * s, 0.0) - i * t1 * t * c) / Complex64::new(t1, t2),
            diag1,
        ],
    ];
    let du2 = [
        [
            diag2,
            (Complex64::new(t2 * t * c, 0.0) + i * (t1 / a) * s) / Complex64::new(t2, t1),
        ],
        [
            -(Complex64::new(t1 / a * s, 0.0) + i * t2 * t * c) / Complex64::new(t1, t2),
            diag2,
        ],
    ];
    (du1, du2)
}

/// tr(A† B).
pub fn trace_overlap(a: &Mat2, b: &Mat2) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for r in 0..2 {
        for col in 0..2 {
            acc += a[r][col].conj() * b[r][col];
        }
    }
    acc
}

/// Trace infidelity 1 − |tr(T†U(T))|²/4 of the closed-form propagator.
pub fn rabi_infidelity(spec: &RabiSpec, target: &Mat2) -> f64 {
    let u = rabi_unitary(spec, spec.t_final);
    let ov = trace_overlap(target, &u);
    1.0 - ov.norm_sqr() / 4.0
}

/// Analytic gradient (d𝓘/dθ₁, d𝓘/dθ₂) of the trace infidelity at the
/// final time, via the closed-form sensitivities and the chain rule
/// d𝓘/dθ = −(1/2)(a·da + b·db) with a + ib = tr(T†U(T)).
pub fn rabi_infidelity_gradient(spec: &RabiSpec, target: &Mat2) -> Result<[f64; 2]> {
    if spec.omega.norm() == 0.0 {
        return Err(Error::Verify("drive amplitude must be nonzero".into()));
    }
    let u = rabi_unitary(spec, spec.t_final);
    let ov = trace_overlap(target, &u);
    let (du1, du2) = rabi_sensitivities(spec, spec.t_final);
    let d1 = trace_overlap(target, &du1);
    let d2 = trace_overlap(target, &du2);
    Ok([
        -0.5 * (ov.re * d1.re + ov.im * d1.im),
        -0.5 * (ov.re * d2.re + ov.im * d2.im),
    ])
}

/// The same two-level drive as a propagation problem: two constant
/// controls multiplying (a + a†) and i(a − a†), zero drift.
pub fn rabi_problem(duration: f64) -> Result<Problem> {
    let drift = StructuredOperator::from_k(SparseReal::zero(2));
    let sym = SparseReal::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)])?;
    let anti = SparseReal::from_triplets(2, &[(0, 1, 1.0), (1, 0, -1.0)])?;
    let ops = vec![
        StructuredOperator::from_k(sym),
        StructuredOperator::new(SparseReal::zero(2), anti)?,
    ];
    let ens = ControlEnsemble::new(vec![PulseShape::Constant, PulseShape::Constant], duration)?;
    Problem::new(drift, ops, ens)
}

/// Real-split matrix of a 2×2 complex gate (columns in order).
pub fn unitary_to_real_matrix(u: &Mat2) -> RealStateMatrix {
    let columns = (0..2)
        .map(|col| {
            let column = [u[0][col], u[1][col]];
            complex_to_real(&column)
        })
        .collect();
    let mut m = RealStateMatrix::new(columns).unwrap();
    m.essential_dim = 2;
    m
}

/// Central finite differences (J(θ+he_k) − J(θ−he_k))/2h.
pub fn finite_difference_gradient<F>(mut evaluator: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Verify(format!("step must be positive, got {h}")));
    }
    let mut grad = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    for k in 0..theta.len() {
        work[k] = theta[k] + h;
        let plus = evaluator(&work)?;
        work[k] = theta[k] - h;
        let minus = evaluator(&work)?;
        work[k] = theta[k];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative ℓ₂ distance ‖a − b‖/max(‖b‖, floor).
pub fn relative_l2_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Sweep h over {1e−4 … 1e−8} and return the finite-difference gradient
/// agreeing best with `candidate`, with its relative ℓ₂ deviation. The
/// optimal step depends on conditioning, so the sweep gives the
/// finite-difference oracle its best footing before the comparison.
pub fn finite_difference_best_h<F>(
    mut evaluator: F,
    theta: &[f64],
    candidate: &[f64],
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut best: Option<(Vec<f64>, f64)> = None;
    for exp in 4..=8 {
        let h = 10.0_f64.powi(-exp);
        let fd = finite_difference_gradient(&mut evaluator, theta, h)?;
        let err = relative_l2_error(candidate, &fd, 1e-300);
        if best.as_ref().map(|(_, e)| err < *e).unwrap_or(true) {
            best = Some((fd, err));
        }
    }
    Ok(best.unwrap())
}

/// One measured point of an error-vs-steps table. `rate` is
/// ln(err_prev/err)/ln(steps/steps_prev) against the previous row.
#[derive(Clone, Debug)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub error: f64,
    pub rate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct OrderStudy {
    pub order: usize,
    pub rows: Vec<ConvergenceRow>,
}

/// Where the "true" final state comes from.
pub enum Reference {
    /// Known exact final state.
    Exact(RealStateMatrix),
    /// Self-referential: a run at `refine` × the finest step count using
    /// the scheme of order `order`, treated as truth.
    FineGrid { order: usize, refine: usize },
}

/// Relative Frobenius distance between two state matrices.
pub fn relative_frobenius_error(a: &RealStateMatrix, reference: &RealStateMatrix) -> f64 {
    let mut diff = 0.0;
    for (ca, cr) in a.columns.iter().zip(&reference.columns) {
        for (x, y) in ca.data.iter().zip(&cr.data) {
            diff += (x - y) * (x - y);
        }
    }
    diff.sqrt() / reference.norm_fro()
}

/// |‖U‖_F/√E − 1|: zero exactly when the columns keep unit norm in
/// aggregate, the discrete probe of unitarity loss.
pub fn norm_deviation(m: &RealStateMatrix) -> f64 {
    (m.norm_fro() / (m.columns.len() as f64).sqrt() - 1.0).abs()
}

/// Error-vs-steps tables for several scheme orders on one problem,
/// parallelized over the (order, steps) grid.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    problem: &Problem,
    theta: &[f64],
    t_final: f64,
    initial: &RealStateMatrix,
    orders: &[usize],
    steps: &[usize],
    reference: &Reference,
    opts: &KrylovOptions,
    mode: ExecMode,
) -> Result<Vec<OrderStudy>> {
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Verify("step counts must be strictly increasing".into()));
    }
    if steps.is_empty() || orders.is_empty() {
        return Err(Error::Verify("need at least one order and one step count".into()));
    }

    let reference_state: RealStateMatrix = match reference {
        Reference::Exact(m) => m.clone(),
        Reference::FineGrid { order, refine } => {
            let scheme = HermiteScheme::of_order(*order)?;
            let grid = TimeGrid::new(t_final, steps[steps.len() - 1] * refine)?;
            let (history, _) =
                forward_evolve(problem, theta, &scheme, &grid, initial, opts, mode)?;
            history.final_matrix()
        }
    };

    let points: Vec<(usize, usize)> = orders
        .iter()
        .flat_map(|&o| steps.iter().map(move |&n| (o, n)))
        .collect();
    let errors = exec::map_indexed(mode, points.len(), |idx| {
        let (order, n_steps) = points[idx];
        let scheme = HermiteScheme::of_order(order)?;
        let grid = TimeGrid::new(t_final, n_steps)?;
        let (history, _) = forward_evolve(
            problem,
            theta,
            &scheme,
            &grid,
            initial,
            opts,
            ExecMode::Sequential,
        )?;
        Ok::<_, Error>(relative_frobenius_error(&history.final_matrix(), &reference_state))
    });

    let mut studies = Vec::with_capacity(orders.len());
    let mut it = errors.into_iter();
    for &order in orders {
        let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(steps.len());
        for &n in steps {
            let error = it.next().unwrap()?;
            let rate = rows.last().map(|prev: &ConvergenceRow| {
                (prev.error / error).ln() / (n as f64 / prev.steps as f64).ln()
            });
            rows.push(ConvergenceRow {
                steps: n,
                error,
                rate,
            });
        }
        studies.push(OrderStudy { order, rows });
    }
    Ok(studies)
}

/// Errors at/below this are treated as roundoff floor, not signal.
pub const ERROR_FLOOR: f64 = 1e-13;

/// Smallest step count predicted to reach `target_error`, by log-log
/// interpolation between the bracketing measured rows, with a least-
/// squares fit over the decaying rows as extrapolation fallback. The
/// recommendation is monotone: a smaller target never yields fewer steps.
pub fn recommend_steps(rows: &[ConvergenceRow], target_error: f64) -> Result<usize> {
    if !(target_error > 0.0) {
        return Err(Error::Verify("target error must be positive".into()));
    }
    let usable: Vec<&ConvergenceRow> = rows
        .iter()
        .filter(|r| r.error.is_finite() && r.error > ERROR_FLOOR)
        .collect();
    if usable.is_empty() {
        return Err(Error::Verify(
            "no usable rows above the roundoff floor".into(),
        ));
    }
    if target_error >= usable[0].error {
        return Ok(usable[0].steps);
    }
    for pair in usable.windows(2) {
        let (hi, lo) = (pair[0], pair[1]);
        if lo.error > hi.error {
            continue; // non-decaying segment carries no rate information
        }
        if target_error >= lo.error {
            let rate = (hi.error / lo.error).ln() / (lo.steps as f64 / hi.steps as f64).ln();
            let n = hi.steps as f64 * (hi.error / target_error).powf(1.0 / rate);
            return Ok(n.ceil() as usize);
        }
    }
    // Below every measurement: least-squares fit ln err = c − r ln n over
    // the longest strictly-decreasing suffix (the asymptotic tail; earlier
    // rows can sit in the pre-asymptotic regime and would flatten the
    // slope), clamped to at least the finest measured grid.
    let mut start = usable.len().saturating_sub(1);
    while start > 0 && usable[start - 1].error > usable[start].error {
        start -= 1;
    }
    let fit_rows: Vec<&&ConvergenceRow> = usable[start..].iter().collect();
    let n_fit = fit_rows.len();
    if n_fit < 2 {
        return Err(Error::Verify(
            "need at least two decaying rows above the floor to extrapolate".into(),
        ));
    }
    let xs: Vec<f64> = fit_rows.iter().map(|r| (r.steps as f64).ln()).collect();
    let ys: Vec<f64> = fit_rows.iter().map(|r| r.error.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n_fit as f64;
    let ym = ys.iter().sum::<f64>() / n_fit as f64;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx; // expected negative (error decays with steps)
    if !(slope < 0.0) {
        return Err(Error::Verify(
            "error table does not decay; cannot extrapolate".into(),
        ));
    }
    let intercept = ym - slope * xm;
    let n = ((target_error.ln() - intercept) / slope).exp();
    let finest = usable.last().unwrap().steps;
    Ok((n.ceil() as usize).max(finest))
}
