//! One-step implicit propagation of dw/dt = A(t)w built from two-point
//! Hermite interpolation: each step solves
//!
//!   (I − L_{n+1,q}) w_{n+1} = (I + R_{n,p}) w_n
//!
//! where R and L are degree-p/q polynomials in the time derivatives of A,
//! applied matrix-free through a scaled-derivative recursion. With p = q
//! the step is A-stable and converges at order 2p. The linear system is
//! solved by restarted GMRES with a drift-based block preconditioner and a
//! Taylor-series initial guess.

use std::time::{Duration, Instant};

use crate::controls::{ADerivatives, Problem};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::state_core::{RealState, RealStateMatrix, StructuredOperator};

/// Largest supported p + q for exact coefficient arithmetic.
pub const MAX_DERIVATIVE_SUM: usize = 30;

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Interpolation weights c_j^{pq} = p!(p+q−j)! / ((p+q)!(p−j)!) for
/// j = 0..=p, computed in exact rational arithmetic and converted to
/// floating point once.
pub fn hermite_coefficients(p: usize, q: usize) -> Result<Vec<f64>> {
    if p < 1 || q < 1 {
        return Err(Error::InvalidScheme(format!(
            "derivative counts must be at least 1 (got p = {p}, q = {q})"
        )));
    }
    if p + q > MAX_DERIVATIVE_SUM {
        return Err(Error::InvalidScheme(format!(
            "p + q = {} exceeds {MAX_DERIVATIVE_SUM}; exact coefficient arithmetic would overflow",
            p + q
        )));
    }
    let mut coeffs = Vec::with_capacity(p + 1);
    for j in 0..=p {
        // c_j = Π_{i=0}^{j−1} (p − i) / (p + q − i), an exact reduced fraction.
        let mut num: u128 = 1;
        let mut den: u128 = 1;
        for i in 0..j {
            num *= (p - i) as u128;
            den *= (p + q - i) as u128;
        }
        let g = gcd(num, den);
        coeffs.push((num / g) as f64 / (den / g) as f64);
    }
    Ok(coeffs)
}

fn factorial_f64(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// A propagation rule of order 2p; p = q is required (unequal counts are
/// reserved for dissipative evolution and not supported here).
#[derive(Clone, Debug)]
pub struct HermiteScheme {
    pub p: usize,
    pub q: usize,
    pub order: usize,
    /// c_j^{qp} with the (−1)^j sign folded in, j = 0..=q: the weights of
    /// Δt^j w^{(j)}/j! in −L.
    pub coeffs_l: Vec<f64>,
    /// c_j^{pq}, j = 0..=p: the weights in R.
    pub coeffs_r: Vec<f64>,
}

impl HermiteScheme {
    pub fn new(p: usize, q: usize) -> Result<Self> {
        if p != q {
            return Err(Error::InvalidScheme(format!(
                "p = {p}, q = {q}: only p = q is supported (A-stable, order 2p); \
                 q > p is reserved for dissipative evolution"
            )));
        }
        let coeffs_r = hermite_coefficients(p, q)?;
        let mut coeffs_l = hermite_coefficients(q, p)?;
        for (j, c) in coeffs_l.iter_mut().enumerate() {
            if j % 2 == 1 {
                *c = -*c;
            }
        }
        Ok(HermiteScheme {
            p,
            q,
            order: 2 * p,
            coeffs_l,
            coeffs_r,
        })
    }

    /// Scheme of the given even order (2, 4, ..).
    pub fn of_order(order: usize) -> Result<Self> {
        if order < 2 || order % 2 != 0 {
            return Err(Error::InvalidScheme(format!(
                "order must be a positive even integer, got {order}"
            )));
        }
        HermiteScheme::new(order / 2, order / 2)
    }

    /// Highest A-derivative order the recursion consumes.
    pub fn a_derivative_order(&self) -> usize {
        self.q.saturating_sub(1)
    }
}

/// Equidistant time grid t_n = n·dt on [0, T].
#[derive(Clone, Debug)]
pub struct TimeGrid {
    pub t_final: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_final: f64, n_steps: usize) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(Error::InvalidScheme(format!("final time must be positive, got {t_final}")));
        }
        if n_steps < 1 {
            return Err(Error::InvalidScheme("at least one timestep is required".into()));
        }
        Ok(TimeGrid {
            t_final,
            n_steps,
            dt: t_final / n_steps as f64,
        })
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_steps {
            self.t_final
        } else {
            n as f64 * self.dt
        }
    }
}

/// All states w_n, n = 0..=N_T, stored contiguously per initial column.
#[derive(Clone, Debug)]
pub struct StateHistory {
    /// columns[k][n] = state of column k at node n.
    pub columns: Vec<Vec<RealState>>,
    pub essential_dim: usize,
    pub grid: TimeGrid,
}

impl StateHistory {
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_steps + 1
    }

    /// States of all columns at node n, as a matrix.
    pub fn node_matrix(&self, n: usize) -> RealStateMatrix {
        let mut m =
            RealStateMatrix::new(self.columns.iter().map(|c| c[n].clone()).collect()).unwrap();
        m.essential_dim = self.essential_dim;
        m
    }

    pub fn final_matrix(&self) -> RealStateMatrix {
        self.node_matrix(self.grid.n_steps)
    }
}

/// Work counters for one phase of a computation.
#[derive(Clone, Debug, Default)]
pub struct PhaseStats {
    /// Applications of an A-type operator (or its transpose) to a vector.
    pub matvec_count: u64,
    pub krylov_iterations: u64,
    pub linear_solves: u64,
    pub wall_time: Duration,
}

impl PhaseStats {
    pub fn absorb(&mut self, other: &PhaseStats) {
        self.matvec_count += other.matvec_count;
        self.krylov_iterations += other.krylov_iterations;
        self.linear_solves += other.linear_solves;
    }
}

/// Instrumentation for a forward/adjoint/accumulation computation.
#[derive(Clone, Debug, Default)]
pub struct SolveStats {
    pub forward: PhaseStats,
    pub adjoint: PhaseStats,
    pub accumulation: PhaseStats,
}

impl SolveStats {
    pub fn total_matvecs(&self) -> u64 {
        self.forward.matvec_count + self.adjoint.matvec_count + self.accumulation.matvec_count
    }
}

/// Which of the two step polynomials to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// R_{n,p} (weights c_j^{pq}).
    R,
    /// −L_{n,q} (weights (−1)^j c_j^{qp}).
    L,
}

/// Scratch for the scaled-derivative recursion; `s[j]` holds w^{(j)}/j!.
#[derive(Clone, Debug)]
pub struct RlScratch {
    pub s: Vec<RealState>,
}

impl RlScratch {
    pub fn new(dim: usize, q: usize) -> Self {
        RlScratch {
            s: (0..=q).map(|_| RealState::zeros(dim)).collect(),
        }
    }
}

/// out = R_{n,p} w or −L_{n,q} w (identity term excluded), via the scaled
/// derivative recursion
///
///   s_0 = w,  s_j = (1/j) Σ_{i=0}^{j−1} A^{(j−1−i)}/(j−1−i)! · s_i,
///
/// then out = Σ_{j≥1} coeff_j Δt^j s_j. Costs exactly q(q+1)/2 matvecs and
/// leaves the s_j in `scratch` for reuse (Taylor predictor, gradient work).
pub fn apply_rl(
    scheme: &HermiteScheme,
    a: &ADerivatives<'_>,
    dt: f64,
    w: &RealState,
    side: Side,
    out: &mut RealState,
    scratch: &mut RlScratch,
    matvecs: &mut u64,
) {
    let q = scheme.q;
    debug_assert!(a.max_order() + 1 >= q, "A derivatives available to order q-1");
    scratch.s[0].copy_from(w);
    for j in 1..=q {
        let (head, tail) = scratch.s.split_at_mut(j);
        let sj = &mut tail[0];
        sj.fill_zero();
        for (i, si) in head.iter().enumerate() {
            let m = j - 1 - i;
            a.order(m).apply_add(1.0 / factorial_f64(m), si, sj, matvecs);
        }
        sj.scale(1.0 / j as f64);
    }
    let coeffs = match side {
        Side::R => &scheme.coeffs_r,
        Side::L => &scheme.coeffs_l,
    };
    out.fill_zero();
    let mut dt_pow = 1.0;
    for j in 1..=q {
        dt_pow *= dt;
        out.axpy(coeffs[j] * dt_pow, &scratch.s[j]);
    }
}

/// Block-diagonal approximate inverse of I − L built from the drift alone.
///
/// For a diagonal drift (K_d = diag(λ), S = 0) the pair (u_i, v_i) is
/// coupled by λ_i J with J = [[0,1],[−1,0]], so each block of I − L̃ is
/// a·I + b·J with a, b polynomial in Δt·λ_i; the stored inverse is
/// (a·I − b·J)/(a² + b²). Applying it costs O(N).
#[derive(Clone, Debug)]
pub struct Preconditioner {
    /// Per complex index: (ia, ib) with M⁻¹ = ia·I + ib·J. None = identity.
    inv_blocks: Option<Vec<(f64, f64)>>,
}

impl Preconditioner {
    pub fn identity() -> Self {
        Preconditioner { inv_blocks: None }
    }

    pub fn is_identity(&self) -> bool {
        self.inv_blocks.is_none()
    }

    /// x ← M⁻¹ x.
    pub fn apply(&self, x: &mut RealState) {
        if let Some(blocks) = &self.inv_blocks {
            let (u, v) = x.uv_mut();
            for (i, &(ia, ib)) in blocks.iter().enumerate() {
                // (ia·I + ib·J) [u; v] = [ia·u + ib·v, ia·v − ib·u]
                let (ui, vi) = (u[i], v[i]);
                u[i] = ia * ui + ib * vi;
                v[i] = ia * vi - ib * ui;
            }
        }
    }

    /// x ← M⁻ᵀ x (for the transposed systems of the adjoint sweep).
    pub fn apply_transpose(&self, x: &mut RealState) {
        if let Some(blocks) = &self.inv_blocks {
            let (u, v) = x.uv_mut();
            for (i, &(ia, ib)) in blocks.iter().enumerate() {
                let (ui, vi) = (u[i], v[i]);
                u[i] = ia * ui - ib * vi;
                v[i] = ia * vi + ib * ui;
            }
        }
    }
}

/// Build the preconditioner from a diagonal drift; a non-diagonal drift
/// (or nonzero S) falls back to the identity.
pub fn precondition_build(
    drift: &StructuredOperator,
    scheme: &HermiteScheme,
    dt: f64,
) -> Preconditioner {
    if !drift.s.is_zero() {
        return Preconditioner::identity();
    }
    let Some(diag) = drift.k.as_diagonal() else {
        return Preconditioner::identity();
    };
    let blocks = diag
        .iter()
        .map(|&lambda| {
            // M = I + Σ_{j=1}^q (−1)^j c_j (Δt λ)^j / j! · J^j with
            // J^j cycling through I, J, −I, −J.
            let x = dt * lambda;
            let mut a = 1.0;
            let mut b = 0.0;
            let mut x_pow = 1.0;
            for j in 1..=scheme.q {
                x_pow *= x;
                let term = scheme.coeffs_l[j] * x_pow / factorial_f64(j);
                let sign = if j % 4 >= 2 { -1.0 } else { 1.0 };
                if j % 2 == 0 {
                    a += sign * term;
                } else {
                    b += sign * term;
                }
            }
            let det = a * a + b * b;
            (a / det, -b / det)
        })
        .collect();
    Preconditioner {
        inv_blocks: Some(blocks),
    }
}

/// Krylov solver controls for the per-step linear systems.
#[derive(Clone, Debug)]
pub struct KrylovOptions {
    /// Absolute tolerance on the unpreconditioned residual 2-norm.
    pub tol_abs: f64,
    pub restart: usize,
    pub max_iterations: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            tol_abs: 1e-15,
            restart: 20,
            max_iterations: 200,
        }
    }
}

/// Non-convergence report from the Krylov solver.
#[derive(Clone, Copy, Debug)]
pub struct KrylovFailure {
    pub residual: f64,
    pub iterations: u64,
}

/// Restarted GMRES with left preconditioning. `op` computes y = M x for
/// the system matrix M; convergence is declared on the true residual
/// ‖rhs − M x‖₂ ≤ tol (absolute), re-checked outside the preconditioned
/// inner iteration. Returns the solution and the iteration count.
pub(crate) fn gmres<Op>(
    mut op: Op,
    precond: &Preconditioner,
    transpose_precond: bool,
    rhs: &RealState,
    x0: &RealState,
    opts: &KrylovOptions,
) -> std::result::Result<(RealState, u64), KrylovFailure>
where
    Op: FnMut(&RealState, &mut RealState),
{
    let dim = rhs.dim_complex;
    let apply_precond = |x: &mut RealState| {
        if transpose_precond {
            precond.apply_transpose(x);
        } else {
            precond.apply(x);
        }
    };

    let mut x = x0.clone();
    let mut iterations: u64 = 0;
    let mut mx = RealState::zeros(dim);

    loop {
        // True residual r = rhs − M x.
        op(&x, &mut mx);
        let mut r = rhs.clone();
        r.axpy(-1.0, &mx);
        let true_norm = r.norm();
        if true_norm <= opts.tol_abs {
            return Ok((x, iterations));
        }
        if iterations >= opts.max_iterations as u64 {
            return Err(KrylovFailure {
                residual: true_norm,
                iterations,
            });
        }

        // Preconditioned residual starts the Arnoldi process.
        apply_precond(&mut r);
        let beta = r.norm();
        if beta == 0.0 {
            return Err(KrylovFailure {
                residual: true_norm,
                iterations,
            });
        }

        let m = opts.restart;
        let mut basis: Vec<RealState> = Vec::with_capacity(m + 1);
        r.scale(1.0 / beta);
        basis.push(r);
        // Hessenberg columns (rotated in place), Givens rotations, rhs g.
        let mut h_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut givens: Vec<(f64, f64)> = Vec::with_capacity(m);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;

        for k in 0..m {
            if iterations >= opts.max_iterations as u64 {
                break;
            }
            iterations += 1;
            let mut w = RealState::zeros(dim);
            op(&basis[k], &mut w);
            apply_precond(&mut w);
            let mut h = vec![0.0; k + 2];
            for (i, vi) in basis.iter().enumerate() {
                h[i] = w.dot(vi);
                w.axpy(-h[i], vi);
            }
            let wnorm = w.norm();
            h[k + 1] = wnorm;
            let col_norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Apply accumulated rotations to the new column.
            for (i, &(c, s)) in givens.iter().enumerate() {
                let (hi, hj) = (h[i], h[i + 1]);
                h[i] = c * hi + s * hj;
                h[i + 1] = -s * hi + c * hj;
            }
            // New rotation annihilating the subdiagonal entry.
            let (c, s) = {
                let (a, b) = (h[k], h[k + 1]);
                let r = a.hypot(b);
                if r == 0.0 {
                    (1.0, 0.0)
                } else {
                    (a / r, b / r)
                }
            };
            h[k] = c * h[k] + s * h[k + 1];
            h[k + 1] = 0.0;
            givens.push((c, s));
            let gk = g[k];
            g[k] = c * gk;
            g[k + 1] = -s * gk;
            // An (almost) invariant subspace means the solution is exact
            // within the current basis.
            let lucky = wnorm <= 1e-14 * col_norm;
            if wnorm > 0.0 {
                w.scale(1.0 / wnorm);
            }
            basis.push(w);
            h_cols.push(h);
            k_used = k + 1;
            let est = g[k + 1].abs();
            if est <= opts.tol_abs || lucky {
                break;
            }
        }

        if k_used == 0 {
            // No progress possible (iteration budget exhausted mid-cycle).
            op(&x, &mut mx);
            let mut r2 = rhs.clone();
            r2.axpy(-1.0, &mx);
            return Err(KrylovFailure {
                residual: r2.norm(),
                iterations,
            });
        }

        // Back substitution: solve the triangular system for the update.
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut sum = g[i];
            for j in i + 1..k_used {
                sum -= h_cols[j][i] * y[j];
            }
            y[i] = sum / h_cols[i][i];
        }
        for (i, &yi) in y.iter().enumerate() {
            x.axpy(yi, &basis[i]);
        }
    }
}

/// Solve (I − L_{n+1,q}) w_{n+1} = rhs by preconditioned GMRES, starting
/// from `guess` (the Taylor predictor). The returned state satisfies
/// ‖(I − L)w_{n+1} − rhs‖₂ ≤ tol.
#[allow(clippy::too_many_arguments)]
pub fn solve_timestep(
    scheme: &HermiteScheme,
    a_next: &ADerivatives<'_>,
    dt: f64,
    rhs: &RealState,
    guess: &RealState,
    precond: &Preconditioner,
    opts: &KrylovOptions,
    scratch: &mut RlScratch,
    stats: &mut PhaseStats,
) -> std::result::Result<RealState, KrylovFailure> {
    let dim = rhs.dim_complex;
    let mut lw = RealState::zeros(dim);
    let matvecs = &mut stats.matvec_count;
    let op = |v: &RealState, out: &mut RealState| {
        // out = (I − L) v = v + (−L v).
        apply_rl(scheme, a_next, dt, v, Side::L, &mut lw, scratch, matvecs);
        out.copy_from(v);
        out.axpy(1.0, &lw);
    };
    let (solution, iters) = gmres(op, precond, false, rhs, guess, opts)?;
    stats.krylov_iterations += iters;
    stats.linear_solves += 1;
    Ok(solution)
}

/// Propagate every column of `initial` across the grid with the given
/// parameter vector. Columns evolve independently (parallelizable); the
/// returned history holds all N_T + 1 nodes per column.
pub fn forward_evolve(
    problem: &Problem,
    theta: &[f64],
    scheme: &HermiteScheme,
    grid: &TimeGrid,
    initial: &RealStateMatrix,
    opts: &KrylovOptions,
    mode: ExecMode,
) -> Result<(StateHistory, SolveStats)> {
    let dim = problem.dim();
    if initial.dim_complex() != dim {
        return Err(Error::DimensionMismatch(format!(
            "initial columns have dimension {}, system has {dim}",
            initial.dim_complex()
        )));
    }
    let mut prob = problem.clone();
    prob.set_theta(theta)?;
    let deriv_order = scheme.a_derivative_order();
    let nodes: Vec<ADerivatives<'_>> = (0..=grid.n_steps)
        .map(|n| prob.a_derivatives(grid.time(n), deriv_order))
        .collect::<Result<_>>()?;
    let precond = precondition_build(&prob.drift, scheme, grid.dt);

    let started = Instant::now();
    let per_column = exec::map_indexed(mode, initial.columns.len(), |col| {
        let mut stats = PhaseStats::default();
        let mut states = Vec::with_capacity(grid.n_steps + 1);
        let mut w = initial.columns[col].clone();
        states.push(w.clone());
        let mut scratch = RlScratch::new(dim, scheme.q);
        let mut rw = RealState::zeros(dim);
        for n in 0..grid.n_steps {
            apply_rl(
                scheme,
                &nodes[n],
                grid.dt,
                &w,
                Side::R,
                &mut rw,
                &mut scratch,
                &mut stats.matvec_count,
            );
            let mut rhs = w.clone();
            rhs.axpy(1.0, &rw);
            // Taylor predictor from the cached scaled derivatives at t_n.
            let mut guess = w.clone();
            let mut dt_pow = 1.0;
            for j in 1..=scheme.q {
                dt_pow *= grid.dt;
                guess.axpy(dt_pow, &scratch.s[j]);
            }
            w = solve_timestep(
                scheme,
                &nodes[n + 1],
                grid.dt,
                &rhs,
                &guess,
                &precond,
                opts,
                &mut scratch,
                &mut stats,
            )
            .map_err(|f| Error::SolveFailed {
                step: n,
                column: col,
                residual: f.residual,
                tol: opts.tol_abs,
                iterations: f.iterations as usize,
            })?;
            states.push(w.clone());
        }
        Ok::<_, Error>((states, stats))
    });

    let mut stats = SolveStats::default();
    let mut columns = Vec::with_capacity(initial.columns.len());
    for item in per_column {
        let (states, phase) = item?;
        stats.forward.absorb(&phase);
        columns.push(states);
    }
    stats.forward.wall_time = started.elapsed();
    Ok((
        StateHistory {
            columns,
            essential_dim: initial.essential_dim,
            grid: grid.clone(),
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{BsplineCarrierPulse, ControlEnsemble, PulseShape};
    use crate::state_core::SparseReal;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coefficients_for_lowest_orders() {
        assert_eq!(hermite_coefficients(1, 1).unwrap(), vec![1.0, 0.5]);
        let c22 = hermite_coefficients(2, 2).unwrap();
        assert_eq!(c22, vec![1.0, 0.5, 1.0 / 6.0]);
        for (p, q) in [(1, 1), (2, 2), (3, 2), (5, 5), (15, 15)] {
            assert_eq!(hermite_coefficients(p, q).unwrap()[0], 1.0);
        }
    }

    #[test]
    fn coefficient_bounds_and_scheme_validation() {
        assert!(hermite_coefficients(16, 15).is_err());
        assert!(hermite_coefficients(0, 1).is_err());
        assert!(HermiteScheme::new(2, 3).is_err());
        assert!(HermiteScheme::new(3, 2).is_err());
        assert!(HermiteScheme::of_order(3).is_err());
        assert!(HermiteScheme::of_order(0).is_err());
        let s = HermiteScheme::of_order(4).unwrap();
        assert_eq!((s.p, s.q, s.order), (2, 2, 4));
        assert_eq!(s.coeffs_l, vec![1.0, -0.5, 1.0 / 6.0]);
        assert_eq!(s.coeffs_r, vec![1.0, 0.5, 1.0 / 6.0]);
    }

    /// Two-level problem with one B-spline control on K and one on S.
    /// Single-span (Bernstein) envelopes keep the high time derivatives
    /// of A small, so modest step sizes are already asymptotic.
    fn spline_problem(seed: u64, t_final: f64) -> Problem {
        let drift = StructuredOperator::from_k(SparseReal::from_diagonal(&[0.15, -0.35]));
        let sym = SparseReal::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let anti = SparseReal::from_triplets(2, &[(0, 1, 1.0), (1, 0, -1.0)]).unwrap();
        let ops = vec![
            StructuredOperator::from_k(sym),
            StructuredOperator::new(SparseReal::zero(2), anti).unwrap(),
        ];
        let pulse = || {
            PulseShape::BsplineCarrier(
                BsplineCarrierPulse::new(5, 6, vec![0.8], t_final).unwrap(),
            )
        };
        let mut ens = ControlEnsemble::new(vec![pulse(), pulse()], t_final).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..ens.n_params())
            .map(|_| 0.4 * (rng.gen::<f64>() - 0.5))
            .collect();
        ens.set_theta(&theta).unwrap();
        Problem::new(drift, ops, ens).unwrap()
    }

    fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> RealState {
        RealState::from_vec((0..2 * dim).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
    }

    #[test]
    fn order2_r_apply_is_half_dt_a() {
        let problem = spline_problem(3, 1.0);
        let scheme = HermiteScheme::of_order(2).unwrap();
        let a = problem.a_derivatives(0.37, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_state(2, &mut rng);
        let dt = 0.21;

        let mut out = RealState::zeros(2);
        let mut scratch = RlScratch::new(2, 1);
        let mut count = 0;
        apply_rl(&scheme, &a, dt, &w, Side::R, &mut out, &mut scratch, &mut count);
        assert_eq!(count, 1);

        let mut aw = RealState::zeros(2);
        let mut c2 = 0;
        a.order(0).apply_add(0.5 * dt, &w, &mut aw, &mut c2);
        for (x, y) in out.data.iter().zip(&aw.data) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn order4_forward_apply_costs_three_matvecs() {
        let problem = spline_problem(4, 1.0);
        let scheme = HermiteScheme::of_order(4).unwrap();
        let a = problem.a_derivatives(0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_state(2, &mut rng);
        let mut out = RealState::zeros(2);
        let mut scratch = RlScratch::new(2, 2);
        let mut count = 0;
        apply_rl(&scheme, &a, 0.1, &w, Side::R, &mut out, &mut scratch, &mut count);
        assert_eq!(count, 3);
    }

    /// Dense matrix of one A^{(i)} descriptor, extracted column by column.
    fn dense_order(a: &ADerivatives<'_>, i: usize, dim: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(2 * dim, 2 * dim);
        for col in 0..2 * dim {
            let mut e = RealState::zeros(dim);
            e.data[col] = 1.0;
            let mut out = RealState::zeros(dim);
            let mut count = 0;
            a.order(i).apply_add(1.0, &e, &mut out, &mut count);
            for row in 0..2 * dim {
                m[(row, col)] = out.data[row];
            }
        }
        m
    }

    /// Dense (I ∓ L/R) per the scaled-derivative polynomial: D_0 = I,
    /// D_j = (1/j) Σ_{i<j} A^{(j−1−i)}/(j−1−i)! D_i, result Σ c_j dt^j D_j.
    fn dense_rl(
        scheme: &HermiteScheme,
        a: &ADerivatives<'_>,
        dim: usize,
        dt: f64,
        side: Side,
    ) -> DMatrix<f64> {
        let n = 2 * dim;
        let q = scheme.q;
        let mut d: Vec<DMatrix<f64>> = vec![DMatrix::identity(n, n)];
        for j in 1..=q {
            let mut dj = DMatrix::zeros(n, n);
            for i in 0..j {
                let m = j - 1 - i;
                dj += dense_order(a, m, dim) * &d[i] / factorial_f64(m);
            }
            d.push(dj / j as f64);
        }
        let coeffs = match side {
            Side::R => &scheme.coeffs_r,
            Side::L => &scheme.coeffs_l,
        };
        let mut out = DMatrix::zeros(n, n);
        let mut dt_pow = 1.0;
        for j in 1..=q {
            dt_pow *= dt;
            out += &d[j] * (coeffs[j] * dt_pow);
        }
        out
    }

    #[test]
    fn apply_matches_dense_polynomial_on_random_system() {
        // 4-level random sparse Hermitian system with two spline controls.
        let dim = 4;
        let t_final = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut k_triplets = vec![];
        let mut s_triplets = vec![];
        for r in 0..dim {
            for c in r..dim {
                let kv = rng.gen::<f64>() - 0.5;
                k_triplets.push((r, c, kv));
                if c > r {
                    k_triplets.push((c, r, kv));
                    let sv = rng.gen::<f64>() - 0.5;
                    s_triplets.push((r, c, sv));
                    s_triplets.push((c, r, -sv));
                }
            }
        }
        let drift = StructuredOperator::new(
            SparseReal::from_triplets(dim, &k_triplets).unwrap(),
            SparseReal::from_triplets(dim, &s_triplets).unwrap(),
        )
        .unwrap();
        let sym = SparseReal::from_triplets(dim, &[(0, 1, 1.0), (1, 0, 1.0), (2, 3, 0.7), (3, 2, 0.7)])
            .unwrap();
        let anti = SparseReal::from_triplets(dim, &[(1, 2, 0.4), (2, 1, -0.4)]).unwrap();
        let ops = vec![
            StructuredOperator::from_k(sym),
            StructuredOperator::new(SparseReal::zero(dim), anti).unwrap(),
        ];
        let pulse = || {
            PulseShape::BsplineCarrier(
                BsplineCarrierPulse::new(8, 11, vec![1.4], t_final).unwrap(),
            )
        };
        let mut ens = ControlEnsemble::new(vec![pulse(), pulse()], t_final).unwrap();
        let theta: Vec<f64> = (0..ens.n_params()).map(|_| rng.gen::<f64>() - 0.5).collect();
        ens.set_theta(&theta).unwrap();
        let problem = Problem::new(drift, ops, ens).unwrap();

        for order in [4, 8] {
            let scheme = HermiteScheme::of_order(order).unwrap();
            let a = problem
                .a_derivatives(0.62, scheme.a_derivative_order())
                .unwrap();
            let dt = 0.3;
            let w = random_state(dim, &mut rng);
            for side in [Side::R, Side::L] {
                let mut fast = RealState::zeros(dim);
                let mut scratch = RlScratch::new(dim, scheme.q);
                let mut count = 0;
                apply_rl(&scheme, &a, dt, &w, side, &mut fast, &mut scratch, &mut count);
                assert_eq!(count, (scheme.q * (scheme.q + 1) / 2) as u64);

                let dense = dense_rl(&scheme, &a, dim, dt, side);
                let wv = DVector::from_column_slice(&w.data);
                let expect = &dense * wv;
                for (f, e) in fast.data.iter().zip(expect.iter()) {
                    assert!((f - e).abs() <= 1e-13, "order {order}: {f} vs {e}");
                }
            }
        }
    }

    #[test]
    fn preconditioner_identity_for_zero_drift() {
        let drift = StructuredOperator::from_k(SparseReal::zero(3));
        let scheme = HermiteScheme::of_order(6).unwrap();
        let p = precondition_build(&drift, &scheme, 0.1);
        // Zero diagonal blocks are exact identities.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_state(3, &mut rng);
        let mut y = x.clone();
        p.apply(&mut y);
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn preconditioner_falls_back_for_nondiagonal_drift() {
        let k = SparseReal::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let drift = StructuredOperator::from_k(k);
        let scheme = HermiteScheme::of_order(4).unwrap();
        assert!(precondition_build(&drift, &scheme, 0.1).is_identity());
    }

    #[test]
    fn order2_preconditioner_block_is_rotation_inverse() {
        let lambda = 0.8;
        let dt = 0.3;
        let drift = StructuredOperator::from_k(SparseReal::from_diagonal(&[lambda]));
        let scheme = HermiteScheme::of_order(2).unwrap();
        let p = precondition_build(&drift, &scheme, dt);
        // M = [[1, −x/2], [x/2, 1]] with x = dt·λ; apply M then M⁻¹.
        let x = dt * lambda;
        let m = [[1.0, -x / 2.0], [x / 2.0, 1.0]];
        let w0 = [0.7, -0.4];
        let mut mw = RealState::from_vec(vec![
            m[0][0] * w0[0] + m[0][1] * w0[1],
            m[1][0] * w0[0] + m[1][1] * w0[1],
        ])
        .unwrap();
        p.apply(&mut mw);
        assert!((mw.data[0] - w0[0]).abs() <= 1e-15);
        assert!((mw.data[1] - w0[1]).abs() <= 1e-15);
    }

    #[test]
    fn preconditioner_inverts_drift_only_step_operator() {
        // With no controls, (I − L) is exactly the matrix the blocks encode.
        let diag = [0.4, -1.2, 0.05, 2.0];
        let drift = StructuredOperator::from_k(SparseReal::from_diagonal(&diag));
        let ens = ControlEnsemble::new(vec![], 1.0).unwrap();
        let problem = Problem::new(drift, vec![], ens).unwrap();
        for order in [2, 6, 8] {
            let scheme = HermiteScheme::of_order(order).unwrap();
            let dt = 0.45;
            let p = precondition_build(&problem.drift, &scheme, dt);
            let a = problem
                .a_derivatives(0.0, scheme.a_derivative_order())
                .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let x = random_state(4, &mut rng);
            let mut lw = RealState::zeros(4);
            let mut scratch = RlScratch::new(4, scheme.q);
            let mut count = 0;
            apply_rl(&scheme, &a, dt, &x, Side::L, &mut lw, &mut scratch, &mut count);
            let mut y = x.clone();
            y.axpy(1.0, &lw); // y = (I − L) x
            p.apply(&mut y);
            for (a_, b_) in y.data.iter().zip(&x.data) {
                assert!((a_ - b_).abs() <= 1e-13, "order {order}");
            }
        }
    }

    #[test]
    fn zero_generator_takes_no_krylov_iterations() {
        let drift = StructuredOperator::from_k(SparseReal::zero(2));
        let ens = ControlEnsemble::new(vec![], 1.0).unwrap();
        let problem = Problem::new(drift, vec![], ens).unwrap();
        let scheme = HermiteScheme::of_order(6).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let initial = RealStateMatrix::new(vec![
            RealState::from_vec(vec![1.0, 0.0, 0.0, 0.5]).unwrap(),
        ])
        .unwrap();
        let (history, stats) = forward_evolve(
            &problem,
            &[],
            &scheme,
            &grid,
            &initial,
            &KrylovOptions::default(),
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(stats.forward.krylov_iterations, 0);
        for n in 0..=4 {
            assert_eq!(history.columns[0][n].data, initial.columns[0].data);
        }
    }

    #[test]
    fn timestep_matches_dense_lu_solve() {
        let problem = spline_problem(11, 1.0);
        let scheme = HermiteScheme::of_order(6).unwrap();
        let dt = 0.25;
        let t0 = 0.3;
        let deriv = scheme.a_derivative_order();
        let a0 = problem.a_derivatives(t0, deriv).unwrap();
        let a1 = problem.a_derivatives(t0 + dt, deriv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_state(2, &mut rng);

        let mut scratch = RlScratch::new(2, scheme.q);
        let mut stats = PhaseStats::default();
        let mut rw = RealState::zeros(2);
        apply_rl(&scheme, &a0, dt, &w, Side::R, &mut rw, &mut scratch, &mut stats.matvec_count);
        let mut rhs = w.clone();
        rhs.axpy(1.0, &rw);
        let mut guess = w.clone();
        let mut dt_pow = 1.0;
        for j in 1..=scheme.q {
            dt_pow *= dt;
            guess.axpy(dt_pow, &scratch.s[j]);
        }
        let precond = precondition_build(&problem.drift, &scheme, dt);
        let opts = KrylovOptions::default();
        let solved = solve_timestep(
            &scheme, &a1, dt, &rhs, &guess, &precond, &opts, &mut scratch, &mut stats,
        )
        .unwrap();

        let dense_l = dense_rl(&scheme, &a1, 2, dt, Side::L);
        let system = DMatrix::identity(4, 4) + dense_l;
        let rhs_v = DVector::from_column_slice(&rhs.data);
        let direct = system.lu().solve(&rhs_v).unwrap();
        for (a_, b_) in solved.data.iter().zip(direct.iter()) {
            assert!((a_ - b_).abs() <= 1e-13);
        }
    }

    #[test]
    fn single_step_norm_error_shrinks_at_local_order() {
        // Hermitian time-dependent generator: per-step norm drift is
        // O(dt^{2p+1}); fit the observed slope over three step sizes.
        let problem = spline_problem(13, 1.0);
        let scheme = HermiteScheme::of_order(4).unwrap();
        let precond = precondition_build(&problem.drift, &scheme, 1.0);
        let opts = KrylovOptions::default();
        let mut errors = vec![];
        let dts = [0.12, 0.06, 0.03];
        for &dt in &dts {
            let deriv = scheme.a_derivative_order();
            let a0 = problem.a_derivatives(0.2, deriv).unwrap();
            let a1 = problem.a_derivatives(0.2 + dt, deriv).unwrap();
            let w = RealState::from_vec(vec![0.6, 0.8, 0.0, 0.0]).unwrap();
            let mut scratch = RlScratch::new(2, scheme.q);
            let mut stats = PhaseStats::default();
            let mut rw = RealState::zeros(2);
            apply_rl(&scheme, &a0, dt, &w, Side::R, &mut rw, &mut scratch, &mut stats.matvec_count);
            let mut rhs = w.clone();
            rhs.axpy(1.0, &rw);
            let next = solve_timestep(
                &scheme, &a1, dt, &rhs, &w, &precond, &opts, &mut scratch, &mut stats,
            )
            .unwrap();
            errors.push((next.norm() - w.norm()).abs());
        }
        // Least-squares slope of log2(err) against log2(dt).
        let xs: Vec<f64> = dts.iter().map(|d| d.log2()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.log2()).collect();
        let n = xs.len() as f64;
        let (sx, sy): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let expected = (scheme.order + 1) as f64;
        assert!(
            slope >= expected - 1.0 && slope <= expected + 2.5,
            "norm-drift slope {slope}, expected about {expected} (errors {errors:?})"
        );
    }

    #[test]
    fn order2_matches_independent_trapezoidal_stepper() {
        let problem = spline_problem(29, 1.0);
        let scheme = HermiteScheme::of_order(2).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let w0 = RealState::from_vec(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let initial = RealStateMatrix::new(vec![w0.clone()]).unwrap();
        let opts = KrylovOptions::default();
        let (history, _) = forward_evolve(
            &problem,
            &problem.controls.theta.clone(),
            &scheme,
            &grid,
            &initial,
            &opts,
            ExecMode::Sequential,
        )
        .unwrap();

        // Independent dense trapezoidal rule: (I − dt/2 A_{n+1}) w_{n+1}
        // = (I + dt/2 A_n) w_n, solved by LU at each step.
        let mut w = DVector::from_column_slice(&w0.data);
        for n in 0..grid.n_steps {
            let a0 = dense_order(&problem.a_derivatives(grid.time(n), 0).unwrap(), 0, 2);
            let a1 = dense_order(&problem.a_derivatives(grid.time(n + 1), 0).unwrap(), 0, 2);
            let lhs = DMatrix::identity(4, 4) - a1 * (grid.dt / 2.0);
            let rhs = (DMatrix::identity(4, 4) + a0 * (grid.dt / 2.0)) * &w;
            w = lhs.lu().solve(&rhs).unwrap();
        }
        let ours = &history.columns[0][grid.n_steps];
        for (a_, b_) in ours.data.iter().zip(w.iter()) {
            assert!((a_ - b_).abs() <= 1e-12, "{a_} vs {b_}");
        }
    }

    #[test]
    fn forward_history_has_all_nodes_and_parallel_matches_sequential() {
        let problem = spline_problem(41, 1.0);
        let scheme = HermiteScheme::of_order(8).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let initial = RealStateMatrix::new(vec![
            RealState::from_vec(vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            RealState::from_vec(vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let opts = KrylovOptions::default();
        let theta = problem.controls.theta.clone();
        let (h_seq, s_seq) = forward_evolve(
            &problem, &theta, &scheme, &grid, &initial, &opts, ExecMode::Sequential,
        )
        .unwrap();
        let (h_par, s_par) = forward_evolve(
            &problem, &theta, &scheme, &grid, &initial, &opts, ExecMode::Parallel,
        )
        .unwrap();
        assert_eq!(h_seq.n_nodes(), 11);
        assert_eq!(h_seq.n_columns(), 2);
        assert_eq!(s_seq.forward.matvec_count, s_par.forward.matvec_count);
        assert_eq!(s_seq.forward.linear_solves, 20);
        for col in 0..2 {
            for n in 0..=10 {
                assert_eq!(h_seq.columns[col][n].data, h_par.columns[col][n].data);
            }
        }
        // Unit norm preserved to solver accuracy across ten steps.
        for col in 0..2 {
            let drift = (h_seq.columns[col][10].norm() - 1.0).abs();
            assert!(drift <= 1e-8, "norm drift {drift}");
        }
    }
}
