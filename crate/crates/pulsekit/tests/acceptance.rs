//! End-to-end acceptance checks for the toolkit: error tables and observed
//! convergence rates on the closed-form two-level protocol, gradient
//! exactness against finite differences on randomized problems, operator
//! application counts, objective properties, unitarity drift, a full gate
//! design, and an order-comparison timing study on a reduced two-qudit
//! model. Each test prints its measured numbers and asserts the stated
//! tolerance and runtime budget.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pulsekit::adjoint_engine::{
    accumulate_gradient_efficient, accumulate_gradient_naive, adjoint_evolve, apply_rl_transpose,
    compute_gradient, AccumulationMethod,
};
use pulsekit::controls::{BsplineCarrierPulse, ControlEnsemble, Problem, PulseShape};
use pulsekit::error::Result as PkResult;
use pulsekit::exec::ExecMode;
use pulsekit::hermite_integrator::{
    apply_rl, forward_evolve, HermiteScheme, KrylovOptions, RlScratch, Side, TimeGrid,
};
use pulsekit::model::{
    build_control_operators, build_drift, Frame, GuardWeights, SubsystemSpec, SystemSpec, TWO_PI,
};
use pulsekit::objectives::{
    generalized_infidelity, infidelity, objective_parts, trace_fidelity, GateTarget,
    InfidelityKind, ObjectiveConfig,
};
use pulsekit::optimize::{optimize, random_initial_controls, OptimizeOptions};
use pulsekit::state_core::{
    complex_to_real, RealState, RealStateMatrix, SparseReal, StructuredOperator,
};
use pulsekit::verify::{
    convergence_study, finite_difference_best_h, norm_deviation, rabi_infidelity_gradient,
    rabi_problem, rabi_unitary, recommend_steps, relative_l2_error, unitary_to_real_matrix,
    ConvergenceRow, Mat2, RabiSpec, Reference, ERROR_FLOOR,
};

const ORDERS: [usize; 6] = [2, 4, 6, 8, 10, 12];
const STEP_COUNTS: [usize; 5] = [16, 32, 64, 128, 256];

/// Expected relative Frobenius errors of the final state for the two-level
/// constant-drive protocol (Ω = 0.05·e^{iπ/4}, T = 9.5π/|Ω|, identity
/// initial basis). Rows are orders 2–12, columns step counts 16–256.
/// Cells at or below the roundoff floor are excluded from comparison.
const EXPECTED_STATE_ERRORS: [[f64; 5]; 6] = [
    [4.5e-1, 1.6, 5.2e-1, 1.3e-1, 3.4e-2],
    [4.0e-1, 3.0e-2, 1.9e-3, 1.2e-4, 7.7e-6],
    [1.1e-2, 1.9e-4, 3.0e-6, 4.7e-8, 7.4e-10],
    [1.6e-4, 6.6e-7, 2.6e-9, 1.0e-11, 3.5e-14],
    [1.4e-6, 1.4e-9, 1.4e-12, 1.5e-15, 1.4e-15],
    [8.6e-9, 2.2e-12, 3.4e-15, 2.2e-15, 4.6e-15],
];

/// Expected relative ℓ₂ errors of the discrete-adjoint gradient against the
/// closed-form gradient for the same protocol with the Hadamard target.
const EXPECTED_GRADIENT_ERRORS: [[f64; 5]; 6] = [
    [6.3, 7.9, 1.2e1, 3.9, 1.0],
    [1.0e1, 8.8e-1, 5.8e-2, 3.6e-3, 2.3e-4],
    [3.2e-1, 5.6e-3, 9.0e-5, 1.4e-6, 2.2e-8],
    [4.6e-3, 2.0e-5, 7.8e-8, 3.1e-10, 1.1e-12],
    [4.2e-5, 4.3e-8, 4.3e-11, 4.1e-15, 7.1e-14],
    [2.6e-7, 6.6e-11, 8.3e-14, 4.9e-14, 1.3e-13],
];

fn hadamard_mat2() -> Mat2 {
    let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    [[h, h], [h, -h]]
}

fn hadamard_rows() -> Vec<Vec<Complex64>> {
    let m = hadamard_mat2();
    vec![vec![m[0][0], m[0][1]], vec![m[1][0], m[1][1]]]
}

/// Identity basis of the listed (total-dimension) indices; one column per
/// essential state.
fn basis_matrix(total_dim: usize, essential: &[usize]) -> RealStateMatrix {
    let columns = essential
        .iter()
        .map(|&i| {
            let mut psi = vec![Complex64::new(0.0, 0.0); total_dim];
            psi[i] = Complex64::new(1.0, 0.0);
            complex_to_real(&psi)
        })
        .collect();
    let mut m = RealStateMatrix::new(columns).unwrap();
    m.essential_dim = essential.len();
    m
}

fn complex_columns_to_matrix(cols: &[Vec<Complex64>], essential_dim: usize) -> RealStateMatrix {
    let columns = cols.iter().map(|c| complex_to_real(c)).collect();
    let mut m = RealStateMatrix::new(columns).unwrap();
    m.essential_dim = essential_dim;
    m
}

fn random_hermitian_operator(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> StructuredOperator {
    let mut k_triplets = Vec::new();
    let mut s_triplets = Vec::new();
    for i in 0..n {
        for j in i..n {
            let k: f64 = rng.gen_range(-scale..scale);
            k_triplets.push((i, j, k));
            if j > i {
                k_triplets.push((j, i, k));
                let s: f64 = rng.gen_range(-scale..scale);
                s_triplets.push((i, j, s));
                s_triplets.push((j, i, -s));
            }
        }
    }
    StructuredOperator::new(
        SparseReal::from_triplets(n, &k_triplets).unwrap(),
        SparseReal::from_triplets(n, &s_triplets).unwrap(),
    )
    .unwrap()
}

fn random_unitary(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<Complex64>> {
    let m = nalgebra::DMatrix::from_fn(n, n, |_, _| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    let q = m.qr().q();
    (0..n)
        .map(|i| (0..n).map(|j| q[(i, j)]).collect())
        .collect()
}

struct Instance {
    problem: Problem,
    theta: Vec<f64>,
    scheme: HermiteScheme,
    grid: TimeGrid,
    initial: RealStateMatrix,
    target: GateTarget,
    config: ObjectiveConfig,
    duration: f64,
}

/// Deterministic randomized problem: dimension ≤ 8, ≤ 3 control operators,
/// ≤ 30 parameters, ≤ 64 steps, cycling through all scheme orders. The mix
/// covers constant and spline-carrier pulses, both infidelity kinds, guard
/// weights, and Tikhonov regularization.
fn random_instance(rng: &mut ChaCha8Rng, idx: usize) -> Instance {
    let order = ORDERS[idx % ORDERS.len()];
    let n = rng.gen_range(2..=8);
    let n_controls = rng.gen_range(1..=3);
    let n_steps = *[8usize, 12, 16, 24, 32, 48, 64].choose(rng).unwrap();
    let duration = rng.gen_range(1.0..3.0);

    let drift = random_hermitian_operator(rng, n, 0.3);
    let mut ops = Vec::new();
    let mut pulses = Vec::new();
    for _ in 0..n_controls {
        ops.push(random_hermitian_operator(rng, n, 0.3));
        if rng.gen_bool(0.4) {
            pulses.push(PulseShape::Constant);
        } else {
            let degree = rng.gen_range(1..=3);
            let wavelets = rng.gen_range(degree + 1..=5);
            let carrier = rng.gen_range(0.0..2.0);
            pulses.push(PulseShape::BsplineCarrier(
                BsplineCarrierPulse::new(degree, wavelets, vec![carrier], duration).unwrap(),
            ));
        }
    }
    let controls = ControlEnsemble::new(pulses, duration).unwrap();
    let problem = Problem::new(drift, ops, controls).unwrap();
    assert!(problem.n_params() <= 30);

    let theta: Vec<f64> = (0..problem.n_params())
        .map(|_| rng.gen_range(-0.4..0.4))
        .collect();
    let essential: Vec<usize> = (0..n).collect();
    let initial = basis_matrix(n, &essential);
    let target = GateTarget::from_complex_gate(&random_unitary(rng, n), &essential, n).unwrap();

    let mut config = ObjectiveConfig {
        infidelity_kind: if idx % 2 == 0 {
            InfidelityKind::Trace
        } else {
            InfidelityKind::Generalized
        },
        ..Default::default()
    };
    if idx % 3 == 0 {
        config.guard_weights = Some(GuardWeights {
            w: (0..n).map(|_| rng.gen_range(0.0..0.3)).collect(),
        });
        config.guard_coefficient = 0.25;
    }
    if idx % 5 == 0 {
        config.regularization = 0.1;
    }

    Instance {
        problem,
        theta,
        scheme: HermiteScheme::of_order(order).unwrap(),
        grid: TimeGrid::new(duration, n_steps).unwrap(),
        initial,
        target,
        config,
        duration,
    }
}

/// Compare a measured error table against its expected cells: every cell
/// where both values sit above the roundoff floor must agree within the
/// given factor.
fn assert_table_cells(
    label: &str,
    measured: &[Vec<f64>],
    expected: &[[f64; 5]; 6],
    factor: f64,
) {
    for (oi, order) in ORDERS.iter().enumerate() {
        for (si, steps) in STEP_COUNTS.iter().enumerate() {
            let m = measured[oi][si];
            let e = expected[oi][si];
            if m <= ERROR_FLOOR || e <= ERROR_FLOOR {
                continue;
            }
            let ratio = m / e;
            assert!(
                (1.0 / factor..=factor).contains(&ratio),
                "{label} order {order} steps {steps}: measured {m:.3e} vs expected {e:.3e} \
                 (ratio {ratio:.2} outside ×{factor})"
            );
        }
    }
}

/// Observed rate across the last step doubling whose two errors are both
/// above the floor; None when no such pair exists.
fn last_clean_rate(errors: &[f64]) -> Option<f64> {
    for i in (1..errors.len()).rev() {
        if errors[i - 1] > ERROR_FLOOR && errors[i] > ERROR_FLOOR && errors[i] < errors[i - 1] {
            return Some((errors[i - 1] / errors[i]).ln() / 2.0_f64.ln());
        }
    }
    None
}

#[test]
fn two_level_state_errors_match_the_reference_table() {
    let start = Instant::now();
    let spec = RabiSpec::study_protocol();
    let problem = rabi_problem(spec.t_final).unwrap();
    let initial = basis_matrix(2, &[0, 1]);
    let exact = unitary_to_real_matrix(&rabi_unitary(&spec, spec.t_final));

    let studies = convergence_study(
        &problem,
        &spec.theta(),
        spec.t_final,
        &initial,
        &ORDERS,
        &STEP_COUNTS,
        &Reference::Exact(exact),
        &KrylovOptions::default(),
        ExecMode::Parallel,
    )
    .unwrap();

    let measured: Vec<Vec<f64>> = studies
        .iter()
        .map(|s| s.rows.iter().map(|r| r.error).collect())
        .collect();
    for (order, row) in ORDERS.iter().zip(&measured) {
        println!(
            "state errors order {order:2}: {}",
            row.iter()
                .map(|e| format!("{e:9.2e}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }

    assert_table_cells("state error", &measured, &EXPECTED_STATE_ERRORS, 3.0);
    for (oi, order) in ORDERS.iter().enumerate() {
        let rate = last_clean_rate(&measured[oi])
            .unwrap_or_else(|| panic!("order {order}: no clean step doubling above the floor"));
        println!("state rate order {order:2}: {rate:.2}");
        assert!(
            (rate - *order as f64).abs() <= 0.3,
            "order {order}: observed rate {rate:.2} outside ±0.3"
        );
    }

    let elapsed = start.elapsed();
    println!("state table runtime: {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(10), "budget exceeded: {elapsed:?}");
}

#[test]
fn two_level_gradient_errors_match_the_reference_table() {
    let start = Instant::now();
    let spec = RabiSpec::study_protocol();
    let problem = rabi_problem(spec.t_final).unwrap();
    let initial = basis_matrix(2, &[0, 1]);
    let target = GateTarget::from_complex_gate(&hadamard_rows(), &[0, 1], 2).unwrap();
    let config = ObjectiveConfig {
        infidelity_kind: InfidelityKind::Trace,
        ..Default::default()
    };
    let analytic = rabi_infidelity_gradient(&spec, &hadamard_mat2()).unwrap();

    let mut measured: Vec<Vec<f64>> = Vec::new();
    for order in ORDERS {
        let scheme = HermiteScheme::of_order(order).unwrap();
        let mut row = Vec::new();
        for steps in STEP_COUNTS {
            let grid = TimeGrid::new(spec.t_final, steps).unwrap();
            let (_, report) = compute_gradient(
                &problem,
                &spec.theta(),
                &scheme,
                &grid,
                &initial,
                &config,
                &target,
                &KrylovOptions::default(),
                AccumulationMethod::Efficient,
                ExecMode::Parallel,
            )
            .unwrap();
            row.push(relative_l2_error(&report.grad, &analytic, ERROR_FLOOR));
        }
        println!(
            "gradient errors order {order:2}: {}",
            row.iter()
                .map(|e| format!("{e:9.2e}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        measured.push(row);
    }

    assert_table_cells("gradient error", &measured, &EXPECTED_GRADIENT_ERRORS, 3.0);

    let elapsed = start.elapsed();
    println!("gradient table runtime: {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(30), "budget exceeded: {elapsed:?}");
}

#[test]
fn adjoint_gradient_matches_finite_differences_on_random_problems() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0003);
    let mut worst = 0.0_f64;
    for idx in 0..50 {
        let inst = random_instance(&mut rng, idx);
        let (_, report) = compute_gradient(
            &inst.problem,
            &inst.theta,
            &inst.scheme,
            &inst.grid,
            &inst.initial,
            &inst.config,
            &inst.target,
            &KrylovOptions::default(),
            AccumulationMethod::Efficient,
            ExecMode::Parallel,
        )
        .unwrap();

        let evaluator = |th: &[f64]| -> PkResult<f64> {
            let (history, _) = forward_evolve(
                &inst.problem,
                th,
                &inst.scheme,
                &inst.grid,
                &inst.initial,
                &KrylovOptions::default(),
                ExecMode::Sequential,
            )?;
            Ok(objective_parts(&history, &inst.config, &inst.target, th)?.total)
        };
        let (_, rel) = finite_difference_best_h(evaluator, &inst.theta, &report.grad).unwrap();
        worst = worst.max(rel);
        assert!(
            rel <= 1e-6,
            "instance {idx} (dim {}, order {}, {} params): FD deviation {rel:.3e}",
            inst.problem.dim(),
            inst.scheme.order,
            inst.problem.n_params(),
        );
    }
    let elapsed = start.elapsed();
    println!("worst FD deviation over 50 instances: {worst:.3e}; runtime {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(120), "budget exceeded: {elapsed:?}");
}

#[test]
fn scheme_application_counts_are_exact_and_accumulation_is_parameter_count_free() {
    let start = Instant::now();
    let forward_expected = [1u64, 3, 6, 10, 15, 21];
    let adjoint_expected = [1u64, 3, 7, 15, 31, 63];

    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0004);
    let inst = random_instance(&mut rng, 1);
    let dim = inst.problem.dim();
    let t = 0.37 * inst.duration;
    let dt = inst.duration / 17.0;
    let w = RealState::from_vec((0..2 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

    for (qi, order) in ORDERS.iter().enumerate() {
        let scheme = HermiteScheme::of_order(*order).unwrap();
        let a = inst
            .problem
            .a_derivatives(t, scheme.a_derivative_order())
            .unwrap();
        let mut out = RealState::zeros(dim);
        let mut scratch = RlScratch::new(dim, order / 2);

        let mut count = 0u64;
        apply_rl(&scheme, &a, dt, &w, Side::R, &mut out, &mut scratch, &mut count);
        assert_eq!(
            count, forward_expected[qi],
            "order {order}: forward application count"
        );

        count = 0;
        apply_rl_transpose(&scheme, &a, dt, &w, Side::L, &mut out, &mut count);
        assert_eq!(
            count, adjoint_expected[qi],
            "order {order}: transposed application count"
        );
    }
    println!("per-step application counts match {forward_expected:?} / {adjoint_expected:?}");

    // Doubling the spline count doubles the parameter count but must leave
    // the accumulation stage's operator-application count untouched.
    let accumulation_count = |wavelets: usize| -> (usize, u64) {
        let sys = SystemSpec {
            subsystems: vec![SubsystemSpec {
                essential_levels: 2,
                guard_levels: 1,
                transition_freq: TWO_PI * 4.8,
                self_kerr: TWO_PI * 0.2,
            }],
            cross_kerr: vec![],
            frame: Frame::Rotating,
        };
        let drift = build_drift(&sys).unwrap();
        let (in_phase, quadrature) = build_control_operators(&sys, 1).unwrap();
        let duration = 4.0;
        let pulse = || {
            PulseShape::BsplineCarrier(
                BsplineCarrierPulse::new(2, wavelets, vec![TWO_PI * 0.2], duration).unwrap(),
            )
        };
        let controls = ControlEnsemble::new(vec![pulse(), pulse()], duration).unwrap();
        let problem = Problem::new(drift, vec![in_phase, quadrature], controls).unwrap();
        let theta = random_initial_controls(problem.n_params(), 0.02, 11).unwrap();
        let initial = basis_matrix(3, &[0, 1]);
        let target = GateTarget::from_complex_gate(&hadamard_rows(), &[0, 1], 3).unwrap();
        let config = ObjectiveConfig {
            infidelity_kind: InfidelityKind::Trace,
            ..Default::default()
        };
        let scheme = HermiteScheme::of_order(6).unwrap();
        let grid = TimeGrid::new(duration, 32).unwrap();
        let (_, report) = compute_gradient(
            &problem,
            &theta,
            &scheme,
            &grid,
            &initial,
            &config,
            &target,
            &KrylovOptions::default(),
            AccumulationMethod::Efficient,
            ExecMode::Sequential,
        )
        .unwrap();
        (problem.n_params(), report.stats.accumulation.matvec_count)
    };
    let (p_small, c_small) = accumulation_count(4);
    let (p_big, c_big) = accumulation_count(8);
    assert_eq!(p_big, 2 * p_small);
    assert_eq!(
        c_small, c_big,
        "accumulation applications changed when parameters doubled ({p_small} -> {p_big})"
    );
    println!(
        "accumulation applications: {c_small} at {p_small} params == {c_big} at {p_big} params"
    );

    let elapsed = start.elapsed();
    println!("count check runtime: {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(30), "budget exceeded: {elapsed:?}");
}

#[test]
fn naive_and_efficient_accumulation_agree() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0003);
    let mut worst = 0.0_f64;
    for idx in 0..50 {
        let inst = random_instance(&mut rng, idx);
        let (history, _) = forward_evolve(
            &inst.problem,
            &inst.theta,
            &inst.scheme,
            &inst.grid,
            &inst.initial,
            &KrylovOptions::default(),
            ExecMode::Parallel,
        )
        .unwrap();
        let (adjoint, _) = adjoint_evolve(
            &inst.problem,
            &inst.theta,
            &inst.scheme,
            &inst.grid,
            &history,
            &inst.config,
            &inst.target,
            &KrylovOptions::default(),
            ExecMode::Parallel,
        )
        .unwrap();
        let naive = accumulate_gradient_naive(
            &inst.problem,
            &inst.theta,
            &inst.scheme,
            &inst.grid,
            &history,
            &adjoint,
            ExecMode::Parallel,
        )
        .unwrap();
        let efficient = accumulate_gradient_efficient(
            &inst.problem,
            &inst.theta,
            &inst.scheme,
            &inst.grid,
            &history,
            &adjoint,
            ExecMode::Parallel,
        )
        .unwrap();
        let rel = relative_l2_error(&naive.grad, &efficient.grad, 1e-12);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-12,
            "instance {idx}: naive vs efficient deviation {rel:.3e}"
        );
    }
    let elapsed = start.elapsed();
    println!("worst naive/efficient deviation over 50 instances: {worst:.3e}; runtime {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(120), "budget exceeded: {elapsed:?}");
}

#[test]
fn forward_and_transposed_step_operators_are_adjoint() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0006);
    let mut worst = 0.0_f64;
    for trial in 0..100 {
        let inst = random_instance(&mut rng, trial);
        let dim = inst.problem.dim();
        let t = rng.gen_range(0.0..inst.duration);
        let dt = inst.duration / inst.grid.n_steps as f64;
        let a = inst
            .problem
            .a_derivatives(t, inst.scheme.a_derivative_order())
            .unwrap();

        let mut random_state = || {
            let mut s =
                RealState::from_vec((0..2 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap();
            s.scale(1.0 / s.norm());
            s
        };
        let w = random_state();
        let lambda = random_state();

        for side in [Side::R, Side::L] {
            let mut y = RealState::zeros(dim);
            let mut z = RealState::zeros(dim);
            let mut scratch = RlScratch::new(dim, inst.scheme.order / 2);
            let mut count = 0u64;
            apply_rl(&inst.scheme, &a, dt, &w, side, &mut y, &mut scratch, &mut count);
            apply_rl_transpose(&inst.scheme, &a, dt, &lambda, side, &mut z, &mut count);
            let lhs = y.dot(&lambda);
            let rhs = w.dot(&z);
            let denom = (y.norm() * lambda.norm())
                .max(w.norm() * z.norm())
                .max(1e-300);
            let rel = (lhs - rhs).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel <= 1e-13,
                "trial {trial} ({side:?}, order {}): adjoint identity violated by {rel:.3e}",
                inst.scheme.order
            );
        }
    }
    let elapsed = start.elapsed();
    println!("worst adjoint-identity deviation over 100 trials: {worst:.3e}; runtime {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(60), "budget exceeded: {elapsed:?}");
}

#[test]
fn infidelity_objectives_are_bounded_phase_invariant_and_consistent() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0007);
    for trial in 0..50 {
        let n = rng.gen_range(2..=6);
        let essential: Vec<usize> = (0..n).collect();
        let target = GateTarget::from_complex_gate(&random_unitary(&mut rng, n), &essential, n)
            .unwrap();

        // Arbitrary (generally non-unitary) state matrices keep the
        // generalized infidelity non-negative.
        let arbitrary: Vec<Vec<Complex64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                    })
                    .collect()
            })
            .collect();
        let m = complex_columns_to_matrix(&arbitrary, n);
        let ig = generalized_infidelity(&m, &target).unwrap();
        assert!(ig >= -1e-12, "trial {trial}: generalized infidelity {ig:.3e}");

        // On unitary inputs the generalized and trace infidelities
        // coincide.
        let u_rows = random_unitary(&mut rng, n);
        let u_cols: Vec<Vec<Complex64>> = (0..n)
            .map(|j| (0..n).map(|i| u_rows[i][j]).collect())
            .collect();
        let u = complex_columns_to_matrix(&u_cols, n);
        let it = infidelity(InfidelityKind::Trace, &u, &target).unwrap();
        let ig = infidelity(InfidelityKind::Generalized, &u, &target).unwrap();
        assert!(
            (it - ig).abs() <= 1e-12,
            "trial {trial}: trace {it:.3e} vs generalized {ig:.3e}"
        );

        // Global phase leaves the fidelity unchanged.
        let phase = Complex64::from_polar(1.0, 0.7);
        let rotated: Vec<Vec<Complex64>> = u_cols
            .iter()
            .map(|c| c.iter().map(|x| x * phase).collect())
            .collect();
        let up = complex_columns_to_matrix(&rotated, n);
        let f0 = trace_fidelity(&u, &target).unwrap();
        let f1 = trace_fidelity(&up, &target).unwrap();
        let rel = (f0 - f1).abs() / f0.abs().max(1e-300);
        assert!(rel <= 1e-13, "trial {trial}: phase moved fidelity by {rel:.3e}");
    }
    let elapsed = start.elapsed();
    println!("objective properties held over 50 trials; runtime {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(30), "budget exceeded: {elapsed:?}");
}

#[test]
fn unitarity_drift_vanishes_at_the_scheme_order() {
    let start = Instant::now();
    // Single 3-level system with an anharmonicity and one smooth
    // (single-span, degree-5) spline-carrier control: genuinely
    // time-dependent dynamics with C^∞ coefficients.
    let sys = SystemSpec {
        subsystems: vec![SubsystemSpec {
            essential_levels: 3,
            guard_levels: 0,
            transition_freq: TWO_PI * 4.0,
            self_kerr: TWO_PI * 0.2,
        }],
        cross_kerr: vec![],
        frame: Frame::Rotating,
    };
    let duration = 10.0;
    let drift = build_drift(&sys).unwrap();
    let (in_phase, _) = build_control_operators(&sys, 1).unwrap();
    let pulse = PulseShape::BsplineCarrier(
        BsplineCarrierPulse::new(5, 6, vec![TWO_PI * 0.2], duration).unwrap(),
    );
    let controls = ControlEnsemble::new(vec![pulse], duration).unwrap();
    let problem = Problem::new(drift, vec![in_phase], controls).unwrap();
    let theta = random_initial_controls(problem.n_params(), 0.3, 8).unwrap();
    let initial = basis_matrix(3, &[0, 1, 2]);

    let steps_list = [16usize, 32, 64, 128, 256];
    for order in [2usize, 4, 6, 8] {
        let scheme = HermiteScheme::of_order(order).unwrap();
        let mut errors = Vec::new();
        for steps in steps_list {
            let grid = TimeGrid::new(duration, steps).unwrap();
            let (history, _) = forward_evolve(
                &problem,
                &theta,
                &scheme,
                &grid,
                &initial,
                &KrylovOptions::default(),
                ExecMode::Parallel,
            )
            .unwrap();
            let dt = duration / steps as f64;
            let sum_sq: f64 = (0..history.n_nodes())
                .map(|n| {
                    let d = norm_deviation(&history.node_matrix(n));
                    d * d
                })
                .sum();
            errors.push((dt * sum_sq).sqrt());
        }
        println!(
            "unitarity drift order {order}: {}",
            errors
                .iter()
                .map(|e| format!("{e:9.2e}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        let rate = last_clean_rate(&errors)
            .unwrap_or_else(|| panic!("order {order}: no clean step doubling above the floor"));
        println!("unitarity drift rate order {order}: {rate:.2}");
        assert!(
            (rate - order as f64).abs() <= 0.5,
            "order {order}: drift rate {rate:.2} outside ±0.5"
        );
    }
    let elapsed = start.elapsed();
    println!("unitarity drift runtime: {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(60), "budget exceeded: {elapsed:?}");
}

#[test]
fn hadamard_design_reaches_low_infidelity() {
    let start = Instant::now();
    // Two-level system H = 0.5·ω₀·σ_z + c(t)·σ_x with ω₀ = 0.1·2π rad/ns
    // and a resonant spline-carrier pulse.
    let omega0 = 0.1 * TWO_PI;
    let duration = 20.0;
    let drift = StructuredOperator::from_k(
        SparseReal::from_triplets(2, &[(0, 0, 0.5 * omega0), (1, 1, -0.5 * omega0)]).unwrap(),
    );
    let sigma_x = StructuredOperator::from_k(
        SparseReal::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap(),
    );
    let pulse = PulseShape::BsplineCarrier(
        BsplineCarrierPulse::new(3, 10, vec![omega0], duration).unwrap(),
    );
    let controls = ControlEnsemble::new(vec![pulse], duration).unwrap();
    let problem = Problem::new(drift, vec![sigma_x], controls).unwrap();
    let n_params = problem.n_params();
    let theta0 = random_initial_controls(n_params, 0.005, 20260822).unwrap();

    let initial = basis_matrix(2, &[0, 1]);
    let target = GateTarget::from_complex_gate(&hadamard_rows(), &[0, 1], 2).unwrap();
    let config = ObjectiveConfig {
        infidelity_kind: InfidelityKind::Trace,
        ..Default::default()
    };
    let opts = OptimizeOptions {
        bounds: Some(vec![(-0.5, 0.5); n_params]),
        max_iterations: 500,
        max_wall_time: Some(Duration::from_secs(300)),
        target_objective: Some(5.0e-5),
        gradient_tolerance: 1e-12,
        ..Default::default()
    };
    let scheme = HermiteScheme::of_order(6).unwrap();
    let grid = TimeGrid::new(duration, 128).unwrap();

    let (_, trace) = optimize(
        &problem,
        &theta0,
        &config,
        &scheme,
        &grid,
        &initial,
        &target,
        &opts,
        &KrylovOptions::default(),
        AccumulationMethod::Efficient,
        ExecMode::Parallel,
    )
    .unwrap();

    let last = trace.iterations.last().unwrap();
    let elapsed = start.elapsed();
    println!(
        "Hadamard design: infidelity {:.3e} after {} iterations ({:?}); runtime {elapsed:.2?}",
        last.infidelity,
        last.iteration,
        trace.termination,
    );
    assert!(last.iteration <= 500);
    assert!(
        last.infidelity < 1e-4,
        "final infidelity {:.3e}",
        last.infidelity
    );
    assert!(elapsed < Duration::from_secs(300), "budget exceeded: {elapsed:?}");
}

#[test]
fn high_order_gradients_outpace_second_order_at_tight_error() {
    let start = Instant::now();
    // Reduced two-qudit model: 3 levels each, anharmonicities and a weak
    // static coupling, rotating frame, one smooth spline pulse per control
    // quadrature.
    let sys = SystemSpec {
        subsystems: vec![
            SubsystemSpec {
                essential_levels: 3,
                guard_levels: 0,
                transition_freq: TWO_PI * 4.82,
                self_kerr: TWO_PI * 2.25e-1,
            },
            SubsystemSpec {
                essential_levels: 3,
                guard_levels: 0,
                transition_freq: TWO_PI * 4.11,
                self_kerr: TWO_PI * 1.20e-2,
            },
        ],
        cross_kerr: vec![((2, 1), TWO_PI * 1.00e-6)],
        frame: Frame::Rotating,
    };
    let duration = 20.0;
    let total = sys.total_dim();
    let essential: Vec<usize> = (0..total).collect();
    let drift = build_drift(&sys).unwrap();
    let mut ops = Vec::new();
    let mut pulses = Vec::new();
    for q in 1..=2 {
        let (in_phase, quadrature) = build_control_operators(&sys, q).unwrap();
        ops.push(in_phase);
        ops.push(quadrature);
        for _ in 0..2 {
            pulses.push(PulseShape::BsplineCarrier(
                BsplineCarrierPulse::new(3, 4, vec![0.0], duration).unwrap(),
            ));
        }
    }
    let controls = ControlEnsemble::new(pulses, duration).unwrap();
    let problem = Problem::new(drift, ops, controls).unwrap();
    let n_params = problem.n_params();
    let initial = basis_matrix(total, &essential);

    // Error study: mean relative final-state error over a few control
    // draws, per order and step count, against a refined high-order run.
    let study_orders = [2usize, 4, 6, 8];
    let study_steps = [16usize, 32, 64, 128];
    let n_samples = 3;
    let mut mean_errors = vec![vec![0.0_f64; study_steps.len()]; study_orders.len()];
    for sample in 0..n_samples {
        let theta = random_initial_controls(n_params, 0.05, 1000 + sample as u64).unwrap();
        let studies = convergence_study(
            &problem,
            &theta,
            duration,
            &initial,
            &study_orders,
            &study_steps,
            &Reference::FineGrid {
                order: 12,
                refine: 4,
            },
            &KrylovOptions::default(),
            ExecMode::Parallel,
        )
        .unwrap();
        for (oi, study) in studies.iter().enumerate() {
            for (si, row) in study.rows.iter().enumerate() {
                mean_errors[oi][si] += row.error / n_samples as f64;
            }
        }
    }

    // Steps needed for a 1e-5 relative error, then gradient wall time at
    // that resolution.
    let target_error = 1e-5;
    let target = GateTarget::from_complex_gate(&random_unitary(
        &mut ChaCha8Rng::seed_from_u64(0x5EED_0010),
        total,
    ), &essential, total)
    .unwrap();
    let config = ObjectiveConfig {
        infidelity_kind: InfidelityKind::Trace,
        ..Default::default()
    };
    let theta = random_initial_controls(n_params, 0.05, 1000).unwrap();
    let mut timings = Vec::new();
    for (oi, &order) in study_orders.iter().enumerate() {
        let rows: Vec<ConvergenceRow> = study_steps
            .iter()
            .zip(&mean_errors[oi])
            .map(|(&steps, &error)| ConvergenceRow {
                steps,
                error,
                rate: None,
            })
            .collect();
        let steps = recommend_steps(&rows, target_error).unwrap();
        let scheme = HermiteScheme::of_order(order).unwrap();
        let grid = TimeGrid::new(duration, steps).unwrap();
        let mut best = Duration::MAX;
        for _ in 0..3 {
            let t0 = Instant::now();
            let (_, report) = compute_gradient(
                &problem,
                &theta,
                &scheme,
                &grid,
                &initial,
                &config,
                &target,
                &KrylovOptions::default(),
                AccumulationMethod::Efficient,
                ExecMode::Parallel,
            )
            .unwrap();
            assert_eq!(report.grad.len(), n_params);
            best = best.min(t0.elapsed());
        }
        println!(
            "order {order}: errors {} -> {steps} steps for {target_error:.0e}, gradient in {best:.2?}",
            mean_errors[oi]
                .iter()
                .map(|e| format!("{e:8.1e}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        timings.push((order, steps, best));
    }

    let second_order = timings[0].2;
    let best_high = timings[1..]
        .iter()
        .min_by_key(|(_, _, t)| *t)
        .copied()
        .unwrap();
    let speedup = second_order.as_secs_f64() / best_high.2.as_secs_f64();
    println!(
        "order 2 gradient: {second_order:.2?}; best higher order {} ({} steps): {:.2?}; speedup {speedup:.1}x",
        best_high.0, best_high.1, best_high.2
    );
    assert!(
        speedup >= 3.0,
        "higher-order speedup {speedup:.2}x below 3x"
    );

    let elapsed = start.elapsed();
    println!("order comparison runtime: {elapsed:.2?}");
    assert!(elapsed < Duration::from_secs(900), "budget exceeded: {elapsed:?}");
}
