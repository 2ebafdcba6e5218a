//! Designs a Pauli-X gate on a three-level qudit directly through the
//! library API: build the system, attach spline controls, and run the
//! projected quasi-Newton loop on the exact adjoint gradient.

use pulsekit::adjoint_engine::AccumulationMethod;
use pulsekit::controls::{BsplineCarrierPulse, ControlEnsemble, Problem, PulseShape};
use pulsekit::exec::ExecMode;
use pulsekit::hermite_integrator::{HermiteScheme, KrylovOptions, TimeGrid};
use pulsekit::model::{
    build_control_operators, build_drift, Frame, GuardWeights, SubsystemSpec, SystemSpec, TWO_PI,
};
use pulsekit::objectives::{GateTarget, InfidelityKind, ObjectiveConfig};
use pulsekit::optimize::{optimize, random_initial_controls, OptimizeOptions};
use pulsekit::state_core::{RealState, RealStateMatrix};

fn main() -> pulsekit::Result<()> {
    // Transmon-style ladder: two essential levels, one guard level,
    // rotating frame (carriers below are relative to it).
    let sys = SystemSpec {
        subsystems: vec![SubsystemSpec {
            essential_levels: 2,
            guard_levels: 1,
            transition_freq: TWO_PI * 4.8,
            self_kerr: TWO_PI * 0.22,
        }],
        cross_kerr: vec![],
        frame: Frame::Rotating,
    };
    let drift = build_drift(&sys)?;
    let (in_phase, quadrature) = build_control_operators(&sys, 1)?;

    // One cubic B-spline envelope per drive quadrature, resonant carrier.
    let duration = 40.0; // ns
    let pulse = || {
        Ok::<_, pulsekit::Error>(PulseShape::BsplineCarrier(BsplineCarrierPulse::new(
            3,
            8,
            vec![0.0],
            duration,
        )?))
    };
    let controls = ControlEnsemble::new(vec![pulse()?, pulse()?], duration)?;
    let problem = Problem::new(drift, vec![in_phase, quadrature], controls)?;

    // Propagate the two essential basis states; target the embedded X.
    let total = 3;
    let essential = [0usize, 1];
    let mut columns = Vec::new();
    for &k in &essential {
        let mut w = RealState::zeros(total);
        w.data[k] = 1.0;
        columns.push(w);
    }
    let initial = RealStateMatrix {
        columns,
        essential_dim: essential.len(),
    };
    let x_rows = vec![
        vec![0.0.into(), 1.0.into()],
        vec![1.0.into(), 0.0.into()],
    ];
    let target = GateTarget::from_complex_gate(&x_rows, &essential, total)?;

    let config = ObjectiveConfig {
        infidelity_kind: InfidelityKind::Trace,
        guard_weights: Some(GuardWeights { w: vec![0.0, 0.0, 1.0] }),
        guard_coefficient: 0.1,
        regularization: 1e-6,
    };
    let opts = OptimizeOptions {
        bounds: Some(vec![(-0.25, 0.25); problem.n_params()]),
        max_iterations: 200,
        ..Default::default()
    };

    let theta0 = random_initial_controls(problem.n_params(), 0.01, 7)?;
    let scheme = HermiteScheme::of_order(4)?;
    let grid = TimeGrid::new(duration, 128)?;
    let (theta, trace) = optimize(
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
    )?;

    let last = trace.iterations.last().expect("at least one iteration");
    println!(
        "{} iterations: infidelity {:.3e}, guard penalty {:.3e} ({:?})",
        trace.iterations.len(),
        last.infidelity,
        last.guard_value,
        trace.termination,
    );
    println!("first parameters: {:?}", &theta[..4.min(theta.len())]);
    Ok(())
}
