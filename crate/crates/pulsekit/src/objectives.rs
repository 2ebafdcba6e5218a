//! Gate-design objectives: trace and generalized infidelity of the final
//! propagated columns against a target gate, a guard-level population
//! penalty integrated over the evolution, and the state derivatives of all
//! of these, which seed and drive the adjoint sweep.
//!
//! Frobenius inner products of complex matrices are evaluated directly on
//! the real split: with T = T_Re + i T_Im and U = U_Re + i U_Im,
//! tr(T†U) = a + i b where a = ⟨T_Re,U_Re⟩ + ⟨T_Im,U_Im⟩ and
//! b = ⟨T_Re,U_Im⟩ − ⟨T_Im,U_Re⟩.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hermite_integrator::{StateHistory, TimeGrid};
use crate::model::GuardWeights;
use crate::state_core::{complex_to_real, RealState, RealStateMatrix};

/// Which infidelity drives the optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfidelityKind {
    /// 1 − |⟨U, U_target⟩_F|²/E²; can reward norm inflation of
    /// non-unitary numerical states.
    Trace,
    /// ‖U‖_F²/E − |⟨U, U_target⟩_F|²/E²; non-negative for arbitrary U and
    /// equal to the trace infidelity when U is unitary.
    Generalized,
}

/// Target gate in the real split: V_target = G U_0 with U_0 the embedding
/// of the essential basis into the full Hilbert space.
#[derive(Clone, Debug)]
pub struct GateTarget {
    pub v_target: RealStateMatrix,
    pub essential_dim: usize,
}

impl GateTarget {
    /// Wrap an already-split target; columns must be orthonormal to 1e−12
    /// (a unitary gate acting on orthonormal initial columns).
    pub fn new(v_target: RealStateMatrix) -> Result<Self> {
        let e = v_target.columns.len();
        for i in 0..e {
            for j in i..e {
                let ci = &v_target.columns[i];
                let cj = &v_target.columns[j];
                // Complex inner product ⟨c_i, c_j⟩ = (Re, Im) on the split.
                let re: f64 = ci
                    .data
                    .iter()
                    .zip(&cj.data)
                    .map(|(x, y)| x * y)
                    .sum();
                let (iu, iv) = (ci.u(), ci.v());
                let (ju, jv) = (cj.u(), cj.v());
                let im: f64 = iu
                    .iter()
                    .zip(jv)
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    - iv.iter().zip(ju).map(|(x, y)| x * y).sum::<f64>();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (re - expect).abs() > 1e-12 || im.abs() > 1e-12 {
                    return Err(Error::InvalidObjective(format!(
                        "target columns {i} and {j} are not orthonormal: \
                         inner product {re} + {im}i"
                    )));
                }
            }
        }
        Ok(GateTarget {
            essential_dim: e,
            v_target,
        })
    }

    /// Build the target from a complex E×E gate matrix acting on the
    /// essential subspace: column k of the target is Σ_j G[j][k] e_{idx(j)}
    /// where idx enumerates the essential basis states in the full space.
    pub fn from_complex_gate(
        gate: &[Vec<Complex64>],
        essential_indices: &[usize],
        total_dim: usize,
    ) -> Result<Self> {
        let e = essential_indices.len();
        if gate.len() != e || gate.iter().any(|row| row.len() != e) {
            return Err(Error::InvalidObjective(format!(
                "gate must be {e}x{e} to act on {e} essential states"
            )));
        }
        if essential_indices.iter().any(|&i| i >= total_dim) {
            return Err(Error::InvalidObjective(
                "essential index outside the state space".into(),
            ));
        }
        let columns = (0..e)
            .map(|k| {
                let mut psi = vec![Complex64::new(0.0, 0.0); total_dim];
                for (j, &idx) in essential_indices.iter().enumerate() {
                    psi[idx] = gate[j][k];
                }
                complex_to_real(&psi)
            })
            .collect();
        let mut m = RealStateMatrix::new(columns)?;
        m.essential_dim = e;
        GateTarget::new(m)
    }
}

/// Objective = infidelity(U(T)) + guard_coefficient · guard penalty
/// + regularization · ‖θ‖².
#[derive(Clone, Debug)]
pub struct ObjectiveConfig {
    pub infidelity_kind: InfidelityKind,
    pub guard_weights: Option<GuardWeights>,
    pub guard_coefficient: f64,
    pub regularization: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            infidelity_kind: InfidelityKind::Trace,
            guard_weights: None,
            guard_coefficient: 1.0,
            regularization: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.guard_coefficient.is_finite() || self.guard_coefficient < 0.0 {
            return Err(Error::InvalidObjective(format!(
                "guard coefficient must be finite and non-negative, got {}",
                self.guard_coefficient
            )));
        }
        if !self.regularization.is_finite() || self.regularization < 0.0 {
            return Err(Error::InvalidObjective(format!(
                "regularization weight must be finite and non-negative, got {}",
                self.regularization
            )));
        }
        Ok(())
    }
}

fn check_dims(u: &RealStateMatrix, target: &GateTarget) -> Result<()> {
    if u.columns.len() != target.v_target.columns.len()
        || u.dim_complex() != target.v_target.dim_complex()
    {
        return Err(Error::DimensionMismatch(format!(
            "state matrix is {}x{}, target is {}x{}",
            u.dim_complex(),
            u.columns.len(),
            target.v_target.dim_complex(),
            target.v_target.columns.len()
        )));
    }
    Ok(())
}

/// (a, b) with tr(T†U) = a + ib, column-summed on the real split.
fn frobenius_overlap(u: &RealStateMatrix, target: &RealStateMatrix) -> (f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    for (uc, tc) in u.columns.iter().zip(&target.columns) {
        let (uu, uv) = (uc.u(), uc.v());
        let (tu, tv) = (tc.u(), tc.v());
        for i in 0..uu.len() {
            a += tu[i] * uu[i] + tv[i] * uv[i];
            b += tu[i] * uv[i] - tv[i] * uu[i];
        }
    }
    (a, b)
}

/// F = |⟨U, U_target⟩_F|² / E².
pub fn trace_fidelity(u: &RealStateMatrix, target: &GateTarget) -> Result<f64> {
    check_dims(u, target)?;
    let e = target.essential_dim as f64;
    let (a, b) = frobenius_overlap(u, &target.v_target);
    Ok((a * a + b * b) / (e * e))
}

/// I_G = ‖U‖_F²/E − |⟨U, U_target⟩_F|²/E².
pub fn generalized_infidelity(u: &RealStateMatrix, target: &GateTarget) -> Result<f64> {
    check_dims(u, target)?;
    let e = target.essential_dim as f64;
    let norm2: f64 = u.columns.iter().map(|c| c.data.iter().map(|x| x * x).sum::<f64>()).sum();
    let (a, b) = frobenius_overlap(u, &target.v_target);
    Ok(norm2 / e - (a * a + b * b) / (e * e))
}

/// The configured infidelity of the final-time state matrix.
pub fn infidelity(kind: InfidelityKind, u: &RealStateMatrix, target: &GateTarget) -> Result<f64> {
    match kind {
        InfidelityKind::Trace => Ok(1.0 - trace_fidelity(u, target)?),
        InfidelityKind::Generalized => generalized_infidelity(u, target),
    }
}

/// Trapezoid weight ω_n on the step grid: 1/2 at the ends, 1 inside.
fn trapezoid_weight(n: usize, n_steps: usize) -> f64 {
    if n == 0 || n == n_steps {
        0.5
    } else {
        1.0
    }
}

fn weighted_population(state: &RealState, w: &GuardWeights) -> f64 {
    let (u, v) = (state.u(), state.v());
    w.w
        .iter()
        .enumerate()
        .map(|(i, &wi)| wi * (u[i] * u[i] + v[i] * v[i]))
        .sum()
}

/// Composite-trapezoid discretization of (1/T)∫ ⟨U, W U⟩_F dt on the
/// timestep grid: (Δt/T) Σ_n ω_n Σ_cols Σ_i w_i |ψ_i|².
pub fn guard_penalty_discrete(
    history: &StateHistory,
    w: &GuardWeights,
    grid: &TimeGrid,
) -> Result<f64> {
    if history.grid.n_steps != grid.n_steps {
        return Err(Error::DimensionMismatch(format!(
            "history has {} steps, grid has {}",
            history.grid.n_steps, grid.n_steps
        )));
    }
    if let Some(col) = history.columns.first() {
        if col[0].dim_complex != w.dim() {
            return Err(Error::DimensionMismatch(format!(
                "guard weights cover {} levels, states have {}",
                w.dim(),
                col[0].dim_complex
            )));
        }
    }
    let mut total = 0.0;
    for n in 0..=grid.n_steps {
        let wn = trapezoid_weight(n, grid.n_steps);
        let node: f64 = history.columns.iter().map(|col| weighted_population(&col[n], w)).sum();
        total += wn * node;
    }
    Ok(total * grid.dt / grid.t_final)
}

/// The objective split into its summands. `guard_penalty` is the raw
/// quadrature value; the coefficient is applied only in `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveParts {
    pub total: f64,
    pub infidelity: f64,
    pub guard_penalty: f64,
    pub regularization: f64,
}

/// Objective value for a completed forward evolution, with its breakdown.
pub fn objective_parts(
    history: &StateHistory,
    config: &ObjectiveConfig,
    target: &GateTarget,
    theta: &[f64],
) -> Result<ObjectiveParts> {
    config.validate()?;
    let infid = infidelity(config.infidelity_kind, &history.final_matrix(), target)?;
    let guard = match &config.guard_weights {
        Some(w) => guard_penalty_discrete(history, w, &history.grid)?,
        None => 0.0,
    };
    let reg = if config.regularization > 0.0 {
        config.regularization * theta.iter().map(|t| t * t).sum::<f64>()
    } else {
        0.0
    };
    Ok(ObjectiveParts {
        total: infid + config.guard_coefficient * guard + reg,
        infidelity: infid,
        guard_penalty: guard,
        regularization: reg,
    })
}

/// Full objective value for a completed forward evolution.
pub fn objective_value(
    history: &StateHistory,
    config: &ObjectiveConfig,
    target: &GateTarget,
    theta: &[f64],
) -> Result<f64> {
    Ok(objective_parts(history, config, target, theta)?.total)
}

/// (∂𝔧_n/∂w_n)ᵀ per initial column, where 𝔧_n is the piece of the
/// objective pinned to node n: the quadrature-weighted guard term at every
/// node, plus the infidelity at the final node (the only cross-column
/// coupling). The θ-regularization has no state dependence and is handled
/// outside the adjoint sweep.
pub fn objective_state_derivative(
    n: usize,
    history: &StateHistory,
    config: &ObjectiveConfig,
    target: &GateTarget,
) -> Result<Vec<RealState>> {
    let n_steps = history.grid.n_steps;
    if n > n_steps {
        return Err(Error::InvalidObjective(format!(
            "node {n} outside 0..={n_steps}"
        )));
    }
    let dim = history.columns[0][0].dim_complex;
    let mut derivs: Vec<RealState> =
        (0..history.n_columns()).map(|_| RealState::zeros(dim)).collect();

    if let Some(w) = &config.guard_weights {
        let coef = 2.0 * config.guard_coefficient * trapezoid_weight(n, n_steps) * history.grid.dt
            / history.grid.t_final;
        for (col, d) in derivs.iter_mut().enumerate() {
            let state = &history.columns[col][n];
            let (su, sv) = (state.u(), state.v());
            let (du, dv) = d.uv_mut();
            for (i, &wi) in w.w.iter().enumerate() {
                du[i] += coef * wi * su[i];
                dv[i] += coef * wi * sv[i];
            }
        }
    }

    if n == n_steps {
        let u = history.final_matrix();
        let e = target.essential_dim as f64;
        let (a, b) = frobenius_overlap(&u, &target.v_target);
        // d[|tr|²/E²]/dU_Re = (2a·T_Re − 2b·T_Im)/E²,
        // d[|tr|²/E²]/dU_Im = (2a·T_Im + 2b·T_Re)/E²;
        // trace infidelity negates these, the generalized form adds 2U/E.
        let scale = 2.0 / (e * e);
        for (col, d) in derivs.iter_mut().enumerate() {
            let tc = &target.v_target.columns[col];
            let (tu, tv) = (tc.u(), tc.v());
            let uc = &u.columns[col];
            let (uu, uv) = (uc.u(), uc.v());
            let (du, dv) = d.uv_mut();
            for i in 0..dim {
                let fid_u = scale * (a * tu[i] - b * tv[i]);
                let fid_v = scale * (a * tv[i] + b * tu[i]);
                match config.infidelity_kind {
                    InfidelityKind::Trace => {
                        du[i] -= fid_u;
                        dv[i] -= fid_v;
                    }
                    InfidelityKind::Generalized => {
                        du[i] += 2.0 * uu[i] / e - fid_u;
                        dv[i] += 2.0 * uv[i] / e - fid_v;
                    }
                }
            }
        }
    }

    Ok(derivs)
}
