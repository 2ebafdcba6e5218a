//! Parameterized control pulses c_j(t; θ): evaluation of values, analytic
//! time derivatives up to the method order, and gradients with respect to
//! the parameters θ.
//!
//! Every supported ansatz is linear in θ, so ∂c_j^{(i)}/∂θ_{j,k} is a pure
//! basis-function quantity independent of θ, and values are assembled as
//! dot products of the basis table with the pulse's parameter slice. Each
//! parameter belongs to exactly one pulse.
//!
//! The B-spline-times-carrier ansatz uses a clamped uniform knot vector on
//! [0, T]; carrier derivatives are expanded by the Leibniz rule with the
//! sin/cos values computed once per evaluation point.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::state_core::{RealState, StructuredOperator};

/// B-spline envelope times carrier waves.
///
/// For carriers Ω_1..Ω_C and basis functions B_1..B_W (W per quadrature),
/// the pulse is c(t) = Σ_c [cos-env_c(t) cos(Ω_c t) + sin-env_c(t) sin(Ω_c t)]
/// with each envelope a θ-weighted combination of the B_k. Parameter layout
/// per pulse: carrier-major, cos coefficients then sin coefficients.
/// A carrier frequency of zero degenerates to a plain envelope (its sin
/// quadrature is identically zero).
#[derive(Clone, Debug)]
pub struct BsplineCarrierPulse {
    pub degree: usize,
    /// Full clamped knot vector on [0, T].
    pub knots: Vec<f64>,
    /// Number of basis functions per (carrier, quadrature).
    pub n_basis: usize,
    /// Carrier angular frequencies, rad/ns; sign is taken from config as-is.
    pub carrier_freqs: Vec<f64>,
    pub duration: f64,
}

impl BsplineCarrierPulse {
    /// Uniform clamped knots: `wavelets` basis functions of the given degree
    /// on [0, duration]. Requires wavelets >= degree + 1 (at least one span).
    pub fn new(degree: usize, wavelets: usize, carrier_freqs: Vec<f64>, duration: f64) -> Result<Self> {
        if duration <= 0.0 {
            return Err(Error::InvalidControls("pulse duration must be positive".into()));
        }
        if wavelets < degree + 1 {
            return Err(Error::InvalidControls(format!(
                "{wavelets} wavelets cannot support degree {degree}; need at least degree + 1"
            )));
        }
        if carrier_freqs.is_empty() {
            return Err(Error::InvalidControls("pulse needs at least one carrier frequency".into()));
        }
        let spans = wavelets - degree;
        let mut knots = Vec::with_capacity(wavelets + degree + 1);
        knots.extend(std::iter::repeat(0.0).take(degree + 1));
        for i in 1..spans {
            knots.push(duration * i as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat(duration).take(degree + 1));
        Ok(BsplineCarrierPulse {
            degree,
            knots,
            n_basis: wavelets,
            carrier_freqs,
            duration,
        })
    }

    pub fn n_params(&self) -> usize {
        self.carrier_freqs.len() * 2 * self.n_basis
    }

    /// Index of the knot span containing t (right-continuous; the final
    /// span is used at t = T).
    fn span(&self, t: f64) -> usize {
        let low = self.degree;
        let high = self.knots.len() - self.degree - 2;
        let mut s = self.knots.partition_point(|&k| k <= t);
        s = s.saturating_sub(1);
        s.clamp(low, high)
    }

    /// Values and derivatives of the degree+1 basis functions that are
    /// nonzero at t: returns (first basis index, table[order][local]) with
    /// orders 0..=max_order. Orders beyond the degree are zero rows.
    fn basis_derivatives(&self, t: f64, max_order: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree;
        let span = self.span(t);
        let knots = &self.knots;

        // Triangular table of knot differences and basis values.
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        ndu[0][0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = t - knots[span + 1 - j];
            right[j] = knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![0.0; p + 1]; max_order + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }

        let top = max_order.min(p);
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0].fill(0.0);
            a[1].fill(0.0);
            a[0][0] = 1.0;
            for k in 1..=top {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = (p - k) as isize;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk as usize];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk { k - 1 } else { p - r };
                for j in j1..=j2 {
                    a[s2][j] =
                        (a[s1][j] - a[s1][j - 1]) / ndu[(pk + 1) as usize][(rk + j as isize) as usize];
                    d += a[s2][j] * ndu[(rk + j as isize) as usize][pk as usize];
                }
                if r as isize <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[(pk + 1) as usize][r];
                    d += a[s2][k] * ndu[r][pk as usize];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }

        // Scale by p! / (p - k)!.
        let mut factor = p as f64;
        for k in 1..=top {
            for val in ders[k].iter_mut() {
                *val *= factor;
            }
            factor *= (p - k) as f64;
        }

        (span - p, ders)
    }
}

/// One parameterized control pulse.
#[derive(Clone, Debug)]
pub enum PulseShape {
    /// c(t) = θ (one parameter, all time derivatives zero).
    Constant,
    BsplineCarrier(BsplineCarrierPulse),
}

impl PulseShape {
    pub fn n_params(&self) -> usize {
        match self {
            PulseShape::Constant => 1,
            PulseShape::BsplineCarrier(b) => b.n_params(),
        }
    }

    /// ∂c^{(i)}(t)/∂θ_k for i = 0..=max_order and every pulse parameter k,
    /// written into `out` ((max_order+1) rows of n_params, row-major).
    fn param_derivatives(&self, t: f64, max_order: usize, out: &mut [f64]) {
        match self {
            PulseShape::Constant => {
                out.fill(0.0);
                out[0] = 1.0;
            }
            PulseShape::BsplineCarrier(b) => {
                out.fill(0.0);
                let n_params = b.n_params();
                let (first, ders) = b.basis_derivatives(t, max_order.min(b.degree));
                // Pascal's triangle rows up to max_order.
                let mut binom = vec![vec![0.0_f64; max_order + 1]; max_order + 1];
                for i in 0..=max_order {
                    binom[i][0] = 1.0;
                    for r in 1..=i {
                        binom[i][r] = binom[i - 1][r - 1]
                            + if r <= i - 1 { binom[i - 1][r] } else { 0.0 };
                    }
                }
                for (c, &omega) in b.carrier_freqs.iter().enumerate() {
                    let (sin_wt, cos_wt) = (omega * t).sin_cos();
                    // m-th derivative of cos(Ωt) and sin(Ωt), divided into
                    // the trig value and the Ω^m factor.
                    let trig = |quad: usize, m: usize| -> f64 {
                        let val = match (quad, m % 4) {
                            (0, 0) => cos_wt,
                            (0, 1) => -sin_wt,
                            (0, 2) => -cos_wt,
                            (0, 3) => sin_wt,
                            (1, 0) => sin_wt,
                            (1, 1) => cos_wt,
                            (1, 2) => -sin_wt,
                            (1, 3) => -cos_wt,
                            _ => unreachable!(),
                        };
                        val * omega.powi(m as i32)
                    };
                    for quad in 0..2 {
                        let base = c * 2 * b.n_basis + quad * b.n_basis;
                        for i in 0..=max_order {
                            let row = i * n_params;
                            for r in 0..=i.min(b.degree) {
                                let trig_factor = binom[i][r] * trig(quad, i - r);
                                if trig_factor == 0.0 {
                                    continue;
                                }
                                for (j, &bval) in ders[r].iter().enumerate() {
                                    out[row + base + first + j] += trig_factor * bval;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Basis-derivative tables ∂c_j^{(i)}(t)/∂θ_{j,k} for every pulse at one
/// evaluation point; independent of θ.
#[derive(Clone, Debug)]
pub struct ParamGradient {
    /// Per pulse: (n_orders x n_params) row-major.
    per_pulse: Vec<Vec<f64>>,
    n_orders: usize,
}

impl ParamGradient {
    /// Row of ∂c_j^{(order)}/∂θ_{j,·} for pulse j.
    pub fn row(&self, pulse: usize, order: usize) -> &[f64] {
        let table = &self.per_pulse[pulse];
        let n_params = table.len() / self.n_orders;
        &table[order * n_params..(order + 1) * n_params]
    }

    pub fn n_orders(&self) -> usize {
        self.n_orders
    }
}

/// The N_C control pulses and their parameter vector θ (length N_P).
#[derive(Clone, Debug)]
pub struct ControlEnsemble {
    pub pulses: Vec<PulseShape>,
    /// Index range of each pulse's parameters within θ.
    pub param_offsets: Vec<Range<usize>>,
    pub theta: Vec<f64>,
    pub duration: f64,
}

impl ControlEnsemble {
    pub fn new(pulses: Vec<PulseShape>, duration: f64) -> Result<Self> {
        if duration <= 0.0 {
            return Err(Error::InvalidControls("ensemble duration must be positive".into()));
        }
        for pulse in &pulses {
            if let PulseShape::BsplineCarrier(b) = pulse {
                if (b.duration - duration).abs() > 1e-12 * duration {
                    return Err(Error::InvalidControls(format!(
                        "pulse duration {} differs from ensemble duration {duration}",
                        b.duration
                    )));
                }
            }
        }
        let mut param_offsets = Vec::with_capacity(pulses.len());
        let mut offset = 0;
        for pulse in &pulses {
            let n = pulse.n_params();
            param_offsets.push(offset..offset + n);
            offset += n;
        }
        Ok(ControlEnsemble {
            pulses,
            param_offsets,
            theta: vec![0.0; offset],
            duration,
        })
    }

    pub fn n_controls(&self) -> usize {
        self.pulses.len()
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} entries, ensemble needs {}",
                theta.len(),
                self.theta.len()
            )));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    fn check_eval(&self, t: f64) -> Result<()> {
        if !(0.0..=self.duration * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::InvalidControls(format!(
                "evaluation time {t} outside [0, {}]",
                self.duration
            )));
        }
        Ok(())
    }

    /// ∂c_j^{(i)}(t)/∂θ_{j,k} for all pulses, orders 0..=max_order.
    pub fn eval_param_gradient(&self, t: f64, max_order: usize) -> Result<ParamGradient> {
        self.check_eval(t)?;
        let per_pulse = self
            .pulses
            .iter()
            .map(|pulse| {
                let mut table = vec![0.0; (max_order + 1) * pulse.n_params()];
                pulse.param_derivatives(t, max_order, &mut table);
                table
            })
            .collect();
        Ok(ParamGradient {
            per_pulse,
            n_orders: max_order + 1,
        })
    }

    /// Control values and time derivatives: entry (j, i) is c_j^{(i)}(t).
    /// Assembled as basis-table dot θ, so the result is linear in θ.
    pub fn eval_derivatives(&self, t: f64, max_order: usize) -> Result<ControlValues> {
        let basis = self.eval_param_gradient(t, max_order)?;
        let n_controls = self.n_controls();
        let mut values = vec![0.0; n_controls * (max_order + 1)];
        for j in 0..n_controls {
            let theta_j = &self.theta[self.param_offsets[j].clone()];
            for i in 0..=max_order {
                values[j * (max_order + 1) + i] = basis
                    .row(j, i)
                    .iter()
                    .zip(theta_j)
                    .map(|(b, th)| b * th)
                    .sum();
            }
        }
        Ok(ControlValues {
            values,
            n_orders: max_order + 1,
        })
    }

    /// Warnings for pulses too rough to support the requested method order
    /// (degree >= order - 1 is needed for the full convergence order).
    pub fn smoothness_warnings(&self, order: usize) -> Vec<String> {
        self.pulses
            .iter()
            .enumerate()
            .filter_map(|(j, pulse)| match pulse {
                PulseShape::BsplineCarrier(b) if b.degree + 1 < order => Some(format!(
                    "pulse {j}: B-spline degree {} is below {} required for full order-{order} accuracy",
                    b.degree,
                    order - 1
                )),
                _ => None,
            })
            .collect()
    }
}

/// c_j^{(i)}(t) values for all controls at one time.
#[derive(Clone, Debug)]
pub struct ControlValues {
    values: Vec<f64>,
    n_orders: usize,
}

impl ControlValues {
    pub fn value(&self, control: usize, order: usize) -> f64 {
        self.values[control * self.n_orders + order]
    }
}

/// A linear combination of structured operators: the time-derivative
/// A^{(i)}(t) = [i = 0](A_d + Σ_j c_j(t) A_{c,j}) or Σ_j c_j^{(i)}(t) A_{c,j},
/// kept as scalars plus operator references, never materialized.
pub struct OperatorCombination<'a> {
    drift: Option<&'a StructuredOperator>,
    terms: Vec<(f64, &'a StructuredOperator)>,
    dim: usize,
}

impl OperatorCombination<'_> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// out += alpha * A^{(i)} w; counts as one matrix-vector product.
    pub fn apply_add(&self, alpha: f64, w: &RealState, out: &mut RealState, matvecs: &mut u64) {
        *matvecs += 1;
        if let Some(drift) = self.drift {
            drift.apply_add(alpha, w, out);
        }
        for &(scalar, op) in &self.terms {
            if scalar != 0.0 {
                op.apply_add(alpha * scalar, w, out);
            }
        }
    }

    /// out += alpha * (A^{(i)})ᵀ w; counts as one matrix-vector product.
    pub fn apply_transpose_add(
        &self,
        alpha: f64,
        w: &RealState,
        out: &mut RealState,
        matvecs: &mut u64,
    ) {
        *matvecs += 1;
        if let Some(drift) = self.drift {
            drift.apply_transpose_add(alpha, w, out);
        }
        for &(scalar, op) in &self.terms {
            if scalar != 0.0 {
                op.apply_transpose_add(alpha * scalar, w, out);
            }
        }
    }
}

/// A^{(i)}(t) descriptors for i = 0..=max_order at one time.
pub struct ADerivatives<'a> {
    pub orders: Vec<OperatorCombination<'a>>,
    pub t: f64,
}

impl<'a> ADerivatives<'a> {
    pub fn order(&self, i: usize) -> &OperatorCombination<'a> {
        &self.orders[i]
    }

    pub fn max_order(&self) -> usize {
        self.orders.len() - 1
    }
}

/// Lightweight A^{(i)}(t) descriptors from drift, control operators, and
/// control values at t.
pub fn assemble_a_derivatives<'a>(
    drift: &'a StructuredOperator,
    control_ops: &'a [StructuredOperator],
    ens: &ControlEnsemble,
    t: f64,
    max_order: usize,
) -> Result<ADerivatives<'a>> {
    if control_ops.len() != ens.n_controls() {
        return Err(Error::DimensionMismatch(format!(
            "{} control operators vs {} pulses",
            control_ops.len(),
            ens.n_controls()
        )));
    }
    let dim = drift.dim();
    if control_ops.iter().any(|op| op.dim() != dim) {
        return Err(Error::DimensionMismatch("control operator dimension differs from drift".into()));
    }
    let values = ens.eval_derivatives(t, max_order)?;
    let orders = (0..=max_order)
        .map(|i| OperatorCombination {
            drift: (i == 0).then_some(drift),
            terms: control_ops
                .iter()
                .enumerate()
                .map(|(j, op)| (values.value(j, i), op))
                .collect(),
            dim,
        })
        .collect();
    Ok(ADerivatives { orders, t })
}

/// A control problem: drift, control operators, and the pulse ensemble.
#[derive(Clone, Debug)]
pub struct Problem {
    pub drift: StructuredOperator,
    pub control_ops: Vec<StructuredOperator>,
    pub controls: ControlEnsemble,
}

impl Problem {
    pub fn new(
        drift: StructuredOperator,
        control_ops: Vec<StructuredOperator>,
        controls: ControlEnsemble,
    ) -> Result<Self> {
        if control_ops.len() != controls.n_controls() {
            return Err(Error::DimensionMismatch(format!(
                "{} control operators vs {} pulses",
                control_ops.len(),
                controls.n_controls()
            )));
        }
        let dim = drift.dim();
        if control_ops.iter().any(|op| op.dim() != dim) {
            return Err(Error::DimensionMismatch(
                "control operator dimension differs from drift".into(),
            ));
        }
        Ok(Problem {
            drift,
            control_ops,
            controls,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn n_params(&self) -> usize {
        self.controls.n_params()
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        self.controls.set_theta(theta)
    }

    pub fn a_derivatives(&self, t: f64, max_order: usize) -> Result<ADerivatives<'_>> {
        assemble_a_derivatives(&self.drift, &self.control_ops, &self.controls, t, max_order)
    }
}
