//! Drift and control Hamiltonians for multi-qudit systems in the dispersive
//! limit, plus the guard-penalty weight matrix.
//!
//! Basis ordering convention: subsystem 1 is the fastest-varying index
//! (rightmost Kronecker factor), so a bra-ket label reads |i_{N_Q} ... i_2 i_1>
//! with subsystem 1 rightmost. [`SystemSpec::basis_index`] and
//! [`SystemSpec::occupations`] translate between labels and flat indices.
//!
//! Units: time in nanoseconds, angular frequencies in rad/ns. Config files
//! accept plain-GHz values (ω/2π) and multiply by 2π at load time.

use crate::error::{Error, Result};
use crate::state_core::{SparseReal, StructuredOperator};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// One qudit (or resonator mode) in the composite system.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsystemSpec {
    pub essential_levels: usize,
    pub guard_levels: usize,
    /// Transition frequency ω_q, rad/ns.
    pub transition_freq: f64,
    /// Self-Kerr coefficient ξ_q, rad/ns.
    pub self_kerr: f64,
}

impl SubsystemSpec {
    pub fn levels(&self) -> usize {
        self.essential_levels + self.guard_levels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    /// Full dispersive Hamiltonian including ω_q a†a terms.
    Laboratory,
    /// Rotating frame: ω terms dropped, Kerr terms kept with negative sign.
    Rotating,
}

/// Composite system: ordered subsystems, cross-Kerr couplings, frame choice.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub subsystems: Vec<SubsystemSpec>,
    /// ((p, q), ξ_pq) with 1-based subsystem indices, p > q; rad/ns.
    pub cross_kerr: Vec<((usize, usize), f64)>,
    pub frame: Frame,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subsystems.is_empty() {
            return Err(Error::InvalidModel("system needs at least one subsystem".into()));
        }
        for (i, sub) in self.subsystems.iter().enumerate() {
            if sub.levels() == 0 {
                return Err(Error::InvalidModel(format!(
                    "subsystem {} has zero levels",
                    i + 1
                )));
            }
            if sub.essential_levels == 0 {
                return Err(Error::InvalidModel(format!(
                    "subsystem {} has zero essential levels",
                    i + 1
                )));
            }
        }
        let nq = self.subsystems.len();
        for &((p, q), _) in &self.cross_kerr {
            if p <= q || q == 0 || p > nq {
                return Err(Error::InvalidModel(format!(
                    "cross-Kerr pair ({p}, {q}) must satisfy 1 <= q < p <= {nq}"
                )));
            }
        }
        Ok(())
    }

    /// N = Π n_q
    pub fn total_dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.levels()).product()
    }

    /// E = Π N_{E,q}
    pub fn essential_dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.essential_levels).product()
    }

    /// Number of guard basis states, N - E.
    pub fn guard_count(&self) -> usize {
        self.total_dim() - self.essential_dim()
    }

    /// Flat index of the basis state with `occupations[k]` quanta in
    /// subsystem k+1 (so a label |i_{N_Q} ... i_1> is passed reversed:
    /// `&[i_1, ..., i_{N_Q}]`).
    pub fn basis_index(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.subsystems.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} occupation numbers, got {}",
                self.subsystems.len(),
                occupations.len()
            )));
        }
        let mut index = 0;
        let mut stride = 1;
        for (occ, sub) in occupations.iter().zip(&self.subsystems) {
            if *occ >= sub.levels() {
                return Err(Error::InvalidModel(format!(
                    "occupation {} out of range for {}-level subsystem",
                    occ,
                    sub.levels()
                )));
            }
            index += occ * stride;
            stride *= sub.levels();
        }
        Ok(index)
    }

    /// Per-subsystem occupation numbers of a flat basis index
    /// (inverse of [`Self::basis_index`]).
    pub fn occupations(&self, mut index: usize) -> Vec<usize> {
        let mut occ = Vec::with_capacity(self.subsystems.len());
        for sub in &self.subsystems {
            occ.push(index % sub.levels());
            index /= sub.levels();
        }
        occ
    }

    /// True when every subsystem occupation is below its essential count.
    pub fn is_essential(&self, index: usize) -> bool {
        self.occupations(index)
            .iter()
            .zip(&self.subsystems)
            .all(|(occ, sub)| *occ < sub.essential_levels)
    }

    /// Flat indices of the essential basis states, in increasing order.
    /// Column k of an initial basis matrix U_0 is the k-th of these.
    pub fn essential_indices(&self) -> Vec<usize> {
        (0..self.total_dim())
            .filter(|&i| self.is_essential(i))
            .collect()
    }
}

/// n x n lowering operator: superdiagonal sqrt(1), ..., sqrt(n-1).
pub fn lowering_operator(n: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidModel("lowering operator needs n >= 1".into()));
    }
    let mut a = vec![vec![0.0; n]; n];
    for k in 1..n {
        a[k - 1][k] = (k as f64).sqrt();
    }
    Ok(a)
}

/// Embed a small n_q x n_q operator acting on subsystem `q` (1-based) into
/// the full N x N space: I ⊗ ... ⊗ op ⊗ ... ⊗ I with subsystem 1 as the
/// rightmost (fastest-varying) factor.
pub fn embed_subsystem(sys: &SystemSpec, q: usize, op: &[Vec<f64>]) -> Result<SparseReal> {
    if q == 0 || q > sys.subsystems.len() {
        return Err(Error::InvalidModel(format!(
            "subsystem index {q} out of range 1..={}",
            sys.subsystems.len()
        )));
    }
    let nq = sys.subsystems[q - 1].levels();
    if op.len() != nq || op.iter().any(|row| row.len() != nq) {
        return Err(Error::DimensionMismatch(format!(
            "operator for subsystem {q} must be {nq} x {nq}"
        )));
    }
    let stride: usize = sys
        .subsystems
        .iter()
        .take(q - 1)
        .map(|s| s.levels())
        .product();
    let n = sys.total_dim();
    let mut triplets = Vec::new();
    for row in 0..n {
        let digit = (row / stride) % nq;
        let base = row - digit * stride;
        for (col_digit, &val) in op[digit].iter().enumerate() {
            if val != 0.0 {
                triplets.push((row, base + col_digit * stride, val));
            }
        }
    }
    SparseReal::from_triplets(n, &triplets)
}

/// Drift Hamiltonian as a structured operator (-iH_d folded into the real
/// block form, i.e. the returned (K, S) are K = H_d, S = 0).
///
/// Laboratory frame: H_d = Σ_q ( ω_q a†a - (ξ_q/2) a†a†aa ) - Σ_{p>q} ξ_pq n_p n_q.
/// Rotating frame drops the ω terms and keeps the (negative) Kerr terms.
/// All terms are diagonal in the number basis, so the result is diagonal.
pub fn build_drift(sys: &SystemSpec) -> Result<StructuredOperator> {
    sys.validate()?;
    let n = sys.total_dim();
    let mut diag = vec![0.0; n];
    for (idx, entry) in diag.iter_mut().enumerate() {
        let occ = sys.occupations(idx);
        let mut e = 0.0;
        for (k, sub) in sys.subsystems.iter().enumerate() {
            let nk = occ[k] as f64;
            if sys.frame == Frame::Laboratory {
                e += sub.transition_freq * nk;
            }
            e -= 0.5 * sub.self_kerr * nk * (nk - 1.0);
        }
        for &((p, q), xi) in &sys.cross_kerr {
            e -= xi * occ[p - 1] as f64 * occ[q - 1] as f64;
        }
        *entry = e;
    }
    Ok(StructuredOperator::from_k(SparseReal::from_diagonal(&diag)))
}

/// The two control operators of subsystem `q`: for the control Hamiltonian
/// H_c = p(t)(a + a†) + q(t)·i(a - a†), returns
///   - the in-phase operator, K = a + a† (symmetric), S = 0, and
///   - the quadrature operator, K = 0, S = a - a† (antisymmetric).
///
/// Recombined as K + iS both are Hermitian; a constant pair (θ₁, θ₂)
/// reproduces H_c = Ω a + Ω̄ a† with Ω = θ₁ + iθ₂.
pub fn build_control_operators(
    sys: &SystemSpec,
    q: usize,
) -> Result<(StructuredOperator, StructuredOperator)> {
    let nq = sys
        .subsystems
        .get(q.wrapping_sub(1))
        .ok_or_else(|| {
            Error::InvalidModel(format!(
                "subsystem index {q} out of range 1..={}",
                sys.subsystems.len()
            ))
        })?
        .levels();
    let a_small = lowering_operator(nq)?;
    let mut sym = vec![vec![0.0; nq]; nq];
    let mut antisym = vec![vec![0.0; nq]; nq];
    for r in 0..nq {
        for c in 0..nq {
            sym[r][c] = a_small[r][c] + a_small[c][r];
            antisym[r][c] = a_small[r][c] - a_small[c][r];
        }
    }
    let in_phase = StructuredOperator::from_k(embed_subsystem(sys, q, &sym)?);
    let quadrature = StructuredOperator::new(
        SparseReal::zero(sys.total_dim()),
        embed_subsystem(sys, q, &antisym)?,
    )?;
    Ok((in_phase, quadrature))
}

/// Diagonal non-negative weights for the guard-state population penalty;
/// exactly zero on essential states.
#[derive(Clone, Debug)]
pub struct GuardWeights {
    pub w: Vec<f64>,
}

impl GuardWeights {
    pub fn zeros(n: usize) -> Self {
        GuardWeights { w: vec![0.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().all(|&x| x == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GuardScheme {
    /// Every guard state gets the same weight.
    Uniform(f64),
    /// Guard state weight max_K base^(n_K - i_K - 1) / N_G over subsystems
    /// whose occupation i_K reached the guard range: levels just above the
    /// essential range are penalized least, the topmost level gets
    /// base^0 = 1 (before the 1/N_G normalization).
    Exponential(f64),
}

pub fn build_guard_weights(sys: &SystemSpec, scheme: GuardScheme) -> Result<GuardWeights> {
    sys.validate()?;
    let n = sys.total_dim();
    let n_guard = sys.guard_count();
    let mut w = vec![0.0; n];
    if n_guard == 0 {
        return Ok(GuardWeights { w });
    }
    for (idx, entry) in w.iter_mut().enumerate() {
        if sys.is_essential(idx) {
            continue;
        }
        *entry = match scheme {
            GuardScheme::Uniform(value) => value,
            GuardScheme::Exponential(base) => {
                let occ = sys.occupations(idx);
                let mut best = 0.0_f64;
                for (k, sub) in sys.subsystems.iter().enumerate() {
                    if occ[k] >= sub.essential_levels {
                        let exponent = (sub.levels() - occ[k] - 1) as i32;
                        best = best.max(base.powi(exponent));
                    }
                }
                best / n_guard as f64
            }
        };
    }
    Ok(GuardWeights { w })
}

/// Benchmark model: two qudits coupled through a resonator bus, rotating
/// frame, 4 = 2+2 levels per qudit and 10 = 1+9 resonator levels
/// (N = 160, E = 4). Subsystem order is (qudit 2, qudit 1, resonator) so
/// that labels read |i_R i_1 i_2> with the resonator varying slowest.
pub fn cnot3_system() -> SystemSpec {
    let ghz = |x: f64| TWO_PI * x;
    SystemSpec {
        subsystems: vec![
            SubsystemSpec {
                essential_levels: 2,
                guard_levels: 2,
                transition_freq: ghz(4.82),
                self_kerr: ghz(2.25e-1),
            },
            SubsystemSpec {
                essential_levels: 2,
                guard_levels: 2,
                transition_freq: ghz(4.11),
                self_kerr: ghz(1.20e-2),
            },
            SubsystemSpec {
                essential_levels: 1,
                guard_levels: 9,
                transition_freq: ghz(7.84),
                self_kerr: ghz(2.83e-5),
            },
        ],
        cross_kerr: vec![
            ((2, 1), ghz(1.00e-6)),
            ((3, 1), ghz(2.52e-3)),
            ((3, 2), ghz(2.49e-3)),
        ],
        frame: Frame::Rotating,
    }
}
