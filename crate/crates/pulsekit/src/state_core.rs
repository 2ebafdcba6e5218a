//! Real-valued states and structured sparse Hamiltonian application.
//!
//! A complex state ψ ∈ C^N is stored split as w = [u; v] ∈ R^{2N} with
//! u = Re ψ, v = Im ψ. A Hamiltonian term H = K + iS (K symmetric and
//! S antisymmetric whenever H is Hermitian) acts on w through the real
//! block operator
//!
//! ```text
//!     A = [  S  K ]
//!         [ -K  S ]
//! ```
//!
//! so that dw/dt = A w reproduces dψ/dt = -iHψ. Operators are kept as
//! separate sparse (K, S) blocks: storage is halved relative to one
//! 2N x 2N matrix, S = 0 (real Hamiltonians, the common case) skips all
//! S work, and the symmetry flags make transposed application free
//! (Aᵀ = -A when they hold).

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Real split w = [u; v] of a complex state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RealState {
    /// Length 2N; first N entries are u = Re ψ, last N are v = Im ψ.
    pub data: Vec<f64>,
    /// N, the complex dimension.
    pub dim_complex: usize,
}

impl RealState {
    pub fn zeros(dim_complex: usize) -> Self {
        RealState {
            data: vec![0.0; 2 * dim_complex],
            dim_complex,
        }
    }

    /// Build from raw split data. `data.len()` must be even.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "split state needs even length, got {}",
                data.len()
            )));
        }
        let dim_complex = data.len() / 2;
        Ok(RealState { data, dim_complex })
    }

    pub fn u(&self) -> &[f64] {
        &self.data[..self.dim_complex]
    }

    pub fn v(&self) -> &[f64] {
        &self.data[self.dim_complex..]
    }

    /// Split mutable views of (u, v).
    pub fn uv_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.data.split_at_mut(self.dim_complex)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &RealState) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// self += alpha * x
    pub fn axpy(&mut self, alpha: f64, x: &RealState) {
        debug_assert_eq!(self.data.len(), x.data.len());
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0.0);
    }

    pub fn copy_from(&mut self, other: &RealState) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.copy_from_slice(&other.data);
    }
}

/// Split a complex vector into its real representation [Re ψ; Im ψ].
pub fn complex_to_real(psi: &[Complex64]) -> RealState {
    let n = psi.len();
    let mut data = Vec::with_capacity(2 * n);
    data.extend(psi.iter().map(|z| z.re));
    data.extend(psi.iter().map(|z| z.im));
    RealState {
        data,
        dim_complex: n,
    }
}

/// Inverse of [`complex_to_real`]; bit-exact round trip.
pub fn real_to_complex(w: &RealState) -> Vec<Complex64> {
    w.u()
        .iter()
        .zip(w.v())
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect()
}

/// Real split of a state matrix: E columns, one per initial condition.
#[derive(Clone, Debug)]
pub struct RealStateMatrix {
    pub columns: Vec<RealState>,
    /// E, the essential-subspace dimension (= number of columns).
    pub essential_dim: usize,
}

impl RealStateMatrix {
    pub fn new(columns: Vec<RealState>) -> Result<Self> {
        let essential_dim = columns.len();
        if essential_dim == 0 {
            return Err(Error::DimensionMismatch("state matrix needs at least one column".into()));
        }
        let n = columns[0].dim_complex;
        if columns.iter().any(|c| c.dim_complex != n) {
            return Err(Error::DimensionMismatch("state matrix columns differ in dimension".into()));
        }
        if essential_dim > n {
            return Err(Error::DimensionMismatch(format!(
                "essential dimension {essential_dim} exceeds state dimension {n}"
            )));
        }
        Ok(RealStateMatrix {
            columns,
            essential_dim,
        })
    }

    pub fn dim_complex(&self) -> usize {
        self.columns[0].dim_complex
    }

    /// Frobenius norm over all columns.
    pub fn norm_fro(&self) -> f64 {
        self.columns
            .iter()
            .map(|c| c.data.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Sparse real matrix in compressed sparse row form; O(nnz) apply.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseReal {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseReal {
    pub fn zero(n: usize) -> Self {
        SparseReal {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Build from (row, col, value) triplets; duplicates are summed,
    /// exact zeros dropped.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= n || c >= n {
                return Err(Error::DimensionMismatch(format!(
                    "triplet ({r}, {c}) outside {n} x {n} matrix"
                )));
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        // Merge duplicates, then drop entries that cancelled to exactly zero.
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(sorted.len());
        for (r, c, val) in sorted {
            match merged.last_mut() {
                Some(&mut (lr, lc, ref mut lv)) if lr == r && lc == c => *lv += val,
                _ => merged.push((r, c, val)),
            }
        }
        merged.retain(|&(_, _, v)| v != 0.0);

        let mut out = SparseReal {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::with_capacity(merged.len()),
            vals: Vec::with_capacity(merged.len()),
        };
        for (r, c, val) in merged {
            out.row_ptr[r + 1] += 1;
            out.col_idx.push(c);
            out.vals.push(val);
        }
        for r in 0..n {
            out.row_ptr[r + 1] += out.row_ptr[r];
        }
        Ok(out)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let triplets: Vec<(usize, usize, f64)> =
            diag.iter().enumerate().map(|(i, &d)| (i, i, d)).collect();
        SparseReal::from_triplets(n, &triplets).expect("diagonal triplets are in range")
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_zero(&self) -> bool {
        self.vals.is_empty()
    }

    /// y += alpha * M x
    pub fn apply_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] += alpha * acc;
        }
    }

    /// y += alpha * Mᵀ x
    pub fn apply_transpose_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let ax = alpha * x[r];
            if ax == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += ax * self.vals[k];
            }
        }
    }

    /// Strict entry-wise symmetry check (exact equality, as constructed).
    pub fn is_symmetric(&self) -> bool {
        self.entries_match(|a, b| a == b)
    }

    /// Strict entry-wise antisymmetry check.
    pub fn is_antisymmetric(&self) -> bool {
        self.entries_match(|a, b| a == -b)
    }

    fn entries_match(&self, rel: impl Fn(f64, f64) -> bool) -> bool {
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                if !rel(self.vals[k], self.get(c, r)) {
                    return false;
                }
            }
        }
        true
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            if self.col_idx[k] == c {
                return self.vals[k];
            }
        }
        0.0
    }

    /// Diagonal entries when the matrix has no off-diagonal nonzeros.
    pub fn as_diagonal(&self) -> Option<Vec<f64>> {
        let mut diag = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] != r {
                    return None;
                }
                diag[r] = self.vals[k];
            }
        }
        Some(diag)
    }

    /// Dense copy, for small oracles and diagnostics.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n]; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                dense[r][self.col_idx[k]] += self.vals[k];
            }
        }
        dense
    }
}

/// Hamiltonian term H = K + iS stored as its real and imaginary sparse
/// blocks, applied as the real block operator A = [[S, K], [-K, S]].
#[derive(Clone, Debug)]
pub struct StructuredOperator {
    pub k: SparseReal,
    pub s: SparseReal,
    /// K is entry-wise symmetric; together with `s_antisymmetric` this
    /// certifies Aᵀ = -A (H Hermitian), making transposed application free.
    pub k_symmetric: bool,
    pub s_antisymmetric: bool,
}

impl StructuredOperator {
    pub fn new(k: SparseReal, s: SparseReal) -> Result<Self> {
        if k.n != s.n {
            return Err(Error::DimensionMismatch(format!(
                "K is {} x {} but S is {} x {}",
                k.n, k.n, s.n, s.n
            )));
        }
        let k_symmetric = k.is_symmetric();
        let s_antisymmetric = s.is_antisymmetric();
        Ok(StructuredOperator {
            k,
            s,
            k_symmetric,
            s_antisymmetric,
        })
    }

    /// Operator with S = 0 (real Hamiltonian).
    pub fn from_k(k: SparseReal) -> Self {
        let n = k.n;
        let k_symmetric = k.is_symmetric();
        StructuredOperator {
            k,
            s: SparseReal::zero(n),
            k_symmetric,
            s_antisymmetric: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.k.n
    }

    fn check_dims(&self, w: &RealState, out: &RealState) -> Result<()> {
        if w.dim_complex != self.dim() || out.dim_complex != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "operator dim {} vs state dims {} / {}",
                self.dim(),
                w.dim_complex,
                out.dim_complex
            )));
        }
        Ok(())
    }

    /// out = A w
    pub fn apply(&self, w: &RealState, out: &mut RealState) -> Result<()> {
        self.check_dims(w, out)?;
        out.fill_zero();
        self.apply_add(1.0, w, out);
        Ok(())
    }

    /// out += alpha * A w, via 2 K-applies and (when S != 0) 2 S-applies.
    pub fn apply_add(&self, alpha: f64, w: &RealState, out: &mut RealState) {
        let n = self.dim();
        let (u, v) = w.data.split_at(n);
        let (out_u, out_v) = out.data.split_at_mut(n);
        self.k.apply_add(alpha, v, out_u);
        self.k.apply_add(-alpha, u, out_v);
        if !self.s.is_zero() {
            self.s.apply_add(alpha, u, out_u);
            self.s.apply_add(alpha, v, out_v);
        }
    }

    /// out = Aᵀ w
    pub fn apply_transpose(&self, w: &RealState, out: &mut RealState) -> Result<()> {
        self.check_dims(w, out)?;
        out.fill_zero();
        self.apply_transpose_add(1.0, w, out);
        Ok(())
    }

    /// out += alpha * Aᵀ w. With the symmetry flags set, Aᵀ = -A and no
    /// transposed sparse kernels are needed.
    pub fn apply_transpose_add(&self, alpha: f64, w: &RealState, out: &mut RealState) {
        if self.k_symmetric && self.s_antisymmetric {
            self.apply_add(-alpha, w, out);
            return;
        }
        // Aᵀ = [[Sᵀ, -Kᵀ], [Kᵀ, Sᵀ]]
        let n = self.dim();
        let (u, v) = w.data.split_at(n);
        let (out_u, out_v) = out.data.split_at_mut(n);
        self.k.apply_transpose_add(-alpha, v, out_u);
        self.k.apply_transpose_add(alpha, u, out_v);
        if !self.s.is_zero() {
            self.s.apply_transpose_add(alpha, u, out_u);
            self.s.apply_transpose_add(alpha, v, out_v);
        }
    }

    /// Dense 2N x 2N copy of A, for small oracles.
    pub fn to_dense_block(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let kd = self.k.to_dense();
        let sd = self.s.to_dense();
        let mut a = vec![vec![0.0; 2 * n]; 2 * n];
        for r in 0..n {
            for c in 0..n {
                a[r][c] = sd[r][c];
                a[r][n + c] = kd[r][c];
                a[n + r][c] = -kd[r][c];
                a[n + r][n + c] = sd[r][c];
            }
        }
        a
    }
}
