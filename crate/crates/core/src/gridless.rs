//! Gridless SPARROW and atomic norm minimization for uniform linear arrays.
//!
//! The grid product `A S A^H` is replaced by a Hermitian Toeplitz matrix
//! `Toep(u)`; frequencies are read off afterwards from its Vandermonde
//! decomposition.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::conic::{
    embed_hermitian, embedded_indices, extract_hermitian, hermitian_sparse, solve_sdp, Coefficient, ConicProblem,
    ConicSolution, ConicStatus, LmiBlock, MatrixVariable,
};
use crate::error::{Error, Result};
use crate::model::{steering_matrix, wrap_frequency, ArrayGeometry, MmvBatch, SampleCovariance};
use crate::numerics::{compress_columns, frobenius, hermitian_eig, lstsq, ComplexMatrix, HermitianMatrix, RealMatrix};
use crate::sparrow::{covariance_factor, SDP_ACCEPT_TOL, SDP_TOL};

/// Default relative eigenvalue threshold for the model order.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// First column `u` of the Hermitian Toeplitz matrix `Toep(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToeplitzParam {
    #[serde(with = "crate::json::complex_vec")]
    pub u: Vec<Complex64>,
}

impl ToeplitzParam {
    pub fn new(mut u: Vec<Complex64>) -> Result<Self> {
        if u.is_empty() || u.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("Toeplitz parameter must be a finite, non-empty vector".into()));
        }
        u[0].im = 0.0;
        Ok(Self { u })
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// `T[i][j] = u[i - j]` below the diagonal, conjugated above it.
    pub fn toeplitz(&self) -> HermitianMatrix {
        let m = self.dim();
        let t = DMatrix::from_fn(m, m, |i, j| if i >= j { self.u[i - j] } else { self.u[j - i].conj() });
        HermitianMatrix::hermitian_part(&t)
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Frequencies and magnitudes of `Toep(u) = sum_l p_l a(nu_l) a(nu_l)^H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicDecomposition {
    pub frequencies: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub rank: usize,
    /// `||Toep(synthesized) - Toep(u)||_F / ||u||`.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct GlSolution {
    pub u: ToeplitzParam,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct AnmSolution {
    pub v: ToeplitzParam,
    pub v_n: HermitianMatrix,
    pub y0: ComplexMatrix,
    pub atomic_norm: f64,
    /// `1/2 ||Y - Y0||_F^2 + (lambda sqrt(N) / 2) (tr V_N + tr Toep(v) / M)`.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `||u - v / sqrt(N)||_inf`.
    pub max_u_deviation: f64,
    /// Relative difference between `lambda N / 2` times the gridless objective and the ANM objective.
    pub objective_deviation: f64,
    /// Largest wrap-around distance between matched frequency estimates; infinite on order mismatch.
    pub frequency_deviation: f64,
    pub tol: f64,
    pub passed: bool,
}

/// `u_m = sum_l p_l exp(-j pi nu_l m)`.
pub fn toeplitz_from_atoms(freqs: &[f64], mags: &[f64], m: usize) -> Result<ToeplitzParam> {
    if freqs.len() != mags.len() {
        return Err(Error::InvalidInput("frequencies and magnitudes differ in length".into()));
    }
    if mags.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidInput("atom magnitudes must be nonnegative".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("dimension must be positive".into()));
    }
    let u = (0..m)
        .map(|i| {
            freqs
                .iter()
                .zip(mags)
                .map(|(&nu, &p)| Complex64::from_polar(p, -PI * nu * i as f64))
                .sum::<Complex64>()
        })
        .collect();
    ToeplitzParam::new(u)
}

/// Adds the `2M - 1` Toeplitz variables `Re u_0, Re u_1, Im u_1, ...` acting
/// on rows `offset..offset+m` of an `n`-dimensional complex block.
fn push_toeplitz_terms(block: &mut LmiBlock, n: usize, offset: usize, first_var: usize, m: usize) {
    let diag: Vec<_> = (0..m).map(|p| (offset + p, offset + p, Complex64::from(1.0))).collect();
    block.push(first_var, hermitian_sparse(n, &diag));
    for lag in 1..m {
        let re: Vec<_> = (0..m - lag).map(|p| (offset + p, offset + p + lag, Complex64::from(1.0))).collect();
        let im: Vec<_> = (0..m - lag).map(|p| (offset + p, offset + p + lag, Complex64::new(0.0, -1.0))).collect();
        block.push(first_var + 2 * lag - 1, hermitian_sparse(n, &re));
        block.push(first_var + 2 * lag, hermitian_sparse(n, &im));
    }
}

fn toeplitz_from_vars(x: &[f64], m: usize) -> Result<ToeplitzParam> {
    let mut u = vec![Complex64::from(x[0])];
    for lag in 1..m {
        u.push(Complex64::new(x[2 * lag - 1], x[2 * lag]));
    }
    ToeplitzParam::new(u)
}

fn psd_toeplitz_block(m: usize) -> LmiBlock {
    let mut b = LmiBlock::new(RealMatrix::zeros(2 * m, 2 * m));
    push_toeplitz_terms(&mut b, m, 0, 0, m);
    b
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("regularization parameter must be positive, got {lambda}")))
    }
}

fn check_conic(sol: &ConicSolution) -> Result<()> {
    if sol.status == ConicStatus::Infeasible {
        Err(Error::Conic("semidefinite program reported infeasible".into()))
    } else {
        Ok(())
    }
}

/// Gridless block `[[U, off^H], [off, Toep(u) + lambda I]]` plus `Toep(u) >= 0`,
/// with the matrix variable `U` costed by `cost_scale * tr(U)`.
fn gridless_problem(off: &ComplexMatrix, lambda: f64, cost_scale: f64) -> ConicProblem {
    let m = off.nrows();
    let top = off.ncols();
    let n = top + m;
    let mut constant = ComplexMatrix::zeros(n, n);
    constant.view_mut((top, 0), (m, top)).copy_from(off);
    constant.view_mut((0, top), (top, m)).copy_from(&off.adjoint());
    for i in 0..m {
        constant[(top + i, top + i)] = Complex64::from(lambda);
    }
    let mut block = LmiBlock::new(embed_hermitian(&HermitianMatrix::hermitian_part(&constant)));
    push_toeplitz_terms(&mut block, n, top, 0, m);
    let mut objective = vec![0.0; 2 * m - 1];
    // tr(Toep(u)) / M = u_0
    objective[0] = 1.0;
    let mut matrix_vars = vec![];
    if top > 0 {
        let idx: Vec<usize> = (0..top).collect();
        matrix_vars.push(MatrixVariable {
            block: 0,
            indices: embedded_indices(n, &idx),
            cost: RealMatrix::identity(2 * top, 2 * top) * (cost_scale / 2.0),
        });
    }
    ConicProblem { objective, blocks: vec![block, psd_toeplitz_block(m)], nonneg: vec![], matrix_vars }
}

fn finish_gridless(sol: ConicSolution, m: usize) -> Result<GlSolution> {
    check_conic(&sol)?;
    Ok(GlSolution {
        u: toeplitz_from_vars(&sol.x, m)?,
        objective: sol.objective_value,
        converged: sol.accurate_to(SDP_ACCEPT_TOL),
        iterations: sol.iterations,
    })
}

/// `min tr(U_N)/N + tr(Toep(u))/M` s.t. `[[U_N, Y^H], [Y, Toep(u) + lambda I]] >= 0`, `Toep(u) >= 0`.
pub fn gl_sparrow_snapshot(g: &ArrayGeometry, y: &MmvBatch, lambda: f64) -> Result<GlSolution> {
    g.require_ula()?;
    check_lambda(lambda)?;
    if y.sensors() != g.sensors() {
        return Err(Error::InvalidInput("measurement rows do not match the array".into()));
    }
    let p = gridless_problem(&y.y, lambda, 1.0 / y.snapshots() as f64);
    finish_gridless(solve_sdp(&p, SDP_TOL)?, g.sensors())
}

/// `min tr(U_M R) + tr(Toep(u))/M` s.t. `[[U_M, I], [I, Toep(u) + lambda I]] >= 0`, `Toep(u) >= 0`,
/// solved in the congruent form with a thin factor of `R` (see the grid-based covariance form).
pub fn gl_sparrow_covariance(g: &ArrayGeometry, r: &SampleCovariance, lambda: f64) -> Result<GlSolution> {
    g.require_ula()?;
    check_lambda(lambda)?;
    if r.dim() != g.sensors() {
        return Err(Error::InvalidInput("covariance does not match the array".into()));
    }
    let f = covariance_factor(&r.r)?;
    let p = gridless_problem(&f, lambda, 1.0);
    finish_gridless(solve_sdp(&p, SDP_TOL)?, g.sensors())
}

/// Snapshot form when `N <= M`, covariance form otherwise.
pub fn gl_sparrow(g: &ArrayGeometry, y: &MmvBatch, lambda: f64) -> Result<GlSolution> {
    if y.snapshots() <= y.sensors() {
        gl_sparrow_snapshot(g, y, lambda)
    } else {
        gl_sparrow_covariance(g, &crate::model::sample_covariance(y), lambda)
    }
}

/// Number of eigenvalues of `Toep(u)` above `rank_tol * max eigenvalue`.
pub fn estimate_model_order(u: &ToeplitzParam, rank_tol: f64) -> Result<usize> {
    let eig = hermitian_eig(&u.toeplitz())?;
    let top = eig.values[0];
    if top <= 0.0 {
        return Ok(0);
    }
    Ok(eig.values.iter().filter(|&&v| v > rank_tol * top).count())
}

/// Frequencies from the shift invariance of the dominant eigenvectors of
/// `Toep(u)`, magnitudes from least squares on the first column.
pub fn vandermonde_decomposition(u: &ToeplitzParam, order: usize) -> Result<AtomicDecomposition> {
    let m = u.dim();
    if order == m {
        return Err(Error::NonUniqueDecomposition { rank: order, sensors: m });
    }
    if order == 0 || order > m {
        return Err(Error::InvalidOrder { order, sensors: m });
    }
    let eig = hermitian_eig(&u.toeplitz())?;
    let top = eig.values[0];
    if top <= 0.0 || eig.values[order - 1] <= 0.0 {
        return Err(Error::DecompositionFailure("Toeplitz matrix has lower rank than requested".into()));
    }
    if eig.values[order] > DEFAULT_RANK_TOL * top {
        return Err(Error::DecompositionFailure(format!(
            "Toeplitz matrix has rank above {order} (eigenvalue ratio {:.3e})",
            eig.values[order] / top
        )));
    }
    let es = eig.leading_vectors(order);
    let e1 = es.rows(0, m - 1).into_owned();
    let e2 = es.rows(1, m - 1).into_owned();
    let rot = lstsq(&e1, &e2, 1e-12)
        .ok_or_else(|| Error::DecompositionFailure("subspace rotation is rank deficient".into()))?;
    let poles = rot
        .schur()
        .eigenvalues()
        .ok_or_else(|| Error::DecompositionFailure("rotation eigenvalues did not converge".into()))?;
    let mut freqs: Vec<f64> = poles.iter().map(|z| wrap_frequency(-z.arg() / PI)).collect();
    freqs.sort_by(f64::total_cmp);

    let g = ArrayGeometry::ula(m)?;
    let a = steering_matrix(&g, &freqs);
    let real_a = RealMatrix::from_fn(2 * m, order, |i, j| if i < m { a[(i, j)].re } else { a[(i - m, j)].im });
    let real_u = RealMatrix::from_fn(2 * m, 1, |i, _| if i < m { u.u[i].re } else { u.u[i - m].im });
    let mags = lstsq(&real_a, &real_u, 1e-12)
        .ok_or_else(|| Error::DecompositionFailure("magnitude fit is rank deficient".into()))?;
    let scale = u.max_abs();
    if mags.iter().any(|&p| p <= 1e-12 * scale) {
        return Err(Error::DecompositionFailure("recovered a non-positive atom magnitude".into()));
    }
    let magnitudes: Vec<f64> = mags.iter().copied().collect();
    let synth = toeplitz_from_atoms(&freqs, &magnitudes, m)?;
    let residual = frobenius(&(synth.toeplitz().matrix() - u.toeplitz().matrix())) / frobenius(u.toeplitz().matrix());
    Ok(AtomicDecomposition { frequencies: freqs, magnitudes, rank: order, residual })
}

/// Model order and decomposition in one step; empty when `u` vanishes.
pub fn decompose(u: &ToeplitzParam, rank_tol: f64) -> Result<AtomicDecomposition> {
    let order = estimate_model_order(u, rank_tol)?;
    if order == 0 {
        return Ok(AtomicDecomposition { frequencies: vec![], magnitudes: vec![], rank: 0, residual: 0.0 });
    }
    vandermonde_decomposition(u, order)
}

/// `min 1/2 ||Y - Y0||_F^2 + (lambda sqrt(N) / 2) (tr V_N + tr Toep(v) / M)`
/// s.t. `[[V_N, Y0^H], [Y0, Toep(v)]] >= 0`.
pub fn anm_sdp(g: &ArrayGeometry, y: &MmvBatch, lambda: f64) -> Result<AnmSolution> {
    g.require_ula()?;
    check_lambda(lambda)?;
    if y.sensors() != g.sensors() {
        return Err(Error::InvalidInput("measurement rows do not match the array".into()));
    }
    let weight = lambda * (y.snapshots() as f64).sqrt() / 2.0;
    // The atomic norm is invariant to right rotations and Y0 can be taken in
    // the row space of Y, so N > M reduces to an M-column problem.
    let Some((yc, q)) = compress_columns(&y.y) else {
        return anm_sdp_weighted(&y.y, weight);
    };
    let mut sol = anm_sdp_weighted(&yc, weight)?;
    sol.y0 = &sol.y0 * q.adjoint();
    sol.v_n = HermitianMatrix::hermitian_part(&(&q * sol.v_n.matrix() * q.adjoint()));
    Ok(sol)
}

fn anm_sdp_weighted(data: &ComplexMatrix, weight: f64) -> Result<AnmSolution> {
    let m = data.nrows();
    let n_snap = data.ncols();
    let n = n_snap + m;
    let n_toep = 2 * m - 1;
    let y0_var = |row: usize, col: usize, imag: bool| n_toep + 2 * (row * n_snap + col) + usize::from(imag);
    let t_var = n_toep + 2 * m * n_snap;

    let mut main = LmiBlock::new(RealMatrix::zeros(2 * n, 2 * n));
    push_toeplitz_terms(&mut main, n, n_snap, 0, m);
    // Upper entry (col, N + row) of the block holds conj(Y0[row, col]).
    for row in 0..m {
        for col in 0..n_snap {
            let pos = (col, n_snap + row);
            main.push(y0_var(row, col, false), hermitian_sparse(n, &[(pos.0, pos.1, Complex64::from(1.0))]));
            main.push(y0_var(row, col, true), hermitian_sparse(n, &[(pos.0, pos.1, Complex64::new(0.0, -1.0))]));
        }
    }

    // 1/2 ||r||^2 <= t  <=>  [[I, r], [r^T, 2t]] >= 0 with r = vec(Y - Y0).
    let len = 2 * m * n_snap;
    let mut quad_const = RealMatrix::identity(len + 1, len + 1);
    quad_const[(len, len)] = 0.0;
    let mut quad = LmiBlock::new(RealMatrix::zeros(0, 0));
    for row in 0..m {
        for col in 0..n_snap {
            let k = 2 * (row * n_snap + col);
            let yv = data[(row, col)];
            quad_const[(k, len)] = yv.re;
            quad_const[(len, k)] = yv.re;
            quad_const[(k + 1, len)] = yv.im;
            quad_const[(len, k + 1)] = yv.im;
            quad.push(y0_var(row, col, false), Coefficient::Sparse(vec![(k, len, -1.0)]));
            quad.push(y0_var(row, col, true), Coefficient::Sparse(vec![(k + 1, len, -1.0)]));
        }
    }
    quad.constant = quad_const;
    quad.push(t_var, Coefficient::Sparse(vec![(len, len, 2.0)]));

    let mut objective = vec![0.0; t_var + 1];
    objective[0] = weight;
    objective[t_var] = 1.0;
    let idx: Vec<usize> = (0..n_snap).collect();
    let p = ConicProblem {
        objective,
        blocks: vec![main, quad],
        nonneg: vec![],
        matrix_vars: vec![MatrixVariable {
            block: 0,
            indices: embedded_indices(n, &idx),
            cost: RealMatrix::identity(2 * n_snap, 2 * n_snap) * (weight / 2.0),
        }],
    };
    let sol = solve_sdp(&p, SDP_TOL)?;
    check_conic(&sol)?;
    let v = toeplitz_from_vars(&sol.x, m)?;
    let v_n = extract_hermitian(&sol.matrix_values[0], n_snap);
    let y0 = ComplexMatrix::from_fn(m, n_snap, |r, c| Complex64::new(sol.x[y0_var(r, c, false)], sol.x[y0_var(r, c, true)]));
    let atomic_norm = 0.5 * v_n.trace() + v.u[0].re / 2.0;
    Ok(AnmSolution {
        v,
        v_n,
        y0,
        atomic_norm,
        objective: sol.objective_value,
        converged: sol.accurate_to(SDP_ACCEPT_TOL),
        iterations: sol.iterations,
    })
}

/// Checks `u = v / sqrt(N)`, the objective scaling `lambda N / 2` and the
/// agreement of the recovered frequencies.
pub fn check_anm_equivalence(gl: &GlSolution, anm: &AnmSolution, n: usize, lambda: f64, tol: f64) -> EquivalenceReport {
    let rn = (n as f64).sqrt();
    let max_u_deviation = gl
        .u
        .u
        .iter()
        .zip(&anm.v.u)
        .map(|(a, b)| (a - b / rn).norm())
        .fold(if gl.u.dim() == anm.v.dim() { 0.0 } else { f64::INFINITY }, f64::max);
    let scaled = gl.objective * lambda * n as f64 / 2.0;
    let objective_deviation = (scaled - anm.objective).abs() / scaled.abs().max(anm.objective.abs()).max(1e-300);
    let v_scaled = ToeplitzParam { u: anm.v.u.iter().map(|z| z / rn).collect() };
    let frequency_deviation = match (decompose(&gl.u, DEFAULT_RANK_TOL), decompose(&v_scaled, DEFAULT_RANK_TOL)) {
        (Ok(a), Ok(b)) if a.rank == b.rank => a
            .frequencies
            .iter()
            .zip(&b.frequencies)
            .map(|(x, y)| crate::model::wrap_distance(*x, *y))
            .fold(0.0, f64::max),
        _ => f64::INFINITY,
    };
    let passed = max_u_deviation <= tol && objective_deviation <= tol && frequency_deviation <= tol;
    EquivalenceReport { max_u_deviation, objective_deviation, frequency_deviation, tol, passed }
}
