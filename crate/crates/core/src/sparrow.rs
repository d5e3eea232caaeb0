//! Grid-based SPARROW: coordinate descent, the two semidefinite forms,
//! signal reconstruction and support extraction.
//!
//! The problem solved is
//!
//! ```text
//! minimize_{s >= 0}  tr((A diag(s) A^H + lambda I)^{-1} R) + sum_k s_k
//! ```
//!
//! whose minimizer holds the normalized row norms `||x_k|| / sqrt(N)` of the
//! l2,1-regularized least-squares solution `X`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::conic::{
    embed_hermitian, embedded_indices, hermitian_rank_one, solve_sdp, ConicProblem, ConicSolution, ConicStatus, LmiBlock,
    MatrixVariable,
};
use crate::error::{Error, Result};
use crate::model::{sample_covariance, steering_matrix, ArrayGeometry, FrequencyGrid, MmvBatch, SampleCovariance};
use crate::numerics::{hermitian_eig, inverse_hpd, solve_hpd, ComplexMatrix, ComplexVector, HermitianMatrix, RealMatrix};

/// Default relative threshold of [`support_from_s`].
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 1e-3;
/// Conic tolerance used by the semidefinite forms.
pub const SDP_TOL: f64 = 1e-12;
/// Accuracy at which an SDP solve counts as converged. The interior-point
/// iterations usually stall between this and [`SDP_TOL`].
pub const SDP_ACCEPT_TOL: f64 = 1e-9;

/// Steering vectors of a frequency grid.
#[derive(Debug, Clone)]
pub struct Dictionary {
    pub a: ComplexMatrix,
    pub grid: FrequencyGrid,
    pub geometry: ArrayGeometry,
    columns: Vec<ComplexVector>,
}

impl Dictionary {
    pub fn new(geometry: ArrayGeometry, grid: FrequencyGrid) -> Self {
        let a = steering_matrix(&geometry, grid.points());
        let columns = a.column_iter().map(|c| c.into_owned()).collect();
        Self { a, grid, geometry, columns }
    }

    pub fn sensors(&self) -> usize {
        self.a.nrows()
    }

    pub fn atoms(&self) -> usize {
        self.a.ncols()
    }

    pub fn column(&self, k: usize) -> &ComplexVector {
        &self.columns[k]
    }

    /// `A diag(s) A^H + lambda I`.
    pub fn model_covariance(&self, s: &[f64], lambda: f64) -> HermitianMatrix {
        let m = self.sensors();
        let mut u = ComplexMatrix::identity(m, m) * Complex64::from(lambda);
        for (k, &sk) in s.iter().enumerate() {
            if sk != 0.0 {
                let a = &self.columns[k];
                u.ger(Complex64::from(sk), a, &a.conjugate(), Complex64::from(1.0));
            }
        }
        HermitianMatrix::hermitian_part(&u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparrowSolver {
    Cd,
    SdpSnapshot,
    SdpCovariance,
}

#[derive(Debug, Clone)]
pub struct SparrowSolution {
    /// Diagonal of `S`, one entry per grid point.
    pub s: Vec<f64>,
    pub objective: f64,
    pub x_hat: Option<ComplexMatrix>,
    pub support: Vec<usize>,
    pub solver: SparrowSolver,
    /// Coordinate sweeps (CD) or interior point iterations (SDP).
    pub sweeps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdOptions {
    pub max_sweeps: usize,
    pub tol: f64,
    pub prune_zeros: bool,
}

impl Default for CdOptions {
    fn default() -> Self {
        Self { max_sweeps: 2000, tol: 1e-10, prune_zeros: true }
    }
}

const REFACTOR_EVERY: usize = 50;
const PRUNE_AFTER: usize = 3;

/// `sqrt(sigma^2 M ln M)`.
pub fn select_lambda(noise_power: f64, sensors: usize) -> f64 {
    let m = sensors as f64;
    (noise_power * m * m.ln()).sqrt()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("regularization parameter must be positive, got {lambda}")))
    }
}

fn check_shapes(d: &Dictionary, r: &SampleCovariance, s: Option<&[f64]>) -> Result<()> {
    if r.dim() != d.sensors() {
        return Err(Error::InvalidInput(format!(
            "covariance is {}x{}, dictionary has {} sensors",
            r.dim(),
            r.dim(),
            d.sensors()
        )));
    }
    if let Some(s) = s {
        if s.len() != d.atoms() {
            return Err(Error::InvalidInput(format!("expected {} row norms, got {}", d.atoms(), s.len())));
        }
        if s.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("row norms must be nonnegative".into()));
        }
    }
    Ok(())
}

/// `tr((A S A^H + lambda I)^{-1} R) + tr(S)`.
pub fn sparrow_objective(s: &[f64], d: &Dictionary, r: &SampleCovariance, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    check_shapes(d, r, Some(s))?;
    let u = d.model_covariance(s, lambda);
    let x = solve_hpd(&u, r.r.matrix())?;
    let tr: f64 = (0..x.nrows()).map(|i| x[(i, i)].re).sum();
    Ok(tr + s.iter().sum::<f64>())
}

pub fn sparrow_cd(d: &Dictionary, r: &SampleCovariance, lambda: f64, opts: &CdOptions) -> Result<SparrowSolution> {
    sparrow_cd_observed(d, r, lambda, opts, |_, _| {})
}

/// Coordinate descent calling `observe(k, s)` after every coordinate update.
pub fn sparrow_cd_observed(
    d: &Dictionary,
    r: &SampleCovariance,
    lambda: f64,
    opts: &CdOptions,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<SparrowSolution> {
    check_lambda(lambda)?;
    check_shapes(d, r, None)?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput("coordinate descent tolerance must be positive".into()));
    }
    let k_total = d.atoms();
    let m = d.sensors();
    let rh = r.r.matrix();
    let mut s = vec![0.0; k_total];
    let mut uinv = ComplexMatrix::identity(m, m) / Complex64::from(lambda);
    let mut zero_sweeps = vec![0usize; k_total];
    let mut sweeps = 0;
    let mut converged = false;
    let mut full_sweep = true;

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for k in 0..k_total {
            if opts.prune_zeros && !full_sweep && zero_sweeps[k] >= PRUNE_AFTER {
                continue;
            }
            let a = d.column(k);
            let q = &uinv * a;
            let den = a.dotc(&q).re;
            let num = q.dotc(&(rh * &q)).re.max(0.0);
            let step = ((num.sqrt() - 1.0) / den).max(-s[k]);
            if step != 0.0 {
                let denom = 1.0 + step * den;
                debug_assert!(
                    -step * num / denom + step <= 1e-9 * (1.0 + num / den),
                    "coordinate update increased the objective"
                );
                s[k] += step;
                if s[k] < 0.0 {
                    s[k] = 0.0;
                }
                uinv.ger(Complex64::from(-step / denom), &q, &q.conjugate(), Complex64::from(1.0));
                max_change = max_change.max(step.abs());
                observe(k, &s);
            }
            if s[k] == 0.0 {
                zero_sweeps[k] += 1;
            } else {
                zero_sweeps[k] = 0;
            }
        }
        if sweeps % REFACTOR_EVERY == 0 {
            uinv = inverse_hpd(&d.model_covariance(&s, lambda))?.into_matrix();
        }
        let smax = s.iter().cloned().fold(0.0, f64::max);
        let small = max_change < opts.tol * (1.0 + smax);
        if small {
            let pruned = opts.prune_zeros && zero_sweeps.iter().any(|&z| z >= PRUNE_AFTER);
            if full_sweep || !pruned {
                converged = true;
                break;
            }
            // Confirm the skipped coordinates with one full sweep.
            full_sweep = true;
        } else {
            full_sweep = !opts.prune_zeros;
        }
    }
    let objective = sparrow_objective(&s, d, r, lambda)?;
    let support = support_from_s(&s, &d.grid, DEFAULT_SUPPORT_THRESHOLD)?.0;
    Ok(SparrowSolution { s, objective, x_hat: None, support, solver: SparrowSolver::Cd, sweeps, converged })
}

fn conic_failure(sol: &ConicSolution) -> Result<()> {
    match sol.status {
        ConicStatus::Infeasible => Err(Error::Conic("semidefinite program reported infeasible".into())),
        _ => Ok(()),
    }
}

fn finish_sdp(sol: ConicSolution, d: &Dictionary, solver: SparrowSolver) -> Result<SparrowSolution> {
    conic_failure(&sol)?;
    let s: Vec<f64> = sol.x[..d.atoms()].iter().map(|v| v.max(0.0)).collect();
    let support = support_from_s(&s, &d.grid, DEFAULT_SUPPORT_THRESHOLD)?.0;
    Ok(SparrowSolution {
        s,
        objective: sol.objective_value,
        x_hat: None,
        support,
        solver,
        sweeps: sol.iterations,
        converged: sol.accurate_to(SDP_ACCEPT_TOL),
    })
}

/// Block `[[0, off^H], [off, lambda I]]` embedded, with one nonnegative
/// variable per atom on the lower-right sub-block.
fn sparrow_block(d: &Dictionary, off: &ComplexMatrix, lambda: f64) -> (ConicProblem, usize) {
    let m = d.sensors();
    let top = off.ncols();
    let n = top + m;
    let mut constant = ComplexMatrix::zeros(n, n);
    constant.view_mut((top, 0), (m, top)).copy_from(off);
    constant.view_mut((0, top), (top, m)).copy_from(&off.adjoint());
    for i in 0..m {
        constant[(top + i, top + i)] = Complex64::from(lambda);
    }
    let mut block = LmiBlock::new(embed_hermitian(&HermitianMatrix::hermitian_part(&constant)));
    let lower: Vec<usize> = (top..n).collect();
    for k in 0..d.atoms() {
        let a: Vec<Complex64> = d.column(k).iter().copied().collect();
        block.push(k, hermitian_rank_one(n, &lower, &a, 1.0));
    }
    let p = ConicProblem {
        objective: vec![1.0; d.atoms()],
        blocks: vec![block],
        nonneg: (0..d.atoms()).collect(),
        matrix_vars: vec![],
    };
    (p, n)
}

/// Snapshot form: `min tr(U_N)/N + tr(S)` s.t. `[[U_N, Y^H], [Y, A S A^H + lambda I]] >= 0`.
pub fn sparrow_sdp_snapshot(d: &Dictionary, y: &MmvBatch, lambda: f64) -> Result<SparrowSolution> {
    check_lambda(lambda)?;
    if y.sensors() != d.sensors() {
        return Err(Error::InvalidInput("measurement rows do not match the dictionary".into()));
    }
    let n_snap = y.snapshots();
    let (mut p, n) = sparrow_block(d, &y.y, lambda);
    let top: Vec<usize> = (0..n_snap).collect();
    p.matrix_vars.push(MatrixVariable {
        block: 0,
        indices: embedded_indices(n, &top),
        cost: RealMatrix::identity(2 * n_snap, 2 * n_snap) / (2.0 * n_snap as f64),
    });
    finish_sdp(solve_sdp(&p, SDP_TOL)?, d, SparrowSolver::SdpSnapshot)
}

/// Covariance form: `min tr(U_M R) + tr(S)` s.t. `[[U_M, I], [I, A S A^H + lambda I]] >= 0`.
///
/// Solved through the congruent block `[[U_r, F^H], [F, A S A^H + lambda I]]`
/// with `R = F F^H` a thin eigen-factor, which keeps a strictly feasible dual
/// when `R` is singular; the optimal `s` and objective are unchanged.
pub fn sparrow_sdp_covariance(d: &Dictionary, r: &SampleCovariance, lambda: f64) -> Result<SparrowSolution> {
    check_lambda(lambda)?;
    check_shapes(d, r, None)?;
    let f = covariance_factor(&r.r)?;
    let rank = f.ncols();
    let (mut p, n) = sparrow_block(d, &f, lambda);
    if rank > 0 {
        let top: Vec<usize> = (0..rank).collect();
        p.matrix_vars.push(MatrixVariable {
            block: 0,
            indices: embedded_indices(n, &top),
            cost: RealMatrix::identity(2 * rank, 2 * rank) / 2.0,
        });
    }
    finish_sdp(solve_sdp(&p, SDP_TOL)?, d, SparrowSolver::SdpCovariance)
}

/// `F = E_r diag(sqrt(lambda_r))` over the eigenvalues above `1e-12 * max`.
pub(crate) fn covariance_factor(r: &HermitianMatrix) -> Result<ComplexMatrix> {
    covariance_factor_pow(r, 0.5)
}

/// Thin `F` with `F F^H = R^(2 power)` on the numerical range of `R`.
pub(crate) fn covariance_factor_pow(r: &HermitianMatrix, power: f64) -> Result<ComplexMatrix> {
    let eig = hermitian_eig(r)?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    let rank = eig.values.iter().filter(|&&v| v > 1e-12 * top && v > 0.0).count();
    let mut f = eig.leading_vectors(rank);
    for j in 0..rank {
        f.column_mut(j).scale_mut(eig.values[j].powf(power));
    }
    Ok(f)
}

/// Snapshot form when `N <= M`, covariance form otherwise.
pub fn sparrow_sdp(d: &Dictionary, y: &MmvBatch, lambda: f64) -> Result<SparrowSolution> {
    if y.snapshots() <= y.sensors() {
        sparrow_sdp_snapshot(d, y, lambda)
    } else {
        sparrow_sdp_covariance(d, &sample_covariance(y), lambda)
    }
}

/// `X = S A^H (A S A^H + lambda I)^{-1} Y`.
pub fn reconstruct_signal(s: &[f64], d: &Dictionary, y: &MmvBatch, lambda: f64) -> Result<ComplexMatrix> {
    check_lambda(lambda)?;
    if s.len() != d.atoms() || s.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput("row norms must be nonnegative, one per atom".into()));
    }
    if y.sensors() != d.sensors() {
        return Err(Error::InvalidInput("measurement rows do not match the dictionary".into()));
    }
    let z = solve_hpd(&d.model_covariance(s, lambda), &y.y)?;
    let mut x = d.a.adjoint() * z;
    for (k, &sk) in s.iter().enumerate() {
        x.row_mut(k).scale_mut(sk);
    }
    Ok(x)
}

/// Row norms `||x_k|| / sqrt(N)`.
pub fn row_norms(x: &ComplexMatrix) -> Vec<f64> {
    let n = x.ncols() as f64;
    x.row_iter().map(|r| r.norm() / n.sqrt()).collect()
}

/// Indices (and grid frequencies) with `s_k > delta_rel * max(s)`.
pub fn support_from_s(s: &[f64], grid: &FrequencyGrid, delta_rel: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    if !(delta_rel > 0.0 && delta_rel < 1.0) {
        return Err(Error::InvalidInput(format!("support threshold must lie in (0, 1), got {delta_rel}")));
    }
    if s.len() != grid.len() {
        return Err(Error::InvalidInput("row-norm vector does not match the grid".into()));
    }
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax <= 0.0 {
        return Ok((vec![], vec![]));
    }
    let idx: Vec<usize> = (0..s.len()).filter(|&k| s[k] > delta_rel * smax).collect();
    let freqs = idx.iter().map(|&k| grid.points()[k]).collect();
    Ok((idx, freqs))
}

/// Builds `R` directly from a Hermitian matrix, e.g. a noise-free model covariance.
pub fn covariance_from(r: DMatrix<Complex64>, snapshots: usize) -> Result<SampleCovariance> {
    Ok(SampleCovariance::new(HermitianMatrix::new(r)?, snapshots))
}
