//! Comparison methods: the l2,1 proximal-gradient solver, spectral and root
//! MUSIC, under- and oversampled SPICE, and the stochastic Cramer-Rao bound.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::conic::{
    embedded_indices, embed_hermitian, hermitian_rank_one, hermitian_sparse, solve_sdp, ConicProblem, ConicStatus,
    LmiBlock, MatrixVariable,
};
use crate::error::{Error, Result};
use crate::model::{steering_matrix, wrap_frequency, ArrayGeometry, FrequencyGrid, MmvBatch, SampleCovariance, SourceScene};
use crate::numerics::{
    compress_columns, frobenius, hermitian_eig, inverse_hpd, poly_eval, poly_roots, solve_hpd, ComplexMatrix, HermitianMatrix,
    RealMatrix,
};
use crate::sparrow::{covariance_factor_pow, Dictionary};

/// Default optimality tolerance of [`l21_solve`], relative to the penalty weight.
pub const L21_TOL: f64 = 1e-7;
/// Conic tolerance of the SPICE programs; they serve estimation only.
pub const SPICE_TOL: f64 = 1e-8;
const L21_MAX_ITER: usize = 200_000;

#[derive(Debug, Clone)]
pub struct L21Solution {
    pub x: ComplexMatrix,
    /// `1/2 ||A X - Y||_F^2 + lambda sqrt(N) ||X||_{2,1}` at `x`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpiceVariant {
    Undersampled,
    Oversampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiceSolution {
    pub p: Vec<f64>,
    pub epsilon: f64,
    pub objective: f64,
    pub variant: SpiceVariant,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicSpectrum {
    pub spectrum: Vec<f64>,
    /// Grid indices of the selected peaks, highest first.
    pub peak_indices: Vec<usize>,
    pub peaks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootMusicEstimate {
    pub frequencies: Vec<f64>,
    /// Set when the signal and noise subspaces are not separated or fewer
    /// than `L` roots lie on or inside the unit circle.
    pub low_confidence: bool,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("regularization parameter must be positive, got {lambda}")))
    }
}

/// `1/2 ||A X - Y||_F^2 + lambda sqrt(N) ||X||_{2,1}`.
pub fn l21_objective(d: &Dictionary, y: &MmvBatch, x: &ComplexMatrix, lambda: f64) -> f64 {
    let resid = &d.a * x - &y.y;
    let penalty: f64 = x.row_iter().map(|r| r.norm()).sum();
    0.5 * frobenius(&resid).powi(2) + lambda * (y.snapshots() as f64).sqrt() * penalty
}

/// Accelerated proximal gradient with row-wise group soft-thresholding,
/// step `1 / sigma_max(A)^2` and a restart whenever the objective increases.
///
/// Stops when every row satisfies its optimality condition to `tol * w` with
/// `w = lambda sqrt(N)`: `||g_k + w x_k / ||x_k|| || ` for active rows and
/// `||g_k|| - w` for zero rows, `g = A^H (A X - Y)`.
pub fn l21_solve(d: &Dictionary, y: &MmvBatch, lambda: f64, tol: f64) -> Result<L21Solution> {
    check_lambda(lambda)?;
    if y.sensors() != d.sensors() {
        return Err(Error::InvalidInput("measurement rows do not match the dictionary".into()));
    }
    // Rows of the minimizer lie in the row space of Y, so with N > M the
    // problem is solved on an M-column factor and rotated back.
    let n = y.snapshots();
    let (data, rotation) = match compress_columns(&y.y) {
        Some((yc, q)) => (yc, Some(q)),
        None => (y.y.clone(), None),
    };
    let gram_m = HermitianMatrix::hermitian_part(&(&d.a * d.a.adjoint()));
    let lipschitz = hermitian_eig(&gram_m)?.values[0];
    let step = 1.0 / lipschitz;
    let k = d.atoms();
    let weight = lambda * (n as f64).sqrt();
    let thresh = step * weight;
    let objective = |x: &ComplexMatrix, ax: &ComplexMatrix| {
        0.5 * frobenius(&(ax - &data)).powi(2) + weight * x.row_iter().map(|r| r.norm()).sum::<f64>()
    };

    let prox = |z: &mut ComplexMatrix| {
        for mut row in z.row_iter_mut() {
            let norm = row.norm();
            let shrink = if norm > thresh { 1.0 - thresh / norm } else { 0.0 };
            row.scale_mut(shrink);
        }
    };

    let cols = data.ncols();
    let mut x = ComplexMatrix::zeros(k, cols);
    let mut ax = ComplexMatrix::zeros(d.sensors(), cols);
    let mut f = objective(&x, &ax);
    let mut z = x.clone();
    let mut az = ax.clone();
    let mut t = 1.0_f64;
    let kkt = |x: &ComplexMatrix, ax: &ComplexMatrix| {
        let grad = d.a.adjoint() * (ax - &data);
        x.row_iter()
            .zip(grad.row_iter())
            .map(|(xr, gr)| {
                let norm = xr.norm();
                if norm > 0.0 {
                    (gr + xr * Complex64::from(weight / norm)).norm()
                } else {
                    (gr.norm() - weight).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    };
    let mut converged = false;
    let mut iterations = L21_MAX_ITER;
    for it in 1..=L21_MAX_ITER {
        let grad = d.a.adjoint() * (&az - &data);
        let mut cand = &z - grad * Complex64::from(step);
        prox(&mut cand);
        let a_cand = &d.a * &cand;
        let fc = objective(&cand, &a_cand);
        if fc > f {
            // Restart the momentum from the last accepted iterate.
            t = 1.0;
            z.copy_from(&x);
            az.copy_from(&ax);
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = Complex64::from((t - 1.0) / t_next);
        z = &cand + (&cand - &x) * momentum;
        az = &a_cand + (&a_cand - &ax) * momentum;
        x = cand;
        ax = a_cand;
        t = t_next;
        f = fc;
        if kkt(&x, &ax) <= tol * weight {
            converged = true;
            iterations = it;
            break;
        }
    }
    let x = match rotation {
        Some(q) => x * q.adjoint(),
        None => x,
    };
    Ok(L21Solution { objective: l21_objective(d, y, &x, lambda), x, iterations, converged })
}

/// Indices of the `count` highest local maxima of a periodic sequence.
///
/// A point is a peak when it exceeds its left neighbour and is not below its
/// right one, so flat stretches yield no peaks.
pub fn local_peaks(values: &[f64], count: usize) -> Vec<usize> {
    let k = values.len();
    if k == 0 {
        return vec![];
    }
    if k == 1 {
        return if values[0] > 0.0 && count > 0 { vec![0] } else { vec![] };
    }
    let mut peaks: Vec<usize> = (0..k)
        .filter(|&i| {
            let left = values[(i + k - 1) % k];
            let right = values[(i + 1) % k];
            values[i] > left && values[i] >= right
        })
        .collect();
    peaks.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    peaks.truncate(count);
    peaks
}

fn check_order(order: usize, m: usize) -> Result<()> {
    if order == 0 || order >= m {
        Err(Error::InvalidOrder { order, sensors: m })
    } else {
        Ok(())
    }
}

/// `1 / ||E_n^H a(nu_k)||^2` over the grid, with the `L` highest local maxima.
pub fn music_spectrum(r: &SampleCovariance, order: usize, grid: &FrequencyGrid, g: &ArrayGeometry) -> Result<MusicSpectrum> {
    let m = g.sensors();
    check_order(order, m)?;
    if r.dim() != m {
        return Err(Error::InvalidInput("covariance does not match the array".into()));
    }
    let en = hermitian_eig(&r.r)?.trailing_vectors(order);
    let a = steering_matrix(g, grid.points());
    let proj = en.adjoint() * a;
    let spectrum: Vec<f64> = proj
        .column_iter()
        .map(|c| 1.0 / c.norm_squared().max(f64::MIN_POSITIVE))
        .collect();
    let peak_indices = local_peaks(&spectrum, order);
    let peaks = peak_indices.iter().map(|&k| grid.points()[k]).collect();
    Ok(MusicSpectrum { spectrum, peak_indices, peaks })
}

/// Roots of `z^(M-1) a(z)^H E_n E_n^H a(z)`; the `L` roots on or inside the
/// unit circle with the largest modulus give `nu = -arg(z) / pi`.
pub fn root_music(r: &SampleCovariance, order: usize, g: &ArrayGeometry) -> Result<RootMusicEstimate> {
    g.require_ula()?;
    let m = g.sensors();
    check_order(order, m)?;
    if r.dim() != m {
        return Err(Error::InvalidInput("covariance does not match the array".into()));
    }
    let eig = hermitian_eig(&r.r)?;
    let en = eig.trailing_vectors(order);
    let c = &en * en.adjoint();
    // Coefficient of z^d is the sum of the d-th superdiagonal, highest degree first.
    let mut coeffs: Vec<Complex64> = (0..2 * m - 1)
        .map(|i| {
            let d = m as isize - 1 - i as isize;
            (0..m)
                .filter_map(|row| {
                    let col = row as isize + d;
                    (col >= 0 && (col as usize) < m).then(|| c[(row, col as usize)])
                })
                .sum()
        })
        .collect();
    let scale = coeffs.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut low_confidence = false;
    while coeffs.len() > 1 && coeffs[0].norm() <= 1e-14 * scale {
        coeffs.remove(0);
        low_confidence = true;
    }
    let top = eig.values[0].abs().max(f64::MIN_POSITIVE);
    if eig.values[order - 1] - eig.values[order] <= 1e-8 * top {
        low_confidence = true;
    }
    let all: Vec<Complex64> = poly_roots(&coeffs)?.into_iter().map(|z| refine_unit_root(&coeffs, z)).collect();
    let mut distinct: Vec<Complex64> = vec![];
    let mut repeated: Vec<Complex64> = vec![];
    for &z in &all {
        // Both copies of a double root on the circle refine to the same point.
        if distinct.iter().all(|w| (w - z).norm() > 1e-9) {
            distinct.push(z);
        } else {
            repeated.push(z);
        }
    }
    let (mut inside, mut outside): (Vec<Complex64>, Vec<Complex64>) =
        distinct.into_iter().partition(|z| z.norm() <= 1.0 + 1e-9);
    inside.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(a.arg().total_cmp(&b.arg())));
    outside.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(a.arg().total_cmp(&b.arg())));
    if inside.len() < order {
        low_confidence = true;
    }
    let mut chosen: Vec<Complex64> = inside.into_iter().chain(outside).chain(repeated).take(order).collect();
    // A vanishing polynomial has no roots at all; fall back to evenly spaced points.
    let missing = order - chosen.len();
    chosen.extend((0..missing).map(|i| Complex64::from_polar(1.0, -PI * (-1.0 + 2.0 * i as f64 / missing as f64))));
    let mut frequencies: Vec<f64> = chosen.iter().map(|z| wrap_frequency(-z.arg() / PI)).collect();
    frequencies.sort_by(f64::total_cmp);
    Ok(RootMusicEstimate { frequencies, low_confidence })
}

/// Noise-free covariances put double roots on the unit circle, which the
/// companion eigenvalues only resolve to about `sqrt(eps)`; Newton on `p'`
/// recovers them to full precision.
fn refine_unit_root(coeffs: &[Complex64], z: Complex64) -> Complex64 {
    if (z.norm() - 1.0).abs() > 1e-6 {
        return z;
    }
    let mut w = z;
    for _ in 0..20 {
        let (_, dp, ddp) = poly_eval(coeffs, w);
        if ddp.norm() == 0.0 {
            break;
        }
        let next = w - dp / ddp;
        let moved = (next - w).norm();
        w = next;
        if moved <= 1e-15 {
            break;
        }
    }
    if (w - z).norm() <= 1e-5 && (w.norm() - 1.0).abs() <= 1e-6 {
        w
    } else {
        z
    }
}

/// `R0 = A diag(p) A^H + epsilon I`.
pub fn spice_model(d: &Dictionary, p: &[f64], epsilon: f64) -> HermitianMatrix {
    d.model_covariance(p, epsilon)
}

/// The trace form of the SPICE objective at `(p, epsilon)`; requires `R0` invertible.
pub fn spice_objective(d: &Dictionary, r: &SampleCovariance, p: &[f64], epsilon: f64, variant: SpiceVariant) -> Result<f64> {
    let r0 = spice_model(d, p, epsilon);
    let m = d.sensors() as f64;
    let rr = r.r.matrix();
    let tr = |x: &ComplexMatrix| (0..x.nrows()).map(|i| x[(i, i)].re).sum::<f64>();
    match variant {
        SpiceVariant::Undersampled => {
            let w = solve_hpd(&r0, &(rr * rr))?;
            Ok(tr(&w) + r0.trace() - 2.0 * r.r.trace())
        }
        SpiceVariant::Oversampled => {
            let w = solve_hpd(&r0, rr)?;
            let rinv = inverse_hpd(&r.r)?;
            Ok(tr(&w) + tr(&(r0.matrix() * rinv.matrix())) - 2.0 * m)
        }
    }
}

/// The weighted covariance-matching form `||R0^(-1/2) (R - R0) W||_F^2` with
/// `W = I` (undersampled) or `W = R^(-1/2)` (oversampled).
pub fn spice_matching_residual(
    d: &Dictionary,
    r: &SampleCovariance,
    p: &[f64],
    epsilon: f64,
    variant: SpiceVariant,
) -> Result<f64> {
    let r0 = spice_model(d, p, epsilon);
    let r0_isqrt = inverse_hpd(&crate::numerics::psd_sqrt(&r0)?)?;
    let diff = r.r.matrix() - r0.matrix();
    let left = r0_isqrt.matrix() * diff;
    let full = match variant {
        SpiceVariant::Undersampled => left,
        SpiceVariant::Oversampled => left * inverse_hpd(&crate::numerics::psd_sqrt(&r.r)?)?.matrix(),
    };
    Ok(frobenius(&full).powi(2))
}

/// `[[W, B^H], [B, A P A^H + epsilon I]] >= 0` with `p >= 0`, `epsilon >= 0`
/// and cost `tr(W)` plus the given linear weights on `(p, epsilon)`.
fn spice_problem(d: &Dictionary, b: &ComplexMatrix, p_weights: Vec<f64>, eps_weight: f64) -> ConicProblem {
    let m = d.sensors();
    let k = d.atoms();
    let top = b.ncols();
    let n = top + m;
    let mut constant = ComplexMatrix::zeros(n, n);
    constant.view_mut((top, 0), (m, top)).copy_from(b);
    constant.view_mut((0, top), (top, m)).copy_from(&b.adjoint());
    let mut block = LmiBlock::new(embed_hermitian(&HermitianMatrix::hermitian_part(&constant)));
    let lower: Vec<usize> = (top..n).collect();
    for j in 0..k {
        let a: Vec<Complex64> = d.column(j).iter().copied().collect();
        block.push(j, hermitian_rank_one(n, &lower, &a, 1.0));
    }
    let diag: Vec<_> = (top..n).map(|i| (i, i, Complex64::from(1.0))).collect();
    block.push(k, hermitian_sparse(n, &diag));
    let mut objective = p_weights;
    objective.push(eps_weight);
    let mut matrix_vars = vec![];
    if top > 0 {
        let idx: Vec<usize> = (0..top).collect();
        matrix_vars.push(MatrixVariable {
            block: 0,
            indices: embedded_indices(n, &idx),
            cost: RealMatrix::identity(2 * top, 2 * top) / 2.0,
        });
    }
    ConicProblem { objective, blocks: vec![block], nonneg: (0..=k).collect(), matrix_vars }
}

fn check_spice_input(d: &Dictionary, r: &SampleCovariance) -> Result<()> {
    if r.dim() != d.sensors() {
        return Err(Error::InvalidInput("covariance does not match the dictionary".into()));
    }
    let eig = hermitian_eig(&r.r)?;
    if *eig.values.last().unwrap() < -1e-10 * eig.values[0].abs().max(1.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(())
}

fn finish_spice(sol: crate::conic::ConicSolution, k: usize, offset: f64, variant: SpiceVariant) -> Result<SpiceSolution> {
    if sol.status == ConicStatus::Infeasible {
        return Err(Error::Conic("SPICE program reported infeasible".into()));
    }
    Ok(SpiceSolution {
        p: sol.x[..k].iter().map(|v| v.max(0.0)).collect(),
        epsilon: sol.x[k].max(0.0),
        objective: sol.objective_value + offset,
        variant,
        converged: sol.status == ConicStatus::Optimal,
    })
}

/// `min tr(R0^{-1} R^2) + tr(R0) - 2 tr(R)` over `p >= 0`, `epsilon >= 0`.
///
/// `tr(R0^{-1} R^2) = min tr(W)` s.t. `[[W, B^H], [B, R0]] >= 0` with `B B^H = R^2`.
pub fn spice_undersampled(d: &Dictionary, r: &SampleCovariance) -> Result<SpiceSolution> {
    check_spice_input(d, r)?;
    let b = covariance_factor_pow(&r.r, 1.0)?;
    let weights = (0..d.atoms()).map(|k| d.column(k).norm_squared()).collect();
    let p = spice_problem(d, &b, weights, d.sensors() as f64);
    finish_spice(solve_sdp(&p, SPICE_TOL)?, d.atoms(), -2.0 * r.r.trace(), SpiceVariant::Undersampled)
}

/// `min tr(R0^{-1} R) + epsilon tr(R^{-1}) + sum_k (a_k^H R^{-1} a_k) p_k - 2M`.
pub fn spice_oversampled(d: &Dictionary, r: &SampleCovariance) -> Result<SpiceSolution> {
    check_spice_input(d, r)?;
    let rinv = inverse_hpd(&r.r).map_err(|_| {
        Error::InvalidInput("oversampled SPICE needs a nonsingular sample covariance".into())
    })?;
    let eig = hermitian_eig(&r.r)?;
    if *eig.values.last().unwrap() <= 1e-12 * eig.values[0] {
        return Err(Error::InvalidInput("oversampled SPICE needs a nonsingular sample covariance".into()));
    }
    let f = covariance_factor_pow(&r.r, 0.5)?;
    let weights = (0..d.atoms())
        .map(|k| {
            let a = d.column(k);
            (a.adjoint() * rinv.matrix() * a)[(0, 0)].re
        })
        .collect();
    let p = spice_problem(d, &f, weights, rinv.trace());
    finish_spice(solve_sdp(&p, SPICE_TOL)?, d.atoms(), -2.0 * d.sensors() as f64, SpiceVariant::Oversampled)
}

/// Stochastic (unconditional) Cramer-Rao bound on the spatial frequencies:
/// `sigma^2 / (2N) {Re[(D^H P_A^perp D) . (P A^H R^{-1} A P)^T]}^{-1}`.
pub fn stochastic_crb(scene: &SourceScene, noise_power: f64, snapshots: usize, g: &ArrayGeometry) -> Result<RealMatrix> {
    scene.validate()?;
    let m = g.sensors();
    let l = scene.len();
    if l == 0 || l >= m {
        return Err(Error::InvalidOrder { order: l, sensors: m });
    }
    if !(noise_power > 0.0) || snapshots == 0 {
        return Err(Error::InvalidInput("CRB needs positive noise power and at least one snapshot".into()));
    }
    let a = steering_matrix(g, &scene.frequencies);
    let mut deriv = a.clone();
    for (i, mut row) in deriv.row_iter_mut().enumerate() {
        for z in row.iter_mut() {
            *z *= Complex64::new(0.0, -PI * g.positions()[i]);
        }
    }
    let p = scene.source_covariance()?;
    let gram = HermitianMatrix::hermitian_part(&(a.adjoint() * &a));
    let proj_a = &a * solve_hpd(&gram, &a.adjoint()).map_err(|_| {
        Error::InvalidInput("steering matrix is rank deficient".into())
    })?;
    let perp = ComplexMatrix::identity(m, m) - proj_a;
    let r = HermitianMatrix::hermitian_part(&(&a * p.matrix() * a.adjoint() + ComplexMatrix::identity(m, m) * Complex64::from(noise_power)));
    let h = deriv.adjoint() * perp * &deriv;
    let gmat = p.matrix() * a.adjoint() * solve_hpd(&r, &a)? * p.matrix();
    let fisher = DMatrix::from_fn(l, l, |i, j| (h[(i, j)] * gmat[(j, i)]).re);
    let inv = fisher
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("Fisher information is singular".into()))?;
    let sym = (&inv + inv.transpose()) * (noise_power / (4.0 * snapshots as f64));
    Ok(sym)
}

/// `sqrt(tr(CRB) / L)`, the per-frequency RMS bound.
pub fn crb_rms(crb: &RealMatrix) -> f64 {
    (crb.trace() / crb.nrows() as f64).sqrt()
}
