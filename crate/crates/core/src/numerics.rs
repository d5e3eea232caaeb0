//! Dense complex linear algebra shared by the solvers.
//!
//! Matrices are plain [`nalgebra`] containers; [`HermitianMatrix`] adds a
//! validated wrapper for the covariance-like quantities that must stay
//! conjugate-symmetric (sample covariances, Toeplitz parameterizations,
//! the `U` blocks of the semidefinite programs).

use nalgebra::{ComplexField, DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type ComplexMatrix = DMatrix<Complex64>;
pub type ComplexVector = DVector<Complex64>;
pub type RealMatrix = DMatrix<f64>;

/// Relative asymmetry accepted by [`HermitianMatrix::new`].
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Absolute floor used by every relative tolerance in the crate.
pub const ABS_FLOOR: f64 = 1e-14;

const EIG_MAX_SWEEPS: usize = 10_000;

/// Complex square matrix that is conjugate-symmetric with a real diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(ComplexMatrix);

impl HermitianMatrix {
    /// Validates `m` and stores its exact Hermitian part.
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidInput(format!(
                "Hermitian matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let scale = max_abs(&m).max(ABS_FLOOR);
        let asym = max_abs(&(&m - m.adjoint()));
        if asym > HERMITIAN_TOL * scale {
            return Err(Error::NotHermitian(asym / scale));
        }
        Ok(Self::hermitian_part(&m))
    }

    /// Symmetrizes `m` as `(m + m^H) / 2` without validation.
    pub fn hermitian_part(m: &ComplexMatrix) -> Self {
        let mut h = (m + m.adjoint()).scale(0.5);
        for i in 0..h.nrows() {
            h[(i, i)].im = 0.0;
        }
        Self(h)
    }

    pub fn identity(n: usize) -> Self {
        Self(ComplexMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(ComplexMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(self.0.scale(c))
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        frobenius(&self.0)
    }
}

/// Eigen-decomposition `H = V diag(values) V^H` with eigenvalues descending.
#[derive(Debug, Clone)]
pub struct HermitianEig {
    pub values: Vec<f64>,
    pub vectors: ComplexMatrix,
}

impl HermitianEig {
    /// Columns of the eigenvector matrix from index `from` onwards.
    pub fn trailing_vectors(&self, from: usize) -> ComplexMatrix {
        let n = self.vectors.ncols();
        self.vectors.columns(from, n - from).into_owned()
    }

    pub fn leading_vectors(&self, count: usize) -> ComplexMatrix {
        self.vectors.columns(0, count).into_owned()
    }
}

pub fn hermitian_eig(h: &HermitianMatrix) -> Result<HermitianEig> {
    let n = h.dim();
    if n == 0 {
        return Ok(HermitianEig { values: vec![], vectors: ComplexMatrix::zeros(0, 0) });
    }
    let eig = SymmetricEigen::try_new(h.matrix().clone(), f64::EPSILON, EIG_MAX_SWEEPS)
        .ok_or(Error::EigenNoConvergence(n))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = ComplexMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(HermitianEig { values, vectors })
}

/// Lower Cholesky factor `L` with `H = L L^H`.
pub fn cholesky(h: &HermitianMatrix) -> Result<ComplexMatrix> {
    let n = h.dim();
    let a = h.matrix();
    let scale = (0..n).map(|i| a[(i, i)].re.abs()).fold(0.0, f64::max).max(ABS_FLOOR);
    let mut l = ComplexMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > f64::EPSILON * scale) {
            return Err(Error::NotPositiveDefinite);
        }
        let d = d.sqrt();
        l[(j, j)] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// Solves `L L^H X = B` given the lower factor from [`cholesky`].
pub fn cholesky_solve(l: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut v = x[(i, c)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = v / l[(i, i)].re;
        }
        for i in (0..n).rev() {
            let mut v = x[(i, c)];
            for k in i + 1..n {
                v -= l[(k, i)].conj() * x[(k, c)];
            }
            x[(i, c)] = v / l[(i, i)].re;
        }
    }
    x
}

/// Solves `H X = B` for Hermitian positive definite `H` by Cholesky.
pub fn solve_hpd(h: &HermitianMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if b.nrows() != h.dim() {
        return Err(Error::InvalidInput(format!(
            "right-hand side has {} rows, expected {}",
            b.nrows(),
            h.dim()
        )));
    }
    let l = cholesky(h)?;
    Ok(cholesky_solve(&l, b))
}

/// Inverse of a Hermitian positive definite matrix.
pub fn inverse_hpd(h: &HermitianMatrix) -> Result<HermitianMatrix> {
    let inv = solve_hpd(h, &ComplexMatrix::identity(h.dim(), h.dim()))?;
    Ok(HermitianMatrix::hermitian_part(&inv))
}

/// Principal square root of a positive semidefinite matrix; negative
/// eigenvalues within round-off are clamped to zero.
pub fn psd_sqrt(h: &HermitianMatrix) -> Result<HermitianMatrix> {
    let eig = hermitian_eig(h)?;
    let top = eig.values.first().copied().unwrap_or(0.0).abs().max(ABS_FLOOR);
    if eig.values.iter().any(|&v| v < -1e-10 * top) {
        return Err(Error::InvalidInput("matrix is not positive semidefinite".into()));
    }
    let n = h.dim();
    let mut scaled = eig.vectors.clone();
    for (j, &v) in eig.values.iter().enumerate() {
        let r = v.max(0.0).sqrt();
        for i in 0..n {
            scaled[(i, j)] *= r;
        }
    }
    Ok(HermitianMatrix::hermitian_part(&(&scaled * eig.vectors.adjoint())))
}

/// Roots of the polynomial `coeffs[0] z^n + coeffs[1] z^(n-1) + ... + coeffs[n]`.
///
/// Roots are companion-matrix eigenvalues, each refined by a few safeguarded
/// Newton steps. Both the plain and the power-scaled companion are tried and
/// the root set with the smaller relative backward error is kept.
pub fn poly_roots(coeffs: &[Complex64]) -> Result<Vec<Complex64>> {
    if coeffs.len() <= 1 {
        return Ok(vec![]);
    }
    let lead = coeffs[0];
    if lead.norm() == 0.0 {
        return Err(Error::InvalidInput("leading polynomial coefficient is zero".into()));
    }
    let n = coeffs.len() - 1;
    let monic: Vec<Complex64> = coeffs.iter().map(|c| c / lead).collect();

    // z = scale * w keeps the companion entries O(1).
    let scale = (1..=n)
        .map(|i| monic[i].norm().powf(1.0 / i as f64))
        .fold(0.0_f64, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };

    let mut best: Option<(f64, Vec<Complex64>)> = None;
    for s in [1.0, scale] {
        let Some(roots) = companion_roots(&monic, s) else { continue };
        let roots: Vec<Complex64> = roots.iter().map(|&z| polish_root(coeffs, z)).collect();
        let err = roots.iter().map(|&z| relative_residual(coeffs, z)).fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, roots));
        }
        if scale == 1.0 {
            break;
        }
    }
    best.map(|(_, r)| r).ok_or(Error::EigenNoConvergence(n))
}

fn companion_roots(monic: &[Complex64], scale: f64) -> Option<Vec<Complex64>> {
    let n = monic.len() - 1;
    let mut companion = ComplexMatrix::zeros(n, n);
    for j in 0..n {
        companion[(0, j)] = -monic[j + 1] / scale.powi(j as i32 + 1);
    }
    for i in 1..n {
        companion[(i, i - 1)] = Complex64::new(1.0, 0.0);
    }
    balance(&mut companion);
    let ev = Schur::try_new(companion, f64::EPSILON, EIG_MAX_SWEEPS)?.eigenvalues()?;
    Some(ev.iter().map(|w| w * scale).collect())
}

/// Parlett-Reinsch balancing by powers of two; a similarity, so the
/// eigenvalues are unchanged while row and column norms are equalized.
fn balance(a: &mut ComplexMatrix) {
    let n = a.nrows();
    loop {
        let mut done = true;
        for i in 0..n {
            let c: f64 = (0..n).filter(|&j| j != i).map(|j| a[(j, i)].l1_norm()).sum();
            let r: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].l1_norm()).sum();
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let total = c + r;
            let (mut f, mut cc) = (1.0, c);
            while cc < r / 2.0 {
                f *= 2.0;
                cc *= 4.0;
            }
            while cc >= r * 2.0 {
                f /= 2.0;
                cc /= 4.0;
            }
            if (c * f + r / f) < 0.95 * total {
                done = false;
                a.column_mut(i).scale_mut(f);
                a.row_mut(i).scale_mut(1.0 / f);
            }
        }
        if done {
            break;
        }
    }
}

/// `|p(z)| / sum_i |c_i| |z|^(n-i)`.
fn relative_residual(coeffs: &[Complex64], z: Complex64) -> f64 {
    let (p, _, _) = poly_eval(coeffs, z);
    let r = z.norm();
    let bound = coeffs.iter().fold(0.0, |acc, c| acc * r + c.norm());
    if bound > 0.0 {
        p.norm() / bound
    } else {
        0.0
    }
}

/// Evaluates the polynomial and its first two derivatives (Horner).
pub fn poly_eval(coeffs: &[Complex64], z: Complex64) -> (Complex64, Complex64, Complex64) {
    let zero = Complex64::new(0.0, 0.0);
    let (mut p, mut dp, mut ddp) = (zero, zero, zero);
    for &c in coeffs {
        ddp = ddp * z + dp * 2.0;
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp, ddp)
}

/// Refines a root estimate with the multiplicity-independent Newton step on
/// `p / p'`, keeping the update only while it reduces `|p|`.
pub fn polish_root(coeffs: &[Complex64], mut z: Complex64) -> Complex64 {
    let (mut p, _, _) = poly_eval(coeffs, z);
    for _ in 0..8 {
        if p.norm() == 0.0 {
            break;
        }
        let (_, dp, ddp) = poly_eval(coeffs, z);
        let denom = dp * dp - p * ddp;
        if denom.norm() == 0.0 || !denom.re.is_finite() {
            break;
        }
        let candidate = z - p * dp / denom;
        let (pc, _, _) = poly_eval(coeffs, candidate);
        if pc.norm() < p.norm() {
            z = candidate;
            p = pc;
        } else {
            break;
        }
    }
    z
}

pub fn max_abs(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Least-squares solution of `A X = B` for a tall `A` of full column rank,
/// via Householder QR. `None` when a diagonal entry of `R` falls below
/// `rcond` times the largest one.
pub fn lstsq<T: ComplexField>(a: &DMatrix<T>, b: &DMatrix<T>, rcond: f64) -> Option<DMatrix<T>>
where
    T::RealField: Into<f64>,
{
    if a.nrows() < a.ncols() || a.nrows() != b.nrows() {
        return None;
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|d| d.clone().modulus().into()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 || diag.iter().any(|&d| d <= rcond * top) {
        return None;
    }
    r.solve_upper_triangular(&(qr.q().adjoint() * b))
}

/// For `N > M`, factors `Y = Y_c Q^H` with `Y_c` square and `Q` having
/// orthonormal columns, so `Y_c Y_c^H = Y Y^H`. `None` when `N <= M`.
pub fn compress_columns(y: &ComplexMatrix) -> Option<(ComplexMatrix, ComplexMatrix)> {
    if y.ncols() <= y.nrows() {
        return None;
    }
    let qr = y.adjoint().qr();
    Some((qr.r().adjoint(), qr.q()))
}

pub fn frobenius(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `a^H b` for complex column vectors given as slices or columns.
pub fn inner(a: &ComplexVector, b: &ComplexVector) -> Complex64 {
    a.dotc(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
        let m = ComplexMatrix::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        HermitianMatrix::hermitian_part(&m)
    }

    fn reconstruction_residual(h: &HermitianMatrix) -> f64 {
        let eig = hermitian_eig(h).unwrap();
        let n = h.dim();
        let lambda = ComplexMatrix::from_diagonal(&ComplexVector::from_iterator(
            n,
            eig.values.iter().map(|&v| c(v, 0.0)),
        ));
        let rebuilt = &eig.vectors * lambda * eig.vectors.adjoint();
        frobenius(&(rebuilt - h.matrix())) / h.norm().max(ABS_FLOOR)
    }

    #[test]
    fn column_compression() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = ComplexMatrix::from_fn(4, 9, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let (yc, q) = compress_columns(&y).unwrap();
        assert_eq!((yc.nrows(), yc.ncols(), q.nrows(), q.ncols()), (4, 4, 9, 4));
        assert!(frobenius(&(&yc * q.adjoint() - &y)) < 1e-12);
        assert!(frobenius(&(q.adjoint() * &q - ComplexMatrix::identity(4, 4))) < 1e-12);
        assert!(compress_columns(&ComplexMatrix::zeros(4, 4)).is_none());
    }

    #[test]
    fn roots_of_badly_scaled_polynomial() {
        // Roots spread over six orders of magnitude, including a double pair on the circle.
        let roots = [c(1391.4, -0.5), c(0.0, 7.187e-4), c(1.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0), c(0.0, 0.5)];
        let mut coeffs = vec![c(1e-4, 0.0)];
        for r in roots {
            let mut next = coeffs.clone();
            next.push(c(0.0, 0.0));
            for (i, &a) in coeffs.iter().enumerate() {
                next[i + 1] -= a * r;
            }
            coeffs = next;
        }
        let got = poly_roots(&coeffs).unwrap();
        for r in roots {
            let best = got.iter().map(|z| (z - r).norm() / r.norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "{r} missing from {got:?}");
        }
    }

    #[test]
    fn identity_eigenvalues() {
        let eig = hermitian_eig(&HermitianMatrix::identity(3)).unwrap();
        for v in eig.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_eigenpairs() {
        let mut m = ComplexMatrix::zeros(2, 2);
        m[(0, 0)] = c(1.0, 0.0);
        m[(1, 1)] = c(3.0, 0.0);
        let eig = hermitian_eig(&HermitianMatrix::new(m).unwrap()).unwrap();
        assert!((eig.values[0] - 3.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
        assert!((eig.vectors[(1, 0)].norm() - 1.0).abs() < 1e-12);
        assert!((eig.vectors[(0, 1)].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        // a(0.3) for a 4-sensor ULA has squared norm 4.
        let a = ComplexVector::from_fn(4, |m, _| Complex64::from_polar(1.0, -std::f64::consts::PI * 0.3 * m as f64));
        let h = HermitianMatrix::new(&a * a.adjoint()).unwrap();
        let eig = hermitian_eig(&h).unwrap();
        assert!((eig.values[0] - 4.0).abs() < 1e-12);
        for v in &eig.values[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_hermitian() {
        let mut m = ComplexMatrix::zeros(2, 2);
        m[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(HermitianMatrix::new(m), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn solve_identity_and_scaled_identity() {
        let b = ComplexMatrix::from_fn(3, 2, |i, j| c(i as f64, j as f64 - 0.5));
        let x = solve_hpd(&HermitianMatrix::identity(3), &b).unwrap();
        assert!(frobenius(&(x - &b)) < 1e-15);

        let two = HermitianMatrix::identity(3).scale(2.0);
        let x = solve_hpd(&two, &ComplexMatrix::identity(3, 3)).unwrap();
        assert!(frobenius(&(x - ComplexMatrix::identity(3, 3).scale(0.5))) < 1e-15);
    }

    #[test]
    fn solve_random_hpd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ComplexMatrix::from_fn(5, 5, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let h = HermitianMatrix::hermitian_part(&(&g * g.adjoint() + ComplexMatrix::identity(5, 5)));
        let b = ComplexMatrix::from_fn(5, 3, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let x = solve_hpd(&h, &b).unwrap();
        let residual = frobenius(&(h.matrix() * x - &b)) / frobenius(&b);
        assert!(residual < 1e-10, "residual {residual}");
    }

    #[test]
    fn solve_rejects_indefinite() {
        let mut m = ComplexMatrix::identity(2, 2);
        m[(1, 1)] = c(-1.0, 0.0);
        let h = HermitianMatrix::new(m).unwrap();
        assert_eq!(solve_hpd(&h, &ComplexMatrix::identity(2, 2)), Err(Error::NotPositiveDefinite));
    }

    #[test]
    fn roots_of_simple_polynomials() {
        let mut roots = poly_roots(&[c(1.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)]).unwrap();
        roots.sort_by(|a, b| a.re.total_cmp(&b.re));
        assert!((roots[0] - c(-1.0, 0.0)).norm() < 1e-14);
        assert!((roots[1] - c(1.0, 0.0)).norm() < 1e-14);

        let target = c(0.3, -2.0);
        let roots = poly_roots(&[c(1.0, 0.0), -target]).unwrap();
        assert_eq!(roots.len(), 1);
        assert!((roots[0] - target).norm() < 1e-14);

        assert!(poly_roots(&[c(4.0, 0.0)]).unwrap().is_empty());
        assert!(poly_roots(&[c(0.0, 0.0), c(1.0, 0.0)]).is_err());
    }

    #[test]
    fn random_degree_six_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let coeffs: Vec<Complex64> =
                (0..7).map(|_| c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
            let norm = coeffs.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let roots = poly_roots(&coeffs).unwrap();
            assert_eq!(roots.len(), 6);
            for r in roots {
                let (p, _, _) = poly_eval(&coeffs, r);
                assert!(p.norm() <= 1e-8 * norm, "|p(r)| = {}", p.norm());
            }
        }
    }

    #[test]
    fn double_root_to_half_precision() {
        // (z - w)^2 (z + 1); a double root is only determined to ~sqrt(eps).
        let w = Complex64::from_polar(1.0, 0.7);
        let one = c(1.0, 0.0);
        let coeffs = vec![one, one - w * 2.0, w * w - w * 2.0, w * w];
        let roots = poly_roots(&coeffs).unwrap();
        let close = roots.iter().filter(|r| (*r - w).norm() < 1e-7).count();
        assert_eq!(close, 2, "{roots:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn eig_reconstructs_random_hermitian(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_hermitian(n, &mut rng);
            prop_assert!(reconstruction_residual(&h) < 1e-10);
            let eig = hermitian_eig(&h).unwrap();
            prop_assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn root_count_matches_degree(seed in any::<u64>(), degree in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<Complex64> = (0..=degree)
                .map(|_| c(rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)))
                .collect();
            prop_assert_eq!(poly_roots(&coeffs).unwrap().len(), degree);
        }
    }
}
