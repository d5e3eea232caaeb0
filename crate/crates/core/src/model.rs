//! Array geometry, steering vectors, snapshot simulation and frequency grids.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{psd_sqrt, ComplexMatrix, ComplexVector, HermitianMatrix};

/// Sensor positions in half-wavelength units, first sensor at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRepr", into = "GeometryRepr")]
pub struct ArrayGeometry {
    positions: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryRepr {
    positions: Vec<f64>,
}

impl TryFrom<GeometryRepr> for ArrayGeometry {
    type Error = Error;
    fn try_from(r: GeometryRepr) -> Result<Self> {
        ArrayGeometry::new(r.positions)
    }
}

impl From<ArrayGeometry> for GeometryRepr {
    fn from(g: ArrayGeometry) -> Self {
        GeometryRepr { positions: g.positions }
    }
}

impl ArrayGeometry {
    pub fn new(positions: Vec<f64>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidInput("an array needs at least two sensors".into()));
        }
        if positions[0] != 0.0 {
            return Err(Error::InvalidInput("the first sensor must sit at position 0".into()));
        }
        if positions.iter().any(|p| !p.is_finite()) || positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("sensor positions must be finite and strictly increasing".into()));
        }
        Ok(Self { positions })
    }

    /// Uniform linear array with `m` sensors at `0, 1, ..., m-1`.
    pub fn ula(m: usize) -> Result<Self> {
        Self::new((0..m).map(|i| i as f64).collect())
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn sensors(&self) -> usize {
        self.positions.len()
    }

    pub fn is_ula(&self) -> bool {
        self.positions.iter().enumerate().all(|(i, &p)| p == i as f64)
    }

    pub fn require_ula(&self) -> Result<()> {
        if self.is_ula() {
            Ok(())
        } else {
            Err(Error::UnsupportedGeometry)
        }
    }
}

/// Far-field sources: spatial frequencies, powers and optional correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceScene {
    pub frequencies: Vec<f64>,
    pub powers: Vec<f64>,
    /// Correlation coefficients between the sources (identity when absent).
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::json::opt_complex_matrix")]
    pub correlation: Option<ComplexMatrix>,
}

impl SourceScene {
    /// Independent sources with unit power.
    pub fn unit_power(frequencies: &[f64]) -> Self {
        Self { frequencies: frequencies.to_vec(), powers: vec![1.0; frequencies.len()], correlation: None }
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        if self.powers.len() != l {
            return Err(Error::InvalidInput(format!("{} frequencies but {} powers", l, self.powers.len())));
        }
        if self.frequencies.iter().any(|f| !(-1.0..1.0).contains(f)) {
            return Err(Error::InvalidInput("source frequencies must lie in [-1, 1)".into()));
        }
        for i in 0..l {
            for j in 0..i {
                if self.frequencies[i] == self.frequencies[j] {
                    return Err(Error::InvalidInput("source frequencies must be distinct".into()));
                }
            }
        }
        if self.powers.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("source powers must be finite and nonnegative".into()));
        }
        if let Some(c) = &self.correlation {
            if c.nrows() != l || c.ncols() != l {
                return Err(Error::InvalidInput(format!("correlation must be {l}x{l}")));
            }
        }
        Ok(())
    }

    /// Source covariance `D^{1/2} C D^{1/2}` with `D = diag(powers)`.
    pub fn source_covariance(&self) -> Result<HermitianMatrix> {
        self.validate()?;
        let l = self.len();
        let corr = match &self.correlation {
            Some(c) => HermitianMatrix::new(c.clone())?.into_matrix(),
            None => ComplexMatrix::identity(l, l),
        };
        let d: Vec<f64> = self.powers.iter().map(|p| p.sqrt()).collect();
        Ok(HermitianMatrix::hermitian_part(&DMatrix::from_fn(l, l, |i, j| corr[(i, j)] * d[i] * d[j])))
    }
}

/// Measurement matrix `Y` (sensors x snapshots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmvBatch {
    #[serde(with = "crate::json::complex_matrix")]
    pub y: ComplexMatrix,
    /// Noise power used when the batch was simulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_power: Option<f64>,
}

impl MmvBatch {
    pub fn new(y: ComplexMatrix, noise_power: Option<f64>) -> Result<Self> {
        if y.ncols() == 0 || y.nrows() == 0 {
            return Err(Error::InvalidInput("measurement matrix must have at least one snapshot".into()));
        }
        if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("measurement matrix has non-finite entries".into()));
        }
        Ok(Self { y, noise_power })
    }

    pub fn sensors(&self) -> usize {
        self.y.nrows()
    }

    pub fn snapshots(&self) -> usize {
        self.y.ncols()
    }
}

/// `R = Y Y^H / N` together with the snapshot count folded into it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    pub r: HermitianMatrix,
    pub snapshots: usize,
}

impl SampleCovariance {
    pub fn new(r: HermitianMatrix, snapshots: usize) -> Self {
        Self { r, snapshots }
    }

    pub fn dim(&self) -> usize {
        self.r.dim()
    }
}

/// Ascending spatial-frequency grid in `[-1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FrequencyGrid {
    points: Vec<f64>,
}

impl TryFrom<Vec<f64>> for FrequencyGrid {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        FrequencyGrid::new(points)
    }
}

impl From<FrequencyGrid> for Vec<f64> {
    fn from(g: FrequencyGrid) -> Self {
        g.points
    }
}

impl FrequencyGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("grid needs at least one point".into()));
        }
        if points.iter().any(|p| !(-1.0..1.0).contains(p)) || points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("grid points must be ascending and inside [-1, 1)".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `nu_k = -1 + 2k/K` for `k = 0..K`.
pub fn uniform_grid(k: usize) -> Result<FrequencyGrid> {
    if k == 0 {
        return Err(Error::InvalidInput("grid size must be at least 1".into()));
    }
    FrequencyGrid::new((0..k).map(|i| -1.0 + 2.0 * i as f64 / k as f64).collect())
}

/// Maps any real frequency into `[-1, 1)`.
pub fn wrap_frequency(nu: f64) -> f64 {
    let w = nu - 2.0 * ((nu + 1.0) / 2.0).floor();
    if w >= 1.0 {
        w - 2.0
    } else {
        w
    }
}

/// Wrap-around distance `min_i |a - b + 2i|`.
pub fn wrap_distance(a: f64, b: f64) -> f64 {
    wrap_frequency(a - b).abs()
}

/// Spatial frequency `cos(theta)` of a direction given in radians.
pub fn frequency_from_angle(theta: f64) -> f64 {
    wrap_frequency(theta.cos())
}

/// Direction in `[0, pi]` radians for a spatial frequency.
pub fn angle_from_frequency(nu: f64) -> f64 {
    nu.clamp(-1.0, 1.0).acos()
}

/// `a(nu)_m = exp(-j pi nu rho_m)`.
pub fn steering_vector(g: &ArrayGeometry, nu: f64) -> ComplexVector {
    ComplexVector::from_iterator(g.sensors(), g.positions().iter().map(|&p| Complex64::from_polar(1.0, -PI * nu * p)))
}

pub fn steering_matrix(g: &ArrayGeometry, freqs: &[f64]) -> ComplexMatrix {
    let mut a = ComplexMatrix::zeros(g.sensors(), freqs.len());
    for (k, &nu) in freqs.iter().enumerate() {
        a.set_column(k, &steering_vector(g, nu));
    }
    a
}

fn complex_normal(rng: &mut ChaCha8Rng, power: f64) -> Complex64 {
    let s = (power / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Random stream for Monte-Carlo trial `trial` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Simulates `Y = A(mu) Psi + noise` from stream `(seed, 0)`.
pub fn simulate_mmv(
    g: &ArrayGeometry,
    scene: &SourceScene,
    snapshots: usize,
    noise_power: f64,
    seed: u64,
) -> Result<MmvBatch> {
    simulate_trial(g, scene, snapshots, noise_power, seed, 0)
}

/// Simulates one Monte-Carlo trial; trials are independent of evaluation order.
pub fn simulate_trial(
    g: &ArrayGeometry,
    scene: &SourceScene,
    snapshots: usize,
    noise_power: f64,
    seed: u64,
    trial: u64,
) -> Result<MmvBatch> {
    if snapshots == 0 {
        return Err(Error::InvalidInput("snapshot count must be at least 1".into()));
    }
    if !(noise_power >= 0.0) || !noise_power.is_finite() {
        return Err(Error::InvalidInput("noise power must be finite and nonnegative".into()));
    }
    let cov = scene.source_covariance()?;
    let root = psd_sqrt(&cov).map_err(|_| Error::InvalidInput("source correlation is not positive semidefinite".into()))?;
    let mut rng = trial_rng(seed, trial);
    let l = scene.len();
    let white = ComplexMatrix::from_fn(l, snapshots, |_, _| complex_normal(&mut rng, 1.0));
    let psi = root.matrix() * white;
    let noise = ComplexMatrix::from_fn(g.sensors(), snapshots, |_, _| complex_normal(&mut rng, noise_power));
    let y = steering_matrix(g, &scene.frequencies) * psi + noise;
    MmvBatch::new(y, Some(noise_power))
}

pub fn sample_covariance(b: &MmvBatch) -> SampleCovariance {
    let n = b.snapshots();
    let r = (&b.y * b.y.adjoint()).unscale(n as f64);
    SampleCovariance::new(HermitianMatrix::hermitian_part(&r), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{frobenius, hermitian_eig};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn steering_examples() {
        let g = ArrayGeometry::ula(3).unwrap();
        let a = steering_vector(&g, 0.0);
        assert!(a.iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-15));
        let a = steering_vector(&g, 0.5);
        for (got, want) in a.iter().zip([c(1.0, 0.0), c(0.0, -1.0), c(-1.0, 0.0)]) {
            assert!((got - want).norm() < 1e-15);
        }
    }

    #[test]
    fn steering_matrix_examples() {
        let g = ArrayGeometry::ula(2).unwrap();
        let a = steering_matrix(&g, uniform_grid(4).unwrap().points());
        assert_eq!(a.shape(), (2, 4));
        assert!(a.row(0).iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-15));
        assert_eq!(steering_matrix(&g, &[0.3]).ncols(), 1);

        let g = ArrayGeometry::ula(5).unwrap();
        let a = steering_matrix(&g, &[-0.7, 0.1, 0.2, 0.9]);
        let gram = HermitianMatrix::hermitian_part(&(a.adjoint() * &a));
        assert!(*hermitian_eig(&gram).unwrap().values.last().unwrap() > 1e-6);
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::new(vec![0.0]).is_err());
        assert!(ArrayGeometry::new(vec![0.5, 1.0]).is_err());
        assert!(ArrayGeometry::new(vec![0.0, 2.0, 1.0]).is_err());
        assert!(ArrayGeometry::new(vec![0.0, 1.0, 2.5]).is_ok_and(|g| !g.is_ula()));
        assert!(ArrayGeometry::ula(4).unwrap().is_ula());
        let parsed: std::result::Result<ArrayGeometry, _> = serde_json::from_str(r#"{"positions":[1.0,2.0]}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn grid_examples() {
        assert_eq!(uniform_grid(4).unwrap().points(), &[-1.0, -0.5, 0.0, 0.5]);
        assert_eq!(uniform_grid(2).unwrap().points(), &[-1.0, 0.0]);
        let g = uniform_grid(1000).unwrap();
        assert!((g.points()[1] - g.points()[0] - 0.002).abs() < 1e-15);
        assert!((g.points()[999] - 0.998).abs() < 1e-12);
        assert!(uniform_grid(0).is_err());
    }

    #[test]
    fn wrapping() {
        assert!((wrap_frequency(1.2) - (-0.8)).abs() < 1e-15);
        assert_eq!(wrap_frequency(1.0), -1.0);
        assert_eq!(wrap_frequency(-1.0), -1.0);
        assert!((wrap_frequency(-3.5) - 0.5).abs() < 1e-15);
        assert!((frequency_from_angle(PI / 3.0) - 0.5).abs() < 1e-12);
        assert!((angle_from_frequency(0.5) - PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn noise_free_single_source_columns_are_parallel() {
        let g = ArrayGeometry::ula(4).unwrap();
        let b = simulate_mmv(&g, &SourceScene::unit_power(&[0.3]), 8, 0.0, 1).unwrap();
        let a = steering_vector(&g, 0.3);
        for col in b.y.column_iter() {
            let coef = col[0];
            assert!((col.into_owned() - &a * coef).norm() < 1e-12);
        }
        let eig = hermitian_eig(&sample_covariance(&b).r).unwrap();
        assert!(eig.values[1] < 1e-12 * eig.values[0]);
    }

    #[test]
    fn pure_noise_power() {
        let g = ArrayGeometry::ula(4).unwrap();
        let scene = SourceScene { frequencies: vec![0.1], powers: vec![0.0], correlation: None };
        let b = simulate_mmv(&g, &scene, 5000, 2.0, 3).unwrap();
        let mean = b.y.iter().map(|z| z.norm_sqr()).sum::<f64>() / (4.0 * 5000.0);
        assert!((mean - 2.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn simulation_is_deterministic() {
        let g = ArrayGeometry::ula(6).unwrap();
        let scene = SourceScene::unit_power(&[0.35, 0.5]);
        let a = simulate_mmv(&g, &scene, 10, 0.5, 42).unwrap();
        let b = simulate_mmv(&g, &scene, 10, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let t1 = simulate_trial(&g, &scene, 10, 0.5, 42, 1).unwrap();
        assert_ne!(a, t1);
    }

    #[test]
    fn rejects_invalid_correlation() {
        let g = ArrayGeometry::ula(4).unwrap();
        let corr = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)]);
        let scene = SourceScene { frequencies: vec![0.1, 0.4], powers: vec![1.0, 1.0], correlation: Some(corr) };
        assert!(matches!(simulate_mmv(&g, &scene, 4, 1.0, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn fully_correlated_sources_give_rank_one_signal() {
        let g = ArrayGeometry::ula(5).unwrap();
        let corr = DMatrix::from_element(2, 2, c(1.0, 0.0));
        let scene = SourceScene { frequencies: vec![0.1, 0.4], powers: vec![1.0, 4.0], correlation: Some(corr) };
        let b = simulate_mmv(&g, &scene, 20, 0.0, 9).unwrap();
        let eig = hermitian_eig(&sample_covariance(&b).r).unwrap();
        assert!(eig.values[1] < 1e-10 * eig.values[0]);
    }

    #[test]
    fn covariance_examples() {
        let ones = DMatrix::from_element(2, 2, c(1.0, 0.0));
        let r = sample_covariance(&MmvBatch::new(ones.clone(), None).unwrap());
        assert!(crate::numerics::max_abs(&(r.r.matrix() - &ones)) < 1e-15);

        // Two orthogonal columns of norm sqrt(2) for M = 2: trace M.
        let y = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0)]);
        let r = sample_covariance(&MmvBatch::new(y, None).unwrap());
        assert!((r.r.trace() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn noise_covariance_converges() {
        let g = ArrayGeometry::ula(4).unwrap();
        let scene = SourceScene { frequencies: vec![], powers: vec![], correlation: None };
        let err = |n| {
            let mut total = 0.0;
            for seed in 0..20 {
                let r = sample_covariance(&simulate_mmv(&g, &scene, n, 1.0, seed).unwrap());
                total += frobenius(&(r.r.matrix() - ComplexMatrix::identity(4, 4))) / 2.0;
            }
            total / 20.0
        };
        let (e1, e2) = (err(100), err(1600));
        // Sixteen times the snapshots should cut the error about four-fold.
        assert!(e1 / e2 > 3.0 && e1 / e2 < 5.5, "{e1} {e2}");
    }

    #[test]
    fn scene_json_roundtrip() {
        let corr = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.2, 0.1), c(0.2, -0.1), c(1.0, 0.0)]);
        let scene = SourceScene { frequencies: vec![0.1, 0.4], powers: vec![1.0, 2.0], correlation: Some(corr) };
        let text = serde_json::to_string(&scene).unwrap();
        assert_eq!(serde_json::from_str::<SourceScene>(&text).unwrap(), scene);
        assert!(serde_json::from_str::<SourceScene>(r#"{"frequencies":[0.1],"powers":[1.0],"bogus":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn steering_entries_unit_modulus(nu in -1.0f64..1.0, extra in proptest::collection::vec(0.1f64..3.0, 1..8)) {
            let mut pos = vec![0.0];
            for d in extra {
                let last = *pos.last().unwrap();
                pos.push(last + d);
            }
            let g = ArrayGeometry::new(pos).unwrap();
            let a = steering_vector(&g, nu);
            prop_assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
            prop_assert!((a.norm_squared() - g.sensors() as f64).abs() < 1e-12);
            prop_assert_eq!(a[0], c(1.0, 0.0));
        }

        #[test]
        fn sample_covariance_is_psd(seed in any::<u64>(), m in 2usize..7, n in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = ComplexMatrix::from_fn(m, n, |_, _| complex_normal(&mut rng, 1.0));
            let r = sample_covariance(&MmvBatch::new(y, None).unwrap());
            let eig = hermitian_eig(&r.r).unwrap();
            prop_assert!(*eig.values.last().unwrap() >= -1e-12 * eig.values[0].max(1.0));
        }

        #[test]
        fn wrap_lands_in_range(nu in -50.0f64..50.0) {
            let w = wrap_frequency(nu);
            prop_assert!((-1.0..1.0).contains(&w));
            let k = ((nu - w) / 2.0).round();
            prop_assert!((nu - w - 2.0 * k).abs() < 1e-9);
        }
    }
}
