//! Dense primal-dual interior point solver for small semidefinite programs.
//!
//! Problems are stated in linear-matrix-inequality form
//!
//! ```text
//! minimize    c^T x + sum_k <C_k, W_k>
//! subject to  B_b + sum_i x_i A_{b,i} + E_b W_b E_b^T  >= 0   for every block b
//!             x_i >= 0                                          for i in nonneg
//! ```
//!
//! where each `W_b` is an optional free symmetric matrix variable placed on a
//! principal sub-block of block `b`. Matrix variables are eliminated from the
//! Newton system analytically, so the Schur complement only ever has one row
//! per scalar variable. Complex Hermitian constraints are handled through the
//! real embedding `[[Re H, -Im H], [Im H, Re H]]`.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{HermitianMatrix, RealMatrix};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Symmetric coefficient matrix of one scalar variable inside one block.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    /// Upper-triangle entries `(row, col, value)` with `row <= col`; the
    /// lower triangle is implied by symmetry. Repeated positions add up.
    Sparse(Vec<(usize, usize, f64)>),
    /// `sum_r w_r v_r v_r^T`, each `v_r` supported on `indices`.
    LowRank { indices: Vec<usize>, terms: Vec<(f64, Vec<f64>)> },
}

impl Coefficient {
    fn add_to(&self, m: &mut RealMatrix, scale: f64) {
        match self {
            Coefficient::Sparse(entries) => {
                for &(p, q, v) in entries {
                    m[(p, q)] += scale * v;
                    if p != q {
                        m[(q, p)] += scale * v;
                    }
                }
            }
            Coefficient::LowRank { indices, terms } => {
                for (w, v) in terms {
                    for (a, &ia) in indices.iter().enumerate() {
                        let va = scale * w * v[a];
                        for (b, &ib) in indices.iter().enumerate() {
                            m[(ia, ib)] += va * v[b];
                        }
                    }
                }
            }
        }
    }

    /// `tr(A F)`; `F` need not be symmetric.
    fn trace_with(&self, f: &RealMatrix) -> f64 {
        match self {
            Coefficient::Sparse(entries) => entries
                .iter()
                .map(|&(p, q, v)| if p == q { v * f[(p, p)] } else { v * (f[(p, q)] + f[(q, p)]) })
                .sum(),
            Coefficient::LowRank { indices, terms } => terms
                .iter()
                .map(|(w, v)| {
                    let mut acc = 0.0;
                    for (a, &ia) in indices.iter().enumerate() {
                        for (b, &ib) in indices.iter().enumerate() {
                            acc += v[a] * f[(ia, ib)] * v[b];
                        }
                    }
                    w * acc
                })
                .sum(),
        }
    }

    /// `x^T A y` for full-length vectors.
    fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Coefficient::Sparse(entries) => entries
                .iter()
                .map(|&(p, q, v)| if p == q { v * x[p] * y[p] } else { v * (x[p] * y[q] + x[q] * y[p]) })
                .sum(),
            Coefficient::LowRank { indices, terms } => terms
                .iter()
                .map(|(w, v)| {
                    let vx: f64 = indices.iter().zip(v).map(|(&i, vi)| vi * x[i]).sum();
                    let vy: f64 = indices.iter().zip(v).map(|(&i, vi)| vi * y[i]).sum();
                    w * vx * vy
                })
                .sum(),
        }
    }

    fn max_index(&self) -> Option<usize> {
        match self {
            Coefficient::Sparse(entries) => entries.iter().map(|&(p, q, _)| p.max(q)).max(),
            Coefficient::LowRank { indices, .. } => indices.iter().copied().max(),
        }
    }
}

/// One linear matrix inequality `B + sum_i x_i A_i (+ E W E^T) >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    pub constant: RealMatrix,
    pub terms: Vec<(usize, Coefficient)>,
}

impl LmiBlock {
    pub fn new(constant: RealMatrix) -> Self {
        Self { constant, terms: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn push(&mut self, var: usize, coef: Coefficient) {
        self.terms.push((var, coef));
    }
}

/// Free symmetric matrix variable added on the principal sub-block `indices`
/// of block `block`, with objective contribution `<cost, W>`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixVariable {
    pub block: usize,
    pub indices: Vec<usize>,
    pub cost: RealMatrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicProblem {
    pub objective: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
    pub nonneg: Vec<usize>,
    pub matrix_vars: Vec<MatrixVariable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConicStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    /// Values of the matrix variables, in problem order.
    pub matrix_values: Vec<RealMatrix>,
    /// Slack matrices `S_b` of the blocks (positive definite by construction).
    pub slacks: Vec<RealMatrix>,
    pub objective_value: f64,
    pub dual_objective: f64,
    pub status: ConicStatus,
    /// `|primal - dual| / (1 + |primal| + |dual|)`.
    pub duality_gap: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub iterations: usize,
}

impl ConicSolution {
    /// Largest of the duality gap and the two infeasibilities.
    pub fn merit(&self) -> f64 {
        self.duality_gap.max(self.primal_infeasibility).max(self.dual_infeasibility)
    }

    /// Not infeasible and accurate to `tol`, whether or not the target tolerance was met.
    pub fn accurate_to(&self, tol: f64) -> bool {
        self.status != ConicStatus::Infeasible && self.merit() <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

pub fn solve_sdp(p: &ConicProblem, tol: f64) -> Result<ConicSolution> {
    solve_sdp_with(p, &SolverOptions { tol, ..SolverOptions::default() })
}

pub fn solve_sdp_with(p: &ConicProblem, opts: &SolverOptions) -> Result<ConicSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(format!("solver tolerance must be positive, got {}", opts.tol)));
    }
    validate(p)?;
    Ipm::new(p, opts).run()
}

/// Real symmetric embedding `[[Re H, -Im H], [Im H, Re H]]`.
pub fn embed_hermitian(h: &HermitianMatrix) -> RealMatrix {
    let n = h.dim();
    let m = h.matrix();
    let mut out = RealMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = m[(i, j)];
            out[(i, j)] = z.re;
            out[(i + n, j + n)] = z.re;
            out[(i, j + n)] = -z.im;
            out[(i + n, j)] = z.im;
        }
    }
    out
}

/// Real indices `[i..., i + n...]` representing complex indices `idx` of an
/// `n`-dimensional Hermitian block.
pub fn embedded_indices(n: usize, idx: &[usize]) -> Vec<usize> {
    idx.iter().copied().chain(idx.iter().map(|&i| i + n)).collect()
}

/// Embedded coefficient of the Hermitian matrix with upper-triangle entries
/// `(p, q, h)` (p <= q) inside an `n`-dimensional complex block. Diagonal
/// entries contribute only their real part.
pub fn hermitian_sparse(n: usize, entries: &[(usize, usize, Complex64)]) -> Coefficient {
    let mut out = Vec::with_capacity(4 * entries.len());
    for &(p, q, h) in entries {
        debug_assert!(p <= q);
        if h.re != 0.0 {
            out.push((p, q, h.re));
            out.push((p + n, q + n, h.re));
        }
        if p != q && h.im != 0.0 {
            out.push((p, q + n, -h.im));
            out.push((q, p + n, h.im));
        }
    }
    Coefficient::Sparse(out)
}

/// Embedded coefficient `weight * a a^H`, with `a` supported on the complex
/// indices `idx` of an `n`-dimensional block.
pub fn hermitian_rank_one(n: usize, idx: &[usize], a: &[Complex64], weight: f64) -> Coefficient {
    let v1: Vec<f64> = a.iter().map(|z| z.re).chain(a.iter().map(|z| z.im)).collect();
    let v2: Vec<f64> = a.iter().map(|z| -z.im).chain(a.iter().map(|z| z.re)).collect();
    Coefficient::LowRank { indices: embedded_indices(n, idx), terms: vec![(weight, v1), (weight, v2)] }
}

/// Hermitian matrix represented by the top-left and bottom-left blocks of a
/// real (not necessarily structured) embedding, averaging the redundant copies.
pub fn extract_hermitian(real: &RealMatrix, n: usize) -> HermitianMatrix {
    let m = DMatrix::from_fn(n, n, |i, j| {
        let re = 0.5 * (real[(i, j)] + real[(i + n, j + n)]);
        let im = 0.5 * (real[(i + n, j)] - real[(i, j + n)]);
        Complex64::new(re, im)
    });
    HermitianMatrix::hermitian_part(&m)
}

fn validate(p: &ConicProblem) -> Result<()> {
    let nvars = p.objective.len();
    if p.objective.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("objective has non-finite entries".into()));
    }
    if p.blocks.is_empty() && p.nonneg.is_empty() {
        return Err(Error::InvalidInput("problem has no constraints".into()));
    }
    let mut used = vec![false; nvars];
    for &i in &p.nonneg {
        if i >= nvars {
            return Err(Error::InvalidInput(format!("nonneg index {i} out of range")));
        }
        used[i] = true;
    }
    for (b, block) in p.blocks.iter().enumerate() {
        let n = block.dim();
        let c = &block.constant;
        if c.ncols() != n || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("block {b}: constant must be a finite square matrix")));
        }
        let asym = (c - c.transpose()).amax();
        if asym > 1e-12 * c.amax().max(1.0) {
            return Err(Error::InvalidInput(format!("block {b}: constant is not symmetric")));
        }
        for (var, coef) in &block.terms {
            if *var >= nvars {
                return Err(Error::InvalidInput(format!("block {b}: variable {var} out of range")));
            }
            if coef.max_index().is_some_and(|m| m >= n) {
                return Err(Error::InvalidInput(format!("block {b}: coefficient of variable {var} exceeds block size")));
            }
            if let Coefficient::Sparse(entries) = coef {
                if entries.iter().any(|&(r, c, v)| r > c || !v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "block {b}: sparse coefficient of variable {var} must list finite upper-triangle entries"
                    )));
                }
            }
            if let Coefficient::LowRank { indices, terms } = coef {
                if terms.iter().any(|(w, v)| v.len() != indices.len() || !w.is_finite()) {
                    return Err(Error::InvalidInput(format!("block {b}: malformed low-rank coefficient")));
                }
            }
            used[*var] = true;
        }
    }
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(Error::InvalidInput(format!("variable {i} appears in no constraint")));
    }
    let mut owner = vec![false; p.blocks.len()];
    for mv in &p.matrix_vars {
        if mv.block >= p.blocks.len() || owner[mv.block] {
            return Err(Error::InvalidInput("each block may host at most one matrix variable".into()));
        }
        owner[mv.block] = true;
        let n = p.blocks[mv.block].dim();
        let k = mv.indices.len();
        let mut seen = vec![false; n];
        for &i in &mv.indices {
            if i >= n || seen[i] {
                return Err(Error::InvalidInput("matrix variable indices must be distinct and in range".into()));
            }
            seen[i] = true;
        }
        if mv.cost.nrows() != k || mv.cost.ncols() != k {
            return Err(Error::InvalidInput("matrix variable cost has wrong dimension".into()));
        }
        if (&mv.cost - mv.cost.transpose()).amax() > 1e-12 * mv.cost.amax().max(1.0) {
            return Err(Error::InvalidInput("matrix variable cost is not symmetric".into()));
        }
    }
    Ok(())
}

fn sym(m: &RealMatrix) -> RealMatrix {
    (m + m.transpose()).scale(0.5)
}

fn submatrix(m: &RealMatrix, rows: &[usize], cols: &[usize]) -> RealMatrix {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn scatter_add(m: &mut RealMatrix, idx: &[usize], w: &RealMatrix) {
    for (a, &ia) in idx.iter().enumerate() {
        for (b, &ib) in idx.iter().enumerate() {
            m[(ia, ib)] += w[(a, b)];
        }
    }
}

/// Largest `alpha` with `M + alpha D >= 0` given the Cholesky factor of `M`.
fn max_step(chol: &Cholesky<f64, Dyn>, d: &RealMatrix) -> f64 {
    let l = chol.l();
    let Some(x) = l.solve_lower_triangular(d) else { return 0.0 };
    let Some(y) = l.solve_lower_triangular(&x.transpose()) else { return 0.0 };
    let lmin = SymmetricEigen::new(sym(&y)).eigenvalues.min();
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn lp_max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Per-iteration factorization data of a block with a matrix variable.
struct Elimination {
    idx: Vec<usize>,
    phi: RealMatrix,
    /// `2 / (lambda_p + lambda_q)`.
    kernel: RealMatrix,
    /// `Q_j` for every term of the block, in `terms` order.
    q: Vec<RealMatrix>,
}

struct BlockFactor {
    g: RealMatrix,
    h: RealMatrix,
    s_chol: Cholesky<f64, Dyn>,
    z_chol: Cholesky<f64, Dyn>,
    elim: Option<Elimination>,
}

struct Direction {
    dx: Vec<f64>,
    dz: Vec<f64>,
    ds: Vec<RealMatrix>,
    dzm: Vec<RealMatrix>,
    dw: Vec<Option<RealMatrix>>,
}

struct Ipm<'a> {
    p: &'a ConicProblem,
    opts: SolverOptions,
    nvars: usize,
    is_nonneg: Vec<bool>,
    block_mv: Vec<Option<usize>>,
    x: Vec<f64>,
    z: Vec<f64>,
    s: Vec<RealMatrix>,
    zm: Vec<RealMatrix>,
    w: Vec<Option<RealMatrix>>,
    norm_b: f64,
    norm_c: f64,
}

struct Residuals {
    rp: Vec<RealMatrix>,
    rd: Vec<f64>,
    rdw: Vec<Option<RealMatrix>>,
    pobj: f64,
    dobj: f64,
    mu: f64,
    gap: f64,
    pinf: f64,
    dinf: f64,
}

impl<'a> Ipm<'a> {
    fn new(p: &'a ConicProblem, opts: &SolverOptions) -> Self {
        let nvars = p.objective.len();
        let mut is_nonneg = vec![false; nvars];
        for &i in &p.nonneg {
            is_nonneg[i] = true;
        }
        let mut block_mv = vec![None; p.blocks.len()];
        for (k, mv) in p.matrix_vars.iter().enumerate() {
            block_mv[mv.block] = Some(k);
        }
        let coef_norm = |c: &Coefficient, n: usize| {
            let mut m = RealMatrix::zeros(n, n);
            c.add_to(&mut m, 1.0);
            m.norm()
        };
        let mut max_a = vec![0.0_f64; nvars];
        for b in &p.blocks {
            for (v, c) in &b.terms {
                max_a[*v] = max_a[*v].max(coef_norm(c, b.dim()));
            }
        }
        let mut s = Vec::new();
        let mut zm = Vec::new();
        let mut w = Vec::new();
        for (bi, b) in p.blocks.iter().enumerate() {
            let n = b.dim();
            let rn = (n as f64).sqrt();
            let a_max = b.terms.iter().map(|(v, _)| max_a[*v]).fold(0.0, f64::max);
            let xi = 10.0_f64.max(rn).max(b.constant.norm()).max(a_max);
            let c_scale = b
                .terms
                .iter()
                .map(|(v, _)| rn * (1.0 + p.objective[*v].abs()) / (1.0 + max_a[*v]))
                .fold(0.0, f64::max);
            let mut eta = 10.0_f64.max(rn).max(c_scale);
            if let Some(k) = block_mv[bi] {
                eta = eta.max(p.matrix_vars[k].cost.norm());
                w.push(Some(RealMatrix::zeros(p.matrix_vars[k].indices.len(), p.matrix_vars[k].indices.len())));
            } else {
                w.push(None);
            }
            s.push(RealMatrix::identity(n, n).scale(xi));
            zm.push(RealMatrix::identity(n, n).scale(eta));
        }
        let mut x = vec![0.0; nvars];
        let mut z = vec![0.0; nvars];
        for &i in &p.nonneg {
            x[i] = 1.0;
            z[i] = 1.0_f64.max(p.objective[i].abs());
        }
        let norm_b = p.blocks.iter().map(|b| b.constant.norm_squared()).sum::<f64>().sqrt();
        let norm_c = (p.objective.iter().map(|c| c * c).sum::<f64>()
            + p.matrix_vars.iter().map(|m| m.cost.norm_squared()).sum::<f64>())
        .sqrt();
        Self {
            p,
            opts: *opts,
            nvars,
            is_nonneg,
            block_mv,
            x,
            z,
            s,
            zm,
            w,
            norm_b,
            norm_c,
        }
    }

    fn nu(&self) -> f64 {
        (self.p.blocks.iter().map(|b| b.dim()).sum::<usize>() + self.p.nonneg.len()) as f64
    }

    fn residuals(&self) -> Residuals {
        let p = self.p;
        let mut rp = Vec::with_capacity(p.blocks.len());
        let mut rd: Vec<f64> = p.objective.clone();
        for i in 0..self.nvars {
            if self.is_nonneg[i] {
                rd[i] -= self.z[i];
            }
        }
        let mut dobj = 0.0;
        let mut comp = 0.0;
        for (bi, b) in p.blocks.iter().enumerate() {
            let mut r = b.constant.clone();
            for (v, c) in &b.terms {
                c.add_to(&mut r, self.x[*v]);
                rd[*v] -= c.trace_with(&self.zm[bi]);
            }
            if let (Some(k), Some(w)) = (self.block_mv[bi], &self.w[bi]) {
                scatter_add(&mut r, &p.matrix_vars[k].indices, w);
            }
            r -= &self.s[bi];
            rp.push(r);
            dobj -= b.constant.dot(&self.zm[bi]);
            comp += self.s[bi].dot(&self.zm[bi]);
        }
        let mut rdw = vec![None; p.blocks.len()];
        let mut pobj: f64 = p.objective.iter().zip(&self.x).map(|(c, x)| c * x).sum();
        for mv in &p.matrix_vars {
            let zi = submatrix(&self.zm[mv.block], &mv.indices, &mv.indices);
            rdw[mv.block] = Some(&mv.cost - zi);
            if let Some(w) = &self.w[mv.block] {
                pobj += mv.cost.dot(w);
            }
        }
        for &i in &p.nonneg {
            comp += self.x[i] * self.z[i];
        }
        let pinf = rp.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt() / (1.0 + self.norm_b);
        let dinf = (rd.iter().map(|r| r * r).sum::<f64>()
            + rdw.iter().flatten().map(|r| r.norm_squared()).sum::<f64>())
        .sqrt()
            / (1.0 + self.norm_c);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        Residuals { rp, rd, rdw, pobj, dobj, mu: comp / self.nu(), gap, pinf, dinf }
    }

    fn factor_blocks(&self) -> Result<Vec<BlockFactor>> {
        let mut out = Vec::with_capacity(self.p.blocks.len());
        for (bi, b) in self.p.blocks.iter().enumerate() {
            let s_chol = Cholesky::new(self.s[bi].clone()).ok_or_else(|| Error::Conic("slack lost definiteness".into()))?;
            let z_chol =
                Cholesky::new(self.zm[bi].clone()).ok_or_else(|| Error::Conic("dual matrix lost definiteness".into()))?;
            let h = sym(&s_chol.inverse());
            let g = self.zm[bi].clone();
            let elim = match self.block_mv[bi] {
                Some(k) => Some(self.eliminate(&self.p.matrix_vars[k].indices, b, &g, &h)?),
                None => None,
            };
            out.push(BlockFactor { g, h, s_chol, z_chol, elim });
        }
        Ok(out)
    }

    fn eliminate(&self, idx: &[usize], b: &LmiBlock, g: &RealMatrix, h: &RealMatrix) -> Result<Elimination> {
        let n = b.dim();
        let all: Vec<usize> = (0..n).collect();
        let g_ii = submatrix(g, idx, idx);
        let h_ii = submatrix(h, idx, idx);
        let c = Cholesky::new(g_ii).ok_or_else(|| Error::Conic("dual sub-block lost definiteness".into()))?;
        let cl = c.l();
        let t = cl.solve_lower_triangular(&h_ii).ok_or_else(|| Error::Conic("singular factor".into()))?;
        let t = cl.solve_lower_triangular(&t.transpose()).ok_or_else(|| Error::Conic("singular factor".into()))?;
        let eig = SymmetricEigen::new(sym(&t));
        // phi = C^{-T} V
        let phi = cl
            .transpose()
            .solve_upper_triangular(&eig.eigenvectors)
            .ok_or_else(|| Error::Conic("singular factor".into()))?;
        let lam = &eig.eigenvalues;
        let m = idx.len();
        let kernel = DMatrix::from_fn(m, m, |p, q| 2.0 / (lam[p] + lam[q]));
        let lg = phi.transpose() * submatrix(g, idx, &all);
        let lh = phi.transpose() * submatrix(h, idx, &all);
        let q = b
            .terms
            .iter()
            .map(|(_, coef)| {
                let mut out = RealMatrix::zeros(m, m);
                match coef {
                    Coefficient::Sparse(entries) => {
                        for &(p, q, v) in entries {
                            out.ger(v, &lg.column(p), &lh.column(q), 1.0);
                            if p != q {
                                out.ger(v, &lg.column(q), &lh.column(p), 1.0);
                            }
                        }
                    }
                    Coefficient::LowRank { indices, terms } => {
                        for (w, v) in terms {
                            let mut gv = nalgebra::DVector::zeros(m);
                            let mut hv = nalgebra::DVector::zeros(m);
                            for (a, &ia) in indices.iter().enumerate() {
                                gv.axpy(v[a], &lg.column(ia), 1.0);
                                hv.axpy(v[a], &lh.column(ia), 1.0);
                            }
                            out.ger(*w, &gv, &hv, 1.0);
                        }
                    }
                }
                sym(&out)
            })
            .collect();
        Ok(Elimination { idx: idx.to_vec(), phi, kernel, q })
    }

    /// Schur complement of the Newton system in the scalar variables.
    fn schur(&self, fac: &[BlockFactor]) -> RealMatrix {
        let nv = self.nvars;
        let mut m = RealMatrix::zeros(nv, nv);
        for (bi, b) in self.p.blocks.iter().enumerate() {
            let f = &fac[bi];
            let n = b.dim();
            // Low-rank terms: products G v and H v.
            struct Lr<'c> {
                var: usize,
                w: f64,
                idx: &'c [usize],
                v: &'c [f64],
                gv: Vec<f64>,
                hv: Vec<f64>,
            }
            let mut lr: Vec<Lr> = Vec::new();
            let mut sparse: Vec<(usize, &Vec<(usize, usize, f64)>)> = Vec::new();
            for (var, coef) in &b.terms {
                match coef {
                    Coefficient::Sparse(e) => sparse.push((*var, e)),
                    Coefficient::LowRank { indices, terms } => {
                        for (w, v) in terms {
                            let mut gv = vec![0.0; n];
                            let mut hv = vec![0.0; n];
                            for (a, &ia) in indices.iter().enumerate() {
                                let va = v[a];
                                for r in 0..n {
                                    gv[r] += f.g[(r, ia)] * va;
                                    hv[r] += f.h[(r, ia)] * va;
                                }
                            }
                            lr.push(Lr { var: *var, w: *w, idx: indices, v, gv, hv });
                        }
                    }
                }
            }
            for (r, tr) in lr.iter().enumerate() {
                for ts in &lr[..=r] {
                    let pg: f64 = tr.idx.iter().zip(tr.v).map(|(&i, vi)| vi * ts.gv[i]).sum();
                    let qh: f64 = tr.idx.iter().zip(tr.v).map(|(&i, vi)| vi * ts.hv[i]).sum();
                    let val = tr.w * ts.w * pg * qh;
                    m[(tr.var, ts.var)] += val;
                    if !std::ptr::eq(tr, ts) {
                        m[(ts.var, tr.var)] += val;
                    }
                }
            }
            for &(i, ei) in &sparse {
                let ci = Coefficient::Sparse(ei.clone());
                for t in &lr {
                    let val = t.w * ci.bilinear(&t.hv, &t.gv);
                    m[(i, t.var)] += val;
                    m[(t.var, i)] += val;
                }
            }
            for (jpos, &(j, ej)) in sparse.iter().enumerate() {
                let mut fj = RealMatrix::zeros(n, n);
                for &(p, q, v) in ej.iter() {
                    fj.ger(v, &f.g.column(p), &f.h.row(q).transpose(), 1.0);
                    if p != q {
                        fj.ger(v, &f.g.column(q), &f.h.row(p).transpose(), 1.0);
                    }
                }
                for &(i, ei) in &sparse[jpos..] {
                    let val = Coefficient::Sparse(ei.clone()).trace_with(&fj);
                    m[(i, j)] += val;
                    if jpos < sparse.len() && !std::ptr::eq(ei, ej) {
                        m[(j, i)] += val;
                    }
                }
            }
            if let Some(el) = &f.elim {
                let mm = el.idx.len();
                let rows = RealMatrix::from_fn(b.terms.len(), mm * mm, |t, pq| {
                    let (p, q) = (pq % mm, pq / mm);
                    el.q[t][(p, q)] * el.kernel[(p, q)].sqrt()
                });
                let gram = &rows * rows.transpose();
                for (ti, (vi, _)) in b.terms.iter().enumerate() {
                    for (tj, (vj, _)) in b.terms.iter().enumerate() {
                        m[(*vi, *vj)] -= gram[(ti, tj)];
                    }
                }
            }
        }
        for &i in &self.p.nonneg {
            m[(i, i)] += self.z[i] / self.x[i];
        }
        m
    }

    fn direction(
        &self,
        fac: &[BlockFactor],
        schur: &SchurSolver,
        res: &Residuals,
        rc: &[RealMatrix],
        rc_lp: &[f64],
    ) -> Result<Direction> {
        let p = self.p;
        let mut rhs: Vec<f64> = (0..self.nvars).map(|i| rc_lp[i] - res.rd[i]).collect();
        let mut e0s = Vec::with_capacity(p.blocks.len());
        let mut rtil: Vec<Option<RealMatrix>> = Vec::with_capacity(p.blocks.len());
        for (bi, b) in p.blocks.iter().enumerate() {
            let f = &fac[bi];
            let e0 = &rc[bi] - sym(&(&f.g * &res.rp[bi] * &f.h));
            for (v, c) in &b.terms {
                rhs[*v] += c.trace_with(&e0);
            }
            if let Some(el) = &f.elim {
                let rw = submatrix(&e0, &el.idx, &el.idx) - res.rdw[bi].as_ref().expect("matrix variable residual");
                let rt = el.phi.transpose() * rw * &el.phi;
                let scaled = rt.component_mul(&el.kernel);
                for (t, (v, _)) in b.terms.iter().enumerate() {
                    rhs[*v] -= el.q[t].dot(&scaled);
                }
                rtil.push(Some(rt));
            } else {
                rtil.push(None);
            }
            e0s.push(e0);
        }
        let dx = schur.solve(&rhs)?;
        let mut ds = Vec::with_capacity(p.blocks.len());
        let mut dzm = Vec::with_capacity(p.blocks.len());
        let mut dw = Vec::with_capacity(p.blocks.len());
        for (bi, b) in p.blocks.iter().enumerate() {
            let f = &fac[bi];
            let mut d = res.rp[bi].clone();
            for (v, c) in &b.terms {
                c.add_to(&mut d, dx[*v]);
            }
            if let (Some(el), Some(rt)) = (&f.elim, &rtil[bi]) {
                let mut om = rt.clone();
                for (t, (v, _)) in b.terms.iter().enumerate() {
                    om -= el.q[t].scale(dx[*v]);
                }
                let om = om.component_mul(&el.kernel);
                let dwk = sym(&(&el.phi * om * el.phi.transpose()));
                scatter_add(&mut d, &el.idx, &dwk);
                dw.push(Some(dwk));
            } else {
                dw.push(None);
            }
            let dz = &rc[bi] - sym(&(&f.g * &d * &f.h));
            ds.push(d);
            dzm.push(dz);
        }
        let mut dz = vec![0.0; self.nvars];
        for &i in &p.nonneg {
            dz[i] = rc_lp[i] - self.z[i] / self.x[i] * dx[i];
        }
        Ok(Direction { dx, dz, ds, dzm, dw })
    }

    fn step_lengths(&self, fac: &[BlockFactor], d: &Direction) -> (f64, f64) {
        let mut ap = f64::INFINITY;
        let mut ad = f64::INFINITY;
        for (bi, f) in fac.iter().enumerate() {
            ap = ap.min(max_step(&f.s_chol, &d.ds[bi]));
            ad = ad.min(max_step(&f.z_chol, &d.dzm[bi]));
        }
        let xs: Vec<f64> = self.p.nonneg.iter().map(|&i| self.x[i]).collect();
        let dxs: Vec<f64> = self.p.nonneg.iter().map(|&i| d.dx[i]).collect();
        let zs: Vec<f64> = self.p.nonneg.iter().map(|&i| self.z[i]).collect();
        let dzs: Vec<f64> = self.p.nonneg.iter().map(|&i| d.dz[i]).collect();
        ap = ap.min(lp_max_step(&xs, &dxs));
        ad = ad.min(lp_max_step(&zs, &dzs));
        (ap, ad)
    }

    fn run(mut self) -> Result<ConicSolution> {
        let tol = self.opts.tol;
        let nu = self.nu();
        let mut best: Option<(f64, ConicSolution)> = None;
        for iter in 0..self.opts.max_iter {
            let res = self.residuals();
            let merit = res.gap.max(res.pinf).max(res.dinf);
            let converged = res.gap <= tol && res.pinf <= tol && res.dinf <= tol;
            if best.as_ref().is_none_or(|(m, _)| merit < *m) || converged {
                best = Some((merit, self.snapshot(&res, iter, ConicStatus::MaxIter)));
            }
            if converged {
                let mut sol = best.unwrap().1;
                sol.status = ConicStatus::Optimal;
                return Ok(sol);
            }
            if self.certifies_infeasibility(&res) {
                return Ok(self.snapshot(&res, iter, ConicStatus::Infeasible));
            }

            let fac = match self.factor_blocks() {
                Ok(f) => f,
                Err(_) => break,
            };
            let schur = match SchurSolver::new(self.schur(&fac)) {
                Ok(s) => s,
                Err(_) => break,
            };

            // Predictor.
            let rc_a: Vec<RealMatrix> = fac.iter().map(|f| -&f.g).collect();
            let rc_lp_a: Vec<f64> = (0..self.nvars).map(|i| if self.is_nonneg[i] { -self.z[i] } else { 0.0 }).collect();
            let Ok(da) = self.direction(&fac, &schur, &res, &rc_a, &rc_lp_a) else { break };
            let (ap_a, ad_a) = self.step_lengths(&fac, &da);
            let (ap_a, ad_a) = (ap_a.min(1.0), ad_a.min(1.0));
            let mut comp_a = 0.0;
            for bi in 0..self.p.blocks.len() {
                let s = &self.s[bi] + da.ds[bi].scale(ap_a);
                let z = &self.zm[bi] + da.dzm[bi].scale(ad_a);
                comp_a += s.dot(&z);
            }
            for &i in &self.p.nonneg {
                comp_a += (self.x[i] + ap_a * da.dx[i]) * (self.z[i] + ad_a * da.dz[i]);
            }
            let mu_a = (comp_a / nu).max(0.0);
            let sigma = if res.mu > 0.0 { (mu_a / res.mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };

            // Corrector.
            let smu = sigma * res.mu;
            let rc: Vec<RealMatrix> = fac
                .iter()
                .enumerate()
                .map(|(bi, f)| f.h.scale(smu) - &f.g - sym(&(&da.dzm[bi] * &da.ds[bi] * &f.h)))
                .collect();
            let rc_lp: Vec<f64> = (0..self.nvars)
                .map(|i| {
                    if self.is_nonneg[i] {
                        (smu - self.x[i] * self.z[i] - da.dx[i] * da.dz[i]) / self.x[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            let Ok(d) = self.direction(&fac, &schur, &res, &rc, &rc_lp) else { break };
            let (ap, ad) = self.step_lengths(&fac, &d);
            let gamma = 0.9 + 0.09 * ap_a.min(ad_a);
            let ap = (gamma * ap).min(1.0);
            let ad = (gamma * ad).min(1.0);

            for i in 0..self.nvars {
                self.x[i] += ap * d.dx[i];
                self.z[i] += ad * d.dz[i];
            }
            for bi in 0..self.p.blocks.len() {
                self.s[bi] = sym(&(&self.s[bi] + d.ds[bi].scale(ap)));
                self.zm[bi] = sym(&(&self.zm[bi] + d.dzm[bi].scale(ad)));
                if let (Some(w), Some(dw)) = (&mut self.w[bi], &d.dw[bi]) {
                    *w += dw.scale(ap);
                }
            }
            if ap < 1e-12 && ad < 1e-12 {
                break;
            }
        }
        let res = self.residuals();
        let merit = res.gap.max(res.pinf).max(res.dinf);
        if best.as_ref().is_none_or(|(m, _)| merit < *m) {
            best = Some((merit, self.snapshot(&res, self.opts.max_iter, ConicStatus::MaxIter)));
        }
        Ok(best.expect("at least one iterate").1)
    }

    /// Farkas-type test: a large dual ray with positive dual objective and
    /// vanishing normalized dual residual proves the LMI system infeasible.
    fn certifies_infeasibility(&self, res: &Residuals) -> bool {
        let tau: f64 = self.zm.iter().map(|z| z.trace()).sum::<f64>()
            + self.p.nonneg.iter().map(|&i| self.z[i]).sum::<f64>();
        if tau < 1e8 * (1.0 + self.norm_c) {
            return false;
        }
        let mut ray_res = vec![0.0; self.nvars];
        for (bi, b) in self.p.blocks.iter().enumerate() {
            for (v, c) in &b.terms {
                ray_res[*v] += c.trace_with(&self.zm[bi]);
            }
        }
        for &i in &self.p.nonneg {
            ray_res[i] += self.z[i];
        }
        let mut r2: f64 = ray_res.iter().map(|r| r * r).sum();
        for mv in &self.p.matrix_vars {
            r2 += submatrix(&self.zm[mv.block], &mv.indices, &mv.indices).norm_squared();
        }
        res.dobj / tau > 1e-8 && r2.sqrt() / tau < 1e-6
    }

    fn snapshot(&self, res: &Residuals, iterations: usize, status: ConicStatus) -> ConicSolution {
        ConicSolution {
            x: self.x.clone(),
            matrix_values: self.p.matrix_vars.iter().map(|mv| self.w[mv.block].clone().unwrap_or_default()).collect(),
            slacks: self.s.clone(),
            objective_value: res.pobj,
            dual_objective: res.dobj,
            status,
            duality_gap: res.gap,
            primal_infeasibility: res.pinf,
            dual_infeasibility: res.dinf,
            iterations,
        }
    }
}

enum SchurSolver {
    Chol(Cholesky<f64, Dyn>),
    Lu(nalgebra::LU<f64, Dyn, Dyn>),
}

impl SchurSolver {
    fn new(m: RealMatrix) -> Result<Self> {
        let m = sym(&m);
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(Self::Chol(c));
        }
        let n = m.nrows();
        let reg = 1e-13 * (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut r = m.clone();
        for i in 0..n {
            r[(i, i)] += reg;
        }
        if let Some(c) = Cholesky::new(r) {
            return Ok(Self::Chol(c));
        }
        let lu = m.lu();
        if lu.is_invertible() {
            Ok(Self::Lu(lu))
        } else {
            Err(Error::Conic("singular Newton system".into()))
        }
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let b = nalgebra::DVector::from_column_slice(rhs);
        let x = match self {
            Self::Chol(c) => c.solve(&b),
            Self::Lu(l) => l.solve(&b).ok_or_else(|| Error::Conic("singular Newton system".into()))?,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conic("non-finite Newton direction".into()));
        }
        Ok(x.iter().copied().collect())
    }
}
