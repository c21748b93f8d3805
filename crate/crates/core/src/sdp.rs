//! Dense block-diagonal semidefinite programming.
//!
//! Problems are stated in primal standard form with optional free scalars:
//!
//! ```text
//! minimize    Σ_b <C_b, X_b> + c_fᵀ u
//! subject to  Σ_b <A_{i,b}, X_b> + (F u)_i = b_i,   i = 1..k
//!             X_b ⪰ 0,  u free
//! ```
//!
//! with dual `maximize bᵀy  s.t.  C_b - Σ_i y_i A_{i,b} = S_b ⪰ 0,  Fᵀy = c_f`.
//!
//! The solver is a primal-dual interior point method on the homogeneous
//! self-dual embedding, Nesterov-Todd scaling, Mehrotra predictor-corrector.
//! The Newton system is reduced to the Schur complement in `y` bordered by
//! the free-variable columns; the bordered system is solved through a
//! regularized block factorization followed by iterative refinement.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper-triangular triplets of a symmetric matrix; `(i, j, v)` with `i <= j`
/// stands for both `(i, j)` and `(j, i)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymSparse {
    entries: Vec<(usize, usize, f64)>,
}

impl SymSparse {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate `v` into entry `(i, j)` (and its mirror).
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((i, j, v));
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merge duplicate coordinates and drop zeros.
    pub fn compact(&mut self) {
        self.entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(i, j, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        self.entries = out;
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut s = Self::new();
        for j in 0..m.ncols() {
            for i in 0..=j {
                let v = m[(i, j)];
                if v != 0.0 {
                    s.push(i, j, v);
                }
            }
        }
        s
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        self.add_to(&mut m, 1.0);
        m
    }

    fn add_to(&self, m: &mut DMatrix<f64>, scale: f64) {
        for &(i, j, v) in &self.entries {
            m[(i, j)] += scale * v;
            if i != j {
                m[(j, i)] += scale * v;
            }
        }
    }

    /// Frobenius inner product with a dense symmetric matrix.
    fn dot(&self, m: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| if i == j { v * m[(i, i)] } else { 2.0 * v * m[(i, j)] })
            .sum()
    }

    fn norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| if i == j { v * v } else { 2.0 * v * v })
            .sum()
    }

    fn scale(&mut self, s: f64) {
        for e in &mut self.entries {
            e.2 *= s;
        }
    }
}

/// One equality constraint `Σ_b <A_b, X_b> + Σ f_k u_k = rhs`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SdpConstraint {
    pub blocks: Vec<(usize, SymSparse)>,
    pub free: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdpProblem {
    block_dims: Vec<usize>,
    objective: Vec<SymSparse>,
    free_objective: Vec<f64>,
    constraints: Vec<SdpConstraint>,
}

impl SdpProblem {
    pub fn new(block_dims: Vec<usize>, num_free: usize) -> Self {
        let objective = vec![SymSparse::new(); block_dims.len()];
        SdpProblem {
            block_dims,
            objective,
            free_objective: vec![0.0; num_free],
            constraints: Vec::new(),
        }
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn num_free(&self) -> usize {
        self.free_objective.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraints(&self) -> &[SdpConstraint] {
        &self.constraints
    }

    pub fn objective(&self) -> &[SymSparse] {
        &self.objective
    }

    pub fn free_objective(&self) -> &[f64] {
        &self.free_objective
    }

    pub fn set_objective_block(&mut self, block: usize, c: SymSparse) {
        self.objective[block] = c;
    }

    pub fn set_free_objective(&mut self, k: usize, c: f64) {
        self.free_objective[k] = c;
    }

    pub fn add_constraint(&mut self, c: SdpConstraint) -> usize {
        self.constraints.push(c);
        self.constraints.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.block_dims.len() {
            return Err(Error::DimensionMismatch {
                expected: self.block_dims.len(),
                found: self.objective.len(),
            });
        }
        let check_block = |b: usize, s: &SymSparse| -> Result<()> {
            let n = *self.block_dims.get(b).ok_or(Error::DimensionMismatch {
                expected: self.block_dims.len(),
                found: b + 1,
            })?;
            if let Some(&(_, j, _)) = s.entries.iter().find(|e| e.1 >= n) {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: j + 1,
                });
            }
            Ok(())
        };
        for (b, c) in self.objective.iter().enumerate() {
            check_block(b, c)?;
        }
        for con in &self.constraints {
            for (b, s) in &con.blocks {
                check_block(*b, s)?;
            }
            if let Some(&(k, _)) = con.free.iter().find(|f| f.0 >= self.num_free()) {
                return Err(Error::DimensionMismatch {
                    expected: self.num_free(),
                    found: k + 1,
                });
            }
        }
        Ok(())
    }

    /// `A(X) + F u`.
    pub fn apply(&self, x: &[DMatrix<f64>], u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.constraints.len(),
            self.constraints.iter().map(|c| {
                c.blocks.iter().map(|(b, s)| s.dot(&x[*b])).sum::<f64>()
                    + c.free.iter().map(|&(k, f)| f * u[k]).sum::<f64>()
            }),
        )
    }

    /// `Σ_i y_i A_{i,b}` for every block.
    pub fn adjoint(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> =
            self.block_dims.iter().map(|&n| DMatrix::zeros(n, n)).collect();
        for (c, &yi) in self.constraints.iter().zip(y) {
            if yi == 0.0 {
                continue;
            }
            for (b, s) in &c.blocks {
                s.add_to(&mut out[*b], yi);
            }
        }
        out
    }

    /// `Fᵀ y`.
    pub fn adjoint_free(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_free()];
        for (c, &yi) in self.constraints.iter().zip(y) {
            for &(k, f) in &c.free {
                out[k] += f * yi;
            }
        }
        out
    }

    pub fn rhs(&self) -> DVector<f64> {
        DVector::from_iterator(self.constraints.len(), self.constraints.iter().map(|c| c.rhs))
    }

    pub fn primal_objective(&self, x: &[DMatrix<f64>], u: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, xb)| c.dot(xb)).sum::<f64>()
            + self.free_objective.iter().zip(u).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Sparse text dump, one nonzero per line:
    ///
    /// ```text
    /// blocks <n_1> ... <n_B>
    /// free <count>
    /// constraints <k>
    /// c <block> <i> <j> <value>        objective entry (upper triangle)
    /// cf <index> <value>               free objective
    /// a <con> <block> <i> <j> <value>  constraint entry (upper triangle)
    /// af <con> <index> <value>         free coefficient
    /// b <con> <value>                  right-hand side
    /// ```
    ///
    /// Indices are zero-based; values are printed with 17 significant digits.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let dims: Vec<String> = self.block_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "blocks {}", dims.join(" "));
        let _ = writeln!(s, "free {}", self.num_free());
        let _ = writeln!(s, "constraints {}", self.constraints.len());
        for (b, c) in self.objective.iter().enumerate() {
            for &(i, j, v) in c.entries() {
                let _ = writeln!(s, "c {b} {i} {j} {v:.16e}");
            }
        }
        for (k, v) in self.free_objective.iter().enumerate() {
            if *v != 0.0 {
                let _ = writeln!(s, "cf {k} {v:.16e}");
            }
        }
        for (ci, con) in self.constraints.iter().enumerate() {
            for (b, sp) in &con.blocks {
                for &(i, j, v) in sp.entries() {
                    let _ = writeln!(s, "a {ci} {b} {i} {j} {v:.16e}");
                }
            }
            for &(k, v) in &con.free {
                let _ = writeln!(s, "af {ci} {k} {v:.16e}");
            }
            let _ = writeln!(s, "b {ci} {:.16e}", con.rhs);
        }
        s
    }

    /// Inverse of [`SdpProblem::dump`].
    pub fn parse_dump(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::InvalidInput(format!("malformed dump line: {line}"));
        let mut prob: Option<SdpProblem> = None;
        let mut num_free = 0usize;
        let mut dims: Vec<usize> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |k: usize| -> Result<usize> {
                tok.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| bad(line))
            };
            let val = |k: usize| -> Result<f64> {
                tok.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| bad(line))
            };
            match tok[0] {
                "blocks" => {
                    dims = tok[1..]
                        .iter()
                        .map(|t| t.parse().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?
                }
                "free" => num_free = num(1)?,
                "constraints" => {
                    let mut p = SdpProblem::new(dims.clone(), num_free);
                    p.constraints = vec![SdpConstraint::default(); num(1)?];
                    prob = Some(p);
                }
                tag => {
                    let p = prob.as_mut().ok_or_else(|| bad(line))?;
                    match tag {
                        "c" => p.objective[num(1)?].push(num(2)?, num(3)?, val(4)?),
                        "cf" => p.free_objective[num(1)?] = val(2)?,
                        "a" => {
                            let con = p.constraints.get_mut(num(1)?).ok_or_else(|| bad(line))?;
                            let b = num(2)?;
                            match con.blocks.iter_mut().find(|e| e.0 == b) {
                                Some(e) => e.1.push(num(3)?, num(4)?, val(5)?),
                                None => {
                                    let mut s = SymSparse::new();
                                    s.push(num(3)?, num(4)?, val(5)?);
                                    con.blocks.push((b, s));
                                }
                            }
                        }
                        "af" => p
                            .constraints
                            .get_mut(num(1)?)
                            .ok_or_else(|| bad(line))?
                            .free
                            .push((num(2)?, val(3)?)),
                        "b" => p.constraints.get_mut(num(1)?).ok_or_else(|| bad(line))?.rhs = val(2)?,
                        _ => return Err(bad(line)),
                    }
                }
            }
        }
        let p = prob.ok_or_else(|| Error::InvalidInput("dump has no constraints header".into()))?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    Stalled,
}

#[derive(Clone, Copy, Debug)]
pub struct SdpOptions {
    pub tol_feas: f64,
    pub tol_gap: f64,
    /// Relative PSD tolerance; the absolute bound is `tol_psd * (1 + ‖X‖_F)`.
    pub tol_psd: f64,
    pub max_iter: usize,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            tol_feas: 1e-8,
            tol_gap: 1e-8,
            tol_psd: 1e-8,
            max_iter: 200,
        }
    }
}

/// Solver output. For `Optimal`, `x`/`free`/`y`/`s` are the primal-dual
/// pair. For `PrimalInfeasible`, `y` is an improving ray (`Σ y_i A_i ⪯ 0`,
/// `Fᵀy = 0`, `bᵀy = 1`) and `s = -Σ y_i A_i`. For `DualInfeasible`,
/// `(x, free)` is a primal ray with `A(X) + F u = 0`, `<C,X> + c_fᵀu = -1`.
/// For `Stalled`, the fields hold the best iterate seen.
#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<DMatrix<f64>>,
    pub free: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<DMatrix<f64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: usize,
}

impl SdpSolution {
    pub fn min_eig_x(&self) -> f64 {
        self.x.iter().map(min_eig).fold(f64::INFINITY, f64::min)
    }

    pub fn min_eig_s(&self) -> f64 {
        self.s.iter().map(min_eig).fold(f64::INFINITY, f64::min)
    }
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Relative residuals of a candidate primal-dual pair, computed from the
/// problem data alone.
#[derive(Clone, Copy, Debug)]
pub struct KktReport {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub min_eig_x: f64,
    pub min_eig_s: f64,
}

pub fn kkt_report(prob: &SdpProblem, sol: &SdpSolution) -> KktReport {
    let b = prob.rhs();
    let r_p = prob.apply(&sol.x, &sol.free) - &b;
    let aty = prob.adjoint(&sol.y);
    let mut dual_sq = 0.0;
    let mut c_sq = 0.0;
    for (k, (c, s)) in prob.objective.iter().zip(&sol.s).enumerate() {
        let cd = c.to_dense(prob.block_dims[k]);
        c_sq += cd.norm_squared();
        dual_sq += (&cd - &aty[k] - s).norm_squared();
    }
    let fty = prob.adjoint_free(&sol.y);
    for (a, c) in fty.iter().zip(&prob.free_objective) {
        dual_sq += (a - c).powi(2);
        c_sq += c * c;
    }
    let pobj = prob.primal_objective(&sol.x, &sol.free);
    let dobj = b.dot(&DVector::from_column_slice(&sol.y));
    KktReport {
        primal: r_p.norm() / (1.0 + b.norm()),
        dual: dual_sq.sqrt() / (1.0 + c_sq.sqrt()),
        gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
        min_eig_x: sol.min_eig_x(),
        min_eig_s: sol.min_eig_s(),
    }
}

/// Check a primal infeasibility ray against the data: `Σ y_i A_i ⪯ tol`,
/// `‖Fᵀy‖ ≤ tol`, `bᵀy > 0`. The ray is normalized to `bᵀy = 1` first.
pub fn verify_infeasibility_ray(prob: &SdpProblem, y: &[f64], tol: f64) -> bool {
    let by: f64 = prob.constraints.iter().zip(y).map(|(c, yi)| c.rhs * yi).sum();
    if !(by > 0.0) || !by.is_finite() {
        return false;
    }
    let yn: Vec<f64> = y.iter().map(|v| v / by).collect();
    let scale = 1.0 + yn.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let aty = prob.adjoint(&yn);
    let psd_ok = aty.iter().all(|m| -min_eig(&(-m)) <= tol * scale);
    let free_ok = prob.adjoint_free(&yn).iter().all(|v| v.abs() <= tol * scale);
    psd_ok && free_ok
}

/// Least-norm correction of `x` onto `{X : A(X) + F u = b}` with `u` held
/// fixed (Frobenius norm over all blocks).
pub fn project_affine(prob: &SdpProblem, x: &[DMatrix<f64>], u: &[f64]) -> Vec<DMatrix<f64>> {
    AffineProjector::new(prob).project(x, u)
}

/// [`project_affine`] with the Gram pseudo-inverse factored once, for
/// repeated projections onto the same constraints.
pub struct AffineProjector<'a> {
    prob: &'a SdpProblem,
    /// Pseudo-inverse of `A Aᵀ`; `None` when there are no constraints.
    g_pinv: Option<DMatrix<f64>>,
}

impl<'a> AffineProjector<'a> {
    pub fn new(prob: &'a SdpProblem) -> Self {
        let k = prob.num_constraints();
        if k == 0 {
            return AffineProjector { prob, g_pinv: None };
        }
        let offsets: Vec<usize> = prob
            .block_dims
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n * n;
                Some(o)
            })
            .collect();
        let total: usize = prob.block_dims.iter().map(|n| n * n).sum();
        let mut v: DMatrix<f64> = DMatrix::zeros(k, total);
        for (i, c) in prob.constraints.iter().enumerate() {
            for (b, s) in &c.blocks {
                let n = prob.block_dims[*b];
                for &(p, q, val) in s.entries() {
                    v[(i, offsets[*b] + p * n + q)] += val;
                    if p != q {
                        v[(i, offsets[*b] + q * n + p)] += val;
                    }
                }
            }
        }
        let g: DMatrix<f64> = &v * v.transpose();
        let svd = g.svd(true, true);
        let tol = 1e-13 * svd.singular_values.max();
        AffineProjector {
            prob,
            g_pinv: svd.pseudo_inverse(tol).ok(),
        }
    }

    pub fn project(&self, x: &[DMatrix<f64>], u: &[f64]) -> Vec<DMatrix<f64>> {
        let Some(g_pinv) = &self.g_pinv else {
            return x.to_vec();
        };
        let r = self.prob.rhs() - self.prob.apply(x, u);
        if r.amax() == 0.0 {
            return x.to_vec();
        }
        let lambda = g_pinv * r;
        let dx = self.prob.adjoint(lambda.as_slice());
        x.iter().zip(dx).map(|(a, d)| a + d).collect()
    }
}

/// Per-block Nesterov-Todd scaling: `Rᵀ Z R = R⁻¹ X R⁻ᵀ = diag(λ)`.
struct Scaling {
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    /// `R Rᵀ`; the scaled Hessian acts as `U ↦ RRᵀ U RRᵀ`.
    rrt: DMatrix<f64>,
    lambda: DVector<f64>,
}

fn factor_psd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Some(ch.l());
    }
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Some(&eig.eigenvectors * d)
}

impl Scaling {
    fn new(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<Scaling> {
        let n = x.nrows();
        let lx = factor_psd(x)?;
        let lz = factor_psd(z)?;
        let svd = (lz.transpose() * &lx).svd(true, true);
        let v_t = svd.v_t?;
        let lambda = svd.singular_values.clone();
        if lambda.iter().any(|&l| !(l > 0.0)) {
            return None;
        }
        let lx_inv = lx.clone().try_inverse()?;
        let mut r = &lx * v_t.transpose();
        let mut r_inv = v_t * lx_inv;
        for k in 0..n {
            let s = lambda[k].sqrt();
            r.column_mut(k).scale_mut(1.0 / s);
            r_inv.row_mut(k).scale_mut(s);
        }
        let rrt = &r * r.transpose();
        Some(Scaling {
            r,
            r_inv,
            rrt,
            lambda,
        })
    }

    /// `RRᵀ U RRᵀ`.
    fn hess(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.rrt * u * &self.rrt
    }

    /// `R⁻¹ U R⁻ᵀ` (primal side to scaled space).
    fn scale_primal(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.r_inv * u * self.r_inv.transpose()
    }

    /// `Rᵀ U R` (dual side to scaled space).
    fn scale_dual(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        self.r.transpose() * u * &self.r
    }

    /// `R U Rᵀ`.
    fn unscale_primal(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.r * u * self.r.transpose()
    }

    /// Solve `λ ∘ P = V` for symmetric `P`.
    fn lambda_solve(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = v.nrows();
        DMatrix::from_fn(n, n, |i, j| 2.0 * v[(i, j)] / (self.lambda[i] + self.lambda[j]))
    }

    /// Largest `α ≤ cap` with `diag(λ) + α D ⪰ 0`.
    fn max_step(&self, d: &DMatrix<f64>, cap: f64) -> f64 {
        let n = d.nrows();
        let m = DMatrix::from_fn(n, n, |i, j| {
            0.5 * (d[(i, j)] + d[(j, i)]) / (self.lambda[i] * self.lambda[j]).sqrt()
        });
        let lo = min_eig(&m);
        if lo < 0.0 {
            cap.min(-1.0 / lo)
        } else {
            cap
        }
    }
}

fn jordan(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    (a * b + b * a) * 0.5
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// Factorization of the bordered system `[M F; Fᵀ 0]`.
struct SaddleSolver<'a> {
    m: &'a DMatrix<f64>,
    f: &'a DMatrix<f64>,
    chol_m: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    chol_s: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    minv_f: DMatrix<f64>,
}

impl<'a> SaddleSolver<'a> {
    fn new(m: &'a DMatrix<f64>, f: &'a DMatrix<f64>) -> Option<Self> {
        let k = m.nrows();
        let diag_max = (0..k).map(|i| m[(i, i)].abs()).fold(1.0, f64::max);
        let mut delta = 1e-13 * diag_max;
        let chol_m = loop {
            let mut reg = m.clone();
            for i in 0..k {
                reg[(i, i)] += delta;
            }
            if let Some(c) = reg.cholesky() {
                break c;
            }
            delta *= 100.0;
            if delta > 1e-2 * diag_max {
                return None;
            }
        };
        let minv_f = chol_m.solve(f);
        let chol_s = if f.ncols() > 0 {
            let s = f.transpose() * &minv_f;
            let s = (&s + s.transpose()) * 0.5;
            let s_max = (0..s.nrows()).map(|i| s[(i, i)].abs()).fold(1e-300, f64::max);
            let mut d = 1e-13 * s_max;
            loop {
                let mut reg = s.clone();
                for i in 0..reg.nrows() {
                    reg[(i, i)] += d;
                }
                if let Some(c) = reg.cholesky() {
                    break Some(c);
                }
                d *= 100.0;
                if d > s_max {
                    break None;
                }
            }
        } else {
            None
        };
        if f.ncols() > 0 && chol_s.is_none() {
            return None;
        }
        Some(SaddleSolver {
            m,
            f,
            chol_m,
            chol_s,
            minv_f,
        })
    }

    fn solve_once(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let minv_r1 = self.chol_m.solve(r1);
        match &self.chol_s {
            Some(cs) => {
                let rhs = self.f.transpose() * &minv_r1 - r2;
                let du = cs.solve(&rhs);
                let dy = minv_r1 - &self.minv_f * &du;
                (dy, du)
            }
            None => (minv_r1, DVector::zeros(0)),
        }
    }

    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (mut dy, mut du) = self.solve_once(r1, r2);
        let scale = 1.0 + r1.amax().max(r2.amax());
        for _ in 0..4 {
            let e1 = r1 - self.m * &dy - self.f * &du;
            let e2 = r2 - self.f.transpose() * &dy;
            if e1.amax().max(e2.amax()) <= 1e-15 * scale {
                break;
            }
            let (cy, cu) = self.solve_once(&e1, &e2);
            dy += cy;
            du += cu;
        }
        (dy, du)
    }
}

/// Row-scaled copy of the problem handed to the iteration.
struct Scaled {
    prob: SdpProblem,
    row_scale: Vec<f64>,
}

fn equilibrate(prob: &SdpProblem) -> Scaled {
    let mut p = prob.clone();
    let mut row_scale = Vec::with_capacity(p.constraints.len());
    for c in &mut p.constraints {
        let nrm = (c.blocks.iter().map(|(_, s)| s.norm_sq()).sum::<f64>()
            + c.free.iter().map(|f| f.1 * f.1).sum::<f64>())
        .sqrt();
        let s = if nrm > 0.0 { 1.0 / nrm } else { 1.0 };
        for (_, sp) in &mut c.blocks {
            sp.scale(s);
        }
        for f in &mut c.free {
            f.1 *= s;
        }
        c.rhs *= s;
        row_scale.push(s);
    }
    Scaled { prob: p, row_scale }
}

/// Per-block sparse constraint lists, grouped for Schur complement assembly.
struct BlockIndex {
    per_block: Vec<Vec<(usize, SymSparse)>>,
}

impl BlockIndex {
    fn new(prob: &SdpProblem) -> Self {
        let mut per_block = vec![Vec::new(); prob.block_dims.len()];
        for (i, c) in prob.constraints.iter().enumerate() {
            for (b, s) in &c.blocks {
                let mut s = s.clone();
                s.compact();
                if !s.is_empty() {
                    per_block[*b].push((i, s));
                }
            }
        }
        BlockIndex { per_block }
    }
}

fn schur_complement(
    prob: &SdpProblem,
    index: &BlockIndex,
    scalings: &[Scaling],
) -> DMatrix<f64> {
    let k = prob.num_constraints();
    let mut m = DMatrix::zeros(k, k);
    for (b, list) in index.per_block.iter().enumerate() {
        let n = prob.block_dims[b];
        let rrt = &scalings[b].rrt;
        for (pos, (j, aj)) in list.iter().enumerate() {
            // G = RRᵀ A_j RRᵀ
            let g = if aj.entries.len() * 2 < n {
                let mut g = DMatrix::zeros(n, n);
                for &(p, q, v) in &aj.entries {
                    let cp = rrt.column(p);
                    let cq = rrt.column(q);
                    if p == q {
                        g.ger(v, &cp, &cp, 1.0);
                    } else {
                        g.ger(v, &cp, &cq, 1.0);
                        g.ger(v, &cq, &cp, 1.0);
                    }
                }
                g
            } else {
                scalings[b].hess(&aj.to_dense(n))
            };
            for (i, ai) in list[..=pos].iter() {
                let v = ai.dot(&g);
                m[(*i, *j)] += v;
                if i != j {
                    m[(*j, *i)] += v;
                }
            }
        }
    }
    m
}

static SOLVE_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`solve`] calls made by this process, so callers can confirm
/// that a code path (certificate checking, say) never reached the solver.
pub fn solve_calls() -> usize {
    SOLVE_CALLS.load(Ordering::Relaxed)
}

/// Solve an SDP. Infeasibility is a status, not an error; `IllConditioned`
/// is returned when the embedding loses both `τ` and `κ`.
pub fn solve(prob: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution> {
    SOLVE_CALLS.fetch_add(1, Ordering::Relaxed);
    prob.validate()?;
    let scaled = equilibrate(prob);
    let sp = &scaled.prob;
    let index = BlockIndex::new(sp);
    let dims = sp.block_dims.clone();
    let nb = dims.len();
    let k = sp.num_constraints();
    let nf = sp.num_free();
    let nu: f64 = dims.iter().sum::<usize>() as f64;

    let c_dense: Vec<DMatrix<f64>> = sp
        .objective
        .iter()
        .zip(&dims)
        .map(|(c, &n)| c.to_dense(n))
        .collect();
    let c_free = DVector::from_column_slice(&sp.free_objective);
    let b = sp.rhs();
    let b_norm = b.norm();
    let c_norm = (c_dense.iter().map(|c| c.norm_squared()).sum::<f64>() + c_free.norm_squared()).sqrt();
    let mut f_mat = DMatrix::zeros(k, nf);
    for (i, c) in sp.constraints.iter().enumerate() {
        for &(j, v) in &c.free {
            f_mat[(i, j)] += v;
        }
    }

    let mut x: Vec<DMatrix<f64>> = dims.iter().map(|&n| DMatrix::identity(n, n)).collect();
    let mut z = x.clone();
    let mut u = DVector::zeros(nf);
    let mut y = DVector::zeros(k);
    let mut tau = 1.0_f64;
    let mut kappa = 1.0_f64;

    let finish = |status: SdpStatus,
                  x: &[DMatrix<f64>],
                  u: &DVector<f64>,
                  y: &DVector<f64>,
                  z: &[DMatrix<f64>],
                  div: f64,
                  iters: usize|
     -> SdpSolution {
        let xs: Vec<DMatrix<f64>> = x.iter().map(|m| m / div).collect();
        let zs: Vec<DMatrix<f64>> = z.iter().map(|m| m / div).collect();
        let us: Vec<f64> = u.iter().map(|v| v / div).collect();
        let ys: Vec<f64> = y
            .iter()
            .zip(&scaled.row_scale)
            .map(|(v, s)| v * s / div)
            .collect();
        let mut sol = SdpSolution {
            status,
            x: xs,
            free: us,
            y: ys,
            s: zs,
            primal_objective: 0.0,
            dual_objective: 0.0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            gap: 0.0,
            iterations: iters,
        };
        sol.primal_objective = prob.primal_objective(&sol.x, &sol.free);
        sol.dual_objective = prob.rhs().dot(&DVector::from_column_slice(&sol.y));
        let rep = kkt_report(prob, &sol);
        sol.primal_residual = rep.primal;
        sol.dual_residual = rep.dual;
        sol.gap = rep.gap;
        sol
    };

    let trace = std::env::var_os("SWITCHCERT_SDP_TRACE").is_some();
    let mut slow_steps = 0usize;
    let mut mu_min = f64::INFINITY;
    // best iterate so far, returned when the iteration stalls
    let mut best: Option<(f64, Vec<DMatrix<f64>>, DVector<f64>, DVector<f64>, Vec<DMatrix<f64>>, f64, usize)> = None;
    macro_rules! stalled {
        ($x:expr, $u:expr, $y:expr, $z:expr, $tau:expr, $iter:expr) => {
            match &best {
                Some((_, bx, bu, by, bz, bt, bi)) => finish(SdpStatus::Stalled, bx, bu, by, bz, *bt, *bi),
                None => finish(SdpStatus::Stalled, $x, $u, $y, $z, $tau, $iter),
            }
        };
    }
    for iter in 0..opts.max_iter {
        // residuals of the embedding
        let ax = sp.apply(&x, u.as_slice());
        let r_p = &ax - &b * tau;
        let aty = sp.adjoint(y.as_slice());
        let r_d: Vec<DMatrix<f64>> = (0..nb)
            .map(|q| &aty[q] + &z[q] - &c_dense[q] * tau)
            .collect();
        let r_f = DVector::from_vec(sp.adjoint_free(y.as_slice())) - &c_free * tau;
        let cx: f64 = (0..nb).map(|q| frob(&c_dense[q], &x[q])).sum::<f64>() + c_free.dot(&u);
        let by = b.dot(&y);
        let r_g = kappa - by + cx;
        let xz: f64 = (0..nb).map(|q| frob(&x[q], &z[q])).sum();
        let mu = (xz + tau * kappa) / (nu + 1.0);

        let rd_norm = (r_d.iter().map(|m| m.norm_squared()).sum::<f64>() + r_f.norm_squared()).sqrt();
        let pres = r_p.norm() / tau / (1.0 + b_norm);
        let dres = rd_norm / tau / (1.0 + c_norm);
        let pobj = cx / tau;
        let dobj = by / tau;
        let gap_scale = 1.0 + pobj.abs() + dobj.abs();
        let relgap = (pobj - dobj).abs().max(xz / (tau * tau)) / gap_scale;

        if trace {
            eprintln!(
                "sdp {iter:3} pres {pres:.2e} dres {dres:.2e} gap {relgap:.2e} pobj {pobj:.6e} dobj {dobj:.6e} tau {tau:.2e} kappa {kappa:.2e} mu {mu:.2e}"
            );
        }
        let merit = pres.max(dres).max(relgap);
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, x.clone(), u.clone(), y.clone(), z.clone(), tau, iter));
        }
        if pres <= opts.tol_feas && dres <= opts.tol_feas && relgap <= opts.tol_gap {
            return Ok(finish(SdpStatus::Optimal, &x, &u, &y, &z, tau, iter));
        }
        if by > 0.0 {
            let ray_res = (aty
                .iter()
                .zip(&z)
                .map(|(a, s)| (a + s).norm_squared())
                .sum::<f64>()
                + DVector::from_vec(sp.adjoint_free(y.as_slice())).norm_squared())
            .sqrt();
            if ray_res / by <= opts.tol_feas {
                let mut sol = finish(SdpStatus::PrimalInfeasible, &x, &u, &y, &z, 1.0, iter);
                let yb: f64 = prob.rhs().dot(&DVector::from_column_slice(&sol.y));
                sol.y.iter_mut().for_each(|v| *v /= yb);
                sol.s = prob.adjoint(&sol.y).into_iter().map(|m| -m).collect();
                return Ok(sol);
            }
        }
        if cx < 0.0 {
            let ray_res = ax.norm();
            if ray_res / (-cx) <= opts.tol_feas {
                let mut sol = finish(SdpStatus::DualInfeasible, &x, &u, &y, &z, -cx, iter);
                sol.primal_objective = -1.0;
                return Ok(sol);
            }
        }
        // μ is nonincreasing for exact directions; growth means the
        // Newton systems have lost accuracy.
        mu_min = mu_min.min(mu);
        if mu > 100.0 * mu_min {
            return Ok(stalled!(&x, &u, &y, &z, tau, iter));
        }
        if tau < 1e-13 && kappa < 1e-13 {
            return Err(Error::IllConditioned);
        }

        let scalings: Option<Vec<Scaling>> = (0..nb).map(|q| Scaling::new(&x[q], &z[q])).collect();
        let Some(scalings) = scalings else {
            return Ok(stalled!(&x, &u, &y, &z, tau, iter));
        };

        let m = schur_complement(sp, &index, &scalings);
        let Some(saddle) = SaddleSolver::new(&m, &f_mat) else {
            return Ok(stalled!(&x, &u, &y, &z, tau, iter));
        };

        // τ-direction: [M F; Fᵀ 0] v1 = (b + A(H C), c_f)
        let hc: Vec<DMatrix<f64>> = (0..nb).map(|q| scalings[q].hess(&c_dense[q])).collect();
        let a_hc = sp.apply(&hc, &vec![0.0; nf]);
        let (dy1, du1) = saddle.solve(&(&b + &a_hc), &c_free);
        let aty1 = sp.adjoint(dy1.as_slice());
        let w_norm_sq: f64 = (0..nb)
            .map(|q| {
                let d = &c_dense[q] - &aty1[q];
                scalings[q].scale_dual(&d).norm_squared()
            })
            .sum();
        let denom = -kappa / tau - w_norm_sq;

        // Right-hand side of the linearized embedding:
        //   A dX + F du - b dτ = p1,   Aᵀdy + dZ - C dτ = p2,   Fᵀdy - c_f dτ = p3,
        //   dκ - bᵀdy + <C,dX> + c_fᵀdu = p4,
        //   R⁻¹dXR⁻ᵀ + RᵀdZR = p5,     τ dκ + κ dτ = p6.
        struct Rhs {
            p1: DVector<f64>,
            p2: Vec<DMatrix<f64>>,
            p3: DVector<f64>,
            p4: f64,
            p5: Vec<DMatrix<f64>>,
            p6: f64,
        }

        struct Dir {
            dx: Vec<DMatrix<f64>>,
            dz: Vec<DMatrix<f64>>,
            dy: DVector<f64>,
            du: DVector<f64>,
            dtau: f64,
            dkappa: f64,
            ds_scaled: Vec<DMatrix<f64>>,
            dz_scaled: Vec<DMatrix<f64>>,
        }

        let zero_free = vec![0.0; nf];
        let newton = |r: &Rhs| -> Dir {
            let qx: Vec<DMatrix<f64>> = (0..nb)
                .map(|q| scalings[q].unscale_primal(&r.p5[q]) - scalings[q].hess(&r.p2[q]))
                .collect();
            let rhs1 = &r.p1 - sp.apply(&qx, &zero_free);
            let (dy0, du0) = saddle.solve(&rhs1, &r.p3);
            let c_q: f64 = (0..nb).map(|q| frob(&c_dense[q], &qx[q])).sum();
            let num = r.p4 - r.p6 / tau - c_q - (&a_hc - &b).dot(&dy0) - c_free.dot(&du0);
            let dtau = num / denom;
            let dy = dy0 + &dy1 * dtau;
            let du = du0 + &du1 * dtau;
            let atdy = sp.adjoint(dy.as_slice());
            let dz: Vec<DMatrix<f64>> = (0..nb)
                .map(|q| &r.p2[q] - &atdy[q] + &c_dense[q] * dtau)
                .collect();
            let dz_scaled: Vec<DMatrix<f64>> = (0..nb).map(|q| scalings[q].scale_dual(&dz[q])).collect();
            let ds_scaled: Vec<DMatrix<f64>> = (0..nb).map(|q| &r.p5[q] - &dz_scaled[q]).collect();
            let dx: Vec<DMatrix<f64>> = (0..nb).map(|q| scalings[q].unscale_primal(&ds_scaled[q])).collect();
            let dkappa = (r.p6 - kappa * dtau) / tau;
            Dir {
                dx,
                dz,
                dy,
                du,
                dtau,
                dkappa,
                ds_scaled,
                dz_scaled,
            }
        };

        let residual = |r: &Rhs, d: &Dir| -> Rhs {
            let atdy = sp.adjoint(d.dy.as_slice());
            let cdx: f64 = (0..nb).map(|q| frob(&c_dense[q], &d.dx[q])).sum::<f64>() + c_free.dot(&d.du);
            Rhs {
                p1: &r.p1 - (sp.apply(&d.dx, d.du.as_slice()) - &b * d.dtau),
                p2: (0..nb)
                    .map(|q| &r.p2[q] - (&atdy[q] + &d.dz[q] - &c_dense[q] * d.dtau))
                    .collect(),
                p3: &r.p3 - (DVector::from_vec(sp.adjoint_free(d.dy.as_slice())) - &c_free * d.dtau),
                p4: r.p4 - (d.dkappa - b.dot(&d.dy) + cdx),
                p5: (0..nb)
                    .map(|q| {
                        &r.p5[q]
                            - (scalings[q].scale_primal(&d.dx[q]) + scalings[q].scale_dual(&d.dz[q]))
                    })
                    .collect(),
                p6: r.p6 - (tau * d.dkappa + kappa * d.dtau),
            }
        };

        let rhs_size = |r: &Rhs| -> f64 {
            [
                r.p1.amax(),
                r.p2.iter().map(|m| m.amax()).fold(0.0, f64::max),
                r.p3.amax(),
                r.p4.abs(),
                r.p5.iter().map(|m| m.amax()).fold(0.0, f64::max),
                r.p6.abs(),
            ]
            .into_iter()
            .fold(0.0, f64::max)
        };

        let solve_refined = |r: &Rhs| -> Dir {
            let mut d = newton(r);
            let mut err = rhs_size(&residual(r, &d));
            for _ in 0..3 {
                if err <= 1e-14 * (1.0 + rhs_size(r)) {
                    break;
                }
                let e = residual(r, &d);
                let c = newton(&e);
                let cand = Dir {
                    dx: (0..nb).map(|q| &d.dx[q] + &c.dx[q]).collect(),
                    dz: (0..nb).map(|q| &d.dz[q] + &c.dz[q]).collect(),
                    dy: &d.dy + &c.dy,
                    du: &d.du + &c.du,
                    dtau: d.dtau + c.dtau,
                    dkappa: d.dkappa + c.dkappa,
                    ds_scaled: (0..nb).map(|q| &d.ds_scaled[q] + &c.ds_scaled[q]).collect(),
                    dz_scaled: (0..nb).map(|q| &d.dz_scaled[q] + &c.dz_scaled[q]).collect(),
                };
                let cand_err = rhs_size(&residual(r, &cand));
                if cand_err < err {
                    d = cand;
                    err = cand_err;
                } else {
                    break;
                }
            }
            d
        };

        let direction = |sigma: f64, corr: Option<&Dir>| -> Dir {
            let eta = 1.0 - sigma;
            let p5 = (0..nb)
                .map(|q| {
                    let sc = &scalings[q];
                    let mut rc = DMatrix::from_diagonal(&sc.lambda.map(|l| -l * l));
                    for i in 0..dims[q] {
                        rc[(i, i)] += sigma * mu;
                    }
                    if let Some(c) = corr {
                        rc -= jordan(&c.ds_scaled[q], &c.dz_scaled[q]);
                    }
                    sc.lambda_solve(&rc)
                })
                .collect();
            let rhs = Rhs {
                p1: -(&r_p * eta),
                p2: r_d.iter().map(|m| -(m * eta)).collect(),
                p3: -(&r_f * eta),
                p4: -eta * r_g,
                p5,
                p6: -tau * kappa + sigma * mu - corr.map(|c| c.dtau * c.dkappa).unwrap_or(0.0),
            };
            solve_refined(&rhs)
        };

        let step_len = |d: &Dir| -> f64 {
            let mut a = f64::INFINITY;
            for q in 0..nb {
                a = scalings[q].max_step(&d.ds_scaled[q], a);
                a = scalings[q].max_step(&d.dz_scaled[q], a);
            }
            if d.dtau < 0.0 {
                a = a.min(-tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-kappa / d.dkappa);
            }
            a
        };

        let aff = direction(0.0, None);
        let alpha_aff = step_len(&aff).min(1.0);
        let sigma = (1.0 - alpha_aff).clamp(0.0, 1.0).powi(3);
        let dir = direction(sigma, Some(&aff));
        let alpha = (0.99 * step_len(&dir)).min(1.0);

        if trace {
            let eta = 1.0 - sigma;
            let e_p = sp.apply(&dir.dx, dir.du.as_slice()) - &b * dir.dtau + &r_p * eta;
            let cdx: f64 = (0..nb).map(|q| frob(&c_dense[q], &dir.dx[q])).sum::<f64>() + c_free.dot(&dir.du);
            let e_g = dir.dkappa - b.dot(&dir.dy) + cdx + eta * r_g;
            eprintln!("    dtau {:.3e} denom {denom:.3e} e_p {:.3e} e_g {:.3e} |dy| {:.3e}", dir.dtau, e_p.norm(), e_g, dir.dy.norm());
            eprintln!("    alpha_aff {alpha_aff:.3e} sigma {sigma:.3e} alpha {alpha:.3e}");
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Ok(stalled!(&x, &u, &y, &z, tau, iter));
        }
        if alpha < 1e-6 {
            slow_steps += 1;
            if slow_steps > 5 {
                return Ok(stalled!(&x, &u, &y, &z, tau, iter));
            }
        } else {
            slow_steps = 0;
        }

        for q in 0..nb {
            x[q] += &dir.dx[q] * alpha;
            z[q] += &dir.dz[q] * alpha;
            x[q] = (&x[q] + x[q].transpose()) * 0.5;
            z[q] = (&z[q] + z[q].transpose()) * 0.5;
        }
        y += &dir.dy * alpha;
        u += &dir.du * alpha;
        tau += dir.dtau * alpha;
        kappa += dir.dkappa * alpha;
        if !(tau > 0.0) || !(kappa > 0.0) {
            return Ok(stalled!(&x, &u, &y, &z, tau.max(1e-300), iter));
        }
    }
    Ok(stalled!(&x, &u, &y, &z, tau, opts.max_iter))
}

/// Random instances with known structure, for oracle testing.
pub mod generate {
    use super::*;
    use rand::Rng;

    fn random_sym<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&m + m.transpose()) * 0.5
    }

    fn random_pd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.1
    }

    /// Strictly feasible primal-dual pair built from an interior point
    /// `(X₀, u₀)`, `(y₀, S₀)`; returns the problem only.
    pub fn strictly_feasible<R: Rng>(rng: &mut R, dims: &[usize], k: usize, num_free: usize) -> SdpProblem {
        let mut p = SdpProblem::new(dims.to_vec(), num_free);
        let x0: Vec<DMatrix<f64>> = dims.iter().map(|&n| random_pd(rng, n)).collect();
        let s0: Vec<DMatrix<f64>> = dims.iter().map(|&n| random_pd(rng, n)).collect();
        let y0: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u0: Vec<f64> = (0..num_free).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..k {
            let blocks = dims
                .iter()
                .enumerate()
                .map(|(b, &n)| (b, SymSparse::from_dense(&random_sym(rng, n))))
                .collect();
            let free = (0..num_free).map(|j| (j, rng.random_range(-1.0..1.0))).collect();
            p.add_constraint(SdpConstraint { blocks, free, rhs: 0.0 });
        }
        let b = p.apply(&x0, &u0);
        for (c, bi) in p.constraints.iter_mut().zip(b.iter()) {
            c.rhs = *bi;
        }
        let aty = p.adjoint(&y0);
        for (bl, (a, s)) in aty.iter().zip(&s0).enumerate() {
            p.objective[bl] = SymSparse::from_dense(&(a + s));
        }
        p.free_objective = p.adjoint_free(&y0);
        p
    }

    /// Primal infeasible problem with a planted ray `y`: `Σ y_i A_i = -P`
    /// for a positive definite `P` and `bᵀy = 1`.
    pub fn primal_infeasible<R: Rng>(rng: &mut R, dims: &[usize], k: usize) -> SdpProblem {
        assert!(k >= 1);
        let mut p = SdpProblem::new(dims.to_vec(), 0);
        let mut y: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        y[k - 1] = if y[k - 1] >= 0.0 { y[k - 1] + 0.5 } else { y[k - 1] - 0.5 };
        let mut acc: Vec<DMatrix<f64>> = dims.iter().map(|&n| -random_pd(rng, n)).collect();
        let mut rows: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(k);
        for yi in y.iter().take(k - 1) {
            let ai: Vec<DMatrix<f64>> = dims.iter().map(|&n| random_sym(rng, n)).collect();
            for (a, m) in acc.iter_mut().zip(&ai) {
                *a -= m * *yi;
            }
            rows.push(ai);
        }
        rows.push(acc.iter().map(|a| a / y[k - 1]).collect());
        let mut b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let by: f64 = b.iter().zip(&y).map(|(u, v)| u * v).sum();
        let shift = (1.0 - by) / y[k - 1];
        b[k - 1] += shift;
        for (ai, bi) in rows.into_iter().zip(b) {
            p.add_constraint(SdpConstraint {
                blocks: ai.iter().enumerate().map(|(bl, m)| (bl, SymSparse::from_dense(m))).collect(),
                free: vec![],
                rhs: bi,
            });
        }
        for (bl, &n) in dims.iter().enumerate() {
            p.objective[bl] = SymSparse::from_dense(&random_pd(rng, n));
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_problem() -> SdpProblem {
        // minimize <diag(1,2), X> s.t. tr X = 1
        let mut p = SdpProblem::new(vec![2], 0);
        let mut c = SymSparse::new();
        c.push(0, 0, 1.0);
        c.push(1, 1, 2.0);
        p.set_objective_block(0, c);
        let mut a = SymSparse::new();
        a.push(0, 0, 1.0);
        a.push(1, 1, 1.0);
        p.add_constraint(SdpConstraint {
            blocks: vec![(0, a)],
            free: vec![],
            rhs: 1.0,
        });
        p
    }

    #[test]
    fn minimum_eigenvalue_program() {
        let p = diag_problem();
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.primal_objective - 1.0).abs() < 1e-7);
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((&sol.x[0] - expect).amax() < 1e-6);
        assert!(sol.primal_objective >= sol.dual_objective - 1e-8);
    }

    #[test]
    fn negative_trace_is_primal_infeasible() {
        let mut p = SdpProblem::new(vec![3], 0);
        let mut a = SymSparse::new();
        for i in 0..3 {
            a.push(i, i, 1.0);
        }
        p.add_constraint(SdpConstraint {
            blocks: vec![(0, a)],
            free: vec![],
            rhs: -1.0,
        });
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::PrimalInfeasible);
        assert!(verify_infeasibility_ray(&p, &sol.y, 1e-8));
    }

    #[test]
    fn unbounded_is_dual_infeasible() {
        // minimize -X11 with no constraint binding X11
        let mut p = SdpProblem::new(vec![2], 0);
        let mut c = SymSparse::new();
        c.push(0, 0, -1.0);
        p.set_objective_block(0, c);
        let mut a = SymSparse::new();
        a.push(1, 1, 1.0);
        p.add_constraint(SdpConstraint {
            blocks: vec![(0, a)],
            free: vec![],
            rhs: 1.0,
        });
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::DualInfeasible);
    }

    #[test]
    fn free_variables_enter_directly() {
        // minimize u s.t. X11 - u = 0, X22 = 1, X12 = 0.5 ... u >= 0.25 via PSD
        let mut p = SdpProblem::new(vec![2], 1);
        p.set_free_objective(0, 1.0);
        let mut a11 = SymSparse::new();
        a11.push(0, 0, 1.0);
        p.add_constraint(SdpConstraint {
            blocks: vec![(0, a11)],
            free: vec![(0, -1.0)],
            rhs: 0.0,
        });
        let mut a22 = SymSparse::new();
        a22.push(1, 1, 1.0);
        p.add_constraint(SdpConstraint {
            blocks: vec![(0, a22)],
            free: vec![],
            rhs: 1.0,
        });
        let mut a12 = SymSparse::new();
        a12.push(0, 1, 0.5);
        p.add_constraint(SdpConstraint {
            blocks: vec![(0, a12)],
            free: vec![],
            rhs: 0.5,
        });
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.free[0] - 0.25).abs() < 1e-6, "{}", sol.free[0]);
    }

    #[test]
    fn random_feasible_problems_meet_kkt() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let free = if trial % 2 == 0 { 0 } else { 2 };
            let p = generate::strictly_feasible(&mut rng, &[5, 3], 8, free);
            let sol = solve(&p, &SdpOptions::default()).unwrap();
            assert_eq!(sol.status, SdpStatus::Optimal, "trial {trial}");
            let rep = kkt_report(&p, &sol);
            assert!(rep.primal <= 1e-7 && rep.dual <= 1e-7 && rep.gap <= 1e-7, "{rep:?}");
            assert!(rep.min_eig_x >= -1e-8 && rep.min_eig_s >= -1e-8, "{rep:?}");
            assert!(sol.primal_objective >= sol.dual_objective - 1e-7);
        }
    }

    #[test]
    fn planted_rays_are_found() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p = generate::primal_infeasible(&mut rng, &[4, 2], 6);
            let sol = solve(&p, &SdpOptions::default()).unwrap();
            assert_eq!(sol.status, SdpStatus::PrimalInfeasible);
            assert!(verify_infeasibility_ray(&p, &sol.y, 1e-8));
        }
    }

    #[test]
    fn dump_round_trips() {
        let p = diag_problem();
        let back = SdpProblem::parse_dump(&p.dump()).unwrap();
        assert_eq!(back, p);
        assert!(SdpProblem::parse_dump("blocks 2\nfree 0\nx 1").is_err());
    }

    #[test]
    fn validate_catches_bad_indices() {
        let mut p = SdpProblem::new(vec![2], 0);
        let mut a = SymSparse::new();
        a.push(0, 2, 1.0);
        p.add_constraint(SdpConstraint {
            blocks: vec![(0, a)],
            free: vec![],
            rhs: 1.0,
        });
        assert!(matches!(solve(&p, &SdpOptions::default()), Err(Error::DimensionMismatch { .. })));
    }
}
