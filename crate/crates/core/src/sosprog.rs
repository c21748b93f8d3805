//! Sum-of-squares programs compiled to semidefinite programs, Gram
//! certificates, and the three sos-convexity tests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{monomials_in_range, Coefficient, Exponents, PolyMatrix, Polynomial};
use crate::sdp::{self, SdpConstraint, SdpOptions, SdpProblem, SdpStatus, SymSparse};

#[derive(Clone, Copy, Debug)]
pub struct SosOptions {
    pub sdp: SdpOptions,
    /// Certificates need `max|p - zᵀQz| <= tol_residual * (1 + max|p|)`.
    pub tol_residual: f64,
    /// Certificates need `λ_min(Q) >= -tol_psd * (1 + ‖Q‖_F)`.
    pub tol_psd: f64,
    /// Tolerance for dual (infeasibility) certificates.
    pub tol_dual: f64,
}

impl Default for SosOptions {
    fn default() -> Self {
        SosOptions {
            sdp: SdpOptions::default(),
            tol_residual: 1e-7,
            tol_psd: 1e-8,
            tol_dual: 1e-7,
        }
    }
}

/// Three-way answer. `Unknown` covers solver stalls and failed
/// re-verification; it is never evidence of infeasibility.
#[derive(Clone, Debug)]
pub enum SosOutcome<T, W> {
    Feasible(T),
    Infeasible(W),
    Unknown(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Feasible,
    Infeasible,
    Unknown,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Feasible => "feasible",
            Verdict::Infeasible => "infeasible",
            Verdict::Unknown => "unknown",
        })
    }
}

impl<T, W> SosOutcome<T, W> {
    pub fn verdict(&self) -> Verdict {
        match self {
            SosOutcome::Feasible(_) => Verdict::Feasible,
            SosOutcome::Infeasible(_) => Verdict::Infeasible,
            SosOutcome::Unknown(_) => Verdict::Unknown,
        }
    }

    pub fn feasible(self) -> Option<T> {
        match self {
            SosOutcome::Feasible(t) => Some(t),
            _ => None,
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> SosOutcome<U, W> {
        match self {
            SosOutcome::Feasible(t) => SosOutcome::Feasible(f(t)),
            SosOutcome::Infeasible(w) => SosOutcome::Infeasible(w),
            SosOutcome::Unknown(s) => SosOutcome::Unknown(s),
        }
    }

    pub fn map_infeasible<V>(self, f: impl FnOnce(W) -> V) -> SosOutcome<T, V> {
        match self {
            SosOutcome::Feasible(t) => SosOutcome::Feasible(t),
            SosOutcome::Infeasible(w) => SosOutcome::Infeasible(f(w)),
            SosOutcome::Unknown(s) => SosOutcome::Unknown(s),
        }
    }
}

/// `p = zᵀ Q z` with `Q ⪰ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramCertificate {
    pub nvars: usize,
    pub basis: Vec<Exponents>,
    #[serde(with = "crate::json::matrix_rows")]
    pub gram: DMatrix<f64>,
    pub residual: f64,
    pub lambda_min: f64,
}

/// Result of re-checking a certificate against its polynomial.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CertificateCheck {
    /// Max coefficient of `p - zᵀQz`, computed in exact arithmetic.
    pub residual: f64,
    pub lambda_min: f64,
    /// `1 + max|coeff(p)|`.
    pub scale: f64,
    /// `1 + ‖Q‖_F`.
    pub gram_scale: f64,
}

impl CertificateCheck {
    pub fn passes(&self, tol_residual: f64, tol_psd: f64) -> bool {
        self.residual <= tol_residual * self.scale && self.lambda_min >= -tol_psd * self.gram_scale
    }
}

impl GramCertificate {
    /// `zᵀ Q z` in floating point.
    pub fn gram_polynomial(&self) -> Polynomial {
        let mut p = Polynomial::zero(self.nvars);
        let n = self.basis.len();
        for i in 0..n {
            for j in i..n {
                let c = if i == j { self.gram[(i, i)] } else { self.gram[(i, j)] + self.gram[(j, i)] };
                if c != 0.0 {
                    p.add_term(self.basis[i].mul(&self.basis[j]), c);
                }
            }
        }
        p
    }

    /// Independent check: exact residual and eigenvalue bound.
    pub fn check(&self, p: &Polynomial) -> Result<CertificateCheck> {
        if p.nvars() != self.nvars {
            return Err(Error::DimensionMismatch {
                expected: self.nvars,
                found: p.nvars(),
            });
        }
        let n = self.basis.len();
        if self.gram.nrows() != n || self.gram.ncols() != n {
            return Err(Error::Verification(format!(
                "Gram matrix is {}x{} for a basis of {n}",
                self.gram.nrows(),
                self.gram.ncols()
            )));
        }
        if self.basis.iter().any(|e| e.len() != self.nvars) {
            return Err(Error::Verification("basis exponent length differs from nvars".into()));
        }
        let mut acc: BTreeMap<Exponents, BigRational> = BTreeMap::new();
        for (e, c) in p.terms() {
            acc.insert(e.clone(), <BigRational as Coefficient>::from_f64(*c));
        }
        for i in 0..n {
            for j in 0..n {
                let q = self.gram[(i, j)];
                if q == 0.0 {
                    continue;
                }
                let e = self.basis[i].mul(&self.basis[j]);
                let v = acc.entry(e).or_insert_with(BigRational::zero);
                *v -= <BigRational as Coefficient>::from_f64(q);
            }
        }
        let residual = acc
            .values()
            .map(|v| Coefficient::to_f64(&v.abs()))
            .fold(0.0, f64::max);
        let asym = (&self.gram - self.gram.transpose()).amax();
        if asym > 0.0 {
            return Err(Error::Verification(format!("Gram matrix not symmetric ({asym:e})")));
        }
        Ok(CertificateCheck {
            residual,
            lambda_min: sdp::min_eig(&self.gram).min(if n == 0 { 0.0 } else { f64::INFINITY }),
            scale: 1.0 + p.max_abs_coeff(),
            gram_scale: 1.0 + self.gram.norm(),
        })
    }
}

/// Acceptance thresholds for independent certificate checks.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VerifyTolerance {
    /// Relative to `1 + max|coeff|` of the checked polynomial.
    pub residual: f64,
    /// Relative to `1 + ‖Q‖_F`.
    pub psd: f64,
}

impl Default for VerifyTolerance {
    fn default() -> Self {
        VerifyTolerance {
            residual: 1e-6,
            psd: 1e-8,
        }
    }
}

impl From<&SosOptions> for VerifyTolerance {
    fn from(o: &SosOptions) -> Self {
        VerifyTolerance {
            residual: o.tol_residual,
            psd: o.tol_psd,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedCheck {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<CertificateCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Outcome of re-checking every part of a composite certificate.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<NamedCheck>,
}

impl VerificationReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn add_check(&mut self, name: impl Into<String>, chk: CertificateCheck, tol: &VerifyTolerance) {
        self.checks.push(NamedCheck {
            name: name.into(),
            passed: chk.passes(tol.residual, tol.psd),
            check: Some(chk),
            message: None,
        });
    }

    /// Record a Gram check, turning errors into failed entries.
    pub fn add_gram(
        &mut self,
        name: impl Into<String>,
        cert: &GramCertificate,
        p: &Polynomial,
        tol: &VerifyTolerance,
    ) {
        let name = name.into();
        match cert.check(p) {
            Ok(chk) => self.add_check(name, chk, tol),
            Err(e) => self.add_failure(name, e.to_string()),
        }
    }

    pub fn add_condition(&mut self, name: impl Into<String>, ok: bool, message: impl Into<String>) {
        self.checks.push(NamedCheck {
            name: name.into(),
            passed: ok,
            check: None,
            message: Some(message.into()),
        });
    }

    pub fn add_failure(&mut self, name: impl Into<String>, message: impl Into<String>) {
        self.add_condition(name, false, message);
    }

    pub fn extend(&mut self, prefix: &str, other: VerificationReport) {
        for mut c in other.checks {
            c.name = format!("{prefix}{}", c.name);
            self.checks.push(c);
        }
    }

    /// Names of failed checks.
    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Separating linear functional `L` on monomials: the moment matrix
/// `[L(z_i z_j)]` is PSD while `L(p) < 0`, so `p` is not a sum of squares in
/// the basis `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCertificate {
    pub nvars: usize,
    pub basis: Vec<Exponents>,
    pub moments: Vec<Moment>,
    /// `L(p)`, normalized to `-1` when produced by the solver.
    pub pairing: f64,
    pub lambda_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub e: Exponents,
    pub m: f64,
}

impl MomentCertificate {
    /// Recompute `L(p)` and `λ_min` of the moment matrix. Unlisted moments
    /// are zero.
    pub fn check(&self, p: &Polynomial) -> Result<(f64, f64)> {
        if p.nvars() != self.nvars {
            return Err(Error::DimensionMismatch {
                expected: self.nvars,
                found: p.nvars(),
            });
        }
        let map: HashMap<&Exponents, f64> = self.moments.iter().map(|m| (&m.e, m.m)).collect();
        let get = |e: &Exponents| map.get(e).copied().unwrap_or(0.0);
        let pairing: f64 = p.terms().map(|(e, c)| c * get(e)).sum();
        let n = self.basis.len();
        let mm = DMatrix::from_fn(n, n, |i, j| get(&self.basis[i].mul(&self.basis[j])));
        let lam = if n == 0 { 0.0 } else { sdp::min_eig(&mm) };
        Ok((pairing, lam))
    }

    /// `L(p) < 0` and the moment matrix PSD to `tol` (relative to the
    /// largest moment).
    pub fn verifies(&self, p: &Polynomial, tol: f64) -> bool {
        match self.check(p) {
            Ok((pairing, lam)) => {
                let scale = 1.0 + self.moments.iter().map(|m| m.m.abs()).fold(0.0, f64::max);
                pairing < 0.0 && lam >= -tol * scale && -pairing > tol * scale
            }
            Err(_) => false,
        }
    }
}

/// Coefficient of one monomial: `constant + Σ c_k v_k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AffineCoeff {
    pub constant: f64,
    pub vars: BTreeMap<usize, f64>,
}

impl AffineCoeff {
    fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.vars.values().all(|v| *v == 0.0)
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.vars.iter().map(|(k, c)| c * values[*k]).sum::<f64>()
    }
}

/// Polynomial whose coefficients are affine in the decision variables.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePoly {
    nvars: usize,
    terms: BTreeMap<Exponents, AffineCoeff>,
}

impl AffinePoly {
    pub fn zero(nvars: usize) -> Self {
        AffinePoly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut a = Self::zero(p.nvars());
        a.add_poly(p, 1.0);
        a
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Exponents, &AffineCoeff)> {
        self.terms.iter()
    }

    /// `self += scale * p`.
    pub fn add_poly(&mut self, p: &Polynomial, scale: f64) {
        assert_eq!(p.nvars(), self.nvars, "affine polynomial dimension");
        for (e, c) in p.terms() {
            self.terms.entry(e.clone()).or_default().constant += scale * c;
        }
        self.clean();
    }

    /// `self += scale * v_var * p`.
    pub fn add_var_poly(&mut self, var: usize, p: &Polynomial, scale: f64) {
        assert_eq!(p.nvars(), self.nvars, "affine polynomial dimension");
        for (e, c) in p.terms() {
            *self.terms.entry(e.clone()).or_default().vars.entry(var).or_insert(0.0) += scale * c;
        }
        self.clean();
    }

    /// `self += scale * other`.
    pub fn add(&mut self, other: &AffinePoly, scale: f64) {
        assert_eq!(other.nvars, self.nvars, "affine polynomial dimension");
        for (e, c) in &other.terms {
            let t = self.terms.entry(e.clone()).or_default();
            t.constant += scale * c.constant;
            for (k, v) in &c.vars {
                *t.vars.entry(*k).or_insert(0.0) += scale * v;
            }
        }
        self.clean();
    }

    /// Product with a fixed polynomial (still affine).
    pub fn mul_poly(&self, p: &Polynomial) -> AffinePoly {
        assert_eq!(p.nvars(), self.nvars, "affine polynomial dimension");
        let mut out = AffinePoly::zero(self.nvars);
        for (e, c) in &self.terms {
            for (pe, pc) in p.terms() {
                let t = out.terms.entry(e.mul(pe)).or_default();
                t.constant += c.constant * pc;
                for (k, v) in &c.vars {
                    *t.vars.entry(*k).or_insert(0.0) += v * pc;
                }
            }
        }
        out.clean();
        out
    }

    pub fn instantiate(&self, values: &[f64]) -> Polynomial {
        let mut p = Polynomial::zero(self.nvars);
        for (e, c) in &self.terms {
            p.add_term(e.clone(), c.eval(values));
        }
        p
    }

    fn clean(&mut self) {
        for c in self.terms.values_mut() {
            c.vars.retain(|_, v| *v != 0.0);
        }
        self.terms.retain(|_, c| !c.is_zero());
    }
}

/// Polynomial with one decision variable per support monomial.
#[derive(Clone, Debug, PartialEq)]
pub struct UnknownPoly {
    nvars: usize,
    support: Vec<Exponents>,
    first_var: usize,
}

impl UnknownPoly {
    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn support(&self) -> &[Exponents] {
        &self.support
    }

    pub fn var(&self, k: usize) -> usize {
        self.first_var + k
    }

    /// Decision variable carrying the coefficient of `e`.
    pub fn var_of(&self, e: &Exponents) -> Option<usize> {
        self.support.iter().position(|s| s == e).map(|k| self.first_var + k)
    }

    pub fn as_affine(&self) -> AffinePoly {
        self.map_linear(|m| m.clone())
    }

    /// Apply a linear operator monomial by monomial: `Σ v_k L(m_k)`.
    pub fn map_linear(&self, op: impl Fn(&Polynomial) -> Polynomial) -> AffinePoly {
        let mut out: Option<AffinePoly> = None;
        for (k, e) in self.support.iter().enumerate() {
            let image = op(&Polynomial::monomial(e.clone(), 1.0));
            let acc = out.get_or_insert_with(|| AffinePoly::zero(image.nvars()));
            acc.add_var_poly(self.var(k), &image, 1.0);
        }
        out.unwrap_or_else(|| AffinePoly::zero(op(&Polynomial::zero(self.nvars)).nvars()))
    }

    pub fn instantiate(&self, values: &[f64]) -> Polynomial {
        let coeffs: Vec<f64> = (0..self.support.len()).map(|k| values[self.var(k)]).collect();
        Polynomial::from_basis(self.nvars, &self.support, &coeffs)
    }
}

#[derive(Clone, Debug)]
enum Constraint {
    Sos {
        expr: AffinePoly,
        basis: Vec<Exponents>,
        label: String,
    },
    Linear {
        coeffs: Vec<(usize, f64)>,
        rhs: f64,
        inequality: bool,
    },
    GramTrace {
        sos: usize,
        value: f64,
    },
}

/// A program over scalar decision variables with sos and linear
/// constraints and a linear objective (minimized).
#[derive(Clone, Debug, Default)]
pub struct SosProgram {
    num_vars: usize,
    constraints: Vec<Constraint>,
    objective: Vec<(usize, f64)>,
}

/// Feasible point of an [`SosProgram`] with one certificate per sos
/// constraint, in insertion order.
#[derive(Clone, Debug)]
pub struct SosSolution {
    pub values: Vec<f64>,
    pub certificates: Vec<LabeledCertificate>,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct LabeledCertificate {
    pub label: String,
    pub polynomial: Polynomial,
    pub certificate: GramCertificate,
}

impl SosSolution {
    pub fn certificate(&self, label: &str) -> Option<&LabeledCertificate> {
        self.certificates.iter().find(|c| c.label == label)
    }
}

/// Evidence of infeasibility for a program.
#[derive(Clone, Debug)]
pub enum ProgramInfeasibility {
    /// A constraint polynomial has a monomial no Gram entry can produce and
    /// whose coefficient is a nonzero constant.
    Structural { label: String, monomial: Exponents },
    /// Verified dual ray of the compiled SDP. `moments[c]` lists the
    /// functional values on the monomials of sos constraint `c`.
    Ray { moments: Vec<Vec<Moment>> },
}

struct Compiled {
    prob: SdpProblem,
    /// For sos constraint `c`: (block index, rows as (row id, monomial)).
    sos_rows: Vec<(usize, Vec<(usize, Exponents)>)>,
}

impl SosProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn new_var(&mut self) -> usize {
        self.num_vars += 1;
        self.num_vars - 1
    }

    pub fn new_unknown(&mut self, nvars: usize, support: Vec<Exponents>) -> UnknownPoly {
        let first_var = self.num_vars;
        self.num_vars += support.len();
        UnknownPoly {
            nvars,
            support,
            first_var,
        }
    }

    /// Require `expr` to be sos over an automatically chosen basis.
    /// Returns the index of the constraint among the sos constraints.
    pub fn add_sos(&mut self, expr: AffinePoly, label: impl Into<String>) -> usize {
        let basis = gram_basis(&expr, &[]);
        self.add_sos_with_basis(expr, basis, label)
    }

    pub fn add_sos_with_basis(&mut self, expr: AffinePoly, basis: Vec<Exponents>, label: impl Into<String>) -> usize {
        let index = self.num_sos();
        self.constraints.push(Constraint::Sos {
            expr,
            basis,
            label: label.into(),
        });
        index
    }

    /// Require a scalarized matrix expression `yᵀM(x)y` (the last `k`
    /// variables are `y`) to be sos with a `y`-bilinear basis.
    pub fn add_matrix_sos(&mut self, expr: AffinePoly, k: usize, label: impl Into<String>) -> usize {
        let n = expr.nvars() - k;
        let basis = gram_basis(&expr, &[n..n + k]);
        self.add_sos_with_basis(expr, basis, label)
    }

    pub fn num_sos(&self) -> usize {
        self.constraints
            .iter()
            .filter(|c| matches!(c, Constraint::Sos { .. }))
            .count()
    }

    /// Size of the Gram basis of sos constraint `sos`.
    pub fn basis_len(&self, sos: usize) -> usize {
        self.constraints
            .iter()
            .filter_map(|c| match c {
                Constraint::Sos { basis, .. } => Some(basis.len()),
                _ => None,
            })
            .nth(sos)
            .unwrap_or(0)
    }

    /// Fix `tr(Q) = value` for the Gram matrix of sos constraint `sos`.
    pub fn add_gram_trace(&mut self, sos: usize, value: f64) {
        self.constraints.push(Constraint::GramTrace { sos, value });
    }

    pub fn add_eq(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.constraints.push(Constraint::Linear {
            coeffs,
            rhs,
            inequality: false,
        });
    }

    /// `Σ c_k v_k <= rhs`.
    pub fn add_le(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.constraints.push(Constraint::Linear {
            coeffs,
            rhs,
            inequality: true,
        });
    }

    pub fn minimize(&mut self, coeffs: Vec<(usize, f64)>) {
        self.objective = coeffs;
    }

    fn compile(&self) -> std::result::Result<Compiled, ProgramInfeasibility> {
        let mut dims = Vec::new();
        for c in &self.constraints {
            match c {
                Constraint::Sos { basis, .. } => dims.push(basis.len()),
                Constraint::Linear { inequality: true, .. } => dims.push(1),
                Constraint::Linear { .. } | Constraint::GramTrace { .. } => {}
            }
        }
        let mut prob = SdpProblem::new(dims, self.num_vars);
        for &(k, c) in &self.objective {
            let cur = prob.free_objective()[k];
            prob.set_free_objective(k, cur + c);
        }
        let mut block = 0usize;
        let mut sos_rows = Vec::new();
        for c in &self.constraints {
            match c {
                Constraint::Sos { expr, basis, label } => {
                    let mut pairs: BTreeMap<Exponents, SymSparse> = BTreeMap::new();
                    for i in 0..basis.len() {
                        for j in i..basis.len() {
                            pairs.entry(basis[i].mul(&basis[j])).or_default().push(i, j, 1.0);
                        }
                    }
                    let scale = 1.0 + expr.terms().map(|(_, c)| c.constant.abs()).fold(0.0, f64::max);
                    let mut rows = Vec::new();
                    let mut monos: Vec<Exponents> = pairs.keys().cloned().collect();
                    for (e, _) in expr.terms() {
                        if !pairs.contains_key(e) {
                            monos.push(e.clone());
                        }
                    }
                    monos.sort();
                    for e in monos {
                        let coeff = expr.terms.get(&e).cloned().unwrap_or_default();
                        let blocks = match pairs.remove(&e) {
                            Some(s) => vec![(block, s)],
                            None => vec![],
                        };
                        let free: Vec<(usize, f64)> =
                            coeff.vars.iter().map(|(k, v)| (*k, -v)).collect();
                        if blocks.is_empty() && free.is_empty() {
                            if coeff.constant.abs() > 1e-14 * scale {
                                return Err(ProgramInfeasibility::Structural {
                                    label: label.clone(),
                                    monomial: e,
                                });
                            }
                            continue;
                        }
                        let row = prob.add_constraint(SdpConstraint {
                            blocks,
                            free,
                            rhs: coeff.constant,
                        });
                        rows.push((row, e));
                    }
                    sos_rows.push((block, rows));
                    block += 1;
                }
                Constraint::Linear {
                    coeffs,
                    rhs,
                    inequality,
                } => {
                    let blocks = if *inequality {
                        let mut s = SymSparse::new();
                        s.push(0, 0, 1.0);
                        block += 1;
                        vec![(block - 1, s)]
                    } else {
                        vec![]
                    };
                    prob.add_constraint(SdpConstraint {
                        blocks,
                        free: coeffs.clone(),
                        rhs: *rhs,
                    });
                }
                Constraint::GramTrace { .. } => {}
            }
        }
        for c in &self.constraints {
            if let Constraint::GramTrace { sos, value } = c {
                let (b, _) = sos_rows[*sos];
                let mut s = SymSparse::new();
                for i in 0..prob.block_dims()[b] {
                    s.push(i, i, 1.0);
                }
                prob.add_constraint(SdpConstraint {
                    blocks: vec![(b, s)],
                    free: vec![],
                    rhs: *value,
                });
            }
        }
        Ok(Compiled { prob, sos_rows })
    }

    /// Debug dump of the compiled SDP (see [`SdpProblem::dump`]).
    pub fn dump_sdp(&self) -> Option<String> {
        self.compile().ok().map(|c| c.prob.dump())
    }

    /// Solve and re-verify every sos constraint on the instantiated
    /// polynomials.
    pub fn solve(&self, opts: &SosOptions) -> Result<SosOutcome<SosSolution, ProgramInfeasibility>> {
        let compiled = match self.compile() {
            Ok(c) => c,
            Err(w) => return Ok(SosOutcome::Infeasible(w)),
        };
        let sol = match sdp::solve(&compiled.prob, &opts.sdp) {
            Ok(s) => s,
            Err(Error::IllConditioned) => {
                return Ok(SosOutcome::Unknown("SDP embedding ill-conditioned".into()))
            }
            Err(e) => return Err(e),
        };
        match sol.status {
            SdpStatus::Optimal => {}
            SdpStatus::PrimalInfeasible => {
                if !sdp::verify_infeasibility_ray(&compiled.prob, &sol.y, opts.tol_dual) {
                    return Ok(SosOutcome::Unknown("infeasibility ray failed verification".into()));
                }
                let moments = compiled
                    .sos_rows
                    .iter()
                    .map(|(_, rows)| {
                        rows.iter()
                            .map(|(r, e)| Moment {
                                e: e.clone(),
                                m: -sol.y[*r],
                            })
                            .collect()
                    })
                    .collect();
                return Ok(SosOutcome::Infeasible(ProgramInfeasibility::Ray { moments }));
            }
            SdpStatus::DualInfeasible => {
                return Ok(SosOutcome::Unknown("objective unbounded below".into()))
            }
            SdpStatus::Stalled => {
                return Ok(SosOutcome::Unknown(format!(
                    "SDP stalled after {} iterations (primal {:.1e}, dual {:.1e}, gap {:.1e})",
                    sol.iterations, sol.primal_residual, sol.dual_residual, sol.gap
                )))
            }
        }
        let values = sol.free.clone();
        let mut certificates = Vec::new();
        let mut sos_index = 0;
        for c in &self.constraints {
            let Constraint::Sos { expr, basis, label } = c else {
                continue;
            };
            let (block, _) = compiled.sos_rows[sos_index];
            sos_index += 1;
            let p = expr.instantiate(&values);
            let cert = repair_certificate(&p, basis, &sol.x[block]);
            let chk = cert.check(&p)?;
            let cert = if chk.passes(opts.tol_residual, opts.tol_psd) {
                cert
            } else {
                match check_sos_with_basis(&p, basis.clone(), opts)? {
                    SosOutcome::Feasible(c) => c,
                    _ => {
                        return Ok(SosOutcome::Unknown(format!(
                            "re-verification failed for '{label}' (residual {:.1e}, λ_min {:.1e})",
                            chk.residual, chk.lambda_min
                        )))
                    }
                }
            };
            certificates.push(LabeledCertificate {
                label: label.clone(),
                polynomial: p,
                certificate: cert,
            });
        }
        let objective = self.objective.iter().map(|(k, c)| c * values[*k]).sum();
        Ok(SosOutcome::Feasible(SosSolution {
            values,
            certificates,
            objective,
        }))
    }
}

/// Min/max partial degree over `vars` of the structurally nonzero terms.
fn degree_span<'a>(terms: impl Iterator<Item = &'a Exponents>, vars: Range<usize>) -> Option<(u32, u32)> {
    let mut span: Option<(u32, u32)> = None;
    for e in terms {
        let d = e.partial_degree(vars.clone());
        span = Some(match span {
            None => (d, d),
            Some((lo, hi)) => (lo.min(d), hi.max(d)),
        });
    }
    span
}

/// Gram basis for `expr`: all monomials whose total degree, and partial
/// degree in every block of `blocks`, lies in the half range
/// `[⌈min/2⌉, ⌊max/2⌋]` of the expression's own degrees; then basis
/// elements whose square cannot appear are dropped repeatedly.
pub fn gram_basis(expr: &AffinePoly, blocks: &[Range<usize>]) -> Vec<Exponents> {
    let n = expr.nvars();
    let support: Vec<&Exponents> = expr.terms().map(|(e, _)| e).collect();
    let Some((lo, hi)) = degree_span(support.iter().copied(), 0..n) else {
        return Vec::new();
    };
    let (lo, hi) = (lo.div_ceil(2), hi / 2);
    if lo > hi {
        return Vec::new();
    }
    let mut basis = monomials_in_range(n, lo, hi);
    for b in blocks {
        if let Some((blo, bhi)) = degree_span(support.iter().copied(), b.clone()) {
            let (blo, bhi) = (blo.div_ceil(2), bhi / 2);
            basis.retain(|e| {
                let d = e.partial_degree(b.clone());
                d >= blo && d <= bhi
            });
        }
    }
    let present: HashSet<&Exponents> = support.into_iter().collect();
    prune_diagonal(basis, &present)
}

/// Drop `z_i` while `z_i²` is neither a term nor an off-diagonal product.
fn prune_diagonal(mut basis: Vec<Exponents>, present: &HashSet<&Exponents>) -> Vec<Exponents> {
    loop {
        let mut off: HashSet<Exponents> = HashSet::new();
        for i in 0..basis.len() {
            for j in i + 1..basis.len() {
                off.insert(basis[i].mul(&basis[j]));
            }
        }
        let before = basis.len();
        basis.retain(|z| {
            let sq = z.mul(z);
            present.contains(&sq) || off.contains(&sq)
        });
        if basis.len() == before {
            return basis;
        }
    }
}

/// Project `q` onto `{Q : zᵀQz = p}` (entrywise least squares), then
/// alternate with PSD clipping a few times.
fn repair_certificate(p: &Polynomial, basis: &[Exponents], q: &DMatrix<f64>) -> GramCertificate {
    let n = basis.len();
    let mut groups: BTreeMap<Exponents, Vec<(usize, usize)>> = BTreeMap::new();
    for i in 0..n {
        for j in i..n {
            groups.entry(basis[i].mul(&basis[j])).or_default().push((i, j));
        }
    }
    let mut g = (q + q.transpose()) * 0.5;
    let project = |g: &mut DMatrix<f64>| {
        for (e, pairs) in &groups {
            let weight: f64 = pairs.iter().map(|&(i, j)| if i == j { 1.0 } else { 2.0 }).sum();
            let cur: f64 = pairs
                .iter()
                .map(|&(i, j)| if i == j { g[(i, i)] } else { 2.0 * g[(i, j)] })
                .sum();
            let delta = (p.coeff(e) - cur) / weight;
            for &(i, j) in pairs {
                g[(i, j)] += delta;
                if i != j {
                    g[(j, i)] += delta;
                }
            }
        }
    };
    project(&mut g);
    for _ in 0..5 {
        if n == 0 || sdp::min_eig(&g) >= 0.0 {
            break;
        }
        let eig = SymmetricEigen::new(g.clone());
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        g = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        g = (&g + g.transpose()) * 0.5;
        project(&mut g);
    }
    let mut cert = GramCertificate {
        nvars: p.nvars(),
        basis: basis.to_vec(),
        gram: g,
        residual: 0.0,
        lambda_min: 0.0,
    };
    if let Ok(chk) = cert.check(p) {
        cert.residual = chk.residual;
        cert.lambda_min = chk.lambda_min;
    }
    cert
}

fn moment_certificate(p: &Polynomial, basis: Vec<Exponents>, w: ProgramInfeasibility) -> MomentCertificate {
    let moments = match w {
        ProgramInfeasibility::Structural { monomial, .. } => vec![Moment {
            m: -p.coeff(&monomial).signum(),
            e: monomial,
        }],
        ProgramInfeasibility::Ray { mut moments } => moments.pop().unwrap_or_default(),
    };
    let mut cert = MomentCertificate {
        nvars: p.nvars(),
        basis,
        moments,
        pairing: 0.0,
        lambda_min: 0.0,
    };
    if let Ok((pairing, _)) = cert.check(p) {
        if pairing < 0.0 {
            for m in &mut cert.moments {
                m.m /= -pairing;
            }
        }
    }
    if let Ok((pairing, lam)) = cert.check(p) {
        cert.pairing = pairing;
        cert.lambda_min = lam;
    }
    cert
}

pub fn check_sos_with_basis(
    p: &Polynomial,
    basis: Vec<Exponents>,
    opts: &SosOptions,
) -> Result<SosOutcome<GramCertificate, MomentCertificate>> {
    let mut prog = SosProgram::new();
    prog.add_sos_with_basis(AffinePoly::from_poly(p), basis.clone(), "p");
    Ok(match prog.solve_single(opts)? {
        SosOutcome::Feasible(mut s) => SosOutcome::Feasible(s.certificates.remove(0).certificate),
        SosOutcome::Infeasible(w) => {
            let cert = moment_certificate(p, basis, w);
            if cert.verifies(p, opts.tol_dual) {
                SosOutcome::Infeasible(cert)
            } else {
                SosOutcome::Unknown("moment certificate failed verification".into())
            }
        }
        SosOutcome::Unknown(s) => SosOutcome::Unknown(s),
    })
}

impl SosProgram {
    /// Like [`SosProgram::solve`] but without the fallback re-solve, for
    /// single-constraint checks (the fallback would recurse).
    fn solve_single(&self, opts: &SosOptions) -> Result<SosOutcome<SosSolution, ProgramInfeasibility>> {
        let compiled = match self.compile() {
            Ok(c) => c,
            Err(w) => return Ok(SosOutcome::Infeasible(w)),
        };
        let Some(Constraint::Sos { expr, basis, label }) = self.constraints.first() else {
            return Err(Error::InvalidInput("single sos check without a constraint".into()));
        };
        if basis.is_empty() {
            // nothing to solve: expression must vanish identically
            return Ok(SosOutcome::Feasible(SosSolution {
                values: vec![],
                certificates: vec![LabeledCertificate {
                    label: label.clone(),
                    polynomial: expr.instantiate(&[]),
                    certificate: repair_certificate(&expr.instantiate(&[]), basis, &DMatrix::zeros(0, 0)),
                }],
                objective: 0.0,
            }));
        }
        let sol = match sdp::solve(&compiled.prob, &opts.sdp) {
            Ok(s) => s,
            Err(Error::IllConditioned) => {
                return Ok(SosOutcome::Unknown("SDP embedding ill-conditioned".into()))
            }
            Err(e) => return Err(e),
        };
        match sol.status {
            SdpStatus::Optimal => {
                let p = expr.instantiate(&sol.free);
                let cert = repair_certificate(&p, basis, &sol.x[0]);
                let chk = cert.check(&p)?;
                if !chk.passes(opts.tol_residual, opts.tol_psd) {
                    return Ok(SosOutcome::Unknown(format!(
                        "certificate failed verification (residual {:.1e}, λ_min {:.1e})",
                        chk.residual, chk.lambda_min
                    )));
                }
                Ok(SosOutcome::Feasible(SosSolution {
                    values: sol.free.clone(),
                    certificates: vec![LabeledCertificate {
                        label: label.clone(),
                        polynomial: p,
                        certificate: cert,
                    }],
                    objective: 0.0,
                }))
            }
            SdpStatus::PrimalInfeasible => {
                if !sdp::verify_infeasibility_ray(&compiled.prob, &sol.y, opts.tol_dual) {
                    return Ok(SosOutcome::Unknown("infeasibility ray failed verification".into()));
                }
                let rows = &compiled.sos_rows[0].1;
                let moments = rows
                    .iter()
                    .map(|(r, e)| Moment {
                        e: e.clone(),
                        m: -sol.y[*r],
                    })
                    .collect();
                Ok(SosOutcome::Infeasible(ProgramInfeasibility::Ray {
                    moments: vec![moments],
                }))
            }
            SdpStatus::DualInfeasible => Ok(SosOutcome::Unknown("objective unbounded below".into())),
            SdpStatus::Stalled => {
                // the best iterate often already verifies
                let p = expr.instantiate(&sol.free);
                let cert = repair_certificate(&p, basis, &sol.x[0]);
                let chk = cert.check(&p)?;
                if chk.passes(opts.tol_residual, opts.tol_psd) {
                    return Ok(SosOutcome::Feasible(SosSolution {
                        values: sol.free.clone(),
                        certificates: vec![LabeledCertificate {
                            label: label.clone(),
                            polynomial: p,
                            certificate: cert,
                        }],
                        objective: 0.0,
                    }));
                }
                Ok(SosOutcome::Unknown(format!(
                    "SDP stalled after {} iterations (primal {:.1e}, dual {:.1e}, gap {:.1e}; best iterate residual {:.1e}, λ_min {:.1e})",
                    sol.iterations, sol.primal_residual, sol.dual_residual, sol.gap, chk.residual, chk.lambda_min
                )))
            }
        }
    }
}

/// Is `p` a sum of squares?
pub fn check_sos(p: &Polynomial, opts: &SosOptions) -> Result<SosOutcome<GramCertificate, MomentCertificate>> {
    if p.degree() >= 0 && p.degree() % 2 == 1 {
        return Err(Error::OddDegree(p.degree()));
    }
    let basis = gram_basis(&AffinePoly::from_poly(p), &[]);
    check_sos_with_basis(p, basis, opts)
}

/// Certificate that `yᵀM(x)y` is sos with a `y`-bilinear basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSosCertificate {
    /// Number of `x` variables; `y` occupies the trailing `size` slots.
    pub nx: usize,
    pub size: usize,
    pub gram: GramCertificate,
}

impl MatrixSosCertificate {
    pub fn is_bilinear(&self) -> bool {
        self.gram
            .basis
            .iter()
            .all(|e| e.partial_degree(self.nx..self.nx + self.size) == 1)
    }
}

pub fn check_sos_matrix(
    m: &PolyMatrix,
    opts: &SosOptions,
) -> Result<SosOutcome<MatrixSosCertificate, MomentCertificate>> {
    if !m.is_symmetric() {
        return Err(Error::NotSymmetric);
    }
    let nx = m.nvars();
    let k = m.rows();
    let s = m.scalarize();
    let basis = gram_basis(&AffinePoly::from_poly(&s), &[nx..nx + k]);
    Ok(check_sos_with_basis(&s, basis, opts)?.map(|gram| MatrixSosCertificate { nx, size: k, gram }))
}

/// The three equivalent sos-convexity tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// `½p(x) + ½p(y) − p((x+y)/2)`, stated in `x = u+v, y = u−v`.
    LambdaHalf,
    /// `p(y) − p(x) − ∇p(x)ᵀ(y−x)`, stated in `(x, w = y−x)`.
    Gradient,
    /// `yᵀ∇²p(x)y`.
    #[default]
    Hessian,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Formulation::LambdaHalf, Formulation::Gradient, Formulation::Hessian];
}

impl FromStr for Formulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" | "lambda_half" => Ok(Formulation::LambdaHalf),
            "gradient" => Ok(Formulation::Gradient),
            "hessian" => Ok(Formulation::Hessian),
            other => Err(Error::InvalidInput(format!("unknown formulation '{other}'"))),
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Formulation::LambdaHalf => "lambda",
            Formulation::Gradient => "gradient",
            Formulation::Hessian => "hessian",
        })
    }
}

/// The polynomial in `2n` variables whose sos-ness is tested. All three
/// are linear in `p`.
pub fn sosconvex_polynomial(p: &Polynomial, f: Formulation) -> Polynomial {
    let n = p.nvars();
    let var = |i: usize| Polynomial::var(2 * n, i);
    match f {
        Formulation::Hessian => p.hessian().scalarize(),
        Formulation::Gradient => {
            let shifted: Vec<Polynomial> = (0..n).map(|i| &var(i) + &var(n + i)).collect();
            let p_xw = p.compose_with(&shifted).expect("matching dimension");
            let p_x = p.extend_vars(n);
            let mut lin = Polynomial::zero(2 * n);
            for (i, g) in p.gradient().iter().enumerate() {
                lin = &lin + &(&g.extend_vars(n) * &var(n + i));
            }
            &(&p_xw - &p_x) - &lin
        }
        Formulation::LambdaHalf => {
            let plus: Vec<Polynomial> = (0..n).map(|i| &var(i) + &var(n + i)).collect();
            let minus: Vec<Polynomial> = (0..n).map(|i| &var(i) - &var(n + i)).collect();
            let a = p.compose_with(&plus).expect("matching dimension");
            let b = p.compose_with(&minus).expect("matching dimension");
            &(&a + &b).scale(&0.5) - &p.extend_vars(n)
        }
    }
}

/// Gram basis for an sos-convexity constraint in `2n` variables.
pub fn sosconvex_basis(expr: &AffinePoly) -> Vec<Exponents> {
    let n = expr.nvars() / 2;
    gram_basis(expr, &[n..2 * n])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosConvexCertificate {
    pub formulation: Formulation,
    /// Dimension of `p`; the certificate lives in `2n` variables.
    pub n: usize,
    pub gram: GramCertificate,
}

impl SosConvexCertificate {
    pub fn check(&self, p: &Polynomial) -> Result<CertificateCheck> {
        self.gram.check(&sosconvex_polynomial(p, self.formulation))
    }
}

pub fn check_sosconvex(
    p: &Polynomial,
    f: Formulation,
    opts: &SosOptions,
) -> Result<SosOutcome<SosConvexCertificate, MomentCertificate>> {
    if p.degree() >= 0 && p.degree() % 2 == 1 {
        return Err(Error::OddDegree(p.degree()));
    }
    let g = sosconvex_polynomial(p, f);
    let basis = sosconvex_basis(&AffinePoly::from_poly(&g));
    Ok(check_sos_with_basis(&g, basis, opts)?.map(|gram| SosConvexCertificate {
        formulation: f,
        n: p.nvars(),
        gram,
    }))
}

/// Largest `ε` with `expr − ε·reference` sos, with its certificate.
pub fn max_sos_margin(
    expr: &Polynomial,
    reference: &Polynomial,
    blocks: &[Range<usize>],
    opts: &SosOptions,
) -> Result<SosOutcome<(f64, GramCertificate), ProgramInfeasibility>> {
    let mut prog = SosProgram::new();
    let eps = prog.new_var();
    let mut a = AffinePoly::from_poly(expr);
    a.add_var_poly(eps, reference, -1.0);
    let basis = gram_basis(&a, blocks);
    prog.add_sos_with_basis(a, basis, "margin");
    prog.minimize(vec![(eps, -1.0)]);
    Ok(prog.solve(opts)?.map(|mut s| (s.values[eps], s.certificates.remove(0).certificate)))
}

/// Reference form `|y|²·|x|^{2d−2}` for the Hessian margin of a degree-`2d`
/// form in `n` variables.
pub fn hessian_margin_reference(n: usize, degree: u32) -> Polynomial {
    let x = Polynomial::norm_sq_power(n, degree / 2 - 1).extend_vars(n);
    let mut y = Polynomial::zero(2 * n);
    for i in 0..n {
        let mut e = vec![0; 2 * n];
        e[n + i] = 2;
        y.add_term(Exponents::new(e), 1.0);
    }
    &x * &y
}
