//! Multiple Lyapunov functions: forms `V_1..V_K` with
//! `V_{k(i,j)}(x) − V_j(A_i x)` sos for an assignment `k`, certifying that
//! `W = max_k V_k` decreases along every mode.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyap::{decrease_polynomial_between, DEFAULT_MARGIN};
use crate::poly::{monomials_in_range, Exponents, Polynomial, PolynomialMap};
use crate::sosprog::{
    gram_basis, sosconvex_basis, sosconvex_polynomial, Formulation, GramCertificate, SosConvexCertificate,
    SosOptions, SosOutcome, SosProgram, VerificationReport, VerifyTolerance,
};

/// Default bound on the number of assignments `K^{mK}` tried by enumeration.
pub const ENUMERATION_CAP: usize = 4096;

/// `table[i][j]` is the (0-based) index `k` of the function that must
/// dominate `V_j ∘ A_i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub k: usize,
    pub table: Vec<Vec<usize>>,
}

impl Assignment {
    pub fn validate(&self, modes: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if self.table.len() != modes {
            return Err(Error::InvalidInput(format!(
                "assignment has {} rows for {modes} modes",
                self.table.len()
            )));
        }
        for (i, row) in self.table.iter().enumerate() {
            if row.len() != self.k {
                return Err(Error::InvalidInput(format!(
                    "assignment row {i} has {} entries, expected K = {}",
                    row.len(),
                    self.k
                )));
            }
            if let Some(&bad) = row.iter().find(|&&t| t >= self.k) {
                return Err(Error::InvalidInput(format!("assignment row {i} maps to {bad}, out of range")));
            }
        }
        Ok(())
    }

    /// Number of assignments for `modes` modes and `k` functions, or `None`
    /// on overflow.
    pub fn count(modes: usize, k: usize) -> Option<usize> {
        let exp = u32::try_from(modes.checked_mul(k)?).ok()?;
        k.checked_pow(exp)
    }

    /// The `index`-th assignment in lexicographic order of the flattened
    /// table (row-major in `(i, j)`).
    pub fn nth(modes: usize, k: usize, mut index: usize) -> Assignment {
        let mut flat = vec![0; modes * k];
        for slot in flat.iter_mut().rev() {
            *slot = index % k;
            index /= k;
        }
        Assignment {
            k,
            table: flat.chunks(k).map(|c| c.to_vec()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum AssignmentChoice {
    Enumerate,
    Explicit(Assignment),
}

#[derive(Clone, Copy, Debug)]
pub struct MultiOptions {
    pub k: usize,
    pub degree: u32,
    pub convex: bool,
    pub margin: f64,
    pub formulation: Formulation,
    pub sos: SosOptions,
    pub enumeration_cap: usize,
}

impl MultiOptions {
    pub fn new(k: usize, degree: u32) -> Self {
        MultiOptions {
            k,
            degree,
            convex: true,
            margin: DEFAULT_MARGIN,
            formulation: Formulation::Hessian,
            sos: SosOptions::default(),
            enumeration_cap: ENUMERATION_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseCertificate {
    pub mode: usize,
    pub from: usize,
    pub to: usize,
    pub gram: GramCertificate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLyapunovCertificate {
    pub v: Vec<Polynomial>,
    pub degree: u32,
    pub convex: bool,
    pub margin: f64,
    pub assignment: Assignment,
    /// Per V_k: sos-convexity (convex) or plain sos certificate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub convexity: Vec<SosConvexCertificate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positivity: Vec<GramCertificate>,
    /// `V_{k(i,j)}(x) − V_j(A_i x) − ε|x|^{2d}`, row-major in `(i, j)`.
    pub decrease: Vec<DecreaseCertificate>,
}

impl MultiLyapunovCertificate {
    pub fn verify(&self, matrices: &[DMatrix<f64>], tol: &VerifyTolerance) -> Result<VerificationReport> {
        let mut report = VerificationReport::new();
        if let Err(e) = self.assignment.validate(matrices.len()) {
            report.add_failure("assignment", e.to_string());
            return Ok(report);
        }
        let k = self.assignment.k;
        report.add_condition(
            "count",
            self.v.len() == k,
            format!("{} functions for K = {k}", self.v.len()),
        );
        for (idx, v) in self.v.iter().enumerate() {
            report.add_condition(
                format!("homogeneous[{idx}]"),
                v.is_homogeneous() && v.degree() == self.degree as i32,
                format!("V_{idx} must be a form of degree {}", self.degree),
            );
            let shape = if self.convex {
                self.convexity.get(idx).map(|c| c.check(v))
            } else {
                self.positivity.get(idx).map(|g| g.check(v))
            };
            match shape {
                Some(Ok(chk)) => report.add_check(format!("shape[{idx}]"), chk, tol),
                Some(Err(e)) => report.add_failure(format!("shape[{idx}]"), e.to_string()),
                None => report.add_failure(format!("shape[{idx}]"), "missing certificate"),
            }
        }
        if !report.passed() {
            return Ok(report);
        }
        let expected: Vec<(usize, usize, usize)> = self
            .assignment
            .table
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &t)| (i, j, t)))
            .collect();
        let found: Vec<(usize, usize, usize)> = self.decrease.iter().map(|d| (d.mode, d.from, d.to)).collect();
        if expected != found {
            report.add_failure("decrease", "decrease certificates do not match the assignment");
            return Ok(report);
        }
        for d in &self.decrease {
            let p = decrease_polynomial_between(
                &self.v[d.to],
                &self.v[d.from],
                &matrices[d.mode],
                self.margin,
                self.degree,
            )?;
            report.add_gram(format!("decrease[{},{}]", d.mode, d.from), &d.gram, &p, tol);
        }
        Ok(report)
    }

    /// `W(x) = max_k V_k(x)`.
    pub fn eval_max(&self, x: &[f64]) -> Result<f64> {
        eval_max(&self.v, x)
    }
}

pub fn eval_max(v: &[Polynomial], x: &[f64]) -> Result<f64> {
    let mut w = f64::NEG_INFINITY;
    for p in v {
        w = w.max(p.eval(x)?);
    }
    Ok(w)
}

/// Smallest sampled `W(x) − W(A_i x)` over random unit vectors, relative to
/// `W(x)`.
pub fn sampled_max_decrease<R: rand::Rng>(
    cert: &MultiLyapunovCertificate,
    matrices: &[DMatrix<f64>],
    samples: usize,
    rng: &mut R,
) -> f64 {
    let n = cert.v[0].nvars();
    let mut lo = f64::INFINITY;
    for _ in 0..samples {
        let x = crate::lyap::random_unit(n, rng);
        let wx = eval_max(&cert.v, &x).expect("dimension checked");
        for a in matrices {
            let ax = a * DVector::from_column_slice(&x);
            let wa = eval_max(&cert.v, ax.as_slice()).expect("dimension checked");
            lo = lo.min((wx - wa) / wx);
        }
    }
    lo
}

fn check_matrices(matrices: &[DMatrix<f64>]) -> Result<usize> {
    let n = matrices
        .first()
        .ok_or_else(|| Error::InvalidInput("at least one matrix is required".into()))?
        .nrows();
    for a in matrices {
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: a.nrows().max(a.ncols()),
            });
        }
    }
    Ok(n)
}

/// Synthesize `V_1..V_K` for one assignment or the first feasible one in
/// lexicographic order.
pub fn synth_multi(
    matrices: &[DMatrix<f64>],
    choice: &AssignmentChoice,
    opts: &MultiOptions,
) -> Result<SosOutcome<MultiLyapunovCertificate, String>> {
    let n = check_matrices(matrices)?;
    if opts.k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    if opts.degree < 2 || opts.degree % 2 == 1 {
        return Err(Error::InvalidInput(format!(
            "degree must be even and at least 2, got {}",
            opts.degree
        )));
    }
    let m = matrices.len();
    match choice {
        AssignmentChoice::Explicit(a) => {
            a.validate(m)?;
            if a.k != opts.k {
                return Err(Error::InvalidInput(format!(
                    "assignment is for K = {}, options ask for K = {}",
                    a.k, opts.k
                )));
            }
            solve_assignment(matrices, n, a, opts)
        }
        AssignmentChoice::Enumerate => {
            let count = Assignment::count(m, opts.k).unwrap_or(usize::MAX);
            if count > opts.enumeration_cap {
                return Err(Error::EnumerationTooLarge {
                    count,
                    cap: opts.enumeration_cap,
                });
            }
            let unknown = Mutex::new(Vec::new());
            let found = (0..count).into_par_iter().find_map_first(|idx| {
                let a = Assignment::nth(m, opts.k, idx);
                match solve_assignment(matrices, n, &a, opts) {
                    Ok(SosOutcome::Feasible(c)) => Some(Ok(c)),
                    Ok(SosOutcome::Infeasible(_)) => None,
                    Ok(SosOutcome::Unknown(s)) => {
                        unknown.lock().expect("not poisoned").push((idx, s));
                        None
                    }
                    Err(e) => Some(Err(e)),
                }
            });
            match found {
                Some(r) => r.map(SosOutcome::Feasible),
                None => {
                    let mut unknown = unknown.into_inner().expect("not poisoned");
                    if unknown.is_empty() {
                        return Err(Error::EnumerationExhausted { count });
                    }
                    unknown.sort_by_key(|(idx, _)| *idx);
                    Ok(SosOutcome::Unknown(format!(
                        "{} of {count} assignments undecided; first: {}",
                        unknown.len(),
                        unknown[0].1
                    )))
                }
            }
        }
    }
}

fn solve_assignment(
    matrices: &[DMatrix<f64>],
    n: usize,
    a: &Assignment,
    opts: &MultiOptions,
) -> Result<SosOutcome<MultiLyapunovCertificate, String>> {
    match solve_normalized(matrices, n, a, opts, true)? {
        SosOutcome::Unknown(first) => match solve_normalized(matrices, n, a, opts, false)? {
            SosOutcome::Unknown(second) => Ok(SosOutcome::Unknown(format!("{first}; trace normalization: {second}"))),
            other => Ok(other),
        },
        other => Ok(other),
    }
}

/// Only V_1 is normalized: the decrease conditions couple the relative
/// scales of the V_k, so pinning each one separately would cut feasibility.
fn solve_normalized(
    matrices: &[DMatrix<f64>],
    n: usize,
    a: &Assignment,
    opts: &MultiOptions,
    pin: bool,
) -> Result<SosOutcome<MultiLyapunovCertificate, String>> {
    let d = opts.degree;
    let mut prog = SosProgram::new();
    let vs: Vec<_> = (0..a.k).map(|_| prog.new_unknown(n, monomials_in_range(n, d, d))).collect();
    let mut shapes = Vec::with_capacity(a.k);
    for (idx, v) in vs.iter().enumerate() {
        let sos = if opts.convex {
            let expr = v.map_linear(|p| sosconvex_polynomial(p, opts.formulation));
            let basis = sosconvex_basis(&expr);
            prog.add_sos_with_basis(expr, basis, format!("shape[{idx}]"))
        } else {
            let expr = v.as_affine();
            let basis = gram_basis(&expr, &[]);
            prog.add_sos_with_basis(expr, basis, format!("shape[{idx}]"))
        };
        shapes.push(sos);
    }
    let reference = Polynomial::norm_sq_power(n, d / 2);
    let maps = matrices
        .iter()
        .map(PolynomialMap::from_matrix)
        .collect::<Result<Vec<_>>>()?;
    for (i, row) in a.table.iter().enumerate() {
        for (j, &t) in row.iter().enumerate() {
            let mut dec = vs[t].as_affine();
            dec.add(&vs[j].map_linear(|p| p.compose(&maps[i]).expect("matching dimension")), -1.0);
            dec.add_poly(&reference, -opts.margin);
            prog.add_sos(dec, format!("decrease[{i},{j}]"));
        }
    }
    if pin {
        let mut e = vec![0; n];
        e[0] = d;
        let var = vs[0].var_of(&Exponents::new(e)).expect("x1^2d is in the support");
        prog.add_eq(vec![(var, 1.0)], 1.0);
    } else {
        let size = prog.basis_len(shapes[0]) as f64;
        prog.add_gram_trace(shapes[0], size);
    }
    let sol = match prog.solve(&opts.sos)? {
        SosOutcome::Feasible(s) => s,
        SosOutcome::Infeasible(w) => return Ok(SosOutcome::Infeasible(format!("{w:?}"))),
        SosOutcome::Unknown(s) => return Ok(SosOutcome::Unknown(s)),
    };
    let v: Vec<Polynomial> = vs.iter().map(|u| u.instantiate(&sol.values)).collect();
    let mut certs = sol.certificates.into_iter().map(|c| c.certificate);
    let shape_certs: Vec<GramCertificate> = certs.by_ref().take(a.k).collect();
    let decrease: Vec<DecreaseCertificate> = a
        .table
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &t)| (i, j, t)))
        .zip(certs)
        .map(|((mode, from, to), gram)| DecreaseCertificate { mode, from, to, gram })
        .collect();
    let (convexity, positivity) = if opts.convex {
        (
            shape_certs
                .into_iter()
                .map(|gram| SosConvexCertificate {
                    formulation: opts.formulation,
                    n,
                    gram,
                })
                .collect(),
            Vec::new(),
        )
    } else {
        (Vec::new(), shape_certs)
    };
    let cert = MultiLyapunovCertificate {
        v,
        degree: d,
        convex: opts.convex,
        margin: opts.margin,
        assignment: a.clone(),
        convexity,
        positivity,
        decrease,
    };
    let report = cert.verify(matrices, &VerifyTolerance::from(&opts.sos))?;
    if !report.passed() {
        return Ok(SosOutcome::Unknown(format!(
            "certificate failed independent verification: {}",
            report.failures().join(", ")
        )));
    }
    Ok(SosOutcome::Feasible(cert))
}
