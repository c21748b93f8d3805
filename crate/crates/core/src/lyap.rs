//! Common polynomial Lyapunov functions for switched linear systems and
//! joint spectral radius upper bounds by scaling bisection.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{monomials_in_range, Exponents, Polynomial, PolynomialMap};
use crate::sosprog::{
    gram_basis, sosconvex_basis, sosconvex_polynomial, Formulation, GramCertificate, ProgramInfeasibility,
    SosConvexCertificate, SosOptions, SosOutcome, SosProgram, Verdict, VerificationReport, VerifyTolerance,
};

pub const DEFAULT_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    /// Degree `2d` of V.
    pub degree: u32,
    /// Impose sos-convexity (otherwise V is only required to be sos).
    pub convex: bool,
    pub margin: f64,
    pub formulation: Formulation,
    pub sos: SosOptions,
}

impl SynthOptions {
    pub fn new(degree: u32, convex: bool) -> Self {
        SynthOptions {
            degree,
            convex,
            margin: DEFAULT_MARGIN,
            formulation: Formulation::Hessian,
            sos: SosOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.degree < 2 || self.degree % 2 == 1 {
            return Err(Error::InvalidInput(format!(
                "Lyapunov degree must be even and at least 2, got {}",
                self.degree
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidInput(format!("margin must be nonnegative, got {}", self.margin)));
        }
        Ok(())
    }
}

/// V with Gram certificates for `V − V(A_i x) − ε|x|^{2d}` per mode and for
/// sos-convexity (convex) or sos-ness (non-convex) of V.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    pub v: Polynomial,
    pub degree: u32,
    pub convex: bool,
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub convexity: Option<SosConvexCertificate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub positivity: Option<GramCertificate>,
    pub decrease: Vec<GramCertificate>,
}

/// `V(x) − V(A x) − ε(Σx²)^d`.
pub fn decrease_polynomial(v: &Polynomial, a: &DMatrix<f64>, margin: f64, degree: u32) -> Result<Polynomial> {
    decrease_polynomial_between(v, v, a, margin, degree)
}

/// `U(x) − V(A x) − ε(Σx²)^d`.
pub fn decrease_polynomial_between(
    u: &Polynomial,
    v: &Polynomial,
    a: &DMatrix<f64>,
    margin: f64,
    degree: u32,
) -> Result<Polynomial> {
    let map = PolynomialMap::from_matrix(a)?;
    let va = v.compose(&map)?;
    Ok(&(u - &va) - &Polynomial::norm_sq_power(v.nvars(), degree / 2).scale(&margin))
}

fn check_matrices(matrices: &[DMatrix<f64>]) -> Result<usize> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidInput("at least one matrix is required".into()))?;
    let n = first.nrows();
    for a in matrices {
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: if a.nrows() != n { a.nrows() } else { a.ncols() },
            });
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("matrices must be at least 1x1".into()));
    }
    Ok(n)
}

impl LyapunovCertificate {
    /// Re-check every Gram certificate against polynomials rebuilt from V
    /// and the matrices. No SDP is solved.
    pub fn verify(&self, matrices: &[DMatrix<f64>], tol: &VerifyTolerance) -> Result<VerificationReport> {
        let n = check_matrices(matrices)?;
        let mut report = VerificationReport::new();
        if self.v.nvars() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.v.nvars(),
            });
        }
        report.add_condition(
            "homogeneous",
            self.v.is_homogeneous() && self.v.degree() == self.degree as i32,
            format!("V has degree {} and must be a form of degree {}", self.v.degree(), self.degree),
        );
        report.add_condition(
            "margin",
            self.margin >= 0.0,
            format!("margin {} must be nonnegative", self.margin),
        );
        if self.decrease.len() != matrices.len() {
            report.add_failure(
                "decrease",
                format!("{} decrease certificates for {} modes", self.decrease.len(), matrices.len()),
            );
        } else {
            for (i, (a, cert)) in matrices.iter().zip(&self.decrease).enumerate() {
                let p = decrease_polynomial(&self.v, a, self.margin, self.degree)?;
                report.add_gram(format!("decrease[{i}]"), cert, &p, tol);
            }
        }
        match (&self.convexity, &self.positivity) {
            (Some(c), _) => match c.check(&self.v) {
                Ok(chk) => report.add_check("sosconvex", chk, tol),
                Err(e) => report.add_failure("sosconvex", e.to_string()),
            },
            (None, Some(g)) if !self.convex => report.add_gram("sos", g, &self.v, tol),
            _ => report.add_failure("positivity", "missing sos-convexity or sos certificate for V"),
        }
        Ok(report)
    }

    /// `min_i min_{|x|=1} V(x) − V(A_i x)` over `samples` random unit vectors.
    pub fn sampled_decrease<R: rand::Rng>(&self, matrices: &[DMatrix<f64>], samples: usize, rng: &mut R) -> f64 {
        sampled_min(&self.v, matrices, samples, rng)
    }
}

pub(crate) fn random_unit<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return x.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn sampled_min<R: rand::Rng>(v: &Polynomial, matrices: &[DMatrix<f64>], samples: usize, rng: &mut R) -> f64 {
    let n = v.nvars();
    let mut lo = f64::INFINITY;
    for _ in 0..samples {
        let x = random_unit(n, rng);
        let vx = v.eval_unchecked(&x);
        for a in matrices {
            let ax = a * nalgebra::DVector::from_column_slice(&x);
            lo = lo.min(vx - v.eval_unchecked(ax.as_slice()));
        }
    }
    lo
}

/// Evidence returned when the program is infeasible.
pub type LyapunovOutcome = SosOutcome<LyapunovCertificate, ProgramInfeasibility>;

enum Normalization {
    Pin,
    Trace,
}

/// Search for a common Lyapunov function of the given degree.
pub fn synth_common_lyapunov(matrices: &[DMatrix<f64>], opts: &SynthOptions) -> Result<LyapunovOutcome> {
    let n = check_matrices(matrices)?;
    opts.validate()?;
    match synth_with(matrices, n, opts, Normalization::Pin)? {
        SosOutcome::Unknown(first) => match synth_with(matrices, n, opts, Normalization::Trace)? {
            SosOutcome::Unknown(second) => Ok(SosOutcome::Unknown(format!("{first}; trace normalization: {second}"))),
            other => Ok(other),
        },
        other => Ok(other),
    }
}

fn synth_with(matrices: &[DMatrix<f64>], n: usize, opts: &SynthOptions, norm: Normalization) -> Result<LyapunovOutcome> {
    let d = opts.degree;
    let mut prog = SosProgram::new();
    let v = prog.new_unknown(n, monomials_in_range(n, d, d));
    let shape = if opts.convex {
        let expr = v.map_linear(|m| sosconvex_polynomial(m, opts.formulation));
        let basis = sosconvex_basis(&expr);
        prog.add_sos_with_basis(expr, basis, "shape")
    } else {
        let expr = v.as_affine();
        let basis = gram_basis(&expr, &[]);
        prog.add_sos_with_basis(expr, basis, "shape")
    };
    let reference = Polynomial::norm_sq_power(n, d / 2);
    for (i, a) in matrices.iter().enumerate() {
        let map = PolynomialMap::from_matrix(a)?;
        let mut dec = v.as_affine();
        dec.add(&v.map_linear(|m| m.compose(&map).expect("matching dimension")), -1.0);
        dec.add_poly(&reference, -opts.margin);
        prog.add_sos(dec, format!("decrease[{i}]"));
    }
    match norm {
        Normalization::Pin => {
            let mut e = vec![0; n];
            e[0] = d;
            let var = v.var_of(&Exponents::new(e)).expect("x1^2d is in the support");
            prog.add_eq(vec![(var, 1.0)], 1.0);
        }
        Normalization::Trace => {
            let size = prog.basis_len(shape) as f64;
            prog.add_gram_trace(shape, size);
        }
    }
    let sol = match prog.solve(&opts.sos)? {
        SosOutcome::Feasible(s) => s,
        SosOutcome::Infeasible(w) => return Ok(SosOutcome::Infeasible(w)),
        SosOutcome::Unknown(s) => return Ok(SosOutcome::Unknown(s)),
    };
    let vp = v.instantiate(&sol.values);
    let mut certs = sol.certificates.into_iter();
    let shape_cert = certs.next().expect("shape certificate").certificate;
    let decrease: Vec<GramCertificate> = certs.map(|c| c.certificate).collect();
    let (convexity, positivity) = if opts.convex {
        (
            Some(SosConvexCertificate {
                formulation: opts.formulation,
                n,
                gram: shape_cert,
            }),
            None,
        )
    } else {
        (None, Some(shape_cert))
    };
    let cert = LyapunovCertificate {
        v: vp,
        degree: d,
        convex: opts.convex,
        margin: opts.margin,
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

fn scaled(matrices: &[DMatrix<f64>], gamma: f64) -> Vec<DMatrix<f64>> {
    matrices.iter().map(|a| a / gamma).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct JsrOptions {
    pub synth: SynthOptions,
    /// Absolute width of the final bracket.
    pub tol: f64,
    /// Doublings of the initial upper bracket before giving up.
    pub max_doublings: u32,
}

impl JsrOptions {
    pub fn new(degree: u32, convex: bool) -> Self {
        JsrOptions {
            synth: SynthOptions::new(degree, convex),
            tol: 1e-3,
            max_doublings: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub gamma: f64,
    pub verdict: Verdict,
}

/// Result of the scaling bisection. `upper` is the smallest `γ` at which
/// `{A_i/γ}` was certified; `below` is the verdict at the largest tested
/// `γ` under it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsrBound {
    pub degree: u32,
    pub convex: bool,
    pub tol: f64,
    pub upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub certificate: Option<LyapunovCertificate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub below: Option<Probe>,
    pub probes: Vec<Probe>,
}

impl JsrBound {
    /// Whether the lower end of the bracket rests only on certified
    /// infeasibility.
    pub fn bracket_is_certified(&self) -> bool {
        self.below.is_some_and(|p| p.verdict == Verdict::Infeasible)
    }
}

/// Upper bound on the joint spectral radius by bisection on `γ`.
pub fn jsr_upper_bound(matrices: &[DMatrix<f64>], opts: &JsrOptions) -> Result<JsrBound> {
    check_matrices(matrices)?;
    opts.synth.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let mut probes = Vec::new();
    let run = |gammas: &[f64], probes: &mut Vec<Probe>| -> Result<Vec<LyapunovOutcome>> {
        let out: Vec<Result<LyapunovOutcome>> = gammas
            .par_iter()
            .map(|&g| synth_common_lyapunov(&scaled(matrices, g), &opts.synth))
            .collect();
        let out = out.into_iter().collect::<Result<Vec<_>>>()?;
        for (g, o) in gammas.iter().zip(&out) {
            probes.push(Probe {
                gamma: *g,
                verdict: o.verdict(),
            });
        }
        Ok(out)
    };

    let norm_max = matrices
        .iter()
        .map(|a| a.singular_values().max())
        .fold(0.0, f64::max);
    let mut hi = if norm_max > 0.0 { norm_max * (1.0 + opts.tol) } else { opts.tol };
    let mut best: Option<LyapunovCertificate> = None;
    let mut below: Option<Probe> = None;
    for k in 0..=opts.max_doublings {
        let g = hi * 2f64.powi(k as i32);
        let out = run(&[g], &mut probes)?.pop().expect("one outcome");
        match out {
            SosOutcome::Feasible(c) => {
                hi = g;
                best = Some(c);
                break;
            }
            other => {
                below = Some(Probe {
                    gamma: g,
                    verdict: other.verdict(),
                })
            }
        }
    }
    let Some(mut cert) = best else {
        return Ok(JsrBound {
            degree: opts.synth.degree,
            convex: opts.synth.convex,
            tol: opts.tol,
            upper: None,
            certificate: None,
            below,
            probes,
        });
    };
    let mut lo = below.map_or(0.0, |p| p.gamma);
    while hi - lo > opts.tol {
        let gammas: Vec<f64> = (1..4).map(|k| lo + (hi - lo) * k as f64 / 4.0).collect();
        let outs = run(&gammas, &mut probes)?;
        let mut new_hi = None;
        for (g, o) in gammas.iter().zip(outs) {
            if let SosOutcome::Feasible(c) = o {
                new_hi = Some((*g, c));
                break;
            }
        }
        let limit = match new_hi {
            Some((g, c)) => {
                hi = g;
                cert = c;
                g
            }
            None => hi,
        };
        for p in probes.iter().rev().take(3) {
            if p.gamma < limit && p.verdict != Verdict::Feasible && p.gamma >= lo {
                lo = p.gamma;
                below = Some(*p);
            }
        }
    }
    Ok(JsrBound {
        degree: opts.synth.degree,
        convex: opts.synth.convex,
        tol: opts.tol,
        upper: Some(hi),
        certificate: Some(cert),
        below,
        probes,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EscalationRow {
    pub degree: u32,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

/// Verdict of the synthesis at every even degree up to `max_degree`.
pub fn degree_escalation(
    matrices: &[DMatrix<f64>],
    convex: bool,
    max_degree: u32,
    base: &SynthOptions,
) -> Result<Vec<EscalationRow>> {
    check_matrices(matrices)?;
    if max_degree < 2 || max_degree % 2 == 1 {
        return Err(Error::InvalidInput(format!("max degree must be even and at least 2, got {max_degree}")));
    }
    let degrees: Vec<u32> = (1..=max_degree / 2).map(|k| 2 * k).collect();
    degrees
        .par_iter()
        .map(|&degree| {
            let opts = SynthOptions {
                degree,
                convex,
                ..*base
            };
            let out = synth_common_lyapunov(matrices, &opts)?;
            Ok(EscalationRow {
                degree,
                verdict: out.verdict(),
                detail: match out {
                    SosOutcome::Unknown(s) => Some(s),
                    _ => None,
                },
            })
        })
        .collect()
}

/// The matrices `A_1 = [[1,0],[1,0]]`, `A_2 = [[0,1],[0,−1]]` scaled by `γ`.
pub fn ando_shih(gamma: f64) -> Vec<DMatrix<f64>> {
    vec![
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]) * gamma,
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]) * gamma,
    ]
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn contraction_is_certified() {
        let a = vec![DMatrix::identity(2, 2) * 0.5];
        let cert = synth_common_lyapunov(&a, &SynthOptions::new(2, true))
            .unwrap()
            .feasible()
            .unwrap();
        assert!(cert.verify(&a, &VerifyTolerance::default()).unwrap().passed());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(cert.sampled_decrease(&a, 1000, &mut rng) >= cert.margin * (1.0 - 1e-3));
    }

    #[test]
    fn quadratic_fails_on_ando_shih_at_point_eight() {
        let m = ando_shih(0.8);
        let out = synth_common_lyapunov(&m, &SynthOptions::new(2, true)).unwrap();
        assert_eq!(out.verdict(), Verdict::Infeasible);
        let out = synth_common_lyapunov(&m, &SynthOptions::new(4, false)).unwrap();
        let cert = out.feasible().expect("quartic certificate");
        assert!(!cert.convex && cert.positivity.is_some());
        assert!(cert.verify(&m, &VerifyTolerance::default()).unwrap().passed());
    }

    #[test]
    fn example47_linearization_certificates() {
        let m = vec![
            DMatrix::from_row_slice(2, 2, &[-0.25, -0.25, -1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.75, 0.75, -0.5, 0.25]),
        ];
        // the printed matrices do admit a common quadratic: P below works
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.23, 0.23, 0.795]);
        for a in &m {
            assert!(crate::sdp::min_eig(&(&p - a.transpose() * &p * a)) > 7e-3);
        }
        assert_eq!(
            synth_common_lyapunov(&m, &SynthOptions::new(2, true)).unwrap().verdict(),
            Verdict::Feasible
        );
        let cert = synth_common_lyapunov(&m, &SynthOptions::new(4, true))
            .unwrap()
            .feasible()
            .unwrap();
        assert!(cert.convexity.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(cert.sampled_decrease(&m, 2000, &mut rng) >= cert.margin * (1.0 - 1e-3));
    }

    #[test]
    fn single_matrix_bound_tracks_spectral_radius() {
        let a = DMatrix::from_row_slice(2, 2, &[0.6, 1.5, 0.0, 0.7]);
        let rho = spectral_radius(&a);
        let b = jsr_upper_bound(&[a], &JsrOptions::new(2, true)).unwrap();
        let up = b.upper.unwrap();
        assert!(up >= rho - 1e-3 && up <= rho * 1.05, "{up} vs {rho}");
    }

    #[test]
    fn escalation_table_has_every_even_degree() {
        let rows = degree_escalation(&ando_shih(0.5), true, 4, &SynthOptions::new(2, true)).unwrap();
        assert_eq!(rows.iter().map(|r| r.degree).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(rows[0].verdict, Verdict::Feasible);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let a = vec![DMatrix::identity(2, 2)];
        assert!(synth_common_lyapunov(&a, &SynthOptions::new(3, true)).is_err());
        let mixed = vec![DMatrix::identity(2, 2), DMatrix::identity(3, 3)];
        assert!(synth_common_lyapunov(&mixed, &SynthOptions::new(2, true)).is_err());
        assert!(synth_common_lyapunov(&[], &SynthOptions::new(2, true)).is_err());
    }

    #[test]
    fn certificate_json_round_trips() {
        let a = vec![DMatrix::identity(2, 2) * 0.5];
        let cert = synth_common_lyapunov(&a, &SynthOptions::new(2, false))
            .unwrap()
            .feasible()
            .unwrap();
        let s = crate::json::to_string(&cert).unwrap();
        let back: LyapunovCertificate = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cert);
    }
}
