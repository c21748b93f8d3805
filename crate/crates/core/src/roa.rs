//! Region-of-attraction certificates for switched polynomial systems:
//! a sublevel set `{V <= β}` of an sos-convex form is certified through
//! Positivstellensatz identities
//!
//! `−1 = t(x,y)(|x|²y − 1) + Σ_a σ_a(x,y) (β−V)^{a_0} Π_i (V(f_i(x)) − V(x))^{a_i}`.
//!
//! The default template writes one identity per mode, which certifies
//! decrease of every mode on the sublevel set. The joint template (a single
//! identity over all products) only rules out points where all modes fail
//! to decrease at once.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use num_rational::BigRational;
use num_traits::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyap::{synth_common_lyapunov, LyapunovCertificate, SynthOptions};
use crate::poly::{monomials_in_range, Coefficient, Exponents, Polynomial, PolynomialMap, RationalPolynomial, SwitchedSystem};
use crate::sdp::{self, SdpConstraint, SdpProblem, SdpStatus, SymSparse};
use crate::sosprog::{
    check_sos_with_basis, check_sosconvex, gram_basis, AffinePoly, Formulation, GramCertificate, SosConvexCertificate,
    SosOptions, SosOutcome, Verdict, VerificationReport, VerifyTolerance,
};

/// Jacobian at the origin of a map that fixes it.
pub fn linearize(map: &PolynomialMap) -> Result<DMatrix<f64>> {
    if !map.fixes_origin() {
        return Err(Error::NonzeroConstantTerm { mode: 0 });
    }
    Ok(map.linear_part())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// One identity per mode over `(β−V)^{a_0} g_i^{a_i}`.
    #[default]
    PerMode,
    /// A single identity over all `2^{m+1}` products.
    Joint,
}

impl FromStr for TemplateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_mode" | "per-mode" => Ok(TemplateKind::PerMode),
            "joint" => Ok(TemplateKind::Joint),
            other => Err(Error::InvalidInput(format!("unknown template '{other}'"))),
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::PerMode => "per_mode",
            TemplateKind::Joint => "joint",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RoaOptions {
    /// Degree cap `2r` in x of the multipliers of nontrivial products.
    pub deg_mult: u32,
    pub template: TemplateKind,
    /// Joint template: keep only index vectors with at most one nonzero
    /// beyond `a_0`. Per-mode template: drop the `(β−V)·g_i` product.
    pub pruned: bool,
    pub sos: SosOptions,
    /// Margin for the positive-definiteness check of V.
    pub margin: f64,
    pub tol_rel: f64,
    pub beta_probe: f64,
    pub beta_cap: f64,
    pub beta_floor: f64,
}

impl RoaOptions {
    pub fn new(deg_mult: u32) -> Self {
        RoaOptions {
            deg_mult,
            template: TemplateKind::PerMode,
            pruned: false,
            sos: SosOptions::default(),
            margin: crate::lyap::DEFAULT_MARGIN,
            tol_rel: 1e-2,
            beta_probe: 1.0,
            beta_cap: 65536.0,
            beta_floor: 1e-9,
        }
    }
}

/// Index vectors `a ∈ {0,1}^{m+1}` in lexicographic order.
pub fn index_set(m: usize, pruned: bool) -> Vec<Vec<u8>> {
    (0u64..1 << (m + 1))
        .map(|bits| (0..=m).map(|i| ((bits >> (m - i)) & 1) as u8).collect::<Vec<u8>>())
        .filter(|a| !pruned || a[1..].iter().filter(|&&v| v == 1).count() <= 1)
        .collect()
}

/// Index vectors of the identity for `mode` (`None` for the joint one).
pub fn identity_indices(m: usize, mode: Option<usize>, pruned: bool) -> Vec<Vec<u8>> {
    match mode {
        None => index_set(m, pruned),
        Some(i) => index_set(m, false)
            .into_iter()
            .filter(|a| a[1..].iter().enumerate().all(|(j, &v)| v == 0 || j == i))
            .filter(|a| !(pruned && a[0] == 1 && a[i + 1] == 1))
            .collect(),
    }
}

/// The power `k` in `−|x|^{2k}`: the smallest even integer with `2k >= deg V`.
pub fn lhs_exponent(deg_v: u32) -> u32 {
    2 * deg_v.div_ceil(4).max(1)
}

/// `(β−V)^{a_0} Π (V∘f_i − V)^{a_i}` over any coefficient field.
fn product_factor<C: Coefficient>(v: &Polynomial<C>, diffs: &[Polynomial<C>], beta: &C, a: &[u8]) -> Polynomial<C> {
    let n = v.nvars();
    let mut out = Polynomial::one(n);
    if a[0] == 1 {
        out = &out * &(&Polynomial::constant(n, beta.clone()) - v);
    }
    for (d, &ai) in diffs.iter().zip(&a[1..]) {
        if ai == 1 {
            out = &out * d;
        }
    }
    out
}

fn mode_differences<C: Coefficient>(v: &Polynomial<C>, modes: &[PolynomialMap<C>]) -> Result<Vec<Polynomial<C>>> {
    modes.iter().map(|f| Ok(&v.compose(f)? - v)).collect()
}

fn rational_map(f: &PolynomialMap) -> PolynomialMap<BigRational> {
    PolynomialMap::new(f.components().iter().map(|c| c.to_rational()).collect()).expect("same shape")
}

fn rat(v: f64) -> BigRational {
    <BigRational as Coefficient>::from_f64(v)
}

/// `p(ρx)`.
fn dilate(p: &Polynomial, rho: f64) -> Polynomial {
    let mut out = Polynomial::zero(p.nvars());
    for (e, c) in p.terms() {
        out.add_term(e.clone(), c * rho.powi(e.degree() as i32));
    }
    out
}

/// One sos multiplier `σ_a = zᵀQz` of the product indexed by `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multiplier {
    pub a: Vec<u8>,
    pub gram: GramCertificate,
}

/// One Positivstellensatz identity. Variables of `t` and the multipliers
/// are `(x_1..x_n, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StengleIdentity {
    /// The mode this identity speaks for; `None` for the joint identity.
    pub mode: Option<usize>,
    pub t: Polynomial,
    pub multipliers: Vec<Multiplier>,
    /// Max coefficient of `1 + t(|x|²y−1) + Σ σ_a g_a`, exact.
    pub residual: f64,
    /// Largest coefficient among the summands.
    pub scale: f64,
}

impl StengleIdentity {
    /// Exact coefficientwise residual and scale against `V`, `β`.
    pub fn residual_against(&self, v: &Polynomial, beta: f64, system: &SwitchedSystem) -> Result<(f64, f64)> {
        let n = system.dim();
        let m = system.num_modes();
        let nv = n + 1;
        if self.t.nvars() != nv {
            return Err(Error::DimensionMismatch {
                expected: nv,
                found: self.t.nvars(),
            });
        }
        let v = v.to_rational();
        let modes: Vec<_> = system.modes().iter().map(rational_map).collect();
        let diffs = mode_differences(&v, &modes)?;
        let beta = rat(beta);
        let s = RationalPolynomial::norm_sq_power(n, 1).extend_vars(1);
        let y = RationalPolynomial::var(nv, n);
        let tt = &self.t.to_rational() * &(&(&s * &y) - &RationalPolynomial::from_i64(nv, 1));
        let mut scale = tt.to_f64().max_abs_coeff();
        let mut sum = &RationalPolynomial::from_i64(nv, 1) + &tt;
        for mult in &self.multipliers {
            if mult.a.len() != m + 1 || mult.a.iter().any(|&b| b > 1) {
                return Err(Error::Verification(format!("bad multiplier index {:?}", mult.a)));
            }
            if mult.gram.nvars != nv {
                return Err(Error::DimensionMismatch {
                    expected: nv,
                    found: mult.gram.nvars,
                });
            }
            let g = product_factor(&v, &diffs, &beta, &mult.a).extend_vars(1);
            let term = &rational_gram_polynomial(&mult.gram) * &g;
            scale = scale.max(term.to_f64().max_abs_coeff());
            sum = &sum + &term;
        }
        let residual = sum
            .terms()
            .map(|(_, c)| Coefficient::to_f64(&c.abs()))
            .fold(0.0, f64::max);
        Ok((residual, scale))
    }
}

/// Certificate that `{V <= β}` lies in the region of attraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoaCertificate {
    pub v: Polynomial,
    pub beta: f64,
    pub deg_mult: u32,
    pub template: TemplateKind,
    pub pruned: bool,
    pub convexity: SosConvexCertificate,
    /// Gram certificate for `V − margin·|x|^{deg V}`.
    pub positivity: GramCertificate,
    pub margin: f64,
    pub identities: Vec<StengleIdentity>,
}

impl RoaCertificate {
    /// Worst exact identity residual and the matching scale.
    pub fn identity_residual(&self, system: &SwitchedSystem) -> Result<(f64, f64)> {
        if self.v.nvars() != system.dim() {
            return Err(Error::DimensionMismatch {
                expected: system.dim(),
                found: self.v.nvars(),
            });
        }
        let mut worst = (0.0, 0.0);
        for id in &self.identities {
            let (r, s) = id.residual_against(&self.v, self.beta, system)?;
            if r / (1.0 + s) >= worst.0 / (1.0 + worst.1) {
                worst = (r, s);
            }
        }
        Ok(worst)
    }

    /// Check every identity, every multiplier Gram matrix and the
    /// preconditions on V, without solving anything.
    pub fn verify(&self, system: &SwitchedSystem, tol: &VerifyTolerance) -> Result<VerificationReport> {
        if self.v.nvars() != system.dim() {
            return Err(Error::DimensionMismatch {
                expected: system.dim(),
                found: self.v.nvars(),
            });
        }
        let m = system.num_modes();
        let mut report = VerificationReport::new();
        report.add_condition("beta", self.beta > 0.0, format!("beta = {} must be positive", self.beta));
        let modes: Vec<Option<usize>> = self.identities.iter().map(|id| id.mode).collect();
        let expected: Vec<Option<usize>> = match self.template {
            TemplateKind::PerMode => (0..m).map(Some).collect(),
            TemplateKind::Joint => vec![None],
        };
        report.add_condition(
            "coverage",
            modes == expected,
            format!("identities cover {modes:?}, expected {expected:?}"),
        );
        for id in &self.identities {
            let label = match id.mode {
                Some(i) => format!("mode{i}"),
                None => "joint".to_string(),
            };
            let allowed = identity_indices(m, id.mode, self.pruned);
            report.add_condition(
                format!("{label}.indices"),
                id.multipliers.iter().all(|mu| allowed.contains(&mu.a)),
                "multiplier index outside the template",
            );
            let (residual, scale) = id.residual_against(&self.v, self.beta, system)?;
            report.add_condition(
                format!("{label}.identity"),
                residual <= tol.residual * (1.0 + scale),
                format!("identity residual {residual:e} against scale {scale:e}"),
            );
            for mult in &id.multipliers {
                let lam = if mult.gram.basis.is_empty() { 0.0 } else { sdp::min_eig(&mult.gram.gram) };
                let symmetric = mult.gram.gram == mult.gram.gram.transpose();
                report.add_condition(
                    format!("{label}.sigma{:?}", mult.a),
                    symmetric && lam >= -tol.psd * (1.0 + mult.gram.gram.norm()),
                    format!("λ_min = {lam:e}"),
                );
            }
        }
        report.add_condition(
            "v_form",
            self.v.is_homogeneous() && self.v.degree() >= 2 && self.v.degree() % 2 == 0,
            "V must be an even-degree form",
        );
        match self.convexity.check(&self.v) {
            Ok(chk) => report.add_check("sosconvex", chk, tol),
            Err(e) => report.add_failure("sosconvex", e.to_string()),
        }
        let pd = positivity_polynomial(&self.v, self.margin);
        report.add_gram("positivity", &self.positivity, &pd, tol);
        report.add_condition("margin", self.margin > 0.0, "positivity margin must be positive");
        Ok(report)
    }
}

fn positivity_polynomial(v: &Polynomial, margin: f64) -> Polynomial {
    let d = v.degree().max(0) as u32;
    v - &Polynomial::norm_sq_power(v.nvars(), d / 2).scale(&margin)
}

fn rational_gram_polynomial(g: &GramCertificate) -> RationalPolynomial {
    let mut p = RationalPolynomial::zero(g.nvars);
    let k = g.basis.len();
    for i in 0..k {
        for j in 0..k {
            let q = g.gram[(i, j)];
            if q != 0.0 {
                p.add_term(g.basis[i].mul(&g.basis[j]), rat(q));
            }
        }
    }
    p
}

/// Certified facts about V that every β probe reuses.
#[derive(Clone, Debug)]
pub struct VCertificates {
    pub convexity: SosConvexCertificate,
    pub positivity: GramCertificate,
    pub margin: f64,
}

/// Check that V is an sos-convex positive definite form.
pub fn certify_v(v: &Polynomial, opts: &RoaOptions) -> Result<SosOutcome<VCertificates, String>> {
    if !v.is_homogeneous() || v.degree() < 2 || v.degree() % 2 == 1 {
        return Err(Error::InvalidInput("V must be a form of even degree at least 2".into()));
    }
    let convexity = match check_sosconvex(v, Formulation::Hessian, &opts.sos)? {
        SosOutcome::Feasible(c) => c,
        SosOutcome::Infeasible(_) => return Ok(SosOutcome::Infeasible("V is not sos-convex".into())),
        SosOutcome::Unknown(s) => return Ok(SosOutcome::Unknown(s)),
    };
    let pd = positivity_polynomial(v, opts.margin);
    let basis = gram_basis(&AffinePoly::from_poly(&pd), &[]);
    let positivity = match check_sos_with_basis(&pd, basis, &opts.sos)? {
        SosOutcome::Feasible(c) => c,
        SosOutcome::Infeasible(_) => {
            return Ok(SosOutcome::Infeasible("V fails the positive definiteness margin".into()))
        }
        SosOutcome::Unknown(s) => return Ok(SosOutcome::Unknown(s)),
    };
    Ok(SosOutcome::Feasible(VCertificates {
        convexity,
        positivity,
        margin: opts.margin,
    }))
}

/// Split a polynomial in `(x, y)` into its coefficients `P_j(x)` of `y^j`.
fn split_y(p: &Polynomial, n: usize) -> Vec<Polynomial> {
    let mut out: Vec<Polynomial> = Vec::new();
    for (e, c) in p.terms() {
        let j = e.powers()[n] as usize;
        while out.len() <= j {
            out.push(Polynomial::zero(n));
        }
        out[j].add_term(Exponents::new(e.powers()[..n].to_vec()), *c);
    }
    out
}

/// Smallest value of V over a fixed spread of unit directions; only used
/// to choose the working scale.
fn sphere_min(v: &Polynomial) -> f64 {
    let n = v.nvars();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best = f64::INFINITY;
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        best = best.min(v.eval_unchecked(&e));
    }
    for _ in 0..512 {
        let u = crate::lyap::random_unit(n, &mut rng);
        best = best.min(v.eval_unchecked(&u));
    }
    best
}

struct Block {
    a: Vec<u8>,
    /// Monomials in x.
    basis: Vec<Exponents>,
    /// Factor mapping the working-scale Gram matrix back: `Q = c·D Q̂ D`.
    back: f64,
}

/// SDP for one identity (after forced-zero reduction), posed in the dilated variable `x = ρx̂` where
/// `{V <= β}` sits roughly in the unit ball. With `σ_a = y^k σ̃_a(x)` the
/// identity reduces to the polynomial equation `Σ_a σ̃_a p_a = −|x|^{2k}`
/// and `t` follows by division.
struct Template {
    prob: SdpProblem,
    blocks: Vec<Block>,
    rho: f64,
    k: u32,
}

fn build_template(
    system: &SwitchedSystem,
    v: &Polynomial,
    beta: f64,
    mode: Option<usize>,
    opts: &RoaOptions,
    exclude: &BTreeSet<(Vec<u8>, Exponents)>,
) -> Result<Option<Template>> {
    let n = system.dim();
    let m = system.num_modes();
    let cap = opts.deg_mult;
    let r = cap / 2;
    let deg_v = v.degree().max(0) as u32;
    let k = lhs_exponent(deg_v);
    let rho = (beta / sphere_min(v)).powf(1.0 / deg_v as f64);
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidInput("V must be positive on the unit sphere".into()));
    }
    let v_hat = dilate(v, rho).scale(&(1.0 / beta));
    let modes_hat: Vec<PolynomialMap> = system
        .modes()
        .iter()
        .map(|f| {
            PolynomialMap::new(f.components().iter().map(|c| dilate(c, rho).scale(&(1.0 / rho))).collect())
                .expect("same shape")
        })
        .collect();
    let diffs = mode_differences(&v_hat, &modes_hat)?;

    let mut factors: Vec<(Vec<u8>, f64, Polynomial)> = Vec::new();
    let mut top = 2 * k;
    for a in identity_indices(m, mode, opts.pruned) {
        if a.iter().all(|&b| b == 0) {
            continue;
        }
        let p = product_factor(&v_hat, &diffs, &1.0, &a);
        let mx = p.max_abs_coeff();
        if mx == 0.0 {
            continue;
        }
        top = top.max(p.degree().max(0) as u32 + cap);
        factors.push((a, 1.0 / mx, p.scale(&(1.0 / mx))));
    }
    let s_k = Polynomial::norm_sq_power(n, k);
    let mut blocks = Vec::new();
    let mut polys: Vec<Polynomial> = Vec::new();
    let back0 = rho.powi(2 * k as i32);
    blocks.push(Block {
        a: vec![0; m + 1],
        basis: monomials_in_range(n, 0, top.div_ceil(2)),
        back: back0,
    });
    polys.push(Polynomial::one(n));
    for (a, norm, p) in factors {
        let ones = a.iter().filter(|&&b| b == 1).count() as i32;
        blocks.push(Block {
            basis: monomials_in_range(n, 0, r),
            back: back0 * norm * beta.powi(-ones),
            a,
        });
        polys.push(p);
    }

    let mut rows: HashMap<Exponents, usize> = HashMap::new();
    let mut entries: Vec<BTreeMap<(usize, usize, usize), f64>> = Vec::new();
    let row_of = |e: Exponents, rows: &mut HashMap<Exponents, usize>, entries: &mut Vec<_>| -> usize {
        *rows.entry(e).or_insert_with(|| {
            entries.push(BTreeMap::new());
            entries.len() - 1
        })
    };
    for (blk, (block, p)) in blocks.iter().zip(&polys).enumerate() {
        let basis = &block.basis;
        for i in 0..basis.len() {
            for j in i..basis.len() {
                let e = basis[i].mul(&basis[j]);
                for (me, c) in p.terms() {
                    let row = row_of(me.mul(&e), &mut rows, &mut entries);
                    *entries[row].entry((blk, i, j)).or_insert(0.0) += c;
                }
            }
        }
    }
    let rhs_poly = -&s_k;
    for (e, _) in rhs_poly.terms() {
        row_of(e.clone(), &mut rows, &mut entries);
    }
    let mut ordered: Vec<(Exponents, usize)> = rows.into_iter().collect();
    ordered.sort();
    let rhs: Vec<f64> = ordered.iter().map(|(e, _)| rhs_poly.coeff(e)).collect();
    let entries: Vec<BTreeMap<(usize, usize, usize), f64>> = ordered
        .iter()
        .map(|(_, row)| entries[*row].iter().filter(|(_, c)| **c != 0.0).map(|(k, c)| (*k, *c)).collect())
        .collect();
    if entries.iter().zip(&rhs).any(|(row, &b)| row.is_empty() && b != 0.0) {
        return Err(Error::DegreeCapTooSmall { cap });
    }

    let active: Vec<Vec<bool>> = blocks
        .iter()
        .map(|b| b.basis.iter().map(|e| !exclude.contains(&(b.a.clone(), e.clone()))).collect())
        .collect();
    let active = forced_zero_reduction(&entries, &rhs, active);
    let mut index: Vec<Vec<Option<usize>>> = Vec::with_capacity(blocks.len());
    let mut kept_blocks = Vec::new();
    let mut new_block: Vec<Option<usize>> = Vec::with_capacity(blocks.len());
    for (block, act) in blocks.into_iter().zip(&active) {
        let mut map = vec![None; act.len()];
        let mut basis = Vec::new();
        for (i, e) in block.basis.iter().enumerate() {
            if act[i] {
                map[i] = Some(basis.len());
                basis.push(e.clone());
            }
        }
        index.push(map);
        if basis.is_empty() {
            new_block.push(None);
        } else {
            new_block.push(Some(kept_blocks.len()));
            kept_blocks.push(Block { basis, ..block });
        }
    }
    let mut prob = SdpProblem::new(kept_blocks.iter().map(|b| b.basis.len()).collect(), 0);
    for (row, &b) in entries.iter().zip(&rhs) {
        let mut per_block: BTreeMap<usize, SymSparse> = BTreeMap::new();
        for (&(blk, i, j), &c) in row {
            if let (Some(nb), Some(ni), Some(nj)) = (new_block[blk], index[blk][i], index[blk][j]) {
                per_block.entry(nb).or_default().push(ni, nj, c);
            }
        }
        if per_block.is_empty() {
            if b != 0.0 {
                return Ok(None);
            }
            continue;
        }
        prob.add_constraint(SdpConstraint {
            blocks: per_block.into_iter().collect(),
            free: vec![],
            rhs: b,
        });
    }
    Ok(Some(Template {
        prob,
        blocks: kept_blocks,
        rho,
        k,
    }))
}

/// Basis elements whose Gram diagonal is forced to zero. A row with zero
/// right-hand side whose surviving entries are all diagonal and of one sign
/// forces each of those diagonals (hence rows and columns) to vanish.
/// Iterated to a fixed point; exact, so the reduced program is equivalent.
fn forced_zero_reduction(
    entries: &[BTreeMap<(usize, usize, usize), f64>],
    rhs: &[f64],
    mut active: Vec<Vec<bool>>,
) -> Vec<Vec<bool>> {
    loop {
        let mut changed = false;
        for (row, &b) in entries.iter().zip(rhs) {
            if b != 0.0 {
                continue;
            }
            let live: Vec<(&(usize, usize, usize), &f64)> = row
                .iter()
                .filter(|((blk, i, j), _)| active[*blk][*i] && active[*blk][*j])
                .collect();
            if live.is_empty() || live.iter().any(|((_, i, j), _)| i != j) {
                continue;
            }
            let pos = live.iter().all(|(_, c)| **c > 0.0);
            let neg = live.iter().all(|(_, c)| **c < 0.0);
            if pos || neg {
                for ((blk, i, _), _) in live {
                    active[*blk][*i] = false;
                }
                changed = true;
            }
        }
        if !changed {
            return active;
        }
    }
}

/// Map a working-scale Gram matrix to the multiplier `y^k σ̃(x)` in
/// original coordinates.
fn lift_multiplier(n: usize, block: &Block, q_hat: &DMatrix<f64>, rho: f64, k: u32) -> Multiplier {
    let d: Vec<f64> = block.basis.iter().map(|e| rho.powi(-(e.degree() as i32))).collect();
    let q = DMatrix::from_fn(q_hat.nrows(), q_hat.ncols(), |i, j| block.back * d[i] * q_hat[(i, j)] * d[j]);
    let q = (&q + q.transpose()) * 0.5;
    let basis: Vec<Exponents> = block
        .basis
        .iter()
        .map(|e| {
            let mut p = e.powers().to_vec();
            p.push(k / 2);
            Exponents::new(p)
        })
        .collect();
    let lambda_min = if basis.is_empty() { 0.0 } else { sdp::min_eig(&q) };
    Multiplier {
        a: block.a.clone(),
        gram: GramCertificate {
            nvars: n + 1,
            basis,
            gram: q,
            residual: 0.0,
            lambda_min,
        },
    }
}

/// Recover `t` from `R = −1 − Σ σ_a p_a = t·(s y − 1)` by matching powers
/// of y: `T_j = s T_{j−1} − P_j`.
fn recover_t(n: usize, v: &Polynomial, beta: f64, system: &SwitchedSystem, multipliers: &[Multiplier]) -> Result<Polynomial> {
    let nv = n + 1;
    let diffs = mode_differences(v, system.modes())?;
    let mut r = Polynomial::constant(nv, -1.0);
    let mut ydeg = 0usize;
    for mult in multipliers {
        let g = product_factor(v, &diffs, &beta, &mult.a).extend_vars(1);
        let sigma = mult.gram.gram_polynomial();
        for (e, _) in sigma.terms() {
            ydeg = ydeg.max(e.powers()[n] as usize);
        }
        r = &r - &(&sigma * &g);
    }
    let mut p = split_y(&r, n);
    p.resize(ydeg + 1, Polynomial::zero(n));
    let s = Polynomial::norm_sq_power(n, 1);
    let mut t = Polynomial::zero(nv);
    let mut prev = Polynomial::zero(n);
    for (j, pj) in p.iter().enumerate().take(ydeg) {
        let tj = &(&s * &prev) - pj;
        let mut e = vec![0u32; nv];
        e[n] = j as u32;
        t = &t + &(&tj.extend_vars(1) * &Polynomial::monomial(Exponents::new(e), 1.0));
        prev = tj;
    }
    Ok(t)
}

/// Alternating projections between the affine constraints and the PSD cone.
const REPAIR_ROUNDS: usize = 200;

fn repair(prob: &SdpProblem, x: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let clip = |x: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
        x.iter()
            .map(|b| {
                let eig = SymmetricEigen::new((b + b.transpose()) * 0.5);
                let clipped = eig.eigenvalues.map(|v| v.max(0.0));
                &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
            })
            .collect()
    };
    let proj = sdp::AffineProjector::new(prob);
    let mut x: Vec<DMatrix<f64>> = x.iter().map(|b| (b + b.transpose()) * 0.5).collect();
    x = proj.project(&x, &[]);
    for _ in 0..REPAIR_ROUNDS {
        if x.iter().all(|b| sdp::min_eig(b) >= 0.0) {
            return x;
        }
        x = proj.project(&clip(&x), &[]);
        x = x.iter().map(|b| (b + b.transpose()) * 0.5).collect();
    }
    // end on the PSD side; the identity residual check decides
    clip(&x)
}

/// Certify `{V <= β}` for a fixed V and β.
pub fn roa_certify(
    system: &SwitchedSystem,
    v: &Polynomial,
    beta: f64,
    opts: &RoaOptions,
) -> Result<SosOutcome<RoaCertificate, String>> {
    check_inputs(system, v, opts)?;
    if !(beta > 0.0) {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    let pre = match certify_v(v, opts)? {
        SosOutcome::Feasible(p) => p,
        SosOutcome::Infeasible(s) => return Err(Error::InvalidInput(s)),
        SosOutcome::Unknown(s) => return Ok(SosOutcome::Unknown(s)),
    };
    certify_with(system, v, &pre, beta, opts)
}

fn check_inputs(system: &SwitchedSystem, v: &Polynomial, opts: &RoaOptions) -> Result<()> {
    if v.nvars() != system.dim() {
        return Err(Error::DimensionMismatch {
            expected: system.dim(),
            found: v.nvars(),
        });
    }
    if opts.deg_mult == 0 {
        return Err(Error::DegreeCapTooSmall { cap: 0 });
    }
    if opts.deg_mult % 2 == 1 {
        return Err(Error::InvalidInput(format!(
            "multiplier degree cap must be even, got {}",
            opts.deg_mult
        )));
    }
    Ok(())
}

/// Extra solves after dropping collapsed basis elements.
const FACE_ROUNDS: usize = 3;
/// Relative diagonal size below which a basis element counts as collapsed.
const FACE_TOL: f64 = 1e-6;

/// Solve and verify the identity for one mode (or the joint one).
fn certify_identity(
    system: &SwitchedSystem,
    v: &Polynomial,
    beta: f64,
    mode: Option<usize>,
    opts: &RoaOptions,
) -> Result<SosOutcome<StengleIdentity, String>> {
    let n = system.dim();
    let label = match mode {
        Some(i) => format!("mode {i}"),
        None => "joint identity".to_string(),
    };
    let tol = VerifyTolerance::from(&opts.sos);
    let mut exclude = BTreeSet::new();
    let mut last = String::new();
    for round in 0..=FACE_ROUNDS {
        let Some(tpl) = build_template(system, v, beta, mode, opts, &exclude)? else {
            // only the exact reduction may conclude infeasibility
            return Ok(if round == 0 {
                SosOutcome::Infeasible(format!(
                    "{label}: forced-zero multipliers leave the identity unmatched at beta = {beta}"
                ))
            } else {
                SosOutcome::Unknown(last)
            });
        };
        let sol = match sdp::solve(&tpl.prob, &opts.sos.sdp) {
            Ok(s) => s,
            Err(Error::IllConditioned) => {
                return Ok(SosOutcome::Unknown(format!("{label}: SDP embedding ill-conditioned")))
            }
            Err(e) => return Err(e),
        };
        match sol.status {
            // a stalled iterate is often close enough for repair; the checks
            // below decide
            SdpStatus::Optimal | SdpStatus::Stalled => {}
            SdpStatus::PrimalInfeasible if round == 0 => {
                return Ok(if sdp::verify_infeasibility_ray(&tpl.prob, &sol.y, opts.sos.tol_dual) {
                    SosOutcome::Infeasible(format!("{label}: template infeasible at beta = {beta}"))
                } else {
                    SosOutcome::Unknown(format!("{label}: infeasibility ray failed verification"))
                });
            }
            other => {
                if last.is_empty() {
                    last = format!("{label}: SDP status {other:?}");
                }
                return Ok(SosOutcome::Unknown(last));
            }
        }
        let x = repair(&tpl.prob, &sol.x);
        let multipliers: Vec<Multiplier> = tpl
            .blocks
            .iter()
            .zip(&x)
            .map(|(b, q)| lift_multiplier(n, b, q, tpl.rho, tpl.k))
            .collect();
        let t = recover_t(n, v, beta, system, &multipliers)?;
        let mut id = StengleIdentity {
            mode,
            t,
            multipliers,
            residual: 0.0,
            scale: 0.0,
        };
        let (residual, scale) = id.residual_against(v, beta, system)?;
        id.residual = residual;
        id.scale = scale;
        let psd = id
            .multipliers
            .iter()
            .all(|mu| mu.gram.lambda_min >= -tol.psd * (1.0 + mu.gram.gram.norm()));
        if residual <= tol.residual * (1.0 + scale) && psd {
            return Ok(SosOutcome::Feasible(id));
        }
        last = format!(
            "{label}: SDP status {:?}, repaired identity residual {residual:e} (scale {scale:e}), worst λ_min {:e}",
            sol.status,
            id.multipliers
                .iter()
                .map(|mu| mu.gram.lambda_min / (1.0 + mu.gram.gram.norm()))
                .fold(f64::INFINITY, f64::min)
        );
        // numerical facial reduction: drop basis elements whose diagonal
        // collapsed at the returned iterate and solve again
        let before = exclude.len();
        for (block, q) in tpl.blocks.iter().zip(&sol.x) {
            let top = (0..q.nrows()).map(|i| q[(i, i)]).fold(0.0, f64::max);
            for i in 0..q.nrows() {
                if q[(i, i)] <= FACE_TOL * top {
                    exclude.insert((block.a.clone(), block.basis[i].clone()));
                }
            }
        }
        if exclude.len() == before {
            break;
        }
    }
    Ok(SosOutcome::Unknown(last))
}

/// [`roa_certify`] with V's own certificates already in hand.
pub fn certify_with(
    system: &SwitchedSystem,
    v: &Polynomial,
    pre: &VCertificates,
    beta: f64,
    opts: &RoaOptions,
) -> Result<SosOutcome<RoaCertificate, String>> {
    let modes: Vec<Option<usize>> = match opts.template {
        TemplateKind::PerMode => (0..system.num_modes()).map(Some).collect(),
        TemplateKind::Joint => vec![None],
    };
    let outs: Vec<Result<SosOutcome<StengleIdentity, String>>> = modes
        .par_iter()
        .map(|&mode| certify_identity(system, v, beta, mode, opts))
        .collect();
    let mut identities = Vec::new();
    let mut unknown = Vec::new();
    for out in outs {
        match out? {
            SosOutcome::Feasible(id) => identities.push(id),
            SosOutcome::Infeasible(s) => return Ok(SosOutcome::Infeasible(s)),
            SosOutcome::Unknown(s) => unknown.push(s),
        }
    }
    if !unknown.is_empty() {
        return Ok(SosOutcome::Unknown(unknown.join("; ")));
    }
    let cert = RoaCertificate {
        v: v.clone(),
        beta,
        deg_mult: opts.deg_mult,
        template: opts.template,
        pruned: opts.pruned,
        convexity: pre.convexity.clone(),
        positivity: pre.positivity.clone(),
        margin: pre.margin,
        identities,
    };
    let report = cert.verify(system, &VerifyTolerance::from(&opts.sos))?;
    if !report.passed() {
        return Ok(SosOutcome::Unknown(format!(
            "certificate failed independent verification: {}",
            report.failures().join(", ")
        )));
    }
    Ok(SosOutcome::Feasible(cert))
}


#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaProbe {
    pub beta: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaSearch {
    pub beta: f64,
    pub certificate: RoaCertificate,
    /// The doubling phase reached the cap while still feasible.
    pub hit_cap: bool,
    pub probes: Vec<BetaProbe>,
}

/// Largest certified β by doubling/halving from the probe, then geometric
/// bisection to relative gap `tol_rel`.
pub fn roa_maximize_beta(system: &SwitchedSystem, v: &Polynomial, opts: &RoaOptions) -> Result<BetaSearch> {
    check_inputs(system, v, opts)?;
    let pre = match certify_v(v, opts)? {
        SosOutcome::Feasible(p) => p,
        SosOutcome::Infeasible(s) => return Err(Error::InvalidInput(s)),
        SosOutcome::Unknown(s) => return Err(Error::Verification(format!("could not certify V: {s}"))),
    };
    maximize_with(system, v, &pre, opts)
}

fn maximize_with(system: &SwitchedSystem, v: &Polynomial, pre: &VCertificates, opts: &RoaOptions) -> Result<BetaSearch> {
    let mut probes = Vec::new();
    let probe = |beta: f64, probes: &mut Vec<BetaProbe>| -> Result<Option<RoaCertificate>> {
        let out = certify_with(system, v, pre, beta, opts)?;
        probes.push(BetaProbe {
            beta,
            verdict: out.verdict(),
        });
        Ok(out.feasible())
    };
    let mut beta = opts.beta_probe;
    let (mut lo, mut hi, mut cert);
    match probe(beta, &mut probes)? {
        Some(c) => {
            cert = c;
            lo = beta;
            loop {
                if beta * 2.0 > opts.beta_cap {
                    return Ok(BetaSearch {
                        beta: lo,
                        certificate: cert,
                        hit_cap: true,
                        probes,
                    });
                }
                beta *= 2.0;
                match probe(beta, &mut probes)? {
                    Some(c) => {
                        cert = c;
                        lo = beta;
                    }
                    None => {
                        hi = beta;
                        break;
                    }
                }
            }
        }
        None => {
            hi = beta;
            loop {
                beta /= 2.0;
                if beta < opts.beta_floor {
                    return Err(Error::NoFeasibleBeta { floor: opts.beta_floor });
                }
                if let Some(c) = probe(beta, &mut probes)? {
                    cert = c;
                    lo = beta;
                    break;
                }
                hi = beta;
            }
        }
    }
    while hi / lo - 1.0 > opts.tol_rel {
        let ratio = hi / lo;
        let betas: Vec<f64> = (1..4).map(|k| lo * ratio.powf(k as f64 / 4.0)).collect();
        let outs: Vec<Result<SosOutcome<RoaCertificate, String>>> = betas
            .par_iter()
            .map(|&b| certify_with(system, v, pre, b, opts))
            .collect();
        let mut new_lo = None;
        let mut new_hi = hi;
        for (b, out) in betas.iter().zip(outs) {
            let out = out?;
            probes.push(BetaProbe {
                beta: *b,
                verdict: out.verdict(),
            });
            match out {
                SosOutcome::Feasible(c) => new_lo = Some((*b, c)),
                _ => {
                    if *b < new_hi && new_lo.as_ref().is_none_or(|(l, _)| *b > *l) {
                        new_hi = new_hi.min(*b);
                    }
                }
            }
        }
        if let Some((b, c)) = new_lo {
            lo = b;
            cert = c;
        }
        // a failure below a success does not contradict monotonicity but
        // cannot tighten the bracket either
        hi = if new_hi > lo { new_hi } else { hi };
        if hi <= lo {
            break;
        }
    }
    Ok(BetaSearch {
        beta: lo,
        certificate: cert,
        hit_cap: false,
        probes,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct AnalyzeOptions {
    pub deg_v: u32,
    /// Highest degree tried for V before giving up.
    pub max_deg_v: u32,
    pub roa: RoaOptions,
}

impl AnalyzeOptions {
    pub fn new(deg_v: u32, deg_mult: u32) -> Self {
        AnalyzeOptions {
            deg_v,
            max_deg_v: deg_v + 2,
            roa: RoaOptions::new(deg_mult),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Analysis {
    pub matrices: Vec<Vec<Vec<f64>>>,
    pub lyapunov: LyapunovCertificate,
    pub search: BetaSearch,
}

/// First step of [`analyze`]: an sos-convex V for the linearizations,
/// escalating the degree up to `max_deg_v`.
pub fn synth_v(system: &SwitchedSystem, opts: &AnalyzeOptions) -> Result<LyapunovCertificate> {
    let matrices = system
        .modes()
        .iter()
        .map(linearize)
        .collect::<Result<Vec<_>>>()?;
    let mut deg = opts.deg_v;
    loop {
        let mut synth = SynthOptions::new(deg, true);
        synth.sos = opts.roa.sos;
        synth.margin = opts.roa.margin;
        if let SosOutcome::Feasible(c) = synth_common_lyapunov(&matrices, &synth)? {
            return Ok(c);
        }
        deg += 2;
        if deg > opts.max_deg_v {
            return Err(Error::LinearizationNotCertifiedStable { max_degree: opts.max_deg_v });
        }
    }
}

/// Two-step pipeline: sos-convex V for the linearizations, then the largest
/// certified sublevel set.
pub fn analyze(system: &SwitchedSystem, opts: &AnalyzeOptions) -> Result<Analysis> {
    let lyapunov = synth_v(system, opts)?;
    let search = roa_maximize_beta(system, &lyapunov.v, &opts.roa)?;
    let matrices = system
        .modes()
        .iter()
        .map(|f| {
            let a = f.linear_part();
            (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect()
        })
        .collect();
    Ok(Analysis {
        matrices,
        lyapunov,
        search,
    })
}

/// Boundary of `{V <= β}` along `rays` equally spaced directions (n = 2).
/// Each radius solves `V(r u) = β` by bisection.
pub fn level_set(v: &Polynomial, beta: f64, rays: usize) -> Result<Vec<[f64; 3]>> {
    if v.nvars() != 2 {
        return Err(Error::InvalidInput("level sets are only traced in two dimensions".into()));
    }
    let mut out = Vec::with_capacity(rays);
    for k in 0..rays {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / rays as f64;
        let u = [theta.cos(), theta.sin()];
        let f = |r: f64| v.eval_unchecked(&[r * u[0], r * u[1]]) - beta;
        let mut hi = 1.0;
        while f(hi) < 0.0 {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::InvalidInput("sublevel set is unbounded".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        let r = 0.5 * (lo + hi);
        out.push([theta, r * u[0], r * u[1]]);
    }
    Ok(out)
}

pub fn level_set_csv(points: &[[f64; 3]]) -> String {
    let mut s = String::from("angle,x1,x2\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{}\n",
            crate::json::format_g17(p[0]),
            crate::json::format_g17(p[1]),
            crate::json::format_g17(p[2])
        ));
    }
    s
}

/// Uniform sample of `{V <= β}` for a positive definite form V.
pub fn sample_sublevel<R: Rng>(v: &Polynomial, beta: f64, rng: &mut R) -> Vec<f64> {
    let n = v.nvars();
    let d = v.degree().max(1) as f64;
    let u = crate::lyap::random_unit(n, rng);
    let rmax = (beta / v.eval_unchecked(&u)).powf(1.0 / d);
    let r = rmax * rng.random::<f64>().powf(1.0 / n as f64);
    u.into_iter().map(|c| c * r).collect()
}

/// Largest `V(f_i(x)) − V(x)` over random nonzero points of `{V <= β}`.
/// Negative means strict decrease everywhere sampled.
pub fn sampled_decrease<R: Rng>(system: &SwitchedSystem, v: &Polynomial, beta: f64, samples: usize, rng: &mut R) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let x = sample_sublevel(v, beta, rng);
        if x.iter().all(|c| *c == 0.0) {
            continue;
        }
        let vx = v.eval_unchecked(&x);
        for f in system.modes() {
            let fx = f.eval(&x).expect("dimension checked");
            worst = worst.max((v.eval_unchecked(&fx) - vx) / vx);
        }
    }
    worst
}
