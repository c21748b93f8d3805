//! Sparse multivariate polynomials.
//!
//! Terms are kept in a `BTreeMap` keyed by [`Exponents`], whose ordering is
//! graded lexicographic (total degree first, then `x1 > x2 > ...`). Iteration
//! order is therefore the canonical order used for Gram bases and for
//! serialization.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, ToPrimitive};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Exponent vector of a monomial.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Exponents(Vec<u32>);

impl Exponents {
    pub fn new(powers: Vec<u32>) -> Self {
        Exponents(powers)
    }

    pub fn zero(n: usize) -> Self {
        Exponents(vec![0; n])
    }

    /// The exponent of `x_i` alone.
    pub fn unit(n: usize, i: usize) -> Self {
        let mut e = vec![0; n];
        e[i] = 1;
        Exponents(e)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn powers(&self) -> &[u32] {
        &self.0
    }

    pub fn mul(&self, other: &Exponents) -> Exponents {
        debug_assert_eq!(self.len(), other.len());
        Exponents(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self / other` when `other` divides `self`.
    pub fn div(&self, other: &Exponents) -> Option<Exponents> {
        let mut out = Vec::with_capacity(self.len());
        for (a, b) in self.0.iter().zip(&other.0) {
            out.push(a.checked_sub(*b)?);
        }
        Some(Exponents(out))
    }

    /// Degree restricted to the variables in `range`.
    pub fn partial_degree(&self, range: std::ops::Range<usize>) -> u32 {
        self.0[range].iter().sum()
    }

    /// Append `extra` zero exponents (new trailing variables).
    pub fn extend(&self, extra: usize) -> Exponents {
        let mut v = self.0.clone();
        v.extend(std::iter::repeat(0).take(extra));
        Exponents(v)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .fold(1.0, |acc, (&p, &xi)| acc * xi.powi(p as i32))
    }
}

impl Ord for Exponents {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Exponents {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Scalar types a [`Polynomial`] can carry.
pub trait Coefficient:
    Clone + Num + Neg<Output = Self> + fmt::Debug + Send + Sync + 'static
{
    /// Exact conversion from a finite double.
    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
}

impl Coefficient for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Coefficient for BigRational {
    fn from_f64(x: f64) -> Self {
        BigRational::from_float(x).unwrap_or_else(|| BigRational::from_integer(BigInt::from(0)))
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

/// Sparse polynomial in `n` variables.
///
/// Zero coefficients are never stored; the zero polynomial has an empty
/// term map and degree `-1`.
#[derive(Clone, PartialEq)]
pub struct Polynomial<C: Coefficient = f64> {
    nvars: usize,
    terms: BTreeMap<Exponents, C>,
}

pub type RationalPolynomial = Polynomial<BigRational>;

impl<C: Coefficient> Polynomial<C> {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: C) -> Self {
        Self::monomial(Exponents::zero(nvars), c)
    }

    pub fn one(nvars: usize) -> Self {
        Self::constant(nvars, C::one())
    }

    /// The coordinate polynomial `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        assert!(i < nvars, "variable index {i} out of range for {nvars} variables");
        Self::monomial(Exponents::unit(nvars, i), C::one())
    }

    pub fn monomial(e: Exponents, c: C) -> Self {
        let nvars = e.len();
        let mut terms = BTreeMap::new();
        if !c.is_zero() {
            terms.insert(e, c);
        }
        Polynomial { nvars, terms }
    }

    /// Build from `(coefficient, exponents)` pairs, collecting like terms.
    pub fn from_terms<I>(nvars: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (C, Exponents)>,
    {
        let mut p = Self::zero(nvars);
        for (c, e) in terms {
            if e.len() != nvars {
                return Err(Error::DimensionMismatch {
                    expected: nvars,
                    found: e.len(),
                });
            }
            p.add_term(e, c);
        }
        Ok(p)
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Terms in graded-lex order.
    pub fn terms(&self) -> impl Iterator<Item = (&Exponents, &C)> {
        self.terms.iter()
    }

    pub fn coeff(&self, e: &Exponents) -> C {
        self.terms.get(e).cloned().unwrap_or_else(C::zero)
    }

    /// Add `c * x^e` in place.
    pub fn add_term(&mut self, e: Exponents, c: C) {
        debug_assert_eq!(e.len(), self.nvars);
        if c.is_zero() {
            return;
        }
        match self.terms.entry(e) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let s = o.get().clone() + c;
                if s.is_zero() {
                    o.remove();
                } else {
                    *o.get_mut() = s;
                }
            }
        }
    }

    /// Total degree; `-1` for the zero polynomial.
    pub fn degree(&self) -> i32 {
        self.terms.keys().map(|e| e.degree() as i32).max().unwrap_or(-1)
    }

    /// Smallest total degree of a stored term; `-1` for zero.
    pub fn min_degree(&self) -> i32 {
        self.terms.keys().map(|e| e.degree() as i32).min().unwrap_or(-1)
    }

    pub fn is_homogeneous(&self) -> bool {
        self.degree() == self.min_degree()
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.nvars != other.nvars {
            return Err(Error::DimensionMismatch {
                expected: self.nvars,
                found: other.nvars,
            });
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), c.clone());
        }
        Ok(out)
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), -c.clone());
        }
        Ok(out)
    }

    pub fn try_mul(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let mut acc: BTreeMap<Exponents, C> = BTreeMap::new();
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e = ea.mul(eb);
                let c = ca.clone() * cb.clone();
                match acc.get_mut(&e) {
                    Some(v) => *v = v.clone() + c,
                    None => {
                        acc.insert(e, c);
                    }
                }
            }
        }
        acc.retain(|_, c| !c.is_zero());
        Ok(Polynomial {
            nvars: self.nvars,
            terms: acc,
        })
    }

    pub fn scale(&self, c: &C) -> Self {
        if c.is_zero() {
            return Self::zero(self.nvars);
        }
        let mut out = self.clone();
        for v in out.terms.values_mut() {
            *v = v.clone() * c.clone();
        }
        out.terms.retain(|_, c| !c.is_zero());
        out
    }

    pub fn pow(&self, k: u32) -> Self {
        let mut out = Self::one(self.nvars);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    /// Partial derivative with respect to `x_i`.
    pub fn derivative(&self, i: usize) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            let k = e.0[i];
            if k == 0 {
                continue;
            }
            let mut d = e.clone();
            d.0[i] -= 1;
            out.add_term(d, c.clone() * C::from_f64(k as f64));
        }
        out
    }

    pub fn gradient(&self) -> Vec<Self> {
        (0..self.nvars).map(|i| self.derivative(i)).collect()
    }

    pub fn hessian(&self) -> PolyMatrix<C> {
        let n = self.nvars;
        let grad = self.gradient();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(grad[i].derivative(j));
            }
        }
        PolyMatrix {
            rows: n,
            cols: n,
            entries,
        }
    }

    /// Substitute `x_i <- maps[i]`. All substituted polynomials must share
    /// an ambient dimension, which becomes the dimension of the result.
    pub fn compose_with(&self, maps: &[Polynomial<C>]) -> Result<Self> {
        if maps.len() != self.nvars {
            return Err(Error::DimensionMismatch {
                expected: self.nvars,
                found: maps.len(),
            });
        }
        let target = maps.first().map(|m| m.nvars).unwrap_or(0);
        if let Some(bad) = maps.iter().find(|m| m.nvars != target) {
            return Err(Error::DimensionMismatch {
                expected: target,
                found: bad.nvars,
            });
        }
        let mut powers: Vec<Vec<Polynomial<C>>> = vec![vec![Self::one(target)]; self.nvars];
        let mut out = Self::zero(target);
        for (e, c) in &self.terms {
            let mut term = Self::constant(target, c.clone());
            for (i, &k) in e.0.iter().enumerate() {
                while powers[i].len() <= k as usize {
                    let next = powers[i].last().unwrap() * &maps[i];
                    powers[i].push(next);
                }
                if k > 0 {
                    term = &term * &powers[i][k as usize];
                }
            }
            for (te, tc) in term.terms {
                out.add_term(te, tc);
            }
        }
        Ok(out)
    }

    /// `p ∘ f` for a square map `f`.
    pub fn compose(&self, f: &PolynomialMap<C>) -> Result<Self> {
        self.compose_with(f.components())
    }

    /// Re-express in `nvars + extra` variables; the new ones trail.
    pub fn extend_vars(&self, extra: usize) -> Self {
        Polynomial {
            nvars: self.nvars + extra,
            terms: self
                .terms
                .iter()
                .map(|(e, c)| (e.extend(extra), c.clone()))
                .collect(),
        }
    }

    /// Move variable `i` to position `placement[i]` in a space of `nvars` variables.
    pub fn relabel(&self, nvars: usize, placement: &[usize]) -> Self {
        assert_eq!(placement.len(), self.nvars);
        let mut out = Self::zero(nvars);
        for (e, c) in &self.terms {
            let mut v = vec![0; nvars];
            for (i, &p) in e.0.iter().enumerate() {
                v[placement[i]] += p;
            }
            out.add_term(Exponents(v), c.clone());
        }
        out
    }

    pub fn map_coeffs<D: Coefficient>(&self, f: impl Fn(&C) -> D) -> Polynomial<D> {
        let mut out = Polynomial::zero(self.nvars);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), f(c));
        }
        out
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms
            .values()
            .map(|c| c.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Evaluate at `x` by direct term summation.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.nvars {
            return Err(Error::DimensionMismatch {
                expected: self.nvars,
                found: x.len(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(e, c)| c.to_f64() * e.eval(x)).sum()
    }

    /// `(Σ x_i²)^k`.
    pub fn norm_sq_power(nvars: usize, k: u32) -> Self {
        let mut s = Self::zero(nvars);
        for i in 0..nvars {
            let mut e = vec![0; nvars];
            e[i] = 2;
            s.add_term(Exponents(e), C::one());
        }
        s.pow(k)
    }
}

impl Polynomial<f64> {
    pub fn to_rational(&self) -> RationalPolynomial {
        self.map_coeffs(|c| <BigRational as Coefficient>::from_f64(*c))
    }

    /// Drop terms with `|c| <= tol`.
    pub fn chop(&self, tol: f64) -> Self {
        let mut out = self.clone();
        out.terms.retain(|_, c| c.abs() > tol);
        out
    }

    /// Coefficients read off a dense vector indexed like `basis`.
    pub fn from_basis(nvars: usize, basis: &[Exponents], coeffs: &[f64]) -> Self {
        let mut p = Self::zero(nvars);
        for (e, &c) in basis.iter().zip(coeffs) {
            p.add_term(e.clone(), c);
        }
        p
    }
}

impl RationalPolynomial {
    pub fn to_f64(&self) -> Polynomial<f64> {
        self.map_coeffs(|c| Coefficient::to_f64(c))
    }

    /// Exact rational from a small fraction, handy for fixtures.
    pub fn ratio(num: i64, den: i64) -> BigRational {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    pub fn from_i64(nvars: usize, c: i64) -> Self {
        Self::constant(nvars, BigRational::from_i64(c).unwrap())
    }
}

impl<C: Coefficient> fmt::Debug for Polynomial<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl<C: Coefficient> fmt::Display for Polynomial<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (e, c)) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{}", c.to_f64())?;
            for (i, &p) in e.0.iter().enumerate() {
                match p {
                    0 => {}
                    1 => write!(f, "*x{}", i + 1)?,
                    _ => write!(f, "*x{}^{}", i + 1, p)?,
                }
            }
        }
        Ok(())
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $f:ident) => {
        impl<'a, C: Coefficient> $tr<&'a Polynomial<C>> for &'a Polynomial<C> {
            type Output = Polynomial<C>;
            fn $m(self, rhs: &'a Polynomial<C>) -> Polynomial<C> {
                self.$f(rhs).expect("polynomial dimension mismatch")
            }
        }
        impl<C: Coefficient> $tr for Polynomial<C> {
            type Output = Polynomial<C>;
            fn $m(self, rhs: Polynomial<C>) -> Polynomial<C> {
                self.$f(&rhs).expect("polynomial dimension mismatch")
            }
        }
    };
}

binop!(Add, add, try_add);
binop!(Sub, sub, try_sub);
binop!(Mul, mul, try_mul);

impl<C: Coefficient> Neg for &Polynomial<C> {
    type Output = Polynomial<C>;
    fn neg(self) -> Polynomial<C> {
        self.scale(&-C::one())
    }
}

impl<C: Coefficient> Neg for Polynomial<C> {
    type Output = Polynomial<C>;
    fn neg(self) -> Polynomial<C> {
        -&self
    }
}

#[derive(Serialize, Deserialize)]
struct TermJson {
    c: f64,
    e: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct PolyJson {
    n: usize,
    terms: Vec<TermJson>,
}

impl Serialize for Polynomial<f64> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PolyJson {
            n: self.nvars,
            terms: self
                .terms
                .iter()
                .map(|(e, c)| TermJson {
                    c: *c,
                    e: e.0.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polynomial<f64> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = PolyJson::deserialize(d)?;
        Polynomial::from_terms(
            raw.n,
            raw.terms.into_iter().map(|t| (t.c, Exponents(t.e))),
        )
        .map_err(serde::de::Error::custom)
    }
}

impl Serialize for Exponents {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Exponents {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Exponents(Vec::deserialize(d)?))
    }
}

/// Square polynomial map `R^n -> R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialMap<C: Coefficient = f64> {
    components: Vec<Polynomial<C>>,
}

impl<C: Coefficient> PolynomialMap<C> {
    pub fn new(components: Vec<Polynomial<C>>) -> Result<Self> {
        let n = components.len();
        if n == 0 {
            return Err(Error::InvalidInput("polynomial map has no components".into()));
        }
        for c in &components {
            if c.nvars() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: c.nvars(),
                });
            }
        }
        Ok(PolynomialMap { components })
    }

    pub fn identity(n: usize) -> Self {
        PolynomialMap {
            components: (0..n).map(|i| Polynomial::var(n, i)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Polynomial<C>] {
        &self.components
    }

    pub fn degree(&self) -> i32 {
        self.components.iter().map(|c| c.degree()).max().unwrap_or(-1)
    }

    pub fn fixes_origin(&self) -> bool {
        let zero = Exponents::zero(self.dim());
        self.components.iter().all(|c| c.coeff(&zero).is_zero())
    }

    /// Every component is linear with no constant term.
    pub fn is_linear(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.terms().all(|(e, _)| e.degree() == 1))
    }
}

impl PolynomialMap<f64> {
    pub fn from_matrix(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidInput(format!(
                "matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let components = (0..n)
            .map(|i| {
                let mut p = Polynomial::zero(n);
                for j in 0..n {
                    p.add_term(Exponents::unit(n, j), a[(i, j)]);
                }
                p
            })
            .collect();
        Ok(PolynomialMap { components })
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(self.components.iter().map(|c| c.eval_unchecked(x)).collect())
    }

    /// Degree-one coefficients, i.e. the Jacobian at the origin.
    pub fn linear_part(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.components[i].coeff(&Exponents::unit(n, j)))
    }
}

/// Dense grid of polynomials, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyMatrix<C: Coefficient = f64> {
    rows: usize,
    cols: usize,
    entries: Vec<Polynomial<C>>,
}

impl<C: Coefficient> PolyMatrix<C> {
    pub fn new(rows: usize, cols: usize, entries: Vec<Polynomial<C>>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: entries.len(),
            });
        }
        if let Some(first) = entries.first() {
            let n = first.nvars();
            if let Some(bad) = entries.iter().find(|p| p.nvars() != n) {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: bad.nvars(),
                });
            }
        }
        Ok(PolyMatrix { rows, cols, entries })
    }

    pub fn identity(size: usize, nvars: usize) -> Self {
        let entries = (0..size * size)
            .map(|k| {
                if k / size == k % size {
                    Polynomial::one(nvars)
                } else {
                    Polynomial::zero(nvars)
                }
            })
            .collect();
        PolyMatrix {
            rows: size,
            cols: size,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Polynomial<C> {
        &self.entries[i * self.cols + j]
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Ambient dimension of the entries (0 for an empty matrix).
    pub fn nvars(&self) -> usize {
        self.entries.first().map(|p| p.nvars()).unwrap_or(0)
    }
}

impl PolyMatrix<f64> {
    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m[(i, j)] = self.get(i, j).eval(x)?;
            }
        }
        Ok(m)
    }

    /// `yᵀ M(x) y` as a polynomial in `(x, y)`, `y` trailing.
    pub fn scalarize(&self) -> Polynomial<f64> {
        let n = self.nvars();
        let k = self.rows;
        let mut out = Polynomial::zero(n + k);
        for i in 0..k {
            for j in 0..k {
                for (e, c) in self.get(i, j).terms() {
                    let mut v = e.extend(k).0;
                    v[n + i] += 1;
                    v[n + j] += 1;
                    out.add_term(Exponents(v), *c);
                }
            }
        }
        out
    }
}

/// Discrete-time switched system `x+ ∈ conv{f_1(x), …, f_m(x)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchedSystem {
    n: usize,
    modes: Vec<PolynomialMap>,
}

impl SwitchedSystem {
    pub fn new(modes: Vec<PolynomialMap>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::InvalidInput("switched system needs at least one mode".into()))?;
        let n = first.dim();
        for (i, m) in modes.iter().enumerate() {
            if m.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: m.dim(),
                });
            }
            if !m.fixes_origin() {
                return Err(Error::NonzeroConstantTerm { mode: i });
            }
        }
        Ok(SwitchedSystem { n, modes })
    }

    pub fn from_matrices(matrices: &[DMatrix<f64>]) -> Result<Self> {
        let modes = matrices
            .iter()
            .map(PolynomialMap::from_matrix)
            .collect::<Result<Vec<_>>>()?;
        Self::new(modes)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[PolynomialMap] {
        &self.modes
    }

    pub fn is_linear(&self) -> bool {
        self.modes.iter().all(|m| m.is_linear())
    }

    /// Linear parts of every mode.
    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        self.modes.iter().map(|m| m.linear_part()).collect()
    }
}

/// All exponent vectors in `n` variables with total degree in `lo..=hi`,
/// graded-lex order.
pub fn monomials_in_range(n: usize, lo: u32, hi: u32) -> Vec<Exponents> {
    let mut out = Vec::new();
    for d in lo..=hi {
        let mut cur = vec![0u32; n];
        fill_degree(&mut cur, 0, d, &mut out);
    }
    out
}

fn fill_degree(cur: &mut Vec<u32>, i: usize, remaining: u32, out: &mut Vec<Exponents>) {
    let n = cur.len();
    if n == 0 {
        if remaining == 0 {
            out.push(Exponents(Vec::new()));
        }
        return;
    }
    if i == n - 1 {
        cur[i] = remaining;
        out.push(Exponents(cur.clone()));
        cur[i] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        cur[i] = k;
        fill_degree(cur, i + 1, remaining - k, out);
    }
    cur[i] = 0;
}

/// Gram basis: degree exactly `d` when `homogeneous`, otherwise `<= d`.
pub fn monomial_basis(n: usize, d: u32, homogeneous: bool) -> Vec<Exponents> {
    if homogeneous {
        monomials_in_range(n, d, d)
    } else {
        monomials_in_range(n, 0, d)
    }
}

/// Linear map `x -> A x` as polynomials in `n` variables.
pub fn linear_map(a: &DMatrix<f64>) -> Result<PolynomialMap> {
    PolynomialMap::from_matrix(a)
}

/// Convenience constructor from a literal term list.
pub fn poly(nvars: usize, terms: &[(f64, &[u32])]) -> Polynomial {
    Polynomial::from_terms(
        nvars,
        terms.iter().map(|(c, e)| (*c, Exponents::new(e.to_vec()))),
    )
    .expect("exponent length matches nvars")
}
