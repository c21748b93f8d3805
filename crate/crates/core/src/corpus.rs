//! Reference systems and functions used by the examples, tests and the
//! shipped fixture files.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lyap::ando_shih;
use crate::poly::{poly, Polynomial, PolynomialMap, SwitchedSystem};

/// Scalings of the Ando–Shih pair shipped as fixtures.
pub const ANDO_SHIH_GAMMAS: [f64; 5] = [0.5, 0.7, 0.8, 0.9, 0.99];

pub fn ando_shih_system(gamma: f64) -> SwitchedSystem {
    SwitchedSystem::from_matrices(&ando_shih(gamma)).expect("square 2x2 matrices")
}

/// `f1 = (x1 x2, 0)`, `f2 = (0, x1 x2)`: every vertex map contracts a
/// non-convex common Lyapunov function, yet the hull contains the unstable
/// map `x ↦ (x1x2/2, x1x2/2)`.
pub fn product_pair() -> SwitchedSystem {
    let f1 = PolynomialMap::new(vec![poly(2, &[(1.0, &[1, 1])]), Polynomial::zero(2)]).expect("2 components");
    let f2 = PolynomialMap::new(vec![Polynomial::zero(2), poly(2, &[(1.0, &[1, 1])])]).expect("2 components");
    SwitchedSystem::new(vec![f1, f2]).expect("same dimension")
}

/// `x1²x2² + x1² + x2²`, decreasing along both modes of [`product_pair`]
/// everywhere but not convex.
pub fn product_pair_nonconvex_v() -> Polynomial {
    poly(2, &[(1.0, &[2, 2]), (1.0, &[2, 0]), (1.0, &[0, 2])])
}

/// `x1² + x2²`, a Lyapunov function for [`product_pair`] on the unit box.
pub fn unit_disk_v() -> Polynomial {
    poly(2, &[(1.0, &[2, 0]), (1.0, &[0, 2])])
}

/// Two quadratic maps whose linearizations need a quartic Lyapunov function.
pub fn quadratic_pair() -> SwitchedSystem {
    let f1 = PolynomialMap::new(vec![
        poly(2, &[(-0.25, &[1, 0]), (-0.25, &[0, 1]), (0.2, &[2, 0])]),
        poly(2, &[(-1.0, &[1, 0]), (0.1, &[1, 1])]),
    ])
    .expect("2 components");
    let f2 = PolynomialMap::new(vec![
        poly(2, &[(0.75, &[1, 0]), (0.75, &[0, 1]), (-0.1, &[1, 1])]),
        poly(2, &[(-0.5, &[1, 0]), (0.25, &[0, 1])]),
    ])
    .expect("2 components");
    SwitchedSystem::new(vec![f1, f2]).expect("same dimension")
}

/// Published sos-convex quartic for [`quadratic_pair`] (two-decimal
/// coefficients).
pub fn quadratic_pair_reference_v() -> Polynomial {
    poly(
        2,
        &[
            (19.14, &[4, 0]),
            (10.57, &[3, 1]),
            (47.88, &[2, 2]),
            (16.47, &[1, 3]),
            (10.49, &[0, 4]),
        ],
    )
}

/// Linearizations of [`quadratic_pair`].
pub fn quadratic_pair_linearization() -> Vec<DMatrix<f64>> {
    vec![
        DMatrix::from_row_slice(2, 2, &[-0.25, -0.25, -1.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[0.75, 0.75, -0.5, 0.25]),
    ]
}

/// `(0.5x1 + x1², 0.5x2)` and `(0.5x1, 0.5x2 + x2²)`.
pub fn decoupled_pair() -> SwitchedSystem {
    let f1 = PolynomialMap::new(vec![poly(2, &[(0.5, &[1, 0]), (1.0, &[2, 0])]), poly(2, &[(0.5, &[0, 1])])])
        .expect("2 components");
    let f2 = PolynomialMap::new(vec![poly(2, &[(0.5, &[1, 0])]), poly(2, &[(0.5, &[0, 1]), (1.0, &[0, 2])])])
        .expect("2 components");
    SwitchedSystem::new(vec![f1, f2]).expect("same dimension")
}

/// `x ↦ 0.5x` in the plane.
pub fn contraction() -> SwitchedSystem {
    let f = PolynomialMap::new(vec![poly(2, &[(0.5, &[1, 0])]), poly(2, &[(0.5, &[0, 1])])]).expect("2 components");
    SwitchedSystem::new(vec![f]).expect("one mode")
}

fn random_linear<R: Rng>(n: usize, rng: &mut R) -> Polynomial {
    let mut l = Polynomial::zero(n);
    for i in 0..n {
        l = &l + &Polynomial::var(n, i).scale(&rng.random_range(-1.0..1.0));
    }
    l
}

/// Mixed convex/non-convex polynomials in at most three variables and of
/// degree at most six, for cross-checking the sos-convexity formulations.
/// Families cycle with the index: sums of even powers of linear forms,
/// powers of definite quadratics, a two-form family `l1^2d + l2^2d + c(l1 l2)^d`
/// straddling convexity, dense random polynomials, and convex ones with a
/// lower-degree perturbation.
pub fn sosconvex_suite(seed: u64, count: usize) -> Vec<Polynomial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = 1 + i % 3;
            let d = rng.random_range(1..=3u32);
            match (i / 3) % 5 {
                0 => (0..n + 1).fold(Polynomial::zero(n), |p, _| &p + &random_linear(n, &mut rng).pow(2 * d)),
                1 => {
                    let mut q = Polynomial::zero(n);
                    for _ in 0..n {
                        q = &q + &random_linear(n, &mut rng).pow(2);
                    }
                    q = &q + &Polynomial::norm_sq_power(n, 1).scale(&0.1);
                    &q.pow(d) + &random_linear(n, &mut rng).pow(2)
                }
                2 if n > 1 => {
                    let d = d.max(2);
                    let (l1, l2) = (random_linear(n, &mut rng), random_linear(n, &mut rng));
                    let c = rng.random_range(-3.0..3.0);
                    &(&l1.pow(2 * d) + &l2.pow(2 * d)) + &(&l1 * &l2).pow(d).scale(&c)
                }
                3 => {
                    let mut p = Polynomial::zero(n);
                    for e in crate::poly::monomials_in_range(n, 0, 2 * d) {
                        p.add_term(e, rng.random_range(-1.0..1.0));
                    }
                    p
                }
                _ => {
                    let base = (0..n).fold(Polynomial::norm_sq_power(n, d), |p, _| {
                        &p + &random_linear(n, &mut rng).pow(2 * d)
                    });
                    let mut pert = Polynomial::zero(n);
                    for e in crate::poly::monomials_in_range(n, 1, 2 * d - 1) {
                        pert.add_term(e, rng.random_range(-0.5..0.5));
                    }
                    &base + &pert
                }
            }
        })
        .collect()
}
