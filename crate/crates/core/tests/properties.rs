use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use switchcert::files::SystemFile;
use switchcert::lyap::{ando_shih, synth_common_lyapunov, SynthOptions};
use switchcert::poly::{monomial_basis, Exponents, Polynomial, PolynomialMap, SwitchedSystem};
use switchcert::sim::{simulate, SimOptions, SwitchingPolicy};
use switchcert::sosprog::{check_sos, check_sosconvex, Formulation, SosOptions, SosOutcome, Verdict};

fn polynomial(n: usize, max_exp: u32, max_terms: usize) -> impl Strategy<Value = Polynomial> {
    prop::collection::vec((prop::collection::vec(0..=max_exp, n), -2.0..2.0f64), 0..=max_terms).prop_map(
        move |terms| {
            let mut p = Polynomial::zero(n);
            for (e, c) in terms {
                p.add_term(Exponents::new(e), c);
            }
            p
        },
    )
}

fn point(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5..1.5f64, n)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn evaluation_is_a_ring_homomorphism(
        (p, q, x) in (1usize..=3).prop_flat_map(|n| (polynomial(n, 3, 5), polynomial(n, 3, 5), point(n)))
    ) {
        let (px, qx) = (p.eval(&x).unwrap(), q.eval(&x).unwrap());
        prop_assert!(close((&p + &q).eval(&x).unwrap(), px + qx));
        prop_assert!(close((&p - &q).eval(&x).unwrap(), px - qx));
        prop_assert!(close((&p * &q).eval(&x).unwrap(), px * qx));
    }

    #[test]
    fn composition_matches_nested_evaluation(
        (p, maps, x) in (1usize..=3).prop_flat_map(|n| (
            polynomial(n, 2, 4),
            prop::collection::vec(polynomial(n, 2, 3), n),
            point(n),
        ))
    ) {
        let f = PolynomialMap::new(maps).unwrap();
        let composed = p.compose(&f).unwrap();
        prop_assert!(close(composed.eval(&x).unwrap(), p.eval(&f.eval(&x).unwrap()).unwrap()));
    }

    #[test]
    fn hessian_is_symmetric_and_scalarizes(
        (p, xy) in (1usize..=3).prop_flat_map(|n| (polynomial(n, 4, 5), point(2 * n)))
    ) {
        let n = p.nvars();
        let h = p.hessian();
        prop_assert!(h.is_symmetric());
        let hx = h.eval(&xy[..n]).unwrap();
        let y = nalgebra::DVector::from_column_slice(&xy[n..]);
        let direct = (y.transpose() * &hx * &y)[(0, 0)];
        prop_assert!(close(h.scalarize().eval(&xy).unwrap(), direct));
    }

    #[test]
    fn polynomials_round_trip_through_json(p in (1usize..=3).prop_flat_map(|n| polynomial(n, 4, 6))) {
        let text = switchcert::json::to_string(&p).unwrap();
        let back: Polynomial = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(switchcert::json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn system_files_round_trip(entries in prop::collection::vec(-3.0..3.0f64, 8)) {
        let mats = vec![
            DMatrix::from_row_slice(2, 2, &entries[..4]),
            DMatrix::from_row_slice(2, 2, &entries[4..]),
        ];
        let sys = SwitchedSystem::from_matrices(&mats).unwrap();
        let text = switchcert::json::to_string(&SystemFile::from_system(&sys)).unwrap();
        let back = SystemFile::parse(&text).unwrap().to_system().unwrap();
        prop_assert_eq!(back.matrices(), mats);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// `zᵀ L Lᵀ z` is sos by construction.
    #[test]
    fn planted_gram_matrices_are_found(
        (n, entries) in (1usize..=2).prop_flat_map(|n| {
            let k = monomial_basis(n, 2, false).len();
            (Just(n), prop::collection::vec(-1.0..1.0f64, k * k))
        })
    ) {
        let basis = monomial_basis(n, 2, false);
        let k = basis.len();
        let l = DMatrix::from_row_slice(k, k, &entries);
        let q = &l * l.transpose();
        let mut p = Polynomial::zero(n);
        for i in 0..k {
            for j in 0..k {
                p.add_term(basis[i].mul(&basis[j]), q[(i, j)]);
            }
        }
        match check_sos(&p, &SosOptions::default()).unwrap() {
            SosOutcome::Feasible(cert) => {
                let chk = cert.check(&p).unwrap();
                prop_assert!(chk.passes(1e-6, 1e-8), "{chk:?}");
            }
            other => prop_assert!(false, "verdict {}", other.verdict()),
        }
    }

    /// The three sos-convexity tests agree wherever all three are decisive.
    #[test]
    fn formulations_agree(p in (1usize..=2).prop_flat_map(|n| polynomial(n, 3, 5))) {
        prop_assume!(p.degree() >= 2 && p.degree() % 2 == 0);
        let verdicts: Vec<Verdict> = Formulation::ALL
            .iter()
            .map(|f| check_sosconvex(&p, *f, &SosOptions::default()).unwrap().verdict())
            .collect();
        let decisive: Vec<&Verdict> = verdicts.iter().filter(|v| **v != Verdict::Unknown).collect();
        prop_assert!(decisive.windows(2).all(|w| w[0] == w[1]), "{p}: {verdicts:?}");
    }

    /// A common Lyapunov function survives a change of coordinates, so the
    /// verdict does not depend on the basis.
    #[test]
    fn verdicts_are_similarity_invariant(
        gamma in prop::sample::select(vec![0.5, 0.6, 0.8, 0.9]),
        t in prop::collection::vec(-0.4..0.4f64, 4),
    ) {
        let t = DMatrix::from_row_slice(2, 2, &t) + DMatrix::identity(2, 2);
        prop_assume!(t.determinant().abs() > 0.3);
        let t_inv = t.clone().try_inverse().unwrap();
        let mats = ando_shih(gamma);
        let similar: Vec<DMatrix<f64>> = mats.iter().map(|a| &t * a * &t_inv).collect();
        let opts = SynthOptions::new(2, true);
        let a = synth_common_lyapunov(&mats, &opts).unwrap().verdict();
        let b = synth_common_lyapunov(&similar, &opts).unwrap().verdict();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a, if gamma < 0.7 { Verdict::Feasible } else { Verdict::Infeasible });
    }

    /// Every synthesized certificate decreases at sampled points.
    #[test]
    fn certificates_decrease_at_samples(
        entries in prop::collection::vec(-0.6..0.6f64, 8),
        seed in any::<u64>(),
    ) {
        let mats = vec![
            DMatrix::from_row_slice(2, 2, &entries[..4]),
            DMatrix::from_row_slice(2, 2, &entries[4..]),
        ];
        if let SosOutcome::Feasible(cert) = synth_common_lyapunov(&mats, &SynthOptions::new(2, true)).unwrap() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert!(cert.sampled_decrease(&mats, 500, &mut rng) > 0.0);
        }
    }

    /// Fixed weights are a plain convex combination of the modes.
    #[test]
    fn fixed_weights_step_is_the_convex_combination(
        entries in prop::collection::vec(-1.0..1.0f64, 8),
        w in 0.0..=1.0f64,
        x0 in point(2),
    ) {
        let mats = [
            DMatrix::from_row_slice(2, 2, &entries[..4]),
            DMatrix::from_row_slice(2, 2, &entries[4..]),
        ];
        let sys = SwitchedSystem::from_matrices(&mats).unwrap();
        let opts = SimOptions { max_steps: 1, conv_tol: 0.0, div_threshold: f64::INFINITY };
        let traj = simulate(&sys, &x0, &SwitchingPolicy::FixedWeights(vec![w, 1.0 - w]), &opts).unwrap();
        let x = nalgebra::DVector::from_column_slice(&x0);
        let expect = (&mats[0] * w + &mats[1] * (1.0 - w)) * x;
        for i in 0..2 {
            prop_assert!(close(traj.states[1][i], expect[i]));
        }
    }
}
