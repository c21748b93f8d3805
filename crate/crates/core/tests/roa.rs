use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use switchcert::corpus;
use switchcert::files::{CertificateFile, SystemFile};
use switchcert::poly::{Polynomial, SwitchedSystem};
use switchcert::roa::{roa_certify, roa_maximize_beta, sample_sublevel, sampled_decrease, RoaCertificate, RoaOptions, TemplateKind};
use switchcert::sim::{simulate, SimOptions, SwitchingPolicy, Termination};
use switchcert::sosprog::{SosOutcome, Verdict, VerifyTolerance};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name)
}

fn shipped_roa(name: &str) -> RoaCertificate {
    match CertificateFile::load(&fixture(name)).unwrap() {
        CertificateFile::Roa { certificate } => certificate,
        other => panic!("{name} is a {} certificate", other.kind()),
    }
}

#[test]
fn shipped_per_mode_certificate_holds_on_samples() {
    let system = corpus::quadratic_pair();
    let cert = shipped_roa("quadratic_pair_roa.json");
    assert_eq!(cert.template, TemplateKind::PerMode);
    assert!(cert.verify(&system, &VerifyTolerance::default()).unwrap().passed());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let worst = sampled_decrease(&system, &cert.v, cert.beta, 100_000, &mut rng);
    assert!(worst < 0.0, "V increased somewhere on the certified set: {worst}");
}

#[test]
fn certified_sets_shrink_monotonically() {
    let system = corpus::quadratic_pair();
    let v = corpus::quadratic_pair_reference_v();
    let opts = RoaOptions::new(4);
    let beta = shipped_roa("quadratic_pair_roa.json").beta;
    for b in [beta, beta / 2.0, beta / 4.0] {
        let out = roa_certify(&system, &v, b, &opts).unwrap();
        assert_eq!(out.verdict(), Verdict::Feasible, "beta {b}");
    }
}

#[test]
fn trajectories_from_the_certified_set_converge() {
    let system = corpus::quadratic_pair();
    let cert = shipped_roa("quadratic_pair_roa.json");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..100 {
        let x0 = sample_sublevel(&cert.v, cert.beta, &mut rng);
        let traj = simulate(&system, &x0, &SwitchingPolicy::RandomHull { seed }, &SimOptions::default()).unwrap();
        assert!(
            matches!(traj.termination, Termination::ConvergedBelow { .. }),
            "from {x0:?}: {:?}",
            traj.termination
        );
        let v0 = cert.v.eval(&x0).unwrap();
        assert!(traj.states.iter().all(|x| cert.v.eval(x).unwrap() <= v0 * (1.0 + 1e-12)));
    }
}

/// With `0.5x` and `2x` there is never a point where both modes fail to
/// decrease, so the joint product set is empty, yet the second mode
/// expands everywhere.
#[test]
fn joint_template_is_weaker_than_per_mode() {
    let system = SwitchedSystem::from_matrices(&[DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2) * 2.0]).unwrap();
    let v = corpus::unit_disk_v();
    let mut joint = RoaOptions::new(2);
    joint.template = TemplateKind::Joint;
    assert_eq!(roa_certify(&system, &v, 1.0, &joint).unwrap().verdict(), Verdict::Feasible);
    assert_ne!(roa_certify(&system, &v, 1.0, &RoaOptions::new(2)).unwrap().verdict(), Verdict::Feasible);
}

#[test]
fn squaring_map_bound_is_near_the_true_radius() {
    // x ↦ (x1², 0) contracts exactly on the open unit disk
    let f = switchcert::poly::PolynomialMap::new(vec![
        switchcert::poly::poly(2, &[(1.0, &[2, 0])]),
        Polynomial::zero(2),
    ])
    .unwrap();
    let system = SwitchedSystem::new(vec![f]).unwrap();
    let search = roa_maximize_beta(&system, &corpus::unit_disk_v(), &RoaOptions::new(2)).unwrap();
    assert!(search.beta > 0.95 && search.beta <= 1.0, "{}", search.beta);
    assert!(search.certificate.verify(&system, &VerifyTolerance::default()).unwrap().passed());
}

#[test]
fn tampered_identity_is_rejected() {
    let system = corpus::product_pair();
    let mut cert = shipped_roa("product_pair_roa.json");
    assert!(cert.verify(&system, &VerifyTolerance::default()).unwrap().passed());
    cert.beta *= 1.5;
    assert!(!cert.verify(&system, &VerifyTolerance::default()).unwrap().passed());
}

#[test]
fn infeasible_beta_is_reported() {
    let system = corpus::quadratic_pair();
    let out = roa_certify(&system, &corpus::quadratic_pair_reference_v(), 0.05, &RoaOptions::new(4)).unwrap();
    assert!(!matches!(out, SosOutcome::Feasible(_)));
}

#[test]
fn fixtures_match_the_constructors() {
    let systems: Vec<(String, SwitchedSystem)> = corpus::ANDO_SHIH_GAMMAS
        .iter()
        .map(|g| (format!("ando_shih_{g}.json"), corpus::ando_shih_system(*g)))
        .chain([
            ("ando_shih_0.95.json".to_string(), corpus::ando_shih_system(0.95)),
            ("product_pair.json".into(), corpus::product_pair()),
            ("quadratic_pair.json".into(), corpus::quadratic_pair()),
            ("decoupled_pair.json".into(), corpus::decoupled_pair()),
            ("contraction.json".into(), corpus::contraction()),
        ])
        .collect();
    for (name, sys) in systems {
        let file = SystemFile::load(&fixture(&name)).unwrap();
        assert_eq!(file.to_system().unwrap().modes(), sys.modes(), "{name}");
    }
    for (name, p) in [
        ("product_pair_nonconvex_v.json", corpus::product_pair_nonconvex_v()),
        ("unit_disk_v.json", corpus::unit_disk_v()),
        ("quadratic_pair_reference_v.json", corpus::quadratic_pair_reference_v()),
    ] {
        let text = std::fs::read_to_string(fixture(name)).unwrap();
        let back: Polynomial = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p, "{name}");
    }
}
