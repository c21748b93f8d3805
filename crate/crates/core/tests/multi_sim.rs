use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use switchcert::corpus;
use switchcert::files::CertificateFile;
use switchcert::lyap::{ando_shih, synth_common_lyapunov, SynthOptions};
use switchcert::multi::{sampled_max_decrease, synth_multi, Assignment, AssignmentChoice, MultiOptions};
use switchcert::sim::{
    falsify, monitor_decrease, simulate, trajectory_csv, FalsifyOutcome, PolicyFamily, Region, SimOptions,
    SwitchingPolicy, Termination, WitnessKind,
};
use switchcert::sosprog::{Verdict, VerifyTolerance};

#[test]
fn two_quadratics_beat_one_and_round_trip() {
    let mats = ando_shih(0.9);
    assert_eq!(
        synth_common_lyapunov(&mats, &SynthOptions::new(2, true)).unwrap().verdict(),
        Verdict::Infeasible
    );
    let cert = synth_multi(&mats, &AssignmentChoice::Enumerate, &MultiOptions::new(2, 2))
        .unwrap()
        .feasible()
        .expect("two quadratics suffice at 0.9");
    let file = CertificateFile::Multi { certificate: cert };
    let text = switchcert::json::to_string(&file).unwrap();
    let back = CertificateFile::parse(&text).unwrap();
    assert_eq!(back, file);
    let sys = corpus::ando_shih_system(0.9);
    assert!(back.verify(Some(&sys), &VerifyTolerance::default()).unwrap().passed());
    let CertificateFile::Multi { certificate } = back else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(sampled_max_decrease(&certificate, &mats, 10_000, &mut rng) > 1e-9);
}

#[test]
fn enumeration_is_lexicographic_and_deterministic() {
    let mats = ando_shih(0.9);
    let opts = MultiOptions::new(2, 2);
    let a = synth_multi(&mats, &AssignmentChoice::Enumerate, &opts).unwrap().feasible().unwrap();
    let b = synth_multi(&mats, &AssignmentChoice::Enumerate, &opts).unwrap().feasible().unwrap();
    assert_eq!(a.assignment, b.assignment);
    let count = Assignment::count(2, 2).unwrap();
    let first = (0..count)
        .map(|i| Assignment::nth(2, 2, i))
        .position(|asg| synth_multi(&mats, &AssignmentChoice::Explicit(asg), &opts).unwrap().verdict() == Verdict::Feasible)
        .unwrap();
    assert_eq!(a.assignment, Assignment::nth(2, 2, first));
}

#[test]
fn single_function_matches_common_lyapunov() {
    for gamma in [0.5, 0.9] {
        let mats = ando_shih(gamma);
        let multi = synth_multi(&mats, &AssignmentChoice::Enumerate, &MultiOptions::new(1, 2));
        let common = synth_common_lyapunov(&mats, &SynthOptions::new(2, true)).unwrap().verdict();
        match multi {
            Ok(o) => assert_eq!(o.verdict(), common, "gamma {gamma}"),
            Err(e) => assert_eq!(common, Verdict::Infeasible, "gamma {gamma}: {e}"),
        }
    }
}

#[test]
fn half_weights_blow_up_the_product_pair() {
    let sys = corpus::product_pair();
    let traj = simulate(&sys, &[3.0, 3.0], &SwitchingPolicy::FixedWeights(vec![0.5, 0.5]), &SimOptions::default()).unwrap();
    assert!(matches!(traj.termination, Termination::Diverged { .. }));
    assert_eq!(traj.states[1], vec![4.5, 4.5]);
    let report = monitor_decrease(&traj, &corpus::product_pair_nonconvex_v(), 1e-8).unwrap();
    assert!(!report.strict);
    assert_eq!(report.first_violation, Some(0));
    let csv = trajectory_csv(&traj, None);
    assert_eq!(csv.lines().next(), Some("step,x1,x2"));
    assert_eq!(csv.lines().count(), traj.states.len() + 1);
}

#[test]
fn falsify_finds_growth_in_the_hull_but_not_at_vertices() {
    let sys = corpus::product_pair();
    let v = corpus::product_pair_nonconvex_v();
    let region = Region::Box {
        lo: vec![2.0, 2.0],
        hi: vec![4.0, 4.0],
    };
    let opts = SimOptions::default();
    match falsify(&sys, &region, 64, &PolicyFamily::RandomHull, &opts, 5).unwrap() {
        FalsifyOutcome::Witness(w) => assert_eq!(w.kind, WitnessKind::Diverged),
        FalsifyOutcome::NoneFound { .. } => panic!("hull trajectories should escape"),
    }
    // vertex switching only: V decreases along every step
    let sublevel = Region::Sublevel { v: v.clone(), beta: 50.0 };
    assert!(matches!(
        falsify(&sys, &sublevel, 64, &PolicyFamily::RandomVertex, &opts, 5).unwrap(),
        FalsifyOutcome::NoneFound { trials: 64 }
    ));
}

#[test]
fn falsify_is_reproducible_across_thread_counts() {
    let sys = corpus::product_pair();
    let region = Region::Box {
        lo: vec![-3.0, -3.0],
        hi: vec![3.0, 3.0],
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| falsify(&sys, &region, 200, &PolicyFamily::RandomHull2, &SimOptions::default(), 9).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn contraction_never_escapes() {
    let sys = corpus::contraction();
    let region = Region::Sublevel {
        v: corpus::unit_disk_v(),
        beta: 4.0,
    };
    let out = falsify(&sys, &region, 100, &PolicyFamily::RandomVertex, &SimOptions::default(), 1).unwrap();
    assert_eq!(out, FalsifyOutcome::NoneFound { trials: 100 });
}

#[test]
fn multi_certificate_needs_matching_system() {
    let cert = synth_multi(&ando_shih(0.5), &AssignmentChoice::Enumerate, &MultiOptions::new(2, 2))
        .unwrap()
        .feasible()
        .unwrap();
    let file = CertificateFile::Multi { certificate: cert };
    assert!(file.verify(None, &VerifyTolerance::default()).is_err());
    // the scaled-up pair is not contracted by the same functions
    let bigger = corpus::ando_shih_system(1.2);
    assert!(!file.verify(Some(&bigger), &VerifyTolerance::default()).unwrap().passed());
}

#[test]
fn every_certified_pair_decreases_by_the_margin() {
    let mats = ando_shih(0.9);
    let cert = synth_multi(&mats, &AssignmentChoice::Enumerate, &MultiOptions::new(2, 2))
        .unwrap()
        .feasible()
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for d in &cert.decrease {
        for _ in 0..2000 {
            let theta: f64 = rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU);
            let x = [theta.cos(), theta.sin()];
            let ax = &mats[d.mode] * nalgebra::DVector::from_column_slice(&x);
            let gap = cert.v[d.to].eval(&x).unwrap() - cert.v[d.from].eval(ax.as_slice()).unwrap();
            assert!(gap >= cert.margin * (1.0 - 1e-3), "pair ({}, {}): {gap}", d.mode, d.from);
        }
    }
}

/// Duplicating a function turns a K certificate into a K+1 one without
/// solving anything.
#[test]
fn feasibility_is_monotone_in_k() {
    let mats = ando_shih(0.9);
    let cert = synth_multi(&mats, &AssignmentChoice::Enumerate, &MultiOptions::new(2, 2))
        .unwrap()
        .feasible()
        .unwrap();
    let mut bigger = cert.clone();
    bigger.v.push(cert.v[1].clone());
    bigger.convexity.push(cert.convexity[1].clone());
    bigger.assignment = Assignment {
        k: 3,
        table: cert.assignment.table.iter().map(|row| vec![row[0], row[1], row[1]]).collect(),
    };
    bigger.decrease = (0..mats.len())
        .flat_map(|i| {
            let cert = &cert;
            (0..3).map(move |j| {
                let mut d = cert.decrease[i * 2 + j.min(1)].clone();
                d.from = j;
                d
            })
        })
        .collect();
    let before = switchcert::sdp::solve_calls();
    assert!(bigger.verify(&mats, &VerifyTolerance::default()).unwrap().passed());
    assert_eq!(switchcert::sdp::solve_calls(), before);
}
