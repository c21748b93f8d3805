//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use switchcert::corpus;
use switchcert::files::CertificateFile;
use switchcert::lyap::{
    ando_shih, decrease_polynomial, degree_escalation, jsr_upper_bound, synth_common_lyapunov, JsrOptions,
    SynthOptions,
};
use switchcert::multi::{sampled_max_decrease, synth_multi, AssignmentChoice, MultiOptions};
use switchcert::poly::{Polynomial, SwitchedSystem};
use switchcert::roa::{analyze, roa_certify, sample_sublevel, AnalyzeOptions, RoaOptions, TemplateKind};
use switchcert::sdp::{self, generate, SdpOptions, SdpStatus};
use switchcert::sim::{falsify, simulate, FalsifyOutcome, PolicyFamily, Region, SimOptions, SwitchingPolicy, Termination, WitnessKind};
use switchcert::sosprog::{
    check_sosconvex, max_sos_margin, Formulation, SosOptions, SosOutcome, Verdict, VerifyTolerance,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Certificates emitted while checking criteria 1-7, with the system each
/// one speaks about.
#[derive(Default)]
struct Emitted(Vec<(String, CertificateFile, Option<SwitchedSystem>)>);

impl Emitted {
    fn push(&mut self, name: impl Into<String>, cert: CertificateFile, system: Option<&SwitchedSystem>) {
        self.0.push((name.into(), cert, system.cloned()));
    }
}

fn run(id: u32, limit: Option<Duration>, failures: &mut u32, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let out = f();
    let took = t.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = out.pass && in_time;
    if !pass {
        *failures += 1;
    }
    let limit = limit.map(|l| format!(" / {}s", l.as_secs())).unwrap_or_default();
    let late = if in_time { "" } else { "; over the time limit" };
    println!(
        "criterion {id:>2}: {} ({}{late}) [{:.2}s{limit}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn ando_shih_quadratic_bound(emitted: &mut Emitted) -> Outcome {
    let mats = ando_shih(1.0);
    let bound = match jsr_upper_bound(&mats, &JsrOptions::new(2, false)) {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let Some(upper) = bound.upper else {
        return outcome(false, "no certified upper bound");
    };
    let s2 = 2f64.sqrt();
    if let Some(c) = bound.certificate {
        emitted.push(
            "jsr degree 2",
            CertificateFile::Lyapunov {
                gamma: Some(upper),
                certificate: c,
            },
            Some(&SwitchedSystem::from_matrices(&mats).unwrap()),
        );
    }
    outcome(
        (s2 * 0.98..=s2 * 1.02).contains(&upper),
        format!("gamma* = {upper:.5}, sqrt 2 = {s2:.5}"),
    )
}

fn quartic_nonconvex(emitted: &mut Emitted) -> Outcome {
    let scaled = ando_shih(0.95);
    let synth = match synth_common_lyapunov(&scaled, &SynthOptions::new(4, false)) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("synth error: {e}")),
    };
    let verdict = synth.verdict();
    if let SosOutcome::Feasible(c) = synth {
        emitted.push(
            "synth degree 4 at 0.95",
            CertificateFile::Lyapunov {
                gamma: None,
                certificate: c,
            },
            Some(&corpus::ando_shih_system(0.95)),
        );
    }
    let mats = ando_shih(1.0);
    let bound = match jsr_upper_bound(&mats, &JsrOptions::new(4, false)) {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("jsr error: {e}")),
    };
    if let (Some(g), Some(c)) = (bound.upper, bound.certificate) {
        emitted.push(
            "jsr degree 4",
            CertificateFile::Lyapunov {
                gamma: Some(g),
                certificate: c,
            },
            Some(&SwitchedSystem::from_matrices(&mats).unwrap()),
        );
    }
    let upper = bound.upper.unwrap_or(f64::INFINITY);
    outcome(
        verdict == Verdict::Feasible && upper <= 1.05,
        format!("synth at 0.95: {verdict}; jsr degree 4 gamma* = {upper:.5}"),
    )
}

fn convex_degree_gap() -> Outcome {
    let base = SynthOptions::new(4, true);
    let convex = degree_escalation(&ando_shih(0.999), true, 4, &base);
    let nonconvex = degree_escalation(&ando_shih(0.95), false, 4, &base);
    let (Ok(convex), Ok(nonconvex)) = (convex, nonconvex) else {
        return outcome(false, "escalation error");
    };
    let at4 = |rows: &[switchcert::lyap::EscalationRow]| rows.iter().find(|r| r.degree == 4).map(|r| r.verdict);
    let (c, n) = (at4(&convex), at4(&nonconvex));
    outcome(
        c == Some(Verdict::Infeasible) && n == Some(Verdict::Feasible),
        format!(
            "convex at 0.999, degree 4: {}; non-convex at 0.95, degree 4: {}",
            c.map_or("missing".into(), |v| v.to_string()),
            n.map_or("missing".into(), |v| v.to_string())
        ),
    )
}

fn quadratic_pair_end_to_end(emitted: &mut Emitted) -> Outcome {
    let system = corpus::quadratic_pair();
    let mut notes = Vec::new();
    let mut pass = true;

    // the published V
    let v = corpus::quadratic_pair_reference_v();
    let opts = SosOptions::default();
    match check_sosconvex(&v, Formulation::Hessian, &opts) {
        Ok(SosOutcome::Feasible(c)) => {
            notes.push("reference V sos-convex".to_string());
            emitted.push(
                "reference V sos-convexity",
                CertificateFile::Sosconvex {
                    polynomial: v.clone(),
                    certificate: c,
                },
                None,
            );
        }
        other => {
            pass = false;
            notes.push(format!("reference V sos-convexity: {:?}", other.map(|o| o.verdict())));
        }
    }
    let reference = Polynomial::norm_sq_power(2, 2);
    let mut worst = f64::INFINITY;
    for a in corpus::quadratic_pair_linearization() {
        let dec = decrease_polynomial(&v, &a, 0.0, 4).expect("dimensions agree");
        match max_sos_margin(&dec, &reference, &[], &opts) {
            Ok(SosOutcome::Feasible((eps, _))) => worst = worst.min(eps),
            _ => worst = f64::NEG_INFINITY,
        }
    }
    pass &= worst >= -1e-4;
    notes.push(format!("reference V decrease margin {worst:.3e}"));

    // synthesized V and the sound per-mode certificate
    let analysis = match analyze(&system, &AnalyzeOptions::new(4, 4)) {
        Ok(a) => a,
        Err(e) => return outcome(false, format!("analyze error: {e}")),
    };
    let quartic = analysis.lyapunov.v.degree() == 4 && analysis.lyapunov.convex;
    pass &= quartic;
    let beta = analysis.search.beta;
    notes.push(format!("analyze per-mode beta* = {beta:.4e} (needs >= 1)"));
    pass &= beta >= 1.0;
    emitted.push(
        "analyze per-mode ROA",
        CertificateFile::Roa {
            certificate: analysis.search.certificate.clone(),
        },
        Some(&system),
    );

    // the sampled truth for the same V shows the per-mode bound is tight
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let grow = switchcert::roa::sampled_decrease(&system, &analysis.lyapunov.v, 2.0 * beta, 20_000, &mut rng);
    notes.push(format!("V(f_i) - V sampled on V <= 2 beta*: max {grow:+.2e}"));

    // informational: the joint product set, which only rules out points where
    // every mode fails to decrease at once
    let mut joint = RoaOptions::new(4);
    joint.template = TemplateKind::Joint;
    match roa_certify(&system, &analysis.lyapunov.v, 1.0, &joint) {
        Ok(o) => notes.push(format!("joint template at beta 1: {} (not a region-of-attraction proof)", o.verdict())),
        Err(e) => notes.push(format!("joint template error: {e}")),
    }
    outcome(pass, notes.join("; "))
}

fn product_pair_dichotomy() -> Outcome {
    let system = corpus::product_pair();
    let v = corpus::product_pair_nonconvex_v();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut vertex_ok = true;
    for _ in 0..10_000 {
        let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let vx = v.eval(&x).unwrap();
        for f in system.modes() {
            vertex_ok &= v.eval(&f.eval(&x).unwrap()).unwrap() < vx;
        }
    }
    let region = Region::Box {
        lo: vec![3.0, 3.0],
        hi: vec![3.0, 3.0],
    };
    let found = falsify(
        &system,
        &region,
        1,
        &PolicyFamily::FixedWeights(vec![0.5, 0.5]),
        &SimOptions::default(),
        0,
    );
    let diverged = match &found {
        Ok(FalsifyOutcome::Witness(w)) => w.kind == WitnessKind::Diverged,
        _ => false,
    };
    let verdicts: Vec<Verdict> = Formulation::ALL
        .iter()
        .map(|f| {
            check_sosconvex(&v, *f, &SosOptions::default()).map_or(Verdict::Unknown, |o| o.verdict())
        })
        .collect();
    let not_convex = verdicts.iter().all(|v| *v == Verdict::Infeasible);
    outcome(
        vertex_ok && diverged && not_convex,
        format!(
            "vertex decrease on 10^4 samples: {vertex_ok}; diverging hull trajectory from (3,3): {diverged}; sos-convexity: {verdicts:?}"
        ),
    )
}

fn product_pair_local(emitted: &mut Emitted) -> Outcome {
    let system = corpus::product_pair();
    let v = corpus::unit_disk_v();
    let cert = match roa_certify(&system, &v, 1.0, &RoaOptions::new(4)) {
        Ok(SosOutcome::Feasible(c)) => c,
        Ok(o) => return outcome(false, format!("roa verdict {}", o.verdict())),
        Err(e) => return outcome(false, format!("roa error: {e}")),
    };
    emitted.push("unit disk ROA", CertificateFile::Roa { certificate: cert }, Some(&system));
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let mut converged = 0;
    for trial in 0..1000u64 {
        let x0 = sample_sublevel(&v, 1.0, &mut rng);
        let traj = simulate(&system, &x0, &SwitchingPolicy::RandomHull { seed: trial }, &SimOptions::default())
            .expect("valid input");
        if matches!(traj.termination, Termination::ConvergedBelow { .. }) {
            converged += 1;
        }
    }
    outcome(converged == 1000, format!("certificate at beta 1; {converged}/1000 trajectories converged"))
}

fn formulation_equivalence(emitted: &mut Emitted) -> Outcome {
    let suite = corpus::sosconvex_suite(7, 50);
    let opts = SosOptions::default();
    let mut hard = 0;
    let mut borderline = Vec::new();
    let mut counts = [0usize; 3];
    for (i, p) in suite.iter().enumerate() {
        let mut verdicts = Vec::new();
        for f in Formulation::ALL {
            let out = check_sosconvex(p, f, &opts);
            let verdict = out.as_ref().map_or(Verdict::Unknown, |o| o.verdict());
            if let Ok(SosOutcome::Feasible(c)) = out {
                emitted.push(
                    format!("suite {i} {f}"),
                    CertificateFile::Sosconvex {
                        polynomial: p.clone(),
                        certificate: c,
                    },
                    None,
                );
            }
            verdicts.push(verdict);
        }
        let has = |v: Verdict| verdicts.contains(&v);
        if has(Verdict::Feasible) && has(Verdict::Infeasible) {
            hard += 1;
            println!("    suite {i}: hard disagreement {verdicts:?}");
        } else if has(Verdict::Unknown) && verdicts.iter().any(|v| *v != Verdict::Unknown) {
            borderline.push(i);
            println!("    suite {i}: borderline {verdicts:?}");
        }
        match verdicts[0] {
            Verdict::Feasible => counts[0] += 1,
            Verdict::Infeasible => counts[1] += 1,
            Verdict::Unknown => counts[2] += 1,
        }
    }
    outcome(
        hard == 0,
        format!(
            "50 polynomials: {} sos-convex, {} not, {} unknown; {hard} hard and {} borderline disagreements",
            counts[0],
            counts[1],
            counts[2],
            borderline.len()
        ),
    )
}

fn self_verification(emitted: &Emitted) -> Outcome {
    let tol = VerifyTolerance::default();
    let before = sdp::solve_calls();
    let mut failed = Vec::new();
    for (name, cert, system) in &emitted.0 {
        // through the on-disk form, as `verify` sees it
        let text = switchcert::json::to_string(cert).expect("serializable");
        let ok = CertificateFile::parse(&text)
            .and_then(|c| c.verify(system.as_ref(), &tol))
            .is_ok_and(|r| r.passed());
        if !ok {
            failed.push(name.clone());
        }
    }
    let solver_calls = sdp::solve_calls() - before;
    outcome(
        failed.is_empty() && solver_calls == 0 && !emitted.0.is_empty(),
        format!(
            "{}/{} certificates verified, {solver_calls} solver calls during verification{}",
            emitted.0.len() - failed.len(),
            emitted.0.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
        ),
    )
}

fn multi_sample_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut feasible = 0;
    let mut worst = f64::INFINITY;
    for (gamma, k) in [(0.9, 2), (0.95, 2), (0.95, 3)] {
        let mats: Vec<DMatrix<f64>> = ando_shih(gamma);
        let out = synth_multi(&mats, &AssignmentChoice::Enumerate, &MultiOptions::new(k, 2));
        if let Ok(SosOutcome::Feasible(cert)) = out {
            feasible += 1;
            worst = worst.min(sampled_max_decrease(&cert, &mats, 10_000, &mut rng));
        }
    }
    outcome(
        feasible > 0 && worst > 1e-9,
        format!("{feasible} feasible multi certificates; min relative decrease of max V_k over 10^4 points {worst:.3e}"),
    )
}

fn sdp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let opts = SdpOptions::default();
    let mut solved = 0;
    for trial in 0..100 {
        let dims = vec![rng.random_range(2..7), rng.random_range(1..4)];
        let k = rng.random_range(3..10);
        let free = if trial % 4 == 0 { 2 } else { 0 };
        let p = generate::strictly_feasible(&mut rng, &dims, k, free);
        if let Ok(sol) = sdp::solve(&p, &opts) {
            let r = sdp::kkt_report(&p, &sol);
            if sol.status == SdpStatus::Optimal && r.primal <= 1e-7 && r.dual <= 1e-7 && r.gap <= 1e-7 {
                solved += 1;
            }
        }
    }
    let mut rays = 0;
    for _ in 0..20 {
        let dims = vec![rng.random_range(2..6), rng.random_range(1..4)];
        let k = rng.random_range(2..8);
        let p = generate::primal_infeasible(&mut rng, &dims, k);
        if let Ok(sol) = sdp::solve(&p, &opts) {
            if sol.status == SdpStatus::PrimalInfeasible && sdp::verify_infeasibility_ray(&p, &sol.y, 1e-8) {
                rays += 1;
            }
        }
    }
    outcome(
        solved == 100 && rays == 20,
        format!("{solved}/100 feasible within KKT 1e-7, {rays}/20 infeasible with verified rays"),
    )
}

fn main() {
    let mut failures = 0;
    let mut emitted = Emitted::default();
    run(1, secs(10), &mut failures, || ando_shih_quadratic_bound(&mut emitted));
    run(2, secs(30), &mut failures, || quartic_nonconvex(&mut emitted));
    run(3, secs(60), &mut failures, convex_degree_gap);
    run(4, secs(60), &mut failures, || quadratic_pair_end_to_end(&mut emitted));
    run(5, secs(10), &mut failures, product_pair_dichotomy);
    run(6, secs(30), &mut failures, || product_pair_local(&mut emitted));
    run(7, secs(120), &mut failures, || formulation_equivalence(&mut emitted));
    run(8, None, &mut failures, || self_verification(&emitted));
    run(9, None, &mut failures, multi_sample_soundness);
    run(10, secs(60), &mut failures, sdp_oracle);
    println!("{} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
