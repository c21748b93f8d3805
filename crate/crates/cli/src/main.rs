use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use switchcert::files::{CertificateFile, SystemFile};
use switchcert::lyap::{jsr_upper_bound, synth_common_lyapunov, JsrOptions, SynthOptions};
use switchcert::multi::{synth_multi, Assignment, AssignmentChoice, MultiOptions};
use switchcert::roa::{
    analyze, level_set, level_set_csv, roa_certify, roa_maximize_beta, synth_v, AnalyzeOptions, RoaOptions,
    TemplateKind,
};
use switchcert::sim::{monitor_decrease, simulate, trajectory_csv, SimOptions, SwitchingPolicy, Termination};
use switchcert::sosprog::{check_sos, check_sosconvex, Formulation, SosOptions, SosOutcome, Verdict, VerifyTolerance};
use switchcert::{Error, Polynomial, SwitchedSystem};

const EXIT_OK: u8 = 0;
const EXIT_INPUT: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_UNKNOWN: u8 = 3;

#[derive(Parser)]
#[command(name = "switchcert", version, about = "Sum-of-squares certificates for switched systems")]
struct Cli {
    /// Worker threads for parallel solves (default: all cores).
    #[arg(long, global = true, env = "SWITCHCERT_THREADS")]
    threads: Option<usize>,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test whether a polynomial is a sum of squares.
    CheckSos {
        poly: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Test whether a polynomial is sos-convex.
    CheckSosconvex {
        poly: PathBuf,
        #[arg(long, value_enum, default_value_t = FormulationArg::Hessian)]
        formulation: FormulationArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Search for a common polynomial Lyapunov function of a linear system.
    Synth {
        system: PathBuf,
        #[arg(long)]
        degree: u32,
        #[arg(long)]
        convex: bool,
        #[arg(long, default_value_t = switchcert::lyap::DEFAULT_MARGIN)]
        margin: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Upper bound on the joint spectral radius by bisection on the scaling.
    Jsr {
        system: PathBuf,
        #[arg(long)]
        degree: u32,
        #[arg(long)]
        convex: bool,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Certify a sublevel set inside the region of attraction.
    Roa(RoaArgs),
    /// Multiple Lyapunov functions whose pointwise max decreases.
    Multi {
        system: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        degree: u32,
        /// Assignment table file, or `enumerate`.
        #[arg(long, default_value = "enumerate")]
        assignment: String,
        /// Allow enumerations larger than this many assignments.
        #[arg(long, default_value_t = switchcert::multi::ENUMERATION_CAP)]
        max_assignments: usize,
        #[arg(long, default_value_t = switchcert::lyap::DEFAULT_MARGIN)]
        margin: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Simulate one trajectory of the difference inclusion.
    Simulate {
        system: PathBuf,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Vec<f64>,
        /// `fixed:w1,w2,...`, `hull`, `hull2`, `vertex` or `greedy`.
        #[arg(long, default_value = "hull")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-8)]
        conv_tol: f64,
        #[arg(long, default_value_t = 1e8)]
        div_threshold: f64,
        /// Polynomial whose values are tracked (required by `greedy`).
        #[arg(long)]
        monitor: Option<PathBuf>,
        /// Trajectory CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check a certificate without solving anything.
    Verify {
        certificate: PathBuf,
        #[arg(long)]
        system: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OutArg {
    /// Write the certificate here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RoaArgs {
    system: PathBuf,
    /// Degree of V when it is synthesized.
    #[arg(long, default_value_t = 4)]
    deg_v: u32,
    #[arg(long, default_value_t = 4)]
    deg_mult: u32,
    /// Use this V instead of synthesizing one.
    #[arg(long)]
    v: Option<PathBuf>,
    /// Certify this β only instead of maximizing.
    #[arg(long)]
    beta: Option<f64>,
    /// Stop doubling β at this value.
    #[arg(long, default_value_t = 65536.0)]
    beta_max: f64,
    #[arg(long, value_enum, default_value_t = TemplateArg::PerMode)]
    template: TemplateArg,
    #[arg(long)]
    pruned: bool,
    /// Contour of the certified sublevel set (two dimensions only).
    #[arg(long)]
    levelset: Option<PathBuf>,
    #[arg(long, default_value_t = 720)]
    rays: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormulationArg {
    Hessian,
    Gradient,
    Lambda,
}

impl From<FormulationArg> for Formulation {
    fn from(f: FormulationArg) -> Self {
        match f {
            FormulationArg::Hessian => Formulation::Hessian,
            FormulationArg::Gradient => Formulation::Gradient,
            FormulationArg::Lambda => Formulation::LambdaHalf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    PerMode,
    Joint,
}

impl From<TemplateArg> for TemplateKind {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::PerMode => TemplateKind::PerMode,
            TemplateArg::Joint => TemplateKind::Joint,
        }
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::NoFeasibleBeta { .. } => (EXIT_INFEASIBLE, "no_feasible_beta"),
            Error::EnumerationExhausted { .. } => (EXIT_INFEASIBLE, "enumeration_exhausted"),
            Error::LinearizationNotCertifiedStable { .. } => (EXIT_UNKNOWN, "linearization_not_certified_stable"),
            Error::IllConditioned => (EXIT_UNKNOWN, "ill_conditioned"),
            Error::Verification(_) => (EXIT_UNKNOWN, "verification"),
            Error::Json(_) => (EXIT_INPUT, "malformed_json"),
            Error::Io(_) => (EXIT_INPUT, "io"),
            Error::EnumerationTooLarge { .. } => (EXIT_INPUT, "enumeration_too_large"),
            Error::DegreeCapTooSmall { .. } => (EXIT_INPUT, "degree_cap_too_small"),
            Error::DimensionMismatch { .. } => (EXIT_INPUT, "dimension_mismatch"),
            Error::NonzeroConstantTerm { .. } => (EXIT_INPUT, "nonzero_constant_term"),
            Error::OddDegree(_) => (EXIT_INPUT, "odd_degree"),
            Error::NotSymmetric => (EXIT_INPUT, "not_symmetric"),
            Error::InvalidInput(_) => (EXIT_INPUT, "invalid_input"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        kind: "invalid_input",
        message: message.into(),
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            // parsing failed, so look for the flag by hand
            if code == EXIT_INPUT && std::env::args().any(|a| a == "--json-errors") {
                let v = json!({"error": "usage", "message": e.to_string().trim_end(), "exit_code": code});
                eprint!("{}", switchcert::json::to_string(&v).unwrap_or_default());
                return ExitCode::from(code);
            }
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            if cli.json_errors {
                let v = json!({"error": f.kind, "message": f.message, "exit_code": f.code});
                eprint!("{}", switchcert::json::to_string(&v).unwrap_or_else(|_| f.message.clone()));
            } else {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn load_system(path: &Path) -> Result<SwitchedSystem, Failure> {
    let file = SystemFile::parse(&read_text(path)?)?;
    Ok(file.to_system()?)
}

fn load_poly(path: &Path) -> Result<Polynomial, Failure> {
    Ok(serde_json::from_str(&read_text(path)?).map_err(Error::from)?)
}

fn linear_matrices(system: &SwitchedSystem) -> Result<Vec<nalgebra::DMatrix<f64>>, Failure> {
    if !system.is_linear() {
        return Err(input_error("this command needs a linear system (every mode of degree 1)"));
    }
    Ok(system.matrices())
}

fn print(v: &Value) -> Result<(), Failure> {
    print!("{}", switchcert::json::to_string(v)?);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn write_cert(out: &OutArg, cert: &CertificateFile) -> Result<(), Failure> {
    if let Some(path) = &out.out {
        write_file(path, &switchcert::json::to_string(cert)?)?;
    }
    Ok(())
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::Feasible => EXIT_OK,
        Verdict::Infeasible => EXIT_INFEASIBLE,
        Verdict::Unknown => EXIT_UNKNOWN,
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::CheckSos { poly, out } => {
            let p = load_poly(&poly)?;
            let res = check_sos(&p, &SosOptions::default())?;
            let verdict = res.verdict();
            let mut summary = json!({"verdict": verdict});
            match res {
                SosOutcome::Feasible(c) => {
                    summary["residual"] = json!(c.residual);
                    summary["lambda_min"] = json!(c.lambda_min);
                    write_cert(
                        &out,
                        &CertificateFile::Sos {
                            polynomial: p,
                            certificate: c,
                        },
                    )?;
                }
                SosOutcome::Infeasible(m) => summary["moment_pairing"] = json!(m.pairing),
                SosOutcome::Unknown(s) => summary["detail"] = json!(s),
            }
            print(&summary)?;
            Ok(verdict_code(verdict))
        }
        Command::CheckSosconvex { poly, formulation, out } => {
            let p = load_poly(&poly)?;
            let res = check_sosconvex(&p, formulation.into(), &SosOptions::default())?;
            let verdict = res.verdict();
            let mut summary = json!({"verdict": verdict, "formulation": Formulation::from(formulation)});
            match res {
                SosOutcome::Feasible(c) => {
                    summary["residual"] = json!(c.gram.residual);
                    summary["lambda_min"] = json!(c.gram.lambda_min);
                    write_cert(
                        &out,
                        &CertificateFile::Sosconvex {
                            polynomial: p,
                            certificate: c,
                        },
                    )?;
                }
                SosOutcome::Infeasible(m) => summary["moment_pairing"] = json!(m.pairing),
                SosOutcome::Unknown(s) => summary["detail"] = json!(s),
            }
            print(&summary)?;
            Ok(verdict_code(verdict))
        }
        Command::Synth {
            system,
            degree,
            convex,
            margin,
            out,
        } => {
            let mats = linear_matrices(&load_system(&system)?)?;
            let mut opts = SynthOptions::new(degree, convex);
            opts.margin = margin;
            let res = synth_common_lyapunov(&mats, &opts)?;
            let verdict = res.verdict();
            let mut summary = json!({"verdict": verdict, "degree": degree, "convex": convex});
            match res {
                SosOutcome::Feasible(c) => {
                    summary["v"] = serde_json::to_value(&c.v).map_err(Error::from)?;
                    write_cert(
                        &out,
                        &CertificateFile::Lyapunov {
                            gamma: None,
                            certificate: c,
                        },
                    )?;
                }
                SosOutcome::Infeasible(w) => summary["detail"] = json!(format!("{w:?}")),
                SosOutcome::Unknown(s) => summary["detail"] = json!(s),
            }
            print(&summary)?;
            Ok(verdict_code(verdict))
        }
        Command::Jsr {
            system,
            degree,
            convex,
            tol,
            out,
        } => {
            let mats = linear_matrices(&load_system(&system)?)?;
            let mut opts = JsrOptions::new(degree, convex);
            opts.tol = tol;
            let bound = jsr_upper_bound(&mats, &opts)?;
            let summary = json!({
                "degree": degree,
                "convex": convex,
                "upper": bound.upper,
                "bracket_certified": bound.bracket_is_certified(),
                "probes": bound.probes,
            });
            if let (Some(g), Some(c)) = (bound.upper, &bound.certificate) {
                write_cert(
                    &out,
                    &CertificateFile::Lyapunov {
                        gamma: Some(g),
                        certificate: c.clone(),
                    },
                )?;
            }
            print(&summary)?;
            Ok(if bound.upper.is_some() { EXIT_OK } else { EXIT_UNKNOWN })
        }
        Command::Roa(args) => run_roa(args),
        Command::Multi {
            system,
            k,
            degree,
            assignment,
            max_assignments,
            margin,
            out,
        } => {
            let mats = linear_matrices(&load_system(&system)?)?;
            let choice = if assignment == "enumerate" {
                AssignmentChoice::Enumerate
            } else {
                let a: Assignment = serde_json::from_str(&read_text(Path::new(&assignment))?).map_err(Error::from)?;
                AssignmentChoice::Explicit(a)
            };
            let mut opts = MultiOptions::new(k, degree);
            opts.margin = margin;
            opts.enumeration_cap = max_assignments;
            let res = synth_multi(&mats, &choice, &opts)?;
            let verdict = res.verdict();
            let mut summary = json!({"verdict": verdict, "k": k, "degree": degree});
            match res {
                SosOutcome::Feasible(c) => {
                    summary["assignment"] = serde_json::to_value(&c.assignment).map_err(Error::from)?;
                    summary["v"] = serde_json::to_value(&c.v).map_err(Error::from)?;
                    write_cert(&out, &CertificateFile::Multi { certificate: c })?;
                }
                SosOutcome::Infeasible(s) | SosOutcome::Unknown(s) => summary["detail"] = json!(s),
            }
            print(&summary)?;
            Ok(verdict_code(verdict))
        }
        Command::Simulate {
            system,
            x0,
            policy,
            seed,
            steps,
            conv_tol,
            div_threshold,
            monitor,
            out,
        } => {
            let sys = load_system(&system)?;
            let v = monitor.as_deref().map(load_poly).transpose()?;
            let policy = parse_policy(&policy, seed, v.as_ref())?;
            let opts = SimOptions {
                max_steps: steps,
                conv_tol,
                div_threshold,
            };
            let traj = simulate(&sys, &x0, &policy, &opts)?;
            let termination = match traj.termination {
                Termination::ConvergedBelow { .. } => "converged_below",
                Termination::Diverged { .. } => "diverged",
                Termination::Budget => "budget",
            };
            let mut summary = json!({
                "termination": termination,
                "steps": traj.steps(),
                "final": traj.last(),
            });
            if let Some(v) = &v {
                let rep = monitor_decrease(&traj, v, conv_tol)?;
                summary["strict_decrease"] = json!(rep.strict);
                summary["first_violation"] = json!(rep.first_violation);
            }
            if let Some(path) = &out {
                write_file(path, &trajectory_csv(&traj, v.as_ref()))?;
            }
            print(&summary)?;
            Ok(EXIT_OK)
        }
        Command::Verify { certificate, system } => {
            let cert = CertificateFile::parse(&read_text(&certificate)?)?;
            let sys = system.as_deref().map(load_system).transpose()?;
            let report = cert.verify(sys.as_ref(), &VerifyTolerance::default())?;
            let passed = report.passed();
            print(&json!({"kind": cert.kind(), "passed": passed, "checks": report.checks}))?;
            Ok(if passed { EXIT_OK } else { EXIT_INFEASIBLE })
        }
    }
}

fn parse_policy(spec: &str, seed: u64, v: Option<&Polynomial>) -> Result<SwitchingPolicy, Failure> {
    match spec {
        "hull" => Ok(SwitchingPolicy::RandomHull { seed }),
        "hull2" => Ok(SwitchingPolicy::RandomHull2 { seed }),
        "vertex" => Ok(SwitchingPolicy::RandomVertex { seed }),
        "greedy" => v
            .cloned()
            .map(SwitchingPolicy::GreedyWorstCase)
            .ok_or_else(|| input_error("the greedy policy needs --monitor")),
        other => {
            let weights = other
                .strip_prefix("fixed:")
                .ok_or_else(|| input_error(format!("unknown policy '{other}'")))?;
            let w = weights
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| input_error(format!("bad weight: {e}")))?;
            Ok(SwitchingPolicy::FixedWeights(w))
        }
    }
}

fn run_roa(args: RoaArgs) -> CmdResult {
    let sys = load_system(&args.system)?;
    let mut opts = RoaOptions::new(args.deg_mult);
    opts.template = args.template.into();
    opts.pruned = args.pruned;
    opts.beta_cap = args.beta_max;
    let mut summary = json!({"template": opts.template, "deg_mult": args.deg_mult});
    let (v, cert) = match (&args.v, args.beta) {
        (Some(path), Some(beta)) => {
            let v = load_poly(path)?;
            summary["beta"] = json!(beta);
            match roa_certify(&sys, &v, beta, &opts)? {
                SosOutcome::Feasible(c) => (v, c),
                other => {
                    let verdict = other.verdict();
                    summary["verdict"] = json!(verdict);
                    if let SosOutcome::Infeasible(s) | SosOutcome::Unknown(s) = other {
                        summary["detail"] = json!(s);
                    }
                    print(&summary)?;
                    return Ok(verdict_code(verdict));
                }
            }
        }
        (Some(path), None) => {
            let v = load_poly(path)?;
            let search = roa_maximize_beta(&sys, &v, &opts)?;
            summary["beta"] = json!(search.beta);
            summary["hit_cap"] = json!(search.hit_cap);
            summary["probes"] = serde_json::to_value(&search.probes).map_err(Error::from)?;
            (v, search.certificate)
        }
        (None, Some(beta)) => {
            let mut a = AnalyzeOptions::new(args.deg_v, args.deg_mult);
            a.roa = opts;
            let v = synth_v(&sys, &a)?.v;
            summary["beta"] = json!(beta);
            match roa_certify(&sys, &v, beta, &opts)? {
                SosOutcome::Feasible(c) => (v, c),
                other => {
                    let verdict = other.verdict();
                    summary["verdict"] = json!(verdict);
                    summary["v"] = serde_json::to_value(&v).map_err(Error::from)?;
                    if let SosOutcome::Infeasible(s) | SosOutcome::Unknown(s) = other {
                        summary["detail"] = json!(s);
                    }
                    print(&summary)?;
                    return Ok(verdict_code(verdict));
                }
            }
        }
        (None, None) => {
            let mut a = AnalyzeOptions::new(args.deg_v, args.deg_mult);
            a.roa = opts;
            let analysis = analyze(&sys, &a)?;
            summary["beta"] = json!(analysis.search.beta);
            summary["hit_cap"] = json!(analysis.search.hit_cap);
            summary["probes"] = serde_json::to_value(&analysis.search.probes).map_err(Error::from)?;
            (analysis.lyapunov.v.clone(), analysis.search.certificate)
        }
    };
    summary["verdict"] = json!(Verdict::Feasible);
    summary["v"] = serde_json::to_value(&v).map_err(Error::from)?;
    summary["identity_residual"] = json!(cert.identity_residual(&sys)?.0);
    if let Some(path) = &args.levelset {
        write_file(path, &level_set_csv(&level_set(&v, cert.beta, args.rays)?))?;
    }
    write_cert(&args.out, &CertificateFile::Roa { certificate: cert })?;
    print(&summary)?;
    Ok(EXIT_OK)
}
