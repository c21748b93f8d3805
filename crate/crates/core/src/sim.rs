//! Trajectories of the difference inclusion `x_{k+1} ∈ conv{f_i(x_k)}` under
//! switching policies, falsification search and Lyapunov-decrease
//! monitoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::format_g17;
use crate::poly::{Polynomial, SwitchedSystem};

/// How the convex weights `λ(k)` are chosen at each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchingPolicy {
    FixedWeights(Vec<f64>),
    /// Uniform on the simplex.
    RandomHull { seed: u64 },
    /// Two modes only: `λ ~ U[0,1]`, weights `(λ, 1 − λ)`.
    RandomHull2 { seed: u64 },
    RandomVertex { seed: u64 },
    /// Vertex maximizing `V(f_i(x))`; ties go to the lowest index.
    GreedyWorstCase(Polynomial),
}

/// A policy without its seed, instantiated once per falsification trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFamily {
    FixedWeights(Vec<f64>),
    RandomHull,
    RandomHull2,
    RandomVertex,
    GreedyWorstCase(Polynomial),
}

impl PolicyFamily {
    pub fn instantiate(&self, seed: u64) -> SwitchingPolicy {
        match self {
            PolicyFamily::FixedWeights(w) => SwitchingPolicy::FixedWeights(w.clone()),
            PolicyFamily::RandomHull => SwitchingPolicy::RandomHull { seed },
            PolicyFamily::RandomHull2 => SwitchingPolicy::RandomHull2 { seed },
            PolicyFamily::RandomVertex => SwitchingPolicy::RandomVertex { seed },
            PolicyFamily::GreedyWorstCase(v) => SwitchingPolicy::GreedyWorstCase(v.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub max_steps: usize,
    pub conv_tol: f64,
    pub div_threshold: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            max_steps: 10_000,
            conv_tol: 1e-8,
            div_threshold: 1e8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    ConvergedBelow { tol: f64 },
    /// Includes non-finite states.
    Diverged { threshold: f64 },
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    /// `weights[k]` produced `states[k + 1]`.
    pub weights: Vec<Vec<f64>>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("a trajectory holds x0")
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct Chooser<'a> {
    policy: &'a SwitchingPolicy,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Chooser<'a> {
    fn new(policy: &'a SwitchingPolicy, m: usize, n: usize) -> Result<Self> {
        let rng = match policy {
            SwitchingPolicy::FixedWeights(w) => {
                if w.len() != m {
                    return Err(Error::DimensionMismatch {
                        expected: m,
                        found: w.len(),
                    });
                }
                let sum: f64 = w.iter().sum();
                if w.iter().any(|&c| !(c >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput("weights must be nonnegative and sum to 1".into()));
                }
                None
            }
            SwitchingPolicy::RandomHull2 { seed } => {
                if m != 2 {
                    return Err(Error::InvalidInput(format!("random_hull2 needs exactly 2 modes, got {m}")));
                }
                Some(ChaCha8Rng::seed_from_u64(*seed))
            }
            SwitchingPolicy::RandomHull { seed } | SwitchingPolicy::RandomVertex { seed } => {
                Some(ChaCha8Rng::seed_from_u64(*seed))
            }
            SwitchingPolicy::GreedyWorstCase(v) => {
                if v.nvars() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: v.nvars(),
                    });
                }
                None
            }
        };
        Ok(Chooser { policy, rng })
    }

    fn weights(&mut self, images: &[Vec<f64>]) -> Vec<f64> {
        let m = images.len();
        match self.policy {
            SwitchingPolicy::FixedWeights(w) => w.clone(),
            SwitchingPolicy::RandomHull { .. } => {
                let rng = self.rng.as_mut().expect("seeded");
                // normalized Exp(1) draws are Dirichlet(1, …, 1)
                let e: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v: f64| v / s).collect()
            }
            SwitchingPolicy::RandomHull2 { .. } => {
                let l: f64 = self.rng.as_mut().expect("seeded").random();
                vec![l, 1.0 - l]
            }
            SwitchingPolicy::RandomVertex { .. } => {
                let i = self.rng.as_mut().expect("seeded").random_range(0..m);
                one_hot(m, i)
            }
            SwitchingPolicy::GreedyWorstCase(v) => {
                let mut best = 0;
                let mut best_val = f64::NEG_INFINITY;
                for (i, y) in images.iter().enumerate() {
                    let val = v.eval_unchecked(y);
                    if val > best_val {
                        best = i;
                        best_val = val;
                    }
                }
                one_hot(m, best)
            }
        }
    }
}

fn one_hot(m: usize, i: usize) -> Vec<f64> {
    let mut w = vec![0.0; m];
    w[i] = 1.0;
    w
}

/// Iterate until `|x| <= conv_tol`, `|x| >= div_threshold` (or non-finite),
/// or `max_steps`.
pub fn simulate(system: &SwitchedSystem, x0: &[f64], policy: &SwitchingPolicy, opts: &SimOptions) -> Result<Trajectory> {
    let n = system.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x0.len(),
        });
    }
    let mut chooser = Chooser::new(policy, system.num_modes(), n)?;
    let mut states = vec![x0.to_vec()];
    let mut weights = Vec::new();
    let mut x = x0.to_vec();
    let termination = loop {
        let r = norm(&x);
        if !r.is_finite() || r >= opts.div_threshold {
            break Termination::Diverged {
                threshold: opts.div_threshold,
            };
        }
        if r <= opts.conv_tol {
            break Termination::ConvergedBelow { tol: opts.conv_tol };
        }
        if weights.len() >= opts.max_steps {
            break Termination::Budget;
        }
        let images: Vec<Vec<f64>> = system
            .modes()
            .iter()
            .map(|f| f.eval(&x).expect("dimension checked"))
            .collect();
        let w = chooser.weights(&images);
        let mut next = vec![0.0; n];
        for (wi, y) in w.iter().zip(&images) {
            if *wi != 0.0 {
                for (acc, c) in next.iter_mut().zip(y) {
                    *acc += wi * c;
                }
            }
        }
        weights.push(w);
        states.push(next.clone());
        x = next;
    };
    Ok(Trajectory {
        states,
        weights,
        termination,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseReport {
    pub values: Vec<f64>,
    /// `V` strictly decreased at every step taken from a state above the
    /// convergence tolerance.
    pub strict: bool,
    pub first_violation: Option<usize>,
}

pub fn monitor_decrease(traj: &Trajectory, v: &Polynomial, conv_tol: f64) -> Result<DecreaseReport> {
    let values = traj.states.iter().map(|x| v.eval(x)).collect::<Result<Vec<f64>>>()?;
    let first_violation = (0..traj.steps()).find(|&k| norm(&traj.states[k]) > conv_tol && !(values[k + 1] < values[k]));
    Ok(DecreaseReport {
        strict: first_violation.is_none(),
        values,
        first_violation,
    })
}

/// Largest `V(x_{k+1}) − Σ λ_i V(f_i(x_k))` along the trajectory; nonpositive
/// for convex V up to rounding.
pub fn jensen_gap(system: &SwitchedSystem, traj: &Trajectory, v: &Polynomial) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for (k, w) in traj.weights.iter().enumerate() {
        let x = &traj.states[k];
        let mut mix = 0.0;
        for (wi, f) in w.iter().zip(system.modes()) {
            mix += wi * v.eval(&f.eval(x)?)?;
        }
        worst = worst.max(v.eval(&traj.states[k + 1])? - mix);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Sublevel { v: Polynomial, beta: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Region {
    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Region::Sublevel { v, beta } => crate::roa::sample_sublevel(v, *beta, rng),
            Region::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.random::<f64>()).collect(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Region::Sublevel { v, .. } => v.nvars(),
            Region::Box { lo, .. } => lo.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WitnessKind {
    Diverged,
    /// V failed to decrease strictly at `step`.
    Increase { step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub trial: usize,
    pub seed: u64,
    pub kind: WitnessKind,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FalsifyOutcome {
    Witness(Box<Witness>),
    NoneFound { trials: usize },
}

/// Seed of trial `t`: a splitmix step so neighbouring trials get unrelated
/// streams.
fn trial_seed(seed: u64, t: usize) -> u64 {
    let mut z = seed.wrapping_add((t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Search for a diverging trajectory, or for sublevel regions a trajectory
/// along which V fails to decrease. Trials run in parallel; the witness with
/// the smallest trial index is returned.
pub fn falsify(
    system: &SwitchedSystem,
    region: &Region,
    trials: usize,
    family: &PolicyFamily,
    opts: &SimOptions,
    seed: u64,
) -> Result<FalsifyOutcome> {
    if region.dim() != system.dim() {
        return Err(Error::DimensionMismatch {
            expected: system.dim(),
            found: region.dim(),
        });
    }
    if let Region::Box { lo, hi } = region {
        if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidInput("box bounds must satisfy lo <= hi".into()));
        }
    }
    let found = (0..trials).into_par_iter().find_map_first(|t| {
        let s = trial_seed(seed, t);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x0 = region.sample(&mut rng);
        let policy = family.instantiate(s ^ 0x5DEE_CE66);
        let traj = match simulate(system, &x0, &policy, opts) {
            Ok(tr) => tr,
            Err(e) => return Some(Err(e)),
        };
        let kind = if matches!(traj.termination, Termination::Diverged { .. }) {
            Some(WitnessKind::Diverged)
        } else if let Region::Sublevel { v, .. } = region {
            match monitor_decrease(&traj, v, opts.conv_tol) {
                Ok(rep) => rep.first_violation.map(|step| WitnessKind::Increase { step }),
                Err(e) => return Some(Err(e)),
            }
        } else {
            None
        };
        kind.map(|kind| {
            Ok(Witness {
                trial: t,
                seed: s,
                kind,
                trajectory: traj,
            })
        })
    });
    match found {
        Some(w) => Ok(FalsifyOutcome::Witness(Box::new(w?))),
        None => Ok(FalsifyOutcome::NoneFound { trials }),
    }
}

/// `step,x1,…,xn[,V]` with one row per state.
pub fn trajectory_csv(traj: &Trajectory, v: Option<&Polynomial>) -> String {
    let n = traj.states.first().map_or(0, |x| x.len());
    let mut s = String::from("step");
    for i in 1..=n {
        s.push_str(&format!(",x{i}"));
    }
    if v.is_some() {
        s.push_str(",V");
    }
    s.push('\n');
    for (k, x) in traj.states.iter().enumerate() {
        s.push_str(&k.to_string());
        for c in x {
            s.push(',');
            s.push_str(&format_g17(*c));
        }
        if let Some(v) = v {
            s.push(',');
            s.push_str(&format_g17(v.eval_unchecked(x)));
        }
        s.push('\n');
    }
    s
}
