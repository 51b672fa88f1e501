//! Finite MDPs, policies, sampling, and the chain-level matrices.
//!
//! States and actions are dense indices. Rewards are finite discrete
//! distributions per state-action pair and are sampled independently of the
//! next state, so `E[R_t | S_{t-1}, A_{t-1}, S_t] = r(S_{t-1}, A_{t-1})`.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for row sums of probability tables.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub value: f64,
    pub prob: f64,
}

impl RewardOutcome {
    pub fn new(value: f64, prob: f64) -> Self {
        Self { value, prob }
    }
}

/// A finite MDP with a state-dependent discount `γ(s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']` is `p(s' | s, a)`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward_model[s][a]` lists the reward outcomes of taking `a` in `s`.
    pub reward_model: Vec<Vec<Vec<RewardOutcome>>>,
    pub discount: Vec<f64>,
    pub initial_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub state_names: Vec<String>,
}

/// An invariant of [`FiniteMdp`] that does not hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape(String),
    NegativeProbability { state: usize, action: usize, next: usize, prob: f64 },
    TransitionRowSum { state: usize, action: usize, sum: f64 },
    RewardSum { state: usize, action: usize, sum: f64 },
    NonFiniteReward { state: usize, action: usize },
    Discount { state: usize, value: f64 },
    InitialDist { sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Violation::NegativeProbability { state, action, next, prob } => {
                write!(f, "negative probability {prob} for p({next} | {state}, {action})")
            }
            Violation::TransitionRowSum { state, action, sum } => {
                write!(f, "row sum {sum} ≠ 1 for transition ({state}, {action})")
            }
            Violation::RewardSum { state, action, sum } => {
                write!(f, "reward outcome probabilities sum to {sum} ≠ 1 for ({state}, {action})")
            }
            Violation::NonFiniteReward { state, action } => {
                write!(f, "non-finite reward outcome for ({state}, {action})")
            }
            Violation::Discount { state, value } => {
                write!(f, "discount out of [0,1]: γ({state}) = {value}")
            }
            Violation::InitialDist { sum } => write!(f, "initial distribution sums to {sum} ≠ 1"),
        }
    }
}

/// Why Assumption-1 style preconditions fail for a (model, policy) pair.
#[derive(Clone, Debug, PartialEq)]
pub enum AssumptionViolation {
    NotErgodic,
    SingularReverseSystem { spectral_radius: f64 },
}

impl fmt::Display for AssumptionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssumptionViolation::NotErgodic => write!(f, "not ergodic"),
            AssumptionViolation::SingularReverseSystem { spectral_radius } => write!(
                f,
                "singular (I − P_πᵀΓ): spectral radius of P_πᵀΓ is {spectral_radius}"
            ),
        }
    }
}

impl FiniteMdp {
    /// Returns every violated invariant; empty when the model is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            out.push(Violation::Shape("need at least one state and one action".into()));
            return out;
        }
        if self.transition.len() != ns || self.reward_model.len() != ns {
            out.push(Violation::Shape(format!("expected {ns} state rows")));
            return out;
        }
        if self.discount.len() != ns || self.initial_dist.len() != ns {
            out.push(Violation::Shape(format!(
                "discount and initial_dist need {ns} entries"
            )));
            return out;
        }
        if !self.state_names.is_empty() && self.state_names.len() != ns {
            out.push(Violation::Shape(format!("expected {ns} state names")));
        }
        for s in 0..ns {
            if self.transition[s].len() != na || self.reward_model[s].len() != na {
                out.push(Violation::Shape(format!("state {s} needs {na} action rows")));
                continue;
            }
            for a in 0..na {
                let row = &self.transition[s][a];
                if row.len() != ns {
                    out.push(Violation::Shape(format!(
                        "transition ({s}, {a}) has {} entries, expected {ns}",
                        row.len()
                    )));
                    continue;
                }
                for (next, &prob) in row.iter().enumerate() {
                    if !(prob >= 0.0) {
                        out.push(Violation::NegativeProbability { state: s, action: a, next, prob });
                    }
                }
                let sum: f64 = row.iter().sum();
                if !((sum - 1.0).abs() <= PROB_TOL) {
                    out.push(Violation::TransitionRowSum { state: s, action: a, sum });
                }
                let outcomes = &self.reward_model[s][a];
                if outcomes.iter().any(|o| !o.value.is_finite()) {
                    out.push(Violation::NonFiniteReward { state: s, action: a });
                }
                let rsum: f64 = outcomes.iter().map(|o| o.prob).sum();
                if outcomes.iter().any(|o| !(o.prob >= 0.0)) || !((rsum - 1.0).abs() <= PROB_TOL) {
                    out.push(Violation::RewardSum { state: s, action: a, sum: rsum });
                }
            }
        }
        for (s, &g) in self.discount.iter().enumerate() {
            if !(0.0..=1.0).contains(&g) {
                out.push(Violation::Discount { state: s, value: g });
            }
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if self.initial_dist.iter().any(|p| !(*p >= 0.0)) || !((sum - 1.0).abs() <= PROB_TOL) {
            out.push(Violation::InitialDist { sum });
        }
        out
    }

    /// Fails with [`Error::InvalidModel`] listing all violations.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(v))
        }
    }

    /// Mean reward `r(s, a)`.
    pub fn mean_reward(&self, s: usize, a: usize) -> f64 {
        self.reward_model[s][a].iter().map(|o| o.value * o.prob).sum()
    }

    pub fn state_name(&self, s: usize) -> String {
        self.state_names.get(s).cloned().unwrap_or_else(|| s.to_string())
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let mdp: FiniteMdp = serde_json::from_str(json)?;
        mdp.ensure_valid()?;
        Ok(mdp)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Row-stochastic action probabilities `π(a | s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { probs };
        p.check_rows()?;
        Ok(p)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states] }
    }

    /// The same action distribution in every state.
    pub fn state_independent(n_states: usize, action_probs: &[f64]) -> Result<Self> {
        Self::new(vec![action_probs.to_vec(); n_states])
    }

    /// Puts all mass on `action` in every state.
    pub fn deterministic(n_states: usize, n_actions: usize, action: usize) -> Self {
        let mut row = vec![0.0; n_actions];
        row[action] = 1.0;
        Self { probs: vec![row; n_states] }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    fn check_rows(&self) -> Result<()> {
        for (s, row) in self.probs.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidPolicy(format!("negative probability in state {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidPolicy(format!("row sum {sum} ≠ 1 in state {s}")));
            }
        }
        Ok(())
    }

    /// Checks shape against `mdp` and row normalization.
    pub fn validate_for(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.probs.len() != mdp.n_states
            || self.probs.iter().any(|r| r.len() != mdp.n_actions)
        {
            return Err(Error::InvalidPolicy(format!(
                "expected a {}x{} table",
                mdp.n_states, mdp.n_actions
            )));
        }
        self.check_rows()
    }
}

/// One sampled step `(S_{t-1}, A_{t-1}, R_t, S_t)`; `time_index` is `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub prev_state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub time_index: u64,
}

/// Which reward convention the microdrone uses on a failed move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicrodroneRewards {
    /// A failed move consumes nothing: reward 0 with probability 0.01.
    #[default]
    Energy,
    /// Deterministic rewards 2 (clockwise) and 1 (counterclockwise).
    Ideal,
}

pub const MICRODRONE_FAILURE_PROB: f64 = 0.01;
pub const CLOCKWISE: usize = 0;
pub const COUNTERCLOCKWISE: usize = 1;
pub const CHARGING_STATION: usize = 3;

/// Four locations on a circle `L1 → L2 → L3 → L4 → L1` (clockwise); `L4`
/// recharges the battery, so `γ(L4) = 0`. Returns the uniform random policy
/// alongside the model.
pub fn build_microdrone(rewards: MicrodroneRewards) -> (FiniteMdp, Policy) {
    let n = 4;
    let fail = MICRODRONE_FAILURE_PROB;
    let mut transition = vec![vec![vec![0.0; n]; 2]; n];
    let mut reward_model = vec![vec![Vec::new(); 2]; n];
    for s in 0..n {
        let moves = [(CLOCKWISE, (s + 1) % n, 2.0), (COUNTERCLOCKWISE, (s + n - 1) % n, 1.0)];
        for (a, next, energy) in moves {
            transition[s][a][next] = 1.0 - fail;
            transition[s][a][s] = fail;
            reward_model[s][a] = match rewards {
                MicrodroneRewards::Energy => vec![
                    RewardOutcome::new(energy, 1.0 - fail),
                    RewardOutcome::new(0.0, fail),
                ],
                MicrodroneRewards::Ideal => vec![RewardOutcome::new(energy, 1.0)],
            };
        }
    }
    let mdp = FiniteMdp {
        n_states: n,
        n_actions: 2,
        transition,
        reward_model,
        discount: vec![1.0, 1.0, 1.0, 0.0],
        initial_dist: vec![0.25; n],
        state_names: ["L1", "L2", "L3", "L4"].iter().map(|s| s.to_string()).collect(),
    };
    (mdp, Policy::uniform(n, 2))
}

/// Shape of the discount function drawn by the random generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DiscountProfile {
    /// `γ(s)` uniform on `[0, 1]`, some states pinned to 1.
    Continuous,
    /// `γ(s) ∈ {0, 1}` with integer rewards, so reverse-return supports stay
    /// on the integer lattice.
    Binary,
}

/// Random ergodic MDP with strictly positive transition rows and at least
/// one state with `γ(s) < 1`. Deterministic in `seed`.
pub fn build_random_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    reward_outcomes: usize,
) -> Result<(FiniteMdp, Policy)> {
    random_mdp(seed, n_states, n_actions, reward_outcomes, DiscountProfile::Continuous)
}

/// Like [`build_random_mdp`], but with `γ(s) ∈ {0, 1}` and small integer
/// reward values. The distributional fixed point of such a model has
/// integer support, so it can be computed to tight tolerances.
pub fn build_random_lattice_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    reward_outcomes: usize,
) -> Result<(FiniteMdp, Policy)> {
    random_mdp(seed, n_states, n_actions, reward_outcomes, DiscountProfile::Binary)
}

fn random_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    reward_outcomes: usize,
    profile: DiscountProfile,
) -> Result<(FiniteMdp, Policy)> {
    if n_states < 2 {
        return Err(Error::DegenerateChain(format!("{n_states} state(s); need at least 2")));
    }
    if n_actions < 2 {
        return Err(Error::DegenerateChain(format!("{n_actions} action(s); need at least 2")));
    }
    if reward_outcomes == 0 {
        return Err(Error::DegenerateChain("need at least one reward outcome".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(n_states);
    let mut reward_model = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let mut t_rows = Vec::with_capacity(n_actions);
        let mut r_rows = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            t_rows.push(positive_simplex(&mut rng, n_states, 0.02));
            let probs = positive_simplex(&mut rng, reward_outcomes, 0.05);
            let values: Vec<f64> = match profile {
                DiscountProfile::Continuous => {
                    (0..reward_outcomes).map(|_| rng.random_range(-1.0..2.0)).collect()
                }
                DiscountProfile::Binary => distinct_integers(&mut rng, reward_outcomes),
            };
            r_rows.push(
                values.into_iter().zip(probs).map(|(v, p)| RewardOutcome::new(v, p)).collect(),
            );
        }
        transition.push(t_rows);
        reward_model.push(r_rows);
    }
    let mut discount: Vec<f64> = match profile {
        DiscountProfile::Continuous => (0..n_states)
            .map(|_| if rng.random_bool(0.3) { 1.0 } else { rng.random_range(0.0..1.0) })
            .collect(),
        DiscountProfile::Binary => {
            (0..n_states).map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.0 }).collect()
        }
    };
    if discount.iter().all(|&g| g >= 1.0) {
        let s = rng.random_range(0..n_states);
        discount[s] = match profile {
            DiscountProfile::Continuous => rng.random_range(0.0..0.9),
            DiscountProfile::Binary => 0.0,
        };
    }
    let initial_dist = positive_simplex(&mut rng, n_states, 0.0);
    let policy = Policy {
        probs: (0..n_states).map(|_| positive_simplex(&mut rng, n_actions, 0.05)).collect(),
    };
    let mdp = FiniteMdp {
        n_states,
        n_actions,
        transition,
        reward_model,
        discount,
        initial_dist,
        state_names: Vec::new(),
    };
    mdp.ensure_valid()?;
    Ok((mdp, policy))
}

/// A random point in the open simplex: Dirichlet(1) weights plus `floor`,
/// renormalized.
fn positive_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random::<f64>()).ln() + floor)
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn distinct_integers<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut pool: Vec<i32> = (0..(k as i32 + 3)).collect();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool[..k].iter().map(|&v| f64::from(v)).collect()
}

/// Draws an index from a probability vector by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Draws a reward outcome for `(s, a)`, independently of the next state.
pub fn sample_reward<R: Rng + ?Sized>(mdp: &FiniteMdp, s: usize, a: usize, rng: &mut R) -> f64 {
    let outcomes = &mdp.reward_model[s][a];
    if outcomes.len() == 1 {
        return outcomes[0].value;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for o in outcomes {
        acc += o.prob;
        if u < acc {
            return o.value;
        }
    }
    outcomes.iter().rev().find(|o| o.prob > 0.0).map_or(outcomes[0].value, |o| o.value)
}

/// One interaction step from `state`: `A ~ π(·|s)`, `S' ~ p(·|s, A)`, then
/// the reward. Consumes exactly three uniforms (two when the reward is
/// deterministic).
pub fn sample_step<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &Policy,
    state: usize,
    time_index: u64,
    rng: &mut R,
) -> Transition {
    let action = sample_index(&policy.probs[state], rng);
    let next_state = sample_index(&mdp.transition[state][action], rng);
    let reward = sample_reward(mdp, state, action, rng);
    Transition { prev_state: state, action, reward, next_state, time_index }
}

/// Draws `S_0 ~ μ₀`.
pub fn sample_initial<R: Rng + ?Sized>(mdp: &FiniteMdp, rng: &mut R) -> usize {
    sample_index(&mdp.initial_dist, rng)
}

/// An endless stream of transitions under a fixed policy.
pub struct Rollout<'a, R> {
    mdp: &'a FiniteMdp,
    policy: &'a Policy,
    state: usize,
    t: u64,
    rng: R,
}

impl<'a, R: Rng> Rollout<'a, R> {
    /// Starts from `S_0 ~ μ₀`.
    pub fn new(mdp: &'a FiniteMdp, policy: &'a Policy, mut rng: R) -> Self {
        let state = sample_initial(mdp, &mut rng);
        Self::from_state(mdp, policy, state, rng)
    }

    pub fn from_state(mdp: &'a FiniteMdp, policy: &'a Policy, state: usize, rng: R) -> Self {
        Self { mdp, policy, state, t: 0, rng }
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl<R: Rng> Iterator for Rollout<'_, R> {
    type Item = Transition;

    fn next(&mut self) -> Option<Transition> {
        self.t += 1;
        let tr = sample_step(self.mdp, self.policy, self.state, self.t, &mut self.rng);
        self.state = tr.next_state;
        Some(tr)
    }
}

/// `P_π(s, s') = Σ_a π(a|s) p(s'|s, a)`.
pub fn transition_matrix(mdp: &FiniteMdp, policy: &Policy) -> DMatrix<f64> {
    let n = mdp.n_states;
    DMatrix::from_fn(n, n, |s, s2| {
        (0..mdp.n_actions).map(|a| policy.probs[s][a] * mdp.transition[s][a][s2]).sum()
    })
}

/// `P̃((s, a), s') = p(s'|s, a)`, rows ordered `s * |A| + a`.
pub fn state_action_matrix(mdp: &FiniteMdp) -> DMatrix<f64> {
    let (n, na) = (mdp.n_states, mdp.n_actions);
    DMatrix::from_fn(n * na, n, |row, s2| mdp.transition[row / na][row % na][s2])
}

/// `r_π(s) = Σ_a π(a|s) r(s, a)`.
pub fn reward_vector(mdp: &FiniteMdp, policy: &Policy) -> DVector<f64> {
    DVector::from_fn(mdp.n_states, |s, _| {
        (0..mdp.n_actions).map(|a| policy.probs[s][a] * mdp.mean_reward(s, a)).sum()
    })
}

/// `r(s, a)` stacked in the same order as [`state_action_matrix`].
pub fn reward_sa_vector(mdp: &FiniteMdp) -> DVector<f64> {
    let na = mdp.n_actions;
    DVector::from_fn(mdp.n_states * na, |row, _| mdp.mean_reward(row / na, row % na))
}

/// `d̃(s, a) = d(s) π(a|s)`.
pub fn state_action_distribution(d: &DVector<f64>, policy: &Policy) -> DVector<f64> {
    let na = policy.probs.first().map_or(0, Vec::len);
    DVector::from_fn(d.len() * na, |row, _| d[row / na] * policy.probs[row / na][row % na])
}

/// `diag(γ)`.
pub fn discount_matrix(mdp: &FiniteMdp) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(&mdp.discount))
}

pub const STATIONARY_RESIDUAL_TOL: f64 = 1e-10;

/// Stationary distribution of a row-stochastic matrix.
///
/// Solves `(Pᵀ − I) d = 0` with the last equation replaced by `Σ d = 1`. A
/// singular system means the stationary distribution is not unique. If the
/// direct solution fails its residual check, falls back to power iteration.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::DegenerateChain("transition matrix must be square".into()));
    }
    let mut a = p.transpose() - DMatrix::identity(n, n);
    a.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let d = match linalg::solve(&a, &rhs) {
        Ok(d) => d,
        Err(_) => return Err(Error::NotErgodic),
    };
    if let Some(d) = clean_distribution(d) {
        if stationary_residual(p, &d) <= STATIONARY_RESIDUAL_TOL {
            return Ok(d);
        }
    }
    power_iteration_stationary(p, 1e-12, 1_000_000).map(|(d, _)| d)
}

fn clean_distribution(mut d: DVector<f64>) -> Option<DVector<f64>> {
    if d.iter().any(|&x| x < -1e-9 || !x.is_finite()) {
        return None;
    }
    d.iter_mut().for_each(|x| *x = x.max(0.0));
    let total = d.sum();
    if total <= 0.0 {
        return None;
    }
    Some(d / total)
}

/// `‖dᵀP − dᵀ‖∞`.
pub fn stationary_residual(p: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    linalg::norm_inf(&(p.transpose() * d - d))
}

/// Power iteration on the lazy chain `(P + I)/2` (same stationary
/// distribution, aperiodic) from the uniform vector. Returns the iterate and
/// the number of iterations.
pub fn power_iteration_stationary(
    p: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let n = p.nrows();
    let lazy_t = (p.transpose() + DMatrix::identity(n, n)) * 0.5;
    let mut d = DVector::from_element(n, 1.0 / n as f64);
    for it in 1..=max_iter {
        let mut next = &lazy_t * &d;
        next /= next.sum();
        let change = linalg::norm_inf(&(&next - &d));
        d = next;
        if change <= tol {
            return Ok((d, it));
        }
    }
    Err(Error::NotErgodic)
}

/// Strong connectivity of the support graph of `P`.
pub fn is_irreducible(p: &DMatrix<f64>) -> bool {
    let n = p.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                let w = if forward { p[(i, j)] } else { p[(j, i)] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|b| b)
    };
    n > 0 && reach(true) && reach(false)
}

/// Checks that the chain induced by `policy` is irreducible (so `d_π` is
/// unique and positive) and that `I − P_πᵀΓ` is invertible.
pub fn check_assumption1(
    mdp: &FiniteMdp,
    policy: &Policy,
) -> std::result::Result<(), AssumptionViolation> {
    let p = transition_matrix(mdp, policy);
    if !is_irreducible(&p) || stationary_distribution(&p).is_err() {
        return Err(AssumptionViolation::NotErgodic);
    }
    let m = p.transpose() * discount_matrix(mdp);
    let radius = linalg::spectral_radius(&m);
    let n = mdp.n_states;
    let system = DMatrix::identity(n, n) - &m;
    if radius >= 1.0 - 1e-10 || linalg::solve(&system, &DVector::zeros(n)).is_err() {
        return Err(AssumptionViolation::SingularReverseSystem { spectral_radius: radius });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(row: [f64; 2]) -> FiniteMdp {
        FiniteMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![row.to_vec()], vec![vec![0.5, 0.5]]],
            reward_model: vec![vec![vec![RewardOutcome::new(1.0, 1.0)]]; 2],
            discount: vec![0.5, 1.0],
            initial_dist: vec![0.5, 0.5],
            state_names: vec![],
        }
    }

    #[test]
    fn microdrone_is_valid() {
        for rewards in [MicrodroneRewards::Energy, MicrodroneRewards::Ideal] {
            let (mdp, pi) = build_microdrone(rewards);
            assert!(mdp.validate().is_empty(), "{:?}", mdp.validate());
            pi.validate_for(&mdp).unwrap();
        }
    }

    #[test]
    fn microdrone_constants() {
        let (mdp, _) = build_microdrone(MicrodroneRewards::Energy);
        assert_eq!(mdp.discount[CHARGING_STATION], 0.0);
        for s in 0..4 {
            assert_eq!(mdp.reward_model[s][CLOCKWISE][0].value, 2.0);
            assert_eq!(mdp.reward_model[s][COUNTERCLOCKWISE][0].value, 1.0);
            for a in 0..2 {
                assert_eq!(mdp.transition[s][a][s], 0.01);
            }
        }
        // clockwise from L1 lands on L2
        assert_eq!(mdp.transition[0][CLOCKWISE][1], 0.99);
        assert_eq!(mdp.transition[0][COUNTERCLOCKWISE][3], 0.99);
    }

    #[test]
    fn bad_row_sum_reported() {
        let mdp = two_state([0.5, 0.4]);
        let v = mdp.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("row sum 0.9 ≠ 1"), "{}", v[0]);
    }

    #[test]
    fn bad_discount_reported() {
        let mut mdp = two_state([0.5, 0.5]);
        mdp.discount[1] = 1.2;
        let v = mdp.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("discount out of [0,1]"));
    }

    #[test]
    fn json_round_trip() {
        let (mdp, _) = build_microdrone(MicrodroneRewards::Energy);
        let back = FiniteMdp::from_json_str(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn random_mdp_rejects_single_state() {
        let err = build_random_mdp(0, 1, 2, 2).unwrap_err();
        assert!(err.to_string().contains("degenerate chain"));
    }

    #[test]
    fn random_mdp_is_deterministic_and_valid() {
        let (a, pa) = build_random_mdp(0, 5, 3, 2).unwrap();
        let (b, pb) = build_random_mdp(0, 5, 3, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.validate().is_empty());
        assert_eq!(check_assumption1(&a, &pa), Ok(()));
        assert!(a.discount.iter().any(|&g| g < 1.0));
    }

    #[test]
    fn lattice_mdp_has_binary_discounts() {
        let (m, pi) = build_random_lattice_mdp(7, 6, 2, 3).unwrap();
        assert!(m.discount.iter().all(|&g| g == 0.0 || g == 1.0));
        assert!(m.discount.contains(&0.0));
        for row in m.reward_model.iter().flatten() {
            assert!(row.iter().all(|o| o.value.fract() == 0.0));
        }
        assert_eq!(check_assumption1(&m, &pi), Ok(()));
    }

    #[test]
    fn deterministic_step() {
        let mdp = FiniteMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            reward_model: vec![vec![vec![RewardOutcome::new(3.0, 1.0)]]; 2],
            discount: vec![1.0, 0.0],
            initial_dist: vec![1.0, 0.0],
            state_names: vec![],
        };
        let pi = Policy::uniform(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_step(&mdp, &pi, 0, 1, &mut rng);
        assert_eq!(
            t,
            Transition { prev_state: 0, action: 0, reward: 3.0, next_state: 1, time_index: 1 }
        );
    }

    #[test]
    fn fixed_seed_reproducible_trajectory() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let a: Vec<_> = Rollout::new(&mdp, &pi, ChaCha8Rng::seed_from_u64(9)).take(1000).collect();
        let b: Vec<_> = Rollout::new(&mdp, &pi, ChaCha8Rng::seed_from_u64(9)).take(1000).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn microdrone_failure_frequency() {
        let (mdp, _) = build_microdrone(MicrodroneRewards::Energy);
        let pi = Policy::deterministic(4, 2, CLOCKWISE);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let stays = (0..n)
            .filter(|&i| sample_step(&mdp, &pi, 0, i, &mut rng).next_state == 0)
            .count();
        let freq = stays as f64 / n as f64;
        let sigma = (0.01 * 0.99 / n as f64).sqrt();
        assert!((freq - 0.01).abs() <= 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn uniform_policy_row() {
        // state 0 has two actions moving deterministically to 1 and 2
        let mut transition = vec![vec![vec![0.0; 3]; 2]; 3];
        transition[0][0][1] = 1.0;
        transition[0][1][2] = 1.0;
        for s in 1..3 {
            for a in 0..2 {
                transition[s][a][0] = 1.0;
            }
        }
        let mdp = FiniteMdp {
            n_states: 3,
            n_actions: 2,
            transition,
            reward_model: vec![vec![vec![RewardOutcome::new(0.0, 1.0)]; 2]; 3],
            discount: vec![1.0; 3],
            initial_dist: vec![1.0, 0.0, 0.0],
            state_names: vec![],
        };
        let p = transition_matrix(&mdp, &Policy::uniform(3, 2));
        assert_eq!(p.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn microdrone_reward_vector() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Ideal);
        let r = reward_vector(&mdp, &pi);
        assert!(r.iter().all(|&x| x == 1.5));
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let r = reward_vector(&mdp, &pi);
        assert!(r.iter().all(|&x| (x - 1.5 * 0.99).abs() < 1e-15));
        let pt = state_action_matrix(&mdp);
        for row in pt.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_of_swap_chain() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let d = stationary_distribution(&p).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_chain_is_not_ergodic() {
        let p = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(stationary_distribution(&p), Err(Error::NotErgodic)));
    }

    #[test]
    fn microdrone_stationary_matches_power_iteration() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let p = transition_matrix(&mdp, &pi);
        let d = stationary_distribution(&p).unwrap();
        assert!(stationary_residual(&p, &d) <= 1e-10);
        let (d2, _) = power_iteration_stationary(&p, 1e-14, 1_000_000).unwrap();
        assert!(linalg::norm_inf(&(&d - d2)) < 1e-10);
    }

    #[test]
    fn assumption1_microdrone_ok() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        assert_eq!(check_assumption1(&mdp, &pi), Ok(()));
        let m = transition_matrix(&mdp, &pi).transpose() * discount_matrix(&mdp);
        assert!(linalg::spectral_radius(&m) < 1.0);
    }

    #[test]
    fn assumption1_periodic_undiscounted_is_singular() {
        let mdp = FiniteMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            reward_model: vec![vec![vec![RewardOutcome::new(1.0, 1.0)]]; 2],
            discount: vec![1.0, 1.0],
            initial_dist: vec![1.0, 0.0],
            state_names: vec![],
        };
        let v = check_assumption1(&mdp, &Policy::uniform(2, 1)).unwrap_err();
        assert!(matches!(v, AssumptionViolation::SingularReverseSystem { .. }));
        assert!(v.to_string().starts_with("singular (I − P_πᵀΓ)"));
    }

    #[test]
    fn assumption1_disconnected_is_not_ergodic() {
        let mdp = FiniteMdp {
            n_states: 4,
            n_actions: 1,
            transition: vec![
                vec![vec![0.0, 1.0, 0.0, 0.0]],
                vec![vec![1.0, 0.0, 0.0, 0.0]],
                vec![vec![0.0, 0.0, 0.0, 1.0]],
                vec![vec![0.0, 0.0, 1.0, 0.0]],
            ],
            reward_model: vec![vec![vec![RewardOutcome::new(1.0, 1.0)]]; 4],
            discount: vec![0.0; 4],
            initial_dist: vec![0.25; 4],
            state_names: vec![],
        };
        let v = check_assumption1(&mdp, &Policy::uniform(4, 1)).unwrap_err();
        assert_eq!(v, AssumptionViolation::NotErgodic);
        assert_eq!(v.to_string(), "not ergodic");
    }
}
