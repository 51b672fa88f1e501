//! Exact ground truth for every learnable quantity, plus Monte-Carlo
//! estimators that check the closed forms from sampled trajectories.

mod distribution;

pub use distribution::{
    contraction_weights, cramer_distance, distributional_fixed_point, sup_cramer,
    weighted_sup_cramer, Atom, BackwardEntry, BackwardKernel, DiscreteDistribution,
    DistributionalFixedPoint, DistributionalOperator, DistributionalSolver, SupportPolicy,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{
    check_assumption1, discount_matrix, reward_sa_vector, reward_vector, sample_step,
    stationary_distribution, state_action_distribution, state_action_matrix, transition_matrix,
    FiniteMdp, Policy, Rollout,
};
use crate::reverse_td::ReverseReturnTracker;
use crate::stats::{self, BatchMeans};

pub const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    MatrixSolve,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub forward_values: Vec<f64>,
    pub reverse_values: Vec<f64>,
    pub d_pi: Vec<f64>,
    /// `ρ(P_πᵀΓ)`.
    pub spectral_radius_reverse: f64,
    pub method: OracleMethod,
}

impl OracleReport {
    pub fn exact(mdp: &FiniteMdp, policy: &Policy) -> Result<Self> {
        let reverse = ReverseBellman::new(mdp, policy)?;
        Ok(Self {
            forward_values: forward_gvf(mdp, policy)?.iter().copied().collect(),
            reverse_values: reverse.fixed_point()?.iter().copied().collect(),
            d_pi: reverse.d_pi.iter().copied().collect(),
            spectral_radius_reverse: reverse.spectral_radius(),
            method: OracleMethod::MatrixSolve,
        })
    }

    /// Sample-based report: first-visit returns for the forward values, a
    /// single long trajectory for the reverse values and the visit
    /// frequencies.
    pub fn monte_carlo(
        mdp: &FiniteMdp,
        policy: &Policy,
        episodes: usize,
        steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let reverse = ReverseBellman::new(mdp, policy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fwd = monte_carlo_forward(mdp, policy, episodes, &mut rng);
        let rev = monte_carlo_reverse(mdp, policy, steps, 30, steps / 1000, &mut rng);
        let total: u64 = rev.counts.iter().sum();
        Ok(Self {
            forward_values: fwd.mean,
            reverse_values: rev.mean,
            d_pi: rev.counts.iter().map(|&c| c as f64 / total as f64).collect(),
            spectral_radius_reverse: reverse.spectral_radius(),
            method: OracleMethod::MonteCarlo,
        })
    }
}

/// `v_π = (I − P_πΓ)⁻¹ r_π`.
pub fn forward_gvf(mdp: &FiniteMdp, policy: &Policy) -> Result<DVector<f64>> {
    let n = mdp.n_states;
    let system = DMatrix::identity(n, n) - transition_matrix(mdp, policy) * discount_matrix(mdp);
    linalg::solve(&system, &reward_vector(mdp, policy))
}

/// `‖v − r_π − P_πΓ v‖∞`.
pub fn forward_residual(mdp: &FiniteMdp, policy: &Policy, v: &DVector<f64>) -> f64 {
    let tv = reward_vector(mdp, policy) + transition_matrix(mdp, policy) * discount_matrix(mdp) * v;
    linalg::norm_inf(&(v - tv))
}

/// The reverse Bellman operator
/// `T̄y = D⁻¹P̃ᵀD̃r + D⁻¹PᵀΓDy` of a (model, policy) pair.
#[derive(Clone, Debug)]
pub struct ReverseBellman {
    pub p_pi: DMatrix<f64>,
    pub d_pi: DVector<f64>,
    pub gamma: DVector<f64>,
    /// `P̃ᵀD̃r`: expected reward flowing into each state under `d_π`.
    pub reward_inflow: DVector<f64>,
}

impl ReverseBellman {
    pub fn new(mdp: &FiniteMdp, policy: &Policy) -> Result<Self> {
        mdp.ensure_valid()?;
        policy.validate_for(mdp)?;
        check_assumption1(mdp, policy).map_err(Error::AssumptionViolated)?;
        let p_pi = transition_matrix(mdp, policy);
        let d_pi = stationary_distribution(&p_pi)?;
        let weighted_r = state_action_distribution(&d_pi, policy).component_mul(&reward_sa_vector(mdp));
        let reward_inflow = state_action_matrix(mdp).transpose() * weighted_r;
        Ok(Self { p_pi, d_pi, gamma: DVector::from_column_slice(&mdp.discount), reward_inflow })
    }

    /// `P_πᵀΓ`.
    pub fn reverse_kernel(&self) -> DMatrix<f64> {
        self.p_pi.transpose() * DMatrix::from_diagonal(&self.gamma)
    }

    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.reverse_kernel())
    }

    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let dy = self.d_pi.component_mul(y);
        (&self.reward_inflow + self.reverse_kernel() * dy).component_div(&self.d_pi)
    }

    /// `v̄_π = D⁻¹(I − PᵀΓ)⁻¹P̃ᵀD̃r`.
    pub fn fixed_point(&self) -> Result<DVector<f64>> {
        let n = self.d_pi.len();
        let system = DMatrix::identity(n, n) - self.reverse_kernel();
        Ok(linalg::solve(&system, &self.reward_inflow)?.component_div(&self.d_pi))
    }

    pub fn residual(&self, v: &DVector<f64>) -> f64 {
        linalg::norm_inf(&(v - self.apply(v)))
    }
}

/// The reverse GVF `v̄_π(s) = lim_t E[Ḡ_t | S_t = s]` in closed form.
pub fn reverse_gvf(mdp: &FiniteMdp, policy: &Policy) -> Result<DVector<f64>> {
    ReverseBellman::new(mdp, policy)?.fixed_point()
}

/// Solution of the expected Reverse TD update for features `X`.
#[derive(Clone, Debug)]
pub struct LinearFixedPoint {
    /// `−Ā⁻¹b̄`.
    pub weights: DVector<f64>,
    /// `Ā = Xᵀ(P_πᵀΓ − I)D_πX`.
    pub a_bar: DMatrix<f64>,
    /// `b̄ = XᵀP̃_πᵀD̃_πr`.
    pub b_bar: DVector<f64>,
    /// Eigenvalues of `(Ā + Āᵀ)/2`, ascending.
    pub sym_eigenvalues: Vec<f64>,
}

impl LinearFixedPoint {
    /// `Āw + b̄`, the expected update direction at `w`.
    pub fn expected_update(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.a_bar * w + &self.b_bar
    }
}

pub fn check_full_rank(features: &DMatrix<f64>) -> Result<()> {
    let columns = features.ncols();
    let rank = if features.nrows() < columns { features.nrows() } else { features.rank(1e-10) };
    if rank < columns || columns == 0 {
        return Err(Error::RankDeficientFeatures { rank, columns });
    }
    Ok(())
}

pub fn linear_fixed_point(
    mdp: &FiniteMdp,
    policy: &Policy,
    features: &DMatrix<f64>,
) -> Result<LinearFixedPoint> {
    if features.nrows() != mdp.n_states {
        return Err(Error::InvalidConfig(format!(
            "feature matrix has {} rows, expected {}",
            features.nrows(),
            mdp.n_states
        )));
    }
    check_full_rank(features)?;
    let rb = ReverseBellman::new(mdp, policy)?;
    let n = mdp.n_states;
    let d = linalg::diag(&rb.d_pi);
    let a_bar = features.transpose() * (rb.reverse_kernel() - DMatrix::identity(n, n)) * d * features;
    let b_bar = features.transpose() * &rb.reward_inflow;
    let weights = linalg::solve(&a_bar, &(-&b_bar))?;
    let sym_eigenvalues = linalg::symmetric_part_eigenvalues(&a_bar);
    Ok(LinearFixedPoint { weights, a_bar, b_bar, sym_eigenvalues })
}

/// Expected off-policy Reverse TD update, summed transition by transition
/// under the behavior chain:
/// `E_{s~d_μ, a~μ, s'~p}[τ(s)ρ(s,a)(γ(s)x(s')x(s)ᵀ − x(s')x(s')ᵀ)]` and
/// `E[τ(s)ρ(s,a)r(s,a)x(s')]`.
pub fn expected_off_policy_update(
    mdp: &FiniteMdp,
    target: &Policy,
    behavior: &Policy,
    features: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let tau = density_ratio(mdp, target, behavior)?;
    let rho = is_ratio(mdp, target, behavior)?;
    let d_mu = stationary_distribution(&transition_matrix(mdp, behavior))?;
    let k = features.ncols();
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for s in 0..mdp.n_states {
        let x = features.row(s).transpose();
        for act in 0..mdp.n_actions {
            let weight = tau[s] * rho[s][act];
            let r = mdp.mean_reward(s, act);
            for s2 in 0..mdp.n_states {
                let p = d_mu[s] * behavior.probs[s][act] * mdp.transition[s][act][s2];
                if p == 0.0 {
                    continue;
                }
                let x2 = features.row(s2).transpose();
                a += (&x2 * x.transpose() * mdp.discount[s] - &x2 * x2.transpose()) * (p * weight);
                b += &x2 * (p * weight * r);
            }
        }
    }
    Ok((a, b))
}

fn check_coverage(target: &Policy, behavior: &Policy) -> Result<()> {
    for (s, (pr, mr)) in target.probs.iter().zip(&behavior.probs).enumerate() {
        for (a, (&p, &m)) in pr.iter().zip(mr).enumerate() {
            if p > 0.0 && m <= 0.0 {
                return Err(Error::CoverageViolation { state: s, action: a });
            }
        }
    }
    Ok(())
}

/// `τ(s) = d_π(s) / d_μ(s)` from the exact stationary distributions.
pub fn density_ratio(mdp: &FiniteMdp, target: &Policy, behavior: &Policy) -> Result<DVector<f64>> {
    target.validate_for(mdp)?;
    behavior.validate_for(mdp)?;
    check_coverage(target, behavior)?;
    let d_pi = stationary_distribution(&transition_matrix(mdp, target))?;
    let d_mu = stationary_distribution(&transition_matrix(mdp, behavior))?;
    if d_mu.iter().any(|&x| x <= 0.0) {
        return Err(Error::NotErgodic);
    }
    Ok(d_pi.component_div(&d_mu))
}

/// `ρ(s, a) = π(a|s) / μ(a|s)`; zero wherever `π(a|s) = 0`.
pub fn is_ratio(mdp: &FiniteMdp, target: &Policy, behavior: &Policy) -> Result<Vec<Vec<f64>>> {
    target.validate_for(mdp)?;
    behavior.validate_for(mdp)?;
    check_coverage(target, behavior)?;
    Ok(target
        .probs
        .iter()
        .zip(&behavior.probs)
        .map(|(pr, mr)| {
            pr.iter().zip(mr).map(|(&p, &m)| if p == 0.0 { 0.0 } else { p / m }).collect()
        })
        .collect())
}

/// Per-state sample means with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Exploring-starts Monte Carlo for `v_π`: episode `e` starts in state
/// `e mod |S|`; on entering `s'` the episode continues with probability
/// `γ(s')`. Episodes are independent, so the standard errors are exact.
pub fn monte_carlo_forward<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &Policy,
    episodes: usize,
    rng: &mut R,
) -> MonteCarloEstimate {
    let n = mdp.n_states;
    let mut returns = vec![Vec::with_capacity(episodes / n + 1); n];
    for e in 0..episodes {
        let start = e % n;
        let mut state = start;
        let mut g = 0.0;
        loop {
            let tr = sample_step(mdp, policy, state, 0, rng);
            g += tr.reward;
            let gamma = mdp.discount[tr.next_state];
            if gamma <= 0.0 || (gamma < 1.0 && rng.random::<f64>() >= gamma) {
                break;
            }
            state = tr.next_state;
        }
        returns[start].push(g);
    }
    MonteCarloEstimate {
        mean: returns.iter().map(|r| stats::mean(r)).collect(),
        stderr: returns.iter().map(|r| stats::standard_error(r)).collect(),
        counts: returns.iter().map(|r| r.len() as u64).collect(),
    }
}

/// Time average of `Ḡ_t` conditioned on `S_t = s` along one trajectory of
/// `steps` transitions after `burn_in`, with batch-mean standard errors over
/// `batches` disjoint segments.
pub fn monte_carlo_reverse<R: Rng>(
    mdp: &FiniteMdp,
    policy: &Policy,
    steps: usize,
    batches: usize,
    burn_in: usize,
    rng: R,
) -> MonteCarloEstimate {
    let batches = batches.max(1);
    let mut rollout = Rollout::new(mdp, policy, rng);
    let mut tracker = ReverseReturnTracker::new();
    let mut acc = BatchMeans::new(mdp.n_states, batches);
    let per_batch = (steps / batches).max(1);
    for (i, tr) in rollout.by_ref().take(burn_in + steps).enumerate() {
        tracker.update(tr.reward, mdp.discount[tr.prev_state]);
        if i >= burn_in {
            let batch = ((i - burn_in) / per_batch).min(batches - 1);
            acc.record(tr.next_state, batch, tracker.g_bar());
        }
    }
    let mut est = MonteCarloEstimate { mean: vec![], stderr: vec![], counts: vec![] };
    for s in 0..mdp.n_states {
        let (m, se, c) = acc.estimate(s);
        est.mean.push(m);
        est.stderr.push(se);
        est.counts.push(c);
    }
    est
}
