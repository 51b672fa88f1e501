//! Reverse TD, Reverse TD(λ) and off-policy Reverse TD with linear features.
//!
//! All learners bootstrap from the *previous* state: a transition
//! `(S_{t-1}, A_{t-1}, R_t, S_t)` moves the estimate at `S_t` toward
//! `R_t + γ(S_{t-1}) x(S_{t-1})ᵀw`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{sample_initial, sample_step, FiniteMdp, Policy, Transition};
use crate::oracle::{check_full_rank, reverse_gvf};

/// Constant-memory accumulator of the reverse return
/// `Ḡ_t = R_t + γ(S_{t-1}) Ḡ_{t-1}`, `Ḡ_0 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseReturnTracker {
    g_bar: f64,
    /// `γ` of the state the stream is currently in, applied on the next step.
    prev_discount: f64,
}

impl Default for ReverseReturnTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl ReverseReturnTracker {
    pub fn new() -> Self {
        Self { g_bar: 0.0, prev_discount: 1.0 }
    }

    pub fn reset(&mut self) {
        *self = Self::new();
    }

    pub fn g_bar(&self) -> f64 {
        self.g_bar
    }

    pub fn prev_discount(&self) -> f64 {
        self.prev_discount
    }

    /// `Ḡ ← R_t + γ(S_{t-1}) Ḡ`.
    #[inline]
    pub fn update(&mut self, reward: f64, discount_of_prev: f64) -> f64 {
        self.g_bar = reward + discount_of_prev * self.g_bar;
        self.g_bar
    }

    /// Applies the pending discount, then remembers `γ(S_t)` for the next
    /// step.
    #[inline]
    pub fn advance(&mut self, reward: f64, discount_of_current: f64) -> f64 {
        let g = self.update(reward, self.prev_discount);
        self.prev_discount = discount_of_current;
        g
    }

    /// Records `γ(S_0)` at the start of a stream.
    pub fn enter(&mut self, discount: f64) {
        self.prev_discount = discount;
    }
}

/// `v̂ = Xw` with a full-column-rank feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearValueModel {
    features: DMatrix<f64>,
    rows: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl LinearValueModel {
    /// Zero-initialized weights.
    pub fn new(features: DMatrix<f64>) -> Result<Self> {
        check_full_rank(&features)?;
        let rows = features.row_iter().map(|r| r.iter().copied().collect()).collect();
        let weights = vec![0.0; features.ncols()];
        Ok(Self { features, rows, weights })
    }

    /// Identity features.
    pub fn tabular(n_states: usize) -> Self {
        Self::new(DMatrix::identity(n_states, n_states)).expect("identity has full rank")
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature(&self, s: usize) -> &[f64] {
        &self.rows[s]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        assert_eq!(w.len(), self.weights.len());
        self.weights.copy_from_slice(w);
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    /// `x(s)ᵀw`.
    #[inline]
    pub fn estimate(&self, s: usize) -> f64 {
        self.rows[s].iter().zip(&self.weights).map(|(x, w)| x * w).sum()
    }

    pub fn values(&self) -> DVector<f64> {
        DVector::from_fn(self.rows.len(), |s, _| self.estimate(s))
    }

    #[inline]
    fn add_scaled_feature(&mut self, s: usize, scale: f64) {
        for (w, x) in self.weights.iter_mut().zip(&self.rows[s]) {
            *w += scale * x;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `α_t = a / (1 + t/b)`: `Σα_t = ∞`, `Σα_t² < ∞`.
    RobbinsMonro { a: f64, b: f64 },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::RobbinsMonro { a: 0.5, b: 1e3 }
    }
}

impl StepSchedule {
    /// Step size for the update with zero-based index `t`.
    #[inline]
    pub fn alpha(&self, t: u64) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::RobbinsMonro { a, b } => a / (1.0 + t as f64 / b),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { alpha } => alpha > 0.0 && alpha.is_finite(),
            StepSchedule::RobbinsMonro { a, b } => a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid step schedule {self:?}")))
        }
    }
}

/// What one update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// The bootstrapped target the estimate at `S_t` moved toward.
    pub target: f64,
    pub td_error: f64,
}

/// Reverse TD:
/// `w ← w + α(R_t + γ(S_{t-1}) x_{t-1}ᵀw − x_tᵀw) x_t`.
#[inline]
pub fn reverse_td_step(
    model: &mut LinearValueModel,
    alpha: f64,
    transition: &Transition,
    gamma_prev: f64,
) -> StepOutcome {
    let target = transition.reward + gamma_prev * model.estimate(transition.prev_state);
    apply_update(model, alpha, transition.next_state, target)
}

/// Reverse TD(λ): the bootstrap mixes the previous estimate with the
/// previous reverse return,
/// `R_t + γ(S_{t-1})((1 − λ) x_{t-1}ᵀw + λ Ḡ_{t-1})`.
#[inline]
pub fn reverse_td_lambda_step(
    model: &mut LinearValueModel,
    alpha: f64,
    transition: &Transition,
    gamma_prev: f64,
    g_bar_prev: f64,
    lambda: f64,
) -> StepOutcome {
    let bootstrap = (1.0 - lambda) * model.estimate(transition.prev_state) + lambda * g_bar_prev;
    let target = transition.reward + gamma_prev * bootstrap;
    apply_update(model, alpha, transition.next_state, target)
}

/// Off-policy Reverse TD: the Reverse TD update scaled by
/// `τ(S_{t-1}) ρ(S_{t-1}, A_{t-1})`.
#[inline]
pub fn off_policy_reverse_td_step(
    model: &mut LinearValueModel,
    alpha: f64,
    transition: &Transition,
    gamma_prev: f64,
    tau_prev: f64,
    rho_prev: f64,
) -> StepOutcome {
    reverse_td_step(model, alpha * (tau_prev * rho_prev), transition, gamma_prev)
}

#[inline]
fn apply_update(model: &mut LinearValueModel, alpha: f64, state: usize, target: f64) -> StepOutcome {
    let td_error = target - model.estimate(state);
    model.add_scaled_feature(state, alpha * td_error);
    StepOutcome { target, td_error }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerMode {
    OnPolicy,
    /// Data come from the behavior policy; updates are reweighted by the
    /// exact density ratio `τ(s)` and importance ratio `ρ(s, a)`.
    OffPolicy { tau: Vec<f64>, rho: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub lambda: f64,
    pub schedule: StepSchedule,
    pub mode: LearnerMode,
    pub total_steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    /// Divide the squared error by `|S|`.
    #[serde(default)]
    pub mve_normalized: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            schedule: StepSchedule::default(),
            mode: LearnerMode::OnPolicy,
            total_steps: 1_000_000,
            seed: 0,
            eval_every: 1_000,
            mve_normalized: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        self.schedule.validate()?;
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        if let LearnerMode::OffPolicy { tau, rho } = &self.mode {
            if self.lambda != 0.0 {
                return Err(Error::InvalidConfig("off-policy learning supports lambda = 0 only".into()));
            }
            if tau.len() != mdp.n_states || tau.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
                return Err(Error::InvalidConfig("tau must be strictly positive per state".into()));
            }
            if rho.len() != mdp.n_states
                || rho.iter().any(|r| r.len() != mdp.n_actions || r.iter().any(|x| !(*x >= 0.0) || !x.is_finite()))
            {
                return Err(Error::InvalidConfig("rho must be finite and nonnegative per (s, a)".into()));
            }
        }
        Ok(())
    }
}

/// Target and (for off-policy runs) behavior policies.
#[derive(Clone, Debug, PartialEq)]
pub struct Policies {
    pub target: Policy,
    pub behavior: Policy,
}

impl Policies {
    pub fn on_policy(policy: Policy) -> Self {
        Self { behavior: policy.clone(), target: policy }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub mve: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
    pub final_weights: Vec<f64>,
}

impl LearningCurve {
    pub fn final_mve(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.mve)
    }
}

/// `‖v̂ − v̄‖²`, optionally divided by the number of states.
pub fn mean_value_error(estimate: &DVector<f64>, truth: &DVector<f64>, normalized: bool) -> f64 {
    let sq = (estimate - truth).norm_squared();
    if normalized {
        sq / truth.len() as f64
    } else {
        sq
    }
}

/// Runs one learner for `total_steps` transitions and records the MVE
/// against the exact reverse GVF of the target policy every `eval_every`
/// steps (plus step 0 and the final step).
pub fn run_learner(
    mdp: &FiniteMdp,
    policies: &Policies,
    features: &DMatrix<f64>,
    config: &LearnerConfig,
) -> Result<LearningCurve> {
    config.validate(mdp)?;
    let truth = reverse_gvf(mdp, &policies.target)?;
    let mut model = LinearValueModel::new(features.clone())?;
    let sampling = match config.mode {
        LearnerMode::OnPolicy => &policies.target,
        LearnerMode::OffPolicy { .. } => &policies.behavior,
    };
    sampling.validate_for(mdp)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = sample_initial(mdp, &mut rng);
    let mut tracker = ReverseReturnTracker::new();
    let eval = |m: &LinearValueModel| mean_value_error(&m.values(), &truth, config.mve_normalized);
    let mut points = vec![CurvePoint { step: 0, mve: eval(&model) }];

    for t in 1..=config.total_steps {
        let tr = sample_step(mdp, sampling, state, t, &mut rng);
        let alpha = config.schedule.alpha(t - 1);
        let gamma_prev = mdp.discount[tr.prev_state];
        match &config.mode {
            LearnerMode::OnPolicy => {
                reverse_td_lambda_step(&mut model, alpha, &tr, gamma_prev, tracker.g_bar(), config.lambda);
            }
            LearnerMode::OffPolicy { tau, rho } => {
                off_policy_reverse_td_step(
                    &mut model,
                    alpha,
                    &tr,
                    gamma_prev,
                    tau[tr.prev_state],
                    rho[tr.prev_state][tr.action],
                );
            }
        }
        tracker.update(tr.reward, gamma_prev);
        state = tr.next_state;
        if t % config.eval_every == 0 || t == config.total_steps {
            points.push(CurvePoint { step: t, mve: eval(&model) });
        }
    }
    Ok(LearningCurve { points, final_weights: model.weights().to_vec() })
}
