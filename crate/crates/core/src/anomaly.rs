//! Two-phase anomaly detection: off-policy distributional training, then a
//! streaming detector holding one reverse-return tracker and one quantile
//! model.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributional::{anomaly_probability, QuantileConfig, QuantileModel};
use crate::error::{Error, Result};
use crate::mdp::{sample_initial, sample_step, FiniteMdp, Policy, Transition};
use crate::oracle::{is_ratio, reverse_gvf};
use crate::reverse_td::{mean_value_error, CurvePoint, ReverseReturnTracker};

/// Default threshold half-width `Δ`.
pub const DEFAULT_DELTA: f64 = 1.0;
/// Default imputation spread `σ`.
pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_PHASE1_STEPS: u64 = 200_000;
pub const DEFAULT_PHASE2_STEPS: u64 = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnomalyKind {
    None,
    /// After onset, `R_t ← R_t + delta` with probability `prob`.
    Reward { delta: f64, prob: f64 },
    /// After onset, actions are drawn from `replacement` instead.
    Policy { replacement: Policy },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// The anomaly is active on steps `t > onset_step`.
    pub onset_step: u64,
}

impl AnomalySpec {
    pub fn none(onset_step: u64) -> Self {
        Self { kind: AnomalyKind::None, onset_step }
    }

    pub fn reward(delta: f64, prob: f64, onset_step: u64) -> Self {
        Self { kind: AnomalyKind::Reward { delta, prob }, onset_step }
    }

    pub fn policy(replacement: Policy, onset_step: u64) -> Self {
        Self { kind: AnomalyKind::Policy { replacement }, onset_step }
    }

    /// Parses `none`, `reward:<delta>:<prob>` or `policy:<p>`, where `p` is
    /// the probability of action 0 in every state (the rest is spread evenly
    /// over the other actions).
    pub fn parse(text: &str, mdp: &FiniteMdp, onset_step: u64) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unrecognized anomaly spec '{text}'"));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = text.trim().split(':').collect();
        let spec = match parts.as_slice() {
            ["none"] => Self::none(onset_step),
            ["reward", d, p] => Self::reward(num(d)?, num(p)?, onset_step),
            ["policy", p] => {
                let p = num(p)?;
                if mdp.n_actions < 2 || !(0.0..=1.0).contains(&p) {
                    return Err(bad());
                }
                let rest = (1.0 - p) / (mdp.n_actions - 1) as f64;
                let mut row = vec![rest; mdp.n_actions];
                row[0] = p;
                Self::policy(Policy::state_independent(mdp.n_states, &row)?, onset_step)
            }
            _ => return Err(bad()),
        };
        spec.validate(mdp)?;
        Ok(spec)
    }

    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        match &self.kind {
            AnomalyKind::None => Ok(()),
            AnomalyKind::Reward { delta, prob } => {
                if !delta.is_finite() || !(0.0..=1.0).contains(prob) {
                    Err(Error::InvalidConfig(format!("reward anomaly needs finite delta and prob in [0, 1], got ({delta}, {prob})")))
                } else {
                    Ok(())
                }
            }
            AnomalyKind::Policy { replacement } => replacement.validate_for(mdp),
        }
    }

    #[inline]
    pub fn is_active(&self, step: u64) -> bool {
        step > self.onset_step && !matches!(self.kind, AnomalyKind::None)
    }

    /// The action-sampling policy in force at `step`.
    pub fn policy_for<'a>(&'a self, step: u64, nominal: &'a Policy) -> &'a Policy {
        match &self.kind {
            AnomalyKind::Policy { replacement } if self.is_active(step) => replacement,
            _ => nominal,
        }
    }

    /// Applies the reward anomaly. Randomness is drawn only while the
    /// anomaly is active, so streams agree up to the onset regardless of the
    /// spec. Returns the (possibly shifted) reward and whether it was shifted.
    pub fn perturb_reward<R: Rng + ?Sized>(&self, step: u64, reward: f64, rng: &mut R) -> (f64, bool) {
        match self.kind {
            AnomalyKind::Reward { delta, prob } if self.is_active(step) => {
                if rng.random::<f64>() < prob {
                    (reward + delta, true)
                } else {
                    (reward, false)
                }
            }
            _ => (reward, false),
        }
    }
}

impl fmt::Display for AnomalySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            AnomalyKind::None => write!(f, "none"),
            AnomalyKind::Reward { delta, prob } => write!(f, "reward:{delta:+}:{prob}"),
            AnomalyKind::Policy { replacement } => match replacement.probs.first() {
                Some(row) if replacement.probs.iter().all(|r| r == row) => write!(f, "policy:{}", row[0]),
                _ => write!(f, "policy:custom"),
            },
        }
    }
}

/// One interaction step with the anomaly applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InjectedStep {
    pub transition: Transition,
    pub reward_shifted: bool,
}

/// Samples the step at `step` from `state` under `nominal` with `spec`
/// applied.
pub fn inject<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    nominal: &Policy,
    spec: &AnomalySpec,
    state: usize,
    step: u64,
    rng: &mut R,
) -> InjectedStep {
    let policy = spec.policy_for(step, nominal);
    let mut transition = sample_step(mdp, policy, state, step, rng);
    let (reward, reward_shifted) = spec.perturb_reward(step, transition.reward, rng);
    transition.reward = reward;
    InjectedStep { transition, reward_shifted }
}

/// Streaming detector. Its whole state is the tracker and a model reference.
#[derive(Clone, Debug)]
pub struct Detector<'m> {
    tracker: ReverseReturnTracker,
    model: &'m QuantileModel,
    delta: f64,
    sigma: f64,
}

impl<'m> Detector<'m> {
    pub fn new(model: &'m QuantileModel, delta: f64, sigma: f64) -> Result<Self> {
        if !(delta >= 0.0) || !(sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("need delta >= 0 and sigma > 0, got ({delta}, {sigma})")));
        }
        Ok(Self { tracker: ReverseReturnTracker::new(), model, delta, sigma })
    }

    pub fn tracker(&self) -> &ReverseReturnTracker {
        &self.tracker
    }

    pub fn model(&self) -> &'m QuantileModel {
        self.model
    }

    /// Folds `transition` into `Ḡ` and scores the new state.
    pub fn observe(&mut self, transition: &Transition, discount_of_prev: f64) -> Result<f64> {
        let g = self.tracker.update(transition.reward, discount_of_prev);
        anomaly_probability(self.model, transition.next_state, g, self.delta, self.sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub step: u64,
    pub state: usize,
    pub g_bar: f64,
    pub anomaly_prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionTrace {
    pub records: Vec<DetectionRecord>,
}

impl DetectionTrace {
    fn mean_where(&self, pred: impl Fn(u64) -> bool) -> f64 {
        let (sum, n) = self
            .records
            .iter()
            .filter(|r| pred(r.step))
            .fold((0.0, 0usize), |(s, n), r| (s + r.anomaly_prob, n + 1));
        sum / n as f64
    }

    /// Mean anomaly probability over steps `t ≤ onset`.
    pub fn pre_onset_mean(&self, onset: u64) -> f64 {
        self.mean_where(|t| t <= onset)
    }

    /// Mean anomaly probability over steps `t > onset`.
    pub fn post_onset_mean(&self, onset: u64) -> f64 {
        self.mean_where(|t| t > onset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Config {
    pub quantile: QuantileConfig,
    pub eval_every: u64,
    #[serde(default)]
    pub mve_normalized: bool,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self { quantile: QuantileConfig::default(), eval_every: 1_000, mve_normalized: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Result {
    pub model: QuantileModel,
    /// MVE of the per-state quantile means against `v̄_π`.
    pub curve: Vec<CurvePoint>,
}

/// Trains a quantile model for `pi` from `steps` transitions sampled under
/// `mu`, weighting each update by `ρ(S_{t-1}, A_{t-1})`.
pub fn run_phase1(
    mdp: &FiniteMdp,
    mu: &Policy,
    pi: &Policy,
    steps: u64,
    config: &Phase1Config,
    seed: u64,
) -> Result<Phase1Result> {
    if config.eval_every == 0 {
        return Err(Error::InvalidConfig("eval_every must be positive".into()));
    }
    let rho = is_ratio(mdp, pi, mu)?;
    let truth = reverse_gvf(mdp, pi)?;
    let mut model = QuantileModel::new(mdp.n_states, &config.quantile)?;
    let eval = |m: &QuantileModel| {
        mean_value_error(&nalgebra::DVector::from_vec(m.means()), &truth, config.mve_normalized)
    };
    let mut curve = vec![CurvePoint { step: 0, mve: eval(&model) }];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = sample_initial(mdp, &mut rng);
    for t in 1..=steps {
        let tr = sample_step(mdp, mu, state, t, &mut rng);
        let gamma_prev = mdp.discount[tr.prev_state];
        model.train_step(&tr, gamma_prev, config.quantile.alpha, rho[tr.prev_state][tr.action]);
        state = tr.next_state;
        if t % config.eval_every == 0 || t == steps {
            curve.push(CurvePoint { step: t, mve: eval(&model) });
        }
    }
    Ok(Phase1Result { model, curve })
}

/// Follows `pi` for `steps` steps with `spec` injected, scoring every step.
#[allow(clippy::too_many_arguments)]
pub fn run_phase2(
    mdp: &FiniteMdp,
    pi: &Policy,
    model: &QuantileModel,
    spec: &AnomalySpec,
    steps: u64,
    delta: f64,
    sigma: f64,
    seed: u64,
) -> Result<DetectionTrace> {
    pi.validate_for(mdp)?;
    spec.validate(mdp)?;
    if model.n_states() != mdp.n_states {
        return Err(Error::InvalidConfig(format!(
            "model has {} states, MDP has {}",
            model.n_states(),
            mdp.n_states
        )));
    }
    let mut detector = Detector::new(model, delta, sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = sample_initial(mdp, &mut rng);
    let mut records = Vec::with_capacity(steps as usize);
    for t in 1..=steps {
        let step = inject(mdp, pi, spec, state, t, &mut rng);
        let tr = step.transition;
        let prob = detector.observe(&tr, mdp.discount[tr.prev_state])?;
        records.push(DetectionRecord { step: t, state: tr.next_state, g_bar: detector.tracker().g_bar(), anomaly_prob: prob });
        state = tr.next_state;
    }
    Ok(DetectionTrace { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_microdrone, MicrodroneRewards};

    #[test]
    fn parse_and_display() {
        let (mdp, _) = build_microdrone(MicrodroneRewards::Energy);
        let r = AnomalySpec::parse("reward:+2:0.5", &mdp, 10).unwrap();
        assert_eq!(r.kind, AnomalyKind::Reward { delta: 2.0, prob: 0.5 });
        assert_eq!(r.to_string(), "reward:+2:0.5");
        let p = AnomalySpec::parse("policy:0.9", &mdp, 10).unwrap();
        assert_eq!(p.to_string(), "policy:0.9");
        assert_eq!(AnomalySpec::parse("none", &mdp, 0).unwrap().to_string(), "none");
        assert!(AnomalySpec::parse("reward:2:1.5", &mdp, 0).is_err());
        assert!(AnomalySpec::parse("bogus", &mdp, 0).is_err());
    }

    #[test]
    fn identity_before_onset() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let spec = AnomalySpec::reward(2.0, 1.0, 100);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let mut s = 0;
        for t in 1..=100 {
            let x = inject(&mdp, &pi, &spec, s, t, &mut a);
            let y = sample_step(&mdp, &pi, s, t, &mut b);
            assert_eq!(x.transition, y);
            s = y.next_state;
        }
    }

    #[test]
    fn forced_reward_shift() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Ideal);
        let spec = AnomalySpec::reward(2.0, 1.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 1..=1000 {
            let x = inject(&mdp, &pi, &spec, 0, t, &mut rng);
            assert!(x.reward_shifted);
            let base = if x.transition.action == 0 { 2.0 } else { 1.0 };
            assert_eq!(x.transition.reward, base + 2.0);
        }
    }

    #[test]
    fn injection_frequency() {
        // 40 streams of 10^5 post-onset steps: each is a binomial draw with
        // p = 0.5; at most a couple may stray past 3 sd, and the pooled count
        // must not.
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let spec = AnomalySpec::reward(2.0, 0.5, 0);
        let n = 100_000u64;
        let sd = (n as f64 * 0.25).sqrt();
        let mut pooled = 0.0;
        let mut outliers = 0;
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hits = (1..=n).filter(|&t| inject(&mdp, &pi, &spec, 0, t, &mut rng).reward_shifted).count();
            let dev = hits as f64 - 0.5 * n as f64;
            pooled += dev;
            if dev.abs() > 3.0 * sd {
                outliers += 1;
            }
        }
        assert!(outliers <= 2, "{outliers}");
        assert!(pooled.abs() <= 3.0 * sd * 40f64.sqrt(), "{pooled}");
    }

    #[test]
    fn detector_tracks_reverse_return_exactly() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let model = QuantileModel::new(4, &QuantileConfig::default()).unwrap();
        let spec = AnomalySpec::reward(2.0, 0.5, 500);
        let mut detector = Detector::new(&model, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = sample_initial(&mdp, &mut rng);
        let mut log = Vec::new();
        for t in 1..=2000 {
            let tr = inject(&mdp, &pi, &spec, s, t, &mut rng).transition;
            detector.observe(&tr, mdp.discount[tr.prev_state]).unwrap();
            log.push(tr);
            let mut replay = 0.0;
            for x in &log {
                replay = x.reward + mdp.discount[x.prev_state] * replay;
            }
            assert_eq!(detector.tracker().g_bar().to_bits(), replay.to_bits());
            s = tr.next_state;
        }
    }

    #[test]
    fn phase1_on_policy_weights_are_one_and_deterministic() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let cfg = Phase1Config::default();
        let a = run_phase1(&mdp, &pi, &pi, 3000, &cfg, 9).unwrap();
        let b = run_phase1(&mdp, &pi, &pi, 3000, &cfg, 9).unwrap();
        assert_eq!(a, b);
        // ρ ≡ 1 reproduces plain training on the same stream.
        let mut m = QuantileModel::new(4, &cfg.quantile).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = sample_initial(&mdp, &mut rng);
        for t in 1..=3000 {
            let tr = sample_step(&mdp, &pi, s, t, &mut rng);
            m.train_step(&tr, mdp.discount[tr.prev_state], cfg.quantile.alpha, 1.0);
            s = tr.next_state;
        }
        assert_eq!(m, a.model);
    }

    #[test]
    fn phase1_rejects_missing_coverage() {
        let (mdp, _) = build_microdrone(MicrodroneRewards::Energy);
        let mu = Policy::deterministic(4, 2, 0);
        let pi = Policy::uniform(4, 2);
        assert!(matches!(
            run_phase1(&mdp, &mu, &pi, 10, &Phase1Config::default(), 0),
            Err(Error::CoverageViolation { .. })
        ));
    }
}
