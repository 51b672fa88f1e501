//! Finite-support distributions of the reverse return and the
//! distributional reverse Bellman operator.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{FiniteMdp, Policy};

use super::ReverseBellman;

/// Tolerance on the total mass of a [`DiscreteDistribution`].
pub const MASS_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: f64,
    pub mass: f64,
}

/// A probability distribution on finitely many points, atoms sorted by
/// strictly increasing value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    atoms: Vec<Atom>,
}

/// How supports are compacted after each operator application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportPolicy {
    /// Atoms whose value lies within this distance of a cluster's first atom
    /// merge into one atom at the mass-weighted value.
    pub merge_tol: f64,
    /// Atoms lighter than this are dropped before renormalizing.
    pub min_mass: f64,
    pub max_atoms: usize,
}

impl Default for SupportPolicy {
    fn default() -> Self {
        Self { merge_tol: 1e-9, min_mass: 1e-12, max_atoms: 1_000_000 }
    }
}

impl SupportPolicy {
    /// Only exact duplicates merge; nothing is dropped.
    pub fn exact() -> Self {
        Self { merge_tol: 0.0, min_mass: 0.0, max_atoms: usize::MAX }
    }
}

impl DiscreteDistribution {
    pub fn point(value: f64) -> Self {
        Self { atoms: vec![Atom { value, mass: 1.0 }] }
    }

    /// Validates sorted, strictly increasing values and unit total mass.
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidConfig("distribution needs at least one atom".into()));
        }
        if atoms.windows(2).any(|w| !(w[0].value < w[1].value)) {
            return Err(Error::InvalidConfig("atom values must be strictly increasing".into()));
        }
        if atoms.iter().any(|a| !(a.mass >= 0.0) || !a.value.is_finite()) {
            return Err(Error::InvalidConfig("atom masses must be nonnegative".into()));
        }
        let total: f64 = atoms.iter().map(|a| a.mass).sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidConfig(format!("masses sum to {total}")));
        }
        Ok(Self { atoms })
    }

    /// Sorts, merges and renormalizes arbitrary `(value, mass)` pairs.
    pub fn from_unsorted(mut atoms: Vec<Atom>, support: &SupportPolicy) -> Result<Self> {
        atoms.sort_by(|a, b| a.value.total_cmp(&b.value));
        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        let mut anchor = f64::NEG_INFINITY;
        let mut weighted = 0.0;
        // exact duplicates keep the anchor value bit-for-bit
        let mut uniform = true;
        for a in atoms {
            match merged.last_mut() {
                Some(last) if a.value - anchor <= support.merge_tol => {
                    last.mass += a.mass;
                    weighted += a.value * a.mass;
                    uniform &= a.value == anchor;
                    if !uniform && last.mass > 0.0 {
                        last.value = weighted / last.mass;
                    }
                }
                _ => {
                    anchor = a.value;
                    weighted = a.value * a.mass;
                    uniform = true;
                    merged.push(a);
                }
            }
        }
        merged.retain(|a| a.mass >= support.min_mass && a.mass > 0.0);
        if merged.len() > support.max_atoms {
            return Err(Error::SupportExplosion { cap: support.max_atoms });
        }
        let total: f64 = merged.iter().map(|a| a.mass).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidConfig("distribution has no mass".into()));
        }
        merged.iter_mut().for_each(|a| a.mass /= total);
        Ok(Self { atoms: merged })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|a| a.value * a.mass).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.atoms.iter().map(|a| (a.value - m).powi(2) * a.mass).sum()
    }

    /// `F(x) = P(X ≤ x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.atoms.iter().take_while(|a| a.value <= x).map(|a| a.mass).sum()
    }

    /// `inf {x : F(x) ≥ level}`.
    pub fn quantile(&self, level: f64) -> f64 {
        let mut acc = 0.0;
        for a in &self.atoms {
            acc += a.mass;
            if acc >= level - 1e-15 {
                return a.value;
            }
        }
        self.atoms.last().map_or(f64::NAN, |a| a.value)
    }
}

/// Cramér distance `(∫ (F_a − F_b)² dx)^{1/2}`, integrated exactly over the
/// merged support.
pub fn cramer_distance(a: &DiscreteDistribution, b: &DiscreteDistribution) -> f64 {
    let (xa, xb) = (&a.atoms, &b.atoms);
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut prev: Option<f64> = None;
    let mut integral = 0.0;
    while i < xa.len() || j < xb.len() {
        let next = match (xa.get(i), xb.get(j)) {
            (Some(p), Some(q)) => p.value.min(q.value),
            (Some(p), None) => p.value,
            (None, Some(q)) => q.value,
            (None, None) => unreachable!(),
        };
        if let Some(x0) = prev {
            integral += (fa - fb) * (fa - fb) * (next - x0);
        }
        while i < xa.len() && xa[i].value == next {
            fa += xa[i].mass;
            i += 1;
        }
        while j < xb.len() && xb[j].value == next {
            fb += xb[j].mass;
            j += 1;
        }
        prev = Some(next);
    }
    integral.max(0.0).sqrt()
}

/// `max_s ℓ₂(a_s, b_s)`.
pub fn sup_cramer(a: &[DiscreteDistribution], b: &[DiscreteDistribution]) -> f64 {
    a.iter().zip(b).map(|(x, y)| cramer_distance(x, y)).fold(0.0, f64::max)
}

/// `max_s ℓ₂(a_s, b_s) / √w_s`.
pub fn weighted_sup_cramer(
    a: &[DiscreteDistribution],
    b: &[DiscreteDistribution],
    weights: &DVector<f64>,
) -> f64 {
    a.iter()
        .zip(b)
        .zip(weights.iter())
        .map(|((x, y), w)| cramer_distance(x, y) / w.sqrt())
        .fold(0.0, f64::max)
}

/// One term of the time-reversed kernel `p(s̄, r | s)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardEntry {
    pub predecessor: usize,
    pub reward: f64,
    pub prob: f64,
}

/// `p(s̄, r | s) = d(s̄)/d(s) Σ_ā π(ā|s̄) p(s|s̄,ā) Pr(r|s̄,ā)` for every `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardKernel {
    pub rows: Vec<Vec<BackwardEntry>>,
}

impl BackwardKernel {
    pub fn new(mdp: &FiniteMdp, policy: &Policy) -> Result<Self> {
        let rb = ReverseBellman::new(mdp, policy)?;
        let d = &rb.d_pi;
        let mut rows = Vec::with_capacity(mdp.n_states);
        for s in 0..mdp.n_states {
            let mut entries: Vec<BackwardEntry> = Vec::new();
            for sb in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let w = d[sb] / d[s] * policy.probs[sb][a] * mdp.transition[sb][a][s];
                    if w == 0.0 {
                        continue;
                    }
                    for o in &mdp.reward_model[sb][a] {
                        if o.prob == 0.0 {
                            continue;
                        }
                        match entries
                            .iter_mut()
                            .find(|e| e.predecessor == sb && e.reward == o.value)
                        {
                            Some(e) => e.prob += w * o.prob,
                            None => entries.push(BackwardEntry {
                                predecessor: sb,
                                reward: o.value,
                                prob: w * o.prob,
                            }),
                        }
                    }
                }
            }
            entries.sort_by(|x, y| {
                x.predecessor.cmp(&y.predecessor).then(x.reward.total_cmp(&y.reward))
            });
            rows.push(entries);
        }
        Ok(Self { rows })
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    /// `p(s̄ | s)` as a dense row.
    pub fn predecessor_marginal(&self, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len()];
        for e in &self.rows[s] {
            out[e.predecessor] += e.prob;
        }
        out
    }

    /// `p(r | s)`, the distribution of the last reward before reaching `s`.
    pub fn reward_marginal(&self, s: usize) -> Result<DiscreteDistribution> {
        let atoms = self.rows[s].iter().map(|e| Atom { value: e.reward, mass: e.prob }).collect();
        DiscreteDistribution::from_unsorted(atoms, &SupportPolicy::exact())
    }

    /// The matrix `M(s, s̄) = p(s̄|s) γ(s̄)`, i.e. `D⁻¹PᵀΓD`.
    pub fn discounted_predecessor_matrix(&self, discount: &[f64]) -> DMatrix<f64> {
        let n = self.rows.len();
        let mut m = DMatrix::zeros(n, n);
        for s in 0..n {
            for e in &self.rows[s] {
                m[(s, e.predecessor)] += e.prob * discount[e.predecessor];
            }
        }
        m
    }
}

/// `(T̃η)^s = ∫ (f_{r,s̄} # η^{s̄}) dp(s̄, r | s)` with `f_{r,s̄}(x) = r + γ(s̄)x`.
#[derive(Clone, Debug)]
pub struct DistributionalOperator {
    pub kernel: BackwardKernel,
    pub discount: Vec<f64>,
}

impl DistributionalOperator {
    pub fn new(mdp: &FiniteMdp, policy: &Policy) -> Result<Self> {
        Ok(Self { kernel: BackwardKernel::new(mdp, policy)?, discount: mdp.discount.clone() })
    }

    pub fn apply(
        &self,
        eta: &[DiscreteDistribution],
        support: &SupportPolicy,
    ) -> Result<Vec<DiscreteDistribution>> {
        self.kernel
            .rows
            .iter()
            .map(|row| {
                let mut atoms = Vec::new();
                for e in row {
                    let gamma = self.discount[e.predecessor];
                    if gamma == 0.0 {
                        atoms.push(Atom { value: e.reward, mass: e.prob });
                        continue;
                    }
                    for a in eta[e.predecessor].atoms() {
                        atoms.push(Atom { value: e.reward + gamma * a.value, mass: e.prob * a.mass });
                    }
                    if atoms.len() > support.max_atoms.saturating_mul(64) {
                        return Err(Error::SupportExplosion { cap: support.max_atoms });
                    }
                }
                DiscreteDistribution::from_unsorted(atoms, support)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DistributionalFixedPoint {
    pub distributions: Vec<DiscreteDistribution>,
    pub iterations: usize,
    /// Sup-Cramér distance between the last two iterates.
    pub last_change: f64,
}

/// Iterates `T̃` from point masses at zero until successive iterates are
/// within `tolerance` in sup-Cramér distance.
#[derive(Clone, Copy, Debug)]
pub struct DistributionalSolver {
    pub tolerance: f64,
    pub support: SupportPolicy,
    pub max_iterations: usize,
}

impl DistributionalSolver {
    pub fn new(tolerance: f64) -> Self {
        Self { tolerance, support: SupportPolicy::default(), max_iterations: 100_000 }
    }

    pub fn solve(&self, mdp: &FiniteMdp, policy: &Policy) -> Result<DistributionalFixedPoint> {
        let op = DistributionalOperator::new(mdp, policy)?;
        let mut eta = vec![DiscreteDistribution::point(0.0); mdp.n_states];
        let mut last_change = f64::INFINITY;
        for it in 1..=self.max_iterations {
            let next = op.apply(&eta, &self.support)?;
            last_change = sup_cramer(&eta, &next);
            eta = next;
            if last_change <= self.tolerance {
                return Ok(DistributionalFixedPoint { distributions: eta, iterations: it, last_change });
            }
        }
        Err(Error::NotConverged { iterations: self.max_iterations, last_change })
    }
}

pub fn distributional_fixed_point(
    mdp: &FiniteMdp,
    policy: &Policy,
    tolerance: f64,
) -> Result<DistributionalFixedPoint> {
    DistributionalSolver::new(tolerance).solve(mdp, policy)
}

/// Weights for the weighted-sup Cramér metric in which `T̃` contracts.
///
/// With `M = D⁻¹PᵀΓD` (entries `p(s̄|s)γ(s̄)`) and `ρ(M) < 1`, the vector
/// `w = (I − M)⁻¹ 1` is ≥ 1 and satisfies `Mw = w − 1`, so
/// `k₀ = max_s (Mw)_s / w_s = max_s (1 − 1/w_s) < 1`. Returns `(w, k₀)`;
/// `T̃` is then a `√k₀`-contraction in `d(η₁, η₂) = max_s ℓ₂(η₁ˢ, η₂ˢ)/√w_s`.
pub fn contraction_weights(kernel: &BackwardKernel, discount: &[f64]) -> Result<(DVector<f64>, f64)> {
    let m = kernel.discounted_predecessor_matrix(discount);
    let n = m.nrows();
    let w = linalg::solve(&(DMatrix::identity(n, n) - &m), &DVector::from_element(n, 1.0))?;
    let mw = &m * &w;
    let k0 = mw
        .iter()
        .zip(w.iter())
        .map(|(a, b)| a / b)
        .max_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal))
        .unwrap_or(0.0);
    Ok((w, k0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_microdrone, build_random_mdp, MicrodroneRewards, RewardOutcome};
    use crate::oracle::reverse_gvf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(pairs: &[(f64, f64)]) -> DiscreteDistribution {
        DiscreteDistribution::new(pairs.iter().map(|&(value, mass)| Atom { value, mass }).collect())
            .unwrap()
    }

    fn random_dist<R: Rng>(rng: &mut R, k: usize) -> DiscreteDistribution {
        let atoms = (0..k)
            .map(|_| Atom { value: rng.random_range(-3.0..3.0), mass: rng.random::<f64>() + 0.01 })
            .collect();
        DiscreteDistribution::from_unsorted(atoms, &SupportPolicy::exact()).unwrap()
    }

    #[test]
    fn cramer_identity_and_unit_shift() {
        let a = dist(&[(0.0, 0.3), (2.0, 0.7)]);
        assert_eq!(cramer_distance(&a, &a), 0.0);
        let d = cramer_distance(&DiscreteDistribution::point(0.0), &DiscreteDistribution::point(1.0));
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cramer_matches_grid_integral() {
        let a = dist(&[(-1.0, 0.25), (0.5, 0.5), (2.0, 0.25)]);
        let b = dist(&[(0.0, 0.5), (1.0, 0.5)]);
        // midpoint rule on a fine grid over [-1, 2]
        let n = 300_000;
        let h = 3.0 / n as f64;
        let approx: f64 = (0..n)
            .map(|k| {
                let x = -1.0 + (k as f64 + 0.5) * h;
                (a.cdf(x) - b.cdf(x)).powi(2) * h
            })
            .sum();
        assert!((cramer_distance(&a, &b).powi(2) - approx).abs() < 1e-6);
    }

    #[test]
    fn cramer_symmetric_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = random_dist(&mut rng, 4);
            let b = random_dist(&mut rng, 3);
            let c = random_dist(&mut rng, 5);
            let ab = cramer_distance(&a, &b);
            assert!((ab - cramer_distance(&b, &a)).abs() < 1e-14);
            assert!(ab >= 0.0);
            assert!(cramer_distance(&a, &c) <= ab + cramer_distance(&b, &c) + 1e-12);
        }
    }

    #[test]
    fn merge_and_prune() {
        let atoms = vec![
            Atom { value: 1.0, mass: 0.5 },
            Atom { value: 1.0 + 5e-10, mass: 0.5 },
            Atom { value: 3.0, mass: 1e-13 },
        ];
        let d = DiscreteDistribution::from_unsorted(atoms, &SupportPolicy::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.atoms()[0].value - (1.0 + 2.5e-10)).abs() < 1e-15);
        assert!((d.atoms()[0].mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn support_cap_fails_loudly() {
        let atoms = (0..10).map(|i| Atom { value: i as f64, mass: 0.1 }).collect();
        let cap = SupportPolicy { max_atoms: 5, ..SupportPolicy::default() };
        assert!(matches!(
            DiscreteDistribution::from_unsorted(atoms, &cap),
            Err(Error::SupportExplosion { cap: 5 })
        ));
    }

    #[test]
    fn backward_kernel_of_deterministic_cycle() {
        let n = 3;
        let mut transition = vec![vec![vec![0.0; n]]; n];
        for s in 0..n {
            transition[s][0][(s + 1) % n] = 1.0;
        }
        let mdp = FiniteMdp {
            n_states: n,
            n_actions: 1,
            transition,
            reward_model: (0..n).map(|s| vec![vec![RewardOutcome::new(s as f64 + 10.0, 1.0)]]).collect(),
            discount: vec![0.5, 1.0, 0.0],
            initial_dist: vec![1.0 / 3.0; 3],
            state_names: vec![],
        };
        let k = BackwardKernel::new(&mdp, &Policy::uniform(n, 1)).unwrap();
        for s in 0..n {
            assert_eq!(k.rows[s].len(), 1);
            let e = k.rows[s][0];
            let pred = (s + n - 1) % n;
            assert_eq!(e.predecessor, pred);
            assert_eq!(e.reward, pred as f64 + 10.0);
            assert!((e.prob - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_kernel_normalized() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let k = BackwardKernel::new(&mdp, &pi).unwrap();
        for row in &k.rows {
            let total: f64 = row.iter().map(|e| e.prob).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_rewards_point_mass() {
        let (mut mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        for row in mdp.reward_model.iter_mut().flatten() {
            *row = vec![RewardOutcome::new(0.0, 1.0)];
        }
        let fp = distributional_fixed_point(&mdp, &pi, 1e-10).unwrap();
        for d in &fp.distributions {
            assert_eq!(d, &DiscreteDistribution::point(0.0));
        }
    }

    #[test]
    fn zero_discount_gives_reward_marginal() {
        let (mut mdp, pi) = build_random_mdp(3, 4, 2, 3).unwrap();
        mdp.discount = vec![0.0; 4];
        let fp = distributional_fixed_point(&mdp, &pi, 1e-12).unwrap();
        let k = BackwardKernel::new(&mdp, &pi).unwrap();
        for s in 0..4 {
            assert!(cramer_distance(&fp.distributions[s], &k.reward_marginal(s).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn microdrone_means_match_reverse_gvf() {
        let (mdp, pi) = build_microdrone(MicrodroneRewards::Energy);
        let fp = distributional_fixed_point(&mdp, &pi, 1e-8).unwrap();
        let v = reverse_gvf(&mdp, &pi).unwrap();
        for s in 0..4 {
            assert!((fp.distributions[s].mean() - v[s]).abs() < 1e-6, "state {s}");
        }
    }

    #[test]
    fn weighted_metric_contracts() {
        let (mdp, pi) = build_random_mdp(8, 5, 2, 2).unwrap();
        let op = DistributionalOperator::new(&mdp, &pi).unwrap();
        let (w, k0) = contraction_weights(&op.kernel, &mdp.discount).unwrap();
        assert!(k0 < 1.0 && w.iter().all(|&x| x >= 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let e1: Vec<_> = (0..5).map(|_| random_dist(&mut rng, 3)).collect();
            let e2: Vec<_> = (0..5).map(|_| random_dist(&mut rng, 3)).collect();
            let t1 = op.apply(&e1, &SupportPolicy::exact()).unwrap();
            let t2 = op.apply(&e2, &SupportPolicy::exact()).unwrap();
            let before = weighted_sup_cramer(&e1, &e2, &w);
            let after = weighted_sup_cramer(&t1, &t2, &w);
            assert!(after <= k0.sqrt() * before + 1e-12);
        }
    }
}
