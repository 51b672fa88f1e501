//! Tabular quantile-regression Reverse TD, Gaussian-mixture imputation and
//! interval probabilities.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Policy, Transition};
use crate::oracle::BackwardKernel;

/// `H_κ(x)`.
pub fn huber(x: f64, kappa: f64) -> f64 {
    let a = x.abs();
    if a <= kappa {
        0.5 * x * x
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// `H_κ'(x)`.
pub fn huber_derivative(x: f64, kappa: f64) -> f64 {
    if x.abs() <= kappa {
        x
    } else {
        kappa * x.signum()
    }
}

/// `ρ_τ^κ(x) = |τ − 1{x < 0}| H_κ(x)`.
pub fn quantile_huber(x: f64, tau: f64, kappa: f64) -> f64 {
    asymmetry(x, tau) * huber(x, kappa)
}

#[inline]
fn asymmetry(x: f64, tau: f64) -> f64 {
    (tau - if x < 0.0 { 1.0 } else { 0.0 }).abs()
}

/// Midpoint quantile levels `τ_i = ((i−1)/N + i/N)/2`, `i = 1..N`.
pub fn quantile_levels(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (1..=n).map(|i| ((i - 1) as f64 / nf + i as f64 / nf) / 2.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileConfig {
    pub n_quantiles: usize,
    pub kappa: f64,
    pub sync_period: u64,
    /// Constant SGD step size.
    pub alpha: f64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        Self { n_quantiles: 20, kappa: 1.0, sync_period: 100, alpha: 5e-3 }
    }
}

impl QuantileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_quantiles == 0 {
            return Err(Error::InvalidConfig("n_quantiles must be at least 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidConfig(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.sync_period == 0 {
            return Err(Error::InvalidConfig("sync_period must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-state table of `N` quantile estimates with a target copy `θ̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileModel {
    n_states: usize,
    n_quantiles: usize,
    levels: Vec<f64>,
    kappa: f64,
    sync_period: u64,
    theta: Vec<f64>,
    target: Vec<f64>,
    updates: u64,
}

impl QuantileModel {
    /// All-zero table.
    pub fn new(n_states: usize, config: &QuantileConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_quantiles;
        Ok(Self {
            n_states,
            n_quantiles: n,
            levels: quantile_levels(n),
            kappa: config.kappa,
            sync_period: config.sync_period,
            theta: vec![0.0; n_states * n],
            target: vec![0.0; n_states * n],
            updates: 0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_quantiles(&self) -> usize {
        self.n_quantiles
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn sync_period(&self) -> u64 {
        self.sync_period
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn quantiles(&self, s: usize) -> &[f64] {
        &self.theta[s * self.n_quantiles..(s + 1) * self.n_quantiles]
    }

    pub fn quantiles_mut(&mut self, s: usize) -> &mut [f64] {
        let n = self.n_quantiles;
        &mut self.theta[s * n..(s + 1) * n]
    }

    pub fn target_quantiles(&self, s: usize) -> &[f64] {
        &self.target[s * self.n_quantiles..(s + 1) * self.n_quantiles]
    }

    /// Mean of the learned quantiles at `s`.
    pub fn mean(&self, s: usize) -> f64 {
        self.quantiles(s).iter().sum::<f64>() / self.n_quantiles as f64
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.n_states).map(|s| self.mean(s)).collect()
    }

    /// One SGD step on `ρ L(θ)` for the pair targets
    /// `u_ij = r + γ(s) q_j(s; θ̄) − q_i(s'; θ)`. Only row `s'` changes.
    pub fn update(&mut self, transition: &Transition, gamma_prev: f64, alpha: f64, is_weight: f64) {
        let n = self.n_quantiles;
        let nf = n as f64;
        let src = transition.prev_state * n;
        let dst = transition.next_state * n;
        for i in 0..n {
            let q = self.theta[dst + i];
            let tau = self.levels[i];
            let mut grad = 0.0;
            for j in 0..n {
                let u = transition.reward + gamma_prev * self.target[src + j] - q;
                grad += asymmetry(u, tau) * huber_derivative(u, self.kappa);
            }
            self.theta[dst + i] = q + alpha * is_weight * (grad / nf);
        }
    }

    /// `θ̄ ← θ`.
    pub fn sync_target(&mut self) {
        self.target.copy_from_slice(&self.theta);
    }

    /// `update` followed by a target sync every `sync_period` updates.
    pub fn train_step(&mut self, transition: &Transition, gamma_prev: f64, alpha: f64, is_weight: f64) {
        self.update(transition, gamma_prev, alpha, is_weight);
        self.updates += 1;
        if self.updates % self.sync_period == 0 {
            self.sync_target();
        }
    }

    /// Writes `state,i,tau_i,q` rows (`i` is 1-based).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["state", "i", "tau_i", "q"])?;
        for s in 0..self.n_states {
            for (i, q) in self.quantiles(s).iter().enumerate() {
                w.write_record([
                    s.to_string(),
                    (i + 1).to_string(),
                    format!("{:.16e}", self.levels[i]),
                    format!("{q:.16e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`QuantileModel::write_csv`]. The target is
    /// synced to the loaded table; `kappa` and `sync_period` come from
    /// `config`, `n_quantiles` from the file.
    pub fn read_csv<R: Read>(reader: R, config: &QuantileConfig) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            state: usize,
            i: usize,
            q: f64,
        }
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(reader).deserialize() {
            let row: Row = rec?;
            rows.push(row);
        }
        let n_states = rows.iter().map(|r| r.state + 1).max().unwrap_or(0);
        let n = rows.iter().map(|r| r.i).max().unwrap_or(0);
        if n_states == 0 || n == 0 || rows.len() != n_states * n || rows.iter().any(|r| r.i == 0) {
            return Err(Error::InvalidConfig("quantile table is empty or incomplete".into()));
        }
        let mut model = Self::new(n_states, &QuantileConfig { n_quantiles: n, ..*config })?;
        let mut seen = vec![false; n_states * n];
        for r in rows {
            let k = r.state * n + (r.i - 1);
            if seen[k] || !r.q.is_finite() {
                return Err(Error::InvalidConfig(format!("bad quantile entry (state {}, i {})", r.state, r.i)));
            }
            seen[k] = true;
            model.theta[k] = r.q;
        }
        model.sync_target();
        Ok(model)
    }
}

/// Deterministic fixed point of the expected quantile update under `policy`:
/// the table the tabular learner settles around (on-policy, or off-policy
/// when the behavior policy has the same stationary distribution).
///
/// Iterates `θ_i(s) += β E[|τ_i − 1{u<0}| H_κ'(u)]` with the expectation
/// taken over the backward kernel `p(s̄, r | s)` and the target equal to the
/// current table.
pub fn expected_quantile_fixed_point(
    mdp: &FiniteMdp,
    policy: &Policy,
    config: &QuantileConfig,
    tolerance: f64,
    max_iterations: usize,
) -> Result<QuantileModel> {
    const STEP: f64 = 0.1;
    let kernel = BackwardKernel::new(mdp, policy)?;
    let mut model = QuantileModel::new(mdp.n_states, config)?;
    let n = model.n_quantiles;
    let nf = n as f64;
    let mut next = model.theta.clone();
    let mut last_change = f64::INFINITY;
    for _ in 0..max_iterations {
        last_change = 0.0;
        for s in 0..mdp.n_states {
            for i in 0..n {
                let q = model.theta[s * n + i];
                let tau = model.levels[i];
                let mut grad = 0.0;
                for e in &kernel.rows[s] {
                    let g = mdp.discount[e.predecessor];
                    let src = &model.theta[e.predecessor * n..(e.predecessor + 1) * n];
                    let inner: f64 = src
                        .iter()
                        .map(|qj| {
                            let u = e.reward + g * qj - q;
                            asymmetry(u, tau) * huber_derivative(u, model.kappa)
                        })
                        .sum();
                    grad += e.prob * inner / nf;
                }
                next[s * n + i] = q + STEP * grad;
                last_change = f64::max(last_change, (STEP * grad).abs());
            }
        }
        std::mem::swap(&mut model.theta, &mut next);
        if last_change <= tolerance {
            model.sync_target();
            return Ok(model);
        }
    }
    Err(Error::NotConverged { iterations: max_iterations, last_change })
}

/// Uniform mixture `(1/N) Σ N(m_i, σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<f64>,
    pub std: f64,
}

impl GaussianMixture {
    pub fn new(means: Vec<f64>, std: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {std}")));
        }
        Ok(Self { means, std })
    }

    pub fn mean(&self) -> f64 {
        self.means.iter().sum::<f64>() / self.means.len() as f64
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.means.iter().map(|m| normal_cdf((x - m) / self.std)).sum::<f64>() / self.means.len() as f64
    }
}

/// Imputes the return distribution at `s` as a Gaussian mixture centered on
/// the learned quantiles.
pub fn impute(model: &QuantileModel, s: usize, sigma: f64) -> Result<GaussianMixture> {
    GaussianMixture::new(model.quantiles(s).to_vec(), sigma)
}

fn erfc_ext(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else if x == f64::NEG_INFINITY {
        2.0
    } else {
        erfc(x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc_ext(-z / std::f64::consts::SQRT_2)
}

/// `Φ(b) − Φ(a)` for `a ≤ b`, evaluated on whichever tail keeps the
/// subtraction well conditioned.
pub fn normal_interval(a: f64, b: f64) -> f64 {
    if !(a < b) {
        return 0.0;
    }
    let r = std::f64::consts::SQRT_2;
    let p = if a >= 0.0 {
        0.5 * (erfc_ext(a / r) - erfc_ext(b / r))
    } else if b <= 0.0 {
        0.5 * (erfc_ext(-b / r) - erfc_ext(-a / r))
    } else {
        1.0 - 0.5 * erfc_ext(b / r) - 0.5 * erfc_ext(-a / r)
    };
    p.clamp(0.0, 1.0)
}

/// Mass the mixture places on `[lo, hi]`.
pub fn interval_probability(mixture: &GaussianMixture, lo: f64, hi: f64) -> f64 {
    let sd = mixture.std;
    let total: f64 = mixture.means.iter().map(|m| normal_interval((lo - m) / sd, (hi - m) / sd)).sum();
    (total / mixture.means.len() as f64).clamp(0.0, 1.0)
}

/// `1 − η̂^s([Ḡ − Δ, Ḡ + Δ])`.
pub fn anomaly_probability(model: &QuantileModel, s: usize, g_bar: f64, delta: f64, sigma: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidConfig(format!("delta must be nonnegative, got {delta}")));
    }
    let mixture = impute(model, s, sigma)?;
    Ok((1.0 - interval_probability(&mixture, g_bar - delta, g_bar + delta)).clamp(0.0, 1.0))
}
