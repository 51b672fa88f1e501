//! Seeded experiment orchestration: JSON configs, parallel runs, CSV curve
//! bundles and a manifest that reproduces them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::{
    run_phase1, run_phase2, AnomalySpec, DetectionTrace, Phase1Config, DEFAULT_DELTA,
    DEFAULT_PHASE1_STEPS, DEFAULT_PHASE2_STEPS, DEFAULT_SIGMA,
};
use crate::distributional::{QuantileConfig, QuantileModel};
use crate::error::{Error, Result};
use crate::mdp::{build_microdrone, FiniteMdp, MicrodroneRewards, Policy};
use crate::oracle::{check_full_rank, density_ratio, is_ratio, OracleReport};
use crate::reverse_td::{run_learner, CurvePoint, LearnerConfig, LearnerMode, Policies, StepSchedule};
use crate::stats;

pub const PRESET_MICRODRONE: &str = "microdrone";
pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.3, 0.7, 0.9, 1.0];
pub const ALPHA_GRID: [f64; 4] = [1e-3, 5e-3, 1e-2, 5e-2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Oracle,
    Learn,
    LambdaSweep,
    DistTrain,
    Detect,
}

/// A policy as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Uniform,
    /// The same action distribution in every state.
    StateIndependent { action_probs: Vec<f64> },
    Table { probs: Vec<Vec<f64>> },
}

impl PolicySpec {
    pub fn build(&self, mdp: &FiniteMdp) -> Result<Policy> {
        let policy = match self {
            PolicySpec::Uniform => Policy::uniform(mdp.n_states, mdp.n_actions),
            PolicySpec::StateIndependent { action_probs } => {
                Policy::state_independent(mdp.n_states, action_probs)?
            }
            PolicySpec::Table { probs } => Policy::new(probs.clone())?,
        };
        policy.validate_for(mdp)?;
        Ok(policy)
    }

    fn two_action(p_first: f64) -> Self {
        PolicySpec::StateIndependent { action_probs: vec![p_first, 1.0 - p_first] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    Tabular,
    /// Entries uniform on `[-1, 1)`, redrawn until full column rank.
    Random { k: usize, seed: u64 },
    Matrix { rows: Vec<Vec<f64>> },
}

impl FeatureSpec {
    pub fn build(&self, n_states: usize) -> Result<DMatrix<f64>> {
        match self {
            FeatureSpec::Tabular => Ok(DMatrix::identity(n_states, n_states)),
            FeatureSpec::Random { k, seed } => random_features(n_states, *k, *seed),
            FeatureSpec::Matrix { rows } => {
                if rows.len() != n_states || rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
                    return Err(Error::InvalidConfig("feature matrix must have one equal-length row per state".into()));
                }
                let x = DMatrix::from_fn(n_states, rows[0].len(), |i, j| rows[i][j]);
                check_full_rank(&x)?;
                Ok(x)
            }
        }
    }
}

/// A full-column-rank `n × k` matrix with entries uniform on `[-1, 1)`.
pub fn random_features(n_states: usize, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    if k == 0 || k > n_states {
        return Err(Error::InvalidConfig(format!("need 1 <= k <= {n_states}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let x = DMatrix::from_fn(n_states, k, |_, _| rng.random_range(-1.0..1.0));
        if check_full_rank(&x).is_ok() {
            return Ok(x);
        }
    }
    Err(Error::RankDeficientFeatures { rank: 0, columns: k })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnParams {
    pub lambda: f64,
    pub schedule: StepSchedule,
    pub total_steps: u64,
    pub eval_every: u64,
    pub features: FeatureSpec,
    pub target: PolicySpec,
    /// When set, data come from this policy and updates use exact `τ`, `ρ`.
    pub behavior: Option<PolicySpec>,
}

impl Default for LearnParams {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            schedule: StepSchedule::default(),
            total_steps: 1_000_000,
            eval_every: 1_000,
            features: FeatureSpec::Tabular,
            target: PolicySpec::Uniform,
            behavior: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneCriterion {
    /// Trapezoidal area under the mean MVE curve.
    Auc,
    FinalMve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepParams {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub total_steps: u64,
    pub eval_every: u64,
    pub features: FeatureSpec,
    pub target: PolicySpec,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            lambdas: LAMBDA_GRID.to_vec(),
            alphas: ALPHA_GRID.to_vec(),
            total_steps: 100_000,
            eval_every: 5_000,
            features: FeatureSpec::Tabular,
            target: PolicySpec::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistParams {
    pub quantile: QuantileConfig,
    pub steps: u64,
    pub eval_every: u64,
    pub behavior: PolicySpec,
    pub target: PolicySpec,
}

impl Default for DistParams {
    fn default() -> Self {
        Self {
            quantile: QuantileConfig::default(),
            steps: DEFAULT_PHASE1_STEPS,
            eval_every: 1_000,
            behavior: PolicySpec::two_action(0.5),
            target: PolicySpec::two_action(0.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    /// Anomaly specs in the `none` / `reward:<d>:<p>` / `policy:<p>` syntax.
    pub specs: Vec<String>,
    pub steps: u64,
    /// Defaults to the stream midpoint.
    pub onset_step: Option<u64>,
    pub delta: f64,
    pub sigma: f64,
    /// Pretrained quantile table; when absent each run trains its own.
    pub model: Option<PathBuf>,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            specs: vec!["none".into(), "reward:+2:0.5".into(), "policy:0.9".into()],
            steps: DEFAULT_PHASE2_STEPS,
            onset_step: None,
            delta: DEFAULT_DELTA,
            sigma: DEFAULT_SIGMA,
            model: None,
        }
    }
}

impl DetectParams {
    pub fn onset(&self) -> u64 {
        self.onset_step.unwrap_or(self.steps / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Preset name or path to an MDP JSON file.
    #[serde(default = "default_mdp")]
    pub mdp: String,
    /// Microdrone only: deterministic move costs without failures.
    #[serde(default)]
    pub ideal_rewards: bool,
    #[serde(default)]
    pub master_seed: u64,
    /// Run labels; each run's RNG seed is derived from the master seed and
    /// its label.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mve_normalized: bool,
    #[serde(default)]
    pub learn: LearnParams,
    #[serde(default)]
    pub sweep: SweepParams,
    #[serde(default)]
    pub dist: DistParams,
    #[serde(default)]
    pub detect: DetectParams,
}

fn default_mdp() -> String {
    PRESET_MICRODRONE.into()
}

fn default_seeds() -> Vec<u64> {
    (0..30).collect()
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            mdp: default_mdp(),
            ideal_rewards: false,
            master_seed: 0,
            seeds: default_seeds(),
            mve_normalized: false,
            learn: LearnParams::default(),
            sweep: SweepParams::default(),
            dist: DistParams::default(),
            detect: DetectParams::default(),
        }
    }

    /// Reads a config file, or the config echoed inside a manifest.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let inner = match value.get("config") {
            Some(cfg) if value.get("runs").is_some() => cfg.clone(),
            _ => value,
        };
        Ok(serde_json::from_value(inner)?)
    }

    pub fn load_mdp(&self) -> Result<FiniteMdp> {
        if self.mdp == PRESET_MICRODRONE {
            let rewards = if self.ideal_rewards { MicrodroneRewards::Ideal } else { MicrodroneRewards::Energy };
            Ok(build_microdrone(rewards).0)
        } else {
            let path = Path::new(&self.mdp);
            if !path.exists() {
                return Err(Error::InvalidConfig(format!("unknown preset or missing file '{}'", self.mdp)));
            }
            FiniteMdp::from_json_file(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        match self.experiment {
            Experiment::LambdaSweep => {
                let s = &self.sweep;
                if s.lambdas.is_empty() || s.alphas.is_empty() {
                    return Err(Error::InvalidConfig("sweep grid is empty".into()));
                }
                if s.eval_every == 0 {
                    return Err(Error::InvalidConfig("eval_every must be positive".into()));
                }
            }
            Experiment::Detect => {
                let d = &self.detect;
                if d.specs.is_empty() {
                    return Err(Error::InvalidConfig("detect needs at least one anomaly spec".into()));
                }
                if !(d.delta >= 0.0) || !(d.sigma > 0.0) {
                    return Err(Error::InvalidConfig("need delta >= 0 and sigma > 0".into()));
                }
                if let Some(m) = &d.model {
                    if !m.exists() {
                        return Err(Error::InvalidConfig(format!("model file '{}' not found", m.display())));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based split of the master seed: run `label` gets an independent
/// stream seed.
pub fn derive_seed(master: u64, label: u64) -> u64 {
    splitmix64(splitmix64(master) ^ label.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Seed of the detection stream that follows phase-1 training with `seed`.
pub fn phase2_seed(seed: u64) -> u64 {
    splitmix64(seed)
}

/// Mean, median and standard error of one step's metric across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub standard_error: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    Summary {
        median: stats::median(values),
        mean: stats::mean(values),
        standard_error: stats::standard_error(values),
    }
}

/// One `(λ, α)` curve from a sweep, averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCurve {
    pub lambda: f64,
    pub alpha: f64,
    pub points: Vec<CurvePoint>,
}

impl SweepCurve {
    pub fn auc(&self) -> f64 {
        trapezoid(&self.points)
    }

    pub fn final_mve(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.mve)
    }
}

/// `∫ mve d(step)` by the trapezoidal rule.
pub fn trapezoid(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| 0.5 * (w[1].step - w[0].step) as f64 * (w[0].mve + w[1].mve))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedStep {
    pub lambda: f64,
    pub alpha: f64,
    pub score: f64,
}

/// The α minimizing `criterion` for each λ; ties go to the smaller α.
pub fn tune_step_size(
    curves: &[SweepCurve],
    lambdas: &[f64],
    alphas: &[f64],
    criterion: TuneCriterion,
) -> Result<Vec<TunedStep>> {
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);
    lambdas
        .iter()
        .map(|&lambda| {
            let mut best: Option<TunedStep> = None;
            for &alpha in &alphas {
                let curve = curves
                    .iter()
                    .find(|c| c.lambda == lambda && c.alpha == alpha)
                    .ok_or(Error::IncompleteGrid { lambda, alpha })?;
                let score = match criterion {
                    TuneCriterion::Auc => curve.auc(),
                    TuneCriterion::FinalMve => curve.final_mve(),
                };
                if best.is_none_or(|b| score < b.score) {
                    best = Some(TunedStep { lambda, alpha, score });
                }
            }
            best.ok_or(Error::InvalidConfig("empty step-size grid".into()))
        })
        .collect()
}

/// Float formatting for CSV output: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Per-run bookkeeping written to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: usize,
    pub label: u64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub version: String,
    pub runs: Vec<RunRecord>,
    pub outputs: Vec<String>,
}

/// Rows of a CSV file, written only once all runs are done.
struct Table {
    name: &'static str,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: &[&'static str]) -> Self {
        Self { name, header: header.to_vec(), rows: Vec::new() }
    }
}

/// What `run` produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub outputs: Vec<PathBuf>,
    pub manifest: Manifest,
}

struct Output {
    tables: Vec<Table>,
    runs: Vec<RunRecord>,
    extra: Vec<(String, String)>,
}

/// Executes the configured experiment and writes `results.csv`,
/// `aggregate.csv` (where meaningful) and `manifest.json` under `outdir`.
/// On error nothing written by this call is left behind.
pub fn run(config: &ExperimentConfig, outdir: impl AsRef<Path>) -> Result<RunSummary> {
    config.validate()?;
    let outdir = outdir.as_ref();
    let output = match config.experiment {
        Experiment::Oracle => oracle_output(config)?,
        Experiment::Learn => learn_output(config)?,
        Experiment::LambdaSweep => sweep_output(config)?,
        Experiment::DistTrain => dist_output(config)?,
        Experiment::Detect => detect_output(config)?,
    };
    let mut written = Vec::new();
    let created_dir = !outdir.exists();
    let result = write_outputs(config, outdir, output, &mut written);
    if result.is_err() {
        for path in written.iter().rev() {
            let _ = if path.is_dir() { fs::remove_dir(path) } else { fs::remove_file(path) };
        }
        if created_dir {
            let _ = fs::remove_dir_all(outdir);
        }
    }
    let manifest = result?;
    Ok(RunSummary { outputs: written, manifest })
}

fn write_outputs(
    config: &ExperimentConfig,
    outdir: &Path,
    output: Output,
    written: &mut Vec<PathBuf>,
) -> Result<Manifest> {
    fs::create_dir_all(outdir)?;
    let mut names = Vec::new();
    for table in &output.tables {
        let path = outdir.join(table.name);
        let mut w = csv::Writer::from_path(&path)?;
        written.push(path.clone());
        w.write_record(&table.header)?;
        for row in &table.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        names.push(table.name.to_string());
    }
    for (name, body) in &output.extra {
        let path = outdir.join(name);
        if let Some(parent) = path.parent() {
            if !parent.exists() {
                fs::create_dir_all(parent)?;
                written.push(parent.to_path_buf());
            }
        }
        write_new(&path, body.as_bytes(), written)?;
        names.push(name.clone());
    }
    let manifest = Manifest {
        config: config.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        runs: output.runs,
        outputs: names,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_new(&outdir.join("manifest.json"), json.as_bytes(), written)?;
    Ok(manifest)
}

/// Creates (or truncates) `path`, records it, then fills it.
fn write_new(path: &Path, body: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    written.push(path.to_path_buf());
    file.write_all(body)?;
    Ok(())
}

fn oracle_output(config: &ExperimentConfig) -> Result<Output> {
    let mdp = config.load_mdp()?;
    let policy = config.learn.target.build(&mdp)?;
    let report = OracleReport::exact(&mdp, &policy)?;
    let mut table = Table::new("results.csv", &["state", "name", "v_pi", "v_bar", "d_pi"]);
    for s in 0..mdp.n_states {
        table.rows.push(vec![
            s.to_string(),
            mdp.state_name(s),
            fmt_f64(report.forward_values[s]),
            fmt_f64(report.reverse_values[s]),
            fmt_f64(report.d_pi[s]),
        ]);
    }
    Ok(Output {
        tables: vec![table],
        runs: Vec::new(),
        extra: vec![("oracle.json".into(), serde_json::to_string_pretty(&report)?)],
    })
}

fn learner_mode(mdp: &FiniteMdp, target: &Policy, behavior: Option<&Policy>) -> Result<LearnerMode> {
    Ok(match behavior {
        None => LearnerMode::OnPolicy,
        Some(mu) => LearnerMode::OffPolicy {
            tau: density_ratio(mdp, target, mu)?.iter().copied().collect(),
            rho: is_ratio(mdp, target, mu)?,
        },
    })
}

fn aggregate_table(groups: &[(Vec<String>, Vec<Vec<CurvePoint>>)], key_header: &[&'static str]) -> Table {
    let mut header = key_header.to_vec();
    header.extend(["step", "median", "mean", "standard_error"]);
    let mut table = Table::new("aggregate.csv", &header);
    for (key, curves) in groups {
        let len = curves.iter().map(Vec::len).min().unwrap_or(0);
        for k in 0..len {
            let values: Vec<f64> = curves.iter().map(|c| c[k].mve).collect();
            let s = summarize(&values);
            let mut row = key.clone();
            row.extend([
                curves[0][k].step.to_string(),
                fmt_f64(s.median),
                fmt_f64(s.mean),
                fmt_f64(s.standard_error),
            ]);
            table.rows.push(row);
        }
    }
    table
}

fn learn_output(config: &ExperimentConfig) -> Result<Output> {
    let mdp = config.load_mdp()?;
    let p = &config.learn;
    let target = p.target.build(&mdp)?;
    let behavior = p.behavior.as_ref().map(|b| b.build(&mdp)).transpose()?;
    let mode = learner_mode(&mdp, &target, behavior.as_ref())?;
    let features = p.features.build(mdp.n_states)?;
    let policies = Policies { behavior: behavior.unwrap_or_else(|| target.clone()), target };
    let runs: Vec<RunRecord> = config
        .seeds
        .iter()
        .enumerate()
        .map(|(run_id, &label)| RunRecord {
            run_id,
            label,
            seed: derive_seed(config.master_seed, label),
            lambda: Some(p.lambda),
            alpha: None,
            spec: None,
        })
        .collect();
    let curves: Vec<Vec<CurvePoint>> = runs
        .par_iter()
        .map(|r| {
            let cfg = LearnerConfig {
                lambda: p.lambda,
                schedule: p.schedule,
                mode: mode.clone(),
                total_steps: p.total_steps,
                seed: r.seed,
                eval_every: p.eval_every,
                mve_normalized: config.mve_normalized,
            };
            run_learner(&mdp, &policies, &features, &cfg).map(|c| c.points)
        })
        .collect::<Result<_>>()?;
    let alpha_label = match p.schedule {
        StepSchedule::Constant { alpha } => fmt_f64(alpha),
        StepSchedule::RobbinsMonro { a, b } => format!("rm({a},{b})"),
    };
    let mut results = Table::new("results.csv", &["run_id", "seed", "lambda", "alpha", "step", "mve"]);
    for (r, curve) in runs.iter().zip(&curves) {
        for pt in curve {
            results.rows.push(vec![
                r.run_id.to_string(),
                r.seed.to_string(),
                fmt_f64(p.lambda),
                alpha_label.clone(),
                pt.step.to_string(),
                fmt_f64(pt.mve),
            ]);
        }
    }
    let aggregate = aggregate_table(&[(vec![fmt_f64(p.lambda), alpha_label], curves)], &["lambda", "alpha"]);
    Ok(Output { tables: vec![results, aggregate], runs, extra: Vec::new() })
}

fn sweep_output(config: &ExperimentConfig) -> Result<Output> {
    let mdp = config.load_mdp()?;
    let p = &config.sweep;
    let target = p.target.build(&mdp)?;
    let features = p.features.build(mdp.n_states)?;
    let policies = Policies::on_policy(target);
    let mut runs = Vec::new();
    for &lambda in &p.lambdas {
        for &alpha in &p.alphas {
            for &label in &config.seeds {
                runs.push(RunRecord {
                    run_id: runs.len(),
                    label,
                    seed: derive_seed(config.master_seed, label),
                    lambda: Some(lambda),
                    alpha: Some(alpha),
                    spec: None,
                });
            }
        }
    }
    let curves: Vec<Vec<CurvePoint>> = runs
        .par_iter()
        .map(|r| {
            let cfg = LearnerConfig {
                lambda: r.lambda.unwrap_or_default(),
                schedule: StepSchedule::Constant { alpha: r.alpha.unwrap_or_default() },
                mode: LearnerMode::OnPolicy,
                total_steps: p.total_steps,
                seed: r.seed,
                eval_every: p.eval_every,
                mve_normalized: config.mve_normalized,
            };
            run_learner(&mdp, &policies, &features, &cfg).map(|c| c.points)
        })
        .collect::<Result<_>>()?;

    let mut results = Table::new("results.csv", &["run_id", "seed", "lambda", "alpha", "step", "mve"]);
    for (r, curve) in runs.iter().zip(&curves) {
        for pt in curve {
            results.rows.push(vec![
                r.run_id.to_string(),
                r.seed.to_string(),
                fmt_f64(r.lambda.unwrap_or_default()),
                fmt_f64(r.alpha.unwrap_or_default()),
                pt.step.to_string(),
                fmt_f64(pt.mve),
            ]);
        }
    }
    let n_seeds = config.seeds.len();
    let mut groups = Vec::new();
    let mut mean_curves = Vec::new();
    for (chunk_runs, chunk_curves) in runs.chunks(n_seeds).zip(curves.chunks(n_seeds)) {
        let (lambda, alpha) = (chunk_runs[0].lambda.unwrap_or_default(), chunk_runs[0].alpha.unwrap_or_default());
        let group_curves = chunk_curves.to_vec();
        let len = group_curves[0].len();
        let points = (0..len)
            .map(|k| CurvePoint {
                step: group_curves[0][k].step,
                mve: stats::mean(&group_curves.iter().map(|c| c[k].mve).collect::<Vec<_>>()),
            })
            .collect();
        mean_curves.push(SweepCurve { lambda, alpha, points });
        groups.push((vec![fmt_f64(lambda), fmt_f64(alpha)], group_curves));
    }
    let aggregate = aggregate_table(&groups, &["lambda", "alpha"]);
    let mut tuning = Table::new("tuning.csv", &["criterion", "lambda", "alpha", "score"]);
    for (criterion, name) in [(TuneCriterion::Auc, "auc"), (TuneCriterion::FinalMve, "final_mve")] {
        for t in tune_step_size(&mean_curves, &p.lambdas, &p.alphas, criterion)? {
            tuning.rows.push(vec![name.into(), fmt_f64(t.lambda), fmt_f64(t.alpha), fmt_f64(t.score)]);
        }
    }
    Ok(Output { tables: vec![results, aggregate, tuning], runs, extra: Vec::new() })
}

fn phase1_config(config: &ExperimentConfig) -> Phase1Config {
    Phase1Config {
        quantile: config.dist.quantile,
        eval_every: config.dist.eval_every,
        mve_normalized: config.mve_normalized,
    }
}

fn dist_output(config: &ExperimentConfig) -> Result<Output> {
    let mdp = config.load_mdp()?;
    let p = &config.dist;
    let mu = p.behavior.build(&mdp)?;
    let pi = p.target.build(&mdp)?;
    let cfg = phase1_config(config);
    let runs: Vec<RunRecord> = config
        .seeds
        .iter()
        .enumerate()
        .map(|(run_id, &label)| RunRecord {
            run_id,
            label,
            seed: derive_seed(config.master_seed, label),
            lambda: None,
            alpha: Some(p.quantile.alpha),
            spec: None,
        })
        .collect();
    let trained = runs
        .par_iter()
        .map(|r| run_phase1(&mdp, &mu, &pi, p.steps, &cfg, r.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Table::new("results.csv", &["run_id", "seed", "step", "mve"]);
    let mut extra = Vec::new();
    for (r, t) in runs.iter().zip(&trained) {
        for pt in &t.curve {
            results.rows.push(vec![r.run_id.to_string(), r.seed.to_string(), pt.step.to_string(), fmt_f64(pt.mve)]);
        }
        let mut buf = Vec::new();
        t.model.write_csv(&mut buf)?;
        extra.push((format!("models/run_{}.csv", r.run_id), String::from_utf8_lossy(&buf).into_owned()));
    }
    let curves = trained.into_iter().map(|t| t.curve).collect();
    let aggregate = aggregate_table(&[(Vec::new(), curves)], &[]);
    Ok(Output { tables: vec![results, aggregate], runs, extra })
}

fn detect_output(config: &ExperimentConfig) -> Result<Output> {
    let mdp = config.load_mdp()?;
    let p = &config.detect;
    let onset = p.onset();
    let specs = p
        .specs
        .iter()
        .map(|s| AnomalySpec::parse(s, &mdp, onset))
        .collect::<Result<Vec<_>>>()?;
    let mu = config.dist.behavior.build(&mdp)?;
    let pi = config.dist.target.build(&mdp)?;
    let shared_model = match &p.model {
        Some(path) => {
            let model = QuantileModel::read_csv(fs::File::open(path)?, &config.dist.quantile)?;
            if model.n_states() != mdp.n_states {
                return Err(Error::InvalidConfig("model and MDP disagree on the number of states".into()));
            }
            Some(model)
        }
        None => None,
    };
    let cfg = phase1_config(config);
    // Every spec in a run shares the run's model and phase-2 seed, so the
    // streams coincide up to the onset.
    let per_seed: Vec<(RunRecord, Vec<DetectionTrace>)> = config
        .seeds
        .par_iter()
        .enumerate()
        .map(|(run_id, &label)| {
            let seed = derive_seed(config.master_seed, label);
            let trained;
            let model = match &shared_model {
                Some(m) => m,
                None => {
                    trained = run_phase1(&mdp, &mu, &pi, config.dist.steps, &cfg, seed)?.model;
                    &trained
                }
            };
            let phase2_seed = phase2_seed(seed);
            let traces = specs
                .iter()
                .map(|spec| run_phase2(&mdp, &pi, model, spec, p.steps, p.delta, p.sigma, phase2_seed))
                .collect::<Result<Vec<_>>>()?;
            let record = RunRecord { run_id, label, seed, lambda: None, alpha: None, spec: None };
            Ok((record, traces))
        })
        .collect::<Result<_>>()?;

    let mut results =
        Table::new("results.csv", &["seed", "spec", "step", "state", "g_bar", "anomaly_prob"]);
    let mut runs = Vec::new();
    for (record, traces) in &per_seed {
        for (spec, trace) in specs.iter().zip(traces) {
            let label = spec.to_string();
            for rec in &trace.records {
                results.rows.push(vec![
                    record.seed.to_string(),
                    label.clone(),
                    rec.step.to_string(),
                    rec.state.to_string(),
                    fmt_f64(rec.g_bar),
                    fmt_f64(rec.anomaly_prob),
                ]);
            }
        }
        runs.push(record.clone());
    }
    let mut aggregate = Table::new("aggregate.csv", &["spec", "step", "median", "mean", "standard_error"]);
    let mut shifts = Table::new("shifts.csv", &["spec", "seed", "pre_onset_mean", "post_onset_mean"]);
    for (k, spec) in specs.iter().enumerate() {
        let label = spec.to_string();
        for t in 0..p.steps as usize {
            let values: Vec<f64> = per_seed.iter().map(|(_, tr)| tr[k].records[t].anomaly_prob).collect();
            let s = summarize(&values);
            aggregate.rows.push(vec![
                label.clone(),
                (t + 1).to_string(),
                fmt_f64(s.median),
                fmt_f64(s.mean),
                fmt_f64(s.standard_error),
            ]);
        }
        for (record, traces) in &per_seed {
            shifts.rows.push(vec![
                label.clone(),
                record.seed.to_string(),
                fmt_f64(traces[k].pre_onset_mean(onset)),
                fmt_f64(traces[k].post_onset_mean(onset)),
            ]);
        }
    }
    Ok(Output { tables: vec![results, aggregate, shifts], runs, extra: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(lambda: f64, alpha: f64, mves: &[f64]) -> SweepCurve {
        SweepCurve {
            lambda,
            alpha,
            points: mves.iter().enumerate().map(|(i, &m)| CurvePoint { step: i as u64 * 10, mve: m }).collect(),
        }
    }

    #[test]
    fn single_alpha_grid() {
        let curves = vec![curve(0.0, 0.1, &[3.0, 1.0]), curve(1.0, 0.1, &[5.0, 2.0])];
        let tuned = tune_step_size(&curves, &[0.0, 1.0], &[0.1], TuneCriterion::Auc).unwrap();
        assert!(tuned.iter().all(|t| t.alpha == 0.1));
    }

    #[test]
    fn final_mve_argmin_and_ties() {
        let curves = vec![curve(0.0, 0.1, &[9.0, 2.0]), curve(0.0, 0.2, &[9.0, 1.0]), curve(0.0, 0.3, &[9.0, 1.0])];
        let t = tune_step_size(&curves, &[0.0], &[0.3, 0.1, 0.2], TuneCriterion::FinalMve).unwrap();
        assert_eq!(t[0].alpha, 0.2);
    }

    #[test]
    fn missing_grid_entry() {
        let curves = vec![curve(0.0, 0.1, &[1.0])];
        assert!(matches!(
            tune_step_size(&curves, &[0.0], &[0.1, 0.2], TuneCriterion::Auc),
            Err(Error::IncompleteGrid { .. })
        ));
    }

    #[test]
    fn trapezoid_rule() {
        // Independent: ∫_0^20 of the piecewise-linear interpolant of (0,4),(10,2),(20,2).
        let c = curve(0.0, 0.1, &[4.0, 2.0, 2.0]);
        assert_eq!(c.auc(), 10.0 * 3.0 + 10.0 * 2.0);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..1000).map(|l| derive_seed(7, l)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 1000);
        assert_eq!(derive_seed(7, 3), a[3]);
        assert_ne!(derive_seed(8, 3), a[3]);
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"experiment":"lambda_sweep"}"#).unwrap();
        assert_eq!(cfg.mdp, "microdrone");
        assert_eq!(cfg.seeds.len(), 30);
        assert_eq!(cfg.sweep.lambdas, LAMBDA_GRID.to_vec());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ExperimentConfig::new(Experiment::Learn);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new(Experiment::Detect);
        cfg.detect.model = Some("/definitely/not/here.csv".into());
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new(Experiment::Oracle);
        cfg.mdp = "no-such-preset".into();
        assert!(cfg.load_mdp().is_err());
    }

    #[test]
    fn random_features_full_rank() {
        let x = random_features(4, 2, 1).unwrap();
        assert!(check_full_rank(&x).is_ok());
        assert!(random_features(4, 5, 1).is_err());
    }
}
