use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use reverse_rl::harness::{self, Experiment, ExperimentConfig, PolicySpec};
use reverse_rl::oracle::OracleReport;
use reverse_rl::StepSchedule;

#[derive(Parser)]
#[command(name = "reverse-rl", version, about = "Reverse TD learning and reverse GVF experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact forward and reverse GVFs and the stationary distribution.
    Oracle(OracleArgs),
    /// Run one Reverse TD learner over several seeds.
    Learn(LearnArgs),
    /// Reverse TD(λ) over a (λ, α) grid, with per-λ step-size tuning.
    LambdaSweep(SweepArgs),
    /// Train quantile models off-policy.
    DistTrain(DistArgs),
    /// Streaming anomaly detection with injected anomalies.
    Detect(DetectArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config (or a manifest from a previous run); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in MDP.
    #[arg(long, conflicts_with = "mdp")]
    preset: Option<String>,
    /// MDP JSON file.
    #[arg(long)]
    mdp: Option<PathBuf>,
    /// Number of runs (labels 0..N).
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Microdrone: deterministic move costs.
    #[arg(long)]
    ideal_rewards: bool,
    /// Divide squared value errors by the number of states.
    #[arg(long)]
    mve_normalized: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Per-state action probabilities of the policy, e.g. `0.1,0.9`.
    #[arg(long, value_delimiter = ',')]
    policy: Option<Vec<f64>>,
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    lambda: Option<f64>,
    /// Constant step size; the default is the Robbins-Monro schedule.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Target policy action probabilities.
    #[arg(long, value_delimiter = ',')]
    target: Option<Vec<f64>>,
    /// Behavior policy action probabilities; enables off-policy learning.
    #[arg(long, value_delimiter = ',')]
    behavior: Option<Vec<f64>>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
}

#[derive(Args)]
struct DistArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    quantiles: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    /// `none`, `reward:<delta>:<prob>` or `policy:<p>`; repeatable.
    #[arg(long)]
    spec: Vec<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Pretrained quantile table (`state,i,tau_i,q`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Detection stream length.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    onset: Option<u64>,
    /// Phase-1 training length when no model is given.
    #[arg(long)]
    train_steps: Option<u64>,
}

fn base_config(common: &Common, experiment: Experiment) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_path(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            if cfg.experiment != experiment {
                bail!("config is for {:?}, not {:?}", cfg.experiment, experiment);
            }
            cfg
        }
        None => ExperimentConfig::new(experiment),
    };
    if let Some(p) = &common.preset {
        cfg.mdp = p.clone();
    }
    if let Some(p) = &common.mdp {
        cfg.mdp = p.display().to_string();
    }
    if let Some(n) = common.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(m) = common.master_seed {
        cfg.master_seed = m;
    }
    cfg.ideal_rewards |= common.ideal_rewards;
    cfg.mve_normalized |= common.mve_normalized;
    Ok(cfg)
}

fn policy_spec(probs: &[f64]) -> PolicySpec {
    PolicySpec::StateIndependent { action_probs: probs.to_vec() }
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn finish(cfg: &ExperimentConfig, out: PathBuf) -> Result<()> {
    let summary = harness::run(cfg, &out)?;
    for path in &summary.outputs {
        println!("{}", path.display());
    }
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let mut cfg = base_config(&args.common, Experiment::Oracle)?;
    if let Some(p) = &args.policy {
        cfg.learn.target = policy_spec(p);
    }
    let mdp = cfg.load_mdp()?;
    let policy = cfg.learn.target.build(&mdp)?;
    let report = OracleReport::exact(&mdp, &policy)?;
    let names: Vec<String> = (0..mdp.n_states).map(|s| mdp.state_name(s)).collect();
    let json = serde_json::json!({
        "states": names,
        "v_pi": report.forward_values,
        "v_bar": report.reverse_values,
        "d_pi": report.d_pi,
        "spectral_radius_reverse": report.spectral_radius_reverse,
        "method": report.method,
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(out) = &args.common.out {
        harness::run(&cfg, out)?;
    }
    Ok(())
}

fn learn(args: LearnArgs) -> Result<()> {
    let mut cfg = base_config(&args.common, Experiment::Learn)?;
    let p = &mut cfg.learn;
    if let Some(l) = args.lambda {
        p.lambda = l;
    }
    if let Some(a) = args.alpha {
        p.schedule = StepSchedule::Constant { alpha: a };
    }
    if let Some(s) = args.steps {
        p.total_steps = s;
    }
    if let Some(e) = args.eval_every {
        p.eval_every = e;
    }
    if let Some(t) = &args.target {
        p.target = policy_spec(t);
    }
    if let Some(b) = &args.behavior {
        p.behavior = Some(policy_spec(b));
    }
    let out = out_dir(&args.common, "out/learn");
    finish(&cfg, out)
}

fn lambda_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = base_config(&args.common, Experiment::LambdaSweep)?;
    let p = &mut cfg.sweep;
    if let Some(l) = args.lambdas {
        p.lambdas = l;
    }
    if let Some(a) = args.alphas {
        p.alphas = a;
    }
    if let Some(s) = args.steps {
        p.total_steps = s;
    }
    if let Some(e) = args.eval_every {
        p.eval_every = e;
    }
    let out = out_dir(&args.common, "out/lambda-sweep");
    finish(&cfg, out)
}

fn dist_train(args: DistArgs) -> Result<()> {
    let mut cfg = base_config(&args.common, Experiment::DistTrain)?;
    if let Some(s) = args.steps {
        cfg.dist.steps = s;
    }
    if let Some(a) = args.alpha {
        cfg.dist.quantile.alpha = a;
    }
    if let Some(n) = args.quantiles {
        cfg.dist.quantile.n_quantiles = n;
    }
    let out = out_dir(&args.common, "out/dist-train");
    finish(&cfg, out)
}

fn detect(args: DetectArgs) -> Result<()> {
    let mut cfg = base_config(&args.common, Experiment::Detect)?;
    let p = &mut cfg.detect;
    if !args.spec.is_empty() {
        p.specs = args.spec.clone();
    }
    if let Some(d) = args.delta {
        p.delta = d;
    }
    if let Some(s) = args.sigma {
        p.sigma = s;
    }
    if let Some(m) = &args.model {
        p.model = Some(m.clone());
    }
    if let Some(s) = args.steps {
        p.steps = s;
    }
    if let Some(o) = args.onset {
        p.onset_step = Some(o);
    }
    if let Some(s) = args.train_steps {
        cfg.dist.steps = s;
    }
    let out = out_dir(&args.common, "out/detect");
    finish(&cfg, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Oracle(a) => oracle(a),
        Command::Learn(a) => learn(a),
        Command::LambdaSweep(a) => lambda_sweep(a),
        Command::DistTrain(a) => dist_train(a),
        Command::Detect(a) => detect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
