//! Random hyperparameter search, the lambda sweep and trade-off reports.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{attach_scores, BlackBox};
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::metrics::pareto_frontier;
use crate::model::ArchitectureSpec;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::training::{evaluate, train_surrogate, TrainConfig, Variant};

/// Inclusive bounds. Depths count layers including each sub-network's
/// output layer (the trunk has none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub trunk_depth: (usize, usize),
    pub head_depth: (usize, usize),
    pub attention_depth: (usize, usize),
    pub width: (usize, usize),
    pub lambda: (f64, f64),
    pub learning_rate: (f64, f64),
    pub dropout: (f64, f64),
    pub l2: (f64, f64),
    pub batchnorm: Vec<bool>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            trunk_depth: (3, 5),
            head_depth: (3, 7),
            attention_depth: (1, 4),
            width: (2, 2048),
            lambda: (0.2, 0.8),
            learning_rate: (0.0005, 0.01),
            dropout: (0.0, 0.4),
            l2: (0.0, 0.1),
            batchnorm: vec![true, false],
        }
    }
}

impl SearchSpace {
    /// The same space with lambda widened to [0, 1].
    pub fn sweep_mode(self) -> Self {
        SearchSpace { lambda: (0.0, 1.0), ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (usize, usize), what: &str, min: usize| -> Result<()> {
            ensure!(a <= b && a >= min, Config, "{what} range [{a}, {b}] is invalid");
            Ok(())
        };
        ordered(self.trunk_depth, "trunk depth", 1)?;
        ordered(self.head_depth, "head depth", 1)?;
        ordered(self.attention_depth, "attention depth", 1)?;
        ordered(self.width, "width", 1)?;
        let unit = |(a, b): (f64, f64), what: &str, lo: f64, hi: f64| -> Result<()> {
            ensure!(a <= b && a >= lo && b <= hi, Config, "{what} range [{a}, {b}] is invalid");
            Ok(())
        };
        unit(self.lambda, "lambda", 0.0, 1.0)?;
        unit(self.learning_rate, "learning rate", f64::MIN_POSITIVE, f64::INFINITY)?;
        unit(self.dropout, "dropout", 0.0, 0.999)?;
        unit(self.l2, "l2", 0.0, f64::INFINITY)?;
        ensure!(!self.batchnorm.is_empty(), Config, "batchnorm choices are empty");
        Ok(())
    }
}

/// One point of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledConfig {
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.random_range(lo.ln()..=hi.ln())).exp().clamp(lo, hi)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn width(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    let w = log_uniform(rng, lo as f64, hi as f64 + 1.0).floor() as usize;
    w.clamp(lo, hi)
}

/// Draws a configuration; non-searched training fields come from `base`.
pub fn sample_config(space: &SearchSpace, base: &TrainConfig, rng: &mut Rng) -> SampledConfig {
    let trunk_depth = rng.random_range(space.trunk_depth.0..=space.trunk_depth.1);
    let head_depth = rng.random_range(space.head_depth.0..=space.head_depth.1);
    let attention_depth = rng.random_range(space.attention_depth.0..=space.attention_depth.1);
    let widths = |rng: &mut Rng, n: usize| (0..n).map(|_| width(rng, space.width)).collect::<Vec<_>>();
    let trunk_widths = widths(rng, trunk_depth);
    let head_hidden_widths = widths(rng, head_depth - 1);
    let attention_hidden_widths = widths(rng, attention_depth - 1);
    let lambda = uniform(rng, space.lambda.0, space.lambda.1);
    let learning_rate = log_uniform(rng, space.learning_rate.0, space.learning_rate.1);
    let dropout = uniform(rng, space.dropout.0, space.dropout.1);
    let l2 = uniform(rng, space.l2.0, space.l2.1);
    let batchnorm = space.batchnorm[rng.random_range(0..space.batchnorm.len())];
    let mut train = base.clone();
    train.lambda = lambda;
    train.learning_rate = learning_rate;
    train.optimizer.l2 = l2;
    SampledConfig {
        architecture: ArchitectureSpec { trunk_widths, head_hidden_widths, attention_hidden_widths, dropout, batchnorm },
        train,
    }
}

/// Training, validation and evaluation sets for a search.
#[derive(Debug, Clone)]
pub struct DataBundle {
    /// Soft concept labels and black-box scores.
    pub train: Dataset,
    pub valid: Dataset,
    /// Black-box scores, for fidelity.
    pub test: Dataset,
    /// Golden concept labels, for concept AUC.
    pub golden_test: Dataset,
}

impl DataBundle {
    /// Scores every set with `adapter`.
    pub fn scored(self, adapter: &dyn BlackBox) -> Result<Self> {
        Ok(DataBundle {
            train: attach_scores(adapter, self.train)?,
            valid: attach_scores(adapter, self.valid)?,
            test: attach_scores(adapter, self.test)?,
            golden_test: self.golden_test,
        })
    }

    pub fn concept_names(&self) -> &[String] {
        self.train.concept_names()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "message")]
pub enum TrialStatus {
    Completed,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: usize,
    pub seed: u64,
    pub variant: Variant,
    pub config: SampledConfig,
    pub status: TrialStatus,
    pub fidelity: Option<f64>,
    pub mean_auc: Option<f64>,
    pub history_digest: Option<String>,
}

/// Trains and evaluates one configuration.
pub fn run_trial(trial_id: usize, seed: u64, variant: Variant, mut config: SampledConfig, data: &DataBundle) -> Trial {
    config.train.seed = seed;
    config.train.variant = variant;
    let outcome = (|| -> Result<_> {
        let trained = train_surrogate(&config.architecture, data.concept_names(), &data.train, &data.valid, &config.train)?;
        let report = evaluate(&trained.model, variant, Some(&data.test), Some(&data.golden_test))?;
        Ok((report, trained.history.digest()))
    })();
    let (status, fidelity, mean_auc, history_digest) = match outcome {
        Ok((r, d)) => (TrialStatus::Completed, r.fidelity, r.mean_auc, Some(d)),
        Err(e) => (TrialStatus::Failed(e.to_string()), None, None, None),
    };
    Trial { trial_id, seed, variant, config, status, fidelity, mean_auc, history_digest }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub trials: Vec<Trial>,
    pub best_by_fidelity: Option<usize>,
    pub best_by_auc: Option<usize>,
    /// Pareto flag per trial over (fidelity, mean AUC); false for trials
    /// lacking either metric.
    pub on_frontier: Vec<bool>,
}

fn argmax(trials: &[Trial], key: impl Fn(&Trial) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, t) in trials.iter().enumerate() {
        if let Some(v) = key(t) {
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, i));
            }
        }
    }
    best.map(|(_, i)| i)
}

impl SweepReport {
    pub fn from_trials(trials: Vec<Trial>) -> Result<Self> {
        ensure!(!trials.is_empty(), Config, "no trials were run");
        if trials.iter().all(|t| t.status != TrialStatus::Completed) {
            let first = match &trials[0].status {
                TrialStatus::Failed(m) => m.clone(),
                TrialStatus::Completed => unreachable!(),
            };
            return Err(Error::Numeric(format!("all {} trials failed; first: {first}", trials.len())));
        }
        let scored: Vec<usize> =
            (0..trials.len()).filter(|&i| trials[i].fidelity.is_some() && trials[i].mean_auc.is_some()).collect();
        let points: Vec<(f64, f64)> = scored
            .iter()
            .map(|&i| (trials[i].fidelity.unwrap(), trials[i].mean_auc.unwrap()))
            .collect();
        let flags = pareto_frontier(&points);
        let mut on_frontier = vec![false; trials.len()];
        for (&i, f) in scored.iter().zip(flags) {
            on_frontier[i] = f;
        }
        Ok(SweepReport {
            best_by_fidelity: argmax(&trials, |t| t.fidelity),
            best_by_auc: argmax(&trials, |t| t.mean_auc),
            on_frontier,
            trials,
        })
    }

    pub fn to_csv(&self) -> String {
        let join = |w: &[usize]| w.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut s = String::from(
            "trial_id,seed,variant,status,lambda,trunk_depth,head_depth,attention_depth,trunk_widths,head_widths,attention_widths,lr,dropout,l2,bn,fidelity,mean_auc,on_frontier\n",
        );
        for (t, f) in self.trials.iter().zip(&self.on_frontier) {
            let a = &t.config.architecture;
            let status = match t.status {
                TrialStatus::Completed => "completed",
                TrialStatus::Failed(_) => "failed",
            };
            s.push_str(&format!(
                "{},{},{},{},{:?},{},{},{},{},{},{},{:?},{:?},{:?},{},{},{},{}\n",
                t.trial_id,
                t.seed,
                t.variant,
                status,
                t.config.train.lambda,
                a.trunk_widths.len(),
                a.head_hidden_widths.len() + 1,
                a.attention_hidden_widths.len() + 1,
                join(&a.trunk_widths),
                join(&a.head_hidden_widths),
                join(&a.attention_hidden_widths),
                t.config.train.learning_rate,
                a.dropout,
                t.config.train.optimizer.l2,
                a.batchnorm,
                opt(t.fidelity),
                opt(t.mean_auc),
                f
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn run_parallel(jobs: usize, work: Vec<(usize, u64, SampledConfig)>, variant: Variant, data: &DataBundle) -> Result<Vec<Trial>> {
    ensure!(jobs >= 1, Config, "jobs must be >= 1");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        work.into_par_iter()
            .map(|(id, seed, cfg)| run_trial(id, seed, variant, cfg, data))
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    pub n_trials: usize,
    pub master_seed: u64,
    pub variant: Variant,
    pub jobs: usize,
    /// Epochs, batch size, patience and optimizer for every trial.
    pub base: TrainConfig,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { n_trials: 50, master_seed: 0, variant: Variant::Default, jobs: 1, base: TrainConfig::default() }
    }
}

/// Configuration and seed of trial `idx`.
pub fn trial_config(space: &SearchSpace, opts: &SearchOptions, idx: usize) -> (u64, SampledConfig) {
    let seed = derive_seed(opts.master_seed, idx as u64);
    let cfg = sample_config(space, &opts.base, &mut rng_from_seed(derive_seed(seed, 0x5EA2C4)));
    (seed, cfg)
}

pub fn run_search(space: &SearchSpace, opts: &SearchOptions, data: &DataBundle) -> Result<SweepReport> {
    space.validate()?;
    opts.base.validate()?;
    ensure!(opts.n_trials >= 1, Config, "n_trials must be >= 1");
    let work = (0..opts.n_trials)
        .map(|i| {
            let (seed, cfg) = trial_config(space, opts, i);
            (i, seed, cfg)
        })
        .collect();
    SweepReport::from_trials(run_parallel(opts.jobs, work, opts.variant, data)?)
}

/// `n` lambdas drawn uniformly from [0, 1].
pub fn random_lambdas(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()
}

/// Evenly spaced grid over [0, 1] with `points` entries.
pub fn lambda_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

/// Trains the default variant of `base` at every lambda, `repeats` times
/// each. Repeat `r` uses the same seed at every lambda.
pub fn lambda_sweep(base: &SampledConfig, lambdas: &[f64], repeats: usize, master_seed: u64, jobs: usize, data: &DataBundle) -> Result<SweepReport> {
    ensure!(!lambdas.is_empty() && repeats >= 1, Config, "empty lambda sweep");
    for &l in lambdas {
        ensure!((0.0..=1.0).contains(&l), Config, "lambda {l} outside [0, 1]");
    }
    base.train.validate()?;
    let mut work = Vec::with_capacity(lambdas.len() * repeats);
    for (g, &l) in lambdas.iter().enumerate() {
        for r in 0..repeats {
            let mut cfg = base.clone();
            cfg.train.lambda = l;
            work.push((g * repeats + r, derive_seed(master_seed, r as u64), cfg));
        }
    }
    SweepReport::from_trials(run_parallel(jobs, work, Variant::Default, data)?)
}
