//! Random hyperparameter search with paired baseline/AttZoom arms.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{Model, ModelSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, SchedulerKind};
use crate::train::{train, TrainConfig, TrainLog, BATCH_SIZES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub batch_sizes: Vec<usize>,
    /// Log-uniform bounds.
    pub learning_rate: (f64, f64),
    /// Log-uniform bounds.
    pub weight_decay: (f64, f64),
    /// Uniform on `[lo, hi)`.
    pub momentum: (f64, f64),
    /// Uniform integer on `[lo, hi]`.
    pub step_size: (usize, usize),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            batch_sizes: BATCH_SIZES.to_vec(),
            learning_rate: (1e-5, 1e-1),
            weight_decay: (1e-6, 1e-2),
            momentum: (0.7, 1.0),
            step_size: (10, 30),
        }
    }
}

fn log_range(field: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::config(
            field,
            format!("need 0 < lo <= hi, got ({lo}, {hi})"),
        ));
    }
    Ok(())
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() || self.batch_sizes.iter().any(|b| !BATCH_SIZES.contains(b))
        {
            return Err(Error::config(
                "search.space.batch_sizes",
                format!("must be a non-empty subset of {BATCH_SIZES:?}"),
            ));
        }
        log_range("search.space.learning_rate", self.learning_rate)?;
        log_range("search.space.weight_decay", self.weight_decay)?;
        let (mlo, mhi) = self.momentum;
        if !(0.7 <= mlo && mlo < mhi && mhi <= 1.0) {
            return Err(Error::config(
                "search.space.momentum",
                "need 0.7 <= lo < hi <= 1",
            ));
        }
        let (slo, shi) = self.step_size;
        if slo == 0 || slo > shi {
            return Err(Error::config(
                "search.space.step_size",
                "need 1 <= lo <= hi",
            ));
        }
        Ok(())
    }
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trial: usize,
    /// Seeds model init, data order and augmentation for this trial.
    pub seed: u64,
    pub train: TrainConfig,
}

/// Draws trial `index` of the search seeded by `search_seed`. Fields outside
/// the search space (epochs, patience, augmentation) come from `base`.
pub fn sample(
    space: &SearchSpace,
    base: &TrainConfig,
    search_seed: u64,
    index: usize,
) -> TrialConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(search_seed);
    rng.set_stream(index as u64);
    let batch_size = space.batch_sizes[rng.gen_range(0..space.batch_sizes.len())];
    let learning_rate = log_uniform(&mut rng, space.learning_rate);
    let weight_decay = log_uniform(&mut rng, space.weight_decay);
    let optimizer = if rng.gen_bool(0.5) {
        OptimizerKind::Adam
    } else {
        OptimizerKind::Sgd {
            momentum: rng.gen_range(space.momentum.0..space.momentum.1),
        }
    };
    let scheduler = match rng.gen_range(0..4) {
        0 => SchedulerKind::Cosine,
        1 => SchedulerKind::Step {
            step_size: rng.gen_range(space.step_size.0..=space.step_size.1),
        },
        2 => SchedulerKind::ReduceOnPlateau,
        _ => SchedulerKind::OneCycle,
    };
    let seed = rng.gen();
    TrialConfig {
        trial: index,
        seed,
        train: TrainConfig {
            batch_size,
            learning_rate,
            weight_decay,
            optimizer,
            scheduler,
            seed,
            ..base.clone()
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOptions {
    pub n_trials: usize,
    pub search_seed: u64,
    /// Arms share trial hyperparameters; otherwise each arm draws its own.
    pub paired: bool,
    /// Concurrent trials; 0 uses the global thread pool.
    pub jobs: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            n_trials: 30,
            search_seed: 0,
            paired: true,
            jobs: 0,
        }
    }
}

/// A named model to search over.
#[derive(Debug, Clone)]
pub struct SearchArm {
    pub name: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub arm: String,
    pub config: TrialConfig,
    pub top1: f64,
    pub top5: f64,
    pub epochs_ran: usize,
    /// `max_epochs`, `early_stopped` or `diverged`.
    pub stop_reason: String,
    #[serde(skip)]
    pub log: Option<TrainLog>,
}

#[derive(Debug, Clone, Serialize)]
struct LeaderboardRow<'a> {
    trial: usize,
    arm: &'a str,
    batch: usize,
    lr: f64,
    wd: f64,
    optimizer: &'static str,
    momentum: Option<f64>,
    scheduler: &'static str,
    step_size: Option<usize>,
    top1: f64,
    top5: f64,
    epochs_ran: usize,
    stop_reason: &'a str,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Sorted by top-1 descending, then trial index, then arm name.
    pub leaderboard: Vec<TrialResult>,
}

impl SearchOutcome {
    pub fn arm(&self, name: &str) -> impl Iterator<Item = &TrialResult> + '_ {
        let name = name.to_string();
        self.leaderboard.iter().filter(move |r| r.arm == name)
    }

    /// Best completed trial of an arm.
    pub fn best(&self, arm: &str) -> Option<&TrialResult> {
        self.arm(arm).next()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.leaderboard {
            let t = &r.config.train;
            w.serialize(LeaderboardRow {
                trial: r.config.trial,
                arm: &r.arm,
                batch: t.batch_size,
                lr: t.learning_rate,
                wd: t.weight_decay,
                optimizer: t.optimizer.name(),
                momentum: t.optimizer.momentum(),
                scheduler: t.scheduler.name(),
                step_size: match t.scheduler {
                    SchedulerKind::Step { step_size } => Some(step_size),
                    _ => None,
                },
                top1: r.top1,
                top5: r.top5,
                epochs_ran: r.epochs_ran,
                stop_reason: &r.stop_reason,
            })
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

fn run_trial(
    arm: &SearchArm,
    trial: TrialConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<TrialResult> {
    let spec = arm.spec.clone().with_seed(trial.seed);
    let mut model = Model::<f64>::build(&spec)?;
    let (top1, top5, epochs_ran, stop_reason, log) =
        match train(&mut model, train_ds, val_ds, &trial.train) {
            Ok(log) => {
                let best = log.best();
                (
                    best.val_top1,
                    best.val_top5,
                    log.epochs.len(),
                    log.stop_reason.as_str().to_string(),
                    Some(log),
                )
            }
            Err(Error::Divergence { epoch }) => {
                log::warn!(
                    "trial {} ({}) diverged at epoch {epoch}",
                    trial.trial,
                    arm.name
                );
                (0.0, 0.0, epoch, "diverged".to_string(), None)
            }
            Err(e) => return Err(e),
        };
    Ok(TrialResult {
        arm: arm.name.clone(),
        config: trial,
        top1,
        top5,
        epochs_ran,
        stop_reason,
        log,
    })
}

/// Runs `n_trials` sampled configurations for every arm. In paired mode all
/// arms see identical trial configurations (including the init seed).
/// Diverged trials are kept with zero accuracy.
pub fn run_search(
    arms: &[SearchArm],
    train_ds: &Dataset,
    val_ds: &Dataset,
    space: &SearchSpace,
    base: &TrainConfig,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    space.validate()?;
    base.validate()?;
    if arms.is_empty() {
        return Err(Error::config("search.arms", "at least one arm is required"));
    }
    let jobs: Vec<(usize, usize)> = (0..opts.n_trials)
        .flat_map(|t| (0..arms.len()).map(move |a| (t, a)))
        .collect();
    let work = |&(t, a): &(usize, usize)| {
        let seed = if opts.paired {
            opts.search_seed
        } else {
            opts.search_seed
                .wrapping_add((a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        };
        run_trial(&arms[a], sample(space, base, seed, t), train_ds, val_ds)
    };
    let results: Vec<Result<TrialResult>> = if opts.jobs == 1 {
        jobs.iter().map(work).collect()
    } else if opts.jobs == 0 {
        jobs.par_iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))?;
        pool.install(|| jobs.par_iter().map(work).collect())
    };
    let mut leaderboard = results.into_iter().collect::<Result<Vec<_>>>()?;
    leaderboard.sort_by(|x, y| {
        y.top1
            .total_cmp(&x.top1)
            .then(x.config.trial.cmp(&y.config.trial))
            .then(x.arm.cmp(&y.arm))
    });
    Ok(SearchOutcome { leaderboard })
}
