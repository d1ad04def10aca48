//! Multi-objective random hyperparameter search.
//!
//! Each trial samples a configuration, trains, and is scored on three
//! validation objectives: MAE (minimized), the spread-skill R² between binned
//! RMSE and total sd (maximized) and the PIT deviation skill on the total sd
//! (maximized). The output is the exact non-dominated set plus one
//! scalarized recommendation.

use std::io::{Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::evidential::{train_evidential, ArchSpec, TrainConfig, UncertaintyDecomposition};
use crate::metrics::{pit_values, pitd, spread_skill, DEFAULT_PIT_BINS, DEFAULT_SPREAD_BINS};

/// Paper-scale budget; tests use far fewer trials.
pub const DEFAULT_BUDGET: usize = 500;
pub const DEFAULT_SCALAR_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSpace {
    pub learning_rate: (f64, f64),
    pub dropout: (f64, f64),
    pub hidden_layers: (usize, usize),
    pub hidden_neurons: (usize, usize),
    pub batch_size: (usize, usize),
    pub lambda: (f64, f64),
    pub l1: (f64, f64),
    pub l2: (f64, f64),
}

impl Default for HyperSpace {
    fn default() -> Self {
        Self {
            learning_rate: (1e-6, 1e-2),
            dropout: (0.0, 0.5),
            hidden_layers: (1, 5),
            hidden_neurons: (1, 1000),
            batch_size: (10, 20000),
            lambda: (1e-5, 100.0),
            l1: (1e-12, 1e-2),
            l2: (1e-12, 1e-2),
        }
    }
}

impl HyperSpace {
    pub fn validate(&self) -> Result<()> {
        let pos = |(lo, hi): (f64, f64), name: &str| {
            if lo > 0.0 && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} bounds must satisfy 0 < lo <= hi")))
            }
        };
        pos(self.learning_rate, "learning rate")?;
        pos(self.lambda, "lambda")?;
        pos(self.l1, "l1")?;
        pos(self.l2, "l2")?;
        let (dlo, dhi) = self.dropout;
        if !(0.0 <= dlo && dlo <= dhi && dhi <= 0.5) {
            return Err(Error::Config("dropout bounds must lie in [0, 0.5]".into()));
        }
        for ((lo, hi), name) in [
            (self.hidden_layers, "hidden layers"),
            (self.hidden_neurons, "hidden neurons"),
            (self.batch_size, "batch size"),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} bounds must satisfy 1 <= lo <= hi")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, c: &HyperConfig) -> bool {
        let inf = |v: f64, (lo, hi): (f64, f64)| lo <= v && v <= hi;
        let inu = |v: usize, (lo, hi): (usize, usize)| lo <= v && v <= hi;
        inf(c.learning_rate, self.learning_rate)
            && inf(c.dropout, self.dropout)
            && inu(c.hidden_layers, self.hidden_layers)
            && inu(c.hidden_neurons, self.hidden_neurons)
            && inu(c.batch_size, self.batch_size)
            && inf(c.lambda, self.lambda)
            && inf(c.l1, self.l1)
            && inf(c.l2, self.l2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub hidden_layers: usize,
    pub hidden_neurons: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub l1: f64,
    pub l2: f64,
}

impl HyperConfig {
    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            hidden: vec![self.hidden_neurons; self.hidden_layers],
            dropout: self.dropout,
            l1: self.l1,
            l2: self.l2,
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    let v = rng.random_range(lo.ln()..=hi.ln()).exp();
    v.clamp(lo, hi)
}

fn log_uniform_int<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    if lo == hi {
        return lo;
    }
    // sample on [lo, hi + 1) in log space and floor, so every integer has mass
    let v = rng
        .random_range((lo as f64).ln()..((hi + 1) as f64).ln())
        .exp()
        .floor() as usize;
    v.clamp(lo, hi)
}

/// One independent draw per dimension.
pub fn sample<R: Rng + ?Sized>(space: &HyperSpace, rng: &mut R) -> HyperConfig {
    HyperConfig {
        learning_rate: log_uniform(rng, space.learning_rate),
        dropout: rng.random_range(space.dropout.0..=space.dropout.1),
        hidden_layers: rng.random_range(space.hidden_layers.0..=space.hidden_layers.1),
        hidden_neurons: rng.random_range(space.hidden_neurons.0..=space.hidden_neurons.1),
        batch_size: log_uniform_int(rng, space.batch_size),
        lambda: log_uniform(rng, space.lambda),
        l1: log_uniform(rng, space.l1),
        l2: log_uniform(rng, space.l2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub val_mae: f64,
    pub val_r2_rmse_sigma_total: f64,
    pub val_pitd_skill: f64,
}

impl Objectives {
    /// `self` is no worse in every objective and strictly better in one.
    pub fn dominates(&self, o: &Objectives) -> bool {
        let no_worse = self.val_mae <= o.val_mae
            && self.val_r2_rmse_sigma_total >= o.val_r2_rmse_sigma_total
            && self.val_pitd_skill >= o.val_pitd_skill;
        let better = self.val_mae < o.val_mae
            || self.val_r2_rmse_sigma_total > o.val_r2_rmse_sigma_total
            || self.val_pitd_skill > o.val_pitd_skill;
        no_worse && better
    }

    pub fn scalarized(&self, weight: f64) -> f64 {
        self.val_mae - weight * (self.val_r2_rmse_sigma_total + self.val_pitd_skill)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutput {
    pub objectives: Objectives,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrialStatus {
    Complete { objectives: Objectives },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub id: usize,
    pub config: HyperConfig,
    pub status: TrialStatus,
    pub epochs: usize,
    pub wall_secs: f64,
}

impl TrialResult {
    pub fn objectives(&self) -> Option<&Objectives> {
        match &self.status {
            TrialStatus::Complete { objectives } => Some(objectives),
            TrialStatus::Failed { .. } => None,
        }
    }
}

/// Indices of the non-dominated entries. Candidates are visited in order of
/// increasing MAE so each one only has to be checked against the front
/// accumulated so far.
pub fn pareto_front(objs: &[Objectives]) -> Vec<usize> {
    // numeric order, so that -0.0 and 0.0 tie as they do in `dominates`
    let cmp = |a: f64, b: f64| a.partial_cmp(&b).unwrap_or_else(|| a.total_cmp(&b));
    let mut order: Vec<usize> = (0..objs.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&objs[a], &objs[b]);
        cmp(x.val_mae, y.val_mae)
            .then(cmp(y.val_r2_rmse_sigma_total, x.val_r2_rmse_sigma_total))
            .then(cmp(y.val_pitd_skill, x.val_pitd_skill))
            .then(a.cmp(&b))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        // anything that could dominate i sorts before it
        if !front.iter().any(|&f| objs[f].dominates(&objs[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub trials: Vec<TrialResult>,
    /// Trial ids on the Pareto front, ascending.
    pub pareto: Vec<usize>,
    pub recommended: usize,
    pub scalar_weight: f64,
}

impl SearchReport {
    pub fn trial(&self, id: usize) -> Option<&TrialResult> {
        self.trials.iter().find(|t| t.id == id)
    }
}

/// Per-trial RNG: the master seed with the trial index as stream.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Runs trials `0..budget`, reusing any already present in `previous`.
/// `objective` gets the sampled config and a per-trial training seed.
pub fn search<F>(
    space: &HyperSpace,
    budget: usize,
    seed: u64,
    scalar_weight: f64,
    previous: &[TrialResult],
    objective: F,
) -> Result<SearchReport>
where
    F: Fn(&HyperConfig, u64) -> Result<TrialOutput> + Sync,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::usage("search budget must be >= 1"));
    }
    let pending: Vec<usize> = (0..budget)
        .filter(|i| !previous.iter().any(|t| t.id == *i))
        .collect();
    let fresh: Vec<TrialResult> = pending
        .par_iter()
        .map(|&id| {
            let mut rng = trial_rng(seed, id);
            let config = sample(space, &mut rng);
            let train_seed: u64 = rng.random();
            let start = Instant::now();
            let outcome = objective(&config, train_seed);
            let wall_secs = start.elapsed().as_secs_f64();
            let (status, epochs) = match outcome {
                Ok(out) => {
                    let o = out.objectives;
                    if [o.val_mae, o.val_r2_rmse_sigma_total, o.val_pitd_skill]
                        .iter()
                        .all(|v| v.is_finite())
                    {
                        (TrialStatus::Complete { objectives: o }, out.epochs)
                    } else {
                        (
                            TrialStatus::Failed {
                                reason: "non-finite objective".into(),
                            },
                            out.epochs,
                        )
                    }
                }
                Err(e) => (
                    TrialStatus::Failed {
                        reason: e.to_string(),
                    },
                    0,
                ),
            };
            TrialResult {
                id,
                config,
                status,
                epochs,
                wall_secs,
            }
        })
        .collect();

    let mut trials: Vec<TrialResult> = previous
        .iter()
        .filter(|t| t.id < budget)
        .cloned()
        .chain(fresh)
        .collect();
    trials.sort_by_key(|t| t.id);
    summarize(trials, scalar_weight)
}

/// Pareto set and recommendation over finished trials.
pub fn summarize(trials: Vec<TrialResult>, scalar_weight: f64) -> Result<SearchReport> {
    let done: Vec<(usize, Objectives)> = trials
        .iter()
        .filter_map(|t| t.objectives().map(|o| (t.id, *o)))
        .collect();
    if done.is_empty() {
        return Err(Error::SearchFailed(trials.len()));
    }
    let objs: Vec<Objectives> = done.iter().map(|d| d.1).collect();
    let pareto: Vec<usize> = pareto_front(&objs).into_iter().map(|i| done[i].0).collect();
    let recommended = done
        .iter()
        .min_by(|a, b| {
            a.1.scalarized(scalar_weight)
                .total_cmp(&b.1.scalarized(scalar_weight))
                .then(a.0.cmp(&b.0))
        })
        .map(|d| d.0)
        .expect("nonempty");
    Ok(SearchReport {
        trials,
        pareto,
        recommended,
        scalar_weight,
    })
}

/// Validation objectives of a set of predictions.
pub fn score_predictions(dec: &[UncertaintyDecomposition], obs: &[f64]) -> Result<Objectives> {
    let mean: Vec<f64> = dec.iter().map(|d| d.mean).collect();
    let sd: Vec<f64> = dec.iter().map(UncertaintyDecomposition::total_sd).collect();
    let n = obs.len() as f64;
    let val_mae = mean.iter().zip(obs).map(|(p, o)| (p - o).abs()).sum::<f64>() / n;
    let resid: Vec<f64> = mean.iter().zip(obs).map(|(p, o)| p - o).collect();
    let r2 = spread_skill(&sd, &resid, DEFAULT_SPREAD_BINS)?
        .r2
        .ok_or_else(|| Error::domain("spread-skill R² undefined"))?;
    let skill = pitd(&pit_values(&mean, &sd, obs)?, DEFAULT_PIT_BINS)?.skill;
    Ok(Objectives {
        val_mae,
        val_r2_rmse_sigma_total: r2,
        val_pitd_skill: skill,
    })
}

/// Training objective for [`search`]: trains an evidential model with the
/// trial's configuration and scores it on `val`.
pub fn evidential_objective<'a>(
    train: &'a Samples,
    val: &'a Samples,
    max_epochs: usize,
    patience: usize,
) -> impl Fn(&HyperConfig, u64) -> Result<TrialOutput> + Sync + 'a {
    move |cfg: &HyperConfig, seed: u64| {
        let tc = TrainConfig {
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            max_epochs,
            patience,
            lambda: cfg.lambda,
            seed,
        };
        let out = train_evidential(train, val, &cfg.arch(), &tc)?;
        let dec = out.model.predict(val.features.view())?;
        Ok(TrialOutput {
            objectives: score_predictions(&dec, val.targets.as_slice().expect("contiguous"))?,
            epochs: out.log.len(),
        })
    }
}

pub const TRIAL_LOG_HEADER: [&str; 15] = [
    "trial_id",
    "learning_rate",
    "dropout",
    "hidden_layers",
    "hidden_neurons",
    "batch_size",
    "lambda",
    "l1",
    "l2",
    "val_mae",
    "val_r2_rmse_sigma_total",
    "val_pitd_skill",
    "epochs",
    "wall_secs",
    "status",
];

fn trial_row(t: &TrialResult) -> Vec<String> {
    let c = &t.config;
    let (mae, r2, pitd, status) = match &t.status {
        TrialStatus::Complete { objectives: o } => (
            o.val_mae.to_string(),
            o.val_r2_rmse_sigma_total.to_string(),
            o.val_pitd_skill.to_string(),
            "complete".to_string(),
        ),
        TrialStatus::Failed { reason } => (
            String::new(),
            String::new(),
            String::new(),
            format!("failed: {}", reason.replace(['\n', '\r'], " ")),
        ),
    };
    vec![
        t.id.to_string(),
        c.learning_rate.to_string(),
        c.dropout.to_string(),
        c.hidden_layers.to_string(),
        c.hidden_neurons.to_string(),
        c.batch_size.to_string(),
        c.lambda.to_string(),
        c.l1.to_string(),
        c.l2.to_string(),
        mae,
        r2,
        pitd,
        t.epochs.to_string(),
        t.wall_secs.to_string(),
        status,
    ]
}

/// Appends trials; writes the header first when `write_header` is set.
pub fn write_trial_log<W: Write>(writer: W, trials: &[TrialResult], write_header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if write_header {
        w.write_record(TRIAL_LOG_HEADER)?;
    }
    for t in trials {
        w.write_record(trial_row(t))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trial_log<R: Read>(reader: R) -> Result<Vec<TrialResult>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != TRIAL_LOG_HEADER {
        return Err(Error::usage("trial log header does not match the expected columns"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |k: usize| Error::usage(format!("trial log line {line}: bad {}", TRIAL_LOG_HEADER[k]));
        let f = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(k));
        let u = |k: usize| rec[k].parse::<usize>().map_err(|_| bad(k));
        let config = HyperConfig {
            learning_rate: f(1)?,
            dropout: f(2)?,
            hidden_layers: u(3)?,
            hidden_neurons: u(4)?,
            batch_size: u(5)?,
            lambda: f(6)?,
            l1: f(7)?,
            l2: f(8)?,
        };
        let status = if &rec[14] == "complete" {
            TrialStatus::Complete {
                objectives: Objectives {
                    val_mae: f(9)?,
                    val_r2_rmse_sigma_total: f(10)?,
                    val_pitd_skill: f(11)?,
                },
            }
        } else {
            TrialStatus::Failed {
                reason: rec[14].trim_start_matches("failed: ").to_string(),
            }
        };
        out.push(TrialResult {
            id: u(0)?,
            config,
            status,
            epochs: u(12)?,
            wall_secs: f(13)?,
        });
    }
    Ok(out)
}
