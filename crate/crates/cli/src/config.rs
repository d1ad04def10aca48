use std::path::{Path, PathBuf};

use clap::{ArgAction, Args};
use serde::Deserialize;

use evgust::data::SplitCounts;
use evgust::evidential::{ArchSpec, TrainConfig};
use evgust::metrics::{self, EvalOptions, NAMED_LEVELS};
use evgust::{xai, Error, Result};

/// Every tunable of a run. Parsed from flags and from the TOML config file
/// with the same field names; flags win over the file, the file over defaults.
#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Input dataset (station or grid CSV)
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Model artifact (written by train, read by the others)
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Predictions file for evaluate and spatial
    #[arg(long, global = true)]
    pub predictions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Confidence levels, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Percentile of total sd above which predictions are flagged
    #[arg(long, global = true)]
    pub mask_percentile: Option<f64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[arg(long, global = true)]
    pub train_storms: Option<usize>,
    #[arg(long, global = true)]
    pub val_storms: Option<usize>,
    #[arg(long, global = true)]
    pub test_storms: Option<usize>,
    /// Subset of the model features to train on, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub features: Option<Vec<String>>,

    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub max_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    /// Evidential regularizer weight
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Hidden layer widths, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true)]
    pub l1: Option<f64>,
    #[arg(long, global = true)]
    pub l2: Option<f64>,

    /// Leave flagged predictions out of PICP
    #[arg(long, global = true, action = ArgAction::Set)]
    pub exclude_flagged: Option<bool>,
    #[arg(long, global = true)]
    pub pit_bins: Option<usize>,
    #[arg(long, global = true)]
    pub spread_bins: Option<usize>,
    /// Number of points on the discard-fraction curve
    #[arg(long, global = true)]
    pub discard_points: Option<usize>,

    /// Permutations per feature
    #[arg(long, global = true)]
    pub shuffles: Option<usize>,
    #[arg(long, global = true)]
    pub pdp_points: Option<usize>,

    /// Cell radius for the spatial-max alignment
    #[arg(long, global = true)]
    pub align_k: Option<usize>,

    /// Random-search budget
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    #[arg(long, global = true)]
    pub scalar_weight: Option<f64>,
}

macro_rules! overlay {
    ($top:ident, $base:ident; $($f:ident),* $(,)?) => {
        Settings { $($f: $top.$f.or($base.$f)),* }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            let msg = e.to_string().replace('\n', " ");
            Error::Config(format!("{}: {}", path.display(), msg.trim()))
        })
    }

    /// Fields set in `self` win; the rest come from `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(self, base;
            data, model, out, predictions, seed, levels, mask_percentile, threads,
            train_storms, val_storms, test_storms, features,
            learning_rate, batch_size, max_epochs, patience, lambda, hidden, dropout, l1, l2,
            exclude_flagged, pit_bins, spread_bins, discard_points,
            shuffles, pdp_points, align_k, trials, scalar_weight,
        )
    }

    pub fn input(&self, which: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| Error::usage(format!("--{which} is required")))?;
        if !p.is_file() {
            return Err(Error::usage(format!("{which} file not found: {}", p.display())));
        }
        Ok(p)
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        self.input("data", &self.data)
    }

    pub fn model_path(&self) -> Result<PathBuf> {
        self.input("model", &self.model)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::usage(format!("cannot create output dir {}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn levels(&self) -> Result<Vec<f64>> {
        let levels = self
            .levels
            .clone()
            .unwrap_or_else(|| NAMED_LEVELS.iter().map(|(l, _)| *l).collect());
        if levels.is_empty() {
            return Err(Error::usage("--levels must list at least one level"));
        }
        for &l in &levels {
            metrics::z_score(l)?;
        }
        Ok(levels)
    }

    pub fn mask_percentile(&self) -> Result<f64> {
        let q = self.mask_percentile.unwrap_or(metrics::DEFAULT_MASK_PERCENTILE);
        if !(q > 0.0 && q < 100.0) {
            return Err(Error::usage(format!("--mask-percentile must lie in (0, 100), got {q}")));
        }
        Ok(q)
    }

    /// Explicit counts if any is given, otherwise roughly 70/15/15 by storms.
    pub fn split_counts(&self, n_storms: usize) -> Result<SplitCounts> {
        match (self.train_storms, self.val_storms, self.test_storms) {
            (None, None, None) => {
                let test = (n_storms as f64 * 0.15).round() as usize;
                let validation = ((n_storms as f64 * 0.15).round() as usize).max(1);
                if n_storms < validation + test + 1 {
                    return Err(Error::usage(format!(
                        "{n_storms} storm(s) is too few for a train/validation split"
                    )));
                }
                Ok(SplitCounts {
                    train: n_storms - validation - test,
                    validation,
                    test,
                })
            }
            (Some(train), Some(validation), test) => Ok(SplitCounts {
                train,
                validation,
                test: test.unwrap_or(n_storms.saturating_sub(train + validation)),
            }),
            _ => Err(Error::usage(
                "give --train-storms and --val-storms together (--test-storms optional)",
            )),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            lambda: self.lambda.unwrap_or(d.lambda),
            seed: self.seed(),
        }
    }

    pub fn arch(&self) -> ArchSpec {
        let d = ArchSpec::default();
        ArchSpec {
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            dropout: self.dropout.unwrap_or(d.dropout),
            l1: self.l1.unwrap_or(d.l1),
            l2: self.l2.unwrap_or(d.l2),
        }
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let d = EvalOptions::default();
        Ok(EvalOptions {
            levels: self.levels()?,
            pit_bins: self.pit_bins.unwrap_or(d.pit_bins),
            spread_bins: self.spread_bins.unwrap_or(d.spread_bins),
            discard_fractions: self
                .discard_points
                .map(metrics::default_fractions)
                .unwrap_or(d.discard_fractions),
            exclude_flagged: self.exclude_flagged.unwrap_or(d.exclude_flagged),
        })
    }

    pub fn shuffles(&self) -> usize {
        self.shuffles.unwrap_or(xai::DEFAULT_SHUFFLES)
    }

    pub fn pdp_points(&self) -> usize {
        self.pdp_points.unwrap_or(xai::DEFAULT_PDP_POINTS)
    }
}
