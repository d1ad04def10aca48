//! Permutation feature importance and partial dependence for both the
//! predicted gust and its total uncertainty.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{predict_standardized, EvidentialModel, UncertaintyDecomposition};
use crate::metrics::{rmse, spread_skill, DEFAULT_SPREAD_BINS};
use crate::nncore::Mlp;

pub const DEFAULT_SHUFFLES: usize = 10;
pub const DEFAULT_PDP_POINTS: usize = 100;

/// Anything that maps a feature matrix to per-row uncertainty decompositions.
pub trait UqPredictor: Sync {
    fn predict_uq(&self, features: ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>>;
}

/// Consumes already standardized features.
impl UqPredictor for Mlp {
    fn predict_uq(&self, features: ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>> {
        predict_standardized(self, features)
    }
}

/// Consumes raw features.
impl UqPredictor for EvidentialModel {
    fn predict_uq(&self, features: ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>> {
        self.predict(features)
    }
}

impl<F> UqPredictor for F
where
    F: Fn(ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>> + Sync,
{
    fn predict_uq(&self, features: ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>> {
        self(features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShuffleMode {
    Random,
    /// Leaves every column in place; baseline checks only.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfiOptions {
    pub n_shuffles: usize,
    pub seed: u64,
    pub spread_bins: usize,
    pub mode: ShuffleMode,
}

impl Default for PfiOptions {
    fn default() -> Self {
        Self {
            n_shuffles: DEFAULT_SHUFFLES,
            seed: 0,
            spread_bins: DEFAULT_SPREAD_BINS,
            mode: ShuffleMode::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuffleScore {
    pub rmse: f64,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    /// Mean of `RMSE_shuffled − RMSE_baseline`; positive means the feature matters.
    pub rmse_delta_mean: f64,
    pub rmse_delta_sd: f64,
    /// Mean of `R²_baseline − R²_shuffled` (signed; a positive value is a loss
    /// of calibration). `None` if any R² was undefined.
    pub r2_delta_mean: Option<f64>,
    pub r2_delta_sd: Option<f64>,
    pub shuffles: Vec<ShuffleScore>,
    /// The column was constant, so shuffling could not change it.
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfiResult {
    pub baseline: ShuffleScore,
    pub n_shuffles: usize,
    pub features: Vec<FeatureImportance>,
}

impl PfiResult {
    pub fn get(&self, feature: &str) -> Option<&FeatureImportance> {
        self.features.iter().find(|f| f.feature == feature)
    }

    /// Feature names sorted by decreasing mean RMSE increase.
    pub fn ranking(&self) -> Vec<&str> {
        let mut v: Vec<&FeatureImportance> = self.features.iter().collect();
        v.sort_by(|a, b| b.rmse_delta_mean.total_cmp(&a.rmse_delta_mean));
        v.into_iter().map(|f| f.feature.as_str()).collect()
    }
}

fn score<P: UqPredictor + ?Sized>(model: &P, x: ArrayView2<f64>, y: &[f64], bins: usize) -> Result<ShuffleScore> {
    let dec = model.predict_uq(x)?;
    let mean: Vec<f64> = dec.iter().map(|d| d.mean).collect();
    let sd: Vec<f64> = dec.iter().map(UncertaintyDecomposition::total_sd).collect();
    let resid: Vec<f64> = mean.iter().zip(y).map(|(p, o)| p - o).collect();
    Ok(ShuffleScore {
        rmse: rmse(&mean, y)?,
        r2: spread_skill(&sd, &resid, bins)?.r2,
    })
}

/// Stable 64-bit FNV-1a, used to give each feature its own RNG stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Shuffles one column at a time and reports the change in RMSE and in the
/// spread-skill R² relative to the unshuffled baseline. Each feature draws its
/// permutations from a stream keyed by its name, so results do not depend on
/// column order.
pub fn permutation_importance<P: UqPredictor + ?Sized>(
    model: &P,
    features: ArrayView2<f64>,
    targets: &[f64],
    names: &[String],
    opts: &PfiOptions,
) -> Result<PfiResult> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::usage("permutation importance needs at least 2 rows"));
    }
    if targets.len() != n {
        return Err(Error::Dimension {
            context: "pfi targets",
            expected: n,
            found: targets.len(),
        });
    }
    if names.len() != features.ncols() {
        return Err(Error::Dimension {
            context: "pfi feature names",
            expected: features.ncols(),
            found: names.len(),
        });
    }
    if opts.n_shuffles == 0 {
        return Err(Error::usage("at least one shuffle is required"));
    }
    let baseline = score(model, features, targets, opts.spread_bins)?;

    let per_feature: Vec<Result<FeatureImportance>> = (0..features.ncols())
        .into_par_iter()
        .map(|j| {
            let col = features.column(j);
            let constant = col.iter().all(|&v| v == col[0]);
            if constant {
                log::info!("feature {} is constant; permutation is a no-op", names[j]);
                let s = vec![baseline; opts.n_shuffles];
                return Ok(FeatureImportance {
                    feature: names[j].clone(),
                    rmse_delta_mean: 0.0,
                    rmse_delta_sd: 0.0,
                    r2_delta_mean: baseline.r2.map(|_| 0.0),
                    r2_delta_sd: baseline.r2.map(|_| 0.0),
                    shuffles: s,
                    constant: true,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(fnv1a(&names[j]));
            let mut work: Array2<f64> = features.to_owned();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut shuffles = Vec::with_capacity(opts.n_shuffles);
            for _ in 0..opts.n_shuffles {
                perm.iter_mut().enumerate().for_each(|(i, p)| *p = i);
                if opts.mode == ShuffleMode::Random {
                    perm.shuffle(&mut rng);
                }
                for (dst, &src) in perm.iter().enumerate() {
                    work[[dst, j]] = col[src];
                }
                shuffles.push(score(model, work.view(), targets, opts.spread_bins)?);
            }
            let drmse: Vec<f64> = shuffles.iter().map(|s| s.rmse - baseline.rmse).collect();
            let (rmse_delta_mean, rmse_delta_sd) = mean_sd(&drmse);
            let dr2: Option<Vec<f64>> = shuffles
                .iter()
                .map(|s| Some(baseline.r2? - s.r2?))
                .collect();
            let (r2_delta_mean, r2_delta_sd) = match dr2 {
                Some(v) => {
                    let (m, s) = mean_sd(&v);
                    (Some(m), Some(s))
                }
                None => (None, None),
            };
            Ok(FeatureImportance {
                feature: names[j].clone(),
                rmse_delta_mean,
                rmse_delta_sd,
                r2_delta_mean,
                r2_delta_sd,
                shuffles,
                constant: false,
            })
        })
        .collect();

    Ok(PfiResult {
        baseline,
        n_shuffles: opts.n_shuffles,
        features: per_feature.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdpPoint {
    pub value: f64,
    pub mean_prediction: f64,
    pub sd_prediction: f64,
    pub mean_total_sd: f64,
    pub sd_total_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpCurve {
    pub feature: String,
    pub points: Vec<PdpPoint>,
}

/// `n` equally spaced values from `lo` to `hi` inclusive.
pub fn pdp_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || lo == hi {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    let mut g: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
    g[n - 1] = hi;
    g
}

/// Sweeps column `feature` over its observed range. At each grid value the
/// whole column is overwritten, every row is predicted, and the mean and sd
/// across rows are recorded for the prediction and for the total sd.
pub fn partial_dependence<P: UqPredictor + ?Sized>(
    model: &P,
    features: ArrayView2<f64>,
    feature: usize,
    name: &str,
    n_grid: usize,
) -> Result<PdpCurve> {
    if features.nrows() == 0 {
        return Err(Error::usage("partial dependence needs a nonempty dataset"));
    }
    if feature >= features.ncols() {
        return Err(Error::usage(format!(
            "feature index {feature} out of range for {} columns",
            features.ncols()
        )));
    }
    let col = features.column(feature);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        log::warn!("feature {name} has zero range; single-point partial dependence");
    }
    let grid = pdp_grid(lo, hi, n_grid);
    let mut work = features.to_owned();
    let points = grid
        .into_iter()
        .map(|v| {
            work.index_axis_mut(Axis(1), feature).fill(v);
            let dec = model.predict_uq(work.view())?;
            let means: Vec<f64> = dec.iter().map(|d| d.mean).collect();
            let sds: Vec<f64> = dec.iter().map(UncertaintyDecomposition::total_sd).collect();
            let (mean_prediction, sd_prediction) = mean_sd(&means);
            let (mean_total_sd, sd_total_sd) = mean_sd(&sds);
            Ok(PdpPoint {
                value: v,
                mean_prediction,
                sd_prediction,
                mean_total_sd,
                sd_total_sd,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PdpCurve {
        feature: name.to_string(),
        points,
    })
}

/// Partial dependence for every column, in parallel across features.
pub fn partial_dependence_all<P: UqPredictor + ?Sized>(
    model: &P,
    features: ArrayView2<f64>,
    names: &[String],
    n_grid: usize,
) -> Result<Vec<PdpCurve>> {
    (0..features.ncols())
        .into_par_iter()
        .map(|j| partial_dependence(model, features, j, &names[j], n_grid))
        .collect()
}
