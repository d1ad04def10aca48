//! Error scores, prediction intervals and uncertainty calibration metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::evidential::UncertaintyDecomposition;
use crate::error::{Error, Result};

/// Confidence levels with fixed, table-rounded z-scores.
pub const NAMED_LEVELS: [(f64, f64); 4] = [(0.70, 1.04), (0.90, 1.65), (0.95, 1.96), (0.99, 2.58)];

pub const DEFAULT_PIT_BINS: usize = 10;
pub const DEFAULT_SPREAD_BINS: usize = 20;
pub const DEFAULT_MASK_PERCENTILE: f64 = 95.0;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided z-score for a central interval at `level`. The four named
/// levels use their rounded table values; any other level uses Φ⁻¹.
pub fn z_score(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::usage(format!("confidence level {level} outside (0, 1)")));
    }
    if let Some(&(_, z)) = NAMED_LEVELS.iter().find(|(l, _)| (l - level).abs() < 1e-9) {
        return Ok(z);
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub level: f64,
    pub z: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `μ ± z·σ`.
pub fn prediction_interval(mean: f64, sd: f64, level: f64) -> Result<PredictionInterval> {
    if !(sd >= 0.0) {
        return Err(Error::domain(format!("standard deviation {sd} must be >= 0")));
    }
    let z = z_score(level)?;
    let half = z * sd;
    Ok(PredictionInterval {
        level,
        z,
        lower: mean - half,
        upper: mean + half,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    Aleatoric,
    Epistemic,
    Total,
}

impl UncertaintyKind {
    pub const ALL: [UncertaintyKind; 3] = [Self::Aleatoric, Self::Epistemic, Self::Total];

    pub fn name(self) -> &'static str {
        match self {
            Self::Aleatoric => "aleatoric",
            Self::Epistemic => "epistemic",
            Self::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionWithUQ {
    pub mean: f64,
    pub aleatoric_sd: f64,
    pub epistemic_sd: f64,
    pub total_sd: f64,
    /// One interval per requested confidence level, built from `total_sd`.
    pub intervals: Vec<PredictionInterval>,
    pub flagged: bool,
}

impl PredictionWithUQ {
    pub fn from_decomposition(d: &UncertaintyDecomposition, levels: &[f64]) -> Result<Self> {
        Self::new(d.mean, d.aleatoric_sd(), d.epistemic_sd(), d.total_sd(), levels)
    }

    pub fn new(mean: f64, aleatoric_sd: f64, epistemic_sd: f64, total_sd: f64, levels: &[f64]) -> Result<Self> {
        let intervals = levels
            .iter()
            .map(|&l| prediction_interval(mean, total_sd, l))
            .collect::<Result<_>>()?;
        Ok(Self {
            mean,
            aleatoric_sd,
            epistemic_sd,
            total_sd,
            intervals,
            flagged: false,
        })
    }

    pub fn sd(&self, kind: UncertaintyKind) -> f64 {
        match kind {
            UncertaintyKind::Aleatoric => self.aleatoric_sd,
            UncertaintyKind::Epistemic => self.epistemic_sd,
            UncertaintyKind::Total => self.total_sd,
        }
    }

    pub fn interval(&self, level: f64) -> Option<&PredictionInterval> {
        self.intervals.iter().find(|i| (i.level - level).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
    pub crmse: f64,
    /// Pearson correlation; `None` when either series has zero variance.
    pub pearson_r: Option<f64>,
}

fn check_aligned(a: usize, b: usize, what: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            context: what,
            expected: a,
            found: b,
        });
    }
    if a == 0 {
        return Err(Error::usage(format!("{what}: empty input")));
    }
    Ok(())
}

pub fn error_metrics(pred: &[f64], obs: &[f64]) -> Result<ErrorMetrics> {
    check_aligned(pred.len(), obs.len(), "error metrics")?;
    if pred.iter().chain(obs).any(|v| v.is_nan()) {
        return Err(Error::usage("error metrics: NaN in input"));
    }
    let n = pred.len() as f64;
    let pm = pred.iter().sum::<f64>() / n;
    let om = obs.iter().sum::<f64>() / n;
    let (mut abs, mut sq, mut csq, mut cov, mut vp, mut vo) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (&p, &o) in pred.iter().zip(obs) {
        let e = p - o;
        abs += e.abs();
        sq += e * e;
        let (dp, dob) = (p - pm, o - om);
        csq += (dp - dob) * (dp - dob);
        cov += dp * dob;
        vp += dp * dp;
        vo += dob * dob;
    }
    let pearson_r =
        (vp > 0.0 && vo > 0.0).then(|| (cov / (vp.sqrt() * vo.sqrt())).clamp(-1.0, 1.0));
    Ok(ErrorMetrics {
        bias: pm - om,
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        crmse: (csq / n).sqrt(),
        pearson_r,
    })
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_aligned(pred.len(), obs.len(), "rmse")?;
    let n = pred.len() as f64;
    Ok((pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum::<f64>() / n).sqrt())
}

/// Count of observations inside their interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub covered: usize,
    pub total: usize,
}

impl Coverage {
    /// `None` when every sample was excluded.
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.covered as f64 / self.total as f64)
    }
}

/// Prediction interval coverage probability at `level` over a closed interval.
pub fn picp(preds: &[PredictionWithUQ], obs: &[f64], level: f64, exclude_flagged: bool) -> Result<Coverage> {
    if preds.len() != obs.len() {
        return Err(Error::Dimension {
            context: "picp",
            expected: preds.len(),
            found: obs.len(),
        });
    }
    let mut cov = Coverage { covered: 0, total: 0 };
    for (p, &o) in preds.iter().zip(obs) {
        if exclude_flagged && p.flagged {
            continue;
        }
        let iv = p
            .interval(level)
            .ok_or_else(|| Error::usage(format!("no interval at level {level}")))?;
        cov.total += 1;
        if iv.lower <= o && o <= iv.upper {
            cov.covered += 1;
        }
    }
    Ok(cov)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("percentile of empty input"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::usage(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMask {
    pub threshold: f64,
    pub flags: Vec<bool>,
}

impl UncertaintyMask {
    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Flags samples whose total sd strictly exceeds the `q`-th percentile.
pub fn mask_highly_uncertain(total_sd: &[f64], q: f64) -> Result<UncertaintyMask> {
    if !(q > 0.0 && q < 100.0) {
        return Err(Error::usage(format!("mask percentile {q} outside (0, 100)")));
    }
    let threshold = percentile(total_sd, q)?;
    Ok(UncertaintyMask {
        threshold,
        flags: total_sd.iter().map(|&s| s > threshold).collect(),
    })
}

/// `Φ((obs − μ)/σ)` per sample.
pub fn pit_values(mean: &[f64], sd: &[f64], obs: &[f64]) -> Result<Vec<f64>> {
    check_aligned(mean.len(), obs.len(), "pit")?;
    check_aligned(sd.len(), obs.len(), "pit")?;
    mean.iter()
        .zip(sd)
        .zip(obs)
        .enumerate()
        .map(|(i, ((&m, &s), &o))| {
            if !(s > 0.0) {
                return Err(Error::domain(format!("sample {i}: sd {s} must be > 0")));
            }
            Ok(normal_cdf((o - m) / s))
        })
        .collect()
}

pub fn pit_for(preds: &[PredictionWithUQ], obs: &[f64], kind: UncertaintyKind) -> Result<Vec<f64>> {
    let mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let sd: Vec<f64> = preds.iter().map(|p| p.sd(kind)).collect();
    pit_values(&mean, &sd, obs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitdScore {
    pub counts: Vec<usize>,
    pub pitd: f64,
    pub worst: f64,
    pub skill: f64,
}

/// Equal-width histogram on [0, 1]; a value of exactly 1 falls in the last bin.
pub fn pit_histogram(pit: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::usage(format!("PIT histogram needs >= 2 bins, got {bins}")));
    }
    let mut counts = vec![0usize; bins];
    for (i, &v) in pit.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(format!("PIT value {v} at {i} outside [0, 1]")));
        }
        let b = ((v * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts)
}

pub fn pitd_from_counts(counts: &[usize]) -> Result<PitdScore> {
    let m = counts.len();
    if m < 2 {
        return Err(Error::usage("PITD needs >= 2 bins"));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::usage("PITD of an empty set"));
    }
    let mf = m as f64;
    let ss: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 / n as f64 - 1.0 / mf;
            d * d
        })
        .sum();
    let pitd = (ss / mf).sqrt();
    let worst = (mf - 1.0).sqrt() / mf;
    Ok(PitdScore {
        counts: counts.to_vec(),
        pitd,
        worst,
        skill: (1.0 - pitd / worst).clamp(0.0, 1.0),
    })
}

pub fn pitd(pit: &[f64], bins: usize) -> Result<PitdScore> {
    pitd_from_counts(&pit_histogram(pit, bins)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadSkillBin {
    pub mean_sd: f64,
    pub rmse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadSkill {
    pub bins: Vec<SpreadSkillBin>,
    /// Least-squares fit of binned RMSE on binned mean sd. `None` when fewer
    /// than two bins have distinct spread.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r2: Option<f64>,
}

/// Equal-count bins over sorted `sd`, each reporting mean sd and RMSE of `errors`.
pub fn spread_skill(sd: &[f64], errors: &[f64], n_bins: usize) -> Result<SpreadSkill> {
    check_aligned(sd.len(), errors.len(), "spread-skill")?;
    if n_bins < 2 {
        return Err(Error::usage(format!("spread-skill needs >= 2 bins, got {n_bins}")));
    }
    let n = sd.len();
    let mut nb = n_bins;
    if n < nb {
        log::warn!("spread-skill: {n} samples for {nb} bins; using {n} bins");
        nb = n;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sd[a].total_cmp(&sd[b]).then(a.cmp(&b)));

    let lo = sd[order[0]];
    let hi = sd[order[n - 1]];
    if lo == hi {
        nb = 1;
    }
    let bins: Vec<SpreadSkillBin> = (0..nb)
        .map(|k| {
            let idx = &order[k * n / nb..(k + 1) * n / nb];
            let c = idx.len() as f64;
            SpreadSkillBin {
                mean_sd: idx.iter().map(|&i| sd[i]).sum::<f64>() / c,
                rmse: (idx.iter().map(|&i| errors[i] * errors[i]).sum::<f64>() / c).sqrt(),
                count: idx.len(),
            }
        })
        .collect();

    let (slope, intercept, r2) = match linear_fit(
        &bins.iter().map(|b| b.mean_sd).collect::<Vec<_>>(),
        &bins.iter().map(|b| b.rmse).collect::<Vec<_>>(),
    ) {
        Some((s, i, r)) => (Some(s), Some(i), r),
        None => (None, None, None),
    };
    Ok(SpreadSkill {
        bins,
        slope,
        intercept,
        r2,
    })
}

/// Ordinary least squares `y = a·x + b`; returns `(a, b, R²)`.
fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, Option<f64>)> {
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let syy: f64 = y.iter().map(|v| (v - ym).powi(2)).sum();
    let r2 = (syy > 0.0).then(|| {
        let sse: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - (slope * a + intercept)).powi(2))
            .sum();
        1.0 - sse / syy
    });
    Some((slope, intercept, r2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscardPoint {
    pub fraction: f64,
    pub rmse: f64,
    pub retained: usize,
}

/// RMSE of the samples left after dropping the `⌈f·n⌉` most uncertain ones.
/// Among equal sd, the lower index is dropped first.
pub fn discard_fraction(sd: &[f64], pred: &[f64], obs: &[f64], fractions: &[f64]) -> Result<Vec<DiscardPoint>> {
    check_aligned(sd.len(), pred.len(), "discard fraction")?;
    check_aligned(pred.len(), obs.len(), "discard fraction")?;
    for w in fractions.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::usage("discard fractions must be strictly ascending"));
        }
    }
    if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(Error::usage("discard fractions must lie in [0, 1)"));
    }
    let n = sd.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sd[b].total_cmp(&sd[a]).then(a.cmp(&b)));

    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let drop = (f * n as f64).ceil() as usize;
        if drop >= n {
            log::warn!("discard fraction {f} leaves no samples; point skipped");
            continue;
        }
        let kept = &order[drop..];
        let sq: f64 = kept.iter().map(|&i| (pred[i] - obs[i]).powi(2)).sum();
        out.push(DiscardPoint {
            fraction: f,
            rmse: (sq / kept.len() as f64).sqrt(),
            retained: kept.len(),
        });
    }
    Ok(out)
}

/// Evenly spaced fractions `0, 1/k, …, (k−1)/k`.
pub fn default_fractions(k: usize) -> Vec<f64> {
    (0..k).map(|i| i as f64 / k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub levels: Vec<f64>,
    pub pit_bins: usize,
    pub spread_bins: usize,
    pub discard_fractions: Vec<f64>,
    pub exclude_flagged: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            levels: NAMED_LEVELS.iter().map(|(l, _)| *l).collect(),
            pit_bins: DEFAULT_PIT_BINS,
            spread_bins: DEFAULT_SPREAD_BINS,
            discard_fractions: default_fractions(20),
            exclude_flagged: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCoverage {
    pub level: f64,
    pub coverage: Coverage,
    pub picp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitdByKind {
    pub kind: UncertaintyKind,
    pub score: PitdScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub errors: ErrorMetrics,
    pub picp: Vec<LevelCoverage>,
    pub pitd: Vec<PitdByKind>,
    pub discard_fraction: Vec<DiscardPoint>,
    pub spread_skill: SpreadSkill,
}

impl EvalReport {
    pub fn pitd_skill(&self, kind: UncertaintyKind) -> Option<f64> {
        self.pitd.iter().find(|p| p.kind == kind).map(|p| p.score.skill)
    }

    pub fn picp_at(&self, level: f64) -> Option<f64> {
        self.picp
            .iter()
            .find(|c| (c.level - level).abs() < 1e-12)
            .and_then(|c| c.picp)
    }
}

pub fn evaluate(preds: &[PredictionWithUQ], obs: &[f64], opts: &EvalOptions) -> Result<EvalReport> {
    check_aligned(preds.len(), obs.len(), "evaluate")?;
    let mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let total: Vec<f64> = preds.iter().map(|p| p.total_sd).collect();
    let errors = error_metrics(&mean, obs)?;
    let picp = opts
        .levels
        .iter()
        .map(|&level| {
            let coverage = picp(preds, obs, level, opts.exclude_flagged)?;
            Ok(LevelCoverage {
                level,
                coverage,
                picp: coverage.fraction(),
            })
        })
        .collect::<Result<_>>()?;
    let pitd = UncertaintyKind::ALL
        .iter()
        .map(|&kind| {
            Ok(PitdByKind {
                kind,
                score: pitd(&pit_for(preds, obs, kind)?, opts.pit_bins)?,
            })
        })
        .collect::<Result<_>>()?;
    let residuals: Vec<f64> = mean.iter().zip(obs).map(|(p, o)| p - o).collect();
    Ok(EvalReport {
        n: obs.len(),
        errors,
        picp,
        pitd,
        discard_fraction: discard_fraction(&total, &mean, obs, &opts.discard_fractions)?,
        spread_skill: spread_skill(&total, &residuals, opts.spread_bins)?,
    })
}
