//! Normal-Inverse-Gamma head, evidential loss and uncertainty decomposition.
//!
//! The network's four raw outputs map to `(γ, ν, α, β)`. The predictive
//! moments are `E[μ] = γ`, aleatoric `E[σ²] = β/(α−1)` and epistemic
//! `Var(μ) = β/(ν(α−1))`; the total variance is their sum.
//!
//! Training minimizes the batch mean of `NLL + λ·|y−γ|(2ν+α)` plus the
//! network's L1/L2 penalty, where NLL is the negative log of the Student-t
//! marginal of the NIG-Gaussian model.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::{Samples, Standardizer};
use crate::error::{Error, Result};
use crate::nncore::{Adam, Mlp, HEAD_WIDTH};

/// Positivity floor added after softplus.
pub const PARAM_FLOOR: f64 = 1e-6;

/// Rows per inference chunk. Fixed so results do not depend on thread count.
const INFERENCE_CHUNK: usize = 1024;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub gamma: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(gamma: f64, nu: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self {
            gamma,
            nu,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::domain("gamma must be finite"));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::domain(format!("nu must be > 0, got {}", self.nu)));
        }
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return Err(Error::domain(format!("alpha must be > 1, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::domain(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Maps raw head outputs to valid NIG parameters.
pub fn head_transform(raw: [f64; 4]) -> Result<NigParams> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("raw head output {raw:?}")));
    }
    Ok(NigParams {
        gamma: raw[0],
        nu: softplus(raw[1]) + PARAM_FLOOR,
        alpha: softplus(raw[2]) + 1.0 + PARAM_FLOOR,
        beta: softplus(raw[3]) + PARAM_FLOOR,
    })
}

/// Derivatives of `(γ, ν, α, β)` with respect to the raw outputs (diagonal Jacobian).
fn head_jacobian(raw: [f64; 4]) -> [f64; 4] {
    [1.0, sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    pub mean: f64,
    pub aleatoric_var: f64,
    pub epistemic_var: f64,
    pub total_var: f64,
}

impl UncertaintyDecomposition {
    pub fn aleatoric_sd(&self) -> f64 {
        self.aleatoric_var.sqrt()
    }

    pub fn epistemic_sd(&self) -> f64 {
        self.epistemic_var.sqrt()
    }

    pub fn total_sd(&self) -> f64 {
        self.total_var.sqrt()
    }
}

pub fn decompose(p: &NigParams) -> Result<UncertaintyDecomposition> {
    if !(p.alpha > 1.0) {
        return Err(Error::domain(format!(
            "alpha must exceed 1 for finite moments, got {}",
            p.alpha
        )));
    }
    let aleatoric_var = p.beta / (p.alpha - 1.0);
    let epistemic_var = p.beta / (p.nu * (p.alpha - 1.0));
    Ok(UncertaintyDecomposition {
        mean: p.gamma,
        aleatoric_var,
        epistemic_var,
        total_var: aleatoric_var + epistemic_var,
    })
}

/// Negative log-likelihood of `y` under the Student-t marginal of the NIG model.
pub fn nig_nll(p: &NigParams, y: f64) -> f64 {
    let omega = 2.0 * p.beta * (1.0 + p.nu);
    let r = y - p.gamma;
    0.5 * (std::f64::consts::PI / p.nu).ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * (p.nu * r * r + omega).ln()
        + ln_gamma(p.alpha)
        - ln_gamma(p.alpha + 0.5)
}

/// Gradient of [`nig_nll`] with respect to `(γ, ν, α, β)`.
pub fn nig_nll_grad(p: &NigParams, y: f64) -> [f64; 4] {
    let omega = 2.0 * p.beta * (1.0 + p.nu);
    let r = y - p.gamma;
    let s = p.nu * r * r + omega;
    let a5 = p.alpha + 0.5;
    [
        -2.0 * a5 * p.nu * r / s,
        -0.5 / p.nu - p.alpha * 2.0 * p.beta / omega + a5 * (r * r + 2.0 * p.beta) / s,
        s.ln() - omega.ln() + digamma(p.alpha) - digamma(p.alpha + 0.5),
        -p.alpha / p.beta + a5 * 2.0 * (1.0 + p.nu) / s,
    ]
}

/// Evidence regularizer `|y − γ| · (2ν + α)`.
pub fn evidence_regularizer(p: &NigParams, y: f64) -> f64 {
    (y - p.gamma).abs() * (2.0 * p.nu + p.alpha)
}

pub fn evidence_regularizer_grad(p: &NigParams, y: f64) -> [f64; 4] {
    let r = y - p.gamma;
    let sign = if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    };
    [-sign * (2.0 * p.nu + p.alpha), 2.0 * r.abs(), r.abs(), 0.0]
}

/// Batch-mean evidential loss and its gradient with respect to the raw head
/// outputs. Network penalties are not included here; see [`total_loss`].
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub mean_nll: f64,
    pub mean_reg: f64,
    pub grad: Array2<f64>,
}

pub fn evidential_loss(raw: ArrayView2<f64>, targets: ArrayView1<f64>, lambda: f64) -> Result<BatchLoss> {
    if raw.ncols() != HEAD_WIDTH {
        return Err(Error::Dimension {
            context: "evidential head",
            expected: HEAD_WIDTH,
            found: raw.ncols(),
        });
    }
    if raw.nrows() != targets.len() {
        return Err(Error::Dimension {
            context: "loss targets",
            expected: raw.nrows(),
            found: targets.len(),
        });
    }
    if raw.nrows() == 0 {
        return Err(Error::usage("empty batch"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::usage(format!("evidential coefficient must be >= 0, got {lambda}")));
    }
    let n = raw.nrows() as f64;
    let mut grad = Array2::zeros(raw.raw_dim());
    let (mut nll_sum, mut reg_sum) = (0.0, 0.0);
    for (i, row) in raw.rows().into_iter().enumerate() {
        let r = [row[0], row[1], row[2], row[3]];
        let y = targets[i];
        let p = head_transform(r).map_err(|_| Error::NonFinite(format!("raw output of sample {i}")))?;
        let nll = nig_nll(&p, y);
        let reg = evidence_regularizer(&p, y);
        if !nll.is_finite() || !reg.is_finite() {
            return Err(Error::NonFinite(format!("loss of sample {i}")));
        }
        nll_sum += nll;
        reg_sum += reg;
        let gn = nig_nll_grad(&p, y);
        let gr = evidence_regularizer_grad(&p, y);
        let jac = head_jacobian(r);
        for k in 0..HEAD_WIDTH {
            grad[[i, k]] = (gn[k] + lambda * gr[k]) * jac[k] / n;
        }
    }
    let mean_nll = nll_sum / n;
    let mean_reg = reg_sum / n;
    Ok(BatchLoss {
        loss: mean_nll + lambda * mean_reg,
        mean_nll,
        mean_reg,
        grad,
    })
}

/// Full training objective: batch-mean evidential loss plus the network's
/// L1/L2 penalty. The returned gradient is with respect to the raw outputs;
/// penalty gradients are added by [`Mlp::backward`].
pub fn total_loss(
    model: &Mlp,
    raw: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    lambda: f64,
) -> Result<(f64, Array2<f64>)> {
    let b = evidential_loss(raw, targets, lambda)?;
    Ok((b.loss + model.penalty(), b.grad))
}

/// Decomposes every row of raw head outputs.
pub fn decompose_raw(raw: ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>> {
    raw.rows()
        .into_iter()
        .map(|r| decompose(&head_transform([r[0], r[1], r[2], r[3]])?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Evidential coefficient λ.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            lambda: 0.59,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Network shape and regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub l1: f64,
    pub l2: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            dropout: 0.0,
            l1: 0.0,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub val_mean_total_sd: f64,
    pub inflated_uncertainty: bool,
}

/// A trained network together with the feature standardization it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialModel {
    pub net: Mlp,
    pub standardizer: Standardizer,
    pub feature_names: Vec<String>,
    pub arch: ArchSpec,
    pub config: TrainConfig,
}

impl EvidentialModel {
    /// Predicts from raw (unstandardized) features.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>> {
        let z = self.standardizer.apply(features)?;
        predict_standardized(&self.net, z.view())
    }
}

/// Inference in fixed-size chunks, parallel across chunks.
pub fn predict_standardized(net: &Mlp, features: ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>> {
    if features.ncols() != net.input_width() {
        return Err(Error::Dimension {
            context: "model input",
            expected: net.input_width(),
            found: features.ncols(),
        });
    }
    let n = features.nrows();
    let starts: Vec<usize> = (0..n).step_by(INFERENCE_CHUNK).collect();
    let parts: Vec<Result<Vec<UncertaintyDecomposition>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + INFERENCE_CHUNK).min(n);
            let raw = net.predict(features.slice(s![start..end, ..]))?;
            decompose_raw(raw.view())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EvidentialModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Validation totals shared by the training loop.
struct ValStats {
    loss: f64,
    mae: f64,
    mean_total_sd: f64,
}

fn validate_epoch(net: &Mlp, x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64) -> Result<ValStats> {
    let raw = net.predict(x)?;
    let loss = evidential_loss(raw.view(), y, lambda)?.loss + net.penalty();
    let dec = decompose_raw(raw.view())?;
    let n = y.len() as f64;
    let mae = dec.iter().zip(y.iter()).map(|(d, &t)| (d.mean - t).abs()).sum::<f64>() / n;
    let mean_total_sd = dec.iter().map(UncertaintyDecomposition::total_sd).sum::<f64>() / n;
    Ok(ValStats {
        loss,
        mae,
        mean_total_sd,
    })
}

fn std_dev(v: ArrayView1<f64>) -> f64 {
    let n = v.len() as f64;
    let m = v.sum() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Trains on `train` and early-stops on validation MAE, returning the
/// snapshot with the best validation MAE. Single-threaded and deterministic
/// for a given seed.
pub fn train_evidential(
    train: &Samples,
    val: &Samples,
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if train.feature_names != val.feature_names {
        return Err(Error::Config("train and validation feature lists differ".into()));
    }

    let standardizer = Standardizer::fit(train.features.view())?;
    let xtr = standardizer.apply(train.features.view())?;
    let xva = standardizer.apply(val.features.view())?;
    let ytr = &train.targets;
    let yva = &val.targets;
    let target_sd = std_dev(yva.view());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(xtr.ncols(), &arch.hidden, arch.dropout, arch.l1, arch.l2, &mut rng)?;
    let mut adam = Adam::new(&net, cfg.learning_rate);

    let n = xtr.nrows();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Mlp)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs) {
            let xb = xtr.select(ndarray::Axis(0), chunk);
            let yb: Array1<f64> = chunk.iter().map(|&i| ytr[i]).collect();
            let (raw, cache) = net.forward(xb.view(), true, &mut rng)?;
            let batch = evidential_loss(raw.view(), yb.view(), cfg.lambda).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "epoch {epoch}: {msg} (training row {})",
                    offending_row(&msg, chunk)
                )),
                other => other,
            })?;
            let grads = net.backward(&cache, batch.grad.view())?;
            step += 1;
            adam.step(&mut net, &grads, step)?;
            loss_sum += (batch.loss + net.penalty()) * chunk.len() as f64;
        }
        let train_loss = loss_sum / n as f64;
        let v = validate_epoch(&net, xva.view(), yva.view(), cfg.lambda)?;
        let inflated = v.mean_total_sd > 100.0 * target_sd;
        if inflated {
            log::warn!(
                "epoch {epoch}: validation mean total sd {:.3} exceeds 100x target sd {:.3}",
                v.mean_total_sd,
                target_sd
            );
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: v.loss,
            val_mae: v.mae,
            val_mean_total_sd: v.mean_total_sd,
            inflated_uncertainty: inflated,
        });

        let improved = best.as_ref().is_none_or(|(mae, _, _)| v.mae < *mae);
        if improved {
            best = Some((v.mae, epoch, net.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }

    let (_, best_epoch, net) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: EvidentialModel {
            net,
            standardizer,
            feature_names: train.feature_names.clone(),
            arch: arch.clone(),
            config: cfg.clone(),
        },
        log,
        best_epoch,
    })
}

/// Maps "sample k" in a batch-level message back to the dataset row.
fn offending_row(msg: &str, chunk: &[usize]) -> String {
    msg.split_whitespace()
        .filter_map(|w| w.parse::<usize>().ok())
        .next()
        .and_then(|k| chunk.get(k))
        .map_or_else(|| "?".into(), |r| r.to_string())
}
