//! Accuracy metrics, heterogeneity measures and convergence diagnostics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::partition::{label_entropy, PartitionPlan};
use crate::seeds;

/// Anything that maps a batch of inputs to class indices.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        (**self).predict(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Accuracy on each client's own test indices.
    pub local_t: Vec<f64>,
    /// Accuracy of each client on the union of all test indices.
    pub global_t: Vec<f64>,
    pub mean_local_t: f64,
    pub mean_global_t: f64,
}

fn accuracy<P: Predictor>(p: &P, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let (x, y) = ds.batch(idx);
    let pred = p.predict(&x)?;
    let hits = pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Local-T and Global-T for one predictor per client, in client order.
pub fn evaluate<P: Predictor>(predictors: &[P], ds: &Dataset, plan: &PartitionPlan) -> Result<AccuracyReport> {
    if predictors.len() != plan.clients() {
        return Err(Error::shape("evaluate", &[plan.clients()], &[predictors.len()]));
    }
    let mut union: Vec<usize> = plan.client_test.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    if union.is_empty() {
        return Err(Error::EmptyTestSet(0));
    }
    let mut local_t = Vec::with_capacity(predictors.len());
    let mut global_t = Vec::with_capacity(predictors.len());
    for (m, p) in predictors.iter().enumerate() {
        if plan.client_test[m].is_empty() {
            return Err(Error::EmptyTestSet(m));
        }
        local_t.push(accuracy(p, ds, &plan.client_test[m])?);
        global_t.push(accuracy(p, ds, &union)?);
    }
    Ok(AccuracyReport {
        mean_local_t: mean(&local_t),
        mean_global_t: mean(&global_t),
        local_t,
        global_t,
    })
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => s[n / 2],
        _ => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

/// Parameter access and stochastic gradients for the estimators below.
pub trait GradientOracle {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]) -> Result<()>;
    /// Gradient of the training objective on `batch` at the current
    /// parameters. Must be deterministic for a given batch.
    fn gradient(&mut self, batch: &[usize]) -> Result<Vec<f64>>;
    /// Indices of the local training set.
    fn train_indices(&self) -> Vec<usize>;
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased variance of minibatch gradients around their mean, summed over
/// coordinates. Batches of `batch_size` are drawn without replacement from
/// the training set (the whole set when it is smaller).
pub fn estimate_sigma2<O: GradientOracle>(oracle: &mut O, n_batches: usize, batch_size: usize, seed: u64) -> Result<f64> {
    if n_batches < 2 {
        return Err(Error::Config(format!("sigma² needs at least 2 batches, got {n_batches}")));
    }
    let pool = oracle.train_indices();
    let mut rng = seeds::rng(seed);
    let mut grads = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let batch: Vec<usize> = if batch_size >= pool.len() {
            pool.clone()
        } else {
            rand::seq::index::sample(&mut rng, pool.len(), batch_size)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        grads.push(oracle.gradient(&batch)?);
    }
    let n = grads[0].len();
    let mut centre = vec![0.0; n];
    for g in &grads {
        centre.iter_mut().zip(g).for_each(|(c, v)| *c += v / n_batches as f64);
    }
    Ok(grads.iter().map(|g| sq_dist(g, &centre)).sum::<f64>() / (n_batches - 1) as f64)
}

/// Secant estimate of the gradient Lipschitz constant: the largest
/// `‖∇L(w₁) − ∇L(w₂)‖ / ‖w₁ − w₂‖` over `n_pairs` random pairs within
/// `radius` (per coordinate) of the current parameters, full-batch.
/// Parameters are restored afterwards.
pub fn estimate_l1<O: GradientOracle>(oracle: &mut O, n_pairs: usize, radius: f64, seed: u64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("radius must be positive, got {radius}")));
    }
    let base = oracle.params();
    let full = oracle.train_indices();
    let mut rng = seeds::rng(seed);
    let mut best = 0.0f64;
    let mut run = |oracle: &mut O| -> Result<()> {
        for _ in 0..n_pairs {
            let w1: Vec<f64> = base.iter().map(|w| w + rng.gen_range(-radius..=radius)).collect();
            let w2: Vec<f64> = base.iter().map(|w| w + rng.gen_range(-radius..=radius)).collect();
            oracle.set_params(&w1)?;
            let g1 = oracle.gradient(&full)?;
            oracle.set_params(&w2)?;
            let g2 = oracle.gradient(&full)?;
            let dw = sq_dist(&w1, &w2).sqrt();
            if dw > 0.0 {
                best = best.max(sq_dist(&g1, &g2).sqrt() / dw);
            }
        }
        Ok(())
    };
    let outcome = run(oracle);
    oracle.set_params(&base)?;
    outcome.map(|_| best)
}

/// Least-squares fit of `c / t` (t = 1, 2, …).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseFit {
    pub c: f64,
    /// Root-mean-square residual relative to the RMS of the data.
    pub relative_residual: f64,
}

pub fn fit_inverse_t(values: &[f64]) -> InverseFit {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let x = 1.0 / (i + 1) as f64;
        num += v * x;
        den += x * x;
    }
    let c = if den > 0.0 { num / den } else { 0.0 };
    let n = values.len().max(1) as f64;
    let res = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - c / (i + 1) as f64).powi(2))
        .sum::<f64>()
        / n;
    let scale = values.iter().map(|v| v * v).sum::<f64>() / n;
    InverseFit {
        c,
        relative_residual: if scale > 0.0 { (res / scale).sqrt() } else { 0.0 },
    }
}

/// `r_t = (1/t) Σ_{s ≤ t} g_s`.
pub fn running_average(series: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    series
        .iter()
        .enumerate()
        .map(|(i, g)| {
            acc += g;
            acc / (i + 1) as f64
        })
        .collect()
}

/// Residual above which the `c/t` shape is reported as a poor fit.
pub const RATE_FIT_TOLERANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub running_average: Vec<f64>,
    pub fit: InverseFit,
    pub fits_inverse_t: bool,
    /// Running average never rises over the second half of the series.
    pub nonincreasing_last_half: bool,
}

/// Fit `c/t` to the running average of per-round squared gradient norms.
pub fn check_rate(grad_norm_series: &[f64]) -> Result<RateReport> {
    if grad_norm_series.len() < 10 {
        return Err(Error::Config(format!(
            "rate check needs at least 10 rounds, got {}",
            grad_norm_series.len()
        )));
    }
    let running = running_average(grad_norm_series);
    let fit = fit_inverse_t(&running);
    let half = running.len() / 2;
    let nonincreasing_last_half = running[half..].windows(2).all(|w| w[1] <= w[0]);
    Ok(RateReport {
        fits_inverse_t: fit.relative_residual < RATE_FIT_TOLERANCE,
        fit,
        running_average: running,
        nonincreasing_last_half,
    })
}

/// `η < 2(ε − δ²) / (L₁(ε + E·σ²))`; `None` when `ε ≤ δ²` or the
/// denominator vanishes.
pub fn lr_bound(epsilon: f64, delta2: f64, l1: f64, local_epochs: usize, sigma2: f64) -> Option<f64> {
    let den = l1 * (epsilon + local_epochs as f64 * sigma2);
    (epsilon > delta2 && den > 0.0).then(|| 2.0 * (epsilon - delta2) / den)
}

/// Per-round descent inequality with estimated constants:
/// `L_next ≤ L_start + (L₁η²/2 − η)·Σ‖∇L‖² + L₁Eη²σ²/2 + ηδ²`.
/// Returns `RHS − LHS`; negative values mean the estimate is violated.
#[allow(clippy::too_many_arguments)]
pub fn descent_margin(
    loss_start: f64,
    loss_next: f64,
    grad_sq_sum: f64,
    l1: f64,
    lr: f64,
    local_epochs: usize,
    sigma2: f64,
    delta2: f64,
) -> f64 {
    let rhs = loss_start
        + (l1 * lr * lr / 2.0 - lr) * grad_sq_sum
        + l1 * local_epochs as f64 * lr * lr * sigma2 / 2.0
        + lr * delta2;
    rhs - loss_next
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    pub entropy: Vec<f64>,
    /// `[M][M]` total-variation distances between train label distributions.
    pub pairwise_tv: Vec<Vec<f64>>,
    pub max_tv: f64,
}

pub fn heterogeneity_metrics(plan: &PartitionPlan, ds: &Dataset) -> Heterogeneity {
    let dists: Vec<Vec<f64>> = plan
        .label_counts(ds)
        .into_iter()
        .map(|c| {
            let n = c.iter().sum::<usize>().max(1) as f64;
            c.into_iter().map(|v| v as f64 / n).collect()
        })
        .collect();
    let m = dists.len();
    let mut pairwise_tv = vec![vec![0.0; m]; m];
    let mut max_tv = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let tv = 0.5 * dists[i].iter().zip(&dists[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            pairwise_tv[i][j] = tv;
            max_tv = max_tv.max(tv);
        }
    }
    Heterogeneity {
        entropy: label_entropy(plan, ds),
        pairwise_tv,
        max_tv,
    }
}

/// Everything the convergence analysis asks for, estimated on one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDiagnostics {
    pub sigma2_hat: f64,
    pub delta2_hat: Vec<f64>,
    pub l1_hat: f64,
    pub grad_norm_series: Vec<f64>,
    pub rate: RateReport,
    /// Final running-average squared gradient norm, used as ε.
    pub epsilon: f64,
    pub lr_bound: Option<f64>,
    /// Per-round `RHS − LHS` of the descent inequality.
    pub descent_margins: Vec<f64>,
}
