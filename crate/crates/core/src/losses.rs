//! Learngene, reconstruction and classifier losses.
//!
//! All losses are batch means and return a scalar [`Var`]. Which parameters
//! a term trains is decided by what the caller binds as a parameter versus a
//! constant: the adversarial pair relies on that, with `L_adv` fed a detached
//! `z_l` and `L_adv^u` evaluated through a frozen adversary.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `KL(N(μ, diag σ²) ‖ N(0, I))`, batch mean.
pub fn loss_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0);
    let per_row = tape.sum_last(c);
    let m = tape.mean(per_row);
    Ok(tape.scale(m, 0.5))
}

/// Batch-mean softmax cross-entropy.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, labels)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// Adversary cross-entropy on true labels. Feed logits computed from a
/// detached `z_l` so only the adversary receives gradient.
pub fn loss_adv(tape: &mut Tape, adversary_logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(tape, adversary_logits, labels)
}

/// Cross-entropy against the uniform class distribution,
/// `-mean_b (1/K) Σ_k log softmax_k`. Minimum `ln K` at uniform output.
pub fn loss_adv_uniform(tape: &mut Tape, adversary_logits: Var) -> Result<Var> {
    let ls = tape.log_softmax(adversary_logits)?;
    // The mean over all B·K entries already carries the 1/K factor.
    let m = tape.mean(ls);
    Ok(tape.neg(m))
}

/// Batch-mean squared L2 reconstruction error `‖x − x'‖²`.
pub fn loss_rec(tape: &mut Tape, x: Var, x_rec: Var) -> Result<Var> {
    let d = tape.sub(x, x_rec)?;
    let sq = tape.square(d);
    let per_row = tape.sum_last(sq);
    Ok(tape.mean(per_row))
}

/// Reconstruction loss plus the noisy sample `x_p = x' + n`.
///
/// `noise_std` is either one value or one per input column. `x_p` is
/// returned as a plain tensor, detached from the decoder graph.
pub fn reconstruct_with_noise<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    x_rec: Var,
    noise_std: &[f64],
    rng: &mut R,
) -> Result<(Var, Tensor)> {
    if tape.shape(x) != tape.shape(x_rec) {
        return Err(Error::shape("reconstruct_with_noise", tape.shape(x), tape.shape(x_rec)));
    }
    let cols = *tape.shape(x).last().unwrap();
    if noise_std.len() != 1 && noise_std.len() != cols {
        return Err(Error::shape("reconstruct_with_noise", &[cols], &[noise_std.len()]));
    }
    let l_rec = loss_rec(tape, x, x_rec)?;
    let mut x_p = tape.to_tensor(x_rec);
    for (i, v) in x_p.data_mut().iter_mut().enumerate() {
        let sd = noise_std[if noise_std.len() == 1 { 0 } else { i % cols }];
        if sd != 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            *v += sd * n;
        }
    }
    Ok((l_rec, x_p))
}

/// `CE(f(x), y) + CE(f(x_p), y)`.
pub fn loss_ce_dual(tape: &mut Tape, logits_x: Var, logits_xp: Var, labels: &[usize]) -> Result<Var> {
    let a = cross_entropy(tape, logits_x, labels)?;
    let b = cross_entropy(tape, logits_xp, labels)?;
    tape.add(a, b)
}

/// Multipliers on each loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub log: f64,
    pub kl: f64,
    pub adv: f64,
    pub adv_u: f64,
    pub rec: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            log: 1.0,
            kl: 1.0,
            adv: 1.0,
            adv_u: 1.0,
            rec: 1.0,
            ce: 1.0,
        }
    }
}

/// Loss values for one batch or an average over batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_log: f64,
    pub l_kl: f64,
    pub l_adv: f64,
    pub l_adv_u: f64,
    pub l_rec: f64,
    pub l_ce: f64,
    pub l_pr: f64,
    pub l_gl: f64,
}

impl LossReport {
    /// Recompute `l_pr` and `l_gl` from their parts.
    pub fn with_totals(mut self) -> Self {
        self.l_pr = self.l_cls + self.l_log;
        self.l_gl = self.l_kl + self.l_adv + self.l_adv_u;
        self
    }

    fn fields(&self) -> [f64; 9] {
        [
            self.l_cls, self.l_log, self.l_kl, self.l_adv, self.l_adv_u, self.l_rec, self.l_ce, self.l_pr, self.l_gl,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }

    /// Sum of every term except the derived totals.
    pub fn total(&self) -> f64 {
        self.l_cls + self.l_log + self.l_kl + self.l_adv + self.l_adv_u + self.l_rec + self.l_ce
    }

    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            l_cls: avg(|r| r.l_cls),
            l_log: avg(|r| r.l_log),
            l_kl: avg(|r| r.l_kl),
            l_adv: avg(|r| r.l_adv),
            l_adv_u: avg(|r| r.l_adv_u),
            l_rec: avg(|r| r.l_rec),
            l_ce: avg(|r| r.l_ce),
            ..Default::default()
        }
        .with_totals()
    }
}
