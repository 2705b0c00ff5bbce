//! Per-class diagonal Gaussians over the persona latent.
//!
//! The bank plays two roles: its means and log-variances are trainable
//! mixture parameters for the persona losses, and a snapshot of them is
//! the class-statistics half of every ring message. Priors are fixed at
//! `1/K`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::LOGVAR_RANGE;

/// Immutable copy of a bank's statistics, as carried on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub classes: usize,
    pub dim: usize,
    /// `[K * d]`, row-major by class.
    pub means: Vec<f64>,
    /// `[K * d]` log-variances.
    pub logvars: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussianBank {
    means: Tensor,
    logvars: Tensor,
    prior: Vec<f64>,
    alpha: f64,
}

/// Tape handles for a bound bank.
#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    pub means: Var,
    pub logvars: Var,
}

impl ClassGaussianBank {
    /// Standard-normal start: `μ_k = 0`, `σ² = 1`.
    pub fn new(classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(Error::Config(format!("bank needs K ≥ 2 and d ≥ 1, got K={classes}, d={dim}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("ema alpha must be in (0, 1], got {alpha}")));
        }
        Ok(ClassGaussianBank {
            means: Tensor::zeros(vec![classes, dim]).requiring_grad(),
            logvars: Tensor::zeros(vec![classes, dim]).requiring_grad(),
            prior: vec![1.0 / classes as f64; classes],
            alpha,
        })
    }

    pub fn from_stats(stats: &ClassStats, alpha: f64) -> Result<Self> {
        let mut bank = Self::new(stats.classes, stats.dim, alpha)?;
        bank.load(stats)?;
        Ok(bank)
    }

    pub fn classes(&self) -> usize {
        self.prior.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn logvars(&self) -> &Tensor {
        &self.logvars
    }

    pub fn means_mut(&mut self) -> &mut Tensor {
        &mut self.means
    }

    pub fn logvars_mut(&mut self) -> &mut Tensor {
        &mut self.logvars
    }

    pub fn snapshot(&self) -> ClassStats {
        ClassStats {
            classes: self.classes(),
            dim: self.dim(),
            means: self.means.data().to_vec(),
            logvars: self.logvars.data().to_vec(),
        }
    }

    fn check_stats(&self, stats: &ClassStats) -> Result<()> {
        let n = self.classes() * self.dim();
        if stats.classes != self.classes()
            || stats.dim != self.dim()
            || stats.means.len() != n
            || stats.logvars.len() != n
        {
            return Err(Error::shape(
                "class_stats",
                &[self.classes(), self.dim()],
                &[stats.classes, stats.dim],
            ));
        }
        Ok(())
    }

    /// Overwrite with `stats` (log-variances clamped).
    pub fn load(&mut self, stats: &ClassStats) -> Result<()> {
        self.check_stats(stats)?;
        self.means.data_mut().copy_from_slice(&stats.means);
        self.logvars.data_mut().copy_from_slice(&stats.logvars);
        self.clamp_logvars();
        Ok(())
    }

    fn clamp_logvars(&mut self) {
        for v in self.logvars.data_mut() {
            *v = v.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1);
        }
    }

    /// Blend toward inherited statistics: means linearly, variances in
    /// variance space, then back to clamped log form.
    pub fn ema_merge(&mut self, inherited: &ClassStats) -> Result<()> {
        self.check_stats(inherited)?;
        let a = self.alpha;
        for (m, &t) in self.means.data_mut().iter_mut().zip(&inherited.means) {
            *m = a * *m + (1.0 - a) * t;
        }
        for (lv, &t) in self.logvars.data_mut().iter_mut().zip(&inherited.logvars) {
            let var = a * lv.exp() + (1.0 - a) * t.exp();
            *lv = var.ln();
        }
        self.clamp_logvars();
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BankVars {
        BankVars {
            means: tape.param(&self.means),
            logvars: tape.param(&self.logvars),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BankVars {
        BankVars {
            means: tape.constant(&self.means),
            logvars: tape.constant(&self.logvars),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: BankVars) -> Result<()> {
        grads.accumulate(vars.means, &mut self.means)?;
        grads.accumulate(vars.logvars, &mut self.logvars)
    }

    /// SGD on means and log-variances, clamp, clear gradients.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        sgd_step(&mut [&mut self.means, &mut self.logvars], lr)?;
        self.means.zero_grad();
        self.logvars.zero_grad();
        self.clamp_logvars();
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.means.zero_grad();
        self.logvars.zero_grad();
    }

    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.means.len());
        for t in [&self.means, &self.logvars] {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        out
    }

    /// Posterior class probabilities for each row of `z_p`.
    pub fn posterior(&self, z_p: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let z = tape.constant(z_p);
        let lp = gmm_log_posterior(&mut tape, vars, self.classes(), z)?;
        let probs: Vec<f64> = tape.value(lp).iter().map(|v| v.exp()).collect();
        Tensor::new(tape.shape(lp).to_vec(), probs)
    }
}

/// Log joint `log N(z; μ_k, Σ_k) + log p(k)`, shape `[B, K]`.
fn log_joint(tape: &mut Tape, vars: BankVars, classes: usize, z: Var) -> Result<Var> {
    let dens = tape.gauss_log_density(z, vars.means, vars.logvars)?;
    Ok(tape.add_scalar(dens, -(classes as f64).ln()))
}

/// Row-normalized log posterior over classes, `[B, K]`.
pub fn gmm_log_posterior(tape: &mut Tape, vars: BankVars, classes: usize, z: Var) -> Result<Var> {
    let joint = log_joint(tape, vars, classes, z)?;
    tape.log_softmax(joint)
}

/// Batch-mean cross-entropy between the mixture posterior and labels.
pub fn loss_cls(tape: &mut Tape, vars: BankVars, classes: usize, z: Var, labels: &[usize]) -> Result<Var> {
    let lp = gmm_log_posterior(tape, vars, classes, z)?;
    let picked = tape.pick(lp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// Batch-mean negative log-likelihood of `z` under its own class Gaussian.
pub fn loss_log(tape: &mut Tape, vars: BankVars, z: Var, labels: &[usize]) -> Result<Var> {
    let dens = tape.gauss_log_density(z, vars.means, vars.logvars)?;
    let picked = tape.pick(dens, labels)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}
