//! Estimate the quantities in the convergence analysis for a trained run:
//! gradient variance, a Lipschitz constant, parameter drift, the 1/t fit
//! and the resulting learning-rate bound.
//!
//! cargo run --release --example convergence

use std::sync::Arc;

use drdfl::data::make_blobs;
use drdfl::eval::{check_rate, estimate_l1, estimate_sigma2, lr_bound};
use drdfl::orchestrator::{run_experiment, TrainConfig};
use drdfl::partition::{partition, Scheme};

fn main() -> drdfl::Result<()> {
    let ds = Arc::new(make_blobs(4, 200, 8, 6.0, 2)?);
    let plan = partition(&ds, 4, Scheme::Shard { s: 2 }, 2)?;
    let cfg = TrainConfig { rounds: 30, seed: 2, ..TrainConfig::default() };
    let mut res = run_experiment(&cfg, ds, &plan, None)?;

    let grad: Vec<f64> = res.summary.rounds.iter().map(|r| r.grad_norm2).collect();
    let rate = check_rate(&grad)?;
    println!(
        "running mean ‖∇‖²: round 1 {:.3e}, round {} {:.3e}; c/t fit c = {:.3e}, residual {:.3}",
        rate.running_average[0],
        grad.len(),
        rate.running_average[grad.len() - 1],
        rate.fit.c,
        rate.fit.relative_residual
    );
    let delta2 = res.summary.rounds.iter().filter_map(|r| r.delta2_max).fold(0.0, f64::max);

    let client = &mut res.clients[0];
    let sigma2 = estimate_sigma2(client, 30, cfg.batch_size, 11)?;
    let l1 = estimate_l1(client, 5, 1e-2, 12)?;
    let eps = *rate.running_average.last().unwrap();
    println!("σ² ≈ {sigma2:.3e}, L₁ ≈ {l1:.3e}, max δ² ≈ {delta2:.3e}, ε = {eps:.3e}");
    match lr_bound(eps, delta2, l1, cfg.local_epochs, sigma2) {
        Some(b) => println!("learning-rate bound {b:.3e} (configured {:.0e})", cfg.lr),
        None => println!("bound infeasible: ε ≤ δ²"),
    }
    Ok(())
}
