//! A client joining after training: started from the final learngene and
//! class statistics, compared with a fresh start on the same data.
//!
//! cargo run --release --example new_client

use std::sync::Arc;

use drdfl::data::make_blobs;
use drdfl::orchestrator::{init_new_client, local_curve, run_experiment, Client, TrainConfig};
use drdfl::partition::{partition, Scheme};

fn main() -> drdfl::Result<()> {
    let ds = Arc::new(make_blobs(4, 200, 8, 6.0, 3)?);
    let plan = partition(&ds, 4, Scheme::Shard { s: 2 }, 3)?;
    let cfg = TrainConfig { rounds: 30, seed: 3, ..TrainConfig::default() };
    let res = run_experiment(&cfg, Arc::clone(&ds), &plan, None)?;

    let (train, test) = (plan.client_train[1].clone(), plan.client_test[1].clone());
    let mut warm = init_new_client(&cfg, 4, res.final_learngene(), res.final_stats(), Arc::clone(&ds), train.clone())?;
    let mut cold = Client::fresh(4, ds, train, Arc::new(cfg.clone()))?;
    let w = local_curve(&mut warm, &test, 15)?;
    let c = local_curve(&mut cold, &test, 15)?;
    println!("epoch  warm    cold");
    for (e, (a, b)) in w.iter().zip(&c).enumerate() {
        println!("{e:>5}  {a:.3}  {b:.3}");
    }
    Ok(())
}
