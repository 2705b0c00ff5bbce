//! Full training on the ring against the local-only baseline, in both ring
//! modes, with metrics written to a directory.
//!
//! cargo run --release --example train_ring [out_dir]

use std::sync::Arc;

use drdfl::data::make_blobs;
use drdfl::orchestrator::{run_experiment, Outputs, TrainConfig};
use drdfl::partition::{partition, Scheme};
use drdfl::ring::RingMode;

fn main() -> drdfl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let ds = Arc::new(make_blobs(4, 200, 8, 6.0, 1)?);
    let plan = partition(&ds, 4, Scheme::Shard { s: 2 }, 1)?;
    let base = TrainConfig {
        rounds: 20,
        seed: 1,
        ..TrainConfig::default()
    };
    for (name, cfg) in [
        ("sequential", base.clone()),
        ("parallel", TrainConfig { mode: RingMode::ParallelSnapshot, ..base.clone() }),
        ("local-only", TrainConfig { communicate: false, ..base.clone() }),
    ] {
        let outputs = Outputs {
            dir: format!("{out}/{name}").into(),
            trace_messages: false,
        };
        let res = run_experiment(&cfg, Arc::clone(&ds), &plan, Some(&outputs))?;
        let acc = &res.summary.final_accuracy;
        println!(
            "{name:<11} Local-T {:.4}  Global-T {:.4}  {} messages, {} bytes  -> {}",
            acc.mean_local_t,
            acc.mean_global_t,
            res.summary.ledger.messages,
            res.summary.ledger.bytes,
            outputs.dir.display()
        );
    }
    Ok(())
}
