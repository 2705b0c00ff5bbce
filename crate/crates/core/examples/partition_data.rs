//! Generate Gaussian blobs and split them across clients with both non-IID
//! schemes, printing label counts and heterogeneity.
//!
//! cargo run --example partition_data

use drdfl::data::make_blobs;
use drdfl::eval::heterogeneity_metrics;
use drdfl::partition::{partition, Scheme};

fn main() -> drdfl::Result<()> {
    let ds = make_blobs(4, 200, 8, 6.0, 7)?;
    println!("{} records, {} classes, D = {}", ds.len(), ds.classes(), ds.dim());
    for scheme in [
        Scheme::Shard { s: 2 },
        Scheme::Dirichlet { beta: 0.1 },
        Scheme::Dirichlet { beta: 10.0 },
    ] {
        let plan = partition(&ds, 4, scheme, 7)?;
        let h = heterogeneity_metrics(&plan, &ds);
        println!("\n{scheme}: max pairwise TV {:.3}", h.max_tv);
        for (m, counts) in plan.label_counts(&ds).iter().enumerate() {
            println!("  client {m}: train labels {counts:?}, entropy {:.3}", h.entropy[m]);
        }
    }
    Ok(())
}
