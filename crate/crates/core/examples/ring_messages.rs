//! The wire format and the ring on its own: a toy node that only averages
//! what it inherits, a client failure mid-run, and the byte ledger.
//!
//! cargo run --example ring_messages

use drdfl::class_stats::ClassStats;
use drdfl::ring::{
    merge_learngene, FaultEvent, Precision, Ring, RingConfig, RingMessage, RingMode, RingNode, RingTopology,
};

struct Averager {
    id: usize,
    phi: Vec<f64>,
}

impl RingNode for Averager {
    fn step(&mut self, round: usize, inherited: Option<&RingMessage>) -> drdfl::Result<RingMessage> {
        if let Some(m) = inherited {
            merge_learngene(&mut self.phi, &m.learngene)?;
        }
        Ok(RingMessage {
            round: round as u32,
            sender: self.id as u32,
            learngene: self.phi.clone(),
            stats: ClassStats {
                classes: 2,
                dim: 1,
                means: vec![0.0, 1.0],
                logvars: vec![0.0, 0.0],
            },
        })
    }
}

fn main() -> drdfl::Result<()> {
    let msg = Averager { id: 0, phi: vec![0.25; 10] }.step(0, None)?;
    let bytes = msg.encode(Precision::F32)?;
    println!("message: {} bytes, header {:?}", bytes.len(), &bytes[..4]);
    assert_eq!(RingMessage::decode(&bytes)?.learngene, msg.learngene);

    let mut nodes: Vec<Averager> = (0..5).map(|id| Averager { id, phi: vec![id as f64; 10] }).collect();
    let config = RingConfig {
        mode: RingMode::Sequential,
        precision: Precision::F32,
        communicate: true,
        faults: vec!["3:2".parse::<FaultEvent>()?],
        trace_dir: None,
    };
    let mut ring = Ring::new(RingTopology::identity(5)?, config)?;
    for t in 0..6 {
        let r = ring.run_round(t, &mut nodes)?;
        let phis: Vec<f64> = nodes.iter().map(|n| n.phi[0]).collect();
        println!("round {t}: {} messages, {} bytes, {} skips, φ[0] per node {phis:.3?}", r.messages, r.bytes, r.skips);
    }
    println!("events: {:?}", ring.events());
    println!("ledger: {} messages, {} bytes", ring.ledger().messages, ring.ledger().bytes);
    Ok(())
}
