//! Reverse-mode differentiation on a tiny graph, then one of the model
//! losses with its gradient.
//!
//! cargo run --example autodiff_basics

use drdfl::autodiff::{Tape, Tensor};
use drdfl::losses::loss_kl;

fn main() -> drdfl::Result<()> {
    // loss = Σ tanh(x·w)²
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?);
    let w = tape.param(&Tensor::matrix(3, 1, vec![0.1, 0.2, -0.3])?);
    let h = tape.matmul(x, w)?;
    let a = tape.tanh(h);
    let sq = tape.square(a);
    let loss = tape.sum(sq);
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.scalar(loss));
    println!("d loss / d w = {:?}", grads.get(w).unwrap());

    // KL(N(μ, σ²) ‖ N(0, I)) for one row, gradient w.r.t. μ is μ itself.
    let mut tape = Tape::new();
    let mu = tape.param(&Tensor::matrix(1, 2, vec![1.0, -0.5])?);
    let logvar = tape.param(&Tensor::matrix(1, 2, vec![0.0, 0.0])?);
    let kl = loss_kl(&mut tape, mu, logvar)?;
    let grads = tape.backward(kl)?;
    println!("KL = {:.6} (closed form 0.625)", tape.scalar(kl));
    println!("d KL / d μ = {:?}", grads.get(mu).unwrap());
    Ok(())
}
