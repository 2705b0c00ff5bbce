//! The full objective against runs without L_PR and without L_GL.
//!
//! cargo run --release --example ablation

use drdfl::cli::{cmd_ablate, AblateArgs, RunArgs};

fn main() {
    let args = AblateArgs {
        run: RunArgs {
            rounds: Some(20),
            out_dir: std::env::temp_dir().join("drdfl-ablation"),
            ..RunArgs::default()
        },
        seeds: 2,
    };
    if let Err(e) = cmd_ablate(&args) {
        eprintln!("{}", e.error);
        std::process::exit(e.exit_code());
    }
}
