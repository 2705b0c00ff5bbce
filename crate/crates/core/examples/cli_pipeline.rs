//! The command-line workflow driven in-process: generate data, partition,
//! train with a fault, then evaluate and diagnose the run.
//!
//! cargo run --release --example cli_pipeline

fn main() {
    let dir = std::env::temp_dir().join("drdfl-pipeline");
    let d = dir.to_string_lossy().into_owned();
    let steps: [Vec<String>; 5] = [
        vec!["gen-data".into(), "--out".into(), format!("{d}/blobs.drdf")],
        vec!["partition".into(), "--data".into(), format!("{d}/blobs.drdf"), "--partition".into(), "dirichlet:0.3".into(), "--out".into(), format!("{d}/plan.json")],
        vec!["train".into(), "--rounds".into(), "15".into(), "--fault".into(), "5:3".into(), "--out-dir".into(), format!("{d}/run")],
        vec!["eval".into(), "--run-dir".into(), format!("{d}/run")],
        vec!["diag".into(), "--run-dir".into(), format!("{d}/run"), "--batches".into(), "10".into()],
    ];
    std::fs::create_dir_all(&dir).expect("temp dir");
    for args in steps {
        println!("$ drdfl {}", args.join(" "));
        let code = drdfl::cli::run(std::iter::once("drdfl".to_string()).chain(args));
        if code != 0 {
            std::process::exit(code);
        }
    }
}
