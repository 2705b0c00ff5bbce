//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or input problems (bad flags, missing
//! files, invalid configuration), 1 failures while running. Errors are
//! written to stderr as one JSON object.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_external, make_blobs, Dataset, Format};
use crate::error::{Error, Result};
use crate::eval::{
    check_rate, descent_margin, estimate_l1, estimate_sigma2, evaluate, heterogeneity_metrics, lr_bound, median,
    AccuracyReport, ConvergenceDiagnostics, Heterogeneity,
};
use crate::class_stats::ClassGaussianBank;
use crate::networks::ClientModel;
use crate::orchestrator::{run_experiment, Client, Outputs, Summary, TrainConfig};
use crate::partition::{partition, PartitionPlan, Scheme};
use crate::ring::{FaultEvent, RingMode};
use crate::seeds::{self, Stream};

#[derive(Debug, Parser)]
#[command(name = "drdfl", version, about = "Ring-topology decentralized federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a Gaussian-blobs dataset file.
    GenData(GenDataArgs),
    /// Split a dataset across clients and write the plan as JSON.
    Partition(PartitionArgs),
    /// Run an experiment.
    Train(RunArgs),
    /// Recompute accuracies from a finished run directory.
    Eval(RunDirArgs),
    /// Estimate convergence quantities for a finished run.
    Diag(DiagArgs),
    /// Full model against runs without L_PR and without L_GL.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 6.0)]
    pub sep: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub clients: usize,
    /// `dirichlet:<beta>` or `shard:<s>`.
    #[arg(long, default_value = "shard:2")]
    pub partition: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by commands that run experiments; each overrides the
/// corresponding config-file value.
#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// TOML run configuration, or a `manifest.json` from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `sequential` or `parallel`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub partition: Option<String>,
    /// `round:client` takes a client down from that round; repeatable.
    #[arg(long = "fault")]
    pub faults: Vec<String>,
    /// Disable communication (the local-only baseline).
    #[arg(long)]
    pub local_only: bool,
    #[arg(long, default_value = "runs/latest")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunDirArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Minibatches for the gradient-variance estimate.
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    /// Random pairs for the Lipschitz estimate.
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub radius: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of seeds per arm, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// DRDF file; when absent, blobs are generated from the fields below.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::per_class")]
    pub per_class: usize,
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    #[serde(default = "defaults::separation")]
    pub separation: f64,
}

mod defaults {
    pub fn classes() -> usize {
        4
    }
    pub fn per_class() -> usize {
        200
    }
    pub fn dim() -> usize {
        8
    }
    pub fn separation() -> f64 {
        6.0
    }
    pub fn partition() -> String {
        "shard:2".into()
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            classes: defaults::classes(),
            per_class: defaults::per_class(),
            dim: defaults::dim(),
            separation: defaults::separation(),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "defaults::partition")]
    pub partition: String,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            partition: defaults::partition(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a TOML config, or the config embedded in a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest = serde_json::from_str(&text)?;
            Ok(manifest.config)
        } else {
            Self::from_toml(&text)
        }
    }

    fn apply(&mut self, args: &RunArgs) -> Result<()> {
        if let Some(s) = args.seed {
            self.train.seed = s;
        }
        if let Some(m) = &args.mode {
            self.train.mode = m.parse::<RingMode>()?;
        }
        if let Some(r) = args.rounds {
            self.train.rounds = r;
        }
        if let Some(c) = args.clients {
            self.train.clients = c;
        }
        if let Some(p) = &args.partition {
            self.partition = p.clone();
        }
        for f in &args.faults {
            self.train.faults.push(f.parse::<FaultEvent>()?);
        }
        if args.local_only {
            self.train.communicate = false;
        }
        self.scheme()?;
        self.train.validate()
    }

    pub fn scheme(&self) -> Result<Scheme> {
        self.partition.parse()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        match &d.path {
            Some(p) => load_external(p, Format::Drdf),
            None => make_blobs(
                d.classes,
                d.per_class,
                d.dim,
                d.separation,
                seeds::derive(self.train.seed, Stream::Data, 0, 0),
            ),
        }
    }

    pub fn plan(&self, ds: &Dataset) -> Result<PartitionPlan> {
        partition(ds, self.train.clients, self.scheme()?, self.train.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub dataset_sha256: String,
    pub partition_sha256: String,
    pub build: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

fn build_id() -> String {
    format!(
        "{} {}",
        env!("CARGO_PKG_VERSION"),
        option_env!("DRDFL_BUILD_REV").unwrap_or("unversioned")
    )
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Failure classified for the exit code.
#[derive(Debug)]
pub struct CliError {
    pub usage: bool,
    pub error: Error,
}

impl CliError {
    fn usage(error: Error) -> Self {
        CliError { usage: true, error }
    }

    /// Configuration errors stay usage errors wherever they surface.
    fn runtime(error: Error) -> Self {
        CliError {
            usage: matches!(error, Error::Config(_)),
            error,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.usage {
            2
        } else {
            1
        }
    }
}

/// Input problems are usage errors; everything after inputs load is runtime.
trait Classify<T> {
    fn usage(self) -> std::result::Result<T, CliError>;
    fn runtime(self) -> std::result::Result<T, CliError>;
}

impl<T> Classify<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, CliError> {
        self.map_err(CliError::usage)
    }

    fn runtime(self) -> std::result::Result<T, CliError> {
        self.map_err(CliError::runtime)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn resolve_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).usage()?,
        None => RunConfig::default(),
    };
    cfg.apply(args).usage()?;
    Ok(cfg)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult<Dataset> {
    let ds = make_blobs(a.k, a.per_class, a.d, a.sep, seeds::derive(a.seed, Stream::Data, 0, 0)).usage()?;
    ds.save(&a.out).runtime()?;
    println!("wrote {} records ({} classes, D={}) to {}", ds.len(), ds.classes(), ds.dim(), a.out.display());
    Ok(ds)
}

pub fn cmd_partition(a: &PartitionArgs) -> CliResult<PartitionPlan> {
    let ds = load_external(&a.data, Format::Drdf).usage()?;
    let scheme: Scheme = a.partition.parse().usage()?;
    let plan = partition(&ds, a.clients, scheme, a.seed).runtime()?;
    fs::write(&a.out, plan.to_json().runtime()?)
        .map_err(|e| Error::io(&a.out, e))
        .runtime()?;
    let h = heterogeneity_metrics(&plan, &ds);
    println!(
        "wrote {} to {} (max pairwise TV {:.3}, mean label entropy {:.3})",
        scheme,
        a.out.display(),
        h.max_tv,
        h.entropy.iter().sum::<f64>() / h.entropy.len() as f64
    );
    Ok(plan)
}

/// Run one configured experiment into `out_dir` and write its manifest.
pub fn train_into(cfg: &RunConfig, out_dir: &Path) -> CliResult<Summary> {
    let started = now();
    let ds = Arc::new(cfg.dataset().usage()?);
    let plan = cfg.plan(&ds).runtime()?;
    let outputs = Outputs {
        dir: out_dir.to_path_buf(),
        trace_messages: false,
    };
    let result = run_experiment(&cfg.train, Arc::clone(&ds), &plan, Some(&outputs)).runtime()?;
    let plan_path = out_dir.join("plan.json");
    fs::write(&plan_path, plan.to_json().runtime()?)
        .map_err(|e| Error::io(&plan_path, e))
        .runtime()?;
    let manifest = RunManifest {
        config: cfg.clone(),
        dataset_sha256: ds.sha256(),
        partition_sha256: plan.sha256(),
        build: build_id(),
        seed: cfg.train.seed,
        started_unix: started,
        finished_unix: now(),
        outputs: vec![
            outputs.metrics(),
            outputs.summary(),
            outputs.plot(),
            outputs.models(),
            outputs.final_message(),
            plan_path,
        ],
    };
    write_json(&out_dir.join("manifest.json"), &manifest).runtime()?;
    Ok(result.summary)
}

pub fn cmd_train(a: &RunArgs) -> CliResult<Summary> {
    let cfg = resolve_config(a)?;
    let s = train_into(&cfg, &a.out_dir)?;
    let acc = &s.final_accuracy;
    println!(
        "{} rounds, {} bytes on the ring; mean Local-T {:.4}, mean Global-T {:.4}; outputs in {}",
        s.config.rounds,
        s.ledger.bytes,
        acc.mean_local_t,
        acc.mean_global_t,
        a.out_dir.display()
    );
    Ok(s)
}

#[derive(Serialize, Deserialize)]
struct SavedClient {
    model: ClientModel,
    bank: ClassGaussianBank,
}

/// Reload a finished run: config, data, plan and trained clients.
pub fn load_run(dir: &Path) -> CliResult<(RunConfig, Arc<Dataset>, PartitionPlan, Vec<Client>)> {
    let manifest: RunManifest = read_json(&dir.join("manifest.json")).usage()?;
    let cfg = manifest.config;
    let ds = Arc::new(cfg.dataset().usage()?);
    if ds.sha256() != manifest.dataset_sha256 {
        return Err(CliError::usage(Error::Config("dataset changed since the run".into())));
    }
    let plan = PartitionPlan::from_json(
        &fs::read_to_string(dir.join("plan.json"))
            .map_err(|e| Error::io(dir.join("plan.json"), e))
            .usage()?,
    )
    .usage()?;
    let train = Arc::new(cfg.train.clone());
    let mut clients = Vec::with_capacity(plan.clients());
    for m in 0..plan.clients() {
        let saved: SavedClient = read_json(&dir.join("models").join(format!("client_{m:03}.json"))).usage()?;
        clients.push(
            Client::new(m, saved.model, saved.bank, Arc::clone(&ds), plan.client_train[m].clone(), Arc::clone(&train))
                .usage()?,
        );
    }
    Ok((cfg, ds, plan, clients))
}

#[derive(Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: AccuracyReport,
    pub heterogeneity: Heterogeneity,
}

pub fn cmd_eval(a: &RunDirArgs) -> CliResult<EvalReport> {
    let (_, ds, plan, clients) = load_run(&a.run_dir)?;
    let accuracy = evaluate(&clients, &ds, &plan).runtime()?;
    let report = EvalReport {
        accuracy,
        heterogeneity: heterogeneity_metrics(&plan, &ds),
    };
    write_json(&a.run_dir.join("accuracy.json"), &report).runtime()?;
    println!("{}", serde_json::to_string_pretty(&report.accuracy).map_err(Error::from).runtime()?);
    Ok(report)
}

pub fn cmd_diag(a: &DiagArgs) -> CliResult<ConvergenceDiagnostics> {
    let (cfg, _, _, mut clients) = load_run(&a.run_dir)?;
    let summary: Summary = read_json(&a.run_dir.join("summary.json")).usage()?;
    let t = &cfg.train;
    let seed = seeds::derive(t.seed, Stream::Diagnostics, 2, 0);
    let mut sigma2 = 0.0f64;
    let mut l1 = 0.0f64;
    for c in clients.iter_mut() {
        sigma2 = sigma2.max(estimate_sigma2(c, a.batches, t.batch_size, seed).runtime()?);
        l1 = l1.max(estimate_l1(c, a.pairs, a.radius, seed).runtime()?);
    }
    let grad: Vec<f64> = summary.rounds.iter().map(|r| r.grad_norm2).collect();
    let rate = check_rate(&grad).usage()?;
    let epsilon = *rate.running_average.last().unwrap();
    let delta2: Vec<f64> = summary.rounds.iter().map(|r| r.delta2_max.unwrap_or(0.0)).collect();
    let delta2_bound = delta2.iter().copied().fold(0.0, f64::max);
    let margins = summary
        .rounds
        .windows(2)
        .map(|w| {
            descent_margin(
                w[0].loss_start,
                w[1].loss_start,
                w[0].grad_norm2_sum,
                l1,
                t.lr,
                t.local_epochs,
                sigma2,
                w[1].delta2_max.unwrap_or(0.0),
            )
        })
        .collect();
    let diag = ConvergenceDiagnostics {
        sigma2_hat: sigma2,
        delta2_hat: delta2,
        l1_hat: l1,
        grad_norm_series: grad,
        lr_bound: lr_bound(epsilon, delta2_bound, l1, t.local_epochs, sigma2),
        epsilon,
        rate,
        descent_margins: margins,
    };
    write_json(&a.run_dir.join("diagnostics.json"), &diag).runtime()?;
    println!(
        "sigma2 {:.4e}  L1 {:.4e}  epsilon {:.4e}  max delta2 {:.4e}  lr bound {}  (lr {})",
        diag.sigma2_hat,
        diag.l1_hat,
        diag.epsilon,
        delta2_bound,
        diag.lr_bound.map_or("infeasible".into(), |v| format!("{v:.4e}")),
        t.lr
    );
    Ok(diag)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub local_t: Vec<f64>,
    pub global_t: Vec<f64>,
    pub median_local_t: f64,
    pub median_global_t: f64,
}

pub fn cmd_ablate(a: &AblateArgs) -> CliResult<Vec<AblationRow>> {
    let base = resolve_config(&a.run)?;
    let arms = [("full", false, false), ("w/o L_PR", true, false), ("w/o L_GL", false, true)];
    let mut rows = Vec::new();
    for (name, no_pr, no_gl) in arms {
        let (mut local, mut global) = (Vec::new(), Vec::new());
        for s in 0..a.seeds {
            let mut cfg = base.clone();
            cfg.train.seed = base.train.seed + s;
            cfg.train.disable_pr = no_pr;
            cfg.train.disable_gl = no_gl;
            let dir = a.run.out_dir.join(name.replace(['/', ' '], "_")).join(format!("seed_{}", cfg.train.seed));
            let summary = train_into(&cfg, &dir)?;
            local.push(summary.final_accuracy.mean_local_t);
            global.push(summary.final_accuracy.mean_global_t);
        }
        rows.push(AblationRow {
            arm: name.to_string(),
            median_local_t: median(&local),
            median_global_t: median(&global),
            local_t: local,
            global_t: global,
        });
    }
    write_json(&a.run.out_dir.join("ablation.json"), &rows).runtime()?;
    println!("{:<10} {:>9} {:>9}", "arm", "Local-T", "Global-T");
    for r in &rows {
        println!("{:<10} {:>9.4} {:>9.4}", r.arm, r.median_local_t, r.median_global_t);
    }
    Ok(rows)
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(drop),
        Command::Partition(a) => cmd_partition(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Diag(a) => cmd_diag(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = if e.usage { "usage" } else { "runtime" };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.error.to_string() }));
            e.exit_code()
        }
    }
}
