//! Config-driven experiment driver behind the `evprop` binary.
//!
//! Verbs: `train`, `eval`, `sensitivity`, `gen-data`. Every CSV written gets
//! a `<name>.digest` sidecar holding the hex SHA-256 of the run's config.

mod config;

pub use config::{AdaptSection, RunConfig, SweepSection};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::adapt::{write_trace_csv, AdaptConfig, AdaptationTrace, Regularizer};
use crate::baselines::{evaluate_variants, EvalInstance, EvalSettings, Models, Variant, VariantResult};
use crate::error::{Error, Result};
use crate::model::{read_snapshot, write_snapshot, MtlNetwork, Provenance, WeightSnapshot};
use crate::synthbench::{absent_tags, add_noisy_tags, write_dataset, MetricsReport};
use crate::training::{train, write_history_csv, EpochRecord, Example};

pub const SNAPSHOT_FILE: &str = "snapshot.evps";
pub const PRIMARY_ONLY_SNAPSHOT_FILE: &str = "primary_only.evps";

/// Generated data of a run.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn generate(cfg: &RunConfig) -> Result<Data> {
    let (train, test) = cfg.benchmark.generate()?;
    Ok(Data { train, test })
}

/// Trained networks of a run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub mtl: MtlNetwork,
    pub snapshot: WeightSnapshot,
    pub history: Vec<EpochRecord>,
    pub primary_only: Option<MtlNetwork>,
    pub primary_only_history: Vec<EpochRecord>,
}

impl Trained {
    pub fn models(&self) -> Models<'_> {
        Models {
            mtl: &self.mtl,
            snapshot: &self.snapshot,
            primary_only: self.primary_only.as_ref(),
        }
    }
}

fn with_heads(examples: &[Example], heads: usize) -> Vec<Example> {
    examples
        .iter()
        .map(|ex| Example {
            x: ex.x.clone(),
            y: ex.y.clone(),
            aux: ex.aux.iter().take(heads).cloned().collect(),
        })
        .collect()
}

/// Trains the multi-task network and, when the primary-only variant is
/// requested, a network with the same trunk and primary head but no
/// auxiliary heads.
pub fn train_models(cfg: &RunConfig, data: &Data) -> Result<Trained> {
    let top = cfg.benchmark.topology(&cfg.trunk, cfg.aux_heads);
    let mut mtl = MtlNetwork::new(top, cfg.init_seed())?;
    let (snapshot, history) = train(&mut mtl, &with_heads(&data.train, cfg.aux_heads), &cfg.train)?;

    let (primary_only, primary_only_history) = if cfg.variants.contains(&Variant::PrimaryOnly) {
        let mut net = MtlNetwork::new(cfg.benchmark.topology(&cfg.trunk, 0), cfg.init_seed())?;
        let (_, hist) = train(&mut net, &with_heads(&data.train, 0), &cfg.train)?;
        (Some(net), hist)
    } else {
        (None, Vec::new())
    };
    Ok(Trained {
        mtl,
        snapshot,
        history,
        primary_only,
        primary_only_history,
    })
}

pub fn eval_settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        early_stop: cfg.adapt.early_stop(),
        two_norm: cfg.adapt.two_norm(),
        kind: cfg.benchmark.metric_kind(),
        confidence_threshold: cfg.confidence_threshold,
        workers: cfg.workers,
    }
}

pub fn eval_instances(cfg: &RunConfig, data: &Data) -> Result<Vec<EvalInstance>> {
    cfg.benchmark.eval_instances(&data.test, cfg.aux_heads)
}

/// Replaces every instance's tags by `k` extra noisy ones (fewer when the
/// instance has fewer absent tags), updating both the evidence and the
/// pruning tag set.
pub fn with_noisy_tags(cfg: &RunConfig, instances: &[EvalInstance], k: usize) -> Result<Vec<EvalInstance>> {
    instances
        .iter()
        .map(|inst| {
            let kk = k.min(absent_tags(&inst.evidence));
            let seed = cfg
                .noise_seed()
                .wrapping_mul(1_000_003)
                .wrapping_add((k as u64) << 32)
                .wrapping_add(inst.id as u64);
            let evidence = add_noisy_tags(&inst.evidence, kk, seed)?;
            let tags = cfg
                .benchmark
                .tag_set(evidence.target(crate::synthbench::TAG_HEAD).unwrap_or(&[]))?;
            Ok(EvalInstance {
                evidence,
                tags,
                ..inst.clone()
            })
        })
        .collect()
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sweep: &'static str,
    pub iterations: usize,
    pub alpha: f64,
    pub lr: f64,
    pub noise_k: usize,
    pub variant: Variant,
    pub report: MetricsReport,
    pub mean_weight_deviation: f64,
}

fn mean_deviation(result: &VariantResult) -> f64 {
    let devs: Vec<f64> = result
        .instances
        .iter()
        .filter_map(|r| r.trace.as_ref().map(AdaptationTrace::final_deviation))
        .collect();
    if devs.is_empty() {
        0.0
    } else {
        devs.iter().sum::<f64>() / devs.len() as f64
    }
}

fn run_one(
    trained: &Trained,
    instances: &[EvalInstance],
    variant: Variant,
    settings: &EvalSettings,
) -> Result<VariantResult> {
    let mut out = evaluate_variants(trained.models(), instances, &[variant], settings)?;
    out.pop()
        .ok_or_else(|| Error::Contract("evaluation produced no rows".into()))
}

/// Early-stopping variant over the iteration x lr grid.
pub fn iteration_sweep(cfg: &RunConfig, trained: &Trained, instances: &[EvalInstance]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lr in &cfg.sweep.lrs {
        for &t in &cfg.sweep.iterations {
            let mut settings = eval_settings(cfg);
            settings.early_stop = AdaptConfig {
                iterations: t,
                lr,
                ..settings.early_stop
            };
            let r = run_one(trained, instances, Variant::BpEs, &settings)?;
            rows.push(SweepRow {
                sweep: "iterations",
                iterations: t,
                alpha: 0.0,
                lr,
                noise_k: 0,
                variant: Variant::BpEs,
                mean_weight_deviation: mean_deviation(&r),
                report: r.report,
            });
        }
    }
    Ok(rows)
}

/// Two-norm variant over the alpha x lr grid.
pub fn alpha_sweep(cfg: &RunConfig, trained: &Trained, instances: &[EvalInstance]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lr in &cfg.sweep.lrs {
        for &alpha in &cfg.sweep.alphas {
            let mut settings = eval_settings(cfg);
            settings.two_norm = AdaptConfig {
                lr,
                regularizer: Regularizer::TwoNorm { alpha },
                ..settings.two_norm
            };
            let r = run_one(trained, instances, Variant::BpL2, &settings)?;
            rows.push(SweepRow {
                sweep: "alpha",
                iterations: settings.two_norm.iterations,
                alpha,
                lr,
                noise_k: 0,
                variant: Variant::BpL2,
                mean_weight_deviation: mean_deviation(&r),
                report: r.report,
            });
        }
    }
    Ok(rows)
}

/// Every evidence-consuming variant at each noisy-tag level.
pub fn noise_sweep(cfg: &RunConfig, trained: &Trained, instances: &[EvalInstance]) -> Result<Vec<SweepRow>> {
    let variants: Vec<Variant> = cfg.variants.iter().copied().filter(|v| v.uses_evidence()).collect();
    let mut rows = Vec::new();
    if variants.is_empty() {
        return Ok(rows);
    }
    let settings = eval_settings(cfg);
    for &k in &cfg.sweep.noise_k {
        let noisy = with_noisy_tags(cfg, instances, k)?;
        for r in evaluate_variants(trained.models(), &noisy, &variants, &settings)? {
            let (iterations, alpha) = match r.variant.adapt_kind() {
                Some(crate::baselines::AdaptKind::EarlyStop) => (settings.early_stop.iterations, 0.0),
                Some(crate::baselines::AdaptKind::TwoNorm) => (settings.two_norm.iterations, cfg.adapt.alpha),
                None => (0, 0.0),
            };
            rows.push(SweepRow {
                sweep: "noise",
                iterations,
                alpha,
                lr: cfg.adapt.lr,
                noise_k: k,
                variant: r.variant,
                mean_weight_deviation: mean_deviation(&r),
                report: r.report,
            });
        }
    }
    Ok(rows)
}

/// Sensitivity grid over (iterations, alpha, lr) for the two-norm variant;
/// `alpha = 0` coincides with early stopping.
pub fn sensitivity(cfg: &RunConfig, trained: &Trained, instances: &[EvalInstance]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lr in &cfg.sweep.lrs {
        for &t in &cfg.sweep.iterations {
            for &alpha in &cfg.sweep.alphas {
                let mut settings = eval_settings(cfg);
                settings.two_norm = AdaptConfig {
                    iterations: t,
                    lr,
                    regularizer: Regularizer::TwoNorm { alpha },
                    optimizer: cfg.adapt.optimizer,
                };
                let r = run_one(trained, instances, Variant::BpL2, &settings)?;
                rows.push(SweepRow {
                    sweep: "sensitivity",
                    iterations: t,
                    alpha,
                    lr,
                    noise_k: 0,
                    variant: Variant::BpL2,
                    mean_weight_deviation: mean_deviation(&r),
                    report: r.report,
                });
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------- output

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `body` as a CSV file plus its config-digest sidecar.
fn write_csv(path: &Path, cfg: &RunConfig, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w)?;
    w.flush()?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".digest");
    std::fs::write(PathBuf::from(sidecar), format!("{}\n", cfg.digest()?))?;
    Ok(())
}

pub fn write_metrics_csv<W: Write>(mut w: W, results: &[VariantResult]) -> Result<()> {
    writeln!(w, "variant,accuracy,mIoU,precision,recall,f1")?;
    for r in results {
        let m = &r.report;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.variant, m.accuracy, m.miou, m.precision, m.recall, m.f1
        )?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(
        w,
        "sweep,iterations,alpha,lr,noise_k,variant,accuracy,mIoU,precision,recall,f1,weight_deviation"
    )?;
    for r in rows {
        let m = &r.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.sweep,
            r.iterations,
            r.alpha,
            r.lr,
            r.noise_k,
            r.variant,
            m.accuracy,
            m.miou,
            m.precision,
            m.recall,
            m.f1,
            r.mean_weight_deviation
        )?;
    }
    Ok(())
}

// -------------------------------------------------------------- commands

pub fn cmd_train(cfg: &RunConfig) -> Result<Trained> {
    let data = generate(cfg)?;
    let trained = train_models(cfg, &data)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    write_snapshot(
        create(&out.join(SNAPSHOT_FILE))?,
        &trained.snapshot,
        trained.mtl.topology(),
    )?;
    write_csv(&out.join("history.csv"), cfg, |w| {
        write_history_csv(w, &trained.history, cfg.aux_heads)
    })?;
    if let Some(net) = &trained.primary_only {
        let snap = net.snapshot(Provenance {
            run_id: format!("seed-{}", cfg.train.seed),
            epoch: cfg.train.epochs,
        });
        write_snapshot(create(&out.join(PRIMARY_ONLY_SNAPSHOT_FILE))?, &snap, net.topology())?;
        write_csv(&out.join("history_primary_only.csv"), cfg, |w| {
            write_history_csv(w, &trained.primary_only_history, 0)
        })?;
    }
    if let Some(last) = trained.history.last() {
        println!(
            "final epoch {}: total {:.6} primary {:.6} aux {:?}",
            last.epoch, last.total, last.primary, last.aux
        );
    }
    println!("snapshot checksum {}", trained.snapshot.checksum());
    Ok(trained)
}

fn load_net(path: &Path, cfg: &RunConfig, heads: usize) -> Result<(MtlNetwork, WeightSnapshot)> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let (top, snap) = read_snapshot(std::io::BufReader::new(file))?;
    let expected = cfg.benchmark.topology(&cfg.trunk, heads);
    if top != expected {
        return Err(Error::Integrity(format!(
            "snapshot topology {} does not match config topology {}",
            top.describe(),
            expected.describe()
        )));
    }
    let mut net = MtlNetwork::zeros(top)?;
    net.restore(&snap)?;
    Ok((net, snap))
}

/// Loads the trained networks of a run from `snapshot` (or the output directory).
pub fn load_trained(cfg: &RunConfig, snapshot: Option<&Path>) -> Result<Trained> {
    let path = snapshot.map_or_else(|| cfg.output_dir.join(SNAPSHOT_FILE), Path::to_path_buf);
    let (mtl, snap) = load_net(&path, cfg, cfg.aux_heads)?;
    let primary_only = if cfg.variants.contains(&Variant::PrimaryOnly) {
        let p = path.with_file_name(PRIMARY_ONLY_SNAPSHOT_FILE);
        Some(load_net(&p, cfg, 0)?.0)
    } else {
        None
    };
    Ok(Trained {
        mtl,
        snapshot: snap,
        history: Vec::new(),
        primary_only,
        primary_only_history: Vec::new(),
    })
}

/// Outputs of `eval`.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub results: Vec<VariantResult>,
    pub iteration_rows: Vec<SweepRow>,
    pub alpha_rows: Vec<SweepRow>,
    pub noise_rows: Vec<SweepRow>,
}

pub fn cmd_eval(cfg: &RunConfig, trained: &Trained) -> Result<EvalOutput> {
    let data = generate(cfg)?;
    let instances = eval_instances(cfg, &data)?;
    let results = evaluate_variants(trained.models(), &instances, &cfg.variants, &eval_settings(cfg))?;
    let out = &cfg.output_dir;
    write_csv(&out.join("metrics.csv"), cfg, |w| write_metrics_csv(w, &results))?;
    for r in &results {
        if r.variant.adapt_kind().is_some() && !r.variant.prunes() {
            let traces: Vec<(usize, AdaptationTrace)> = r
                .instances
                .iter()
                .filter_map(|i| i.trace.clone().map(|t| (i.id, t)))
                .collect();
            write_csv(&out.join(format!("traces_{}.csv", r.variant)), cfg, |w| {
                write_trace_csv(w, &traces)
            })?;
        }
    }

    let adapts = |v: Variant| cfg.variants.contains(&v);
    let iteration_rows = if adapts(Variant::BpEs) {
        iteration_sweep(cfg, trained, &instances)?
    } else {
        Vec::new()
    };
    let alpha_rows = if adapts(Variant::BpL2) {
        alpha_sweep(cfg, trained, &instances)?
    } else {
        Vec::new()
    };
    let noise_rows = noise_sweep(cfg, trained, &instances)?;
    for (name, rows) in [
        ("sweep_iterations.csv", &iteration_rows),
        ("sweep_alpha.csv", &alpha_rows),
        ("sweep_noise.csv", &noise_rows),
    ] {
        if !rows.is_empty() {
            write_csv(&out.join(name), cfg, |w| write_sweep_csv(w, rows))?;
        }
    }
    for r in &results {
        println!(
            "{:<14} mIoU {:.4} accuracy {:.4}",
            r.variant.name(),
            r.report.miou,
            r.report.accuracy
        );
    }
    Ok(EvalOutput {
        results,
        iteration_rows,
        alpha_rows,
        noise_rows,
    })
}

pub fn cmd_sensitivity(cfg: &RunConfig, trained: &Trained) -> Result<Vec<SweepRow>> {
    let data = generate(cfg)?;
    let instances = eval_instances(cfg, &data)?;
    let rows = sensitivity(cfg, trained, &instances)?;
    write_csv(&cfg.output_dir.join("sensitivity.csv"), cfg, |w| {
        write_sweep_csv(w, &rows)
    })?;
    Ok(rows)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Data> {
    let data = generate(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    for (name, set) in [("train.txt", &data.train), ("test.txt", &data.test)] {
        let mut w = create(&cfg.output_dir.join(name))?;
        write_dataset(&mut w, set)?;
        w.flush()?;
    }
    Ok(data)
}

// ------------------------------------------------------------ entry point

#[derive(Debug, Parser)]
#[command(name = "evprop", version, about = "Test-time evidence back-propagation experiments")]
pub struct Cli {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluation worker threads, overriding the config.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the networks and write snapshots plus loss history.
    Train,
    /// Evaluate every variant and run the iteration, alpha and noise sweeps.
    Eval {
        /// Snapshot to evaluate (default: <out>/snapshot.evps).
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Metric over the (iterations, alpha, lr) grid.
    Sensitivity {
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Write the generated train/test sets as text files.
    GenData,
}

/// Process exit status for an error: 2 for configuration problems, 3 for
/// numeric or training failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::Adaptation { .. } => 3,
        _ => 1,
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default().resolved()?,
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed)?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w.max(1);
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Train => cmd_train(&cfg).map(drop),
        Command::Eval { snapshot } => {
            let trained = load_trained(&cfg, snapshot.as_deref())?;
            cmd_eval(&cfg, &trained).map(drop)
        }
        Command::Sensitivity { snapshot } => {
            let trained = load_trained(&cfg, snapshot.as_deref())?;
            cmd_sensitivity(&cfg, &trained).map(drop)
        }
        Command::GenData => cmd_gen_data(&cfg).map(drop),
    }
}

pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
