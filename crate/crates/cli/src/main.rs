//! Experiment runner: slices datasets into snapshot stores, trains the
//! temporal models, evaluates link prediction, and runs the smoothness
//! diagnostics. Exit codes: 0 success, 1 validation error, 2 numerical
//! abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use dynembed_core::config::{ExperimentConfig, SplitSpec, UpdateGranularity};
use dynembed_core::diagnostics;
use dynembed_core::error::Error;
use dynembed_core::experiment;
use dynembed_core::ingest;
use dynembed_core::models::{Framework, ModelCheckpoint};
use dynembed_core::norms::NormKind;

#[derive(Parser)]
#[command(
    name = "dynembed",
    about = "Dynamic graph embedding experiments over temporal snapshot sequences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a timestamped edge list and slice it into a snapshot store.
    Slice(SliceArgs),
    /// Train one model per seed on a snapshot store.
    Train(TrainArgs),
    /// Evaluate trained checkpoints: AUC/AP per test step plus R_neg.
    Eval(EvalArgs),
    /// Run the smoothness theory probes and emit distance traces.
    Diagnose(DiagnoseArgs),
    /// Train {none, fn, pn, pn-si} under identical seeds and tabulate.
    CompareNorms(CompareNormsArgs),
}

#[derive(Args)]
struct SliceArgs {
    /// Whitespace-separated edge list: src dst [weight] [timestamp].
    #[arg(long)]
    input: PathBuf,
    /// Edge-count target per slice before the day rule extends it.
    #[arg(long, default_value_t = 2000)]
    target: usize,
    /// Cut exactly at the edge-count target instead of the day boundary.
    #[arg(long)]
    no_day_rule: bool,
    /// Cap the number of snapshots (remainder folds into the last one).
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Flags mirroring the experiment config; unset flags fall back to the
/// config file and then to defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dyn-gcn | gru-gcn
    #[arg(long)]
    framework: Option<String>,
    /// none | fn | fn-nc | pn | pn-si
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    norm_scale: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    loss_lambda: Option<f64>,
    #[arg(long)]
    per_positive: Option<usize>,
    /// ratio80 | ratio60 (explicit step lists come from the config file).
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated seed list, e.g. 0,1,2,3,4.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    bptt_window: Option<usize>,
    /// per-step | per-epoch-sum
    #[arg(long)]
    update_granularity: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("invalid config {}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.framework {
            cfg.framework = v.clone();
        }
        if let Some(v) = &self.norm {
            cfg.norm = v.clone();
        }
        if let Some(v) = self.norm_scale {
            cfg.norm_scale = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.loss_lambda {
            cfg.loss_lambda = v;
        }
        if let Some(v) = self.per_positive {
            cfg.per_positive = v;
        }
        if let Some(v) = &self.split {
            cfg.split = SplitSpec::parse(v)?;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.bptt_window {
            cfg.bptt_window = v;
        }
        if let Some(v) = &self.update_granularity {
            cfg.update_granularity = match v.as_str() {
                "per-step" => UpdateGranularity::PerStep,
                "per-epoch-sum" => UpdateGranularity::PerEpochSum,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown update granularity {other:?}"
                    )))
                }
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Snapshot store produced by `slice`.
    #[arg(long)]
    store: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    store: PathBuf,
    /// Training run directory (contains config.json and seed_* folders).
    #[arg(long)]
    run: PathBuf,
    /// Override the split recorded with the run (ratio80 | ratio60).
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Optional snapshot store; without it the probes run on synthetic
    /// random sequences only.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Random (graph, features) draws for the contraction sweep.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0xC0FFEE)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareNormsArgs {
    #[arg(long)]
    store: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Restrict the table to one framework (default: both).
    #[arg(long)]
    only_framework: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Slice(args) => cmd_slice(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::CompareNorms(args) => cmd_compare_norms(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Worker threads for per-seed parallelism; the only environment knob.
fn thread_count() -> usize {
    std::env::var("DYNEMBED_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn cmd_slice(args: SliceArgs) -> Result<(), Error> {
    let list = ingest::load_edge_list(&args.input, ingest::EdgeListFormat::Konect)?;
    println!(
        "loaded {} records over {} nodes from {}",
        list.records.len(),
        list.num_nodes(),
        args.input.display()
    );
    let cfg = ingest::SliceConfig {
        target_edges_per_slice: args.target,
        day_boundary_rule: !args.no_day_rule,
        max_steps: args.max_steps,
    };
    let seq = ingest::slice(&list, &cfg)?;
    for w in &seq.warnings {
        eprintln!("warning: {w}");
    }
    ingest::persist_snapshots(&seq, &args.out_dir)?;
    println!(
        "sliced into {} snapshots (final node count {}) -> {}",
        seq.num_steps(),
        seq.final_num_nodes(),
        args.out_dir.display()
    );
    for s in &seq.snapshots {
        println!(
            "  step {:3}: {:7} nodes, {:7} merged edges",
            s.index,
            s.num_nodes,
            s.edges.len()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = args.config.resolve()?;
    let seq = ingest::load_snapshots(&args.store)?;
    let (train_steps, test_steps) = cfg.split.resolve(seq.num_steps())?;
    println!(
        "training {} ({}) on steps {:?}, holding out {:?}; seeds {:?}",
        cfg.framework, cfg.norm, train_steps, test_steps, cfg.seeds
    );
    fs::create_dir_all(&args.out_dir)?;
    write_file(
        &args.out_dir.join("config.json"),
        &serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;

    let started = Instant::now();
    let seeds = cfg.seeds.clone();
    let results = run_training_seeds(&seq, &cfg, &seeds)?;
    let mut summaries = Vec::new();
    for (seed, outcome) in seeds.iter().zip(results) {
        let seed_dir = args.out_dir.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir)?;
        outcome.checkpoint.save(&seed_dir.join("model.ckpt"))?;
        let log_csv = format!("# config_hash={} seed={seed}\n{}", cfg.hash(), outcome.log.to_csv());
        write_file(&seed_dir.join("train_log.csv"), &log_csv)?;
        println!(
            "  seed {seed}: best epoch {} (loss {:.6})",
            outcome.best_epoch, outcome.best_loss
        );
        summaries.push(serde_json::json!({
            "seed": seed,
            "best_epoch": outcome.best_epoch,
            "best_loss": outcome.best_loss,
        }));
    }
    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "wall_seconds": started.elapsed().as_secs_f64(),
        "seeds": summaries,
    });
    write_file(
        &args.out_dir.join("train_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!("checkpoints written to {}", args.out_dir.display());
    Ok(())
}

/// Seeds run as independent workers; results return in seed order.
fn run_training_seeds(
    seq: &ingest::SnapshotSequence,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<Vec<dynembed_core::training::TrainOutcome>, Error> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let slots: Mutex<Vec<Option<Result<dynembed_core::training::TrainOutcome, Error>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = thread_count().min(seeds.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= seeds.len() {
                    break;
                }
                let r = dynembed_core::training::train(seq, cfg, seeds[idx]);
                slots.lock().expect("lock")[idx] = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(seeds.len());
    for slot in slots.into_inner().expect("lock") {
        out.push(slot.expect("slot filled")?);
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let seq = ingest::load_snapshots(&args.store)?;
    let config_path = args.run.join("config.json");
    let mut cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(&config_path)?)
        .map_err(|e| Error::Format(format!("invalid {}: {e}", config_path.display())))?;
    if let Some(split) = &args.split {
        cfg.split = SplitSpec::parse(split)?;
    }
    let (train_steps, test_steps) = cfg.split.resolve(seq.num_steps())?;
    println!(
        "evaluating run {} on test steps {:?} (embeddings frozen after step {})",
        args.run.display(),
        test_steps,
        train_steps.last().unwrap()
    );

    let mut reports = Vec::new();
    let mut csv = format!("# config_hash={}\nseed,step,metric,value\n", cfg.hash());
    for &seed in &cfg.seeds {
        let ckpt_path = args.run.join(format!("seed_{seed}")).join("model.ckpt");
        let ckpt = ModelCheckpoint::load(&ckpt_path)?;
        let report = experiment::evaluate_checkpoint(&seq, &cfg, &ckpt)?;
        let body = report.to_csv();
        csv.push_str(body.split_once('\n').map(|x| x.1).unwrap_or(""));
        println!(
            "  seed {seed}: auc {:.4}, ap {:.4}, rneg avg {:?}",
            report.auc_mean, report.ap_mean, report.rneg_average
        );
        reports.push(report);
    }
    let refs: Vec<&_> = reports.iter().collect();
    let summary = experiment::summarize_reports(&seq, &cfg, &refs)?;
    let run_id = format!(
        "{:016x}",
        dynembed_core::config::fnv1a64(
            format!("{}:{:?}", summary.config_hash, cfg.seeds).as_bytes()
        )
    );
    fs::create_dir_all(&args.out_dir)?;
    write_file(&args.out_dir.join("metrics.csv"), &csv)?;
    let mut doc = serde_json::to_value(&summary).expect("summary serializes");
    doc["run_id"] = serde_json::Value::String(run_id);
    doc["config"] = serde_json::to_value(&cfg).expect("config serializes");
    write_file(
        &args.out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&doc).expect("doc serializes"),
    )?;
    println!(
        "mean auc {:.4} (std {:.4}), mean ap {:.4} (std {:.4}) -> {}",
        summary.auc.mean,
        summary.auc.std,
        summary.ap.mean,
        summary.ap.std,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), Error> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    fs::create_dir_all(&args.out_dir)?;

    // contraction sweep over random graphs
    let mut worst_rel = f64::NEG_INFINITY;
    let mut worst_lemma1: f64 = 0.0;
    let mut worst_q = f64::INFINITY;
    for trial in 0..args.trials {
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=8);
        let p = [0.1, 0.3, 0.6][rng.random_range(0..3)];
        let s = diagnostics::random_er_snapshot(n, p, &mut rng);
        let x = diagnostics::random_features(n, d, 3.0, &mut rng);
        let adj = dynembed_core::graph::row_normalize(&s);
        let before = diagnostics::weighted_smoothness_distance(&x, &adj)?;
        let violation = diagnostics::contraction_violation(&x, &adj)?;
        worst_rel = worst_rel.max(violation / before.abs().max(1e-300));
        worst_lemma1 = worst_lemma1.max(diagnostics::lemma1_check(&x, &adj)?);
        worst_q = worst_q.min(diagnostics::lemma2_check(&s, 1000, trial as u64)?);
    }
    println!(
        "contraction sweep: {} trials, worst relative violation {worst_rel:.3e}",
        args.trials
    );
    println!("gradient identity residual: {worst_lemma1:.3e}");
    println!("hessian bound min quadratic form: {worst_q:.3e}");
    let theory_ok = worst_rel <= 1e-9 && worst_lemma1 < 1e-10 && worst_q >= -1e-9;

    // two-arm distance traces
    let mut trace_ok = true;
    for fw in [Framework::DynGcn, Framework::GruGcn] {
        let seq = match &args.store {
            Some(dir) => ingest::load_snapshots(dir)?,
            None => diagnostics::random_er_sequence(5, 14, 3, 0.3, &mut rng),
        };
        for norm in [NormKind::None, NormKind::FeatureNorm] {
            let trace = diagnostics::corollary1_trace(&seq, fw, norm, 32, args.seed)?;
            let name = format!("trace_{}_{}.csv", fw.name(), norm.name());
            let body = format!("# seed={}\n{}", args.seed, trace.to_csv());
            write_file(&args.out_dir.join(&name), &body)?;
            if norm == NormKind::None {
                let holds = trace.per_step_holds(1e-9) && trace.summed_holds(1e-9);
                trace_ok &= holds;
                println!(
                    "{} two-arm trace: per-step and summed inequalities {}",
                    fw.name(),
                    if holds { "hold" } else { "VIOLATED" }
                );
            }
        }
    }

    // normalization scaling smoke test: timing should grow linearly in n
    let d = 32;
    let mut timing_csv = String::from("rows,millis\n");
    let mut timings = Vec::new();
    for &n in &[50_000usize, 100_000, 200_000] {
        let base: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let mut data = base.clone();
            let t0 = Instant::now();
            dynembed_core::norms::feature_norm_values(&mut data, n, d);
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        timing_csv.push_str(&format!("{n},{best}\n"));
        timings.push(best);
    }
    write_file(&args.out_dir.join("norm_timing.csv"), &timing_csv)?;
    let ratios: Vec<f64> = timings.windows(2).map(|w| w[1] / w[0]).collect();
    let in_band = ratios.iter().all(|r| (1.3..=3.0).contains(r));
    println!(
        "normalization doubling-time ratios {:?} ({}within the [1.3, 3.0] linear-growth band)",
        ratios
            .iter()
            .map(|r| (r * 100.0).round() / 100.0)
            .collect::<Vec<_>>(),
        if in_band { "" } else { "NOT " }
    );

    if !theory_ok || !trace_ok {
        return Err(Error::NonFinite(
            "theory probe violated its bound; see output above".into(),
        ));
    }
    println!("diagnostics written to {}", args.out_dir.display());
    Ok(())
}

fn cmd_compare_norms(args: CompareNormsArgs) -> Result<(), Error> {
    let base = args.config.resolve()?;
    let seq = ingest::load_snapshots(&args.store)?;
    let frameworks = match &args.only_framework {
        Some(f) => vec![Framework::parse(f)?],
        None => vec![Framework::DynGcn, Framework::GruGcn],
    };
    let norms = ["none", "fn", "pn", "pn-si"];
    let mut csv = format!(
        "# base_config_hash={} seeds={:?}\nframework,norm,auc_mean,auc_std,ap_mean,ap_std,rneg_avg_mean,rneg_latest_mean\n",
        base.hash(),
        base.seeds
    );
    fs::create_dir_all(&args.out_dir)?;
    for fw in &frameworks {
        for norm in &norms {
            let cfg = ExperimentConfig {
                framework: fw.name().into(),
                norm: (*norm).into(),
                ..base.clone()
            };
            let (summary, _) = experiment::run_experiment(&seq, &cfg, thread_count())?;
            println!(
                "{} + {:5}: auc {:.4} (std {:.4}), ap {:.4}, rneg avg {:.4}",
                fw.name(),
                norm,
                summary.auc.mean,
                summary.auc.std,
                summary.ap.mean,
                summary.rneg_average.mean
            );
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                fw.name(),
                norm,
                summary.auc.mean,
                summary.auc.std,
                summary.ap.mean,
                summary.ap.std,
                summary.rneg_average.mean,
                summary.rneg_latest.mean
            ));
            write_file(
                &args
                    .out_dir
                    .join(format!("summary_{}_{}.json", fw.name(), norm)),
                &serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )?;
        }
    }
    write_file(&args.out_dir.join("comparison.csv"), &csv)?;
    println!(
        "comparison table -> {}",
        args.out_dir.join("comparison.csv").display()
    );
    Ok(())
}
