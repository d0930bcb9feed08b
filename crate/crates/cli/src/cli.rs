//! Command-line interface.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lorentzian::Dtype;

use crate::config::Config;
use crate::{bench, classify, embed, gradcheck, metric, suite};

#[derive(Debug, Parser)]
#[command(name = "lorentzian", version, about = "Experiments with Lorentz-model neural network layers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// `key = value` config file; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_dtype)]
    pub precision: Option<Dtype>,
    /// Output directory for CSVs and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Rescaling tightness `s`.
    #[arg(long, global = true)]
    pub tightness: Option<f64>,
    /// Override the largest admissible time component.
    #[arg(long, global = true)]
    pub xtmax: Option<f64>,
    /// Freeze every curvature at its initial value.
    #[arg(long, global = true)]
    pub fixed_curve: bool,
    /// Disable maximum-distance rescaling.
    #[arg(long, global = true)]
    pub no_scaling: bool,
    /// Update curvatures before parameters without moving them.
    #[arg(long, global = true)]
    pub naive_curvature_optim: bool,
    /// Any config key, as `KEY=VALUE`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Log progress (`RUST_LOG` takes precedence).
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Classify,
    Metric,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Randomized invariant suite at float64 and float32.
    Check {
        /// Break parallel transport to confirm the suite notices.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Finite-difference gradient checks at float64.
    Gradcheck,
    /// Efficient vs naive Lorentz convolution.
    BenchConv,
    /// Image classification with Lorentz-core bottlenecks.
    TrainClassify,
    /// Metric learning on a synthetic hierarchy.
    TrainMetric,
    /// Tree embedding with joint curvature learning.
    EmbedTree,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "classify")]
        task: Task,
    },
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    s.parse()
}

impl GlobalArgs {
    pub fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if let Some(t) = self.tightness {
            cfg.tightness = t;
        }
        if let Some(x) = self.xtmax {
            cfg.xtmax = Some(x);
        }
        cfg.fixed_curve |= self.fixed_curve;
        cfg.no_scaling |= self.no_scaling;
        cfg.naive_curvature_optim |= self.naive_curvature_optim;
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Run one command; the result is the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let mut cfg = cli.global.config()?;
    let out = &cli.global.out;
    match &cli.command {
        Command::Check { inject_fault } => {
            cfg.inject_fault |= inject_fault;
            ensure_out(out)?;
            let report = suite::run_invariant_suite(&cfg)?;
            let path = out.join("check.csv");
            report.write_csv(&path)?;
            for r in &report.results {
                println!(
                    "{:<4} {:<5} {:<38} trials {:>6}  worst {:>10.3e}  tol {:>7.0e}",
                    if r.passed() { "ok" } else { "FAIL" },
                    r.precision,
                    r.name,
                    r.trials,
                    r.worst,
                    r.tol
                );
            }
            println!("report written to {}", path.display());
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Gradcheck => {
            ensure_out(out)?;
            let s = gradcheck::run_gradcheck(&cfg)?;
            let path = out.join("gradcheck.csv");
            s.write_csv(&path)?;
            for (t, e) in s.worst_by_target() {
                println!("{:<4} {t:<22} worst rel err {e:.3e}", if e <= gradcheck::TOL { "ok" } else { "FAIL" });
            }
            println!("report written to {}", path.display());
            Ok(if s.passed() { 0 } else { 1 })
        }
        Command::BenchConv => {
            ensure_out(out)?;
            let r = bench::bench_conv(&cfg)?;
            let path = out.join("bench_conv.csv");
            bench::write_report(&path, &cfg, &r)?;
            println!(
                "equivalence: value {:.3e}, gradient {:.3e}",
                r.equivalence.max_value_diff, r.equivalence.max_grad_diff
            );
            for t in [&r.efficient, &r.naive] {
                let mem = t.peak_bytes.map_or_else(|| "n/a".to_string(), |b| format!("{:.1} MiB", b as f64 / 1048576.0));
                println!("{:<9} median {:.4} s, peak heap {mem}", t.path.name(), t.median_seconds);
            }
            println!("speedup {:.2}x; report written to {}", r.speedup(), path.display());
            Ok(0)
        }
        Command::TrainClassify => {
            let r = classify::train_classify(&cfg, Some(out))?;
            println!(
                "train accuracy {:.4}, test accuracy {:.4}, final loss {:.4e} after {} epochs",
                r.train_accuracy, r.test_accuracy, r.final_loss, r.epochs
            );
            for (name, ks) in &r.curvatures {
                println!("K.{name}: {:.4}", ks.last().copied().unwrap_or(f64::NAN));
            }
            print_paths(&r.metrics_path, &r.checkpoint_path);
            Ok(0)
        }
        Command::TrainMetric => {
            let r = metric::train_metric(&cfg, Some(out))?;
            let recalls: Vec<String> =
                metric::RECALL_KS.iter().zip(&r.recall).map(|(k, v)| format!("R@{k} {v:.4}")).collect();
            println!("{}; final loss {:.4}; K {:.4}", recalls.join(", "), r.final_loss, r.curvature.last().copied().unwrap_or(f64::NAN));
            print_paths(&r.metrics_path, &r.checkpoint_path);
            Ok(0)
        }
        Command::EmbedTree => {
            let r = embed::embed_tree(&cfg, Some(out))?;
            println!(
                "{} curvature step: {} steps, loss {:.4e}, distortion {:.4}, max residual {:.3e}, K {:.4} -> {:.4}{}",
                r.mode,
                r.steps_completed,
                r.final_loss,
                r.distortion,
                r.max_residual,
                r.k_initial,
                r.k_final,
                r.failure.as_ref().map_or_else(String::new, |f| format!("; stopped: {f}"))
            );
            print_paths(&r.metrics_path, &None);
            Ok(if r.non_finite { 1 } else { 0 })
        }
        Command::Eval { checkpoint, task } => {
            if !checkpoint.exists() {
                bail!("checkpoint {} does not exist", checkpoint.display());
            }
            let warnings = match task {
                Task::Classify => {
                    let (acc, w) = classify::eval_classify(&cfg, checkpoint)?;
                    println!("test accuracy {acc:.4}");
                    w
                }
                Task::Metric => {
                    let (recall, w) = metric::eval_metric(&cfg, checkpoint)?;
                    for (k, v) in metric::RECALL_KS.iter().zip(recall) {
                        println!("recall@{k} {v:.4}");
                    }
                    w
                }
            };
            for w in warnings {
                eprintln!("warning: {w}");
            }
            Ok(0)
        }
    }
}

fn print_paths(metrics: &Option<PathBuf>, ckpt: &Option<PathBuf>) {
    if let Some(p) = metrics {
        println!("metrics written to {}", p.display());
    }
    if let Some(p) = ckpt {
        println!("checkpoint written to {}", p.display());
    }
}
