//! Efficient vs naive Lorentz convolution: equivalence, then timing and memory.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use lorentzian::autodiff::{Graph, Tensor};
use lorentzian::layers::{LorentzConv2d, LorentzFeatureMap};
use lorentzian::params::{Binder, Grads, ParamStore};
use lorentzian::{ManifoldId, RescaleConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::alloc;
use crate::config::Config;

pub const VALUE_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPath {
    Efficient,
    Naive,
}

impl ConvPath {
    pub fn name(self) -> &'static str {
        match self {
            ConvPath::Efficient => "efficient",
            ConvPath::Naive => "naive",
        }
    }
}

/// A Lorentz convolution plus one random input batch on its manifold.
pub struct ConvProblem {
    pub store: ParamStore<f64>,
    pub conv: LorentzConv2d,
    pub manifold: ManifoldId,
    pub input: Tensor<f64>,
    pub batch: usize,
    pub size: usize,
}

impl ConvProblem {
    pub fn new(cfg: &Config) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let manifold = store.add_manifold("bench", cfg.bench_cin, cfg.curvature_init, true);
        let conv = LorentzConv2d::new(
            &mut store,
            "conv",
            manifold,
            cfg.bench_cin,
            cfg.bench_cout,
            cfg.bench_ksize,
            1,
            cfg.bench_ksize / 2,
            &mut rng,
        )?;
        let normal = Normal::new(0.0, 0.3).expect("positive std");
        let vel: Vec<f64> = (0..cfg.bench_cout).map(|_| normal.sample(&mut rng)).collect();
        store.set_value(conv.boost.v_raw, Tensor::vector(vel))?;
        let geo = store.manifold(manifold).geometry();
        let (batch, size) = (cfg.bench_batch, cfg.bench_size);
        let rows: Vec<Vec<f64>> = (0..batch * size * size)
            .map(|_| {
                let u: Vec<f64> = (0..cfg.bench_cin).map(|_| normal.sample(&mut rng)).collect();
                geo.exp0(&u)
            })
            .collect();
        Ok(Self { store, conv, manifold, input: Tensor::from_rows(&rows)?, batch, size })
    }

    /// Forward and backward through one path; returns the output and the
    /// parameter gradients of `Σ output`.
    pub fn run(&self, path: ConvPath) -> Result<(Tensor<f64>, Grads<f64>)> {
        let g = Graph::new();
        let b = Binder::new(&g, &self.store, true, RescaleConfig::default_for::<f64>());
        let fm = LorentzFeatureMap {
            rows: g.constant(self.input.clone()),
            batch: self.batch,
            height: self.size,
            width: self.size,
            manifold: self.manifold,
        };
        let out = match path {
            ConvPath::Efficient => self.conv.forward(&b, &fm)?,
            ConvPath::Naive => self.conv.forward_naive(&b, &fm)?,
        };
        let loss = g.sum(out.rows)?;
        let gr = g.backward(loss)?;
        let value = g.value(out.rows).clone();
        Ok((value, b.collect(&gr)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equivalence {
    pub max_value_diff: f64,
    /// Relative to the larger gradient magnitude, floored at 1.
    pub max_grad_diff: f64,
}

impl Equivalence {
    pub fn passed(&self) -> bool {
        self.max_value_diff <= VALUE_TOL && self.max_grad_diff <= GRAD_TOL
    }
}

pub fn equivalence(p: &ConvProblem) -> Result<Equivalence> {
    let (ve, ge) = p.run(ConvPath::Efficient)?;
    let (vn, gn) = p.run(ConvPath::Naive)?;
    let max_value_diff = ve.data().iter().zip(vn.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut max_grad_diff = 0.0f64;
    for id in p.store.ids() {
        match (ge.param(id), gn.param(id)) {
            (Some(a), Some(b)) => {
                for (x, y) in a.data().iter().zip(b.data()) {
                    max_grad_diff = max_grad_diff.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
                }
            }
            (None, None) => {}
            _ => max_grad_diff = f64::INFINITY,
        }
    }
    let (ka, kb) = (ge.kappa(p.manifold), gn.kappa(p.manifold));
    match (ka, kb) {
        (Some(a), Some(b)) => max_grad_diff = max_grad_diff.max((a - b).abs() / a.abs().max(b.abs()).max(1.0)),
        (None, None) => {}
        _ => max_grad_diff = f64::INFINITY,
    }
    Ok(Equivalence { max_value_diff, max_grad_diff })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathTiming {
    pub path: ConvPath,
    pub median_seconds: f64,
    pub runs: Vec<f64>,
    /// Peak heap growth during one run, when the counting allocator is installed.
    pub peak_bytes: Option<usize>,
}

fn timing(path: ConvPath, runs: Vec<f64>, peak: usize) -> PathTiming {
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    PathTiming { path, median_seconds: sorted[sorted.len() / 2], runs, peak_bytes: alloc::installed().then_some(peak) }
}

fn timed_run(p: &ConvProblem, path: ConvPath) -> Result<(f64, usize)> {
    let base = alloc::current_bytes();
    alloc::reset_peak();
    let t0 = Instant::now();
    let out = p.run(path)?;
    let secs = t0.elapsed().as_secs_f64();
    let peak = alloc::peak_bytes().saturating_sub(base);
    drop(out);
    Ok((secs, peak))
}

pub fn time_path(p: &ConvProblem, path: ConvPath, reps: usize) -> Result<PathTiming> {
    p.run(path)?;
    let mut runs = Vec::with_capacity(reps);
    let mut peak = 0usize;
    for _ in 0..reps {
        let (secs, bytes) = timed_run(p, path)?;
        runs.push(secs);
        peak = peak.max(bytes);
    }
    Ok(timing(path, runs, peak))
}

/// Times both paths with their runs interleaved, so slow drifts in machine
/// load hit both alike.
pub fn time_both(p: &ConvProblem, reps: usize) -> Result<(PathTiming, PathTiming)> {
    let paths = [ConvPath::Efficient, ConvPath::Naive];
    let mut runs = [Vec::with_capacity(reps), Vec::with_capacity(reps)];
    let mut peak = [0usize; 2];
    for path in paths {
        p.run(path)?;
    }
    for r in 0..reps {
        for i in 0..2 {
            let j = (i + r) % 2;
            let (secs, bytes) = timed_run(p, paths[j])?;
            runs[j].push(secs);
            peak[j] = peak[j].max(bytes);
        }
    }
    let [re, rn] = runs;
    Ok((timing(paths[0], re, peak[0]), timing(paths[1], rn, peak[1])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub equivalence: Equivalence,
    pub efficient: PathTiming,
    pub naive: PathTiming,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.naive.median_seconds / self.efficient.median_seconds
    }
}

/// Equivalence check first; a failure aborts before any timing.
pub fn bench_conv(cfg: &Config) -> Result<BenchReport> {
    let p = ConvProblem::new(cfg)?;
    let eq = equivalence(&p)?;
    if !eq.passed() {
        bail!(
            "efficient and naive convolutions disagree: value diff {:.3e} (tol {VALUE_TOL:e}), gradient diff {:.3e} (tol {GRAD_TOL:e})",
            eq.max_value_diff,
            eq.max_grad_diff
        );
    }
    let (efficient, naive) = time_both(&p, cfg.bench_reps)?;
    Ok(BenchReport { equivalence: eq, efficient, naive })
}

pub fn write_report(path: &Path, cfg: &Config, r: &BenchReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path", "batch", "size", "cin", "cout", "ksize", "median_seconds", "peak_bytes", "max_value_diff", "max_grad_diff"])?;
    for t in [&r.efficient, &r.naive] {
        w.write_record([
            t.path.name().to_string(),
            cfg.bench_batch.to_string(),
            cfg.bench_size.to_string(),
            cfg.bench_cin.to_string(),
            cfg.bench_cout.to_string(),
            cfg.bench_ksize.to_string(),
            format!("{:.6}", t.median_seconds),
            t.peak_bytes.map_or_else(|| "na".into(), |b| b.to_string()),
            format!("{:e}", r.equivalence.max_value_diff),
            format!("{:e}", r.equivalence.max_grad_diff),
        ])?;
    }
    w.flush()?;
    Ok(())
}
