//! Joint embedding and curvature learning of a synthetic tree, used to contrast
//! the ordered curvature step with the naive one.

use std::path::{Path, PathBuf};

use anyhow::Result;
use lorentzian::autodiff::{Graph, Tensor};
use lorentzian::optim::{OptimKind, Optimizer};
use lorentzian::params::{Binder, ParamKind, ParamStore};
use lorentzian::{hyper, Dtype, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::data::generate_tree_dataset;
use crate::metrics::MetricsLog;
use crate::suite::relative_residual;
use crate::train::ensure_dir;

pub const DEFAULT_LR: f64 = 0.05;
pub const LOG_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedReport {
    pub mode: &'static str,
    pub steps_completed: usize,
    pub final_loss: f64,
    /// Largest relative constraint residual over all nodes and steps.
    pub max_residual: f64,
    pub final_residual: f64,
    /// Non-finite loss, gradient or parameter encountered.
    pub non_finite: bool,
    pub failure: Option<String>,
    /// Mean `|d − d_tree| / d_tree` over node pairs at the end.
    pub distortion: f64,
    pub k_initial: f64,
    pub k_final: f64,
    pub metrics_path: Option<PathBuf>,
}

impl EmbedReport {
    pub fn mode_name(naive: bool) -> &'static str {
        if naive {
            "naive"
        } else {
            "ordered"
        }
    }
}

pub fn embed_tree(cfg: &Config, out: Option<&Path>) -> Result<EmbedReport> {
    match cfg.precision {
        Dtype::F32 => run::<f32>(cfg, out),
        Dtype::F64 => run::<f64>(cfg, out),
    }
}

fn worst_residual<T: Scalar>(store: &ParamStore<T>) -> f64 {
    let h = &store.manifolds()[0];
    let geo = h.geometry();
    let x = store.value(store.ids().next().expect("one slot"));
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            if row.iter().all(|v| v.is_finite()) {
                relative_residual(&geo, row)
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn run<T: Scalar>(cfg: &Config, out: Option<&Path>) -> Result<EmbedReport> {
    let tree = generate_tree_dataset(cfg.tree_depth, cfg.tree_branching, cfg.tree_dim, cfg.tree_noise, cfg.seed)?;
    let n = tree.len();
    let dim = cfg.embed_space_dim;
    let mut store = ParamStore::<T>::new();
    let m = store.add_manifold("tree", dim, T::c(cfg.curvature_init), !cfg.fixed_curve);
    let geo = store.manifold(m).geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 0.1).expect("positive std");
    let rows: Vec<Vec<T>> =
        (0..n).map(|_| geo.exp0(&(0..dim).map(|_| T::c(normal.sample(&mut rng))).collect::<Vec<_>>())).collect();
    let nodes = store.add("nodes", ParamKind::Lorentz(m), Tensor::from_rows(&rows)?)?;

    let (mut left, mut right, mut target) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            left.push(i);
            right.push(j);
            target.push(tree.dist[i][j]);
        }
    }
    let pairs = target.len();
    let t = Tensor::new(vec![pairs, 1], target.iter().map(|v| T::c(*v)).collect())?;
    let w = Tensor::new(vec![pairs, 1], target.iter().map(|v| T::c(1.0 / (v * v * pairs as f64))).collect())?;

    let mut ocfg = cfg.optim(DEFAULT_LR);
    if cfg.lr.is_none() && ocfg.kind == OptimKind::Rsgd {
        ocfg.lr = 0.5;
    }
    let mut opt = Optimizer::<T>::new(ocfg)?;
    let mode = EmbedReport::mode_name(cfg.naive_curvature_optim);
    let (mut metrics, metrics_path) = match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let p = dir.join(format!("embed_{mode}_metrics.csv"));
            (MetricsLog::create(&p, cfg.log_wall_clock)?, Some(p))
        }
        None => (MetricsLog::memory(), None),
    };
    let mut report = EmbedReport {
        mode,
        steps_completed: 0,
        final_loss: f64::NAN,
        max_residual: worst_residual(&store),
        final_residual: 0.0,
        non_finite: false,
        failure: None,
        distortion: f64::NAN,
        k_initial: store.manifold(m).k().f64(),
        k_final: f64::NAN,
        metrics_path,
    };
    for step in 1..=cfg.embed_steps {
        let g = Graph::new();
        let (loss, grads, dist) = {
            let b = Binder::new(&g, &store, true, cfg.rescale_for::<T>()?);
            let c = b.curv(m)?;
            let x = b.var(nodes);
            let xi = g.gather_rows(x, &left)?;
            let xj = g.gather_rows(x, &right)?;
            let d = hyper::dist(&g, xi, xj, c)?;
            let d = g.reshape(d, &[pairs, 1])?;
            let e = g.sub(d, g.constant(t.clone()))?;
            let e = g.square(e)?;
            let e = g.mul(e, g.constant(w.clone()))?;
            let loss = g.sum(e)?;
            let lv = g.item(loss).f64();
            if !lv.is_finite() {
                report.non_finite = true;
                report.failure = Some(format!("non-finite loss at step {step}"));
                break;
            }
            let gr = g.backward(loss)?;
            (lv, b.collect(&gr), g.value(d).clone())
        };
        report.final_loss = loss;
        report.distortion =
            dist.data().iter().zip(&target).map(|(d, t)| (d.f64() - t).abs() / t).sum::<f64>() / pairs as f64;
        if !grads.all_finite() {
            report.non_finite = true;
            report.failure = Some(format!("non-finite gradient at step {step}"));
            break;
        }
        if let Err(e) = opt.step(&mut store, &grads) {
            report.non_finite = true;
            report.failure = Some(format!("step {step}: {e}"));
            break;
        }
        report.steps_completed = step;
        let res = worst_residual(&store);
        report.max_residual = report.max_residual.max(res);
        report.final_residual = res;
        if !res.is_finite() {
            report.non_finite = true;
            report.failure = Some(format!("non-finite parameters after step {step}"));
            break;
        }
        if step % LOG_EVERY == 0 || step == cfg.embed_steps {
            metrics.log(step, mode, "loss", loss)?;
            metrics.log(step, mode, "residual", res)?;
            metrics.log(step, mode, "distortion", report.distortion)?;
            metrics.log(step, mode, &format!("K.{}", store.manifold(m).name()), store.manifold(m).k().f64())?;
        }
    }
    report.k_final = store.manifold(m).k().f64();
    metrics.log(report.steps_completed, mode, "non_finite", if report.non_finite { 1.0 } else { 0.0 })?;
    metrics.log(report.steps_completed, mode, "max_residual", report.max_residual)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_steps_stay_on_the_manifold() {
        let cfg = Config { tree_depth: 2, tree_branching: 2, embed_steps: 60, ..Config::default() };
        let r = embed_tree(&cfg, None).unwrap();
        assert!(!r.non_finite, "{:?}", r.failure);
        assert_eq!(r.steps_completed, 60);
        assert!(r.max_residual <= 1e-3, "{r:?}");
        assert!(r.k_final != r.k_initial);
    }

    #[test]
    fn fitting_reduces_distortion() {
        let cfg = Config { tree_depth: 2, tree_branching: 2, embed_steps: 5, precision: Dtype::F64, ..Config::default() };
        let early = embed_tree(&cfg, None).unwrap();
        let late = embed_tree(&Config { embed_steps: 200, ..cfg }, None).unwrap();
        assert!(late.final_loss < early.final_loss);
        assert!(late.distortion < early.distortion);
    }
}
