//! Finite-difference gradient checks of the Lorentz layers, the hierarchical
//! loss and the decoupled Lorentz weight decay.

use std::path::Path;

use anyhow::{bail, Result};
use lorentzian::autodiff::{GradCheckReport, Graph, Tensor, Var};
use lorentzian::hyper::{self, Curv};
use lorentzian::layers::{LorentzBatchNorm, LorentzConv2d, LorentzFeatureMap, LorentzLinear};
use lorentzian::lhier::{LhierConfig, ProxySet};
use lorentzian::optim::lorentz_decay;
use lorentzian::params::{check_gradients, Binder, ParamId, ParamKind, ParamStore};
use lorentzian::{ManifoldId, RescaleConfig, Result as LResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub const TARGETS: [&str; 6] =
    ["lorentz_linear", "lorentz_conv2d", "lorentz_conv2d_naive", "lorentz_batchnorm", "lhier_loss", "radamw_decay"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub target: String,
    pub config: usize,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckSuite {
    pub results: Vec<GradCheckResult>,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.report.passed())
    }

    /// Worst relative error per target, in [`TARGETS`] order.
    pub fn worst_by_target(&self) -> Vec<(String, f64)> {
        TARGETS
            .iter()
            .filter_map(|t| {
                let errs: Vec<f64> = self.results.iter().filter(|r| r.target == *t).map(|r| r.report.max_rel_err).collect();
                (!errs.is_empty()).then(|| (t.to_string(), errs.into_iter().fold(0.0, f64::max)))
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["target", "config", "coords", "max_rel_err", "max_abs_err", "tolerance", "status"])?;
        for r in &self.results {
            w.write_record([
                r.target.clone(),
                r.config.to_string(),
                r.report.coords_checked.to_string(),
                format!("{:.3e}", r.report.max_rel_err),
                format!("{:.3e}", r.report.max_abs_err),
                format!("{:.0e}", r.report.tol),
                if r.report.passed() { "pass" } else { "fail" }.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape")
}

/// `Σ w ⊙ y` with fixed random weights, so no output coordinate cancels out.
fn probe(g: &Graph<f64>, y: Var, w: &Tensor<f64>) -> LResult<Var> {
    let p = g.mul(y, g.constant(w.clone()))?;
    g.sum(p)
}

/// Store with one manifold and a Euclidean input tangent `[rows, dim]` that
/// enters the manifold through `exp_0`.
fn setup(rng: &mut impl Rng, dim: usize, rows: usize, input_std: f64) -> Result<(ParamStore<f64>, ManifoldId, ParamId)> {
    let mut store = ParamStore::new();
    let m = store.add_manifold("m", dim, rng.random_range(0.5..2.0), true);
    let u = store.add("input", ParamKind::Euclidean, normal_tensor(rng, &[rows, dim], input_std))?;
    Ok((store, m, u))
}

fn input_points(b: &Binder<f64>, u: ParamId, m: ManifoldId) -> LResult<Var> {
    let c = b.curv(m)?;
    hyper::exp0(b.g, b.var(u), c)
}

fn check_target(target: &str, rng: &mut ChaCha8Rng, rescale: RescaleConfig) -> Result<GradCheckReport> {
    match target {
        "lorentz_linear" => {
            let cin = rng.random_range(2..5);
            let cout = rng.random_range(2..6);
            let (mut store, m, u) = setup(rng, cin, 4, 0.8)?;
            let lin = LorentzLinear::new(&mut store, "lin", m, cin, cout, rng)?;
            store.set_value(lin.boost.v_raw, normal_tensor(rng, &[cout], 0.4))?;
            let w = normal_tensor(rng, &[4, cout + 1], 1.0);
            let ids = [u, lin.kernel.raw, lin.boost.v_raw];
            Ok(check_gradients(&store, &ids, &[m], rescale, STEP, TOL, |b| {
                let x = input_points(b, u, m)?;
                probe(b.g, lin.forward(b, x)?, &w)
            })?)
        }
        "lorentz_conv2d" | "lorentz_conv2d_naive" => {
            let naive = target.ends_with("naive");
            let cin = rng.random_range(1..4);
            let cout = rng.random_range(2..5);
            let stride = rng.random_range(1..3);
            let ksize = if rng.random_bool(0.5) { 3 } else { 2 };
            let (batch, h, wd) = (rng.random_range(1..3), rng.random_range(3..5), rng.random_range(3..5));
            let (mut store, m, u) = setup(rng, cin, batch * h * wd, 0.8)?;
            let conv = LorentzConv2d::new(&mut store, "conv", m, cin, cout, ksize, stride, 1, rng)?;
            store.set_value(conv.boost.v_raw, normal_tensor(rng, &[cout], 0.4))?;
            let ho = (h + 2 - ksize) / stride + 1;
            let wo = (wd + 2 - ksize) / stride + 1;
            let w = normal_tensor(rng, &[batch * ho * wo, cout + 1], 1.0);
            let ids = [u, conv.kernel.raw, conv.boost.v_raw];
            Ok(check_gradients(&store, &ids, &[m], rescale, STEP, TOL, |b| {
                let fm = LorentzFeatureMap { rows: input_points(b, u, m)?, batch, height: h, width: wd, manifold: m };
                let y = if naive { conv.forward_naive(b, &fm)? } else { conv.forward(b, &fm)? };
                probe(b.g, y.rows, &w)
            })?)
        }
        "lorentz_batchnorm" => {
            let dim = rng.random_range(2..5);
            let rows = rng.random_range(4..9);
            let (mut store, m, u) = setup(rng, dim, rows, 0.8)?;
            let bn = LorentzBatchNorm::new(&mut store, "bn", m)?;
            let geo = store.manifold(m).geometry();
            let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.set_value(bn.mean, Tensor::from_rows(&[geo.exp0(&shift)])?)?;
            store.set_value(bn.gamma, Tensor::full(&[1, 1], rng.random_range(0.5..1.5)))?;
            let w = normal_tensor(rng, &[rows, dim + 1], 1.0);
            let ids = [u, bn.mean, bn.gamma];
            Ok(check_gradients(&store, &ids, &[m], rescale, STEP, TOL, |b| {
                let x = input_points(b, u, m)?;
                probe(b.g, bn.forward(b, x)?, &w)
            })?)
        }
        "lhier_loss" => {
            let dim = rng.random_range(2..4);
            let rows = rng.random_range(8..13);
            let (mut store, m, u) = setup(rng, dim, rows, 1.0)?;
            let proxies = ProxySet::new(&mut store, "proxies", m, rng.random_range(3..6), 0.5, rng)?;
            let cfg = LhierConfig { proxy_count: proxies.count, margin_delta: 0.5, knn_k: 2, ..LhierConfig::default() };
            let seed = rng.random();
            Ok(check_gradients(&store, &[u, proxies.id], &[m], rescale, STEP, TOL, |b| {
                let x = input_points(b, u, m)?;
                Ok(proxies.loss(b, x, &cfg, seed)?.0)
            })?)
        }
        "radamw_decay" => {
            let dim = rng.random_range(2..5);
            let (store, m, u) = setup(rng, dim, 1, 0.8)?;
            let gl = rng.random_range(1e-3..0.2);
            let w = normal_tensor(rng, &[1, dim + 1], 1.0);
            let geo = store.manifold(m).geometry();
            let theta = geo.exp0(store.value(u).row(0));
            let want = lorentz_decay(&geo, &theta, gl, 1.0)?;
            let g = Graph::new();
            let b = Binder::new(&g, &store, true, rescale);
            let got = decay_graph(&b, input_points(&b, u, m)?, b.curv(m)?, gl)?;
            let diff = g.value(got).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if diff > 1e-10 {
                bail!("graph decay disagrees with the optimizer's decay by {diff:e}");
            }
            Ok(check_gradients(&store, &[u], &[m], rescale, STEP, TOL, |b| {
                let x = input_points(b, u, m)?;
                let c = b.curv(m)?;
                probe(b.g, decay_graph(b, x, c, gl)?, &w)
            })?)
        }
        other => bail!("unknown gradcheck target `{other}`"),
    }
}

/// Weighted centroid of `x` and the origin with weights `[1 − γλ, γλ]`.
fn decay_graph(b: &Binder<f64>, x: Var, c: Curv, gl: f64) -> LResult<Var> {
    let g = b.g;
    let wx = g.scale(x, 1.0 - gl)?;
    let zeros = g.constant(Tensor::zeros(&[1, g.shape(x)[1] - 1]));
    let o = hyper::lift(g, zeros, c)?;
    let wo = g.scale(o, gl)?;
    let s = g.add(wx, wo)?;
    let ss = hyper::minkowski(g, s, s)?;
    let nn = g.neg(ss)?;
    let den = g.sqrt(nn)?;
    let f = g.div(c.sqrt_k, den)?;
    g.mul(s, f)
}

/// `configs` random configurations of every target at float64.
pub fn run_gradcheck(cfg: &Config) -> Result<GradCheckSuite> {
    let mut results = Vec::new();
    let rescale = RescaleConfig::default_for::<f64>();
    for (ti, target) in TARGETS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 * ti as u64));
        for config in 0..cfg.gradcheck_configs {
            let report = check_target(target, &mut rng, rescale)?;
            log::debug!("{target}[{config}]: {report:?}");
            results.push(GradCheckResult { target: target.to_string(), config, report });
        }
    }
    Ok(GradCheckSuite { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_target_passes_a_few_configs() {
        let cfg = Config { gradcheck_configs: 2, ..Config::default() };
        let s = run_gradcheck(&cfg).unwrap();
        assert_eq!(s.results.len(), 2 * TARGETS.len());
        assert!(s.passed(), "{:#?}", s.worst_by_target());
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, m, u) = setup(&mut rng, 2, 3, 1.0).unwrap();
        let r = check_gradients(&store, &[u], &[m], RescaleConfig::default_for::<f64>(), STEP, TOL, |b| {
            let x = input_points(b, u, m)?;
            let v = b.g.value(x).clone();
            // a detached copy: the reverse pass sees a constant
            let y = b.g.mul(x, b.g.constant(v))?;
            b.g.sum(y)
        })
        .unwrap();
        assert!(!r.passed());
    }
}
