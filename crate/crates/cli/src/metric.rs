//! Metric learning on a synthetic hierarchy with a Lorentz neck, class proxies
//! and the optional hierarchical proxy regularizer.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lorentzian::autodiff::{Graph, Tensor, Var};
use lorentzian::layers::{switch_e2l, Linear, LorentzLinear};
use lorentzian::lhier::{recall_at_k, LhierConfig, ProxySet};
use lorentzian::optim::Optimizer;
use lorentzian::params::{Binder, ParamStore};
use lorentzian::{hyper, Dtype, ManifoldId, RescaleConfig, Result as LResult, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::Config;
use crate::data::{generate_tree_dataset, hierarchy_samples, Samples};
use crate::metrics::MetricsLog;
use crate::suite::relative_residual;
use crate::train::{batches, curvatures_in, ensure_dir, non_finite_loss};

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_LR: f64 = 0.01;
pub const RECALL_KS: [usize; 3] = [1, 2, 4];

/// MLP encoder → origin tangent → Lorentz linear neck, plus class proxies and
/// the hierarchical proxies.
#[derive(Debug, Clone)]
pub struct MetricModel {
    pub fc1: Linear,
    pub fc2: Linear,
    pub manifold: ManifoldId,
    pub neck: LorentzLinear,
    pub class_proxies: ProxySet,
    pub hier_proxies: ProxySet,
}

impl MetricModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &Config, in_dim: usize, classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fc1 = Linear::new(store, "fc1", in_dim, cfg.hidden_dim, &mut rng)?;
        let fc2 = Linear::new(store, "fc2", cfg.hidden_dim, cfg.embed_dim, &mut rng)?;
        let manifold = store.add_manifold("embed", cfg.embed_dim, T::c(cfg.curvature_init), true);
        let neck = LorentzLinear::new(store, "neck", manifold, cfg.embed_dim, cfg.embed_dim, &mut rng)?;
        let class_proxies = ProxySet::new(store, "class_proxies", manifold, classes, 0.5, &mut rng)?;
        let hier_proxies = ProxySet::new(store, "hier_proxies", manifold, cfg.proxy_count, 0.01, &mut rng)?;
        if cfg.fixed_curve {
            store.set_curvature_learnable(false);
        }
        Ok(Self { fc1, fc2, manifold, neck, class_proxies, hier_proxies })
    }

    /// `[B, in]` features → `[B, embed + 1]` points.
    pub fn embed<T: Scalar>(&self, b: &Binder<T>, x: Var) -> LResult<Var> {
        let y = self.fc1.forward(b, x)?;
        let y = b.g.relu(y)?;
        let y = self.fc2.forward(b, y)?;
        let y = switch_e2l(b, y, self.manifold)?;
        self.neck.forward(b, y)
    }

    /// Mean over labeled rows and wrong classes of
    /// `[d(x, p_y) − d(x, p_c) + margin]₊`.
    pub fn class_loss<T: Scalar>(&self, b: &Binder<T>, emb: Var, labels: &[Option<usize>], margin: f64) -> LResult<Var> {
        let g = b.g;
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        if rows.is_empty() {
            return Ok(g.scalar(T::zero()));
        }
        let classes = self.class_proxies.count;
        let x = g.gather_rows(emb, &rows)?;
        let c = b.curv(self.manifold)?;
        let p = self.class_proxies.rescaled(b)?;
        let d = hyper::pairwise_dist(g, x, p, c)?;
        let mut onehot = Tensor::zeros(&[rows.len(), classes]);
        let mut others = Tensor::full(&[rows.len(), classes], T::one());
        for (r, &i) in rows.iter().enumerate() {
            let y = labels[i].expect("labeled row");
            onehot.row_mut(r)[y] = T::one();
            others.row_mut(r)[y] = T::zero();
        }
        let pos = g.mul(d, g.constant(onehot))?;
        let pos = g.sum_axis(pos, 1)?;
        let h = g.sub(pos, d)?;
        let h = g.add_scalar(h, T::c(margin))?;
        let h = g.relu(h)?;
        let h = g.mul(h, g.constant(others))?;
        let s = g.sum(h)?;
        g.scale(s, T::c(1.0 / (rows.len() * (classes - 1).max(1)) as f64))
    }
}

/// Train and test samples drawn around the leaves of one synthetic tree.
pub fn load_data(cfg: &Config) -> Result<(Samples, Samples)> {
    let tree = generate_tree_dataset(cfg.tree_depth, cfg.tree_branching, cfg.tree_dim, cfg.tree_noise, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let train = hierarchy_samples(&tree, cfg.samples_per_class, cfg.sample_noise, &mut rng);
    let test = hierarchy_samples(&tree, cfg.test_per_class, cfg.sample_noise, &mut rng);
    Ok((train, test))
}

fn rows_tensor<T: Scalar>(s: &Samples, idx: &[usize]) -> Tensor<T> {
    let rows: Vec<Vec<T>> = idx.iter().map(|&i| s.x[i].iter().map(|v| T::c(*v)).collect()).collect();
    Tensor::from_rows(&rows).expect("feature rows")
}

/// Recall@k of the test embeddings for every k in [`RECALL_KS`].
pub fn evaluate<T: Scalar>(model: &MetricModel, store: &ParamStore<T>, rescale: RescaleConfig, set: &Samples) -> Result<Vec<f64>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false, rescale);
    let idx: Vec<usize> = (0..set.x.len()).collect();
    let emb = model.embed(&b, g.constant(rows_tensor::<T>(set, &idx)))?;
    let geo = store.manifold(model.manifold).geometry();
    let ev = g.value(emb).clone();
    RECALL_KS.iter().map(|&k| Ok(recall_at_k(&geo, &ev, &set.labels, k)?)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub epochs: usize,
    pub recall: Vec<f64>,
    pub final_loss: f64,
    pub min_step_loss: f64,
    pub steps: usize,
    /// Largest relative constraint residual of any proxy after any epoch.
    pub max_proxy_residual: f64,
    pub curvature: Vec<f64>,
    pub curvature_in_bounds: bool,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

pub fn train_metric(cfg: &Config, out: Option<&Path>) -> Result<MetricReport> {
    match cfg.precision {
        Dtype::F32 => run::<f32>(cfg, out),
        Dtype::F64 => run::<f64>(cfg, out),
    }
}

fn run<T: Scalar>(cfg: &Config, out: Option<&Path>) -> Result<MetricReport> {
    let (train, test) = load_data(cfg)?;
    let classes = train.labels.iter().max().map_or(0, |m| m + 1);
    if classes < 2 {
        bail!("metric learning needs at least two classes");
    }
    if !(0.0..=1.0).contains(&cfg.label_fraction) {
        bail!("label_fraction must lie in [0, 1]");
    }
    let rescale = cfg.rescale_for::<T>()?;
    let mut store = ParamStore::<T>::new();
    let model = MetricModel::new(&mut store, cfg, cfg.tree_dim, classes)?;
    let lhier_cfg = LhierConfig {
        proxy_count: cfg.proxy_count,
        margin_delta: cfg.margin_delta,
        knn_k: cfg.knn_k,
        miner_seed: cfg.miner_seed,
        proxy_init_std: 0.01,
    };
    let mut opt = Optimizer::<T>::new(cfg.optim(DEFAULT_LR))?;
    let (mut metrics, metrics_path) = match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let p = dir.join("metric_metrics.csv");
            (MetricsLog::create(&p, cfg.log_wall_clock)?, Some(p))
        }
        None => (MetricsLog::memory(), None),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let labels: Vec<Option<usize>> = {
        let mut order: Vec<usize> = (0..train.labels.len()).collect();
        order.shuffle(&mut rng);
        let keep = (cfg.label_fraction * order.len() as f64).round() as usize;
        let mut l = vec![None; order.len()];
        for &i in &order[..keep] {
            l[i] = Some(train.labels[i]);
        }
        l
    };
    let epochs = cfg.epochs.unwrap_or(DEFAULT_EPOCHS);
    let mut report = MetricReport {
        epochs,
        recall: Vec::new(),
        final_loss: f64::NAN,
        min_step_loss: f64::INFINITY,
        steps: 0,
        max_proxy_residual: 0.0,
        curvature: Vec::new(),
        curvature_in_bounds: true,
        metrics_path,
        checkpoint_path: None,
    };
    let use_lhier = cfg.lhier && cfg.lhier_weight > 0.0;
    for epoch in 1..=epochs {
        let (mut sum, mut sum_lhier, mut triplets) = (0.0, 0.0, 0usize);
        let min_batch = cfg.knn_k + 2;
        for (step, idx) in batches(train.x.len(), cfg.metric_batch_size, min_batch, &mut rng).into_iter().enumerate() {
            let g = Graph::new();
            let (loss, lh, nt, grads) = {
                let b = Binder::new(&g, &store, true, rescale);
                let emb = model.embed(&b, g.constant(rows_tensor::<T>(&train, &idx)))?;
                let batch_labels: Vec<Option<usize>> = idx.iter().map(|&i| labels[i]).collect();
                let mut loss = model.class_loss(&b, emb, &batch_labels, cfg.class_margin)?;
                let (mut lh, mut nt) = (0.0, 0);
                if use_lhier {
                    let seed = cfg.miner_seed ^ (report.steps as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                    let (l, n) = model.hier_proxies.loss(&b, emb, &lhier_cfg, seed)?;
                    lh = g.item(l).f64();
                    nt = n;
                    let l = g.scale(l, T::c(cfg.lhier_weight))?;
                    loss = g.add(loss, l)?;
                }
                let lv = g.item(loss).f64();
                if !lv.is_finite() {
                    return Err(non_finite_loss("train-metric", epoch, step, lv, &store));
                }
                if lv < 0.0 {
                    bail!("train-metric: negative loss {lv} at epoch {epoch}, step {step}");
                }
                let gr = g.backward(loss)?;
                (lv, lh, nt, b.collect(&gr))
            };
            opt.step(&mut store, &grads)
                .with_context(|| format!("optimizer step failed at epoch {epoch}, step {step}"))?;
            report.min_step_loss = report.min_step_loss.min(loss);
            report.steps += 1;
            sum += loss * idx.len() as f64;
            sum_lhier += lh * idx.len() as f64;
            triplets += nt;
        }
        let n = train.x.len() as f64;
        let recall = evaluate(&model, &store, rescale, &test)?;
        let geo = store.manifold(model.manifold).geometry();
        let proxies = store.value(model.hier_proxies.id);
        let classp = store.value(model.class_proxies.id);
        let res = (0..proxies.rows())
            .map(|r| relative_residual(&geo, proxies.row(r)))
            .chain((0..classp.rows()).map(|r| relative_residual(&geo, classp.row(r))))
            .fold(0.0, f64::max);
        report.max_proxy_residual = report.max_proxy_residual.max(res);
        metrics.log(epoch, "train", "loss", sum / n)?;
        if use_lhier {
            metrics.log(epoch, "train", "lhier_loss", sum_lhier / n)?;
            metrics.log(epoch, "train", "triplets", triplets as f64)?;
        }
        metrics.log(epoch, "train", "proxy_residual", res)?;
        for (k, r) in RECALL_KS.iter().zip(&recall) {
            metrics.log(epoch, "test", &format!("recall@{k}"), *r)?;
        }
        metrics.log_curvatures(epoch, &store)?;
        report.curvature.push(store.manifold(model.manifold).k().f64());
        report.curvature_in_bounds &= curvatures_in(&store, 1e-3, 1e3);
        log::info!("epoch {epoch}: loss {:.4}, recall@1 {:.3}", sum / n, recall[0]);
        report.final_loss = sum / n;
        report.recall = recall;
    }
    if let Some(dir) = out {
        let p = dir.join("metric.ckpt");
        checkpoint::save(&p, &store)?;
        report.checkpoint_path = Some(p);
    }
    Ok(report)
}

/// Test Recall@k of a saved metric model, rebuilt from `cfg`.
pub fn eval_metric(cfg: &Config, ckpt: &Path) -> Result<(Vec<f64>, Vec<String>)> {
    match cfg.precision {
        Dtype::F32 => eval_t::<f32>(cfg, ckpt),
        Dtype::F64 => eval_t::<f64>(cfg, ckpt),
    }
}

fn eval_t<T: Scalar>(cfg: &Config, ckpt: &Path) -> Result<(Vec<f64>, Vec<String>)> {
    let (train, test) = load_data(cfg)?;
    let classes = train.labels.iter().max().map_or(0, |m| m + 1);
    let mut store = ParamStore::<T>::new();
    let model = MetricModel::new(&mut store, cfg, cfg.tree_dim, classes)?;
    let warnings = checkpoint::load(ckpt, &mut store)?;
    Ok((evaluate(&model, &store, cfg.rescale_for::<T>()?, &test)?, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        Config { tree_depth: 2, tree_branching: 2, samples_per_class: 6, test_per_class: 3, epochs: Some(2), metric_batch_size: 12, ..Config::default() }
    }

    #[test]
    fn trains_with_nonnegative_loss() {
        let dir = tempfile::tempdir().unwrap();
        let r = train_metric(&tiny(), Some(dir.path())).unwrap();
        assert!(r.min_step_loss >= 0.0);
        assert_eq!(r.recall.len(), 3);
        assert!(r.recall[0] <= r.recall[1] && r.recall[1] <= r.recall[2]);
        assert!(r.max_proxy_residual < 1e-3);
        let text = std::fs::read_to_string(r.metrics_path.unwrap()).unwrap();
        assert!(text.contains("recall@4") && text.contains("lhier_loss") && text.contains("K.embed"));
        let (recall, _) = eval_metric(&tiny(), &r.checkpoint_path.unwrap()).unwrap();
        assert_eq!(recall, r.recall);
    }

    #[test]
    fn class_loss_is_zero_when_separated_by_the_margin() {
        let mut store = ParamStore::<f64>::new();
        let cfg = Config { embed_dim: 2, proxy_count: 2, ..Config::default() };
        let model = MetricModel::new(&mut store, &cfg, 2, 2).unwrap();
        let geo = store.manifold(model.manifold).geometry();
        let protos = Tensor::from_rows(&[geo.exp0(&[0.5, 0.0]), geo.exp0(&[-0.5, 0.0])]).unwrap();
        store.set_value(model.class_proxies.id, protos).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f64>());
        let emb = model.class_proxies.rescaled(&b).unwrap();
        let p = g.value(emb).clone();
        let l = model.class_loss(&b, emb, &[Some(0), Some(1)], 0.1).unwrap();
        assert_eq!(g.item(l), 0.0);
        let l = model.class_loss(&b, emb, &[Some(1), None], 0.1).unwrap();
        assert!((g.item(l) - (geo.dist(p.row(0), p.row(1)) + 0.1)).abs() < 1e-5);
    }
}
