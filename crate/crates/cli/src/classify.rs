//! Image classification with Lorentz-core bottlenecks and a prototype head.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lorentzian::autodiff::{Graph, Tensor, Var};
use lorentzian::layers::{switch_e2l, BatchNorm, Conv2d, Linear, LorentzCoreBottleneck, LorentzLinear};
use lorentzian::lhier::ProxySet;
use lorentzian::optim::Optimizer;
use lorentzian::params::{apply_updates, Binder, ParamStore};
use lorentzian::{hyper, Dtype, ManifoldId, RescaleConfig, Result as LResult, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::Config;
use crate::data::{read_lzim, stripe_images, ImageSet};
use crate::metrics::MetricsLog;
use crate::train::{argmax, batches, cross_entropy, curvatures_in, ensure_dir, non_finite_loss};

pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_LR: f64 = 0.01;

/// Conv stem → Lorentz-core bottlenecks → global average pool → projection onto
/// the head manifold → Lorentz linear neck → `−d²` to class prototypes.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<LorentzCoreBottleneck>,
    pub project: Linear,
    pub head: ManifoldId,
    pub neck: LorentzLinear,
    pub prototypes: ProxySet,
    pub channels: usize,
    pub classes: usize,
}

impl Classifier {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &Config, in_channels: usize, classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let k0 = T::c(cfg.curvature_init);
        let stem = Conv2d::new(store, "stem", in_channels, c, 3, 2, 1, &mut rng)?;
        let stem_bn = BatchNorm::new(store, "stem.bn", c)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let stride = if i == 0 { 2 } else { 1 };
                LorentzCoreBottleneck::new(store, &format!("block{i}"), c, cfg.mid_channels, c, stride, k0, &mut rng)
            })
            .collect::<LResult<Vec<_>>>()?;
        let project = Linear::new(store, "project", c, cfg.head_dim, &mut rng)?;
        let head = store.add_manifold("head", cfg.head_dim, k0, true);
        let neck = LorentzLinear::new(store, "neck", head, cfg.head_dim, cfg.head_dim, &mut rng)?;
        let prototypes = ProxySet::new(store, "prototypes", head, classes, 0.5, &mut rng)?;
        if cfg.fixed_curve {
            store.set_curvature_learnable(false);
        }
        Ok(Self { stem, stem_bn, blocks, project, head, neck, prototypes, channels: c, classes })
    }

    /// `[B, H, W, C]` images → `[B, classes]` logits.
    pub fn logits<T: Scalar>(&self, b: &Binder<T>, x: Var) -> LResult<Var> {
        let g = b.g;
        let y = self.stem.forward(b, x)?;
        let s = g.shape(y);
        let (bs, h, w) = (s[0], s[1], s[2]);
        let y = g.reshape(y, &[bs * h * w, self.channels])?;
        let y = self.stem_bn.forward(b, y)?;
        let y = g.relu(y)?;
        let mut y = g.reshape(y, &[bs, h, w, self.channels])?;
        for blk in &self.blocks {
            y = blk.forward(b, y)?;
        }
        let s = g.shape(y);
        let y = g.reshape(y, &[s[0], s[1] * s[2], s[3]])?;
        let y = g.mean_axis(y, 1)?;
        let y = g.reshape(y, &[s[0], s[3]])?;
        let y = self.project.forward(b, y)?;
        let y = switch_e2l(b, y, self.head)?;
        let y = self.neck.forward(b, y)?;
        let c = b.curv(self.head)?;
        let p = self.prototypes.rescaled(b)?;
        let d = hyper::pairwise_sq_dist(g, y, p, c)?;
        g.neg(d)
    }
}

/// Synthetic stripes unless image files are configured.
pub fn load_data(cfg: &Config) -> Result<(ImageSet, ImageSet)> {
    match (&cfg.data_path, &cfg.test_data_path) {
        (Some(tr), Some(te)) => Ok((read_lzim(tr)?, read_lzim(te)?)),
        (None, None) => Ok((
            stripe_images(cfg.train_size, cfg.image_size, cfg.image_channels, cfg.data_noise, cfg.seed.wrapping_add(1)),
            stripe_images(cfg.test_size, cfg.image_size, cfg.image_channels, cfg.data_noise, cfg.seed.wrapping_add(2)),
        )),
        _ => bail!("set both data_path and test_data_path, or neither"),
    }
}

fn image_batch<T: Scalar>(set: &ImageSet, idx: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(idx.len() * set.image_len());
    for &i in idx {
        data.extend(set.image(i).iter().map(|v| T::c(*v)));
    }
    Tensor::new(vec![idx.len(), set.height, set.width, set.channels], data).expect("image shape")
}

/// Accuracy and mean loss of the model in evaluation mode.
pub fn evaluate<T: Scalar>(
    model: &Classifier,
    store: &ParamStore<T>,
    rescale: RescaleConfig,
    set: &ImageSet,
    batch: usize,
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let g = Graph::new();
        let b = Binder::new(&g, store, false, rescale);
        let logits = model.logits(&b, g.constant(image_batch::<T>(set, chunk)))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        loss += g.item(cross_entropy(&g, logits, &labels)?).f64() * chunk.len() as f64;
        let lv = g.value(logits);
        correct += (0..chunk.len()).filter(|&r| argmax(lv.row(r)) == labels[r]).count();
    }
    Ok((correct as f64 / set.len() as f64, loss / set.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyReport {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
    /// Best-so-far train accuracy first reached at this epoch.
    pub plateau_epoch: usize,
    /// `(manifold, K per epoch)`.
    pub curvatures: Vec<(String, Vec<f64>)>,
    pub curvature_in_bounds: bool,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

pub fn train_classify(cfg: &Config, out: Option<&Path>) -> Result<ClassifyReport> {
    match cfg.precision {
        Dtype::F32 => run::<f32>(cfg, out),
        Dtype::F64 => run::<f64>(cfg, out),
    }
}

fn run<T: Scalar>(cfg: &Config, out: Option<&Path>) -> Result<ClassifyReport> {
    let (train, test) = load_data(cfg)?;
    let classes = train.classes().max(test.classes());
    if classes < 2 {
        bail!("classification needs at least two classes");
    }
    let rescale = cfg.rescale_for::<T>()?;
    let mut store = ParamStore::<T>::new();
    let model = Classifier::new(&mut store, cfg, train.channels, classes)?;
    let mut opt = Optimizer::<T>::new(cfg.optim(DEFAULT_LR))?;
    let (mut metrics, metrics_path) = match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let p = dir.join("classify_metrics.csv");
            (MetricsLog::create(&p, cfg.log_wall_clock)?, Some(p))
        }
        None => (MetricsLog::memory(), None),
    };
    let epochs = cfg.epochs.unwrap_or(DEFAULT_EPOCHS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut report = ClassifyReport {
        epochs,
        train_accuracy: 0.0,
        test_accuracy: 0.0,
        final_loss: f64::NAN,
        plateau_epoch: 0,
        curvatures: store.manifolds().iter().map(|h| (h.name().to_string(), Vec::new())).collect(),
        curvature_in_bounds: true,
        metrics_path,
        checkpoint_path: None,
    };
    let mut best = -1.0;
    for epoch in 1..=epochs {
        let mut sum = 0.0;
        for (step, idx) in batches(train.len(), cfg.batch_size, 2, &mut rng).into_iter().enumerate() {
            let g = Graph::new();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads, updates) = {
                let b = Binder::new(&g, &store, true, rescale);
                let logits = model.logits(&b, g.constant(image_batch::<T>(&train, &idx)))?;
                let loss = cross_entropy(&g, logits, &labels)?;
                let lv = g.item(loss).f64();
                if !lv.is_finite() {
                    return Err(non_finite_loss("train-classify", epoch, step, lv, &store));
                }
                let gr = g.backward(loss)?;
                (lv, b.collect(&gr), b.take_updates())
            };
            apply_updates(&mut store, updates)?;
            opt.step(&mut store, &grads)
                .with_context(|| format!("optimizer step failed at epoch {epoch}, step {step}"))?;
            sum += loss * idx.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let (train_acc, _) = evaluate(&model, &store, rescale, &train, cfg.batch_size)?;
        let (test_acc, test_loss) = evaluate(&model, &store, rescale, &test, cfg.batch_size)?;
        metrics.log(epoch, "train", "loss", train_loss)?;
        metrics.log(epoch, "train", "accuracy", train_acc)?;
        metrics.log(epoch, "test", "loss", test_loss)?;
        metrics.log(epoch, "test", "accuracy", test_acc)?;
        metrics.log_curvatures(epoch, &store)?;
        for (h, (_, series)) in store.manifolds().iter().zip(report.curvatures.iter_mut()) {
            series.push(h.k().f64());
        }
        report.curvature_in_bounds &= curvatures_in(&store, 1e-3, 1e3);
        if train_acc > best {
            best = train_acc;
            report.plateau_epoch = epoch;
        }
        log::info!("epoch {epoch}: loss {train_loss:.4}, train acc {train_acc:.3}, test acc {test_acc:.3}");
        report.train_accuracy = train_acc;
        report.test_accuracy = test_acc;
        report.final_loss = train_loss;
    }
    metrics.log(epochs, "summary", "plateau_epoch", report.plateau_epoch as f64)?;
    if let Some(dir) = out {
        let p = dir.join("classify.ckpt");
        checkpoint::save(&p, &store)?;
        report.checkpoint_path = Some(p);
    }
    Ok(report)
}

/// Test accuracy of a saved classifier, rebuilt from `cfg`.
pub fn eval_classify(cfg: &Config, ckpt: &Path) -> Result<(f64, Vec<String>)> {
    match cfg.precision {
        Dtype::F32 => eval_t::<f32>(cfg, ckpt),
        Dtype::F64 => eval_t::<f64>(cfg, ckpt),
    }
}

fn eval_t<T: Scalar>(cfg: &Config, ckpt: &Path) -> Result<(f64, Vec<String>)> {
    let (train, test) = load_data(cfg)?;
    let mut store = ParamStore::<T>::new();
    let model = Classifier::new(&mut store, cfg, train.channels, train.classes().max(test.classes()))?;
    let warnings = checkpoint::load(ckpt, &mut store)?;
    let (acc, _) = evaluate(&model, &store, cfg.rescale_for::<T>()?, &test, cfg.batch_size)?;
    Ok((acc, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        Config {
            image_size: 8,
            train_size: 16,
            test_size: 8,
            channels: 4,
            mid_channels: 2,
            head_dim: 2,
            epochs: Some(2),
            batch_size: 8,
            ..Config::default()
        }
    }

    #[test]
    fn trains_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let r = train_classify(&tiny(), Some(dir.path())).unwrap();
        assert!(r.final_loss.is_finite());
        assert_eq!(r.curvatures.len(), 2);
        assert!(r.curvatures.iter().all(|(_, s)| s.len() == 2 && s.iter().all(|k| k.is_finite())));
        let text = std::fs::read_to_string(r.metrics_path.unwrap()).unwrap();
        assert!(text.contains("K.block0") && text.contains("K.head"));
        let (acc, warnings) = eval_classify(&tiny(), &r.checkpoint_path.unwrap()).unwrap();
        assert_eq!(acc, r.test_accuracy);
        assert!(warnings.is_empty());
    }

    #[test]
    fn fixed_curve_keeps_curvature() {
        let cfg = Config { fixed_curve: true, ..tiny() };
        let r = train_classify(&cfg, None).unwrap();
        for (_, s) in &r.curvatures {
            assert!(s.iter().all(|k| (k - 1.0).abs() < 1e-6));
        }
    }
}
