use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{LorentzConv2d, LorentzFeatureMap};
use super::norm::{BatchNorm, LorentzBatchNorm};
use crate::autodiff::{Tensor, Var};
use crate::error::{usage, Result};
use crate::hyper;
use crate::manifold::ManifoldId;
use crate::params::{Binder, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

/// Euclidean rows `[N, n]` onto the manifold: rescale as an origin tangent, then `exp_0`.
pub fn switch_e2l<T: Scalar>(b: &Binder<T>, u: Var, manifold: ManifoldId) -> Result<Var> {
    let c = b.curv(manifold)?;
    let u = hyper::rescale(b.g, u, c, &b.rescale)?;
    hyper::exp0(b.g, u, c)
}

/// Space part of `log_0`.
pub fn switch_l2e<T: Scalar>(b: &Binder<T>, x: Var, manifold: ManifoldId) -> Result<Var> {
    let c = b.curv(manifold)?;
    hyper::log0(b.g, x, c)
}

/// ReLU on space components with the time component recomputed.
pub fn lorentz_relu<T: Scalar>(b: &Binder<T>, x: Var, manifold: ManifoldId) -> Result<Var> {
    let c = b.curv(manifold)?;
    hyper::relu(b.g, x, c)
}

/// Plain NHWC convolution with He-initialized `[k, k, cin, cout]` weights, no bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (ksize * ksize * cin) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data: Vec<T> = (0..ksize * ksize * cin * cout).map(|_| T::c(normal.sample(rng))).collect();
        let weight = store.add(format!("{name}.weight"), ParamKind::Euclidean, Tensor::new(vec![ksize, ksize, cin, cout], data)?)?;
        Ok(Self { weight, stride, pad })
    }

    pub fn forward<T: Scalar>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        b.g.conv2d(x, b.var(self.weight), self.stride, self.pad)
    }
}

/// Fully connected layer `x W + b` on `[N, in]` rows, He-initialized, zero bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, (2.0 / cin as f64).sqrt()).expect("positive std");
        let data: Vec<T> = (0..cin * cout).map(|_| T::c(normal.sample(rng))).collect();
        let weight = store.add(format!("{name}.weight"), ParamKind::Euclidean, Tensor::new(vec![cin, cout], data)?)?;
        let bias = store.add(format!("{name}.bias"), ParamKind::Euclidean, Tensor::zeros(&[1, cout]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let y = b.g.matmul(x, b.var(self.weight))?;
        b.g.add(y, b.var(self.bias))
    }
}

/// Residual bottleneck whose 3×3 stage runs on a hyperbolic manifold:
/// 1×1 conv → BN + ReLU → to manifold → Lorentz 3×3 conv → Lorentz BN + ReLU →
/// to Euclidean → 1×1 conv, plus a Euclidean shortcut.
#[derive(Debug, Clone)]
pub struct LorentzCoreBottleneck {
    pub reduce: Conv2d,
    pub bn: BatchNorm,
    pub manifold: ManifoldId,
    pub core: LorentzConv2d,
    pub lbn: LorentzBatchNorm,
    pub expand: Conv2d,
    /// 1×1 strided projection when the residual shapes differ.
    pub shortcut: Option<Conv2d>,
    pub cin: usize,
    pub mid: usize,
    pub cout: usize,
    pub stride: usize,
}

impl LorentzCoreBottleneck {
    /// Registers its own manifold of dimension `mid` with curvature `k0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: usize,
        k0: T,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let manifold = store.add_manifold(name, mid, k0, true);
        let reduce = Conv2d::new(store, &format!("{name}.reduce"), cin, mid, 1, 1, 0, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), mid)?;
        let core = LorentzConv2d::new(store, &format!("{name}.core"), manifold, mid, mid, 3, stride, 1, rng)?;
        let lbn = LorentzBatchNorm::new(store, &format!("{name}.lbn"), manifold)?;
        let expand = Conv2d::new(store, &format!("{name}.expand"), mid, cout, 1, 1, 0, rng)?;
        let shortcut = if stride != 1 || cin != cout {
            Some(Conv2d::new(store, &format!("{name}.shortcut"), cin, cout, 1, stride, 0, rng)?)
        } else {
            None
        };
        Ok(Self { reduce, bn, manifold, core, lbn, expand, shortcut, cin, mid, cout, stride })
    }

    /// `[B, H, W, cin]` → `[B, Ho, Wo, cout]`.
    pub fn forward<T: Scalar>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.g;
        let s = g.shape(x);
        if s.len() != 4 || s[3] != self.cin {
            return Err(usage(format!("bottleneck: expected [B, H, W, {}], got {s:?}", self.cin)));
        }
        let (bs, h, w) = (s[0], s[1], s[2]);
        let y = self.reduce.forward(b, x)?;
        let y = g.reshape(y, &[bs * h * w, self.mid])?;
        let y = self.bn.forward(b, y)?;
        let y = g.relu(y)?;
        let y = switch_e2l(b, y, self.manifold)?;
        let fm = LorentzFeatureMap { rows: y, batch: bs, height: h, width: w, manifold: self.manifold };
        let fm = self.core.forward(b, &fm)?;
        let y = self.lbn.forward(b, fm.rows)?;
        let y = lorentz_relu(b, y, self.manifold)?;
        let y = switch_l2e(b, y, self.manifold)?;
        let y = g.reshape(y, &[bs, fm.height, fm.width, self.mid])?;
        let y = self.expand.forward(b, y)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(b, x)?,
            None => x,
        };
        g.add(y, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::params::check_param_gradients;
    use crate::stability::{d_max, RescaleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn switchers_round_trip_to_rescaled_input() {
        let mut store = ParamStore::<f64>::new();
        let m = store.add_manifold("m", 3, 0.5, true);
        let g = Graph::new();
        let cfg = RescaleConfig::default_for::<f64>();
        let b = Binder::new(&g, &store, true, cfg);
        let u = g.constant(Tensor::from_f64(&[3, 3], &[0.0, 0.0, 0.0, 1.0, -2.0, 0.5, 40.0, 3.0, -7.0]).unwrap());
        let x = switch_e2l(&b, u, m).unwrap();
        assert_eq!(g.value(x).row(0), &[0.5f64.sqrt(), 0.0, 0.0, 0.0]);
        let back = switch_l2e(&b, x, m).unwrap();
        let c = b.curv(m).unwrap();
        let want = hyper::rescale(&g, u, c, &cfg).unwrap();
        for (p, q) in g.value(back).data().iter().zip(g.value(want).data()) {
            assert!((p - q).abs() < 1e-8);
        }
        let geo = store.manifold(m).geometry();
        let dmax = d_max(0.5, &cfg.profile).unwrap();
        for r in 0..3 {
            assert!(geo.dist0(g.value(x).row(r)) < dmax);
        }
    }

    #[test]
    fn relu_keeps_nonnegative_points() {
        let mut store = ParamStore::<f64>::new();
        let m = store.add_manifold("m", 2, 1.0, true);
        let geo = store.manifold(m).geometry();
        let g = Graph::new();
        let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f64>());
        let x = Tensor::from_rows(&[geo.lift(&[0.5, 2.0]), geo.lift(&[-1.0, 3.0]), geo.origin_coords()]).unwrap();
        let y = lorentz_relu(&b, g.constant(x.clone()), m).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.row(0), x.row(0));
        assert_eq!(yv.row(2), x.row(2));
        assert_eq!(yv.row(1)[1], 0.0);
        assert!(geo.residual(yv.row(1)) < 1e-12);
    }

    #[test]
    fn linear_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 2, 3, &mut rng).unwrap();
        store.set_value(lin.bias, Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let w = store.value(lin.weight).data().to_vec();
        let g = Graph::new();
        let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f64>());
        let y = lin.forward(&b, g.constant(Tensor::from_f64(&[1, 2], &[2.0, -1.0]).unwrap())).unwrap();
        for j in 0..3 {
            let want = 2.0 * w[j] - w[3 + j] + (j + 1) as f64;
            assert!((g.value(y).data()[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn bottleneck_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &(cin, cout, stride, ho) in &[(4usize, 4usize, 1usize, 6usize), (4, 8, 2, 3)] {
            let mut store = ParamStore::<f64>::new();
            let blk = LorentzCoreBottleneck::new(&mut store, "blk", cin, 3, cout, stride, 1.0, &mut rng).unwrap();
            assert_eq!(blk.shortcut.is_some(), stride != 1 || cin != cout);
            let g = Graph::new();
            let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f64>());
            let x: Vec<f64> = (0..2 * 6 * 6 * cin).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = blk.forward(&b, g.constant(Tensor::new(vec![2, 6, 6, cin], x).unwrap())).unwrap();
            assert_eq!(g.shape(y), vec![2, ho, ho, cout]);
        }
    }

    #[test]
    fn bottleneck_forward_is_finite_in_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut store = ParamStore::<f32>::new();
        let blk = LorentzCoreBottleneck::new(&mut store, "blk", 3, 4, 3, 1, 1.0f32, &mut rng).unwrap();
        for trial in 0..1000 {
            let scale = if trial % 10 == 0 { 100.0 } else { 3.0 };
            let g = Graph::new();
            let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f32>());
            let x: Vec<f32> = (0..2 * 4 * 4 * 3).map(|_| rng.random_range(-scale..scale)).collect();
            let y = blk.forward(&b, g.constant(Tensor::new(vec![2, 4, 4, 3], x).unwrap())).unwrap();
            assert!(g.value(y).all_finite());
        }
    }

    #[test]
    fn bottleneck_gradients_on_4x4_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut store = ParamStore::<f64>::new();
        let blk = LorentzCoreBottleneck::new(&mut store, "blk", 2, 3, 2, 1, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..2 * 4 * 4 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xid = store.add("x", ParamKind::Euclidean, Tensor::new(vec![2, 4, 4, 2], x).unwrap()).unwrap();
        let ids = [xid, blk.reduce.weight, blk.core.kernel.raw, blk.core.boost.v_raw, blk.lbn.gamma, blk.expand.weight];
        let report = check_param_gradients(&store, &ids, RescaleConfig::default_for::<f64>(), 1e-6, 1e-4, |b| {
            let y = blk.forward(b, b.var(xid))?;
            let y = b.g.square(y)?;
            b.g.sum(y)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
