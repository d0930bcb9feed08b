//! Fixtures shared by the criterion benches.

use lorentzian::autodiff::{Graph, Tensor};
use lorentzian::layers::{LorentzConv2d, LorentzFeatureMap};
use lorentzian::params::{Binder, Grads, ParamKind, ParamId, ParamStore};
use lorentzian::{Lorentz, ManifoldId, RescaleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random points near the origin of `geo`.
pub fn points(rng: &mut ChaCha8Rng, geo: &Lorentz<f64>, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| geo.exp0(&(0..geo.dim()).map(|_| rng.random_range(-0.8..0.8)).collect::<Vec<_>>()))
        .collect()
}

/// A Lorentz convolution and one input batch of NHWC Lorentz points.
pub struct ConvFixture {
    pub store: ParamStore<f64>,
    pub conv: LorentzConv2d,
    pub manifold: ManifoldId,
    pub input: Tensor<f64>,
    pub batch: usize,
    pub size: usize,
}

impl ConvFixture {
    pub fn new(batch: usize, size: usize, cin: usize, cout: usize) -> Self {
        let mut rng = rng(0);
        let mut store = ParamStore::new();
        let manifold = store.add_manifold("bench", cin, 1.0, true);
        let conv = LorentzConv2d::new(&mut store, "conv", manifold, cin, cout, 3, 1, 1, &mut rng).expect("valid conv");
        let geo = store.manifold(manifold).geometry();
        let input = Tensor::from_rows(&points(&mut rng, &geo, batch * size * size)).expect("rows");
        Self { store, conv, manifold, input, batch, size }
    }

    /// Forward and backward of `Σ output` through one path.
    pub fn run(&self, naive: bool) -> Grads<f64> {
        let g = Graph::new();
        let b = Binder::new(&g, &self.store, true, RescaleConfig::default_for::<f64>());
        let fm = LorentzFeatureMap {
            rows: g.constant(self.input.clone()),
            batch: self.batch,
            height: self.size,
            width: self.size,
            manifold: self.manifold,
        };
        let out = if naive { self.conv.forward_naive(&b, &fm) } else { self.conv.forward(&b, &fm) }.expect("forward");
        let loss = g.sum(out.rows).expect("sum");
        let gr = g.backward(loss).expect("backward");
        b.collect(&gr)
    }
}

/// One Lorentz parameter of `rows` points and a matching Euclidean gradient.
pub fn lorentz_param(rows: usize, dim: usize) -> (ParamStore<f64>, ParamId, Tensor<f64>) {
    let mut rng = rng(1);
    let mut store = ParamStore::new();
    let m = store.add_manifold("opt", dim, 1.0, true);
    let geo = store.manifold(m).geometry();
    let value = Tensor::from_rows(&points(&mut rng, &geo, rows)).expect("rows");
    let id = store.add("points", ParamKind::Lorentz(m), value).expect("new slot");
    let grad = Tensor::new(vec![rows, dim + 1], (0..rows * (dim + 1)).map(|_| rng.random_range(-0.1..0.1)).collect())
        .expect("shape");
    (store, id, grad)
}
