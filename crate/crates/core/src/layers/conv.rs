use rand::Rng;

use super::rotation::{norm_correct, BoostParam, RotationKernel, RotationMode};
use crate::autodiff::{ConvGeom, Tensor, Var};
use crate::error::{usage, Result};
use crate::hyper::{self, Curv};
use crate::manifold::ManifoldId;
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;

/// A batch of NHWC feature maps whose pixels are Lorentz points, stored as
/// `[B·H·W, C + 1]` rows.
#[derive(Debug, Clone, Copy)]
pub struct LorentzFeatureMap {
    pub rows: Var,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub manifold: ManifoldId,
}

impl LorentzFeatureMap {
    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// Lorentz convolution: rotation over receptive fields, tanh rescaling, boost.
#[derive(Debug, Clone)]
pub struct LorentzConv2d {
    pub kernel: RotationKernel,
    pub boost: BoostParam,
    pub stride: usize,
    pub pad: usize,
    pub manifold: ManifoldId,
}

impl LorentzConv2d {
    /// `cin`/`cout` count space channels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        manifold: ManifoldId,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kernel = RotationKernel::new(store, &format!("{name}.kernel"), (ksize, ksize), cin, cout, rng)?;
        let boost = BoostParam::new(store, &format!("{name}.boost"), cout)?;
        Ok(Self { kernel, boost, stride, pad, manifold })
    }

    fn geom(&self, fm: &LorentzFeatureMap, cin: usize) -> ConvGeom {
        ConvGeom {
            batch: fm.batch,
            height: fm.height,
            width: fm.width,
            cin,
            kh: self.kernel.kh,
            kw: self.kernel.kw,
            cout: self.kernel.cout,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn check_input<T: Scalar>(&self, b: &Binder<T>, fm: &LorentzFeatureMap) -> Result<ConvGeom> {
        let s = b.g.shape(fm.rows);
        if s != [fm.pixels(), self.kernel.cin + 1] {
            return Err(usage(format!(
                "lorentz_conv2d: expected rows [{}, {}], got {s:?}",
                fm.pixels(),
                self.kernel.cin + 1
            )));
        }
        if fm.manifold != self.manifold {
            return Err(usage("lorentz_conv2d: input lives on a different manifold"));
        }
        let geom = self.geom(fm, self.kernel.cin);
        if !geom.valid() {
            return Err(usage(format!("lorentz_conv2d: invalid geometry {geom:?}")));
        }
        Ok(geom)
    }

    /// Shared tail: rescale, then boost.
    fn tail<T: Scalar>(&self, b: &Binder<T>, x: Var, c: Curv, geom: &ConvGeom) -> Result<LorentzFeatureMap> {
        let x = hyper::rescale_points(b.g, x, c, &b.rescale)?;
        let x = self.boost.apply(b, x)?;
        Ok(LorentzFeatureMap {
            rows: x,
            batch: geom.batch,
            height: geom.out_height(),
            width: geom.out_width(),
            manifold: self.manifold,
        })
    }

    /// Convolution over the space channels only. Window norms, needed for time
    /// components and norm correction, come from a box filter over per-pixel
    /// squared norms.
    pub fn forward<T: Scalar>(&self, b: &Binder<T>, fm: &LorentzFeatureMap) -> Result<LorentzFeatureMap> {
        let g = b.g;
        let geom = self.check_input(b, fm)?;
        let c = b.curv(self.manifold)?;
        let cin = self.kernel.cin;
        let s = hyper::space(g, fm.rows)?;
        let s4 = g.reshape(s, &[fm.batch, fm.height, fm.width, cin])?;
        let w = self.kernel.effective(b)?;
        let w4 = g.reshape(w, &[self.kernel.kh, self.kernel.kw, cin, self.kernel.cout])?;
        let y = g.conv2d(s4, w4, self.stride, self.pad)?;
        let p = geom.out_pixels();
        let mut ys = g.reshape(y, &[p, self.kernel.cout])?;
        if self.kernel.mode() == RotationMode::NormCorrect {
            let sq = g.square(s4)?;
            let sq = g.sum_axis(sq, 3)?;
            let ones = g.constant(Tensor::full(&[self.kernel.kh, self.kernel.kw, 1, 1], T::one()));
            let wsq = g.conv2d(sq, ones, self.stride, self.pad)?;
            let wsq = g.reshape(wsq, &[p, 1])?;
            let wn = g.sqrt(wsq)?;
            ys = norm_correct(g, ys, wn)?;
        }
        let x = hyper::lift(g, ys, c)?;
        self.tail(b, x, c, &geom)
    }

    /// Reference path: unfold every window of full Lorentz points, form the
    /// Lorentz concatenation explicitly, rotate its space part.
    pub fn forward_naive<T: Scalar>(&self, b: &Binder<T>, fm: &LorentzFeatureMap) -> Result<LorentzFeatureMap> {
        let g = b.g;
        let geom = self.check_input(b, fm)?;
        let c = b.curv(self.manifold)?;
        let cin = self.kernel.cin;
        let full = g.reshape(fm.rows, &[fm.batch, fm.height, fm.width, cin + 1])?;
        let u = g.unfold(full, self.kernel.kh, self.kernel.kw, self.stride, self.pad)?;
        let slots = self.kernel.kh * self.kernel.kw;
        let time_idx: Vec<usize> = (0..slots).map(|s| s * (cin + 1)).collect();
        let space_idx: Vec<usize> = (0..slots).flat_map(|s| (1..=cin).map(move |i| s * (cin + 1) + i)).collect();
        let t = g.gather_cols(u, &time_idx)?;
        let sp = g.gather_cols(u, &space_idx)?;
        // concatenated time √(Σ t_i² − (m − 1)K); padded slots are origins
        let mask = g.constant(Tensor::new(vec![geom.out_pixels(), slots], self.geom(fm, cin + 1).tap_mask())?);
        let t2 = g.square(t)?;
        let km = g.mul(mask, c.k)?;
        let t2 = g.sub(t2, km)?;
        let t2 = g.sum_axis(t2, 1)?;
        let t2 = g.add(t2, c.k)?;
        let tc = g.sqrt(t2)?;
        let concat = g.concat(&[tc, sp], 1)?;
        let ct = hyper::time(g, concat)?;
        let cs = hyper::space(g, concat)?;
        let rotated = self.kernel.apply(b, cs)?;
        let x = g.concat(&[ct, rotated], 1)?;
        self.tail(b, x, c, &geom)
    }
}

/// Lorentz fully connected layer: the 1×1 case of [`LorentzConv2d`] on rows.
#[derive(Debug, Clone)]
pub struct LorentzLinear {
    pub kernel: RotationKernel,
    pub boost: BoostParam,
    pub manifold: ManifoldId,
}

impl LorentzLinear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        manifold: ManifoldId,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kernel = RotationKernel::new(store, &format!("{name}.kernel"), (1, 1), cin, cout, rng)?;
        let boost = BoostParam::new(store, &format!("{name}.boost"), cout)?;
        Ok(Self { kernel, boost, manifold })
    }

    /// Rotate the space part, recompute time, rescale, boost.
    pub fn forward<T: Scalar>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.g;
        let c = b.curv(self.manifold)?;
        let s = hyper::space(g, x)?;
        let y = self.kernel.apply(b, s)?;
        let y = hyper::lift(g, y, c)?;
        let y = hyper::rescale_points(g, y, c, &b.rescale)?;
        self.boost.apply(b, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::manifold::Lorentz;
    use crate::params::{check_param_gradients, ParamKind};
    use crate::stability::RescaleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, m: &Lorentz<f64>, pixels: usize, c: usize, scale: f64) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = (0..pixels)
            .map(|_| {
                let s: Vec<f64> = (0..c).map(|_| rng.random_range(-scale..scale)).collect();
                m.lift(&s)
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn setup(cin: usize, cout: usize, k: f64, seed: u64) -> (ParamStore<f64>, LorentzConv2d, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = store.add_manifold("m", cin, k, true);
        let conv = LorentzConv2d::new(&mut store, "conv", m, cin, cout, 3, 1, 1, &mut rng).unwrap();
        let v: Vec<f64> = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
        store.set_value(conv.boost.v_raw, Tensor::vector(v)).unwrap();
        (store, conv, rng)
    }

    #[test]
    fn efficient_matches_naive_in_both_modes() {
        // 9·4 = 36 > 8 is norm-correct, 9·1 = 9 ≤ 16 is Cayley
        for &(cin, cout) in &[(4usize, 8usize), (1, 16)] {
            let (store, conv, mut rng) = setup(cin, cout, 1.3, 11);
            let m = store.manifold(conv.manifold).geometry();
            let x = random_map(&mut rng, &m, 2 * 8 * 8, cin, 1.0);
            let g = Graph::new();
            let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f64>());
            let fm = LorentzFeatureMap { rows: g.constant(x), batch: 2, height: 8, width: 8, manifold: conv.manifold };
            let a = conv.forward(&b, &fm).unwrap();
            let n = conv.forward_naive(&b, &fm).unwrap();
            let (av, nv) = (g.value(a.rows), g.value(n.rows));
            assert_eq!(av.shape(), &[128, cout + 1]);
            for (p, q) in av.data().iter().zip(nv.data()) {
                assert!((p - q).abs() < 1e-10, "{cin}->{cout}: {p} vs {q}");
            }
            for r in 0..av.rows() {
                assert!(m.residual(av.row(r)) < 1e-8);
            }
        }
    }

    #[test]
    fn all_origin_input_stays_at_origin() {
        let (mut store, conv, _) = setup(4, 8, 1.0, 12);
        store.set_value(conv.boost.v_raw, Tensor::zeros(&[8])).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f64>());
        let rows: Vec<Vec<f64>> = (0..16).map(|_| vec![1.0, 0.0, 0.0, 0.0, 0.0]).collect();
        let fm = LorentzFeatureMap {
            rows: g.constant(Tensor::from_rows(&rows).unwrap()),
            batch: 1,
            height: 4,
            width: 4,
            manifold: conv.manifold,
        };
        let out = conv.forward(&b, &fm).unwrap();
        for r in 0..16 {
            let row = g.value(out.rows).row(r).to_vec();
            assert!((row[0] - 1.0).abs() < 1e-14 && row[1..].iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn one_by_one_conv_equals_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let m = store.add_manifold("m", 3, 0.8, true);
        let conv = LorentzConv2d::new(&mut store, "conv", m, 3, 5, 1, 1, 0, &mut rng).unwrap();
        let lin = LorentzLinear { kernel: conv.kernel.clone(), boost: conv.boost.clone(), manifold: m };
        store.set_value(conv.boost.v_raw, Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.2])).unwrap();
        let geo = store.manifold(m).geometry();
        let x = random_map(&mut rng, &geo, 9, 3, 1.5);
        let g = Graph::new();
        let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f64>());
        let xv = g.constant(x);
        let fm = LorentzFeatureMap { rows: xv, batch: 1, height: 3, width: 3, manifold: m };
        let a = conv.forward(&b, &fm).unwrap();
        let l = lin.forward(&b, xv).unwrap();
        for (p, q) in g.value(a.rows).data().iter().zip(g.value(l).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_linear_is_identity_without_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let m = store.add_manifold("m", 3, 2.0, true);
        let lin = LorentzLinear::new(&mut store, "lin", m, 3, 3, &mut rng).unwrap();
        store.set_value(lin.kernel.raw, Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        let geo = store.manifold(m).geometry();
        let x = random_map(&mut rng, &geo, 6, 3, 2.0);
        let g = Graph::new();
        let b = Binder::new(&g, &store, true, RescaleConfig::default_for::<f64>().disabled());
        let y = lin.forward(&b, g.constant(x.clone())).unwrap();
        for (p, q) in g.value(y).data().iter().zip(x.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(cin, cout) in &[(2usize, 4usize), (1, 12)] {
            let (mut store, conv, mut rng) = setup(cin, cout, 1.0, 15);
            let geo = store.manifold(conv.manifold).geometry();
            let x = random_map(&mut rng, &geo, 16, cin, 1.0);
            let xid = store.add("x", ParamKind::Euclidean, x).unwrap();
            let ids = [conv.kernel.raw, conv.boost.v_raw, xid];
            for naive in [false, true] {
                let report = check_param_gradients(&store, &ids, RescaleConfig::default_for::<f64>(), 1e-6, 1e-4, |b| {
                    let fm = LorentzFeatureMap { rows: b.var(xid), batch: 1, height: 4, width: 4, manifold: conv.manifold };
                    let y = if naive { conv.forward_naive(b, &fm)? } else { conv.forward(b, &fm)? };
                    let c = b.curv(conv.manifold)?;
                    let d = hyper::dist0(b.g, y.rows, c)?;
                    let d = b.g.square(d)?;
                    b.g.sum(d)
                })
                .unwrap();
                assert!(report.passed(), "{cin}->{cout} naive={naive}: {report:?}");
            }
        }
    }
}
