//! Differentiable Lorentz-model operations on row batches.
//!
//! Points are rows of an `[N, n + 1]` tensor (time first). Tangent vectors at
//! the origin are passed as their `[N, n]` space part, since their time part is
//! zero. The curvature is a rank-0 graph value so gradients reach it.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{domain, Result};
use crate::scalar::Scalar;
use crate::stability::{radius_shrink, RescaleConfig};

/// Curvature `K` and `√K` as rank-0 graph values.
#[derive(Debug, Clone, Copy)]
pub struct Curv {
    pub k: Var,
    pub sqrt_k: Var,
}

impl Curv {
    pub fn new<T: Scalar>(g: &Graph<T>, k: Var) -> Result<Self> {
        Ok(Self { k, sqrt_k: g.sqrt(k)? })
    }

    pub fn constant<T: Scalar>(g: &Graph<T>, k: T) -> Result<Self> {
        let k = g.scalar(k);
        Self::new(g, k)
    }
}

fn cols_of<T: Scalar>(g: &Graph<T>, x: Var) -> usize {
    *g.shape(x).last().unwrap_or(&0)
}

/// Row-wise `−x_t y_t + x_s · y_s` as `[N, 1]`; either side may be a single row.
pub fn minkowski<T: Scalar>(g: &Graph<T>, x: Var, y: Var) -> Result<Var> {
    let n = cols_of(g, x);
    let p = g.mul(x, y)?;
    let t = g.cols(p, 0, 1)?;
    let s = g.cols(p, 1, n - 1)?;
    let s = g.sum_axis(s, 1)?;
    g.sub(s, t)
}

pub fn space<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Var> {
    let n = cols_of(g, x);
    g.cols(x, 1, n - 1)
}

pub fn time<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Var> {
    g.cols(x, 0, 1)
}

/// `√(‖s‖² + K)` per row.
pub fn time_from_space<T: Scalar>(g: &Graph<T>, s: Var, c: Curv) -> Result<Var> {
    let sq = g.square(s)?;
    let sq = g.sum_axis(sq, 1)?;
    let sq = g.add(sq, c.k)?;
    g.sqrt(sq)
}

/// Points `[√(‖s‖² + K), s]`.
pub fn lift<T: Scalar>(g: &Graph<T>, s: Var, c: Curv) -> Result<Var> {
    let t = time_from_space(g, s, c)?;
    g.concat(&[t, s], 1)
}

/// `exp_0` of origin tangents given by their space part.
pub fn exp0<T: Scalar>(g: &Graph<T>, u: Var, c: Curv) -> Result<Var> {
    let n = g.norm_rows(u)?;
    let alpha = g.div(n, c.sqrt_k)?;
    let f = g.sinhc(alpha)?;
    let s = g.mul(u, f)?;
    lift(g, s, c)
}

/// Space part of `log_0`, `√K · asinh(‖x_s‖ / √K) · x_s / ‖x_s‖`.
pub fn log0<T: Scalar>(g: &Graph<T>, x: Var, c: Curv) -> Result<Var> {
    let s = space(g, x)?;
    let n = g.norm_rows(s)?;
    let a = g.div(n, c.sqrt_k)?;
    let a = g.asinh(a)?;
    let a = g.mul(a, c.sqrt_k)?;
    let f = g.div(a, n)?;
    g.mul(s, f)
}

/// Distance from the origin, `√K · asinh(‖x_s‖ / √K)`, as `[N, 1]`.
pub fn dist0<T: Scalar>(g: &Graph<T>, x: Var, c: Curv) -> Result<Var> {
    let s = space(g, x)?;
    let n = g.norm_rows(s)?;
    let a = g.div(n, c.sqrt_k)?;
    let a = g.asinh(a)?;
    g.mul(a, c.sqrt_k)
}

/// Row-wise geodesic distance `√K · arccosh(−⟨x, y⟩_L / K)`.
pub fn dist<T: Scalar>(g: &Graph<T>, x: Var, y: Var, c: Curv) -> Result<Var> {
    let ip = minkowski(g, x, y)?;
    acosh_dist(g, ip, c)
}

fn acosh_dist<T: Scalar>(g: &Graph<T>, ip: Var, c: Curv) -> Result<Var> {
    let b = g.neg(ip)?;
    let b = g.div(b, c.k)?;
    let d = g.acosh(b)?;
    g.mul(d, c.sqrt_k)
}

/// Row-wise squared Lorentz distance `−2K − 2⟨x, y⟩_L`.
pub fn sq_dist<T: Scalar>(g: &Graph<T>, x: Var, y: Var, c: Curv) -> Result<Var> {
    let ip = minkowski(g, x, y)?;
    sq_from_inner(g, ip, c)
}

fn sq_from_inner<T: Scalar>(g: &Graph<T>, ip: Var, c: Curv) -> Result<Var> {
    let k2 = g.scale(c.k, T::c(2.0))?;
    let ip2 = g.scale(ip, T::c(2.0))?;
    let s = g.add(ip2, k2)?;
    g.neg(s)
}

/// All inner products between rows of `x` `[N, n+1]` and `y` `[M, n+1]`, as `[N, M]`.
pub fn pairwise_inner<T: Scalar>(g: &Graph<T>, x: Var, y: Var) -> Result<Var> {
    let n = cols_of(g, y);
    let mut eta = vec![T::one(); n];
    eta[0] = -T::one();
    let eta = g.constant(Tensor::new(vec![1, n], eta)?);
    let ye = g.mul(y, eta)?;
    let yt = g.transpose(ye)?;
    g.matmul(x, yt)
}

pub fn pairwise_sq_dist<T: Scalar>(g: &Graph<T>, x: Var, y: Var, c: Curv) -> Result<Var> {
    let ip = pairwise_inner(g, x, y)?;
    sq_from_inner(g, ip, c)
}

pub fn pairwise_dist<T: Scalar>(g: &Graph<T>, x: Var, y: Var, c: Curv) -> Result<Var> {
    let ip = pairwise_inner(g, x, y)?;
    acosh_dist(g, ip, c)
}

/// `D_max` as a graph value so that it follows a learnable curvature.
pub fn d_max<T: Scalar>(g: &Graph<T>, c: Curv, cfg: &RescaleConfig) -> Result<Var> {
    let ratio = cfg.profile.x_t_max / g.item(c.sqrt_k).f64();
    if !(ratio > 1.0) {
        return Err(domain(format!(
            "d_max: x_t_max = {} does not exceed √K = {}; manifold too curved for this precision",
            cfg.profile.x_t_max,
            g.item(c.sqrt_k)
        )));
    }
    let xt = g.scalar(T::c(cfg.profile.x_t_max));
    let r = g.div(xt, c.sqrt_k)?;
    let a = g.acosh(r)?;
    g.mul(a, c.sqrt_k)
}

/// Tanh rescaling of origin tangents (space parts): `u · D_max tanh(r‖u‖) / ‖u‖`.
/// Identity when the config is disabled.
pub fn rescale<T: Scalar>(g: &Graph<T>, u: Var, c: Curv, cfg: &RescaleConfig) -> Result<Var> {
    if !cfg.enabled {
        return Ok(u);
    }
    let dmax = d_max(g, c, cfg)?;
    let sd = g.scale(dmax, T::c(cfg.s))?;
    let num = g.scalar(T::c(0.99).atanh());
    let r = g.div(num, sd)?;
    let n = g.norm_rows(u)?;
    let rn = g.mul(n, r)?;
    let th = g.tanh(rn)?;
    let radius = g.scale(dmax, radius_shrink::<T>())?;
    let radius = g.mul(th, radius)?;
    let f = g.div(radius, n)?;
    g.mul(u, f)
}

/// `exp_0(rescale(log_0(x)))` per row.
pub fn rescale_points<T: Scalar>(g: &Graph<T>, x: Var, c: Curv, cfg: &RescaleConfig) -> Result<Var> {
    if !cfg.enabled {
        return Ok(x);
    }
    let u = log0(g, x, c)?;
    let u = rescale(g, u, c, cfg)?;
    exp0(g, u, c)
}

/// Effective boost velocity `0.99 · tanh(‖v_raw‖) · v_raw / ‖v_raw‖`, as `[1, n]`.
pub fn boost_velocity<T: Scalar>(g: &Graph<T>, v_raw: Var) -> Result<Var> {
    let n = g.value(v_raw).len();
    let v = g.reshape(v_raw, &[1, n])?;
    let nv = g.norm_rows(v)?;
    let th = g.tanh(nv)?;
    let th = g.scale(th, T::c(0.99))?;
    let f = g.div(th, nv)?;
    g.mul(v, f)
}

/// Lorentz boost with velocity parameter `v_raw` (length n) applied to every row.
///
/// With `γ = 1/√(1 − ‖v‖²)`:
/// `t' = γ(t − v·s)` and `s' = s + v(γ²/(1+γ) · v·s − γt)`.
/// The map is linear, so it acts on the scaled hyperboloid unchanged.
pub fn boost<T: Scalar>(g: &Graph<T>, x: Var, v_raw: Var) -> Result<Var> {
    let v = boost_velocity(g, v_raw)?;
    let vv = g.square(v)?;
    let vv = g.sum_axis(vv, 1)?;
    let one_m = g.neg(vv)?;
    let one_m = g.add_scalar(one_m, T::one())?;
    let root = g.sqrt(one_m)?;
    let one = g.scalar(T::one());
    let gamma = g.div(one, root)?;
    let t = time(g, x)?;
    let s = space(g, x)?;
    let vt = g.transpose(v)?;
    let sv = g.matmul(s, vt)?;
    let tmsv = g.sub(t, sv)?;
    let t_new = g.mul(gamma, tmsv)?;
    let g2 = g.square(gamma)?;
    let gp1 = g.add_scalar(gamma, T::one())?;
    let coef = g.div(g2, gp1)?;
    let a = g.mul(coef, sv)?;
    let gt = g.mul(gamma, t)?;
    let a = g.sub(a, gt)?;
    let shift = g.mul(a, v)?;
    let s_new = g.add(s, shift)?;
    g.concat(&[t_new, s_new], 1)
}

/// ReLU on the space part, time recomputed.
pub fn relu<T: Scalar>(g: &Graph<T>, x: Var, c: Curv) -> Result<Var> {
    let s = space(g, x)?;
    let s = g.relu(s)?;
    lift(g, s, c)
}

/// Uniformly weighted centroid of the rows, as `[1, n+1]`.
pub fn centroid<T: Scalar>(g: &Graph<T>, x: Var, c: Curv) -> Result<Var> {
    let w = g.mean_axis(x, 0)?;
    let ww = minkowski(g, w, w)?;
    if !(g.item(ww).f64() < -1e-12) {
        return Err(domain("lorentz centroid: weighted sum is not timelike"));
    }
    let nn = g.neg(ww)?;
    let den = g.sqrt(nn)?;
    let f = g.div(c.sqrt_k, den)?;
    g.mul(w, f)
}

/// `log_x(y)` row-wise; `x` may be a single row.
pub fn log_map<T: Scalar>(g: &Graph<T>, x: Var, y: Var, c: Curv) -> Result<Var> {
    let ip = minkowski(g, x, y)?;
    let b = g.neg(ip)?;
    let b = g.div(b, c.k)?;
    let f = g.acosh_ratio(b)?;
    let bx = g.mul(b, x)?;
    let d = g.sub(y, bx)?;
    g.mul(d, f)
}

/// Parallel transport of tangents `v` at `x` to `y`.
pub fn transport<T: Scalar>(g: &Graph<T>, x: Var, y: Var, v: Var, c: Curv) -> Result<Var> {
    let yv = minkowski(g, y, v)?;
    let xy = minkowski(g, x, y)?;
    let den = g.sub(c.k, xy)?;
    let f = g.div(yv, den)?;
    let xpy = g.add(x, y)?;
    let corr = g.mul(f, xpy)?;
    g.add(v, corr)
}

/// `exp_x(z)` row-wise; `x` may be a single row.
pub fn exp_map<T: Scalar>(g: &Graph<T>, x: Var, z: Var, c: Curv) -> Result<Var> {
    let zz = minkowski(g, z, z)?;
    let zz = g.relu(zz)?;
    let nz = g.sqrt(zz)?;
    let alpha = g.div(nz, c.sqrt_k)?;
    let ch = g.cosh(alpha)?;
    let sc = g.sinhc(alpha)?;
    let a = g.mul(ch, x)?;
    let b = g.mul(sc, z)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::manifold::Lorentz;
    use crate::stability::rescale_space;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_space(rng: &mut ChaCha8Rng, n: usize, cols: usize, scale: f64) -> Tensor<f64> {
        let d: Vec<f64> = (0..n * cols).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor::new(vec![n, cols], d).unwrap()
    }

    fn lifted(m: &Lorentz<f64>, s: &Tensor<f64>) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = (0..s.rows()).map(|i| m.lift(s.row(i))).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn matches_pointwise_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 1.7;
        let m = Lorentz::new(k, 3).unwrap();
        let xs = lifted(&m, &rand_space(&mut rng, 5, 3, 2.0));
        let ys = lifted(&m, &rand_space(&mut rng, 5, 3, 2.0));
        let g = Graph::new();
        let c = Curv::constant(&g, k).unwrap();
        let x = g.constant(xs.clone());
        let y = g.constant(ys.clone());
        let d = dist(&g, x, y, c).unwrap();
        let sq = sq_dist(&g, x, y, c).unwrap();
        let lg = log_map(&g, x, y, c).unwrap();
        let pd = pairwise_dist(&g, x, y, c).unwrap();
        let l0 = log0(&g, y, c).unwrap();
        for i in 0..5 {
            let (xi, yi) = (xs.row(i), ys.row(i));
            assert!((g.value(d).data()[i] - m.dist(xi, yi)).abs() < 1e-12);
            assert!((g.value(sq).data()[i] - m.sq_dist(xi, yi)).abs() < 1e-10);
            for (a, b) in g.value(lg).row(i).iter().zip(m.log(xi, yi)) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in g.value(l0).row(i).iter().zip(&m.log0(yi)[1..]) {
                assert!((a - b).abs() < 1e-12);
            }
            for j in 0..5 {
                assert!((g.value(pd).data()[i * 5 + j] - m.dist(xi, ys.row(j))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rescale_matches_core_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = RescaleConfig::default_for::<f64>();
        let u = rand_space(&mut rng, 4, 3, 30.0);
        let g = Graph::new();
        let c = Curv::constant(&g, 0.6).unwrap();
        let uv = g.constant(u.clone());
        let r = rescale(&g, uv, c, &cfg).unwrap();
        for i in 0..4 {
            let want = rescale_space(u.row(i), 0.6, &cfg).unwrap();
            for (a, b) in g.value(r).row(i).iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boost_of_origin_example() {
        // raw velocity chosen so the effective velocity is (0.6, 0)
        let raw = (0.6f64 / 0.99).atanh();
        for &k in &[1.0f64, 4.0] {
            let g = Graph::new();
            let c = Curv::constant(&g, k).unwrap();
            let o = g.constant(Tensor::from_f64(&[1, 3], &[k.sqrt(), 0.0, 0.0]).unwrap());
            let v = g.constant(Tensor::vector(vec![raw, 0.0]));
            let b = boost(&g, o, v).unwrap();
            assert!((g.value(b).data()[0] - 1.25 * k.sqrt()).abs() < 1e-12);
            let ip = minkowski(&g, b, b).unwrap();
            assert!((g.item(ip) + k).abs() < 1e-12);
            let _ = c;
        }
    }

    #[test]
    fn unit_speed_geodesic_gradient() {
        // d(0, exp_0(z)) = ‖z‖, so its gradient in z has norm 1
        let g = Graph::new();
        let c = Curv::constant(&g, 2.5).unwrap();
        let z = g.param(Tensor::from_f64(&[1, 3], &[0.3, -1.1, 0.7]).unwrap());
        let x = exp0(&g, z, c).unwrap();
        let o = g.constant(Tensor::from_f64(&[1, 4], &[2.5f64.sqrt(), 0.0, 0.0, 0.0]).unwrap());
        let d = dist(&g, o, x, c).unwrap();
        let d = g.sum(d).unwrap();
        let gr = g.backward(d).unwrap();
        let n: f64 = gr.get(z).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn curvature_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = rand_space(&mut rng, 3, 2, 3.0);
        let w = rand_space(&mut rng, 3, 2, 3.0);
        let cfg = RescaleConfig::default_for::<f64>();
        let report = finite_diff_check(
            |g, v| {
                let c = Curv::new(g, v[2])?;
                let a = rescale(g, v[0], c, &cfg)?;
                let a = exp0(g, a, c)?;
                let b = exp0(g, v[1], c)?;
                let l = log_map(g, a, b, c)?;
                let t = transport(g, a, b, l, c)?;
                let e = exp_map(g, b, t, c)?;
                let mu = centroid(g, e, c)?;
                let d = sq_dist(g, mu, a, c)?;
                let r = relu(g, e, c)?;
                let d2 = dist0(g, r, c)?;
                let s = g.add(d, d2)?;
                g.sum(s)
            },
            &[u, w, Tensor::scalar(1.3)],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
