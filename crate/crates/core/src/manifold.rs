//! Lorentz (hyperboloid) model of hyperbolic space with curvature parameter `K > 0`.
//!
//! Points live in `R^{n+1}` and satisfy `<x, x>_L = -K` with `x_t > 0`, where
//! `<u, v>_L = -u_t v_t + u_s · v_s`. The sectional curvature is `c = -1/K`
//! and the origin is `[√K, 0, …, 0]`.
//!
//! Two API tiers are provided:
//!
//! - [`Lorentz`] methods on plain slices. These are the hot-path routines used by
//!   the optimizers and layers; they do not validate preconditions.
//! - [`LorentzPoint`] / [`TangentVector`] wrappers whose operations check manifold
//!   identity, lengths and tangency before delegating to the slice routines.

use crate::error::{domain, usage, Result};
use crate::scalar::Scalar;

/// Identifies a manifold instance. Per-block manifolds share a curvature value at
/// initialization but are still distinct spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ManifoldId(pub u32);

/// Snapshot of a Lorentz manifold: curvature `K` and spatial dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorentz<T> {
    id: ManifoldId,
    k: T,
    dim: usize,
}

/// Minkowski inner product `-u_t v_t + u_s · v_s`.
pub fn minkowski_inner<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(usage(format!(
            "minkowski_inner: length mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 2 {
        return Err(usage("minkowski_inner: vectors need at least 2 coordinates"));
    }
    Ok(inner(u, v))
}

#[inline]
pub(crate) fn inner<T: Scalar>(u: &[T], v: &[T]) -> T {
    let mut acc = -u[0] * v[0];
    for (a, b) in u[1..].iter().zip(&v[1..]) {
        acc += *a * *b;
    }
    acc
}

#[inline]
pub(crate) fn sq_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum()
}

/// `arccosh(β) / sqrt(β² − 1)` with the argument clamped to `β ≥ 1 + eps`.
#[inline]
pub(crate) fn acosh_ratio<T: Scalar>(beta: T) -> T {
    let one = T::one();
    let b = beta.max(one + T::eps_acosh());
    b.acosh() / ((b - one) * (b + one)).sqrt()
}

/// `sinh(α) / α`, with the series `1 + α²/6` below `1e-4`.
#[inline]
pub(crate) fn sinhc<T: Scalar>(alpha: T) -> T {
    if alpha < T::c(1e-4) {
        T::one() + alpha * alpha / T::c(6.0)
    } else {
        alpha.sinh() / alpha
    }
}

impl<T: Scalar> Lorentz<T> {
    /// Anonymous manifold with curvature `k` and `dim` spatial coordinates.
    pub fn new(k: T, dim: usize) -> Result<Self> {
        Self::with_id(ManifoldId::default(), k, dim)
    }

    pub fn with_id(id: ManifoldId, k: T, dim: usize) -> Result<Self> {
        if !(k > T::zero()) || !k.is_finite() {
            return Err(domain(format!("curvature parameter K must be positive, got {k}")));
        }
        if dim == 0 {
            return Err(usage("manifold dimension must be at least 1"));
        }
        Ok(Self { id, k, dim })
    }

    pub fn id(&self) -> ManifoldId {
        self.id
    }

    /// The curvature parameter `K` (sectional curvature is `-1/K`).
    pub fn k(&self) -> T {
        self.k
    }

    pub fn sqrt_k(&self) -> T {
        self.k.sqrt()
    }

    pub fn sectional_curvature(&self) -> T {
        -T::one() / self.k
    }

    /// Spatial dimension `n`; points have `n + 1` coordinates.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Same manifold identity and dimension, different curvature.
    pub fn with_k(&self, k: T) -> Result<Self> {
        Self::with_id(self.id, k, self.dim)
    }

    pub fn inner(&self, u: &[T], v: &[T]) -> T {
        inner(u, v)
    }

    pub fn origin_coords(&self) -> Vec<T> {
        let mut o = vec![T::zero(); self.dim + 1];
        o[0] = self.sqrt_k();
        o
    }

    /// Lift a spatial vector onto the hyperboloid: `[√(‖s‖² + K), s]`.
    pub fn lift(&self, space: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(space.len() + 1);
        out.push((sq_norm(space) + self.k).sqrt());
        out.extend_from_slice(space);
        out
    }

    /// Geodesic distance `√K · arccosh(-<x,y>_L / K)`.
    ///
    /// Nearby points use the equivalent chord form
    /// `2√K · asinh(‖x − y‖_L / 2√K)`, which is exact at `x = y`.
    pub fn dist(&self, x: &[T], y: &[T]) -> T {
        let arg = -inner(x, y) / self.k;
        if arg < T::c(2.0) {
            let diff: Vec<T> = x.iter().zip(y).map(|(a, b)| *a - *b).collect();
            let chord = inner(&diff, &diff).max(T::zero()).sqrt();
            let sk = self.sqrt_k();
            return T::c(2.0) * sk * (chord / (T::c(2.0) * sk)).asinh();
        }
        self.sqrt_k() * arg.acosh()
    }

    /// Lorentzian squared distance `-2K - 2<x,y>_L`, clamped at zero.
    pub fn sq_dist(&self, x: &[T], y: &[T]) -> T {
        let two = T::c(2.0);
        let xy = inner(x, y);
        if -xy < two * self.k {
            // equals <x - y, x - y>_L on the manifold, without the cancellation
            let diff: Vec<T> = x.iter().zip(y).map(|(a, b)| *a - *b).collect();
            return inner(&diff, &diff).max(T::zero());
        }
        -two * self.k - two * xy
    }

    /// Distance from the origin, `√K · asinh(‖x_s‖ / √K)`.
    pub fn dist0(&self, x: &[T]) -> T {
        let sk = self.sqrt_k();
        sk * (sq_norm(&x[1..]).sqrt() / sk).asinh()
    }

    /// Exponential map at `x` applied to the tangent vector `z`.
    pub fn exp(&self, x: &[T], z: &[T]) -> Vec<T> {
        let nz = inner(z, z).max(T::zero()).sqrt();
        let alpha = nz / self.sqrt_k();
        let (ch, sc) = (alpha.cosh(), sinhc(alpha));
        x.iter().zip(z).map(|(a, b)| ch * *a + sc * *b).collect()
    }

    /// Logarithmic map at `x` of the point `y`.
    pub fn log(&self, x: &[T], y: &[T]) -> Vec<T> {
        let beta = -inner(x, y) / self.k;
        let coef = acosh_ratio(beta);
        x.iter().zip(y).map(|(a, b)| coef * (*b - beta * *a)).collect()
    }

    /// Exponential map at the origin of a tangent vector given by its spatial part.
    pub fn exp0(&self, u_space: &[T]) -> Vec<T> {
        let sk = self.sqrt_k();
        let nu = sq_norm(u_space).sqrt();
        let alpha = nu / sk;
        let mut out = Vec::with_capacity(u_space.len() + 1);
        out.push(sk * alpha.cosh());
        // √K sinh(α) u / ‖u‖ = sinh(α)/α · u
        let sc = sinhc(alpha);
        out.extend(u_space.iter().map(|u| sc * *u));
        out
    }

    /// Logarithmic map at the origin; returns the full tangent (time component 0).
    pub fn log0(&self, x: &[T]) -> Vec<T> {
        let sk = self.sqrt_k();
        let ns = sq_norm(&x[1..]).sqrt();
        let mut out = vec![T::zero(); x.len()];
        if ns == T::zero() {
            return out;
        }
        let scale = sk * (ns / sk).asinh() / ns;
        for (o, s) in out[1..].iter_mut().zip(&x[1..]) {
            *o = scale * *s;
        }
        out
    }

    /// Parallel transport of `v` from `T_x` to `T_y` along the geodesic.
    pub fn transport(&self, x: &[T], y: &[T], v: &[T]) -> Vec<T> {
        let coef = inner(y, v) / (self.k - inner(x, y));
        v.iter()
            .zip(x.iter().zip(y))
            .map(|(vi, (xi, yi))| *vi + coef * (*xi + *yi))
            .collect()
    }

    /// Project an ambient vector onto `T_x`: `u + <x,u>_L x / K`.
    pub fn tangent_projection(&self, x: &[T], u: &[T]) -> Vec<T> {
        let coef = inner(x, u) / self.k;
        u.iter().zip(x).map(|(ui, xi)| *ui + coef * *xi).collect()
    }

    /// Riemannian gradient from a Euclidean gradient: flip the time sign, then
    /// project onto the tangent space.
    pub fn egrad_to_rgrad(&self, x: &[T], g: &[T]) -> Vec<T> {
        let mut h = g.to_vec();
        h[0] = -h[0];
        self.tangent_projection(x, &h)
    }

    /// Weighted Lorentzian centroid.
    pub fn centroid(&self, points: &[&[T]], weights: &[T]) -> Result<Vec<T>> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(usage("centroid: need one weight per point and at least one point"));
        }
        let n = points[0].len();
        let mut w = vec![T::zero(); n];
        for (p, nu) in points.iter().zip(weights) {
            if p.len() != n {
                return Err(usage("centroid: points have different lengths"));
            }
            if *nu < T::zero() {
                return Err(usage("centroid: weights must be nonnegative"));
            }
            for (wi, pi) in w.iter_mut().zip(p.iter()) {
                *wi += *nu * *pi;
            }
        }
        let q = inner(&w, &w);
        if !(q < T::c(-1e-12)) {
            return Err(domain(format!(
                "centroid: weighted sum is not timelike (<w,w>_L = {q})"
            )));
        }
        let scale = self.sqrt_k() / (-q).sqrt();
        Ok(w.into_iter().map(|x| x * scale).collect())
    }

    /// Lorentz direct concatenation of points that share this curvature.
    pub fn concat(&self, points: &[&[T]]) -> Vec<T> {
        let m = T::from_usize(points.len()).unwrap();
        let mut t2 = T::zero();
        let mut out = vec![T::zero()];
        for p in points {
            t2 += p[0] * p[0];
            out.extend_from_slice(&p[1..]);
        }
        out[0] = (t2 - (m - T::one()) * self.k).sqrt();
        out
    }

    /// `|<x,x>_L + K|`.
    pub fn residual(&self, x: &[T]) -> T {
        (inner(x, x) + self.k).abs()
    }

    /// On-manifold check: residual within `tol` and positive time component.
    pub fn check(&self, x: &[T], tol: T) -> (bool, T) {
        let r = self.residual(x);
        (r <= tol && x[0] > T::zero(), r)
    }
}

/// A point on a specific Lorentz manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint<T> {
    coords: Vec<T>,
    manifold: Lorentz<T>,
}

/// A tangent vector attached to its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector<T> {
    coords: Vec<T>,
    base: LorentzPoint<T>,
}

impl<T: Scalar> LorentzPoint<T> {
    /// Wrap coordinates, validating length and the hyperboloid constraint.
    pub fn new(manifold: Lorentz<T>, coords: Vec<T>) -> Result<Self> {
        if coords.len() != manifold.dim + 1 {
            return Err(usage(format!(
                "point has {} coordinates, manifold expects {}",
                coords.len(),
                manifold.dim + 1
            )));
        }
        let tol = T::tol_manifold() * T::one().max(coords[0] * coords[0]);
        let (ok, r) = manifold.check(&coords, tol);
        if !ok {
            return Err(usage(format!("point is off the manifold (residual {r})")));
        }
        Ok(Self { coords, manifold })
    }

    /// Wrap coordinates without validation.
    pub fn from_raw(manifold: Lorentz<T>, coords: Vec<T>) -> Self {
        Self { coords, manifold }
    }

    pub fn origin(manifold: Lorentz<T>) -> Self {
        Self { coords: manifold.origin_coords(), manifold }
    }

    /// Lift a spatial vector onto the manifold.
    pub fn project(manifold: Lorentz<T>, space: &[T]) -> Result<Self> {
        if space.len() != manifold.dim {
            return Err(usage("project: spatial vector has the wrong length"));
        }
        Ok(Self { coords: manifold.lift(space), manifold })
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<T> {
        self.coords
    }

    pub fn time(&self) -> T {
        self.coords[0]
    }

    pub fn space(&self) -> &[T] {
        &self.coords[1..]
    }

    pub fn manifold(&self) -> &Lorentz<T> {
        &self.manifold
    }

    fn same_manifold(&self, other: &Self) -> Result<()> {
        if self.manifold != other.manifold {
            return Err(usage(format!(
                "manifold mismatch: {:?} vs {:?}",
                self.manifold, other.manifold
            )));
        }
        Ok(())
    }

    pub fn distance(&self, other: &Self) -> Result<T> {
        self.same_manifold(other)?;
        Ok(self.manifold.dist(&self.coords, &other.coords))
    }

    pub fn squared_distance(&self, other: &Self) -> Result<T> {
        self.same_manifold(other)?;
        Ok(self.manifold.sq_dist(&self.coords, &other.coords))
    }

    pub fn exp(&self, z: &TangentVector<T>) -> Result<Self> {
        z.check_base(self)?;
        let nz = inner(&z.coords, &z.coords);
        if nz < -T::tol_manifold() {
            return Err(usage("exp: tangent vector has negative Lorentz norm"));
        }
        Ok(Self { coords: self.manifold.exp(&self.coords, &z.coords), manifold: self.manifold })
    }

    pub fn log(&self, y: &Self) -> Result<TangentVector<T>> {
        self.same_manifold(y)?;
        Ok(TangentVector { coords: self.manifold.log(&self.coords, &y.coords), base: self.clone() })
    }

    pub fn check(&self, tol: T) -> (bool, T) {
        self.manifold.check(&self.coords, tol)
    }

    /// Weighted Lorentzian centroid of points on a common manifold.
    pub fn centroid(points: &[Self], weights: &[T]) -> Result<Self> {
        let first = points.first().ok_or_else(|| usage("centroid: no points"))?;
        for p in points {
            first.same_manifold(p)?;
        }
        let refs: Vec<&[T]> = points.iter().map(|p| p.coords.as_slice()).collect();
        let coords = first.manifold.centroid(&refs, weights)?;
        Ok(Self { coords, manifold: first.manifold })
    }

    /// Lorentz direct concatenation; the result lives on `target`, whose dimension
    /// must equal the summed input dimensions.
    pub fn concat(points: &[Self], target: Lorentz<T>) -> Result<Self> {
        let first = points.first().ok_or_else(|| usage("concat: no points"))?;
        let k = first.manifold.k;
        let mut total = 0;
        for p in points {
            if p.manifold.k != k || target.k != k {
                return Err(usage("concat: curvature mismatch"));
            }
            total += p.manifold.dim;
        }
        if total != target.dim {
            return Err(usage(format!(
                "concat: target dimension {} but inputs sum to {total}",
                target.dim
            )));
        }
        let refs: Vec<&[T]> = points.iter().map(|p| p.coords.as_slice()).collect();
        Ok(Self { coords: target.concat(&refs), manifold: target })
    }
}

impl<T: Scalar> TangentVector<T> {
    /// Wrap `coords` as a tangent at `base`, validating tangency.
    pub fn new(base: LorentzPoint<T>, coords: Vec<T>) -> Result<Self> {
        if coords.len() != base.coords.len() {
            return Err(usage("tangent vector has the wrong length"));
        }
        let scale = T::one().max(base.coords[0].abs()) * T::one().max(sq_norm(&coords).sqrt());
        let ip = inner(&base.coords, &coords);
        if ip.abs() > T::tol_manifold() * scale {
            return Err(usage(format!("vector is not tangent at its base (<x,v>_L = {ip})")));
        }
        Ok(Self { coords, base })
    }

    /// Tangent vector at the origin from its spatial components.
    pub fn at_origin(manifold: Lorentz<T>, space: &[T]) -> Self {
        let mut coords = vec![T::zero()];
        coords.extend_from_slice(space);
        Self { coords, base: LorentzPoint::origin(manifold) }
    }

    pub fn zero(base: LorentzPoint<T>) -> Self {
        Self { coords: vec![T::zero(); base.coords.len()], base }
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn base(&self) -> &LorentzPoint<T> {
        &self.base
    }

    /// Lorentz norm `√<v,v>_L` (nonnegative for tangent vectors).
    pub fn norm(&self) -> T {
        inner(&self.coords, &self.coords).max(T::zero()).sqrt()
    }

    fn check_base(&self, x: &LorentzPoint<T>) -> Result<()> {
        x.same_manifold(&self.base)?;
        let d: T = x
            .coords
            .iter()
            .zip(&self.base.coords)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max);
        if d > T::tol_manifold() * T::one().max(x.coords[0]) {
            return Err(usage("tangent vector is attached to a different base point"));
        }
        Ok(())
    }

    /// Parallel transport to `T_y`.
    pub fn transport(&self, y: &LorentzPoint<T>) -> Result<Self> {
        self.base.same_manifold(y)?;
        let m = &self.base.manifold;
        Ok(Self { coords: m.transport(&self.base.coords, &y.coords, &self.coords), base: y.clone() })
    }
}

/// A named hyperbolic space whose curvature is a learnable parameter.
///
/// `K = exp(kappa_raw)`, so the raw parameter is unconstrained and `K > 0` always.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldHandle<T> {
    id: ManifoldId,
    name: String,
    dim: usize,
    kappa_raw: T,
    k_prev: T,
    learnable: bool,
}

impl<T: Scalar> ManifoldHandle<T> {
    /// New handle with `K = 1` (raw parameter 0).
    pub fn new(id: ManifoldId, name: impl Into<String>, dim: usize) -> Self {
        Self {
            id,
            name: name.into(),
            dim,
            kappa_raw: T::zero(),
            k_prev: T::one(),
            learnable: true,
        }
    }

    pub fn with_k(mut self, k: T) -> Self {
        self.kappa_raw = k.ln();
        self.k_prev = self.k();
        self
    }

    pub fn fixed(mut self) -> Self {
        self.learnable = false;
        self
    }

    pub fn id(&self) -> ManifoldId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }

    pub fn set_learnable(&mut self, learnable: bool) {
        self.learnable = learnable;
    }

    pub fn kappa_raw(&self) -> T {
        self.kappa_raw
    }

    /// Current curvature parameter `K = exp(kappa_raw)`.
    pub fn k(&self) -> T {
        self.kappa_raw.exp()
    }

    /// `K` as it was before the most recent curvature update.
    pub fn k_prev(&self) -> T {
        self.k_prev
    }

    pub fn geometry(&self) -> Lorentz<T> {
        Lorentz { id: self.id, k: self.k(), dim: self.dim }
    }

    pub(crate) fn set_kappa_raw(&mut self, raw: T) {
        self.kappa_raw = raw;
    }

    pub(crate) fn set_k_prev(&mut self, k: T) {
        self.k_prev = k;
    }

    /// Overwrite both the raw parameter and the snapshot (checkpoint restore).
    pub fn restore(&mut self, kappa_raw: T) {
        self.kappa_raw = kappa_raw;
        self.k_prev = self.k();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn l(k: f64, n: usize) -> Lorentz<f64> {
        Lorentz::new(k, n).unwrap()
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(minkowski_inner(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(minkowski_inner(&[2.0, 1.0, 1.0], &[3.0, 2.0, 2.0]).unwrap(), -2.0);
        assert!(matches!(
            minkowski_inner(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(crate::Error::Usage(_))
        ));
    }

    #[test]
    fn origin_examples() {
        assert_eq!(l(1.0, 2).origin_coords(), vec![1.0, 0.0, 0.0]);
        assert_eq!(l(4.0, 2).origin_coords(), vec![2.0, 0.0, 0.0]);
        assert_eq!(l(0.25, 3).origin_coords(), vec![0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn project_examples() {
        assert_eq!(l(1.0, 2).lift(&[0.0, 0.0]), vec![1.0, 0.0, 0.0]);
        let p = l(1.0, 2).lift(&[3.0, 4.0]);
        assert_abs_diff_eq!(p[0], 26f64.sqrt(), epsilon = 1e-15);
        assert_eq!(l(3.0, 1).lift(&[1.0]), vec![2.0, 1.0]);
    }

    #[test]
    fn distance_examples() {
        let m = l(1.0, 2);
        let x = [2f64.sqrt(), 1.0, 0.0];
        let y = [2f64.sqrt(), -1.0, 0.0];
        assert_eq!(m.dist(&x, &x), 0.0);
        assert_abs_diff_eq!(m.dist(&x, &y), 3f64.acosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.dist(&x, &y), 1.762747174039086, epsilon = 1e-9);
        assert_abs_diff_eq!(m.sq_dist(&x, &y), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.sq_dist(&x, &x), 0.0, epsilon = 1e-12);
        let m2 = l(2.0, 3);
        let o = m2.origin_coords();
        assert_eq!(m2.sq_dist(&o, &o), 0.0);
    }

    #[test]
    fn unit_tangent_has_unit_distance_at_any_curvature() {
        for &k in &[0.1, 0.5, 1.0, 3.0, 10.0] {
            let m = l(k, 3);
            let o = m.origin_coords();
            let z = [0.0, 0.6, 0.0, 0.8];
            let y = m.exp(&o, &z);
            assert_abs_diff_eq!(m.dist(&o, &y), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn exp_at_origin_closed_form() {
        let m = l(1.0, 2);
        let o = m.origin_coords();
        for &a in &[0.0, 1e-6, 0.3, 2.0] {
            let y = m.exp(&o, &[0.0, a, 0.0]);
            assert_abs_diff_eq!(y[0], a.cosh(), epsilon = 1e-12);
            assert_abs_diff_eq!(y[1], a.sinh(), epsilon = 1e-12);
            assert_eq!(y[2], 0.0);
        }
        assert_eq!(m.exp(&o, &[0.0, 0.0, 0.0]), o);
    }

    #[test]
    fn log_inverts_exp_example() {
        let m = l(1.0, 2);
        let o = m.origin_coords();
        let y = [1f64.cosh(), 1f64.sinh(), 0.0];
        let z = m.log(&o, &y);
        assert_abs_diff_eq!(z[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[2], 0.0, epsilon = 1e-12);
        let z0 = m.log0(&y);
        assert_abs_diff_eq!(z0[1], 1.0, epsilon = 1e-14);
        let x = m.lift(&[0.3, -0.2]);
        assert!(m.log(&x, &x).iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn transport_identity_when_points_coincide() {
        let m = l(2.0, 2);
        let x = m.lift(&[0.5, 1.0]);
        let v = m.tangent_projection(&x, &[0.1, 0.2, -0.3]);
        let w = m.transport(&x, &x, &v);
        for (a, b) in v.iter().zip(&w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn centroid_examples() {
        let m = l(1.5, 2);
        let x = m.lift(&[0.4, -1.2]);
        let c = m.centroid(&[&x], &[1.0]).unwrap();
        for (a, b) in x.iter().zip(&c) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let c = m.centroid(&[&x, &x], &[1.0, 1.0]).unwrap();
        for (a, b) in x.iter().zip(&c) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let o = m.origin_coords();
        let p = m.exp(&o, &[0.0, 0.7, 0.0]);
        let q = m.exp(&o, &[0.0, -0.7, 0.0]);
        let c = m.centroid(&[&p, &q], &[0.5, 0.5]).unwrap();
        for (a, b) in o.iter().zip(&c) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn centroid_rejects_non_timelike_sum() {
        let m = l(1.0, 1);
        let err = m.centroid(&[&[1.0, 1.0][..]], &[1.0]).unwrap_err();
        assert!(matches!(err, crate::Error::NumericDomain(_)));
        let err = m.centroid(&[&[1.0, 0.0][..]], &[0.0]).unwrap_err();
        assert!(matches!(err, crate::Error::NumericDomain(_)));
    }

    #[test]
    fn concat_examples() {
        let m = l(1.0, 2);
        let x = m.lift(&[0.1, 0.2]);
        assert_eq!(m.concat(&[&x]), x);
        let o = m.origin_coords();
        let c = m.concat(&[&o, &o]);
        assert_eq!(c, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn check_examples() {
        let m = l(1.0, 2);
        assert_eq!(m.check(&m.origin_coords(), 1e-9), (true, 0.0));
        assert_eq!(m.check(&[1.0, 1.0, 0.0], 1e-9), (false, 1.0));
    }

    #[test]
    fn typed_api_rejects_mismatched_manifolds() {
        let a = Lorentz::with_id(ManifoldId(1), 1.0, 2).unwrap();
        let b = Lorentz::with_id(ManifoldId(2), 1.0, 2).unwrap();
        let x = LorentzPoint::origin(a);
        let y = LorentzPoint::origin(b);
        assert!(matches!(x.distance(&y), Err(crate::Error::Usage(_))));
        assert!(matches!(x.squared_distance(&y), Err(crate::Error::Usage(_))));
        assert!(matches!(x.log(&y), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn typed_exp_rejects_non_tangent() {
        let m = l(1.0, 2);
        let x = LorentzPoint::project(m, &[1.0, 0.0]).unwrap();
        assert!(TangentVector::new(x.clone(), vec![1.0, 0.0, 0.0]).is_err());
        let v = TangentVector::new(x.clone(), m.tangent_projection(x.coords(), &[1.0, 0.0, 0.5]))
            .unwrap();
        let y = x.exp(&v).unwrap();
        assert!(y.check(1e-10).0);
    }

    #[test]
    fn handle_curvature_is_exponential_of_raw() {
        let h: ManifoldHandle<f64> = ManifoldHandle::new(ManifoldId(0), "enc", 4);
        assert_eq!(h.k(), 1.0);
        let h = h.with_k(2.5);
        assert_abs_diff_eq!(h.k(), 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(h.k_prev(), 2.5, epsilon = 1e-12);
    }
}
