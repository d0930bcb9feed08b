//! Maximum representable radius and tanh-based distance rescaling.
//!
//! A point `x` on the hyperboloid needs `x_t = √(‖x_s‖² + K)`. Once `x_t`
//! exceeds what the working precision can separate from `‖x_s‖`, points fall
//! onto the light cone. Given the largest trustworthy time component
//! `x_t_max`, the largest trustworthy distance from the origin is
//!
//! ```text
//! D_max(K) = √K · arccosh(x_t_max / √K)
//! ```
//!
//! Rescaling maps a tangent vector `z` at the origin to
//! `z · D_max · tanh(r‖z‖) / ‖z‖` with `r = atanh(0.99) / (s · D_max)`, so that
//! `‖z‖ = s · D_max` lands exactly at `0.99 · D_max`. Note the map is not the
//! identity near the origin: small norms are scaled by roughly
//! `atanh(0.99) / s` (≈ 1.323 for `s = 2`).

use crate::error::{domain, usage, Result};
use crate::manifold::{sq_norm, Lorentz, LorentzPoint, TangentVector};
use crate::scalar::{Dtype, Scalar};

/// Norms below this collapse to the origin.
const ZERO_NORM: f64 = 1e-12;

/// Largest trustworthy time component for a precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionProfile {
    pub dtype: Dtype,
    pub x_t_max: f64,
}

impl PrecisionProfile {
    pub fn new(dtype: Dtype) -> Self {
        let x_t_max = match dtype {
            Dtype::F32 => 2e3,
            Dtype::F64 => 1e8,
        };
        Self { dtype, x_t_max }
    }

    pub fn for_scalar<T: Scalar>() -> Self {
        Self::new(T::DTYPE)
    }

    pub fn with_x_t_max(mut self, x_t_max: f64) -> Self {
        self.x_t_max = x_t_max;
        self
    }
}

/// Rescaling parameters: tightness factor `s` and precision profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaleConfig {
    pub s: f64,
    pub profile: PrecisionProfile,
    /// When false the rescaling stages of layers are bypassed. Used by the
    /// `--no-scaling` ablation and by tests of exact fixed-point identities.
    pub enabled: bool,
}

impl RescaleConfig {
    pub fn new(s: f64, profile: PrecisionProfile) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(usage(format!("tightness factor must be positive, got {s}")));
        }
        Ok(Self { s, profile, enabled: true })
    }

    /// `s = 2` with the default profile of `T`.
    pub fn default_for<T: Scalar>() -> Self {
        Self { s: 2.0, profile: PrecisionProfile::for_scalar::<T>(), enabled: true }
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }
}

/// `D_max = √K · arccosh(x_t_max / √K)`.
pub fn d_max<T: Scalar>(k: T, profile: &PrecisionProfile) -> Result<T> {
    if !(k > T::zero()) {
        return Err(domain(format!("d_max: K must be positive, got {k}")));
    }
    let sk = k.sqrt();
    let ratio = T::c(profile.x_t_max) / sk;
    if !(ratio > T::one()) {
        return Err(domain(format!(
            "d_max: x_t_max = {} does not exceed √K = {sk}; manifold too curved for this precision",
            profile.x_t_max
        )));
    }
    Ok(ratio.acosh() * sk)
}

/// `atanh(0.99) / (s · D_max)`.
pub fn rate<T: Scalar>(dmax: T, s: f64) -> T {
    T::c(0.99).atanh() / (T::c(s) * dmax)
}

/// Shrink applied to the rescaled radius. `tanh` saturates to exactly 1 in
/// floating point, which would put saturated points on the `D_max` sphere itself.
pub fn radius_shrink<T: Scalar>() -> T {
    T::one() - T::c(64.0) * T::epsilon()
}

/// Multiplier `D_max · tanh(r n) / n` applied to a tangent of norm `n`.
fn rescale_factor<T: Scalar>(n: T, dmax: T, r: T) -> T {
    dmax * radius_shrink::<T>() * (r * n).tanh() / n
}

/// Rescaled norm of a tangent with norm `n` (useful for monotonicity checks).
pub fn rescaled_norm<T: Scalar>(n: T, k: T, cfg: &RescaleConfig) -> Result<T> {
    if n < T::c(ZERO_NORM) {
        return Ok(T::zero());
    }
    let dmax = d_max(k, &cfg.profile)?;
    Ok(rescale_factor(n, dmax, rate(dmax, cfg.s)) * n)
}

/// Rescale the spatial part of a tangent vector at the origin.
pub fn rescale_space<T: Scalar>(u: &[T], k: T, cfg: &RescaleConfig) -> Result<Vec<T>> {
    let n = sq_norm(u).sqrt();
    if n < T::c(ZERO_NORM) {
        return Ok(vec![T::zero(); u.len()]);
    }
    let dmax = d_max(k, &cfg.profile)?;
    let f = rescale_factor(n, dmax, rate(dmax, cfg.s));
    Ok(u.iter().map(|x| *x * f).collect())
}

/// Rescale a point given as coordinates: `exp_0(rescale(log_0(x)))`.
pub fn rescale_coords<T: Scalar>(m: &Lorentz<T>, x: &[T], cfg: &RescaleConfig) -> Result<Vec<T>> {
    let z = m.log0(x);
    let u = rescale_space(&z[1..], m.k(), cfg)?;
    Ok(m.exp0(&u))
}

/// Pull a point back inside the representable radius of its manifold.
pub fn rescale_point<T: Scalar>(x: &LorentzPoint<T>, cfg: &RescaleConfig) -> Result<LorentzPoint<T>> {
    let m = *x.manifold();
    Ok(LorentzPoint::from_raw(m, rescale_coords(&m, x.coords(), cfg)?))
}

/// Tangent-space half of [`rescale_point`]; `z` must be based at the origin.
pub fn rescale_tangent<T: Scalar>(
    z: &TangentVector<T>,
    cfg: &RescaleConfig,
) -> Result<TangentVector<T>> {
    let m = *z.base().manifold();
    let o = m.origin_coords();
    if z.base().coords() != o.as_slice() {
        return Err(usage("rescale_tangent: tangent must be based at the origin"));
    }
    let u = rescale_space(&z.coords()[1..], m.k(), cfg)?;
    Ok(TangentVector::at_origin(m, &u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg64() -> RescaleConfig {
        RescaleConfig::default_for::<f64>()
    }

    #[test]
    fn d_max_examples() {
        let p64 = PrecisionProfile::new(Dtype::F64);
        let p32 = PrecisionProfile::new(Dtype::F32);
        // arccosh(1e8) = ln(2e8) up to 1e-17
        assert_abs_diff_eq!(d_max(1.0f64, &p64).unwrap(), 19.113827924512311, epsilon = 1e-9);
        assert_abs_diff_eq!(d_max(1.0f64, &p32).unwrap(), 8.294049577602022, epsilon = 1e-9);
        assert_abs_diff_eq!(d_max(4.0f64, &p32).unwrap(), 2.0 * 1000f64.acosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(d_max(4.0f64, &p32).unwrap(), 15.201804419083977, epsilon = 1e-9);
    }

    #[test]
    fn d_max_rejects_overcurved_manifold() {
        let p = PrecisionProfile::new(Dtype::F32);
        assert!(matches!(d_max(4e6f64, &p), Err(crate::Error::NumericDomain(_))));
        assert!(d_max(0.0f64, &p).is_err());
    }

    #[test]
    fn origin_maps_to_origin() {
        let m = Lorentz::new(1.0f64, 3).unwrap();
        let o = LorentzPoint::origin(m);
        assert_eq!(rescale_point(&o, &cfg64()).unwrap(), o);
        let z = TangentVector::at_origin(m, &[0.0, 0.0, 0.0]);
        assert_eq!(rescale_tangent(&z, &cfg64()).unwrap().coords(), &[0.0; 4]);
    }

    #[test]
    fn boundary_lands_at_099_dmax() {
        for &k in &[0.5f64, 1.0, 2.0] {
            let m = Lorentz::new(k, 2).unwrap();
            let cfg = cfg64();
            let dmax = d_max(k, &cfg.profile).unwrap();
            let z = [0.0, 0.6 * cfg.s * dmax, 0.8 * cfg.s * dmax];
            let x = m.exp0(&z[1..]);
            let y = rescale_coords(&m, &x, &cfg).unwrap();
            assert_abs_diff_eq!(m.dist0(&y), 0.99 * dmax, epsilon = 1e-9);
        }
    }

    #[test]
    fn small_norms_are_amplified_by_atanh_ratio() {
        let cfg = cfg64();
        let n = rescaled_norm(1e-6f64, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(n / 1e-6, 0.99f64.atanh() / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn saturated_tangent_stays_strictly_inside() {
        for &k in &[0.25f32, 1.0, 4.0] {
            let cfg = RescaleConfig::default_for::<f32>();
            let dmax = d_max(k, &cfg.profile).unwrap();
            let m = Lorentz::new(k, 2).unwrap();
            let u = rescale_space(&[1e6f32, 0.0], k, &cfg).unwrap();
            let x = m.exp0(&u);
            assert!(m.dist0(&x) < dmax);
            assert!(x[0] < 2e3);
        }
    }
}
