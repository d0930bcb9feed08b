//! Numerics for deep learning on the Lorentz model of hyperbolic space.

pub mod autodiff;
mod error;
pub mod hyper;
pub mod layers;
pub mod lhier;
pub mod manifold;
pub mod optim;
pub mod params;
mod scalar;
pub mod stability;

pub use error::{Error, Result};
pub use manifold::{minkowski_inner, Lorentz, LorentzPoint, ManifoldHandle, ManifoldId, TangentVector};
pub use scalar::{Dtype, Scalar};
pub use stability::{d_max, PrecisionProfile, RescaleConfig};
