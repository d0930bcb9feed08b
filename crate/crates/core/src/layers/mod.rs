//! Network components on the Lorentz model.
mod block;
mod conv;
mod norm;
mod rotation;
pub use block::{lorentz_relu, switch_e2l, switch_l2e, Conv2d, Linear, LorentzCoreBottleneck};
pub use conv::{LorentzConv2d, LorentzFeatureMap, LorentzLinear};
pub use norm::{BatchNorm, LorentzBatchNorm, EPS_BN};
pub use rotation::{adapt_weight, cayley_orthogonalize, BoostParam, RotationKernel, RotationMode};
