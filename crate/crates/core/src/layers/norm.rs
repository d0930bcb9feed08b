use crate::autodiff::{Tensor, Var};
use crate::error::{usage, Result};
use crate::hyper::{self, Curv};
use crate::manifold::ManifoldId;
use crate::params::{Binder, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

pub const EPS_BN: f64 = 1e-5;

/// `[1, n+1]` origin of the curvature `c` as a graph value.
pub(crate) fn origin_row<T: Scalar>(b: &Binder<T>, c: Curv, n: usize) -> Result<Var> {
    let t = b.g.reshape(c.sqrt_k, &[1, 1])?;
    let z = b.g.constant(Tensor::zeros(&[1, n]));
    b.g.concat(&[t, z], 1)
}

/// Batch norm on the hyperboloid.
///
/// Training: centroid `μ` and variance `σ²` (mean squared Lorentz distance to
/// `μ`) of the batch; points are mapped to the origin's tangent space by
/// `PT_{μ→0} ∘ log_μ`, scaled by `γ / √(σ² + ε)`, rescaled to the representable
/// radius, then moved to the learnable mean `β` by `exp_β ∘ PT_{0→β}`.
///
/// The running mean is kept as its `log_0` image so that it stays valid when the
/// curvature changes.
#[derive(Debug, Clone)]
pub struct LorentzBatchNorm {
    pub manifold: ManifoldId,
    pub dim: usize,
    pub mean: ParamId,
    pub gamma: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl LorentzBatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, manifold: ManifoldId) -> Result<Self> {
        let dim = store.manifold(manifold).dim();
        let origin = store.manifold(manifold).geometry().origin_coords();
        let mean = store.add(format!("{name}.mean"), ParamKind::Lorentz(manifold), Tensor::new(vec![1, dim + 1], origin)?)?;
        let gamma = store.add(format!("{name}.gamma"), ParamKind::Euclidean, Tensor::full(&[1, 1], T::one()))?;
        let running_mean = store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[1, dim]))?;
        let running_var = store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[1, 1], T::one()))?;
        Ok(Self { manifold, dim, mean, gamma, running_mean, running_var, momentum: 0.1 })
    }

    pub fn forward<T: Scalar>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.g;
        let c = b.curv(self.manifold)?;
        let n = g.shape(x)[0];
        let (mu, var) = if b.train {
            if n < 2 {
                return Err(usage("lorentz_batchnorm: training needs a batch of at least 2"));
            }
            let mu = hyper::centroid(g, x, c)?;
            let d = hyper::sq_dist(g, x, mu, c)?;
            let var = g.mean(d)?;
            let var = g.reshape(var, &[1, 1])?;
            self.queue_running_update(b, mu, var, c)?;
            (mu, var)
        } else {
            let rm = b.var(self.running_mean);
            (hyper::exp0(g, rm, c)?, b.var(self.running_var))
        };
        let o = origin_row(b, c, self.dim)?;
        let u = hyper::log_map(g, mu, x, c)?;
        let u = hyper::transport(g, mu, o, u, c)?;
        let u = hyper::space(g, u)?;
        let den = g.add_scalar(var, T::c(EPS_BN))?;
        let den = g.sqrt(den)?;
        let f = g.div(b.var(self.gamma), den)?;
        let u = g.mul(u, f)?;
        let u = hyper::rescale(g, u, c, &b.rescale)?;
        let zeros = g.constant(Tensor::zeros(&[n, 1]));
        let v = g.concat(&[zeros, u], 1)?;
        let beta = b.var(self.mean);
        let v = hyper::transport(g, o, beta, v, c)?;
        let y = hyper::exp_map(g, beta, v, c)?;
        let s = hyper::space(g, y)?;
        hyper::lift(g, s, c)
    }

    fn queue_running_update<T: Scalar>(&self, b: &Binder<T>, mu: Var, var: Var, c: Curv) -> Result<()> {
        let m = T::c(self.momentum);
        let lm = hyper::log0(b.g, mu, c)?;
        let blend = |old: &Tensor<T>, new: &Tensor<T>| {
            let data = old.data().iter().zip(new.data()).map(|(o, n)| (T::one() - m) * *o + m * *n).collect();
            Tensor::new(old.shape().to_vec(), data)
        };
        let store = b.store();
        b.push_update(self.running_mean, blend(store.value(self.running_mean), &b.g.value(lm))?);
        b.push_update(self.running_var, blend(store.value(self.running_var), &b.g.value(var))?);
        Ok(())
    }
}

/// Euclidean batch norm over the rows of `[N, C]`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            gamma: store.add(format!("{name}.gamma"), ParamKind::Euclidean, Tensor::full(&[1, channels], T::one()))?,
            beta: store.add(format!("{name}.beta"), ParamKind::Euclidean, Tensor::zeros(&[1, channels]))?,
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[1, channels]))?,
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[1, channels], T::one()))?,
            momentum: 0.1,
        })
    }

    pub fn forward<T: Scalar>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.g;
        let (mean, var) = if b.train {
            let mean = g.mean_axis(x, 0)?;
            let d = g.sub(x, mean)?;
            let d2 = g.square(d)?;
            let var = g.mean_axis(d2, 0)?;
            let m = T::c(self.momentum);
            let store = b.store();
            for (id, new) in [(self.running_mean, mean), (self.running_var, var)] {
                let data = store
                    .value(id)
                    .data()
                    .iter()
                    .zip(g.value(new).data())
                    .map(|(o, n)| (T::one() - m) * *o + m * *n)
                    .collect();
                b.push_update(id, Tensor::new(vec![1, self.channels], data)?);
            }
            (mean, var)
        } else {
            (b.var(self.running_mean), b.var(self.running_var))
        };
        let d = g.sub(x, mean)?;
        let den = g.add_scalar(var, T::c(EPS_BN))?;
        let den = g.sqrt(den)?;
        let y = g.div(d, den)?;
        let y = g.mul(y, b.var(self.gamma))?;
        g.add(y, b.var(self.beta))
    }
}
