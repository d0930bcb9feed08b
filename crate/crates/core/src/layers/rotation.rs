use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{domain, Result};
use crate::params::{Binder, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

/// How a rotation kernel keeps its map norm-preserving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    /// Window length ≤ output channels: orthonormal rows from a Cayley transform.
    Cayley,
    /// Window length > output channels: rescale every output to the input norm.
    NormCorrect,
}

impl RotationMode {
    pub fn for_shape(rows: usize, cout: usize) -> Self {
        if rows > cout {
            RotationMode::NormCorrect
        } else {
            RotationMode::Cayley
        }
    }
}

/// `Q = (I − A)(I + A)⁻¹` with `A = (W − Wᵀ)/2`.
pub fn cayley_orthogonalize<T: Scalar>(g: &Graph<T>, w: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    let a = g.sub(w, wt)?;
    let a = g.scale(a, T::c(0.5))?;
    g.cayley(a)
}

/// Effective `[rows, cout]` matrix for a raw `[kh, kw, cin, cout]` kernel.
///
/// In Cayley mode the raw rows are zero-padded to a `cout × cout` matrix and the
/// first `rows` columns of its Cayley transform, transposed, are returned; the
/// result has orthonormal rows, so `x ↦ xŴ` preserves norms. In norm-correct
/// mode the raw kernel is returned reshaped.
pub fn adapt_weight<T: Scalar>(g: &Graph<T>, raw: Var) -> Result<(Var, RotationMode)> {
    let s = g.shape(raw);
    let (rows, cout) = (s.iter().take(s.len() - 1).product::<usize>(), *s.last().unwrap_or(&0));
    let w = g.reshape(raw, &[rows, cout])?;
    match RotationMode::for_shape(rows, cout) {
        RotationMode::NormCorrect => Ok((w, RotationMode::NormCorrect)),
        RotationMode::Cayley => {
            let sq = if rows < cout {
                let pad = g.constant(Tensor::zeros(&[cout - rows, cout]));
                g.concat(&[w, pad], 0)?
            } else {
                w
            };
            let q = cayley_orthogonalize(g, sq)?;
            let q = g.cols(q, 0, rows)?;
            Ok((g.transpose(q)?, RotationMode::Cayley))
        }
    }
}

/// Rescale rows of `y` to the norms in `target` (`[N, 1]`), rejecting
/// rows that collapsed to zero from a nonzero input.
pub(crate) fn norm_correct<T: Scalar>(g: &Graph<T>, y: Var, target: Var) -> Result<Var> {
    let yn = g.norm_rows(y)?;
    {
        let (yv, tv) = (g.value(yn), g.value(target));
        let tiny = T::epsilon() * T::epsilon();
        if yv.data().iter().zip(tv.data()).any(|(a, b)| *a <= tiny && *b > tiny.sqrt()) {
            return Err(domain("rotation: kernel maps a nonzero input to zero (degenerate kernel)"));
        }
    }
    let f = g.div(target, yn)?;
    g.mul(y, f)
}

/// Rotation half of a Lorentz linear map or convolution.
#[derive(Debug, Clone)]
pub struct RotationKernel {
    pub raw: ParamId,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
}

impl RotationKernel {
    /// Register a raw kernel `[kh, kw, cin, cout]`.
    ///
    /// Cayley kernels start from N(0, 1/cout) entries, so the skew generator is
    /// O(1) and the initial rotation mixes channels. Norm-correct kernels use
    /// N(0, 1/rows).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (kh, kw): (usize, usize),
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let rows = kh * kw * cin;
        let std = match RotationMode::for_shape(rows, cout) {
            RotationMode::Cayley => 1.0 / (cout as f64).sqrt(),
            RotationMode::NormCorrect => 1.0 / (rows as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("positive std");
        let data: Vec<T> = (0..rows * cout).map(|_| T::c(normal.sample(rng))).collect();
        let raw = store.add(name, ParamKind::Euclidean, Tensor::new(vec![kh, kw, cin, cout], data)?)?;
        Ok(Self { raw, kh, kw, cin, cout })
    }

    pub fn rows(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn mode(&self) -> RotationMode {
        RotationMode::for_shape(self.rows(), self.cout)
    }

    /// Effective `[rows, cout]` matrix.
    pub fn effective<T: Scalar>(&self, b: &Binder<T>) -> Result<Var> {
        Ok(adapt_weight(b.g, b.var(self.raw))?.0)
    }

    /// Norm-preserving map of `[N, rows]` inputs to `[N, cout]`.
    pub fn apply<T: Scalar>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.g;
        let w = self.effective(b)?;
        let y = g.matmul(x, w)?;
        match self.mode() {
            RotationMode::Cayley => Ok(y),
            RotationMode::NormCorrect => {
                let xn = g.norm_rows(x)?;
                norm_correct(g, y, xn)
            }
        }
    }
}

/// Boost velocity parameter (length n, zero-initialized: identity boost).
#[derive(Debug, Clone)]
pub struct BoostParam {
    pub v_raw: ParamId,
}

impl BoostParam {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, n: usize) -> Result<Self> {
        Ok(Self { v_raw: store.add(name, ParamKind::Euclidean, Tensor::zeros(&[n]))? })
    }

    pub fn apply<T: Scalar>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        crate::hyper::boost(b.g, x, b.var(self.v_raw))
    }
}
