//! Parameter storage shared by layers and optimizers, and its binding to a graph.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autodiff::{finite_diff_check, GradCheckReport, Gradients, Graph, Tensor, Var};
use crate::error::{usage, Result};
use crate::hyper::Curv;
use crate::manifold::{ManifoldHandle, ManifoldId};
use crate::scalar::Scalar;
use crate::stability::RescaleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// How an optimizer treats a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Euclidean,
    /// Every row is a point on the given manifold.
    Lorentz(ManifoldId),
    /// Running statistics; never differentiated or stepped.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// All trainable state of a model: tensors plus manifold curvatures.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    slots: Vec<ParamSlot<T>>,
    manifolds: Vec<ManifoldHandle<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new(), manifolds: Vec::new() }
    }

    /// Register a manifold with initial curvature `k`.
    pub fn add_manifold(&mut self, name: &str, dim: usize, k: T, learnable: bool) -> ManifoldId {
        let id = ManifoldId(self.manifolds.len() as u32);
        let mut h = ManifoldHandle::new(id, name, dim).with_k(k);
        h.set_learnable(learnable);
        self.manifolds.push(h);
        id
    }

    pub fn manifold(&self, id: ManifoldId) -> &ManifoldHandle<T> {
        &self.manifolds[id.0 as usize]
    }

    pub fn manifold_mut(&mut self, id: ManifoldId) -> &mut ManifoldHandle<T> {
        &mut self.manifolds[id.0 as usize]
    }

    pub fn manifolds(&self) -> &[ManifoldHandle<T>] {
        &self.manifolds
    }

    pub(crate) fn manifolds_mut(&mut self) -> &mut [ManifoldHandle<T>] {
        &mut self.manifolds
    }

    /// Mark every manifold fixed or learnable.
    pub fn set_curvature_learnable(&mut self, learnable: bool) {
        for m in &mut self.manifolds {
            m.set_learnable(learnable);
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(usage(format!("duplicate parameter name `{name}`")));
        }
        if let ParamKind::Lorentz(m) = kind {
            let dim = self.manifold(m).dim();
            if value.rank() != 2 || value.cols() != dim + 1 {
                return Err(usage(format!(
                    "parameter `{name}`: Lorentz rows must have {} coordinates, got shape {:?}",
                    dim + 1,
                    value.shape()
                )));
            }
        }
        self.slots.push(ParamSlot { name, kind, value });
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot<T> {
        &self.slots[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(usage(format!(
                "parameter `{}`: shape {:?} does not match {:?}",
                slot.name,
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn slots(&self) -> &[ParamSlot<T>] {
        &self.slots
    }

    pub(crate) fn slots_mut(&mut self) -> &mut [ParamSlot<T>] {
        &mut self.slots
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Number of scalar entries in trainable slots.
    pub fn num_trainable(&self) -> usize {
        self.slots.iter().filter(|s| s.kind != ParamKind::Buffer).map(|s| s.value.len()).sum()
    }
}

/// Gradients of a loss with respect to store slots and curvature parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    params: Vec<Option<Tensor<T>>>,
    kappa: Vec<Option<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { params: vec![None; store.slots.len()], kappa: vec![None; store.manifolds.len()] }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn set_param(&mut self, id: ParamId, g: Tensor<T>) {
        self.params[id.0] = Some(g);
    }

    /// Gradient with respect to the raw curvature parameter.
    pub fn kappa(&self, id: ManifoldId) -> Option<T> {
        self.kappa.get(id.0 as usize).copied().flatten()
    }

    pub fn set_kappa(&mut self, id: ManifoldId, g: T) {
        self.kappa[id.0 as usize] = Some(g);
    }

    pub fn global_norm(&self) -> T {
        let p: T = self.params.iter().flatten().flat_map(|t| t.data().iter()).map(|v| *v * *v).sum();
        let k: T = self.kappa.iter().flatten().map(|v| *v * *v).sum();
        (p + k).sqrt()
    }

    pub fn scale(&mut self, f: T) {
        for t in self.params.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= f;
            }
        }
        for v in self.kappa.iter_mut().flatten() {
            *v *= f;
        }
    }

    /// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip(&mut self, max_norm: T) -> T {
        let n = self.global_norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor::all_finite) && self.kappa.iter().flatten().all(|v| v.is_finite())
    }
}

/// Forward-pass context: a graph plus lazily created leaves for store entries.
pub struct Binder<'a, T> {
    pub g: &'a Graph<T>,
    store: &'a ParamStore<T>,
    pub train: bool,
    pub rescale: RescaleConfig,
    vars: RefCell<HashMap<ParamId, Var>>,
    curvs: RefCell<HashMap<ManifoldId, (Var, Curv)>>,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(g: &'a Graph<T>, store: &'a ParamStore<T>, train: bool, rescale: RescaleConfig) -> Self {
        Self {
            g,
            store,
            train,
            rescale,
            vars: RefCell::new(HashMap::new()),
            curvs: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph leaf holding a store entry (differentiable unless it is a buffer).
    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow().get(&id) {
            return *v;
        }
        let slot = self.store.slot(id);
        let v = self.g.leaf(slot.value.clone(), slot.kind != ParamKind::Buffer);
        self.vars.borrow_mut().insert(id, v);
        v
    }

    /// Use an existing graph value for a store entry in this pass.
    pub fn bind(&self, id: ParamId, v: Var) {
        self.vars.borrow_mut().insert(id, v);
    }

    /// Curvature of a manifold as graph values; differentiable when learnable.
    pub fn curv(&self, id: ManifoldId) -> Result<Curv> {
        if let Some((_, c)) = self.curvs.borrow().get(&id) {
            return Ok(*c);
        }
        let h = self.store.manifold(id);
        let raw = self.g.leaf(Tensor::scalar(h.kappa_raw()), h.learnable());
        let k = self.g.exp(raw)?;
        let c = Curv::new(self.g, k)?;
        self.curvs.borrow_mut().insert(id, (raw, c));
        Ok(c)
    }

    /// Use an existing graph value as the raw curvature of a manifold in this pass.
    pub fn bind_curvature(&self, id: ManifoldId, raw: Var) -> Result<()> {
        let k = self.g.exp(raw)?;
        let c = Curv::new(self.g, k)?;
        self.curvs.borrow_mut().insert(id, (raw, c));
        Ok(())
    }

    /// Queue a buffer overwrite (running statistics), applied with [`Binder::take_updates`].
    pub fn push_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    pub fn take_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Gradients for every bound entry.
    pub fn collect(&self, gr: &Gradients<T>) -> Grads<T> {
        let mut out = Grads::zeros_like(self.store);
        for (id, v) in self.vars.borrow().iter() {
            if self.store.slot(*id).kind == ParamKind::Buffer {
                continue;
            }
            if let Some(t) = gr.get(*v) {
                out.set_param(*id, t.clone());
            }
        }
        for (id, (raw, _)) in self.curvs.borrow().iter() {
            if self.store.manifold(*id).learnable() {
                if let Some(t) = gr.get(*raw) {
                    out.set_kappa(*id, t.item());
                }
            }
        }
        out
    }
}

/// Apply queued buffer updates to the store.
pub fn apply_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
    for (id, t) in updates {
        store.set_value(id, t)?;
    }
    Ok(())
}

/// Finite-difference check of a scalar model function with respect to the
/// listed store entries.
pub fn check_param_gradients<T, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    rescale: RescaleConfig,
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Binder<T>) -> Result<Var>,
{
    check_gradients(store, ids, &[], rescale, h, tol, f)
}

/// [`check_param_gradients`] that also differentiates the raw curvatures of
/// `manifolds`, which come after the parameters in the report's input order.
pub fn check_gradients<T, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    manifolds: &[ManifoldId],
    rescale: RescaleConfig,
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Binder<T>) -> Result<Var>,
{
    let mut inputs: Vec<Tensor<T>> = ids.iter().map(|id| store.value(*id).clone()).collect();
    inputs.extend(manifolds.iter().map(|m| Tensor::scalar(store.manifold(*m).kappa_raw())));
    finite_diff_check(
        |g, vars| {
            let b = Binder::new(g, store, true, rescale);
            for (id, v) in ids.iter().zip(vars) {
                b.bind(*id, *v);
            }
            for (m, v) in manifolds.iter().zip(&vars[ids.len()..]) {
                b.bind_curvature(*m, *v)?;
            }
            f(&b)
        },
        &inputs,
        h,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorentz_slots_check_row_width() {
        let mut s = ParamStore::<f64>::new();
        let m = s.add_manifold("m", 2, 1.0, true);
        assert!(s.add("p", ParamKind::Lorentz(m), Tensor::zeros(&[4, 2])).is_err());
        assert!(s.add("p", ParamKind::Lorentz(m), Tensor::zeros(&[4, 3])).is_ok());
        assert!(s.add("p", ParamKind::Euclidean, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn binder_collects_curvature_gradient() {
        let mut s = ParamStore::<f64>::new();
        let m = s.add_manifold("m", 2, 2.0, true);
        let w = s.add("w", ParamKind::Euclidean, Tensor::vector(vec![3.0])).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &s, true, RescaleConfig::default_for::<f64>());
        let c = b.curv(m).unwrap();
        let wv = b.var(w);
        let y = g.mul(wv, c.k).unwrap();
        let y = g.sum(y).unwrap();
        let gr = b.collect(&g.backward(y).unwrap());
        // d(w K)/d raw = w K
        assert!((gr.kappa(m).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(gr.param(w).unwrap().data(), &[2.0]);
        assert!((gr.global_norm() - 40f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fixed_curvature_has_no_gradient() {
        let mut s = ParamStore::<f64>::new();
        let m = s.add_manifold("m", 2, 2.0, false);
        let g = Graph::new();
        let b = Binder::new(&g, &s, true, RescaleConfig::default_for::<f64>());
        let c = b.curv(m).unwrap();
        let y = g.sum(c.k).unwrap();
        assert!(b.collect(&g.backward(y).unwrap()).kappa(m).is_none());
    }
}
