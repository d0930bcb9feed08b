//! Riemannian optimizers with ordered curvature updates.
//!
//! A step runs in three phases: every Euclidean and Lorentz slot is updated
//! under the current curvatures, then the curvature parameters are updated, then
//! every Lorentz slot (with its first moment) is moved onto the manifold of the
//! new curvature. The `naive` flag swaps the first two phases and skips the move.

use crate::autodiff::Tensor;
use crate::error::{usage, Error, Result};
use crate::manifold::{Lorentz, ManifoldId};
use crate::params::{Grads, ParamKind, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Rsgd,
    Radam,
    Radamw,
}

impl std::str::FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsgd" | "sgd" => Ok(Self::Rsgd),
            "radam" | "adam" => Ok(Self::Radam),
            "radamw" | "adamw" => Ok(Self::Radamw),
            _ => Err(usage(format!("unknown optimizer '{s}' (rsgd, radam, radamw)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Heavy-ball coefficient for `Rsgd`.
    pub momentum: f64,
    /// Curvature learning rate relative to `lr`.
    pub curvature_lr_scale: f64,
    /// Global gradient-norm clip applied before the step.
    pub clip_norm: Option<f64>,
    /// Curvature first, parameters second, no move.
    pub naive: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Radamw,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.0,
            curvature_lr_scale: 0.1,
            clip_norm: None,
            naive: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lr * self.weight_decay < 1.0
            && (0.0..1.0).contains(&self.momentum)
            && self.curvature_lr_scale >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(usage(format!("invalid optimizer configuration {self:?}")))
        }
    }
}

/// Per-slot optimizer state. For Lorentz slots `m` holds one tangent vector per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> SlotState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { m: Tensor::zeros(shape), v: Tensor::zeros(shape) }
    }
}

/// Euclidean half of the decoupled decay: `θ − γθλ`.
pub fn euclidean_decay<T: Scalar>(theta: &mut [T], lr: T, wd: T) {
    for x in theta {
        *x = *x - lr * *x * wd;
    }
}

/// Lorentz half of the decoupled decay: the weighted centroid of `θ` and the
/// origin with weights `[1 − γλ, γλ]`.
pub fn lorentz_decay<T: Scalar>(geo: &Lorentz<T>, theta: &[T], lr: T, wd: T) -> Result<Vec<T>> {
    let gl = lr * wd;
    let o = geo.origin_coords();
    geo.centroid(&[theta, &o], &[T::one() - gl, gl])
}

fn check_grad<T: Scalar>(name: &str, g: &Tensor<T>) -> Result<()> {
    if g.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "optimizer".into(), detail: format!("gradient of '{name}' has NaN/inf") })
    }
}

/// Riemannian SGD with optional heavy-ball momentum (`st.m` is the buffer).
pub fn rsgd_step<T: Scalar>(
    value: &mut Tensor<T>,
    grad: &Tensor<T>,
    st: &mut SlotState<T>,
    lr: T,
    momentum: T,
    geo: Option<&Lorentz<T>>,
) -> Result<()> {
    check_grad("slot", grad)?;
    match geo {
        None => {
            for ((x, g), b) in value.data_mut().iter_mut().zip(grad.data()).zip(st.m.data_mut()) {
                *b = momentum * *b + *g;
                *x -= lr * *b;
            }
        }
        Some(geo) => {
            for r in 0..value.rows() {
                let p = value.row(r).to_vec();
                let h = geo.egrad_to_rgrad(&p, grad.row(r));
                let buf: Vec<T> = st.m.row(r).iter().zip(&h).map(|(b, hi)| momentum * *b + *hi).collect();
                let step: Vec<T> = buf.iter().map(|b| -lr * *b).collect();
                let q = geo.exp(&p, &step);
                let moved = geo.transport(&p, &q, &buf);
                value.row_mut(r).copy_from_slice(&q);
                st.m.row_mut(r).copy_from_slice(&moved);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct AdamHyper<T> {
    lr: T,
    b1: T,
    b2: T,
    eps: T,
    bc1: T,
    bc2: T,
}

impl<T: Scalar> AdamHyper<T> {
    fn new(lr: f64, betas: (f64, f64), eps: f64, t: u64) -> Self {
        let t = t.min(i32::MAX as u64) as i32;
        Self {
            lr: T::c(lr),
            b1: T::c(betas.0),
            b2: T::c(betas.1),
            eps: T::c(eps),
            bc1: T::c(1.0 - betas.0.powi(t)),
            bc2: T::c(1.0 - betas.1.powi(t)),
        }
    }

    fn moments(&self, m: &mut [T], v: &mut [T], h: &[T]) -> Vec<T> {
        let mut d = Vec::with_capacity(h.len());
        for ((mi, vi), hi) in m.iter_mut().zip(v.iter_mut()).zip(h) {
            *mi = self.b1 * *mi + (T::one() - self.b1) * *hi;
            *vi = self.b2 * *vi + (T::one() - self.b2) * *hi * *hi;
            d.push((*mi / self.bc1) / ((*vi / self.bc2).sqrt() + self.eps));
        }
        d
    }
}

/// `x_s · d_s`; dividing by `x_t` gives the time component that makes `d` tangent at `x`.
fn space_dot<T: Scalar>(x: &[T], d: &[T]) -> T {
    x[1..].iter().zip(&d[1..]).map(|(a, b)| *a * *b).sum()
}

fn adam_rows<T: Scalar>(value: &mut Tensor<T>, rgrads: &[Vec<T>], st: &mut SlotState<T>, hp: &AdamHyper<T>, geo: &Lorentz<T>) {
    for (r, h) in rgrads.iter().enumerate() {
        let p = value.row(r).to_vec();
        let mut m = st.m.row(r).to_vec();
        let mut d = hp.moments(&mut m, st.v.row_mut(r), h);
        d[0] = space_dot(&p, &d) / p[0];
        let step: Vec<T> = d.iter().map(|x| -hp.lr * *x).collect();
        let q = geo.exp(&p, &step);
        let m = geo.transport(&p, &q, &m);
        value.row_mut(r).copy_from_slice(&q);
        st.m.row_mut(r).copy_from_slice(&m);
    }
}

fn adam_flat<T: Scalar>(value: &mut Tensor<T>, grad: &Tensor<T>, st: &mut SlotState<T>, hp: &AdamHyper<T>) {
    let d = hp.moments(st.m.data_mut(), st.v.data_mut(), grad.data());
    for (x, di) in value.data_mut().iter_mut().zip(d) {
        *x -= hp.lr * di;
    }
}

/// Riemannian Adam at step `t ≥ 1`. Lorentz slots accumulate moments on
/// Riemannian gradients; the elementwise-normalized direction keeps its space
/// part and takes the time component that makes it tangent. The step retracts
/// with the exponential map and transports the first moment to the new point.
#[allow(clippy::too_many_arguments)]
pub fn radam_step<T: Scalar>(
    value: &mut Tensor<T>,
    grad: &Tensor<T>,
    st: &mut SlotState<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    t: u64,
    geo: Option<&Lorentz<T>>,
) -> Result<()> {
    radamw_step(value, grad, st, lr, betas, eps, 0.0, t, geo)
}

/// Riemannian AdamW: decoupled decay toward the origin, then [`radam_step`].
#[allow(clippy::too_many_arguments)]
pub fn radamw_step<T: Scalar>(
    value: &mut Tensor<T>,
    grad: &Tensor<T>,
    st: &mut SlotState<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    t: u64,
    geo: Option<&Lorentz<T>>,
) -> Result<()> {
    check_grad("slot", grad)?;
    let hp = AdamHyper::<T>::new(lr, betas, eps, t);
    let decay = weight_decay != 0.0;
    let (lr_t, wd_t) = (T::c(lr), T::c(weight_decay));
    match geo {
        None => {
            if decay {
                euclidean_decay(value.data_mut(), lr_t, wd_t);
            }
            adam_flat(value, grad, st, &hp);
        }
        Some(geo) => {
            let mut rgrads = Vec::with_capacity(value.rows());
            for r in 0..value.rows() {
                let p = value.row(r).to_vec();
                let mut h = geo.egrad_to_rgrad(&p, grad.row(r));
                if decay {
                    let q = lorentz_decay(geo, &p, lr_t, wd_t)?;
                    h = geo.transport(&p, &q, &h);
                    let m = geo.transport(&p, &q, st.m.row(r));
                    st.m.row_mut(r).copy_from_slice(&m);
                    value.row_mut(r).copy_from_slice(&q);
                }
                rgrads.push(h);
            }
            adam_rows(value, &rgrads, st, &hp, geo);
        }
    }
    Ok(())
}

/// Move one Lorentz row and its tangent vectors from curvature `old` to `new`:
/// transport to the origin, take `log_0` under `old`, `exp_0` under `new`, and
/// transport back to the moved point.
pub fn move_parameters<T: Scalar>(old: &Lorentz<T>, new: &Lorentz<T>, p: &mut [T], tangents: &mut [&mut [T]]) {
    if old.k() == new.k() {
        return;
    }
    let o_old = old.origin_coords();
    let at_origin: Vec<Vec<T>> = tangents.iter().map(|g| old.transport(p, &o_old, g)).collect();
    let z = old.log0(p);
    let q = new.exp0(&z[1..]);
    let o_new = new.origin_coords();
    for (g, g0) in tangents.iter_mut().zip(&at_origin) {
        let mut g0 = g0.clone();
        g0[0] = T::zero();
        g.copy_from_slice(&new.transport(&o_new, &q, &g0));
    }
    p.copy_from_slice(&q);
}

/// What a step did, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats<T> {
    /// Global gradient norm before clipping.
    pub grad_norm: T,
    pub clipped: bool,
}

/// Optimizer over a whole [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimConfig,
    t: u64,
    slots: Vec<Option<SlotState<T>>>,
    kappa: Vec<SlotState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, t: 0, slots: Vec::new(), kappa: Vec::new() })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// First/second moments of a slot, once it has been stepped.
    pub fn slot_state(&self, id: crate::params::ParamId) -> Option<&SlotState<T>> {
        self.slots.get(id.index()).and_then(Option::as_ref)
    }

    /// One ordered step. On error neither the store nor the optimizer state changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<StepStats<T>> {
        if !grads.all_finite() {
            return Err(Error::NonFinite { op: "optimizer".into(), detail: "gradients contain NaN/inf".into() });
        }
        let mut grads = grads.clone();
        let grad_norm = grads.global_norm();
        let clipped = match self.cfg.clip_norm {
            Some(c) if grad_norm > T::c(c) => {
                grads.clip(T::c(c));
                true
            }
            _ => false,
        };

        let mut next = self.clone();
        let mut work = store.clone();
        next.t += 1;
        next.slots.resize(work.slots().len(), None);
        while next.kappa.len() < work.manifolds().len() {
            next.kappa.push(SlotState::zeros(&[1]));
        }

        if self.cfg.naive {
            next.curvature_phase(&mut work, &grads)?;
            next.param_phase(&mut work, &grads)?;
            for h in work.manifolds_mut() {
                let k = h.k();
                h.set_k_prev(k);
            }
        } else {
            next.param_phase(&mut work, &grads)?;
            next.curvature_phase(&mut work, &grads)?;
            next.move_phase(&mut work)?;
        }
        verify(&work)?;
        *self = next;
        *store = work;
        Ok(StepStats { grad_norm, clipped })
    }

    fn param_phase(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        let cfg = self.cfg;
        let geos: Vec<Lorentz<T>> = store.manifolds().iter().map(|h| h.geometry()).collect();
        for (i, slot) in store.slots_mut().iter_mut().enumerate() {
            let geo = match slot.kind {
                ParamKind::Buffer => continue,
                ParamKind::Euclidean => None,
                ParamKind::Lorentz(mid) => Some(&geos[mid.0 as usize]),
            };
            let Some(g) = grads.param(crate::params::ParamId::from_index(i)) else { continue };
            let st = self.slots[i].get_or_insert_with(|| SlotState::zeros(slot.value.shape()));
            check_grad(&slot.name, g)?;
            match cfg.kind {
                OptimKind::Rsgd => rsgd_step(&mut slot.value, g, st, T::c(cfg.lr), T::c(cfg.momentum), geo)?,
                OptimKind::Radam => radam_step(&mut slot.value, g, st, cfg.lr, cfg.betas, cfg.eps, self.t, geo)?,
                OptimKind::Radamw => {
                    radamw_step(&mut slot.value, g, st, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay, self.t, geo)?
                }
            }
        }
        Ok(())
    }

    fn curvature_phase(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        let cfg = self.cfg;
        let lr = cfg.lr * cfg.curvature_lr_scale;
        for (i, h) in store.manifolds_mut().iter_mut().enumerate() {
            if !h.learnable() {
                continue;
            }
            let Some(g) = grads.kappa(ManifoldId(i as u32)) else { continue };
            let mut raw = Tensor::scalar(h.kappa_raw());
            let gt = Tensor::scalar(g);
            let st = &mut self.kappa[i];
            match cfg.kind {
                OptimKind::Rsgd => rsgd_step(&mut raw, &gt, st, T::c(lr), T::c(cfg.momentum), None)?,
                OptimKind::Radam | OptimKind::Radamw => radam_step(&mut raw, &gt, st, lr, cfg.betas, cfg.eps, self.t, None)?,
            }
            h.set_kappa_raw(raw.item());
        }
        Ok(())
    }

    fn move_phase(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let moves: Vec<Option<(Lorentz<T>, Lorentz<T>)>> = store
            .manifolds()
            .iter()
            .map(|h| {
                let (old, new) = (h.k_prev(), h.k());
                (old != new).then(|| (h.geometry().with_k(old).expect("positive K"), h.geometry()))
            })
            .collect();
        for (i, slot) in store.slots_mut().iter_mut().enumerate() {
            let ParamKind::Lorentz(mid) = slot.kind else { continue };
            let Some((old, new)) = &moves[mid.0 as usize] else { continue };
            let st = self.slots[i].get_or_insert_with(|| SlotState::zeros(slot.value.shape()));
            for r in 0..slot.value.rows() {
                move_parameters(old, new, slot.value.row_mut(r), &mut [st.m.row_mut(r)]);
            }
        }
        for h in store.manifolds_mut() {
            let k = h.k();
            h.set_k_prev(k);
        }
        Ok(())
    }
}

fn verify<T: Scalar>(store: &ParamStore<T>) -> Result<()> {
    for h in store.manifolds() {
        if !h.kappa_raw().is_finite() {
            return Err(Error::NonFinite { op: "optimizer".into(), detail: format!("curvature of '{}'", h.name()) });
        }
    }
    for s in store.slots() {
        if !s.value.all_finite() {
            return Err(Error::NonFinite { op: "optimizer".into(), detail: format!("update of '{}'", s.name) });
        }
        if let ParamKind::Lorentz(_) = s.kind {
            if (0..s.value.rows()).any(|r| s.value.row(r)[0] <= T::zero()) {
                return Err(Error::NonFinite { op: "optimizer".into(), detail: format!("'{}' left the upper sheet", s.name) });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::hyper;
    use crate::params::{Binder, ParamId};
    use crate::stability::RescaleConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut impl Rng, m: &Lorentz<f64>, scale: f64) -> Vec<f64> {
        let u: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-scale..scale)).collect();
        m.exp0(&u)
    }

    fn random_tangent(rng: &mut impl Rng, m: &Lorentz<f64>, p: &[f64]) -> Vec<f64> {
        let u: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.tangent_projection(p, &u)
    }

    /// Gradients of `Σ d²(x_i, target)` over the rows of slot `x`.
    fn bowl_grads(store: &ParamStore<f64>, x: ParamId, mid: ManifoldId, target: &[f64]) -> (f64, Grads<f64>) {
        let g = Graph::new();
        let b = Binder::new(&g, store, true, RescaleConfig::default_for::<f64>());
        let c = b.curv(mid).unwrap();
        let n = store.value(x).rows();
        let t = g.constant(Tensor::from_rows(&vec![target.to_vec(); n]).unwrap());
        let d = hyper::sq_dist(&g, b.var(x), t, c).unwrap();
        let loss = g.sum(d).unwrap();
        let gr = g.backward(loss).unwrap();
        let out = (g.value(loss).item(), b.collect(&gr));
        out
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let m = Lorentz::new(1.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::from_rows(&[random_point(&mut rng, &m, 1.0)]).unwrap();
        let zero = Tensor::zeros(&[1, 4]);
        let mut a = p.clone();
        rsgd_step(&mut a, &zero, &mut SlotState::zeros(&[1, 4]), 0.1, 0.0, Some(&m)).unwrap();
        assert_eq!(a, p);
        let mut b = p.clone();
        radam_step(&mut b, &zero, &mut SlotState::zeros(&[1, 4]), 0.1, (0.9, 0.999), 1e-8, 1, Some(&m)).unwrap();
        assert_eq!(b, p);
    }

    #[test]
    fn rsgd_from_origin_follows_exp0() {
        let m = Lorentz::new(2.0f64, 2).unwrap();
        let o = m.origin_coords();
        let g = [0.7, 0.3, -0.4];
        let mut p = Tensor::from_rows(&[o.clone()]).unwrap();
        rsgd_step(&mut p, &Tensor::from_rows(&[g.to_vec()]).unwrap(), &mut SlotState::zeros(&[1, 3]), 0.5, 0.0, Some(&m))
            .unwrap();
        let h = m.egrad_to_rgrad(&o, &g);
        assert!(h[0].abs() < 1e-15);
        let want = m.exp0(&[-0.5 * h[1], -0.5 * h[2]]);
        for (a, b) in p.row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn run_bowl(kind: OptimKind, lr: f64, steps: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mid = store.add_manifold("m", 3, 1.0, false);
        let m = store.manifold(mid).geometry();
        let start = random_point(&mut rng, &m, 1.5);
        let target = random_point(&mut rng, &m, 1.5);
        let x = store.add("x", ParamKind::Lorentz(mid), Tensor::from_rows(&[start]).unwrap()).unwrap();
        let cfg = OptimConfig { kind, lr, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        for _ in 0..steps {
            let (_, gr) = bowl_grads(&store, x, mid, &target);
            opt.step(&mut store, &gr).unwrap();
            assert!(m.residual(store.value(x).row(0)) < 1e-10);
        }
        m.dist(store.value(x).row(0), &target)
    }

    #[test]
    fn rsgd_converges_on_squared_distance_bowl() {
        assert!(run_bowl(OptimKind::Rsgd, 0.2, 100) < 1e-3);
    }

    #[test]
    fn radam_converges_on_squared_distance_bowl() {
        assert!(run_bowl(OptimKind::Radam, 0.05, 300) < 1e-3);
    }

    #[test]
    fn radamw_without_decay_is_bitwise_radam() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Lorentz::new(0.8, 4).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|_| random_point(&mut rng, &m, 1.0)).collect();
        let e0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut pa, mut pb) = (Tensor::from_rows(&rows).unwrap(), Tensor::from_rows(&rows).unwrap());
        let (mut ea, mut eb) = (Tensor::vector(e0.clone()), Tensor::vector(e0));
        let (mut sa, mut sb) = (SlotState::zeros(&[3, 5]), SlotState::zeros(&[3, 5]));
        let (mut ta, mut tb) = (SlotState::zeros(&[6]), SlotState::zeros(&[6]));
        for t in 1..=100u64 {
            let g: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let g = Tensor::from_rows(&g).unwrap();
            let ge = Tensor::vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
            radam_step(&mut pa, &g, &mut sa, 0.01, (0.9, 0.999), 1e-8, t, Some(&m)).unwrap();
            radamw_step(&mut pb, &g, &mut sb, 0.01, (0.9, 0.999), 1e-8, 0.0, t, Some(&m)).unwrap();
            radam_step(&mut ea, &ge, &mut ta, 0.01, (0.9, 0.999), 1e-8, t, None).unwrap();
            radamw_step(&mut eb, &ge, &mut tb, 0.01, (0.9, 0.999), 1e-8, 0.0, t, None).unwrap();
        }
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&pa), bits(&pb));
        assert_eq!(bits(&ea), bits(&eb));
        assert_eq!(sa, sb);
    }

    #[test]
    fn euclidean_decay_matches_direct_arithmetic() {
        let mut th = [1.0f64];
        euclidean_decay(&mut th, 0.1, 0.1);
        assert_eq!(th[0], 1.0 - 0.1 * 1.0 * 0.1);
        assert!((th[0] - 0.99).abs() < 1e-15);
        let mut th = [1.0f32, -3.0];
        euclidean_decay(&mut th, 0.01, 0.5);
        assert_eq!(th, [1.0f32 - 0.01 * 1.0 * 0.5, -3.0 - 0.01 * -3.0 * 0.5]);
    }

    #[test]
    fn lorentz_decay_pulls_toward_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Lorentz::new(1.3, 5).unwrap();
        for _ in 0..200 {
            let p = random_point(&mut rng, &m, 2.0);
            let gl: f64 = rng.random_range(0.01..0.99);
            let q = lorentz_decay(&m, &p, gl, 1.0).unwrap();
            assert!(m.dist0(&q) < m.dist0(&p));
            assert!(m.residual(&q) < 1e-10);
        }
        let o = m.origin_coords();
        let q = lorentz_decay(&m, &o, 0.1, 0.5).unwrap();
        for (a, b) in q.iter().zip(&o) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn move_parameters_identity_at_equal_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Lorentz::new(0.6, 4).unwrap();
        for _ in 0..100 {
            let p0 = random_point(&mut rng, &m, 1.5);
            let g0 = random_tangent(&mut rng, &m, &p0);
            let (mut p, mut g) = (p0.clone(), g0.clone());
            move_parameters(&m, &m, &mut p, &mut [&mut g]);
            for (a, b) in p.iter().zip(&p0).chain(g.iter().zip(&g0)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn move_parameters_preserves_origin_distance_and_tangency() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let old = Lorentz::new(rng.random_range(0.2..5.0), 3).unwrap();
            let new = old.with_k(rng.random_range(0.2..5.0)).unwrap();
            let p0 = random_point(&mut rng, &old, 1.5);
            let g0 = random_tangent(&mut rng, &old, &p0);
            let (mut p, mut g) = (p0.clone(), g0.clone());
            move_parameters(&old, &new, &mut p, &mut [&mut g]);
            assert!((new.dist0(&p) - old.dist0(&p0)).abs() < 1e-8);
            assert!(new.residual(&p) < 1e-10);
            assert!(new.inner(&p, &g).abs() < 1e-8);
            let n0 = old.inner(&g0, &g0).sqrt();
            let n1 = new.inner(&g, &g).sqrt();
            assert!((n0 - n1).abs() < 1e-8 * (1.0 + n0));
        }
    }

    /// Joint embedding + curvature run; returns the worst residual seen.
    fn joint_run(naive: bool, steps: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mid = store.add_manifold("m", 2, 1.0, true);
        let m = store.manifold(mid).geometry();
        let rows: Vec<Vec<f64>> = (0..8).map(|_| random_point(&mut rng, &m, 1.0)).collect();
        let x = store.add("x", ParamKind::Lorentz(mid), Tensor::from_rows(&rows).unwrap()).unwrap();
        let target = random_point(&mut rng, &m, 2.0);
        let cfg = OptimConfig { kind: OptimKind::Radam, lr: 0.02, curvature_lr_scale: 1.0, naive, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..steps {
            let (_, gr) = bowl_grads(&store, x, mid, &target);
            assert!(gr.kappa(mid).is_some());
            opt.step(&mut store, &gr).unwrap();
            let geo = store.manifold(mid).geometry();
            for r in 0..8 {
                worst = worst.max(geo.residual(store.value(x).row(r)));
            }
        }
        assert!((store.manifold(mid).k() - 1.0).abs() > 1e-2);
        worst
    }

    #[test]
    fn ordered_step_keeps_points_on_the_current_manifold() {
        assert!(joint_run(false, 200) < 1e-5);
    }

    #[test]
    fn naive_order_drifts_off_the_manifold() {
        let schema = joint_run(false, 200);
        let naive = joint_run(true, 200);
        assert!(naive > 10.0 * schema.max(1e-12), "naive {naive} schema {schema}");
    }

    #[test]
    fn curvature_is_untouched_without_its_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mid = store.add_manifold("m", 2, 1.7, true);
        let m = store.manifold(mid).geometry();
        let x = store.add("x", ParamKind::Lorentz(mid), Tensor::from_rows(&[random_point(&mut rng, &m, 1.0)]).unwrap()).unwrap();
        let mut gr = Grads::zeros_like(&store);
        gr.set_param(x, Tensor::from_rows(&[vec![0.1, 0.2, -0.3]]).unwrap());
        let raw = store.manifold(mid).kappa_raw();
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        opt.step(&mut store, &gr).unwrap();
        assert_eq!(store.manifold(mid).kappa_raw().to_bits(), raw.to_bits());
        assert_eq!(store.manifold(mid).k_prev(), store.manifold(mid).k());
    }

    #[test]
    fn non_finite_gradient_aborts_atomically() {
        let mut store = ParamStore::<f64>::new();
        let mid = store.add_manifold("m", 2, 1.0, true);
        let a = store.add("a", ParamKind::Euclidean, Tensor::vector(vec![1.0, 2.0])).unwrap();
        let x = store.add("x", ParamKind::Lorentz(mid), Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap()).unwrap();
        let mut gr = Grads::zeros_like(&store);
        gr.set_param(a, Tensor::vector(vec![1.0, 1.0]));
        gr.set_param(x, Tensor::from_rows(&[vec![0.0, f64::NAN, 0.0]]).unwrap());
        gr.set_kappa(mid, 0.5);
        let before = store.clone();
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        assert!(matches!(opt.step(&mut store, &gr), Err(Error::NonFinite { .. })));
        assert_eq!(store, before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamKind::Euclidean, Tensor::vector(vec![0.0])).unwrap();
        let mut gr = Grads::zeros_like(&store);
        gr.set_param(a, Tensor::vector(vec![100.0]));
        let cfg = OptimConfig { kind: OptimKind::Rsgd, lr: 1.0, clip_norm: Some(5.0), ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        let stats = opt.step(&mut store, &gr).unwrap();
        assert!(stats.clipped);
        assert_eq!(stats.grad_norm, 100.0);
        assert_eq!(store.value(a).data(), &[-5.0]);
    }
}
