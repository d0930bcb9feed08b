//! Randomized invariant suite run at both precisions.

use std::path::Path;

use anyhow::Result;
use lorentzian::autodiff::{Graph, Tensor, Var};
use lorentzian::layers::{
    lorentz_relu, switch_e2l, LorentzBatchNorm, LorentzConv2d, LorentzFeatureMap, LorentzLinear,
};
use lorentzian::optim::{
    euclidean_decay, lorentz_decay, move_parameters, radam_step, radamw_step, OptimConfig, OptimKind, Optimizer,
    SlotState,
};
use lorentzian::params::{Binder, Grads, ParamKind, ParamStore};
use lorentzian::stability::{rescale_space, rescaled_norm};
use lorentzian::{d_max, hyper, Dtype, Lorentz, PrecisionProfile, RescaleConfig, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Config;

/// Outcome of one property at one precision.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub precision: Dtype,
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    pub tol: f64,
    pub violations: usize,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteReport {
    pub results: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(PropertyResult::passed)
    }

    pub fn get(&self, precision: Dtype, name: &str) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.precision == precision && r.name == name)
    }

    pub fn failures(&self) -> Vec<&PropertyResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["precision", "property", "trials", "worst", "tolerance", "violations", "status"])?;
        for r in &self.results {
            w.write_record([
                r.precision.to_string(),
                r.name.clone(),
                r.trials.to_string(),
                format!("{:.3e}", r.worst),
                format!("{:.0e}", r.tol),
                r.violations.to_string(),
                if r.passed() { "pass" } else { "fail" }.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Worst error and violation count over trials. Non-finite errors violate.
struct Tally {
    name: String,
    tol: f64,
    trials: usize,
    worst: f64,
    violations: usize,
}

impl Tally {
    fn new(name: &str, tol: f64) -> Self {
        Self { name: name.into(), tol, trials: 0, worst: 0.0, violations: 0 }
    }

    fn push(&mut self, err: f64) {
        self.trials += 1;
        if !err.is_finite() {
            self.worst = f64::INFINITY;
            self.violations += 1;
            return;
        }
        self.worst = self.worst.max(err);
        if err > self.tol {
            self.violations += 1;
        }
    }

    fn fail(&mut self) {
        self.push(f64::INFINITY);
    }

    fn finish(self, precision: Dtype) -> PropertyResult {
        PropertyResult {
            precision,
            name: self.name,
            trials: self.trials,
            worst: self.worst,
            tol: self.tol,
            violations: self.violations,
        }
    }
}

/// Tolerances per property as `(f64, f32)`.
fn tol<T: Scalar>(pair: (f64, f64)) -> f64 {
    match T::DTYPE {
        Dtype::F64 => pair.0,
        Dtype::F32 => pair.1,
    }
}

pub const TOL_EXP_LOG: (f64, f64) = (1e-9, 1e-2);
pub const TOL_PT: (f64, f64) = (1e-6, 1e-3);
pub const TOL_SYMMETRY: (f64, f64) = (1e-12, 1e-5);
pub const TOL_RESIDUAL: (f64, f64) = (1e-8, 1e-4);
pub const TOL_BOUNDARY: (f64, f64) = (1e-9, 1e-4);
pub const TOL_MOVE_DIST: (f64, f64) = (1e-8, 1e-4);
pub const TOL_MOVE_IDENTITY: (f64, f64) = (1e-12, 1e-6);
pub const TOL_MOVE_TANGENT: (f64, f64) = (1e-8, 1e-4);

fn normal<T: Scalar>(rng: &mut impl Rng, scale: f64) -> T {
    T::c(scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_k(rng: &mut impl Rng) -> f64 {
    rng.random_range(0.5..2.0)
}

fn random_space<T: Scalar>(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<T> {
    (0..n).map(|_| normal(rng, scale)).collect()
}

fn random_point<T: Scalar>(rng: &mut impl Rng, geo: &Lorentz<T>, scale: f64) -> Vec<T> {
    geo.exp0(&random_space(rng, geo.dim(), scale))
}

fn random_tangent<T: Scalar>(rng: &mut impl Rng, geo: &Lorentz<T>, p: &[T], scale: f64) -> Vec<T> {
    geo.tangent_projection(p, &random_space(rng, p.len(), scale))
}

/// Shrinks `v` so the geodesic from `x` stays within `D_max` of the origin.
fn within_reach<T: Scalar>(geo: &Lorentz<T>, x: &[T], v: Vec<T>) -> Vec<T> {
    let reach = d_max(geo.k(), &PrecisionProfile::for_scalar::<T>()).map_or(f64::INFINITY, |d| d.f64());
    let room = (reach - geo.dist0(x).f64()).max(0.0);
    let len = geo.inner(&v, &v).f64().max(0.0).sqrt();
    if len <= room {
        return v;
    }
    let s = T::c(room / len);
    v.into_iter().map(|c| c * s).collect()
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

/// `|⟨x,x⟩_L + K| / max(x_t², K)`, the constraint error at the scale of the point.
pub fn relative_residual<T: Scalar>(geo: &Lorentz<T>, x: &[T]) -> f64 {
    let k = geo.k().f64();
    geo.residual(x).f64() / (x[0].f64() * x[0].f64()).max(k)
}

fn worst_row_residual<T: Scalar>(geo: &Lorentz<T>, t: &Tensor<T>) -> f64 {
    (0..t.rows())
        .map(|r| {
            let x = t.row(r);
            if x[0] <= T::zero() || x.iter().any(|v| !v.is_finite()) {
                f64::INFINITY
            } else {
                relative_residual(geo, x)
            }
        })
        .fold(0.0, f64::max)
}

/// Parallel transport, or with `fault` the transport with its correction term negated.
pub fn transport_maybe_faulty<T: Scalar>(geo: &Lorentz<T>, x: &[T], y: &[T], v: &[T], fault: bool) -> Vec<T> {
    let pt = geo.transport(x, y, v);
    if fault {
        pt.iter().zip(v).map(|(p, vi)| *vi + *vi - *p).collect()
    } else {
        pt
    }
}

fn manifold_checks<T: Scalar>(cfg: &Config, rng: &mut impl Rng) -> Vec<PropertyResult> {
    let mut exp_log = Tally::new("exp_log_round_trip", tol::<T>(TOL_EXP_LOG));
    let mut pt = Tally::new("pt_isometry", tol::<T>(TOL_PT));
    let mut pt_tan = Tally::new("pt_tangency", tol::<T>(TOL_PT));
    let mut sym = Tally::new("distance_symmetry", tol::<T>(TOL_SYMMETRY));
    for _ in 0..cfg.trials {
        let n = rng.random_range(2..8);
        let geo = Lorentz::new(T::c(random_k(rng)), n).expect("positive K");
        let x = random_point(rng, &geo, 0.7);
        let v = within_reach(&geo, &x, random_tangent(rng, &geo, &x, 0.7));
        let y = geo.exp(&x, &v);
        let back = geo.log(&x, &y);
        let diff: Vec<T> = back.iter().zip(&v).map(|(a, b)| *a - *b).collect();
        let floor = T::epsilon().f64().sqrt() * (1.0 + norm(&x));
        exp_log.push(norm(&diff) / norm(&v).max(floor));

        let y = random_point(rng, &geo, 0.7);
        let u = random_tangent(rng, &geo, &x, 1.0);
        let w = random_tangent(rng, &geo, &x, 1.0);
        let pu = transport_maybe_faulty(&geo, &x, &y, &u, cfg.inject_fault);
        let pw = transport_maybe_faulty(&geo, &x, &y, &w, cfg.inject_fault);
        let scale = 1.0 + geo.inner(&u, &u).f64().abs().sqrt() * geo.inner(&w, &w).f64().abs().sqrt();
        pt.push((geo.inner(&pu, &pw).f64() - geo.inner(&u, &w).f64()).abs() / scale);
        pt_tan.push(geo.inner(&y, &pu).f64().abs() / (geo.k().f64().sqrt() * (1.0 + norm(&pu))));

        sym.push((geo.dist(&x, &y).f64() - geo.dist(&y, &x).f64()).abs());
    }
    [exp_log, pt, pt_tan, sym].into_iter().map(|t| t.finish(T::DTYPE)).collect()
}

fn points_tensor<T: Scalar>(rng: &mut impl Rng, geo: &Lorentz<T>, rows: usize, scale: f64) -> Tensor<T> {
    Tensor::from_rows(&(0..rows).map(|_| random_point(rng, geo, scale)).collect::<Vec<_>>()).expect("rows")
}

fn randomize_boost<T: Scalar>(store: &mut ParamStore<T>, id: lorentzian::params::ParamId, rng: &mut impl Rng) {
    let n = store.value(id).len();
    let v: Vec<T> = (0..n).map(|_| normal(rng, 0.5)).collect();
    store.set_value(id, Tensor::vector(v)).expect("boost shape");
}

/// One random instance of a layer, evaluated; returns output residual.
fn layer_trial<T: Scalar>(which: &str, cfg: &Config, rng: &mut ChaCha8Rng) -> Result<f64> {
    let rescale = cfg.rescale_for::<T>()?;
    let mut store = ParamStore::<T>::new();
    let k = T::c(random_k(rng));
    let cin = rng.random_range(2..6);
    let mid = store.add_manifold("m", cin, k, true);
    let geo = store.manifold(mid).geometry();
    let g = Graph::new();
    let out: Box<dyn Fn(&Binder<T>) -> Result<Var>> = match which {
        "lorentz_linear" => {
            let cout = rng.random_range(2..9);
            let lin = LorentzLinear::new(&mut store, "lin", mid, cin, cout, rng)?;
            randomize_boost(&mut store, lin.boost.v_raw, rng);
            let x = points_tensor(rng, &geo, 8, 1.0);
            Box::new(move |b: &Binder<T>| Ok(lin.forward(b, b.g.constant(x.clone()))?))
        }
        "lorentz_conv2d" | "lorentz_conv2d_naive" => {
            let cout = if rng.random_bool(0.5) { rng.random_range(2..5) } else { rng.random_range(9 * cin..9 * cin + 4) };
            let stride = rng.random_range(1..3);
            let conv = LorentzConv2d::new(&mut store, "conv", mid, cin, cout, 3, stride, 1, rng)?;
            randomize_boost(&mut store, conv.boost.v_raw, rng);
            let x = points_tensor(rng, &geo, 2 * 5 * 5, 1.0);
            let naive = which == "lorentz_conv2d_naive";
            Box::new(move |b: &Binder<T>| {
                let fm = LorentzFeatureMap { rows: b.g.constant(x.clone()), batch: 2, height: 5, width: 5, manifold: mid };
                let y = if naive { conv.forward_naive(b, &fm)? } else { conv.forward(b, &fm)? };
                Ok(y.rows)
            })
        }
        "lorentz_batchnorm" => {
            let bn = LorentzBatchNorm::new(&mut store, "bn", mid)?;
            let mean = points_tensor(rng, &geo, 1, 1.0);
            store.set_value(bn.mean, mean)?;
            store.set_value(bn.gamma, Tensor::full(&[1, 1], T::c(rng.random_range(0.2..3.0))))?;
            let x = points_tensor(rng, &geo, 8, 1.5);
            Box::new(move |b: &Binder<T>| Ok(bn.forward(b, b.g.constant(x.clone()))?))
        }
        "lorentz_relu" => {
            let x = points_tensor(rng, &geo, 8, 2.0);
            Box::new(move |b: &Binder<T>| Ok(lorentz_relu(b, b.g.constant(x.clone()), mid)?))
        }
        "switch_e2l" => {
            let scale = 10f64.powf(rng.random_range(-2.0..3.0));
            let u: Vec<Vec<T>> = (0..8).map(|_| random_space(rng, cin, scale)).collect();
            let u = Tensor::from_rows(&u)?;
            Box::new(move |b: &Binder<T>| Ok(switch_e2l(b, b.g.constant(u.clone()), mid)?))
        }
        "lorentz_boost" => {
            let v: Vec<T> = random_space(rng, cin, 1.0);
            let x = points_tensor(rng, &geo, 8, 1.5);
            Box::new(move |b: &Binder<T>| Ok(hyper::boost(b.g, b.g.constant(x.clone()), b.g.constant(Tensor::vector(v.clone())))?))
        }
        other => anyhow::bail!("unknown layer `{other}`"),
    };
    let b = Binder::new(&g, &store, true, rescale);
    let y = out(&b)?;
    let v = g.value(y).clone();
    Ok(worst_row_residual(&geo, &v))
}

pub const LAYERS: [&str; 7] = [
    "lorentz_linear",
    "lorentz_conv2d",
    "lorentz_conv2d_naive",
    "lorentz_batchnorm",
    "lorentz_relu",
    "switch_e2l",
    "lorentz_boost",
];

fn layer_checks<T: Scalar>(cfg: &Config, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
    let trials = cfg.trials.div_ceil(4).max(1);
    LAYERS
        .iter()
        .map(|which| {
            let mut t = Tally::new(&format!("residual.{which}"), tol::<T>(TOL_RESIDUAL));
            for _ in 0..trials {
                match layer_trial::<T>(which, cfg, rng) {
                    Ok(r) => t.push(r),
                    Err(e) => {
                        log::debug!("{which}: {e:#}");
                        t.fail()
                    }
                }
            }
            t.finish(T::DTYPE)
        })
        .collect()
}

fn optimizer_checks<T: Scalar>(cfg: &Config, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
    let kinds = [OptimKind::Rsgd, OptimKind::Radam, OptimKind::Radamw];
    let mut out = Vec::new();
    for kind in kinds {
        let name = format!("residual.optimizer.{}", format!("{kind:?}").to_lowercase());
        let mut t = Tally::new(&name, tol::<T>(TOL_RESIDUAL));
        for _ in 0..cfg.trials.div_ceil(4).max(1) {
            let mut store = ParamStore::<T>::new();
            let n = rng.random_range(2..6);
            let mid = store.add_manifold("m", n, T::c(random_k(rng)), true);
            let geo = store.manifold(mid).geometry();
            let x = store.add("x", ParamKind::Lorentz(mid), points_tensor(rng, &geo, 4, 1.0)).expect("fresh store");
            let ocfg = OptimConfig {
                kind,
                lr: 0.05,
                weight_decay: if kind == OptimKind::Radamw { 0.1 } else { 0.0 },
                momentum: if kind == OptimKind::Rsgd { 0.9 } else { 0.0 },
                curvature_lr_scale: 1.0,
                clip_norm: Some(1.0),
                ..OptimConfig::default()
            };
            let mut opt = Optimizer::<T>::new(ocfg).expect("valid config");
            let mut worst = 0.0f64;
            for _ in 0..5 {
                let mut gr = Grads::zeros_like(&store);
                let geo = store.manifold(mid).geometry();
                let mut data = Vec::with_capacity(store.value(x).len());
                for r in 0..store.value(x).rows() {
                    let u = random_tangent(rng, &geo, store.value(x).row(r), 1.0);
                    data.push(-u[0]);
                    data.extend_from_slice(&u[1..]);
                }
                gr.set_param(x, Tensor::new(store.value(x).shape().to_vec(), data).expect("shape"));
                gr.set_kappa(mid, normal(rng, 1.0));
                if let Err(e) = opt.step(&mut store, &gr) {
                    log::debug!("{name}: {e:#}");
                    worst = f64::INFINITY;
                    break;
                }
                let geo = store.manifold(mid).geometry();
                worst = worst.max(worst_row_residual(&geo, store.value(x)));
            }
            t.push(worst);
        }
        out.push(t.finish(T::DTYPE));
    }
    out
}

/// Rescaling bound over log-uniform tangent norms, and the boundary value.
pub fn rescale_checks<T: Scalar>(cfg: &Config, rng: &mut impl Rng) -> Result<Vec<PropertyResult>> {
    let rc = cfg.rescale_for::<T>()?.clone();
    let rc = RescaleConfig { enabled: true, ..rc };
    let mut bound = Tally::new("rescale.bound", 0.0);
    let mut time = Tally::new("rescale.time_component", 0.0);
    for _ in 0..cfg.rescale_samples {
        let k = T::c(random_k(rng));
        let geo = Lorentz::new(k, 3).expect("positive K");
        let dmax = d_max(k, &rc.profile)?;
        let dir = random_space::<T>(rng, 3, 1.0);
        let len = T::c(10f64.powf(rng.random_range(-6.0..6.0)) / norm(&dir).max(1e-30));
        let u: Vec<T> = dir.iter().map(|d| *d * len).collect();
        let r = rescale_space(&u, k, &rc)?;
        let dist = T::c(norm(&r));
        bound.push(if dist < dmax { 0.0 } else { (dist - dmax).f64().max(f64::MIN_POSITIVE) });
        let p = geo.exp0(&r);
        time.push(if p[0].f64() < rc.profile.x_t_max { 0.0 } else { p[0].f64() - rc.profile.x_t_max + f64::MIN_POSITIVE });
    }
    let mut boundary = Tally::new("rescale.boundary", tol::<T>(TOL_BOUNDARY));
    for i in 0..cfg.trials.min(100) {
        let k = T::c(0.25 + 0.05 * i as f64);
        let dmax = d_max(k, &rc.profile)?;
        let out = rescaled_norm(T::c(rc.s) * dmax, k, &rc)?;
        boundary.push(((out - T::c(0.99) * dmax) / dmax).f64().abs());
    }
    Ok([bound, time, boundary].into_iter().map(|t| t.finish(T::DTYPE)).collect())
}

/// MoveParameters: distance from the origin preserved, identity when the
/// curvature is unchanged, moments stay tangent.
pub fn move_checks<T: Scalar>(cfg: &Config, rng: &mut impl Rng) -> Vec<PropertyResult> {
    let mut dist = Tally::new("move.distance_preserved", tol::<T>(TOL_MOVE_DIST));
    let mut ident = Tally::new("move.identity", tol::<T>(TOL_MOVE_IDENTITY));
    let mut tan = Tally::new("move.moment_tangent", tol::<T>(TOL_MOVE_TANGENT));
    for _ in 0..cfg.trials {
        let n = rng.random_range(2..6);
        let old = Lorentz::new(T::c(random_k(rng)), n).expect("positive K");
        let new = old.with_k(T::c(random_k(rng))).expect("positive K");
        let p0 = random_point(rng, &old, 1.0);
        let m0 = random_tangent(rng, &old, &p0, 1.0);
        let (mut p, mut m) = (p0.clone(), m0.clone());
        move_parameters(&old, &new, &mut p, &mut [&mut m]);
        dist.push((new.dist0(&p) - old.dist0(&p0)).f64().abs() / (1.0 + old.dist0(&p0).f64()));
        tan.push(new.inner(&p, &m).f64().abs() / (1.0 + norm(&m)) / new.k().f64().sqrt());
        let (mut q, mut mq) = (p0.clone(), m0.clone());
        move_parameters(&old, &old, &mut q, &mut [&mut mq]);
        let d: f64 = q.iter().zip(&p0).chain(mq.iter().zip(&m0)).map(|(a, b)| (*a - *b).f64().abs()).fold(0.0, f64::max);
        ident.push(d);
    }
    [dist, ident, tan].into_iter().map(|t| t.finish(T::DTYPE)).collect()
}

/// `radamw` with `λ = 0` against `radam` bit for bit over 100 steps, and the
/// decoupled Euclidean decay of a zero-gradient step against `θ − γλθ`.
pub fn adamw_checks<T: Scalar>(cfg: &Config, rng: &mut impl Rng) -> Vec<PropertyResult> {
    let mut bitwise = Tally::new("adamw.zero_decay_bitwise", 0.0);
    let mut decay = Tally::new("adamw.euclidean_decay_exact", 0.0);
    let mut ldecay = Tally::new("adamw.lorentz_decay_centroid", tol::<T>(TOL_RESIDUAL));
    let trials = cfg.trials.div_ceil(50).max(1);
    for _ in 0..trials {
        let n = rng.random_range(2..5);
        let geo = Lorentz::new(T::c(random_k(rng)), n).expect("positive K");
        for lorentz in [false, true] {
            let init = if lorentz {
                Tensor::from_rows(&[random_point(rng, &geo, 1.0)]).expect("row")
            } else {
                Tensor::new(vec![1, n + 1], random_space(rng, n + 1, 1.0)).expect("row")
            };
            let g_geo = lorentz.then_some(&geo);
            let (mut a, mut b) = (init.clone(), init.clone());
            let (mut sa, mut sb) = (SlotState::zeros(init.shape()), SlotState::zeros(init.shape()));
            let mut same = true;
            for t in 1..=100u64 {
                let gv: Vec<T> = random_space(rng, n + 1, 1.0);
                let gr = Tensor::new(init.shape().to_vec(), gv).expect("row");
                let ra = radamw_step(&mut a, &gr, &mut sa, 0.01, (0.9, 0.999), 1e-8, 0.0, t, g_geo);
                let rb = radam_step(&mut b, &gr, &mut sb, 0.01, (0.9, 0.999), 1e-8, t, g_geo);
                same &= ra.is_ok() && rb.is_ok();
                same &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits_eq(*y));
                same &= sa.m.data().iter().zip(sb.m.data()).all(|(x, y)| x.to_bits_eq(*y));
                same &= sa.v.data().iter().zip(sb.v.data()).all(|(x, y)| x.to_bits_eq(*y));
            }
            bitwise.push(if same { 0.0 } else { 1.0 });
        }

        let (lr, wd) = (rng.random_range(1e-3..0.1), rng.random_range(1e-3..0.5));
        let theta = Tensor::new(vec![1, n + 1], random_space(rng, n + 1, 1.0)).expect("row");
        let mut stepped = theta.clone();
        let zero = Tensor::zeros(theta.shape());
        let ok = radamw_step(&mut stepped, &zero, &mut SlotState::zeros(theta.shape()), lr, (0.9, 0.999), 1e-8, wd, 1, None);
        let mut direct = theta.data().to_vec();
        euclidean_decay(&mut direct, T::c(lr), T::c(wd));
        let manual: Vec<T> = theta.data().iter().map(|x| *x - T::c(lr) * *x * T::c(wd)).collect();
        let exact = ok.is_ok()
            && stepped.data().iter().zip(&manual).all(|(a, b)| a.to_bits_eq(*b))
            && direct.iter().zip(&manual).all(|(a, b)| a.to_bits_eq(*b));
        decay.push(if exact { 0.0 } else { 1.0 });

        let p = Tensor::from_rows(&[random_point(rng, &geo, 1.0)]).expect("row");
        let mut lp = p.clone();
        let zero = Tensor::zeros(p.shape());
        let want = lorentz_decay(&geo, p.row(0), T::c(lr), T::c(wd));
        let ok = radamw_step(&mut lp, &zero, &mut SlotState::zeros(p.shape()), lr, (0.9, 0.999), 1e-8, wd, 1, Some(&geo));
        match (ok, want) {
            (Ok(()), Ok(w)) => {
                let d = lp.row(0).iter().zip(&w).map(|(a, b)| (*a - *b).f64().abs()).fold(0.0, f64::max);
                ldecay.push(d.max(relative_residual(&geo, lp.row(0))));
            }
            _ => ldecay.fail(),
        }
    }
    [bitwise, decay, ldecay].into_iter().map(|t| t.finish(T::DTYPE)).collect()
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        T::to_le_bytes_vec(&[self]) == T::to_le_bytes_vec(&[other])
    }
}

pub fn run_precision<T: Scalar>(cfg: &Config) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u64::from(T::DTYPE.tag()) << 32);
    let mut out = manifold_checks::<T>(cfg, &mut rng);
    out.extend(layer_checks::<T>(cfg, &mut rng));
    out.extend(optimizer_checks::<T>(cfg, &mut rng));
    out.extend(rescale_checks::<T>(cfg, &mut rng)?);
    out.extend(move_checks::<T>(cfg, &mut rng));
    out.extend(adamw_checks::<T>(cfg, &mut rng));
    Ok(out)
}

/// Every property at float64 then float32.
pub fn run_invariant_suite(cfg: &Config) -> Result<SuiteReport> {
    let mut results = run_precision::<f64>(cfg)?;
    results.extend(run_precision::<f32>(cfg)?);
    Ok(SuiteReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> Config {
        Config { trials: 40, rescale_samples: 2000, ..Config::default() }
    }

    #[test]
    fn default_suite_passes() {
        let r = run_invariant_suite(&quick()).unwrap();
        assert!(r.passed(), "{:#?}", r.failures());
        assert!(r.get(Dtype::F32, "pt_isometry").is_some());
    }

    #[test]
    fn injected_fault_breaks_isometry() {
        let cfg = Config { inject_fault: true, ..quick() };
        let r = run_invariant_suite(&cfg).unwrap();
        assert!(!r.get(Dtype::F64, "pt_isometry").unwrap().passed());
        assert!(r.get(Dtype::F64, "exp_log_round_trip").unwrap().passed());
    }

    #[test]
    fn float32_uses_float32_tolerances() {
        let r = run_invariant_suite(&quick()).unwrap();
        assert_eq!(r.get(Dtype::F32, "pt_isometry").unwrap().tol, TOL_PT.1);
        assert_eq!(r.get(Dtype::F64, "pt_isometry").unwrap().tol, TOL_PT.0);
    }
}
