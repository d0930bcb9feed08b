//! Hierarchical proxy loss on the Lorentz model, reciprocal-neighbor triplet
//! mining and Recall@k.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{usage, Result};
use crate::hyper::{self, Curv};
use crate::manifold::{Lorentz, ManifoldId};
use crate::params::{Binder, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LhierConfig {
    pub proxy_count: usize,
    pub margin_delta: f64,
    pub knn_k: usize,
    pub miner_seed: u64,
    /// Standard deviation of the origin tangents proxies start from.
    pub proxy_init_std: f64,
}

impl Default for LhierConfig {
    fn default() -> Self {
        Self { proxy_count: 64, margin_delta: 0.1, knn_k: 3, miner_seed: 0, proxy_init_std: 0.01 }
    }
}

/// `(i, j)` related, `k` unrelated to both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

fn distance_matrix<T: Scalar>(geo: &Lorentz<T>, x: &Tensor<T>) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = geo.dist(x.row(i), x.row(j)).f64();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// `nbr[i][j]` is true when `j` is among the `k` nearest points to `i` (self
/// excluded); every point tied with the `k`-th distance is included.
fn knn_sets(d: &[Vec<f64>], k: usize) -> Vec<Vec<bool>> {
    let n = d.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i][j]).collect();
            others.sort_by(f64::total_cmp);
            let cut = others[k - 1];
            (0..n).map(|j| j != i && d[i][j] <= cut).collect()
        })
        .collect()
}

/// Reciprocal `k`-NN relation as a symmetric matrix.
pub fn reciprocal_neighbors<T: Scalar>(geo: &Lorentz<T>, x: &Tensor<T>, knn_k: usize) -> Result<Vec<Vec<bool>>> {
    let n = x.rows();
    if knn_k == 0 || n < knn_k + 2 {
        return Err(usage(format!("mine_triplets: batch of {n} is too small for knn_k = {knn_k}")));
    }
    let nbr = knn_sets(&distance_matrix(geo, x), knn_k);
    Ok((0..n).map(|i| (0..n).map(|j| nbr[i][j] && nbr[j][i]).collect()).collect())
}

/// One triplet per related pair `i < j`, with the negative drawn uniformly
/// from the points related to neither. Pairs without a negative are dropped.
pub fn mine_triplets<T: Scalar>(geo: &Lorentz<T>, x: &Tensor<T>, knn_k: usize, seed: u64) -> Result<Vec<Triplet>> {
    let rel = reciprocal_neighbors(geo, x, knn_k)?;
    let n = rel.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !rel[i][j] {
                continue;
            }
            let neg: Vec<usize> = (0..n).filter(|&k| k != i && k != j && !rel[i][k] && !rel[j][k]).collect();
            if neg.is_empty() {
                continue;
            }
            out.push(Triplet { i, j, k: neg[rng.random_range(0..neg.len())] });
        }
    }
    Ok(out)
}

fn argmin_by(n: usize, f: impl Fn(usize) -> f64) -> usize {
    let mut best = (0, f(0));
    for m in 1..n {
        let v = f(m);
        if v < best.1 {
            best = (m, v);
        }
    }
    best.0
}

/// Nearest proxies to the related pair and to the whole triplet, by summed
/// distance; ties go to the lowest index.
pub fn assign_proxies<T: Scalar>(geo: &Lorentz<T>, xi: &[T], xj: &[T], xk: &[T], proxies: &Tensor<T>) -> (usize, usize) {
    let m = proxies.rows();
    let d = |x: &[T], p: usize| geo.dist(x, proxies.row(p)).f64();
    let ij = argmin_by(m, |p| d(xi, p) + d(xj, p));
    let ijk = argmin_by(m, |p| d(xi, p) + d(xj, p) + d(xk, p));
    (ij, ijk)
}

/// Mean over triplets of
/// `[d(x_i,ρ_ij) − d(x_i,ρ_ijk) + δ]₊ + [d(x_j,ρ_ij) − d(x_j,ρ_ijk) + δ]₊ + [d(x_k,ρ_ijk) − d(x_k,ρ_ij) + δ]₊`.
/// `assign[t]` holds `(ρ_ij, ρ_ijk)` row indices into `proxies`.
pub fn lhier_loss<T: Scalar>(
    g: &Graph<T>,
    emb: Var,
    proxies: Var,
    triplets: &[Triplet],
    assign: &[(usize, usize)],
    delta: f64,
    c: Curv,
) -> Result<Var> {
    if triplets.len() != assign.len() {
        return Err(usage("lhier_loss: one proxy assignment per triplet required"));
    }
    if triplets.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    let pick = |f: fn(&Triplet) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
    let xi = g.gather_rows(emb, &pick(|t| t.i))?;
    let xj = g.gather_rows(emb, &pick(|t| t.j))?;
    let xk = g.gather_rows(emb, &pick(|t| t.k))?;
    let pij = g.gather_rows(proxies, &assign.iter().map(|a| a.0).collect::<Vec<_>>())?;
    let pijk = g.gather_rows(proxies, &assign.iter().map(|a| a.1).collect::<Vec<_>>())?;
    let hinge = |x: Var, near: Var, far: Var| -> Result<Var> {
        let a = hyper::dist(g, x, near, c)?;
        let b = hyper::dist(g, x, far, c)?;
        let d = g.sub(a, b)?;
        let d = g.add_scalar(d, T::c(delta))?;
        g.relu(d)
    };
    let h1 = hinge(xi, pij, pijk)?;
    let h2 = hinge(xj, pij, pijk)?;
    let h3 = hinge(xk, pijk, pij)?;
    let s = g.add(h1, h2)?;
    let s = g.add(s, h3)?;
    g.mean(s)
}

/// Learnable proxies: one Lorentz slot of `M` rows.
#[derive(Debug, Clone)]
pub struct ProxySet {
    pub id: ParamId,
    pub manifold: ManifoldId,
    pub count: usize,
}

impl ProxySet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        manifold: ManifoldId,
        count: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if count == 0 {
            return Err(usage("proxy set needs at least one proxy"));
        }
        let geo = store.manifold(manifold).geometry();
        let normal = Normal::new(0.0, init_std).map_err(|e| usage(e.to_string()))?;
        let rows: Vec<Vec<T>> = (0..count)
            .map(|_| {
                let u: Vec<T> = (0..geo.dim()).map(|_| T::c(normal.sample(rng))).collect();
                geo.exp0(&u)
            })
            .collect();
        let id = store.add(name, ParamKind::Lorentz(manifold), Tensor::from_rows(&rows)?)?;
        Ok(Self { id, manifold, count })
    }

    /// Proxies after maximum-distance rescaling.
    pub fn rescaled<T: Scalar>(&self, b: &Binder<T>) -> Result<Var> {
        let c = b.curv(self.manifold)?;
        hyper::rescale_points(b.g, b.var(self.id), c, &b.rescale)
    }

    /// Mine, assign and evaluate the loss for a batch of embeddings on the
    /// proxies' manifold. Returns the loss and the number of triplets.
    pub fn loss<T: Scalar>(&self, b: &Binder<T>, emb: Var, cfg: &LhierConfig, seed: u64) -> Result<(Var, usize)> {
        let g = b.g;
        let c = b.curv(self.manifold)?;
        let geo = b.store().manifold(self.manifold).geometry();
        let ev = g.value(emb).clone();
        let triplets = mine_triplets(&geo, &ev, cfg.knn_k, seed)?;
        let proxies = self.rescaled(b)?;
        let pv = g.value(proxies).clone();
        let assign: Vec<(usize, usize)> = triplets
            .iter()
            .map(|t| assign_proxies(&geo, ev.row(t.i), ev.row(t.j), ev.row(t.k), &pv))
            .collect();
        let loss = lhier_loss(g, emb, proxies, &triplets, &assign, cfg.margin_delta, c)?;
        Ok((loss, triplets.len()))
    }
}

/// Fraction of points whose `k` nearest others (by Lorentz distance, ties by
/// index) contain a point with the same label.
pub fn recall_at_k<T: Scalar>(geo: &Lorentz<T>, emb: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let n = emb.rows();
    if n < 2 || labels.len() != n || k == 0 {
        return Err(usage(format!("recall_at_k: need ≥ 2 points, one label each and k ≥ 1 (n = {n}, k = {k})")));
    }
    let d = distance_matrix(geo, emb);
    let hits = (0..n)
        .filter(|&q| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != q).collect();
            order.sort_by(|&a, &b| d[q][a].total_cmp(&d[q][b]).then(a.cmp(&b)));
            order.iter().take(k).any(|&j| labels[j] == labels[q])
        })
        .count();
    Ok(hits as f64 / n as f64)
}
