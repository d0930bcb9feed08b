//! Pieces shared by the training tasks.

use anyhow::{Context, Result};
use lorentzian::autodiff::{Graph, Tensor, Var};
use lorentzian::params::ParamStore;
use lorentzian::{Result as LResult, Scalar};
use rand::seq::SliceRandom;
use rand::Rng;

/// Shuffled index chunks of at most `batch` elements. A trailing chunk smaller
/// than `min_last` is merged into the previous one.
pub fn batches(n: usize, batch: usize, min_last: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() < min_last) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Mean cross-entropy of `[B, C]` logits, with the row maximum subtracted as a
/// constant before exponentiating.
pub fn cross_entropy<T: Scalar>(g: &Graph<T>, logits: Var, labels: &[usize]) -> LResult<Var> {
    let v = g.value(logits).clone();
    let (rows, cols) = (v.rows(), v.cols());
    let maxes: Vec<T> = (0..rows).map(|r| v.row(r).iter().copied().fold(T::neg_infinity(), T::max)).collect();
    let z = g.sub(logits, g.constant(Tensor::new(vec![rows, 1], maxes)?))?;
    let e = g.exp(z)?;
    let s = g.sum_axis(e, 1)?;
    let lse = g.log(s)?;
    let mut onehot = Tensor::zeros(&[rows, cols]);
    for (r, &l) in labels.iter().enumerate() {
        onehot.row_mut(r)[l] = T::one();
    }
    let picked = g.mul(z, g.constant(onehot))?;
    let zy = g.sum_axis(picked, 1)?;
    let per = g.sub(lse, zy)?;
    g.mean(per)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `(K, kappa_raw)` of every manifold, for failure reports.
pub fn curvature_summary<T: Scalar>(store: &ParamStore<T>) -> String {
    store
        .manifolds()
        .iter()
        .map(|h| format!("K.{}={:.6e} (raw {:.6e})", h.name(), h.k().f64(), h.kappa_raw().f64()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Largest absolute entry and any non-finite parameter, for failure reports.
pub fn parameter_summary<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut worst = (0.0f64, String::new());
    let mut bad = Vec::new();
    for s in store.slots() {
        if !s.value.all_finite() {
            bad.push(s.name.clone());
        }
        let m = s.value.max_abs().f64();
        if m > worst.0 {
            worst = (m, s.name.clone());
        }
    }
    let mut out = format!("largest |value| {:.3e} in `{}`", worst.0, worst.1);
    if !bad.is_empty() {
        out.push_str(&format!("; non-finite in {}", bad.join(", ")));
    }
    out
}

/// Error for a non-finite loss with the state needed to diagnose it.
pub fn non_finite_loss<T: Scalar>(task: &str, epoch: usize, step: usize, loss: f64, store: &ParamStore<T>) -> anyhow::Error {
    anyhow::anyhow!(
        "{task}: non-finite loss {loss} at epoch {epoch}, step {step}; {}; {}",
        curvature_summary(store),
        parameter_summary(store)
    )
}

/// Every curvature inside `[lo, hi]` and finite.
pub fn curvatures_in<T: Scalar>(store: &ParamStore<T>, lo: f64, hi: f64) -> bool {
    store.manifolds().iter().all(|h| {
        let k = h.k().f64();
        k.is_finite() && (lo..=hi).contains(&k)
    })
}

pub fn ensure_dir(path: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(10, 4, 3, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 6]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let g = Graph::<f64>::new();
        let l = g.param(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 0.0, -5.0]).unwrap());
        let ce = cross_entropy(&g, l, &[2, 0]).unwrap();
        let a = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let b = (1.0 + (-1000f64).exp() + (-1005f64).exp()).ln();
        assert!((g.item(ce) - (a + b) / 2.0).abs() < 1e-12);
        let gr = g.backward(ce).unwrap();
        assert!(gr.get(l).unwrap().all_finite());
    }
}
