//! Synthetic datasets and the raw `LZIM` image format.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// A rooted tree with Euclidean node features. Nodes are numbered breadth-first.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeDataset {
    pub parent: Vec<Option<usize>>,
    pub level: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    /// Path length (edge count) between every pair of nodes.
    pub dist: Vec<Vec<f64>>,
}

impl TreeDataset {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.level.iter().copied().max().unwrap_or(0)
    }

    pub fn leaves(&self) -> Vec<usize> {
        let d = self.depth();
        (0..self.len()).filter(|&i| self.level[i] == d).collect()
    }

    /// Ancestor of `node` at `level` (the node itself at its own level).
    pub fn ancestor(&self, mut node: usize, level: usize) -> usize {
        while self.level[node] > level {
            node = self.parent[node].expect("non-root has a parent");
        }
        node
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            out.extend_from_slice(&(self.parent[i].map_or(u64::MAX, |p| p as u64)).to_le_bytes());
            for f in &self.features[i] {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        out
    }
}

/// Complete `branching`-ary tree of the given depth. Each child's feature is its
/// parent's plus a Gaussian step whose scale halves per level; `noise` adds
/// independent per-node jitter.
pub fn generate_tree_dataset(depth: usize, branching: usize, dim: usize, noise: f64, seed: u64) -> Result<TreeDataset> {
    ensure!(depth >= 1 && branching >= 1, "tree needs depth ≥ 1 and branching ≥ 1");
    ensure!(dim >= 1, "tree features need dim ≥ 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parent = vec![None];
    let mut level = vec![0];
    let mut centers = vec![vec![0.0; dim]];
    let mut frontier = vec![0usize];
    for l in 1..=depth {
        let scale = 2.0 * 0.5f64.powi(l as i32 - 1) / (dim as f64).sqrt();
        let mut next = Vec::with_capacity(frontier.len() * branching);
        for &p in &frontier {
            for _ in 0..branching {
                let c: Vec<f64> =
                    centers[p].iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
                parent.push(Some(p));
                level.push(l);
                centers.push(c);
                next.push(parent.len() - 1);
            }
        }
        frontier = next;
    }
    let features = centers
        .iter()
        .map(|c| c.iter().map(|v| v + noise * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let n = parent.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let (mut a, mut b, mut d) = (i, j, 0usize);
            while a != b {
                if level[a] >= level[b] {
                    a = parent[a].expect("deeper node has a parent");
                } else {
                    b = parent[b].expect("deeper node has a parent");
                }
                d += 1;
            }
            dist[i][j] = d as f64;
            dist[j][i] = d as f64;
        }
    }
    Ok(TreeDataset { parent, level, features, dist })
}

/// Labeled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// `per_class` noisy draws around every leaf of the tree; the label is the
/// leaf's rank among the leaves.
pub fn hierarchy_samples(tree: &TreeDataset, per_class: usize, noise: f64, rng: &mut impl Rng) -> Samples {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("non-negative std");
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_class {
        for (c, &leaf) in tree.leaves().iter().enumerate() {
            x.push(tree.features[leaf].iter().map(|v| v + normal.sample(rng)).collect());
            labels.push(c);
        }
    }
    Samples { x, labels }
}

/// NHWC images with values in roughly `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: Vec<usize>,
    pub pixels: Vec<f64>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.image_len()..(i + 1) * self.image_len()]
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Two classes of striped images: horizontal (label 0) and vertical (label 1)
/// sinusoids with random period, phase and per-channel gain, plus Gaussian
/// pixel noise. Labels alternate.
pub fn stripe_images(count: usize, size: usize, channels: usize, noise: f64, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("non-negative std");
    let mut pixels = Vec::with_capacity(count * size * size * channels);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        let period = rng.random_range(4.0..8.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let gains: Vec<f64> = (0..channels).map(|_| rng.random_range(0.5..1.0)).collect();
        for y in 0..size {
            for x in 0..size {
                let t = if label == 0 { y } else { x } as f64;
                let v = (std::f64::consts::TAU * t / period + phase).sin();
                for g in &gains {
                    pixels.push((g * v + normal.sample(&mut rng)).clamp(-1.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    ImageSet { height: size, width: size, channels, labels, pixels }
}

pub const LZIM_MAGIC: &[u8; 4] = b"LZIM";

/// Header `LZIM`, u32 count, u32 H, u32 W, u32 C (little-endian), then per
/// image a u8 label and H·W·C u8 pixels. Pixels map to `p / 127.5 − 1`.
pub fn read_lzim(path: &Path) -> Result<ImageSet> {
    let buf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_lzim(&buf).with_context(|| format!("in {}", path.display()))
}

pub fn decode_lzim(buf: &[u8]) -> Result<ImageSet> {
    ensure!(buf.len() >= 20, "image file truncated in header");
    ensure!(&buf[..4] == LZIM_MAGIC, "not an LZIM file (magic {:02x?})", &buf[..4]);
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (count, h, w, c) = (word(0), word(1), word(2), word(3));
    ensure!(h > 0 && w > 0 && c > 0, "image dimensions must be positive");
    let rec = 1 + h * w * c;
    let need = count.checked_mul(rec).and_then(|n| n.checked_add(20));
    if need != Some(buf.len()) {
        bail!("image file holds {} bytes, header implies {:?}", buf.len(), need);
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (rec - 1));
    for r in buf[20..].chunks_exact(rec) {
        labels.push(r[0] as usize);
        pixels.extend(r[1..].iter().map(|p| *p as f64 / 127.5 - 1.0));
    }
    Ok(ImageSet { height: h, width: w, channels: c, labels, pixels })
}

pub fn encode_lzim(set: &ImageSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + set.len() * (1 + set.image_len()));
    out.write_all(LZIM_MAGIC)?;
    for v in [set.len(), set.height, set.width, set.channels] {
        out.write_all(&u32::try_from(v).context("dimension exceeds u32")?.to_le_bytes())?;
    }
    for i in 0..set.len() {
        out.push(u8::try_from(set.labels[i]).context("label exceeds u8")?);
        out.extend(set.image(i).iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    }
    Ok(out)
}

pub fn write_lzim(path: &Path, set: &ImageSet) -> Result<()> {
    std::fs::write(path, encode_lzim(set)?).with_context(|| format!("writing {}", path.display()))
}
