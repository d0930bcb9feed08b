//! Dense numeric kernels: matrix products and NHWC convolution.

use crate::scalar::Scalar;

/// `C[m×n] = A[m×k] · B[k×n]`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), T::zero(), &mut c);
    c
}

/// `C[m×n] = Aᵀ · B` with `A` stored as `[k×m]` and `B` as `[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (1, m), b, (n, 1), T::zero(), &mut c);
    c
}

/// `C[m×n] = A · Bᵀ` with `A` stored as `[m×k]` and `B` as `[n×k]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k, 1), b, (1, k), T::zero(), &mut c);
    c
}

/// Geometry of a 2-D convolution over NHWC input with a `[kh, kw, cin, cout]` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Number of output pixels `B · Ho · Wo`.
    pub fn out_pixels(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Unfolded window length `kh · kw · cin`.
    pub fn window(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.kh > 0
            && self.kw > 0
            && self.height + 2 * self.pad >= self.kh
            && self.width + 2 * self.pad >= self.kw
    }

    /// Visit every (output pixel, window slot, input pixel) triple that lies
    /// inside the unpadded input. `f(p, slot, src)` receives the output pixel index,
    /// the window slot `ky * kw + kx`, and the flat input pixel index.
    #[inline]
    fn for_each_tap(&self, f: impl FnMut(usize, usize, usize)) {
        self.for_each_tap_in(0..self.out_pixels(), f);
    }

    /// [`Self::for_each_tap`] restricted to a range of output pixels.
    #[inline]
    fn for_each_tap_in(&self, pixels: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        for p in pixels {
            let ox = p % wo;
            let oy = (p / wo) % ho;
            let b = p / (wo * ho);
            for ky in 0..self.kh {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.height as isize {
                    continue;
                }
                for kx in 0..self.kw {
                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                    if ix < 0 || ix >= self.width as isize {
                        continue;
                    }
                    let src = (b * self.height + iy as usize) * self.width + ix as usize;
                    f(p, ky * self.kw + kx, src);
                }
            }
        }
    }

    /// Per output pixel, a 0/1 mask over window slots marking taps inside the input.
    pub fn tap_mask<T: Scalar>(&self) -> Vec<T> {
        let slots = self.kh * self.kw;
        let mut mask = vec![T::zero(); self.out_pixels() * slots];
        self.for_each_tap(|p, s, _| mask[p * slots + s] = T::one());
        mask
    }
}

/// Unfold NHWC input into `[B·Ho·Wo, kh·kw·cin]` rows (zero padding).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let win = g.window();
    let c = g.cin;
    let mut cols = vec![T::zero(); g.out_pixels() * win];
    g.for_each_tap(|p, s, src| {
        cols[p * win + s * c..p * win + (s + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-add rows back into an NHWC buffer.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let win = g.window();
    let c = g.cin;
    let mut x = vec![T::zero(); g.batch * g.height * g.width * c];
    g.for_each_tap(|p, s, src| {
        let dst = &mut x[src * c..(src + 1) * c];
        for (d, v) in dst.iter_mut().zip(&cols[p * win + s * c..p * win + (s + 1) * c]) {
            *d += *v;
        }
    });
    x
}

/// Output pixels per unfolded tile.
const TILE: usize = 64;

/// `C[m×n] += A[m×k] · B[k×n]`.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), T::one(), c);
}

/// `C[m×n] += Aᵀ · B` with `A` stored as `[k×m]` and `B` as `[k×n]`.
fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    T::gemm(m, k, n, a, (1, m), b, (n, 1), T::one(), c);
}

fn transpose<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// Unfold the windows of output pixels `start..start + rows` into `cols`.
fn im2col_tile<T: Scalar>(x: &[T], g: &ConvGeom, start: usize, rows: usize, cols: &mut [T]) {
    let win = g.window();
    let c = g.cin;
    cols[..rows * win].fill(T::zero());
    g.for_each_tap_in(start..start + rows, |p, s, src| {
        let o = (p - start) * win + s * c;
        cols[o..o + c].copy_from_slice(&x[src * c..(src + 1) * c]);
    });
}

/// Convolution as a matrix product over tiles of unfolded windows; only one
/// tile of windows is materialized at a time.
pub fn conv2d_im2col<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (np, win, cout) = (g.out_pixels(), g.window(), g.cout);
    let mut out = vec![T::zero(); np * cout];
    let mut cols = vec![T::zero(); TILE * win];
    for start in (0..np).step_by(TILE) {
        let rows = TILE.min(np - start);
        im2col_tile(x, g, start, rows, &mut cols);
        gemm_acc(&cols, w, &mut out[start * cout..(start + rows) * cout], rows, win, cout);
    }
    out
}

/// Convolution by direct loops over taps, without materializing windows.
pub fn conv2d_direct<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![T::zero(); g.out_pixels() * cout];
    g.for_each_tap(|p, s, src| {
        let orow = &mut out[p * cout..(p + 1) * cout];
        let xin = &x[src * cin..(src + 1) * cin];
        let wblock = &w[s * cin * cout..(s + 1) * cin * cout];
        for (ci, &xv) in xin.iter().enumerate() {
            let wrow = &wblock[ci * cout..(ci + 1) * cout];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xv * *wv;
            }
        }
    });
    out
}

/// Input and kernel gradients of the direct convolution.
pub fn conv2d_direct_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let (cin, cout) = (g.cin, g.cout);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    g.for_each_tap(|p, s, src| {
        let grow = &grad[p * cout..(p + 1) * cout];
        let xin = &x[src * cin..(src + 1) * cin];
        let dxin = &mut dx[src * cin..(src + 1) * cin];
        let base = s * cin * cout;
        for ci in 0..cin {
            let wrow = &w[base + ci * cout..base + (ci + 1) * cout];
            let mut acc = T::zero();
            for (gv, wv) in grow.iter().zip(wrow) {
                acc += *gv * *wv;
            }
            dxin[ci] += acc;
            let xv = xin[ci];
            let dwrow = &mut dw[base + ci * cout..base + (ci + 1) * cout];
            for (d, gv) in dwrow.iter_mut().zip(grow) {
                *d += xv * *gv;
            }
        }
    });
    (dx, dw)
}

/// Input and kernel gradients of the tiled convolution; each is computed only
/// when requested.
pub fn conv2d_im2col_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &ConvGeom,
    (need_dx, need_dw): (bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (np, win, cout, c) = (g.out_pixels(), g.window(), g.cout, g.cin);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let wt = if need_dx { transpose(w, win, cout) } else { Vec::new() };
    let mut cols = vec![T::zero(); TILE * win];
    for start in (0..np).step_by(TILE) {
        let rows = TILE.min(np - start);
        let gt = &grad[start * cout..(start + rows) * cout];
        if let Some(dw) = dw.as_mut() {
            im2col_tile(x, g, start, rows, &mut cols);
            gemm_tn_acc(&cols, gt, dw, rows, win, cout);
        }
        if let Some(dx) = dx.as_mut() {
            cols[..rows * win].fill(T::zero());
            gemm_acc(gt, &wt, &mut cols, rows, cout, win);
            g.for_each_tap_in(start..start + rows, |p, s, src| {
                let o = (p - start) * win + s * c;
                for (d, v) in dx[src * c..(src + 1) * c].iter_mut().zip(&cols[o..o + c]) {
                    *d += *v;
                }
            });
        }
    }
    (dx, dw)
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial pivoting.
/// Returns `None` when a pivot vanishes.
pub fn invert<T: Scalar>(a: &[T], n: usize) -> Option<Vec<T>> {
    let mut m = a.to_vec();
    let mut inv = vec![T::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = T::one();
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&r1, &r2| {
            m[r1 * n + col].abs().partial_cmp(&m[r2 * n + col].abs()).unwrap()
        })?;
        if !(m[piv * n + col].abs() > T::zero()) {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                let (mv, iv) = (m[col * n + j], inv[col * n + j]);
                m[r * n + j] -= f * mv;
                inv[r * n + j] -= f * iv;
            }
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(stride: usize, pad: usize) -> ConvGeom {
        ConvGeom { batch: 2, height: 5, width: 4, cin: 3, kh: 3, kw: 3, cout: 4, stride, pad }
    }

    fn ramp(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * s).sin()).collect()
    }

    /// Convolution by the textbook definition, used as an independent reference.
    fn conv_reference(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.out_pixels() * g.cout];
        for b in 0..g.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..g.cout {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xv = x[((b * g.height + iy as usize) * g.width + ix as usize) * g.cin + ci];
                                    let wv = w[((ky * g.kw + kx) * g.cin + ci) * g.cout + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * ho + oy) * wo + ox) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_paths_match_reference() {
        for &(s, p) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = geom(s, p);
            let x = ramp(g.batch * g.height * g.width * g.cin, 0.37);
            let w = ramp(g.window() * g.cout, 0.91);
            let r = conv_reference(&x, &w, &g);
            for (a, b) in conv2d_im2col(&x, &w, &g).iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in conv2d_direct(&x, &w, &g).iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_paths_agree() {
        let g = geom(2, 1);
        let x = ramp(g.batch * g.height * g.width * g.cin, 0.13);
        let w = ramp(g.window() * g.cout, 0.29);
        let gr = ramp(g.out_pixels() * g.cout, 0.71);
        let (dx1, dw1) = conv2d_direct_backward(&x, &w, &gr, &g);
        let (dx2, dw2) = conv2d_im2col_backward(&x, &w, &gr, &g, (true, true));
        let (dx2, dw2) = (dx2.unwrap(), dw2.unwrap());
        for (a, b) in dx1.iter().zip(&dx2).chain(dw1.iter().zip(&dw2)) {
            assert!((a - b).abs() < 1e-12);
        }
        let (none, dw3) = conv2d_im2col_backward(&x, &w, &gr, &g, (false, true));
        assert!(none.is_none());
        assert_eq!(dw3.unwrap(), dw2);
    }

    #[test]
    fn tiled_paths_match_direct_across_tile_boundaries() {
        let g = ConvGeom { batch: 3, height: 7, width: 9, cin: 3, kh: 3, kw: 2, cout: 5, stride: 1, pad: 1 };
        assert!(g.out_pixels() > 2 * TILE && g.out_pixels() % 4 != 0);
        let x = ramp(g.batch * g.height * g.width * g.cin, 0.37);
        let w = ramp(g.window() * g.cout, 0.23);
        let gr = ramp(g.out_pixels() * g.cout, 0.61);
        for (a, b) in conv2d_im2col(&x, &w, &g).iter().zip(&conv2d_direct(&x, &w, &g)) {
            assert!((a - b).abs() < 1e-12);
        }
        let (dx1, dw1) = conv2d_direct_backward(&x, &w, &gr, &g);
        let (dx2, dw2) = conv2d_im2col_backward(&x, &w, &gr, &g, (true, true));
        for (a, b) in dx1.iter().zip(&dx2.unwrap()).chain(dw1.iter().zip(&dw2.unwrap())) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = geom(1, 1);
        let x = ramp(g.batch * g.height * g.width * g.cin, 0.5);
        let c = ramp(g.out_pixels() * g.window(), 0.8);
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn matmul_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a = ramp(m * k, 0.3);
        let b = ramp(k * n, 0.7);
        let c = matmul_nn(&a, &b, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        for ((x, y), z) in c.iter().zip(matmul_tn(&at, &b, k, m, n)).zip(matmul_nt(&a, &bt, m, k, n)) {
            assert!((x - y).abs() < 1e-14 && (x - z).abs() < 1e-14);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let a = vec![4.0f64, 7.0, 2.0, 6.0];
        let inv = invert(&a, 2).unwrap();
        let id = matmul_nn(&a, &inv, 2, 2, 2);
        for (i, v) in id.iter().enumerate() {
            let e = if i % 3 == 0 { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-14);
        }
        assert!(invert(&[1.0f64, 2.0, 2.0, 4.0], 2).is_none());
    }
}
