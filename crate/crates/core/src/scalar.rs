//! Floating point abstraction shared by every module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Precision tag carried by tensors and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Byte tag used by the checkpoint format.
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "float32" => Ok(Dtype::F32),
            "f64" | "float64" => Ok(Dtype::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

impl Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Real scalar type usable throughout the crate (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: Dtype;

    /// Clamp margin applied to arccosh arguments (`β ≥ 1 + eps`).
    fn eps_acosh() -> Self;

    /// Tolerance for on-manifold and tangency precondition checks.
    fn tol_manifold() -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;

    /// `C[m×n] = A·B + beta·C` over strided views; `A` is `m×k` with strides
    /// `sa`, `B` is `k×n` with strides `sb`, `C` is dense row-major.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self]);
}

/// Elements spanned by a `rows×cols` view with strides `s`.
fn span(rows: usize, cols: usize, s: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.0 + (cols - 1) * s.1 + 1
    }
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize), c: &[T]) {
    assert!(span(m, k, sa) <= a.len(), "gemm: A view out of bounds");
    assert!(span(k, n, sb) <= b.len(), "gemm: B view out of bounds");
    assert!(m * n <= c.len(), "gemm: C too small");
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: every view was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn eps_acosh() -> Self {
        1e-7
    }

    fn tol_manifold() -> Self {
        1e-3
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: every view was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn eps_acosh() -> Self {
        1e-12
    }

    fn tol_manifold() -> Self {
        1e-6
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}
