//! Floating-point abstraction so the whole engine runs in either f32 or f64.
//!
//! The trait is sealed: exactly the two IEEE types implement it. Besides the
//! usual arithmetic (via `num_traits::Float`), implementors provide GEMM
//! kernels, standard-normal sampling, and little-endian (de)serialisation for
//! checkpoints.

use rand::Rng;
use rand_distr::StandardNormal;

mod sealed {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for f64 {}
}

pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + sealed::Sealed
    + 'static
{
    /// Tag written into checkpoints and sidecars ("f32" or "f64").
    const DTYPE: &'static str;
    /// Size of one element on disk.
    const BYTES: usize;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// C[m x n] = alpha * A[m x k] . B[k x n] + beta * C, all row-major.
    ///
    /// Plain three-loop fallbacks would be orders of magnitude slower; these
    /// dispatch to a cache-blocked kernel. The `_nt` / `_tn` variants take B
    /// (resp. A) stored transposed, i.e. as an n x k (resp. k x m) row-major
    /// slice, without materialising the transpose.
    fn gemm_nn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
    fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
    fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// Stride sets for the three supported layouts.
///
/// For `_nt`, B is physically n x k row-major, so B[t][j] = b[j*k + t]:
/// row stride 1, column stride k. For `_tn`, A is physically k x m row-major,
/// so A[i][t] = a[t*m + i]: row stride 1, column stride m.
macro_rules! impl_gemms {
    ($t:ty, $kernel:path) => {
        fn gemm_nn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
            assert_eq!(a.len(), m * k, "gemm_nn: A length");
            assert_eq!(b.len(), k * n, "gemm_nn: B length");
            assert_eq!(c.len(), m * n, "gemm_nn: C length");
            if m == 0 || n == 0 || k == 0 {
                if k == 0 && !c.is_empty() {
                    for v in c.iter_mut() {
                        *v *= beta;
                    }
                }
                return;
            }
            unsafe {
                $kernel(
                    m, k, n, alpha,
                    a.as_ptr(), k as isize, 1,
                    b.as_ptr(), n as isize, 1,
                    beta,
                    c.as_mut_ptr(), n as isize, 1,
                );
            }
        }

        fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
            assert_eq!(a.len(), m * k, "gemm_nt: A length");
            assert_eq!(b.len(), n * k, "gemm_nt: B length");
            assert_eq!(c.len(), m * n, "gemm_nt: C length");
            if m == 0 || n == 0 || k == 0 {
                if k == 0 && !c.is_empty() {
                    for v in c.iter_mut() {
                        *v *= beta;
                    }
                }
                return;
            }
            unsafe {
                $kernel(
                    m, k, n, alpha,
                    a.as_ptr(), k as isize, 1,
                    b.as_ptr(), 1, k as isize,
                    beta,
                    c.as_mut_ptr(), n as isize, 1,
                );
            }
        }

        fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
            assert_eq!(a.len(), k * m, "gemm_tn: A length");
            assert_eq!(b.len(), k * n, "gemm_tn: B length");
            assert_eq!(c.len(), m * n, "gemm_tn: C length");
            if m == 0 || n == 0 || k == 0 {
                if k == 0 && !c.is_empty() {
                    for v in c.iter_mut() {
                        *v *= beta;
                    }
                }
                return;
            }
            unsafe {
                $kernel(
                    m, k, n, alpha,
                    a.as_ptr(), 1, m as isize,
                    b.as_ptr(), n as isize, 1,
                    beta,
                    c.as_mut_ptr(), n as isize, 1,
                );
            }
        }
    };
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    impl_gemms!(f32, matrixmultiply::sgemm);

    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    impl_gemms!(f64, matrixmultiply::dgemm);

    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_nn_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let mut c = vec![0.5; m * n];
        let mut expect = naive(m, k, n, &a, &b);
        for (e, &seed) in expect.iter_mut().zip(c.iter()) {
            *e = 2.0 * *e + 0.25 * seed;
        }
        f64::gemm_nn(m, k, n, 2.0, &a, &b, 0.25, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_nt_matches_naive() {
        let (m, k, n) = (2, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 2.5).collect();
        // b is n x k; logical B[t][j] = bt[j*k + t]
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64) * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n)
            .map(|i| {
                let (t, j) = (i / n, i % n);
                bt[j * k + t]
            })
            .collect();
        let expect = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        f64::gemm_nt(m, k, n, 1.0, &a, &bt, 0.0, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_tn_matches_naive() {
        let (m, k, n) = (4, 3, 2);
        // a is k x m; logical A[i][t] = at[t*m + i]
        let at: Vec<f64> = (0..k * m).map(|i| (i as f64) * 0.25 - 1.5).collect();
        let a: Vec<f64> = (0..m * k)
            .map(|i| {
                let (r, t) = (i / k, i % k);
                at[t * m + r]
            })
            .collect();
        let b: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.1).collect();
        let expect = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        f64::gemm_tn(m, k, n, 1.0, &at, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_f32_small_exact() {
        let (m, k, n) = (2, 3, 2);
        let a: Vec<f32> = vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0];
        let b: Vec<f32> = vec![2.0, 0.0, 1.0, -1.0, 0.5, 4.0];
        let mut c = vec![0.0f32; m * n];
        f32::gemm_nn(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, vec![5.5, 10.0, -0.5, 7.5]);
    }

    #[test]
    fn le_roundtrip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-3.25f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[0..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..12]), -3.25);
    }
}
