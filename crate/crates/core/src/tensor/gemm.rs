//! Thin safe wrapper over `matrixmultiply::sgemm`.
//!
//! The blocking inside `sgemm` depends only on the inner dimension, so a
//! given product is bit-identical whether or not its rows are split across
//! threads.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREAD_CAP: AtomicUsize = AtomicUsize::new(1);

/// Rows below this count are never split across threads.
const MIN_ROWS_PER_THREAD: usize = 64;

/// Caps the number of threads used by matrix products (minimum 1).
pub fn set_thread_cap(threads: usize) {
    THREAD_CAP.store(threads.max(1), Ordering::Relaxed);
}

pub fn thread_cap() -> usize {
    THREAD_CAP.load(Ordering::Relaxed)
}

/// Read-only strided view of an `rows x cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Contiguous row-major matrix.
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    /// Column block `[start, start + width)` of this matrix.
    pub fn cols_range(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        Self {
            data: &self.data[start * self.col_stride..],
            rows: self.rows,
            cols: width,
            ..self
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
    }

    fn rows_range(self, start: usize, count: usize) -> Self {
        Self {
            data: &self.data[start * self.row_stride..],
            rows: count,
            ..self
        }
    }
}

/// `c = a * b + (accumulate ? c : 0)` with `c` a row-major `a.rows x b.cols`
/// block whose rows are `ldc` apart.
pub(crate) fn gemm(a: MatRef, b: MatRef, c: &mut [f32], ldc: usize, accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension mismatch");
    assert!(ldc >= n);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n, "gemm output too small");
    if k == 0 {
        if !accumulate {
            for row in c.chunks_mut(ldc).take(m) {
                row[..n].fill(0.0);
            }
        }
        return;
    }
    assert!(a.span() <= a.data.len(), "gemm lhs view out of bounds");
    assert!(b.span() <= b.data.len(), "gemm rhs view out of bounds");

    let threads = thread_cap().min(m / MIN_ROWS_PER_THREAD).max(1);
    if threads == 1 {
        kernel(a, b, c, ldc, accumulate);
        return;
    }
    let rows_per = m.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut rest = &mut c[..];
        let mut start = 0;
        while start < m {
            let count = rows_per.min(m - start);
            let take = if start + count == m {
                rest.len()
            } else {
                count * ldc
            };
            let (chunk, tail) = rest.split_at_mut(take);
            rest = tail;
            let a_part = a.rows_range(start, count);
            scope.spawn(move || kernel(a_part, b, chunk, ldc, accumulate));
            start += count;
        }
    });
}

fn kernel(a: MatRef, b: MatRef, c: &mut [f32], ldc: usize, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts in `gemm` guarantee every strided access of `a`,
    // `b` and `c` stays inside the borrowed slices, and `c` is uniquely
    // borrowed.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Contiguous `(m x k) * (k x n)` product.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(MatRef::new(a, m, k), MatRef::new(b, k, n), &mut c, n, false);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_on_integers() {
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i % 5) as f32 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 3) as f32).collect();
        assert_eq!(matmul(&a, &b, m, k, n), naive(&a, &b, m, k, n));
    }

    #[test]
    fn transposed_views() {
        let a: Vec<f32> = (0..6).map(|i| i as f32).collect(); // 2x3
        let mut c = vec![0.0; 9];
        // a^T a : 3x3
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), &mut c, 3, false);
        assert_eq!(c, vec![9.0, 12.0, 15.0, 12.0, 17.0, 22.0, 15.0, 22.0, 29.0]);
    }

    #[test]
    fn row_split_is_bit_identical() {
        let (m, k, n) = (300, 67, 19);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 13 % 29) as f32).cos()).collect();
        set_thread_cap(1);
        let single = matmul(&a, &b, m, k, n);
        set_thread_cap(3);
        let split = matmul(&a, &b, m, k, n);
        set_thread_cap(1);
        assert_eq!(single, split);
    }
}
