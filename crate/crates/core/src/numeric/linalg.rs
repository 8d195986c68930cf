//! Strided matrix views over slices and a bounds-checked GEMM.

use super::Scalar;

/// A read-only strided matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Scalar> MatRef<'a, F> {
    /// Row-major view.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `c (m×n, row-major) = a·b`, or `c += a·b` when `accumulate`.
pub fn gemm<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, c: &mut [F], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions");
    assert!(c.len() >= m * n, "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(F::zero());
        }
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the views were bounds-checked on construction (the strides of
    // a view and its transpose address the same rows*cols block) and `c` is
    // a distinct mutable slice of at least m*n elements.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major product of two row-major matrices.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    gemm(MatRef::new(a, m, k), MatRef::new(b, k, n), &mut c, false);
    c
}

/// `y = M x` for a row-major `rows × cols` matrix.
pub fn matvec<F: Scalar>(m: &[F], rows: usize, cols: usize, x: &[F]) -> Vec<F> {
    (0..rows)
        .map(|i| dot(&m[i * cols..(i + 1) * cols], x))
        .collect()
}

/// `y = Mᵀ x` for a row-major `rows × cols` matrix.
pub fn matvec_t<F: Scalar>(m: &[F], rows: usize, cols: usize, x: &[F]) -> Vec<F> {
    let mut y = vec![F::zero(); cols];
    for (i, &xi) in x.iter().enumerate().take(rows) {
        for (yj, &mij) in y.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *yj += mij * xi;
        }
    }
    y
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5 - 2.0).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // (bᵀ aᵀ) = (a b)ᵀ
        let mut ct = vec![0.0; 8];
        gemm(MatRef::new(&b, 3, 4).t(), MatRef::new(&a, 2, 3).t(), &mut ct, false);
        for i in 0..2 {
            for j in 0..4 {
                assert!((ct[j * 2 + i] - c[i * 4 + j]).abs() < 1e-12);
            }
        }
        let y = matvec(&a, 2, 3, &[1.0, 0.0, -1.0]);
        assert_eq!(y, vec![-2.0, -2.0]);
        let z = matvec_t(&a, 2, 3, &[1.0, 1.0]);
        assert_eq!(z, vec![5.0, 7.0, 9.0]);
    }
}
