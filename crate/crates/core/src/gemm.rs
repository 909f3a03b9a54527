//! Dense matrix products over row-major slices.
//!
//! All routines accumulate into `c` (`c += op(a) * op(b)`).

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: extents checked above; strides describe dense row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        nn(m, k, n, &a, &b, &mut c);
        let mut c_nt = vec![0.0; m * n];
        nt(m, k, n, &a, &transpose(k, n, &b), &mut c_nt);
        let mut c_tn = vec![0.0; m * n];
        tn(m, k, n, &transpose(m, k, &a), &b, &mut c_tn);

        for i in 0..m * n {
            assert!((c[i] - expect[i]).abs() < 1e-12);
            assert!((c_nt[i] - expect[i]).abs() < 1e-12);
            assert!((c_tn[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulates_into_output() {
        let mut c = vec![1.0];
        nn(1, 1, 1, &[2.0], &[3.0], &mut c);
        assert_eq!(c, vec![7.0]);
    }
}
