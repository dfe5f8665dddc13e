//! Small dense symmetric-matrix helpers (row-major `n x n` slices).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::scalar::{lit, to_f64, Real};

fn to_na<T: Real>(m: &[T], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| to_f64(m[i * n + j]))
}

fn from_na<T: Real>(m: &DMatrix<f64>) -> Vec<T> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(lit(m[(i, j)]));
        }
    }
    out
}

pub fn identity<T: Real>(n: usize) -> Vec<T> {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = T::one();
    }
    m
}

pub fn inverse<T: Real>(m: &[T], n: usize) -> Option<Vec<T>> {
    match n {
        1 => {
            if m[0] == T::zero() {
                None
            } else {
                Some(vec![T::one() / m[0]])
            }
        }
        2 => {
            let det = m[0] * m[3] - m[1] * m[2];
            if det == T::zero() {
                return None;
            }
            Some(vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det])
        }
        _ => to_na(m, n).try_inverse().map(|inv| from_na(&inv)),
    }
}

pub fn determinant<T: Real>(m: &[T], n: usize) -> T {
    match n {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => lit(to_na(m, n).determinant()),
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues<T: Real>(m: &[T], n: usize) -> Vec<T> {
    let mut ev: Vec<f64> = SymmetricEigen::new(to_na(m, n)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev.into_iter().map(lit).collect()
}

/// Solves `m x = b` for a general square matrix.
pub fn solve<T: Real>(m: &[T], n: usize, b: &[T]) -> Option<Vec<T>> {
    if n == 2 {
        let det = m[0] * m[3] - m[1] * m[2];
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        return Some(vec![(b[0] * m[3] - m[1] * b[1]) / det, (m[0] * b[1] - m[2] * b[0]) / det]);
    }
    let a = to_na(m, n);
    let rhs = nalgebra::DVector::from_iterator(n, b.iter().map(|x| to_f64(*x)));
    a.lu().solve(&rhs).map(|x| x.iter().map(|v| lit(*v)).collect())
}

pub fn matmul<T: Real>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for l in 0..k {
            let a_il = a[i * k + l];
            for j in 0..c {
                out[i * c + j] += a_il * b[l * c + j];
            }
        }
    }
    out
}

/// Largest deviation of `m` from the identity, entrywise.
pub fn identity_defect<T: Real>(m: &[T], n: usize) -> T {
    let mut worst = T::zero();
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((m[i * n + j] - target).abs());
        }
    }
    worst
}

/// Spectral norm bound via the Frobenius norm.
pub fn frobenius<T: Real>(m: &[T]) -> T {
    m.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trip_3x3() {
        let m = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = inverse(&m, 3).unwrap();
        let prod = matmul(&m, &inv, 3, 3, 3);
        assert!(identity_defect(&prod, 3) < 1e-12);
    }

    #[test]
    fn eigenvalues_sorted() {
        let ev = sym_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((ev[0] - 1.0f64).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_matches_inverse() {
        let m = [3.0, 1.0, 1.0, 2.0];
        let x = solve(&m, 2, &[9.0, 8.0]).unwrap();
        assert!((x[0] - 2.0f64).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
    }
}
