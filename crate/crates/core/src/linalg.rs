//! Small dense linear algebra on row-major slices.
//!
//! Factorisations run on `f64` values; right-hand sides and determinants
//! may be any [`Scalar`] so that dual numbers pass through linear solves.

use nalgebra::DMatrix;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

const PIVOT_RTOL: f64 = 1e-14;

/// LU factorisation with partial pivoting, stored in place.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(mut a: Vec<f64>, n: usize) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::RankDeficient(0.0));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].abs();
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= PIVOT_RTOL * scale {
                return Err(Error::RankDeficient(best / scale));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / pivot;
                a[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu: a, perm })
    }

    /// Solves `A x = b`, returning `x`.
    pub fn solve<S: Scalar>(&self, b: &[S]) -> Vec<S> {
        let n = self.n;
        let mut x: Vec<S> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= x[j] * self.lu[i * n + j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= x[j] * self.lu[i * n + j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        x
    }
}

/// Determinant by Gaussian elimination, pivoting on the real part.
pub fn det<S: Scalar>(mut a: Vec<S>, n: usize) -> S {
    debug_assert_eq!(a.len(), n * n);
    let mut det = S::constant(1.0);
    for k in 0..n {
        let mut p = k;
        let mut best = a[k * n + k].re().abs();
        for i in k + 1..n {
            let v = a[i * n + k].re().abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best == 0.0 {
            // Exactly singular in value; derivatives of the determinant are
            // still well defined but need the adjugate. Perturbation-free
            // fallback: expand along column k.
            return cofactor_det(a, n);
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            det = -det;
        }
        let pivot = a[k * n + k];
        det *= pivot;
        for i in k + 1..n {
            let f = a[i * n + k] / pivot;
            for j in k + 1..n {
                let t = a[k * n + j];
                a[i * n + j] -= f * t;
            }
        }
    }
    det
}

fn cofactor_det<S: Scalar>(a: Vec<S>, n: usize) -> S {
    if n == 1 {
        return a[0];
    }
    let mut acc = S::zero();
    for c in 0..n {
        let mut minor = Vec::with_capacity((n - 1) * (n - 1));
        for i in 1..n {
            for j in 0..n {
                if j != c {
                    minor.push(a[i * n + j]);
                }
            }
        }
        let term = a[c] * cofactor_det(minor, n - 1);
        if c % 2 == 0 {
            acc += term;
        } else {
            acc -= term;
        }
    }
    acc
}

/// Singular value decomposition summary of a `rows x cols` matrix.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Singular values in descending order.
    pub sigma: Vec<f64>,
    /// Right singular vectors, `right[i]` paired with `sigma[i]`.
    pub right: Vec<Vec<f64>>,
}

pub fn svd(a: &[f64], rows: usize, cols: usize) -> Svd {
    let m = DMatrix::from_row_slice(rows, cols, a);
    let dec = m.svd(false, true);
    let vt = dec.v_t.expect("requested right singular vectors");
    let mut pairs: Vec<(f64, Vec<f64>)> = dec
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, vt.row(i).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Thin SVD of a wide matrix leaves out part of the null space.
    while pairs.len() < cols {
        let basis: Vec<&Vec<f64>> = pairs.iter().map(|p| &p.1).collect();
        let extra = complete_basis(&basis, cols);
        pairs.push((0.0, extra));
    }
    Svd { sigma: pairs.iter().map(|p| p.0).collect(), right: pairs.into_iter().map(|p| p.1).collect() }
}

/// A unit vector orthogonal to all of `basis` (assumed orthonormal).
fn complete_basis(basis: &[&Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best = vec![0.0; dim];
    let mut best_norm = -1.0;
    for i in 0..dim {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        for b in basis {
            let c = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b.iter()) {
                *x -= c * y;
            }
        }
        let nv = norm(&v);
        if nv > best_norm {
            best_norm = nv;
            best = v;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean norm of the real parts.
pub fn norm_re<S: Scalar>(a: &[S]) -> f64 {
    a.iter().map(|x| x.re() * x.re()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dual;

    #[test]
    fn lu_solves_small_system() {
        let a = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let lu = Lu::new(a.clone(), 3).unwrap();
        let x = lu.solve(&[3.0, 2.0, 4.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((r - [3.0, 2.0, 4.0][i]).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(matches!(Lu::new(a, 2), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn determinant_and_its_derivative() {
        // det [[x, 1], [2, x]] = x^2 - 2, derivative 2x
        let x = Dual::<f64, 1>::variable(3.0, 0);
        let one = Dual::constant(1.0);
        let two = Dual::constant(2.0);
        let d = det(vec![x, one, two, x], 2);
        assert!((d.v - 7.0).abs() < 1e-14);
        assert!((d.d[0] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn determinant_derivative_at_singular_value() {
        // det [[x, 0], [0, 1]] at x = 0: value 0, derivative 1
        let x = Dual::<f64, 1>::variable(0.0, 0);
        let d = det(vec![x, Dual::constant(0.0), Dual::constant(0.0), Dual::constant(1.0)], 2);
        assert_eq!(d.v, 0.0);
        assert_eq!(d.d[0], 1.0);
    }

    #[test]
    fn svd_is_sorted_with_complete_right_basis() {
        let a = vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0];
        let s = svd(&a, 2, 3);
        assert_eq!(s.sigma.len(), 3);
        assert!((s.sigma[0] - 3.0).abs() < 1e-14);
        assert!((s.sigma[1] - 1.0).abs() < 1e-14);
        assert_eq!(s.sigma[2], 0.0);
        assert!((s.right[2][2].abs() - 1.0).abs() < 1e-14);
    }
}
