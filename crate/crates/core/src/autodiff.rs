//! Forward-mode automatic differentiation.
//!
//! [`Dual<T, N>`] carries a value together with `N` directional derivatives.
//! The inner type `T` is itself a [`Scalar`], so `Dual<Dual<f64, A>, B>`
//! gives mixed second derivatives (nested forward mode). All numerical code
//! in this crate is written against [`Scalar`] so the same routines run on
//! plain `f64` and on dual numbers.
//!
//! Implicitly defined quantities (Newton solves) are differentiated by
//! iterating the solver in dual arithmetic; see [`Scalar::ORDER`].

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Real-like number type used throughout the numerical kernels.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    /// Differentiation order carried by the type (0 for `f64`, 1 for a dual
    /// over `f64`, 2 for a dual over a dual, ...). Newton solves run this many
    /// extra iterations after the value part has converged so that every
    /// derivative level converges as well.
    const ORDER: usize;

    fn constant(x: f64) -> Self;
    /// Innermost real value.
    fn re(&self) -> f64;
    /// Largest magnitude over the value and all derivative components.
    fn max_abs(&self) -> f64;

    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(1.0);
        }
        let mut base = if n < 0 { Self::constant(1.0) / self } else { self };
        let mut k = n.unsigned_abs();
        let mut acc = Self::constant(1.0);
        while k > 0 {
            if k & 1 == 1 {
                acc *= base;
            }
            base = base * base;
            k >>= 1;
        }
        acc
    }
}

impl Scalar for f64 {
    const ORDER: usize = 0;

    #[inline]
    fn constant(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn max_abs(&self) -> f64 {
        self.abs()
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Value plus `N` directional derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T, const N: usize> {
    pub v: T,
    pub d: [T; N],
}

impl<T: Scalar, const N: usize> Dual<T, N> {
    pub fn constant_of(v: T) -> Self {
        Self { v, d: [T::zero(); N] }
    }

    /// Independent variable seeded along direction `i`.
    pub fn variable(v: T, i: usize) -> Self {
        let mut d = [T::zero(); N];
        d[i] = T::constant(1.0);
        Self { v, d }
    }

    #[inline]
    fn chain(self, f: T, df: T) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = *x * df;
        }
        Self { v: f, d }
    }
}

impl<T: Scalar, const N: usize> Scalar for Dual<T, N> {
    const ORDER: usize = T::ORDER + 1;

    #[inline]
    fn constant(x: f64) -> Self {
        Self::constant_of(T::constant(x))
    }
    #[inline]
    fn re(&self) -> f64 {
        self.v.re()
    }
    fn max_abs(&self) -> f64 {
        self.d.iter().fold(self.v.max_abs(), |m, x| m.max(x.max_abs()))
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, T::constant(0.5) / s)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), T::constant(1.0) / self.v)
    }
}

impl<T: Scalar, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d.iter()) {
            *x += *y;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<T: Scalar, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d.iter()) {
            *x -= *y;
        }
        Self { v: self.v - o.v, d }
    }
}

impl<T: Scalar, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [T::zero(); N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<T: Scalar, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let mut d = [T::zero(); N];
        let denom = o.v * o.v;
        for i in 0..N {
            d[i] = (self.d[i] * o.v - self.v * o.d[i]) / denom;
        }
        Self { v: self.v / o.v, d }
    }
}

impl<T: Scalar, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = -*x;
        }
        Self { v: -self.v, d }
    }
}

impl<T: Scalar, const N: usize> Add<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        Self { v: self.v + o, d: self.d }
    }
}

impl<T: Scalar, const N: usize> Sub<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: f64) -> Self {
        Self { v: self.v - o, d: self.d }
    }
}

impl<T: Scalar, const N: usize> Mul<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = *x * o;
        }
        Self { v: self.v * o, d }
    }
}

impl<T: Scalar, const N: usize> Div<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = *x / o;
        }
        Self { v: self.v / o, d }
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl<T: Scalar, const N: usize> $tr for Dual<T, N> {
            #[inline]
            fn $m(&mut self, o: Self) {
                *self = *self $op o;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /);

/// A vector-valued map that can be evaluated over any [`Scalar`].
///
/// Closures cannot be generic over the number type, so maps that need to be
/// differentiated implement this trait instead.
pub trait DualFn {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>>;
}

/// Evaluation with `N` seed directions: returns values and the columns
/// `offset..offset+N` of the Jacobian (row-major `out x N` block).
fn jacobian_block<F: DualFn, const N: usize>(
    f: &F,
    x: &[f64],
    offset: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let xs: Vec<Dual<f64, N>> = x
        .iter()
        .enumerate()
        .map(|(j, &xj)| {
            if j >= offset && j < offset + N {
                Dual::variable(xj, j - offset)
            } else {
                Dual::constant_of(xj)
            }
        })
        .collect();
    let ys = f.eval(&xs).map_err(|e| Error::EvaluationFailed(e.to_string()))?;
    let values = ys.iter().map(|y| y.v).collect();
    let mut block = Vec::with_capacity(ys.len() * N);
    for y in &ys {
        block.extend_from_slice(&y.d);
    }
    Ok((values, block))
}

/// Jacobian and value of `f` at `x` by forward-mode AD.
///
/// Returns `(f(x), J)` with `J` row-major, `J[i * a + j] = dF_i/dx_j`. Up to
/// four inputs are handled in a single dual pass; larger inputs are processed
/// in chunks of four seed directions.
pub fn value_and_jacobian<F: DualFn>(f: &F, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = x.len();
    match a {
        0 => {
            let v = f.eval::<f64>(x).map_err(|e| Error::EvaluationFailed(e.to_string()))?;
            Ok((v, Vec::new()))
        }
        1 => jacobian_block::<F, 1>(f, x, 0),
        2 => jacobian_block::<F, 2>(f, x, 0),
        3 => jacobian_block::<F, 3>(f, x, 0),
        4 => jacobian_block::<F, 4>(f, x, 0),
        _ => {
            let mut values = Vec::new();
            let mut jac: Vec<f64> = Vec::new();
            let mut offset = 0;
            while offset < a {
                let (v, block) = jacobian_block::<F, 4>(f, x, offset)?;
                let b = v.len();
                if jac.is_empty() {
                    jac = vec![0.0; b * a];
                    values = v;
                }
                let width = 4.min(a - offset);
                for i in 0..b {
                    for k in 0..width {
                        jac[i * a + offset + k] = block[i * 4 + k];
                    }
                }
                offset += 4;
            }
            Ok((values, jac))
        }
    }
}

/// Jacobian of `f` at `x` by forward-mode AD (row-major, `b x a`).
pub fn jacobian<F: DualFn>(f: &F, x: &[f64]) -> Result<Vec<f64>> {
    value_and_jacobian(f, x).map(|(_, j)| j)
}

/// Central-difference Jacobian with step `h` (row-major, `b x a`).
pub fn fd_jacobian<F: DualFn>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let a = x.len();
    let mut xp = x.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(a);
    for j in 0..a {
        xp[j] = x[j] + h;
        let fp = f.eval::<f64>(&xp).map_err(|e| Error::EvaluationFailed(e.to_string()))?;
        xp[j] = x[j] - h;
        let fm = f.eval::<f64>(&xp).map_err(|e| Error::EvaluationFailed(e.to_string()))?;
        xp[j] = x[j];
        cols.push(fp.iter().zip(fm.iter()).map(|(p, m)| (p - m) / (2.0 * h)).collect());
    }
    let b = cols.first().map_or(0, Vec::len);
    let mut jac = vec![0.0; a * b];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..b {
            jac[i * a + j] = col[i];
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;
    impl DualFn for Square {
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
            Ok(vec![x[0] * x[0]])
        }
    }

    struct Bilinear;
    impl DualFn for Bilinear {
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
            Ok(vec![x[0] * x[1], x[0] + x[1]])
        }
    }

    struct Cube;
    impl DualFn for Cube {
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
            Ok(vec![x[0] * x[0] * x[0]])
        }
    }

    struct Sine;
    impl DualFn for Sine {
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
            Ok(vec![x[0].sin()])
        }
    }

    struct Wide;
    impl DualFn for Wide {
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
            let mut acc = S::zero();
            for (i, xi) in x.iter().enumerate() {
                acc += *xi * *xi * (i as f64 + 1.0);
            }
            Ok(vec![acc, x[0] * x[x.len() - 1]])
        }
    }

    struct Failing;
    impl DualFn for Failing {
        fn eval<S: Scalar>(&self, _x: &[S]) -> Result<Vec<S>> {
            Err(Error::NewtonDiverged { iterations: 3, residual: 1.0 })
        }
    }

    #[test]
    fn polynomial_jacobian() {
        assert_eq!(jacobian(&Square, &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn bilinear_jacobian() {
        assert_eq!(jacobian(&Bilinear, &[2.0, 5.0]).unwrap(), vec![5.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn fd_matches_simple_cases() {
        let j = fd_jacobian(&Cube, &[1.0], 1e-4).unwrap();
        assert!((j[0] - 3.0).abs() < 1e-7);
        let j = fd_jacobian(&Sine, &[0.0], 1e-5).unwrap();
        assert!((j[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn chunked_jacobian_for_many_inputs() {
        let x: Vec<f64> = (0..7).map(|i| 0.3 * i as f64 - 1.0).collect();
        let j = jacobian(&Wide, &x).unwrap();
        for (i, xi) in x.iter().enumerate() {
            assert!((j[i] - 2.0 * (i as f64 + 1.0) * xi).abs() < 1e-14);
        }
        assert_eq!(j[7], x[6]);
        assert_eq!(j[7 + 6], x[0]);
        assert_eq!(j[7 + 3], 0.0);
    }

    #[test]
    fn failure_is_reported() {
        assert!(matches!(jacobian(&Failing, &[1.0]), Err(Error::EvaluationFailed(_))));
    }

    #[test]
    fn nested_duals_give_second_derivatives() {
        // f(x, y) = x^2 y: f_xy = 2x
        type D = Dual<Dual<f64, 2>, 2>;
        let x = D { v: Dual::variable(1.5, 0), d: [Dual::constant_of(1.0), Dual::constant_of(0.0)] };
        let y = D { v: Dual::variable(-2.0, 1), d: [Dual::constant_of(0.0), Dual::constant_of(1.0)] };
        let f = x * x * y;
        assert_eq!(f.v.v, 1.5 * 1.5 * -2.0);
        assert_eq!(f.d[0].v, 2.0 * 1.5 * -2.0);
        assert_eq!(f.d[0].d[1], 2.0 * 1.5);
        assert_eq!(f.d[1].d[0], 2.0 * 1.5);
        assert_eq!(f.d[1].d[1], 0.0);
        assert_eq!(D::ORDER, 2);
    }

    #[test]
    fn elementary_functions_follow_chain_rule() {
        let x = Dual::<f64, 1>::variable(0.7, 0);
        assert!(((x.exp().ln()).d[0] - 1.0).abs() < 1e-15);
        assert!((x.sqrt().d[0] - 0.5 / 0.7f64.sqrt()).abs() < 1e-15);
        assert!((x.cos().d[0] + 0.7f64.sin()).abs() < 1e-15);
        assert!((x.powi(3).d[0] - 3.0 * 0.49).abs() < 1e-14);
        assert!((x.powi(-2).d[0] + 2.0 / 0.7f64.powi(3)).abs() < 1e-12);
    }
}
