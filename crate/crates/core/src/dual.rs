//! Forward-mode dual numbers and the small scalar abstraction the loss
//! kernels are written against.
//!
//! The geometric losses are evaluated once with `f64` for values and once
//! with [`Dual`] to carry exact derivatives with respect to the intrinsics
//! (the chain rule through projection and back-projection, evaluated
//! mechanically).

use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::fmath;

/// Arithmetic needed by the loss kernels.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(&self) -> f64 {
        *self
    }

    #[inline]
    fn sqrt(self) -> Self {
        fmath::sqrt(self)
    }
}

/// Value plus `N` partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: [0.0; N] }
    }

    /// Independent variable number `slot`.
    pub fn variable(re: f64, slot: usize) -> Self {
        let mut eps = [0.0; N];
        eps[slot] = 1.0;
        Dual { re, eps }
    }

    #[inline]
    fn map(self, scale: f64) -> [f64; N] {
        let mut e = self.eps;
        for v in e.iter_mut() {
            *v *= scale;
        }
        e
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;

    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (a, b) in eps.iter_mut().zip(rhs.eps.iter()) {
            *a += b;
        }
        Dual { re: self.re + rhs.re, eps }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;

    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (a, b) in eps.iter_mut().zip(rhs.eps.iter()) {
            *a -= b;
        }
        Dual { re: self.re - rhs.re, eps }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;

    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + rhs.eps[i] * self.re;
        }
        Dual { re: self.re * rhs.re, eps }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;

    #[inline]
    fn div(self, rhs: Self) -> Self {
        // value computed exactly as the f64 path does
        let q = self.re / rhs.re;
        let inv = 1.0 / rhs.re;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - q * rhs.eps[i]) * inv;
        }
        Dual { re: q, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;

    #[inline]
    fn neg(self) -> Self {
        Dual { re: -self.re, eps: self.map(-1.0) }
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;

    #[inline]
    fn add(self, rhs: f64) -> Self {
        Dual { re: self.re + rhs, eps: self.eps }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;

    #[inline]
    fn sub(self, rhs: f64) -> Self {
        Dual { re: self.re - rhs, eps: self.eps }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;

    #[inline]
    fn mul(self, rhs: f64) -> Self {
        Dual { re: self.re * rhs, eps: self.map(rhs) }
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;

    #[inline]
    fn div(self, rhs: f64) -> Self {
        Dual { re: self.re / rhs, eps: self.map(1.0 / rhs) }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    #[inline]
    fn constant(v: f64) -> Self {
        Dual::constant(v)
    }

    #[inline]
    fn value(&self) -> f64 {
        self.re
    }

    #[inline]
    fn sqrt(self) -> Self {
        let r = fmath::sqrt(self.re);
        let d = if r > 0.0 { 0.5 / r } else { 0.0 };
        Dual { re: r, eps: self.map(d) }
    }
}

/// Three-vector over a [`Scalar`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct V3<T>(pub [T; 3]);

impl<T: Scalar> V3<T> {
    pub fn from_f64(v: &nalgebra::Vector3<f64>) -> Self {
        V3([T::constant(v.x), T::constant(v.y), T::constant(v.z)])
    }

    #[inline]
    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline]
    pub fn add(&self, o: &Self) -> Self {
        V3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    #[inline]
    pub fn sub(&self, o: &Self) -> Self {
        V3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }

    #[inline]
    pub fn scale(&self, s: T) -> Self {
        V3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    #[inline]
    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn cross(&self, o: &Self) -> Self {
        let (a, b) = (&self.0, &o.0);
        V3([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])
    }
}

/// Row-major 3×3 matrix over a [`Scalar`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct M3<T>(pub [[T; 3]; 3]);

impl<T: Scalar> M3<T> {
    pub fn from_f64(m: &nalgebra::Matrix3<f64>) -> Self {
        let mut r = [[T::constant(0.0); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = T::constant(m[(i, j)]);
            }
        }
        M3(r)
    }

    /// `M·v`
    #[inline]
    pub fn mul_vec(&self, v: &V3<T>) -> V3<T> {
        let (m, v) = (&self.0, &v.0);
        V3([
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ])
    }

    /// `Mᵀ·v`
    #[inline]
    pub fn tr_mul_vec(&self, v: &V3<T>) -> V3<T> {
        let (m, v) = (&self.0, &v.0);
        V3([
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ])
    }

    /// `M·B`
    pub fn mul(&self, b: &M3<T>) -> M3<T> {
        let (a, b) = (&self.0, &b.0);
        let mut r = [[T::constant(0.0); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        M3(r)
    }

    /// `M·(u, v, 1)`
    #[inline]
    pub fn mul_pixel(&self, u: f64, v: f64) -> V3<T> {
        let m = &self.0;
        V3(core::array::from_fn(|i| m[i][0] * u + m[i][1] * v + m[i][2]))
    }

    /// `Mᵀ·(u, v, 1)`
    #[inline]
    pub fn tr_mul_pixel(&self, u: f64, v: f64) -> V3<T> {
        let m = &self.0;
        V3(core::array::from_fn(|i| m[0][i] * u + m[1][i] * v + m[2][i]))
    }

    /// `[v]ₓ`, so that `[v]ₓ·w = v × w`.
    pub fn skew(v: &V3<T>) -> M3<T> {
        let z = T::constant(0.0);
        let [a, b, c] = v.0;
        M3([[z, -c, b], [c, z, -a], [-b, a, z]])
    }

    pub fn transpose(&self) -> M3<T> {
        let a = &self.0;
        M3(core::array::from_fn(|i| core::array::from_fn(|j| a[j][i])))
    }

    /// `Mᵀ·B`
    pub fn tr_mul(&self, b: &M3<T>) -> M3<T> {
        let (a, b) = (&self.0, &b.0);
        let mut r = [[T::constant(0.0); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[0][i] * b[0][j] + a[1][i] * b[1][j] + a[2][i] * b[2][j];
            }
        }
        M3(r)
    }
}
