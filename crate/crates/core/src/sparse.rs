//! Compressed sparse column matrices over real or complex scalars.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::math;

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    fn zero() -> Self;
    fn from_f64(x: f64) -> Self;
    fn modulus(self) -> f64;
    fn conj(self) -> Self;
    fn scale(self, s: f64) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f64 {
    #[inline]
    fn zero() -> Self {
        0.0
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn modulus(self) -> f64 {
        math::abs(self)
    }
    #[inline]
    fn conj(self) -> Self {
        self
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        self * s
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

impl Scalar for Complex64 {
    #[inline]
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    #[inline]
    fn modulus(self) -> f64 {
        libm::hypot(self.re, self.im)
    }
    #[inline]
    fn conj(self) -> Self {
        Complex64::new(self.re, -self.im)
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        Complex64::new(self.re * s, self.im * s)
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix<T> {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowidx: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Scalar> CscMatrix<T> {
    /// Assemble from triplets; duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, trip: &[(u32, u32, T)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(_, c, _) in trip {
            counts[c as usize + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0u32; trip.len()];
        let mut vals = vec![T::zero(); trip.len()];
        for &(r, c, v) in trip {
            let k = next[c as usize];
            rows[k] = r;
            vals[k] = v;
            next[c as usize] += 1;
        }
        let mut colptr = Vec::with_capacity(ncols + 1);
        let mut rowidx = Vec::with_capacity(trip.len());
        let mut values = Vec::with_capacity(trip.len());
        colptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for c in 0..ncols {
            let (a, b) = (counts[c], counts[c + 1]);
            order.clear();
            order.extend(a..b);
            order.sort_by_key(|&k| rows[k]);
            let start = rowidx.len();
            for &k in &order {
                if rowidx.len() > start && *rowidx.last().unwrap() == rows[k] {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    rowidx.push(rows[k]);
                    values.push(vals[k]);
                }
            }
            colptr.push(rowidx.len());
        }
        Self { nrows, ncols, colptr, rowidx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[T], y: &mut [T]) {
        for v in y.iter_mut() {
            *v = T::zero();
        }
        for c in 0..self.ncols {
            let xc = x[c];
            for k in self.colptr[c]..self.colptr[c + 1] {
                y[self.rowidx[k] as usize] += self.values[k] * xc;
            }
        }
    }

    /// `y = A^T x`
    pub fn matvec_transpose(&self, x: &[T], y: &mut [T]) {
        for c in 0..self.ncols {
            let mut s = T::zero();
            for k in self.colptr[c]..self.colptr[c + 1] {
                s += self.values[k] * x[self.rowidx[k] as usize];
            }
            y[c] = s;
        }
    }

    pub fn column_sums(&self) -> Vec<T> {
        (0..self.ncols)
            .map(|c| {
                let mut s = T::zero();
                for k in self.colptr[c]..self.colptr[c + 1] {
                    s += self.values[k];
                }
                s
            })
            .collect()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.ncols).flat_map(move |c| {
            (self.colptr[c]..self.colptr[c + 1]).map(move |k| (self.rowidx[k] as usize, c, self.values[k]))
        })
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        let (a, b) = (self.colptr[col], self.colptr[col + 1]);
        match self.rowidx[a..b].binary_search(&(row as u32)) {
            Ok(k) => self.values[a + k],
            Err(_) => T::zero(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_merge_and_multiply() {
        let t = [(0u32, 0u32, 1.0), (1, 0, 2.0), (0, 0, 0.5), (1, 1, 3.0)];
        let a = CscMatrix::from_triplets(2, 2, &t);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 0), 1.5);
        let mut y = [0.0; 2];
        a.matvec(&[1.0, 1.0], &mut y);
        assert_eq!(y, [1.5, 5.0]);
        a.matvec_transpose(&[1.0, 1.0], &mut y);
        assert_eq!(y, [3.5, 3.0]);
        assert_eq!(a.column_sums(), vec![3.5, 3.0]);
    }
}
