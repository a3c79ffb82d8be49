//! Small dense complex matrices.
//!
//! Every matrix in the pipeline is at most a few tens of rows (the reference
//! system is 8 antennas by 4 users), so storage is a plain row-major `Vec`
//! and the only factorization offered is Cholesky for Hermitian positive
//! definite systems.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Dense row-major complex matrix.
#[derive(Clone, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(CMat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CMat { rows, cols, data }
    }

    /// Builds a matrix from nested rows of `(re, im)` pairs.
    pub fn from_rows(rows: &[Vec<(f64, f64)>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|row| row.iter().map(|&(re, im)| C64::new(re, im)))
            .collect();
        Ok(CMat { rows: r, cols: c, data })
    }

    pub fn to_rows(&self) -> Vec<Vec<(f64, f64)>> {
        self.data
            .chunks(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().map(|z| (z.re, z.im)).collect())
            .collect()
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Checked matrix product.
    pub fn matmul(&self, rhs: &CMat) -> Result<CMat> {
        if self.cols != rhs.rows {
            return Err(Error::contract(format!(
                "matmul of {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(self.mul(rhs))
    }

    /// Unchecked product for internal hot paths; shapes are asserted in debug builds.
    pub(crate) fn mul(&self, rhs: &CMat) -> CMat {
        debug_assert_eq!(self.cols, rhs.rows);
        let mut out = CMat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᴴ · rhs` without materializing the conjugate transpose.
    pub(crate) fn hermitian_mul(&self, rhs: &CMat) -> CMat {
        debug_assert_eq!(self.rows, rhs.rows);
        let mut out = CMat::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lhs_row = &self.data[k * self.cols..(k + 1) * self.cols];
            let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
            for (i, &a) in lhs_row.iter().enumerate() {
                let a = a.conj();
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Sum of squared moduli.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Real part of the Frobenius inner product `Σ conj(a)·b`.
    pub fn real_inner(&self, other: &CMat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn scale(&self, c: f64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    pub fn scale_complex(&self, c: C64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    /// `self + c·other`.
    pub fn add_scaled(&self, c: f64, other: &CMat) -> CMat {
        debug_assert_eq!(self.shape(), other.shape());
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b * c)
                .collect(),
        }
    }

    /// In-place `self += c·other`.
    pub fn axpy(&mut self, c: f64, other: &CMat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * c;
        }
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        self.add_scaled(-1.0, other)
    }

    pub fn max_abs_diff(&self, other: &CMat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for CMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                let z = self[(i, j)];
                write!(f, "{:+.6}{:+.6}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᴴ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: CMat,
}

impl Cholesky {
    /// Factorizes a Hermitian positive definite matrix. Only the lower triangle is read.
    pub fn factor(a: &CMat) -> Result<Self> {
        let n = a.rows;
        if a.cols != n {
            return Err(Error::contract(format!(
                "Cholesky of non-square {}x{}",
                a.rows, a.cols
            )));
        }
        let mut l = CMat::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if d.is_nan() || d <= 0.0 || !d.is_finite() {
                return Err(Error::Singular { column: j, pivot: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = C64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn factor_matrix(&self) -> &CMat {
        &self.l
    }

    /// Solves `A·X = B` column by column.
    pub fn solve(&self, b: &CMat) -> Result<CMat> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(Error::contract(format!(
                "right-hand side has {} rows, system has {n}",
                b.rows
            )));
        }
        let l = &self.l;
        let mut x = b.clone();
        for c in 0..b.cols {
            // L y = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)].re;
            }
            // Lᴴ x = y
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= l[(k, i)].conj() * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)].re;
            }
        }
        Ok(x)
    }
}

/// Solves `a·X = b` for Hermitian positive definite `a`.
pub fn solve_hermitian_psd(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.rows != b.rows {
        return Err(Error::contract(format!(
            "system is {}x{} but right-hand side has {} rows",
            a.rows, a.cols, b.rows
        )));
    }
    Cholesky::factor(a)?.solve(b)
}

pub fn matmul(a: &CMat, b: &CMat) -> Result<CMat> {
    a.matmul(b)
}

pub fn hermitian(a: &CMat) -> CMat {
    a.hermitian()
}

pub fn frobenius_norm(a: &CMat) -> f64 {
    a.frobenius_norm()
}


#[cfg(test)]
mod tests {
    use super::testing::{random_cmat, rng};
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &CMat, b: &CMat) -> CMat {
        let mut out = CMat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = C64::new(0.0, 0.0);
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let mut r = rng(1);
        let x = random_cmat(&mut r, 2, 2);
        assert_eq!(CMat::identity(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn imaginary_unit_squares_to_minus_one() {
        let i = CMat::from_rows(&[vec![(0.0, 1.0)]]).unwrap();
        let p = i.matmul(&i).unwrap();
        assert_eq!(p[(0, 0)], C64::new(-1.0, 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(2);
        let a = random_cmat(&mut r, 3, 4);
        let b = random_cmat(&mut r, 4, 2);
        let fast = a.matmul(&b).unwrap();
        assert_eq!(fast.shape(), (3, 2));
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        assert!(a.hermitian_mul(&random_cmat(&mut r, 3, 5)).is_finite());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = CMat::zeros(2, 3);
        let b = CMat::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn hermitian_cases() {
        let a = CMat::from_rows(&[vec![(1.0, 2.0)]]).unwrap();
        assert_eq!(a.hermitian()[(0, 0)], C64::new(1.0, -2.0));

        let mut r = rng(3);
        let x = random_cmat(&mut r, 3, 5);
        assert_eq!(x.hermitian().shape(), (5, 3));
        assert_eq!(x.hermitian().hermitian(), x);

        let a = random_cmat(&mut r, 3, 3);
        let b = random_cmat(&mut r, 3, 3);
        let lhs = a.mul(&b).hermitian();
        let rhs = b.hermitian().mul(&a.hermitian());
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        // hermitian_mul agrees with the explicit route
        assert!(a.hermitian_mul(&b).max_abs_diff(&a.hermitian().mul(&b)) < 1e-12);
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(CMat::zeros(3, 2).frobenius_norm(), 0.0);
        let a = CMat::from_rows(&[vec![(3.0, 0.0), (0.0, 4.0)]]).unwrap();
        assert_eq!(a.frobenius_norm(), 5.0);

        let mut r = rng(4);
        let x = random_cmat(&mut r, 4, 4);
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let z = x[(i, j)];
                oracle += z.re * z.re + z.im * z.im;
            }
        }
        let oracle = oracle.sqrt();
        assert!(((x.frobenius_norm() - oracle) / oracle).abs() < 1e-14);
    }

    #[test]
    fn solve_trivial_systems() {
        let mut r = rng(5);
        let x = random_cmat(&mut r, 3, 2);
        let sol = solve_hermitian_psd(&CMat::identity(3), &x).unwrap();
        assert!(sol.max_abs_diff(&x) < 1e-15);

        let two = CMat::identity(3).scale(2.0);
        let half = solve_hermitian_psd(&two, &CMat::identity(3)).unwrap();
        assert!(half.max_abs_diff(&CMat::identity(3).scale(0.5)) < 1e-15);
    }

    #[test]
    fn solve_random_gram_residual() {
        let mut r = rng(6);
        for n in [1, 3, 8, 16] {
            let g = random_cmat(&mut r, n, n);
            let a = g.mul(&g.hermitian()).add_scaled(1.0, &CMat::identity(n));
            let b = random_cmat(&mut r, n, 3);
            let x = solve_hermitian_psd(&a, &b).unwrap();
            let res = a.mul(&x).sub(&b).frobenius_norm() / b.frobenius_norm();
            assert!(res < 1e-10, "n={n} residual {res}");
        }
    }

    #[test]
    fn solve_rejects_indefinite() {
        let mut a = CMat::identity(3);
        a[(1, 1)] = C64::new(-1.0, 0.0);
        assert!(matches!(
            solve_hermitian_psd(&a, &CMat::identity(3)),
            Err(Error::Singular { column: 1, .. })
        ));
        assert!(matches!(
            solve_hermitian_psd(&CMat::zeros(2, 2), &CMat::identity(2)),
            Err(Error::Singular { column: 0, .. })
        ));
        assert!(matches!(
            solve_hermitian_psd(&CMat::identity(3), &CMat::identity(2)),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, n in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut r = rng(seed);
            let a = random_cmat(&mut r, m, n);
            let b = random_cmat(&mut r, n, p);
            let c = random_cmat(&mut r, p, q);
            let left = a.mul(&b).mul(&c);
            let right = a.mul(&b.mul(&c));
            let scale = left.frobenius_norm().max(1e-300);
            prop_assert!(left.sub(&right).frobenius_norm() / scale < 1e-10);
        }

        #[test]
        fn norm_is_absolutely_homogeneous(seed in any::<u64>(), re in -10.0f64..10.0, im in -10.0f64..10.0) {
            let mut r = rng(seed);
            let x = random_cmat(&mut r, 4, 3);
            let c = C64::new(re, im);
            let lhs = x.scale_complex(c).frobenius_norm();
            let rhs = c.norm() * x.frobenius_norm();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }

        #[test]
        fn solve_round_trip(seed in any::<u64>(), n in 1usize..10) {
            let mut r = rng(seed);
            let g = random_cmat(&mut r, n, n);
            let a = g.mul(&g.hermitian()).add_scaled(1.0, &CMat::identity(n));
            let b = random_cmat(&mut r, n, 2);
            let x = solve_hermitian_psd(&a, &b).unwrap();
            prop_assert!(a.mul(&x).sub(&b).frobenius_norm() / b.frobenius_norm() < 1e-10);
        }
    }
}
