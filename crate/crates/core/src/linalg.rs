//! Small dense real matrices (dimension at most [`MAX_DIM`]) with a cyclic
//! Jacobi eigensolver.
//!
//! Everything here is stack-allocated and `Copy`; the weight machinery calls
//! these routines once per leaf and per atom, so heap traffic matters more
//! than asymptotics.

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 6;

#[derive(Clone, Copy, PartialEq)]
pub struct Mat {
    n: usize,
    a: [f64; MAX_DIM * MAX_DIM],
}

impl std::fmt::Debug for Mat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let rows: Vec<Vec<f64>> = (0..self.n)
            .map(|i| (0..self.n).map(|j| self[(i, j)]).collect())
            .collect();
        f.debug_struct("Mat").field("n", &self.n).field("rows", &rows).finish()
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.a[i * MAX_DIM + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.a[i * MAX_DIM + j]
    }
}

/// Eigen-decomposition of a symmetric matrix: `m = V diag(values) Vᵀ`, the
/// columns of `vectors` being orthonormal eigenvectors.
#[derive(Clone, Copy, Debug)]
pub struct SymEigen {
    pub values: [f64; MAX_DIM],
    pub vectors: Mat,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.vectors.n
    }

    pub fn max_value(&self) -> f64 {
        self.values[..self.dim()].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values[..self.dim()].iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Rebuild `V diag(g(λ)) Vᵀ`.
    pub fn map(&self, g: impl Fn(f64) -> f64) -> Mat {
        let n = self.dim();
        let v = &self.vectors;
        let mut out = Mat::zeros(n);
        for k in 0..n {
            let s = g(self.values[k]);
            for i in 0..n {
                let vik = v[(i, k)] * s;
                for j in i..n {
                    out[(i, j)] += vik * v[(j, k)];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                out[(i, j)] = out[(j, i)];
            }
        }
        out
    }
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1 && n <= MAX_DIM, "matrix dimension {n} outside 1..={MAX_DIM}");
        Mat { n, a: [0.0; MAX_DIM * MAX_DIM] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scalar(n, 1.0)
    }

    pub fn scalar(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = s;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Row-major construction; `data.len()` must be `n * n`.
    pub fn from_row_major(n: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), n * n, "expected {} entries", n * n);
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = data[i * n + j];
            }
        }
        m
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len());
        for i in 0..u.len() {
            for j in 0..v.len() {
                m[(i, j)] = u[i] * v[j];
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self[(i, k)];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += aik * other[(k, j)];
                }
            }
        }
        out
    }

    /// `out = self · x`.
    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self[(i, j)] * x[j];
            }
            out[i] = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.apply_into(x, &mut out);
        out
    }

    /// Euclidean norm of `self · x` without allocating.
    #[inline]
    pub fn apply_norm(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut s2 = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self[(i, j)] * x[j];
            }
            s2 += s * s;
        }
        s2.sqrt()
    }

    pub fn add(&self, other: &Mat) -> Mat {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out[(i, j)] += other[(i, j)];
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Mat, s: f64) {
        for i in 0..self.n {
            for j in 0..self.n {
                self[(i, j)] += s * other[(i, j)];
            }
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out[(i, j)] *= s;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self[(i, j)].abs());
            }
        }
        m
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max((self[(i, j)] - other[(i, j)]).abs());
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self[(i, j)].is_finite()))
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut m = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m / scale
    }

    pub fn symmetrized(&self) -> Mat {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Cyclic Jacobi eigensolver. The input is read as symmetric (the upper
    /// triangle wins on mismatch).
    pub fn sym_eigen(&self) -> SymEigen {
        let n = self.n;
        let mut a = self.symmetrized();
        let mut v = Mat::identity(n);
        let scale = a.max_abs();
        if n > 1 && scale > 0.0 {
            for _sweep in 0..64 {
                let mut off = 0.0;
                for i in 0..n {
                    for j in (i + 1)..n {
                        off += a[(i, j)] * a[(i, j)];
                    }
                }
                if off.sqrt() <= 1e-17 * scale {
                    break;
                }
                for p in 0..n {
                    for q in (p + 1)..n {
                        let apq = a[(p, q)];
                        if apq.abs() <= 1e-300 {
                            continue;
                        }
                        let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                        let t = if theta == 0.0 { 1.0 } else { t };
                        let c = 1.0 / (t * t + 1.0).sqrt();
                        let s = t * c;
                        for k in 0..n {
                            let akp = a[(k, p)];
                            let akq = a[(k, q)];
                            a[(k, p)] = c * akp - s * akq;
                            a[(k, q)] = s * akp + c * akq;
                        }
                        for k in 0..n {
                            let apk = a[(p, k)];
                            let aqk = a[(q, k)];
                            a[(p, k)] = c * apk - s * aqk;
                            a[(q, k)] = s * apk + c * aqk;
                        }
                        for k in 0..n {
                            let vkp = v[(k, p)];
                            let vkq = v[(k, q)];
                            v[(k, p)] = c * vkp - s * vkq;
                            v[(k, q)] = s * vkp + c * vkq;
                        }
                    }
                }
            }
        }
        let mut values = [0.0; MAX_DIM];
        for i in 0..n {
            values[i] = a[(i, i)];
        }
        SymEigen { values, vectors: v }
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        if self.n == 1 {
            return self[(0, 0)].abs();
        }
        let gram = self.transpose().matmul(self);
        gram.sym_eigen().max_value().max(0.0).sqrt()
    }

    /// Check symmetry within `1e-12` (relative) and positive eigenvalues.
    pub fn check_spd(&self) -> Result<SymEigen> {
        if !self.is_finite() {
            return Err(Error::Validation("matrix has non-finite entries".into()));
        }
        if self.asymmetry() > 1e-12 {
            return Err(Error::Validation(format!(
                "matrix is not symmetric (relative asymmetry {:e})",
                self.asymmetry()
            )));
        }
        let eig = self.sym_eigen();
        if eig.min_value() <= 0.0 {
            return Err(Error::Validation(format!(
                "matrix is not positive definite (smallest eigenvalue {:e})",
                eig.min_value()
            )));
        }
        Ok(eig)
    }

    /// `M^alpha` for symmetric positive-definite `M`.
    pub fn spd_power(&self, alpha: f64) -> Result<Mat> {
        let eig = self.check_spd()?;
        Ok(eig.map(|l| l.powf(alpha)))
    }

    /// Inverse of a symmetric positive-definite matrix.
    pub fn spd_inverse(&self) -> Result<Mat> {
        self.spd_power(-1.0)
    }
}

/// Euclidean norm of a slice.
#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        let mut b = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        b.transpose().matmul(&b).add(&Mat::scalar(n, 0.1))
    }

    /// Determinant by cofactor expansion; an oracle independent of Jacobi.
    fn det(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        if n == 1 {
            return m[0][0];
        }
        (0..n)
            .map(|c| {
                let minor: Vec<Vec<f64>> = m[1..]
                    .iter()
                    .map(|row| row.iter().enumerate().filter(|(j, _)| *j != c).map(|(_, v)| *v).collect())
                    .collect();
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[0][c] * det(&minor)
            })
            .sum()
    }

    /// Largest root of det(G - λI) by bisection on the characteristic polynomial.
    fn char_poly_max_root(g: &Mat) -> f64 {
        let n = g.dim();
        let cp = |lambda: f64| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| g[(i, j)] - if i == j { lambda } else { 0.0 }).collect())
                .collect();
            det(&rows)
        };
        // Gershgorin upper bound.
        let hi0 = (0..n)
            .map(|i| (0..n).map(|j| g[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
            + 1.0;
        // Scan downward for the first sign change, then bisect.
        let steps = 20000;
        let mut hi = hi0;
        let sign_hi = cp(hi).signum();
        let mut lo = hi0;
        for k in 1..=steps {
            lo = hi0 * (1.0 - k as f64 / steps as f64);
            if cp(lo).signum() != sign_hi {
                break;
            }
            hi = lo;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cp(mid).signum() == sign_hi {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn identity_power_is_identity() {
        for n in 1..=MAX_DIM {
            let p = Mat::identity(n).spd_power(0.37).unwrap();
            assert!(p.max_abs_diff(&Mat::identity(n)) < 1e-14);
        }
    }

    #[test]
    fn diagonal_square_root() {
        let r = Mat::diag(&[4.0, 9.0]).spd_power(0.5).unwrap();
        assert!(r.max_abs_diff(&Mat::diag(&[2.0, 3.0])) < 1e-14);
    }

    #[test]
    fn random_square_root_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=MAX_DIM {
            for _ in 0..20 {
                let m = random_spd(&mut rng, n);
                let r = m.spd_power(0.5).unwrap();
                let back = r.matmul(&r);
                assert!(back.max_abs_diff(&m) <= 1e-10 * m.max_abs(), "n={n}");
            }
        }
    }

    #[test]
    fn power_eigenvalues_relative_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_spd(&mut rng, 4);
        let eig = m.sym_eigen();
        let p = m.spd_power(-0.75).unwrap().sym_eigen();
        let mut want: Vec<f64> = eig.values[..4].iter().map(|l| l.powf(-0.75)).collect();
        let mut got: Vec<f64> = p.values[..4].to_vec();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (w, g) in want.iter().zip(&got) {
            assert!(((w - g) / w).abs() < 1e-10);
        }
    }

    #[test]
    fn non_spd_is_rejected() {
        assert!(Mat::diag(&[1.0, -1.0]).spd_power(0.5).is_err());
        let mut m = Mat::identity(2);
        m[(0, 1)] = 0.5;
        assert!(m.spd_power(0.5).is_err());
    }

    #[test]
    fn spectral_norm_cases() {
        assert!((Mat::diag(&[2.0, 5.0]).spectral_norm() - 5.0).abs() < 1e-14);
        let u = [1.0, -2.0, 0.5];
        let m = Mat::outer(&u, &u);
        assert!((m.spectral_norm() - norm2(&u).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_matches_characteristic_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in 1..=3 {
            for _ in 0..25 {
                let mut m = Mat::zeros(n);
                for i in 0..n {
                    for j in 0..n {
                        m[(i, j)] = rng.gen_range(-2.0..2.0);
                    }
                }
                let g = m.transpose().matmul(&m);
                let oracle = char_poly_max_root(&g).sqrt();
                let got = m.spectral_norm();
                assert!((got - oracle).abs() <= 1e-10 * oracle.max(1.0), "{got} vs {oracle}");
            }
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(&mut rng, 6);
        let e = m.sym_eigen();
        let vtv = e.vectors.transpose().matmul(&e.vectors);
        assert!(vtv.max_abs_diff(&Mat::identity(6)) < 1e-12);
        assert!(e.map(|l| l).max_abs_diff(&m) < 1e-12 * m.max_abs());
    }
}
