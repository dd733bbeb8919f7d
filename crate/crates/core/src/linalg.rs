//! Dense direct solvers. Matrices here are small (flow blocks are `D x D`,
//! kernel matrices a few thousand rows at most), so LU with partial pivoting
//! is used for solves and `nalgebra` for the symmetric eigen/SVD routines.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// LU factorization `P A = L U` with partial pivoting.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(shape_err("Lu::factor", format!("{}x{} is not square", n, a.cols())));
        }
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Singular(format!("zero pivot in column {k} of {n}x{n} matrix")));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn det(&self) -> f64 {
        (0..self.n).fold(self.sign, |d, i| d * self.lu[i * self.n + i])
    }

    /// Solves `A x = b`.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T w = b, L^T v = w, x = P^T v.
        let mut w = b.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for j in 0..i {
                s -= self.lu[j * n + i] * w[j];
            }
            w[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = w[i];
            for j in i + 1..n {
                s -= self.lu[j * n + i] * w[j];
            }
            w[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = w[i];
        }
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &Tensor) -> Result<Tensor> {
        self.solve_columns(b, false)
    }

    /// Solves `A^T X = B` column by column.
    pub fn solve_transpose_matrix(&self, b: &Tensor) -> Result<Tensor> {
        self.solve_columns(b, true)
    }

    fn solve_columns(&self, b: &Tensor, transpose: bool) -> Result<Tensor> {
        if b.rows() != self.n {
            return Err(shape_err(
                "Lu::solve",
                format!("{}x{} system with rhs {}x{}", self.n, self.n, b.rows(), b.cols()),
            ));
        }
        let cols = b.cols();
        let mut out = Tensor::zeros(self.n, cols);
        for c in 0..cols {
            let col = b.column(c);
            let x = if transpose {
                self.solve_transpose_vec(&col)
            } else {
                self.solve_vec(&col)
            };
            for (r, v) in x.into_iter().enumerate() {
                out.set(r, c, v);
            }
        }
        Ok(out)
    }
}

/// Solves a square system `A x = b` in one call.
pub fn solve(a: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    Ok(Lu::factor(a)?.solve_vec(b))
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            // Two passes of modified Gram-Schmidt keep orthogonality near machine precision.
            for _ in 0..2 {
                for q in &cols {
                    let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
        if ok {
            let mut t = Tensor::zeros(n, n);
            for (j, q) in cols.iter().enumerate() {
                for (i, &x) in q.iter().enumerate() {
                    t.set(i, j, x);
                }
            }
            return t;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix: `(eigenvalues, eigenvectors)`
/// with eigenvectors stored as the columns of the returned matrix.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(shape_err("symmetric_eigen", format!("{}x{} is not square", n, a.cols())));
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.data());
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut vecs = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            vecs.set(i, j, eig.eigenvectors[(i, j)]);
        }
    }
    Ok((eig.eigenvalues.iter().copied().collect(), vecs))
}

/// Singular values of an arbitrary matrix, in no particular order.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Vec::new();
    }
    let m = nalgebra::DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    m.singular_values().iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = Tensor::matrix(n, n, data).unwrap();
        for i in 0..n {
            let v = a.get(i, i) + n as f64;
            a.set(i, i, v);
        }
        a
    }

    #[test]
    fn solve_residual_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 5, 20] {
            let a = random_matrix(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = solve(&a, &b).unwrap();
            let ax = a.matmul(&Tensor::column_vector(x)).unwrap();
            let bmax = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let res = ax.data().iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(res < 1e-8 * bmax, "n={n} residual {res}");
        }
    }

    #[test]
    fn transpose_solve_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(6, &mut rng);
        let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
        let lu = Lu::factor(&a).unwrap();
        let x1 = lu.solve_transpose_vec(&b);
        let x2 = solve(&a.transpose(), &b).unwrap();
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_is_reported() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let lu = Lu::factor(&a);
        // exact cancellation leaves a zero pivot
        assert!(lu.is_err() || lu.unwrap().det().abs() < 1e-12);
    }

    #[test]
    fn orthogonal_has_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 3, 4, 8] {
            let q = random_orthogonal(n, &mut rng);
            let det = Lu::factor(&q).unwrap().det();
            assert!((det.abs() - 1.0).abs() < 1e-10);
            let qtq = q.transpose().matmul(&q).unwrap();
            let eye = Tensor::identity(n);
            let err = qtq.zip_map(&eye, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn eigen_reconstructs() {
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (mut vals, _) = symmetric_eigen(&a).unwrap();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
    }
}
