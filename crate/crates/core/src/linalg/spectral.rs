//! Symmetric eigendecomposition, PCA and a few subspace utilities.

use super::{dot, Matrix};
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues in descending order with matching unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl Spectrum {
    pub fn eigenvector(&self, j: usize) -> Vec<f64> {
        self.eigenvectors.column(j)
    }

    /// `V Λ Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for i in 0..scaled.rows() {
            for (x, &l) in scaled.row_mut(i).iter_mut().zip(&self.eigenvalues) {
                *x *= l;
            }
        }
        scaled.matmul_t(v).expect("square factors")
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps visit every `(p, q)` pair with `p < q` in row order and stop once the
/// off-diagonal Frobenius mass falls below `1e-12 · ‖A‖_F`. Eigenvalues are
/// returned in descending order (stable on ties) and every eigenvector is
/// sign-normalized so its largest-magnitude entry is positive.
pub fn sym_eig(a: &Matrix) -> Result<Spectrum> {
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::invalid(format!("sym_eig needs a square matrix, got {n}x{m}")));
    }
    let tol = SYMMETRY_TOL * a.max_abs().max(1.0);
    if !a.is_symmetric(tol) {
        return Err(Error::invalid("sym_eig input is not symmetric"));
    }
    if !a.is_finite() {
        return Err(Error::numerical("sym_eig input has non-finite entries"));
    }

    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.norm();
    let mut converged = false;

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= OFF_DIAGONAL_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > OFF_DIAGONAL_TOL * scale {
        return Err(Error::numerical(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        let lead = col
            .iter()
            .copied()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        eigenvectors.set_column(dst, &col);
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[(i, j)] * a[(i, j)];
            }
        }
    }
    sum.sqrt()
}

/// `A ← JᵀAJ`, `V ← VJ` for the plane rotation in `(p, q)`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let (akp, akq) = (a[(k, p)], a[(k, q)]);
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    // the rotation zeroes (p, q) analytically; pin it to avoid round-off drift
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Sample covariance (`1/(n−1)`) of the rows of `samples`.
pub fn covariance(samples: &Matrix) -> Result<Matrix> {
    let n = samples.rows();
    if n < 2 {
        return Err(Error::invalid(format!("covariance needs at least 2 samples, got {n}")));
    }
    let centered = center_rows(samples);
    let mut cov = centered.t_matmul(&centered)?;
    cov.scale_in_place(1.0 / (n as f64 - 1.0));
    symmetrize(&mut cov);
    Ok(cov)
}

fn center_rows(samples: &Matrix) -> Matrix {
    let means = samples.column_means();
    let mut centered = samples.clone();
    for i in 0..centered.rows() {
        for (x, m) in centered.row_mut(i).iter_mut().zip(&means) {
            *x -= m;
        }
    }
    centered
}

fn symmetrize(m: &mut Matrix) {
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Principal components of row samples.
#[derive(Debug, Clone)]
pub struct Pca {
    /// `d × n_components`, orthonormal columns.
    pub basis: Matrix,
    /// Variance along each basis column, descending.
    pub weights: Vec<f64>,
}

pub fn pca(samples: &Matrix, n_components: usize) -> Result<Pca> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::invalid(format!("pca needs at least 2 samples, got {n}")));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::invalid(format!(
            "pca: {n_components} components requested from {n} samples of dimension {d}"
        )));
    }
    let spectrum = sym_eig(&covariance(samples)?)?;
    Ok(Pca {
        basis: spectrum.eigenvectors.leading_columns(n_components),
        weights: spectrum.eigenvalues[..n_components].to_vec(),
    })
}

/// Orthonormal basis for the column span of `m` (modified Gram-Schmidt, two passes).
/// Columns that are numerically dependent on earlier ones are dropped.
pub fn orthonormal_columns(m: &Matrix) -> Matrix {
    let (d, k) = m.shape();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut col = m.column(j);
        let original = super::norm(&col);
        if original == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let proj = dot(&col, q);
                col.iter_mut().zip(q).for_each(|(c, qi)| *c -= proj * qi);
            }
        }
        let remaining = super::norm(&col);
        if remaining > 1e-10 * original {
            col.iter_mut().for_each(|c| *c /= remaining);
            basis.push(col);
        }
    }
    let mut out = Matrix::zeros(d, basis.len());
    for (j, q) in basis.iter().enumerate() {
        out.set_column(j, q);
    }
    out
}

/// Removes from each row of `rows` its component inside the span of the
/// orthonormal columns of `basis`.
pub fn project_out(rows: &Matrix, basis: &Matrix) -> Result<Matrix> {
    let coeffs = rows.matmul(basis)?;
    let inside = coeffs.matmul_t(basis)?;
    rows.sub(&inside)
}

/// Cosines of the principal angles between the spans of two orthonormal bases, descending.
pub fn principal_cosines(u: &Matrix, w: &Matrix) -> Result<Vec<f64>> {
    let c = u.t_matmul(w)?;
    let gram = if c.rows() <= c.cols() {
        c.matmul_t(&c)?
    } else {
        c.t_matmul(&c)?
    };
    let spectrum = sym_eig(&gram)?;
    Ok(spectrum
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt().min(1.0))
        .collect())
}

/// Largest principal angle (radians) between two orthonormal bases.
pub fn largest_principal_angle(u: &Matrix, w: &Matrix) -> Result<f64> {
    let cosines = principal_cosines(u, w)?;
    Ok(cosines.last().copied().unwrap_or(0.0).acos())
}

/// Mean squared singular value of `uᵀw`; 1 for identical spans, about
/// `max(p, q)/d` for unrelated random ones.
pub fn subspace_affinity(u: &Matrix, w: &Matrix) -> Result<f64> {
    let c = u.t_matmul(w)?;
    let n = c.rows().min(c.cols());
    if n == 0 {
        return Ok(0.0);
    }
    Ok(c.as_slice().iter().map(|x| x * x).sum::<f64>() / n as f64)
}
