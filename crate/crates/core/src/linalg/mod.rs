//! Dense linear algebra, seeded randomness and spectral routines.

mod matrix;
mod rng;
mod spectral;

pub use matrix::{cosine, dot, norm, Matrix};
pub use rng::{gaussian_matrix, RngStream, StreamLabel};
pub use spectral::{
    covariance, largest_principal_angle, orthonormal_columns, pca, principal_cosines, project_out, subspace_affinity,
    sym_eig, Pca, Spectrum,
};

/// Random unit vector in `R^d`.
pub fn random_unit_vector(rng: &mut RngStream, d: usize) -> Vec<f64> {
    loop {
        let mut v = rng.normal_vec(d);
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Empirical mean of `cos²θ` between `pairs` independent random unit vectors in `R^d`.
pub fn mean_squared_cosine(rng: &mut RngStream, d: usize, pairs: usize) -> f64 {
    let total: f64 = (0..pairs)
        .map(|_| {
            let a = random_unit_vector(rng, d);
            let b = random_unit_vector(rng, d);
            dot(&a, &b).powi(2)
        })
        .sum();
    total / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_directions_are_nearly_orthogonal() {
        let mut rng = RngStream::new(21, StreamLabel::Verification);
        for d in [64, 256, 1024] {
            let m = mean_squared_cosine(&mut rng, d, 1000);
            let d = d as f64;
            assert!(m >= 0.5 / d && m <= 2.0 / d, "d={d}: {m}");
        }
    }
}
