//! Covariance kernels for Gaussian-process regression.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which similarity structure a kernel uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    /// Isotropic squared exponential on the full distance.
    Rbf,
    /// Mean of per-coordinate squared exponentials. Any single coordinate
    /// can move the value by at most `sigma_f2 / dim`, which keeps
    /// predictions stable when one feature goes bad.
    Additive,
}

/// A kernel family with its signal variance and squared length scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma_f2: f64,
    pub sigma_l2: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sigma_f2: f64, sigma_l2: f64) -> Result<Self> {
        if !(sigma_f2 > 0.0 && sigma_f2.is_finite() && sigma_l2 > 0.0 && sigma_l2.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "kernel hyperparameters must be positive and finite, got \
                 sigma_f2 = {sigma_f2}, sigma_l2 = {sigma_l2}"
            )));
        }
        Ok(Self {
            family,
            sigma_f2,
            sigma_l2,
        })
    }
}

/// Evaluates the kernel. Both families are symmetric and peak at
/// `sigma_f2` when `x = y`.
pub fn kernel_eval(spec: &KernelSpec, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    assert_eq!(x.len(), y.len(), "kernel arguments must share a dimension");
    let inv2 = 0.5 / spec.sigma_l2;
    match spec.family {
        KernelFamily::Rbf => {
            let d2 = (x - y).norm_squared();
            spec.sigma_f2 * (-d2 * inv2).exp()
        }
        KernelFamily::Additive => {
            let m = x.len() as f64;
            let total: f64 = x
                .iter()
                .zip(y.iter())
                .map(|(a, b)| {
                    let d = a - b;
                    (-d * d * inv2).exp()
                })
                .sum();
            spec.sigma_f2 * total / m
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_vec(dim: usize, rng: &mut ChaCha12Rng) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| rng.random::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn both_families_peak_at_sigma_f2_on_the_diagonal() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for family in [KernelFamily::Rbf, KernelFamily::Additive] {
            let spec = KernelSpec::new(family, 2.3, 0.7).unwrap();
            for _ in 0..20 {
                let x = random_vec(5, &mut rng);
                assert!((kernel_eval(&spec, &x, &x) - 2.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_for_random_pairs() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for family in [KernelFamily::Rbf, KernelFamily::Additive] {
            let spec = KernelSpec::new(family, 1.4, 1.1).unwrap();
            for _ in 0..1000 {
                let x = random_vec(4, &mut rng);
                let y = random_vec(4, &mut rng);
                assert_eq!(kernel_eval(&spec, &x, &y), kernel_eval(&spec, &y, &x));
            }
        }
    }

    #[test]
    fn one_ruined_coordinate_barely_moves_the_averaged_kernel() {
        let spec_add = KernelSpec::new(KernelFamily::Additive, 1.0, 1.0).unwrap();
        let spec_rbf = KernelSpec::new(KernelFamily::Rbf, 1.0, 1.0).unwrap();
        let m = 8;
        let x = DVector::zeros(m);
        let mut y = x.clone();
        y[3] = 1e6;
        let floor = (m as f64 - 1.0) / m as f64;
        assert!(kernel_eval(&spec_add, &x, &y) >= floor - 1e-12);
        assert!(kernel_eval(&spec_rbf, &x, &y) < 1e-12);
    }

    #[test]
    fn gram_matrices_are_positive_semidefinite() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for family in [KernelFamily::Rbf, KernelFamily::Additive] {
            let spec = KernelSpec::new(family, 1.7, 0.9).unwrap();
            let points: Vec<DVector<f64>> = (0..25).map(|_| random_vec(3, &mut rng)).collect();
            let gram = DMatrix::from_fn(25, 25, |i, j| kernel_eval(&spec, &points[i], &points[j]));
            let trace = gram.trace();
            let eigs = gram.symmetric_eigenvalues();
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                min >= -1e-10 * trace,
                "negative eigenvalue {min} for {family:?}"
            );
        }
    }

    #[test]
    fn rejects_non_positive_hyperparameters() {
        assert!(KernelSpec::new(KernelFamily::Rbf, 0.0, 1.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Rbf, 1.0, -2.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Additive, f64::NAN, 1.0).is_err());
    }
}
