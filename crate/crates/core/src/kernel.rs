//! Stationary kernels on [0, 1] and the closed-form cosine spectrum used for
//! the squared-exponential experiments.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// Smoothness values with closed-form Matérn kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternNu {
    pub fn from_f64(nu: f64) -> Result<Self> {
        match nu {
            0.5 => Ok(MaternNu::Half),
            1.5 => Ok(MaternNu::ThreeHalves),
            2.5 => Ok(MaternNu::FiveHalves),
            _ => param(format!("Matern nu must be 1/2, 3/2 or 5/2, got {nu}")),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelFamily {
    SquaredExponential,
    Matern(MaternNu),
}

/// Anything usable as a GP prior covariance on [0, 1].
pub trait Covariance: Sync {
    fn eval(&self, x: f64, x2: f64) -> f64;

    /// sup_x k(x, x).
    fn signal_variance(&self) -> f64;

    fn gram(&self, xs: &[f64]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(xs[i], xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn cross(&self, xs: &[f64], x: f64) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|&xi| self.eval(xi, x)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub signal_variance: f64,
}

impl KernelSpec {
    pub fn squared_exponential(lengthscale: f64, signal_variance: f64) -> Result<Self> {
        let spec = KernelSpec {
            family: KernelFamily::SquaredExponential,
            lengthscale,
            signal_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn matern(nu: f64, lengthscale: f64, signal_variance: f64) -> Result<Self> {
        let spec = KernelSpec {
            family: KernelFamily::Matern(MaternNu::from_f64(nu)?),
            lengthscale,
            signal_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return param(format!("lengthscale must be positive, got {}", self.lengthscale));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return param(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            ));
        }
        Ok(())
    }

    /// Checked evaluation of k(x, x2).
    pub fn try_eval(&self, x: f64, x2: f64) -> Result<f64> {
        self.validate()?;
        Ok(self.eval(x, x2))
    }
}

impl Covariance for KernelSpec {
    fn eval(&self, x: f64, x2: f64) -> f64 {
        let r = (x - x2).abs() / self.lengthscale;
        let unit = match self.family {
            KernelFamily::SquaredExponential => (-0.5 * r * r).exp(),
            KernelFamily::Matern(MaternNu::Half) => (-r).exp(),
            KernelFamily::Matern(MaternNu::ThreeHalves) => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
            KernelFamily::Matern(MaternNu::FiveHalves) => {
                let s = 5f64.sqrt() * r;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        };
        self.signal_variance * unit
    }

    fn signal_variance(&self) -> f64 {
        self.signal_variance
    }
}

/// Observation noise variance σ_ε².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_eps_sq: f64,
}

impl NoiseModel {
    pub fn new(sigma_eps_sq: f64) -> Result<Self> {
        if !(sigma_eps_sq >= 0.0 && sigma_eps_sq.is_finite()) {
            return param(format!("noise variance must be >= 0, got {sigma_eps_sq}"));
        }
        Ok(NoiseModel { sigma_eps_sq })
    }

    /// Noise model for operations that need a strictly positive variance.
    pub fn positive(sigma_eps_sq: f64) -> Result<Self> {
        if !(sigma_eps_sq > 0.0) {
            return param(format!("noise variance must be > 0, got {sigma_eps_sq}"));
        }
        Self::new(sigma_eps_sq)
    }
}

/// λ_j = exp(-½(ℓjπ)²) of the cosine convention.
pub fn cosine_eigenvalue(lengthscale: f64, j: usize) -> Result<f64> {
    if j == 0 {
        return param("eigen-index j is 1-based");
    }
    if !(lengthscale > 0.0) {
        return param(format!("lengthscale must be positive, got {lengthscale}"));
    }
    let t = lengthscale * j as f64 * PI;
    Ok((-0.5 * t * t).exp())
}

/// e_j(x) = √2 cos(jπx); unit norm under Uniform[0, 1].
#[inline]
pub fn cosine_eigenfunction(j: usize, x: f64) -> f64 {
    SQRT_2 * (j as f64 * PI * x).cos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineEigenfunction {
    pub j: usize,
}

impl CosineEigenfunction {
    pub fn eval(&self, x: f64) -> f64 {
        cosine_eigenfunction(self.j, x)
    }
}

pub fn cosine_basis_eigenpair(lengthscale: f64, j: usize) -> Result<(f64, CosineEigenfunction)> {
    Ok((cosine_eigenvalue(lengthscale, j)?, CosineEigenfunction { j }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn se(l: f64) -> KernelSpec {
        KernelSpec::squared_exponential(l, 1.0).unwrap()
    }

    #[test]
    fn se_values() {
        assert_eq!(se(0.3).eval(0.7, 0.7), 1.0);
        assert_relative_eq!(se(0.3).eval(0.0, 0.3), (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(se(0.3).eval(0.0, 0.3), 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn matern_diagonal_and_decay() {
        for nu in [0.5, 1.5, 2.5] {
            let k = KernelSpec::matern(nu, 0.2, 1.0).unwrap();
            assert_eq!(k.eval(0.4, 0.4), 1.0);
            assert!(k.eval(0.0, 0.1) > k.eval(0.0, 0.2));
        }
        let k = KernelSpec::matern(0.5, 0.2, 2.0).unwrap();
        assert_relative_eq!(k.eval(0.0, 0.2), 2.0 * (-1f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(KernelSpec::squared_exponential(0.0, 1.0).is_err());
        assert!(KernelSpec::squared_exponential(-1.0, 1.0).is_err());
        assert!(KernelSpec::squared_exponential(0.3, 0.0).is_err());
        assert!(KernelSpec::matern(1.0, 0.3, 1.0).is_err());
        let bad = KernelSpec {
            family: KernelFamily::SquaredExponential,
            lengthscale: -0.1,
            signal_variance: 1.0,
        };
        assert!(bad.try_eval(0.0, 0.1).is_err());
        assert!(NoiseModel::new(-1.0).is_err());
        assert!(NoiseModel::positive(0.0).is_err());
    }

    #[test]
    fn gram_examples() {
        let k = se(0.3);
        let g = k.gram(&[0.5]);
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 1.0);
        let g = k.gram(&[0.0, 0.0]);
        assert!(g.iter().all(|&v| v == 1.0));
        let g = k.gram(&[0.0, 0.3]);
        assert_relative_eq!(g[(0, 1)], 0.60653, epsilon = 1e-5);
        assert_eq!(g[(0, 1)], g[(1, 0)]);
    }

    #[test]
    fn cosine_pairs() {
        assert!(cosine_eigenvalue(0.3, 0).is_err());
        let (l1, e1) = cosine_basis_eigenpair(0.3, 1).unwrap();
        assert_relative_eq!(l1, 0.6414, epsilon = 5e-5);
        assert!(e1.eval(0.5).abs() < 1e-15);
        let s = e1.eval(0.1).powi(2) + e1.eval(0.9).powi(2);
        assert_relative_eq!(s, 3.618, epsilon = 5e-4);
        assert_relative_eq!(1.0 + l1 * s, 3.321, epsilon = 5e-4);
        // n = 5 gives alpha = n * lambda_1 = 3.21
        assert_relative_eq!(5.0 * l1, 3.21, epsilon = 5e-3);
        for j in 1..20 {
            assert!(cosine_eigenvalue(0.3, j + 1).unwrap() < cosine_eigenvalue(0.3, j).unwrap());
        }
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|g| (g as f64 + 0.5) / n as f64).collect()
    }

    #[test]
    fn cosine_basis_orthonormal_and_zero_mean_on_grid() {
        let xs = grid(2000);
        let n = xs.len() as f64;
        for j in 1..=8 {
            let norm: f64 = xs.iter().map(|&x| cosine_eigenfunction(j, x).powi(2)).sum::<f64>() / n;
            assert!((norm - 1.0).abs() < 1e-3);
            let mean: f64 = xs.iter().map(|&x| cosine_eigenfunction(j, x)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-3);
            for k in 1..=8 {
                if k != j {
                    let ip: f64 = xs
                        .iter()
                        .map(|&x| cosine_eigenfunction(j, x) * cosine_eigenfunction(k, x))
                        .sum::<f64>()
                        / n;
                    assert!(ip.abs() < 1e-3, "<e{j}, e{k}> = {ip}");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_kernel() -> impl Strategy<Value = KernelSpec> {
            (0usize..4, 0.05f64..1.0, 0.2f64..3.0).prop_map(|(f, l, s)| match f {
                0 => KernelSpec::squared_exponential(l, s).unwrap(),
                1 => KernelSpec::matern(0.5, l, s).unwrap(),
                2 => KernelSpec::matern(1.5, l, s).unwrap(),
                _ => KernelSpec::matern(2.5, l, s).unwrap(),
            })
        }

        proptest! {
            #[test]
            fn symmetric(k in any_kernel(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
                prop_assert_eq!(k.eval(x, y), k.eval(y, x));
                prop_assert_eq!(k.eval(x, x), k.signal_variance);
            }

            #[test]
            fn gram_is_psd(k in any_kernel(), xs in prop::collection::vec(0.0f64..1.0, 1..=20)) {
                let g = k.gram(&xs);
                let n = xs.len() as f64;
                let min = g.symmetric_eigenvalues().min();
                prop_assert!(min >= -1e-10 * n * k.signal_variance, "min eig {}", min);
                for i in 0..xs.len() {
                    prop_assert_eq!(g[(i, i)], k.signal_variance);
                }
            }
        }
    }
}
