//! Exact GP regression on [0, 1]: posterior predictive, prior sampling,
//! Gaussian KL divergences and the prior-based variance bounds.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::kernel::{Covariance, NoiseModel};
use crate::linalg::{cholesky_with_jitter, spd_logdet, JITTER_LADDER};
use crate::par::rng_for;

/// Sampling jitter relative to the signal variance.
pub const SAMPLE_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub locations: Vec<f64>,
    pub labels: Vec<f64>,
    pub noise: NoiseModel,
}

impl ContextSet {
    pub fn new(locations: Vec<f64>, labels: Vec<f64>, noise: NoiseModel) -> Result<Self> {
        if locations.len() != labels.len() {
            return param(format!(
                "{} locations but {} labels",
                locations.len(),
                labels.len()
            ));
        }
        if let Some(x) = locations.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return param(format!("location {x} outside [0, 1]"));
        }
        Ok(ContextSet {
            locations,
            labels,
            noise,
        })
    }

    /// Context with all labels zero.
    pub fn unlabeled(locations: Vec<f64>, noise: NoiseModel) -> Result<Self> {
        let n = locations.len();
        Self::new(locations, vec![0.0; n], noise)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPredictive {
    pub mean: f64,
    pub variance: f64,
}

/// Factorized K + σ_ε² I for a fixed set of locations. The factor does not
/// depend on labels, so the predictive variance never does either.
pub struct GpPosterior<'k, K: Covariance + ?Sized> {
    kernel: &'k K,
    locations: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl<'k, K: Covariance + ?Sized> GpPosterior<'k, K> {
    pub fn fit(kernel: &'k K, ctx: &ContextSet) -> Result<Self> {
        let s2 = ctx.noise.sigma_eps_sq;
        if s2 == 0.0 {
            let mut sorted = ctx.locations.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Singular(
                    "duplicated locations with zero observation noise".into(),
                ));
            }
        }
        let mut m = kernel.gram(&ctx.locations);
        for i in 0..m.nrows() {
            m[(i, i)] += s2;
        }
        let (chol, _) = cholesky_with_jitter(&m, &JITTER_LADDER)?;
        let y = DVector::from_column_slice(&ctx.labels);
        let alpha = chol.solve(&y);
        Ok(GpPosterior {
            kernel,
            locations: ctx.locations.clone(),
            chol,
            alpha,
        })
    }

    pub fn predict(&self, x_star: f64) -> GaussianPredictive {
        let prior = self.kernel.eval(x_star, x_star);
        if self.locations.is_empty() {
            return GaussianPredictive {
                mean: 0.0,
                variance: prior,
            };
        }
        let ks = self.kernel.cross(&self.locations, x_star);
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky factor has a positive diagonal");
        GaussianPredictive {
            mean,
            variance: prior - v.norm_squared(),
        }
    }
}

/// GP predictive N(μ_GP, σ²_GP) at `x_star` given the context.
pub fn gp_posterior<K: Covariance + ?Sized>(
    kernel: &K,
    ctx: &ContextSet,
    x_star: f64,
) -> Result<GaussianPredictive> {
    Ok(GpPosterior::fit(kernel, ctx)?.predict(x_star))
}

/// Draws joint samples f(X) ~ N(0, K(X, X)) from one Cholesky factor.
pub struct GpSampler {
    l: DMatrix<f64>,
}

impl GpSampler {
    pub fn new<K: Covariance + ?Sized>(kernel: &K, xs: &[f64]) -> Result<Self> {
        let mut k = kernel.gram(xs);
        let jitter = SAMPLE_JITTER * kernel.signal_variance();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        // Very smooth kernels on dense inputs can sit below the fixed jitter;
        // escalate only if the first factorization fails.
        let (chol, _) = cholesky_with_jitter(&k, &JITTER_LADDER)?;
        Ok(GpSampler { l: chol.unpack() })
    }

    pub fn len(&self) -> usize {
        self.l.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.l.nrows() == 0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.l.nrows();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.l * z).data.into()
    }

    /// `count` samples as the columns of an n × count matrix.
    pub fn sample_matrix<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> DMatrix<f64> {
        let n = self.l.nrows();
        let z = DMatrix::from_fn(n, count, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.l * z
    }
}

/// One joint GP prior draw at `xs`, reproducible from `seed`.
pub fn sample_gp<K: Covariance + ?Sized>(kernel: &K, xs: &[f64], seed: u64) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return param("sample_gp needs at least one location");
    }
    let mut rng = rng_for(seed, &[]);
    Ok(GpSampler::new(kernel, xs)?.sample(&mut rng))
}

/// KL(p ‖ q) between univariate Gaussians.
///
/// The variance-ratio term r - 1 - ln r is evaluated as t - ln(1 + t) with
/// t = (σ²_p - σ²_q)/σ²_q, which stays accurate when the variances nearly agree.
pub fn gaussian_kl(p: GaussianPredictive, q: GaussianPredictive) -> Result<f64> {
    if !(p.variance > 0.0 && q.variance > 0.0) {
        return param(format!(
            "KL needs positive variances, got {} and {}",
            p.variance, q.variance
        ));
    }
    let t = (p.variance - q.variance) / q.variance;
    let dm = p.mean - q.mean;
    Ok(0.5 * ((t - t.ln_1p()) + dm * dm / q.variance))
}

/// KL(N(0, Σ_a) ‖ N(0, Σ_b)) given Σ_a and the precision Σ_b⁻¹.
pub fn zero_mean_kl_with_precision(cov_a: &DMatrix<f64>, prec_b: &DMatrix<f64>) -> Result<f64> {
    let d = cov_a.nrows() as f64;
    let tr = (prec_b * cov_a).trace();
    let logdet_a = spd_logdet(cov_a)?;
    let logdet_prec_b = spd_logdet(prec_b)?;
    Ok(0.5 * (tr - d - logdet_prec_b - logdet_a))
}

/// KL between multivariate Gaussians N(μ_a, Σ_a) ‖ N(μ_b, Σ_b).
pub fn gaussian_kl_mv(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let chol_b = Cholesky::new(cov_b.clone())
        .ok_or_else(|| Error::Parameter("KL reference covariance not positive definite".into()))?;
    let d = cov_a.nrows() as f64;
    let dm = mean_a - mean_b;
    let tr = chol_b.solve(cov_a).trace();
    let maha = dm.dot(&chol_b.solve(&dm));
    let logdet_b = 2.0 * chol_b.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (tr - d + maha + logdet_b - spd_logdet(cov_a)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceBounds {
    pub lower: f64,
    pub upper: f64,
    /// Set when σ_ε² = 0 and the lower bound collapses to zero.
    pub degenerate: bool,
}

/// σ_ℓ² = σ_ε² κ/(κ + σ_ε²) and σ_u² = κ.
pub fn variance_bounds<K: Covariance + ?Sized>(kernel: &K, noise: NoiseModel) -> VarianceBounds {
    let kappa = kernel.signal_variance();
    let s2 = noise.sigma_eps_sq;
    VarianceBounds {
        lower: s2 * kappa / (kappa + s2),
        upper: kappa,
        degenerate: s2 == 0.0,
    }
}
