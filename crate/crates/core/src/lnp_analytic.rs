//! The analytical latent neural process: a Mercer (or affine-in-y) encoder,
//! mean or second-order aggregation, a linear-Gaussian decoder and the
//! resulting closed-form latent posterior and marginal predictive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::gp::GaussianPredictive;
use crate::linalg::spd_inverse;
use crate::mercer::MercerBasis;

/// Maps a context pair (x, y) to a d-dimensional encoding.
pub trait Encoder {
    fn dim(&self) -> usize;
    fn encode(&self, x: f64, y: f64) -> DVector<f64>;
}

/// φ(x) = (√λ_1 e_1(x), …, √λ_d e_d(x)); ignores the label.
#[derive(Debug, Clone, Copy)]
pub struct MercerEncoder<'b> {
    pub basis: &'b MercerBasis,
    pub d: usize,
}

impl<'b> MercerEncoder<'b> {
    pub fn new(basis: &'b MercerBasis, d: usize) -> Result<Self> {
        if d == 0 || d > basis.depth() {
            return param(format!("encoder dimension {d} outside 1..={}", basis.depth()));
        }
        Ok(MercerEncoder { basis, d })
    }
}

impl Encoder for MercerEncoder<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn encode(&self, x: f64, _y: f64) -> DVector<f64> {
        self.basis.features(self.d, x)
    }
}

/// h(x, y) = φ(x) + ψ(x) y with declared norm bounds B_φ, B_ψ.
pub struct AffineEncoder<F, G> {
    pub phi: F,
    pub psi: G,
    pub dim: usize,
    pub b_phi: f64,
    pub b_psi: f64,
}

impl<F, G> AffineEncoder<F, G>
where
    F: Fn(f64) -> DVector<f64>,
    G: Fn(f64) -> DVector<f64>,
{
    /// Checks ‖φ‖ ≤ B_φ and ‖ψ‖ ≤ B_ψ on an `n`-point grid.
    pub fn check_bounds(&self, n: usize) -> Result<()> {
        for g in 0..n {
            let x = (g as f64 + 0.5) / n as f64;
            let (p, s) = ((self.phi)(x).norm(), (self.psi)(x).norm());
            if p > self.b_phi || s > self.b_psi {
                return param(format!(
                    "encoder bound violated at x = {x}: |phi| = {p}, |psi| = {s}"
                ));
            }
        }
        Ok(())
    }

    /// δ_y = (1/n) Σ ψ(x_i) y_i, the label-dependent part of the mean representation.
    pub fn label_shift(&self, xs: &[f64], ys: &[f64]) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for (&x, &y) in xs.iter().zip(ys) {
            acc += (self.psi)(x) * y;
        }
        acc / xs.len() as f64
    }

    /// φ̄_X = (1/n) Σ φ(x_i).
    pub fn location_mean(&self, xs: &[f64]) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for &x in xs {
            acc += (self.phi)(x);
        }
        acc / xs.len() as f64
    }
}

impl<F, G> Encoder for AffineEncoder<F, G>
where
    F: Fn(f64) -> DVector<f64>,
    G: Fn(f64) -> DVector<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, x: f64, y: f64) -> DVector<f64> {
        (self.phi)(x) + (self.psi)(x) * y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationMode {
    Mean,
    SecondOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Mean(DVector<f64>),
    SecondOrder(DMatrix<f64>),
}

impl Representation {
    /// Feature vector for regression: the mean vector, or the upper triangle
    /// (row-major, diagonal included) of the second-order matrix.
    pub fn features(&self) -> Vec<f64> {
        match self {
            Representation::Mean(v) => v.iter().copied().collect(),
            Representation::SecondOrder(m) => {
                let d = m.nrows();
                let mut out = Vec::with_capacity(d * (d + 1) / 2);
                for i in 0..d {
                    for j in i..d {
                        out.push(m[(i, j)]);
                    }
                }
                out
            }
        }
    }
}

/// Mean: (1/n) Σ h_i. SecondOrder: (1/n) Σ h_i h_iᵀ.
pub fn aggregate(encodings: &[DVector<f64>], mode: AggregationMode) -> Result<Representation> {
    let Some(first) = encodings.first() else {
        return param("cannot aggregate an empty context");
    };
    let n = encodings.len() as f64;
    let d = first.len();
    Ok(match mode {
        AggregationMode::Mean => {
            let mut acc = DVector::zeros(d);
            for h in encodings {
                acc += h;
            }
            Representation::Mean(acc / n)
        }
        AggregationMode::SecondOrder => {
            let mut acc = DMatrix::zeros(d, d);
            for h in encodings {
                acc.ger(1.0, h, h, 1.0);
            }
            Representation::SecondOrder(acc / n)
        }
    })
}

/// Encodes every context pair and aggregates.
pub fn represent<E: Encoder + ?Sized>(
    encoder: &E,
    xs: &[f64],
    ys: &[f64],
    mode: AggregationMode,
) -> Result<Representation> {
    let hs: Vec<_> = xs.iter().zip(ys).map(|(&x, &y)| encoder.encode(x, y)).collect();
    aggregate(&hs, mode)
}

/// p(y* | x*, z) = N(w(x*)ᵀ z + b(x*), σ_d²).
pub trait LinearDecoder {
    fn dim(&self) -> usize;
    fn weights(&self, x: f64) -> DVector<f64>;
    fn bias(&self, _x: f64) -> f64 {
        0.0
    }
    fn noise_variance(&self) -> f64;
}

/// w = φ (first `d` Mercer features), b = 0.
#[derive(Debug, Clone, Copy)]
pub struct MercerDecoder<'b> {
    pub basis: &'b MercerBasis,
    pub d: usize,
    pub sigma_d_sq: f64,
}

impl<'b> MercerDecoder<'b> {
    pub fn new(basis: &'b MercerBasis, d: usize, sigma_d_sq: f64) -> Result<Self> {
        if d == 0 || d > basis.depth() {
            return param(format!("decoder dimension {d} outside 1..={}", basis.depth()));
        }
        if !(sigma_d_sq > 0.0) {
            return param(format!("decoder variance must be positive, got {sigma_d_sq}"));
        }
        Ok(MercerDecoder {
            basis,
            d,
            sigma_d_sq,
        })
    }
}

impl LinearDecoder for MercerDecoder<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn weights(&self, x: f64) -> DVector<f64> {
        self.basis.features(self.d, x)
    }

    fn noise_variance(&self) -> f64 {
        self.sigma_d_sq
    }
}

/// A linear decoder from arbitrary weight and bias functions.
pub struct FnDecoder<W, B> {
    pub w: W,
    pub b: B,
    pub dim: usize,
    pub sigma_d_sq: f64,
}

impl<W, B> LinearDecoder for FnDecoder<W, B>
where
    W: Fn(f64) -> DVector<f64>,
    B: Fn(f64) -> f64,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn weights(&self, x: f64) -> DVector<f64> {
        (self.w)(x)
    }

    fn bias(&self, x: f64) -> f64 {
        (self.b)(x)
    }

    fn noise_variance(&self) -> f64 {
        self.sigma_d_sq
    }
}

/// Gaussian latent posterior N(μ_p, Σ_p) with its precision kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub precision: DMatrix<f64>,
}

impl LatentGaussian {
    pub fn prior(d: usize) -> Self {
        LatentGaussian {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
            precision: DMatrix::identity(d, d),
        }
    }

    fn from_precision(precision: DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        let cov = spd_inverse(&precision)?;
        Ok(LatentGaussian {
            mean,
            cov,
            precision,
        })
    }
}

/// Σ_p⁻¹ = I + σ_d⁻² Σ_i w(x_i) w(x_i)ᵀ under a N(0, I) prior. With labels,
/// μ_p = Σ_p σ_d⁻² Σ_i w(x_i)(y_i - b(x_i)); without, μ_p = 0.
pub fn latent_posterior<D: LinearDecoder + ?Sized>(
    decoder: &D,
    xs: &[f64],
    ys: Option<&[f64]>,
) -> Result<LatentGaussian> {
    let d = decoder.dim();
    if let Some(ys) = ys {
        if ys.len() != xs.len() {
            return param(format!("{} locations but {} labels", xs.len(), ys.len()));
        }
    }
    let inv_s2 = 1.0 / decoder.noise_variance();
    let mut precision = DMatrix::identity(d, d);
    let mut rhs = DVector::zeros(d);
    for (i, &x) in xs.iter().enumerate() {
        let w = decoder.weights(x);
        precision.ger(inv_s2, &w, &w, 1.0);
        if let Some(ys) = ys {
            rhs.axpy(inv_s2 * (ys[i] - decoder.bias(x)), &w, 1.0);
        }
    }
    let mut post = LatentGaussian::from_precision(precision, DVector::zeros(d))?;
    if ys.is_some() {
        post.mean = &post.cov * rhs;
    }
    Ok(post)
}

/// Rebuilds Σ_p from a second-order representation alone (w = φ):
/// Σ_p⁻¹ = I + (n/σ_d²) S with S = (1/n) Σ φφᵀ.
pub fn posterior_from_second_order(
    second_order: &DMatrix<f64>,
    n: usize,
    sigma_d_sq: f64,
) -> Result<LatentGaussian> {
    let d = second_order.nrows();
    let precision = DMatrix::identity(d, d) + second_order * (n as f64 / sigma_d_sq);
    LatentGaussian::from_precision(precision, DVector::zeros(d))
}

/// Covariance estimator that knows only E[V̂] = I:
/// (I + (n/σ_d²) Λ_d²)⁻¹, i.e. (1 + α)⁻¹ in the scalar case.
pub fn optimal_covariance_estimator(
    d: usize,
    n: usize,
    eigenvalues: &[f64],
    sigma_d_sq: f64,
) -> Result<DMatrix<f64>> {
    if eigenvalues.len() < d {
        return param(format!("need {d} eigenvalues, got {}", eigenvalues.len()));
    }
    if !(sigma_d_sq > 0.0) {
        return param("decoder variance must be positive");
    }
    Ok(DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0 / (1.0 + n as f64 * eigenvalues[i] / sigma_d_sq)
        } else {
            0.0
        }
    }))
}

/// μ = w(x*)ᵀ μ_z + b(x*), σ² = w(x*)ᵀ Σ_z w(x*) + σ_d².
pub fn marginal_predictive<D: LinearDecoder + ?Sized>(
    decoder: &D,
    latent: &LatentGaussian,
    x_star: f64,
) -> GaussianPredictive {
    let w = decoder.weights(x_star);
    GaussianPredictive {
        mean: w.dot(&latent.mean) + decoder.bias(x_star),
        variance: (&latent.cov * &w).dot(&w) + decoder.noise_variance(),
    }
}

/// Architectural constants of the label-contamination and combined bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub l_mu: f64,
    pub l_sigma: f64,
    pub b_w: f64,
    pub b_phi: f64,
    pub b_psi: f64,
}

impl BoundConstants {
    pub fn new(l_mu: f64, l_sigma: f64, b_w: f64, b_phi: f64, b_psi: f64) -> Result<Self> {
        let c = BoundConstants {
            l_mu,
            l_sigma,
            b_w,
            b_phi,
            b_psi,
        };
        if [l_mu, l_sigma, b_w, b_phi, b_psi].iter().any(|v| !(*v > 0.0)) {
            return param(format!("bound constants must be positive: {c:?}"));
        }
        Ok(c)
    }

    /// Λ = L_Σ B_w² B_ψ.
    pub fn lambda(&self) -> f64 {
        self.l_sigma * self.b_w * self.b_w * self.b_psi
    }
}
