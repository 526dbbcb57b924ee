//! Label-contamination and Mercer-alignment experiments on a trained LNP,
//! and the evaluator for the computable terms of the KL bounds.

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::amortization::power_law_fit;
use crate::error::{param, Error, Result};
use crate::gp::{variance_bounds, GpSampler};
use crate::kernel::{Covariance, KernelSpec, NoiseModel};
use crate::lnp_analytic::BoundConstants;
use crate::mercer::{bottleneck_rate, effective_dimension, tail_sum, MercerBasis, Nystrom};
use crate::nn::LnpModel;
use crate::par::{derive_seed, map_indexed, mean_var, rng_for};

const KEY_LOCATIONS: u64 = 11;
const KEY_FULL: u64 = 12;
const KEY_F0: u64 = 13;
const KEY_NOISE: u64 = 14;
const KEY_Z: u64 = 15;
const KEY_MARGINAL: u64 = 16;

/// Largest n used for the early-range slope fits.
pub const EARLY_N_MAX: usize = 100;
/// Relative singular-value cutoff for the encoder feature rank.
pub const FEATURE_RANK_TOL: f64 = 1e-10;

/// A model whose predictive variance can be queried for a labelled context.
pub trait PredictiveModel: Sync {
    fn predictive_variance(
        &self,
        xs: &[f64],
        ys: &[f64],
        x_star: f64,
        z_samples: usize,
        seed: u64,
    ) -> Result<f64>;

    /// Whether the model carries training provenance.
    fn is_trained(&self) -> bool;
}

impl PredictiveModel for LnpModel {
    fn predictive_variance(
        &self,
        xs: &[f64],
        ys: &[f64],
        x_star: f64,
        z_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        self.predictive_variance_mc(xs, ys, x_star, z_samples, seed)
    }

    fn is_trained(&self) -> bool {
        LnpModel::is_trained(self)
    }
}

/// A model exposing per-point features h(x, y), one column per point.
pub trait FeatureEncoder: Sync {
    fn features(&self, xs: &[f64], ys: &[f64]) -> DMatrix<f64>;
    fn is_trained(&self) -> bool;
}

impl FeatureEncoder for LnpModel {
    fn features(&self, xs: &[f64], ys: &[f64]) -> DMatrix<f64> {
        self.encode_points(xs, ys)
    }

    fn is_trained(&self) -> bool {
        LnpModel::is_trained(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationConfig {
    pub n: usize,
    pub resamples: usize,
    pub location_sets: usize,
    pub x_star: f64,
    pub z_samples: usize,
    pub seed: u64,
}

impl ContaminationConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        ContaminationConfig {
            n,
            resamples: 400,
            location_sets: 30,
            x_star: 0.5,
            z_samples: 64,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationResult {
    pub n: usize,
    /// Full protocol: labels resample f and ε.
    pub var_full: f64,
    /// Noise-only protocol: f fixed per location set, ε resampled.
    pub var_noise: f64,
    pub floor_noise_ratio: f64,
    /// Standard errors of the two means over location sets.
    pub var_full_se: f64,
    pub var_noise_se: f64,
    pub resamples: usize,
    pub location_sets: usize,
    /// One hash per location set; both protocols produced the same list.
    pub location_hashes: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    Full,
    NoiseOnly,
}

fn hash_locations(xs: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for x in xs {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

fn locations(cfg: &ContaminationConfig, set: usize) -> Vec<f64> {
    let mut rng = rng_for(cfg.seed, &[KEY_LOCATIONS, cfg.n as u64, set as u64]);
    (0..cfg.n).map(|_| rng.random::<f64>()).collect()
}

/// Variance across resamples of the predictive variance, per location set.
fn run_protocol<M: PredictiveModel + ?Sized>(
    model: &M,
    kernel: &KernelSpec,
    noise: NoiseModel,
    cfg: &ContaminationConfig,
    protocol: Protocol,
) -> Result<Vec<(f64, u64)>> {
    let sd = noise.sigma_eps_sq.sqrt();
    let n = cfg.n as u64;
    let per_set: Vec<Result<(f64, u64)>> = map_indexed(cfg.location_sets, |s| {
        let xs = locations(cfg, s);
        let sampler = GpSampler::new(kernel, &xs)?;
        let f0 = sampler.sample(&mut rng_for(cfg.seed, &[KEY_F0, n, s as u64]));
        let mut values = Vec::with_capacity(cfg.resamples);
        for r in 0..cfg.resamples {
            let key = [n, s as u64, r as u64];
            let (f, mut rng) = match protocol {
                Protocol::Full => {
                    let mut rng = rng_for(cfg.seed, &[KEY_FULL, key[0], key[1], key[2]]);
                    (sampler.sample(&mut rng), rng)
                }
                Protocol::NoiseOnly => (
                    f0.clone(),
                    rng_for(cfg.seed, &[KEY_NOISE, key[0], key[1], key[2]]),
                ),
            };
            let ys: Vec<f64> = f
                .iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + sd * e
                })
                .collect();
            let tag = protocol as u64;
            let z_seed = derive_seed(cfg.seed, &[KEY_Z, tag, key[0], key[1], key[2]]);
            values.push(model.predictive_variance(&xs, &ys, cfg.x_star, cfg.z_samples, z_seed)?);
        }
        Ok((mean_var(&values).1, hash_locations(&xs)))
    });
    per_set.into_iter().collect()
}

/// Variance of the model's predictive variance across label resamples at
/// fixed locations, under the Full and Noise-only protocols, averaged over
/// independent location sets shared by both protocols.
pub fn contamination_experiment<M: PredictiveModel + ?Sized>(
    model: &M,
    kernel: &KernelSpec,
    noise: NoiseModel,
    cfg: &ContaminationConfig,
) -> Result<ContaminationResult> {
    if !model.is_trained() {
        return Err(Error::Model(
            "untrained model: the checkpoint carries no training metadata".into(),
        ));
    }
    if cfg.resamples < 2 {
        return param("variance across resamples needs R >= 2");
    }
    if cfg.n < 2 || cfg.location_sets == 0 {
        return param("need n >= 2 and at least one location set");
    }
    let full = run_protocol(model, kernel, noise, cfg, Protocol::Full)?;
    let noisy = run_protocol(model, kernel, noise, cfg, Protocol::NoiseOnly)?;
    let hashes: Vec<u64> = full.iter().map(|p| p.1).collect();
    if noisy.iter().map(|p| p.1).ne(hashes.iter().copied()) {
        return Err(Error::Numerical(
            "protocols saw different location sets".into(),
        ));
    }
    let vf: Vec<f64> = full.iter().map(|p| p.0).collect();
    let vn: Vec<f64> = noisy.iter().map(|p| p.0).collect();
    let k = vf.len() as f64;
    let (mf, sf) = mean_var(&vf);
    let (mn, sn) = mean_var(&vn);
    let se = |v: f64| if v.is_finite() { (v / k).sqrt() } else { f64::NAN };
    Ok(ContaminationResult {
        n: cfg.n,
        var_full: mf,
        var_noise: mn,
        floor_noise_ratio: mf / mn,
        var_full_se: se(sf),
        var_noise_se: se(sn),
        resamples: cfg.resamples,
        location_sets: cfg.location_sets,
        location_hashes: hashes,
    })
}

/// Power-law slopes (noise-only, full) over the rows with n ≤ 100.
pub fn contamination_slopes(results: &[ContaminationResult]) -> Result<(f64, f64)> {
    let early: Vec<_> = results.iter().filter(|r| r.n <= EARLY_N_MAX).collect();
    let ns: Vec<f64> = early.iter().map(|r| r.n as f64).collect();
    let noise: Vec<f64> = early.iter().map(|r| r.var_noise).collect();
    let full: Vec<f64> = early.iter().map(|r| r.var_full).collect();
    Ok((power_law_fit(&ns, &noise)?, power_law_fit(&ns, &full)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderMode {
    /// h(x, 0).
    YZero,
    /// h(x, y) averaged over joint GP draws of y on the grid (plus noise).
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub grid_n: usize,
    pub j: usize,
    pub mode: EncoderMode,
    pub gp_samples: usize,
    pub seed: u64,
}

impl AlignmentConfig {
    pub fn new(mode: EncoderMode, seed: u64) -> Self {
        AlignmentConfig {
            grid_n: 2000,
            j: 16,
            mode,
            gp_samples: 200,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRecovery {
    pub j: usize,
    pub lambda: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub lengthscale: f64,
    pub mode: EncoderMode,
    pub feature_count: usize,
    pub feature_rank: usize,
    pub per_axis: Vec<AxisRecovery>,
    /// (d, cos θ_min) for d = 1..=J.
    pub min_cosines: Vec<(usize, f64)>,
    /// Largest j with R²_j > 0.9 (0 if none).
    pub aligned_depth: usize,
    /// Largest j with λ_j > σ_ε²/10 (0 if none).
    pub spectral_depth: usize,
}

/// Orthonormal basis (columns) of the column space of `a`, truncated to its
/// numerical rank via column-pivoted QR.
pub fn orthonormal_basis(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let smax = a.singular_values().max();
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let k = r.nrows().min(r.ncols());
    let rank = (0..k).filter(|&i| r[(i, i)].abs() > rel_tol * smax).count();
    let q = qr.q();
    (q.columns(0, rank).into_owned(), rank)
}

/// Per-axis R² of the Nyström eigenfunctions in the encoder feature subspace
/// and the minimum principal-angle cosine for each leading Mercer subspace.
pub fn alignment_experiment<E: FeatureEncoder + ?Sized>(
    encoder: &E,
    kernel: &KernelSpec,
    noise: NoiseModel,
    cfg: &AlignmentConfig,
) -> Result<AlignmentResult> {
    if !encoder.is_trained() {
        return Err(Error::Model(
            "untrained model: the checkpoint carries no training metadata".into(),
        ));
    }
    if cfg.j == 0 || cfg.grid_n < 10 * cfg.j {
        return param(format!(
            "grid of {} points cannot resolve {} eigenfunctions (need >= 10 per eigenfunction)",
            cfg.grid_n, cfg.j
        ));
    }
    let ny = Nystrom::decompose(kernel, cfg.grid_n)?;
    let grid = ny.grid.clone();
    let n = grid.len();
    let feats = match cfg.mode {
        EncoderMode::YZero => encoder.features(&grid, &vec![0.0; n]),
        EncoderMode::Marginal => marginal_features(encoder, kernel, noise, &grid, cfg)?,
    };
    let scale = 1.0 / (n as f64).sqrt();
    let a = feats.transpose() * scale;
    let (q, rank) = orthonormal_basis(&a, FEATURE_RANK_TOL);
    let u = ny.eigenfunctions.columns(0, cfg.j) * scale;
    let proj = q.transpose() * &u;

    let per_axis: Vec<AxisRecovery> = (0..cfg.j)
        .map(|c| AxisRecovery {
            j: c + 1,
            lambda: ny.eigenvalues[c],
            r2: (proj.column(c).norm_squared() / u.column(c).norm_squared()).clamp(0.0, 1.0),
        })
        .collect();
    let min_cosines = (1..=cfg.j)
        .map(|d| {
            let s = proj.columns(0, d).into_owned().singular_values();
            let c = if rank == 0 { 0.0 } else { s.min().clamp(0.0, 1.0) };
            (d, if rank < d { 0.0 } else { c })
        })
        .collect();
    let aligned_depth = per_axis.iter().filter(|a| a.r2 > 0.9).map(|a| a.j).max().unwrap_or(0);
    let spectral_depth = per_axis
        .iter()
        .filter(|a| a.lambda > noise.sigma_eps_sq / 10.0)
        .map(|a| a.j)
        .max()
        .unwrap_or(0);
    Ok(AlignmentResult {
        lengthscale: kernel.lengthscale,
        mode: cfg.mode,
        feature_count: feats.nrows(),
        feature_rank: rank,
        per_axis,
        min_cosines,
        aligned_depth,
        spectral_depth,
    })
}

fn marginal_features<E: FeatureEncoder + ?Sized>(
    encoder: &E,
    kernel: &KernelSpec,
    noise: NoiseModel,
    grid: &[f64],
    cfg: &AlignmentConfig,
) -> Result<DMatrix<f64>> {
    if cfg.gp_samples == 0 {
        return param("marginal mode needs at least one GP sample");
    }
    let sampler = GpSampler::new(kernel, grid)?;
    let sd = noise.sigma_eps_sq.sqrt();
    let parts: Vec<DMatrix<f64>> = map_indexed(cfg.gp_samples, |s| {
        let mut rng = rng_for(cfg.seed, &[KEY_MARGINAL, s as u64]);
        let ys: Vec<f64> = sampler
            .sample(&mut rng)
            .into_iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + sd * e
            })
            .collect();
        encoder.features(grid, &ys)
    });
    let mut acc = DMatrix::zeros(parts[0].nrows(), parts[0].ncols());
    for p in &parts {
        acc += p;
    }
    Ok(acc / cfg.gp_samples as f64)
}

/// Computable terms of the label-contamination and combined KL bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub d: usize,
    pub x_star: f64,
    /// Λ = L_Σ B_w² B_ψ.
    pub lambda: f64,
    /// Λ² κ_k.
    pub label_signal: f64,
    /// Λ² σ_ε² / n.
    pub label_noise: f64,
    /// σ_ℓ² of the variance bounds.
    pub sigma_l_sq: f64,
    /// 3 / (2 σ_ℓ⁴).
    pub prefactor: f64,
    /// τ_d(x*) = Σ_{j>d} λ_j e_j(x*)².
    pub bottleneck_tail: f64,
    /// κ_k / σ_ε⁴; the bottleneck constant is an unspecified multiple of this.
    pub c_s_per_c: f64,
    /// Constant-free bottleneck rate for the kernel family.
    pub bottleneck_rate: f64,
    /// d_eff / n, the rate of the mean-aggregation amortization term.
    pub amortization_rate: f64,
    /// prefactor · (label_signal + label_noise): the fully determined part.
    pub determined_part: f64,
    /// Terms without closed form, as (name, description).
    pub symbolic: Vec<(String, String)>,
}

pub fn evaluate_bounds(
    constants: &BoundConstants,
    kernel: &KernelSpec,
    noise: NoiseModel,
    basis: &MercerBasis,
    d: usize,
    n: usize,
    x_star: f64,
) -> Result<BoundReport> {
    if n == 0 {
        return param("n must be >= 1");
    }
    if !(noise.sigma_eps_sq > 0.0) {
        return param("the combined bound needs a positive noise variance");
    }
    let lam = constants.lambda();
    let kappa = kernel.signal_variance();
    let s2 = noise.sigma_eps_sq;
    let vb = variance_bounds(kernel, noise);
    let label_signal = lam * lam * kappa;
    let label_noise = lam * lam * s2 / n as f64;
    let prefactor = 1.5 / (vb.lower * vb.lower);
    // Eigenvalues that underflow to zero carry no weight in d_eff.
    let head: Vec<f64> = basis.eigenvalues()[..d.min(basis.depth())]
        .iter()
        .copied()
        .filter(|&l| l > 0.0)
        .collect();
    let d_eff = if head.is_empty() { 0.0 } else { effective_dimension(&head)? };
    Ok(BoundReport {
        n,
        d,
        x_star,
        lambda: lam,
        label_signal,
        label_noise,
        sigma_l_sq: vb.lower,
        prefactor,
        bottleneck_tail: tail_sum(basis, d, x_star)?,
        c_s_per_c: kappa / (s2 * s2),
        bottleneck_rate: bottleneck_rate(kernel, d),
        amortization_rate: d_eff / n as f64,
        determined_part: prefactor * (label_signal + label_noise),
        symbolic: vec![
            ("C_S".into(), "C * kappa_k / sigma_eps^4, C unspecified".into()),
            ("R_d".into(), "O(d^2/n) + R_d^info, no closed form".into()),
            ("A(d,n)".into(), "estimated by the regression gap".into()),
        ],
    })
}

/// Encoder that returns fixed basis functions of x, ignoring y; useful as
/// a reference in alignment checks.
pub struct BasisEncoder<'b> {
    pub basis: &'b MercerBasis,
    pub count: usize,
}

impl FeatureEncoder for BasisEncoder<'_> {
    fn features(&self, xs: &[f64], _ys: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.count, xs.len(), |j, c| self.basis.eigenfunction(j + 1, xs[c]))
    }

    fn is_trained(&self) -> bool {
        true
    }
}

/// Model whose predictive variance ignores the labels.
pub struct LocationOnlyModel<F> {
    pub variance: F,
}

impl<F> PredictiveModel for LocationOnlyModel<F>
where
    F: Fn(&[f64], f64) -> f64 + Sync,
{
    fn predictive_variance(&self, xs: &[f64], _ys: &[f64], x_star: f64, _z: usize, _seed: u64) -> Result<f64> {
        Ok((self.variance)(xs, x_star))
    }

    fn is_trained(&self) -> bool {
        true
    }
}
