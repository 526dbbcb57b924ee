//! Amortization-gap formulas and Monte Carlo estimators.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::gp::zero_mean_kl_with_precision;
use crate::kernel::cosine_eigenfunction;
use crate::linalg::{eigen_floor, symmetrize};
use crate::lnp_analytic::{
    latent_posterior, represent, AggregationMode, MercerDecoder, MercerEncoder,
};
use crate::mercer::{MercerBasis, DEFAULT_DEPTH};
use crate::par::{map_chunks, map_indexed, mean_var, pairwise_sum, rng_for};

/// Eigenvalue floor applied to fitted covariances before the KL.
pub const PD_FLOOR: f64 = 1e-8;

pub const MIN_SCALAR_DRAWS: usize = 1000;
pub const MIN_CORRELATION_DRAWS: usize = 10_000;

/// Monte Carlo estimate of a mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub value: f64,
    pub std_err: f64,
    pub draws: usize,
    pub seed: u64,
}

impl GapEstimate {
    fn from_samples(samples: &[f64], seed: u64) -> Self {
        let (mean, var) = mean_var(samples);
        GapEstimate {
            value: mean,
            std_err: (var / samples.len() as f64).sqrt(),
            draws: samples.len(),
            seed,
        }
    }
}

/// d = 1 setting of the scalar gap: α = nλ_1/σ_d².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarGapInputs {
    pub n: usize,
    pub lambda_1: f64,
    pub sigma_d_sq: f64,
}

impl ScalarGapInputs {
    /// λ_1 = 0 is accepted and gives α = 0.
    pub fn new(n: usize, lambda_1: f64, sigma_d_sq: f64) -> Result<Self> {
        if n == 0 {
            return param("context size n must be >= 1");
        }
        if !(lambda_1 >= 0.0 && lambda_1.is_finite()) {
            return param(format!("lambda_1 must be >= 0, got {lambda_1}"));
        }
        if !(sigma_d_sq > 0.0) {
            return param(format!("decoder variance must be positive, got {sigma_d_sq}"));
        }
        Ok(ScalarGapInputs {
            n,
            lambda_1,
            sigma_d_sq,
        })
    }

    /// Inputs for the cosine SE basis at lengthscale ℓ.
    pub fn cosine(n: usize, lengthscale: f64, sigma_d_sq: f64) -> Result<Self> {
        Self::new(n, crate::kernel::cosine_eigenvalue(lengthscale, 1)?, sigma_d_sq)
    }

    pub fn alpha(&self) -> f64 {
        self.n as f64 * self.lambda_1 / self.sigma_d_sq
    }
}

/// α² / (8n(1+α)²).
pub fn scalar_gap_formula(inp: &ScalarGapInputs) -> f64 {
    let a = inp.alpha();
    a * a / (8.0 * inp.n as f64 * (1.0 + a) * (1.0 + a))
}

/// Mean over X ~ U[0,1]ⁿ of ½(r - 1 - ln r), r = (1 + α v̂)/(1 + α).
pub fn mc_scalar_gap(inp: &ScalarGapInputs, draws: usize, seed: u64) -> Result<GapEstimate> {
    if draws < MIN_SCALAR_DRAWS {
        return param(format!("need at least {MIN_SCALAR_DRAWS} draws, got {draws}"));
    }
    let a = inp.alpha();
    let n = inp.n;
    let per_chunk = map_chunks(draws, |c, len| {
        let mut rng = rng_for(seed, &[c as u64]);
        (0..len)
            .map(|_| {
                let v_hat = (0..n)
                    .map(|_| cosine_eigenfunction(1, rng.random::<f64>()).powi(2))
                    .sum::<f64>()
                    / n as f64;
                // r - 1, written so that r ≈ 1 keeps full precision.
                let t = a * (v_hat - 1.0) / (1.0 + a);
                0.5 * (t - t.ln_1p())
            })
            .collect::<Vec<_>>()
    });
    Ok(GapEstimate::from_samples(&per_chunk.concat(), seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub n: usize,
    pub var_vhat: f64,
    pub corr: f64,
    pub draws: usize,
    pub seed: u64,
}

/// Sample Var[v̂] and corr(v̂, ē) with v̂ = mean e_1², ē = mean e_1.
pub fn correlation_test(n: usize, draws: usize, seed: u64) -> Result<CorrelationResult> {
    if n == 0 {
        return param("context size n must be >= 1");
    }
    if draws < MIN_CORRELATION_DRAWS {
        return param(format!("need at least {MIN_CORRELATION_DRAWS} draws, got {draws}"));
    }
    let per_chunk = map_chunks(draws, |c, len| {
        let mut rng = rng_for(seed, &[c as u64]);
        (0..len)
            .map(|_| {
                let (mut s1, mut s2) = (0.0, 0.0);
                for _ in 0..n {
                    let e = cosine_eigenfunction(1, rng.random::<f64>());
                    s1 += e;
                    s2 += e * e;
                }
                (s2 / n as f64, s1 / n as f64)
            })
            .collect::<Vec<_>>()
    });
    let pairs = per_chunk.concat();
    let v: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let e: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (mv, var_v) = mean_var(&v);
    let (me, var_e) = mean_var(&e);
    let cross: Vec<f64> = pairs.iter().map(|(a, b)| (a - mv) * (b - me)).collect();
    let cov = pairwise_sum(&cross) / (draws - 1) as f64;
    Ok(CorrelationResult {
        n,
        var_vhat: var_v,
        corr: cov / (var_v * var_e).sqrt(),
        draws,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathologyRow {
    pub x1: f64,
    pub x2: f64,
    pub mean_rep: f64,
    pub sigma_p_inv: f64,
    pub sigma_p: f64,
    /// KL(N(0, Σ̄) ‖ N(0, Σ_p)), Σ̄ the mean of Σ_p over all rows.
    pub kl_avg_forward: f64,
    /// KL(N(0, Σ_p) ‖ N(0, Σ̄)).
    pub kl_avg_reverse: f64,
    /// KL(N(0, Σ̄_ext) ‖ N(0, Σ_p)) with Σ̄_ext the mean over the first and
    /// last rows only; set on those two rows.
    pub kl_extreme_avg: Option<f64>,
}

/// d = 1 contexts (a, 1 - a): identical mean representation, different Σ_p.
pub fn pathology_table(
    pairs: &[(f64, f64)],
    lengthscale: f64,
    sigma_d_sq: f64,
) -> Result<Vec<PathologyRow>> {
    if pairs.is_empty() {
        return param("no context pairs given");
    }
    for &(a, b) in pairs {
        if (a + b - 1.0).abs() > 1e-12 {
            return param(format!("pair ({a}, {b}) is not symmetric about 0.5"));
        }
    }
    let basis = MercerBasis::cosine(lengthscale, DEFAULT_DEPTH)?;
    let enc = MercerEncoder::new(&basis, 1)?;
    let dec = MercerDecoder::new(&basis, 1, sigma_d_sq)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let rep = represent(&enc, &[a, b], &[0.0, 0.0], AggregationMode::Mean)?;
        let post = latent_posterior(&dec, &[a, b], None)?;
        rows.push(PathologyRow {
            x1: a,
            x2: b,
            mean_rep: rep.features()[0],
            sigma_p_inv: post.precision[(0, 0)],
            sigma_p: post.cov[(0, 0)],
            kl_avg_forward: 0.0,
            kl_avg_reverse: 0.0,
            kl_extreme_avg: None,
        });
    }
    let kl = |p: f64, q: f64| {
        let t = (p - q) / q;
        0.5 * (t - t.ln_1p())
    };
    let avg = rows.iter().map(|r| r.sigma_p).sum::<f64>() / rows.len() as f64;
    let ext = 0.5 * (rows[0].sigma_p + rows[rows.len() - 1].sigma_p);
    let last = rows.len() - 1;
    for (i, r) in rows.iter_mut().enumerate() {
        r.kl_avg_forward = kl(avg, r.sigma_p);
        r.kl_avg_reverse = kl(r.sigma_p, avg);
        if i == 0 || i == last {
            r.kl_extreme_avg = Some(kl(ext, r.sigma_p));
        }
    }
    Ok(rows)
}

/// Settings for the regression-surrogate gap estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionGapConfig {
    pub d: usize,
    pub n: usize,
    pub mode: AggregationMode,
    pub contexts: usize,
    pub lengthscale: f64,
    pub sigma_d_sq: f64,
    pub seed: u64,
}

impl RegressionGapConfig {
    /// Cosine SE basis at ℓ = 0.3 with σ_d² = 1.
    pub fn new(d: usize, n: usize, mode: AggregationMode, contexts: usize, seed: u64) -> Self {
        RegressionGapConfig {
            d,
            n,
            mode,
            contexts,
            lengthscale: 0.3,
            sigma_d_sq: 1.0,
            seed,
        }
    }

    pub fn feature_count(&self) -> usize {
        match self.mode {
            AggregationMode::Mean => self.d,
            AggregationMode::SecondOrder => self.d * (self.d + 1) / 2,
        }
    }
}

struct ContextDraw {
    features: Vec<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
}

/// Regression gap with the numerical rank of its design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionGap {
    pub gap: GapEstimate,
    /// Representation features, excluding the intercept.
    pub features: usize,
    /// Numerical rank of [1 | features].
    pub rank: usize,
}

/// Relative singular-value cutoff for the least-squares solve.
pub const RANK_TOL: f64 = 1e-10;

/// Fits Σ_p entries linearly on the representation (plus intercept) over
/// random contexts, then averages KL(N(0, Σ̂) ‖ N(0, Σ_p)) over the same
/// contexts. Context locations depend only on (seed, context index), so both
/// aggregation modes see the same contexts for a given seed.
///
/// Second-order features of the cosine basis satisfy exact linear identities
/// (e.g. e_1 e_3 = e_1² + e_2² - 2), so the design can be rank deficient.
/// Fitted values are unique regardless; the solve is minimum-norm on the
/// numerical rank, and only a design with no usable feature is an error.
pub fn mc_gap_regression(cfg: &RegressionGapConfig) -> Result<RegressionGap> {
    let p = cfg.feature_count();
    if cfg.n == 0 || cfg.d == 0 {
        return param("d and n must be >= 1");
    }
    if cfg.contexts < 10 * (p + 1) {
        return param(format!(
            "{} contexts cannot support a regression on {} features (need >= {})",
            cfg.contexts,
            p,
            10 * (p + 1)
        ));
    }
    let basis = MercerBasis::cosine(cfg.lengthscale, DEFAULT_DEPTH)?;
    let enc = MercerEncoder::new(&basis, cfg.d)?;
    let dec = MercerDecoder::new(&basis, cfg.d, cfg.sigma_d_sq)?;

    let draws: Vec<Result<ContextDraw>> = map_indexed(cfg.contexts, |c| {
        let mut rng = rng_for(cfg.seed, &[c as u64]);
        let xs: Vec<f64> = (0..cfg.n).map(|_| rng.random::<f64>()).collect();
        let rep = represent(&enc, &xs, &vec![0.0; cfg.n], cfg.mode)?;
        let post = latent_posterior(&dec, &xs, None)?;
        Ok(ContextDraw {
            features: rep.features(),
            cov: post.cov,
            precision: post.precision,
        })
    });
    let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;

    let m = draws.len();
    let d = cfg.d;
    let design = standardized_design(&draws, p);
    let targets = DMatrix::from_fn(m, d * (d + 1) / 2, |r, k| {
        let (i, j) = upper_index(d, k);
        draws[r].cov[(i, j)]
    });
    let (coef, rank) = least_squares(design.clone(), &targets)?;
    if rank < 2 {
        return Err(Error::Singular(format!(
            "regression design has rank {rank}: none of the {p} features varies across contexts"
        )));
    }
    let fitted = design * coef;

    let kls: Vec<Result<f64>> = map_indexed(m, |r| {
        let mut s = DMatrix::zeros(d, d);
        for k in 0..fitted.ncols() {
            let (i, j) = upper_index(d, k);
            s[(i, j)] = fitted[(r, k)];
            s[(j, i)] = fitted[(r, k)];
        }
        let s = eigen_floor(&symmetrize(&s), PD_FLOOR);
        zero_mean_kl_with_precision(&s, &draws[r].precision)
    });
    let kls = kls.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(RegressionGap {
        gap: GapEstimate::from_samples(&kls, cfg.seed),
        features: p,
        rank,
    })
}

fn upper_index(d: usize, k: usize) -> (usize, usize) {
    let mut k = k;
    for i in 0..d {
        let row = d - i;
        if k < row {
            return (i, i + k);
        }
        k -= row;
    }
    unreachable!("upper-triangle index out of range")
}

/// [1 | standardized features]; a constant feature becomes a zero column.
fn standardized_design(draws: &[ContextDraw], p: usize) -> DMatrix<f64> {
    let m = draws.len();
    let mut design = DMatrix::from_element(m, p + 1, 1.0);
    for f in 0..p {
        let col: Vec<f64> = draws.iter().map(|c| c.features[f]).collect();
        let (mean, var) = mean_var(&col);
        let sd = var.sqrt();
        let scale = if sd > 1e-12 * mean.abs().max(1.0) { 1.0 / sd } else { 0.0 };
        for r in 0..m {
            design[(r, f + 1)] = (col[r] - mean) * scale;
        }
    }
    design
}

/// Minimum-norm least squares on the numerical rank; returns (coefficients, rank).
fn least_squares(design: DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let svd = design.svd(true, true);
    let cutoff = RANK_TOL * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let coef = svd
        .solve(targets, cutoff)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((coef, rank))
}

/// OLS slope of log(gap) on log(n).
pub fn power_law_fit(ns: &[f64], gaps: &[f64]) -> Result<f64> {
    if ns.len() != gaps.len() {
        return param(format!("{} sizes but {} gaps", ns.len(), gaps.len()));
    }
    if ns.len() < 3 {
        return param("power-law fit needs at least 3 points");
    }
    if let Some(g) = gaps.iter().find(|g| !(**g > 0.0)) {
        return param(format!("power-law fit needs positive values, got {g}"));
    }
    if ns.iter().any(|n| !(*n > 0.0)) {
        return param("power-law fit needs positive sizes");
    }
    let lx: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ly: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return param("power-law fit needs at least two distinct sizes");
    }
    Ok(sxy / sxx)
}

/// Mean of 1 + α v̂ over random contexts; the precision is linear in v̂, so
/// this estimates 1 + α without Jensen bias.
pub fn mc_mean_precision(inp: &ScalarGapInputs, draws: usize, seed: u64) -> GapEstimate {
    let a = inp.alpha();
    let n = inp.n;
    let per_chunk = map_chunks(draws, |c, len| {
        let mut rng = rng_for(seed, &[c as u64]);
        (0..len)
            .map(|_| {
                let v = (0..n)
                    .map(|_| cosine_eigenfunction(1, rng.random::<f64>()).powi(2))
                    .sum::<f64>()
                    / n as f64;
                1.0 + a * v
            })
            .collect::<Vec<_>>()
    });
    GapEstimate::from_samples(&per_chunk.concat(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::{with_execution, Execution};
    use approx::assert_relative_eq;

    fn inp(n: usize) -> ScalarGapInputs {
        ScalarGapInputs::cosine(n, 0.3, 1.0).unwrap()
    }

    #[test]
    fn formula_examples() {
        assert_relative_eq!(inp(5).alpha(), 3.21, epsilon = 5e-3);
        assert_relative_eq!(scalar_gap_formula(&inp(5)), 0.01453, max_relative = 5e-4);
        assert_relative_eq!(scalar_gap_formula(&inp(100)), 0.00121, max_relative = 5e-3);
        let g = scalar_gap_formula(&inp(2000));
        assert_relative_eq!(g, 0.0000624, max_relative = 1e-3);
        assert!(g < 1.0 / 16000.0);
        let big = ScalarGapInputs::new(10, 1e9, 1.0).unwrap();
        assert_relative_eq!(scalar_gap_formula(&big), 1.0 / 80.0, max_relative = 1e-8);
    }

    #[test]
    fn zero_alpha_gives_zero_gap() {
        let z = ScalarGapInputs::new(7, 0.0, 1.0).unwrap();
        let g = mc_scalar_gap(&z, 2000, 1).unwrap();
        assert_eq!((g.value, g.std_err), (0.0, 0.0));
        assert!(mc_scalar_gap(&z, 999, 1).is_err());
    }

    #[test]
    fn mc_gap_is_deterministic_across_execution_modes() {
        let a = with_execution(Execution::Sequential, || mc_scalar_gap(&inp(20), 3000, 5).unwrap());
        let b = with_execution(Execution::Parallel, || mc_scalar_gap(&inp(20), 3000, 5).unwrap());
        assert_eq!(a, b);
        let c = mc_scalar_gap(&inp(20), 3000, 6).unwrap();
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn mean_precision_is_one_plus_alpha() {
        let i = inp(10);
        let g = mc_mean_precision(&i, 20_000, 3);
        assert!((g.value - (1.0 + i.alpha())).abs() < 3.0 * g.std_err);
    }

    #[test]
    fn fourth_moment_by_quadrature() {
        let n = 100_000;
        let (mut m2, mut m4) = (0.0, 0.0);
        for g in 0..n {
            let e = cosine_eigenfunction(1, (g as f64 + 0.5) / n as f64);
            m2 += e * e;
            m4 += e.powi(4);
        }
        let (m2, m4) = (m2 / n as f64, m4 / n as f64);
        assert_relative_eq!(m4, 1.5, epsilon = 1e-8);
        assert_relative_eq!(m4 - m2 * m2, 0.5, epsilon = 1e-8);
    }

    #[test]
    fn correlation_small_run() {
        let r = correlation_test(50, 20_000, 11).unwrap();
        assert!((r.var_vhat - 0.01).abs() < 0.001);
        assert!(r.corr.abs() < 0.03);
        assert!(correlation_test(50, 100, 11).is_err());
    }

    #[test]
    fn pathology_examples() {
        let pairs = [(0.10, 0.90), (0.40, 0.60), (0.50, 0.50)];
        let rows = pathology_table(&pairs, 0.3, 1.0).unwrap();
        assert_relative_eq!(rows[0].sigma_p_inv, 3.321, max_relative = 5e-4);
        assert_relative_eq!(rows[0].sigma_p, 0.301, epsilon = 5e-4);
        assert_relative_eq!(rows[1].sigma_p_inv, 1.245, max_relative = 5e-4);
        assert_relative_eq!(rows[1].sigma_p, 0.803, epsilon = 5e-4);
        assert_relative_eq!(rows[2].sigma_p_inv, 1.0, epsilon = 1e-15);
        for r in &rows {
            assert!(r.mean_rep.abs() < 1e-12);
            assert!(r.kl_avg_forward >= 0.0 && r.kl_avg_reverse >= 0.0);
        }
        assert!(rows[1].kl_extreme_avg.is_none());
        assert!(pathology_table(&[(0.1, 0.8)], 0.3, 1.0).is_err());
    }

    #[test]
    fn upper_index_layout() {
        let got: Vec<_> = (0..6).map(|k| upper_index(3, k)).collect();
        assert_eq!(got, vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn regression_gap_rejects_small_samples() {
        let cfg = RegressionGapConfig::new(3, 50, AggregationMode::SecondOrder, 60, 1);
        assert!(mc_gap_regression(&cfg).is_err());
    }

    #[test]
    fn regression_gap_small_run() {
        let mean = RegressionGapConfig::new(2, 50, AggregationMode::Mean, 400, 9);
        let so = RegressionGapConfig {
            mode: AggregationMode::SecondOrder,
            ..mean
        };
        let gm = mc_gap_regression(&mean).unwrap();
        let gs = mc_gap_regression(&so).unwrap();
        assert!(gm.gap.value > gs.gap.value && gs.gap.value >= 0.0);
        assert_eq!((gm.features, gm.rank), (2, 3));
        assert_eq!(gm, mc_gap_regression(&mean).unwrap());
    }

    #[test]
    fn second_order_is_exact_for_d1() {
        // Σ_p = 1/(1 + nλ v̂/σ²) is not linear in v̂, but at d = 1 the only
        // error is that curvature, which is small for large n.
        let cfg = RegressionGapConfig::new(1, 500, AggregationMode::SecondOrder, 500, 2);
        assert!(mc_gap_regression(&cfg).unwrap().gap.value < 1e-4);
    }

    #[test]
    fn cosine_second_order_identity_drops_rank() {
        let cfg = RegressionGapConfig::new(3, 20, AggregationMode::SecondOrder, 300, 4);
        let g = mc_gap_regression(&cfg).unwrap();
        assert_eq!((g.features, g.rank), (6, 6));
        let cfg = RegressionGapConfig::new(1, 1, AggregationMode::Mean, 100, 4);
        assert_eq!(mc_gap_regression(&cfg).unwrap().rank, 2);
    }

    #[test]
    fn power_law_examples() {
        let ns = [10.0, 100.0, 1000.0];
        let gaps: Vec<f64> = ns.iter().map(|n| 1.0 / n).collect();
        assert_relative_eq!(power_law_fit(&ns, &gaps).unwrap(), -1.0, epsilon = 1e-10);
        assert_relative_eq!(power_law_fit(&ns, &[2.0; 3]).unwrap(), 0.0, epsilon = 1e-12);
        assert!(power_law_fit(&ns, &[1.0, 0.0, 1.0]).is_err());
        assert!(power_law_fit(&ns[..2], &gaps[..2]).is_err());
    }
}
