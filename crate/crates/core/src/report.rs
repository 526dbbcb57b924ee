//! Tabular experiment reports and the run manifest.
//!
//! Each builder runs one experiment and returns an [`ExperimentReport`] whose
//! rows are ready for CSV emission. Float cells format with the shortest
//! representation that parses back to the same bits.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::amortization::{
    correlation_test, mc_gap_regression, mc_scalar_gap, pathology_table, power_law_fit,
    scalar_gap_formula, RegressionGapConfig, ScalarGapInputs,
};
use crate::error::{param, Result};
use crate::experiments::{
    contamination_slopes, evaluate_bounds, AlignmentResult, ContaminationResult,
};
use crate::kernel::{KernelSpec, NoiseModel};
use crate::lnp_analytic::{AggregationMode, BoundConstants};
use crate::mercer::{effective_dimension, MercerBasis, DEFAULT_DEPTH};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Context pairs of the d = 1 pathology table.
pub const PATHOLOGY_PAIRS: [(f64, f64); 5] =
    [(0.10, 0.90), (0.20, 0.80), (0.30, 0.70), (0.40, 0.60), (0.45, 0.55)];

/// One CSV cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
    Missing,
}

impl Value {
    /// Inverse of `Display`.
    pub fn parse(s: &str) -> Value {
        if s.is_empty() {
            return Value::Missing;
        }
        if let Ok(i) = s.parse::<i64>() {
            return Value::Int(i);
        }
        match s.parse::<f64>() {
            Ok(f) => Value::Float(f),
            Err(_) => Value::Text(s.to_string()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(i) => Some(i as f64),
            Value::Float(f) => Some(f),
            _ => None,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Missing, Value::Missing) => true,
            _ => false,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            // Debug keeps a decimal point or exponent, so floats never parse
            // back as integers.
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Text(s) => f.write_str(s),
            Value::Missing => Ok(()),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Float(x)
    }
}

impl From<usize> for Value {
    fn from(x: usize) -> Self {
        Value::Int(x as i64)
    }
}

impl From<u64> for Value {
    fn from(x: u64) -> Self {
        // Seeds above i64::MAX keep their bits.
        Value::Int(x as i64)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<Option<f64>> for Value {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Value::Missing, Value::Float)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub command: String,
    pub params: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    /// Derived quantities over all rows (fitted slopes, depths).
    pub summary: BTreeMap<String, Value>,
    pub seed: u64,
    pub artifact_version: String,
    pub wall_time_s: f64,
}

impl ExperimentReport {
    pub fn new(command: &str, seed: u64, columns: &[&str]) -> Self {
        ExperimentReport {
            command: command.to_string(),
            params: BTreeMap::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: BTreeMap::new(),
            seed,
            artifact_version: ARTIFACT_VERSION.to_string(),
            wall_time_s: 0.0,
        }
    }

    pub fn with_param(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Value>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }

    pub fn column_f64(&self, name: &str) -> Option<Vec<f64>> {
        self.column(name)?.into_iter().map(Value::as_f64).collect()
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub status: Status,
    pub error: Option<String>,
    pub output: Option<String>,
    pub rows: usize,
    pub params: BTreeMap<String, String>,
    pub summary: BTreeMap<String, Value>,
    pub wall_time_s: f64,
}

impl ManifestEntry {
    pub fn ok(report: &ExperimentReport, output: Option<String>) -> Self {
        ManifestEntry {
            command: report.command.clone(),
            status: Status::Ok,
            error: None,
            output,
            rows: report.rows.len(),
            params: report.params.clone(),
            summary: report.summary.clone(),
            wall_time_s: report.wall_time_s,
        }
    }

    pub fn failed(command: &str, error: impl fmt::Display, wall_time_s: f64) -> Self {
        ManifestEntry {
            command: command.to_string(),
            status: Status::Failed,
            error: Some(error.to_string()),
            output: None,
            rows: 0,
            params: BTreeMap::new(),
            summary: BTreeMap::new(),
            wall_time_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub artifact_version: String,
    pub seed: u64,
    pub fast: bool,
    pub commands: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(seed: u64, fast: bool) -> Self {
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            artifact_version: ARTIFACT_VERSION.to_string(),
            seed,
            fast,
            commands: Vec::new(),
        }
    }

    pub fn all_ok(&self) -> bool {
        self.commands.iter().all(|c| c.status == Status::Ok)
    }
}

/// Scalar gap: closed form against Monte Carlo, one row per n.
pub fn scalar_gap_report(
    ns: &[usize],
    lengthscale: f64,
    sigma_d_sq: f64,
    draws: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if ns.is_empty() {
        return param("n list is empty");
    }
    let mut rep = ExperimentReport::new(
        "scalar-gap",
        seed,
        &["n", "alpha", "mc_gap", "formula", "ratio", "std_err", "seed"],
    )
    .with_param("n", join(ns))
    .with_param("lengthscale", lengthscale)
    .with_param("sigma_d_sq", sigma_d_sq)
    .with_param("draws", draws);
    for &n in ns {
        let inp = ScalarGapInputs::cosine(n, lengthscale, sigma_d_sq)?;
        let mc = mc_scalar_gap(&inp, draws, seed)?;
        let formula = scalar_gap_formula(&inp);
        rep.push(vec![
            n.into(),
            inp.alpha().into(),
            mc.value.into(),
            formula.into(),
            (mc.value / formula).into(),
            mc.std_err.into(),
            seed.into(),
        ]);
    }
    Ok(rep)
}

/// Variance of v̂ against 1/(2n) and its correlation with ē.
pub fn correlation_report(ns: &[usize], draws: usize, seed: u64) -> Result<ExperimentReport> {
    if ns.is_empty() {
        return param("n list is empty");
    }
    let mut rep = ExperimentReport::new(
        "correlation",
        seed,
        &["n", "var_vhat", "var_vhat_pred", "corr", "draws", "seed"],
    )
    .with_param("n", join(ns))
    .with_param("draws", draws);
    for &n in ns {
        let r = correlation_test(n, draws, seed)?;
        rep.push(vec![
            n.into(),
            r.var_vhat.into(),
            (0.5 / n as f64).into(),
            r.corr.into(),
            draws.into(),
            seed.into(),
        ]);
    }
    Ok(rep)
}

/// The d = 1 symmetric-pair pathology. Deterministic; the seed is recorded only.
pub fn pathology_report(lengthscale: f64, sigma_d_sq: f64, seed: u64) -> Result<ExperimentReport> {
    let rows = pathology_table(&PATHOLOGY_PAIRS, lengthscale, sigma_d_sq)?;
    let mut rep = ExperimentReport::new(
        "pathology",
        seed,
        &[
            "x1",
            "x2",
            "phi_bar",
            "sigma_p_inv",
            "sigma_p",
            "kl_avg_forward",
            "kl_avg_reverse",
            "kl_extreme_avg",
            "seed",
        ],
    )
    .with_param("lengthscale", lengthscale)
    .with_param("sigma_d_sq", sigma_d_sq);
    let ext: Vec<f64> = rows.iter().filter_map(|r| r.kl_extreme_avg).collect();
    for r in &rows {
        rep.push(vec![
            r.x1.into(),
            r.x2.into(),
            r.mean_rep.into(),
            r.sigma_p_inv.into(),
            r.sigma_p.into(),
            r.kl_avg_forward.into(),
            r.kl_avg_reverse.into(),
            r.kl_extreme_avg.into(),
            seed.into(),
        ]);
    }
    rep.summary.insert(
        "kl_extreme_mean".into(),
        (ext.iter().sum::<f64>() / ext.len() as f64).into(),
    );
    Ok(rep)
}

fn gap_pair(d: usize, n: usize, contexts: usize, seed: u64) -> Result<[crate::amortization::RegressionGap; 2]> {
    let mean = mc_gap_regression(&RegressionGapConfig::new(d, n, AggregationMode::Mean, contexts, seed))?;
    let so = mc_gap_regression(&RegressionGapConfig::new(
        d,
        n,
        AggregationMode::SecondOrder,
        contexts,
        seed,
    ))?;
    Ok([mean, so])
}

/// Mean against second-order aggregation at fixed d over n, with power-law slopes.
pub fn agg_compare_report(
    ns: &[usize],
    d: usize,
    contexts: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if ns.is_empty() {
        return param("n list is empty");
    }
    let mut rep = ExperimentReport::new(
        "agg-compare",
        seed,
        &[
            "n", "d", "gap_mean", "std_err_mean", "gap_so", "std_err_so", "ratio", "rank_mean",
            "rank_so", "seed",
        ],
    )
    .with_param("n", join(ns))
    .with_param("d", d)
    .with_param("contexts", contexts);
    let mut gm = Vec::new();
    let mut gs = Vec::new();
    for &n in ns {
        let [m, s] = gap_pair(d, n, contexts, seed)?;
        gm.push(m.gap.value);
        gs.push(s.gap.value);
        rep.push(vec![
            n.into(),
            d.into(),
            m.gap.value.into(),
            m.gap.std_err.into(),
            s.gap.value.into(),
            s.gap.std_err.into(),
            (m.gap.value / s.gap.value).into(),
            m.rank.into(),
            s.rank.into(),
            seed.into(),
        ]);
    }
    if ns.len() >= 3 {
        let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        rep.summary.insert("slope_mean".into(), power_law_fit(&x, &gm)?.into());
        rep.summary.insert("slope_so".into(), power_law_fit(&x, &gs)?.into());
    }
    Ok(rep)
}

/// Gap against representation dimension at fixed n.
pub fn dim_scan_report(
    ds: &[usize],
    n: usize,
    lengthscale: f64,
    contexts: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if ds.is_empty() {
        return param("d list is empty");
    }
    let basis = MercerBasis::cosine(lengthscale, DEFAULT_DEPTH)?;
    let mut rep = ExperimentReport::new(
        "dim-scan",
        seed,
        &[
            "d", "rep_dim_mean", "posterior_dof", "d_eff", "gap_mean", "std_err_mean", "gap_so",
            "std_err_so", "seed",
        ],
    )
    .with_param("d", join(ds))
    .with_param("n", n)
    .with_param("lengthscale", lengthscale)
    .with_param("contexts", contexts);
    for &d in ds {
        let mut cfg = RegressionGapConfig::new(d, n, AggregationMode::Mean, contexts, seed);
        cfg.lengthscale = lengthscale;
        let m = mc_gap_regression(&cfg)?;
        cfg.mode = AggregationMode::SecondOrder;
        let s = mc_gap_regression(&cfg)?;
        rep.push(vec![
            d.into(),
            d.into(),
            (d * (d + 1) / 2).into(),
            effective_dimension(&basis.eigenvalues()[..d])?.into(),
            m.gap.value.into(),
            m.gap.std_err.into(),
            s.gap.value.into(),
            s.gap.std_err.into(),
            seed.into(),
        ]);
    }
    Ok(rep)
}

/// Computable bound terms, one row per n.
#[allow(clippy::too_many_arguments)]
pub fn bounds_report(
    constants: &BoundConstants,
    kernel: &KernelSpec,
    noise: NoiseModel,
    d: usize,
    ns: &[usize],
    x_star: f64,
    seed: u64,
) -> Result<ExperimentReport> {
    if ns.is_empty() {
        return param("n list is empty");
    }
    let basis = MercerBasis::cosine(kernel.lengthscale, DEFAULT_DEPTH)?;
    let mut rep = ExperimentReport::new(
        "bounds",
        seed,
        &[
            "n",
            "d",
            "x_star",
            "lambda",
            "label_signal",
            "label_noise",
            "sigma_l_sq",
            "prefactor",
            "tau_d",
            "c_s_per_c",
            "bottleneck_rate",
            "amortization_rate",
            "determined_part",
            "seed",
        ],
    )
    .with_param("d", d)
    .with_param("n", join(ns))
    .with_param("x_star", x_star)
    .with_param("lengthscale", kernel.lengthscale)
    .with_param("sigma_eps_sq", noise.sigma_eps_sq);
    for &n in ns {
        let b = evaluate_bounds(constants, kernel, noise, &basis, d, n, x_star)?;
        rep.push(vec![
            n.into(),
            d.into(),
            x_star.into(),
            b.lambda.into(),
            b.label_signal.into(),
            b.label_noise.into(),
            b.sigma_l_sq.into(),
            b.prefactor.into(),
            b.bottleneck_tail.into(),
            b.c_s_per_c.into(),
            b.bottleneck_rate.into(),
            b.amortization_rate.into(),
            b.determined_part.into(),
            seed.into(),
        ]);
        if rep.summary.is_empty() {
            for (k, v) in &b.symbolic {
                rep.summary.insert(k.clone(), Value::Text(v.clone()));
            }
        }
    }
    Ok(rep)
}

pub fn contamination_report(results: &[ContaminationResult], seed: u64) -> Result<ExperimentReport> {
    if results.is_empty() {
        return param("no contamination results");
    }
    let mut rep = ExperimentReport::new(
        "contamination",
        seed,
        &[
            "n",
            "var_full",
            "var_full_se",
            "var_noise",
            "var_noise_se",
            "floor_noise_ratio",
            "resamples",
            "location_sets",
            "seed",
        ],
    );
    for r in results {
        rep.push(vec![
            r.n.into(),
            r.var_full.into(),
            r.var_full_se.into(),
            r.var_noise.into(),
            r.var_noise_se.into(),
            r.floor_noise_ratio.into(),
            r.resamples.into(),
            r.location_sets.into(),
            seed.into(),
        ]);
    }
    if let Ok((sn, sf)) = contamination_slopes(results) {
        rep.summary.insert("slope_noise".into(), sn.into());
        rep.summary.insert("slope_full".into(), sf.into());
    }
    Ok(rep)
}

pub fn alignment_report(result: &AlignmentResult, seed: u64) -> ExperimentReport {
    let mut rep = ExperimentReport::new(
        "alignment",
        seed,
        &["j", "lambda_j", "r2_j", "cos_theta_min", "seed"],
    )
    .with_param("lengthscale", result.lengthscale)
    .with_param("mode", format!("{:?}", result.mode));
    for (a, &(_, c)) in result.per_axis.iter().zip(&result.min_cosines) {
        rep.push(vec![a.j.into(), a.lambda.into(), a.r2.into(), c.into(), seed.into()]);
    }
    rep.summary.insert("feature_rank".into(), result.feature_rank.into());
    rep.summary.insert("aligned_depth".into(), result.aligned_depth.into());
    rep.summary.insert("spectral_depth".into(), result.spectral_depth.into());
    rep
}
