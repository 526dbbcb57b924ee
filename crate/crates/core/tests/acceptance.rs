#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Acceptance checks. Each test prints one PASS/FAIL line to stderr
//! (uncaptured) and then asserts on it.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use npgap::amortization::{
    correlation_test, mc_gap_regression, mc_scalar_gap, pathology_table, power_law_fit,
    scalar_gap_formula, RegressionGapConfig, ScalarGapInputs,
};
use npgap::experiments::{
    alignment_experiment, contamination_experiment, contamination_slopes, evaluate_bounds,
    AlignmentConfig, ContaminationConfig, EncoderMode,
};
use npgap::gp::{gaussian_kl, gaussian_kl_mv, GpPosterior};
use npgap::lnp_analytic::{
    latent_posterior, posterior_from_second_order, represent, AffineEncoder, BoundConstants,
    MercerDecoder, MercerEncoder, Representation,
};
use npgap::mercer::{Nystrom, DEFAULT_DEPTH};
use npgap::nn::{gradient_check, train, LnpModel, Task, TrainConfig, LATENT_DIM};
use npgap::par::{derive_seed, rng_for};
use npgap::{AggregationMode, ContextSet, GaussianPredictive, KernelSpec, MercerBasis, NoiseModel};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const MASTER_SEED: u64 = 20261018;

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("{} {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    assert!(ok, "{line}");
}

fn seed(id: u64) -> u64 {
    derive_seed(MASTER_SEED, &[id])
}

/// Rounds to `sig` significant figures.
fn round_sig(x: f64, sig: i32) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let p = sig - 1 - x.abs().log10().floor() as i32;
    let s = 10f64.powi(p);
    (x * s).round() / s
}

/// Whether `x` rounds to a printed decimal with `decimals` places.
fn matches_printed(x: f64, printed: f64, decimals: i32) -> bool {
    (x - printed).abs() <= 0.5 * 10f64.powi(-decimals) * (1.0 + 1e-9)
}

#[test]
fn c01_scalar_gap() {
    // (n, printed formula, printed MC/formula ratio)
    let rows = [
        (5, 0.01453, 1.095),
        (10, 0.00936, 1.058),
        (20, 0.00538, 1.034),
        (50, 0.00235, 1.014),
        (100, 0.00121, 1.008),
        (500, 0.000248, 0.995),
        (2000, 0.0000624, 1.000),
    ];
    let start = std::time::Instant::now();
    let mut ok = true;
    let mut worst_ratio = 0.0f64;
    for (n, formula, ratio) in rows {
        let inp = ScalarGapInputs::cosine(n, 0.3, 1.0).unwrap();
        let f = scalar_gap_formula(&inp);
        let mc = mc_scalar_gap(&inp, 100_000, seed(1)).unwrap();
        let dr = (mc.value / f - ratio).abs();
        worst_ratio = worst_ratio.max(dr);
        ok &= round_sig(f, 3) == round_sig(formula, 3) && dr <= 0.02;
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    verdict(
        1,
        "scalar gap formula (3 s.f.) and MC ratio (±0.02)",
        ok,
        &format!("max |ratio - printed| = {worst_ratio:.4}, {secs:.1} s"),
    );
}

#[test]
fn c02_pathology() {
    // (x1, x2, printed Σ_p⁻¹, printed Σ_p)
    let printed = [
        (0.10, 0.90, 3.321, 0.301),
        (0.20, 0.80, 2.679, 0.373),
        (0.30, 0.70, 1.886, 0.530),
        (0.40, 0.60, 1.245, 0.803),
        (0.45, 0.55, 1.063, 0.941),
    ];
    let pairs: Vec<(f64, f64)> = printed.iter().map(|p| (p.0, p.1)).collect();
    let rows = pathology_table(&pairs, 0.3, 1.0).unwrap();
    let mut ok = true;
    let mut worst_prec = 0.0f64;
    let mut worst_cov = 0.0f64;
    for (r, p) in rows.iter().zip(printed) {
        let rel_prec = (r.sigma_p_inv - p.2).abs() / p.2;
        worst_prec = worst_prec.max(rel_prec);
        worst_cov = worst_cov.max((r.sigma_p - p.3).abs() / p.3);
        // Four printed figures: the relative tolerance applies directly.
        // Three printed figures: the printed digits are the tolerance.
        ok &= rel_prec <= 5e-4 && matches_printed(r.sigma_p, p.3, 3);
        ok &= r.mean_rep.abs() <= 1e-12;
    }
    verdict(
        2,
        "pathology pairs (sigma_p_inv 5e-4 rel, sigma_p to printed digits, phi_bar 1e-12)",
        ok,
        &format!("max rel err sigma_p_inv {worst_prec:.2e}, sigma_p {worst_cov:.2e}"),
    );
}

#[test]
fn c03_correlation() {
    let mut ok = true;
    let mut detail = Vec::new();
    for n in [10, 50, 100, 500, 1000] {
        let r = correlation_test(n, 50_000, seed(3)).unwrap();
        let rel = (r.var_vhat * 2.0 * n as f64 - 1.0).abs();
        ok &= rel <= 0.02 && r.corr.abs() < 0.01;
        detail.push(format!("n={n} dv={rel:.3} r={:+.4}", r.corr));
    }
    verdict(3, "Var[vhat] = 1/(2n) within 2%, |corr| < 0.01", ok, &detail.join(", "));
}

fn gap(d: usize, n: usize, mode: AggregationMode, s: u64) -> npgap::amortization::RegressionGap {
    mc_gap_regression(&RegressionGapConfig::new(d, n, mode, 2000, s)).unwrap()
}

#[test]
fn c04_aggregation_scaling() {
    let printed = [
        (10, 0.0389, 0.0240),
        (50, 0.0082, 0.0016),
        (100, 0.0052, 0.00053),
        (200, 0.0030, 0.00015),
        (500, 0.0014, 0.000028),
    ];
    let mut ok = true;
    let mut cells = Vec::new();
    let (mut gm, mut gs) = (Vec::new(), Vec::new());
    for (n, pm, ps) in printed {
        let m = gap(3, n, AggregationMode::Mean, seed(4)).gap.value;
        let s = gap(3, n, AggregationMode::SecondOrder, seed(4)).gap.value;
        let (em, es) = ((m - pm) / pm, (s - ps) / ps);
        ok &= em.abs() <= 0.25 && es.abs() <= 0.25;
        cells.push(format!("n={n} {em:+.2}/{es:+.2}"));
        gm.push(m);
        gs.push(s);
    }
    let ns: Vec<f64> = printed.iter().map(|p| p.0 as f64).collect();
    let sm = power_law_fit(&ns, &gm).unwrap();
    let ss = power_law_fit(&ns, &gs).unwrap();
    ok &= (-0.95..=-0.65).contains(&sm) && (-1.95..=-1.55).contains(&ss);
    verdict(
        4,
        "mean/second-order gaps within 25%, slopes in range",
        ok,
        &format!("rel err mean/so: {}; slopes {sm:.3} / {ss:.3}", cells.join(", ")),
    );
}

#[test]
fn c05_dimension_scan() {
    let s = seed(5);
    let m = |d| gap(d, 50, AggregationMode::Mean, s).gap;
    let (m1, m3, m8) = (m(1), m(3), m(8));
    let s8 = gap(8, 50, AggregationMode::SecondOrder, s).gap;
    let diff = (m8.value - s8.value).abs();
    let two_sigma = 2.0 * (m8.std_err.powi(2) + s8.std_err.powi(2)).sqrt();
    let ok = m3.value > m1.value && m3.value > m8.value && diff <= two_sigma;
    verdict(
        5,
        "non-monotone mean gap in d, convergence at d=8",
        ok,
        &format!(
            "d1 {:.5} d3 {:.5} d8 {:.5}; |mean-so| at d8 {diff:.2e} vs 2 sigma {two_sigma:.2e}",
            m1.value, m3.value, m8.value
        ),
    );
}

struct Failures {
    label_independence: usize,
    contraction: usize,
    kl_nonneg: usize,
    permutation: usize,
    affine_split: usize,
    second_order: usize,
    precision_floor: usize,
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

#[test]
fn c06_invariants() {
    const CASES: usize = 10_000;
    let mut f = Failures {
        label_independence: 0,
        contraction: 0,
        kl_nonneg: 0,
        permutation: 0,
        affine_split: 0,
        second_order: 0,
        precision_floor: 0,
    };
    for case in 0..CASES {
        let mut rng = rng_for(seed(6), &[case as u64]);
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=5);
        let ell = rng.random_range(0.1..1.0);
        let kappa = rng.random_range(0.5..2.0);
        let s2 = rng.random_range(0.01..1.0);
        let kernel = KernelSpec::squared_exponential(ell, kappa).unwrap();
        let noise = NoiseModel::new(s2).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ys: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let ys2: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        let x_star: f64 = rng.random();

        let fit = |xs: &[f64], ys: &[f64]| {
            let ctx = ContextSet::new(xs.to_vec(), ys.to_vec(), noise).unwrap();
            GpPosterior::fit(&kernel, &ctx).unwrap().predict(x_star)
        };
        let p = fit(&xs, &ys);
        if p.variance != fit(&xs, &ys2).variance {
            f.label_independence += 1;
        }
        let mut more = xs.clone();
        more.push(rng.random());
        let mut more_y = ys.clone();
        more_y.push(0.0);
        if fit(&more, &more_y).variance > p.variance * (1.0 + 1e-12) {
            f.contraction += 1;
        }

        let g = |rng: &mut rand_chacha::ChaCha8Rng| GaussianPredictive {
            mean: normal(rng),
            variance: rng.random_range(1e-3..10.0),
        };
        let (a, b) = (g(&mut rng), g(&mut rng));
        let ma = DVector::from_fn(d, |_, _| normal(&mut rng));
        let mb = DVector::from_fn(d, |_, _| normal(&mut rng));
        let (ca, cb) = (random_spd(&mut rng, d), random_spd(&mut rng, d));
        if !(gaussian_kl(a, b).unwrap() >= 0.0) || !(gaussian_kl_mv(&ma, &ca, &mb, &cb).unwrap() >= -1e-12) {
            f.kl_nonneg += 1;
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let pxs: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
        let pys: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
        let basis = MercerBasis::cosine(ell, DEFAULT_DEPTH).unwrap();
        let enc = MercerEncoder::new(&basis, d).unwrap();
        let dec = MercerDecoder::new(&basis, d, s2).unwrap();
        let pp = fit(&pxs, &pys);
        let mut perm_ok = rel_close(pp.variance, p.variance, 1e-12) && (pp.mean - p.mean).abs() <= 1e-12 * (1.0 + p.mean.abs());
        for mode in [AggregationMode::Mean, AggregationMode::SecondOrder] {
            let r1 = represent(&enc, &xs, &ys, mode).unwrap().features();
            let r2 = represent(&enc, &pxs, &pys, mode).unwrap().features();
            perm_ok &= r1.iter().zip(&r2).all(|(u, v)| (u - v).abs() <= 1e-12);
        }
        let post = latent_posterior(&dec, &xs, Some(&ys)).unwrap();
        let ppost = latent_posterior(&dec, &pxs, Some(&pys)).unwrap();
        perm_ok &= (&post.precision - &ppost.precision).amax() <= 1e-12 * post.precision.amax();
        if !perm_ok {
            f.permutation += 1;
        }

        let fa: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..6.0)).collect();
        let fb: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..6.0)).collect();
        let affine = AffineEncoder {
            phi: |x: f64| DVector::from_fn(d, |j, _| (fa[j] * x + fb[j]).cos()),
            psi: |x: f64| DVector::from_fn(d, |j, _| (fb[j] * x - fa[j]).sin()),
            dim: d,
            b_phi: (d as f64).sqrt(),
            b_psi: (d as f64).sqrt(),
        };
        let Representation::Mean(m) = represent(&affine, &xs, &ys, AggregationMode::Mean).unwrap() else {
            unreachable!()
        };
        let split = affine.location_mean(&xs) + affine.label_shift(&xs, &ys);
        if (&m - &split).amax() > 1e-12 {
            f.affine_split += 1;
        }

        let Representation::SecondOrder(sm) = represent(&enc, &xs, &ys, AggregationMode::SecondOrder).unwrap() else {
            unreachable!()
        };
        let from_s = posterior_from_second_order(&sm, n, s2).unwrap();
        let direct = latent_posterior(&dec, &xs, None).unwrap();
        if (&from_s.cov - &direct.cov).amax() > 1e-10 * direct.cov.amax() {
            f.second_order += 1;
        }

        let shifted = &direct.precision - DMatrix::identity(d, d);
        let min_eig = SymmetricEigen::new(shifted).eigenvalues.min();
        if min_eig < -1e-12 * direct.precision.amax() {
            f.precision_floor += 1;
        }
    }
    let counts = [
        f.label_independence,
        f.contraction,
        f.kl_nonneg,
        f.permutation,
        f.affine_split,
        f.second_order,
        f.precision_floor,
    ];
    verdict(
        6,
        "invariant suite",
        counts.iter().all(|&c| c == 0),
        &format!(
            "{CASES} cases; failures label-indep {} contraction {} kl {} perm {} affine-split {} second-order {} precision>=I {}",
            counts[0], counts[1], counts[2], counts[3], counts[4], counts[5], counts[6]
        ),
    );
}

#[test]
fn c07_gradient_check() {
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut checked = 0;
    for point in 0..20u64 {
        let model = LnpModel::init(derive_seed(seed(7), &[point]));
        let mut rng = rng_for(seed(7), &[point, 1]);
        let xs: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let ys: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
        let task = Task::new(&xs[..3], &ys[..3], &xs[3..], &ys[3..]).unwrap();
        let eps = DVector::from_fn(LATENT_DIM, |_, _| normal(&mut rng));
        let r = gradient_check(&model, &task, &eps, 1e-4).unwrap();
        worst = worst.max(r.max_rel_err);
        failures += r.failures.len();
        checked += r.checked;
    }
    verdict(
        7,
        "backprop vs central differences (rel err <= 1e-4)",
        failures == 0 && checked > 0,
        &format!("20 parameter points, {checked} coordinates, max rel err {worst:.2e}"),
    );
}

fn trained(lengthscale: f64) -> (LnpModel, KernelSpec, NoiseModel) {
    let kernel = KernelSpec::squared_exponential(lengthscale, 1.0).unwrap();
    let noise = NoiseModel::new(0.05).unwrap();
    let cfg = TrainConfig {
        seed: derive_seed(MASTER_SEED, &[8, lengthscale.to_bits()]),
        ..TrainConfig::default()
    };
    let (model, _) = train(&cfg, &kernel, noise).unwrap();
    (model, kernel, noise)
}

#[test]
fn c08_label_contamination() {
    let (model, kernel, noise) = trained(0.2);
    let ns = [5, 10, 20, 50, 100, 200, 500, 1000];
    let rows: Vec<_> = ns
        .iter()
        .map(|&n| contamination_experiment(&model, &kernel, noise, &ContaminationConfig::new(n, seed(8))).unwrap())
        .collect();
    let plateau: Vec<f64> = rows.iter().filter(|r| r.n >= 20).map(|r| r.var_full).collect();
    let spread = plateau.iter().cloned().fold(f64::MIN, f64::max) / plateau.iter().cloned().fold(f64::MAX, f64::min);
    let growth = rows[7].floor_noise_ratio / rows[0].floor_noise_ratio;
    let (sn, sf) = contamination_slopes(&rows).unwrap();
    let ok = spread <= 2.0 && growth >= 5.0 && (-1.1..=-0.5).contains(&sn) && (-0.3..=0.1).contains(&sf);
    verdict(
        8,
        "trained LNP contamination properties",
        ok,
        &format!("var_full max/min {spread:.2}, ratio growth {growth:.1}x, slopes noise {sn:.3} full {sf:.3}"),
    );
}

#[test]
fn c09_mercer_alignment() {
    let noise = NoiseModel::new(0.05).unwrap();
    let mut ok = true;
    let mut lam = Vec::new();
    for (ell, printed) in [(0.1, 0.24), (0.2, 0.44), (0.5, 0.77)] {
        let k = KernelSpec::squared_exponential(ell, 1.0).unwrap();
        let l1 = Nystrom::decompose(&k, 2000).unwrap().eigenvalues[0];
        ok &= round_sig(l1, 1) == round_sig(printed, 1);
        lam.push(format!("{l1:.3}"));
    }
    let (model, kernel, _) = trained(0.5);
    let mut monotone = true;
    let mut y0 = None;
    for mode in [EncoderMode::YZero, EncoderMode::Marginal] {
        let r = alignment_experiment(&model, &kernel, noise, &AlignmentConfig::new(mode, seed(9))).unwrap();
        monotone &= r.min_cosines.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
        monotone &= r.per_axis.iter().all(|a| (0.0..=1.0).contains(&a.r2));
        let _ = writeln!(
            std::io::stderr().lock(),
            "     {mode:?}: aligned depth {} spectral depth {} (diagnostic)",
            r.aligned_depth, r.spectral_depth
        );
        if mode == EncoderMode::YZero {
            y0 = Some(r);
        }
    }
    let y0 = y0.unwrap();
    let head = y0.per_axis[..5].iter().map(|a| a.r2).fold(f64::MAX, f64::min);
    let r9 = y0.per_axis[8].r2;
    ok &= monotone && head > 0.9 && r9 < 0.2;
    verdict(
        9,
        "encoder alignment with Mercer eigenfunctions",
        ok,
        &format!(
            "lambda_1 {}, min R2 j<=5 {head:.3}, R2_9 {r9:.3}, cos non-increasing {monotone}",
            lam.join("/")
        ),
    );
}

#[test]
fn c10_bound_evaluator() {
    let c = BoundConstants::new(0.7, 1.3, 1.1, 2.0, 0.9).unwrap();
    let (ell, kappa, s2, d, x_star) = (0.3, 1.5, 0.05, 3, 0.4);
    let kernel = KernelSpec::squared_exponential(ell, kappa).unwrap();
    let noise = NoiseModel::new(s2).unwrap();
    let basis = MercerBasis::cosine(ell, DEFAULT_DEPTH).unwrap();
    let lambda = 1.3 * 1.1 * 1.1 * 0.9;
    let sigma_l_sq = s2 * kappa / (kappa + s2);
    // Tail by direct summation of the cosine eigenpairs.
    let tail: f64 = (d + 1..=DEFAULT_DEPTH)
        .map(|j| {
            let w = j as f64 * std::f64::consts::PI;
            let lj = (-0.5 * (ell * w).powi(2)).exp();
            let e = 2f64.sqrt() * (w * x_star).cos();
            lj * e * e
        })
        .sum();
    let mut ok = true;
    let mut noise_terms = Vec::new();
    for n in [100usize, 10_000, 1_000_000] {
        let b = evaluate_bounds(&c, &kernel, noise, &basis, d, n, x_star).unwrap();
        ok &= rel_close(b.lambda, lambda, 1e-15);
        ok &= rel_close(b.label_signal, lambda * lambda * kappa, 1e-14);
        ok &= rel_close(b.label_noise, lambda * lambda * s2 / n as f64, 1e-14);
        ok &= rel_close(b.prefactor, 1.5 / (sigma_l_sq * sigma_l_sq), 1e-14);
        ok &= rel_close(b.bottleneck_tail, tail, 1e-10);
        ok &= rel_close(b.c_s_per_c, kappa / (s2 * s2), 1e-14);
        noise_terms.push(b.label_noise * n as f64);
        ok &= b.symbolic.len() == 3;
    }
    ok &= noise_terms.windows(2).all(|w| rel_close(w[0], w[1], 1e-14));
    let far = evaluate_bounds(&c, &kernel, noise, &basis, d, usize::MAX, x_star).unwrap();
    ok &= far.label_noise < 1e-15 && rel_close(far.label_signal, lambda * lambda * kappa, 1e-14);
    verdict(
        10,
        "bound evaluator terms and large-n limits",
        ok,
        &format!("n * label_noise constant at {:.6}, label_signal {:.6}", noise_terms[0], lambda * lambda * kappa),
    );
}
