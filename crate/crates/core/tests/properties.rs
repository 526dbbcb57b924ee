use nalgebra::DVector;
use npgap::amortization::{scalar_gap_formula, ScalarGapInputs};
use npgap::gp::{gaussian_kl, variance_bounds, GpPosterior};
use npgap::lnp_analytic::{latent_posterior, represent, MercerDecoder, MercerEncoder};
use npgap::mercer::{head_tail_split, tail_sum, truncated_gp_variance, DEFAULT_DEPTH};
use npgap::{AggregationMode, ContextSet, GaussianPredictive, KernelSpec, MercerBasis, NoiseModel};
use proptest::prelude::*;

fn context() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gp_variance_lies_between_bounds(
        (xs, ys) in context(),
        ell in 0.05f64..2.0,
        kappa in 0.1f64..3.0,
        s2 in 1e-3f64..2.0,
        x_star in 0.0f64..1.0,
    ) {
        let k = KernelSpec::squared_exponential(ell, kappa).unwrap();
        let noise = NoiseModel::new(s2).unwrap();
        let ctx = ContextSet::new(xs, ys, noise).unwrap();
        let p = GpPosterior::fit(&k, &ctx).unwrap().predict(x_star);
        let b = variance_bounds(&k, noise);
        // predict() is the latent variance; the noisy one is bounded below.
        prop_assert!(p.variance >= -1e-12 && p.variance <= b.upper * (1.0 + 1e-12));
        prop_assert!(p.variance + s2 >= b.lower * (1.0 - 1e-12));
    }

    #[test]
    fn kl_is_zero_only_at_equality(m in -5.0f64..5.0, v in 1e-4f64..10.0, dm in -1.0f64..1.0, r in 0.5f64..2.0) {
        let p = GaussianPredictive { mean: m, variance: v };
        prop_assert_eq!(gaussian_kl(p, p).unwrap(), 0.0);
        let q = GaussianPredictive { mean: m + dm, variance: v * r };
        let kl = gaussian_kl(p, q).unwrap();
        prop_assert!(kl >= 0.0);
        if dm != 0.0 || r != 1.0 {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn tail_sums_are_nonincreasing_in_depth(ell in 0.1f64..1.0, x in 0.0f64..1.0) {
        let basis = MercerBasis::cosine(ell, DEFAULT_DEPTH).unwrap();
        let tails: Vec<f64> = (0..DEFAULT_DEPTH).map(|d| tail_sum(&basis, d, x).unwrap()).collect();
        prop_assert!(tails.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(tails.iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn truncated_variance_is_positive(
        (xs, _) in context(),
        ell in 0.2f64..1.0,
        d in 1usize..6,
        s2 in 0.01f64..1.0,
        x_star in 0.0f64..1.0,
    ) {
        let basis = MercerBasis::cosine(ell, DEFAULT_DEPTH).unwrap();
        let split = head_tail_split(&basis, d, &xs, s2).unwrap();
        let v = truncated_gp_variance(&split, &basis, x_star).unwrap();
        prop_assert!(v > 0.0 && v.is_finite());
    }

    #[test]
    fn mean_representation_ignores_labels_for_location_encoders(
        (xs, ys) in context(),
        d in 1usize..6,
    ) {
        let basis = MercerBasis::cosine(0.3, DEFAULT_DEPTH).unwrap();
        let enc = MercerEncoder::new(&basis, d).unwrap();
        let zeros = vec![0.0; xs.len()];
        let a = represent(&enc, &xs, &ys, AggregationMode::Mean).unwrap().features();
        let b = represent(&enc, &xs, &zeros, AggregationMode::Mean).unwrap().features();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn latent_posterior_contracts_with_more_context(
        (xs, _) in context(),
        extra in 0.0f64..1.0,
        d in 1usize..5,
    ) {
        let basis = MercerBasis::cosine(0.3, DEFAULT_DEPTH).unwrap();
        let dec = MercerDecoder::new(&basis, d, 0.5).unwrap();
        let before = latent_posterior(&dec, &xs, None).unwrap();
        let mut more = xs.clone();
        more.push(extra);
        let after = latent_posterior(&dec, &more, None).unwrap();
        let probe = DVector::from_element(d, 1.0);
        prop_assert!((&after.cov * &probe).dot(&probe) <= (&before.cov * &probe).dot(&probe) * (1.0 + 1e-12));
    }

    #[test]
    fn scalar_gap_formula_is_positive_and_below_asymptote(n in 1usize..5000, ell in 0.05f64..1.0) {
        let inp = ScalarGapInputs::cosine(n, ell, 1.0).unwrap();
        let g = scalar_gap_formula(&inp);
        prop_assert!(g > 0.0 && g <= 1.0 / (8.0 * n as f64));
    }
}
