mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tcorr::estimators::{
    log_importance_weight_matrix, permute_dims, tc_minibatch, tc_minibatch_with_gradient,
    LatentBatch, Method, MssVariant,
};
use tcorr::gaussian::{gaussian_tc, SampleMatrix};
use tcorr::metrics::{mi_matrix, mig_score, r2_matrix, sap_score, LatentDump, Use};
use tcorr::nn::{Loss, Mlp, Optimizer, DEFAULT_LEAKY_SLOPE};
use tcorr::theory::{close_probability, disparity_construct, gaussian_tc_cap};
use tcorr::vae::{
    assemble_objective, kl_to_standard_normal, ElboTerms, ObjectiveConfig, ObjectiveKind,
};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

/// Random SPD matrix `AAᵀ + εI`.
fn spd(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, dim * dim).prop_map(move |v| {
        let a = DMatrix::from_vec(dim, dim, v);
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
    })
}

fn latent_batch() -> impl Strategy<Value = LatentBatch> {
    (2usize..12, 1usize..5, any::<u64>(), 0usize..50).prop_map(|(m, d, seed, extra)| {
        let mut rng = tcorr::rng_from_seed(seed);
        let mu = common::normal_matrix(m, d, &mut rng);
        let sd = common::normal_matrix(m, d, &mut rng).map(|v| 0.2 + v.abs());
        let z = &mu + common::normal_matrix(m, d, &mut rng).component_mul(&sd);
        LatentBatch::new(mu, sd, z, m + extra).unwrap()
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn gaussian_tc_nonnegative_and_scale_invariant(cov in (2usize..6).prop_flat_map(spd), scales in prop::collection::vec(0.1..10.0f64, 6)) {
        let tc = gaussian_tc(&cov).unwrap();
        prop_assert!(tc >= 0.0);
        let d = cov.nrows();
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&scales[..d]));
        let scaled = &s * &cov * &s;
        let tc2 = gaussian_tc(&scaled).unwrap();
        prop_assert!((tc - tc2).abs() <= 1e-8 * (1.0 + tc));
    }

    #[test]
    fn gaussian_tc_of_diagonal_is_zero(v in prop::collection::vec(0.01..100.0f64, 1..8)) {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(v));
        prop_assert_eq!(gaussian_tc(&cov).unwrap(), 0.0);
    }

    #[test]
    fn mss1_rows_sum_to_one(m in 2usize..40, extra in 0usize..500) {
        let n = m + extra;
        let w = log_importance_weight_matrix(m, n, MssVariant::Mss1).unwrap();
        for r in 0..m {
            let s: f64 = w.row(r).iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mss0_rows_sum_to_one_except_reference_row(m in 3usize..40, extra in 0usize..500) {
        let n = m + extra;
        let w = log_importance_weight_matrix(m, n, MssVariant::Mss0).unwrap();
        for r in 0..m {
            let s: f64 = w.row(r).iter().map(|v| v.exp()).sum();
            let expect = if r == m - 2 { 1.0 + 1.0 / (m - 1) as f64 - 2.0 / n as f64 } else { 1.0 };
            prop_assert!((s - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_batches(b in latent_batch()) {
        let one = LatentBatch::new(
            b.means().columns(0, 1).into_owned(),
            b.stddevs().columns(0, 1).into_owned(),
            b.samples().columns(0, 1).into_owned(),
            b.dataset_size(),
        ).unwrap();
        for m in [Method::NaiveMc, Method::Mss0, Method::Mss1] {
            prop_assert_eq!(tc_minibatch(&one, m).unwrap().value, 0.0);
        }
        let mws = tc_minibatch(&one, Method::Mws).unwrap().value;
        prop_assert!((mws + (b.dataset_size() as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn symmetric_estimators_are_exchangeable(b in latent_batch(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..b.batch_size()).collect();
        perm.shuffle(&mut tcorr::rng_from_seed(seed));
        let p = b.permute_rows(&perm);
        for m in [Method::NaiveMc, Method::Mws] {
            let a = tc_minibatch(&b, m).unwrap().value;
            let c = tc_minibatch(&p, m).unwrap().value;
            prop_assert!((a - c).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn estimator_gradients_are_finite_and_consistent(b in latent_batch()) {
        for m in Method::MINIBATCH {
            let (est, g) = tc_minibatch_with_gradient(&b, m).unwrap();
            prop_assert_eq!(est.value, tc_minibatch(&b, m).unwrap().value);
            prop_assert!(est.value.is_finite());
            prop_assert!(g.means.iter().chain(g.stddevs.iter()).chain(g.samples.iter()).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn permute_dims_preserves_column_multisets(rows in 1usize..60, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = tcorr::rng_from_seed(seed);
        let s = SampleMatrix::new(common::normal_matrix(rows, cols, &mut rng)).unwrap();
        let p = permute_dims(&s, &mut rng);
        for c in 0..cols {
            let mut a: Vec<f64> = s.column(c).iter().copied().collect();
            let mut b: Vec<f64> = p.column(c).iter().copied().collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn top2_gaps_bounded_and_averaged(k in 1usize..5, d in 2usize..6, vals in prop::collection::vec(0.0..=1.0f64, 30)) {
        let m = DMatrix::from_fn(k, d, |r, c| vals[r * d + c]);
        for rep in [sap_score(&m).unwrap(), mig_score(&m).unwrap()] {
            for f in &rep.factors {
                prop_assert!((0.0..=1.0).contains(&f.gap));
            }
            let mean = rep.factors.iter().map(|f| f.gap).sum::<f64>() / k as f64;
            prop_assert_eq!(rep.aggregate, mean);
        }
    }

    #[test]
    fn sap_invariant_under_affine_latent_maps(seed in any::<u64>(), a in prop::collection::vec(prop_oneof![-5.0..-0.1f64, 0.1..5.0f64], 3), b in prop::collection::vec(-10.0..10.0f64, 3)) {
        let mut rng = tcorr::rng_from_seed(seed);
        let f = DMatrix::from_fn(60, 2, |r, c| ((r / (1 + c * 6)) % 6) as f64 / 5.0);
        let lat = &f * common::normal_matrix(2, 3, &mut rng) + common::normal_matrix(60, 3, &mut rng) * 0.3;
        let scaled = DMatrix::from_fn(60, 3, |r, c| a[c] * lat[(r, c)] + b[c]);
        let r1 = sap_score(&r2_matrix(&LatentDump::from_latents(f.clone(), lat).unwrap(), Use::Means).unwrap()).unwrap();
        let r2 = sap_score(&r2_matrix(&LatentDump::from_latents(f, scaled).unwrap(), Use::Means).unwrap()).unwrap();
        prop_assert!((r1.aggregate - r2.aggregate).abs() < 1e-9);
        for (x, y) in r1.factors.iter().zip(&r2.factors) {
            prop_assert!((x.gap - y.gap).abs() < 1e-9);
        }
    }

    #[test]
    fn mig_invariant_under_exponential_on_discrete_latents(seed in any::<u64>()) {
        use rand::Rng as _;
        let mut rng = tcorr::rng_from_seed(seed);
        let n = 200;
        let f = DMatrix::from_fn(n, 2, |r, c| ((r >> (2 * c)) % 4) as f64);
        // Latents take a few well-separated values; 20 bins keep each level apart
        // before and after the transform.
        let lat = DMatrix::from_fn(n, 3, |r, c| match c {
            0 => f[(r, 0)] * 0.25,
            1 => f[(r, 1)] * 0.25 + if rng.random::<bool>() { 0.0 } else { 1.0 },
            _ => rng.random_range(0..3) as f64 * 0.5,
        });
        let t = lat.map(f64::exp);
        let a = mig_score(&mi_matrix(&LatentDump::from_latents(f.clone(), lat).unwrap(), Use::Means, 20).unwrap()).unwrap();
        let b = mig_score(&mi_matrix(&LatentDump::from_latents(f, t).unwrap(), Use::Means, 20).unwrap()).unwrap();
        prop_assert!((a.aggregate - b.aggregate).abs() < 1e-12);
    }

    #[test]
    fn duplicating_best_latent_suppresses_gaps(seed in any::<u64>()) {
        let mut rng = tcorr::rng_from_seed(seed);
        let n = 400;
        let f = DMatrix::from_fn(n, 1, |r, _| (r % 8) as f64 / 7.0);
        let mut lat = common::normal_matrix(n, 3, &mut rng);
        let best = f.column(0) * 2.0 + common::normal_matrix(n, 1, &mut rng).column(0) * 0.05;
        lat.set_column(0, &best);
        let mut dup = lat.clone();
        dup.set_column(1, &best);
        let base = LatentDump::from_latents(f.clone(), lat).unwrap();
        let twin = LatentDump::from_latents(f, dup).unwrap();
        let s0 = sap_score(&r2_matrix(&base, Use::Means).unwrap()).unwrap().factors[0].gap;
        let s1 = sap_score(&r2_matrix(&twin, Use::Means).unwrap()).unwrap().factors[0].gap;
        let m0 = mig_score(&mi_matrix(&base, Use::Means, 20).unwrap()).unwrap().factors[0].gap;
        let m1 = mig_score(&mi_matrix(&twin, Use::Means, 20).unwrap()).unwrap().factors[0].gap;
        prop_assert!(s1 < s0 && m1 < m0);
    }

    #[test]
    fn kl_nonnegative(mu in prop::collection::vec(-5.0..5.0f64, 6), lv in prop::collection::vec(-6.0..3.0f64, 6)) {
        let kl = kl_to_standard_normal(&DMatrix::from_vec(2, 3, mu), &DMatrix::from_vec(2, 3, lv));
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn objective_is_affine(tc in -3.0..3.0f64, tr in 0.0..5.0f64, dip in 0.0..5.0f64, beta in 0.0..50.0f64, eta in 0.0..50.0f64, delta in 0.1..2.0f64) {
        let terms = ElboTerms { recon: 1.3, kl: 0.4 };
        for kind in [ObjectiveKind::PlainElbo, ObjectiveKind::BetaTc, ObjectiveKind::Rtc, ObjectiveKind::DipI, ObjectiveKind::DipII] {
            let cfg = ObjectiveConfig::new(kind, beta);
            let base = assemble_objective(&terms, &cfg, eta, tc, tr, dip);
            let (cb, ce, cd) = match kind {
                ObjectiveKind::PlainElbo => (0.0, 0.0, 0.0),
                ObjectiveKind::BetaTc => (beta, 0.0, 0.0),
                ObjectiveKind::Rtc => (beta, eta, 0.0),
                _ => (0.0, 0.0, 1.0),
            };
            let tol = 1e-9 * (1.0 + base.abs());
            prop_assert!((assemble_objective(&terms, &cfg, eta, tc + delta, tr, dip) - base - cb * delta).abs() < tol);
            prop_assert!((assemble_objective(&terms, &cfg, eta, tc, tr + delta, dip) - base - ce * delta).abs() < tol);
            prop_assert!((assemble_objective(&terms, &cfg, eta, tc, tr, dip + delta) - base - cd * delta).abs() < tol);
        }
    }

    #[test]
    fn disparity_sample_tc_never_exceeds_cap(t in 0.0..30.0f64, s in 0.01..2.0f64) {
        let inst = disparity_construct(t, [s, s]).unwrap();
        prop_assert!(inst.tc_sample_gaussian <= gaussian_tc_cap(s, &[1.0, 1.0]) + 1e-12);
        prop_assert!((inst.tc_mean - t).abs() < 1e-9);
    }

    #[test]
    fn close_probability_increasing(a in 0.0..10.0f64, b in 0.0..10.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(close_probability(lo) < close_probability(hi));
    }

    #[test]
    fn supervised_gradients_match_finite_differences(seed in any::<u64>(), hidden in 2usize..10, out in 1usize..3) {
        prop_assert!(common::supervised_grad_error(&[2, hidden, out], Loss::Squared, seed) <= common::FD_REL_TOL);
        prop_assert!(common::supervised_grad_error(&[2, hidden, 1], Loss::Logistic, seed) <= common::FD_REL_TOL);
    }

    #[test]
    fn training_is_bitwise_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = tcorr::rng_from_seed(seed);
            let mut net = Mlp::new(&[3, 6, 1], DEFAULT_LEAKY_SLOPE, &mut rng).unwrap();
            let x = common::normal_matrix(8, 3, &mut rng);
            let t = common::normal_matrix(8, 1, &mut rng);
            let mut opt = Optimizer::adam(1e-2).unwrap();
            for _ in 0..5 {
                let (_, g) = tcorr::nn::loss_and_gradient(&net, &x, &t, Loss::Squared).unwrap();
                net.apply_gradients(&mut opt, &g).unwrap();
            }
            net.params_flat()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn composite_vae_gradients_match_finite_differences() {
    for seed in 0..3 {
        for (name, cfg, method) in common::composite_cases() {
            let err = common::composite_grad_error(&cfg, method, seed);
            assert!(err <= common::FD_REL_TOL, "{name} seed {seed}: {err:e}");
        }
    }
}
