use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use skewfa::distributions::{gh_logpdf, mvt_cdf, mvt_logpdf, sdb_logpdf, GhSkewTParams, MvtParams, ScaleMatrix, SdbComponentParams};
use skewfa::estep::{sdb_moments, MomentConfig};
use skewfa::factor::{constrained_update, CovarianceStructure, FactorCovariance, GroupScatter};
use skewfa::fit::{e_step, fit_from, sample_mixture, Component, Family, FitConfig, MixtureModel};
use skewfa::io::{read_csv, write_csv_to, CsvOptions, ModelArchive};
use skewfa::selection::{ari, grid_search, GridSpec};
use skewfa::special::{digamma, gig_moments, log_bessel_k, solve_nu_detailed, GigParams, NuSolution, NU_BRACKET};

fn factor_cov(p: usize, q: usize, seed: u64) -> FactorCovariance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let lambda = DMatrix::from_fn(p, q, |_, _| 0.7 * r.sample::<f64, _>(StandardNormal));
    let psi = DVector::from_fn(p, |_, _| r.gen_range(0.2..1.5));
    FactorCovariance::new(lambda, psi).unwrap()
}

fn two_group_model(p: usize, q: usize, seed: u64) -> MixtureModel {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let components = (0..2)
        .map(|g| Component {
            mu: DVector::from_fn(p, |j, _| if g == 0 { 0.0 } else if j % 2 == 0 { 5.0 } else { -5.0 }),
            skew: DVector::from_fn(p, |_, _| r.gen_range(-1.5..1.5)),
            cov: factor_cov(p, q, seed + 10 + g as u64),
            nu: r.gen_range(5.0..20.0),
        })
        .collect();
    MixtureModel { family: Family::Sdb, structure: CovarianceStructure::UUU, pi: vec![0.4, 0.6], components }
}

/// `ln(nu/2) - digamma(nu/2)`.
fn nu_gap(nu: f64) -> f64 {
    (0.5 * nu).ln() - digamma(0.5 * nu).unwrap()
}

proptest! {
    #[test]
    fn bessel_order_symmetry(order in -8.0..8.0f64, x in 1e-3..200.0f64) {
        let a = log_bessel_k(order, x).unwrap();
        let b = log_bessel_k(-order, x).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn bessel_recurrence(order in -5.0..5.0f64, x in 0.2..30.0f64) {
        let k = |v: f64| log_bessel_k(v, x).unwrap().exp();
        let lhs = k(order + 1.0);
        let rhs = k(order - 1.0) + 2.0 * order / x * k(order);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs());
    }

    #[test]
    fn digamma_recurrence(x in 1e-3..50.0f64) {
        let step = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
        prop_assert!((step - 1.0 / x).abs() <= 1e-12 * (1.0 / x).max(1.0));
    }

    #[test]
    fn nu_equation_is_positive_and_decreasing(nu in 0.1..500.0f64, bump in 0.01..10.0f64) {
        let here = nu_gap(nu);
        prop_assert!(here > 0.0);
        prop_assert!(nu_gap(nu + bump) < here);
    }

    #[test]
    fn nu_solver_returns_root_or_saturation(s in 1.0..4.0f64) {
        let (lo, hi) = NU_BRACKET;
        match solve_nu_detailed(s, lo, hi).unwrap() {
            NuSolution::Root(nu) => {
                prop_assert!(nu >= lo && nu <= hi);
                prop_assert!((nu_gap(nu) - s + 1.0).abs() < 1e-7);
            }
            NuSolution::SaturatedHigh(nu) => {
                prop_assert_eq!(nu, hi);
                prop_assert!(nu_gap(hi) - s + 1.0 >= 0.0);
            }
            NuSolution::SaturatedLow(nu) => {
                prop_assert_eq!(nu, lo);
                prop_assert!(nu_gap(lo) - s + 1.0 <= 0.0);
            }
        }
    }

    #[test]
    fn gig_moments_satisfy_jensen(psi in 0.01..20.0f64, chi in 0.01..20.0f64, lambda in -10.0..10.0f64) {
        let m = gig_moments(&GigParams::new(psi, chi, lambda).unwrap()).unwrap();
        prop_assert!(m.mean > 0.0 && m.mean_inv > 0.0);
        prop_assert!(m.mean * m.mean_inv >= 1.0 - 1e-10);
        prop_assert!(m.mean_log <= m.mean.ln() + 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_densities_are_finite(
        seed in 0u64..10_000,
        p in 1usize..5,
        nu in 2.1..60.0f64,
        spread in prop::sample::select(vec![0.1, 3.0, 50.0, 1e3]),
    ) {
        let q = (p - 1).min(2);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cov = if q == 0 { FactorCovariance::diagonal(DVector::from_element(p, 0.8)).unwrap() } else { factor_cov(p, q, seed) };
        let mu = DVector::from_fn(p, |_, _| r.gen_range(-2.0..2.0));
        let skew = DVector::from_fn(p, |_, _| r.gen_range(-4.0..4.0));
        let x = DVector::from_fn(p, |j, _| mu[j] + spread * r.sample::<f64, _>(StandardNormal));
        let sdb = SdbComponentParams::new(mu.clone(), skew.clone(), cov.clone(), nu).unwrap();
        prop_assert!(sdb_logpdf(&x, &sdb, 1e-6).unwrap().value.is_finite());
        let t = MvtParams::new(mu.clone(), ScaleMatrix::Factor(cov.clone()), nu).unwrap();
        prop_assert!(mvt_logpdf(&x, &t).unwrap().is_finite());
        let gh = GhSkewTParams::new(mu, ScaleMatrix::Factor(cov), skew, nu).unwrap();
        prop_assert!(gh_logpdf(&x, &gh).unwrap().is_finite());
    }

    #[test]
    fn t_cdf_is_monotone(seed in 0u64..10_000, p in 1usize..5, nu in 2.5..30.0f64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let scale = ScaleMatrix::dense(factor_cov(p, (p - 1).min(1), seed).dense()).unwrap();
        let params = MvtParams::new(DVector::zeros(p), scale, nu).unwrap();
        let low = DVector::from_fn(p, |_, _| r.gen_range(-2.0..2.0));
        let high = DVector::from_fn(p, |j, _| low[j] + r.gen_range(0.0..1.5));
        let (a, ea) = mvt_cdf(&low, &params, seed, 1e-5).unwrap();
        let (b, eb) = mvt_cdf(&high, &params, seed + 1, 1e-5).unwrap();
        prop_assert!(b >= a - 2.0 * (ea + eb));
    }

    #[test]
    fn moments_are_translation_equivariant(seed in 0u64..10_000, p in 1usize..4, shift in -512i32..512) {
        // dyadic values keep (x + c) - (mu + c) exact
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let dyadic = |r: &mut ChaCha8Rng| f64::from(r.gen_range(-2048i32..2048)) / 1024.0;
        let c = DVector::from_fn(p, |j, _| f64::from(shift + j as i32) / 8.0);
        let q = p - 1;
        let cov = if q == 0 { FactorCovariance::diagonal(DVector::from_element(p, 0.7)).unwrap() } else { factor_cov(p, q, seed) };
        let mu = DVector::from_fn(p, |_, _| dyadic(&mut r));
        let skew = DVector::from_fn(p, |_, _| dyadic(&mut r));
        let x = DVector::from_fn(p, |_, _| dyadic(&mut r));
        let cfg = MomentConfig::default();
        let here = SdbComponentParams::new(mu.clone(), skew.clone(), cov.clone(), 7.0).unwrap();
        let moved = SdbComponentParams::new(&mu + &c, skew, cov, 7.0).unwrap();
        let a = sdb_moments(&x, &here, &cfg).unwrap();
        let b = sdb_moments(&(&x + &c), &moved, &cfg).unwrap();
        prop_assert_eq!(a.e1, b.e1);
        prop_assert_eq!(a.e2, b.e2);
        prop_assert_eq!(a.e3, b.e3);
        prop_assert_eq!(a.e4, b.e4);
    }

    #[test]
    fn woodbury_solve_inverts(seed in 0u64..10_000, p in 2usize..200, q in 1usize..6) {
        prop_assume!(q < p);
        let cov = factor_cov(p, q, seed);
        let product = cov.dense() * cov.solve(&DMatrix::identity(p, p));
        prop_assert!((product - DMatrix::<f64>::identity(p, p)).amax() <= 1e-9);
    }

    #[test]
    fn constrained_update_respects_tying(seed in 0u64..10_000, which in 0usize..8, g in 1usize..4) {
        let structure = CovarianceStructure::ALL[which];
        let (p, q) = (5, 2);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let groups: Vec<GroupScatter> = (0..g)
            .map(|k| {
                let a = DMatrix::from_fn(p, 3 * p, |_, _| r.sample::<f64, _>(StandardNormal));
                GroupScatter { scatter: &a * a.transpose() / (3 * p) as f64, weight: 10.0 + k as f64 }
            })
            .collect();
        let current: Vec<FactorCovariance> = (0..g).map(|k| factor_cov(p, q, seed + k as u64)).collect();
        let floor = 1e-3;
        let updated = constrained_update(structure, &groups, &current, floor).unwrap();
        for fc in &updated {
            prop_assert!(fc.psi().iter().all(|&v| v >= floor));
            if structure.isotropic() {
                prop_assert!(fc.psi().iter().all(|v| v.to_bits() == fc.psi()[0].to_bits()));
            }
            if structure.loadings_tied() {
                prop_assert!(fc.lambda().iter().zip(updated[0].lambda().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            if structure.errors_tied() {
                prop_assert!(fc.psi().iter().zip(updated[0].psi().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn ari_is_bounded_and_relabeling_invariant(
        labels in prop::collection::vec((0usize..4, 0usize..4), 2..60),
        perm in Just([2usize, 0, 3, 1]),
    ) {
        let a: Vec<usize> = labels.iter().map(|l| l.0).collect();
        let b: Vec<usize> = labels.iter().map(|l| l.1).collect();
        let score = ari(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&score));
        let relabeled: Vec<usize> = b.iter().map(|&v| perm[v]).collect();
        prop_assert_eq!(score, ari(&a, &relabeled).unwrap());
        prop_assert_eq!(ari(&b, &a).unwrap(), score);
        let renamed: Vec<usize> = a.iter().map(|&v| perm[v]).collect();
        prop_assert!((ari(&a, &renamed).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e12..1e12f64, 3), 2..20)) {
        let data = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
        let mut buf = Vec::new();
        let columns = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        write_csv_to(&mut buf, &data, Some(&columns), None).unwrap();
        let back = read_csv(buf.as_slice(), &CsvOptions::default()).unwrap();
        prop_assert_eq!(back.data, data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fit_keeps_parameters_feasible_and_likelihood_monotone(seed in 0u64..1000) {
        let truth = two_group_model(4, 1, seed);
        let (data, _) = sample_mixture(&truth, 80, seed).unwrap();
        let cfg = FitConfig { max_iter: 25, seed, ..FitConfig::default() };
        let result = fit_from(&data, truth, &cfg).unwrap();
        prop_assert!(result.monotonicity_violations.is_empty());
        for w in result.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()));
        }
        let model = &result.model;
        prop_assert!(model.pi.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!((model.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in &model.components {
            prop_assert!(c.nu >= cfg.nu_bracket.0 && c.nu <= cfg.nu_bracket.1);
            prop_assert!(c.cov.psi().iter().all(|&v| v >= cfg.psi_floor));
        }
        for row in result.z.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn label_swap_leaves_likelihood_unchanged(seed in 0u64..1000) {
        let model = two_group_model(3, 1, seed);
        let (data, _) = sample_mixture(&model, 40, seed).unwrap();
        let mut swapped = model.clone();
        swapped.components.reverse();
        swapped.pi.reverse();
        let cfg = MomentConfig::default();
        prop_assert_eq!(e_step(&data, &model, &cfg).unwrap().loglik, e_step(&data, &swapped, &cfg).unwrap().loglik);
    }

    #[test]
    fn row_order_does_not_change_the_fit(seed in 0u64..1000) {
        let truth = two_group_model(3, 1, seed);
        let (data, _) = sample_mixture(&truth, 60, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        let shuffled = data.select_rows(&order);
        let cfg = FitConfig { max_iter: 10, tol: 1e-300, ..FitConfig::default() };
        let a = fit_from(&data, truth.clone(), &cfg).unwrap();
        let b = fit_from(&shuffled, truth, &cfg).unwrap();
        prop_assert_eq!(a.iterations, b.iterations);
        prop_assert!((a.loglik() - b.loglik()).abs() <= 1e-9 * a.loglik().abs());
        for (ca, cb) in a.model.components.iter().zip(&b.model.components) {
            prop_assert!((&ca.mu - &cb.mu).amax() <= 1e-7);
            prop_assert!((&ca.skew - &cb.skew).amax() <= 1e-7);
            prop_assert!((ca.nu - cb.nu).abs() <= 1e-6 * ca.nu);
        }
        for (i, &src) in order.iter().enumerate() {
            prop_assert_eq!(a.map_labels[src], b.map_labels[i]);
        }
    }

    #[test]
    fn archive_round_trip_is_bit_exact(seed in 0u64..1000) {
        let model = two_group_model(4, 2, seed);
        let text = ModelArchive::from_model(&model).to_json().unwrap();
        let back = ModelArchive::from_json(&text).unwrap().to_model().unwrap();
        prop_assert_eq!(ModelArchive::from_model(&back).to_json().unwrap(), text);
        for (a, b) in model.components.iter().zip(&back.components) {
            prop_assert_eq!(&a.mu, &b.mu);
            prop_assert_eq!(&a.skew, &b.skew);
            prop_assert_eq!(a.cov.lambda(), b.cov.lambda());
            prop_assert_eq!(a.cov.psi(), b.cov.psi());
            prop_assert_eq!(a.nu, b.nu);
        }
    }
}

fn small_grid(seed: u64) -> GridSpec {
    GridSpec {
        families: vec![Family::Sdb],
        structures: vec![CovarianceStructure::UUU, CovarianceStructure::CCC],
        g_range: (1, 2),
        q_range: (1, 1),
        config: FitConfig { seed, max_iter: 40, ..FitConfig::default() },
    }
}

#[test]
fn grid_has_one_entry_per_cell_and_ranks_converged_first() {
    let truth = two_group_model(3, 1, 4);
    let (data, _) = sample_mixture(&truth, 80, 4).unwrap();
    let ranking = grid_search(&data, &small_grid(4)).unwrap();
    assert_eq!(ranking.len(), 4);
    let cells: std::collections::BTreeSet<_> = ranking.iter().map(|e| (e.structure.id(), e.g)).collect();
    assert_eq!(cells.len(), 4);
    if ranking.iter().any(|e| e.converged()) {
        assert!(ranking[0].converged());
    }
}

#[test]
fn bic_ranking_ignores_row_order() {
    let truth = two_group_model(3, 1, 5);
    let (data, _) = sample_mixture(&truth, 80, 5).unwrap();
    let reversed = data.select_rows(&(0..data.nrows()).rev().collect::<Vec<_>>());
    let names = |d: &DMatrix<f64>| -> Vec<(String, usize)> {
        grid_search(d, &small_grid(5)).unwrap().iter().map(|e| (e.structure.id().to_string(), e.g)).collect()
    };
    assert_eq!(names(&data), names(&reversed));
}
