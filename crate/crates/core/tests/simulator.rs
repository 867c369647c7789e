use mfg_broker::equilibrium::{solve_mean_field, solve_trader, MeanFieldCoefficients, TraderCoefficients};
use mfg_broker::simulator::*;
use mfg_broker::{make_grid, ModelParams, TraderType, TypeDistribution};
use proptest::prelude::*;

fn solved(p: &ModelParams, tt: &TraderType, m: usize) -> (MeanFieldCoefficients, TraderCoefficients) {
    let mf = solve_mean_field(p, make_grid(p.horizon, m).unwrap()).unwrap();
    let tc = solve_trader(p, tt, &mf).unwrap();
    (mf, tc)
}

fn quiet() -> (ModelParams, TraderType) {
    let p = ModelParams {
        sigma_alpha: 0.0,
        alpha0: 0.0,
        ..Default::default()
    };
    let tt = TraderType {
        sigma_i: 0.0,
        ..Default::default()
    };
    (p, tt)
}

#[test]
fn zero_volatility_keeps_every_speed_and_inventory_at_zero() {
    let (p, tt) = quiet();
    let (mf, tc) = solved(&p, &tt, 1000);
    let cfg = SimConfig {
        n_paths: 20,
        keep_paths: 5,
        record_every: 10,
        ..Default::default()
    };
    let (ens, stats) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
    for path in &ens.kept {
        for c in [Column::NuBar, Column::NuB, Column::NuI, Column::QBar, Column::QBarB, Column::QI, Column::CashI] {
            assert!(path.column(c).iter().all(|v| *v == 0.0), "{c:?}");
        }
        // Driftless price: the increments are pure noise.
        assert_ne!(path.column(Column::Price)[1000], p.s0);
    }
    for c in [Column::NuBar, Column::NuB, Column::NuI] {
        assert!(stats.column(c).mean.iter().all(|v| *v == 0.0));
    }
    assert_eq!(stats.objectives.h_i.mean, 0.0);
    assert_eq!(stats.objectives.h_b.mean, 0.0);
}

#[test]
fn stats_have_one_row_per_recorded_node_and_se_is_sd_over_root_n() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, &TraderType::default(), 1000);
    let cfg = SimConfig {
        n_paths: 100,
        record_every: 50,
        keep_paths: 0,
        ..Default::default()
    };
    let (_, stats) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
    assert_eq!(stats.times.len(), 21);
    for c in &stats.columns {
        assert_eq!(c.mean.len(), 21);
        for (sd, se) in c.sd.iter().zip(&c.se) {
            assert_eq!(*se, sd / 10.0);
        }
    }
}

fn bits(stats: &EnsembleStats) -> Vec<u64> {
    let mut out: Vec<u64> = stats
        .columns
        .iter()
        .flat_map(|c| c.mean.iter().chain(&c.sd).chain(&c.se))
        .map(|v| v.to_bits())
        .collect();
    out.push(stats.objectives.h_i.mean.to_bits());
    out.push(stats.objectives.h_b.se.to_bits());
    out
}

#[test]
fn results_do_not_depend_on_the_thread_count() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, &TraderType::default(), 500);
    let cfg = SimConfig {
        n_paths: 300,
        record_every: 10,
        keep_paths: 3,
        ..Default::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap())
    };
    let (e1, s1) = run(1);
    let (e3, s3) = run(3);
    assert_eq!(bits(&s1), bits(&s3));
    assert_eq!(e1.integrals, e3.integrals);
    assert_eq!(e1.kept[2].columns, e3.kept[2].columns);
}

#[test]
fn common_signal_variance_matches_the_ou_law() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, &TraderType::default(), 400);
    let n = 20_000;
    let cfg = SimConfig {
        n_paths: n,
        record_every: 100,
        keep_paths: 0,
        seed: 11,
        ..Default::default()
    };
    let (_, stats) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
    let alpha = stats.column(Column::Alpha);
    for r in [1, 2, 4] {
        let t = stats.times[r];
        let var = alpha.sd[r].powi(2);
        let target = p.sigma_alpha.powi(2) * (1.0 - (-2.0 * p.k_alpha * t).exp()) / (2.0 * p.k_alpha);
        let se = target * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - target).abs() <= 5.0 * se, "t={t}: {var} vs {target}");
    }
}

#[test]
fn terminal_penalty_drives_the_trader_inventory_to_zero() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, &TraderType::default(), 2000);
    let n = 300;
    let cfg = SimConfig {
        n_paths: n,
        keep_paths: n,
        record_every: 2000,
        ..Default::default()
    };
    let (ens, _) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
    let mean_abs: Vec<f64> = (0..=2000)
        .map(|k| ens.kept.iter().map(|x| x.column(Column::QI)[k].abs()).sum::<f64>() / n as f64)
        .collect();
    let peak = mean_abs.iter().cloned().fold(0.0, f64::max);
    assert!(mean_abs[2000] <= 0.02 * peak, "{} vs {}", mean_abs[2000], peak);
}

/// RMS over paths of the gap between the trader's wealth change and
/// `sum Q dS - eta sum nu^2 h`.
fn accounting_gap(m: usize) -> f64 {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, &TraderType::default(), m);
    let cfg = SimConfig {
        n_paths: 200,
        keep_paths: 200,
        record_every: m,
        seed: 3,
        ..Default::default()
    };
    let (ens, _) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
    let h = p.horizon / m as f64;
    let ss: f64 = ens
        .kept
        .iter()
        .map(|x| {
            let (s, q, nu, cash) = (
                x.column(Column::Price),
                x.column(Column::QI),
                x.column(Column::NuI),
                x.column(Column::CashI),
            );
            let wealth = cash[m] + q[m] * s[m] - (cash[0] + q[0] * s[0]);
            let formula: f64 = (0..m)
                .map(|k| q[k] * (s[k + 1] - s[k]) - p.eta_i * nu[k] * nu[k] * h)
                .sum();
            (wealth - formula).powi(2)
        })
        .sum();
    (ss / 200.0).sqrt()
}

#[test]
fn cash_accounting_holds_to_first_order() {
    let (coarse, fine) = (accounting_gap(2000), accounting_gap(4000));
    let ratio = coarse / fine;
    assert!(fine < coarse && (1.4..=2.8).contains(&ratio), "{coarse} {fine}");
}

#[test]
fn trading_intensity_is_square_integrable_and_stable_in_the_sample_size() {
    let p = ModelParams::default();
    let tt = TraderType::default();
    let (mf, tc) = solved(&p, &tt, 1000);
    let est = |n: usize| {
        let cfg = SimConfig {
            n_paths: n,
            record_every: 1000,
            keep_paths: 0,
            seed: 5,
            ..Default::default()
        };
        let (ens, _) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
        let xs: Vec<f64> = ens.integrals.iter().map(|x| x.nui_sq).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (mean, (var / n as f64).sqrt())
    };
    let (m1, s1) = est(500);
    let (m2, s2) = est(4000);
    assert!(m1.is_finite() && m2.is_finite() && m2 > 0.0);
    assert!((m1 - m2).abs() <= 5.0 * (s1 * s1 + s2 * s2).sqrt());
}

#[test]
fn objective_estimates_require_the_matching_type() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, &TraderType::default(), 200);
    let cfg = SimConfig {
        n_paths: 10,
        record_every: 200,
        ..Default::default()
    };
    let (ens, stats) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
    let other = TraderType {
        a_i: 2.0,
        ..Default::default()
    };
    assert!(estimate_objectives(&ens, &p, &other).is_err());
    assert_eq!(estimate_objectives(&ens, &p, &TraderType::default()).unwrap(), stats.objectives);
}

#[test]
fn mismatched_grids_are_rejected() {
    let p = ModelParams::default();
    let (mf, _) = solved(&p, &TraderType::default(), 200);
    let (_, tc) = solved(&p, &TraderType::default(), 400);
    let cfg = SimConfig {
        n_paths: 2,
        record_every: 200,
        ..Default::default()
    };
    assert!(simulate_equilibrium(&p, &mf, &tc, &cfg).is_err());
}

#[test]
fn a_single_quiet_representative_trader_is_the_mean_field() {
    let p = ModelParams::default();
    let mf = solve_mean_field(&p, make_grid(1.0, 2000).unwrap()).unwrap();
    let cfg = SimConfig {
        n_traders: Some(1),
        replications: 3,
        record_every: 2000,
        type_dist: Some(TypeDistribution::representative(&p, p.k_alpha, 0.0)),
        ..Default::default()
    };
    let r = simulate_finite_n(&p, &mf, &cfg).unwrap();
    assert!(r.sup <= 1e-12, "{r:?}");
}

#[test]
fn empirical_feedback_with_one_quiet_trader_is_also_exact() {
    let p = ModelParams::default();
    let mf = solve_mean_field(&p, make_grid(1.0, 1000).unwrap()).unwrap();
    let cfg = SimConfig {
        n_traders: Some(1),
        record_every: 1000,
        empirical_feedback: true,
        type_dist: Some(TypeDistribution::representative(&p, p.k_alpha, 0.0)),
        ..Default::default()
    };
    assert!(simulate_finite_n(&p, &mf, &cfg).unwrap().sup <= 1e-10);
}

#[test]
fn chaos_gap_shrinks_like_one_over_root_n() {
    let p = ModelParams::default();
    let mf = solve_mean_field(&p, make_grid(1.0, 200).unwrap()).unwrap();
    let rms = |n: usize| {
        let cfg = SimConfig {
            n_traders: Some(n),
            replications: 20,
            record_every: 200,
            seed: 9,
            ..Default::default()
        };
        simulate_finite_n(&p, &mf, &cfg).unwrap().rms
    };
    let ratio = rms(25) / rms(2500);
    assert!((5.0..=20.0).contains(&ratio), "{ratio}");
}

#[test]
fn heterogeneous_types_still_reduce_the_gap() {
    let p = ModelParams::default();
    let mf = solve_mean_field(&p, make_grid(1.0, 200).unwrap()).unwrap();
    let dist = TypeDistribution::Lognormal {
        mean: TraderType::representative(&p),
        cv: [0.2, 0.2, 0.2, 0.2],
    };
    let rms: Vec<f64> = [10, 100, 1000]
        .iter()
        .map(|&n| {
            let cfg = SimConfig {
                n_traders: Some(n),
                replications: 2,
                record_every: 200,
                seed: 4,
                type_dist: Some(dist),
                ..Default::default()
            };
            simulate_finite_n(&p, &mf, &cfg).unwrap().rms
        })
        .collect();
    assert!(rms[0] > rms[1] && rms[1] > rms[2], "{rms:?}");
}

#[test]
fn finite_n_needs_a_population_size_and_matching_type_means() {
    let p = ModelParams::default();
    let mf = solve_mean_field(&p, make_grid(1.0, 100).unwrap()).unwrap();
    let cfg = SimConfig {
        record_every: 100,
        ..Default::default()
    };
    assert!(simulate_finite_n(&p, &mf, &cfg).is_err());
    let cfg = SimConfig {
        n_traders: Some(3),
        record_every: 100,
        type_dist: Some(TypeDistribution::PointMass {
            trader: TraderType {
                a_i: 3.0,
                ..Default::default()
            },
        }),
        ..Default::default()
    };
    assert!(simulate_finite_n(&p, &mf, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ou_step_is_affine_in_the_start_and_the_draw(
        x in -10.0f64..10.0, k in 0.1f64..20.0, s in 0.0f64..3.0, h in 1e-5f64..0.1, z in -4.0f64..4.0,
    ) {
        let base = ou_step(0.0, k, s, h, z);
        let moved = ou_step(x, k, s, h, z);
        prop_assert!((moved - base - x * (-k * h).exp()).abs() <= 1e-12 * (1.0 + x.abs()));
        prop_assert_eq!(ou_step(0.0, k, s, h, -z), -base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn equal_seeds_reproduce_and_inventories_start_at_zero(seed in any::<u64>(), n in 1usize..70) {
        let p = ModelParams::default();
        let (mf, tc) = solved(&p, &TraderType::default(), 100);
        let cfg = SimConfig { n_paths: n, seed, record_every: 10, keep_paths: 1, ..Default::default() };
        let (a, sa) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
        let (b, sb) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
        prop_assert_eq!(bits(&sa), bits(&sb));
        prop_assert_eq!(&a.integrals, &b.integrals);
        for c in [Column::QBar, Column::QBarB, Column::QI] {
            prop_assert_eq!(a.kept[0].column(c)[0], 0.0);
        }
        prop_assert!(a.kept[0].columns.iter().flatten().all(|v| v.is_finite()));
    }
}
