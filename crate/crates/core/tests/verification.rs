use mfg_broker::equilibrium::{solve_mean_field, solve_trader, MeanFieldCoefficients, TraderCoefficients};
use mfg_broker::ode::{solve_mrde_direct, MatrixRiccatiProblem};
use mfg_broker::simulator::{simulate_equilibrium, SimConfig};
use mfg_broker::verification::*;
use mfg_broker::{make_grid, ModelParams, TraderType};
use nalgebra::Matrix2;

fn solved(p: &ModelParams, m: usize) -> (MeanFieldCoefficients, TraderCoefficients) {
    let mf = solve_mean_field(p, make_grid(p.horizon, m).unwrap()).unwrap();
    let tc = solve_trader(p, &TraderType::default(), &mf).unwrap();
    (mf, tc)
}

fn sup_early(r: &CheckReport) -> f64 {
    r.diagnostics["sup_on_first_90_percent"].as_f64().unwrap()
}

#[test]
fn away_from_the_boundary_layer_residuals_are_second_order() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, 2000);
    let (mf2, tc2) = solved(&p, 4000);
    let (r1, r2) = (check_ode_residuals(&mf, &tc, &p), check_ode_residuals(&mf2, &tc2, &p));
    let ratio = sup_early(&r1) / sup_early(&r2);
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    // The sup itself sits at the last interior node, inside the layer.
    assert_eq!(r1.diagnostics["worst_node"].as_u64().unwrap(), 1999);
}

#[test]
fn zero_riccati_data_has_an_exactly_zero_residual() {
    let grid = make_grid(1.0, 100).unwrap();
    let mut prob = MatrixRiccatiProblem::from_params(&ModelParams::default(), grid);
    prob.q = Matrix2::zeros();
    prob.s = Matrix2::zeros();
    let sol = solve_mrde_direct(&prob).unwrap();
    let h = grid.step();
    for k in 1..100 {
        let fd = (sol.at(k + 1) - sol.at(k - 1)) / (2.0 * h);
        assert!((fd - prob.rhs(&sol.at(k))).abs().max() <= 1e-14);
    }
}

#[test]
fn solver_cross_checks_pass_at_desk_resolution() {
    let p = ModelParams::default();
    let grid = make_grid(1.0, 10_000).unwrap();
    for r in cross_check_solvers(&p, &TraderType::default(), &grid).unwrap() {
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn rk4_is_fourth_order_on_the_riccati_equation() {
    let p = ModelParams::default();
    let ratio = rk4_order_ratio(&p, &make_grid(1.0, 10_000).unwrap()).unwrap();
    assert!((12.0..=20.0).contains(&ratio), "{ratio}");
}

#[test]
fn terminal_identities_and_shapes() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, 10_000);
    let r = check_terminal_identities(&mf, &tc, &p).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(check_coefficient_shapes(&mf).passed);
}

#[test]
fn concavity_gaps_are_nonnegative_on_every_pair() {
    let p = ModelParams::default();
    let grid = make_grid(1.0, 2000).unwrap();
    let r = check_concavity(&p, &TraderType::default(), &grid, 17, 300);
    assert!(r.passed, "{r:?}");
}

#[test]
fn first_order_conditions_hold_and_the_negative_control_is_caught() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, 2000);
    let dirs = PerturbationDirection::defaults(1.0);
    let cfg = SimConfig {
        n_paths: 2000,
        record_every: 2000,
        keep_paths: 0,
        seed: 8,
        ..Default::default()
    };
    let r = check_gateaux(&p, &mf, &tc, &dirs, &cfg).unwrap();
    assert!(r.passed, "{}", r.statistic);
    let n = gateaux_negative_control(&p, &mf, &TraderType::default(), &dirs, &cfg, 1.1).unwrap();
    assert!(n.negative_control && n.passed && n.statistic > 5.0, "{}", n.statistic);
}

#[test]
fn fbsde_terminal_identity_holds_pathwise() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, 1000);
    let cfg = SimConfig {
        n_paths: 20,
        keep_paths: 20,
        store_increments: true,
        record_every: 1000,
        ..Default::default()
    };
    let (ens, _) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
    let r = check_fbsde_drift(&ens, &mf, &tc, &p).unwrap();
    assert!(r.passed && r.statistic <= 1e-10, "{r:?}");
}

#[test]
fn deterministic_signals_leave_a_first_order_drift_residual() {
    let p = ModelParams {
        sigma_alpha: 0.0,
        alpha0: 1.0,
        ..Default::default()
    };
    let tt = TraderType {
        sigma_i: 0.0,
        ..Default::default()
    };
    let r = fbsde_refinement(&p, &tt, 2000, 2, 1).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn reports_round_trip_through_json() {
    let p = ModelParams::default();
    let (mf, tc) = solved(&p, 500);
    let r = check_ode_residuals(&mf, &tc, &p);
    let back: CheckReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    let dirs = PerturbationDirection::defaults(1.0);
    let text = serde_json::to_string(&dirs).unwrap();
    assert_eq!(serde_json::from_str::<Vec<PerturbationDirection>>(&text).unwrap(), dirs);
}
