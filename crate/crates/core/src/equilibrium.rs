//! Closed-form equilibrium: inventory and signal loadings of the broker,
//! the mean-field trader and an individual trader, plus the strategy
//! evaluators built from them.
//!
//! The strategies are linear in the state:
//!
//! ```text
//! nu_bar = g_a alpha + g_b Q_bar + g_c Q_bar_B
//! nu_B   = h_a alpha + h_b Q_bar + h_c Q_bar_B
//! nu_I   = f_a alpha + f_aI alpha_I + f_b Q_bar + f_bI Q_I + f_c Q_bar_B
//! ```

use nalgebra::{Matrix2, SVector, Vector2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ode::{
    closed_form_fbi, closed_form_fbi_derivative, rk4_backward, substeps_for, CoefficientPath,
    MatrixRiccatiProblem,
};
use crate::params::{validate_params, ModelParams, TimeGrid, TraderType};

/// Loadings of the broker (`h_*`) and the mean-field trader (`g_*`).
#[derive(Debug, Clone)]
pub struct MeanFieldCoefficients {
    pub params: ModelParams,
    pub g_a: CoefficientPath<f64>,
    pub g_b: CoefficientPath<f64>,
    pub g_c: CoefficientPath<f64>,
    pub h_a: CoefficientPath<f64>,
    pub h_b: CoefficientPath<f64>,
    pub h_c: CoefficientPath<f64>,
    /// `h_a / g_a` per node; `None` where `g_a` vanishes before `T`.
    q_a: Vec<Option<f64>>,
}

/// Loadings of an individual trader of a given type.
#[derive(Debug, Clone)]
pub struct TraderCoefficients {
    pub trader_type: TraderType,
    pub f_a: CoefficientPath<f64>,
    pub f_ai: CoefficientPath<f64>,
    pub f_b: CoefficientPath<f64>,
    pub f_bi: CoefficientPath<f64>,
    pub f_c: CoefficientPath<f64>,
}

/// State at which a strategy is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MarketState {
    pub t: f64,
    pub alpha: f64,
    /// Private signal; only read by [`trader_speed`].
    pub alpha_i: f64,
    pub q_bar: f64,
    /// Individual inventory; only read by [`trader_speed`].
    pub q_i: f64,
    /// Broker inventory per client.
    pub q_bar_b: f64,
}

impl MarketState {
    fn check(&self) -> Result<()> {
        let v = [
            self.t,
            self.alpha,
            self.alpha_i,
            self.q_bar,
            self.q_i,
            self.q_bar_b,
        ];
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("non-finite market state {self:?}")))
        }
    }
}

/// Solve the mean-field coefficients.
///
/// The Riccati block and the `(h_a, g_a)` system are integrated together in
/// one backward RK4 sweep, so the time-varying matrix of the linear system
/// is available exactly at every stage.
pub fn solve_mean_field(p: &ModelParams, grid: TimeGrid) -> Result<MeanFieldCoefficients> {
    validate_params(p).into_result()?;
    if (grid.horizon() - p.horizon).abs() > 1e-12 * p.horizon {
        return Err(Error::GridMismatch(format!(
            "grid horizon {} differs from T = {}",
            grid.horizon(),
            p.horizon
        )));
    }
    let sys = MeanFieldSystem::new(p, grid);
    let states = rk4_backward(
        "mean-field coefficients",
        &grid,
        |_, y| substeps_for(&grid, sys.stiffness(y)),
        sys.terminal(),
        |_, y| sys.rhs(y),
    )?;
    let derivs: Vec<Mf> = states.iter().map(|y| sys.rhs(y)).collect();
    let comp = |i: usize, sign: f64| {
        CoefficientPath::new(
            grid,
            states.iter().map(|y| sign * y[i]).collect(),
            Some(derivs.iter().map(|y| sign * y[i]).collect()),
        )
    };
    // Layout: P = -[[h_c, h_b], [g_c, g_b]] row-major, then (h_a, g_a).
    let h_c = comp(0, -1.0)?;
    let h_b = comp(1, -1.0)?;
    let g_c = comp(2, -1.0)?;
    let g_b = comp(3, -1.0)?;
    let h_a = comp(4, 1.0)?;
    let g_a = comp(5, 1.0)?;

    let m = grid.steps();
    let mut q_a = Vec::with_capacity(m + 1);
    for k in 0..m {
        let (num, den) = (h_a.at(k), g_a.at(k));
        q_a.push((den != 0.0).then(|| num / den));
    }
    q_a.push(Some(p.eta_i / p.eta_b));

    let mut mf = MeanFieldCoefficients {
        params: *p,
        g_a,
        g_b,
        g_c,
        h_a,
        h_b,
        h_c,
        q_a,
    };
    mf.pin_terminal_values();
    Ok(mf)
}

type Mf = SVector<f64, 6>;
type Tr = SVector<f64, 10>;

/// Right-hand side of the joint `(P, h_a, g_a)` system.
struct MeanFieldSystem {
    prob: MatrixRiccatiProblem,
    k_alpha: f64,
    cb: f64,
    ci: f64,
    source: Vector2<f64>,
}

impl MeanFieldSystem {
    fn new(p: &ModelParams, grid: TimeGrid) -> Self {
        Self {
            prob: MatrixRiccatiProblem::from_params(p, grid),
            k_alpha: p.k_alpha,
            cb: p.b / (2.0 * p.eta_b),
            ci: p.b / (2.0 * p.eta_i),
            source: Vector2::new(-1.0 / (2.0 * p.eta_b), -1.0 / (2.0 * p.eta_i)),
        }
    }

    fn terminal(&self) -> Mf {
        let s = self.prob.s;
        Mf::from_column_slice(&[s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)], 0.0, 0.0])
    }

    fn b_matrix(&self, y: &Mf) -> Matrix2<f64> {
        let (hc, hb, gc, gb) = (-y[0], -y[1], -y[2], -y[3]);
        Matrix2::new(
            self.k_alpha - hc,
            hc - hb - self.cb,
            -gc - self.ci,
            self.k_alpha + gc - gb,
        )
    }

    fn stiffness(&self, y: &Mf) -> f64 {
        let pm = Matrix2::new(y[0], y[1], y[2], y[3]);
        self.prob.stiffness(&pm).max(self.b_matrix(y).norm())
    }

    fn rhs(&self, y: &Mf) -> Mf {
        let pm = Matrix2::new(y[0], y[1], y[2], y[3]);
        let dp = self.prob.rhs(&pm);
        let dx = self.source + self.b_matrix(y) * Vector2::new(y[4], y[5]);
        Mf::from_column_slice(&[dp[(0, 0)], dp[(0, 1)], dp[(1, 0)], dp[(1, 1)], dx[0], dx[1]])
    }
}

impl MeanFieldCoefficients {
    pub fn grid(&self) -> &TimeGrid {
        self.g_a.grid()
    }

    // Terminal values are assigned rather than trusted to the integrator.
    fn pin_terminal_values(&mut self) {
        let p = self.params;
        let m = self.grid().steps();
        let set = |c: &mut CoefficientPath<f64>, v: f64| c.set(m, v);
        set(&mut self.g_a, 0.0);
        set(&mut self.h_a, 0.0);
        set(&mut self.g_c, 0.0);
        set(&mut self.h_b, 0.0);
        set(&mut self.g_b, -p.a_bar / p.eta_i);
        set(&mut self.h_c, -(2.0 * p.a_b - p.b) / (2.0 * p.eta_b));
    }

    /// Externalisation rate `q_a` at node `k`.
    pub fn q_a_at(&self, k: usize) -> Result<f64> {
        self.q_a[k].ok_or(Error::UndefinedRate {
            node: k,
            t: self.grid().t(k),
        })
    }

    /// All node values of `q_a`; `None` marks nodes where it is undefined.
    pub fn q_a_values(&self) -> &[Option<f64>] {
        &self.q_a
    }

    /// Estimate of `lim_{t -> T-} h_a/g_a` from the grid alone: the last four
    /// interior nodes, extrapolated to `T` by a cubic through them.
    pub fn q_a_one_sided_limit(&self) -> Result<f64> {
        let grid = self.grid();
        let m = grid.steps();
        if m < 5 {
            return Err(Error::InvalidInput(
                "one-sided limit needs at least 5 grid steps".into(),
            ));
        }
        let mut ts = [0.0; 4];
        let mut qs = [0.0; 4];
        for j in 0..4 {
            let k = m - 1 - j;
            ts[j] = grid.t(k);
            qs[j] = self.q_a_at(k)?;
        }
        Ok(neville(&ts, &qs, grid.horizon()))
    }

    /// [`Self::q_a_one_sided_limit`] on a grid `refine` times finer, solved
    /// over the last 20 steps only. The coefficient equations do not depend
    /// on `t` explicitly, so that window reproduces the tail of the full
    /// solution.
    pub fn q_a_one_sided_limit_refined(&self, refine: usize) -> Result<f64> {
        let grid = self.grid();
        let window = 20.min(grid.steps());
        let p = ModelParams {
            horizon: grid.step() * window as f64,
            ..self.params
        };
        let local = solve_mean_field(&p, crate::params::make_grid(p.horizon, window * refine.max(1))?)?;
        local.q_a_one_sided_limit()
    }

    /// Copy with every `g_b` value (and derivative) multiplied by `factor`.
    /// Only useful to build deliberately wrong strategies.
    pub fn with_scaled_g_b(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.g_b = self.g_b.map(|v| v * factor);
        out
    }

    /// `(g_a, g_b, g_c)` at node `k`.
    pub fn g_at(&self, k: usize) -> [f64; 3] {
        [self.g_a.at(k), self.g_b.at(k), self.g_c.at(k)]
    }

    /// `(h_a, h_b, h_c)` at node `k`.
    pub fn h_at(&self, k: usize) -> [f64; 3] {
        [self.h_a.at(k), self.h_b.at(k), self.h_c.at(k)]
    }
}

fn neville(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for level in 1..n {
        for i in 0..n - level {
            let j = i + level;
            p[i] = ((x - xs[j]) * p[i] + (xs[i] - x) * p[i + 1]) / (xs[i] - xs[j]);
        }
    }
    p[0]
}

/// Solve the loadings of a trader of type `tt` facing the equilibrium `mf`.
///
/// `f_bI` is the closed form. `f_aI`, `(f_b, f_c)` and `f_a` are integrated
/// backward in one RK4 sweep together with the mean-field system they
/// depend on, using at least as many sub-steps as the mean-field solve.
pub fn solve_trader(
    p: &ModelParams,
    tt: &TraderType,
    mf: &MeanFieldCoefficients,
) -> Result<TraderCoefficients> {
    tt.validate()?;
    if mf.params != *p {
        return Err(Error::InvalidInput(
            "mean-field coefficients were solved for different parameters".into(),
        ));
    }
    let grid = *mf.grid();
    let horizon = grid.horizon();
    let eta = p.eta_i;
    let fbi = |t: f64| closed_form_fbi(t, tt, eta, horizon);
    let f_bi = CoefficientPath::from_fn(grid, fbi, |t| {
        closed_form_fbi_derivative(t, tt, eta, horizon)
    })?;

    let sys = MeanFieldSystem::new(p, grid);
    let half_inv_eta = 1.0 / (2.0 * eta);
    let ci = sys.ci;
    let rhs = |t: f64, y: &Tr| -> Tr {
        let head: Mf = y.fixed_rows::<6>(0).into_owned();
        let d = sys.rhs(&head);
        let (hc, hb, gc, gb, ha, ga) = (-y[0], -y[1], -y[2], -y[3], y[4], y[5]);
        let (fb, fc, fa, fai) = (y[6], y[7], y[8], y[9]);
        let f = fbi(t);
        let dfb = -(gb + f) * fb - (hb - gb) * fc - ci * hb;
        let dfc = -gc * fb - (hc - gc + f) * fc - ci * hc;
        let ba = -fb * ga - fc * (ha - ga) - (p.b * ha + 1.0) * half_inv_eta;
        let dfa = (p.k_alpha - f) * fa + ba;
        let dfai = (tt.k_i - f) * fai - half_inv_eta;
        let mut out = Tr::zeros();
        out.fixed_rows_mut::<6>(0).copy_from(&d);
        out[6] = dfb;
        out[7] = dfc;
        out[8] = dfa;
        out[9] = dfai;
        out
    };
    // Never fewer sub-steps than the mean-field solve takes on the same
    // interval, so that the embedded mean-field block is reproduced exactly.
    let substeps = |t: f64, y: &Tr| {
        let head: Mf = y.fixed_rows::<6>(0).into_owned();
        let own = tt.k_i.max(p.k_alpha) + fbi(t).abs() + y[0].abs() + y[3].abs();
        substeps_for(&grid, sys.stiffness(&head)).max(substeps_for(&grid, own))
    };
    let mut terminal = Tr::zeros();
    terminal.fixed_rows_mut::<6>(0).copy_from(&sys.terminal());
    let states = rk4_backward("trader coefficients", &grid, substeps, terminal, rhs)?;
    let derivs: Vec<Tr> = states
        .iter()
        .enumerate()
        .map(|(k, y)| rhs(grid.t(k), y))
        .collect();
    let comp = |i: usize| {
        CoefficientPath::new(
            grid,
            states.iter().map(|y| y[i]).collect(),
            Some(derivs.iter().map(|y| y[i]).collect()),
        )
    };

    let mut tc = TraderCoefficients {
        trader_type: *tt,
        f_a: comp(8)?,
        f_ai: comp(9)?,
        f_b: comp(6)?,
        f_bi,
        f_c: comp(7)?,
    };
    tc.pin_terminal_values(eta);
    Ok(tc)
}

impl TraderCoefficients {
    /// Loadings of a trader whose penalties are the population means,
    /// assembled from the mean-field loadings: `f_a = g_a`,
    /// `f_b = g_b - f_bI`, `f_c = g_c`; `f_aI` comes from [`solve_trader`].
    ///
    /// Averaging this trader's strategy over its private signal returns the
    /// mean-field strategy to rounding error.
    pub fn representative(
        p: &ModelParams,
        k_i: f64,
        sigma_i: f64,
        mf: &MeanFieldCoefficients,
    ) -> Result<Self> {
        let tt = TraderType::new(k_i, sigma_i, p.a_bar, p.phi_bar)?;
        let solved = solve_trader(p, &tt, mf)?;
        let (f_ai, f_bi) = (solved.f_ai, solved.f_bi);
        let eta = p.eta_i;
        let f_b = mf.g_b.zip_with(&f_bi, |gb, fbi| gb - fbi)?;
        let mut tc = Self {
            trader_type: tt,
            f_a: mf.g_a.clone(),
            f_ai,
            f_b,
            f_bi,
            f_c: mf.g_c.clone(),
        };
        tc.pin_terminal_values(eta);
        Ok(tc)
    }

    pub fn grid(&self) -> &TimeGrid {
        self.f_a.grid()
    }

    fn pin_terminal_values(&mut self, eta_i: f64) {
        let m = self.grid().steps();
        self.f_a.set(m, 0.0);
        self.f_ai.set(m, 0.0);
        self.f_b.set(m, 0.0);
        self.f_c.set(m, 0.0);
        self.f_bi.set(m, -self.trader_type.a_i / eta_i);
    }

    /// `(f_a, f_aI, f_b, f_bI, f_c)` at node `k`.
    pub fn at(&self, k: usize) -> [f64; 5] {
        [
            self.f_a.at(k),
            self.f_ai.at(k),
            self.f_b.at(k),
            self.f_bi.at(k),
            self.f_c.at(k),
        ]
    }
}

/// `nu_B = h_a alpha + h_b Q_bar + h_c Q_bar_B`.
pub fn broker_speed(mf: &MeanFieldCoefficients, s: &MarketState) -> Result<f64> {
    s.check()?;
    Ok(mf.h_a.eval(s.t)? * s.alpha + mf.h_b.eval(s.t)? * s.q_bar + mf.h_c.eval(s.t)? * s.q_bar_b)
}

/// `nu_bar = g_a alpha + g_b Q_bar + g_c Q_bar_B`.
pub fn mean_field_speed(mf: &MeanFieldCoefficients, s: &MarketState) -> Result<f64> {
    s.check()?;
    Ok(mf.g_a.eval(s.t)? * s.alpha + mf.g_b.eval(s.t)? * s.q_bar + mf.g_c.eval(s.t)? * s.q_bar_b)
}

/// `nu_I = f_a alpha + f_aI alpha_I + f_b Q_bar + f_bI Q_I + f_c Q_bar_B`.
pub fn trader_speed(tc: &TraderCoefficients, s: &MarketState) -> Result<f64> {
    s.check()?;
    let t = s.t;
    Ok(tc.f_a.eval(t)? * s.alpha
        + tc.f_ai.eval(t)? * s.alpha_i
        + tc.f_b.eval(t)? * s.q_bar
        + tc.f_bi.eval(t)? * s.q_i
        + tc.f_c.eval(t)? * s.q_bar_b)
}

/// `q_a(t) = h_a(t) / g_a(t)`, with the limit `eta_I / eta_B` at `T`.
pub fn externalisation_rate(mf: &MeanFieldCoefficients, t: f64) -> Result<f64> {
    let grid = mf.grid();
    let (k, theta) = grid.locate(t)?;
    if k + 1 == grid.steps() && theta == 1.0 {
        return mf.q_a_at(grid.steps());
    }
    if theta == 0.0 {
        return mf.q_a_at(k);
    }
    let (num, den) = (mf.h_a.eval(t)?, mf.g_a.eval(t)?);
    if den == 0.0 {
        return Err(Error::UndefinedRate { node: k, t });
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::make_grid;

    fn desk(m: usize) -> (ModelParams, MeanFieldCoefficients) {
        let p = ModelParams::default();
        let mf = solve_mean_field(&p, make_grid(p.horizon, m).unwrap()).unwrap();
        (p, mf)
    }

    #[test]
    fn terminal_values_are_assigned() {
        let (p, mf) = desk(1000);
        let m = 1000;
        assert_eq!(mf.g_a.at(m), 0.0);
        assert_eq!(mf.h_a.at(m), 0.0);
        assert_eq!(mf.g_c.at(m), 0.0);
        assert_eq!(mf.h_b.at(m), 0.0);
        assert_eq!(mf.g_b.at(m), -1000.0);
        assert_eq!(mf.h_c.at(m), -(2.0 - p.b) / (2.0 * p.eta_b));
        assert_eq!(mf.q_a_at(m).unwrap(), p.eta_i / p.eta_b);
    }

    #[test]
    fn signs_under_desk_parameters() {
        let (_, mf) = desk(10_000);
        let m = 10_000;
        for k in 0..=m {
            for v in [mf.g_b.at(k), mf.g_c.at(k), mf.h_b.at(k), mf.h_c.at(k)] {
                assert!(v <= 0.0, "node {k}: {v}");
            }
            if k < m {
                assert!(mf.g_a.at(k) > 0.0 && mf.h_a.at(k) > 0.0, "node {k}");
            }
        }
    }

    #[test]
    fn origin_state_trades_nothing() {
        let (p, mf) = desk(500);
        let tc = solve_trader(&p, &TraderType::default(), &mf).unwrap();
        let s = MarketState {
            t: 0.37,
            ..Default::default()
        };
        assert_eq!(broker_speed(&mf, &s).unwrap(), 0.0);
        assert_eq!(mean_field_speed(&mf, &s).unwrap(), 0.0);
        assert_eq!(trader_speed(&tc, &s).unwrap(), 0.0);
    }

    #[test]
    fn terminal_loadings_on_inventory() {
        let (p, mf) = desk(500);
        let tc = solve_trader(&p, &TraderType::default(), &mf).unwrap();
        let q = 3.5;
        let s = MarketState {
            t: 1.0,
            alpha: 0.7,
            q_bar: -1.25,
            q_bar_b: q,
            ..Default::default()
        };
        assert_eq!(
            broker_speed(&mf, &s).unwrap(),
            -(2.0 - p.b) / (2.0 * p.eta_b) * q
        );
        let s = MarketState {
            t: 1.0,
            q_bar: q,
            ..Default::default()
        };
        assert_eq!(mean_field_speed(&mf, &s).unwrap(), -1000.0 * q);
        let s = MarketState {
            t: 1.0,
            q_i: q,
            ..Default::default()
        };
        assert_eq!(trader_speed(&tc, &s).unwrap(), -1000.0 * q);
    }

    #[test]
    fn out_of_range_times_are_rejected() {
        let (_, mf) = desk(100);
        let s = MarketState {
            t: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            broker_speed(&mf, &s),
            Err(Error::OutOfRange { .. })
        ));
        assert!(externalisation_rate(&mf, -0.1).is_err());
    }

    #[test]
    fn symmetric_costs_give_unit_terminal_rate() {
        let p = ModelParams {
            eta_b: 1e-3,
            ..Default::default()
        };
        let mf = solve_mean_field(&p, make_grid(1.0, 200).unwrap()).unwrap();
        assert_eq!(externalisation_rate(&mf, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn invalid_parameters_block_the_solve() {
        let p = ModelParams {
            b: 3e-3,
            ..Default::default()
        };
        match solve_mean_field(&p, make_grid(1.0, 100).unwrap()) {
            Err(Error::Validation(r)) => {
                assert!(r.violations().any(|c| c.inequality == "b <= 2 eta_I"))
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn zero_impact_decouples_cross_terms() {
        // With b = 0 the mean-field trader's Riccati block does not see the
        // broker at all: g_b solves the scalar trader equation.
        let p = ModelParams {
            b: 0.0,
            ..Default::default()
        };
        let grid = make_grid(1.0, 2000).unwrap();
        let mf = solve_mean_field(&p, grid).unwrap();
        let tt = TraderType::representative(&p);
        for k in (0..=2000).step_by(97) {
            let expected = closed_form_fbi(grid.t(k), &tt, p.eta_i, 1.0);
            assert!((mf.g_b.at(k) - expected).abs() <= 1e-8 * expected.abs());
            assert!(mf.g_c.at(k).abs() <= 1e-10);
        }
    }

    #[test]
    fn representative_constructor_matches_the_integrated_trader() {
        let (p, mf) = desk(10_000);
        let rep = TraderCoefficients::representative(&p, p.k_alpha, 0.5, &mf).unwrap();
        let solved = solve_trader(&p, &rep.trader_type, &mf).unwrap();
        for k in 0..=10_000 {
            let (a, b) = (rep.at(k), solved.at(k));
            for j in 0..5 {
                assert!((a[j] - b[j]).abs() <= 1e-7, "node {k}, loading {j}: {} vs {}", a[j], b[j]);
            }
        }
    }

    #[test]
    fn larger_terminal_penalty_pushes_harder() {
        let grid = make_grid(1.0, 2000).unwrap();
        let g_b0: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&a_bar| {
                let p = ModelParams {
                    a_bar,
                    ..Default::default()
                };
                solve_mean_field(&p, grid).unwrap().g_b.at(0)
            })
            .collect();
        assert!(g_b0[0] > g_b0[1] && g_b0[1] > g_b0[2], "{g_b0:?}");
    }
}
