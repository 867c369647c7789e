//! Backward-in-time solvers for the coefficient equations.
//!
//! Three building blocks cover every coefficient of the equilibrium:
//!
//! * the 2x2 matrix Riccati equation `dP/dt + Y P - P U P - Q = 0`,
//!   `P_T = S`, integrated directly ([`solve_mrde_direct`]) or through the
//!   linear representation `P = T R^{-1}` ([`solve_mrde_linearized`]);
//! * time-varying linear systems `dX/dt = A(t) X + c(t)` with terminal data
//!   ([`integrate_linear_backward`]);
//! * the scalar trader Riccati equation, which has a closed form
//!   ([`closed_form_fbi`]).
//!
//! All integrators are classical RK4 stepping backward from `T` over the
//! uniform grid. Each grid interval is split into equal sub-steps whose
//! number is chosen from a local stiffness estimate `L` at the start of the
//! interval, so that `h_sub * L` stays below [`MAX_STEP_STIFFNESS`]; results
//! are only recorded at grid nodes. Near `T` the loadings relax over a time
//! of order `eta / a`, a few grid steps at the desk parameters, and that is
//! the only place where sub-steps are actually taken.

use std::ops::{Add, Mul};

use nalgebra::{Matrix2, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::params::{ModelParams, TimeGrid, TraderType};

/// Upper bound on `h_sub * L`, with `L` a Lipschitz bound of the right-hand
/// side, used to pick the number of RK4 sub-steps per grid interval.
pub const MAX_STEP_STIFFNESS: f64 = 0.005;

/// Condition number of `R_t` above which the linearised representation is
/// considered broken.
pub const MAX_CONDITION: f64 = 1e12;

/// Values that can be stepped by RK4 and interpolated.
pub trait OdeState: Copy + Add<Output = Self> + Mul<f64, Output = Self> {
    fn is_finite(&self) -> bool;
    fn zero() -> Self;
}

impl OdeState for f64 {
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn zero() -> Self {
        0.0
    }
}

impl<const R: usize, const C: usize> OdeState for SMatrix<f64, R, C> {
    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
    fn zero() -> Self {
        SMatrix::zeros()
    }
}

/// A coefficient sampled at every node of a grid, optionally with its time
/// derivative at the nodes.
///
/// With derivatives present, [`CoefficientPath::eval`] uses cubic Hermite
/// interpolation between nodes; otherwise it interpolates linearly.
#[derive(Debug, Clone)]
pub struct CoefficientPath<V> {
    grid: TimeGrid,
    values: Vec<V>,
    derivatives: Option<Vec<V>>,
}

impl<V: OdeState> CoefficientPath<V> {
    pub fn new(grid: TimeGrid, values: Vec<V>, derivatives: Option<Vec<V>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid with {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(d) = &derivatives {
            if d.len() != grid.len() {
                return Err(Error::GridMismatch(format!(
                    "{} derivatives for a grid with {} nodes",
                    d.len(),
                    grid.len()
                )));
            }
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                what: "coefficient path",
                node: k,
                t: grid.t(k),
            });
        }
        Ok(Self {
            grid,
            values,
            derivatives,
        })
    }

    /// Sample `f` at every node, recording `df` as the derivative.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> V, df: impl Fn(f64) -> V) -> Result<Self> {
        let ts = grid.times();
        Self::new(
            grid,
            ts.iter().map(|&t| f(t)).collect(),
            Some(ts.iter().map(|&t| df(t)).collect()),
        )
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn derivatives(&self) -> Option<&[V]> {
        self.derivatives.as_deref()
    }

    pub fn at(&self, k: usize) -> V {
        self.values[k]
    }

    pub fn terminal(&self) -> V {
        self.values[self.values.len() - 1]
    }

    pub fn map<W: OdeState>(&self, f: impl Fn(&V) -> W) -> CoefficientPath<W> {
        CoefficientPath {
            grid: self.grid,
            values: self.values.iter().map(&f).collect(),
            derivatives: self
                .derivatives
                .as_ref()
                .map(|d| d.iter().map(&f).collect()),
        }
    }

    /// Combine two paths on the same grid node by node. Derivatives are
    /// combined too, which is only meaningful for linear `f`.
    pub fn zip_with(&self, other: &Self, f: impl Fn(V, V) -> V) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("paths live on different grids".into()));
        }
        let zip = |a: &[V], b: &[V]| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect();
        let derivatives = match (&self.derivatives, &other.derivatives) {
            (Some(a), Some(b)) => Some(zip(a, b)),
            _ => None,
        };
        Self::new(self.grid, zip(&self.values, &other.values), derivatives)
    }

    pub(crate) fn set(&mut self, k: usize, v: V) {
        self.values[k] = v;
    }

    /// Value at an arbitrary `t` in `[0, T]`.
    pub fn eval(&self, t: f64) -> Result<V> {
        let (k, theta) = self.grid.locate(t)?;
        Ok(self.interpolate(k, theta))
    }

    pub(crate) fn interpolate(&self, k: usize, theta: f64) -> V {
        if theta == 0.0 {
            return self.values[k];
        }
        if theta == 1.0 {
            return self.values[k + 1];
        }
        let (y0, y1) = (self.values[k], self.values[k + 1]);
        match &self.derivatives {
            Some(d) => {
                let h = self.grid.step();
                let t = theta;
                let t2 = t * t;
                let t3 = t2 * t;
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + t;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                y0 * h00 + d[k] * (h10 * h) + y1 * h01 + d[k + 1] * (h11 * h)
            }
            None => y0 * (1.0 - theta) + y1 * theta,
        }
    }
}

/// Number of RK4 sub-steps per grid interval for a stiffness estimate `stiffness`.
pub fn substeps_for(grid: &TimeGrid, stiffness: f64) -> usize {
    let n = (grid.step() * stiffness / MAX_STEP_STIFFNESS).ceil();
    if n.is_finite() && n >= 1.0 {
        n as usize
    } else {
        1
    }
}

/// Classical RK4 for `dy/dt = rhs(t, y)`, stepping backward from `y(T) =
/// terminal` and recording the state at every grid node.
///
/// `substeps(t, y)` gives the number of equal sub-steps for the interval
/// ending at `t`, given the state `y` there.
pub fn rk4_backward<S: OdeState>(
    what: &'static str,
    grid: &TimeGrid,
    substeps: impl Fn(f64, &S) -> usize,
    terminal: S,
    rhs: impl Fn(f64, &S) -> S,
) -> Result<Vec<S>> {
    let m = grid.steps();
    let mut out = vec![S::zero(); m + 1];
    out[m] = terminal;
    let mut y = terminal;
    for k in (0..m).rev() {
        let t_hi = grid.t(k + 1);
        let substeps = substeps(t_hi, &y).max(1);
        let h = grid.step() / substeps as f64;
        for j in 0..substeps {
            // Anchor sub-step times to the grid so that rounding does not drift.
            let t = if j == 0 {
                t_hi
            } else {
                t_hi - grid.step() * (j as f64 / substeps as f64)
            };
            y = rk4_step_back(t, h, &y, &rhs);
        }
        if !y.is_finite() {
            return Err(Error::BlowUp {
                what,
                node: k,
                t: grid.t(k),
            });
        }
        out[k] = y;
    }
    Ok(out)
}

fn rk4_step_back<S: OdeState>(t: f64, h: f64, y: &S, rhs: &impl Fn(f64, &S) -> S) -> S {
    let k1 = rhs(t, y);
    let k2 = rhs(t - 0.5 * h, &(*y + k1 * (-0.5 * h)));
    let k3 = rhs(t - 0.5 * h, &(*y + k2 * (-0.5 * h)));
    let k4 = rhs(t - h, &(*y + k3 * (-h)));
    *y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (-h / 6.0)
}

/// Data of the inventory-loading Riccati equation
/// `dP/dt + Y P - P U P - Q = 0`, `P_T = S`.
#[derive(Debug, Clone, Copy)]
pub struct MatrixRiccatiProblem {
    pub u: Matrix2<f64>,
    pub y: Matrix2<f64>,
    pub q: Matrix2<f64>,
    pub s: Matrix2<f64>,
    pub grid: TimeGrid,
}

impl MatrixRiccatiProblem {
    /// The equation whose solution is `P = -[[h_c, h_b], [g_c, g_b]]`.
    pub fn from_params(p: &ModelParams, grid: TimeGrid) -> Self {
        Self {
            u: Matrix2::new(1.0, -1.0, 0.0, 1.0),
            y: Matrix2::new(0.0, p.b / (2.0 * p.eta_b), p.b / (2.0 * p.eta_i), 0.0),
            q: Matrix2::new(-p.phi_b / p.eta_b, 0.0, 0.0, -p.phi_bar / p.eta_i),
            s: Matrix2::new(
                (2.0 * p.a_b - p.b) / (2.0 * p.eta_b),
                0.0,
                0.0,
                p.a_bar / p.eta_i,
            ),
            grid,
        }
    }

    /// `dP/dt = -Y P + P U P + Q`.
    pub fn rhs(&self, p: &Matrix2<f64>) -> Matrix2<f64> {
        -self.y * p + p * self.u * p + self.q
    }

    /// Bound on the norm of the linearised right-hand side at `p`:
    /// `|d -> -Y d + d U P + P U d| <= |Y| + 2 |U| |P|` (Frobenius norms).
    pub fn stiffness(&self, p: &Matrix2<f64>) -> f64 {
        self.y.norm() + 2.0 * self.u.norm() * p.norm()
    }

    fn hamiltonian(&self) -> SMatrix<f64, 4, 4> {
        let mut l = SMatrix::<f64, 4, 4>::zeros();
        l.fixed_view_mut::<2, 2>(0, 2).copy_from(&(-self.u));
        l.fixed_view_mut::<2, 2>(2, 0).copy_from(&self.q);
        l.fixed_view_mut::<2, 2>(2, 2).copy_from(&(-self.y));
        l
    }
}

/// Integrate the matrix Riccati equation directly with RK4, backward from `P_T = S`.
pub fn solve_mrde_direct(prob: &MatrixRiccatiProblem) -> Result<CoefficientPath<Matrix2<f64>>> {
    mrde_direct(prob, |_, p| substeps_for(&prob.grid, prob.stiffness(p)))
}

/// [`solve_mrde_direct`] with a fixed number of sub-steps per interval;
/// `1` is plain RK4 on the grid.
pub fn solve_mrde_direct_with(
    prob: &MatrixRiccatiProblem,
    substeps: usize,
) -> Result<CoefficientPath<Matrix2<f64>>> {
    mrde_direct(prob, |_, _| substeps)
}

fn mrde_direct(
    prob: &MatrixRiccatiProblem,
    substeps: impl Fn(f64, &Matrix2<f64>) -> usize,
) -> Result<CoefficientPath<Matrix2<f64>>> {
    let values = rk4_backward("matrix Riccati", &prob.grid, substeps, prob.s, |_, p| {
        prob.rhs(p)
    })?;
    let derivatives = values.iter().map(|p| prob.rhs(p)).collect();
    CoefficientPath::new(prob.grid, values, Some(derivatives))
}

/// Solve the Riccati equation through `P_t = T_t R_t^{-1}`, where
/// `d/dt (R; T) = [[0, -U], [Q, -Y]] (R; T)` and `(R_T; T_T) = (I; S)`.
pub fn solve_mrde_linearized(
    prob: &MatrixRiccatiProblem,
) -> Result<CoefficientPath<Matrix2<f64>>> {
    let l = prob.hamiltonian();
    let mut terminal = SMatrix::<f64, 4, 2>::zeros();
    terminal
        .fixed_view_mut::<2, 2>(0, 0)
        .copy_from(&Matrix2::identity());
    terminal.fixed_view_mut::<2, 2>(2, 0).copy_from(&prob.s);
    let substeps = substeps_for(&prob.grid, l.norm());
    let states = rk4_backward(
        "linearised Riccati",
        &prob.grid,
        |_, _| substeps,
        terminal,
        |_, z| l * z,
    )?;
    let mut values = Vec::with_capacity(states.len());
    for (k, z) in states.iter().enumerate() {
        let r: Matrix2<f64> = z.fixed_view::<2, 2>(0, 0).into_owned();
        let t: Matrix2<f64> = z.fixed_view::<2, 2>(2, 0).into_owned();
        let condition = condition_number(&r);
        if !(condition <= MAX_CONDITION) {
            return Err(Error::RepresentationBreakdown {
                node: k,
                t: prob.grid.t(k),
                condition,
            });
        }
        let r_inv = r.try_inverse().ok_or(Error::RepresentationBreakdown {
            node: k,
            t: prob.grid.t(k),
            condition: f64::INFINITY,
        })?;
        values.push(t * r_inv);
    }
    let derivatives = values.iter().map(|p| prob.rhs(p)).collect();
    CoefficientPath::new(prob.grid, values, Some(derivatives))
}

fn condition_number(m: &Matrix2<f64>) -> f64 {
    let sv = m.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solve `dX/dt = A(t) X + c(t)` backward from `X_T = terminal` with RK4.
///
/// `a` and `c` may be evaluated at any time in `[0, T]`; for coefficients
/// known only on the grid, pass closures over [`CoefficientPath::eval`].
/// The returned path carries `A X + c` at the nodes as its derivative.
pub fn integrate_linear_backward<const N: usize>(
    grid: &TimeGrid,
    terminal: SVector<f64, N>,
    a: impl Fn(f64) -> SMatrix<f64, N, N>,
    c: impl Fn(f64) -> SVector<f64, N>,
) -> Result<CoefficientPath<SVector<f64, N>>> {
    let substeps = |t: f64, _: &SVector<f64, N>| substeps_for(grid, a(t).norm());
    linear_backward(grid, substeps, terminal, &a, &c)
}

/// [`integrate_linear_backward`] with a fixed number of sub-steps per interval.
pub fn integrate_linear_backward_with<const N: usize>(
    grid: &TimeGrid,
    substeps: usize,
    terminal: SVector<f64, N>,
    a: impl Fn(f64) -> SMatrix<f64, N, N>,
    c: impl Fn(f64) -> SVector<f64, N>,
) -> Result<CoefficientPath<SVector<f64, N>>> {
    linear_backward(grid, |_, _| substeps, terminal, &a, &c)
}

fn linear_backward<const N: usize>(
    grid: &TimeGrid,
    substeps: impl Fn(f64, &SVector<f64, N>) -> usize,
    terminal: SVector<f64, N>,
    a: &impl Fn(f64) -> SMatrix<f64, N, N>,
    c: &impl Fn(f64) -> SVector<f64, N>,
) -> Result<CoefficientPath<SVector<f64, N>>> {
    let rhs = |t: f64, x: &SVector<f64, N>| a(t) * x + c(t);
    let values = rk4_backward("linear system", grid, substeps, terminal, rhs)?;
    let derivatives = values
        .iter()
        .enumerate()
        .map(|(k, x)| rhs(grid.t(k), x))
        .collect();
    CoefficientPath::new(*grid, values, Some(derivatives))
}

/// Inventory loading `f^{b,I}_t` of an individual trader, in closed form.
///
/// With `gamma = sqrt(phi_I / eta_I)` and `tau = T - t` the solution of
/// `df/dt = phi_I/eta_I - f^2`, `f_T = -a_I/eta_I`, is
/// `-gamma tanh(gamma tau) - sech^2(gamma tau) / (eta_I/a_I + tanh(gamma tau)/gamma)`.
pub fn closed_form_fbi(t: f64, tt: &TraderType, eta_i: f64, horizon: f64) -> f64 {
    let gamma = (tt.phi_i / eta_i).sqrt();
    let tau = (horizon - t).max(0.0);
    let th = (gamma * tau).tanh();
    // sech^2 = 1 - tanh^2 loses everything once tanh rounds to 1; use cosh.
    let c = (gamma * tau).cosh();
    let sech2 = if c.is_finite() { 1.0 / (c * c) } else { 0.0 };
    -gamma * th - sech2 / (eta_i / tt.a_i + th / gamma)
}

/// Time derivative of [`closed_form_fbi`], from the Riccati equation it solves.
pub fn closed_form_fbi_derivative(t: f64, tt: &TraderType, eta_i: f64, horizon: f64) -> f64 {
    let f = closed_form_fbi(t, tt, eta_i, horizon);
    tt.phi_i / eta_i - f * f
}
