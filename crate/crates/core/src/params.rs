//! Model parameters, trader types, the time grid and the standing
//! assumptions that make the equilibrium well posed.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Market and preference constants of the mean-field problem.
///
/// Defaults are the desk parameter set used throughout the examples and
/// figures: `k_alpha = 5`, `sigma_alpha = sigma_s = 1`, `b = 1e-3`,
/// `eta_i = 1e-3`, `eta_b = 1.2e-3`, `a_b = a_bar = 1`,
/// `phi_b = phi_bar = 1e-2`, `T = 1`, `S0 = 100`, `alpha0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Mean-reversion rate of the common signal.
    pub k_alpha: f64,
    /// Volatility of the common signal.
    pub sigma_alpha: f64,
    /// Volatility of the mid-price.
    #[serde(rename = "sigma_S")]
    pub sigma_s: f64,
    /// Permanent price impact of the broker's lit-market trading.
    pub b: f64,
    /// Transaction cost the broker charges its clients.
    #[serde(rename = "eta_I")]
    pub eta_i: f64,
    /// Transaction cost in the lit market.
    #[serde(rename = "eta_B")]
    pub eta_b: f64,
    /// Broker terminal inventory penalty.
    #[serde(rename = "a_B")]
    pub a_b: f64,
    /// Broker running inventory penalty.
    #[serde(rename = "phi_B")]
    pub phi_b: f64,
    /// Mean terminal penalty of the traders.
    pub a_bar: f64,
    /// Mean running penalty of the traders.
    pub phi_bar: f64,
    /// Horizon.
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "S0")]
    pub s0: f64,
    pub alpha0: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            k_alpha: 5.0,
            sigma_alpha: 1.0,
            sigma_s: 1.0,
            b: 1e-3,
            eta_i: 1e-3,
            eta_b: 1.2e-3,
            a_b: 1.0,
            phi_b: 1e-2,
            a_bar: 1.0,
            phi_bar: 1e-2,
            horizon: 1.0,
            s0: 100.0,
            alpha0: 0.0,
        }
    }
}

/// Idiosyncratic parameters of one informed trader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraderType {
    /// Mean-reversion rate of the private signal.
    #[serde(rename = "k_I")]
    pub k_i: f64,
    /// Volatility of the private signal.
    #[serde(rename = "sigma_I")]
    pub sigma_i: f64,
    /// Terminal inventory penalty.
    #[serde(rename = "a_I")]
    pub a_i: f64,
    /// Running inventory penalty.
    #[serde(rename = "phi_I")]
    pub phi_i: f64,
}

impl Default for TraderType {
    fn default() -> Self {
        Self {
            k_i: 5.0,
            sigma_i: 0.5,
            a_i: 1.0,
            phi_i: 1e-2,
        }
    }
}

impl TraderType {
    pub fn new(k_i: f64, sigma_i: f64, a_i: f64, phi_i: f64) -> Result<Self> {
        let tt = Self {
            k_i,
            sigma_i,
            a_i,
            phi_i,
        };
        tt.validate()?;
        Ok(tt)
    }

    /// The type whose penalties equal the population means and whose
    /// private signal mirrors the common one.
    pub fn representative(p: &ModelParams) -> Self {
        Self {
            k_i: p.k_alpha,
            sigma_i: p.sigma_alpha,
            a_i: p.a_bar,
            phi_i: p.phi_bar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_i.is_finite() && self.sigma_i >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "trader type field sigma_i must be nonnegative, got {}",
                self.sigma_i
            )));
        }
        let fields = [("k_i", self.k_i), ("a_i", self.a_i), ("phi_i", self.phi_i)];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "trader type field {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Stable key for caching per-type coefficients.
    pub(crate) fn key(&self) -> [u64; 4] {
        [
            self.k_i.to_bits(),
            self.sigma_i.to_bits(),
            self.a_i.to_bits(),
            self.phi_i.to_bits(),
        ]
    }
}

/// Uniform discretisation of `[0, T]` with `M` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

/// Build the uniform grid `t_k = k T / M`, `k = 0..=M`.
pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidInput(format!(
            "grid horizon must be positive, got {horizon}"
        )));
    }
    if steps < 2 {
        return Err(Error::InvalidInput(format!(
            "grid needs at least 2 steps, got {steps}"
        )));
    }
    Ok(TimeGrid { horizon, steps })
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `M`; there are `M + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        if k == self.steps {
            self.horizon
        } else {
            (k as f64 * self.horizon) / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }

    /// Grid with the same horizon and `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid {
            horizon: self.horizon,
            steps: self.steps * factor.max(1),
        }
    }

    /// Interval index `k` and fractional position `theta` in `[0, 1]` such
    /// that `t = t_k + theta h`. Times within a rounding error of the
    /// endpoints are clamped; anything else outside `[0, T]` is rejected.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let slack = 1e-12 * self.horizon;
        if !t.is_finite() || t < -slack || t > self.horizon + slack {
            return Err(Error::OutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let t = t.clamp(0.0, self.horizon);
        let x = t / self.step();
        let mut k = (x.floor() as usize).min(self.steps - 1);
        if k > 0 && t < self.t(k) {
            k -= 1;
        }
        let theta = if t >= self.t(k + 1) {
            1.0
        } else {
            ((t - self.t(k)) / self.step()).clamp(0.0, 1.0)
        };
        Ok((k, theta))
    }

    /// Index of the node nearest to `t`, if `t` is within `tol` of it.
    pub fn node_index(&self, t: f64, tol: f64) -> Option<usize> {
        let (k, theta) = self.locate(t).ok()?;
        let k = if theta > 0.5 { k + 1 } else { k };
        ((self.t(k) - t).abs() <= tol).then_some(k)
    }
}

/// Outcome of a single standing assumption.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    /// The inequality, written out.
    pub inequality: String,
    pub passed: bool,
    /// Left-hand side minus right-hand side, signed so that `>= 0` passes.
    pub slack: f64,
}

/// Pass/fail report over every standing assumption on [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn violations(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{tag} {} (slack {:e})", c.inequality, c.slack)?;
        }
        Ok(())
    }
}

/// Check every standing assumption. Never fails; callers decide whether a
/// violation is fatal.
pub fn validate_params(p: &ModelParams) -> ValidationReport {
    let mut checks = Vec::new();
    let mut ge = |inequality: String, slack: f64| {
        checks.push(AssumptionCheck {
            inequality,
            passed: slack.is_finite() && slack >= 0.0,
            slack,
        });
    };
    let positive = [
        ("k_alpha", p.k_alpha),
        ("eta_I", p.eta_i),
        ("eta_B", p.eta_b),
        ("a_B", p.a_b),
        ("phi_B", p.phi_b),
        ("a_bar", p.a_bar),
        ("phi_bar", p.phi_bar),
        ("T", p.horizon),
    ];
    for (name, v) in positive {
        // Strict positivity: a zero value reports a negative slack.
        let slack = if v > 0.0 { v } else { -1.0 - v.abs() };
        ge(format!("{name} > 0"), if v.is_finite() { slack } else { f64::NAN });
    }
    // Volatilities do not enter the coefficient equations; zero is allowed.
    for (name, v) in [("sigma_alpha", p.sigma_alpha), ("sigma_S", p.sigma_s)] {
        ge(format!("{name} >= 0"), v);
    }
    for (name, v) in [("S0", p.s0), ("alpha0", p.alpha0)] {
        ge(format!("{name} finite"), if v.is_finite() { 0.0 } else { f64::NAN });
    }
    ge("b >= 0".into(), p.b);
    ge("2 a_B - b >= 0".into(), 2.0 * p.a_b - p.b);
    ge("b <= 2 eta_B".into(), 2.0 * p.eta_b - p.b);
    ge("b <= 2 eta_I".into(), 2.0 * p.eta_i - p.b);
    ge("b <= 4 phi_B".into(), 4.0 * p.phi_b - p.b);
    ge("b <= 4 phi_bar".into(), 4.0 * p.phi_bar - p.b);
    ValidationReport { checks }
}

/// Population law of the trader types, `zeta (x) xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TypeDistribution {
    /// Every trader has the same type.
    PointMass { trader: TraderType },
    /// Independent lognormal coordinates with the given means and
    /// coefficients of variation (order: k_I, sigma_I, a_I, phi_I).
    Lognormal { mean: TraderType, cv: [f64; 4] },
}

impl TypeDistribution {
    /// Point mass at the representative trader of `p`, with the given private
    /// signal dynamics.
    pub fn representative(p: &ModelParams, k_i: f64, sigma_i: f64) -> Self {
        TypeDistribution::PointMass {
            trader: TraderType {
                k_i,
                sigma_i,
                a_i: p.a_bar,
                phi_i: p.phi_bar,
            },
        }
    }

    pub fn mean(&self) -> TraderType {
        match *self {
            TypeDistribution::PointMass { trader } => trader,
            TypeDistribution::Lognormal { mean, .. } => mean,
        }
    }

    /// The penalty means must reproduce `a_bar` and `phi_bar` of the model.
    pub fn validate_against(&self, p: &ModelParams) -> Result<()> {
        let m = self.mean();
        m.validate()?;
        if let TypeDistribution::Lognormal { cv, .. } = self {
            if cv.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "lognormal coefficients of variation must be >= 0, got {cv:?}"
                )));
            }
        }
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs();
        if rel(m.a_i, p.a_bar) > 1e-12 || rel(m.phi_i, p.phi_bar) > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "type distribution means (a_I = {}, phi_I = {}) do not match \
                 a_bar = {}, phi_bar = {}",
                m.a_i, m.phi_i, p.a_bar, p.phi_bar
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TraderType {
        match *self {
            TypeDistribution::PointMass { trader } => trader,
            TypeDistribution::Lognormal { mean, cv } => {
                let means = [mean.k_i, mean.sigma_i, mean.a_i, mean.phi_i];
                let mut out = [0.0; 4];
                for i in 0..4 {
                    out[i] = sample_lognormal(rng, means[i], cv[i]);
                }
                TraderType {
                    k_i: out[0],
                    sigma_i: out[1],
                    a_i: out[2],
                    phi_i: out[3],
                }
            }
        }
    }
}

/// Lognormal draw with mean `mean` and coefficient of variation `cv`.
fn sample_lognormal<R: Rng + ?Sized>(rng: &mut R, mean: f64, cv: f64) -> f64 {
    if cv == 0.0 {
        return mean;
    }
    let s2 = (1.0 + cv * cv).ln();
    let mu = mean.ln() - 0.5 * s2;
    LogNormal::new(mu, s2.sqrt())
        .expect("finite lognormal parameters")
        .sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_parameters_pass() {
        let report = validate_params(&ModelParams::default());
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn zero_impact_passes() {
        let p = ModelParams {
            b: 0.0,
            ..Default::default()
        };
        assert!(validate_params(&p).passed());
    }

    #[test]
    fn impact_above_client_cost_names_the_inequality() {
        let p = ModelParams {
            b: 3e-3,
            eta_i: 1e-3,
            ..Default::default()
        };
        let report = validate_params(&p);
        assert!(!report.passed());
        let failed: Vec<_> = report.violations().map(|c| c.inequality.as_str()).collect();
        assert!(failed.contains(&"b <= 2 eta_I"), "{failed:?}");
    }

    #[test]
    fn nonpositive_cost_fails() {
        let p = ModelParams {
            eta_b: 0.0,
            ..Default::default()
        };
        let report = validate_params(&p);
        assert!(report.violations().any(|c| c.inequality == "eta_B > 0"));
    }

    #[test]
    fn validation_is_pure() {
        let p = ModelParams {
            b: 0.05,
            ..Default::default()
        };
        assert_eq!(validate_params(&p), validate_params(&p));
    }

    #[test]
    fn grids() {
        let g = make_grid(1.0, 10_000).unwrap();
        assert_eq!(g.step(), 1e-4);
        assert_eq!(g.t(g.steps()), 1.0);
        assert_eq!(make_grid(1.0, 2).unwrap().times(), vec![0.0, 0.5, 1.0]);
        assert_eq!(
            make_grid(2.0, 4).unwrap().times(),
            vec![0.0, 0.5, 1.0, 1.5, 2.0]
        );
        assert!(make_grid(1.0, 1).is_err());
        assert!(make_grid(0.0, 10).is_err());
        assert!(make_grid(-1.0, 10).is_err());
    }

    #[test]
    fn grid_is_strictly_increasing() {
        let g = make_grid(0.7, 333).unwrap();
        let ts = g.times();
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 0.7);
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn locate_clamps_rounding_and_rejects_outside() {
        let g = make_grid(1.0, 10).unwrap();
        assert_eq!(g.locate(1.0).unwrap(), (9, 1.0));
        assert_eq!(g.locate(0.0).unwrap(), (0, 0.0));
        let (k, th) = g.locate(0.25).unwrap();
        assert_eq!(k, 2);
        assert!((th - 0.5).abs() < 1e-12);
        assert!(g.locate(1.1).is_err());
        assert!(g.locate(-0.01).is_err());
        assert_eq!(g.node_index(0.3, 1e-12), Some(3));
        assert_eq!(g.node_index(0.35, 1e-12), None);
    }

    #[test]
    fn lognormal_means_match_within_five_standard_errors() {
        let p = ModelParams::default();
        let cv = [0.3, 0.5, 0.4, 0.6];
        let dist = TypeDistribution::Lognormal {
            mean: TraderType {
                k_i: 5.0,
                sigma_i: 0.5,
                a_i: p.a_bar,
                phi_i: p.phi_bar,
            },
            cv,
        };
        dist.validate_against(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let t = dist.sample(&mut rng);
            for (i, v) in [t.k_i, t.sigma_i, t.a_i, t.phi_i].into_iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let m = dist.mean();
        for (i, target) in [m.k_i, m.sigma_i, m.a_i, m.phi_i].into_iter().enumerate() {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - target).abs() <= 5.0 * se,
                "coordinate {i}: {mean} vs {target} (se {se})"
            );
        }
    }

    #[test]
    fn mismatched_type_means_are_rejected() {
        let p = ModelParams::default();
        let dist = TypeDistribution::PointMass {
            trader: TraderType {
                a_i: 2.0,
                ..TraderType::default()
            },
        };
        assert!(dist.validate_against(&p).is_err());
    }

    #[test]
    fn config_roundtrip_uses_documented_names() {
        let json = serde_json::to_value(ModelParams::default()).unwrap();
        assert_eq!(json["T"], 1.0);
        assert_eq!(json["S0"], 100.0);
        let back: ModelParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, ModelParams::default());
    }
}
