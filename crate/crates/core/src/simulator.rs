//! Monte Carlo simulation of the equilibrium.
//!
//! Signals are stepped with the exact Ornstein-Uhlenbeck transition, jointly
//! with the Brownian increment that drives them; inventories, cash and the
//! price use explicit Euler steps with the strategies evaluated at the left
//! node. Work is split into fixed-size chunks of paths and the chunk
//! statistics are merged in a fixed binary tree, so results do not depend on
//! the number of worker threads.

use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{MeanFieldCoefficients, TraderCoefficients};
use crate::error::{Error, Result};
use crate::params::{ModelParams, TimeGrid, TraderType, TypeDistribution};
use crate::rng::{normal, stream, sub_index, Channel};

/// Paths per work unit. Fixed so that the reduction tree has a fixed shape.
pub const CHUNK: usize = 64;

/// Drift of the simulated mid-price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// `b nu_B + alpha`.
    #[default]
    Broker,
    /// `b nu_B + alpha_I + alpha`.
    Trader,
    /// No drift.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub measure: Measure,
    /// Node stride of the ensemble statistics.
    pub record_every: usize,
    /// How many paths (the first ones) to keep at full resolution.
    pub keep_paths: usize,
    /// Keep the Brownian increments of the kept paths.
    pub store_increments: bool,
    /// Population size of the finite-N game.
    #[serde(rename = "N")]
    pub n_traders: Option<usize>,
    /// Independent replications of the finite-N game.
    pub replications: usize,
    /// Law of the trader types in the finite-N game.
    pub type_dist: Option<TypeDistribution>,
    /// Finite-N traders react to the empirical average inventory instead of
    /// the theoretical mean-field one.
    pub empirical_feedback: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 42,
            measure: Measure::Broker,
            record_every: 100,
            keep_paths: 10,
            store_increments: false,
            n_traders: None,
            replications: 1,
            type_dist: None,
            empirical_feedback: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidInput("n_paths must be at least 1".into()));
        }
        if self.record_every == 0 || !grid.steps().is_multiple_of(self.record_every) {
            return Err(Error::InvalidInput(format!(
                "record_every = {} must divide M = {}",
                self.record_every,
                grid.steps()
            )));
        }
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be at least 1".into()));
        }
        Ok(())
    }
}

/// Recorded columns, in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Column {
    Alpha,
    AlphaI,
    Price,
    NuBar,
    NuB,
    NuI,
    QBar,
    QBarB,
    QI,
    CashI,
    CashB,
}

impl Column {
    pub const ALL: [Column; 11] = [
        Column::Alpha,
        Column::AlphaI,
        Column::Price,
        Column::NuBar,
        Column::NuB,
        Column::NuI,
        Column::QBar,
        Column::QBarB,
        Column::QI,
        Column::CashI,
        Column::CashB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::Alpha => "alpha",
            Column::AlphaI => "alpha_I",
            Column::Price => "S",
            Column::NuBar => "nu_bar",
            Column::NuB => "nu_B",
            Column::NuI => "nu_I",
            Column::QBar => "Q_bar",
            Column::QBarB => "Q_bar_B",
            Column::QI => "Q_I",
            Column::CashI => "X_I",
            Column::CashB => "X_bar_B",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

const NCOL: usize = Column::ALL.len();

/// One path at full grid resolution.
#[derive(Debug, Clone)]
pub struct FullPath {
    pub path_id: usize,
    /// Indexed by [`Column::index`], each of length `M + 1`.
    pub columns: Vec<Vec<f64>>,
    /// `W^alpha_{k+1} - W^alpha_k`, length `M`.
    pub dw_alpha: Option<Vec<f64>>,
    /// `W^I_{k+1} - W^I_k`, length `M`.
    pub dw_i: Option<Vec<f64>>,
}

impl FullPath {
    pub fn column(&self, c: Column) -> &[f64] {
        &self.columns[c.index()]
    }
}

/// Left Riemann sums along one path. Parameter-free, so objectives can be
/// assembled for any constants afterwards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PathIntegrals {
    pub qi_nub: f64,
    pub qi_alpha_i: f64,
    pub qi_alpha: f64,
    pub nui_sq: f64,
    pub qi_nui: f64,
    pub qi_sq: f64,
    pub qb_nub: f64,
    pub qb_alpha: f64,
    pub nub_sq: f64,
    pub qb_nubar: f64,
    pub qb_sq: f64,
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub params: ModelParams,
    pub trader_type: TraderType,
    pub measure: Measure,
    pub n_paths: usize,
    pub kept: Vec<FullPath>,
    /// One entry per path, in path order.
    pub integrals: Vec<PathIntegrals>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ColumnStats {
    pub column: &'static str,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Objectives {
    pub h_i: Estimate,
    pub h_b: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleStats {
    pub n_paths: usize,
    pub record_every: usize,
    pub times: Vec<f64>,
    pub columns: Vec<ColumnStats>,
    pub objectives: Objectives,
}

impl EnsembleStats {
    pub fn column(&self, c: Column) -> &ColumnStats {
        &self.columns[c.index()]
    }
}

/// Exact Ornstein-Uhlenbeck transition over one step.
pub fn ou_step(x: f64, k: f64, sigma: f64, h: f64, z: f64) -> f64 {
    x * (-k * h).exp() + sigma * ((1.0 - (-2.0 * k * h).exp()) / (2.0 * k)).sqrt() * z
}

/// Joint exact sampling of `(x_{t+h}, W_{t+h} - W_t)` for
/// `dx = -k x dt + sigma dW`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct OuStepper {
    decay: f64,
    sigma: f64,
    sqrt_h: f64,
    c1: f64,
    c2: f64,
}

impl OuStepper {
    pub(crate) fn new(k: f64, sigma: f64, h: f64) -> Self {
        let decay = (-k * h).exp();
        let var = (1.0 - (-2.0 * k * h).exp()) / (2.0 * k);
        let sqrt_h = h.sqrt();
        let c1 = (1.0 - decay) / k / sqrt_h;
        let c2 = (var - c1 * c1).max(0.0).sqrt();
        Self {
            decay,
            sigma,
            sqrt_h,
            c1,
            c2,
        }
    }

    /// Returns the next value and the Brownian increment.
    pub(crate) fn step(&self, x: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let z1 = normal(rng);
        let z2 = normal(rng);
        (
            x * self.decay + self.sigma * (self.c1 * z1 + self.c2 * z2),
            self.sqrt_h * z1,
        )
    }
}

/// Exogenous randomness of one path: both signals, their Brownian
/// increments and the price noise.
#[derive(Debug, Clone)]
pub(crate) struct Drivers {
    pub alpha: Vec<f64>,
    pub alpha_i: Vec<f64>,
    pub dw_alpha: Vec<f64>,
    pub dw_i: Vec<f64>,
    pub z_price: Vec<f64>,
}

pub(crate) fn drivers(
    p: &ModelParams,
    tt: &TraderType,
    grid: &TimeGrid,
    seed: u64,
    index: u64,
) -> Drivers {
    let m = grid.steps();
    let h = grid.step();
    let common = OuStepper::new(p.k_alpha, p.sigma_alpha, h);
    let private = OuStepper::new(tt.k_i, tt.sigma_i, h);
    let mut ra = stream(seed, Channel::CommonSignal, index);
    let mut ri = stream(seed, Channel::PrivateSignal, index);
    let mut rs = stream(seed, Channel::Price, index);
    let mut d = Drivers {
        alpha: Vec::with_capacity(m + 1),
        alpha_i: Vec::with_capacity(m + 1),
        dw_alpha: Vec::with_capacity(m),
        dw_i: Vec::with_capacity(m),
        z_price: Vec::with_capacity(m),
    };
    let (mut a, mut ai) = (p.alpha0, 0.0);
    d.alpha.push(a);
    d.alpha_i.push(ai);
    for _ in 0..m {
        let (an, dwa) = common.step(a, &mut ra);
        let (ain, dwi) = private.step(ai, &mut ri);
        a = an;
        ai = ain;
        d.alpha.push(a);
        d.alpha_i.push(ai);
        d.dw_alpha.push(dwa);
        d.dw_i.push(dwi);
        d.z_price.push(normal(&mut rs));
    }
    d
}

/// State at node `k` of one simulated path.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct NodeState {
    pub v: [f64; NCOL],
}

/// Run the equilibrium strategies along `d`, calling `visit(k, state)` at
/// every node `k = 0..=M`. Returns the path's Riemann sums.
pub(crate) fn run_path(
    p: &ModelParams,
    mf: &MeanFieldCoefficients,
    tc: &TraderCoefficients,
    measure: Measure,
    d: &Drivers,
    mut visit: impl FnMut(usize, &NodeState),
) -> PathIntegrals {
    let grid = mf.grid();
    let m = grid.steps();
    let h = grid.step();
    let sqrt_h = h.sqrt();
    let mut acc = PathIntegrals::default();
    let (mut s, mut q_bar, mut q_bar_b, mut q_i, mut x_i, mut x_b) = (p.s0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..=m {
        let (a, ai) = (d.alpha[k], d.alpha_i[k]);
        let [ga, gb, gc] = mf.g_at(k);
        let [ha, hb, hc] = mf.h_at(k);
        let [fa, fai, fb, fbi, fc] = tc.at(k);
        let nu_bar = ga * a + gb * q_bar + gc * q_bar_b;
        let nu_b = ha * a + hb * q_bar + hc * q_bar_b;
        let nu_i = fa * a + fai * ai + fb * q_bar + fbi * q_i + fc * q_bar_b;
        let state = NodeState {
            v: [a, ai, s, nu_bar, nu_b, nu_i, q_bar, q_bar_b, q_i, x_i, x_b],
        };
        visit(k, &state);
        if k == m {
            break;
        }
        acc.qi_nub += q_i * nu_b * h;
        acc.qi_alpha_i += q_i * ai * h;
        acc.qi_alpha += q_i * a * h;
        acc.nui_sq += nu_i * nu_i * h;
        acc.qi_nui += q_i * nu_i * h;
        acc.qi_sq += q_i * q_i * h;
        acc.qb_nub += q_bar_b * nu_b * h;
        acc.qb_alpha += q_bar_b * a * h;
        acc.nub_sq += nu_b * nu_b * h;
        acc.qb_nubar += q_bar_b * nu_bar * h;
        acc.qb_sq += q_bar_b * q_bar_b * h;

        let drift = match measure {
            Measure::Broker => p.b * nu_b + a,
            Measure::Trader => p.b * nu_b + ai + a,
            Measure::Reference => 0.0,
        };
        x_i -= nu_i * (s + p.eta_i * nu_i) * h;
        x_b += (nu_bar * s + p.eta_i * nu_i * nu_i - nu_b * (s + p.eta_b * nu_b)) * h;
        s += drift * h + p.sigma_s * sqrt_h * d.z_price[k];
        q_bar += nu_bar * h;
        q_bar_b += (nu_b - nu_bar) * h;
        q_i += nu_i * h;
    }
    acc
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(a: Moments, b: Moments) -> Moments {
        if a.n == 0.0 {
            return b;
        }
        if b.n == 0.0 {
            return a;
        }
        let n = a.n + b.n;
        let d = b.mean - a.mean;
        Moments {
            n,
            mean: a.mean + d * (b.n / n),
            m2: a.m2 + b.m2 + d * d * (a.n * b.n / n),
        }
    }

    fn sd(&self) -> f64 {
        if self.n > 1.0 {
            (self.m2 / (self.n - 1.0)).sqrt()
        } else {
            0.0
        }
    }
}

/// Merge per-chunk results in a fixed binary tree.
fn tree_reduce<T: Clone>(mut items: Vec<T>, merge: impl Fn(&T, &T) -> T) -> Option<T> {
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.chunks(2);
        for pair in &mut it {
            next.push(if pair.len() == 2 {
                merge(&pair[0], &pair[1])
            } else {
                pair[0].clone()
            });
        }
        items = next;
    }
    items.pop()
}

struct ChunkResult {
    moments: Vec<[Moments; NCOL]>,
    integrals: Vec<PathIntegrals>,
    kept: Vec<FullPath>,
}

/// Simulate `cfg.n_paths` independent paths of the equilibrium, each with one
/// individual trader of type `tc.trader_type` next to the mean field.
pub fn simulate_equilibrium(
    p: &ModelParams,
    mf: &MeanFieldCoefficients,
    tc: &TraderCoefficients,
    cfg: &SimConfig,
) -> Result<(PathEnsemble, EnsembleStats)> {
    let grid = *mf.grid();
    cfg.validate(&grid)?;
    if tc.grid() != &grid {
        return Err(Error::GridMismatch(
            "trader and mean-field coefficients use different grids".into(),
        ));
    }
    let m = grid.steps();
    let stride = cfg.record_every;
    let n_rec = m / stride + 1;
    let tt = tc.trader_type;
    let n_chunks = cfg.n_paths.div_ceil(CHUNK);

    let chunks: Vec<ChunkResult> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(cfg.n_paths);
            let mut moments = vec![[Moments::default(); NCOL]; n_rec];
            let mut integrals = Vec::with_capacity(hi - lo);
            let mut kept = Vec::new();
            for i in lo..hi {
                let d = drivers(p, &tt, &grid, cfg.seed, i as u64);
                let keep = i < cfg.keep_paths;
                let mut cols = if keep {
                    (0..NCOL).map(|_| Vec::with_capacity(m + 1)).collect::<Vec<_>>()
                } else {
                    Vec::new()
                };
                let acc = run_path(p, mf, tc, cfg.measure, &d, |k, st| {
                    if k % stride == 0 {
                        let row = &mut moments[k / stride];
                        for (j, v) in st.v.iter().enumerate() {
                            row[j].push(*v);
                        }
                    }
                    if keep {
                        for (j, v) in st.v.iter().enumerate() {
                            cols[j].push(*v);
                        }
                    }
                });
                integrals.push(acc);
                if keep {
                    let (dw_alpha, dw_i) = if cfg.store_increments {
                        (Some(d.dw_alpha), Some(d.dw_i))
                    } else {
                        (None, None)
                    };
                    kept.push(FullPath {
                        path_id: i,
                        columns: cols,
                        dw_alpha,
                        dw_i,
                    });
                }
            }
            ChunkResult {
                moments,
                integrals,
                kept,
            }
        })
        .collect();

    let mut integrals = Vec::with_capacity(cfg.n_paths);
    let mut kept = Vec::new();
    let mut parts = Vec::with_capacity(chunks.len());
    for c in chunks {
        integrals.extend(c.integrals);
        kept.extend(c.kept);
        parts.push(c.moments);
    }
    let total = tree_reduce(parts, |a, b| {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| std::array::from_fn(|j| Moments::merge(ra[j], rb[j])))
            .collect()
    })
    .expect("at least one chunk");

    let sqrt_n = (cfg.n_paths as f64).sqrt();
    let columns = Column::ALL
        .iter()
        .map(|&c| {
            let j = c.index();
            let sd: Vec<f64> = total.iter().map(|r| r[j].sd()).collect();
            ColumnStats {
                column: c.name(),
                mean: total.iter().map(|r| r[j].mean).collect(),
                se: sd.iter().map(|s| s / sqrt_n).collect(),
                sd,
            }
        })
        .collect();

    let ensemble = PathEnsemble {
        grid,
        params: *p,
        trader_type: tt,
        measure: cfg.measure,
        n_paths: cfg.n_paths,
        kept,
        integrals,
    };
    let objectives = estimate_objectives(&ensemble, p, &tt)?;
    let stats = EnsembleStats {
        n_paths: cfg.n_paths,
        record_every: stride,
        times: (0..n_rec).map(|r| grid.t(r * stride)).collect(),
        columns,
        objectives,
    };
    Ok((ensemble, stats))
}

/// Trader objective for one path, from its Riemann sums.
pub fn trader_objective(x: &PathIntegrals, p: &ModelParams, tt: &TraderType) -> f64 {
    p.b * x.qi_nub + x.qi_alpha_i + x.qi_alpha
        - p.eta_i * x.nui_sq
        - 2.0 * tt.a_i * x.qi_nui
        - tt.phi_i * x.qi_sq
}

/// Broker objective for one path, from its Riemann sums. The population
/// moments are the conditional ones along the path: `nu_bar` for the mean
/// and the individual trader's squared speed for the second moment.
pub fn broker_objective(x: &PathIntegrals, p: &ModelParams) -> f64 {
    p.b * x.qb_nub + x.qb_alpha + p.eta_i * x.nui_sq
        - p.eta_b * x.nub_sq
        - 2.0 * p.a_b * (x.qb_nub - x.qb_nubar)
        - p.phi_b * x.qb_sq
}

/// Monte Carlo estimates of both objectives with standard errors.
pub fn estimate_objectives(
    ensemble: &PathEnsemble,
    p: &ModelParams,
    tt: &TraderType,
) -> Result<Objectives> {
    if ensemble.trader_type != *tt {
        return Err(Error::InvalidInput(
            "ensemble was simulated for a different trader type".into(),
        ));
    }
    if ensemble.params.horizon != p.horizon || ensemble.integrals.len() != ensemble.n_paths {
        return Err(Error::GridMismatch(
            "ensemble does not match the given parameters".into(),
        ));
    }
    let est = |f: &dyn Fn(&PathIntegrals) -> f64| {
        let mut m = Moments::default();
        for x in &ensemble.integrals {
            m.push(f(x));
        }
        Estimate {
            mean: m.mean,
            se: m.sd() / m.n.sqrt(),
        }
    };
    Ok(Objectives {
        h_i: est(&|x| trader_objective(x, p, tt)),
        h_b: est(&|x| broker_objective(x, p)),
    })
}

/// Outcome of the finite-N experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ChaosReport {
    pub n_traders: usize,
    pub replications: usize,
    /// Root mean square over replications and nodes of
    /// `(1/N) sum_n nu_n - nu_bar`.
    pub rms: f64,
    /// Largest absolute gap over replications and nodes.
    pub sup: f64,
    /// Per-replication RMS over nodes.
    pub per_replication: Vec<f64>,
    /// Number of distinct coefficient solves.
    pub distinct_types: usize,
}

fn coefficient_key(tt: &TraderType) -> [u64; 3] {
    let k = tt.key();
    [k[0], k[2], k[3]]
}

/// Simulate `N` traders who all play the mean-field strategy against one
/// common-signal path, `cfg.replications` times, and measure how far their
/// average speed is from the mean-field speed.
///
/// Types are sampled from `cfg.type_dist` (default: the representative
/// trader with `k_I = k_alpha`, `sigma_I = 0.5 sigma_alpha`). A type whose
/// penalties equal the population means uses
/// [`TraderCoefficients::representative`].
pub fn simulate_finite_n(
    p: &ModelParams,
    mf: &MeanFieldCoefficients,
    cfg: &SimConfig,
) -> Result<ChaosReport> {
    let grid = *mf.grid();
    cfg.validate(&grid)?;
    let n = cfg
        .n_traders
        .ok_or_else(|| Error::InvalidInput("finite-N simulation needs N".into()))?;
    if n == 0 {
        return Err(Error::InvalidInput("N must be at least 1".into()));
    }
    let dist = cfg
        .type_dist
        .unwrap_or_else(|| TypeDistribution::representative(p, p.k_alpha, 0.5 * p.sigma_alpha));
    dist.validate_against(p)?;

    let mut cache: HashMap<[u64; 3], Arc<TraderCoefficients>> = HashMap::new();
    let mut types = Vec::with_capacity(cfg.replications);
    for r in 0..cfg.replications {
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream(cfg.seed, Channel::TraderType, sub_index(r as u64, i as u64));
            row.push(dist.sample(&mut rng));
        }
        types.push(row);
    }
    let mut missing: Vec<TraderType> = Vec::new();
    for tt in types.iter().flatten() {
        let key = coefficient_key(tt);
        if !cache.contains_key(&key) && !missing.iter().any(|m| coefficient_key(m) == key) {
            missing.push(*tt);
        }
    }
    let solved: Vec<Result<TraderCoefficients>> = missing
        .par_iter()
        .map(|tt| {
            if tt.a_i == p.a_bar && tt.phi_i == p.phi_bar {
                TraderCoefficients::representative(p, tt.k_i, tt.sigma_i, mf)
            } else {
                crate::equilibrium::solve_trader(p, tt, mf)
            }
        })
        .collect();
    for (tt, tc) in missing.iter().zip(solved) {
        cache.insert(coefficient_key(tt), Arc::new(tc?));
    }
    let coeffs: Vec<Vec<Arc<TraderCoefficients>>> = types
        .iter()
        .map(|row| row.iter().map(|tt| cache[&coefficient_key(tt)].clone()).collect())
        .collect();

    let per_rep: Vec<(f64, f64)> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            if cfg.empirical_feedback {
                replicate_empirical(p, mf, cfg.seed, r, &types[r], &coeffs[r])
            } else {
                replicate_theoretical(p, mf, cfg.seed, r, &types[r], &coeffs[r])
            }
        })
        .collect();

    let nodes = (grid.steps() + 1) as f64;
    let per_replication: Vec<f64> = per_rep.iter().map(|(ss, _)| (ss / nodes).sqrt()).collect();
    let rms = (per_rep.iter().map(|(ss, _)| ss).sum::<f64>() / (nodes * cfg.replications as f64))
        .sqrt();
    let sup = per_rep.iter().map(|(_, s)| *s).fold(0.0, f64::max);
    Ok(ChaosReport {
        n_traders: n,
        replications: cfg.replications,
        rms,
        sup,
        per_replication,
        distinct_types: cache.len(),
    })
}

/// Common-signal path of replication `r` and the mean-field state along it.
struct MeanFieldPath {
    alpha: Vec<f64>,
    q_bar: Vec<f64>,
    q_bar_b: Vec<f64>,
    nu_bar: Vec<f64>,
}

fn mean_field_path(p: &ModelParams, mf: &MeanFieldCoefficients, seed: u64, r: usize) -> MeanFieldPath {
    let grid = mf.grid();
    let m = grid.steps();
    let h = grid.step();
    let common = OuStepper::new(p.k_alpha, p.sigma_alpha, h);
    let mut rng = stream(seed, Channel::CommonSignal, sub_index(r as u64, 0));
    let mut out = MeanFieldPath {
        alpha: Vec::with_capacity(m + 1),
        q_bar: Vec::with_capacity(m + 1),
        q_bar_b: Vec::with_capacity(m + 1),
        nu_bar: Vec::with_capacity(m + 1),
    };
    let (mut a, mut qb, mut qbb) = (p.alpha0, 0.0, 0.0);
    for k in 0..=m {
        let [ga, gb, gc] = mf.g_at(k);
        let [ha, hb, hc] = mf.h_at(k);
        let nu_bar = ga * a + gb * qb + gc * qbb;
        let nu_b = ha * a + hb * qb + hc * qbb;
        out.alpha.push(a);
        out.q_bar.push(qb);
        out.q_bar_b.push(qbb);
        out.nu_bar.push(nu_bar);
        if k < m {
            qb += nu_bar * h;
            qbb += (nu_b - nu_bar) * h;
            a = common.step(a, &mut rng).0;
        }
    }
    out
}

/// Sum over nodes of the squared gap and its largest absolute value.
fn gap_summary(avg: &[f64], nu_bar: &[f64]) -> (f64, f64) {
    avg.iter().zip(nu_bar).fold((0.0, 0.0), |(ss, sup), (x, y)| {
        let e = x - y;
        (ss + e * e, f64::max(sup, e.abs()))
    })
}

fn replicate_theoretical(
    p: &ModelParams,
    mf: &MeanFieldCoefficients,
    seed: u64,
    r: usize,
    types: &[TraderType],
    coeffs: &[Arc<TraderCoefficients>],
) -> (f64, f64) {
    let grid = mf.grid();
    let m = grid.steps();
    let h = grid.step();
    let path = mean_field_path(p, mf, seed, r);
    let n = types.len();
    let n_chunks = n.div_ceil(CHUNK);
    let sums: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sum = vec![0.0; m + 1];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let tt = &types[i];
                let tc = &coeffs[i];
                let private = OuStepper::new(tt.k_i, tt.sigma_i, h);
                let mut rng = stream(seed, Channel::PrivateSignal, sub_index(r as u64, i as u64));
                let (mut ai, mut qi) = (0.0, 0.0);
                for k in 0..=m {
                    let [fa, fai, fb, fbi, fc] = tc.at(k);
                    let nu =
                        fa * path.alpha[k] + fai * ai + fb * path.q_bar[k] + fbi * qi + fc * path.q_bar_b[k];
                    sum[k] += nu;
                    if k < m {
                        qi += nu * h;
                        ai = private.step(ai, &mut rng).0;
                    }
                }
            }
            sum
        })
        .collect();
    let total = tree_reduce(sums, |a, b| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .expect("N >= 1");
    let avg: Vec<f64> = total.iter().map(|s| s / n as f64).collect();
    gap_summary(&avg, &path.nu_bar)
}

fn replicate_empirical(
    p: &ModelParams,
    mf: &MeanFieldCoefficients,
    seed: u64,
    r: usize,
    types: &[TraderType],
    coeffs: &[Arc<TraderCoefficients>],
) -> (f64, f64) {
    let grid = mf.grid();
    let m = grid.steps();
    let h = grid.step();
    let path = mean_field_path(p, mf, seed, r);
    let n = types.len();
    let steppers: Vec<OuStepper> = types
        .iter()
        .map(|tt| OuStepper::new(tt.k_i, tt.sigma_i, h))
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| stream(seed, Channel::PrivateSignal, sub_index(r as u64, i as u64)))
        .collect();
    let mut ai = vec![0.0; n];
    let mut qi = vec![0.0; n];
    let mut q_bar_b = 0.0;
    let mut avg = Vec::with_capacity(m + 1);
    for k in 0..=m {
        let a = path.alpha[k];
        let q_emp = qi.iter().sum::<f64>() / n as f64;
        let mut sum = 0.0;
        let mut speeds = vec![0.0; n];
        for i in 0..n {
            let [fa, fai, fb, fbi, fc] = coeffs[i].at(k);
            speeds[i] = fa * a + fai * ai[i] + fb * q_emp + fbi * qi[i] + fc * q_bar_b;
            sum += speeds[i];
        }
        let mean = sum / n as f64;
        avg.push(mean);
        if k < m {
            let [ha, hb, hc] = mf.h_at(k);
            let nu_b = ha * a + hb * q_emp + hc * q_bar_b;
            q_bar_b += (nu_b - mean) * h;
            for i in 0..n {
                qi[i] += speeds[i] * h;
                ai[i] = steppers[i].step(ai[i], &mut rngs[i]).0;
            }
        }
    }
    gap_summary(&avg, &path.nu_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::solve_mean_field;
    use crate::params::make_grid;

    #[test]
    fn ou_step_examples() {
        assert_eq!(ou_step(0.0, 5.0, 1.0, 1e-4, 0.0), 0.0);
        let x = 2.0;
        let got = ou_step(x, 5.0, 1.0, 1e-4, 1.0);
        let expected = x * (-5e-4f64).exp() + ((1.0 - (-1e-3f64).exp()) / 10.0).sqrt();
        assert_eq!(got, expected);
        assert!((got - (x * 0.99950012 + 0.0099975)).abs() < 1e-6);
    }

    #[test]
    fn ou_one_step_variance() {
        let (k, sigma, h) = (5.0, 1.0, 1e-4);
        let mut rng = stream(3, Channel::CommonSignal, 0);
        let n = 1_000_000;
        let mut m = Moments::default();
        for _ in 0..n {
            m.push(ou_step(0.0, k, sigma, h, normal(&mut rng)));
        }
        let target = sigma * sigma * (1.0 - (-2.0 * k * h).exp()) / (2.0 * k);
        let var = m.m2 / (n as f64 - 1.0);
        // The sample variance of a Gaussian has standard error var * sqrt(2/(n-1)).
        let se = target * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - target).abs() <= 5.0 * se, "{var} vs {target}");
    }

    #[test]
    fn joint_ou_increment_has_the_right_covariance() {
        let (k, sigma, h) = (5.0, 1.0, 0.05);
        let st = OuStepper::new(k, sigma, h);
        let mut rng = stream(4, Channel::CommonSignal, 0);
        let n = 400_000;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (x, dw) = st.step(0.0, &mut rng);
            sxy += x * dw;
            sxx += x * x;
            syy += dw * dw;
        }
        let n = n as f64;
        let cov = sigma * (1.0 - (-k * h).exp()) / k;
        let var = sigma * sigma * (1.0 - (-2.0 * k * h).exp()) / (2.0 * k);
        assert!((sxy / n - cov).abs() < 5.0 * (var * h / n).sqrt() * 1.5);
        assert!((sxx / n - var).abs() < 5.0 * var * (2.0 / n).sqrt());
        assert!((syy / n - h).abs() < 5.0 * h * (2.0 / n).sqrt());
    }

    #[test]
    fn moments_merge_matches_a_single_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.3 - 7.0).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|x| all.push(*x));
        let parts: Vec<Moments> = xs
            .chunks(64)
            .map(|c| {
                let mut m = Moments::default();
                c.iter().for_each(|x| m.push(*x));
                m
            })
            .collect();
        let merged = tree_reduce(parts, |a, b| Moments::merge(*a, *b)).unwrap();
        assert!((merged.mean - all.mean).abs() < 1e-12);
        assert!((merged.m2 - all.m2).abs() < 1e-9 * all.m2);
    }

    #[test]
    fn record_every_must_divide_the_grid() {
        let grid = make_grid(1.0, 100).unwrap();
        let cfg = SimConfig {
            record_every: 7,
            ..Default::default()
        };
        assert!(cfg.validate(&grid).is_err());
        let cfg = SimConfig {
            n_paths: 0,
            ..Default::default()
        };
        assert!(cfg.validate(&grid).is_err());
    }

    #[test]
    fn broker_inventory_is_the_running_integral() {
        let p = ModelParams::default();
        let grid = make_grid(1.0, 1000).unwrap();
        let mf = solve_mean_field(&p, grid).unwrap();
        let tc = crate::equilibrium::solve_trader(&p, &TraderType::default(), &mf).unwrap();
        let cfg = SimConfig {
            n_paths: 4,
            keep_paths: 4,
            record_every: 10,
            ..Default::default()
        };
        let (ens, _) = simulate_equilibrium(&p, &mf, &tc, &cfg).unwrap();
        for path in &ens.kept {
            let (nb, nbar, qbb) = (
                path.column(Column::NuB),
                path.column(Column::NuBar),
                path.column(Column::QBarB),
            );
            let mut acc = 0.0;
            for k in 0..=1000 {
                assert!((qbb[k] - acc).abs() <= 1e-12, "node {k}");
                if k < 1000 {
                    acc += (nb[k] - nbar[k]) * grid.step();
                }
            }
        }
    }
}
