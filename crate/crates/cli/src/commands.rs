//! The four subcommands. Each writes into the configured output directory
//! and finishes with a manifest of what is there.

use std::path::Path;

use mfg_broker::equilibrium::{solve_mean_field, solve_trader, MeanFieldCoefficients, TraderCoefficients};
use mfg_broker::simulator::{simulate_equilibrium, simulate_finite_n, Column, EnsembleStats, PathEnsemble};
use mfg_broker::simulator::SimConfig;
use mfg_broker::verification::{
    gateaux_negative_control, run_suite, CheckReport, PerturbationDirection, GATEAUX_Z_TOLERANCE,
};
use mfg_broker::TraderType;

use crate::config::{FigureName, RunConfig};
use crate::error::{CliError, Result};
use crate::output::{fmt_f64, opt_cell, row, write_file, write_json, write_manifest, Table, Timings};
use crate::svg::{render, Panel, Series};

pub const COEFFICIENTS: &str = "g_h_coefficients.csv";
pub const STATS: &str = "stats.csv";
pub const OBJECTIVES: &str = "objectives.json";
pub const CHAOS: &str = "chaos.json";
pub const CHECKS: &str = "checks.json";

pub fn trader_file(id: usize) -> String {
    format!("trader_{id}_coefficients.csv")
}

pub fn path_file(c: Column) -> String {
    format!("paths_{}.csv", c.name())
}

struct Solved {
    mf: MeanFieldCoefficients,
    traders: Vec<(TraderType, TraderCoefficients)>,
}

fn solve_all(cfg: &RunConfig, timings: &mut Timings) -> Result<Solved> {
    let grid = cfg.time_grid()?;
    let mf = timings.time("solve_mean_field", || solve_mean_field(&cfg.model, grid))?;
    let traders = timings.time("solve_traders", || {
        cfg.trader_types
            .iter()
            .map(|s| {
                let tt = s.trader_type();
                solve_trader(&cfg.model, &tt, &mf).map(|tc| (tt, tc))
            })
            .collect::<mfg_broker::Result<Vec<_>>>()
    })?;
    Ok(Solved { mf, traders })
}

fn write_coefficients(dir: &Path, s: &Solved) -> Result<()> {
    let grid = s.mf.grid();
    let mut t = Table::new(&["t", "g_a", "g_b", "g_c", "h_a", "h_b", "h_c", "q_a"]);
    let q = s.mf.q_a_values();
    for k in 0..grid.len() {
        let [ga, gb, gc] = s.mf.g_at(k);
        let [ha, hb, hc] = s.mf.h_at(k);
        let mut r = row(&[grid.t(k), ga, gb, gc, ha, hb, hc]);
        r.push(opt_cell(q[k]));
        t.push(r);
    }
    write_file(&dir.join(COEFFICIENTS), t.to_csv().as_bytes())?;
    for (id, (_, tc)) in s.traders.iter().enumerate() {
        let mut t = Table::new(&["t", "f_a", "f_aI", "f_b", "f_bI", "f_c"]);
        for k in 0..grid.len() {
            let mut r = vec![fmt_f64(grid.t(k))];
            r.extend(row(&tc.at(k)));
            t.push(r);
        }
        write_file(&dir.join(trader_file(id)), t.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.outputs;
    let mut timings = Timings::default();
    let s = solve_all(cfg, &mut timings)?;
    timings.time("write_coefficients", || write_coefficients(dir, &s))?;
    write_manifest(dir, "solve", cfg)?;
    timings.write(dir)
}

fn write_paths(dir: &Path, ens: &PathEnsemble) -> Result<()> {
    let times = ens.grid.times();
    for c in Column::ALL {
        let mut t = Table::new(&["path_id", "t", "value"]);
        for p in &ens.kept {
            for (tk, v) in times.iter().zip(p.column(c)) {
                t.push(vec![p.path_id.to_string(), fmt_f64(*tk), fmt_f64(*v)]);
            }
        }
        write_file(&dir.join(path_file(c)), t.to_csv().as_bytes())?;
    }
    Ok(())
}

fn write_stats(dir: &Path, stats: &EnsembleStats) -> Result<()> {
    let mut t = Table::new(&["t", "column", "mean", "sd", "se"]);
    for (k, tk) in stats.times.iter().enumerate() {
        for c in &stats.columns {
            t.push(vec![
                fmt_f64(*tk),
                c.column.to_string(),
                fmt_f64(c.mean[k]),
                fmt_f64(c.sd[k]),
                fmt_f64(c.se[k]),
            ]);
        }
    }
    write_file(&dir.join(STATS), t.to_csv().as_bytes())
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.outputs;
    let mut timings = Timings::default();
    let s = solve_all(cfg, &mut timings)?;
    write_coefficients(dir, &s)?;
    let (_, tc) = &s.traders[0];
    let (ens, stats) = timings.time("simulate", || simulate_equilibrium(&cfg.model, &s.mf, tc, &cfg.sim))?;
    timings.time("write_simulation", || -> Result<()> {
        write_paths(dir, &ens)?;
        write_stats(dir, &stats)?;
        write_json(
            &dir.join(OBJECTIVES),
            &serde_json::json!({
                "n_paths": stats.n_paths,
                "measure": cfg.sim.measure,
                "H_I": stats.objectives.h_i,
                "H_B": stats.objectives.h_b,
            }),
        )
    })?;
    if cfg.sim.n_traders.is_some() {
        let chaos = timings.time("finite_n", || simulate_finite_n(&cfg.model, &s.mf, &cfg.sim))?;
        write_json(&dir.join(CHAOS), &chaos)?;
    }
    write_manifest(dir, "simulate", cfg)?;
    timings.write(dir)
}

fn print_reports(reports: &[CheckReport]) {
    for r in reports {
        let kind = if r.negative_control { " (negative control)" } else { "" };
        println!(
            "{} {}{kind}: statistic {:e}, tolerance {:e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.statistic,
            r.tolerance
        );
    }
}

fn finish_checks(dir: &Path, cfg: &RunConfig, reports: &[CheckReport], command: &str) -> Result<()> {
    write_json(&dir.join(CHECKS), &reports)?;
    write_manifest(dir, command, cfg)?;
    print_reports(reports);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Checks(failed.join(", ")))
    }
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.outputs;
    let mut timings = Timings::default();
    let s = solve_all(cfg, &mut timings)?;
    let (tt, tc) = &s.traders[0];
    let reports = timings.time("verify", || run_suite(&cfg.model, tt, &s.mf, tc, cfg.sim.seed, &cfg.verify))?;
    timings.write(dir)?;
    finish_checks(dir, cfg, &reports, "verify")
}

/// Run the Gâteaux check against deliberately wrong strategies (`g_b` scaled
/// by the configured factor) as if they were the equilibrium. A correct
/// check must reject them, so this exits nonzero.
pub fn cmd_verify_negative_control(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.outputs;
    let mut timings = Timings::default();
    let s = solve_all(cfg, &mut timings)?;
    let (tt, _) = &s.traders[0];
    let grid = *s.mf.grid();
    let dirs = PerturbationDirection::defaults(cfg.model.horizon);
    let sim = SimConfig {
        n_paths: cfg.verify.gateaux_paths,
        seed: cfg.sim.seed,
        record_every: grid.steps(),
        keep_paths: 0,
        ..Default::default()
    };
    let factor = cfg.verify.negative_control_factor;
    let mut report = timings.time("verify", || {
        gateaux_negative_control(&cfg.model, &s.mf, tt, &dirs, &sim, factor)
    })?;
    let tolerance = GATEAUX_Z_TOLERANCE;
    report.name = "gateaux_wrong_strategies".into();
    report.negative_control = false;
    report.tolerance = tolerance;
    report.passed = report.statistic <= tolerance;
    timings.write(dir)?;
    finish_checks(dir, cfg, &[report], "verify --negative-control-only")
}

/// Kept paths of one column, grouped by path id in file order.
fn read_paths(dir: &Path, c: Column) -> Result<Vec<(String, Vec<f64>, Vec<f64>)>> {
    let t = Table::read(&dir.join(path_file(c)))?;
    let ts = t.column("t").unwrap_or_default();
    let vs = t.column("value").unwrap_or_default();
    let mut out: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        let id = &r[0];
        match out.last_mut() {
            Some((last, xs, ys)) if last == id => {
                xs.push(ts[i]);
                ys.push(vs[i]);
            }
            _ => out.push((id.clone(), vec![ts[i]], vec![vs[i]])),
        }
    }
    Ok(out)
}

fn path_series(dir: &Path, c: Column, label: &str, max_paths: usize) -> Result<Vec<Series>> {
    Ok(read_paths(dir, c)?
        .into_iter()
        .take(max_paths)
        .map(|(id, xs, ys)| Series::new(format!("{label} path {id}"), xs, ys))
        .collect())
}

fn table_series(t: &Table, names: &[&str]) -> Vec<Series> {
    let xs = t.column("t").unwrap_or_default();
    names
        .iter()
        .filter_map(|n| t.column(n).map(|ys| Series::new(*n, xs.clone(), ys)))
        .collect()
}

fn figure(dir: &Path, fig: FigureName, horizon: f64) -> Result<String> {
    Ok(match fig {
        FigureName::Fig1 => {
            let cols = [
                (Column::Price, "S"),
                (Column::Alpha, "alpha"),
                (Column::NuBar, "nu_bar"),
                (Column::NuB, "nu_B"),
                (Column::QBar, "Q_bar"),
                (Column::QBarB, "Q_bar_B"),
            ];
            let mut panels = Vec::new();
            for (c, label) in cols {
                panels.push(Panel::new(label, path_series(dir, c, label, 2)?));
            }
            render("Sample paths", &panels, 2)
        }
        FigureName::Fig2 => {
            let t = Table::read(&dir.join(COEFFICIENTS))?;
            let g = table_series(&t, &["g_a", "g_b", "g_c"]);
            let h = table_series(&t, &["h_a", "h_b", "h_c"]);
            let lo = 0.95 * horizon;
            let panels = vec![
                Panel::new("g", g.clone()),
                Panel::new("h", h.clone()),
                Panel::new("g near T", g).window(lo, horizon),
                Panel::new("h near T", h).window(lo, horizon),
            ];
            render("Mean-field and broker coefficients", &panels, 2)
        }
        FigureName::Fig3 => {
            let t = Table::read(&dir.join(trader_file(0)))?;
            let panels: Vec<Panel> = ["f_a", "f_aI", "f_b", "f_bI", "f_c"]
                .iter()
                .map(|n| Panel::new(*n, table_series(&t, &[n])))
                .collect();
            render("Trader coefficients", &panels, 3)
        }
        FigureName::Fig4 => {
            let pairs = [
                (Column::AlphaI, "alpha_I", Column::Alpha, "alpha"),
                (Column::NuI, "nu_I", Column::NuBar, "nu_bar"),
                (Column::QI, "Q_I", Column::QBar, "Q_bar"),
            ];
            let mut panels = Vec::new();
            for (ci, li, cm, lm) in pairs {
                let mut s = path_series(dir, ci, li, 1)?;
                s.extend(path_series(dir, cm, lm, 1)?);
                panels.push(Panel::new(format!("{li} and {lm}"), s));
            }
            render("Individual trader against the population", &panels, 3)
        }
    })
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.outputs;
    let mut timings = Timings::default();
    timings.time("report", || -> Result<()> {
        for fig in &cfg.figures {
            let svg = figure(dir, *fig, cfg.model.horizon)?;
            write_file(&dir.join(fig.file_name()), svg.as_bytes())?;
        }
        Ok(())
    })?;
    write_manifest(dir, "report", cfg)?;
    timings.write(dir)
}
