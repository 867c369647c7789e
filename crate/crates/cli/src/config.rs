//! Run configuration: JSON file, then `--section.field value` overrides.

use std::path::{Path, PathBuf};

use mfg_broker::simulator::SimConfig;
use mfg_broker::verification::SuiteConfig;
use mfg_broker::{make_grid, validate_params, ModelParams, TimeGrid, TraderType, TypeDistribution};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "M")]
    pub steps: usize,
}

/// A trader to solve for: a fixed type, or a distribution whose mean is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraderSpec {
    Type(TraderType),
    Distribution(TypeDistribution),
}

impl TraderSpec {
    pub fn trader_type(&self) -> TraderType {
        match self {
            TraderSpec::Type(t) => *t,
            TraderSpec::Distribution(d) => d.mean(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FigureName {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
}

impl FigureName {
    pub fn file_name(self) -> &'static str {
        match self {
            FigureName::Fig1 => "fig1.svg",
            FigureName::Fig2 => "fig2.svg",
            FigureName::Fig3 => "fig3.svg",
            FigureName::Fig4 => "fig4.svg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: GridSpec,
    pub sim: SimConfig,
    /// The first entry is the individual trader of `simulate` and `verify`.
    pub trader_types: Vec<TraderSpec>,
    pub verify: SuiteConfig,
    pub outputs: PathBuf,
    pub figures: Vec<FigureName>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelParams::default();
        Self {
            grid: GridSpec {
                horizon: model.horizon,
                steps: 10_000,
            },
            model,
            sim: SimConfig::default(),
            trader_types: vec![TraderSpec::Type(TraderType::default())],
            verify: SuiteConfig::default(),
            outputs: PathBuf::from("out"),
            figures: vec![FigureName::Fig1, FigureName::Fig2, FigureName::Fig3, FigureName::Fig4],
        }
    }
}

impl RunConfig {
    /// Read `path` (or start from the defaults), then apply overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialise"),
        };
        if path.is_some() {
            // Missing sections take their defaults.
            let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
            merge_missing(&mut value, &defaults);
        }
        for (key, raw) in overrides {
            set_path(&mut value, key, raw)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let report = validate_params(&self.model);
        if !report.passed() {
            return Err(CliError::Validation(report.to_string()));
        }
        if (self.grid.horizon - self.model.horizon).abs() > 1e-12 * self.model.horizon {
            return Err(CliError::Validation(format!(
                "grid.T = {} differs from model.T = {}",
                self.grid.horizon, self.model.horizon
            )));
        }
        let grid = self.time_grid()?;
        self.sim.validate(&grid).map_err(|e| CliError::Validation(e.to_string()))?;
        if self.trader_types.is_empty() {
            return Err(CliError::Validation("trader_types must not be empty".into()));
        }
        for t in &self.trader_types {
            t.trader_type()
                .validate()
                .map_err(|e| CliError::Validation(e.to_string()))?;
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        make_grid(self.grid.horizon, self.grid.steps).map_err(|e| CliError::Validation(e.to_string()))
    }
}

fn merge_missing(value: &mut Value, defaults: &Value) {
    if let (Value::Object(v), Value::Object(d)) = (value, defaults) {
        for (k, dv) in d {
            match v.get_mut(k) {
                Some(existing) => merge_missing(existing, dv),
                None => {
                    v.insert(k.clone(), dv.clone());
                }
            }
        }
    }
}

/// Set `a.b.c` in `value` to `raw`, read as JSON when it parses and as a
/// string otherwise. Array elements are addressed by index.
pub fn set_path(value: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), parsed);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert(Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Validation(format!("{key}: {part} is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Validation(format!("{key}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::Validation(format!(
                    "{key}: cannot descend into a scalar at {part}"
                )))
            }
        };
    }
    Err(CliError::Validation("empty override key".into()))
}

/// Split `--a.b value` and `--a.b=value` pairs out of an argument list.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let v = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Validation(format!("--{name} needs a value")))?,
        };
        overrides.push((name, v));
    }
    Ok((rest, overrides))
}
