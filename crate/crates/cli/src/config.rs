//! Experiment configuration: problem defaults, a TOML file merged over
//! them, then command-line overrides.

use std::path::Path;

use funnel_select::PhiFamily;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed config: {0}")]
    Parse(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Problem {
    Clairaut,
    SqrtAbs,
    RiccatiBlowup,
    SyntheticTree,
}

impl Problem {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Clairaut => "clairaut",
            Self::SqrtAbs => "sqrt_abs",
            Self::RiccatiBlowup => "riccati_blowup",
            Self::SyntheticTree => "synthetic_tree",
        }
    }

    pub fn is_local(&self) -> bool {
        matches!(self, Self::RiccatiBlowup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_start: f64,
    pub delta: f64,
    /// Window length in steps. Local problems take their window from the
    /// terminal time instead.
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionConfig {
    pub n_max: usize,
    pub eta_tie: f64,
    pub eps_singleton: f64,
    pub lambda_height: u32,
    pub path_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(rename = "horizon_T")]
    pub horizon_t: f64,
    pub epsilon_tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Anchors used for the axiom checks and the reduction.
    pub anchors: Vec<f64>,
    /// Random `(t0, t1, t2, a)` triples for the semigroup check.
    pub triples: usize,
    pub seed: u64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    /// Fraction of the terminal time left uncovered at the end.
    pub guard_gap: f64,
    /// Finer guard fraction compared against `guard_gap`.
    pub guard_gap_fine: f64,
    pub tt_delta: f64,
    pub tt_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClairautConfig {
    /// Time range of the classification samples.
    pub sample_t_lo: f64,
    pub sample_t_hi: f64,
    pub tolerance: f64,
    /// `[t, x]` of the node whose funnel is dumped.
    pub dump_node: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub tree_seed: u64,
    pub max_arcs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub phi_family: PhiFamily,
    pub emit_plot_data: bool,
    pub grid: GridConfig,
    pub reduction: ReductionConfig,
    pub budget: BudgetConfig,
    pub samples: SampleConfig,
    pub local: LocalConfig,
    pub clairaut: ClairautConfig,
    pub synthetic: SyntheticConfig,
}

impl ExperimentConfig {
    pub fn defaults(problem: Problem) -> Self {
        let (grid, anchors, triples) = match problem {
            Problem::Clairaut => (
                GridConfig {
                    t_start: -1.0,
                    delta: 0.25,
                    n_steps: 12,
                },
                vec![-0.25, 0.0, 1.0],
                100,
            ),
            Problem::SqrtAbs => (
                GridConfig {
                    t_start: 0.0,
                    delta: 0.25,
                    n_steps: 12,
                },
                vec![0.0, 0.25],
                100,
            ),
            Problem::RiccatiBlowup => (
                GridConfig {
                    t_start: 0.0,
                    delta: 0.0625,
                    n_steps: 0,
                },
                vec![-1.5, 0.0, 0.75],
                40,
            ),
            Problem::SyntheticTree => (
                GridConfig {
                    t_start: 0.0,
                    delta: 0.5,
                    n_steps: 6,
                },
                vec![0.0, 0.5],
                40,
            ),
        };
        let horizon = (grid.n_steps as f64 * grid.delta).max(1.0);
        Self {
            problem,
            phi_family: PhiFamily::Sigmoids,
            emit_plot_data: true,
            grid,
            reduction: ReductionConfig {
                n_max: 500,
                eta_tie: 1e-12,
                eps_singleton: 1e-6,
                lambda_height: 4,
                path_cap: 1 << 16,
            },
            budget: BudgetConfig {
                horizon_t: horizon,
                epsilon_tail: 1e-2,
            },
            samples: SampleConfig {
                anchors,
                triples,
                seed: 0,
                tolerance: 1e-9,
            },
            local: LocalConfig {
                guard_gap: 1e-3,
                guard_gap_fine: 1e-4,
                tt_delta: 1e-2,
                tt_tolerance: 1e-6,
            },
            clairaut: ClairautConfig {
                sample_t_lo: -1.0,
                sample_t_hi: 0.5,
                tolerance: 1e-9,
                dump_node: [0.0, 1.0],
            },
            synthetic: SyntheticConfig {
                tree_seed: 7,
                max_arcs: 3,
            },
        }
    }

    /// Problem defaults with the file's keys merged over them. The problem
    /// is taken from `problem` if given, else from the file.
    pub fn load(file: Option<&Path>, problem: Option<Problem>) -> Result<Self, ConfigError> {
        let table: toml::Table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                text.parse()
                    .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(table, problem)
    }

    pub fn from_table(table: toml::Table, problem: Option<Problem>) -> Result<Self, ConfigError> {
        let problem = match problem {
            Some(p) => p,
            None => match table.get("problem") {
                Some(v) => v
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| invalid("problem", e.message().to_string()))?,
                None => Problem::Clairaut,
            },
        };
        let mut merged = toml::Table::try_from(Self::defaults(problem)).expect("defaults serialize");
        merge(&mut merged, table);
        merged.insert("problem".into(), toml::Value::String(problem.as_str().into()));
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive and finite, got {v}")))
            }
        };
        if !self.grid.t_start.is_finite() {
            return Err(invalid("grid.t_start", "must be finite"));
        }
        positive("grid.delta", self.grid.delta)?;
        if !self.problem.is_local() && self.grid.n_steps == 0 {
            return Err(invalid("grid.n_steps", "must be positive"));
        }
        if !(self.reduction.eta_tie >= 0.0) {
            return Err(invalid("reduction.eta_tie", "must be non-negative"));
        }
        positive("reduction.eps_singleton", self.reduction.eps_singleton)?;
        if self.reduction.lambda_height == 0 {
            return Err(invalid("reduction.lambda_height", "must be positive"));
        }
        if self.reduction.path_cap == 0 {
            return Err(invalid("reduction.path_cap", "must be positive"));
        }
        positive("budget.horizon_T", self.budget.horizon_t)?;
        positive("budget.epsilon_tail", self.budget.epsilon_tail)?;
        positive("samples.tolerance", self.samples.tolerance)?;
        if self.samples.anchors.is_empty() {
            return Err(invalid("samples.anchors", "needs at least one anchor"));
        }
        if let Some(a) = self.samples.anchors.iter().find(|a| !a.is_finite()) {
            return Err(invalid("samples.anchors", format!("anchor {a} is not finite")));
        }
        for (field, v) in [
            ("local.guard_gap", self.local.guard_gap),
            ("local.guard_gap_fine", self.local.guard_gap_fine),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid(field, format!("must lie in (0, 1), got {v}")));
            }
        }
        positive("local.tt_delta", self.local.tt_delta)?;
        positive("local.tt_tolerance", self.local.tt_tolerance)?;
        positive("clairaut.tolerance", self.clairaut.tolerance)?;
        if !(self.clairaut.sample_t_lo <= self.clairaut.sample_t_hi) {
            return Err(invalid(
                "clairaut.sample_t_hi",
                "must not be below clairaut.sample_t_lo",
            ));
        }
        if self.synthetic.max_arcs == 0 {
            return Err(invalid("synthetic.max_arcs", "must be positive"));
        }
        Ok(())
    }

    pub fn t_end(&self) -> f64 {
        self.grid.t_start + self.grid.n_steps as f64 * self.grid.delta
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Flag values that override individual config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub n_max: Option<usize>,
    pub eta_tie: Option<f64>,
    pub eps_singleton: Option<f64>,
    pub guard_gap: Option<f64>,
    pub phi_family: Option<PhiFamily>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), ConfigError> {
        if let Some(v) = self.n_max {
            cfg.reduction.n_max = v;
        }
        if let Some(v) = self.eta_tie {
            cfg.reduction.eta_tie = v;
        }
        if let Some(v) = self.eps_singleton {
            cfg.reduction.eps_singleton = v;
        }
        if let Some(v) = self.guard_gap {
            cfg.local.guard_gap = v;
        }
        if let Some(v) = self.phi_family {
            cfg.phi_family = v;
        }
        cfg.validate()
    }
}
