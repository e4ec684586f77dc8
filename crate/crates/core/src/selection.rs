//! Funnel reduction: value functions, argmax sub-funnels, the nested
//! reduction to a single path, and the semi-process built from it.
//!
//! The value of a funnel node is computed by backward recursion over the
//! tree, `m(node) = max_arc [ I(arc) + e^{-lambda h} m(child) ]`, where
//! `I(arc)` is the discounted integral over the arc measured from the node's
//! own time. A path belongs to the argmax set when every arc it takes attains
//! the maximum at its node (within `eta_tie`). Comparisons are therefore made
//! at the node where two paths diverge, in that node's own time frame, which
//! is exactly the comparison a reduction started at that node performs. The
//! reduction restricted below a node on a surviving path coincides with the
//! reduction started at the node, and the selection is consistent under
//! shifts by construction.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FunnelError, Result};
use crate::funnel::{unroll, BranchRule, Funnel, DEFAULT_PATH_CAP};
use crate::path_space::{default_metric_terms, index_of, metric_d_unchecked, rho, Path, StatePoint, TimeGrid};
use crate::separating::{Enumeration, ExpSimpson, SeparatingFunctional};

/// Parameters of one reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionParams {
    /// Number of enumerated functionals available.
    pub n_max: usize,
    /// Tie band for the argmax, applied at each node.
    pub eta_tie: f64,
    /// Diameter below which the survivor set counts as a singleton.
    pub eps_singleton: f64,
}

impl Default for ReductionParams {
    fn default() -> Self {
        Self {
            n_max: 500,
            eta_tie: 1e-12,
            eps_singleton: 1e-6,
        }
    }
}

impl ReductionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_tie >= 0.0) {
            return Err(FunnelError::InvalidParameter("eta_tie must be non-negative".into()));
        }
        if !(self.eps_singleton > 0.0) {
            return Err(FunnelError::InvalidParameter("eps_singleton must be positive".into()));
        }
        Ok(())
    }
}

/// One value per tree node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEntry {
    pub depth: usize,
    pub time: f64,
    pub state: StatePoint,
    pub value: f64,
}

/// The value function `m(t_k, x)` over the nodes of one funnel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTable {
    pub functional: SeparatingFunctional,
    /// Indexed by tree node id.
    pub entries: Vec<ValueEntry>,
    /// Value of each node measured through its incoming arc from the parent
    /// (`I(arc) + e^{-lambda h} m(node)`); the root has none.
    arc_values: Vec<f64>,
}

impl ValueTable {
    pub fn root(&self) -> f64 {
        self.entries[0].value
    }

    /// Lookup by `(time, state)`; nodes sharing both have equal values in
    /// unrolled funnels, the first is returned.
    pub fn get(&self, time: f64, state: &StatePoint) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.time == time && e.state == *state)
            .map(|e| e.value)
    }
}

/// Backward recursion for `m` over the whole funnel window.
pub fn value_function(f: &Funnel, fun: &SeparatingFunctional) -> ValueTable {
    let rule = ExpSimpson::new(fun.lambda(), f.grid().step());
    let nodes = f.nodes();
    let mut values = vec![0.0f64; nodes.len()];
    let mut arc_values = vec![f64::NAN; nodes.len()];
    // children always carry larger ids than their parent
    for id in (0..nodes.len()).rev() {
        let node = &nodes[id];
        if !node.children.is_empty() {
            let mut best = f64::NEG_INFINITY;
            for &c in &node.children {
                let q = rule.segment(&fun.phi, &node.state, &nodes[c].state) + rule.decay * values[c];
                arc_values[c] = q;
                best = best.max(q);
            }
            values[id] = best;
        }
    }
    let entries = nodes
        .iter()
        .zip(&values)
        .map(|(n, &v)| ValueEntry {
            depth: n.depth,
            time: f.grid().time(n.depth),
            state: n.state.clone(),
            value: v,
        })
        .collect();
    ValueTable {
        functional: fun.clone(),
        entries,
        arc_values,
    }
}

/// Indices (into `f.paths()`) of the paths whose every arc attains the node
/// maximum within `eta_tie`.
pub fn argmax_indices(f: &Funnel, fun: &SeparatingFunctional, eta_tie: f64) -> Vec<usize> {
    let table = value_function(f, fun);
    let nodes = f.nodes();
    let mut kept = vec![false; nodes.len()];
    kept[0] = true;
    for id in 1..nodes.len() {
        let parent = nodes[id].parent.expect("non-root has a parent");
        kept[id] = kept[parent] && table.arc_values[id] >= table.entries[parent].value - eta_tie;
    }
    f.leaves()
        .iter()
        .enumerate()
        .filter(|(_, &leaf)| kept[leaf])
        .map(|(i, _)| i)
        .collect()
}

/// The argmax sub-funnel `V_zeta[S]`.
pub fn argmax_set(f: &Funnel, fun: &SeparatingFunctional, eta_tie: f64) -> Funnel {
    f.restrict(&argmax_indices(f, fun, eta_tie))
        .expect("the argmax set contains a maximizer")
}

/// Why a reduction stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Singleton,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    /// Enumeration index of the functional applied at this stage.
    pub n: usize,
    pub functional: SeparatingFunctional,
    pub survivors: usize,
    /// Upper bound on the survivor diameter under `metric_d`; exact for
    /// survivor sets up to [`EXACT_DIAMETER_LIMIT`] paths.
    pub diameter: f64,
}

/// Survivor sets up to this size get an exact pairwise diameter.
pub const EXACT_DIAMETER_LIMIT: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionTrace {
    pub initial_paths: usize,
    pub initial_diameter: f64,
    pub stages: Vec<StageRecord>,
    pub stop_reason: StopReason,
}

/// Result of reducing one funnel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionOutcome {
    pub t0: f64,
    pub anchor: StatePoint,
    pub selected: Path,
    /// Index of the selected path in the original funnel.
    pub selected_index: usize,
    /// Indices of the final survivors in the original funnel.
    pub survivors: Vec<usize>,
    pub trace: ReductionTrace,
}

impl SelectionOutcome {
    /// `U(t1, t0)(a)`.
    pub fn at(&self, t1: f64) -> Result<StatePoint> {
        self.selected.evaluate(t1)
    }

    /// `{t0, anchor, selected_path_csv, trace, stop_reason}`.
    pub fn to_json(&self) -> serde_json::Value {
        let stages: Vec<serde_json::Value> = self
            .trace
            .stages
            .iter()
            .map(|s| {
                serde_json::json!({
                    "n": s.n,
                    "lambda": s.functional.lambda.to_string(),
                    "phi": s.functional.phi,
                    "survivors": s.survivors,
                    "diameter": s.diameter,
                })
            })
            .collect();
        serde_json::json!({
            "t0": self.t0,
            "anchor": self.anchor,
            "selected_path_csv": self.selected.to_csv(),
            "trace": stages,
            "stop_reason": self.trace.stop_reason,
        })
    }
}

fn diameter_bound(paths: &[Path], cap: f64) -> f64 {
    if paths.len() <= 1 {
        return 0.0;
    }
    let terms = default_metric_terms(paths[0].grid());
    if paths.len() <= EXACT_DIAMETER_LIMIT {
        let mut best = 0.0f64;
        for i in 0..paths.len() {
            for j in i + 1..paths.len() {
                best = best.max(metric_d_unchecked(&paths[i], &paths[j], terms));
            }
        }
        best
    } else {
        let radius = paths[1..]
            .iter()
            .map(|p| metric_d_unchecked(&paths[0], p, terms))
            .fold(0.0f64, f64::max);
        (2.0 * radius).min(cap)
    }
}

/// Successive argmax reduction with the enumerated functionals until the
/// survivors have diameter below `eps_singleton` or `n_max` functionals are
/// used. The first survivor in canonical tree order is selected.
pub fn reduce(f: &Funnel, enumeration: &Enumeration, params: &ReductionParams) -> SelectionOutcome {
    let mut current = f.clone();
    let mut index_map: Vec<usize> = (0..f.len()).collect();
    let initial_diameter = diameter_bound(current.paths(), f64::INFINITY);
    let mut diameter = initial_diameter;
    let mut stages = Vec::new();
    let mut n = 0;
    while diameter >= params.eps_singleton && n < params.n_max {
        let fun = enumeration.functional(n);
        let keep = argmax_indices(&current, &fun, params.eta_tie);
        if keep.len() < current.len() {
            index_map = keep.iter().map(|&i| index_map[i]).collect();
            current = current.restrict(&keep).expect("argmax set is non-empty");
            diameter = diameter_bound(current.paths(), diameter);
        }
        stages.push(StageRecord {
            n,
            functional: fun,
            survivors: current.len(),
            diameter,
        });
        n += 1;
    }
    let stop_reason = if diameter < params.eps_singleton {
        StopReason::Singleton
    } else {
        StopReason::BudgetExhausted
    };
    SelectionOutcome {
        t0: f.t0(),
        anchor: f.anchor().clone(),
        selected: current.paths()[0].clone(),
        selected_index: index_map[0],
        survivors: index_map,
        trace: ReductionTrace {
            initial_paths: f.len(),
            initial_diameter,
            stages,
            stop_reason,
        },
    }
}

type CacheKey = (i64, Vec<u64>);

/// A selection `(t0, a) -> u(.; t0, a)` over a common time window ending at
/// a fixed absolute grid time, with `U(t1, t0)(a) = u(t1; t0, a)`.
pub struct SemiProcess<R> {
    rule: R,
    enumeration: Enumeration,
    params: ReductionParams,
    step: f64,
    end_index: i64,
    path_cap: usize,
    cache: RwLock<HashMap<CacheKey, Arc<SelectionOutcome>>>,
}

impl<R: BranchRule> SemiProcess<R> {
    pub fn new(rule: R, enumeration: Enumeration, params: ReductionParams, step: f64, t_end: f64) -> Result<Self> {
        params.validate()?;
        if !(step > 0.0) {
            return Err(FunnelError::InvalidGrid(format!("step must be positive, got {step}")));
        }
        let end_index = index_of(t_end, step)?;
        Ok(Self {
            rule,
            enumeration,
            params,
            step,
            end_index,
            path_cap: DEFAULT_PATH_CAP,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn with_path_cap(mut self, cap: usize) -> Self {
        self.path_cap = cap;
        self
    }

    pub fn rule(&self) -> &R {
        &self.rule
    }

    pub fn enumeration(&self) -> &Enumeration {
        &self.enumeration
    }

    pub fn params(&self) -> &ReductionParams {
        &self.params
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn t_end(&self) -> f64 {
        self.end_index as f64 * self.step
    }

    /// Grid from `t0` to the common window end.
    pub fn grid_from(&self, t0: f64) -> Result<TimeGrid> {
        let first = index_of(t0, self.step)?;
        if first > self.end_index {
            return Err(FunnelError::OutOfRange {
                what: "initial time",
                detail: format!("{t0} is after the window end {}", self.t_end()),
            });
        }
        TimeGrid::from_index(first, self.step, (self.end_index - first) as usize)
    }

    pub fn funnel(&self, t0: f64, a: &StatePoint) -> Result<Funnel> {
        unroll(&self.rule, a, self.grid_from(t0)?, self.path_cap)
    }

    /// Unrolls and reduces from scratch, bypassing the cache.
    pub fn select_fresh(&self, t0: f64, a: &StatePoint) -> Result<SelectionOutcome> {
        let f = self.funnel(t0, a)?;
        Ok(reduce(&f, &self.enumeration, &self.params))
    }

    /// Cached selection.
    pub fn select(&self, t0: f64, a: &StatePoint) -> Result<Arc<SelectionOutcome>> {
        let key = (index_of(t0, self.step)?, a.bits());
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let outcome = Arc::new(self.select_fresh(t0, a)?);
        self.cache
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| outcome.clone());
        Ok(outcome)
    }

    /// `U(t1, t0)(a)`.
    pub fn map(&self, t1: f64, t0: f64, a: &StatePoint) -> Result<StatePoint> {
        if t1 < t0 {
            return Err(FunnelError::OutOfRange {
                what: "t1",
                detail: format!("{t1} < t0 = {t0}"),
            });
        }
        self.select(t0, a)?.at(t1)
    }

    pub fn cached(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}

impl<R: BranchRule> std::fmt::Debug for SemiProcess<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemiProcess")
            .field("rule", &self.rule.name())
            .field("params", &self.params)
            .field("step", &self.step)
            .field("t_end", &self.t_end())
            .finish()
    }
}

/// Builds a semi-process and reduces every sample in parallel. Per-sample
/// errors are returned alongside, in sample order, without aborting.
pub fn build_semi_process<R: BranchRule>(
    process: SemiProcess<R>,
    samples: &[(f64, StatePoint)],
) -> (SemiProcess<R>, Vec<Result<Arc<SelectionOutcome>>>) {
    let results = samples.par_iter().map(|(t0, a)| process.select(*t0, a)).collect();
    (process, results)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemigroupFailure {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub anchor: StatePoint,
    pub deviation: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemigroupReport {
    pub checked: usize,
    pub tolerance: f64,
    pub worst_deviation: f64,
    pub failures: Vec<SemigroupFailure>,
}

impl SemigroupReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks `rho(U(t2,t1) U(t1,t0) a, U(t2,t0) a) <= tol`, re-running the
/// reduction from `(t1, U(t1,t0) a)` from scratch for every triple.
pub fn verify_semigroup<R: BranchRule>(
    p: &SemiProcess<R>,
    triples: &[(f64, f64, f64, StatePoint)],
    tol: f64,
) -> SemigroupReport {
    let results: Vec<std::result::Result<f64, String>> = triples
        .par_iter()
        .map(|(t0, t1, t2, a)| semigroup_deviation(p, *t0, *t1, *t2, a).map_err(|e| e.to_string()))
        .collect();
    let mut report = SemigroupReport {
        checked: triples.len(),
        tolerance: tol,
        worst_deviation: 0.0,
        failures: Vec::new(),
    };
    for ((t0, t1, t2, a), r) in triples.iter().zip(results) {
        match r {
            Ok(dev) => {
                report.worst_deviation = report.worst_deviation.max(dev);
                if dev > tol {
                    report.failures.push(SemigroupFailure {
                        t0: *t0,
                        t1: *t1,
                        t2: *t2,
                        anchor: a.clone(),
                        deviation: Some(dev),
                        detail: "deviation above tolerance".into(),
                    });
                }
            }
            Err(detail) => report.failures.push(SemigroupFailure {
                t0: *t0,
                t1: *t1,
                t2: *t2,
                anchor: a.clone(),
                deviation: None,
                detail,
            }),
        }
    }
    report
}

fn semigroup_deviation<R: BranchRule>(p: &SemiProcess<R>, t0: f64, t1: f64, t2: f64, a: &StatePoint) -> Result<f64> {
    if !(t0 <= t1 && t1 <= t2) {
        return Err(FunnelError::InvalidParameter(format!(
            "need t0 <= t1 <= t2, got {t0}, {t1}, {t2}"
        )));
    }
    let u = p.select_fresh(t0, a)?;
    let x1 = u.at(t1)?;
    let v = p.select_fresh(t1, &x1)?;
    rho(&v.at(t2)?, &u.at(t2)?)
}
