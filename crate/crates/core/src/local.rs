//! Local funnels: solutions that exist only up to a terminal time.
//!
//! A local funnel is unrolled on the grid nodes strictly before
//! `t0 + T - gap`, with `gap = guard_frac * T`, so blow-up paths are never
//! sampled at their singularity. Since `0 <= phi <= 1`, the part of the
//! discounted integral lost to the gap is at most
//! `(e^{-lambda t_cov} - e^{-lambda T}) / lambda`.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FunnelError, Result};
use crate::funnel::{unroll, AxiomReport, AxiomViolation, BranchRule, Funnel, DEFAULT_PATH_CAP};
use crate::path_space::{index_of, rho, Path, StatePoint, TimeGrid};
use crate::selection::{reduce, ReductionParams, SelectionOutcome, SemigroupFailure, SemigroupReport};
use crate::separating::{window_integral, Enumeration, SeparatingFunctional};

/// Default guard gap as a fraction of the terminal time.
pub const DEFAULT_GUARD_FRAC: f64 = 1e-3;

/// Length of the existence interval of local solutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalTime {
    Finite(f64),
    Infinite,
}

impl TerminalTime {
    pub fn finite(duration: f64) -> Result<Self> {
        if duration > 0.0 && duration.is_finite() {
            Ok(Self::Finite(duration))
        } else {
            Err(FunnelError::InvalidParameter(format!(
                "terminal time must be positive and finite, got {duration}"
            )))
        }
    }

    /// Duration, `+inf` for the infinite marker.
    pub fn duration(&self) -> f64 {
        match *self {
            Self::Finite(d) => d,
            Self::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Self::Finite(_))
    }
}

/// A branch rule together with its terminal-time oracle.
pub trait LocalRule: BranchRule {
    fn terminal_time(&self, t: f64, x: &StatePoint) -> TerminalTime;
}

impl<R: LocalRule + ?Sized> LocalRule for &R {
    fn terminal_time(&self, t: f64, x: &StatePoint) -> TerminalTime {
        (**self).terminal_time(t, x)
    }
}

/// Grid of the nodes from `t0` strictly before `t0 + T - guard_frac * T`.
pub fn local_grid(t0: f64, terminal: TerminalTime, step: f64, guard_frac: f64) -> Result<(TimeGrid, f64)> {
    let TerminalTime::Finite(duration) = terminal else {
        return Err(FunnelError::InfiniteTerminal);
    };
    if !(guard_frac > 0.0 && guard_frac < 1.0) {
        return Err(FunnelError::InvalidParameter(format!(
            "guard gap fraction must lie in (0, 1), got {guard_frac}"
        )));
    }
    let first = index_of(t0, step)?;
    let gap = guard_frac * duration;
    let end = t0 + duration - gap;
    let last = (end / step).ceil() as i64 - 1;
    if last < first {
        return Err(FunnelError::HorizonTooShort {
            needed: step,
            available: duration - gap,
        });
    }
    Ok((TimeGrid::from_index(first, step, (last - first) as usize)?, gap))
}

/// A funnel on the truncated window `[t0, t0 + T - gap)`.
#[derive(Debug, Clone)]
pub struct LocalFunnel {
    funnel: Funnel,
    terminal: TerminalTime,
    guard_gap: f64,
}

impl LocalFunnel {
    pub fn unroll<R: LocalRule + ?Sized>(
        rule: &R,
        t0: f64,
        a: &StatePoint,
        step: f64,
        guard_frac: f64,
        cap: usize,
    ) -> Result<Self> {
        let terminal = rule.terminal_time(t0, a);
        let (grid, guard_gap) = local_grid(t0, terminal, step, guard_frac)?;
        Ok(Self {
            funnel: unroll(rule, a, grid, cap)?,
            terminal,
            guard_gap,
        })
    }

    pub fn funnel(&self) -> &Funnel {
        &self.funnel
    }

    pub fn terminal(&self) -> TerminalTime {
        self.terminal
    }

    pub fn guard_gap(&self) -> f64 {
        self.guard_gap
    }

    pub fn t0(&self) -> f64 {
        self.funnel.t0()
    }

    /// Length of the sampled window.
    pub fn covered(&self) -> f64 {
        self.funnel.grid().horizon()
    }
}

/// One lower semicontinuity failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtViolation {
    pub t0: f64,
    pub anchor: StatePoint,
    pub value: f64,
    pub stencil_min: f64,
    pub deficit: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TtReport {
    pub checked: usize,
    pub worst_deficit: f64,
    pub violations: Vec<TtViolation>,
}

impl TtReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Number of radius halvings in the lower semicontinuity stencil.
pub const TT_REFINEMENTS: u32 = 20;

/// Lower semicontinuity of `T` at each sample: the deficit
/// `T(t0, a) - min T` over the `3^(1+dim) - 1` stencil of perturbations
/// at radius `delta * 2^-j` must vanish as `j` grows. A sample fails when
/// the deficit at the finest radius exceeds `lsc_tol`.
pub fn check_tt<F>(terminal: F, samples: &[(f64, StatePoint)], delta: f64, lsc_tol: f64) -> Result<TtReport>
where
    F: Fn(f64, &StatePoint) -> TerminalTime + Sync,
{
    if !(delta > 0.0) {
        return Err(FunnelError::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let results: Vec<(f64, f64, f64)> = samples
        .par_iter()
        .map(|(t0, a)| {
            let value = terminal(*t0, a).duration();
            let r = delta * 0.5f64.powi(TT_REFINEMENTS as i32);
            let m = stencil_min(&terminal, *t0, a, r);
            let deficit = if value <= m { 0.0 } else { value - m };
            (value, m, deficit)
        })
        .collect();
    let mut report = TtReport::default();
    for ((t0, a), (value, m, deficit)) in samples.iter().zip(results) {
        report.checked += 1;
        report.worst_deficit = report.worst_deficit.max(deficit);
        if deficit > lsc_tol {
            report.violations.push(TtViolation {
                t0: *t0,
                anchor: a.clone(),
                value,
                stencil_min: m,
                deficit,
            });
        }
    }
    Ok(report)
}

fn stencil_min<F: Fn(f64, &StatePoint) -> TerminalTime>(terminal: &F, t0: f64, a: &StatePoint, r: f64) -> f64 {
    let dims = 1 + a.dim();
    let total = 3usize.pow(dims as u32);
    let mut best = f64::INFINITY;
    for code in 0..total {
        let mut offs = Vec::with_capacity(dims);
        let mut c = code;
        for _ in 0..dims {
            offs.push((c % 3) as f64 - 1.0);
            c /= 3;
        }
        if offs.iter().all(|&o| o == 0.0) {
            continue;
        }
        let t = t0 + offs[0] * r;
        let x: Vec<f64> = a.coords().iter().zip(&offs[1..]).map(|(v, o)| v + o * r).collect();
        best = best.min(terminal(t, &StatePoint::new(x).expect("finite perturbation")).duration());
    }
    best
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Ls3Report {
    pub checked: usize,
    /// Largest `|T(t_k, u(t_k)) - (T(t0, a) - k step)|`.
    pub max_abs_defect: f64,
    /// Paths where the inequality fails by more than the tolerance.
    pub inequality_violations: Vec<AxiomViolation>,
    /// Shifted paths missing from the local funnel at their new anchor.
    pub membership: AxiomReport,
}

impl Ls3Report {
    pub fn passed(&self) -> bool {
        self.inequality_violations.is_empty() && self.membership.passed()
    }
}

/// Terminal-time monotonicity and shift membership at grid shift `k`.
/// Membership is tested on the common prefix of the shifted path and the
/// paths of the local funnel unrolled from `(t_k, u(t_k))`.
pub fn check_ls3<R: LocalRule + ?Sized>(f: &LocalFunnel, rule: &R, k: usize, guard_frac: f64, tol: f64) -> Ls3Report {
    let mut report = Ls3Report::default();
    let grid = *f.funnel.grid();
    if k > grid.n_steps() {
        report.inequality_violations.push(AxiomViolation {
            path: 0,
            k,
            other: None,
            detail: format!("k = {k} beyond the local grid"),
        });
        return report;
    }
    let t0_duration = f.terminal.duration();
    let tk = grid.time(k);
    let elapsed = k as f64 * grid.step();
    for (i, u) in f.funnel.paths().iter().enumerate() {
        report.checked += 1;
        let x = u.sample(k);
        let defect = rule.terminal_time(tk, x).duration() - (t0_duration - elapsed);
        if defect.is_finite() {
            report.max_abs_defect = report.max_abs_defect.max(defect.abs());
        }
        if !(defect >= -tol) {
            report.inequality_violations.push(AxiomViolation {
                path: i,
                k,
                other: None,
                detail: format!("terminal time defect {defect:e}"),
            });
        }
        report.membership.checked += 1;
        let shifted = u.shift(k).expect("k within grid");
        match LocalFunnel::unroll(rule, tk, x, grid.step(), guard_frac, DEFAULT_PATH_CAP) {
            Ok(sub) => {
                let len = shifted.samples().len().min(sub.funnel.grid().len());
                let prefix = |p: &Path| -> Vec<u64> { p.samples()[..len].iter().flat_map(StatePoint::bits).collect() };
                let members: HashSet<Vec<u64>> = sub.funnel.paths().iter().map(prefix).collect();
                if !members.contains(&prefix(&shifted)) {
                    report.membership.violations.push(AxiomViolation {
                        path: i,
                        k,
                        other: None,
                        detail: format!("shifted path is not in the local funnel at t = {tk}"),
                    });
                }
            }
            Err(e) => report.membership.violations.push(AxiomViolation {
                path: i,
                k,
                other: None,
                detail: e.to_string(),
            }),
        }
    }
    report
}

/// `w~(s) = w(t0 + s T)` on the uniform chart grid `s_k = k step / T`.
pub fn reparametrize(w: &Path, terminal: TerminalTime) -> Result<Path> {
    let TerminalTime::Finite(duration) = terminal else {
        return Err(FunnelError::InfiniteTerminal);
    };
    if w.grid().horizon() >= duration {
        return Err(FunnelError::OutOfRange {
            what: "path window",
            detail: format!("covers {} >= T = {duration}", w.grid().horizon()),
        });
    }
    let grid = TimeGrid::from_index(0, w.grid().step() / duration, w.grid().n_steps())?;
    Path::new(grid, w.samples().to_vec())
}

/// Inverse of [`reparametrize`]: back to the time grid of step `step`
/// starting at `t0`.
pub fn unreparametrize(w: &Path, t0: f64, terminal: TerminalTime, step: f64) -> Result<Path> {
    let TerminalTime::Finite(duration) = terminal else {
        return Err(FunnelError::InfiniteTerminal);
    };
    let expected = w.grid().step() * duration;
    if (expected - step).abs() > 1e-9 * step {
        return Err(FunnelError::GridMismatch(format!(
            "chart step {} times T = {duration} is not {step}",
            w.grid().step()
        )));
    }
    Path::new(TimeGrid::new(t0, step, w.grid().n_steps())?, w.samples().to_vec())
}

/// Discounted integral over `[0, min(T, covered)]`.
pub fn zeta_local(w: &Path, terminal: TerminalTime, fun: &SeparatingFunctional) -> Result<f64> {
    window_integral(w, fun, terminal.duration().min(w.grid().horizon()))
}

/// Bound on the part of `int_0^T` not sampled by a path covering
/// `[0, covered]`.
pub fn guard_gap_bound(lambda: f64, covered: f64, terminal: TerminalTime) -> f64 {
    let tail = match terminal {
        TerminalTime::Finite(d) => (-lambda * d).exp(),
        TerminalTime::Infinite => 0.0,
    };
    (((-lambda * covered).exp() - tail) / lambda).max(0.0)
}

/// Selection on a local funnel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalOutcome {
    pub outcome: SelectionOutcome,
    pub terminal: TerminalTime,
    pub guard_gap: f64,
}

impl LocalOutcome {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = self.outcome.to_json();
        v["terminal_T"] = serde_json::json!(self.terminal.duration());
        v["guard_gap"] = serde_json::json!(self.guard_gap);
        v
    }
}

/// Reduction with the local functional. On the truncated grid the local
/// functional is the discounted integral over the whole window, the same
/// functional the global reduction uses.
pub fn reduce_local(f: &LocalFunnel, enumeration: &Enumeration, params: &ReductionParams) -> LocalOutcome {
    LocalOutcome {
        outcome: reduce(&f.funnel, enumeration, params),
        terminal: f.terminal,
        guard_gap: f.guard_gap,
    }
}

/// Local selection `(t0, a) -> u(.; t0, a)` on `[t0, t0 + T(t0, a))`.
pub struct LocalSemiProcess<R> {
    rule: R,
    enumeration: Enumeration,
    params: ReductionParams,
    step: f64,
    guard_frac: f64,
    path_cap: usize,
}

impl<R: LocalRule> LocalSemiProcess<R> {
    pub fn new(rule: R, enumeration: Enumeration, params: ReductionParams, step: f64, guard_frac: f64) -> Result<Self> {
        params.validate()?;
        if !(step > 0.0) {
            return Err(FunnelError::InvalidGrid(format!("step must be positive, got {step}")));
        }
        Ok(Self {
            rule,
            enumeration,
            params,
            step,
            guard_frac,
            path_cap: DEFAULT_PATH_CAP,
        })
    }

    pub fn rule(&self) -> &R {
        &self.rule
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn funnel(&self, t0: f64, a: &StatePoint) -> Result<LocalFunnel> {
        LocalFunnel::unroll(&self.rule, t0, a, self.step, self.guard_frac, self.path_cap)
    }

    pub fn select(&self, t0: f64, a: &StatePoint) -> Result<LocalOutcome> {
        Ok(reduce_local(&self.funnel(t0, a)?, &self.enumeration, &self.params))
    }
}

/// Semigroup check for local selections, recomputing from the intermediate
/// node. Triples must satisfy `t2` inside the sampled window of both
/// selections involved.
pub fn verify_local_semigroup<R: LocalRule>(
    p: &LocalSemiProcess<R>,
    triples: &[(f64, f64, f64, StatePoint)],
    tol: f64,
) -> SemigroupReport {
    let results: Vec<std::result::Result<f64, String>> = triples
        .par_iter()
        .map(|(t0, t1, t2, a)| {
            let u = p.select(*t0, a)?;
            let x1 = u.outcome.at(*t1)?;
            let v = p.select(*t1, &x1)?;
            rho(&v.outcome.at(*t2)?, &u.outcome.at(*t2)?)
        })
        .map(|r| r.map_err(|e: FunnelError| e.to_string()))
        .collect();
    let mut report = SemigroupReport {
        checked: triples.len(),
        tolerance: tol,
        worst_deviation: 0.0,
        failures: Vec::new(),
    };
    for ((t0, t1, t2, a), r) in triples.iter().zip(results) {
        let (deviation, detail) = match r {
            Ok(dev) if dev <= tol => {
                report.worst_deviation = report.worst_deviation.max(dev);
                continue;
            }
            Ok(dev) => {
                report.worst_deviation = report.worst_deviation.max(dev);
                (Some(dev), "deviation above tolerance".to_string())
            }
            Err(e) => (None, e),
        };
        report.failures.push(SemigroupFailure {
            t0: *t0,
            t1: *t1,
            t2: *t2,
            anchor: a.clone(),
            deviation,
            detail,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funnel::{BranchArc, GridNode};
    use crate::separating::{Rational, TestFunction};

    /// `x' = 1`, blowing up (by fiat) at `t = 4`.
    struct Drift;

    impl BranchRule for Drift {
        fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
            Ok(vec![BranchArc::scalar(x.x() + node.step)])
        }
        fn max_branching(&self) -> usize {
            1
        }
    }

    impl LocalRule for Drift {
        fn terminal_time(&self, t: f64, _x: &StatePoint) -> TerminalTime {
            TerminalTime::Finite(4.0 - t)
        }
    }

    fn constant(value: f64, lambda: u32) -> SeparatingFunctional {
        SeparatingFunctional::probe(Rational { num: lambda, den: 1 }, TestFunction::Constant { value })
    }

    #[test]
    fn terminal_time_positive() {
        assert!(TerminalTime::finite(0.0).is_err());
        assert!(TerminalTime::finite(-1.0).is_err());
        assert!(TerminalTime::finite(f64::INFINITY).is_err());
        assert_eq!(TerminalTime::finite(2.0).unwrap().duration(), 2.0);
    }

    #[test]
    fn local_grid_stops_before_gap() {
        let (g, gap) = local_grid(0.0, TerminalTime::Finite(4.0), 0.5, 1e-3).unwrap();
        assert_eq!(gap, 4e-3);
        assert_eq!(g.t_end(), 3.5);
        let (g, _) = local_grid(1.0, TerminalTime::Finite(3.0), 0.5, 1e-3).unwrap();
        assert_eq!(g.t_end(), 3.5);
        assert!(local_grid(0.0, TerminalTime::Infinite, 0.5, 1e-3).is_err());
    }

    #[test]
    fn zeta_local_constants() {
        let f = LocalFunnel::unroll(&Drift, 0.0, &StatePoint::scalar(0.0), 0.5, 1e-3, 10).unwrap();
        let w = &f.funnel().paths()[0];
        assert_eq!(zeta_local(w, f.terminal(), &constant(0.0, 1)).unwrap(), 0.0);
        let one = zeta_local(w, f.terminal(), &constant(1.0, 1)).unwrap();
        let covered = f.covered();
        assert!((one - (1.0 - (-covered).exp())).abs() < 1e-14);
        let full = 1.0 - (-4.0f64).exp();
        assert!(full - one <= guard_gap_bound(1.0, covered, f.terminal()) + 1e-15);
    }

    #[test]
    fn reparametrize_linear() {
        let w = Path::from_fn(TimeGrid::new(0.0, 0.5, 3).unwrap(), StatePoint::scalar).unwrap();
        let wt = reparametrize(&w, TerminalTime::Finite(2.0)).unwrap();
        assert_eq!(wt.grid().step(), 0.25);
        let slope = (wt.sample(1).x() - wt.sample(0).x()) / wt.grid().step();
        assert_eq!(slope, 2.0);
        assert!(reparametrize(&w, TerminalTime::Infinite).is_err());
        let back = unreparametrize(&wt, 0.0, TerminalTime::Finite(2.0), 0.5).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn ls3_equality_for_exact_terminal_time() {
        let f = LocalFunnel::unroll(&Drift, 0.0, &StatePoint::scalar(0.0), 0.5, 1e-3, 10).unwrap();
        for k in 0..=f.funnel().grid().n_steps() {
            let r = check_ls3(&f, &Drift, k, 1e-3, 1e-12);
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.max_abs_defect, 0.0);
        }
    }

    #[test]
    fn tt_detects_downward_jump() {
        let jump = |t: f64, _x: &StatePoint| TerminalTime::Finite(if t == 0.0 { 2.0 } else { 1.0 });
        let samples = vec![(0.0, StatePoint::scalar(0.0)), (0.5, StatePoint::scalar(0.0))];
        let r = check_tt(jump, &samples, 1e-2, 1e-6).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].t0, 0.0);
        let up = |t: f64, _x: &StatePoint| TerminalTime::Finite(if t == 0.0 { 0.5 } else { 1.0 });
        assert!(check_tt(up, &samples, 1e-2, 1e-6).unwrap().passed());
    }
}
