//! Runs the requested phases for one configuration and assembles the report.

use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use funnel_select::clairaut::{classify_process, default_samples, singular, ClairautRule};
use funnel_select::funnel::check_all_shifts;
use funnel_select::local::{
    check_ls3, check_tt, guard_gap_bound, reduce_local, verify_local_semigroup, zeta_local, LocalFunnel, LocalRule,
    LocalSemiProcess,
};
use funnel_select::problems::{RiccatiRule, SqrtAbsRule, SyntheticTreeRule};
use funnel_select::selection::{verify_semigroup, SemigroupReport, StopReason};
use funnel_select::separating::{quadrature_error_estimate, separates, TruncationBudget};
use funnel_select::{
    reduce, unroll, BranchRule, Enumeration, Funnel, ReductionParams, SelectionOutcome, SemiProcess, StatePoint,
    TimeGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Problem};
use crate::plot::emit_plot_data;

/// Pairs of anchor-funnel paths probed for separation in the reduce phase.
const SEPARATION_PAIRS: usize = 32;
/// Functionals compared in the guard-gap sensitivity check.
const GUARD_FUNCTIONALS: usize = 30;
/// The guard-gap check runs on a grid this many times finer than `delta`,
/// so that the two guard fractions end the window at different nodes.
const GUARD_REFINE: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Axioms,
    Reduce,
    Semigroup,
    Clairaut,
    Local,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Axioms,
        Phase::Reduce,
        Phase::Semigroup,
        Phase::Clairaut,
        Phase::Local,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Axioms => "axioms",
            Self::Reduce => "reduce",
            Self::Semigroup => "semigroup",
            Self::Clairaut => "clairaut",
            Self::Local => "local",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub phase: Phase,
    pub status: Status,
    pub detail: Value,
}

impl CheckResult {
    fn new(phase: Phase, passed: bool, detail: Value) -> Self {
        let status = if passed { Status::Pass } else { Status::Fail };
        Self { phase, status, detail }
    }

    fn skipped(phase: Phase, reason: &str) -> Self {
        Self {
            phase,
            status: Status::Skipped,
            detail: json!({ "reason": reason }),
        }
    }
}

/// Deterministic given the configuration; wall-clock times live in
/// [`Timings`].
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub threads: usize,
    pub phases: Vec<(Phase, f64)>,
    pub total_seconds: f64,
}

pub struct Outputs {
    pub report: RunReport,
    pub timings: Timings,
    pub report_path: PathBuf,
}

/// Runs `phases` in order, writing `report.json`, `timings.json` and the
/// artifacts under `out_dir`.
pub fn run(cfg: &ExperimentConfig, phases: &[Phase], out_dir: &FsPath) -> Result<Outputs> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ctx = Runner::new(cfg, out_dir)?;
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut timings = Timings {
        threads: rayon::current_num_threads(),
        ..Default::default()
    };
    for &phase in phases {
        let t = Instant::now();
        let check = match cfg.problem {
            Problem::Clairaut => ctx.global_phase(phase, &ClairautRule::default())?,
            Problem::SqrtAbs => ctx.global_phase(phase, &SqrtAbsRule)?,
            Problem::SyntheticTree => {
                let rule = SyntheticTreeRule::new(cfg.synthetic.tree_seed, cfg.synthetic.max_arcs)?;
                ctx.global_phase(phase, &rule)?
            }
            Problem::RiccatiBlowup => ctx.local_phase(phase, &RiccatiRule)?,
        };
        timings.phases.push((phase, t.elapsed().as_secs_f64()));
        checks.push(check);
    }
    timings.total_seconds = start.elapsed().as_secs_f64();
    let passed = checks.iter().all(|c| c.status != Status::Fail);
    let report = RunReport {
        config: cfg.clone(),
        checks,
        passed,
    };
    let report_path = out_dir.join("report.json");
    write_json(&report_path, &report)?;
    write_json(&out_dir.join("timings.json"), &timings)?;
    Ok(Outputs {
        report,
        timings,
        report_path,
    })
}

fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out_dir: &'a FsPath,
    enumeration: Enumeration,
    params: ReductionParams,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, out_dir: &'a FsPath) -> Result<Self> {
        Ok(Self {
            cfg,
            out_dir,
            enumeration: Enumeration::new(cfg.phi_family, 1, cfg.reduction.lambda_height)?,
            params: ReductionParams {
                n_max: cfg.reduction.n_max,
                eta_tie: cfg.reduction.eta_tie,
                eps_singleton: cfg.reduction.eps_singleton,
            },
        })
    }

    fn grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::new(
            self.cfg.grid.t_start,
            self.cfg.grid.delta,
            self.cfg.grid.n_steps,
        )?)
    }

    fn anchors(&self) -> Vec<StatePoint> {
        self.cfg
            .samples
            .anchors
            .iter()
            .map(|&a| StatePoint::scalar(a))
            .collect()
    }

    fn plot_dir(&self) -> Result<PathBuf> {
        let dir = self.out_dir.join("plots");
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn global_phase<R: BranchRule + Clone>(&self, phase: Phase, rule: &R) -> Result<CheckResult> {
        match phase {
            Phase::Axioms => {
                let grid = self.grid()?;
                let funnels = self
                    .anchors()
                    .iter()
                    .map(|a| unroll(rule, a, grid, self.cfg.reduction.path_cap))
                    .collect();
                Ok(axioms(rule, funnels, &self.cfg.samples.anchors))
            }
            Phase::Reduce => {
                if self.params.n_max == 0 {
                    return Ok(CheckResult::skipped(phase, "n_max is 0"));
                }
                let grid = self.grid()?;
                let mut entries = Vec::new();
                let mut passed = true;
                for (i, a) in self.anchors().iter().enumerate() {
                    let f = match unroll(rule, a, grid, self.cfg.reduction.path_cap) {
                        Ok(f) => f,
                        Err(e) => {
                            passed = false;
                            entries.push(json!({ "anchor": a, "error": e.to_string() }));
                            continue;
                        }
                    };
                    let out = reduce(&f, &self.enumeration, &self.params);
                    passed &= out.trace.stop_reason == StopReason::Singleton;
                    let mut entry = self.reduction_entry(&f, &out)?;
                    self.plot(&out, &format!("{}_anchor{i}", self.cfg.problem.as_str()))?;
                    entry["selection"] = out.to_json();
                    entries.push(entry);
                }
                Ok(CheckResult::new(phase, passed, json!({ "anchors": entries })))
            }
            Phase::Semigroup => {
                if self.params.n_max == 0 {
                    return Ok(CheckResult::skipped(phase, "n_max is 0"));
                }
                let p = self.process(rule.clone())?;
                let triples = self.global_triples();
                let report = verify_semigroup(&p, &triples, self.cfg.samples.tolerance);
                Ok(semigroup_result(report))
            }
            Phase::Clairaut => {
                if self.cfg.problem != Problem::Clairaut {
                    return Ok(CheckResult::skipped(phase, "problem is not clairaut"));
                }
                self.clairaut()
            }
            Phase::Local => Ok(CheckResult::skipped(phase, "problem has no terminal time")),
        }
    }

    fn process<R: BranchRule>(&self, rule: R) -> Result<SemiProcess<R>> {
        Ok(SemiProcess::new(
            rule,
            self.enumeration.clone(),
            self.params,
            self.cfg.grid.delta,
            self.cfg.t_end(),
        )?
        .with_path_cap(self.cfg.reduction.path_cap))
    }

    fn plot(&self, out: &SelectionOutcome, stem: &str) -> Result<()> {
        if self.cfg.emit_plot_data {
            emit_plot_data(out, &self.plot_dir()?.join(stem))?;
        }
        Ok(())
    }

    fn reduction_entry(&self, f: &Funnel, out: &SelectionOutcome) -> Result<Value> {
        let final_diameter = out
            .trace
            .stages
            .last()
            .map_or(out.trace.initial_diameter, |s| s.diameter);
        Ok(json!({
            "anchor": f.anchor(),
            "paths": f.len(),
            "stages": out.trace.stages.len(),
            "final_diameter": final_diameter,
            "stop_reason": out.trace.stop_reason,
            "separation": self.separation(f)?,
        }))
    }

    /// Separation of the first path from paths spread across the funnel,
    /// under the truncation budget.
    fn separation(&self, f: &Funnel) -> Result<Value> {
        let budget = TruncationBudget::new(
            self.cfg.budget.horizon_t.min(f.grid().horizon()),
            self.cfg.budget.epsilon_tail,
        )?;
        let paths = f.paths();
        let mut others: Vec<usize> = (1..=SEPARATION_PAIRS)
            .map(|m| m * (paths.len() - 1) / SEPARATION_PAIRS)
            .collect();
        others.dedup();
        others.retain(|&j| j > 0);
        let mut separated = 0usize;
        let mut worst_index = 0usize;
        for &j in &others {
            if let Some(n) = separates(&paths[0], &paths[j], &self.enumeration, self.params.n_max, &budget)? {
                separated += 1;
                worst_index = worst_index.max(n);
            }
        }
        let probed = others.len();
        Ok(json!({
            "horizon_T": budget.horizon,
            "epsilon_tail": budget.epsilon_tail,
            "pairs": probed,
            "separated": separated,
            "largest_index": worst_index,
        }))
    }

    fn global_triples(&self) -> Vec<(f64, f64, f64, StatePoint)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.samples.seed);
        let g = &self.cfg.grid;
        let n = g.n_steps as i64;
        let first = (g.t_start / g.delta).round() as i64;
        let time = |k: i64| (first + k) as f64 * g.delta;
        (0..self.cfg.samples.triples)
            .map(|_| {
                let mut ks = [
                    rng.random_range(0..=n),
                    rng.random_range(0..=n),
                    rng.random_range(0..=n),
                ];
                ks.sort_unstable();
                let t0 = time(ks[0]);
                let a = match self.cfg.problem {
                    Problem::Clairaut => singular(t0) + rng.random_range(0..=8) as f64 * 0.25,
                    Problem::SqrtAbs => {
                        let m = rng.random_range(0..=6) as f64 * g.delta / 2.0;
                        m * m
                    }
                    _ => rng.random_range(-64..=64) as f64 / 64.0,
                };
                (t0, time(ks[1]), time(ks[2]), StatePoint::scalar(a))
            })
            .collect()
    }

    fn clairaut(&self) -> Result<CheckResult> {
        let c = &self.cfg.clairaut;
        let p = self.process(ClairautRule::default())?;
        let samples = default_samples(c.sample_t_lo, c.sample_t_hi, self.cfg.grid.delta);
        let dir = self.out_dir.join("clairaut");
        let traj_dir = dir.join("trajectories");
        fs::create_dir_all(&traj_dir)?;
        let class = classify_process(&p, &samples, c.tolerance);
        for (i, &(t0, x0)) in samples.iter().enumerate() {
            if let Ok(out) = p.select(t0, &StatePoint::scalar(x0)) {
                fs::write(traj_dir.join(format!("sample_{i:03}.csv")), out.selected.to_csv())?;
            }
        }
        let dump = p.funnel(c.dump_node[0], &StatePoint::scalar(c.dump_node[1]));
        match &dump {
            Ok(f) => write_json(&dir.join("funnel_dump.json"), &f.to_json())?,
            Err(e) => write_json(&dir.join("funnel_dump.json"), &json!({ "error": e.to_string() }))?,
        }
        let dump_paths = dump.as_ref().map(|f| f.len()).ok();
        Ok(match class {
            Ok(class) => {
                write_json(
                    &dir.join("classification.json"),
                    &json!({ "tag": class.tag, "evidence": class.evidence }),
                )?;
                CheckResult::new(
                    Phase::Clairaut,
                    true,
                    json!({
                        "tag": class.tag,
                        "samples": samples.len(),
                        "tolerance": class.tolerance,
                        "dump_paths": dump_paths,
                    }),
                )
            }
            Err(failure) => {
                write_json(
                    &dir.join("classification.json"),
                    &json!({ "tag": null, "failure": failure }),
                )?;
                CheckResult::new(
                    Phase::Clairaut,
                    false,
                    json!({
                        "tag": null,
                        "reason": failure.reason,
                        "consistent": failure.consistent,
                        "exclusion_violations": failure.exclusion_violations.len(),
                        "nonconforming": failure.nonconforming.len(),
                        "errors": failure.errors,
                        "samples": samples.len(),
                        "dump_paths": dump_paths,
                    }),
                )
            }
        })
    }

    fn local_funnel<R: LocalRule>(&self, rule: &R, a: &StatePoint, guard: f64) -> funnel_select::Result<LocalFunnel> {
        LocalFunnel::unroll(
            rule,
            self.cfg.grid.t_start,
            a,
            self.cfg.grid.delta,
            guard,
            self.cfg.reduction.path_cap,
        )
    }

    fn local_phase<R: LocalRule + Clone>(&self, phase: Phase, rule: &R) -> Result<CheckResult> {
        let guard = self.cfg.local.guard_gap;
        match phase {
            Phase::Axioms => {
                let funnels = self
                    .anchors()
                    .iter()
                    .map(|a| self.local_funnel(rule, a, guard).map(|f| f.funnel().clone()))
                    .collect();
                Ok(axioms(rule, funnels, &self.cfg.samples.anchors))
            }
            Phase::Reduce => {
                if self.params.n_max == 0 {
                    return Ok(CheckResult::skipped(phase, "n_max is 0"));
                }
                let mut entries = Vec::new();
                let mut passed = true;
                for (i, a) in self.anchors().iter().enumerate() {
                    let f = match self.local_funnel(rule, a, guard) {
                        Ok(f) => f,
                        Err(e) => {
                            passed = false;
                            entries.push(json!({ "anchor": a, "error": e.to_string() }));
                            continue;
                        }
                    };
                    let out = reduce_local(&f, &self.enumeration, &self.params);
                    passed &= out.outcome.trace.stop_reason == StopReason::Singleton;
                    let mut entry = self.reduction_entry(f.funnel(), &out.outcome)?;
                    self.plot(&out.outcome, &format!("{}_anchor{i}", self.cfg.problem.as_str()))?;
                    entry["selection"] = out.to_json();
                    entries.push(entry);
                }
                Ok(CheckResult::new(phase, passed, json!({ "anchors": entries })))
            }
            Phase::Semigroup => {
                if self.params.n_max == 0 {
                    return Ok(CheckResult::skipped(phase, "n_max is 0"));
                }
                let p = LocalSemiProcess::new(
                    rule.clone(),
                    self.enumeration.clone(),
                    self.params,
                    self.cfg.grid.delta,
                    guard,
                )?;
                let triples = self.local_triples(rule);
                Ok(semigroup_result(verify_local_semigroup(
                    &p,
                    &triples,
                    self.cfg.samples.tolerance,
                )))
            }
            Phase::Clairaut => Ok(CheckResult::skipped(phase, "problem is not clairaut")),
            Phase::Local => self.local_checks(rule),
        }
    }

    /// Triples on the grid with `t2` inside the first half of the terminal
    /// window of `(t0, a)`.
    fn local_triples<R: LocalRule>(&self, rule: &R) -> Vec<(f64, f64, f64, StatePoint)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.samples.seed);
        let g = &self.cfg.grid;
        let first = (g.t_start / g.delta).round() as i64;
        let mut out = Vec::with_capacity(self.cfg.samples.triples);
        while out.len() < self.cfg.samples.triples {
            let t0 = (first + rng.random_range(0..=8)) as f64 * g.delta;
            let a = StatePoint::scalar(-2.0 + rng.random_range(0..=12) as f64 * 0.25);
            let span = rule.terminal_time(t0, &a).duration().min(1e3);
            let n = (0.5 * span / g.delta).floor() as i64;
            if n < 1 {
                continue;
            }
            let mut ks = [rng.random_range(0..=n), rng.random_range(0..=n)];
            ks.sort_unstable();
            out.push((t0, t0 + ks[0] as f64 * g.delta, t0 + ks[1] as f64 * g.delta, a));
        }
        out
    }

    fn local_checks<R: LocalRule>(&self, rule: &R) -> Result<CheckResult> {
        let l = &self.cfg.local;
        let tol = self.cfg.samples.tolerance;
        let t_start = self.cfg.grid.t_start;
        let tt_samples: Vec<(f64, StatePoint)> = self
            .anchors()
            .into_iter()
            .flat_map(|a| (0..4).map(move |j| (t_start + j as f64 * 0.5, a.clone())))
            .collect();
        let tt = check_tt(|t, x| rule.terminal_time(t, x), &tt_samples, l.tt_delta, l.tt_tolerance)?;

        let mut ls3_checked = 0usize;
        let mut ls3_defect = 0.0f64;
        let mut ls3_violations = 0usize;
        let mut guard_worst = 0.0f64;
        let mut guard_violations = 0usize;
        for a in self.anchors() {
            let f = self.local_funnel(rule, &a, l.guard_gap)?;
            for k in 0..=f.funnel().grid().n_steps() {
                let r = check_ls3(&f, rule, k, l.guard_gap, tol);
                ls3_checked += r.checked;
                ls3_defect = ls3_defect.max(r.max_abs_defect);
                ls3_violations += r.inequality_violations.len() + r.membership.violations.len();
            }
            let step = self.cfg.grid.delta / GUARD_REFINE;
            let cap = self.cfg.reduction.path_cap;
            let coarse = LocalFunnel::unroll(rule, t_start, &a, step, l.guard_gap, cap)?;
            let fine = LocalFunnel::unroll(rule, t_start, &a, step, l.guard_gap_fine, cap)?;
            let (f, wc, wf) = (&coarse, &coarse.funnel().paths()[0], &fine.funnel().paths()[0]);
            for n in 0..GUARD_FUNCTIONALS {
                let fun = self.enumeration.functional(n);
                let diff = (zeta_local(wf, fine.terminal(), &fun)? - zeta_local(wc, f.terminal(), &fun)?).abs();
                let (outer, inner) = if fine.covered() >= f.covered() {
                    (wf, f)
                } else {
                    (wc, &fine)
                };
                let bound = guard_gap_bound(fun.lambda(), inner.covered(), inner.terminal())
                    + quadrature_error_estimate(outer, &fun, outer.grid().horizon())?;
                guard_worst = guard_worst.max(diff / bound);
                if diff > bound {
                    guard_violations += 1;
                }
            }
        }
        let passed = tt.passed() && ls3_violations == 0 && ls3_defect <= tol && guard_violations == 0;
        Ok(CheckResult::new(
            Phase::Local,
            passed,
            json!({
                "tt": { "checked": tt.checked, "worst_deficit": tt.worst_deficit, "violations": tt.violations.len() },
                "ls3": { "checked": ls3_checked, "max_abs_defect": ls3_defect, "violations": ls3_violations },
                "guard_gap": { "worst_ratio_to_bound": guard_worst, "violations": guard_violations },
            }),
        ))
    }
}

fn axioms<R: BranchRule + ?Sized>(
    rule: &R,
    funnels: Vec<funnel_select::Result<Funnel>>,
    anchors: &[f64],
) -> CheckResult {
    let mut entries = Vec::new();
    let mut passed = true;
    for (f, a) in funnels.into_iter().zip(anchors) {
        match f {
            Ok(f) => {
                let (s3, s4) = check_all_shifts(&f, rule);
                passed &= s3.passed() && s4.passed();
                entries.push(json!({
                    "anchor": a,
                    "paths": f.len(),
                    "nodes": f.nodes().len(),
                    "shift": { "checked": s3.checked, "violations": s3.violations.len() },
                    "splice": { "checked": s4.checked, "violations": s4.violations.len() },
                }));
            }
            Err(e) => {
                passed = false;
                entries.push(json!({ "anchor": a, "error": e.to_string() }));
            }
        }
    }
    CheckResult::new(Phase::Axioms, passed, json!({ "anchors": entries }))
}

fn semigroup_result(report: SemigroupReport) -> CheckResult {
    let shown: Vec<_> = report.failures.iter().take(5).collect();
    CheckResult::new(
        Phase::Semigroup,
        report.passed(),
        json!({
            "checked": report.checked,
            "tolerance": report.tolerance,
            "worst_deviation": report.worst_deviation,
            "failures": report.failures.len(),
            "first_failures": shown,
        }),
    )
}
