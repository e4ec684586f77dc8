//! The Clairaut equation `x = t x' + psi(x')` with `psi(s) = s^2`.
//!
//! Lines `x = c^2 + c t` solve it for every `c`; their envelope is the
//! singular solution `x = -t^2/4`. Through an interior point
//! `x0 > -t0^2/4` pass exactly two lines, with slopes
//! `c+- = -t0/2 +- sqrt(t0^2/4 + x0)`, tangent to the parabola at
//! `-2 c+` (in the past) and `-2 c-` (in the future). From a point of the
//! parabola a solution either follows it or leaves along its tangent.
//!
//! The branch rule is memoryless: at each grid node it offers both lines
//! through the node (interior) or the tangent and the parabola (boundary).
//! Funnels are therefore closed under shifts and splices at grid nodes, and
//! they contain every concatenation of line pieces, not only the `C^1`
//! solutions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FunnelError, Result};
use crate::funnel::{BranchArc, BranchRule, GridNode};
use crate::path_space::{Path, StatePoint};
use crate::selection::SemiProcess;

/// The function `psi` of the Clairaut equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Psi {
    /// `psi(s) = s^2`.
    Square,
    /// `sum_i coeffs[i] s^i`, with an even leading degree and positive
    /// leading coefficient.
    Polynomial { coeffs: Vec<f64> },
}

impl Psi {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Self::Square => s * s,
            Self::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c),
        }
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// `inf_c [t c + psi(c)]`, by a coarse scan on a widening symmetric
/// interval followed by golden-section refinement around the best cell.
pub fn legendre_tilde(psi: &Psi, t_star: f64) -> Result<f64> {
    if let Psi::Square = psi {
        return Ok(-t_star * t_star / 4.0);
    }
    if !t_star.is_finite() {
        return Err(FunnelError::Bracket(format!("non-finite argument {t_star}")));
    }
    let g = |c: f64| t_star * c + psi.eval(c);
    const CELLS: usize = 2000;
    let mut radius = 1.0f64;
    loop {
        let h = 2.0 * radius / CELLS as f64;
        let (mut best_i, mut best) = (0usize, f64::INFINITY);
        for i in 0..=CELLS {
            let v = g(-radius + i as f64 * h);
            if v < best {
                best = v;
                best_i = i;
            }
        }
        if best_i > 0 && best_i < CELLS {
            let (mut a, mut b) = (-radius + (best_i - 1) as f64 * h, -radius + (best_i + 1) as f64 * h);
            let mut c = b - GOLDEN * (b - a);
            let mut d = a + GOLDEN * (b - a);
            let (mut gc, mut gd) = (g(c), g(d));
            while (b - a).abs() > 1e-14 * (1.0 + a.abs().max(b.abs())) {
                if gc < gd {
                    b = d;
                    d = c;
                    gd = gc;
                    c = b - GOLDEN * (b - a);
                    gc = g(c);
                } else {
                    a = c;
                    c = d;
                    gc = gd;
                    d = a + GOLDEN * (b - a);
                    gd = g(d);
                }
            }
            return Ok(g(0.5 * (a + b)).min(gc).min(gd).min(best));
        }
        radius *= 2.0;
        if radius > 1e8 {
            return Err(FunnelError::Bracket(format!(
                "no interior minimum of t c + psi(c) for t = {t_star}"
            )));
        }
    }
}

/// Slopes of the lines through `(t0, x0)`, larger first: two roots inside
/// the admissible region, one on its boundary, none outside.
pub fn c_plus_minus(t0: f64, x0: f64) -> Vec<f64> {
    let disc = x0 + t0 * t0 / 4.0;
    if disc > 0.0 {
        let r = disc.sqrt();
        vec![-t0 / 2.0 + r, -t0 / 2.0 - r]
    } else if disc == 0.0 {
        vec![-t0 / 2.0]
    } else {
        Vec::new()
    }
}

/// Times `(t_p, t_f)` at which the two lines through an interior point
/// touch the parabola; `t_p < t0 < t_f`.
pub fn touch_times(t0: f64, x0: f64) -> Result<(f64, f64)> {
    match c_plus_minus(t0, x0)[..] {
        [cp, cm] => {
            let (tp, tf) = (-2.0 * cp, -2.0 * cm);
            debug_assert!(tp < t0 && t0 < tf);
            Ok((tp, tf))
        }
        _ => Err(FunnelError::Inadmissible {
            time: t0,
            state: vec![x0],
        }),
    }
}

/// The line `c^2 + c t`.
pub fn line(c: f64, t: f64) -> f64 {
    c * c + c * t
}

/// The singular solution `-t^2/4`.
pub fn singular(t: f64) -> f64 {
    -t * t / 4.0
}

/// The solution following the parabola up to `r` and its tangent after.
pub fn branch_path(r: f64, t: f64) -> f64 {
    if t <= r {
        singular(t)
    } else {
        line(-r / 2.0, t)
    }
}

/// `C = {(t, x) : x >= -t^2/4}` with a boundary band scaled by
/// `max(1, t^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleRegion {
    pub rel_tol: f64,
}

impl Default for AdmissibleRegion {
    fn default() -> Self {
        Self { rel_tol: 1e-12 }
    }
}

impl AdmissibleRegion {
    pub fn tol(&self, t: f64) -> f64 {
        self.rel_tol * (t * t).max(1.0)
    }

    /// `x + t^2/4`.
    pub fn discriminant(t: f64, x: f64) -> f64 {
        x + t * t / 4.0
    }

    pub fn contains(&self, t: f64, x: f64) -> bool {
        Self::discriminant(t, x) >= -self.tol(t)
    }

    pub fn on_boundary(&self, t: f64, x: f64) -> bool {
        Self::discriminant(t, x).abs() <= self.tol(t)
    }
}

/// Grid discretization of the Clairaut funnels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClairautRule {
    pub region: AdmissibleRegion,
}

impl ClairautRule {
    fn snap(&self, t: f64, x: f64) -> f64 {
        if self.region.on_boundary(t, x) {
            singular(t)
        } else {
            x
        }
    }
}

impl BranchRule for ClairautRule {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        let (t, x) = (node.time, x.x());
        let t1 = node.next_time();
        let disc = AdmissibleRegion::discriminant(t, x);
        if self.region.on_boundary(t, x) {
            let c = -t / 2.0;
            return Ok(vec![
                BranchArc::scalar(self.snap(t1, line(c, t1))),
                BranchArc::scalar(singular(t1)),
            ]);
        }
        if disc < 0.0 {
            return Err(FunnelError::Inadmissible {
                time: t,
                state: vec![x],
            });
        }
        let r = disc.sqrt();
        Ok([-t / 2.0 + r, -t / 2.0 - r]
            .into_iter()
            .map(|c| BranchArc::scalar(self.snap(t1, line(c, t1))))
            .collect())
    }

    fn max_branching(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        "clairaut"
    }
}

/// `|x - t x' - x'^2|` at the midpoint of an arc. Arcs with both ends on
/// the parabola are evaluated on the parabola, others on the chord.
pub fn arc_residual(region: &AdmissibleRegion, ta: f64, xa: f64, tb: f64, xb: f64) -> f64 {
    let tm = 0.5 * (ta + tb);
    let (xm, slope) = if region.on_boundary(ta, xa) && region.on_boundary(tb, xb) {
        (singular(tm), -tm / 2.0)
    } else {
        (0.5 * (xa + xb), (xb - xa) / (tb - ta))
    };
    (xm - tm * slope - slope * slope).abs()
}

/// Largest [`arc_residual`] along a path.
pub fn path_residual(region: &AdmissibleRegion, p: &Path) -> f64 {
    let g = p.grid();
    (0..g.n_steps())
        .map(|k| arc_residual(region, g.time(k), p.sample(k).x(), g.time(k + 1), p.sample(k + 1).x()))
        .fold(0.0, f64::max)
}

/// The three candidate semi-processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProcessTag {
    /// Past ray from interior points, tangent ray from the boundary.
    PastRayEverywhere,
    /// Past ray from interior points, the parabola from the boundary.
    PastRayWithSingularBoundary,
    /// Future ray until it touches the parabola, then the parabola.
    FutureRayThenParabola,
}

impl ProcessTag {
    pub const ALL: [ProcessTag; 3] = [
        ProcessTag::PastRayEverywhere,
        ProcessTag::PastRayWithSingularBoundary,
        ProcessTag::FutureRayThenParabola,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PastRayEverywhere => "PAST_RAY_EVERYWHERE",
            Self::PastRayWithSingularBoundary => "PAST_RAY_WITH_SINGULAR_BOUNDARY",
            Self::FutureRayThenParabola => "FUTURE_RAY_THEN_PARABOLA",
        }
    }

    /// The candidate trajectory through `(t0, x0)` evaluated at `t`.
    pub fn trajectory(&self, region: &AdmissibleRegion, t0: f64, x0: f64, t: f64) -> Result<f64> {
        if region.on_boundary(t0, x0) {
            return Ok(match self {
                Self::PastRayEverywhere => line(-t0 / 2.0, t),
                _ => singular(t),
            });
        }
        let (tp, tf) = touch_times(t0, x0)?;
        Ok(match self {
            Self::PastRayEverywhere | Self::PastRayWithSingularBoundary => line(-tp / 2.0, t),
            Self::FutureRayThenParabola => {
                if t <= tf {
                    line(-tf / 2.0, t)
                } else {
                    singular(t)
                }
            }
        })
    }
}

impl std::fmt::Display for ProcessTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Comparison of one selected trajectory with the candidates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleEvidence {
    pub t0: f64,
    pub x0: f64,
    pub boundary: bool,
    /// Largest deviation from each candidate, in [`ProcessTag::ALL`] order.
    pub deviations: [f64; 3],
    /// Grid time at which the trajectory leaves the parabola after
    /// following it, if it does.
    pub leaves_parabola_at: Option<f64>,
    pub selected: Vec<f64>,
}

impl SampleEvidence {
    pub fn matches(&self, tag: ProcessTag, tol: f64) -> bool {
        let i = ProcessTag::ALL.iter().position(|t| *t == tag).expect("tag listed");
        self.deviations[i] <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessClass {
    pub tag: ProcessTag,
    pub tolerance: f64,
    pub evidence: Vec<SampleEvidence>,
}

/// Why no unique tag could be assigned.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationFailure {
    pub reason: String,
    /// Tags consistent with every sample.
    pub consistent: Vec<ProcessTag>,
    /// Samples violating the exclusion rule.
    pub exclusion_violations: Vec<SampleEvidence>,
    /// Samples matching none of the candidates.
    pub nonconforming: Vec<SampleEvidence>,
    /// Samples whose selection failed.
    pub errors: Vec<String>,
}

/// First grid time at which `p` is off the parabola after two consecutive
/// nodes on it.
pub fn leaves_parabola(region: &AdmissibleRegion, p: &Path) -> Option<f64> {
    let g = p.grid();
    let on: Vec<bool> = (0..g.len())
        .map(|k| region.on_boundary(g.time(k), p.sample(k).x()))
        .collect();
    let start = on.windows(2).position(|w| w[0] && w[1])?;
    (start + 2..g.len()).find(|&k| !on[k]).map(|k| g.time(k))
}

/// Evidence for one sample.
pub fn sample_evidence(region: &AdmissibleRegion, t0: f64, x0: f64, p: &Path) -> Result<SampleEvidence> {
    let g = p.grid();
    let mut deviations = [0.0f64; 3];
    for (i, tag) in ProcessTag::ALL.iter().enumerate() {
        for k in 0..g.len() {
            let t = g.time(k);
            let expected = tag.trajectory(region, t0, x0, t)?;
            let dev = (p.sample(k).x() - expected).abs() / expected.abs().max(1.0);
            deviations[i] = deviations[i].max(dev);
        }
    }
    Ok(SampleEvidence {
        t0,
        x0,
        boundary: region.on_boundary(t0, x0),
        deviations,
        leaves_parabola_at: leaves_parabola(region, p),
        selected: p.samples().iter().map(StatePoint::x).collect(),
    })
}

/// Matches every selected trajectory against the three candidates and
/// returns the unique tag consistent with all samples.
pub fn classify_process(
    p: &SemiProcess<ClairautRule>,
    samples: &[(f64, f64)],
    tol: f64,
) -> std::result::Result<ProcessClass, ClassificationFailure> {
    let region = p.rule().region;
    let results: Vec<Result<SampleEvidence>> = samples
        .par_iter()
        .map(|&(t0, x0)| {
            let out = p.select(t0, &StatePoint::scalar(x0))?;
            sample_evidence(&region, t0, x0, &out.selected)
        })
        .collect();
    let mut evidence = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(e) => evidence.push(e),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let exclusion_violations: Vec<SampleEvidence> = evidence
        .iter()
        .filter(|e| e.leaves_parabola_at.is_some())
        .cloned()
        .collect();
    let nonconforming: Vec<SampleEvidence> = evidence
        .iter()
        .filter(|e| ProcessTag::ALL.iter().all(|t| !e.matches(*t, tol)))
        .cloned()
        .collect();
    let consistent: Vec<ProcessTag> = ProcessTag::ALL
        .into_iter()
        .filter(|t| evidence.iter().all(|e| e.matches(*t, tol)))
        .collect();
    let reason = if !errors.is_empty() {
        Some("selection failed for some samples".to_string())
    } else if !exclusion_violations.is_empty() {
        Some("a selected trajectory follows the parabola and later leaves it".to_string())
    } else if consistent.len() != 1 {
        Some(format!("{} candidate processes match every sample", consistent.len()))
    } else {
        None
    };
    match reason {
        None => Ok(ProcessClass {
            tag: consistent[0],
            tolerance: tol,
            evidence,
        }),
        Some(reason) => Err(ClassificationFailure {
            reason,
            consistent,
            exclusion_violations,
            nonconforming,
            errors,
        }),
    }
}

/// Interior samples `((tp + tf)/2, -tp tf / 4)` for grid-aligned touch
/// times with `tf - tp` an even number of steps, plus boundary samples at
/// the grid times of `[t_lo, t_hi]`.
pub fn default_samples(t_lo: f64, t_hi: f64, step: f64) -> Vec<(f64, f64)> {
    let lo = (t_lo / step).round() as i64;
    let hi = (t_hi / step).round() as i64;
    let mut out = Vec::new();
    for k in lo..=hi {
        let t = k as f64 * step;
        out.push((t, singular(t)));
    }
    for k in lo..=hi {
        for half in [2i64, 4, 8] {
            let (tp, tf) = ((k - half) as f64 * step, (k + half) as f64 * step);
            out.push((k as f64 * step, -tp * tf / 4.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funnel::unroll;
    use crate::path_space::TimeGrid;

    #[test]
    fn c_plus_minus_examples() {
        assert_eq!(c_plus_minus(0.0, 1.0), vec![1.0, -1.0]);
        assert_eq!(c_plus_minus(0.0, 0.0), vec![0.0]);
        assert_eq!(c_plus_minus(2.0, 0.0), vec![0.0, -2.0]);
        assert!(c_plus_minus(0.0, -1.0).is_empty());
    }

    #[test]
    fn touch_time_examples() {
        assert_eq!(touch_times(0.0, 1.0).unwrap(), (-2.0, 2.0));
        assert_eq!(touch_times(2.0, 0.0).unwrap(), (0.0, 4.0));
        assert!(touch_times(2.0, -1.0).is_err());
    }

    #[test]
    fn legendre_examples() {
        assert_eq!(legendre_tilde(&Psi::Square, 2.0).unwrap(), -1.0);
        assert_eq!(legendre_tilde(&Psi::Square, 0.0).unwrap(), 0.0);
        let sq = Psi::Polynomial {
            coeffs: vec![0.0, 0.0, 1.0],
        };
        assert!((legendre_tilde(&sq, 3.0).unwrap() + 2.25).abs() < 1e-12);
        let odd = Psi::Polynomial { coeffs: vec![0.0, 1.0] };
        assert!(legendre_tilde(&odd, 0.0).is_err());
    }

    #[test]
    fn rule_arcs() {
        let rule = ClairautRule::default();
        let node = |t: f64| GridNode {
            index: (t / 0.25) as i64,
            time: t,
            step: 0.25,
        };
        let b = rule.arcs(node(-1.0), &StatePoint::scalar(-0.25)).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].end.x(), singular(-0.75));
        assert_eq!(b[0].end.x(), line(0.5, -0.75));
        let i = rule.arcs(node(0.0), &StatePoint::scalar(1.0)).unwrap();
        assert_eq!(i.len(), 2);
        assert_eq!(i[0].end.x(), 1.25);
        assert_eq!(i[1].end.x(), 0.75);
        assert!(rule.arcs(node(0.0), &StatePoint::scalar(-0.1)).is_err());
    }

    #[test]
    fn funnel_contains_future_ray_then_parabola() {
        let rule = ClairautRule::default();
        let grid = TimeGrid::new(0.0, 0.25, 12).unwrap();
        let f = unroll(&rule, &StatePoint::scalar(1.0), grid, 1 << 14).unwrap();
        let region = AdmissibleRegion::default();
        let expected: Vec<f64> = (0..=12)
            .map(|k| {
                ProcessTag::FutureRayThenParabola
                    .trajectory(&region, 0.0, 1.0, grid.time(k))
                    .unwrap()
            })
            .collect();
        let found = f.paths().iter().any(|p| {
            p.samples()
                .iter()
                .zip(&expected)
                .all(|(s, e)| (s.x() - e).abs() <= region.tol(2.0))
        });
        assert!(found);
        for p in f.paths() {
            assert!(path_residual(&region, p) <= 1e-9);
        }
    }

    #[test]
    fn exclusion_detection() {
        let region = AdmissibleRegion::default();
        let grid = TimeGrid::new(0.0, 0.5, 4).unwrap();
        let p = Path::from_fn(grid, |t| StatePoint::scalar(branch_path(1.0, t))).unwrap();
        assert_eq!(leaves_parabola(&region, &p), Some(1.5));
        let q = Path::from_fn(grid, |t| StatePoint::scalar(singular(t))).unwrap();
        assert_eq!(leaves_parabola(&region, &q), None);
    }
}
