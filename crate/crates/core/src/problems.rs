//! Benchmark branch rules besides Clairaut.

use serde::{Deserialize, Serialize};

use crate::error::{FunnelError, Result};
use crate::funnel::{BranchArc, BranchRule, GridNode};
use crate::local::{LocalRule, TerminalTime};
use crate::path_space::StatePoint;

/// `x' = sqrt|x|` on `x >= 0`. From zero a solution stays or departs as
/// `((t - r)/2)^2`; positive states move along that parabola.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SqrtAbsRule;

impl SqrtAbsRule {
    /// Departure from zero at time `r`, evaluated at `t`.
    pub fn departure(r: f64, t: f64) -> f64 {
        if t <= r {
            0.0
        } else {
            let h = (t - r) / 2.0;
            h * h
        }
    }
}

impl BranchRule for SqrtAbsRule {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        let x = x.x();
        let half = node.step / 2.0;
        if x == 0.0 {
            Ok(vec![BranchArc::scalar(0.0), BranchArc::scalar(half * half)])
        } else if x > 0.0 {
            let r = x.sqrt() + half;
            Ok(vec![BranchArc::scalar(r * r)])
        } else {
            Err(FunnelError::Inadmissible {
                time: node.time,
                state: vec![x],
            })
        }
    }

    fn max_branching(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        "sqrt_abs"
    }
}

/// `x' = 1 + x^2`, solved by `tan(arctan a + t - t0)` up to the blow-up
/// time `pi/2 - arctan a` after `t0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RiccatiRule;

impl RiccatiRule {
    pub fn solution(t0: f64, a: f64, t: f64) -> f64 {
        (a.atan() + (t - t0)).tan()
    }

    pub fn blowup(a: f64) -> f64 {
        std::f64::consts::FRAC_PI_2 - a.atan()
    }
}

impl BranchRule for RiccatiRule {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        let x = x.x();
        if node.step >= Self::blowup(x) {
            return Err(FunnelError::OutOfRange {
                what: "step",
                detail: format!("solution from x = {x} blows up within one step"),
            });
        }
        Ok(vec![BranchArc::scalar((x.atan() + node.step).tan())])
    }

    fn max_branching(&self) -> usize {
        1
    }

    fn name(&self) -> &str {
        "riccati_blowup"
    }
}

impl LocalRule for RiccatiRule {
    fn terminal_time(&self, _t: f64, x: &StatePoint) -> TerminalTime {
        TerminalTime::Finite(Self::blowup(x.x()))
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random tree: each node gets one to `max_arcs` arcs
/// with increments on the lattice `Z / 64` in `[-1, 1]`, derived by hashing
/// the seed, the grid index and the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTreeRule {
    pub seed: u64,
    pub max_arcs: usize,
}

impl SyntheticTreeRule {
    pub fn new(seed: u64, max_arcs: usize) -> Result<Self> {
        if max_arcs == 0 {
            return Err(FunnelError::InvalidParameter("max_arcs must be positive".into()));
        }
        Ok(Self { seed, max_arcs })
    }
}

impl BranchRule for SyntheticTreeRule {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        let mut h = mix(self.seed ^ mix(node.index as u64));
        for b in x.bits() {
            h = mix(h ^ b);
        }
        let count = 1 + (h % self.max_arcs as u64) as usize;
        let mut ends: Vec<Vec<f64>> = Vec::with_capacity(count);
        let mut salt = h;
        while ends.len() < count {
            salt = mix(salt);
            let end: Vec<f64> = x
                .coords()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let r = mix(salt ^ i as u64);
                    v + ((r % 129) as f64 - 64.0) / 64.0
                })
                .collect();
            if !ends.contains(&end) {
                ends.push(end);
            }
        }
        ends.into_iter()
            .map(|e| StatePoint::new(e).map(BranchArc::new))
            .collect()
    }

    fn max_branching(&self) -> usize {
        self.max_arcs
    }

    fn name(&self) -> &str {
        "synthetic_tree"
    }
}

/// Integer lattice walk `x -> x + d` for `d` in `offsets`. With integer
/// states and functionals symmetric under `x -> -x`, mirrored paths tie
/// exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeRule {
    pub offsets: Vec<i32>,
}

impl LatticeRule {
    pub fn symmetric() -> Self {
        Self {
            offsets: vec![1, 0, -1],
        }
    }
}

impl BranchRule for LatticeRule {
    fn arcs(&self, _node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        Ok(self
            .offsets
            .iter()
            .map(|d| {
                BranchArc::new(StatePoint::new(x.coords().iter().map(|v| v + *d as f64).collect()).expect("finite"))
            })
            .collect())
    }

    fn max_branching(&self) -> usize {
        self.offsets.len()
    }

    fn name(&self) -> &str {
        "lattice"
    }
}

/// Two-way walk `x -> x +- step` with terminal time `rate (t_star - t)`.
/// For `rate == 1` the terminal time decreases exactly with elapsed time;
/// `rate > 1` violates that monotonicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLocalRule {
    pub t_star: f64,
    pub rate: f64,
}

impl SyntheticLocalRule {
    pub fn new(t_star: f64) -> Self {
        Self { t_star, rate: 1.0 }
    }
}

impl BranchRule for SyntheticLocalRule {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        let x = x.x();
        Ok(vec![BranchArc::scalar(x + node.step), BranchArc::scalar(x - node.step)])
    }

    fn max_branching(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        "synthetic_local"
    }
}

impl LocalRule for SyntheticLocalRule {
    fn terminal_time(&self, t: f64, _x: &StatePoint) -> TerminalTime {
        let d = self.rate * (self.t_star - t);
        if d > 0.0 {
            TerminalTime::Finite(d)
        } else {
            TerminalTime::Finite(f64::MIN_POSITIVE)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funnel::unroll;
    use crate::path_space::TimeGrid;

    #[test]
    fn sqrt_abs_funnel_from_zero() {
        let grid = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let f = unroll(&SqrtAbsRule, &StatePoint::scalar(0.0), grid, 100).unwrap();
        assert_eq!(f.len(), 9);
        for p in f.paths() {
            let r = (0..=8)
                .map(|k| grid.time(k))
                .find(|&t| {
                    p.evaluate(t).unwrap().x() == 0.0 && p.evaluate(t + 0.25).map(|x| x.x() > 0.0).unwrap_or(true)
                })
                .unwrap();
            for k in 0..=8 {
                let t = grid.time(k);
                assert_eq!(p.sample(k).x(), SqrtAbsRule::departure(r, t), "r = {r}, t = {t}");
            }
        }
        assert!(unroll(&SqrtAbsRule, &StatePoint::scalar(-1.0), grid, 100).is_err());
    }

    #[test]
    fn riccati_matches_tan() {
        let grid = TimeGrid::new(0.0, 0.125, 10).unwrap();
        let f = unroll(&RiccatiRule, &StatePoint::scalar(0.0), grid, 10).unwrap();
        for k in 0..=10 {
            let t = grid.time(k);
            assert!((f.paths()[0].sample(k).x() - t.tan()).abs() < 1e-13);
        }
        assert_eq!(
            RiccatiRule.terminal_time(0.0, &StatePoint::scalar(0.0)).duration(),
            std::f64::consts::FRAC_PI_2
        );
    }

    #[test]
    fn synthetic_tree_is_deterministic() {
        let rule = SyntheticTreeRule::new(7, 3).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 4).unwrap();
        let a = unroll(&rule, &StatePoint::scalar(0.0), grid, 200).unwrap();
        let b = unroll(&rule, &StatePoint::scalar(0.0), grid, 200).unwrap();
        assert_eq!(a.paths(), b.paths());
        assert!(!a.is_empty());
    }

    #[test]
    fn lattice_counts() {
        let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let f = unroll(&LatticeRule::symmetric(), &StatePoint::scalar(0.0), grid, 100).unwrap();
        assert_eq!(f.len(), 27);
    }
}
