//! Paths in `X = R^n` sampled on a uniform time grid.
//!
//! A [`Path`] stores its values at grid nodes and is read as the piecewise
//! linear interpolant between them. Grid times are `(first + k) * step`, so
//! a shifted grid reproduces the parent grid's node times bit for bit; rules
//! that depend on time see identical arguments no matter from which ancestor
//! node a sub-funnel was generated.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FunnelError, Result};

/// A point of the state space. All coordinates are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StatePoint(Vec<f64>);

impl StatePoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(index) = coords.iter().position(|c| !c.is_finite()) {
            return Err(FunnelError::NonFinite { index });
        }
        Ok(Self(coords))
    }

    /// One-dimensional state. Panics on a non-finite value.
    pub fn scalar(x: f64) -> Self {
        assert!(x.is_finite(), "non-finite scalar state {x}");
        Self(vec![x])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    /// First coordinate; the benchmarks are scalar.
    pub fn x(&self) -> f64 {
        self.0[0]
    }

    /// Bitwise key, usable for exact membership tests.
    pub fn bits(&self) -> Vec<u64> {
        self.0.iter().map(|c| c.to_bits()).collect()
    }

    fn lerp(&self, other: &Self, frac: f64) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + frac * (b - a)).collect())
    }
}

impl TryFrom<Vec<f64>> for StatePoint {
    type Error = FunnelError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<StatePoint> for Vec<f64> {
    fn from(p: StatePoint) -> Self {
        p.0
    }
}

/// Truncated Euclidean metric `min(|x - y|, 1)`.
pub fn rho(x: &StatePoint, y: &StatePoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(FunnelError::DimensionMismatch {
            left: x.dim(),
            right: y.dim(),
        });
    }
    Ok(rho_unchecked(x, y))
}

pub(crate) fn rho_unchecked(x: &StatePoint, y: &StatePoint) -> f64 {
    let sq: f64 = x.0.iter().zip(&y.0).map(|(a, b)| (a - b) * (a - b)).sum();
    sq.sqrt().min(1.0)
}

/// Uniform grid with node times `(first + k) * step`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    step: f64,
    first: i64,
    n_steps: usize,
}

impl TimeGrid {
    /// Builds a grid starting at `t_start`. The start time must be an integer
    /// multiple of `step` (to relative precision 1e-9).
    pub fn new(t_start: f64, step: f64, n_steps: usize) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(FunnelError::InvalidGrid(format!("step must be positive, got {step}")));
        }
        let first = index_of(t_start, step)?;
        Ok(Self { step, first, n_steps })
    }

    pub fn from_index(first: i64, step: f64, n_steps: usize) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(FunnelError::InvalidGrid(format!("step must be positive, got {step}")));
        }
        Ok(Self { step, first, n_steps })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn first(&self) -> i64 {
        self.first
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time of node `k` relative to this grid.
    pub fn time(&self, k: usize) -> f64 {
        index_time(self.first + k as i64, self.step)
    }

    pub fn t_start(&self) -> f64 {
        self.time(0)
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    /// Length of the grid in time units.
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.step
    }

    /// Grid of the last `n_steps - k` steps.
    pub fn shifted(&self, k: usize) -> Result<Self> {
        if k > self.n_steps {
            return Err(FunnelError::OutOfRange {
                what: "shift",
                detail: format!("k = {k} > n_steps = {}", self.n_steps),
            });
        }
        Ok(Self {
            step: self.step,
            first: self.first + k as i64,
            n_steps: self.n_steps - k,
        })
    }

    pub fn with_steps(&self, n_steps: usize) -> Self {
        Self { n_steps, ..*self }
    }

    /// Index `k` with `time(k) == t` up to alignment tolerance.
    pub fn local_index(&self, t: f64) -> Result<usize> {
        let abs = index_of(t, self.step)?;
        let k = abs - self.first;
        if k < 0 || k as usize > self.n_steps {
            return Err(FunnelError::OutOfRange {
                what: "time",
                detail: format!("{t} outside [{}, {}]", self.t_start(), self.t_end()),
            });
        }
        Ok(k as usize)
    }

    fn same_as(&self, other: &Self) -> bool {
        self.step == other.step && self.first == other.first && self.n_steps == other.n_steps
    }
}

pub(crate) fn index_time(index: i64, step: f64) -> f64 {
    index as f64 * step
}

/// Absolute grid index of an aligned time.
pub fn index_of(t: f64, step: f64) -> Result<i64> {
    if !t.is_finite() {
        return Err(FunnelError::Misaligned(t));
    }
    let r = (t / step).round();
    if (r * step - t).abs() > 1e-9 * t.abs().max(step) {
        return Err(FunnelError::Misaligned(t));
    }
    Ok(r as i64)
}

/// A grid-sampled continuous path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    grid: TimeGrid,
    samples: Vec<StatePoint>,
}

impl Path {
    pub fn new(grid: TimeGrid, samples: Vec<StatePoint>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(FunnelError::InvalidGrid(format!(
                "expected {} samples, got {}",
                grid.len(),
                samples.len()
            )));
        }
        let dim = samples[0].dim();
        if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
            return Err(FunnelError::DimensionMismatch {
                left: dim,
                right: bad.dim(),
            });
        }
        Ok(Self { grid, samples })
    }

    /// Path with all samples equal to `x`.
    pub fn constant(grid: TimeGrid, x: StatePoint) -> Self {
        Self {
            samples: vec![x; grid.len()],
            grid,
        }
    }

    /// Samples a function of time at the grid nodes.
    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> StatePoint) -> Result<Self> {
        let samples = (0..grid.len()).map(|k| f(grid.time(k))).collect();
        Self::new(grid, samples)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn samples(&self) -> &[StatePoint] {
        &self.samples
    }

    pub fn sample(&self, k: usize) -> &StatePoint {
        &self.samples[k]
    }

    pub fn start(&self) -> &StatePoint {
        &self.samples[0]
    }

    pub fn last(&self) -> &StatePoint {
        &self.samples[self.samples.len() - 1]
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    pub fn t_start(&self) -> f64 {
        self.grid.t_start()
    }

    pub fn t_end(&self) -> f64 {
        self.grid.t_end()
    }

    /// Bitwise key of the sample sequence.
    pub fn sample_bits(&self) -> Vec<u64> {
        self.samples.iter().flat_map(|s| s.bits()).collect()
    }

    /// Linear interpolation between the bracketing samples; exact at nodes.
    pub fn evaluate(&self, t: f64) -> Result<StatePoint> {
        let (t0, t1) = (self.t_start(), self.t_end());
        let slack = 1e-12 * t0.abs().max(t1.abs()).max(1.0);
        if !(t >= t0 - slack && t <= t1 + slack) {
            return Err(FunnelError::OutOfRange {
                what: "evaluation time",
                detail: format!("{t} outside [{t0}, {t1}]"),
            });
        }
        let n = self.grid.n_steps;
        if n == 0 || t <= t0 {
            return Ok(self.samples[0].clone());
        }
        if t >= t1 {
            return Ok(self.samples[n].clone());
        }
        let mut k = (((t - t0) / self.grid.step).floor() as usize).min(n - 1);
        while k > 0 && self.grid.time(k) > t {
            k -= 1;
        }
        while k + 1 < n && self.grid.time(k + 1) <= t {
            k += 1;
        }
        let tk = self.grid.time(k);
        if t == tk {
            return Ok(self.samples[k].clone());
        }
        let frac = (t - tk) / (self.grid.time(k + 1) - tk);
        Ok(self.samples[k].lerp(&self.samples[k + 1], frac))
    }

    /// Past-erasing shift by `k` grid steps.
    pub fn shift(&self, k: usize) -> Result<Self> {
        let grid = self.grid.shifted(k)?;
        Ok(Self {
            grid,
            samples: self.samples[k..].to_vec(),
        })
    }

    /// Extends the path into the past by holding its initial value.
    pub fn extend_const(&self, new_t_start: f64) -> Result<Self> {
        let new_first = index_of(new_t_start, self.grid.step)?;
        if new_first > self.grid.first {
            return Err(FunnelError::OutOfRange {
                what: "extension start",
                detail: format!("{new_t_start} is after {}", self.t_start()),
            });
        }
        let gap = (self.grid.first - new_first) as usize;
        let mut samples = vec![self.samples[0].clone(); gap];
        samples.extend(self.samples.iter().cloned());
        Ok(Self {
            grid: TimeGrid {
                step: self.grid.step,
                first: new_first,
                n_steps: self.grid.n_steps + gap,
            },
            samples,
        })
    }

    /// Follows `self` up to node `k` and `v` afterwards.
    pub fn splice(&self, k: usize, v: &Path) -> Result<Self> {
        if k > self.grid.n_steps {
            return Err(FunnelError::OutOfRange {
                what: "splice index",
                detail: format!("k = {k} > n_steps = {}", self.grid.n_steps),
            });
        }
        if v.grid.step != self.grid.step || v.grid.first != self.grid.first + k as i64 {
            return Err(FunnelError::GridMismatch(format!(
                "spliced path starts at {} but junction is at {}",
                v.t_start(),
                self.grid.time(k)
            )));
        }
        if v.samples[0] != self.samples[k] {
            return Err(FunnelError::SpliceMismatch {
                index: k,
                detail: format!("{:?} != {:?}", v.samples[0].coords(), self.samples[k].coords()),
            });
        }
        let mut samples = self.samples[..k].to_vec();
        samples.extend(v.samples.iter().cloned());
        Ok(Self {
            grid: TimeGrid {
                step: self.grid.step,
                first: self.grid.first,
                n_steps: k + v.grid.n_steps,
            },
            samples,
        })
    }

    /// CSV with header `t,x1,...,xn`, shortest round-trip decimal formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim() {
            let _ = write!(out, ",x{i}");
        }
        out.push('\n');
        for (k, s) in self.samples.iter().enumerate() {
            let _ = write!(out, "{}", self.grid.time(k));
            for c in s.coords() {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Path::to_csv`] output. The grid step is inferred from the
    /// time column; a single-row file needs `step_hint`.
    pub fn from_csv(text: &str, step_hint: Option<f64>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| FunnelError::Parse("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") || cols.len() < 2 {
            return Err(FunnelError::Parse(format!("bad header `{header}`")));
        }
        for (i, c) in cols[1..].iter().enumerate() {
            if *c != format!("x{}", i + 1) {
                return Err(FunnelError::Parse(format!("bad column `{c}`")));
            }
        }
        let dim = cols.len() - 1;
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (row, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| FunnelError::Parse(format!("row {row}: {e}")))?;
            if vals.len() != dim + 1 {
                return Err(FunnelError::Parse(format!("row {row}: expected {} fields", dim + 1)));
            }
            times.push(vals[0]);
            samples.push(StatePoint::new(vals[1..].to_vec())?);
        }
        if samples.is_empty() {
            return Err(FunnelError::Parse("no data rows".into()));
        }
        let grid = infer_grid(&times, step_hint)?;
        Self::new(grid, samples)
    }
}

fn infer_grid(times: &[f64], step_hint: Option<f64>) -> Result<TimeGrid> {
    let n = times.len() - 1;
    let mut candidates: Vec<f64> = step_hint.into_iter().collect();
    if n > 0 {
        let raw = [times[1] - times[0], (times[n] - times[0]) / n as f64];
        for r in raw {
            candidates.push(r);
            if let Ok(rounded) = format!("{r:.11e}").parse::<f64>() {
                candidates.push(rounded);
            }
        }
    }
    for step in candidates {
        if !(step > 0.0) {
            continue;
        }
        let first = (times[0] / step).round() as i64;
        let grid = TimeGrid {
            step,
            first,
            n_steps: n,
        };
        if times.iter().enumerate().all(|(k, &t)| grid.time(k) == t) {
            return Ok(grid);
        }
    }
    Err(FunnelError::Parse(
        "could not reconstruct the time grid from the t column".into(),
    ))
}

/// Bounded metric on paths over a common grid:
/// `sum_{l=1}^{n_terms} 2^-l s_l / (1 + s_l)` with `s_l` the sup of `rho`
/// over the samples within `l` time units of the start.
pub fn metric_d(u: &Path, v: &Path, n_terms: usize) -> Result<f64> {
    if !u.grid.same_as(&v.grid) {
        return Err(FunnelError::GridMismatch("metric_d needs a shared grid".into()));
    }
    if u.dim() != v.dim() {
        return Err(FunnelError::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    Ok(metric_d_unchecked(u, v, n_terms))
}

pub(crate) fn metric_d_unchecked(u: &Path, v: &Path, n_terms: usize) -> f64 {
    let step = u.grid.step;
    let n = u.grid.n_steps;
    let mut sup = 0.0f64;
    let mut k = 0usize;
    let mut total = 0.0;
    let mut weight = 1.0;
    for l in 1..=n_terms {
        weight *= 0.5;
        let lim = l as f64;
        while k <= n && k as f64 * step <= lim * (1.0 + 1e-12) {
            sup = sup.max(rho_unchecked(&u.samples[k], &v.samples[k]));
            k += 1;
        }
        total += weight * sup / (1.0 + sup);
    }
    total
}

/// Number of metric terms used for diameters: the grid horizon in whole
/// time units plus enough terms for the remainder to vanish below 2^-60.
pub fn default_metric_terms(grid: &TimeGrid) -> usize {
    grid.horizon().ceil() as usize + 60
}
