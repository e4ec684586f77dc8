//! The countable separating family, its enumeration, and the discounted
//! functionals `zeta(w) = int_0^T e^{-lambda t} phi(w(t0 + t)) dt`.
//!
//! Quadrature is done interval by interval: on each grid interval the
//! composite `phi(w(.))` is replaced by its quadratic interpolant through the
//! endpoints and the midpoint of the linear segment, and the exponential
//! weight is integrated exactly against it. Per-interval contributions are
//! accumulated backwards (`acc = local + e^{-lambda h} acc`), which is also
//! the order of the dynamic programme in [`crate::selection`], so a
//! maximizing path's value is reproduced bit for bit by the recursion.

use serde::{Deserialize, Serialize};

use crate::error::{FunnelError, Result};
use crate::path_space::{Path, StatePoint};

/// A continuous test function `X -> [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `exp(-|x - center|^2)`.
    GaussianBump { center: StatePoint },
    /// Logistic function of `x[axis] - offset`, increasing or decreasing.
    CoordinateSigmoid { axis: usize, offset: f64, increasing: bool },
    /// Constant in `[0, 1]`; not part of any enumeration, used as a probe.
    Constant { value: f64 },
}

impl TestFunction {
    pub fn eval(&self, x: &StatePoint) -> f64 {
        match self {
            Self::GaussianBump { center } => {
                let sq: f64 = x
                    .coords()
                    .iter()
                    .zip(center.coords())
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum();
                (-sq).exp()
            }
            Self::CoordinateSigmoid {
                axis,
                offset,
                increasing,
            } => {
                let z = x.coords()[*axis] - offset;
                logistic(if *increasing { z } else { -z })
            }
            Self::Constant { value } => *value,
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Positive rational `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rational {
    pub num: u32,
    pub den: u32,
}

impl Rational {
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Rational {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// One enumerated pair `(lambda_n, phi_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatingFunctional {
    pub index: usize,
    pub lambda: Rational,
    pub phi: TestFunction,
}

impl SeparatingFunctional {
    /// A functional outside the enumeration (index `usize::MAX`).
    pub fn probe(lambda: Rational, phi: TestFunction) -> Self {
        Self {
            index: usize::MAX,
            lambda,
            phi,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.value()
    }
}

/// Which test functions make up the family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiFamily {
    Bumps,
    Sigmoids,
    /// Sigmoids with the decreasing member of each pair first.
    SigmoidsDecreasing,
    Mixed,
}

impl PhiFamily {
    pub const ALL: [PhiFamily; 4] = [
        PhiFamily::Bumps,
        PhiFamily::Sigmoids,
        PhiFamily::SigmoidsDecreasing,
        PhiFamily::Mixed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Bumps => "bumps",
            Self::Sigmoids => "sigmoids",
            Self::SigmoidsDecreasing => "sigmoids_decreasing",
            Self::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for PhiFamily {
    type Err = FunnelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bumps" => Ok(Self::Bumps),
            "sigmoids" => Ok(Self::Sigmoids),
            "sigmoids_decreasing" => Ok(Self::SigmoidsDecreasing),
            "mixed" => Ok(Self::Mixed),
            other => Err(FunnelError::InvalidParameter(format!("unknown phi family `{other}`"))),
        }
    }
}

/// Fixed enumeration `n -> (lambda_n, phi_n)`.
///
/// Rates are the positive rationals of height at most `lambda_height` in the
/// order `1, 1/2, 2, 1/3, 3, 2/3, 3/2, ...`; test functions are indexed by
/// the naturals. The pair index is the diagonal (Cantor) pairing restricted
/// to the finite rate list, so `n = 0` is `(1, phi_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    family: PhiFamily,
    dim: usize,
    lambdas: Vec<Rational>,
}

impl Enumeration {
    pub fn new(family: PhiFamily, dim: usize, lambda_height: u32) -> Result<Self> {
        if dim == 0 {
            return Err(FunnelError::InvalidParameter("state dimension must be positive".into()));
        }
        if lambda_height == 0 {
            return Err(FunnelError::InvalidParameter("lambda height must be positive".into()));
        }
        Ok(Self {
            family,
            dim,
            lambdas: rational_rates(lambda_height),
        })
    }

    pub fn family(&self) -> PhiFamily {
        self.family
    }

    pub fn lambdas(&self) -> &[Rational] {
        &self.lambdas
    }

    /// The `(rate index, test-function index)` of pair `n`.
    pub fn pair_of(&self, n: usize) -> (usize, usize) {
        let l = self.lambdas.len();
        let mut rem = n;
        let mut d = 0usize;
        loop {
            let width = (d + 1).min(l);
            if rem < width {
                return (rem, d - rem);
            }
            rem -= width;
            d += 1;
        }
    }

    pub fn test_function(&self, j: usize) -> TestFunction {
        match self.family {
            PhiFamily::Bumps => self.bump(j),
            PhiFamily::Sigmoids => self.sigmoid(j),
            PhiFamily::SigmoidsDecreasing => match self.sigmoid(j) {
                TestFunction::CoordinateSigmoid {
                    axis,
                    offset,
                    increasing,
                } => TestFunction::CoordinateSigmoid {
                    axis,
                    offset,
                    increasing: !increasing,
                },
                other => other,
            },
            PhiFamily::Mixed => {
                if j.is_multiple_of(2) {
                    self.sigmoid(j / 2)
                } else {
                    self.bump(j / 2)
                }
            }
        }
    }

    pub fn functional(&self, n: usize) -> SeparatingFunctional {
        let (i, j) = self.pair_of(n);
        SeparatingFunctional {
            index: n,
            lambda: self.lambdas[i],
            phi: self.test_function(j),
        }
    }

    fn sigmoid(&self, j: usize) -> TestFunction {
        TestFunction::CoordinateSigmoid {
            axis: (j / 2) % self.dim,
            offset: signed_rational(j / (2 * self.dim)),
            increasing: j.is_multiple_of(2),
        }
    }

    fn bump(&self, j: usize) -> TestFunction {
        let mut coords = Vec::with_capacity(self.dim);
        let mut rest = j;
        for _ in 1..self.dim {
            let (a, b) = cantor_unpair(rest);
            coords.push(signed_rational(a));
            rest = b;
        }
        coords.push(signed_rational(rest));
        TestFunction::GaussianBump {
            center: StatePoint::new(coords).expect("rational centers are finite"),
        }
    }
}

/// Positive rationals of height `<= h` in enumeration order.
pub fn rational_rates(h: u32) -> Vec<Rational> {
    let mut out = vec![Rational { num: 1, den: 1 }];
    for height in 2..=h {
        for p in 1..height {
            if gcd(p, height) == 1 {
                out.push(Rational { num: p, den: height });
                out.push(Rational { num: height, den: p });
            }
        }
    }
    out
}

/// `m`-th term of `0, 1, -1, 1/2, -1/2, 2, -2, 1/3, -1/3, 3, -3, ...`.
pub fn signed_rational(m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let mut idx = m - 1;
    let mut height = 1u32;
    loop {
        let positives = rational_rates(height)
            .into_iter()
            .filter(|r| r.num.max(r.den) == height)
            .collect::<Vec<_>>();
        if idx < 2 * positives.len() {
            let v = positives[idx / 2].value();
            return if idx.is_multiple_of(2) { v } else { -v };
        }
        idx -= 2 * positives.len();
        height += 1;
    }
}

fn cantor_unpair(z: usize) -> (usize, usize) {
    let w = (((8 * z + 1) as f64).sqrt() as usize - 1) / 2;
    let mut w = w;
    while (w + 1) * (w + 2) / 2 <= z {
        w += 1;
    }
    while w * (w + 1) / 2 > z {
        w -= 1;
    }
    let t = w * (w + 1) / 2;
    let y = z - t;
    (w - y, y)
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Finite horizon standing in for the infinite integral, with the tolerance
/// on the neglected tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationBudget {
    pub horizon: f64,
    pub epsilon_tail: f64,
}

impl TruncationBudget {
    pub fn new(horizon: f64, epsilon_tail: f64) -> Result<Self> {
        if !(horizon > 0.0) || !(epsilon_tail > 0.0) {
            return Err(FunnelError::InvalidParameter(format!(
                "budget needs positive horizon and epsilon_tail, got {horizon}, {epsilon_tail}"
            )));
        }
        Ok(Self { horizon, epsilon_tail })
    }

    /// `e^{-lambda T} / lambda`, the largest possible tail since `0 <= phi <= 1`.
    pub fn tail_bound(&self, lambda: f64) -> f64 {
        (-lambda * self.horizon).exp() / lambda
    }

    pub fn certify(&self, f: &SeparatingFunctional) -> Result<()> {
        let bound = self.tail_bound(f.lambda());
        if bound > self.epsilon_tail {
            return Err(FunnelError::TailBudget {
                lambda: f.lambda(),
                bound,
                epsilon: self.epsilon_tail,
            });
        }
        Ok(())
    }
}

/// Weights of the exponentially weighted three-point rule on an interval of
/// length `h`: `int_0^h e^{-lambda s} g(s) ds ~ w0 g(0) + w1 g(h/2) + w2 g(h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpSimpson {
    pub h: f64,
    pub w: [f64; 3],
    /// `e^{-lambda h}`.
    pub decay: f64,
}

impl ExpSimpson {
    pub fn new(lambda: f64, h: f64) -> Self {
        let u = lambda * h;
        let [m0, m1, m2] = exp_moments(u);
        let w = [
            h * (2.0 * m2 - 3.0 * m1 + m0),
            h * (4.0 * m1 - 4.0 * m2),
            h * (2.0 * m2 - m1),
        ];
        Self {
            h,
            w,
            decay: (-u).exp(),
        }
    }

    /// Integral over one linear segment from `a` to `b`.
    pub fn segment(&self, phi: &TestFunction, a: &StatePoint, b: &StatePoint) -> f64 {
        let mid = StatePoint::new(a.coords().iter().zip(b.coords()).map(|(x, y)| 0.5 * (x + y)).collect())
            .expect("midpoint of finite states is finite");
        self.w[0] * phi.eval(a) + self.w[1] * phi.eval(&mid) + self.w[2] * phi.eval(b)
    }
}

/// `int_0^1 s^j e^{-u s} ds` for `j = 0, 1, 2`.
fn exp_moments(u: f64) -> [f64; 3] {
    if u < 1.0 {
        // alternating series, |terms| fall below 1e-17 well before 30 terms
        let mut out = [0.0; 3];
        for (j, m) in out.iter_mut().enumerate() {
            let mut term = 1.0;
            let mut sum = 0.0;
            for k in 0..30usize {
                sum += term / (j + k + 1) as f64;
                term *= -u / (k + 1) as f64;
            }
            *m = sum;
        }
        out
    } else {
        let e = (-u).exp();
        let m0 = -(-u).exp_m1() / u;
        let m1 = (1.0 - (1.0 + u) * e) / (u * u);
        let m2 = (2.0 - (2.0 + 2.0 * u + u * u) * e) / (u * u * u);
        [m0, m1, m2]
    }
}

/// Discounted integral of `phi` along `w` over `[0, horizon]` relative to
/// the path start; `horizon` may end inside a grid interval.
pub fn window_integral(w: &Path, f: &SeparatingFunctional, horizon: f64) -> Result<f64> {
    let step = w.grid().step();
    let n = w.grid().n_steps();
    let covered = w.grid().horizon();
    if horizon > covered * (1.0 + 1e-12) + 1e-12 {
        return Err(FunnelError::HorizonTooShort {
            needed: horizon,
            available: covered,
        });
    }
    let lambda = f.lambda();
    let whole = ((horizon / step) * (1.0 + 1e-12)).floor() as usize;
    let whole = whole.min(n);
    let mut acc = 0.0;
    let rest = horizon - whole as f64 * step;
    if whole < n && rest > 1e-12 * step {
        let t_end = w.grid().time(whole) + rest;
        let end = w.evaluate(t_end)?;
        acc = ExpSimpson::new(lambda, rest).segment(&f.phi, w.sample(whole), &end);
    }
    let rule = ExpSimpson::new(lambda, step);
    for k in (0..whole).rev() {
        acc = rule.segment(&f.phi, w.sample(k), w.sample(k + 1)) + rule.decay * acc;
    }
    Ok(acc)
}

/// `zeta` over `[0, budget.horizon]`.
pub fn zeta_eval(w: &Path, f: &SeparatingFunctional, budget: &TruncationBudget) -> Result<f64> {
    window_integral(w, f, budget.horizon)
}

/// Integral over the whole grid of `w`.
pub fn zeta_full(w: &Path, f: &SeparatingFunctional) -> f64 {
    window_integral(w, f, w.grid().horizon()).expect("full window is covered")
}

/// A posteriori estimate of the quadrature error of [`window_integral`]
/// (whole intervals), from comparing each interval against its two halves.
pub fn quadrature_error_estimate(w: &Path, f: &SeparatingFunctional, horizon: f64) -> Result<f64> {
    let step = w.grid().step();
    let lambda = f.lambda();
    let whole = (((horizon / step) * (1.0 + 1e-12)).floor() as usize).min(w.grid().n_steps());
    let full = ExpSimpson::new(lambda, step);
    let half = ExpSimpson::new(lambda, 0.5 * step);
    let mut total = 0.0;
    for k in 0..whole {
        let a = w.sample(k);
        let b = w.sample(k + 1);
        let mid = w.evaluate(w.grid().time(k) + 0.5 * step)?;
        let coarse = full.segment(&f.phi, a, b);
        let fine = half.segment(&f.phi, a, &mid) + half.decay * half.segment(&f.phi, &mid, b);
        total += (-lambda * k as f64 * step).exp() * (coarse - fine).abs();
    }
    // With exponential weights the local error is O(h^4) or better, so the
    // coarse error is at most 8/7 of the coarse-fine difference; the factor
    // 2 adds margin and covers a partial final interval.
    Ok(total * 2.0 + f64::EPSILON * 16.0)
}

/// Least `n <= n_max` whose functional tells `u` and `v` apart by more than
/// three times the combined tail and quadrature tolerance. Functionals whose
/// tail bound exceeds the budget are skipped.
pub fn separates(
    u: &Path,
    v: &Path,
    enumeration: &Enumeration,
    n_max: usize,
    budget: &TruncationBudget,
) -> Result<Option<usize>> {
    for n in 0..=n_max {
        let f = enumeration.functional(n);
        if budget.certify(&f).is_err() {
            continue;
        }
        let zu = zeta_eval(u, &f, budget)?;
        let zv = zeta_eval(v, &f, budget)?;
        let noise = budget.epsilon_tail
            + quadrature_error_estimate(u, &f, budget.horizon)?
            + quadrature_error_estimate(v, &f, budget.horizon)?;
        if (zu - zv).abs() > 3.0 * noise {
            return Ok(Some(n));
        }
    }
    Ok(None)
}
