//! Dimension-normalized single-objective test functions, the ZDT
//! two-objective family, additive Gaussian noise, and analytic fronts.

use std::f64::consts::{E, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::evolution::dominates;
use crate::{ObjectiveVector, SearchPoint};

/// Per-dimension box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn uniform(d: usize, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; d],
            upper: vec![upper; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lower.len() == self.upper.len()
            && self
                .lower
                .iter()
                .zip(&self.upper)
                .all(|(l, u)| l.is_finite() && u.is_finite() && l < u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Sphere,
    Ackley,
    Rastrigin,
    Rosenbrock,
    StyblinskiTang,
    Zdt1,
    Zdt2,
    Zdt3,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 8] = [
        ProblemKind::Sphere,
        ProblemKind::Ackley,
        ProblemKind::Rastrigin,
        ProblemKind::Rosenbrock,
        ProblemKind::StyblinskiTang,
        ProblemKind::Zdt1,
        ProblemKind::Zdt2,
        ProblemKind::Zdt3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Sphere => "sphere",
            ProblemKind::Ackley => "ackley",
            ProblemKind::Rastrigin => "rastrigin",
            ProblemKind::Rosenbrock => "rosenbrock",
            ProblemKind::StyblinskiTang => "styblinski",
            ProblemKind::Zdt1 => "zdt1",
            ProblemKind::Zdt2 => "zdt2",
            ProblemKind::Zdt3 => "zdt3",
        }
    }

    pub fn objectives(self) -> usize {
        if self.is_zdt() {
            2
        } else {
            1
        }
    }

    pub fn is_zdt(self) -> bool {
        matches!(self, ProblemKind::Zdt1 | ProblemKind::Zdt2 | ProblemKind::Zdt3)
    }

    pub fn min_dim(self) -> usize {
        match self {
            ProblemKind::Rosenbrock => 2,
            k if k.is_zdt() => 2,
            _ => 1,
        }
    }

    /// Conventional search box for the function.
    pub fn default_bounds(self, d: usize) -> Bounds {
        match self {
            ProblemKind::Ackley | ProblemKind::Rastrigin | ProblemKind::Sphere => Bounds::uniform(d, -5.12, 5.12),
            ProblemKind::Rosenbrock => Bounds::uniform(d, -2.048, 2.048),
            ProblemKind::StyblinskiTang => Bounds::uniform(d, -5.0, 5.0),
            _ => Bounds::uniform(d, 0.0, 1.0),
        }
    }

    fn evaluate(self, x: &[f64]) -> ObjectiveVector {
        match self {
            ProblemKind::Sphere => vec![sphere(x)],
            ProblemKind::Ackley => vec![ackley(x)],
            ProblemKind::Rastrigin => vec![rastrigin(x)],
            ProblemKind::Rosenbrock => vec![rosenbrock(x)],
            ProblemKind::StyblinskiTang => vec![styblinski_tang(x)],
            ProblemKind::Zdt1 => zdt1(x).to_vec(),
            ProblemKind::Zdt2 => zdt2(x).to_vec(),
            ProblemKind::Zdt3 => zdt3(x).to_vec(),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProblemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownProblem(s.to_string()))
    }
}

fn mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    it.sum::<f64>() / n as f64
}

pub fn sphere(x: &[f64]) -> f64 {
    mean(x.iter().map(|v| v * v), x.len())
}

pub fn ackley(x: &[f64]) -> f64 {
    let n = x.len();
    let sq = mean(x.iter().map(|v| v * v), n);
    let cs = mean(x.iter().map(|v| (2.0 * PI * v).cos()), n);
    // the two constants cancel at the origin; clamp the rounding residue
    (-20.0 * (-0.2 * sq.sqrt()).exp() - cs.exp() + 20.0 + E).max(0.0)
}

pub fn rastrigin(x: &[f64]) -> f64 {
    10.0 + mean(x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()), x.len())
}

pub fn rosenbrock(x: &[f64]) -> f64 {
    let terms = x
        .windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2));
    mean(terms, x.len() - 1)
}

fn styblinski_term(t: f64) -> f64 {
    0.5 * (t.powi(4) - 16.0 * t * t + 5.0 * t)
}

/// Minimizer and negated minimum of the one-dimensional Styblinski–Tang
/// term, located by a grid scan followed by bisection on its derivative.
pub fn styblinski_ground_state() -> (f64, f64) {
    static STATE: OnceLock<(f64, f64)> = OnceLock::new();
    *STATE.get_or_init(|| {
        let derivative = |t: f64| 2.0 * t.powi(3) - 16.0 * t + 2.5;
        let steps = 10_000;
        let (lo, hi) = (-5.0, 5.0);
        let h = (hi - lo) / steps as f64;
        let best = (0..=steps)
            .map(|i| lo + i as f64 * h)
            .min_by(|a, b| styblinski_term(*a).total_cmp(&styblinski_term(*b)))
            .expect("non-empty grid");
        let (mut a, mut b) = (best - h, best + h);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if derivative(a) * derivative(mid) <= 0.0 {
                b = mid;
            } else {
                a = mid;
            }
        }
        let t = 0.5 * (a + b);
        (t, -styblinski_term(t))
    })
}

pub fn styblinski_tang(x: &[f64]) -> f64 {
    let (_, k) = styblinski_ground_state();
    (mean(x.iter().map(|&t| styblinski_term(t)), x.len()) + k).max(0.0)
}

fn zdt_g(x: &[f64]) -> f64 {
    1.0 + 9.0 * mean(x[1..].iter().copied(), x.len() - 1)
}

pub fn zdt1(x: &[f64]) -> [f64; 2] {
    let f1 = x[0];
    let g = zdt_g(x);
    [f1, g * (1.0 - (f1 / g).sqrt())]
}

pub fn zdt2(x: &[f64]) -> [f64; 2] {
    let f1 = x[0];
    let g = zdt_g(x);
    [f1, g * (1.0 - (f1 / g).powi(2))]
}

pub fn zdt3(x: &[f64]) -> [f64; 2] {
    let f1 = x[0];
    let g = zdt_g(x);
    let r = f1 / g;
    [f1, g * (1.0 - r.sqrt() - r * (10.0 * PI * f1).sin())]
}

/// A black-box objective with an exact evaluation counter and optional
/// additive Gaussian noise.
#[derive(Debug, Clone)]
pub struct Problem {
    kind: ProblemKind,
    d: usize,
    bounds: Bounds,
    noise_std: f64,
    noise: Option<(Normal<f64>, ChaCha8Rng)>,
    calls: u64,
}

impl Problem {
    pub fn new(kind: ProblemKind, d: usize) -> Result<Self> {
        if d < kind.min_dim() {
            return Err(Error::InvalidArgument(format!(
                "{kind} needs at least {} dimensions, got {d}",
                kind.min_dim()
            )));
        }
        Ok(Self {
            kind,
            d,
            bounds: kind.default_bounds(d),
            noise_std: 0.0,
            noise: None,
            calls: 0,
        })
    }

    pub fn by_name(name: &str, d: usize) -> Result<Self> {
        Self::new(name.parse()?, d)
    }

    /// Adds i.i.d. `N(0, noise_std²)` to every objective of every evaluation.
    pub fn with_noise(mut self, noise_std: f64, seed: u64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std {noise_std}")));
        }
        self.noise_std = noise_std;
        self.noise = if noise_std > 0.0 {
            let dist = Normal::new(0.0, noise_std).expect("valid std");
            Some((dist, ChaCha8Rng::seed_from_u64(seed)))
        } else {
            None
        };
        Ok(self)
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn objectives(&self) -> usize {
        self.kind.objectives()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn is_stochastic(&self) -> bool {
        self.noise_std > 0.0
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    /// Evaluates `F(x)`; counts exactly one call on success.
    pub fn evaluate(&mut self, x: &[f64]) -> Result<ObjectiveVector> {
        if x.len() != self.d {
            return Err(Error::LengthMismatch {
                expected: self.d,
                found: x.len(),
            });
        }
        if self.kind.is_zdt() {
            if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(Error::OutOfBounds {
                    index,
                    value,
                    lower: 0.0,
                    upper: 1.0,
                });
            }
        }
        let mut f = self.kind.evaluate(x);
        if let Some((dist, rng)) = &mut self.noise {
            for v in &mut f {
                *v += dist.sample(rng);
            }
        }
        self.calls += 1;
        Ok(f)
    }
}

/// `k` points on the analytic Pareto front of a ZDT problem.
pub fn true_front(kind: ProblemKind, k: usize) -> Result<Vec<ObjectiveVector>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let grid = |n: usize| -> Vec<f64> {
        if n == 1 {
            vec![0.0]
        } else {
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        }
    };
    match kind {
        ProblemKind::Zdt1 => Ok(grid(k).into_iter().map(|f| vec![f, 1.0 - f.sqrt()]).collect()),
        ProblemKind::Zdt2 => Ok(grid(k).into_iter().map(|f| vec![f, 1.0 - f * f]).collect()),
        ProblemKind::Zdt3 => {
            let dense = zdt3_front_filter(&grid(20_001));
            if k >= dense.len() {
                return Ok(dense);
            }
            let picks = grid(k);
            Ok(picks
                .into_iter()
                .map(|t| dense[(t * (dense.len() - 1) as f64).round() as usize].clone())
                .collect())
        }
        other => Err(Error::UnsupportedProblem(other.name().to_string())),
    }
}

/// Non-dominated subset of the `g = 1` curve of ZDT3 sampled at `f1s`
/// (ascending): a point survives iff its `f2` beats every point to its left.
fn zdt3_front_filter(f1s: &[f64]) -> Vec<ObjectiveVector> {
    let curve: Vec<ObjectiveVector> = f1s
        .iter()
        .map(|&f| vec![f, 1.0 - f.sqrt() - f * (10.0 * PI * f).sin()])
        .collect();
    let mut out: Vec<ObjectiveVector> = Vec::new();
    let mut best = f64::INFINITY;
    for p in curve {
        if p[1] < best {
            best = p[1];
            out.push(p);
        }
    }
    debug_assert!(out.windows(2).all(|w| !dominates(&w[0], &w[1]).unwrap_or(true)));
    out
}

/// A random point inside the problem box.
pub fn random_point(bounds: &Bounds, rng: &mut impl rand::Rng) -> SearchPoint {
    (0..bounds.dim())
        .map(|i| rng.gen_range(bounds.lower[i]..=bounds.upper[i]))
        .collect()
}
