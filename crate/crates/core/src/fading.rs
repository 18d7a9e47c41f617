//! Fade-level and harvested-energy distributions.
//!
//! Fade levels live on the squared-gain (SNR) axis: Rayleigh fading is an
//! exponential density with the given mean and Nakagami-m is a
//! Gamma(m, mean/m) density. [`FadingModel::solve_cutoff`] finds the cutoff
//! fade `h_0` of a water-filling policy with a given average power budget.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma as GammaDist};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma as GammaCdf};
use statrs::function::gamma::{gamma_lr as raw_lr, gamma_ur as raw_ur, ln_gamma};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FadingError {
    #[error("mean SNR must be positive and finite, got {0}")]
    NonPositiveMean(f64),
    #[error("Nakagami shape must be at least 0.5, got {0}")]
    ShapeTooSmall(f64),
    #[error("discrete table: {0}")]
    InvalidTable(String),
    #[error("density is not defined for a discrete or point-mass model")]
    UnsupportedForDiscrete,
    #[error("power budget must be positive and finite, got {0}")]
    NonPositiveBudget(f64),
    #[error("mean recharge must be positive and finite, got {0}")]
    NonPositiveRecharge(f64),
    #[error("discretization needs at least 2 cells, got {0}")]
    TooFewCells(usize),
}

/// A finite fade distribution with strictly increasing positive support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteFading {
    points: Vec<f64>,
    masses: Vec<f64>,
}

impl DiscreteFading {
    pub fn new(points: Vec<f64>, masses: Vec<f64>) -> Result<Self, FadingError> {
        if points.is_empty() || points.len() != masses.len() {
            return Err(FadingError::InvalidTable(format!(
                "{} points vs {} masses",
                points.len(),
                masses.len()
            )));
        }
        if points.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(FadingError::InvalidTable("points must be positive".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FadingError::InvalidTable(
                "points must be strictly increasing".into(),
            ));
        }
        if masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(FadingError::InvalidTable(
                "masses must be non-negative".into(),
            ));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FadingError::InvalidTable(format!(
                "masses sum to {total}, not 1"
            )));
        }
        Ok(DiscreteFading { points, masses })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.masses)
            .map(|(h, m)| h * m)
            .sum()
    }

    /// Index of the support point closest to `h`.
    pub fn nearest(&self, h: f64) -> usize {
        let i = self.points.partition_point(|p| *p < h);
        if i == 0 {
            0
        } else if i == self.points.len() || h - self.points[i - 1] <= self.points[i] - h {
            i - 1
        } else {
            i
        }
    }

    fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, m) in self.masses.iter().enumerate() {
            acc += m;
            if u < acc {
                return i;
            }
        }
        self.masses.len() - 1
    }

    /// Regroups the table into `n` equal-probability cells, each represented by
    /// its conditional mean. Atoms straddling a cell boundary are split.
    fn regroup(&self, n: usize) -> DiscreteFading {
        let mut points = Vec::with_capacity(n);
        let mut masses = Vec::with_capacity(n);
        let target = 1.0 / n as f64;
        let (mut cell_mass, mut cell_moment) = (0.0, 0.0);
        let mut cells_done = 0;
        for (&h, &m) in self.points.iter().zip(&self.masses) {
            let mut left = m;
            while left > 0.0 {
                let room = if cells_done + 1 == n {
                    f64::INFINITY
                } else {
                    target - cell_mass
                };
                let take = left.min(room);
                cell_mass += take;
                cell_moment += take * h;
                left -= take;
                if cell_mass >= target - 1e-15 && cells_done + 1 < n {
                    push_cell(&mut points, &mut masses, cell_moment / cell_mass, cell_mass);
                    cells_done += 1;
                    cell_mass = 0.0;
                    cell_moment = 0.0;
                }
            }
        }
        if cell_mass > 0.0 {
            push_cell(&mut points, &mut masses, cell_moment / cell_mass, cell_mass);
        }
        normalize(points, masses)
    }
}

fn push_cell(points: &mut Vec<f64>, masses: &mut Vec<f64>, h: f64, m: f64) {
    match points.last() {
        Some(&last) if h <= last * (1.0 + 1e-14) => {
            let k = masses.len() - 1;
            let total = masses[k] + m;
            points[k] = (points[k] * masses[k] + h * m) / total;
            masses[k] = total;
        }
        _ => {
            points.push(h);
            masses.push(m);
        }
    }
}

fn normalize(points: Vec<f64>, mut masses: Vec<f64>) -> DiscreteFading {
    let total: f64 = masses.iter().sum();
    masses.iter_mut().for_each(|m| *m /= total);
    DiscreteFading { points, masses }
}

/// Distribution of the fade level `h`.
#[derive(Debug, Clone, PartialEq)]
pub enum FadingModel {
    PointMass(f64),
    Rayleigh { mean: f64 },
    Nakagami { m: f64, mean: f64 },
    Discrete(DiscreteFading),
}

impl FadingModel {
    pub fn point_mass(h: f64) -> Result<Self, FadingError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(FadingError::NonPositiveMean(h));
        }
        Ok(FadingModel::PointMass(h))
    }

    pub fn rayleigh(mean: f64) -> Result<Self, FadingError> {
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(FadingError::NonPositiveMean(mean));
        }
        Ok(FadingModel::Rayleigh { mean })
    }

    pub fn nakagami(m: f64, mean: f64) -> Result<Self, FadingError> {
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(FadingError::NonPositiveMean(mean));
        }
        if !(m >= 0.5 && m.is_finite()) {
            return Err(FadingError::ShapeTooSmall(m));
        }
        Ok(FadingModel::Nakagami { m, mean })
    }

    pub fn mean(&self) -> f64 {
        match self {
            FadingModel::PointMass(h) => *h,
            FadingModel::Rayleigh { mean } | FadingModel::Nakagami { mean, .. } => *mean,
            FadingModel::Discrete(d) => d.mean(),
        }
    }

    /// (shape, scale) of the Gamma law behind a continuous model.
    fn gamma_params(&self) -> Option<(f64, f64)> {
        match *self {
            FadingModel::Rayleigh { mean } => Some((1.0, mean)),
            FadingModel::Nakagami { m, mean } => Some((m, mean / m)),
            _ => None,
        }
    }

    pub fn density(&self, h: f64) -> Result<f64, FadingError> {
        let (shape, scale) = self
            .gamma_params()
            .ok_or(FadingError::UnsupportedForDiscrete)?;
        Ok(gamma_density(shape, scale, h))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            FadingModel::PointMass(h) => *h,
            FadingModel::Rayleigh { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            FadingModel::Nakagami { m, mean } => {
                GammaDist::new(*m, mean / m).expect("validated").sample(rng)
            }
            FadingModel::Discrete(d) => d.points[d.sample_index(rng)],
        }
    }

    /// Equal-probability quantile cells, each represented by its conditional
    /// mean, so the first moment is preserved exactly.
    pub fn discretize(&self, n: usize) -> Result<DiscreteFading, FadingError> {
        if n < 2 {
            return Err(FadingError::TooFewCells(n));
        }
        match self {
            FadingModel::PointMass(h) => DiscreteFading::new(vec![*h], vec![1.0]),
            FadingModel::Discrete(d) if n >= d.len() => Ok(d.clone()),
            FadingModel::Discrete(d) => Ok(d.regroup(n)),
            _ => {
                let (shape, scale) = self.gamma_params().expect("continuous");
                let law = GammaCdf::new(shape, 1.0).expect("validated shape");
                let mut edges = Vec::with_capacity(n + 1);
                edges.push(0.0);
                for j in 1..n {
                    edges.push(law.inverse_cdf(j as f64 / n as f64));
                }
                edges.push(f64::INFINITY);
                // E[X; a < X < b] for X ~ Gamma(k, 1) is k * (P(k+1, b) - P(k+1, a)).
                let partial_moment = |a: f64, b: f64| {
                    if b.is_infinite() {
                        shape * gamma_ur(shape + 1.0, a)
                    } else if a > shape {
                        shape * (gamma_ur(shape + 1.0, a) - gamma_ur(shape + 1.0, b))
                    } else {
                        shape * (gamma_lr(shape + 1.0, b) - gamma_lr(shape + 1.0, a))
                    }
                };
                let mut points = Vec::with_capacity(n);
                let mut masses = Vec::with_capacity(n);
                for w in edges.windows(2) {
                    let h = scale * partial_moment(w[0], w[1]) * n as f64;
                    push_cell(&mut points, &mut masses, h, 1.0 / n as f64);
                }
                Ok(normalize(points, masses))
            }
        }
    }

    /// `g(h_0) = ∫_{h_0}^∞ (1/h_0 − 1/h) f_h(h) dh`, the average power spent by
    /// a water-filling policy with cutoff `h_0`.
    pub fn cutoff_integral(&self, h0: f64) -> f64 {
        match self {
            FadingModel::PointMass(h) => (1.0 / h0 - 1.0 / h).max(0.0),
            FadingModel::Discrete(d) => d
                .points
                .iter()
                .zip(&d.masses)
                .filter(|(h, _)| **h > h0)
                .map(|(h, m)| m * (1.0 / h0 - 1.0 / h))
                .sum(),
            _ => {
                let (shape, scale) = self.gamma_params().expect("continuous");
                gamma_cutoff_integral(shape, scale, h0)
            }
        }
    }

    /// Solves `g(h_0) = budget` by bisection on `log h_0`.
    ///
    /// `g` is continuous and strictly decreasing where positive, and
    /// `g(h_0) ≤ 1/h_0`, so the root lies below `1/budget`.
    pub fn solve_cutoff(&self, budget: f64) -> Result<f64, FadingError> {
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(FadingError::NonPositiveBudget(budget));
        }
        let tol = 1e-9 * budget.max(1.0);
        let mut hi = 1.0 / budget;
        let mut lo = hi;
        loop {
            lo *= 0.5;
            if self.cutoff_integral(lo) >= budget {
                break;
            }
        }
        let mut best = (f64::INFINITY, hi);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            let g = self.cutoff_integral(mid);
            let err = (g - budget).abs();
            if err < best.0 {
                best = (err, mid);
            }
            if err <= tol * 1e-3 || hi / lo - 1.0 < 1e-15 {
                break;
            }
            if g > budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(best.1)
    }
}

fn gamma_density(shape: f64, scale: f64, h: f64) -> f64 {
    if h < 0.0 {
        return 0.0;
    }
    if h == 0.0 {
        return match shape.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => f64::INFINITY,
            Some(std::cmp::Ordering::Equal) => 1.0 / scale,
            _ => 0.0,
        };
    }
    let x = h / scale;
    ((shape - 1.0) * x.ln() - x - ln_gamma(shape)).exp() / scale
}

/// Tanh-sinh quadrature of the cutoff integral after mapping `[h_0, ∞)` onto
/// `[0, 1)` with `h = h_0 + θ s / (1 − s)`.
fn gamma_cutoff_integral(shape: f64, scale: f64, h0: f64) -> f64 {
    let inv_h0 = 1.0 / h0;
    let integrand = |s: f64| {
        if s >= 1.0 {
            return 0.0;
        }
        let u = 1.0 - s;
        let h = h0 + scale * s / u;
        (inv_h0 - 1.0 / h) * gamma_density(shape, scale, h) * scale / (u * u)
    };
    // The mass above h0 bounds the result by Q/h0; aim well below 1e-9 relative.
    let tail = gamma_ur(shape, h0 / scale);
    let target = (1e-13 * tail * inv_h0).max(1e-300);
    quadrature::integrate(integrand, 0.0, 1.0, target).integral
}

/// Distribution of the energy carried by one arrival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EnergyModel {
    PointMass(f64),
    /// Uniform on `[0, 2P]`.
    UniformMean(f64),
}

impl EnergyModel {
    pub fn uniform_mean(mean: f64) -> Result<Self, FadingError> {
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(FadingError::NonPositiveRecharge(mean));
        }
        Ok(EnergyModel::UniformMean(mean))
    }

    pub fn point_mass(e: f64) -> Result<Self, FadingError> {
        if !(e > 0.0 && e.is_finite()) {
            return Err(FadingError::NonPositiveRecharge(e));
        }
        Ok(EnergyModel::PointMass(e))
    }

    pub fn mean(&self) -> f64 {
        match *self {
            EnergyModel::PointMass(e) | EnergyModel::UniformMean(e) => e,
        }
    }

    pub fn max_amount(&self) -> f64 {
        match *self {
            EnergyModel::PointMass(e) => e,
            EnergyModel::UniformMean(p) => 2.0 * p,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            EnergyModel::PointMass(e) => e,
            EnergyModel::UniformMean(p) => 2.0 * p * rng.random::<f64>(),
        }
    }

    /// Equal-probability cells; for the uniform law the cell means are the midpoints.
    pub fn discretize(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>), FadingError> {
        if n < 2 {
            return Err(FadingError::TooFewCells(n));
        }
        Ok(match *self {
            EnergyModel::PointMass(e) => (vec![e], vec![1.0]),
            EnergyModel::UniformMean(p) => {
                let w = 2.0 * p / n as f64;
                (
                    (0..n).map(|j| (j as f64 + 0.5) * w).collect(),
                    vec![1.0 / n as f64; n],
                )
            }
        })
    }
}

/// JSON form of a fading model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FadingSpec {
    PointMass { h: f64 },
    Rayleigh { mean_snr_db: f64 },
    Nakagami { m: f64, mean_snr_db: f64 },
    Discrete { points: Vec<f64>, masses: Vec<f64> },
}

impl FadingSpec {
    pub fn to_model(&self) -> Result<FadingModel, FadingError> {
        match self {
            FadingSpec::PointMass { h } => FadingModel::point_mass(*h),
            FadingSpec::Rayleigh { mean_snr_db } => {
                FadingModel::rayleigh(db_to_linear(*mean_snr_db))
            }
            FadingSpec::Nakagami { m, mean_snr_db } => {
                FadingModel::nakagami(*m, db_to_linear(*mean_snr_db))
            }
            FadingSpec::Discrete { points, masses } => Ok(FadingModel::Discrete(
                DiscreteFading::new(points.clone(), masses.clone())?,
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergySpec {
    PointMass { e_j: f64 },
    UniformMean { mean_j: f64 },
}

impl EnergySpec {
    pub fn to_model(&self) -> Result<EnergyModel, FadingError> {
        match *self {
            EnergySpec::PointMass { e_j } => EnergyModel::point_mass(e_j),
            EnergySpec::UniformMean { mean_j } => EnergyModel::uniform_mean(mean_j),
        }
    }
}

// statrs panics at x = 0 and x = inf.
fn gamma_lr(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        raw_lr(a, x)
    }
}

fn gamma_ur(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        raw_ur(a, x)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
