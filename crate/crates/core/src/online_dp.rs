//! Optimal online policy by backward induction on a time grid of step `δ`.
//!
//! The state is (battery energy, current fade level, step index). During one
//! step the transmitter spends `δ·p` joules; at the end of the step the fade is
//! redrawn with probability `1 − exp(−λ_f δ)` and an energy packet arrives with
//! probability `1 − exp(−λ_e δ)`, independently. Energy is held on a uniform
//! grid over `[0, E_max]` and values between grid points are interpolated
//! linearly.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fading::{DiscreteFading, EnergyModel, EnergySpec, FadingError, FadingSpec};
use crate::rate::RateModel;

const MAGIC: &[u8; 8] = b"EHSCHDP\0";
const FORMAT_VERSION: u32 = 1;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("value function decreases in energy at step {step}, fade index {fade}, energy index {index}; refine the energy grid or the time step")]
    GridTooCoarse {
        step: usize,
        fade: usize,
        index: usize,
    },
    #[error("table needs {needed} bytes, above the cap of {cap}")]
    OutOfMemoryBudget { needed: u64, cap: u64 },
    #[error("malformed table file: {0}")]
    Format(String),
    #[error(transparent)]
    Fading(#[from] FadingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub delta: f64,
    pub horizon: f64,
    pub e_max: f64,
    /// Number of energy grid points over `[0, E_max]`.
    pub energy_grid: usize,
    pub fading: DiscreteFading,
    pub lambda_e: f64,
    pub lambda_f: f64,
    /// Packet size law; unused when `lambda_e` is zero.
    pub energy_model: Option<EnergyModel>,
    pub energy_points: usize,
    pub rate: RateModel,
    pub action_search: ActionSearch,
    pub memory_cap_bytes: u64,
}

/// How each cell's power is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionSearch {
    /// Bisection on the sign of the derivative across energy grid segments,
    /// then the closed-form stationary point inside the segment.
    #[default]
    Exact,
    /// Coarse scan over `power_grid` candidates, then golden-section search.
    Golden { power_grid: usize },
}

pub const DEFAULT_ENERGY_GRID: usize = 201;
pub const DEFAULT_FADE_POINTS: usize = 32;
pub const DEFAULT_ENERGY_POINTS: usize = 16;
pub const DEFAULT_MEMORY_CAP: u64 = 2 << 30;

impl DpConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.delta).round() as usize
    }

    pub fn validate(&self) -> Result<(), DpError> {
        let bad = |msg: String| Err(DpError::InvalidConfig(msg));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        let steps = self.horizon / self.delta;
        if steps < 1.0 || (steps - steps.round()).abs() > 1e-6 {
            return bad(format!(
                "horizon {} is not a whole number of steps of {}",
                self.horizon, self.delta
            ));
        }
        if !(self.e_max > 0.0 && self.e_max.is_finite()) {
            return bad(format!(
                "E_max must be positive and finite, got {}",
                self.e_max
            ));
        }
        if self.energy_grid < 2 {
            return bad("the energy grid needs at least 2 points".into());
        }
        if let ActionSearch::Golden { power_grid } = self.action_search {
            if power_grid < 2 {
                return bad("the power grid needs at least 2 points".into());
            }
        }
        for (name, l) in [("lambda_e", self.lambda_e), ("lambda_f", self.lambda_f)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {l}"));
            }
        }
        if self.delta * self.lambda_e.max(self.lambda_f) > 0.1 {
            return bad(format!(
                "delta * max rate = {} exceeds 0.1",
                self.delta * self.lambda_e.max(self.lambda_f)
            ));
        }
        if self.lambda_e > 0.0 {
            match self.energy_model {
                None => return bad("lambda_e > 0 needs an energy model".into()),
                Some(_) if self.energy_points < 2 => {
                    return bad("energy_points must be at least 2".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Bytes held by the value and policy arrays.
    pub fn table_bytes(&self) -> u64 {
        2 * 8 * (self.steps() as u64 + 1) * self.fading.len() as u64 * self.energy_grid as u64
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// JSON form of [`DpConfig`] with fading and energy laws given by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfigFile {
    pub delta_s: f64,
    pub horizon_s: f64,
    pub e_max_j: f64,
    #[serde(default = "default_energy_grid")]
    pub energy_grid: usize,
    pub fading: FadingSpec,
    #[serde(default = "default_fade_points")]
    pub fade_points: usize,
    pub lambda_e: f64,
    pub lambda_f: f64,
    #[serde(default)]
    pub energy: Option<EnergySpec>,
    #[serde(default = "default_energy_points")]
    pub energy_points: usize,
    #[serde(default)]
    pub rate: RateModel,
    #[serde(default)]
    pub action_search: ActionSearch,
    #[serde(default)]
    pub memory_cap_mb: Option<u64>,
}

fn default_energy_grid() -> usize {
    DEFAULT_ENERGY_GRID
}
fn default_fade_points() -> usize {
    DEFAULT_FADE_POINTS
}
fn default_energy_points() -> usize {
    DEFAULT_ENERGY_POINTS
}

impl DpConfigFile {
    pub fn into_config(self) -> Result<DpConfig, DpError> {
        let fading = self
            .fading
            .to_model()?
            .discretize(self.fade_points.max(2))?;
        let energy_model = self.energy.map(|e| e.to_model()).transpose()?;
        let config = DpConfig {
            delta: self.delta_s,
            horizon: self.horizon_s,
            e_max: self.e_max_j,
            energy_grid: self.energy_grid,
            fading,
            lambda_e: self.lambda_e,
            lambda_f: self.lambda_f,
            energy_model,
            energy_points: self.energy_points,
            rate: self.rate,
            action_search: self.action_search,
            memory_cap_bytes: self.memory_cap_mb.map_or(DEFAULT_MEMORY_CAP, |mb| mb << 20),
        };
        config.validate()?;
        Ok(config)
    }
}

/// Table metadata stored ahead of the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableHeader {
    pub delta: f64,
    pub horizon: f64,
    pub e_max: f64,
    pub steps: usize,
    pub energy_grid: usize,
    pub fade_points: Vec<f64>,
    pub fade_masses: Vec<f64>,
    pub lambda_e: f64,
    pub lambda_f: f64,
    pub rate: RateModel,
    pub config_hash: String,
}

/// `J(e, h, k)` in bits and the maximizing power `g*(e, h, k)` in watts.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    header: TableHeader,
    fading: DiscreteFading,
    values: Vec<f64>,
    policy: Vec<f64>,
}

impl ValueTable {
    pub fn header(&self) -> &TableHeader {
        &self.header
    }

    pub fn delta(&self) -> f64 {
        self.header.delta
    }

    pub fn horizon(&self) -> f64 {
        self.header.horizon
    }

    pub fn e_max(&self) -> f64 {
        self.header.e_max
    }

    pub fn steps(&self) -> usize {
        self.header.steps
    }

    pub fn fading(&self) -> &DiscreteFading {
        &self.fading
    }

    fn layer_len(&self) -> usize {
        self.header.energy_grid * self.fading.len()
    }

    fn spacing(&self) -> f64 {
        self.header.e_max / (self.header.energy_grid - 1) as f64
    }

    /// Stored value at grid indices.
    pub fn value_at(&self, energy_index: usize, fade_index: usize, step: usize) -> f64 {
        self.values[step * self.layer_len() + fade_index * self.header.energy_grid + energy_index]
    }

    pub fn power_at(&self, energy_index: usize, fade_index: usize, step: usize) -> f64 {
        self.policy[step * self.layer_len() + fade_index * self.header.energy_grid + energy_index]
    }

    /// Row of the arrays holding step `⌊t/δ⌋` at the support point nearest `h`.
    fn row(&self, h: f64, t: f64) -> std::ops::Range<usize> {
        let k = ((t / self.header.delta) + 1e-9).floor().max(0.0) as usize;
        let start = k.min(self.header.steps) * self.layer_len()
            + self.fading.nearest(h) * self.header.energy_grid;
        start..start + self.header.energy_grid
    }

    /// Expected bits from state `(e, h)` at time `t` onwards.
    pub fn value(&self, e: f64, h: f64, t: f64) -> f64 {
        let row = self.row(h, t);
        interpolate(
            &self.values[row],
            self.spacing(),
            e.clamp(0.0, self.header.e_max),
        )
    }

    /// Greedy power `g*(e, h, t)`, clamped to `[0, e/δ]`.
    pub fn optimal_power(&self, e: f64, h: f64, t: f64) -> f64 {
        if !(e > 0.0) {
            return 0.0;
        }
        let row = self.row(h, t);
        let p = interpolate(&self.policy[row], self.spacing(), e.min(self.header.e_max));
        p.clamp(0.0, e / self.header.delta)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), DpError> {
        let header =
            serde_json::to_vec(&self.header).map_err(|e| DpError::Format(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        for x in self.values.iter().chain(&self.policy) {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, DpError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DpError::Format("not a value table".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(DpError::Format(format!("unsupported version {version}")));
        }
        input.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut header)?;
        let header: TableHeader =
            serde_json::from_slice(&header).map_err(|e| DpError::Format(e.to_string()))?;
        let fading = DiscreteFading::new(header.fade_points.clone(), header.fade_masses.clone())?;
        if header.energy_grid < 2 {
            return Err(DpError::Format("energy grid too small".into()));
        }
        let count = (header.steps + 1) * header.energy_grid * fading.len();
        let mut bytes = vec![0u8; 16 * count];
        input.read_exact(&mut bytes)?;
        let mut floats = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let values: Vec<f64> = floats.by_ref().take(count).collect();
        let policy: Vec<f64> = floats.collect();
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(DpError::Format("trailing bytes after table".into()));
        }
        Ok(ValueTable {
            header,
            fading,
            values,
            policy,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DpError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DpError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut input)
    }
}

fn interpolate(row: &[f64], spacing: f64, x: f64) -> f64 {
    let pos = x / spacing;
    let j = (pos.floor() as usize).min(row.len() - 2);
    let w = pos - j as f64;
    row[j] + w * (row[j + 1] - row[j])
}

/// Backward induction from the terminal layer `J(·,·,K) = 0`.
pub fn build_value_function(config: &DpConfig) -> Result<ValueTable, DpError> {
    config.validate()?;
    let needed = config.table_bytes();
    if needed > config.memory_cap_bytes {
        return Err(DpError::OutOfMemoryBudget {
            needed,
            cap: config.memory_cap_bytes,
        });
    }
    let steps = config.steps();
    let ne = config.energy_grid;
    let nf = config.fading.len();
    let layer = ne * nf;
    let spacing = config.e_max / (ne - 1) as f64;
    let grid: Vec<f64> = (0..ne).map(|i| i as f64 * spacing).collect();
    let q_e = -(-config.lambda_e * config.delta).exp_m1();
    let q_f = -(-config.lambda_f * config.delta).exp_m1();
    let packets = match config.energy_model {
        Some(model) if q_e > 0.0 => model.discretize(config.energy_points)?,
        _ => (Vec::new(), Vec::new()),
    };
    // Interpolation positions of min(x_j + a, E_max) for every grid point and packet.
    let shifted: Vec<Vec<(usize, f64)>> = packets
        .0
        .iter()
        .map(|a| {
            grid.iter()
                .map(|x| {
                    let pos = ((x + a).min(config.e_max)) / spacing;
                    let j = (pos.floor() as usize).min(ne - 2);
                    (j, pos - j as f64)
                })
                .collect()
        })
        .collect();

    let mut values = vec![0.0; (steps + 1) * layer];
    let mut policy = vec![0.0; (steps + 1) * layer];
    let mut continuation = vec![0.0; layer];
    let mut after_arrival = vec![0.0; layer];
    for k in (0..steps).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * layer);
        let next = &tail[..layer];
        let current = &mut head[k * layer..];

        after_arrival
            .par_chunks_mut(ne)
            .zip(next.par_chunks(ne))
            .for_each(|(out, row)| {
                for (j, o) in out.iter_mut().enumerate() {
                    let mut arrival = 0.0;
                    for (w, pos) in packets.1.iter().zip(&shifted) {
                        let (i, t) = pos[j];
                        arrival += w * (row[i] + t * (row[i + 1] - row[i]));
                    }
                    *o = (1.0 - q_e) * row[j] + q_e * arrival;
                }
            });
        let mut redrawn = vec![0.0; ne];
        for (f, &mass) in config.fading.masses().iter().enumerate() {
            for (r, a) in redrawn.iter_mut().zip(&after_arrival[f * ne..(f + 1) * ne]) {
                *r += mass * a;
            }
        }
        for (out, a) in continuation.chunks_mut(ne).zip(after_arrival.chunks(ne)) {
            for ((o, a), r) in out.iter_mut().zip(a).zip(&redrawn) {
                *o = (1.0 - q_f) * a + q_f * r;
            }
        }

        let current = &mut current[..layer];
        let gains = &mut policy[k * layer..(k + 1) * layer];
        current
            .par_chunks_mut(ne)
            .zip(gains.par_chunks_mut(ne))
            .zip(continuation.par_chunks(ne))
            .zip(config.fading.points().par_iter())
            .for_each(|(((j_row, g_row), v_row), &h)| {
                for i in 0..ne {
                    let (value, power) = match config.action_search {
                        ActionSearch::Exact => exact_action(config, v_row, spacing, i, h),
                        ActionSearch::Golden { power_grid } => {
                            golden_action(config, v_row, spacing, grid[i], h, power_grid)
                        }
                    };
                    j_row[i] = value;
                    g_row[i] = power;
                }
            });

        for f in 0..nf {
            let row = &current[f * ne..(f + 1) * ne];
            for i in 1..ne {
                if row[i] < row[i - 1] - 1e-9 * row[i - 1].abs().max(1e-12) {
                    return Err(DpError::GridTooCoarse {
                        step: k,
                        fade: f,
                        index: i,
                    });
                }
            }
        }
    }

    let header = TableHeader {
        delta: config.delta,
        horizon: config.horizon,
        e_max: config.e_max,
        steps,
        energy_grid: ne,
        fade_points: config.fading.points().to_vec(),
        fade_masses: config.fading.masses().to_vec(),
        lambda_e: config.lambda_e,
        lambda_f: config.lambda_f,
        rate: config.rate,
        config_hash: config.hash(),
    };
    Ok(ValueTable {
        header,
        fading: config.fading.clone(),
        values,
        policy,
    })
}

/// Maximizes `δ·rate((e − x)/δ, h) + V(x)` over the energy `x ∈ [0, e]` kept
/// for the next step. The objective is concave, so a coarse scan brackets the
/// maximizer and golden-section search refines it.
fn golden_action(
    config: &DpConfig,
    v_row: &[f64],
    spacing: f64,
    e: f64,
    h: f64,
    n: usize,
) -> (f64, f64) {
    let delta = config.delta;
    let objective = |x: f64| {
        let p = ((e - x) / delta).max(0.0);
        delta * config.rate.rate(p, h) + interpolate(v_row, spacing, x.clamp(0.0, e))
    };
    if e <= 0.0 {
        return (objective(0.0), 0.0);
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for m in 0..n {
        let x = e * m as f64 / (n - 1) as f64;
        let v = objective(x);
        if v > best.0 {
            best = (v, m);
        }
    }
    let step = e / (n - 1) as f64;
    let mut a = (best.1 as f64 - 1.0).max(0.0) * step;
    let mut b = ((best.1 as f64 + 1.0) * step).min(e);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    let tol = 1e-12 * e.max(1.0);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = objective(d);
        }
    }
    let x_grid = best.1 as f64 * step;
    let mut winner = (best.0, x_grid);
    for x in [0.5 * (a + b), e, 0.0] {
        let v = objective(x);
        if v > winner.0 {
            winner = (v, x);
        }
    }
    (winner.0, ((e - winner.1) / delta).max(0.0))
}

/// Same maximization for the cell at energy grid point `i`.
///
/// Between grid points `V` is linear with slope `s`, where the stationary
/// point is `p = c/s − 1/h` with `c` the rate's nats-to-units factor. The
/// derivative of the objective in `x` decreases across segments, so the
/// segment holding the maximizer is found by bisection.
fn exact_action(config: &DpConfig, v_row: &[f64], spacing: f64, i: usize, h: f64) -> (f64, f64) {
    let delta = config.delta;
    let e = i as f64 * spacing;
    let c = config.rate.scale / config.rate.log_base.ln();
    let objective = |x: f64| {
        let p = ((e - x) / delta).max(0.0);
        delta * config.rate.rate(p, h) + interpolate(v_row, spacing, x.clamp(0.0, e))
    };
    if i == 0 {
        return (v_row[0], 0.0);
    }
    let slope = |j: usize| (v_row[j + 1] - v_row[j]) / spacing;
    // Derivative just left of x (taken inside segment j).
    let derivative = |j: usize, x: f64| slope(j) - c * h / (1.0 + h * (e - x) / delta);
    // First segment whose right end already has a nonpositive derivative.
    let (mut lo, mut hi) = (0, i);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if derivative(mid, (mid + 1) as f64 * spacing) <= 0.0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let x = if lo == i {
        e
    } else {
        let left = lo as f64 * spacing;
        if derivative(lo, left) <= 0.0 {
            left
        } else {
            let s = slope(lo);
            let stationary = e - delta * (c / s - 1.0 / h);
            stationary.clamp(left, left + spacing)
        }
    };
    (objective(x), (e - x) / delta)
}
