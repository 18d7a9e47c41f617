//! Offline throughput maximization.
//!
//! [`waterfill`] runs directional water-filling: walls sit at energy arrivals,
//! each with a right-permeable tap whose throughput is capped by the battery
//! headroom `E_max − E_in` at that wall, and fade changes only move the floor
//! (`1/h_i`) the water rests on. [`oracle_solve`] solves the same convex program
//! with a generic log-barrier Newton method and is used to cross-check it.
//! [`verify_kkt`] inspects a schedule's tightness pattern and water levels.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::rate::RateModel;
use crate::timeline::{
    check_feasibility_with_tol, Epoch, EventTimeline, PowerSchedule, TimelineError,
};

#[derive(Debug, Error, PartialEq)]
pub enum OfflineError {
    #[error("no energy is ever injected")]
    EmptyEnergy,
    #[error("oracle did not converge within {0} Newton iterations")]
    NoConvergence(usize),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

/// Throughput of a schedule: `Σ_i L_i · rate(p_i, h_i)`.
pub fn throughput(timeline: &EventTimeline, schedule: &PowerSchedule, rate: &RateModel) -> f64 {
    timeline
        .epochs()
        .iter()
        .zip(schedule.powers())
        .map(|(e, &p)| e.length * rate.rate(p, e.fade))
        .sum()
}

/// Water level that puts `energy` joules into `epochs`, i.e. the `ν` solving
/// `Σ L_i (ν − 1/h_i)^+ = energy`, by flooding the floors in increasing order.
/// Returns the lowest floor when `energy` is zero.
pub(crate) fn flood_level<'a>(epochs: impl IntoIterator<Item = &'a Epoch>, energy: f64) -> f64 {
    let mut floors: Vec<(f64, f64)> = epochs.into_iter().map(|e| (e.base(), e.length)).collect();
    floors.sort_by(|a, b| a.0.total_cmp(&b.0));
    flood_sorted(&floors, energy)
}

fn flood_sorted(floors: &[(f64, f64)], energy: f64) -> f64 {
    let (mut width, mut weighted) = (0.0, 0.0);
    for (k, &(base, len)) in floors.iter().enumerate() {
        width += len;
        weighted += len * base;
        let level = (energy + weighted) / width;
        if floors.get(k + 1).is_none_or(|next| level <= next.0) {
            return level;
        }
    }
    floors.first().map_or(0.0, |f| f.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapTransfer {
    /// Index of the epoch the wall opens.
    pub epoch: usize,
    pub time: f64,
    /// Energy carried across the wall.
    pub amount: f64,
    /// `E_max − E_in` at the wall.
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterfillSolution {
    pub schedule: PowerSchedule,
    /// Water level of the block each epoch belongs to.
    pub water_levels: Vec<f64>,
    pub tap_transfers: Vec<TapTransfer>,
    pub objective_bits: f64,
    pub rate: RateModel,
}

/// Directional water-filling in theory mode (`1/2 log2`).
pub fn waterfill(timeline: &EventTimeline) -> Result<WaterfillSolution, OfflineError> {
    waterfill_with_rate(timeline, &RateModel::THEORY)
}

/// Directional water-filling; the rate model only affects the reported objective.
///
/// The water is released block by block from the left. From the current
/// block start, every later epoch `ℓ` bounds the common level of the block:
/// causality (`C_ℓ ≤ S_ℓ`) bounds it from above and a tap at capacity bounds
/// it from below. The block grows until these bounds cross; the binding bound
/// then fixes the level and the block ends where it was attained, with the
/// corresponding constraint tight.
pub fn waterfill_with_rate(
    timeline: &EventTimeline,
    rate: &RateModel,
) -> Result<WaterfillSolution, OfflineError> {
    let epochs = timeline.epochs();
    let n = epochs.len();
    let total = timeline.total_energy();
    if total <= 0.0 {
        return Err(OfflineError::EmptyEnergy);
    }
    let injected = timeline.cumulative_injection();
    let e_max = timeline.e_max();
    // Lower bound on consumption through epoch ℓ from the tap opening ℓ+1.
    let lower: Vec<f64> = (0..n)
        .map(|l| match epochs.get(l + 1) {
            Some(next) if next.arrival => injected[l + 1] - e_max,
            _ => f64::NEG_INFINITY,
        })
        .collect();

    let mut levels = vec![0.0; n];
    let mut start = 0;
    let mut consumed = 0.0;
    while start < n {
        let (end, level) = release_block(epochs, &injected, &lower, start, consumed);
        for l in start..=end {
            levels[l] = level;
            consumed += epochs[l].length * (level - epochs[l].base()).max(0.0);
        }
        start = end + 1;
    }

    let powers: Vec<f64> = epochs
        .iter()
        .zip(&levels)
        .map(|(e, &nu)| (nu - e.base()).max(0.0))
        .collect();
    let schedule = PowerSchedule::new(powers)?;

    let mut tap_transfers = Vec::new();
    let mut spent = 0.0;
    for (l, e) in epochs.iter().enumerate() {
        if e.arrival {
            tap_transfers.push(TapTransfer {
                epoch: l,
                time: e.start,
                amount: (injected[l - 1] - spent).max(0.0),
                cap: e_max - e.injected,
            });
        }
        spent += e.length * schedule.powers()[l];
    }
    let objective_bits = throughput(timeline, &schedule, rate);
    Ok(WaterfillSolution {
        schedule,
        water_levels: levels,
        tap_transfers,
        objective_bits,
        rate: *rate,
    })
}

/// Finds the last epoch of the block starting at `start` and its level.
fn release_block(
    epochs: &[Epoch],
    injected: &[f64],
    lower: &[f64],
    start: usize,
    consumed: f64,
) -> (usize, f64) {
    let n = epochs.len();
    // (level, epoch index) of the tightest upper and lower bounds so far.
    let mut up = (f64::INFINITY, start);
    let mut lo = (f64::NEG_INFINITY, start);
    let mut floors: Vec<(f64, f64)> = Vec::with_capacity(n - start);
    for l in start..n {
        let e = &epochs[l];
        let pos = floors.partition_point(|f| f.0 <= e.base());
        floors.insert(pos, (e.base(), e.length));

        let room = injected[l] - consumed;
        let (bound_up, bound_lo) = if l + 1 == n {
            let nu = flood_sorted(&floors, room.max(0.0));
            (nu, if room > 0.0 { nu } else { f64::NEG_INFINITY })
        } else {
            let need = lower[l] - consumed;
            let bound_lo = if need > 0.0 {
                flood_sorted(&floors, need)
            } else {
                f64::NEG_INFINITY
            };
            (flood_sorted(&floors, room.max(0.0)), bound_lo)
        };

        if bound_up < lo.0 {
            return (lo.1, lo.0);
        }
        if bound_lo > up.0 {
            return (up.1, up.0);
        }
        if bound_up <= up.0 {
            up = (bound_up, l);
        }
        if bound_lo >= lo.0 {
            lo = (bound_lo, l);
        }
        if l + 1 == n {
            return (l, bound_up);
        }
    }
    unreachable!("loop returns at the last epoch")
}

/// Maximizes `Σ L_i ln(1 + h_i p_i)` with a primal log-barrier Newton method.
///
/// Prefix constraints whose feasible range has collapsed to a point pin the
/// cumulative consumption there; the problem then splits into independent
/// blocks, each started from a strictly interior point. `tol` bounds the
/// duality gap (natural-log units) of every block.
pub fn oracle_solve(timeline: &EventTimeline, tol: f64) -> Result<PowerSchedule, OfflineError> {
    let epochs = timeline.epochs();
    let n = epochs.len();
    let injected = timeline.cumulative_injection();
    let total = injected[n - 1];
    if total <= 0.0 {
        return Err(OfflineError::EmptyEnergy);
    }
    let e_max = timeline.e_max();
    // Bounds on C_ℓ, the cumulative consumption through epoch ℓ (ℓ = 1..n).
    let mut upper = vec![0.0; n + 1];
    let mut lower = vec![0.0; n + 1];
    for l in 1..=n {
        upper[l] = if l == n { total } else { injected[l - 1] };
        lower[l] = match epochs.get(l) {
            _ if l == n => total,
            Some(next) if next.arrival => injected[l] - e_max,
            _ => f64::NEG_INFINITY,
        };
    }
    let mut lo_eff = vec![0.0f64; n + 1];
    let mut up_eff = vec![0.0f64; n + 1];
    for l in 1..=n {
        lo_eff[l] = lo_eff[l - 1].max(lower[l]);
    }
    up_eff[n] = total;
    for l in (0..n).rev() {
        up_eff[l] = up_eff[l + 1].min(upper[l]);
    }
    up_eff[0] = 0.0;
    let pin_tol = 1e-12 * total.max(1.0);
    let pins: Vec<usize> = (0..=n)
        .filter(|&l| l == 0 || l == n || up_eff[l] - lo_eff[l] <= pin_tol)
        .collect();

    let mut energy = vec![0.0; n];
    for w in pins.windows(2) {
        let (a, b) = (w[0], w[1]);
        let c_a = if a == 0 {
            0.0
        } else {
            0.5 * (lo_eff[a] + up_eff[a])
        };
        let c_b = if b == n {
            total
        } else {
            0.5 * (lo_eff[b] + up_eff[b])
        };
        let block = BarrierBlock {
            epochs: &epochs[a..b],
            upper: &upper[a + 1..b],
            lower: &lower[a + 1..b],
            offset: c_a,
            energy: (c_b - c_a).max(0.0),
        };
        let x0: Vec<f64> = (a + 1..=b)
            .map(|l| {
                let theta = (l - a) as f64 / (b - a) as f64;
                if l == b {
                    c_b
                } else {
                    (1.0 - theta) * lo_eff[l].max(c_a) + theta * up_eff[l].min(c_b)
                }
            })
            .scan(c_a, |prev, c| {
                let x = c - *prev;
                *prev = c;
                Some(x)
            })
            .collect();
        let x = block.solve(x0, tol)?;
        energy[a..b].copy_from_slice(&x);
    }
    let powers = epochs
        .iter()
        .zip(&energy)
        .map(|(e, x)| (x / e.length).max(0.0))
        .collect();
    Ok(PowerSchedule::new(powers)?)
}

struct BarrierBlock<'a> {
    epochs: &'a [Epoch],
    /// Bounds on `C_ℓ` for the interior prefixes of the block.
    upper: &'a [f64],
    lower: &'a [f64],
    offset: f64,
    energy: f64,
}

const MAX_NEWTON: usize = 5000;
const MAX_CENTERING: usize = 100;

impl BarrierBlock<'_> {
    fn objective(&self, x: &[f64]) -> f64 {
        self.epochs
            .iter()
            .zip(x)
            .map(|(e, xi)| e.length * (e.fade * xi / e.length).ln_1p())
            .sum()
    }

    /// Barrier objective `−t f(x) − Σ ln(slack)`, or `None` outside the domain.
    fn phi(&self, x: &[f64], t: f64) -> Option<f64> {
        let mut val = -t * self.objective(x);
        let mut c = self.offset;
        for (k, &xi) in x.iter().enumerate() {
            if xi <= 0.0 {
                return None;
            }
            val -= xi.ln();
            c += xi;
            if k < self.upper.len() {
                let su = self.upper[k] - c;
                if su <= 0.0 {
                    return None;
                }
                if su.is_finite() {
                    val -= su.ln();
                }
                let sl = c - self.lower[k];
                if sl <= 0.0 {
                    return None;
                }
                if sl.is_finite() {
                    val -= sl.ln();
                }
            }
        }
        Some(val)
    }

    fn constraint_count(&self) -> usize {
        self.epochs.len()
            + self.upper.iter().filter(|u| u.is_finite()).count()
            + self.lower.iter().filter(|l| l.is_finite()).count()
    }

    fn solve(&self, mut x: Vec<f64>, tol: f64) -> Result<Vec<f64>, OfflineError> {
        let m = x.len();
        if m == 1 || self.energy <= 0.0 {
            return Ok(if m == 1 {
                vec![self.energy]
            } else {
                vec![0.0; m]
            });
        }
        let constraints = self.constraint_count() as f64;
        let mut t = 1.0 / self.energy.max(1e-12);
        let mut iterations = 0;
        loop {
            for _ in 0..MAX_CENTERING {
                iterations += 1;
                if iterations > MAX_NEWTON {
                    return Err(OfflineError::NoConvergence(MAX_NEWTON));
                }
                let (grad, hess) = self.derivatives(&x, t);
                // Equality-constrained Newton step: Σ dx = 0.
                let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
                let mut rhs = DVector::<f64>::zeros(m + 1);
                for i in 0..m {
                    for j in 0..m {
                        kkt[(i, j)] = hess[(i, j)];
                    }
                    kkt[(i, m)] = 1.0;
                    kkt[(m, i)] = 1.0;
                    rhs[i] = -grad[i];
                }
                let sol = kkt
                    .lu()
                    .solve(&rhs)
                    .ok_or(OfflineError::NoConvergence(iterations))?;
                let dx: Vec<f64> = (0..m).map(|i| sol[i]).collect();
                let decrement: f64 = -dx.iter().zip(grad.iter()).map(|(d, g)| d * g).sum::<f64>();
                let resolution = 1e-14 * self.energy;
                if decrement / 2.0 <= 1e-12 || dx.iter().all(|d| d.abs() <= resolution) {
                    break;
                }
                let phi0 = self.phi(&x, t).expect("iterate stays interior");
                let mut step = 1.0;
                let mut moved = false;
                while step > 1e-16 {
                    let trial: Vec<f64> = x.iter().zip(&dx).map(|(xi, d)| xi + step * d).collect();
                    if trial == x {
                        break;
                    }
                    if let Some(phi) = self.phi(&trial, t) {
                        if phi <= phi0 - 0.25 * step * decrement {
                            x = trial;
                            moved = true;
                            break;
                        }
                    }
                    step *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            if constraints / t < tol {
                return Ok(x);
            }
            t *= 8.0;
        }
    }

    fn derivatives(&self, x: &[f64], t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let m = x.len();
        let mut grad = DVector::<f64>::zeros(m);
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for (i, (e, &xi)) in self.epochs.iter().zip(x).enumerate() {
            let denom = e.length + e.fade * xi;
            grad[i] += -t * e.length * e.fade / denom - 1.0 / xi;
            hess[(i, i)] += t * e.length * e.fade * e.fade / (denom * denom) + 1.0 / (xi * xi);
        }
        let mut c = self.offset;
        for k in 0..self.upper.len() {
            c += x[k];
            // -ln(u - C_k) and -ln(C_k - l) with C_k = offset + Σ_{i≤k} x_i.
            let mut g = 0.0;
            let mut h = 0.0;
            if self.upper[k].is_finite() {
                let s = self.upper[k] - c;
                g += 1.0 / s;
                h += 1.0 / (s * s);
            }
            if self.lower[k].is_finite() {
                let s = c - self.lower[k];
                g -= 1.0 / s;
                h += 1.0 / (s * s);
            }
            for i in 0..=k {
                grad[i] += g;
                for j in 0..=k {
                    hess[(i, j)] += h;
                }
            }
        }
        (grad, hess)
    }
}

/// Direction of the water level across a boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelChange {
    Up,
    Down,
    Flat,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentReport {
    pub first_epoch: usize,
    pub last_epoch: usize,
    /// Common water level, or `None` when every epoch in the segment is silent.
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WallReport {
    /// Boundary between epoch `after_epoch` and the next one.
    pub after_epoch: usize,
    pub arrival: bool,
    pub causality_tight: bool,
    pub capacity_tight: bool,
    pub change: LevelChange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktCertificate {
    pub feasible: bool,
    pub terminal_tight: bool,
    pub segments: Vec<SegmentReport>,
    pub walls: Vec<WallReport>,
    pub violations: Vec<String>,
    pub optimal: bool,
}

/// Checks the structural optimality conditions of a schedule.
///
/// Boundaries where neither the causality nor the capacity constraint is tight
/// must not separate different water levels. Across a causality-tight boundary
/// the level may only rise, across a capacity-tight one it may only fall.
/// Silent epochs must have their floor `1/h_i` at or above the segment level.
pub fn verify_kkt(
    timeline: &EventTimeline,
    schedule: &PowerSchedule,
    tol: f64,
) -> Result<KktCertificate, OfflineError> {
    let report = check_feasibility_with_tol(timeline, schedule, tol)?;
    let epochs = timeline.epochs();
    let n = epochs.len();
    let mut violations = Vec::new();
    if !report.causality_ok {
        violations.push(format!(
            "causality violated at epoch {}",
            report.first_causality_violation().unwrap_or(0)
        ));
    }
    if !report.capacity_ok {
        violations.push(format!(
            "tap transfer above E_max - E_in at the wall after epoch {}",
            report.first_capacity_violation().unwrap_or(0)
        ));
    }
    let terminal_tight = report.causality_slack[n - 1].abs() <= tol;
    if !terminal_tight {
        violations.push(format!(
            "terminal constraint slack {:.3e} J left unused",
            report.causality_slack[n - 1]
        ));
    }

    let causality_tight: Vec<bool> = report.causality_slack.iter().map(|s| *s <= tol).collect();
    let capacity_tight: Vec<bool> = report
        .capacity_slack
        .iter()
        .map(|s| s.is_some_and(|s| s <= tol))
        .collect();

    // Level intervals per segment: a pinned level, or [0, lowest floor] when silent.
    let mut segments = Vec::new();
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut first = 0;
    for l in 0..n {
        let closes = l + 1 == n || causality_tight[l] || capacity_tight[l];
        if !closes {
            continue;
        }
        let range = first..=l;
        let active: Vec<f64> = range
            .clone()
            .filter(|&i| schedule.powers()[i] > 0.0)
            .map(|i| schedule.powers()[i] + epochs[i].base())
            .collect();
        let level = if active.is_empty() {
            None
        } else {
            let lo = active.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = active.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > tol * hi.max(1.0) {
                violations.push(format!(
                    "water levels differ by {:.3e} inside segment {first}..={l}",
                    hi - lo
                ));
            }
            Some(active.iter().sum::<f64>() / active.len() as f64)
        };
        let floor = range
            .clone()
            .map(|i| epochs[i].base())
            .fold(f64::INFINITY, f64::min);
        if let Some(nu) = level {
            for i in range.clone() {
                if schedule.powers()[i] == 0.0 && epochs[i].base() < nu - tol * nu.max(1.0) {
                    violations.push(format!(
                        "epoch {i} is silent although its floor {:.6} lies below level {nu:.6}",
                        epochs[i].base()
                    ));
                }
            }
        }
        intervals.push(level.map_or((0.0, floor), |nu| (nu, nu)));
        segments.push(SegmentReport {
            first_epoch: first,
            last_epoch: l,
            level,
        });
        first = l + 1;
    }

    let mut walls = Vec::new();
    for (k, seg) in segments
        .iter()
        .enumerate()
        .take(segments.len().saturating_sub(1))
    {
        let l = seg.last_epoch;
        let (a, b) = (intervals[k], intervals[k + 1]);
        let slack = tol * a.1.max(b.1).max(1.0);
        let change = match (seg.level, segments[k + 1].level) {
            (Some(x), Some(y)) if (y - x).abs() <= slack => LevelChange::Flat,
            (Some(x), Some(y)) if y > x => LevelChange::Up,
            (Some(_), Some(_)) => LevelChange::Down,
            _ => LevelChange::Undetermined,
        };
        let (ct, et) = (causality_tight[l], capacity_tight[l]);
        // With both tight (E_in = E_max) the level may move either way.
        if ct && !et && b.1 < a.0 - slack {
            violations.push(format!(
                "level falls across causality-tight boundary after epoch {l}"
            ));
        }
        if et && !ct && b.0 > a.1 + slack {
            violations.push(format!(
                "level rises across capacity-tight boundary after epoch {l}"
            ));
        }
        walls.push(WallReport {
            after_epoch: l,
            arrival: epochs[l + 1].arrival,
            causality_tight: ct,
            capacity_tight: et,
            change,
        });
    }

    let feasible = report.feasible();
    Ok(KktCertificate {
        feasible,
        terminal_tight,
        segments,
        walls,
        optimal: violations.is_empty(),
        violations,
    })
}
