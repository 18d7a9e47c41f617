//! Event timelines and power-schedule feasibility.
//!
//! A realization is a horizon `T`, a battery capacity, the energy present at
//! `t = 0`, a list of energy arrivals and a list of fade changes. The union of
//! all event instants partitions `[0, T)` into epochs; each epoch has one fade
//! level and the energy injected at its start.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default slack tolerance (joules) for feasibility verdicts.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyArrival {
    pub time: f64,
    pub amount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadeChange {
    pub time: f64,
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epoch {
    pub start: f64,
    pub length: f64,
    pub fade: f64,
    /// Energy injected at the start of the epoch (`E_0` for the first one).
    pub injected: f64,
    /// Whether the epoch starts at an energy arrival (a wall with a tap).
    pub arrival: bool,
}

impl Epoch {
    pub fn end(&self) -> f64 {
        self.start + self.length
    }

    /// Inverse fade level, the "floor" the water sits on.
    pub fn base(&self) -> f64 {
        1.0 / self.fade
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TimelineError {
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("battery capacity must be positive, got {0}")]
    NonPositiveCapacity(f64),
    #[error("initial energy must be non-negative and finite, got {0}")]
    InvalidInitialEnergy(f64),
    #[error("arrival of {amount} J at t={time} exceeds battery capacity {e_max} J")]
    ArrivalExceedsCapacity { time: f64, amount: f64, e_max: f64 },
    #[error("energy arrival at t={time} must carry a positive finite amount, got {amount}")]
    NonPositiveAmount { time: f64, amount: f64 },
    #[error("fade level at t={time} must be positive and finite, got {level}")]
    NonPositiveFade { time: f64, level: f64 },
    #[error("two {kind} events share time t={time}")]
    DuplicateEventTime { kind: &'static str, time: f64 },
    #[error("{kind} event at t={time} lies outside [0, {horizon})")]
    EventBeyondHorizon {
        kind: &'static str,
        time: f64,
        horizon: f64,
    },
    #[error("the fade list must start with a change at t=0")]
    MissingInitialFade,
    #[error("schedule has {schedule} powers but the timeline has {epochs} epochs")]
    LengthMismatch { schedule: usize, epochs: usize },
    #[error("power {power} in epoch {epoch} is negative or not finite")]
    InvalidPower { epoch: usize, power: f64 },
    #[error("scenario file: {0}")]
    Io(String),
}

/// An immutable realization of energy arrivals and fade changes over `[0, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTimeline {
    horizon: f64,
    e_max: f64,
    initial_energy: f64,
    arrivals: Vec<EnergyArrival>,
    fades: Vec<FadeChange>,
    epochs: Vec<Epoch>,
}

impl EventTimeline {
    /// Builds a timeline, sorting both event lists and merging them into epochs.
    ///
    /// An arrival and a fade change at the same instant produce a single epoch
    /// boundary. An arrival at `t = 0` is added to the initial energy.
    pub fn new(
        horizon: f64,
        e_max: f64,
        initial_energy: f64,
        mut arrivals: Vec<EnergyArrival>,
        mut fades: Vec<FadeChange>,
    ) -> Result<Self, TimelineError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(TimelineError::NonPositiveHorizon(horizon));
        }
        if !(e_max > 0.0) || e_max.is_nan() {
            return Err(TimelineError::NonPositiveCapacity(e_max));
        }
        if !(initial_energy >= 0.0 && initial_energy.is_finite()) {
            return Err(TimelineError::InvalidInitialEnergy(initial_energy));
        }
        for a in &arrivals {
            if !(a.amount > 0.0 && a.amount.is_finite()) {
                return Err(TimelineError::NonPositiveAmount {
                    time: a.time,
                    amount: a.amount,
                });
            }
            if a.amount > e_max {
                return Err(TimelineError::ArrivalExceedsCapacity {
                    time: a.time,
                    amount: a.amount,
                    e_max,
                });
            }
            check_time("arrival", a.time, horizon)?;
        }
        for f in &fades {
            if !(f.level > 0.0 && f.level.is_finite()) {
                return Err(TimelineError::NonPositiveFade {
                    time: f.time,
                    level: f.level,
                });
            }
            check_time("fade", f.time, horizon)?;
        }
        arrivals.sort_by(|a, b| a.time.total_cmp(&b.time));
        fades.sort_by(|a, b| a.time.total_cmp(&b.time));
        if let Some(w) = arrivals.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(TimelineError::DuplicateEventTime {
                kind: "arrival",
                time: w[0].time,
            });
        }
        if let Some(w) = fades.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(TimelineError::DuplicateEventTime {
                kind: "fade",
                time: w[0].time,
            });
        }
        if fades.first().map(|f| f.time) != Some(0.0) {
            return Err(TimelineError::MissingInitialFade);
        }

        let epochs = merge_epochs(horizon, initial_energy, &arrivals, &fades);
        Ok(EventTimeline {
            horizon,
            e_max,
            initial_energy,
            arrivals,
            fades,
            epochs,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn e_max(&self) -> f64 {
        self.e_max
    }

    pub fn initial_energy(&self) -> f64 {
        self.initial_energy
    }

    pub fn arrivals(&self) -> &[EnergyArrival] {
        &self.arrivals
    }

    pub fn fades(&self) -> &[FadeChange] {
        &self.fades
    }

    pub fn epochs(&self) -> &[Epoch] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn total_energy(&self) -> f64 {
        self.epochs.iter().map(|e| e.injected).sum()
    }

    /// Cumulative injected energy through epoch `i` inclusive, for every `i`.
    pub fn cumulative_injection(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .scan(0.0, |acc, e| {
                *acc += e.injected;
                Some(*acc)
            })
            .collect()
    }

    /// Same realization with a different capacity.
    pub fn with_e_max(&self, e_max: f64) -> Result<Self, TimelineError> {
        Self::new(
            self.horizon,
            e_max,
            self.initial_energy,
            self.arrivals.clone(),
            self.fades.clone(),
        )
    }

    /// Same events restricted to `[0, t)`; events at or after `t` are dropped.
    pub fn truncated(&self, t: f64) -> Result<Self, TimelineError> {
        Self::new(
            t,
            self.e_max,
            self.initial_energy,
            self.arrivals
                .iter()
                .copied()
                .filter(|a| a.time < t)
                .collect(),
            self.fades.iter().copied().filter(|f| f.time < t).collect(),
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self, TimelineError> {
        let file: ScenarioFile =
            serde_json::from_str(s).map_err(|e| TimelineError::Io(e.to_string()))?;
        file.into_timeline()
    }

    pub fn from_json_file(path: &Path) -> Result<Self, TimelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TimelineError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_scenario_file(&self) -> ScenarioFile {
        ScenarioFile {
            horizon_s: self.horizon,
            e_max_j: self.e_max.is_finite().then_some(self.e_max),
            initial_energy_j: self.initial_energy,
            arrivals: self
                .arrivals
                .iter()
                .map(|a| ArrivalRecord {
                    t_s: a.time,
                    e_j: a.amount,
                })
                .collect(),
            fades: self
                .fades
                .iter()
                .map(|f| FadeRecord {
                    t_s: f.time,
                    h: f.level,
                })
                .collect(),
        }
    }
}

fn check_time(kind: &'static str, time: f64, horizon: f64) -> Result<(), TimelineError> {
    if time >= 0.0 && time < horizon {
        Ok(())
    } else {
        Err(TimelineError::EventBeyondHorizon {
            kind,
            time,
            horizon,
        })
    }
}

fn merge_epochs(
    horizon: f64,
    initial_energy: f64,
    arrivals: &[EnergyArrival],
    fades: &[FadeChange],
) -> Vec<Epoch> {
    let mut epochs: Vec<Epoch> = Vec::with_capacity(arrivals.len() + fades.len());
    let (mut ia, mut jf) = (0, 0);
    let mut fade = fades[0].level;
    while ia < arrivals.len() || jf < fades.len() {
        let ta = arrivals.get(ia).map_or(f64::INFINITY, |a| a.time);
        let tf = fades.get(jf).map_or(f64::INFINITY, |f| f.time);
        let t = ta.min(tf);
        let mut injected = 0.0;
        let mut arrival = false;
        if ta == t {
            injected = arrivals[ia].amount;
            arrival = true;
            ia += 1;
        }
        if tf == t {
            fade = fades[jf].level;
            jf += 1;
        }
        if t == 0.0 {
            injected += initial_energy;
            arrival = false;
        }
        match epochs.last_mut() {
            Some(prev) => prev.length = t - prev.start,
            None => debug_assert_eq!(t, 0.0),
        }
        epochs.push(Epoch {
            start: t,
            length: 0.0,
            fade,
            injected,
            arrival,
        });
    }
    let last = epochs.last_mut().expect("fade list holds t=0");
    last.length = horizon - last.start;
    epochs
}

/// Constant transmit power per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSchedule {
    powers: Vec<f64>,
}

impl PowerSchedule {
    pub fn new(powers: Vec<f64>) -> Result<Self, TimelineError> {
        if let Some((epoch, &power)) = powers
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= 0.0 && p.is_finite()))
        {
            return Err(TimelineError::InvalidPower { epoch, power });
        }
        Ok(PowerSchedule { powers })
    }

    pub fn zeros(n: usize) -> Self {
        PowerSchedule {
            powers: vec![0.0; n],
        }
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }

    /// `p_i + 1/h_i` for epochs with positive power; `None` where the epoch is silent.
    pub fn water_levels(&self, timeline: &EventTimeline) -> Vec<Option<f64>> {
        self.powers
            .iter()
            .zip(timeline.epochs())
            .map(|(&p, e)| (p > 0.0).then(|| p + e.base()))
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        PowerSchedule {
            powers: self.powers.iter().map(|p| p * factor).collect(),
        }
    }
}

/// Prefix-wise energy accounting of a schedule against a timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `Σ_{i≤ℓ} L_i p_i`.
    pub consumed: Vec<f64>,
    /// `Σ_{i≤ℓ} E_in(i)`.
    pub injected: Vec<f64>,
    /// Injected minus consumed at the end of epoch ℓ.
    pub causality_slack: Vec<f64>,
    /// `E_max` minus the battery level right after the arrival that opens epoch
    /// ℓ+1; `None` when no arrival opens it.
    pub capacity_slack: Vec<Option<f64>>,
    pub tol: f64,
    pub causality_ok: bool,
    pub capacity_ok: bool,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.causality_ok && self.capacity_ok
    }

    /// First epoch index whose causality prefix is violated.
    pub fn first_causality_violation(&self) -> Option<usize> {
        self.causality_slack.iter().position(|s| *s < -self.tol)
    }

    pub fn first_capacity_violation(&self) -> Option<usize> {
        self.capacity_slack
            .iter()
            .position(|s| s.is_some_and(|s| s < -self.tol))
    }
}

pub fn check_feasibility(
    timeline: &EventTimeline,
    schedule: &PowerSchedule,
) -> Result<FeasibilityReport, TimelineError> {
    check_feasibility_with_tol(timeline, schedule, FEASIBILITY_TOL)
}

pub fn check_feasibility_with_tol(
    timeline: &EventTimeline,
    schedule: &PowerSchedule,
    tol: f64,
) -> Result<FeasibilityReport, TimelineError> {
    let epochs = timeline.epochs();
    if schedule.len() != epochs.len() {
        return Err(TimelineError::LengthMismatch {
            schedule: schedule.len(),
            epochs: epochs.len(),
        });
    }
    let n = epochs.len();
    let mut consumed = Vec::with_capacity(n);
    let mut injected = Vec::with_capacity(n);
    let (mut c, mut s) = (0.0, 0.0);
    for (e, p) in epochs.iter().zip(schedule.powers()) {
        c += e.length * p;
        s += e.injected;
        consumed.push(c);
        injected.push(s);
    }
    let causality_slack: Vec<f64> = injected.iter().zip(&consumed).map(|(s, c)| s - c).collect();
    let capacity_slack: Vec<Option<f64>> = (0..n)
        .map(|l| {
            epochs.get(l + 1).filter(|next| next.arrival).map(|next| {
                let battery = causality_slack[l] + next.injected;
                timeline.e_max() - battery
            })
        })
        .collect();
    let causality_ok = causality_slack.iter().all(|s| *s >= -tol);
    let capacity_ok = capacity_slack.iter().flatten().all(|s| *s >= -tol);
    Ok(FeasibilityReport {
        consumed,
        injected,
        causality_slack,
        capacity_slack,
        tol,
        causality_ok,
        capacity_ok,
    })
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub horizon_s: f64,
    /// `null` means an unbounded battery.
    pub e_max_j: Option<f64>,
    pub initial_energy_j: f64,
    pub arrivals: Vec<ArrivalRecord>,
    pub fades: Vec<FadeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalRecord {
    pub t_s: f64,
    pub e_j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FadeRecord {
    pub t_s: f64,
    pub h: f64,
}

impl ScenarioFile {
    pub fn into_timeline(self) -> Result<EventTimeline, TimelineError> {
        EventTimeline::new(
            self.horizon_s,
            self.e_max_j.unwrap_or(f64::INFINITY),
            self.initial_energy_j,
            self.arrivals
                .iter()
                .map(|a| EnergyArrival {
                    time: a.t_s,
                    amount: a.e_j,
                })
                .collect(),
            self.fades
                .iter()
                .map(|f| FadeChange {
                    time: f.t_s,
                    level: f.h,
                })
                .collect(),
        )
    }
}
