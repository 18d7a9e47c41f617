//! Monte Carlo evaluation of causal policies against the offline optimum.
//!
//! Realization `i` of a run draws from `ChaCha8Rng::seed_from_u64(seed)` on
//! stream `i`, so every policy sees the same events, the result does not
//! depend on the number of worker threads, and the same seed reproduces the
//! same realizations at every point of a sweep.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use thiserror::Error;

use crate::fading::{db_to_linear, EnergyModel, FadingError, FadingModel};
use crate::heuristics::{
    make_constant_water, make_energy_adaptive, make_fixed_power, make_time_energy_adaptive,
    CausalPolicy, EventTrigger, PolicyError, PolicySpec, PolicyState,
};
use crate::offline::{flood_level, waterfill_with_rate, OfflineError};
use crate::online_dp::{
    build_value_function, ActionSearch, DpConfig, DpError, ValueTable, DEFAULT_ENERGY_GRID,
    DEFAULT_ENERGY_POINTS, DEFAULT_FADE_POINTS, DEFAULT_MEMORY_CAP,
};
use crate::rate::RateModel;
use crate::timeline::{EnergyArrival, EventTimeline, FadeChange, TimelineError};

pub const THREADS_ENV: &str = "EHSCHED_THREADS";
pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("value table (delta {table_delta}, horizon {table_horizon}, E_max {table_e_max}) does not match the run (delta {delta}, horizon {horizon}, E_max {e_max})")]
    IncompatibleTable {
        table_delta: f64,
        table_horizon: f64,
        table_e_max: f64,
        delta: f64,
        horizon: f64,
        e_max: f64,
    },
    #[error("policy dp needs a value table")]
    MissingTable,
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Fading(#[from] FadingError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Offline(#[from] OfflineError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub horizon: f64,
    pub e_max: f64,
    pub lambda_e: f64,
    pub lambda_f: f64,
    pub energy: EnergyModel,
    pub fading: FadingModel,
    pub rate: RateModel,
    pub seed: u64,
    pub n_realizations: usize,
    /// Step of the table policy.
    pub delta: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::InvalidConfig(msg));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.e_max > 0.0) {
            return bad(format!("E_max must be positive, got {}", self.e_max));
        }
        if self.energy.max_amount() > self.e_max {
            return bad(format!(
                "largest arrival {} exceeds E_max {}",
                self.energy.max_amount(),
                self.e_max
            ));
        }
        for (name, l) in [("lambda_e", self.lambda_e), ("lambda_f", self.lambda_f)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {l}"));
            }
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        Ok(())
    }

    /// Average recharge rate `λ_e · E[packet]`.
    pub fn mean_recharge(&self) -> f64 {
        self.lambda_e * self.energy.mean()
    }

    /// Table configuration matching this scenario.
    pub fn dp_config(
        &self,
        energy_grid: usize,
        fade_points: usize,
    ) -> Result<DpConfig, HarnessError> {
        Ok(DpConfig {
            delta: self.delta,
            horizon: self.horizon,
            e_max: self.e_max,
            energy_grid,
            fading: self.fading.discretize(fade_points)?,
            lambda_e: self.lambda_e,
            lambda_f: self.lambda_f,
            energy_model: Some(self.energy),
            energy_points: DEFAULT_ENERGY_POINTS,
            rate: self.rate,
            action_search: ActionSearch::Exact,
            memory_cap_bytes: DEFAULT_MEMORY_CAP,
        })
    }

    pub fn realization_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Draws one realization: initial energy, initial fade, then the arrival and
/// fade-change processes with exponential gaps. Events at or after the
/// horizon are discarded.
pub fn generate_realization<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<EventTimeline, HarnessError> {
    let horizon = config.horizon;
    let initial_energy = config.energy.sample(rng);
    let mut fades = vec![FadeChange {
        time: 0.0,
        level: config.fading.sample(rng),
    }];
    let mut arrivals = Vec::new();
    if config.lambda_e > 0.0 {
        let gap = Exp::new(config.lambda_e).expect("positive rate");
        let mut t = gap.sample(rng);
        while t < horizon {
            let amount = config.energy.sample(rng);
            if amount > 0.0 {
                arrivals.push(EnergyArrival { time: t, amount });
            }
            t += gap.sample(rng);
        }
    }
    if config.lambda_f > 0.0 {
        let gap = Exp::new(config.lambda_f).expect("positive rate");
        let mut t = gap.sample(rng);
        while t < horizon {
            fades.push(FadeChange {
                time: t,
                level: config.fading.sample(rng),
            });
            t += gap.sample(rng);
        }
    }
    Ok(EventTimeline::new(
        horizon,
        config.e_max,
        initial_energy,
        arrivals,
        fades,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSegment {
    pub start: f64,
    pub end: f64,
    pub power: f64,
    pub fade: f64,
    /// Battery energy at `start`; it decays linearly to `battery_start − power·(end − start)`.
    pub battery_start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub segments: Vec<PowerSegment>,
    pub delivered_bits: f64,
    /// Energy lost to overflow at arrivals.
    pub wasted: f64,
    /// Energy left in the battery at the horizon.
    pub leftover: f64,
    pub injected: f64,
    pub consumed: f64,
    pub horizon: f64,
}

impl SimulationTrace {
    pub fn throughput(&self) -> f64 {
        self.delivered_bits / self.horizon
    }

    /// `injected − consumed − wasted − leftover`.
    pub fn energy_imbalance(&self) -> f64 {
        self.injected - self.consumed - self.wasted - self.leftover
    }
}

fn check_table(
    table: &ValueTable,
    timeline: &EventTimeline,
    delta: f64,
) -> Result<(), HarnessError> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    if close(table.delta(), delta)
        && close(table.horizon(), timeline.horizon())
        && close(table.e_max(), timeline.e_max())
    {
        Ok(())
    } else {
        Err(HarnessError::IncompatibleTable {
            table_delta: table.delta(),
            table_horizon: table.horizon(),
            table_e_max: table.e_max(),
            delta,
            horizon: timeline.horizon(),
            e_max: timeline.e_max(),
        })
    }
}

/// Runs a policy on a realization.
///
/// Decisions are taken at every event, at every step of `delta` for the
/// table policy, and power drops to zero at the exact instant the battery
/// empties. Arrivals beyond the free capacity are discarded as waste.
pub fn simulate(
    policy: &CausalPolicy,
    timeline: &EventTimeline,
    config: &ScenarioConfig,
) -> Result<SimulationTrace, HarnessError> {
    let tick = match policy {
        CausalPolicy::DpLookup(table) => {
            check_table(table, timeline, config.delta)?;
            Some(config.delta)
        }
        _ => None,
    };
    let e_max = timeline.e_max();
    let fade_times: Vec<f64> = timeline.fades().iter().map(|f| f.time).collect();
    let mut segments = Vec::new();
    let (mut battery, mut wasted, mut injected, mut consumed, mut bits) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut held = 0.0;

    for (idx, epoch) in timeline.epochs().iter().enumerate() {
        injected += epoch.injected;
        let room = e_max - battery;
        if epoch.injected > room {
            wasted += epoch.injected - room;
            battery = e_max;
        } else {
            battery += epoch.injected;
        }
        let trigger = if idx == 0 {
            EventTrigger::Start
        } else {
            let fade_event = fade_times
                .binary_search_by(|t| t.total_cmp(&epoch.start))
                .is_ok();
            match (epoch.arrival, fade_event) {
                (true, true) => EventTrigger::Both,
                (true, false) => EventTrigger::EnergyArrival,
                _ => EventTrigger::FadeChange,
            }
        };
        let decide = |battery: f64, time: f64, trigger: EventTrigger, held: f64| {
            policy
                .decide(&PolicyState {
                    energy: battery,
                    fade: epoch.fade,
                    time,
                    trigger,
                    previous_power: held,
                })
                .power
        };
        held = decide(battery, epoch.start, trigger, held);

        let end = epoch.end();
        let mut t = epoch.start;
        while t < end {
            let next_tick = tick.map(|d| ((t / d + 1e-9).floor() + 1.0) * d);
            let stop = next_tick.map_or(end, |nt| nt.min(end));
            let power = if battery > 0.0 { held } else { 0.0 };
            let mut seg_end = stop;
            let mut empties = false;
            if power > 0.0 && power * (stop - t) >= battery {
                seg_end = (t + battery / power).min(stop);
                empties = true;
            }
            if seg_end > t {
                segments.push(PowerSegment {
                    start: t,
                    end: seg_end,
                    power,
                    fade: epoch.fade,
                    battery_start: battery,
                });
                bits += (seg_end - t) * config.rate.rate(power, epoch.fade);
            }
            if empties {
                consumed += battery;
                battery = 0.0;
            } else {
                let used = power * (seg_end - t);
                consumed += used;
                battery -= used;
            }
            t = seg_end;
            if next_tick.is_some_and(|nt| t >= nt && t < end) {
                held = decide(battery, t, EventTrigger::Tick, held);
            }
        }
    }
    Ok(SimulationTrace {
        segments,
        delivered_bits: bits,
        wasted,
        leftover: battery,
        injected,
        consumed,
        horizon: timeline.horizon(),
    })
}

/// Throughput bound from water-filling all the energy of the realization
/// over its fade segments at time zero, in bits per second.
pub fn upper_bound(timeline: &EventTimeline, rate: &RateModel) -> f64 {
    let total = timeline.total_energy();
    if total <= 0.0 {
        return 0.0;
    }
    let level = flood_level(timeline.epochs(), total);
    let bits: f64 = timeline
        .epochs()
        .iter()
        .map(|e| e.length * rate.rate((level - e.base()).max(0.0), e.fade))
        .sum();
    bits / timeline.horizon()
}

/// Offline optimum of a realization in bits per second.
pub fn offline_throughput(timeline: &EventTimeline, rate: &RateModel) -> Result<f64, HarnessError> {
    match waterfill_with_rate(timeline, rate) {
        Ok(sol) => Ok(sol.objective_bits / timeline.horizon()),
        Err(OfflineError::EmptyEnergy) => Ok(0.0),
        Err(e) => Err(e.into()),
    }
}

/// Builds a named policy for a scenario.
pub fn build_policy(
    spec: PolicySpec,
    config: &ScenarioConfig,
    table: Option<&Arc<ValueTable>>,
) -> Result<CausalPolicy, HarnessError> {
    Ok(match spec {
        PolicySpec::ConstantWater => {
            make_constant_water(config.fading.clone(), config.mean_recharge())?
        }
        PolicySpec::EnergyAdaptive => make_energy_adaptive(config.fading.clone()),
        PolicySpec::TimeEnergyAdaptive => {
            make_time_energy_adaptive(config.fading.clone(), config.horizon, false)?
        }
        PolicySpec::TimeEnergyAdaptiveArrivals => {
            make_time_energy_adaptive(config.fading.clone(), config.horizon, true)?
        }
        PolicySpec::Dp => {
            CausalPolicy::DpLookup(Arc::clone(table.ok_or(HarnessError::MissingTable)?))
        }
        PolicySpec::Fixed(p) => make_fixed_power(p)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizationOutcome {
    pub offline_bps: f64,
    pub upper_bound_bps: f64,
    /// One entry per policy, in the order given to [`run_experiment`].
    pub policy_bps: Vec<f64>,
    pub wasted: Vec<f64>,
    pub arrivals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: String,
    pub mean_bps: f64,
    pub stderr_bps: f64,
    pub n: usize,
}

impl Summary {
    pub fn from_samples(name: &str, samples: &[f64]) -> Self {
        let (mean_bps, stderr_bps) = mean_and_stderr(samples);
        Summary {
            name: name.to_string(),
            mean_bps,
            stderr_bps,
            n: samples.len(),
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ScenarioConfig,
    pub policies: Vec<Summary>,
    pub offline: Summary,
    pub upper_bound: Summary,
    pub realizations: Vec<RealizationOutcome>,
}

impl ExperimentReport {
    pub fn policy_samples(&self, index: usize) -> Vec<f64> {
        self.realizations
            .iter()
            .map(|r| r.policy_bps[index])
            .collect()
    }

    pub fn offline_samples(&self) -> Vec<f64> {
        self.realizations.iter().map(|r| r.offline_bps).collect()
    }

    pub fn upper_bound_samples(&self) -> Vec<f64> {
        self.realizations
            .iter()
            .map(|r| r.upper_bound_bps)
            .collect()
    }

    pub fn policy_index(&self, name: &str) -> Option<usize> {
        self.policies.iter().position(|p| p.name == name)
    }
}

/// Simulates every policy on the same realizations; realizations run in
/// parallel and are aggregated in index order.
pub fn run_experiment(
    config: &ScenarioConfig,
    policies: &[(String, CausalPolicy)],
) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let outcomes: Vec<RealizationOutcome> = (0..config.n_realizations)
        .into_par_iter()
        .map(|i| {
            let mut rng = config.realization_rng(i);
            let timeline = generate_realization(config, &mut rng)?;
            let mut policy_bps = Vec::with_capacity(policies.len());
            let mut wasted = Vec::with_capacity(policies.len());
            for (_, policy) in policies {
                let trace = simulate(policy, &timeline, config)?;
                policy_bps.push(trace.throughput());
                wasted.push(trace.wasted);
            }
            Ok(RealizationOutcome {
                offline_bps: offline_throughput(&timeline, &config.rate)?,
                upper_bound_bps: upper_bound(&timeline, &config.rate),
                policy_bps,
                wasted,
                arrivals: timeline.arrivals().len(),
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let column =
        |f: &dyn Fn(&RealizationOutcome) -> f64| outcomes.iter().map(f).collect::<Vec<_>>();
    let summaries = policies
        .iter()
        .enumerate()
        .map(|(k, (name, _))| Summary::from_samples(name, &column(&|r| r.policy_bps[k])))
        .collect();
    Ok(ExperimentReport {
        config: config.clone(),
        policies: summaries,
        offline: Summary::from_samples("offline", &column(&|r| r.offline_bps)),
        upper_bound: Summary::from_samples("upper_bound", &column(&|r| r.upper_bound_bps)),
        realizations: outcomes,
    })
}

/// Caps the global worker pool at `EHSCHED_THREADS` when set.
pub fn init_thread_pool() -> Result<(), HarnessError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::InvalidConfig(format!("{THREADS_ENV}={value:?}")))?;
    // A pool that is already running keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVar {
    /// Mean recharge rate `P`.
    Recharge,
    Horizon,
}

impl SweepVar {
    pub fn label(self) -> &'static str {
        match self {
            SweepVar::Recharge => "P",
            SweepVar::Horizon => "T",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub base: ScenarioConfig,
    pub sweep_var: SweepVar,
    pub sweep_values: Vec<f64>,
}

impl Preset {
    pub fn by_name(name: &str) -> Result<Self, HarnessError> {
        let rayleigh = FadingModel::rayleigh(1.0)?;
        let base = |fading: FadingModel, e_max: f64| ScenarioConfig {
            horizon: 10.0,
            e_max,
            lambda_e: 1.0,
            lambda_f: 1.0,
            energy: EnergyModel::UniformMean(0.5),
            fading,
            rate: RateModel::bandwidth(1e6),
            seed: 42,
            n_realizations: 1000,
            delta: DEFAULT_DELTA,
        };
        // Rounded so that printed sweep values stay short.
        let steps = |lo: f64, step: f64, n: usize| {
            (0..n)
                .map(|i| ((lo + step * i as f64) * 1e9).round() / 1e9)
                .collect()
        };
        Ok(match name {
            "fig5" => Preset {
                name: "fig5",
                base: base(rayleigh, 10.0),
                sweep_var: SweepVar::Recharge,
                sweep_values: steps(0.1, 0.1, 10),
            },
            "fig6" => Preset {
                name: "fig6",
                base: base(rayleigh, 1.0),
                sweep_var: SweepVar::Recharge,
                sweep_values: steps(0.05, 0.05, 9),
            },
            "fig7" => Preset {
                name: "fig7",
                base: base(FadingModel::nakagami(3.0, db_to_linear(5.0))?, 10.0),
                sweep_var: SweepVar::Recharge,
                sweep_values: steps(0.1, 0.1, 10),
            },
            "fig8" => Preset {
                name: "fig8",
                base: base(FadingModel::nakagami(5.0, 1.0)?, 10.0),
                sweep_var: SweepVar::Horizon,
                sweep_values: steps(5.0, 5.0, 8),
            },
            other => return Err(HarnessError::UnknownPreset(other.to_string())),
        })
    }

    /// Scenario at one sweep point.
    pub fn at(&self, value: f64) -> Result<ScenarioConfig, HarnessError> {
        let mut config = self.base.clone();
        match self.sweep_var {
            SweepVar::Recharge => {
                config.energy = EnergyModel::uniform_mean(value / config.lambda_e)?
            }
            SweepVar::Horizon => config.horizon = value,
        }
        Ok(config)
    }
}

/// Where the table policy gets its table at each sweep point.
#[derive(Debug, Clone)]
pub enum TableSource {
    /// Build one per sweep point with the given energy grid and fade points.
    Build {
        energy_grid: usize,
        fade_points: usize,
    },
    Fixed(Arc<ValueTable>),
}

impl Default for TableSource {
    fn default() -> Self {
        TableSource::Build {
            energy_grid: DEFAULT_ENERGY_GRID,
            fade_points: DEFAULT_FADE_POINTS,
        }
    }
}

/// Runs every sweep point of a preset.
pub fn run_sweep(
    preset: &Preset,
    policies: &[PolicySpec],
    tables: &TableSource,
) -> Result<Vec<(f64, ExperimentReport)>, HarnessError> {
    preset
        .sweep_values
        .iter()
        .map(|&value| {
            let config = preset.at(value)?;
            let table = if policies.contains(&PolicySpec::Dp) {
                Some(match tables {
                    TableSource::Fixed(t) => Arc::clone(t),
                    TableSource::Build {
                        energy_grid,
                        fade_points,
                    } => Arc::new(build_value_function(
                        &config.dp_config(*energy_grid, *fade_points)?,
                    )?),
                })
            } else {
                None
            };
            let named = policies
                .iter()
                .map(|&spec| {
                    Ok((
                        spec.to_string(),
                        build_policy(spec, &config, table.as_ref())?,
                    ))
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            Ok((value, run_experiment(&config, &named)?))
        })
        .collect()
}

/// Writes `sweep_var,sweep_value,policy,mean_bps,stderr_bps,n` rows, the
/// policies first, then the offline optimum and the upper bound.
pub fn write_report_csv<W: Write>(
    out: &mut W,
    sweep_var: SweepVar,
    rows: &[(f64, ExperimentReport)],
) -> std::io::Result<()> {
    writeln!(out, "sweep_var,sweep_value,policy,mean_bps,stderr_bps,n")?;
    for (value, report) in rows {
        for s in report
            .policies
            .iter()
            .chain([&report.offline, &report.upper_bound])
        {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                sweep_var.label(),
                value,
                s.name,
                s.mean_bps,
                s.stderr_bps,
                s.n
            )?;
        }
    }
    Ok(())
}

/// Per-realization throughputs, one row per (sweep point, realization).
pub fn write_detail_csv<W: Write>(
    out: &mut W,
    sweep_var: SweepVar,
    rows: &[(f64, ExperimentReport)],
) -> std::io::Result<()> {
    let names: Vec<&str> = rows
        .first()
        .map(|(_, r)| r.policies.iter().map(|p| p.name.as_str()).collect())
        .unwrap_or_default();
    write!(
        out,
        "sweep_var,sweep_value,realization,arrivals,offline_bps,upper_bound_bps"
    )?;
    for n in &names {
        write!(out, ",{n}_bps")?;
    }
    writeln!(out)?;
    for (value, report) in rows {
        for (i, r) in report.realizations.iter().enumerate() {
            write!(
                out,
                "{},{},{},{},{},{}",
                sweep_var.label(),
                value,
                i,
                r.arrivals,
                r.offline_bps,
                r.upper_bound_bps
            )?;
            for v in &r.policy_bps {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
