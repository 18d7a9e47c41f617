//! Maximum departure curve `D(t)` and minimum transmission completion time.
//!
//! `D(t)` is the offline optimum over `[0, t)` with every event at or after
//! `t` ignored. It is continuous and nondecreasing, so the earliest time at
//! which `B` bits can be delivered is found by scanning event boundaries for
//! the first bracket and bisecting inside it.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Mutex;

use thiserror::Error;

use crate::offline::{waterfill_with_rate, OfflineError};
use crate::rate::RateModel;
use crate::timeline::{EventTimeline, PowerSchedule, TimelineError};

pub const DEFAULT_TIME_TOL: f64 = 1e-9;
pub const BITS_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DepartureError {
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("negative bit target {0}")]
    NegativeTarget(f64),
    #[error("{target} bits cannot be delivered by {horizon} s (at most {reachable})")]
    TargetUnreachable {
        target: f64,
        reachable: f64,
        horizon: f64,
    },
    #[error(transparent)]
    Offline(#[from] OfflineError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

/// A scenario's event stream together with a cache of evaluated points.
///
/// The timeline's horizon is the latest deadline considered.
#[derive(Debug)]
pub struct DepartureCurve {
    timeline: EventTimeline,
    rate: RateModel,
    cache: Mutex<HashMap<u64, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub t_star: f64,
    pub bits_target: f64,
    /// Schedule over `[0, t_star)` delivering the target.
    pub schedule: PowerSchedule,
    /// Event boundaries enclosing `t_star`.
    pub bracket: (f64, f64),
    /// `D(t_star)`.
    pub bits_delivered: f64,
}

impl DepartureCurve {
    pub fn new(timeline: EventTimeline, rate: RateModel) -> Self {
        DepartureCurve {
            timeline,
            rate,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn timeline(&self) -> &EventTimeline {
        &self.timeline
    }

    pub fn rate(&self) -> &RateModel {
        &self.rate
    }

    pub fn horizon(&self) -> f64 {
        self.timeline.horizon()
    }

    /// `D(t)` in bits.
    pub fn departure_at(&self, t: f64) -> Result<f64, DepartureError> {
        if t.is_nan() || t < 0.0 {
            return Err(DepartureError::NegativeTime(t));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        if let Some(&d) = self.cache.lock().expect("cache lock").get(&t.to_bits()) {
            return Ok(d);
        }
        let d = self.solve(t)?.map_or(0.0, |(_, bits)| bits);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(t.to_bits(), d);
        Ok(d)
    }

    fn solve(&self, t: f64) -> Result<Option<(PowerSchedule, f64)>, DepartureError> {
        let truncated = self.timeline.truncated(t)?;
        match waterfill_with_rate(&truncated, &self.rate) {
            Ok(sol) => Ok(Some((sol.schedule, sol.objective_bits))),
            Err(OfflineError::EmptyEnergy) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Earliest `t` with `D(t) = B`.
    pub fn min_completion_time(
        &self,
        bits_target: f64,
        time_tol: f64,
    ) -> Result<CompletionResult, DepartureError> {
        if bits_target.is_nan() || bits_target < 0.0 {
            return Err(DepartureError::NegativeTarget(bits_target));
        }
        if bits_target == 0.0 {
            return Ok(CompletionResult {
                t_star: 0.0,
                bits_target,
                schedule: PowerSchedule::zeros(0),
                bracket: (0.0, 0.0),
                bits_delivered: 0.0,
            });
        }
        let mut boundaries: Vec<f64> = self.timeline.epochs().iter().map(|e| e.end()).collect();
        boundaries.dedup();
        let mut lo = 0.0;
        let mut hi = None;
        for &b in &boundaries {
            if self.departure_at(b)? >= bits_target {
                hi = Some(b);
                break;
            }
            lo = b;
        }
        let Some(mut hi) = hi else {
            return Err(DepartureError::TargetUnreachable {
                target: bits_target,
                reachable: self.departure_at(self.horizon())?,
                horizon: self.horizon(),
            });
        };
        let bracket = (lo, hi);
        // Invariant: D(lo) < B <= D(hi).
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let close_in_time = hi - lo <= time_tol;
            let close_in_bits = self.departure_at(hi)? - bits_target <= BITS_TOL;
            if close_in_time && close_in_bits {
                break;
            }
            if self.departure_at(mid)? >= bits_target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (schedule, bits_delivered) = self
            .solve(hi)?
            .expect("a positive target was reached so energy is present");
        Ok(CompletionResult {
            t_star: hi,
            bits_target,
            schedule,
            bracket,
            bits_delivered,
        })
    }

    /// `(t, D(t))` for every grid point.
    pub fn sample_curve(&self, grid: &[f64]) -> Result<Vec<(f64, f64)>, DepartureError> {
        grid.iter()
            .map(|&t| Ok((t, self.departure_at(t)?)))
            .collect()
    }
}

/// Writes a sampled curve as `t_s,bits` CSV.
pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(out, "t_s,bits")?;
    for (t, d) in curve {
        writeln!(out, "{t},{d}")?;
    }
    Ok(())
}

/// Uniform grid `start, start+step, ...` up to and including `end`.
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || end < start {
        return Vec::new();
    }
    let count = ((end - start) / step + 1e-9).floor() as usize;
    (0..=count).map(|i| start + i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::{EnergyArrival, FadeChange};

    fn single(e0: f64, horizon: f64) -> DepartureCurve {
        let tl = EventTimeline::new(
            horizon,
            f64::INFINITY,
            e0,
            vec![],
            vec![FadeChange {
                time: 0.0,
                level: 1.0,
            }],
        )
        .unwrap();
        DepartureCurve::new(tl, RateModel::THEORY)
    }

    fn two_arrivals(e_max: f64) -> DepartureCurve {
        let tl = EventTimeline::new(
            20.0,
            e_max,
            2.0,
            vec![EnergyArrival {
                time: 1.0,
                amount: 2.0,
            }],
            vec![FadeChange {
                time: 0.0,
                level: 1.0,
            }],
        )
        .unwrap();
        DepartureCurve::new(tl, RateModel::THEORY)
    }

    #[test]
    fn constant_power_value() {
        let c = single(1.0, 10.0);
        assert!((c.departure_at(1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(c.departure_at(0.0).unwrap(), 0.0);
        assert_eq!(
            c.departure_at(-1.0),
            Err(DepartureError::NegativeTime(-1.0))
        );
    }

    #[test]
    fn two_arrival_branches() {
        let c = two_arrivals(3.0);
        assert!((c.departure_at(0.5).unwrap() - 0.25 * 5f64.log2()).abs() < 1e-12);
        let d3 = 1.5 * (1.0 + 4.0 / 3.0f64).log2();
        assert!((c.departure_at(3.0).unwrap() - d3).abs() < 1e-12);
        assert!((d3 - 1.833588).abs() < 1e-6);
    }

    #[test]
    fn arrival_at_deadline_is_excluded() {
        let c = two_arrivals(3.0);
        let at = c.departure_at(1.0).unwrap();
        assert!((at - 0.5 * 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn capacity_lowers_the_asymptote() {
        let capped = two_arrivals(3.0);
        let free = two_arrivals(f64::INFINITY);
        for t in [5.0, 8.0, 19.0] {
            assert!(capped.departure_at(t).unwrap() < free.departure_at(t).unwrap() - 1e-6);
        }
    }

    #[test]
    fn completion_time_examples() {
        let c = single(1.0, 10.0);
        assert_eq!(c.min_completion_time(0.0, 1e-9).unwrap().t_star, 0.0);
        let r = c.min_completion_time(0.5, 1e-9).unwrap();
        assert!((r.t_star - 1.0).abs() < 1e-8);
        assert!((r.bits_delivered - 0.5).abs() <= BITS_TOL);

        let c = two_arrivals(3.0);
        let b = 1.5 * (1.0 + 4.0 / 3.0f64).log2();
        let r = c.min_completion_time(b, 1e-9).unwrap();
        assert!((r.t_star - 3.0).abs() < 1e-4);
        assert_eq!(r.bracket, (1.0, 20.0));
        assert!(matches!(
            c.min_completion_time(-1.0, 1e-9),
            Err(DepartureError::NegativeTarget(_))
        ));
        assert!(matches!(
            c.min_completion_time(100.0, 1e-9),
            Err(DepartureError::TargetUnreachable { .. })
        ));
    }

    #[test]
    fn late_first_energy_gives_flat_start() {
        let tl = EventTimeline::new(
            10.0,
            f64::INFINITY,
            0.0,
            vec![EnergyArrival {
                time: 2.0,
                amount: 1.0,
            }],
            vec![FadeChange {
                time: 0.0,
                level: 1.0,
            }],
        )
        .unwrap();
        let c = DepartureCurve::new(tl, RateModel::THEORY);
        assert_eq!(c.departure_at(1.5).unwrap(), 0.0);
        let r = c.min_completion_time(1e-3, 1e-10).unwrap();
        assert!(r.t_star > 2.0);
    }

    #[test]
    fn sampled_curve_matches_closed_form() {
        let c = single(1.0, 10.0);
        let grid = uniform_grid(0.0, 10.0, 0.01);
        assert_eq!(grid.len(), 1001);
        let curve = c.sample_curve(&grid).unwrap();
        for &(t, d) in &curve[1..] {
            assert!((d - t / 2.0 * (1.0 + 1.0 / t).log2()).abs() < 1e-9);
        }
        assert_eq!(c.sample_curve(&[0.0]).unwrap(), vec![(0.0, 0.0)]);
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve[..2]).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("t_s,bits\n0,0\n"));
    }

    #[test]
    fn slope_jumps_after_an_arrival() {
        let c = two_arrivals(3.0);
        let slope =
            |a: f64, b: f64| (c.departure_at(b).unwrap() - c.departure_at(a).unwrap()) / (b - a);
        let before = slope(1.0 - 1e-3 - 1e-7, 1.0 - 1e-3);
        let after = slope(1.0 + 1e-6, 1.0 + 1e-6 + 1e-9);
        assert!(after >= 10.0 * before, "{after} vs {before}");
    }
}
