#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ehsched::{EnergyArrival, EventTimeline, FadeChange};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub epochs: (usize, usize),
    pub horizon: f64,
    /// Probability of a finite battery.
    pub capped: f64,
    /// Probability that events may change the fade.
    pub fading: bool,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape {
            epochs: (2, 12),
            horizon: 10.0,
            capped: 0.5,
            fading: true,
        }
    }
}

/// Random timeline with an epoch count in `shape.epochs` and some energy.
pub fn random_timeline<R: Rng>(rng: &mut R, shape: InstanceShape) -> EventTimeline {
    let n = rng.random_range(shape.epochs.0..=shape.epochs.1);
    let horizon = shape.horizon;
    let mut times: Vec<f64> = Vec::with_capacity(n - 1);
    while times.len() < n - 1 {
        let t = rng.random_range(0.01 * horizon..0.99 * horizon);
        if times.iter().all(|&s| (s - t).abs() > 1e-3 * horizon) {
            times.push(t);
        }
    }
    times.sort_by(f64::total_cmp);
    let e_max = if rng.random_bool(shape.capped) {
        rng.random_range(0.5..4.0)
    } else {
        f64::INFINITY
    };
    let cap = if e_max.is_finite() { e_max } else { 4.0 };
    let mut arrivals = Vec::new();
    let mut fades = vec![FadeChange {
        time: 0.0,
        level: rng.random_range(0.1..5.0),
    }];
    for &t in &times {
        let kind = if shape.fading {
            rng.random_range(0..3)
        } else {
            0
        };
        if kind != 1 {
            arrivals.push(EnergyArrival {
                time: t,
                amount: rng.random_range(0.05..=cap),
            });
        }
        if kind != 0 {
            fades.push(FadeChange {
                time: t,
                level: rng.random_range(0.1..5.0),
            });
        }
    }
    let mut initial = if rng.random_bool(0.8) {
        rng.random_range(0.05..=cap)
    } else {
        0.0
    };
    if initial == 0.0 && arrivals.is_empty() {
        initial = 0.5 * cap;
    }
    EventTimeline::new(horizon, e_max, initial, arrivals, fades).expect("valid random timeline")
}

pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
