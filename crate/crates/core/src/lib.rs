//! Transmit-power scheduling for an energy-harvesting transmitter over a
//! fading channel.
//!
//! The crate covers the offline problem (directional water-filling with
//! right-permeable taps, plus a convex-programming oracle and a KKT
//! certificate), completion-time minimization through the maximum departure
//! curve, a dynamic-programming online policy, three event-driven heuristics,
//! and a Monte Carlo harness that compares all of them on shared realizations.

pub mod departure;
pub mod fading;
pub mod harness;
pub mod heuristics;
pub mod offline;
pub mod online_dp;
pub mod rate;
pub mod timeline;

pub use rate::RateModel;
pub use timeline::{EnergyArrival, Epoch, EventTimeline, FadeChange, PowerSchedule};
