use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Instantaneous rate `scale * log_base(1 + h p)`.
///
/// The theory mode (`scale = 1/2`, base 2) gives bits per channel use as in the
/// Gaussian capacity formula; the bandwidth mode (`scale = W`, base 2) gives
/// bits per second for a channel of `W` Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateModel {
    pub scale: f64,
    pub log_base: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum RateParseError {
    #[error("unknown rate model `{0}` (expected `theory` or `bandwidth:<Hz>`)")]
    Unknown(String),
    #[error("bandwidth must be a positive number, got `{0}`")]
    BadBandwidth(String),
}

impl RateModel {
    pub const THEORY: RateModel = RateModel {
        scale: 0.5,
        log_base: 2.0,
    };

    pub fn bandwidth(hz: f64) -> Self {
        RateModel {
            scale: hz,
            log_base: 2.0,
        }
    }

    #[inline]
    pub fn rate(&self, power: f64, fade: f64) -> f64 {
        self.scale * (fade * power).ln_1p() / self.log_base.ln()
    }

    pub fn is_theory(&self) -> bool {
        *self == Self::THEORY
    }
}

impl Default for RateModel {
    fn default() -> Self {
        Self::THEORY
    }
}

impl fmt::Display for RateModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_theory() {
            write!(f, "theory")
        } else if self.log_base == 2.0 {
            write!(f, "bandwidth:{}", self.scale)
        } else {
            write!(f, "custom:{}:{}", self.scale, self.log_base)
        }
    }
}

impl FromStr for RateModel {
    type Err = RateParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "theory" {
            return Ok(Self::THEORY);
        }
        if let Some(hz) = s.strip_prefix("bandwidth:") {
            return match hz.parse::<f64>() {
                Ok(w) if w > 0.0 && w.is_finite() => Ok(Self::bandwidth(w)),
                _ => Err(RateParseError::BadBandwidth(hz.to_string())),
            };
        }
        if let Some(rest) = s.strip_prefix("custom:") {
            let mut it = rest.split(':');
            let scale = it.next().and_then(|v| v.parse::<f64>().ok());
            let base = it.next().and_then(|v| v.parse::<f64>().ok());
            if let (Some(scale), Some(log_base), None) = (scale, base, it.next()) {
                if scale > 0.0 && log_base > 1.0 {
                    return Ok(RateModel { scale, log_base });
                }
            }
        }
        Err(RateParseError::Unknown(s.to_string()))
    }
}

impl Serialize for RateModel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RateModel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
