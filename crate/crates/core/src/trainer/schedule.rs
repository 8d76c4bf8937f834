//! Popularity-dependent entity masking probabilities.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub const REG_MIN: f64 = 0.05;
pub const REG_MAX: f64 = 0.95;

/// How the probability of zeroing an entity embedding depends on the
/// entity's training count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegScheme {
    /// Constant probability, used as given (no clamping).
    Fixed(f64),
    /// `0.95 * x^-0.32`
    InvPopPower,
    /// `-0.00009 * x + 0.9501`
    InvPopLinear,
    /// `-0.097 * ln(x) + 0.96`
    InvPopLog,
    /// `0.95 * (x_max / x)^-0.32`: more popular entities are masked more.
    PopPower,
}

impl fmt::Display for RegScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegScheme::Fixed(p) => write!(f, "fixed:{p}"),
            RegScheme::InvPopPower => f.write_str("inv_pop_power"),
            RegScheme::InvPopLinear => f.write_str("inv_pop_linear"),
            RegScheme::InvPopLog => f.write_str("inv_pop_log"),
            RegScheme::PopPower => f.write_str("pop_power"),
        }
    }
}

impl FromStr for RegScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inv_pop_power" => Ok(RegScheme::InvPopPower),
            "inv_pop_linear" => Ok(RegScheme::InvPopLinear),
            "inv_pop_log" => Ok(RegScheme::InvPopLog),
            "pop_power" => Ok(RegScheme::PopPower),
            other => {
                let p = other
                    .strip_prefix("fixed:")
                    .or_else(|| other.strip_prefix("fixed(").and_then(|r| r.strip_suffix(')')))
                    .ok_or_else(|| format!("unknown regularisation scheme {other:?}"))?;
                p.parse()
                    .map(RegScheme::Fixed)
                    .map_err(|_| format!("bad probability {p:?}"))
            }
        }
    }
}

/// Masking probability for an entity seen `count` times. `max_count` is
/// the largest count in the training data; only [`RegScheme::PopPower`]
/// reads it. A count of zero is evaluated as one.
pub fn reg_prob(count: u64, scheme: RegScheme, max_count: u64) -> f64 {
    let x = count.max(1) as f64;
    let raw = match scheme {
        RegScheme::Fixed(p) => return p,
        RegScheme::InvPopPower => 0.95 * x.powf(-0.32),
        RegScheme::InvPopLinear => -0.00009 * x + 0.9501,
        RegScheme::InvPopLog => -0.097 * x.ln() + 0.96,
        RegScheme::PopPower => {
            let top = max_count.max(1) as f64;
            0.95 * (top / x).powf(-0.32)
        }
    };
    raw.clamp(REG_MIN, REG_MAX)
}

/// One independent Bernoulli draw per candidate occurrence. `true` means
/// the candidate's entity embedding is zeroed for this step.
pub fn mask_plan<R: Rng>(counts: &[u64], scheme: RegScheme, max_count: u64, rng: &mut R) -> Vec<bool> {
    counts
        .iter()
        .map(|&c| {
            let p = reg_prob(c, scheme, max_count);
            // Bypass the generator at the extremes so fixed(0) and fixed(1)
            // are exact.
            if p <= 0.0 {
                false
            } else if p >= 1.0 {
                true
            } else {
                rng.random::<f64>() < p
            }
        })
        .collect()
}
