//! Laplace-noised counts with non-negativity post-processing, and the bias
//! that the clamp introduces.
//!
//! A released count is `max(0, N + Lap(Δx/ε))`. Because the clamp only ever
//! raises values, the release is biased upwards by `(Δx/2ε)·exp(-Nε/Δx)`,
//! which is largest for small counts and strong privacy. Summing cells adds
//! their biases, so finer partitions of the same population are more biased.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::par::{self, Execution};
use crate::population::CountMatrix;
use crate::rng;

/// Privacy loss parameter. `NoPrivacy` is the ε = ∞ sentinel: counts pass
/// through untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    NoPrivacy,
    Finite(f64),
}

impl Epsilon {
    pub fn finite(eps: f64) -> Result<Self> {
        if eps > 0.0 && eps.is_finite() {
            Ok(Epsilon::Finite(eps))
        } else {
            Err(invalid(format!("epsilon must be positive and finite, got {eps}")))
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Epsilon::NoPrivacy => None,
            Epsilon::Finite(e) => Some(e),
        }
    }

    /// Stable tag for seed derivation.
    pub fn tag(self) -> u64 {
        match self {
            Epsilon::NoPrivacy => u64::MAX,
            Epsilon::Finite(e) => e.to_bits(),
        }
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::NoPrivacy => f.write_str("inf"),
            Epsilon::Finite(e) => write!(f, "{e}"),
        }
    }
}

impl FromStr for Epsilon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "none" | "∞" => Ok(Epsilon::NoPrivacy),
            t => {
                let e: f64 = t.parse().map_err(|_| invalid(format!("invalid epsilon `{s}`")))?;
                if e == f64::INFINITY {
                    Ok(Epsilon::NoPrivacy)
                } else {
                    Epsilon::finite(e)
                }
            }
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epsilon::NoPrivacy => s.serialize_str("inf"),
            Epsilon::Finite(e) => s.serialize_f64(*e),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(e) if e == f64::INFINITY => Ok(Epsilon::NoPrivacy),
            Raw::Num(e) => Epsilon::finite(e).map_err(serde::de::Error::custom),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    pub epsilon: Epsilon,
    /// Sensitivity `Δx` of the count query.
    pub sensitivity: f64,
    pub seed: u64,
}

impl PrivacyParams {
    pub fn new(epsilon: Epsilon, sensitivity: f64, seed: u64) -> Result<Self> {
        if let Epsilon::Finite(e) = epsilon {
            Epsilon::finite(e)?;
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(invalid(format!("sensitivity must be positive, got {sensitivity}")));
        }
        Ok(Self { epsilon, sensitivity, seed })
    }

    /// Counting queries have sensitivity 1.
    pub fn counts(epsilon: Epsilon, seed: u64) -> Result<Self> {
        Self::new(epsilon, 1.0, seed)
    }

    /// Laplace scale `b = Δx/ε`; `None` without privacy.
    pub fn scale(&self) -> Option<f64> {
        self.epsilon.value().map(|e| self.sensitivity / e)
    }
}

/// Inverse CDF of Laplace(0, `scale`) at `u` ∈ (-½, ½).
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    if u == 0.0 {
        return 0.0;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// One draw from Laplace(0, `scale`).
pub fn laplace_sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    loop {
        let u = rng.random::<f64>() - 0.5;
        // -0.5 would map to an infinite draw.
        if u > -0.5 {
            return laplace_from_uniform(u, scale);
        }
    }
}

/// Release every cell as `max(0, N + Lap(Δx/ε))`, each from its own stream.
pub fn privatize_counts(counts: &CountMatrix, params: &PrivacyParams) -> Result<CountMatrix> {
    if counts.noised() {
        return Err(Error::AlreadyNoised);
    }
    let Some(scale) = params.scale() else {
        return Ok(counts.clone());
    };
    let tag = rng::label_tag("privatize");
    let noised = counts
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let mut rng = rng::stream(params.seed, &[tag, k as u64]);
            (n + laplace_sample(scale, &mut rng)).max(0.0)
        })
        .collect();
    Ok(counts.with_counts(noised, params.epsilon))
}

fn check_count(n: f64) -> Result<()> {
    if n >= 0.0 && n.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("count must be finite and non-negative, got {n}")))
    }
}

/// Expected upward shift `E[max(0, n + Lap(b))] - n = (b/2)·exp(-n/b)`.
/// Zero without privacy.
pub fn bias_closed_form(n: f64, params: &PrivacyParams) -> Result<f64> {
    check_count(n)?;
    Ok(match params.scale() {
        None => 0.0,
        Some(b) => b / 2.0 * (-n / b).exp(),
    })
}

/// Bias of a total assembled from independently released cells.
pub fn aggregate_bias(counts: &[f64], params: &PrivacyParams) -> Result<f64> {
    if counts.is_empty() {
        return Err(invalid("aggregate bias needs at least one cell"));
    }
    counts.iter().try_for_each(|&n| check_count(n))?;
    Ok(match params.scale() {
        None => 0.0,
        Some(b) => b / 2.0 * counts.iter().map(|&n| (-n / b).exp()).sum::<f64>(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub trials: u64,
}

const MC_BLOCK: u64 = 1 << 16;
pub const MIN_MC_TRIALS: u64 = 1000;

/// Simulated bias of the clamped release, with its standard error. Trials
/// are split into fixed blocks with their own streams, so the estimate does
/// not depend on `exec`.
pub fn monte_carlo_bias(
    n: f64,
    params: &PrivacyParams,
    trials: u64,
    exec: Execution,
) -> Result<McEstimate> {
    check_count(n)?;
    if trials < MIN_MC_TRIALS {
        return Err(invalid(format!("need at least {MIN_MC_TRIALS} trials, got {trials}")));
    }
    let Some(scale) = params.scale() else {
        return Ok(McEstimate { estimate: 0.0, standard_error: 0.0, trials });
    };
    let blocks = trials.div_ceil(MC_BLOCK);
    let tag = rng::label_tag("mc-bias");
    let partials = par::map_indexed(exec, blocks as usize, |b| {
        let mut rng = rng::stream(params.seed, &[tag, b as u64]);
        let len = MC_BLOCK.min(trials - b as u64 * MC_BLOCK);
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..len {
            let d = (n + laplace_sample(scale, &mut rng)).max(0.0) - n;
            sum += d;
            sumsq += d * d;
        }
        (sum, sumsq)
    });
    let (sum, sumsq) = partials.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let t = trials as f64;
    let mean = sum / t;
    let var = ((sumsq - t * mean * mean) / (t - 1.0)).max(0.0);
    Ok(McEstimate { estimate: mean, standard_error: (var / t).sqrt(), trials })
}
