//! Latency and ratio samplers fitted to published (mean, min, max) triples.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

/// Upper standard-normal quantile at which the fitted distribution places the
/// published maximum (one draw in a million).
const MAX_QUANTILE_Z: f64 = 4.753_424_308_822_899;

/// A (mean, min, max) summary as published for a measured quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistSpec {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl DistSpec {
    pub const fn new(mean: f64, min: f64, max: f64) -> Self {
        DistSpec { mean, min, max }
    }

    pub const fn constant(v: f64) -> Self {
        DistSpec {
            mean: v,
            min: v,
            max: v,
        }
    }

    pub fn scaled(self, k: f64) -> Self {
        DistSpec {
            mean: self.mean * k,
            min: self.min * k,
            max: self.max * k,
        }
    }

    pub fn validate(&self, field: &str) -> SimResult<()> {
        let ok = self.min.is_finite()
            && self.max.is_finite()
            && self.mean.is_finite()
            && self.min > 0.0
            && self.min <= self.mean
            && self.mean <= self.max;
        if ok {
            Ok(())
        } else {
            Err(SimError::config(
                field,
                format!(
                    "need 0 < min <= mean <= max, got mean={} min={} max={}",
                    self.mean, self.min, self.max
                ),
            ))
        }
    }
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Log-normal distribution clamped to `[min, max]`, with `mu` chosen so the
/// clamped mean equals the requested mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClampedLogNormal {
    pub mu: f64,
    pub sigma: f64,
    pub min: f64,
    pub max: f64,
}

impl ClampedLogNormal {
    pub fn fit(spec: DistSpec) -> SimResult<Self> {
        spec.validate("distribution")?;
        let DistSpec { mean, min, max } = spec;
        if min == max || mean == min || mean == max {
            // Degenerate: a point mass at the mean.
            return Ok(ClampedLogNormal {
                mu: mean.ln(),
                sigma: 0.0,
                min: mean,
                max: mean,
            });
        }
        let z = MAX_QUANTILE_Z;
        let l = (max / mean).ln();
        let disc = z * z - 2.0 * l;
        let sigma = if disc > 0.0 { z - disc.sqrt() } else { z }.max(1e-6);

        let (mut lo, mut hi) = (min.ln() - 8.0 * sigma, max.ln() + 8.0 * sigma);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if clamped_mean(mid, sigma, min, max) < mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(ClampedLogNormal {
            mu: 0.5 * (lo + hi),
            sigma,
            min,
            max,
        })
    }

    pub fn mean(&self) -> f64 {
        if self.sigma == 0.0 {
            return self.min;
        }
        clamped_mean(self.mu, self.sigma, self.min, self.max)
    }

    /// P(sample < x).
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.min {
            return 0.0;
        }
        if x > self.max {
            return 1.0;
        }
        if self.sigma == 0.0 {
            return if x > self.min { 1.0 } else { 0.0 };
        }
        phi((x.ln() - self.mu) / self.sigma)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        if self.sigma == 0.0 {
            return self.min;
        }
        (self.mu + self.sigma * z).exp().clamp(self.min, self.max)
    }
}

fn clamped_mean(mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let (la, lb) = (a.ln(), b.ln());
    let below = phi((la - mu) / sigma);
    let above = 1.0 - phi((lb - mu) / sigma);
    let s2 = sigma * sigma;
    let inner = (mu + s2 / 2.0).exp() * (phi((lb - mu - s2) / sigma) - phi((la - mu - s2) / sigma));
    a * below + b * above + inner
}
