use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SignalPrior;
use crate::normal;

/// Per-processor law of `f^p_t`: `S0 / P + (sigma_t / sqrt(P)) Z`, a
/// two-component Gaussian mixture for the spike-and-slab prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarSourceModel {
    pub prior: SignalPrior,
    pub sigma2_t: f64,
    pub p: usize,
}

/// One weighted Gaussian component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

impl ScalarSourceModel {
    pub fn new(prior: SignalPrior, sigma2_t: f64, p: usize) -> Result<Self> {
        prior.validate()?;
        if !(sigma2_t > 0.0 && sigma2_t.is_finite()) {
            return Err(Error::param(format!(
                "sigma2_t must be positive, got {sigma2_t}"
            )));
        }
        if p == 0 {
            return Err(Error::param("P must be positive"));
        }
        Ok(ScalarSourceModel { prior, sigma2_t, p })
    }

    pub fn components(&self) -> [Component; 2] {
        let p = self.p as f64;
        let slab_var = (self.prior.sigma2_s() + p * self.sigma2_t) / (p * p);
        [
            Component {
                weight: self.prior.epsilon,
                mean: self.prior.mu_s / p,
                sd: slab_var.sqrt(),
            },
            Component {
                weight: 1.0 - self.prior.epsilon,
                mean: 0.0,
                sd: (self.sigma2_t / p).sqrt(),
            },
        ]
    }

    /// Half-width, around the mixture mean, of the interval that holds
    /// every component out to `sds` of its own standard deviations and the
    /// mixture out to `sds` of the mixture standard deviation.
    pub fn support_half_width(&self, sds: f64) -> f64 {
        let mu = self.mean();
        self.components()
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| (c.mean - mu).abs() + sds * c.sd)
            .fold(sds * self.sd(), f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.components().iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.components()
            .iter()
            .map(|c| c.weight * (c.sd * c.sd + (c.mean - mu) * (c.mean - mu)))
            .sum()
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// P(a <= F < b).
    pub fn interval_prob(&self, a: f64, b: f64) -> f64 {
        self.components()
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight * normal::interval((a - c.mean) / c.sd, (b - c.mean) / c.sd))
            .sum()
    }

    /// E[(F - r)^2; a <= F < b].
    pub fn interval_sq_error(&self, a: f64, b: f64, r: f64) -> f64 {
        self.components()
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| {
                let m2 = normal::interval_second_moment(
                    (a - c.mean) / c.sd,
                    (b - c.mean) / c.sd,
                    (c.mean - r) / c.sd,
                );
                c.weight * c.sd * c.sd * m2
            })
            .sum()
    }

    /// Largest bin width for which the uniform quantization-noise model holds:
    /// `2 sigma_t / sqrt(P)`.
    pub fn max_model_delta(&self) -> f64 {
        2.0 * (self.sigma2_t / self.p as f64).sqrt()
    }
}
