//! Problem instances: Bernoulli-Gaussian signal, Gaussian sensing matrix,
//! measurement noise, and the contiguous row partition across processors.

use std::ops::Range;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ChaCha stream ids for the independently regenerable pieces of an instance.
pub(crate) const SIGNAL_STREAM: u64 = 1;
pub(crate) const MATRIX_STREAM: u64 = 2;
pub(crate) const NOISE_STREAM: u64 = 3;
pub(crate) const CODER_STREAM: u64 = 4;

/// Seeded generator for one named stream of a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Spike-and-slab prior: zero with probability `1 - epsilon`, otherwise
/// Gaussian with mean `mu_s` and standard deviation `sigma_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalPrior {
    pub epsilon: f64,
    pub mu_s: f64,
    pub sigma_s: f64,
}

impl SignalPrior {
    pub fn new(epsilon: f64, mu_s: f64, sigma_s: f64) -> Result<Self> {
        let prior = SignalPrior {
            epsilon,
            mu_s,
            sigma_s,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::param(format!(
                "epsilon must lie in (0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::param(format!(
                "sigma_s must be positive, got {}",
                self.sigma_s
            )));
        }
        if !self.mu_s.is_finite() {
            return Err(Error::param("mu_s must be finite"));
        }
        Ok(())
    }

    pub fn sigma2_s(&self) -> f64 {
        self.sigma_s * self.sigma_s
    }

    /// E[S0^2] = epsilon (mu_s^2 + sigma_s^2).
    pub fn second_moment(&self) -> f64 {
        self.epsilon * (self.mu_s * self.mu_s + self.sigma2_s())
    }

    pub fn mean(&self) -> f64 {
        self.epsilon * self.mu_s
    }
}

/// Dimensions, processor count, noise level and master seed of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.p == 0 {
            return Err(Error::param("N, M and P must be positive"));
        }
        if self.m > self.n {
            return Err(Error::param(format!(
                "measurement ratio M/N must be in (0, 1], got M={} N={}",
                self.m, self.n
            )));
        }
        if !self.m.is_multiple_of(self.p) {
            return Err(Error::Partition(format!(
                "M={} is not divisible by P={}",
                self.m, self.p
            )));
        }
        if self.snr_db.is_nan() {
            return Err(Error::param("snr_db is NaN"));
        }
        Ok(())
    }

    /// kappa = M / N.
    pub fn kappa(&self) -> f64 {
        self.m as f64 / self.n as f64
    }

    /// rho = epsilon / kappa.
    pub fn rho(&self, prior: &SignalPrior) -> f64 {
        prior.epsilon / self.kappa()
    }

    /// Noise variance from SNR ~ 10 log10(rho / sigma2_e).
    pub fn sigma2_e(&self, prior: &SignalPrior) -> f64 {
        sigma2_e_for(prior.epsilon, self.kappa(), self.snr_db)
    }

    pub fn rows_per_processor(&self) -> usize {
        self.m / self.p
    }
}

pub fn sigma2_e_for(epsilon: f64, kappa: f64, snr_db: f64) -> f64 {
    (epsilon / kappa) * 10f64.powf(-snr_db / 10.0)
}

/// A generated compressed-sensing problem, immutable once built.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub config: ProblemConfig,
    pub prior: SignalPrior,
    pub s0: Array1<f64>,
    pub a: Array2<f64>,
    pub e: Array1<f64>,
    pub y: Array1<f64>,
    pub row_ranges: Vec<Range<usize>>,
}

impl ProblemInstance {
    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn p(&self) -> usize {
        self.config.p
    }

    pub fn kappa(&self) -> f64 {
        self.config.kappa()
    }

    pub fn sigma2_e(&self) -> f64 {
        self.config.sigma2_e(&self.prior)
    }
}

/// Draw `n` i.i.d. samples from the spike-and-slab prior.
pub fn sample_signal(prior: &SignalPrior, n: usize, seed: u64) -> Result<Vec<f64>> {
    prior.validate()?;
    if n == 0 {
        return Err(Error::param("signal length must be at least 1"));
    }
    let mut rng = stream_rng(seed, SIGNAL_STREAM);
    let signal = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let z: f64 = rng.sample(StandardNormal);
            if u < prior.epsilon {
                prior.mu_s + prior.sigma_s * z
            } else {
                0.0
            }
        })
        .collect();
    Ok(signal)
}

/// Contiguous partition of `m` rows into `p` equal blocks.
pub fn partition_rows(m: usize, p: usize) -> Result<Vec<Range<usize>>> {
    if p == 0 || !m.is_multiple_of(p) {
        return Err(Error::Partition(format!("M={m} is not divisible by P={p}")));
    }
    let rows = m / p;
    Ok((0..p).map(|k| k * rows..(k + 1) * rows).collect())
}

pub fn build_instance(config: ProblemConfig, prior: SignalPrior) -> Result<ProblemInstance> {
    config.validate()?;
    prior.validate()?;
    let (n, m) = (config.n, config.m);

    let s0 = Array1::from(sample_signal(&prior, n, config.seed)?);

    let scale = 1.0 / (m as f64).sqrt();
    let mut rng = stream_rng(config.seed, MATRIX_STREAM);
    let a = Array2::from_shape_simple_fn((m, n), || {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    });

    let sigma_e = config.sigma2_e(&prior).sqrt();
    let mut rng = stream_rng(config.seed, NOISE_STREAM);
    let e = Array1::from_shape_simple_fn(m, || {
        let z: f64 = rng.sample(StandardNormal);
        sigma_e * z
    });

    let y = a.dot(&s0) + &e;
    let row_ranges = partition_rows(m, config.p)?;
    Ok(ProblemInstance {
        config,
        prior,
        s0,
        a,
        e,
        y,
        row_ranges,
    })
}

/// 10 log10(||s0||^2 / ||x - s0||^2); `+inf` when `x == s0`.
pub fn empirical_sdr(x: &[f64], s0: &[f64]) -> Result<f64> {
    if x.len() != s0.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} vs {}",
            x.len(),
            s0.len()
        )));
    }
    let signal: f64 = s0.iter().map(|v| v * v).sum();
    let err: f64 = x.iter().zip(s0).map(|(a, b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / err).log10())
}
