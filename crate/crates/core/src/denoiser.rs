//! Conditional-mean denoiser for the spike-and-slab prior and the
//! state-evolution recursion, with and without extra quantization noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SignalPrior;
use crate::quadrature::{integrate, AdaptiveOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Half-width, in standard deviations, of the integration window used by SE.
const SE_WINDOW: f64 = 12.0;

/// Variance of the Gaussian scalar channel seen by the denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveChannel {
    sigma2: f64,
}

impl EffectiveChannel {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::param(format!(
                "channel variance must be positive and finite, got {sigma2}"
            )));
        }
        Ok(EffectiveChannel { sigma2 })
    }

    /// Channel with quantization noise folded in: `sigma2_t + P * sigma2_q`.
    pub fn quantized(sigma2_t: f64, p: usize, sigma2_q: f64) -> Result<Self> {
        Self::new(sigma2_t + p as f64 * sigma2_q)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

/// Denoiser with the per-channel constants hoisted out of the hot loop.
#[derive(Debug, Clone, Copy)]
pub struct BgDenoiser {
    v: f64,
    mu: f64,
    sigma2_s: f64,
    slab_var: f64,
    log_slab_norm: f64,
    log_spike_norm: f64,
    shrink: f64,
}

impl BgDenoiser {
    pub fn new(prior: &SignalPrior, channel: EffectiveChannel) -> Self {
        let v = channel.sigma2;
        let sigma2_s = prior.sigma2_s();
        let slab_var = sigma2_s + v;
        BgDenoiser {
            v,
            mu: prior.mu_s,
            sigma2_s,
            slab_var,
            log_slab_norm: prior.epsilon.ln() - 0.5 * (LN_2PI + slab_var.ln()),
            log_spike_norm: (-prior.epsilon).ln_1p() - 0.5 * (LN_2PI + v.ln()),
            shrink: sigma2_s / slab_var,
        }
    }

    /// Posterior probability that the observation came from the slab.
    #[inline]
    pub fn responsibility(&self, f: f64) -> f64 {
        let d = f - self.mu;
        let la = self.log_slab_norm - d * d / (2.0 * self.slab_var);
        let lb = self.log_spike_norm - f * f / (2.0 * self.v);
        // logistic(la - lb), stable in both tails
        let x = la - lb;
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Slab posterior mean.
    #[inline]
    pub fn slab_mean(&self, f: f64) -> f64 {
        (self.sigma2_s * f + self.v * self.mu) / self.slab_var
    }

    #[inline]
    pub fn eta(&self, f: f64) -> f64 {
        self.responsibility(f) * self.slab_mean(f)
    }

    /// Returns `(eta(f), eta'(f))`.
    #[inline]
    pub fn eta_and_derivative(&self, f: f64) -> (f64, f64) {
        let pi = self.responsibility(f);
        let m = self.slab_mean(f);
        let dlog = f / self.v - (f - self.mu) / self.slab_var;
        (pi * m, pi * (1.0 - pi) * dlog * m + pi * self.shrink)
    }

    /// Observation magnitude at which the responsibility crosses 1/2, if any
    /// (only defined for a zero-mean slab).
    fn crossover(&self) -> Option<f64> {
        if self.mu != 0.0 {
            return None;
        }
        let gap = self.log_spike_norm - self.log_slab_norm;
        let curv = 0.5 * (1.0 / self.v - 1.0 / self.slab_var);
        let f2 = gap / curv;
        (f2 > 0.0).then(|| f2.sqrt())
    }
}

fn check_finite(f: f64) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "denoiser input must be finite, got {f}"
        )))
    }
}

/// E[S0 | S0 + sqrt(v) Z = f].
pub fn eta(f: f64, channel: EffectiveChannel, prior: &SignalPrior) -> Result<f64> {
    check_finite(f)?;
    Ok(BgDenoiser::new(prior, channel).eta(f))
}

/// Derivative of [`eta`] with respect to `f`.
pub fn eta_prime(f: f64, channel: EffectiveChannel, prior: &SignalPrior) -> Result<f64> {
    check_finite(f)?;
    Ok(BgDenoiser::new(prior, channel).eta_and_derivative(f).1)
}

/// Mean squared error E[(eta(S0 + sqrt(v) Z) - S0)^2] of the matched denoiser.
///
/// The slab branch is integrated conditionally on the observation, which
/// turns the two-dimensional expectation into a one-dimensional one:
/// `E[(eta(F) - m(F))^2] + sigma_s^2 v / (sigma_s^2 + v)` with `F` Gaussian.
pub fn denoiser_mse(v: f64, prior: &SignalPrior, opts: AdaptiveOptions) -> Result<f64> {
    let den = BgDenoiser::new(prior, EffectiveChannel::new(v)?);
    let eps = prior.epsilon;
    let cross = den.crossover();
    let inv_sqrt_2pi = 0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2;
    let phi = |u: f64| inv_sqrt_2pi * (-0.5 * u * u).exp();

    let spike = if eps < 1.0 {
        let sd = v.sqrt();
        let bps: Vec<f64> = cross.iter().flat_map(|c| [-c / sd, c / sd]).collect();
        let g = |u: f64| {
            let e = den.eta(sd * u);
            e * e * phi(u)
        };
        integrate(g, -SE_WINDOW, SE_WINDOW, &bps, opts)?
    } else {
        0.0
    };

    let sd = den.slab_var.sqrt();
    let mu = prior.mu_s;
    // The mismatch (1 - pi)^2 m^2 switches off within a few channel standard
    // deviations of the crossover, which is narrow on the slab's scale.
    let mut bps = vec![0.0];
    if let Some(c) = cross {
        let w = v.sqrt();
        for k in [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0] {
            let x = (c + k * w) / sd;
            if x > 0.0 {
                bps.extend([-x, x]);
            }
        }
    }
    let g = |u: f64| {
        let f = mu + sd * u;
        let d = den.eta(f) - den.slab_mean(f);
        d * d * phi(u)
    };
    let slab_mismatch = integrate(g, -SE_WINDOW, SE_WINDOW, &bps, opts)?;
    let posterior_var = den.sigma2_s * v / den.slab_var;

    let mse = (1.0 - eps) * spike + eps * (slab_mismatch + posterior_var);
    if !(mse >= 0.0 && mse.is_finite()) {
        return Err(Error::Numerical {
            context: "denoiser_mse",
            detail: format!("mse={mse} at v={v}"),
        });
    }
    Ok(mse)
}

/// One state-evolution step:
/// `sigma2_e + E[(eta(S0 + sqrt(sigma2_t + added_var) Z) - S0)^2] / kappa`.
///
/// `added_var` is `P * sigma2_q`; zero recovers the unquantized recursion.
pub fn se_step(
    sigma2_t: f64,
    added_var: f64,
    prior: &SignalPrior,
    kappa: f64,
    sigma2_e: f64,
) -> Result<f64> {
    se_step_with(
        sigma2_t,
        added_var,
        prior,
        kappa,
        sigma2_e,
        AdaptiveOptions::default(),
    )
}

pub fn se_step_with(
    sigma2_t: f64,
    added_var: f64,
    prior: &SignalPrior,
    kappa: f64,
    sigma2_e: f64,
    opts: AdaptiveOptions,
) -> Result<f64> {
    if !(sigma2_t > 0.0) || !(added_var >= 0.0) || !(kappa > 0.0) || !(sigma2_e >= 0.0) {
        return Err(Error::param(format!(
            "se_step arguments out of range: sigma2_t={sigma2_t}, added_var={added_var}, kappa={kappa}, sigma2_e={sigma2_e}"
        )));
    }
    let mse = denoiser_mse(sigma2_t + added_var, prior, opts)?;
    Ok(sigma2_e + mse / kappa)
}

/// sigma2_0 = sigma2_e + E[S0^2] / kappa.
pub fn initial_sigma2(prior: &SignalPrior, kappa: f64, sigma2_e: f64) -> f64 {
    sigma2_e + prior.second_moment() / kappa
}

/// SDR implied by an SE variance; `+inf` once `sigma2 <= sigma2_e`.
pub fn se_sdr_db(sigma2: f64, prior: &SignalPrior, kappa: f64, sigma2_e: f64) -> f64 {
    let excess = sigma2 - sigma2_e;
    if excess <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * ((prior.second_moment() / kappa) / excess).log10()
}

/// Result of iterating state evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SETrace {
    /// sigma2_0 .. sigma2_T
    pub sigma2_seq: Vec<f64>,
    pub sdr_seq: Vec<f64>,
    /// Number of iterations after which SDR gains drop below the tolerance.
    pub steady_state_t: Option<usize>,
}

/// Iterate SE from sigma2_0 for `t_max` steps. Step `t` (0-based) adds
/// `added_var_seq[t]`, or zero once the sequence runs out.
///
/// `steady_state_t` is the iteration count `t + 1` for the first `t` with
/// `|SDR(t+1) - SDR(t)| < steady_tol_db`, i.e. the number of iterations
/// after which further iterations stop paying off.
pub fn se_trajectory(
    prior: &SignalPrior,
    kappa: f64,
    sigma2_e: f64,
    added_var_seq: &[f64],
    t_max: usize,
    steady_tol_db: f64,
) -> Result<SETrace> {
    if t_max == 0 {
        return Err(Error::param("t_max must be at least 1"));
    }
    let mut sigma2 = initial_sigma2(prior, kappa, sigma2_e);
    let mut sigma2_seq = vec![sigma2];
    let mut sdr_seq = vec![se_sdr_db(sigma2, prior, kappa, sigma2_e)];
    for t in 0..t_max {
        let added = added_var_seq.get(t).copied().unwrap_or(0.0);
        sigma2 = se_step(sigma2, added, prior, kappa, sigma2_e)?;
        sigma2_seq.push(sigma2);
        sdr_seq.push(se_sdr_db(sigma2, prior, kappa, sigma2_e));
    }
    let steady_state_t = sdr_seq.windows(2).position(|w| {
        let d = w[1] - w[0];
        // both +inf: nothing left to gain
        d.is_nan() || d.abs() < steady_tol_db
    });
    Ok(SETrace {
        sigma2_seq,
        sdr_seq,
        steady_state_t: steady_state_t.map(|t| t + 1),
    })
}
