//! Centralized AMP and its P-processor decomposition with coded uplinks.
//!
//! Processors and the fusion center are separate structs that talk only
//! through [`UplinkMessage`] and [`DownlinkMessage`]. Row `t` of a trace
//! describes the estimate `x_t`: its empirical SDR, the residual estimate
//! `||z_t||^2 / M` of the channel variance `sigma2_t`, and the SE
//! predictions of that variance.

use ndarray::{s, Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    bt_reference, bt_step, AllocationContext, AllocationPlan, BTPolicy, ECSQ_GAP_BITS,
};
use crate::denoiser::{initial_sigma2, se_step, BgDenoiser, EffectiveChannel};
use crate::error::{Error, Result};
use crate::model::{empirical_sdr, stream_rng, ProblemInstance, SignalPrior, CODER_STREAM};
use crate::quantizer::{self, CodedBlock, QuantizerSpec, ScalarSourceModel};

/// Bits per element of an uncompressed double-precision uplink.
pub const RAW_BITS: f64 = 64.0;
/// Bits per element of the uncompressed single-precision downlink.
pub const DOWNLINK_BITS: f64 = 32.0;
/// A residual estimate this many times sigma2_0 flags divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    Uncompressed,
    Bt(BTPolicy),
    Dp(AllocationPlan),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Coder {
    /// Additive Gaussian noise at the RD distortion; the RD rate is charged.
    Ideal,
    /// Entropy-coded scalar quantization; measured payload bits are charged.
    #[default]
    Ecsq,
}

/// Where the fusion center takes sigma2_t from when designing the
/// quantizer and the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelEstimate {
    /// `sum_p ||z^p_t||^2 / M` from the side channel.
    #[default]
    Residual,
    /// The offline SE prediction for the coding actually used.
    StateEvolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MpOptions {
    pub channel: ChannelEstimate,
    /// Keep every estimate `x_1 .. x_T` in the result.
    pub record_estimates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub t: usize,
    /// Uplink rate in bits per element per processor.
    pub rate_bits: f64,
    /// Entropy of the quantizer, or the charged model rate without one.
    pub hq_bits: f64,
    /// RD rate achieving the same quantization MSE, when a model is known.
    pub rd_rate_bits: Option<f64>,
    pub sigma2_q: f64,
    pub delta: Option<f64>,
    pub sigma2_c: f64,
    pub sigma2_d_pred: f64,
    pub sigma2_d_emp: f64,
    pub sdr_emp_db: f64,
    pub cum_bits: f64,
    /// Bits over all uplinks of the iteration, headers included.
    pub uplink_bits: f64,
    pub downlink_bits: f64,
    /// Back-tracking could not meet its ratio below the cap.
    pub capped: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub rows: Vec<IterationTrace>,
    #[serde(skip)]
    pub estimates: Vec<Array1<f64>>,
}

impl RunTrace {
    pub fn total_bits(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_bits)
    }

    pub fn rd_total_bits(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.rd_rate_bits).sum()
    }

    pub fn final_sdr_db(&self) -> f64 {
        self.rows.last().map_or(f64::NEG_INFINITY, |r| r.sdr_emp_db)
    }

    pub fn diverged(&self) -> bool {
        self.rows.iter().any(|r| r.diverged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Real values, exact or with ideal-coder noise already added.
    Raw(Vec<f64>),
    Coded(CodedBlock),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UplinkMessage {
    pub processor: usize,
    pub payload: Payload,
    /// `||z^p_t||^2`.
    pub residual_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkMessage {
    pub x_next: Array1<f64>,
    pub eta_prime_mean: f64,
    pub sigma2_hat_d: f64,
}

/// How processors code `f^p_t` this iteration; broadcast by the fusion
/// center, which derives it from scalars both sides already share.
#[derive(Debug, Clone, PartialEq)]
pub enum UplinkCoding {
    None,
    Gaussian { variance: f64, seed: u64, t: usize },
    Ecsq(QuantizerSpec),
}

/// Fusion-side view of one iteration's coding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub prior: SignalPrior,
    pub m: usize,
    pub p: usize,
    /// Quantization noise variance per processor folded into the channel.
    pub sigma2_q: f64,
    /// Channel variance to use instead of the residual estimate.
    pub channel_override: Option<f64>,
}

/// `A^T z`, accumulated row by row; ndarray's transposed product walks the
/// row-major matrix column-wise and is several times slower.
fn transpose_dot(a: ArrayView2<f64>, z: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.ncols());
    for (row, &zi) in a.rows().into_iter().zip(z.iter()) {
        out.scaled_add(zi, &row);
    }
    out
}

/// One logical processor holding a block of rows; its residual is private
/// and only leaves through [`UplinkMessage`].
pub struct Processor<'a> {
    id: usize,
    a: ArrayView2<'a, f64>,
    y: ArrayView1<'a, f64>,
    z: Array1<f64>,
    onsager_scale: f64,
    p: usize,
}

impl<'a> Processor<'a> {
    pub fn new(id: usize, instance: &'a ProblemInstance) -> Self {
        let rows = instance.row_ranges[id].clone();
        let y = instance.y.slice(s![rows.clone()]);
        Processor {
            id,
            a: instance.a.slice(s![rows, ..]),
            y,
            z: y.to_owned(),
            onsager_scale: instance.n() as f64 / instance.m() as f64,
            p: instance.p(),
        }
    }

    pub fn residual_energy(&self) -> f64 {
        self.z.dot(&self.z)
    }

    /// `f^p_t = x_t / P + (A^p)^T z^p_t`.
    pub fn local_estimate(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut f = transpose_dot(self.a, self.z.view());
        f.scaled_add(1.0 / self.p as f64, x);
        f
    }

    pub fn uplink(&self, x: &Array1<f64>, coding: &UplinkCoding) -> Result<UplinkMessage> {
        let f = self.local_estimate(x);
        let payload = match coding {
            UplinkCoding::None => Payload::Raw(f.to_vec()),
            UplinkCoding::Gaussian { variance, seed, t } => {
                let stream = CODER_STREAM + 1 + (*t as u64) * self.p as u64 + self.id as u64;
                let mut rng = stream_rng(*seed, stream);
                let sd = variance.sqrt();
                Payload::Raw(
                    f.iter()
                        .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }
            UplinkCoding::Ecsq(spec) => {
                let (indices, _) = quantizer::quantize(f.as_slice().expect("contiguous"), spec)?;
                Payload::Coded(quantizer::encode(&indices, spec)?)
            }
        };
        Ok(UplinkMessage {
            processor: self.id,
            payload,
            residual_energy: self.residual_energy(),
        })
    }

    /// `z^p_{t+1} = y^p - A^p x_{t+1} + (N/M) mean(eta') z^p_t`.
    pub fn apply(&mut self, down: &DownlinkMessage) {
        let onsager = self.onsager_scale * down.eta_prime_mean;
        let mut z = self.y.to_owned() - self.a.dot(&down.x_next);
        z.scaled_add(onsager, &self.z);
        self.z = z;
    }
}

/// A zero residual means the estimate already explains `y` exactly; the
/// denoiser is then evaluated at the smallest positive variance.
fn exact_floor(sigma2: f64) -> f64 {
    if sigma2 == 0.0 {
        f64::MIN_POSITIVE
    } else {
        sigma2
    }
}

/// Decode, sum in processor order, and denoise. Also returns the summed
/// estimate `f~_t` for diagnostics.
pub fn fusion_aggregate(
    messages: &[UplinkMessage],
    spec: Option<&QuantizerSpec>,
    params: &FusionParams,
) -> Result<(DownlinkMessage, Array1<f64>)> {
    if messages.len() != params.p {
        return Err(Error::Input(format!(
            "fusion expected {} uplinks, got {}",
            params.p,
            messages.len()
        )));
    }
    let mut order: Vec<&UplinkMessage> = messages.iter().collect();
    order.sort_by_key(|m| m.processor);
    if order.iter().enumerate().any(|(i, m)| m.processor != i) {
        return Err(Error::Input(
            "uplinks must come from processors 0..P exactly once".into(),
        ));
    }
    let mut f: Option<Array1<f64>> = None;
    let mut energy = 0.0;
    for msg in order {
        let part: Array1<f64> = match (&msg.payload, spec) {
            (Payload::Raw(v), _) => Array1::from(v.clone()),
            (Payload::Coded(block), Some(spec)) => quantizer::decode(block, spec)?
                .into_iter()
                .map(|k| spec.reconstruct(k))
                .collect(),
            (Payload::Coded(_), None) => {
                return Err(Error::Input("coded uplink without a quantizer spec".into()))
            }
        };
        match &mut f {
            None => f = Some(part),
            Some(acc) if acc.len() == part.len() => *acc += &part,
            Some(acc) => {
                return Err(Error::Input(format!(
                    "uplink of {} elements, expected {}",
                    part.len(),
                    acc.len()
                )))
            }
        }
        energy += msg.residual_energy;
    }
    let f = f.expect("P >= 1");
    let sigma2_hat_d = energy / params.m as f64;
    let base = params.channel_override.unwrap_or(sigma2_hat_d);
    let channel = EffectiveChannel::quantized(exact_floor(base), params.p, params.sigma2_q)?;
    let den = BgDenoiser::new(&params.prior, channel);
    let mut x_next = Array1::zeros(f.len());
    let mut deriv = 0.0;
    for (x, &v) in x_next.iter_mut().zip(f.iter()) {
        let (e, d) = den.eta_and_derivative(v);
        *x = e;
        deriv += d;
    }
    Ok((
        DownlinkMessage {
            x_next,
            eta_prime_mean: deriv / f.len() as f64,
            sigma2_hat_d,
        },
        f,
    ))
}

/// Centralized AMP with the residual estimate of the channel variance.
pub fn run_centralized(instance: &ProblemInstance, iterations: usize) -> Result<RunTrace> {
    run_centralized_with(instance, iterations, &MpOptions::default())
}

pub fn run_centralized_with(
    instance: &ProblemInstance,
    iterations: usize,
    options: &MpOptions,
) -> Result<RunTrace> {
    if iterations == 0 {
        return Err(Error::param("at least one iteration is required"));
    }
    let (a, y) = (&instance.a, &instance.y);
    let (m, n) = (instance.m() as f64, instance.n() as f64);
    let prior = instance.prior;
    let (kappa, s2e) = (instance.kappa(), instance.sigma2_e());
    let sigma2_0 = initial_sigma2(&prior, kappa, s2e);
    let s0 = instance.s0.as_slice().expect("contiguous");

    let mut x = Array1::<f64>::zeros(instance.n());
    let mut z = y.clone();
    let mut se = sigma2_0;
    let mut rows = Vec::with_capacity(iterations);
    let mut estimates = Vec::new();
    for t in 0..iterations {
        let sigma2_hat = z.dot(&z) / m;
        let chan = match options.channel {
            ChannelEstimate::Residual => sigma2_hat,
            ChannelEstimate::StateEvolution => se,
        };
        let channel = match EffectiveChannel::new(exact_floor(chan)) {
            Ok(c) => c,
            Err(_) => break,
        };
        let den = BgDenoiser::new(&prior, channel);
        let mut f = transpose_dot(a.view(), z.view());
        f += &x;
        let mut deriv = 0.0;
        let x_next: Array1<f64> = f
            .iter()
            .map(|&v| {
                let (e, d) = den.eta_and_derivative(v);
                deriv += d;
                e
            })
            .collect();
        let onsager = (n / m) * deriv / n;
        let mut z_next = y - &a.dot(&x_next);
        z_next.scaled_add(onsager, &z);
        x = x_next;
        z = z_next;
        se = se_step(se, 0.0, &prior, kappa, s2e)?;
        let emp = z.dot(&z) / m;
        rows.push(IterationTrace {
            t: t + 1,
            rate_bits: 0.0,
            hq_bits: 0.0,
            rd_rate_bits: None,
            sigma2_q: 0.0,
            delta: None,
            sigma2_c: se,
            sigma2_d_pred: se,
            sigma2_d_emp: emp,
            sdr_emp_db: empirical_sdr(x.as_slice().expect("contiguous"), s0)?,
            cum_bits: 0.0,
            uplink_bits: 0.0,
            downlink_bits: 0.0,
            capped: false,
            diverged: !(emp.is_finite() && emp <= DIVERGENCE_FACTOR * sigma2_0),
        });
        if options.record_estimates {
            estimates.push(x.clone());
        }
        if !emp.is_finite() {
            break;
        }
    }
    Ok(RunTrace { rows, estimates })
}

/// Per-iteration coding chosen by the fusion center.
struct Decision {
    coding: UplinkCoding,
    sigma2_q: f64,
    /// Charged rate for the ideal coder; measured otherwise.
    model_rate: Option<f64>,
    rd_rate: Option<f64>,
    capped: bool,
}

fn need_ctx(ctx: Option<&AllocationContext>) -> Result<&AllocationContext> {
    ctx.ok_or_else(|| Error::param("compressed modes need an allocation context"))
}

#[allow(clippy::too_many_arguments)]
fn decide(
    mode: &Mode,
    coder: Coder,
    ctx: Option<&AllocationContext>,
    sigma2_t: f64,
    t: usize,
    central: &[f64],
    instance: &ProblemInstance,
) -> Result<Decision> {
    let ideal = |sigma2_q: f64, rate: f64, rd_rate: Option<f64>, capped: bool| Decision {
        coding: UplinkCoding::Gaussian {
            variance: sigma2_q,
            seed: instance.config.seed,
            t,
        },
        sigma2_q,
        model_rate: Some(rate),
        rd_rate,
        capped,
    };
    match mode {
        Mode::Uncompressed => Ok(Decision {
            coding: UplinkCoding::None,
            sigma2_q: 0.0,
            model_rate: Some(RAW_BITS),
            rd_rate: None,
            capped: false,
        }),
        Mode::Dp(plan) => {
            let ctx = need_ctx(ctx)?;
            let rate = *plan.rates.get(t).ok_or_else(|| {
                Error::param(format!(
                    "plan has {} iterations, run needs more",
                    plan.len()
                ))
            })?;
            match coder {
                Coder::Ideal => {
                    let d = ctx.distortion(sigma2_t, rate)?;
                    Ok(ideal(d, rate, Some(rate), false))
                }
                Coder::Ecsq => {
                    let src = ScalarSourceModel::new(ctx.prior, sigma2_t, ctx.p)?;
                    let delta = quantizer::delta_for_rate(&src, rate + ECSQ_GAP_BITS)?;
                    let spec = quantizer::design(&src, delta)?;
                    if !spec.noise_model_valid(&src) {
                        log::warn!(
                            "t = {t}: bin width {delta:.3e} exceeds {:.3e}, uniform-noise model is loose",
                            src.max_model_delta()
                        );
                    }
                    Ok(Decision {
                        sigma2_q: spec.model_mse,
                        coding: UplinkCoding::Ecsq(spec),
                        model_rate: None,
                        rd_rate: Some(rate),
                        capped: false,
                    })
                }
            }
        }
        Mode::Bt(policy) => {
            let ctx = need_ctx(ctx)?;
            let reference = bt_reference(policy, ctx, sigma2_t, t, central)?;
            let d = bt_step(sigma2_t, reference, policy, ctx)?;
            let rd = ctx.rate_for_distortion(sigma2_t, d.sigma2_q)?;
            match coder {
                Coder::Ideal => Ok(ideal(d.sigma2_q, rd, Some(rd), d.capped)),
                Coder::Ecsq => {
                    let src = ScalarSourceModel::new(ctx.prior, sigma2_t, ctx.p)?;
                    Ok(Decision {
                        coding: UplinkCoding::Ecsq(quantizer::design(&src, d.delta)?),
                        sigma2_q: d.sigma2_q,
                        model_rate: None,
                        rd_rate: Some(rd),
                        capped: d.capped,
                    })
                }
            }
        }
    }
}

/// P-processor MP-AMP. `ctx` supplies the rate models and is required by
/// the compressed modes.
pub fn run_mp(
    instance: &ProblemInstance,
    mode: &Mode,
    coder: Coder,
    iterations: usize,
    ctx: Option<&AllocationContext>,
    options: &MpOptions,
) -> Result<RunTrace> {
    if iterations == 0 {
        return Err(Error::param("at least one iteration is required"));
    }
    if let Mode::Dp(plan) = mode {
        if plan.len() != iterations {
            return Err(Error::param(format!(
                "plan length {} differs from T = {iterations}",
                plan.len()
            )));
        }
    }
    let p = instance.p();
    let (n, m) = (instance.n(), instance.m());
    let prior = instance.prior;
    let (kappa, s2e) = (instance.kappa(), instance.sigma2_e());
    let sigma2_0 = initial_sigma2(&prior, kappa, s2e);
    let s0 = instance.s0.as_slice().expect("contiguous");

    let mut central = vec![sigma2_0];
    for _ in 0..=iterations {
        let next = se_step(*central.last().expect("non-empty"), 0.0, &prior, kappa, s2e)?;
        central.push(next);
    }

    let mut procs: Vec<Processor> = (0..p).map(|id| Processor::new(id, instance)).collect();
    let mut x = Array1::<f64>::zeros(n);
    let mut pred = sigma2_0;
    let mut cum = 0.0;
    let mut rows = Vec::with_capacity(iterations);
    let mut estimates = Vec::new();
    for t in 0..iterations {
        // Side channel first: the fusion center needs sigma2_hat to pick the coding.
        let energy: f64 = procs.iter().map(Processor::residual_energy).sum();
        let sigma2_hat = energy / m as f64;
        if !sigma2_hat.is_finite() {
            break;
        }
        let sigma2_t = match options.channel {
            ChannelEstimate::Residual => sigma2_hat,
            ChannelEstimate::StateEvolution => pred,
        };
        let decision = decide(mode, coder, ctx, sigma2_t, t, &central, instance)?;
        let messages = procs
            .iter()
            .map(|pr| pr.uplink(&x, &decision.coding))
            .collect::<Result<Vec<_>>>()?;
        let spec = match &decision.coding {
            UplinkCoding::Ecsq(spec) => Some(spec),
            _ => None,
        };
        let params = FusionParams {
            prior,
            m,
            p,
            sigma2_q: decision.sigma2_q,
            channel_override: match options.channel {
                ChannelEstimate::Residual => None,
                ChannelEstimate::StateEvolution => Some(pred),
            },
        };
        let (down, _) = fusion_aggregate(&messages, spec, &params)?;

        let payload_bits: usize = messages
            .iter()
            .map(|msg| match &msg.payload {
                Payload::Coded(b) => b.payload_bits(),
                Payload::Raw(_) => 0,
            })
            .sum();
        let (rate_bits, uplink_bits) = match (decision.model_rate, spec) {
            (Some(r), _) => (r, r * (n * p) as f64),
            (None, _) => {
                let framed: usize = messages
                    .iter()
                    .map(|msg| match &msg.payload {
                        Payload::Coded(b) => 8 * b.to_bytes().len(),
                        Payload::Raw(v) => 64 * v.len(),
                    })
                    .sum();
                (payload_bits as f64 / (n * p) as f64, framed as f64)
            }
        };
        cum += rate_bits;

        for pr in procs.iter_mut() {
            pr.apply(&down);
        }
        x = down.x_next;
        pred = se_step(pred, p as f64 * decision.sigma2_q, &prior, kappa, s2e)?;
        let emp: f64 = procs.iter().map(Processor::residual_energy).sum::<f64>() / m as f64;
        rows.push(IterationTrace {
            t: t + 1,
            rate_bits,
            hq_bits: spec.map_or(rate_bits, |s| s.entropy_bits),
            rd_rate_bits: decision.rd_rate,
            sigma2_q: decision.sigma2_q,
            delta: spec.map(|s| s.delta),
            sigma2_c: central[t + 1],
            sigma2_d_pred: pred,
            sigma2_d_emp: emp,
            sdr_emp_db: empirical_sdr(x.as_slice().expect("contiguous"), s0)?,
            cum_bits: cum,
            uplink_bits,
            downlink_bits: DOWNLINK_BITS * n as f64,
            capped: decision.capped,
            diverged: !(emp.is_finite() && emp <= DIVERGENCE_FACTOR * sigma2_0),
        });
        if options.record_estimates {
            estimates.push(x.clone());
        }
    }
    Ok(RunTrace { rows, estimates })
}
