//! Per-iteration coding-rate allocation: the online back-tracking rule and
//! the offline dynamic program over a discretized rate budget.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{initial_sigma2, se_step};
use crate::error::{Error, Result};
use crate::model::SignalPrior;
use crate::quantizer::{self, ScalarSourceModel};
use crate::ratedist::{default_rate_grid, BaSettings, RdBank, RdCache};

/// Bits per element conventionally added to RD-predicted rates to account for
/// entropy-coded scalar quantization.
pub const ECSQ_GAP_BITS: f64 = 0.255;

/// What the back-tracking ratio is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BtReference {
    /// One unquantized SE step from the current distributed estimate.
    #[default]
    OneStep,
    /// The precomputed centralized SE trajectory at the next iteration.
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BTPolicy {
    /// Largest allowed ratio sigma2_{t+1,D} / sigma2_{t+1,C}.
    pub gamma: f64,
    /// Per-iteration rate ceiling in bits per element.
    pub rate_cap_bits: f64,
    pub reference: BtReference,
}

impl Default for BTPolicy {
    fn default() -> Self {
        BTPolicy {
            gamma: 1.1,
            rate_cap_bits: 6.0,
            reference: BtReference::OneStep,
        }
    }
}

impl BTPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return Err(Error::param(format!(
                "gamma must exceed 1, got {}",
                self.gamma
            )));
        }
        if !(self.rate_cap_bits > 0.0 && self.rate_cap_bits.is_finite()) {
            return Err(Error::param(format!(
                "rate cap must be positive, got {}",
                self.rate_cap_bits
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    /// R_1 .. R_T in bits per element.
    pub rates: Vec<f64>,
    /// Predicted sigma2_{t,D} after each iteration.
    pub predicted_sigma2: Vec<f64>,
    pub total_bits: f64,
}

impl AllocationPlan {
    pub fn new(rates: Vec<f64>, predicted_sigma2: Vec<f64>) -> Result<Self> {
        if rates.len() != predicted_sigma2.len() {
            return Err(Error::param("plan rates and predictions differ in length"));
        }
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::param("plan rates must be finite and nonnegative"));
        }
        let total_bits = rates.iter().sum();
        Ok(AllocationPlan {
            rates,
            predicted_sigma2,
            total_bits,
        })
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// Write `t,rate_bits,predicted_sigma2` rows, `t` counting from 1.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,rate_bits,predicted_sigma2\n");
        for (t, (r, s)) in self.rates.iter().zip(&self.predicted_sigma2).enumerate() {
            let _ = writeln!(out, "{},{},{}", t + 1, r, s);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("t,rate_bits,predicted_sigma2") {
            return Err(Error::Decode(format!(
                "{}: missing plan header",
                path.display()
            )));
        }
        let (mut rates, mut sigma2) = (Vec::new(), Vec::new());
        for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let bad = || Error::Decode(format!("{}: bad plan row {}", path.display(), k + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 || f[0].parse::<usize>().map_err(|_| bad())? != k + 1 {
                return Err(bad());
            }
            rates.push(f[1].parse().map_err(|_| bad())?);
            sigma2.push(f[2].parse().map_err(|_| bad())?);
        }
        AllocationPlan::new(rates, sigma2)
    }
}

/// How quantization MSE follows from rate in the offline model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RdModel {
    /// Blahut-Arimoto curves of the actual mixture source.
    Bank(RdBank),
    /// Gaussian surrogate `D = Var(F) 2^{-2R}`.
    Gaussian,
}

/// Shared inputs of `f1`, back-tracking and the dynamic program.
#[derive(Debug, Clone)]
pub struct AllocationContext {
    pub prior: SignalPrior,
    pub kappa: f64,
    pub sigma2_e: f64,
    pub p: usize,
    pub rd: RdModel,
}

/// Which RD backend [`AllocationContext::build`] prepares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RdChoice {
    Ba {
        #[serde(default = "default_bank_nodes")]
        nodes: usize,
        #[serde(default)]
        settings: BaSettings,
    },
    Gaussian,
}

fn default_bank_nodes() -> usize {
    12
}

impl Default for RdChoice {
    fn default() -> Self {
        RdChoice::Ba {
            nodes: default_bank_nodes(),
            settings: BaSettings::default(),
        }
    }
}

/// Centralized SE fixed point, reached when successive variances agree to
/// one part in 10^12.
pub fn centralized_fixed_point(prior: &SignalPrior, kappa: f64, sigma2_e: f64) -> Result<f64> {
    let mut s = initial_sigma2(prior, kappa, sigma2_e);
    for _ in 0..10_000 {
        let next = se_step(s, 0.0, prior, kappa, sigma2_e)?;
        if (next - s).abs() <= 1e-12 * s {
            return Ok(next);
        }
        s = next;
    }
    Err(Error::Numerical {
        context: "centralized_fixed_point",
        detail: "state evolution did not settle".into(),
    })
}

impl AllocationContext {
    /// Context with the chosen RD backend. A BA bank spans sigma2 from just
    /// below the centralized fixed point up to sigma2_0, which brackets every
    /// state the recursions can visit.
    pub fn build(
        prior: SignalPrior,
        kappa: f64,
        sigma2_e: f64,
        p: usize,
        choice: RdChoice,
        cache: Option<&RdCache>,
    ) -> Result<Self> {
        prior.validate()?;
        if p == 0 || !(kappa > 0.0) || !(sigma2_e >= 0.0) {
            return Err(Error::param("invalid allocation context parameters"));
        }
        let rd = match choice {
            RdChoice::Gaussian => RdModel::Gaussian,
            RdChoice::Ba { nodes, settings } => {
                let lo = 0.95 * centralized_fixed_point(&prior, kappa, sigma2_e)?;
                let hi = initial_sigma2(&prior, kappa, sigma2_e);
                RdModel::Bank(RdBank::build(
                    prior,
                    p,
                    (lo, hi),
                    nodes,
                    &default_rate_grid(),
                    &settings,
                    cache,
                )?)
            }
        };
        Ok(AllocationContext {
            prior,
            kappa,
            sigma2_e,
            p,
            rd,
        })
    }

    pub fn sigma2_0(&self) -> f64 {
        initial_sigma2(&self.prior, self.kappa, self.sigma2_e)
    }

    pub fn source(&self, sigma2_t: f64) -> Result<ScalarSourceModel> {
        ScalarSourceModel::new(self.prior, sigma2_t, self.p)
    }

    pub fn se_step(&self, sigma2: f64, added_var: f64) -> Result<f64> {
        se_step(sigma2, added_var, &self.prior, self.kappa, self.sigma2_e)
    }

    /// Modelled quantization MSE of `f^p_t` at rate `rate` when the channel
    /// variance is `sigma2_t`.
    pub fn distortion(&self, sigma2_t: f64, rate: f64) -> Result<f64> {
        match &self.rd {
            RdModel::Bank(bank) => bank.distortion(sigma2_t, rate),
            RdModel::Gaussian => Ok(self.source(sigma2_t)?.variance() * 4f64.powf(-rate)),
        }
    }

    /// Inverse of [`distortion`](Self::distortion).
    pub fn rate_for_distortion(&self, sigma2_t: f64, d: f64) -> Result<f64> {
        match &self.rd {
            RdModel::Bank(bank) => bank.rate(sigma2_t, d),
            RdModel::Gaussian => {
                let var = self.source(sigma2_t)?.variance();
                Ok((0.5 * (var / d).log2()).max(0.0))
            }
        }
    }

    /// Next distributed SE variance after spending `rate` bits per element
    /// with the RD model.
    pub fn f1(&self, sigma2_prev: f64, rate: f64) -> Result<f64> {
        let d = self.distortion(sigma2_prev, rate)?;
        self.se_step(sigma2_prev, self.p as f64 * d)
    }

    /// ECSQ counterpart of [`f1`](Self::f1): the quantizer whose entropy is
    /// `rate`, clipped to the bin widths where the additive-noise model
    /// holds. Returns the next variance and the quantizer's bin width.
    pub fn f1_ecsq(&self, sigma2_prev: f64, rate: f64) -> Result<(f64, f64)> {
        let src = self.source(sigma2_prev)?;
        let delta = ecsq_delta(&src, rate)?;
        let next = self.se_step(sigma2_prev, self.p as f64 * quantizer::model_mse(delta))?;
        Ok((next, delta))
    }
}

/// Entropy of the widest bin that keeps the additive-noise model valid;
/// the smallest rate back-tracking may choose.
pub fn min_ecsq_rate(source: &ScalarSourceModel) -> Result<f64> {
    Ok(quantizer::design(source, source.max_model_delta())?.entropy_bits)
}

fn ecsq_delta(source: &ScalarSourceModel, rate: f64) -> Result<f64> {
    let widest = source.max_model_delta();
    if rate <= min_ecsq_rate(source)? {
        return Ok(widest);
    }
    Ok(quantizer::delta_for_rate(source, rate)?.min(widest))
}

/// One back-tracking decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtDecision {
    /// Chosen ECSQ rate in bits per element.
    pub rate: f64,
    pub delta: f64,
    pub sigma2_q: f64,
    /// SE prediction of sigma2_{t+1,D} at the chosen rate.
    pub predicted_sigma2: f64,
    /// The ratio constraint could not be met below the cap.
    pub capped: bool,
}

/// Resolution of the back-tracking rate search, in bits.
pub const BT_RESOLUTION: f64 = 1e-3;

/// Smallest ECSQ rate whose SE prediction stays within `gamma` of
/// `sigma2_next_c`, found by bisection; falls back to the cap.
pub fn bt_step(
    sigma2_hat_d: f64,
    sigma2_next_c: f64,
    policy: &BTPolicy,
    ctx: &AllocationContext,
) -> Result<BtDecision> {
    policy.validate()?;
    if !(sigma2_hat_d > 0.0) || !(sigma2_next_c > 0.0) {
        return Err(Error::param("back-tracking variances must be positive"));
    }
    let target = policy.gamma * sigma2_next_c;
    let src = ctx.source(sigma2_hat_d)?;
    let decide = |rate: f64, capped: bool| -> Result<BtDecision> {
        let (predicted_sigma2, delta) = ctx.f1_ecsq(sigma2_hat_d, rate)?;
        Ok(BtDecision {
            rate,
            delta,
            sigma2_q: quantizer::model_mse(delta),
            predicted_sigma2,
            capped,
        })
    };
    let cap = policy.rate_cap_bits;
    let lo_rate = min_ecsq_rate(&src)?;
    if lo_rate >= cap {
        return decide(cap, true);
    }
    let at_lo = decide(lo_rate, false)?;
    if at_lo.predicted_sigma2 <= target {
        return Ok(at_lo);
    }
    let at_cap = decide(cap, false)?;
    if at_cap.predicted_sigma2 > target {
        return Ok(BtDecision {
            capped: true,
            ..at_cap
        });
    }
    let (mut lo, mut hi) = (lo_rate, cap);
    let mut best = at_cap;
    while hi - lo > BT_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        let d = decide(mid, false)?;
        if d.predicted_sigma2 <= target {
            hi = mid;
            best = d;
        } else {
            lo = mid;
        }
    }
    Ok(best)
}

/// Offline back-tracking run driven by SE predictions in place of the
/// residual-energy estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtPlan {
    /// ECSQ rates and predicted variances.
    pub plan: AllocationPlan,
    /// RD rates achieving the same quantization MSEs.
    pub rd_rates: Vec<f64>,
    pub decisions: Vec<BtDecision>,
}

/// The centralized reference sigma2_{t+1,C} for back-tracking at iteration
/// `t` (0-based), given the current estimate and the centralized trajectory
/// `sigma2_0 .. sigma2_T`.
pub fn bt_reference(
    policy: &BTPolicy,
    ctx: &AllocationContext,
    sigma2_hat_d: f64,
    t: usize,
    central: &[f64],
) -> Result<f64> {
    match policy.reference {
        BtReference::OneStep => ctx.se_step(sigma2_hat_d, 0.0),
        BtReference::Trajectory => central.get(t + 1).copied().ok_or_else(|| {
            Error::param(format!(
                "centralized trajectory too short for iteration {}",
                t + 1
            ))
        }),
    }
}

pub fn bt_plan(ctx: &AllocationContext, policy: &BTPolicy, iterations: usize) -> Result<BtPlan> {
    let mut central = vec![ctx.sigma2_0()];
    for _ in 0..iterations {
        let next = ctx.se_step(*central.last().expect("non-empty"), 0.0)?;
        central.push(next);
    }
    let mut sigma2 = ctx.sigma2_0();
    let (mut rates, mut predicted, mut rd_rates, mut decisions) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in 0..iterations {
        let reference = bt_reference(policy, ctx, sigma2, t, &central)?;
        let d = bt_step(sigma2, reference, policy, ctx)?;
        rd_rates.push(ctx.rate_for_distortion(sigma2, d.sigma2_q)?);
        rates.push(d.rate);
        predicted.push(d.predicted_sigma2);
        decisions.push(d);
        sigma2 = d.predicted_sigma2;
    }
    Ok(BtPlan {
        plan: AllocationPlan::new(rates, predicted)?,
        rd_rates,
        decisions,
    })
}

/// Dynamic-programming tables; row `s` (0-based) corresponds to a budget of
/// `s * delta_r` bits spent so far, column `t` to iteration `t + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DPTables {
    pub sigma2_table: Array2<f64>,
    pub rate_table: Array2<f64>,
    pub delta_r: f64,
    /// Number of budget levels, `R / delta_r + 1`.
    pub s: usize,
}

/// Number of `delta_r` steps in `r_total`, if it divides evenly.
pub fn budget_steps(r_total: f64, delta_r: f64) -> Result<usize> {
    if !(r_total > 0.0 && delta_r > 0.0) || !r_total.is_finite() || !delta_r.is_finite() {
        return Err(Error::param(format!(
            "budget {r_total} and resolution {delta_r} must be positive"
        )));
    }
    let k = (r_total / delta_r).round();
    if (k * delta_r - r_total).abs() > 1e-9 * r_total.max(1.0) || k < 1.0 {
        return Err(Error::param(format!(
            "resolution {delta_r} does not divide the budget {r_total}"
        )));
    }
    Ok(k as usize)
}

/// Minimize the final SE variance over allocations of `r_total` bits to
/// `iterations` iterations in steps of `delta_r`.
///
/// Column 1 is `f1(sigma2_0, R)`; later columns minimize
/// `f1(sigma2(r, t-1), R(s) - R(r))` over the budget `r` already spent,
/// preferring the smallest `r` among ties. The plan is read back from the
/// full-budget cell of the last column.
pub fn dp_allocate(
    sigma2_0: f64,
    r_total: f64,
    iterations: usize,
    delta_r: f64,
    ctx: &AllocationContext,
) -> Result<(AllocationPlan, DPTables)> {
    if iterations == 0 {
        return Err(Error::param("DP needs at least one iteration"));
    }
    if !(sigma2_0 > 0.0) {
        return Err(Error::param("sigma2_0 must be positive"));
    }
    let steps = budget_steps(r_total, delta_r)?;
    let s_count = steps + 1;
    let rate_of = |k: usize| k as f64 * delta_r;
    let mut sigma2 = Array2::<f64>::zeros((s_count, iterations));
    let mut rate = Array2::<f64>::zeros((s_count, iterations));
    let mut spent = Array2::<usize>::zeros((s_count, iterations));

    for s in 0..s_count {
        sigma2[[s, 0]] = ctx.f1(sigma2_0, rate_of(s))?;
        rate[[s, 0]] = rate_of(s);
        spent[[s, 0]] = s;
    }
    for t in 1..iterations {
        for s in 0..s_count {
            let mut best = (f64::INFINITY, 0usize);
            for r in 0..=s {
                let v = ctx.f1(sigma2[[r, t - 1]], rate_of(s - r))?;
                if v < best.0 {
                    best = (v, r);
                }
            }
            sigma2[[s, t]] = best.0;
            rate[[s, t]] = rate_of(s - best.1);
            spent[[s, t]] = s - best.1;
        }
    }

    let mut rates = vec![0.0; iterations];
    let mut predicted = vec![0.0; iterations];
    let mut s = steps;
    for t in (0..iterations).rev() {
        rates[t] = rate[[s, t]];
        predicted[t] = sigma2[[s, t]];
        s -= spent[[s, t]];
    }
    debug_assert_eq!(s, 0);
    let plan = AllocationPlan::new(rates, predicted)?;
    Ok((
        plan,
        DPTables {
            sigma2_table: sigma2,
            rate_table: rate,
            delta_r,
            s: s_count,
        },
    ))
}

/// The conventional ECSQ realization of an RD plan: each iteration pays the
/// high-rate scalar-quantizer gap on top of its RD rate.
pub fn plan_to_ecsq(plan: &AllocationPlan) -> AllocationPlan {
    let rates: Vec<f64> = plan.rates.iter().map(|r| r + ECSQ_GAP_BITS).collect();
    AllocationPlan {
        total_bits: rates.iter().sum(),
        rates,
        predicted_sigma2: plan.predicted_sigma2.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sigma2_e_for;

    fn ctx(eps: f64) -> AllocationContext {
        let prior = SignalPrior::new(eps, 0.0, 1.0).unwrap();
        AllocationContext::build(
            prior,
            0.3,
            sigma2_e_for(eps, 0.3, 20.0),
            30,
            RdChoice::Gaussian,
            None,
        )
        .unwrap()
    }

    #[test]
    fn budget_steps_requires_divisibility() {
        assert_eq!(budget_steps(16.0, 0.1).unwrap(), 160);
        assert_eq!(budget_steps(1.0, 0.2).unwrap(), 5);
        assert!(budget_steps(1.0, 0.3).is_err());
        assert!(budget_steps(0.0, 0.1).is_err());
    }

    #[test]
    fn single_iteration_takes_the_whole_budget() {
        let c = ctx(0.05);
        let (plan, tables) = dp_allocate(c.sigma2_0(), 3.0, 1, 0.5, &c).unwrap();
        assert_eq!(plan.rates, vec![3.0]);
        assert_eq!(tables.s, 7);
        assert_eq!(plan.predicted_sigma2[0], c.f1(c.sigma2_0(), 3.0).unwrap());
    }

    #[test]
    fn ecsq_adjustment_adds_the_gap_per_iteration() {
        let plan = AllocationPlan::new(vec![2.0; 8], vec![1.0; 8]).unwrap();
        let e = plan_to_ecsq(&plan);
        assert!((e.total_bits - 18.04).abs() < 1e-12);
        assert_eq!(e.predicted_sigma2, plan.predicted_sigma2);
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = AllocationPlan::new(vec![0.1, 2.5, 3.0], vec![0.1, 0.01, 0.002]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.csv");
        plan.write(&path).unwrap();
        assert_eq!(AllocationPlan::read(&path).unwrap(), plan);
        std::fs::write(&path, "t,rate_bits,predicted_sigma2\n2,1,1\n").unwrap();
        assert!(AllocationPlan::read(&path).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(BTPolicy::default().validate().is_ok());
        assert!(BTPolicy {
            gamma: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BTPolicy {
            rate_cap_bits: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
