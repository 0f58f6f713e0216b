//! Experiment harness behind the `mpamp` binary: JSON configs, SE and
//! allocation reports, simulation runs, and the total-bits comparison table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::allocation::{
    bt_plan, dp_allocate, plan_to_ecsq, AllocationContext, AllocationPlan, BTPolicy, RdChoice,
};
use crate::denoiser::{se_trajectory, SETrace};
use crate::error::{Error, Result};
use crate::model::{build_instance, ProblemConfig, SignalPrior};
use crate::mpamp::{
    run_centralized_with, run_mp, ChannelEstimate, Coder, Mode, MpOptions, RunTrace,
};
use crate::ratedist::RdCache;

pub const TRACE_HEADER: &str =
    "t,rate_bits,HQ_bits,sigma2_C,sigma2_D_pred,sigma2_D_emp,sdr_C_db,sdr_D_db,cum_bits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    Centralized,
    MpUncompressed,
    Bt,
    Dp,
}

/// Iteration count: a number, or `"auto"` for the SE steady state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "Value", into = "Value")]
pub enum Iterations {
    #[default]
    Auto,
    Fixed(usize),
}

impl TryFrom<Value> for Iterations {
    type Error = String;
    fn try_from(v: Value) -> std::result::Result<Self, String> {
        match &v {
            Value::String(s) if s == "auto" => Ok(Iterations::Auto),
            Value::Number(n) => n
                .as_u64()
                .filter(|&n| n > 0)
                .map(|n| Iterations::Fixed(n as usize))
                .ok_or_else(|| format!("iterations must be a positive integer, got {n}")),
            _ => Err(format!(
                "iterations must be \"auto\" or a positive integer, got {v}"
            )),
        }
    }
}

impl From<Iterations> for Value {
    fn from(i: Iterations) -> Value {
        match i {
            Iterations::Auto => Value::from("auto"),
            Iterations::Fixed(n) => Value::from(n),
        }
    }
}

/// DP budget: bits per element, or `"2T"` for two bits per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "Value", into = "Value")]
pub enum Budget {
    #[default]
    TwoT,
    Bits(f64),
}

impl TryFrom<Value> for Budget {
    type Error = String;
    fn try_from(v: Value) -> std::result::Result<Self, String> {
        match &v {
            Value::String(s) if s == "2T" => Ok(Budget::TwoT),
            Value::Number(n) => n
                .as_f64()
                .filter(|b| *b > 0.0)
                .map(Budget::Bits)
                .ok_or_else(|| format!("r_total must be positive, got {n}")),
            _ => Err(format!(
                "r_total must be \"2T\" or a positive number, got {v}"
            )),
        }
    }
}

impl From<Budget> for Value {
    fn from(b: Budget) -> Value {
        match b {
            Budget::TwoT => Value::from("2T"),
            Budget::Bits(x) => Value::from(x),
        }
    }
}

impl Budget {
    pub fn resolve(self, iterations: usize) -> f64 {
        match self {
            Budget::TwoT => 2.0 * iterations as f64,
            Budget::Bits(b) => b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub r_total: Budget,
    pub delta_r: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            r_total: Budget::TwoT,
            delta_r: 0.1,
        }
    }
}

fn default_steady_tol() -> f64 {
    0.1
}

fn default_auto_cap() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub problem: ProblemConfig,
    pub prior: SignalPrior,
    pub mode: ExperimentMode,
    #[serde(default)]
    pub coder: Coder,
    #[serde(default)]
    pub iterations: Iterations,
    /// SDR gain below which SE counts as settled for `"auto"`.
    #[serde(default = "default_steady_tol")]
    pub steady_tol_db: f64,
    #[serde(default = "default_auto_cap")]
    pub max_auto_iterations: usize,
    #[serde(default)]
    pub bt_policy: BTPolicy,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub rd: RdChoice,
    /// On-disk RD curve cache shared between runs.
    #[serde(default)]
    pub rd_cache: Option<PathBuf>,
    #[serde(default)]
    pub channel: ChannelEstimate,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config {
            field: "<config>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, applying `key.path=json` overrides first.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(
                path.display().to_string(),
                format!("cannot read config: {e}"),
            )
        })?;
        let mut v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, e: Error| Error::config(f, e.to_string());
        self.problem.validate().map_err(|e| field("problem", e))?;
        self.prior.validate().map_err(|e| field("prior", e))?;
        if !(self.steady_tol_db > 0.0) {
            return Err(Error::config("steady_tol_db", "must be positive"));
        }
        if self.max_auto_iterations == 0 {
            return Err(Error::config("max_auto_iterations", "must be positive"));
        }
        match self.mode {
            ExperimentMode::Bt => {
                self.bt_policy
                    .validate()
                    .map_err(|e| field("bt_policy", e))?;
            }
            ExperimentMode::Dp if !(self.dp.delta_r > 0.0 && self.dp.delta_r.is_finite()) => {
                return Err(Error::config("dp.delta_r", "must be a positive number"));
            }
            _ => {}
        }
        if let RdChoice::Ba { nodes, settings } = self.rd {
            if nodes < 2 {
                return Err(Error::config("rd.nodes", "need at least two nodes"));
            }
            if settings.num_points < 101 || settings.num_points % 2 == 0 {
                return Err(Error::config(
                    "rd.settings.num_points",
                    "must be odd and at least 101",
                ));
            }
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        self.problem.kappa()
    }

    pub fn sigma2_e(&self) -> f64 {
        self.problem.sigma2_e(&self.prior)
    }

    pub fn se_trace(&self) -> Result<SETrace> {
        let t_max = match self.iterations {
            Iterations::Fixed(t) => t,
            Iterations::Auto => self.max_auto_iterations,
        };
        se_trajectory(
            &self.prior,
            self.kappa(),
            self.sigma2_e(),
            &[],
            t_max,
            self.steady_tol_db,
        )
    }

    pub fn resolve_iterations(&self) -> Result<usize> {
        match self.iterations {
            Iterations::Fixed(t) => Ok(t),
            Iterations::Auto => self.se_trace()?.steady_state_t.ok_or_else(|| {
                Error::config(
                    "iterations",
                    format!(
                        "SE did not settle within {} iterations",
                        self.max_auto_iterations
                    ),
                )
            }),
        }
    }

    pub fn allocation_context(&self) -> Result<AllocationContext> {
        let cache = RdCache::new();
        if let Some(path) = &self.rd_cache {
            cache.load(path)?;
        }
        let before = cache.len();
        let ctx = AllocationContext::build(
            self.prior,
            self.kappa(),
            self.sigma2_e(),
            self.problem.p,
            self.rd,
            Some(&cache),
        )?;
        if let (Some(path), true) = (&self.rd_cache, cache.len() != before) {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            cache.load(path)?;
            cache.save(path)?;
        }
        Ok(ctx)
    }
}

/// Set `a.b.c` in a JSON tree; the value parses as JSON, else as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key.path=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::config(key, "empty key"))
}

/// One trace row with the centralized SDR of the same instance alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub rate_bits: f64,
    pub hq_bits: f64,
    pub sigma2_c: f64,
    pub sigma2_d_pred: f64,
    pub sigma2_d_emp: f64,
    pub sdr_c_db: f64,
    pub sdr_d_db: f64,
    pub cum_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub epsilon: f64,
    pub mode: ExperimentMode,
    pub coder: Coder,
    pub iterations: usize,
    /// Sum of the per-iteration uplink rates, bits per element.
    pub total_bits: f64,
    /// RD rates of the quantization MSEs actually used.
    pub rd_total_bits: Option<f64>,
    /// DP plan total under the RD model.
    pub plan_total_bits: Option<f64>,
    /// DP plan total with the ECSQ gap added per iteration.
    pub plan_ecsq_total_bits: Option<f64>,
    /// `None` encodes an infinite SDR.
    pub final_sdr_centralized_db: Option<f64>,
    pub final_sdr_mp_db: Option<f64>,
    pub max_sdr_deficit_db: Option<f64>,
    pub max_rate_bits: f64,
    pub capped_iterations: usize,
    pub diverged: bool,
    /// All processors' uplink bits, headers included.
    pub aggregate_uplink_bits: f64,
    /// Uncompressed single-precision downlink, all iterations.
    pub downlink_bits: f64,
    pub code_version: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub trace: Vec<TraceRow>,
    pub summary: Summary,
    pub plan: Option<AllocationPlan>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Nine significant digits; `inf` for the SDR sentinel.
pub fn fmt9(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.8e}")
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let cols = [
            r.rate_bits,
            r.hq_bits,
            r.sigma2_c,
            r.sigma2_d_pred,
            r.sigma2_d_emp,
            r.sdr_c_db,
            r.sdr_d_db,
            r.cum_bits,
        ];
        let _ = write!(out, "{}", r.t);
        for c in cols {
            let _ = write!(out, ",{}", fmt9(c));
        }
        out.push('\n');
    }
    out
}

fn merge(mp: &RunTrace, central: &RunTrace) -> Vec<TraceRow> {
    mp.rows
        .iter()
        .zip(&central.rows)
        .map(|(d, c)| TraceRow {
            t: d.t,
            rate_bits: d.rate_bits,
            hq_bits: d.hq_bits,
            sigma2_c: d.sigma2_c,
            sigma2_d_pred: d.sigma2_d_pred,
            sigma2_d_emp: d.sigma2_d_emp,
            sdr_c_db: c.sdr_emp_db,
            sdr_d_db: d.sdr_emp_db,
            cum_bits: d.cum_bits,
        })
        .collect()
}

/// The DP plan, or an error for other modes.
pub fn make_dp_plan(
    cfg: &ExperimentConfig,
    ctx: &AllocationContext,
    t: usize,
) -> Result<AllocationPlan> {
    let r_total = cfg.dp.r_total.resolve(t);
    let (plan, _) = dp_allocate(ctx.sigma2_0(), r_total, t, cfg.dp.delta_r, ctx)
        .map_err(|e| Error::config("dp", e.to_string()))?;
    Ok(plan)
}

/// Run one experiment in memory; see [`write_report`] for the files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let t = cfg.resolve_iterations()?;
    let mut resolved = cfg.clone();
    resolved.iterations = Iterations::Fixed(t);
    if cfg.mode == ExperimentMode::Dp {
        resolved.dp.r_total = Budget::Bits(cfg.dp.r_total.resolve(t));
    }
    log::info!(
        "{}: building instance N={} M={} P={}",
        cfg.name,
        cfg.problem.n,
        cfg.problem.m,
        cfg.problem.p
    );
    let instance = build_instance(cfg.problem, cfg.prior)?;
    let options = MpOptions {
        channel: cfg.channel,
        record_estimates: false,
    };
    let central = run_centralized_with(&instance, t, &options)?;
    let mut plan = None;
    let mp = match cfg.mode {
        ExperimentMode::Centralized => central.clone(),
        ExperimentMode::MpUncompressed => {
            run_mp(&instance, &Mode::Uncompressed, cfg.coder, t, None, &options)?
        }
        ExperimentMode::Bt => {
            let ctx = cfg.allocation_context()?;
            run_mp(
                &instance,
                &Mode::Bt(cfg.bt_policy),
                cfg.coder,
                t,
                Some(&ctx),
                &options,
            )?
        }
        ExperimentMode::Dp => {
            let ctx = cfg.allocation_context()?;
            let p = make_dp_plan(cfg, &ctx, t)?;
            log::info!("{}: DP plan {:?}", cfg.name, p.rates);
            let trace = run_mp(
                &instance,
                &Mode::Dp(p.clone()),
                cfg.coder,
                t,
                Some(&ctx),
                &options,
            )?;
            plan = Some(p);
            trace
        }
    };
    let trace = merge(&mp, &central);
    let deficit = trace
        .iter()
        .map(|r| r.sdr_c_db - r.sdr_d_db)
        .filter(|d| !d.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    let summary = Summary {
        name: cfg.name.clone(),
        epsilon: cfg.prior.epsilon,
        mode: cfg.mode,
        coder: cfg.coder,
        iterations: t,
        total_bits: mp.total_bits(),
        rd_total_bits: mp.rd_total_bits(),
        plan_total_bits: plan.as_ref().map(|p| p.total_bits),
        plan_ecsq_total_bits: plan.as_ref().map(|p| plan_to_ecsq(p).total_bits),
        final_sdr_centralized_db: finite(central.final_sdr_db()),
        final_sdr_mp_db: finite(mp.final_sdr_db()),
        max_sdr_deficit_db: finite(deficit),
        max_rate_bits: mp.rows.iter().map(|r| r.rate_bits).fold(0.0, f64::max),
        capped_iterations: mp.rows.iter().filter(|r| r.capped).count(),
        diverged: mp.diverged(),
        aggregate_uplink_bits: mp.rows.iter().map(|r| r.uplink_bits).sum(),
        downlink_bits: mp.rows.iter().map(|r| r.downlink_bits).sum(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: resolved,
    };
    Ok(RunReport {
        trace,
        summary,
        plan,
    })
}

pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trace.csv"), trace_csv(&report.trace))?;
    let mut json = serde_json::to_string_pretty(&report.summary)?;
    json.push('\n');
    std::fs::write(dir.join("summary.json"), json)?;
    if let Some(plan) = &report.plan {
        plan.write(&dir.join("plan.csv"))?;
    }
    Ok(())
}

/// SE trajectory as `t,sigma2,sdr_db` rows.
pub fn se_csv(trace: &SETrace) -> String {
    let mut out = String::from("t,sigma2,sdr_db\n");
    for (t, (s, d)) in trace.sigma2_seq.iter().zip(&trace.sdr_seq).enumerate() {
        let _ = writeln!(out, "{t},{},{}", fmt9(*s), fmt9(*d));
    }
    out
}

/// Offline plan for `allocate`: the DP plan, or back-tracking driven by SE.
pub fn offline_plan(cfg: &ExperimentConfig) -> Result<(AllocationPlan, Option<AllocationPlan>)> {
    let t = cfg.resolve_iterations()?;
    let ctx = cfg.allocation_context()?;
    match cfg.mode {
        ExperimentMode::Dp => {
            let plan = make_dp_plan(cfg, &ctx, t)?;
            let ecsq = plan_to_ecsq(&plan);
            Ok((plan, Some(ecsq)))
        }
        ExperimentMode::Bt => Ok((bt_plan(&ctx, &cfg.bt_policy, t)?.plan, None)),
        _ => Err(Error::config(
            "mode",
            "allocate needs mode \"bt\" or \"dp\"",
        )),
    }
}

/// Published values of the total-bits table, keyed by row and epsilon.
pub const PUBLISHED_TABLE: [(&str, [f64; 3]); 4] = [
    ("BT-MP-AMP (RD prediction)", [33.82, 46.43, 96.16]),
    ("BT-MP-AMP (ECSQ simulation)", [36.09, 49.19, 101.50]),
    ("DP-MP-AMP (RD prediction)", [16.0, 20.0, 40.0]),
    ("DP-MP-AMP (ECSQ simulation)", [18.04, 22.55, 45.10]),
];
pub const PUBLISHED_EPSILONS: [f64; 3] = [0.03, 0.05, 0.10];
pub const PUBLISHED_ITERATIONS: [usize; 3] = [8, 10, 20];

/// Measured entries for each table row, `None` where a run is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalsTable {
    pub epsilons: Vec<f64>,
    pub iterations: Vec<Option<usize>>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

fn eps_key(e: f64) -> i64 {
    (e * 1e6).round() as i64
}

pub fn totals_table(summaries: &[Summary]) -> TotalsTable {
    let mut eps: Vec<f64> = PUBLISHED_EPSILONS.to_vec();
    for s in summaries {
        if !eps.iter().any(|&e| eps_key(e) == eps_key(s.epsilon)) {
            eps.push(s.epsilon);
        }
    }
    eps.sort_by(f64::total_cmp);
    let find = |mode: ExperimentMode, e: f64| {
        summaries
            .iter()
            .find(|s| s.mode == mode && eps_key(s.epsilon) == eps_key(e))
    };
    let cell = |mode, f: &dyn Fn(&Summary) -> Option<f64>| -> Vec<Option<f64>> {
        eps.iter().map(|&e| find(mode, e).and_then(f)).collect()
    };
    let bt_rd = |s: &Summary| match s.coder {
        Coder::Ideal => Some(s.total_bits),
        Coder::Ecsq => s.rd_total_bits,
    };
    let bt_ecsq = |s: &Summary| (s.coder == Coder::Ecsq).then_some(s.total_bits);
    let rows = vec![
        (
            PUBLISHED_TABLE[0].0.to_string(),
            cell(ExperimentMode::Bt, &bt_rd),
        ),
        (
            PUBLISHED_TABLE[1].0.to_string(),
            cell(ExperimentMode::Bt, &bt_ecsq),
        ),
        (
            PUBLISHED_TABLE[2].0.to_string(),
            cell(ExperimentMode::Dp, &|s| s.plan_total_bits),
        ),
        (
            PUBLISHED_TABLE[3].0.to_string(),
            cell(ExperimentMode::Dp, &|s| s.plan_ecsq_total_bits),
        ),
    ];
    let iterations = eps
        .iter()
        .map(|&e| {
            summaries
                .iter()
                .find(|s| eps_key(s.epsilon) == eps_key(e))
                .map(|s| s.iterations)
        })
        .collect();
    TotalsTable {
        epsilons: eps,
        iterations,
        rows,
    }
}

fn published_value(row: &str, eps: f64) -> Option<f64> {
    let k = PUBLISHED_EPSILONS
        .iter()
        .position(|&e| eps_key(e) == eps_key(eps))?;
    PUBLISHED_TABLE
        .iter()
        .find(|(r, _)| *r == row)
        .map(|(_, v)| v[k])
}

impl TotalsTable {
    /// Comma-separated: measured columns, then the published ones; `-` marks gaps.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let mut out = String::from("row");
        for e in &self.epsilons {
            let _ = write!(out, ",eps={e}");
        }
        for e in &self.epsilons {
            let _ = write!(out, ",published eps={e}");
        }
        out.push('\n');
        out.push('T');
        for t in &self.iterations {
            let _ = write!(out, ",{}", t.map_or("-".into(), |t| t.to_string()));
        }
        for e in &self.epsilons {
            let k = PUBLISHED_EPSILONS
                .iter()
                .position(|&p| eps_key(p) == eps_key(*e));
            let _ = write!(
                out,
                ",{}",
                k.map_or("-".into(), |k| PUBLISHED_ITERATIONS[k].to_string())
            );
        }
        out.push('\n');
        for (name, vals) in &self.rows {
            out.push_str(name);
            for v in vals {
                let _ = write!(out, ",{}", cell(*v));
            }
            for e in &self.epsilons {
                let _ = write!(out, ",{}", cell(published_value(name, *e)));
            }
            out.push('\n');
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|(_, v)| v.iter().all(Option::is_some))
    }
}

/// Load every `*.json` config in `dir`, in file-name order.
pub fn load_config_dir(
    dir: &Path,
    overrides: &[String],
) -> Result<Vec<(PathBuf, ExperimentConfig)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| ExperimentConfig::load(&p, overrides).map(|c| (p, c)))
        .collect()
}

/// A previous run's summary, if it was produced by this exact config.
pub fn cached_summary(cfg: &ExperimentConfig) -> Option<Summary> {
    let text = std::fs::read_to_string(cfg.output_dir.join("summary.json")).ok()?;
    let s: Summary = serde_json::from_str(&text).ok()?;
    let t = cfg.resolve_iterations().ok()?;
    let mut want = cfg.clone();
    want.iterations = Iterations::Fixed(t);
    if cfg.mode == ExperimentMode::Dp {
        want.dp.r_total = Budget::Bits(cfg.dp.r_total.resolve(t));
    }
    (s.config == want && s.code_version == env!("CARGO_PKG_VERSION")).then_some(s)
}

#[derive(Debug, Parser)]
#[command(
    name = "mpamp",
    version,
    about = "Communication-efficient multi-processor AMP experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Override a config key, e.g. `--set problem.seed=7` or `--set bt_policy.gamma=1.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Iteration count, or `auto`.
    #[arg(long)]
    pub iterations: Option<String>,
}

impl Overrides {
    pub fn assignments(&self) -> Vec<String> {
        let mut all = self.set.clone();
        if let Some(s) = self.seed {
            all.push(format!("problem.seed={s}"));
        }
        if let Some(d) = &self.output_dir {
            all.push(format!(
                "output_dir={}",
                Value::from(d.display().to_string())
            ));
        }
        if let Some(t) = &self.iterations {
            all.push(format!("iterations={t}"));
        }
        all
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run centralized AMP and the configured MP-AMP variant; write trace and summary.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Offline state evolution only.
    Se {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Offline rate allocation (DP plan, or back-tracking driven by SE).
    Allocate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every config in a directory and compare total bits with the published table.
    Table1 {
        config_dir: PathBuf,
        /// Table destination; defaults to `table1.csv` inside the directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ignore summaries left by earlier identical runs.
        #[arg(long)]
        rerun: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Execute a parsed command, printing a short report to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides.assignments())?;
            let report = run_experiment(&cfg)?;
            write_report(&report, &cfg.output_dir)?;
            let s = &report.summary;
            println!(
                "{}: T={} total_bits={:.4} final SDR centralized={} MP={} -> {}",
                if s.name.is_empty() { "run" } else { &s.name },
                s.iterations,
                s.total_bits,
                s.final_sdr_centralized_db
                    .map_or("inf".into(), |x| format!("{x:.3}")),
                s.final_sdr_mp_db
                    .map_or("inf".into(), |x| format!("{x:.3}")),
                cfg.output_dir.display()
            );
        }
        Command::Se { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides.assignments())?;
            let trace = cfg.se_trace()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join("se.csv"), se_csv(&trace))?;
            match trace.steady_state_t {
                Some(t) => println!("steady state after T = {t} iterations"),
                None => println!(
                    "no steady state within {} iterations",
                    trace.sigma2_seq.len() - 1
                ),
            }
        }
        Command::Allocate { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides.assignments())?;
            let (plan, ecsq) = offline_plan(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            plan.write(&cfg.output_dir.join("plan.csv"))?;
            println!(
                "plan total {:.4} bits over T = {}",
                plan.total_bits,
                plan.len()
            );
            if let Some(e) = ecsq {
                e.write(&cfg.output_dir.join("plan_ecsq.csv"))?;
                println!("ECSQ convention total {:.4} bits", e.total_bits);
            }
        }
        Command::Table1 {
            config_dir,
            out,
            rerun,
            overrides,
        } => {
            let configs = load_config_dir(&config_dir, &overrides.assignments())?;
            if configs.is_empty() {
                return Err(Error::config(
                    config_dir.display().to_string(),
                    "no *.json configs found",
                ));
            }
            let mut summaries = Vec::new();
            for (path, cfg) in &configs {
                if let Some(s) = (!rerun).then(|| cached_summary(cfg)).flatten() {
                    log::info!("{}: reusing {}", path.display(), cfg.output_dir.display());
                    summaries.push(s);
                    continue;
                }
                match run_experiment(cfg) {
                    Ok(report) => {
                        write_report(&report, &cfg.output_dir)?;
                        summaries.push(report.summary);
                    }
                    Err(e) => eprintln!("{}: {e}", path.display()),
                }
            }
            let table = totals_table(&summaries);
            let csv = table.to_csv();
            let dest = out.unwrap_or_else(|| config_dir.join("table1.csv"));
            std::fs::write(&dest, &csv)?;
            print!("{csv}");
            if !table.is_complete() {
                eprintln!("table has gaps; see {}", dest.display());
            }
        }
    }
    Ok(())
}
