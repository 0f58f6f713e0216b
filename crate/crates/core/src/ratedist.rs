//! Rate-distortion function of the per-processor source under squared error,
//! computed with the Blahut-Arimoto alternating minimization on a uniform
//! discretization of the mixture law.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, PoisonError};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SignalPrior;
use crate::quantizer::ScalarSourceModel;

const LN2: f64 = std::f64::consts::LN_2;
/// Floor applied to the reproduction marginal so no row normalizer vanishes.
const MARGINAL_FLOOR: f64 = 1e-300;
/// Half-width of the discretized alphabet in source standard deviations.
const SUPPORT_SDS: f64 = 10.0;

/// Finite-alphabet approximation of a continuous source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSource {
    pub points: Vec<f64>,
    pub pmf: Vec<f64>,
}

impl DiscreteSource {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.points[1] - self.points[0]
    }

    pub fn mean(&self) -> f64 {
        self.points.iter().zip(&self.pmf).map(|(x, p)| x * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.points
            .iter()
            .zip(&self.pmf)
            .map(|(x, p)| p * (x - mu) * (x - mu))
            .sum()
    }
}

/// Uniform grid around the mixture mean, wide enough for 10 standard
/// deviations of the mixture and of each component, with cell-probability
/// masses; the end cells absorb the tails.
pub fn discretize(source: &ScalarSourceModel, num_points: usize) -> Result<DiscreteSource> {
    if num_points < 101 || num_points.is_multiple_of(2) {
        return Err(Error::param(format!(
            "num_points must be odd and at least 101, got {num_points}"
        )));
    }
    let mu = source.mean();
    let half = source.support_half_width(SUPPORT_SDS);
    let h = 2.0 * half / (num_points - 1) as f64;
    let points: Vec<f64> = (0..num_points).map(|i| mu - half + i as f64 * h).collect();
    let last = num_points - 1;
    let mut pmf: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let lo = if i == 0 {
                f64::NEG_INFINITY
            } else {
                x - 0.5 * h
            };
            let hi = if i == last {
                f64::INFINITY
            } else {
                x + 0.5 * h
            };
            source.interval_prob(lo, hi)
        })
        .collect();
    let total: f64 = pmf.iter().sum();
    for p in &mut pmf {
        *p /= total;
    }
    Ok(DiscreteSource { points, pmf })
}

/// Blahut-Arimoto controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaSettings {
    pub num_points: usize,
    /// Convergence threshold on successive rate iterates, in bits.
    pub tol: f64,
    pub max_iter: usize,
    /// Rate accuracy of the slope search in [`rd_curve`], in bits.
    pub rate_tol: f64,
    /// Curves stop where D drops below this multiple of `h^2/12`.
    pub resolution_factor: f64,
}

impl Default for BaSettings {
    fn default() -> Self {
        BaSettings {
            num_points: 2001,
            tol: 1e-7,
            max_iter: 100_000,
            rate_tol: 1e-3,
            resolution_factor: 10.0,
        }
    }
}

/// Converged (or last) BA iterate at one slope.
#[derive(Debug, Clone)]
pub struct BaPoint {
    pub rate: f64,
    pub distortion: f64,
    /// Blahut's bound at the returned iterate: the true R(distortion) lies
    /// in [rate - gap, rate]. Loose when far-tail cells are still settling.
    pub gap: f64,
    pub iterations: usize,
    /// Reproduction marginal, usable as a warm start at a nearby slope.
    pub marginal: Vec<f64>,
}

/// Bands wider than this use FFT convolution.
const DIRECT_BAND_LIMIT: usize = 48;
/// FFT outputs below this fraction of the peak are recomputed directly.
const FFT_RELIABLE: f64 = 1e-11;
const NEGLIGIBLE_MASS: f64 = 1e-15;
/// BA tolerance multiplier used while locating a slope.
const COARSE_TOL_FACTOR: f64 = 100.0;

/// Symmetric Toeplitz operator `out[i] = sum_j w[j] k[|i - j|]` for a banded
/// kernel, applied directly for narrow bands and by circular FFT convolution
/// otherwise.
struct Toeplitz {
    n: usize,
    band: Vec<f64>,
    fft: Option<FftPlan>,
}

struct FftPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    kernel_hat: Vec<Complex<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Toeplitz {
    fn new(band: Vec<f64>, n: usize, planner: &mut FftPlanner<f64>) -> Self {
        let fft = (band.len() > DIRECT_BAND_LIMIT).then(|| {
            // no wrap-around as long as len >= n + band - 1
            let len = (n + band.len() - 1).next_power_of_two();
            let forward = planner.plan_fft_forward(len);
            let inverse = planner.plan_fft_inverse(len);
            let mut kernel_hat = vec![Complex::new(0.0, 0.0); len];
            for (d, &v) in band.iter().enumerate() {
                kernel_hat[d].re = v;
                if d > 0 {
                    kernel_hat[len - d].re = v;
                }
            }
            let scratch_len = forward
                .get_inplace_scratch_len()
                .max(inverse.get_inplace_scratch_len());
            let mut scratch = vec![Complex::new(0.0, 0.0); scratch_len];
            forward.process_with_scratch(&mut kernel_hat, &mut scratch);
            let scale = 1.0 / len as f64;
            for v in &mut kernel_hat {
                *v *= scale;
            }
            FftPlan {
                forward,
                inverse,
                kernel_hat,
                buf: vec![Complex::new(0.0, 0.0); len],
                scratch,
            }
        });
        Toeplitz { n, band, fft }
    }

    fn apply(&mut self, w: &[f64], out: &mut [f64], exact: Option<&[bool]>) {
        let n = self.n;
        match &mut self.fft {
            None => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.direct_at(w, i);
                }
            }
            Some(plan) => {
                for (b, &x) in plan.buf.iter_mut().zip(w) {
                    *b = Complex::new(x, 0.0);
                }
                for b in plan.buf[n..].iter_mut() {
                    *b = Complex::new(0.0, 0.0);
                }
                plan.forward
                    .process_with_scratch(&mut plan.buf, &mut plan.scratch);
                for (b, k) in plan.buf.iter_mut().zip(&plan.kernel_hat) {
                    *b *= k;
                }
                plan.inverse
                    .process_with_scratch(&mut plan.buf, &mut plan.scratch);
                let mut peak = 0.0f64;
                for (o, b) in out.iter_mut().zip(&plan.buf) {
                    *o = b.re;
                    peak = peak.max(b.re);
                }
                // Entries near the FFT round-off floor carry no correct
                // digits; redo the ones flagged in `exact`, clamp the rest.
                let floor = FFT_RELIABLE * peak;
                for i in 0..n {
                    if out[i] < floor {
                        out[i] = match exact {
                            Some(mask) if mask[i] => self.direct_at(w, i),
                            _ => out[i].max(0.0),
                        };
                    }
                }
            }
        }
    }

    fn direct_at(&self, w: &[f64], i: usize) -> f64 {
        let k = &self.band;
        let b = k.len();
        let lo = i.saturating_sub(b - 1);
        let hi = (i + b).min(self.n);
        (lo..hi).map(|j| w[j] * k[i.abs_diff(j)]).sum()
    }
}

/// Banded kernel `exp(-slope * (h d)^2)`, truncated once it drops below
/// `1e-30` of the peak; the dropped tail is negligible against the FFT
/// round-off floor.
fn kernel(slope: f64, h: f64, n: usize) -> Vec<f64> {
    let mut k = Vec::new();
    for d in 0..n {
        let x = (d as f64) * h;
        let v = (-slope * x * x).exp();
        if v < 1e-30 {
            break;
        }
        k.push(v);
    }
    k
}

/// One point of R(D) at Lagrange slope `slope` (nats per unit squared error),
/// with reproduction alphabet equal to the source alphabet.
pub fn blahut_arimoto(source: &DiscreteSource, slope: f64, tol: f64) -> Result<BaPoint> {
    blahut_arimoto_from(source, slope, tol, 100_000, None)
}

pub fn blahut_arimoto_from(
    source: &DiscreteSource,
    slope: f64,
    tol: f64,
    max_iter: usize,
    warm: Option<&[f64]>,
) -> Result<BaPoint> {
    if !(slope > 0.0 && slope.is_finite()) || !(tol > 0.0) {
        return Err(Error::param(format!(
            "invalid BA slope {slope} or tol {tol}"
        )));
    }
    let n = source.len();
    if n < 2 {
        return Err(Error::param("BA needs at least two source points"));
    }
    let h = source.spacing();
    let k = kernel(slope, h, n);
    let kd: Vec<f64> = k
        .iter()
        .enumerate()
        .map(|(d, v)| v * (d as f64 * h).powi(2))
        .collect();
    // Points with negligible mass are dropped: their FFT sums are inexact and
    // would only pollute the convergence certificate.
    let mut p: Vec<f64> = source
        .pmf
        .iter()
        .map(|&v| if v > NEGLIGIBLE_MASS { v } else { 0.0 })
        .collect();
    let kept: f64 = p.iter().sum();
    for v in &mut p {
        *v /= kept;
    }
    let p = &p;
    let relevant: Vec<bool> = p.iter().map(|&v| v > 0.0).collect();
    let mut planner = FftPlanner::new();
    let mut kop = Toeplitz::new(k, n, &mut planner);
    let mut kdop = Toeplitz::new(kd, n, &mut planner);

    let mut q: Vec<f64> = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => p.to_vec(),
    };
    let mut prev_rate = f64::INFINITY;
    let mut c = vec![0.0; n];
    let mut ratio = vec![0.0; n];
    let mut back = vec![0.0; n];
    let mut dist = vec![0.0; n];
    let (mut rate, mut distortion) = (f64::NAN, f64::NAN);

    for it in 1..=max_iter {
        for v in q.iter_mut() {
            *v = v.max(MARGINAL_FLOOR);
        }
        kop.apply(&q, &mut c, Some(&relevant));
        let objective: f64 = -(0..n)
            .filter(|&i| p[i] > 0.0 && c[i] > 0.0)
            .map(|i| p[i] * c[i].ln())
            .sum::<f64>();
        for i in 0..n {
            ratio[i] = if c[i] > 0.0 { p[i] / c[i] } else { 0.0 };
        }
        // only the p-weighted sum of `dist` is used, so absolute FFT accuracy suffices
        kdop.apply(&q, &mut dist, None);
        distortion = (0..n).map(|i| ratio[i] * dist[i]).sum::<f64>();
        rate = ((objective - slope * distortion) / LN2).max(0.0);

        kop.apply(&ratio, &mut back, None);
        if (rate - prev_rate).abs() < tol {
            // Blahut's lower bound on R(distortion) is rate - max_j log2(back_j)
            let gap = back.iter().fold(0.0f64, |m, &b| m.max(b)).log2().max(0.0);
            return Ok(BaPoint {
                rate,
                distortion,
                gap,
                iterations: it,
                marginal: q,
            });
        }
        prev_rate = rate;
        let mut total = 0.0;
        for j in 0..n {
            q[j] *= back[j];
            total += q[j];
        }
        for v in q.iter_mut() {
            *v /= total;
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        rate,
        distortion,
    })
}

/// Sampled rate-distortion curve of one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    /// Increasing rates in bits per element.
    pub rates: Vec<f64>,
    /// Decreasing mean squared errors.
    pub distortions: Vec<f64>,
    pub source_sigma2_t: f64,
}

impl RDCurve {
    pub fn max_rate(&self) -> f64 {
        *self.rates.last().expect("non-empty curve")
    }

    pub fn min_rate(&self) -> f64 {
        self.rates[0]
    }
}

/// Slope for which a Gaussian of variance `var` has rate `rate`.
fn gaussian_slope(var: f64, rate: f64) -> f64 {
    4f64.powf(rate) / (2.0 * var)
}

/// Evaluate R(D) at the requested rates by searching the Lagrange slope.
///
/// A zero rate maps to the source variance. Other rates are bracketed in
/// log-slope and refined with the Illinois false-position method, each BA
/// run started from the source pmf.
///
/// The grid is truncated at the first rate whose distortion would fall below
/// `settings.resolution_factor` times the alphabet's own cell noise `h^2/12`;
/// beyond that point the discrete alphabet, not the source, sets the curve.
pub fn rd_curve(
    source: &ScalarSourceModel,
    rate_grid: &[f64],
    settings: &BaSettings,
) -> Result<RDCurve> {
    if rate_grid.is_empty() {
        return Err(Error::param("rate grid is empty"));
    }
    if rate_grid.windows(2).any(|w| w[1] <= w[0]) || rate_grid[0] < 0.0 {
        return Err(Error::param(
            "rate grid must be nonnegative and strictly increasing",
        ));
    }
    let disc = discretize(source, settings.num_points)?;
    let var = disc.variance();
    let floor = settings.resolution_factor * disc.spacing().powi(2) / 12.0;
    let mut search = SlopeSearch {
        disc: &disc,
        settings,
        history: Vec::new(),
    };
    let mut rates: Vec<f64> = Vec::with_capacity(rate_grid.len());
    let mut distortions: Vec<f64> = Vec::with_capacity(rate_grid.len());

    for &target in rate_grid {
        let d = if target == 0.0 {
            var
        } else {
            if let (Some(&r), Some(&d)) = (rates.last(), distortions.last()) {
                // Gaussian-slope forecast of the next distortion
                let forecast = d * 4f64.powf(-(target - r));
                if forecast < floor {
                    break;
                }
            }
            let d = search.solve(target, var)?;
            if d < floor {
                break;
            }
            d
        };
        if let Some(&prev) = distortions.last() {
            if d >= prev {
                return Err(Error::Numerical {
                    context: "rd_curve",
                    detail: format!("distortion not decreasing at rate {target}: {d} >= {prev}"),
                });
            }
        }
        rates.push(target);
        distortions.push(d);
    }
    if rates.len() < 2 {
        return Err(Error::Numerical {
            context: "rd_curve",
            detail: format!(
                "alphabet of {} points resolves fewer than two grid rates",
                settings.num_points
            ),
        });
    }
    if rates.len() < rate_grid.len() {
        log::debug!(
            "rd curve at sigma2_t = {:.4e} truncated at {} bits by alphabet resolution",
            source.sigma2_t,
            rates.last().copied().unwrap_or_default()
        );
    }
    Ok(RDCurve {
        rates,
        distortions,
        source_sigma2_t: source.sigma2_t,
    })
}

/// Slope search for one curve. Every BA run starts from the source pmf, so
/// the reported rate is a deterministic function of the slope; warm starts
/// would make the stopping rule, and hence the result, path dependent.
struct SlopeSearch<'a> {
    disc: &'a DiscreteSource,
    settings: &'a BaSettings,
    /// converged (log slope, rate) pairs, for extrapolating the next guess
    history: Vec<(f64, f64)>,
}

impl SlopeSearch<'_> {
    fn eval(&self, log_slope: f64, tol: f64) -> Result<(f64, f64)> {
        let pt = blahut_arimoto_from(
            self.disc,
            log_slope.exp(),
            tol,
            self.settings.max_iter,
            None,
        )?;
        log::trace!(
            "BA slope {:.6e} tol {tol:.0e}: rate {:.6} D {:.6e} gap {:.2e} after {} iterations",
            log_slope.exp(),
            pt.rate,
            pt.distortion,
            pt.gap,
            pt.iterations
        );
        Ok((pt.rate, pt.distortion))
    }

    /// Distortion at the slope whose rate matches `target` within the
    /// configured tolerance. The slope is located with loosely converged BA
    /// runs, then confirmed by a fully converged one; a mismatch between the
    /// two shifts the loose target and the search repeats.
    fn solve(&mut self, target: f64, var: f64) -> Result<f64> {
        let mut x = match self.history.as_slice() {
            [.., (xa, ra), (xb, rb)] if rb > ra => xb + (target - rb) * (xb - xa) / (rb - ra),
            [.., (xb, rb)] => xb + (target - rb) * 2.0 * LN2,
            [] => gaussian_slope(var, target).ln(),
        };
        let tight = self.settings.tol;
        let coarse = tight * COARSE_TOL_FACTOR;
        let mut shifted = target;
        for _ in 0..4 {
            x = self.locate(shifted, x, coarse)?.0;
            let (r, d) = self.eval(x, tight)?;
            if (r - target).abs() <= self.settings.rate_tol {
                self.history.push((x, r));
                return Ok(d);
            }
            shifted -= r - target;
        }
        let (x, r, d) = self.locate(target, x, tight)?;
        self.history.push((x, r));
        Ok(d)
    }

    /// Illinois false-position search in log-slope from `x0`; returns the
    /// log-slope, rate and distortion of the first hit.
    fn locate(&self, target: f64, mut x0: f64, ba_tol: f64) -> Result<(f64, f64, f64)> {
        let tol = self.settings.rate_tol;
        let (mut r0, d0) = self.eval(x0, ba_tol)?;
        if (r0 - target).abs() <= tol {
            return Ok((x0, r0, d0));
        }
        let step = if r0 < target { 0.35 } else { -0.35 };
        let mut x1 = x0 + step;
        let (mut r1, mut d1) = self.eval(x1, ba_tol)?;
        let mut expansions = 0;
        while (r1 - target).signum() == (r0 - target).signum() {
            (x0, r0) = (x1, r1);
            x1 += step;
            (r1, d1) = self.eval(x1, ba_tol)?;
            expansions += 1;
            if expansions > 60 {
                return Err(Error::Numerical {
                    context: "rd_curve",
                    detail: format!("cannot bracket rate {target} (reached {r1})"),
                });
            }
        }
        if (r1 - target).abs() <= tol {
            return Ok((x1, r1, d1));
        }
        let (mut f0, mut f1) = (r0 - target, r1 - target);
        let mut side = 0i8;
        for _ in 0..100 {
            let x = (x0 * f1 - x1 * f0) / (f1 - f0);
            let (r, d) = self.eval(x, ba_tol)?;
            let f = r - target;
            if f.abs() <= tol {
                return Ok((x, r, d));
            }
            if f.signum() == f1.signum() {
                (x1, f1) = (x, f);
                if side == -1 {
                    f0 *= 0.5;
                }
                side = -1;
            } else {
                (x0, f0) = (x, f);
                if side == 1 {
                    f1 *= 0.5;
                }
                side = 1;
            }
        }
        Err(Error::Numerical {
            context: "rd_curve",
            detail: format!("slope search for rate {target} stalled"),
        })
    }
}

/// D(R) by linear interpolation of log-distortion; exact on grid points.
pub fn distortion_at_rate(curve: &RDCurve, rate: f64) -> Result<f64> {
    let (lo, hi) = (curve.min_rate(), curve.max_rate());
    if !(rate >= lo && rate <= hi) {
        return Err(Error::Range {
            what: "rate outside RD curve span",
            value: rate,
            lo,
            hi,
        });
    }
    let i = curve.rates.partition_point(|r| *r <= rate);
    if i == 0 {
        return Ok(curve.distortions[0]);
    }
    let j = i - 1;
    if curve.rates[j] == rate || j + 1 == curve.rates.len() {
        return Ok(curve.distortions[j]);
    }
    let (r0, r1) = (curve.rates[j], curve.rates[j + 1]);
    let (l0, l1) = (curve.distortions[j].ln(), curve.distortions[j + 1].ln());
    let w = (rate - r0) / (r1 - r0);
    Ok((l0 + w * (l1 - l0)).exp())
}

/// Inverse of [`distortion_at_rate`]: the rate at which the curve reaches `d`.
pub fn rate_at_distortion(curve: &RDCurve, d: f64) -> Result<f64> {
    let first = curve.distortions[0];
    let last = *curve.distortions.last().expect("non-empty curve");
    if d >= first {
        return Ok(curve.rates[0]);
    }
    if !(d >= last) {
        return Err(Error::Range {
            what: "distortion below RD curve span",
            value: d,
            lo: last,
            hi: first,
        });
    }
    let i = curve.distortions.partition_point(|x| *x > d);
    let (r0, r1) = (curve.rates[i - 1], curve.rates[i]);
    let (l0, l1) = (curve.distortions[i - 1].ln(), curve.distortions[i].ln());
    Ok(r0 + (d.ln() - l0) / (l1 - l0) * (r1 - r0))
}

/// Key of a cached curve: prior, processor count and sigma2_t rounded to
/// one part in 10^6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CurveKey {
    epsilon: u64,
    mu_s: u64,
    sigma_s: u64,
    p: usize,
    log_sigma2: i64,
    num_points: usize,
}

impl CurveKey {
    pub fn new(source: &ScalarSourceModel, num_points: usize) -> Self {
        CurveKey {
            epsilon: source.prior.epsilon.to_bits(),
            mu_s: source.prior.mu_s.to_bits(),
            sigma_s: source.prior.sigma_s.to_bits(),
            p: source.p,
            log_sigma2: (source.sigma2_t.ln() * 1e6).round() as i64,
            num_points,
        }
    }
}

const CACHE_MAGIC: &str = "# mpamp rd-cache v1";

/// Thread-safe store of computed curves, optionally persisted as text.
///
/// File format: a magic first line, then one record per line
/// `epsilon mu_s sigma_s p log_sigma2_key num_points sigma2_t|r1,r2,..|d1,d2,..`
/// where floats are written as 16-digit hexadecimal IEEE-754 bit patterns.
#[derive(Debug, Default)]
pub struct RdCache {
    curves: Mutex<HashMap<CurveKey, RDCurve>>,
}

impl RdCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.curves
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CurveKey) -> Option<RDCurve> {
        self.curves
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .get(key)
            .cloned()
    }

    pub fn insert(&self, key: CurveKey, curve: RDCurve) {
        self.curves
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .insert(key, curve);
    }

    /// Cached curve for `source`, computing it when absent or when its rate
    /// grid differs from `rate_grid`.
    pub fn curve(
        &self,
        source: &ScalarSourceModel,
        rate_grid: &[f64],
        settings: &BaSettings,
    ) -> Result<RDCurve> {
        let key = CurveKey::new(source, settings.num_points);
        if let Some(c) = self.get(&key) {
            // Curves stop early at the alphabet's resolution, so a cached
            // curve serves any grid it is a prefix of.
            if rate_grid.starts_with(&c.rates) {
                return Ok(c);
            }
        }
        let curve = rd_curve(source, rate_grid, settings)?;
        self.insert(key, curve.clone());
        Ok(curve)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map = self.curves.lock().unwrap_or_else(PoisonError::into_inner);
        let mut keys: Vec<&CurveKey> = map.keys().collect();
        keys.sort();
        let hex = |v: f64| format!("{:016x}", v.to_bits());
        let mut out = String::from(CACHE_MAGIC);
        out.push('\n');
        for key in keys {
            let c = &map[key];
            let _ = write!(
                out,
                "{:016x} {:016x} {:016x} {} {} {} {}|",
                key.epsilon,
                key.mu_s,
                key.sigma_s,
                key.p,
                key.log_sigma2,
                key.num_points,
                hex(c.source_sigma2_t)
            );
            out.push_str(
                &c.rates
                    .iter()
                    .map(|v| hex(*v))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            out.push('|');
            out.push_str(
                &c.distortions
                    .iter()
                    .map(|v| hex(*v))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            out.push('\n');
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(out.as_bytes())?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Merge records from `path` into the cache; a missing file is not an error.
    pub fn load(&self, path: &Path) -> Result<usize> {
        let file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e.into()),
        };
        let bad = |line: usize, msg: &str| Error::Decode(format!("rd cache line {line}: {msg}"));
        let mut lines = std::io::BufReader::new(file).lines();
        match lines.next() {
            Some(Ok(l)) if l.trim_end() == CACHE_MAGIC => {}
            _ => return Err(bad(1, "missing or unsupported version header")),
        }
        let parse_hex = |s: &str| u64::from_str_radix(s, 16).map(f64::from_bits);
        let mut count = 0;
        for (no, line) in lines.enumerate() {
            let line = line?;
            let lineno = no + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('|');
            let (head, rates, dists) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(bad(lineno, "expected three '|' separated fields")),
            };
            let f: Vec<&str> = head.split_whitespace().collect();
            if f.len() != 7 {
                return Err(bad(lineno, "malformed key"));
            }
            let key = (|| -> std::result::Result<CurveKey, Box<dyn std::error::Error>> {
                Ok(CurveKey {
                    epsilon: u64::from_str_radix(f[0], 16)?,
                    mu_s: u64::from_str_radix(f[1], 16)?,
                    sigma_s: u64::from_str_radix(f[2], 16)?,
                    p: f[3].parse()?,
                    log_sigma2: f[4].parse()?,
                    num_points: f[5].parse()?,
                })
            })()
            .map_err(|e| bad(lineno, &e.to_string()))?;
            let sigma2 = parse_hex(f[6]).map_err(|e| bad(lineno, &e.to_string()))?;
            let list = |s: &str| -> Result<Vec<f64>> {
                s.split(',')
                    .map(|v| parse_hex(v).map_err(|e| bad(lineno, &e.to_string())))
                    .collect()
            };
            let (rates, distortions) = (list(rates)?, list(dists)?);
            if rates.len() != distortions.len() || rates.is_empty() {
                return Err(bad(lineno, "rate/distortion length mismatch"));
            }
            self.insert(
                key,
                RDCurve {
                    rates,
                    distortions,
                    source_sigma2_t: sigma2,
                },
            );
            count += 1;
        }
        Ok(count)
    }
}

/// D(R) for any sigma2_t in a range, interpolated from BA curves computed at
/// log-spaced nodes. Beyond the last sampled rate the high-rate slope of
/// 6.02 dB per bit is used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RdBank {
    pub prior: SignalPrior,
    pub p: usize,
    pub log_sigma2_nodes: Vec<f64>,
    pub curves: Vec<RDCurve>,
}

/// Default per-curve rate grid: 0 to 6 bits in quarter-bit steps.
pub fn default_rate_grid() -> Vec<f64> {
    (0..=24).map(|i| i as f64 * 0.25).collect()
}

impl RdBank {
    pub fn build(
        prior: SignalPrior,
        p: usize,
        sigma2_range: (f64, f64),
        nodes: usize,
        rate_grid: &[f64],
        settings: &BaSettings,
        cache: Option<&RdCache>,
    ) -> Result<Self> {
        let (lo, hi) = sigma2_range;
        if !(lo > 0.0 && hi > lo) || nodes < 2 {
            return Err(Error::param(format!(
                "invalid RD bank range ({lo}, {hi}) with {nodes} nodes"
            )));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let log_sigma2_nodes: Vec<f64> = (0..nodes)
            .map(|i| a + (b - a) * i as f64 / (nodes - 1) as f64)
            .collect();
        let local = RdCache::new();
        let cache = cache.unwrap_or(&local);
        let curves = log_sigma2_nodes
            .iter()
            .map(|ls| {
                let src = ScalarSourceModel::new(prior, ls.exp(), p)?;
                log::debug!("building RD curve at sigma2_t = {:.6e}", ls.exp());
                cache.curve(&src, rate_grid, settings)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RdBank {
            prior,
            p,
            log_sigma2_nodes,
            curves,
        })
    }

    fn curve_distortion(curve: &RDCurve, rate: f64) -> Result<f64> {
        let top = curve.max_rate();
        if rate > top {
            let d = distortion_at_rate(curve, top)?;
            return Ok(d * 4f64.powf(-(rate - top)));
        }
        distortion_at_rate(curve, rate)
    }

    fn bracket(&self, sigma2_t: f64) -> (usize, f64) {
        let x = sigma2_t.ln();
        let nodes = &self.log_sigma2_nodes;
        let i = nodes.partition_point(|v| *v <= x).clamp(1, nodes.len() - 1) - 1;
        let w = (x - nodes[i]) / (nodes[i + 1] - nodes[i]);
        (i, w)
    }

    /// Distortion per element of `f^p_t` at rate `rate` when the channel
    /// variance is `sigma2_t`.
    pub fn distortion(&self, sigma2_t: f64, rate: f64) -> Result<f64> {
        if !(rate >= 0.0) {
            return Err(Error::Range {
                what: "rate",
                value: rate,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        let (i, w) = self.bracket(sigma2_t);
        let d0 = Self::curve_distortion(&self.curves[i], rate)?.ln();
        let d1 = Self::curve_distortion(&self.curves[i + 1], rate)?.ln();
        Ok((d0 + w * (d1 - d0)).exp())
    }

    /// Smallest rate with `distortion(sigma2_t, rate) <= d`.
    pub fn rate(&self, sigma2_t: f64, d: f64) -> Result<f64> {
        let var_bound = self.distortion(sigma2_t, 0.0)?;
        if d >= var_bound {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while self.distortion(sigma2_t, hi)? > d {
            lo = hi;
            hi *= 2.0;
            if hi > 1e3 {
                return Err(Error::Range {
                    what: "distortion target",
                    value: d,
                    lo: 0.0,
                    hi: var_bound,
                });
            }
        }
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if self.distortion(sigma2_t, mid)? > d {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }
}
