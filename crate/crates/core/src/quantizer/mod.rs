//! Entropy-coded scalar quantization (ECSQ) of the per-processor messages.
//!
//! A mid-tread uniform quantizer is designed against the model law of
//! `f^p_t`; its bin probabilities drive a static range coder, so the coded
//! rate tracks the quantizer entropy `H_Q`.

mod range_coder;
mod source;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use range_coder::{FrequencyTable, RangeDecoder, RangeEncoder, FLUSH_BYTES, FREQ_TOTAL};
pub use source::{Component, ScalarSourceModel};

/// Support half-width of a designed quantizer, in source standard deviations.
pub const SUPPORT_SDS: f64 = 10.0;
/// Cap on the alphabet size, which also bounds the smallest usable bin width.
pub const MAX_BINS: usize = (1 << 20) + 1;
/// Header bytes preceding the range-coder payload in a serialized block.
pub const HEADER_BYTES: usize = 8;

/// Mid-tread uniform quantizer: bin `k` is `[c + (k - 1/2) delta, c + (k + 1/2) delta)`
/// with reconstruction point `c + k delta`, for `k` in `min_index ..= max_index`.
/// The extreme bins absorb the tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub delta: f64,
    /// Reconstruction offset `c` (the source mean; zero for a zero-mean slab).
    pub offset: f64,
    pub num_bins: usize,
    pub min_index: i64,
    /// Position of the `k = 0` bin within `bin_probs`.
    pub center_index: usize,
    pub bin_probs: Vec<f64>,
    pub entropy_bits: f64,
    /// `delta^2 / 12`, the noise model used everywhere downstream.
    pub model_mse: f64,
    /// Exact expected squared error under the source model (diagnostic only).
    pub exact_mse: f64,
}

impl QuantizerSpec {
    pub fn max_index(&self) -> i64 {
        self.min_index + self.num_bins as i64 - 1
    }

    pub fn reconstruct(&self, k: i64) -> f64 {
        self.offset + k as f64 * self.delta
    }

    pub fn frequency_table(&self) -> Result<FrequencyTable> {
        FrequencyTable::from_probs(&self.bin_probs)
    }

    /// CRC-32 over everything that determines the coder model.
    pub fn digest(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.delta.to_bits().to_le_bytes());
        h.update(&self.offset.to_bits().to_le_bytes());
        h.update(&self.min_index.to_le_bytes());
        h.update(&(self.num_bins as u64).to_le_bytes());
        for p in &self.bin_probs {
            h.update(&p.to_bits().to_le_bytes());
        }
        h.finalize()
    }

    /// Whether the bin width is small enough for the additive uniform-noise model.
    pub fn noise_model_valid(&self, source: &ScalarSourceModel) -> bool {
        self.delta <= source.max_model_delta()
    }
}

pub fn model_mse(delta: f64) -> f64 {
    delta * delta / 12.0
}

/// Bin width whose uniform-noise MSE equals `sigma2_q`.
pub fn delta_for_mse(sigma2_q: f64) -> Result<f64> {
    if !(sigma2_q > 0.0 && sigma2_q.is_finite()) {
        return Err(Error::param(format!(
            "sigma2_Q must be positive, got {sigma2_q}"
        )));
    }
    Ok((12.0 * sigma2_q).sqrt())
}

fn support_half_width(source: &ScalarSourceModel) -> f64 {
    source.support_half_width(SUPPORT_SDS)
}

/// Smallest bin width [`design`] accepts for this source.
pub fn min_delta(source: &ScalarSourceModel) -> f64 {
    2.0 * support_half_width(source) / (MAX_BINS - 1) as f64
}

/// Bin width at and above which the quantizer collapses to a single bin.
pub fn single_bin_delta(source: &ScalarSourceModel) -> f64 {
    2.0 * support_half_width(source)
}

pub fn entropy_bits(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>()
}

/// Design the quantizer with bin width `delta` for `source`.
pub fn design(source: &ScalarSourceModel, delta: f64) -> Result<QuantizerSpec> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::param(format!(
            "bin width must be positive, got {delta}"
        )));
    }
    let offset = source.mean();
    let half = support_half_width(source);
    let k_max = (half / delta - 0.5).ceil().max(0.0);
    if 2.0 * k_max + 1.0 > MAX_BINS as f64 {
        return Err(Error::Range {
            what: "quantizer bin width (alphabet too large)",
            value: delta,
            lo: min_delta(source),
            hi: f64::INFINITY,
        });
    }
    let k_max = k_max as i64;
    let num_bins = (2 * k_max + 1) as usize;

    let edge = |k: i64| offset + (k as f64 - 0.5) * delta;
    let mut bin_probs = Vec::with_capacity(num_bins);
    let mut exact_mse = 0.0;
    for k in -k_max..=k_max {
        let lo = if k == -k_max {
            f64::NEG_INFINITY
        } else {
            edge(k)
        };
        let hi = if k == k_max {
            f64::INFINITY
        } else {
            edge(k + 1)
        };
        bin_probs.push(source.interval_prob(lo, hi));
        exact_mse += source.interval_sq_error(lo, hi, offset + k as f64 * delta);
    }
    let total: f64 = bin_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Numerical {
            context: "quantizer design",
            detail: format!("bin probabilities sum to {total}"),
        });
    }
    for p in &mut bin_probs {
        *p /= total;
    }
    Ok(QuantizerSpec {
        delta,
        offset,
        num_bins,
        min_index: -k_max,
        center_index: k_max as usize,
        entropy_bits: entropy_bits(&bin_probs),
        bin_probs,
        model_mse: model_mse(delta),
        exact_mse,
    })
}

/// Bin width whose designed entropy is `target_bits` (within 1e-4 bits).
pub fn delta_for_rate(source: &ScalarSourceModel, target_bits: f64) -> Result<f64> {
    if !(target_bits > 0.0 && target_bits.is_finite()) {
        return Err(Error::param(format!(
            "target rate must be positive, got {target_bits}"
        )));
    }
    // Bracket outward from the high-rate Gaussian guess; designing at
    // `min_delta` directly would cost a million bins.
    let floor = min_delta(source);
    let ceil = single_bin_delta(source);
    let guess = ((2.0 * std::f64::consts::PI * std::f64::consts::E).sqrt()
        * source.sd()
        * (-target_bits).exp2())
    .clamp(floor, ceil);
    let (mut lo, mut hi) = (guess, guess);
    while design(source, lo)?.entropy_bits < target_bits {
        if lo == floor {
            return Err(Error::Range {
                what: "target rate (bits/element)",
                value: target_bits,
                lo: 0.0,
                hi: design(source, floor)?.entropy_bits,
            });
        }
        hi = lo;
        lo = (lo / 4.0).max(floor);
    }
    while hi < ceil && design(source, hi)?.entropy_bits > target_bits {
        lo = hi;
        hi = (hi * 4.0).min(ceil);
    }
    // entropy(lo) >= target >= entropy(hi)
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let h = design(source, mid)?.entropy_bits;
        if (h - target_bits).abs() <= 1e-5 {
            return Ok(mid);
        }
        if h > target_bits {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    let h = design(source, lo)?.entropy_bits;
    if (h - target_bits).abs() <= 1e-4 {
        return Ok(lo);
    }
    Err(Error::Numerical {
        context: "delta_for_rate",
        detail: format!("entropy {h} does not reach target {target_bits} (entropy discontinuity)"),
    })
}

/// Quantize `values`; returns bin indices `k` and reconstructions `c + k delta`.
pub fn quantize(values: &[f64], spec: &QuantizerSpec) -> Result<(Vec<i64>, Vec<f64>)> {
    let (lo, hi) = (spec.min_index, spec.max_index());
    let mut indices = Vec::with_capacity(values.len());
    let mut recon = Vec::with_capacity(values.len());
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Input(format!(
                "cannot quantize non-finite value {v}"
            )));
        }
        let k = ((v - spec.offset) / spec.delta + 0.5).floor();
        let k = (k.clamp(lo as f64, hi as f64)) as i64;
        indices.push(k);
        recon.push(spec.reconstruct(k));
    }
    Ok((indices, recon))
}

/// Entropy-coded quantizer indices plus the identity of the spec that coded them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedBlock {
    pub payload: Vec<u8>,
    pub element_count: u32,
    pub spec_digest: u32,
}

impl CodedBlock {
    /// Payload size in bits, excluding the 64-bit header.
    pub fn payload_bits(&self) -> usize {
        8 * self.payload.len()
    }

    /// Little-endian element count, little-endian spec checksum, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&self.element_count.to_le_bytes());
        out.extend_from_slice(&self.spec_digest.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Decode(format!(
                "block of {} bytes has no header",
                bytes.len()
            )));
        }
        let element_count = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let spec_digest = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        Ok(CodedBlock {
            payload: bytes[HEADER_BYTES..].to_vec(),
            element_count,
            spec_digest,
        })
    }
}

pub fn encode(indices: &[i64], spec: &QuantizerSpec) -> Result<CodedBlock> {
    let element_count = u32::try_from(indices.len())
        .map_err(|_| Error::Input(format!("{} elements exceed a block", indices.len())))?;
    let spec_digest = spec.digest();
    if indices.is_empty() {
        return Ok(CodedBlock {
            payload: Vec::new(),
            element_count,
            spec_digest,
        });
    }
    let table = spec.frequency_table()?;
    let mut enc = RangeEncoder::new();
    let hi = spec.max_index();
    for &k in indices {
        if k < spec.min_index || k > hi {
            return Err(Error::Input(format!(
                "index {k} outside quantizer range [{}, {hi}]",
                spec.min_index
            )));
        }
        enc.encode(&table, (k - spec.min_index) as usize);
    }
    Ok(CodedBlock {
        payload: enc.finish(),
        element_count,
        spec_digest,
    })
}

pub fn decode(block: &CodedBlock, spec: &QuantizerSpec) -> Result<Vec<i64>> {
    let expected = spec.digest();
    if block.spec_digest != expected {
        return Err(Error::Integrity {
            expected,
            found: block.spec_digest,
        });
    }
    if block.element_count == 0 {
        if !block.payload.is_empty() {
            return Err(Error::Decode("empty block carries a payload".into()));
        }
        return Ok(Vec::new());
    }
    let table = spec.frequency_table()?;
    let mut dec = RangeDecoder::new(&block.payload)?;
    let mut out = Vec::with_capacity(block.element_count as usize);
    for _ in 0..block.element_count {
        out.push(dec.decode(&table)? as i64 + spec.min_index);
    }
    if dec.position() != block.payload.len() {
        return Err(Error::Decode(format!(
            "{} trailing payload bytes",
            block.payload.len() - dec.position()
        )));
    }
    Ok(out)
}
