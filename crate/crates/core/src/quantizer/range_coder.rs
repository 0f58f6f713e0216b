//! Static-model range coder with a 64-bit range and 32-bit frequency
//! precision. Carry propagation follows the classic cache/pending-byte scheme.

use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 32;
pub const FREQ_TOTAL: u64 = 1 << FREQ_BITS;
const TOP: u64 = 1 << 56;
/// Bytes written on flush: one deferred cache byte plus the 8 bytes of `low`.
pub const FLUSH_BYTES: usize = 9;

/// Integer frequency table summing to [`FREQ_TOTAL`]; every symbol gets at
/// least one count so any in-range index stays encodable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    freqs: Vec<u64>,
    cum: Vec<u64>,
}

impl FrequencyTable {
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        let n = probs.len() as u64;
        if n == 0 || n > FREQ_TOTAL / 2 {
            return Err(Error::param(format!(
                "cannot build a frequency table for {n} symbols"
            )));
        }
        let spread = (FREQ_TOTAL - n) as f64;
        let mut freqs: Vec<u64> = probs
            .iter()
            .map(|p| 1 + (p.max(0.0) * spread).floor() as u64)
            .collect();
        let sum: u64 = freqs.iter().sum();
        if sum > FREQ_TOTAL {
            return Err(Error::param("probabilities sum above one"));
        }
        let (argmax, _) = freqs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        freqs[argmax] += FREQ_TOTAL - sum;
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(FrequencyTable { freqs, cum })
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    /// Ideal code length in bits of `symbol` under this table.
    pub fn cost_bits(&self, symbol: usize) -> f64 {
        FREQ_BITS as f64 - (self.freqs[symbol] as f64).log2()
    }

    fn lookup(&self, value: u64) -> usize {
        // last s with cum[s] <= value
        self.cum.partition_point(|&c| c <= value) - 1
    }
}

pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &FrequencyTable, symbol: usize) {
        let r = self.range >> FREQ_BITS;
        self.low += (r as u128) * (table.cum[symbol] as u128);
        self.range = r * table.freqs[symbol];
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        let low64 = self.low as u64;
        if low64 < 0xFF00_0000_0000_0000 || (self.low >> 64) != 0 {
            let carry = (self.low >> 64) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (low64 >> 56) as u8;
        }
        self.cache_size += 1;
        self.low = (low64 << 8) as u128;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < FLUSH_BYTES {
            return Err(Error::Decode(format!(
                "payload of {} bytes is shorter than the coder preamble",
                data.len()
            )));
        }
        if data[0] != 0 {
            return Err(Error::Decode(
                "payload does not start with the coder preamble".into(),
            ));
        }
        let mut dec = RangeDecoder {
            data,
            pos: 1,
            code: 0,
            range: u64::MAX,
        };
        for _ in 0..8 {
            let b = dec.next_byte()?;
            dec.code = (dec.code << 8) | b as u64;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Decode("payload truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FrequencyTable) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let value = self.code / r;
        if value >= FREQ_TOTAL {
            return Err(Error::Decode("code value outside the model range".into()));
        }
        let symbol = table.lookup(value);
        self.code -= r * table.cum[symbol];
        self.range = r * table.freqs[symbol];
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u64;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_sums_to_total() {
        let t = FrequencyTable::from_probs(&[0.5, 0.25, 0.25, 0.0]).unwrap();
        assert_eq!(t.freqs().iter().sum::<u64>(), FREQ_TOTAL);
        assert!(t.freqs().iter().all(|f| *f >= 1));
        assert!(FrequencyTable::from_probs(&[]).is_err());
    }

    #[test]
    fn round_trip_skewed() {
        let t = FrequencyTable::from_probs(&[0.97, 0.01, 0.01, 0.01, 0.0]).unwrap();
        let symbols: Vec<usize> = (0..5000)
            .map(|i| if i % 37 == 0 { (i / 37) % 5 } else { 0 })
            .collect();
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode(&t, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &s in &symbols {
            assert_eq!(dec.decode(&t).unwrap(), s);
        }
        assert_eq!(dec.position(), bytes.len());
    }

    #[test]
    fn carry_heavy_stream() {
        // Long runs of the most probable symbol keep low near the carry boundary.
        let t = FrequencyTable::from_probs(&[1e-9, 1.0 - 2e-9, 1e-9]).unwrap();
        let mut symbols = vec![1usize; 20_000];
        symbols[7] = 2;
        symbols[19_999] = 2;
        symbols[10_000] = 0;
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode(&t, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        let back: Vec<usize> = (0..symbols.len())
            .map(|_| dec.decode(&t).unwrap())
            .collect();
        assert_eq!(back, symbols);
    }

    #[test]
    fn truncated_payload_fails() {
        let t = FrequencyTable::from_probs(&[0.25; 4]).unwrap();
        let mut enc = RangeEncoder::new();
        for s in 0..400 {
            enc.encode(&t, s % 4);
        }
        let bytes = enc.finish();
        let cut = &bytes[..bytes.len() - 20];
        let mut dec = RangeDecoder::new(cut).unwrap();
        let res: Result<Vec<usize>> = (0..400).map(|_| dec.decode(&t)).collect();
        assert!(matches!(res, Err(Error::Decode(_))));
    }
}
