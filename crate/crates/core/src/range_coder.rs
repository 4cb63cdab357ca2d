//! Deterministic 64-bit range coder over fixed-point frequency tables.
//!
//! Frequencies are 16-bit (total exactly 2^16, every symbol >= 1), carried
//! in strictly increasing cumulative form. Renormalization is byte-wise and
//! carry-less: a byte is emitted once the top byte of the interval settles,
//! with the Subbotin underflow cut when the interval straddles a boundary.
//! All arithmetic is integer, so encoder and decoder evolve identically on
//! any platform.
//!
//! The latent alphabet is [-256, 256] plus two escape symbols; an escaped
//! value is followed by its 32 raw bits under a uniform binary table.

use std::collections::HashMap;

use crate::error::{CodecError, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

const TOP: u64 = 1 << 56;
const BOTTOM: u64 = 1 << 48;

/// Symbol alphabet for latent and weight-update values.
pub const SYM_MIN: i32 = -256;
pub const SYM_MAX: i32 = 256;
pub const ESC_LOW: usize = 0;
pub const ESC_HIGH: usize = 514;
pub const ALPHABET: usize = 515;

/// Fixed-point PMF over a finite alphabet, stored cumulatively.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn from_freqs(freqs: &[u32]) -> Result<FreqTable> {
        if freqs.is_empty() {
            return Err(CodecError::Param("empty frequency table".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            if f == 0 {
                return Err(CodecError::Param("zero frequency".into()));
            }
            acc = acc
                .checked_add(f)
                .ok_or_else(|| CodecError::Param("frequency overflow".into()))?;
            cum.push(acc);
        }
        if acc != FREQ_TOTAL {
            return Err(CodecError::Param(format!(
                "frequencies sum to {}, expected {}",
                acc, FREQ_TOTAL
            )));
        }
        Ok(FreqTable { cum })
    }

    /// Quantize real probabilities to counts >= 1 summing to 2^16.
    ///
    /// Largest-remainder apportionment with a deterministic tie order, so
    /// identical inputs give identical tables everywhere.
    pub fn from_probs(probs: &[f64]) -> Result<FreqTable> {
        let n = probs.len();
        if n == 0 || n > FREQ_TOTAL as usize {
            return Err(CodecError::Param(format!("bad alphabet size {}", n)));
        }
        let total: f64 = probs.iter().map(|p| p.max(0.0)).sum();
        let norm = if total > 0.0 { total } else { 1.0 };
        let mut counts = vec![0u32; n];
        let mut rems: Vec<(f64, usize)> = Vec::with_capacity(n);
        let mut acc = 0u64;
        for i in 0..n {
            let ideal = probs[i].max(0.0) / norm * FREQ_TOTAL as f64;
            let fl = ideal.floor();
            counts[i] = (fl as u32).max(1);
            rems.push((ideal - fl, i));
            acc += counts[i] as u64;
        }
        let mut diff = FREQ_TOTAL as i64 - acc as i64;
        if diff > 0 {
            rems.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut k = 0;
            while diff > 0 {
                counts[rems[k % n].1] += 1;
                diff -= 1;
                k += 1;
            }
        } else if diff < 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            let mut k = 0;
            while diff < 0 {
                let i = order[k % n];
                if counts[i] > 1 {
                    counts[i] -= 1;
                    diff += 1;
                }
                k += 1;
            }
        }
        FreqTable::from_freqs(&counts)
    }

    pub fn uniform(n: usize) -> FreqTable {
        FreqTable::from_probs(&vec![1.0; n]).expect("uniform table")
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, sym: usize) -> u32 {
        self.cum[sym + 1] - self.cum[sym]
    }

    pub fn cum_lo(&self, sym: usize) -> u32 {
        self.cum[sym]
    }

    /// Probability of a symbol (freq / 2^16).
    pub fn prob(&self, sym: usize) -> f64 {
        self.freq(sym) as f64 / FREQ_TOTAL as f64
    }

    /// Exact code cost of a symbol in bits under this table.
    pub fn bits(&self, sym: usize) -> f64 {
        -(self.prob(sym)).log2()
    }

    /// The symbol whose cumulative interval contains `target`.
    fn find(&self, target: u32) -> usize {
        let mut lo = 0usize;
        let mut hi = self.len();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &FreqTable, sym: usize) -> Result<()> {
        if sym >= table.len() {
            return Err(CodecError::Symbol(format!(
                "symbol {} outside alphabet of {}",
                sym,
                table.len()
            )));
        }
        let r = self.range >> FREQ_BITS;
        self.low = self.low.wrapping_add(r * table.cum_lo(sym) as u64);
        self.range = r * table.freq(sym) as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOTTOM {
                    break;
                }
                // Interval straddles a byte boundary: cut at the boundary.
                self.range = self.low.wrapping_neg() & (BOTTOM - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Flush the final interval; adds exactly 8 bytes.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..8 {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
        }
        self.out
    }

    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }
}

pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<RangeDecoder<'a>> {
        let mut d = RangeDecoder {
            low: 0,
            range: u64::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos >= self.input.len() {
            return Err(CodecError::Decode("range-coded stream exhausted".into()));
        }
        let b = self.input[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let offset = self.code.wrapping_sub(self.low);
        let target = (offset / r).min(FREQ_TOTAL as u64 - 1) as u32;
        let sym = table.find(target);
        self.low = self.low.wrapping_add(r * table.cum_lo(sym) as u64);
        self.range = r * table.freq(sym) as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOTTOM {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOTTOM - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(sym)
    }
}

// ---- value layer: [-256, 256] plus escapes ----

fn bit_table() -> &'static FreqTable {
    use std::sync::OnceLock;
    static T: OnceLock<FreqTable> = OnceLock::new();
    T.get_or_init(|| FreqTable::uniform(2))
}

pub fn value_to_symbol(v: i32) -> usize {
    if v < SYM_MIN {
        ESC_LOW
    } else if v > SYM_MAX {
        ESC_HIGH
    } else {
        (v - SYM_MIN + 1) as usize
    }
}

pub fn encode_value(enc: &mut RangeEncoder, table: &FreqTable, v: i32) -> Result<()> {
    let sym = value_to_symbol(v);
    enc.encode(table, sym)?;
    if sym == ESC_LOW || sym == ESC_HIGH {
        let raw = v as u32;
        let bt = bit_table();
        for i in (0..32).rev() {
            enc.encode(bt, ((raw >> i) & 1) as usize)?;
        }
    }
    Ok(())
}

pub fn decode_value(dec: &mut RangeDecoder, table: &FreqTable) -> Result<i32> {
    let sym = dec.decode(table)?;
    if sym == ESC_LOW || sym == ESC_HIGH {
        let bt = bit_table();
        let mut raw = 0u32;
        for _ in 0..32 {
            raw = (raw << 1) | dec.decode(bt)? as u32;
        }
        Ok(raw as i32)
    } else {
        Ok(sym as i32 + SYM_MIN - 1)
    }
}

/// Exact code cost in bits of a value under a table (escapes cost 32 extra).
pub fn value_bits(table: &FreqTable, v: i32) -> f64 {
    let sym = value_to_symbol(v);
    let mut bits = table.bits(sym);
    if sym == ESC_LOW || sym == ESC_HIGH {
        bits += 32.0;
    }
    bits
}

// ---- deterministic Gaussian tables ----

/// Fixed-point parameter grid: 8 fractional bits.
pub const PARAM_FRAC_BITS: i32 = 8;
const PARAM_ONE: f64 = 256.0;

pub const SIGMA_MIN: f32 = 0.04;
pub const SIGMA_MAX: f32 = 256.0;

/// Quantized (mu, sigma) pair; table construction keys off these exact
/// integers, so encoder and decoder build identical tables even if their
/// float paths diverged in the last ulp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GaussParams {
    pub mu_fp: i32,
    pub sigma_fp: u32,
}

impl GaussParams {
    pub fn quantize(mu: f32, sigma: f32) -> GaussParams {
        let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
        let m = mu.clamp((SYM_MIN - 1) as f32, (SYM_MAX + 1) as f32);
        GaussParams {
            mu_fp: (m as f64 * PARAM_ONE).round() as i32,
            sigma_fp: ((s as f64 * PARAM_ONE).round() as u32).max(11),
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu_fp as f64 / PARAM_ONE
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_fp as f64 / PARAM_ONE
    }
}

/// Standard normal CDF via a rational-polynomial approximation evaluated
/// with plain +,*,/ only (no libm), so the result is bit-stable across
/// platforms. Absolute error < 1.5e-7.
pub fn normal_cdf(x: f64) -> f64 {
    let ax = if x < 0.0 { -x } else { x };
    let ax = if ax > 40.0 { 40.0 } else { ax };
    // Abramowitz & Stegun 26.2.19.
    const D1: f64 = 0.049_867_347_0;
    const D2: f64 = 0.021_141_006_1;
    const D3: f64 = 0.003_277_626_3;
    const D4: f64 = 0.000_038_003_6;
    const D5: f64 = 0.000_048_890_6;
    const D6: f64 = 0.000_005_383_0;
    let t = 1.0 + ax * (D1 + ax * (D2 + ax * (D3 + ax * (D4 + ax * (D5 + ax * D6)))));
    let t2 = t * t;
    let t4 = t2 * t2;
    let t8 = t4 * t4;
    let t16 = t8 * t8;
    let upper = 1.0 - 0.5 / t16;
    if x < 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

/// Discretized-Gaussian frequency table over the escape alphabet.
pub fn gaussian_to_freq(params: GaussParams) -> FreqTable {
    let mu = params.mu();
    let sigma = params.sigma();
    let inv = 1.0 / sigma;
    let mut probs = vec![0.0f64; ALPHABET];
    let mut prev = normal_cdf((SYM_MIN as f64 - 0.5 - mu) * inv);
    probs[ESC_LOW] = prev;
    for v in SYM_MIN..=SYM_MAX {
        let hi = normal_cdf((v as f64 + 0.5 - mu) * inv);
        probs[(v - SYM_MIN + 1) as usize] = hi - prev;
        prev = hi;
    }
    probs[ESC_HIGH] = 1.0 - prev;
    FreqTable::from_probs(&probs).expect("gaussian table")
}

/// Memoizing table builder; coding a tensor reuses tables heavily.
#[derive(Default)]
pub struct GaussTableCache {
    map: HashMap<GaussParams, FreqTable>,
}

impl GaussTableCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, params: GaussParams) -> &FreqTable {
        self.map.entry(params).or_insert_with(|| gaussian_to_freq(params))
    }
}
