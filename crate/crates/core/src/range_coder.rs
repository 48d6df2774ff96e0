//! Reference range coder over 16-bit fixed-point frequency tables.
//!
//! Carry-less byte-wise coder with a 64-bit state. Every table row ends with
//! an escape symbol; values outside a row's support are coded as the escape
//! followed by raw bits (side, then the Elias-γ code of the distance past
//! the support edge). The byte stream produced here is the payload format.

use thiserror::Error;

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoderError {
    #[error("table mismatch: {0}")]
    TableMismatch(String),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("row {row} out of range ({rows} rows)")]
    RowOutOfRange { row: u32, rows: usize },
    #[error("{0} symbols but {1} row references")]
    LengthMismatch(usize, usize),
}

/// Cumulative-frequency rows flattened into one buffer.
///
/// Row `r` holds the start of each symbol's interval in
/// `cdf[offsets[r]..offsets[r + 1]]`; its last entry belongs to the escape
/// symbol and the implicit end of every row is `2^16`. `lo[r]` is the value
/// of the row's first symbol.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackedTables {
    pub cdf: Vec<u16>,
    pub offsets: Vec<u32>,
    pub lo: Vec<i32>,
}

impl PackedTables {
    pub fn new() -> Self {
        Self { cdf: Vec::new(), offsets: vec![0], lo: Vec::new() }
    }

    /// Append a row given its frequencies (escape last). Returns its index.
    pub fn push_row(&mut self, lo: i32, freqs: &[u32]) -> Result<u32, CoderError> {
        if freqs.len() < 2 {
            return Err(CoderError::TableMismatch("a row needs at least one symbol and the escape".into()));
        }
        let mut acc = 0u32;
        let start = self.cdf.len();
        for &f in freqs {
            if f == 0 || acc >= FREQ_TOTAL {
                self.cdf.truncate(start);
                return Err(CoderError::TableMismatch(format!("zero frequency or overflow in row {}", self.lo.len())));
            }
            self.cdf.push(acc as u16);
            acc += f;
        }
        if acc != FREQ_TOTAL {
            self.cdf.truncate(start);
            return Err(CoderError::TableMismatch(format!("row sums to {acc}, expected {FREQ_TOTAL}")));
        }
        self.offsets.push(self.cdf.len() as u32);
        self.lo.push(lo);
        Ok(self.lo.len() as u32 - 1)
    }

    pub fn rows(&self) -> usize {
        self.lo.len()
    }

    /// Structural check for tables that did not come from [`push_row`].
    pub fn validate(&self) -> Result<(), CoderError> {
        if self.offsets.len() != self.lo.len() + 1 || self.offsets.first() != Some(&0) {
            return Err(CoderError::TableMismatch("offsets do not match row count".into()));
        }
        if *self.offsets.last().unwrap() as usize != self.cdf.len() {
            return Err(CoderError::TableMismatch("offsets do not cover the cdf buffer".into()));
        }
        for r in 0..self.rows() {
            let row = self.row(r);
            if row.len() < 2 || row[0] != 0 || row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CoderError::TableMismatch(format!("row {r} is not strictly increasing from 0")));
            }
        }
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[u16] {
        &self.cdf[self.offsets[r] as usize..self.offsets[r + 1] as usize]
    }

    fn checked_row(&self, r: u32) -> Result<&[u16], CoderError> {
        if r as usize >= self.rows() {
            return Err(CoderError::RowOutOfRange { row: r, rows: self.rows() });
        }
        Ok(self.row(r as usize))
    }

    /// Frequency of entry `i` of row `r`.
    pub fn freq(&self, r: usize, i: usize) -> u32 {
        let row = self.row(r);
        let end = if i + 1 < row.len() { row[i + 1] as u32 } else { FREQ_TOTAL };
        end - row[i] as u32
    }
}

fn interval(row: &[u16], i: usize) -> (u32, u32) {
    let start = row[i] as u32;
    let end = if i + 1 < row.len() { row[i + 1] as u32 } else { FREQ_TOTAL };
    (start, end - start)
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
    pub fn new() -> Self {
        Self { low: 0, range: u64::MAX, out: Vec::new() }
    }

    /// Code the interval `[cum, cum + freq)` out of `2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= FREQ_TOTAL);
        let r = self.range >> FREQ_BITS;
        self.low += cum as u64 * r;
        self.range = r * freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn encode_bit(&mut self, bit: bool) {
        let half = FREQ_TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half);
    }

    /// Emit the shortest byte string that pins a value inside the final
    /// interval; the decoder pads with zero bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let low = self.low as u128;
        let high = low + self.range as u128;
        for n in 0..=8u32 {
            let unit = 1u128 << (64 - 8 * n);
            let v = low.div_ceil(unit) * unit;
            if v < high {
                for k in 0..n {
                    self.out.push((v >> (56 - 8 * k)) as u8);
                }
                return self.out;
            }
        }
        unreachable!("an interval of positive width contains a multiple of 2^0")
    }

    pub fn bytes_so_far(&self) -> usize {
        self.out.len()
    }
}

pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self { low: 0, range: u64::MAX, code: 0, bytes, pos: 0 };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// The cumulative frequency the next symbol's interval must contain.
    pub fn target(&mut self) -> Result<u32, CoderError> {
        let r = self.range >> FREQ_BITS;
        let t = self.code.wrapping_sub(self.low) / r;
        if t >= FREQ_TOTAL as u64 {
            return Err(CoderError::Corrupt(format!("target {t} outside the frequency range at byte {}", self.pos)));
        }
        Ok(t as u32)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) {
        let r = self.range >> FREQ_BITS;
        self.low += cum as u64 * r;
        self.range = r * freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn decode_bit(&mut self) -> Result<bool, CoderError> {
        let half = FREQ_TOTAL / 2;
        let bit = self.target()? >= half;
        self.consume(if bit { half } else { 0 }, half);
        Ok(bit)
    }

    /// Bytes read past the end of the input (zero padding).
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.bytes.len())
    }
}

fn encode_escape_tail(enc: &mut RangeEncoder, below: bool, distance: u64) {
    enc.encode_bit(below);
    debug_assert!(distance >= 1);
    let nbits = 64 - distance.leading_zeros();
    for _ in 1..nbits {
        enc.encode_bit(false);
    }
    for k in (0..nbits).rev() {
        enc.encode_bit((distance >> k) & 1 == 1);
    }
}

fn decode_escape_tail(dec: &mut RangeDecoder) -> Result<(bool, u64), CoderError> {
    let below = dec.decode_bit()?;
    let mut zeros = 0;
    while !dec.decode_bit()? {
        zeros += 1;
        if zeros > 32 {
            return Err(CoderError::Corrupt("escape magnitude longer than 33 bits".into()));
        }
    }
    let mut v = 1u64;
    for _ in 0..zeros {
        v = (v << 1) | dec.decode_bit()? as u64;
    }
    Ok((below, v))
}

/// Number of raw bits the escape path spends on `value` for a row.
fn escape_bits(lo: i32, n_sym: usize, value: i32) -> Option<u32> {
    let hi = lo as i64 + n_sym as i64 - 1;
    let v = value as i64;
    let distance = if v < lo as i64 {
        lo as i64 - v
    } else if v > hi {
        v - hi
    } else {
        return None;
    };
    let nbits = 64 - (distance as u64).leading_zeros();
    Some(1 + 2 * nbits - 1)
}

pub fn encode_symbol(enc: &mut RangeEncoder, tables: &PackedTables, row: u32, value: i32) -> Result<(), CoderError> {
    let r = tables.checked_row(row)?;
    let lo = tables.lo[row as usize];
    let n_sym = r.len() - 1;
    let idx = value as i64 - lo as i64;
    if idx >= 0 && (idx as usize) < n_sym {
        let (cum, freq) = interval(r, idx as usize);
        enc.encode(cum, freq);
    } else {
        let (cum, freq) = interval(r, n_sym);
        enc.encode(cum, freq);
        let hi = lo as i64 + n_sym as i64 - 1;
        let (below, distance) = if idx < 0 { (true, (lo as i64 - value as i64) as u64) } else { (false, (value as i64 - hi) as u64) };
        encode_escape_tail(enc, below, distance);
    }
    Ok(())
}

pub fn decode_symbol(dec: &mut RangeDecoder, tables: &PackedTables, row: u32) -> Result<i32, CoderError> {
    let r = tables.checked_row(row)?;
    let lo = tables.lo[row as usize];
    let n_sym = r.len() - 1;
    let t = dec.target()?;
    let idx = r.partition_point(|&s| s as u32 <= t) - 1;
    let (cum, freq) = interval(r, idx);
    dec.consume(cum, freq);
    if idx < n_sym {
        return Ok(lo + idx as i32);
    }
    let (below, distance) = decode_escape_tail(dec)?;
    let hi = lo as i64 + n_sym as i64 - 1;
    let v = if below { lo as i64 - distance as i64 } else { hi + distance as i64 };
    i32::try_from(v).map_err(|_| CoderError::Corrupt(format!("escaped value {v} overflows i32")))
}

/// Code `symbols[i]` under row `rows[i]`.
pub fn encode(symbols: &[i32], rows: &[u32], tables: &PackedTables) -> Result<Vec<u8>, CoderError> {
    if symbols.len() != rows.len() {
        return Err(CoderError::LengthMismatch(symbols.len(), rows.len()));
    }
    let mut enc = RangeEncoder::new();
    for (&s, &r) in symbols.iter().zip(rows) {
        encode_symbol(&mut enc, tables, r, s)?;
    }
    Ok(enc.finish())
}

pub fn decode(bytes: &[u8], rows: &[u32], tables: &PackedTables) -> Result<Vec<i32>, CoderError> {
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(rows.len());
    for &r in rows {
        out.push(decode_symbol(&mut dec, tables, r)?);
    }
    // A valid stream never needs more than the final value's 8-byte window.
    if dec.overrun() > 8 {
        return Err(CoderError::Corrupt("stream ended early".into()));
    }
    Ok(out)
}

/// `Σ −log2 P(s)` under the fixed-point tables, counting escaped symbols as
/// the escape cost plus their raw bits.
pub fn ideal_bits(symbols: &[i32], rows: &[u32], tables: &PackedTables) -> f64 {
    symbols
        .iter()
        .zip(rows)
        .map(|(&s, &r)| {
            let row = tables.row(r as usize);
            let lo = tables.lo[r as usize];
            let n_sym = row.len() - 1;
            match escape_bits(lo, n_sym, s) {
                None => {
                    let f = tables.freq(r as usize, (s - lo) as usize);
                    FREQ_BITS as f64 - (f as f64).log2()
                }
                Some(raw) => FREQ_BITS as f64 - (tables.freq(r as usize, n_sym) as f64).log2() + raw as f64,
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_row(n: usize) -> Vec<u32> {
        let mut f = vec![(FREQ_TOTAL - 1) / n as u32; n];
        let used: u32 = f.iter().sum::<u32>() + 1;
        f[0] += FREQ_TOTAL - used;
        f.push(1);
        f
    }

    #[test]
    fn empty_stream_flushes_nothing() {
        let t = PackedTables::new();
        let bytes = encode(&[], &[], &t).unwrap();
        assert!(bytes.len() <= 8);
        assert!(decode(&bytes, &[], &t).unwrap().is_empty());
    }

    #[test]
    fn certain_symbol_is_almost_free() {
        let mut t = PackedTables::new();
        t.push_row(0, &[FREQ_TOTAL - 1, 1]).unwrap();
        let syms = vec![0; 1000];
        let rows = vec![0; 1000];
        let bytes = encode(&syms, &rows, &t).unwrap();
        assert!(bytes.len() <= 2, "{} bytes", bytes.len());
        assert_eq!(decode(&bytes, &rows, &t).unwrap(), syms);
    }

    #[test]
    fn uniform_bytes_cost_a_byte_each() {
        let mut t = PackedTables::new();
        t.push_row(0, &uniform_row(256)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let syms: Vec<i32> = (0..1000).map(|_| rng.gen_range(0..256)).collect();
        let rows = vec![0; 1000];
        let bytes = encode(&syms, &rows, &t).unwrap();
        assert!((1000..=1004).contains(&bytes.len()), "{}", bytes.len());
        assert_eq!(decode(&bytes, &rows, &t).unwrap(), syms);
    }

    #[test]
    fn escapes_round_trip() {
        let mut t = PackedTables::new();
        t.push_row(-2, &uniform_row(5)).unwrap();
        let syms = vec![-3, 3, 0, i32::MIN, i32::MAX, -1_000_000, 77, 2, -2];
        let rows = vec![0; syms.len()];
        let bytes = encode(&syms, &rows, &t).unwrap();
        assert_eq!(decode(&bytes, &rows, &t).unwrap(), syms);
        let bits = ideal_bits(&syms, &rows, &t);
        assert!((bytes.len() * 8) as f64 <= bits + 32.0);
    }

    #[test]
    fn bad_tables_are_rejected() {
        let mut t = PackedTables::new();
        assert!(t.push_row(0, &[FREQ_TOTAL, 0]).is_err());
        assert!(t.push_row(0, &[100, 1]).is_err());
        assert!(t.push_row(0, &[1]).is_err());
        assert_eq!(t.rows(), 0);
        assert!(t.cdf.is_empty());
        t.push_row(0, &[FREQ_TOTAL - 1, 1]).unwrap();
        t.validate().unwrap();
        assert!(matches!(encode(&[0], &[3], &t), Err(CoderError::RowOutOfRange { .. })));
        let mut broken = t.clone();
        broken.cdf[1] = 0;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn perturbed_table_diverges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs: Vec<f64> = (0..20).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let freqs = crate::entropy::quantize_pmf(&probs);
        let mut t = PackedTables::new();
        t.push_row(0, &freqs).unwrap();
        let syms: Vec<i32> = (0..2000).map(|_| rng.gen_range(0..20)).collect();
        let rows = vec![0; syms.len()];
        let bytes = encode(&syms, &rows, &t).unwrap();
        let mut f2 = freqs.clone();
        f2[3] += 1;
        f2[7] -= 1;
        let mut t2 = PackedTables::new();
        t2.push_row(0, &f2).unwrap();
        match decode(&bytes, &rows, &t2) {
            Ok(d) => assert_ne!(d, syms),
            Err(_) => {}
        }
    }

    #[test]
    fn garbage_never_panics() {
        let mut t = PackedTables::new();
        t.push_row(-4, &uniform_row(9)).unwrap();
        t.push_row(0, &[FREQ_TOTAL - 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let n = rng.gen_range(0..64);
            let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
            let rows: Vec<u32> = (0..rng.gen_range(0..200)).map(|_| rng.gen_range(0..2)).collect();
            let _ = decode(&bytes, &rows, &t);
        }
    }

    proptest! {
        #[test]
        fn round_trip_any_table(
            seed in 0u64..10_000,
            n_rows in 1usize..5,
            len in 0usize..400,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = PackedTables::new();
            for _ in 0..n_rows {
                let n = rng.gen_range(1..40);
                let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(4)).collect();
                let s: f64 = probs.iter().sum::<f64>().max(1e-12);
                let probs: Vec<f64> = probs.iter().map(|p| p / s).collect();
                t.push_row(rng.gen_range(-20..20), &crate::entropy::quantize_pmf(&probs)).unwrap();
            }
            let rows: Vec<u32> = (0..len).map(|_| rng.gen_range(0..n_rows as u32)).collect();
            let syms: Vec<i32> = rows.iter().map(|&r| {
                let lo = t.lo[r as usize];
                lo + rng.gen_range(-2..t.row(r as usize).len() as i32 + 1)
            }).collect();
            let bytes = encode(&syms, &rows, &t).unwrap();
            prop_assert_eq!(decode(&bytes, &rows, &t).unwrap(), syms.clone());
            let ideal = ideal_bits(&syms, &rows, &t);
            prop_assert!((bytes.len() * 8) as f64 <= ideal + 32.0 + 0.01 * ideal);
        }
    }
}
