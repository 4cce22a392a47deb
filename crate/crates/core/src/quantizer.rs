//! Uniform per-coordinate quantization and the bit-level message codec.
//!
//! A [`QuantGrid`] splits each coordinate interval `[lower_c, upper_c]` into
//! `2^b` equally spaced points. Quantizing picks the nearest point (exact ties
//! go to the lower index) after clamping into the interval, and the chosen
//! indices travel as a fixed-width [`BitString`] of exactly `b * d` bits.
//!
//! The adaptive part lives in [`adaptive_interval`]: each round the interval
//! is recentered on the previous quantized value and its width is `gamma`
//! times the previous step size, so the resolution shrinks with the step.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Widest supported field. Grid indices must be exactly representable as f64.
pub const MAX_BITS: u32 = 52;

fn check_bits(bits: u32) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::validation("bits", format!("must be in 1..={MAX_BITS}, got {bits}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    resolution: Vec<f64>,
    bits: u32,
}

impl QuantGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if lower.len() != upper.len() {
            return Err(Error::ConfigMismatch(format!(
                "grid bounds have {} and {} coordinates",
                lower.len(),
                upper.len()
            )));
        }
        for (c, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Malformed(format!(
                    "invalid interval [{lo}, {hi}] at coordinate {c}"
                )));
            }
        }
        Ok(Self::from_bounds(lower, upper, bits))
    }

    fn from_bounds(lower: Vec<f64>, upper: Vec<f64>, bits: u32) -> Self {
        let steps = ((1u64 << bits) - 1) as f64;
        let resolution = lower
            .iter()
            .zip(&upper)
            .map(|(lo, hi)| (hi - lo) / steps)
            .collect();
        Self {
            lower,
            upper,
            resolution,
            bits,
        }
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Grid spacing per coordinate, `(upper - lower) / (2^b - 1)`.
    pub fn resolution(&self) -> &[f64] {
        &self.resolution
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn points_per_coord(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn max_index(&self) -> u64 {
        self.points_per_coord() - 1
    }

    /// Grid point `index` of coordinate `c`. The last index maps to `upper`
    /// exactly.
    pub fn point(&self, c: usize, index: u64) -> f64 {
        grid_point(self.lower[c], self.upper[c], self.resolution[c], index, self.max_index())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Number of coordinates of `x` lying outside the interval.
    pub fn outside_count(&self, x: &[f64]) -> usize {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|&(v, (lo, hi))| !(lo <= v && v <= hi))
            .count()
    }

    fn nearest_index(&self, c: usize, value: f64) -> u64 {
        let (lo, hi, res) = (self.lower[c], self.upper[c], self.resolution[c]);
        if res == 0.0 || value.is_nan() {
            return 0;
        }
        let v = value.clamp(lo, hi);
        let max = self.max_index();
        let guess = ((v - lo) / res).floor().clamp(0.0, max as f64) as u64;
        // The float floor can be off by one either way; scan its neighborhood
        // in increasing order so an exact tie keeps the lower index.
        let mut best = guess.saturating_sub(1);
        let mut best_dist = (self.point(c, best) - v).abs();
        for m in best + 1..=(guess + 2).min(max) {
            let dist = (self.point(c, m) - v).abs();
            if dist < best_dist {
                best = m;
                best_dist = dist;
            }
        }
        best
    }
}

fn grid_point(lower: f64, upper: f64, resolution: f64, index: u64, max_index: u64) -> f64 {
    if index >= max_index {
        upper
    } else {
        (lower + index as f64 * resolution).min(upper)
    }
}

/// Quantized indices of one vector, `bits` wide each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeWord {
    indices: Vec<u64>,
    bits: u32,
}

impl CodeWord {
    pub fn new(indices: Vec<u64>, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let max = (1u64 << bits) - 1;
        if let Some((coord, &index)) = indices.iter().enumerate().find(|(_, &i)| i > max) {
            return Err(Error::IndexOutOfRange { coord, index, bits });
        }
        Ok(Self { indices, bits })
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn pack(&self) -> BitString {
        pack_unchecked(&self.indices, self.bits)
    }

    pub fn unpack(bits: &BitString, width: u32, dim: usize) -> Result<Self> {
        Ok(Self {
            indices: unpack(bits, width, dim)?,
            bits: width,
        })
    }
}

/// A bit sequence stored most-significant-bit first, zero padded to whole
/// bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

impl BitString {
    pub fn zeros(len: usize) -> Self {
        Self {
            bytes: vec![0; len.div_ceil(8)],
            len,
        }
    }

    /// Takes `len` bits from `bytes`; trailing padding must be zero.
    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::LengthMismatch {
                expected: len.div_ceil(8) * 8,
                actual: bytes.len() * 8,
            });
        }
        let pad = bytes.len() * 8 - len;
        if pad > 0 && bytes[bytes.len() - 1] & ((1u8 << pad) - 1) != 0 {
            return Err(Error::Malformed("nonzero padding bits".into()));
        }
        Ok(Self { bytes, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// `width` bits starting at bit `start`, as an unsigned integer.
    fn read(&self, start: usize, width: usize) -> u64 {
        debug_assert!(width <= MAX_BITS as usize && start + width <= self.len);
        // Offset plus width is at most 7 + 52 bits, so one 8-byte window holds it.
        let first = start / 8;
        let word = match self.bytes.get(first..first + 8) {
            Some(window) => u64::from_be_bytes(window.try_into().expect("8-byte window")),
            None => self.bytes[first..]
                .iter()
                .enumerate()
                .fold(0u64, |acc, (k, &b)| acc | (b as u64) << (56 - 8 * k)),
        };
        if width == 0 {
            return 0;
        }
        (word << (start % 8)) >> (64 - width)
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    fn set(&mut self, i: usize) {
        self.bytes[i / 8] |= 0x80 >> (i % 8);
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = BitString::zeros(s.len());
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '0' => {}
                '1' => out.set(i),
                other => return Err(Error::Malformed(format!("invalid bit character {other:?}"))),
            }
        }
        Ok(out)
    }
}

/// Packs `b`-bit indices coordinate-major, most significant bit first.
pub fn pack(indices: &[u64], bits: u32) -> Result<BitString> {
    Ok(CodeWord::new(indices.to_vec(), bits)?.pack())
}

fn pack_unchecked(indices: &[u64], bits: u32) -> BitString {
    let width = bits as usize;
    let mut out = BitString::zeros(width * indices.len());
    for (c, &index) in indices.iter().enumerate() {
        for k in 0..width {
            if (index >> (width - 1 - k)) & 1 == 1 {
                out.set(c * width + k);
            }
        }
    }
    out
}

pub fn unpack(bits: &BitString, width: u32, dim: usize) -> Result<Vec<u64>> {
    check_bits(width)?;
    let w = width as usize;
    if bits.len() != w * dim {
        return Err(Error::LengthMismatch {
            expected: w * dim,
            actual: bits.len(),
        });
    }
    Ok((0..dim)
        .map(|c| bits.read(c * w, w))
        .collect())
}

/// Nearest grid point per coordinate after clamping into the grid.
pub fn quantize(x: &[f64], grid: &QuantGrid) -> CodeWord {
    debug_assert_eq!(x.len(), grid.dim());
    CodeWord {
        indices: (0..grid.dim()).map(|c| grid.nearest_index(c, x[c])).collect(),
        bits: grid.bits,
    }
}

pub fn dequantize(cw: &CodeWord, grid: &QuantGrid) -> Result<Vec<f64>> {
    if cw.indices.len() != grid.dim() || cw.bits != grid.bits {
        return Err(Error::ConfigMismatch(format!(
            "codeword ({} coords, {} bits) does not match grid ({} coords, {} bits)",
            cw.indices.len(),
            cw.bits,
            grid.dim(),
            grid.bits
        )));
    }
    let max = grid.max_index();
    cw.indices
        .iter()
        .enumerate()
        .map(|(c, &index)| {
            if index > max {
                Err(Error::IndexOutOfRange {
                    coord: c,
                    index,
                    bits: grid.bits,
                })
            } else {
                Ok(grid.point(c, index))
            }
        })
        .collect()
}

/// Half width `(gamma / 2) * alpha_prev` of an adaptive interval.
pub fn interval_half_width(gamma: f64, alpha_prev: f64) -> f64 {
    0.5 * gamma * alpha_prev
}

/// Interval for the next round: `center ± (gamma / 2) * alpha_prev`.
pub fn adaptive_interval(center: &[f64], gamma: f64, alpha_prev: f64, bits: u32) -> QuantGrid {
    let half = interval_half_width(gamma, alpha_prev);
    let lower = center.iter().map(|q| q - half).collect();
    let upper = center.iter().map(|q| q + half).collect();
    QuantGrid::from_bounds(lower, upper, bits)
}

/// Receiver-side decode of a payload quantized over `center ± half`.
///
/// Produces exactly the values `dequantize` would over the corresponding
/// [`adaptive_interval`] grid, without allocating one.
pub fn decode_centered(payload: &BitString, center: &[f64], half: f64, bits: u32, out: &mut [f64]) -> Result<()> {
    check_bits(bits)?;
    let width = bits as usize;
    if payload.len() != width * center.len() || out.len() != center.len() {
        return Err(Error::LengthMismatch {
            expected: width * center.len(),
            actual: payload.len(),
        });
    }
    let max = (1u64 << bits) - 1;
    let steps = max as f64;
    for (c, (q, o)) in center.iter().zip(out.iter_mut()).enumerate() {
        let index = payload.read(c * width, width);
        let (lo, hi) = (q - half, q + half);
        *o = grid_point(lo, hi, (hi - lo) / steps, index, max);
    }
    Ok(())
}

/// Interval scale `48 (2 + L) / (1 - sigma2)`.
pub fn compute_gamma(lipschitz: f64, sigma2: f64) -> Result<f64> {
    if sigma2.is_nan() || sigma2 >= 1.0 {
        return Err(Error::DegenerateSpectrum { sigma2 });
    }
    if lipschitz.is_nan() || lipschitz < 0.0 {
        return Err(Error::validation("lipschitz", format!("must be nonnegative, got {lipschitz}")));
    }
    Ok(48.0 * (2.0 + lipschitz) / (1.0 - sigma2))
}

/// Whether `sqrt(n d) * gamma <= 2^b - 1`, the bit budget under which
/// iterates provably stay inside their quantization intervals.
pub fn check_bandwidth(n: usize, d: usize, gamma: f64, bits: u32) -> bool {
    let levels = ((1u64 << bits.min(63)) - 1) as f64;
    ((n * d) as f64).sqrt() * gamma <= levels
}

/// Smallest `b` with `sqrt(n d) * gamma <= 2^b - 1`, or `None` if that exceeds
/// [`MAX_BITS`].
pub fn bits_for_bandwidth(n: usize, d: usize, gamma: f64) -> Option<u32> {
    (1..=MAX_BITS).find(|&b| check_bandwidth(n, d, gamma, b))
}

/// One broadcast of a node in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub node: u32,
    pub round: u32,
    pub payload: BitString,
}

impl Message {
    /// Node id and round as little-endian u32, then the padded payload.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.payload.as_bytes().len());
        out.extend_from_slice(&self.node.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(self.payload.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8], bits: u32, dim: usize) -> Result<Self> {
        let payload_bits = bits as usize * dim;
        let expected = 8 + payload_bits.div_ceil(8);
        if bytes.len() != expected {
            return Err(Error::LengthMismatch {
                expected: expected * 8,
                actual: bytes.len() * 8,
            });
        }
        let node = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let round = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let payload = BitString::from_bytes(bytes[8..].to_vec(), payload_bits)?;
        Ok(Self {
            node,
            round,
            payload,
        })
    }
}

/// Length-prefixed message records (u32 little-endian byte count).
pub struct MessageLogWriter<W: Write> {
    out: W,
    records: u64,
}

impl<W: Write> MessageLogWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, records: 0 }
    }

    pub fn write(&mut self, message: &Message) -> Result<()> {
        let record = message.encode();
        self.out.write_all(&(record.len() as u32).to_le_bytes())?;
        self.out.write_all(&record)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn read_message_log<R: Read>(mut input: R, bits: u32, dim: usize) -> Result<Vec<Message>> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut messages = Vec::new();
    let mut rest = data.as_slice();
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(Error::Malformed("truncated record length".into()));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(Error::Malformed("truncated record".into()));
        }
        messages.push(Message::decode(&rest[..len], bits, dim)?);
        rest = &rest[len..];
    }
    Ok(messages)
}
