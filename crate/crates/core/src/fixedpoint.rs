//! Q(IL,FL) fixed-point arithmetic.
//!
//! Narrow values carry `il + fl` bits in two's complement (the sign bit is
//! counted in `il`). Products and sums live in a [`WideAcc`] that has twice
//! the integer and twice the fraction bits, so a product of two narrow values
//! is always exact. Going back to the narrow format happens through one of the
//! two rounding schemes in [`Rounding`]; both saturate instead of wrapping.
//!
//! Stochastic rounding draws its randomness from a 32-bit Fibonacci [`Lfsr`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedError {
    #[error("invalid Q format Q{il}.{fl}: need il >= 1, fl >= 1 and il + fl <= 32")]
    InvalidFormat { il: u32, fl: u32 },
    #[error("format mismatch: {left} vs {right}")]
    FormatMismatch { left: QFormat, right: QFormat },
    #[error("raw value {raw} does not fit in {format}")]
    OutOfRange { raw: i128, format: QFormat },
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error("LFSR state must be non-zero")]
    ZeroSeed,
    #[error("LFSR draw of {0} bits outside 1..=32")]
    InvalidDraw(u32),
    #[error("LFSR width {width} with taps {taps:?} is not usable")]
    InvalidLfsr { width: u32, taps: Vec<u32> },
}

/// A fixed-point format with `il` integer bits (sign included) and `fl`
/// fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "QFormatRepr", into = "QFormatRepr")]
pub struct QFormat {
    il: u8,
    fl: u8,
}

#[derive(Serialize, Deserialize)]
struct QFormatRepr {
    il: u32,
    fl: u32,
}

impl TryFrom<QFormatRepr> for QFormat {
    type Error = FixedError;
    fn try_from(r: QFormatRepr) -> Result<Self, Self::Error> {
        QFormat::new(r.il, r.fl)
    }
}

impl From<QFormat> for QFormatRepr {
    fn from(q: QFormat) -> Self {
        QFormatRepr { il: q.il(), fl: q.fl() }
    }
}

impl Default for QFormat {
    fn default() -> Self {
        QFormat::Q4_16
    }
}

impl std::fmt::Display for QFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Q{}.{}", self.il, self.fl)
    }
}

impl QFormat {
    pub const Q4_16: QFormat = QFormat { il: 4, fl: 16 };
    pub const Q4_8: QFormat = QFormat { il: 4, fl: 8 };

    pub fn new(il: u32, fl: u32) -> Result<Self, FixedError> {
        if il == 0 || fl == 0 || il + fl > 32 {
            return Err(FixedError::InvalidFormat { il, fl });
        }
        Ok(QFormat { il: il as u8, fl: fl as u8 })
    }

    pub fn il(self) -> u32 {
        self.il as u32
    }

    pub fn fl(self) -> u32 {
        self.fl as u32
    }

    /// Narrow word width `il + fl`.
    pub fn bits(self) -> u32 {
        self.il() + self.fl()
    }

    /// Smallest positive step, `2^-fl`.
    pub fn epsilon(self) -> f64 {
        (-(self.fl() as f64)).exp2()
    }

    pub fn raw_min(self) -> i64 {
        -(1i64 << (self.bits() - 1))
    }

    pub fn raw_max(self) -> i64 {
        (1i64 << (self.bits() - 1)) - 1
    }

    pub fn wide_raw_min(self) -> i64 {
        (-(1i128 << (2 * self.bits() - 1))) as i64
    }

    pub fn wide_raw_max(self) -> i64 {
        ((1i128 << (2 * self.bits() - 1)) - 1) as i64
    }

    pub fn min_value(self) -> f64 {
        self.raw_min() as f64 * self.epsilon()
    }

    pub fn max_value(self) -> f64 {
        self.raw_max() as f64 * self.epsilon()
    }

    /// Bytes needed to store one narrow raw value.
    pub fn storage_bytes(self) -> usize {
        self.bits().div_ceil(8) as usize
    }
}

/// Per-tensor saturation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Saturation {
    /// Roundings whose result had to be clamped to the narrow range.
    pub narrow: u64,
    /// Accumulations clamped to the wide range.
    pub wide: u64,
}

impl Saturation {
    pub fn merge(&mut self, other: Saturation) {
        self.narrow += other.narrow;
        self.wide += other.wide;
    }

    pub fn total(&self) -> u64 {
        self.narrow + self.wide
    }
}

impl std::ops::AddAssign for Saturation {
    fn add_assign(&mut self, rhs: Self) {
        self.merge(rhs);
    }
}

/// A narrow fixed-point value: `raw * 2^-fl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fixed {
    raw: i64,
    fmt: QFormat,
}

impl Fixed {
    pub fn zero(fmt: QFormat) -> Self {
        Fixed { raw: 0, fmt }
    }

    pub fn from_raw(raw: i64, fmt: QFormat) -> Result<Self, FixedError> {
        if raw < fmt.raw_min() || raw > fmt.raw_max() {
            return Err(FixedError::OutOfRange { raw: raw as i128, format: fmt });
        }
        Ok(Fixed { raw, fmt })
    }

    /// Clamps `raw` into range, reporting whether clamping happened.
    pub fn saturating_from_raw(raw: i128, fmt: QFormat) -> (Self, bool) {
        let lo = fmt.raw_min() as i128;
        let hi = fmt.raw_max() as i128;
        let clamped = raw.clamp(lo, hi);
        (Fixed { raw: clamped as i64, fmt }, clamped != raw)
    }

    pub fn max(fmt: QFormat) -> Self {
        Fixed { raw: fmt.raw_max(), fmt }
    }

    pub fn min(fmt: QFormat) -> Self {
        Fixed { raw: fmt.raw_min(), fmt }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn format(self) -> QFormat {
        self.fmt
    }

    pub fn is_zero(self) -> bool {
        self.raw == 0
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * self.fmt.epsilon()
    }

    pub fn widen(self) -> WideAcc {
        WideAcc { raw: self.raw << self.fmt.fl(), fmt: self.fmt }
    }

    /// Negation, saturating at the positive end.
    pub fn saturating_neg(self) -> Self {
        Fixed::saturating_from_raw(-(self.raw as i128), self.fmt).0
    }
}

/// Accumulator with `2 * (il + fl)` bits and `2 * fl` fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WideAcc {
    raw: i64,
    fmt: QFormat,
}

impl WideAcc {
    pub fn zero(fmt: QFormat) -> Self {
        WideAcc { raw: 0, fmt }
    }

    pub fn from_raw(raw: i64, fmt: QFormat) -> Result<Self, FixedError> {
        if raw < fmt.wide_raw_min() || raw > fmt.wide_raw_max() {
            return Err(FixedError::OutOfRange { raw: raw as i128, format: fmt });
        }
        Ok(WideAcc { raw, fmt })
    }

    pub fn saturating_from_raw(raw: i128, fmt: QFormat) -> (Self, bool) {
        let lo = fmt.wide_raw_min() as i128;
        let hi = fmt.wide_raw_max() as i128;
        let clamped = raw.clamp(lo, hi);
        (WideAcc { raw: clamped as i64, fmt }, clamped != raw)
    }

    pub fn max(fmt: QFormat) -> Self {
        WideAcc { raw: fmt.wide_raw_max(), fmt }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn format(self) -> QFormat {
        self.fmt
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * self.fmt.epsilon() * self.fmt.epsilon()
    }

    /// Saturating add of another wide value (a product or partial sum).
    pub fn accumulate(self, p: WideAcc, sat: &mut Saturation) -> WideAcc {
        debug_assert_eq!(self.fmt, p.fmt);
        self.add_raw(p.raw as i128, sat)
    }

    #[inline]
    pub(crate) fn add_raw(self, p: i128, sat: &mut Saturation) -> WideAcc {
        let (acc, clamped) = WideAcc::saturating_from_raw(self.raw as i128 + p, self.fmt);
        if clamped {
            sat.wide += 1;
        }
        acc
    }

    /// Largest multiple of epsilon not above the value, in narrow raw units,
    /// and the dropped residue in units of `2^-2fl` (`0 <= r < 2^fl`).
    #[inline]
    fn split(self) -> (i128, u64) {
        let fl = self.fmt.fl();
        let floor = (self.raw >> fl) as i128;
        let residue = (self.raw & ((1i64 << fl) - 1)) as u64;
        (floor, residue)
    }

    fn saturate(raw: i128, fmt: QFormat, sat: &mut Saturation) -> Fixed {
        let (v, clamped) = Fixed::saturating_from_raw(raw, fmt);
        if clamped {
            sat.narrow += 1;
        }
        v
    }

    /// Round-to-nearest: keeps the floor when the residue is below half a
    /// step, otherwise steps up. A residue of exactly half a step rounds up.
    pub fn round_nearest(self, sat: &mut Saturation) -> Fixed {
        let fl = self.fmt.fl();
        let (floor, residue) = self.split();
        let up = residue >= 1u64 << (fl - 1);
        WideAcc::saturate(floor + up as i128, self.fmt, sat)
    }

    /// Stochastic rounding: draws `fl` bits `u` and steps up iff `u < r`,
    /// so the probability of rounding up is exactly `r / 2^fl`.
    pub fn round_stochastic(self, rng: &mut Lfsr, sat: &mut Saturation) -> Fixed {
        let fl = self.fmt.fl();
        let (floor, residue) = self.split();
        let u = rng.draw(fl) as u64;
        let up = u < residue;
        WideAcc::saturate(floor + up as i128, self.fmt, sat)
    }

    pub fn round(self, mode: Rounding, rng: &mut Lfsr, sat: &mut Saturation) -> Fixed {
        match mode {
            Rounding::Nearest => self.round_nearest(sat),
            Rounding::Stochastic => self.round_stochastic(rng, sat),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Nearest,
    #[default]
    Stochastic,
}

/// Exact product of two narrow values of the same format.
pub fn multiply(a: Fixed, b: Fixed) -> Result<WideAcc, FixedError> {
    if a.fmt != b.fmt {
        return Err(FixedError::FormatMismatch { left: a.fmt, right: b.fmt });
    }
    Ok(mul_unchecked(a, b))
}

#[inline]
pub(crate) fn mul_unchecked(a: Fixed, b: Fixed) -> WideAcc {
    WideAcc { raw: a.raw * b.raw, fmt: a.fmt }
}

/// Saturating wide sum; the format check mirrors [`multiply`].
pub fn accumulate(acc: WideAcc, p: WideAcc, sat: &mut Saturation) -> Result<WideAcc, FixedError> {
    if acc.fmt != p.fmt {
        return Err(FixedError::FormatMismatch { left: acc.fmt, right: p.fmt });
    }
    Ok(acc.accumulate(p, sat))
}

/// Quantizes a real number into `fmt`.
///
/// The residue is taken at full `f64` precision. Stochastic mode compares a
/// 32-bit draw against `frac * 2^32`, i.e. it rounds up with probability
/// `frac` to within `2^-32`.
pub fn quantize_real(
    v: f64,
    fmt: QFormat,
    mode: Rounding,
    rng: &mut Lfsr,
    sat: &mut Saturation,
) -> Result<Fixed, FixedError> {
    if !v.is_finite() {
        return Err(FixedError::NonFinite(v));
    }
    let scaled = v * (fmt.fl() as f64).exp2();
    let lo = fmt.raw_min() as f64;
    let hi = fmt.raw_max() as f64;
    if scaled < lo || scaled > hi + 1.0 {
        // Far outside the range: rounding cannot bring it back.
        sat.narrow += 1;
        return Ok(if scaled < lo { Fixed::min(fmt) } else { Fixed::max(fmt) });
    }
    let floor = scaled.floor();
    let frac = scaled - floor;
    let up = match mode {
        Rounding::Nearest => frac >= 0.5,
        Rounding::Stochastic => (rng.draw(32) as f64) < frac * 4_294_967_296.0,
    };
    Ok(WideAcc::saturate(floor as i128 + up as i128, fmt, sat))
}

/// Real-to-fixed conversion with round-to-nearest and no randomness.
pub fn quantize_nearest(v: f64, fmt: QFormat) -> Result<Fixed, FixedError> {
    let mut rng = Lfsr::default();
    quantize_real(v, fmt, Rounding::Nearest, &mut rng, &mut Saturation::default())
}

/// Fibonacci linear-feedback shift register.
///
/// The default register is 32 bits wide with taps at 32, 22, 2 and 1
/// (`x^32 + x^22 + x^2 + x + 1`, maximal length). Each step shifts right by
/// one; the bit shifted out is the output bit. Multi-bit draws are assembled
/// LSB first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Lfsr {
    state: u32,
    width: u32,
    // Bit offsets (from the LSB) that feed the XOR.
    tap_shifts: [u32; 4],
    ntaps: usize,
}

impl Default for Lfsr {
    fn default() -> Self {
        Lfsr::new(0xACE1_2468).expect("non-zero seed")
    }
}

impl Lfsr {
    pub const TAPS_32: [u32; 4] = [32, 22, 2, 1];

    pub fn new(seed: u32) -> Result<Self, FixedError> {
        Lfsr::with_taps(32, &Lfsr::TAPS_32, seed)
    }

    /// A register of `width` bits with the given 1-indexed tap positions.
    pub fn with_taps(width: u32, taps: &[u32], seed: u32) -> Result<Self, FixedError> {
        let bad = || FixedError::InvalidLfsr { width, taps: taps.to_vec() };
        if !(2..=32).contains(&width) || taps.is_empty() || taps.len() > 4 {
            return Err(bad());
        }
        if !taps.contains(&width) || taps.iter().any(|&t| t == 0 || t > width) {
            return Err(bad());
        }
        let mask = if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
        let state = seed & mask;
        if state == 0 {
            return Err(FixedError::ZeroSeed);
        }
        let mut tap_shifts = [0u32; 4];
        for (slot, &t) in tap_shifts.iter_mut().zip(taps) {
            *slot = width - t;
        }
        Ok(Lfsr { state, width, tap_shifts, ntaps: taps.len() })
    }

    /// Deterministic per-stream generator: mixes `(key, stream, index)` with
    /// SplitMix64 and folds the result to a non-zero 32-bit seed. Parallel
    /// schedules stay reproducible because every output element owns its
    /// own `(stream, index)` pair.
    pub fn derive(key: u64, stream: u64, index: u64) -> Self {
        let mut z = key
            ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15))
            ^ splitmix64(index.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(1));
        z = splitmix64(z);
        let mut seed = (z ^ (z >> 32)) as u32;
        if seed == 0 {
            seed = 0x1;
        }
        Lfsr::new(seed).expect("non-zero")
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn step(&mut self) -> u32 {
        let s = self.state;
        let mut fb = 0;
        for &t in &self.tap_shifts[..self.ntaps] {
            fb ^= s >> t;
        }
        let out = s & 1;
        self.state = (s >> 1) | ((fb & 1) << (self.width - 1));
        out
    }

    /// `nbits` fresh bits (1..=32).
    pub fn next_bits(&mut self, nbits: u32) -> Result<u32, FixedError> {
        if !(1..=32).contains(&nbits) {
            return Err(FixedError::InvalidDraw(nbits));
        }
        Ok(self.draw(nbits))
    }

    #[inline]
    pub(crate) fn draw(&mut self, nbits: u32) -> u32 {
        let mut v = 0u32;
        for i in 0..nbits {
            v |= self.step() << i;
        }
        v
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
