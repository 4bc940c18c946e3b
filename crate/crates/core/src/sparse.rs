//! Binary-mask compression and the pre-compute sparsity pipeline.
//!
//! A [`MaskedVector`] keeps only the non-zero elements of a vector plus one
//! occupancy bit per logical element. Two compressed operands are paired up
//! for the MAC lanes by [`align`]:
//!
//! 1. [`generate_masks`]: `out = act & wt`, `act_filter = act ^ out`,
//!    `wt_filter = wt ^ out`.
//! 2. [`filter_dangling`]: a sequential scan over each payload that keeps
//!    elements under `out` and zeroes the ones under the filter mask.
//! 3. [`collapse_zeros`]: squeezes the zeros back out.
//!
//! The result is two equal-length zero-free sequences whose i-th elements
//! share a logical index.

use std::fmt;
use std::io::{Read, Write};

use thiserror::Error;

use crate::fixedpoint::{mul_unchecked, Fixed, Lfsr, QFormat, Rounding, Saturation, WideAcc};

/// Mask tile length; one tile feeds one 16-multiplier MAC lane.
pub const LANE_WIDTH: usize = 16;

const MAGIC: &[u8; 4] = b"SPMT";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("mask length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("payload has {payload} elements but mask has {ones} set bits")]
    PopcountMismatch { ones: usize, payload: usize },
    #[error("payload element {0} is zero")]
    ZeroInPayload(usize),
    #[error("output and filter masks overlap")]
    OverlappingMasks,
    #[error("format mismatch: {0} vs {1}")]
    FormatMismatch(QFormat, QFormat),
    #[error("shape {shape:?} holds {expected} elements, got {actual}")]
    ShapeMismatch { shape: [usize; 4], expected: usize, actual: usize },
    #[error("malformed tensor stream: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Occupancy bits; bit `i` describes logical element `i`.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BinaryMask {
    len: usize,
    words: Vec<u64>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryMask({self})")
    }
}

/// Prints bit 0 first, e.g. `1010`.
impl fmt::Display for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BinaryMask {
    type Err = SparseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut m = BinaryMask::zeros(s.len());
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '1' => m.set(i, true),
                '0' => {}
                _ => return Err(SparseError::Malformed(format!("bad mask digit {ch:?}"))),
            }
        }
        Ok(m)
    }
}

impl BinaryMask {
    pub fn zeros(len: usize) -> Self {
        BinaryMask { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = BinaryMask { len, words: vec![u64::MAX; len.div_ceil(64)] };
        m.clear_tail();
        m
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = BinaryMask::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.set(i, true);
            }
        }
        m
    }

    /// The low `len` bits of `bits`, bit 0 first. `len <= 64`.
    pub fn from_u64(bits: u64, len: usize) -> Self {
        assert!(len <= 64);
        let mut m = BinaryMask { len, words: if len == 0 { vec![] } else { vec![bits] } };
        m.clear_tail();
        m
    }

    fn clear_tail(&mut self) {
        let r = self.len % 64;
        if r != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << r) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let w = &mut self.words[i / 64];
        if v {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of set bits strictly before `i`.
    pub fn rank(&self, i: usize) -> usize {
        let full = i / 64;
        let mut n: usize = self.words[..full].iter().map(|w| w.count_ones() as usize).sum();
        let r = i % 64;
        if r != 0 {
            n += (self.words[full] & ((1u64 << r) - 1)).count_ones() as usize;
        }
        n
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
        })
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u64, u64) -> u64) -> Result<Self, SparseError> {
        if self.len != other.len {
            return Err(SparseError::LengthMismatch(self.len, other.len));
        }
        let words = self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect();
        Ok(BinaryMask { len: self.len, words })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<Self, SparseError> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<Self, SparseError> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn xor(&self, other: &BinaryMask) -> Result<Self, SparseError> {
        self.zip_with(other, |a, b| a ^ b)
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> bool {
        self.len == other.len && self.words.iter().zip(&other.words).all(|(a, b)| a & b == 0)
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Bits `start..start + len` as a new mask.
    pub fn slice(&self, start: usize, len: usize) -> BinaryMask {
        assert!(start + len <= self.len);
        let mut m = BinaryMask::zeros(len);
        for i in 0..len {
            if self.get(start + i) {
                m.set(i, true);
            }
        }
        m
    }

    pub fn extend(&mut self, other: &BinaryMask) {
        let base = self.len;
        self.len += other.len;
        self.words.resize(self.len.div_ceil(64), 0);
        for i in other.iter_ones() {
            self.set(base + i, true);
        }
    }

    /// Packs the bits LSB first into `ceil(len / 8)` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in self.iter_ones() {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self, SparseError> {
        if bytes.len() != len.div_ceil(8) {
            return Err(SparseError::Malformed(format!(
                "{} mask bytes for {len} bits",
                bytes.len()
            )));
        }
        let mut m = BinaryMask::zeros(len);
        for i in 0..len {
            if bytes[i / 8] >> (i % 8) & 1 == 1 {
                m.set(i, true);
            }
        }
        if bytes.len() * 8 > len && m.count_ones() != bytes.iter().map(|b| b.count_ones() as usize).sum::<usize>() {
            return Err(SparseError::Malformed("padding bits set in mask".into()));
        }
        Ok(m)
    }
}

/// A zero-free payload and its occupancy mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedVector {
    mask: BinaryMask,
    payload: Vec<Fixed>,
    fmt: QFormat,
}

impl MaskedVector {
    pub fn new(mask: BinaryMask, payload: Vec<Fixed>, fmt: QFormat) -> Result<Self, SparseError> {
        let ones = mask.count_ones();
        if ones != payload.len() {
            return Err(SparseError::PopcountMismatch { ones, payload: payload.len() });
        }
        for (i, v) in payload.iter().enumerate() {
            if v.format() != fmt {
                return Err(SparseError::FormatMismatch(v.format(), fmt));
            }
            if v.is_zero() {
                return Err(SparseError::ZeroInPayload(i));
            }
        }
        Ok(MaskedVector { mask, payload, fmt })
    }

    pub fn empty(len: usize, fmt: QFormat) -> Self {
        MaskedVector { mask: BinaryMask::zeros(len), payload: Vec::new(), fmt }
    }

    /// Drops every zero and records occupancy in the mask.
    pub fn compress(dense: &[Fixed], fmt: QFormat) -> Self {
        let mut mask = BinaryMask::zeros(dense.len());
        let mut payload = Vec::new();
        for (i, &v) in dense.iter().enumerate() {
            debug_assert_eq!(v.format(), fmt);
            if !v.is_zero() {
                mask.set(i, true);
                payload.push(v);
            }
        }
        MaskedVector { mask, payload, fmt }
    }

    pub fn decompress(&self) -> Vec<Fixed> {
        let mut out = vec![Fixed::zero(self.fmt); self.mask.len()];
        for (i, &v) in self.mask.iter_ones().zip(&self.payload) {
            out[i] = v;
        }
        out
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn payload(&self) -> &[Fixed] {
        &self.payload
    }

    pub fn format(&self) -> QFormat {
        self.fmt
    }

    /// Logical (uncompressed) length.
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.payload.len()
    }

    pub fn get(&self, i: usize) -> Fixed {
        if self.mask.get(i) {
            self.payload[self.mask.rank(i)]
        } else {
            Fixed::zero(self.fmt)
        }
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a MaskedVector>, fmt: QFormat) -> Self {
        let mut out = MaskedVector::empty(0, fmt);
        for p in parts {
            out.mask.extend(&p.mask);
            out.payload.extend_from_slice(&p.payload);
        }
        out
    }

    /// Wide sum of products over the common non-zero indices, added to
    /// `init`. Walks both masks word by word; yields the same pairs in the
    /// same order as [`align`], without materializing them. Returns the
    /// accumulator and the number of multiplies performed.
    pub fn dot_wide(
        &self,
        other: &MaskedVector,
        init: WideAcc,
        sat: &mut Saturation,
    ) -> Result<(WideAcc, usize), SparseError> {
        if self.len() != other.len() {
            return Err(SparseError::LengthMismatch(self.len(), other.len()));
        }
        let mut acc = init;
        let mut n = 0usize;
        let (mut ia, mut ib) = (0usize, 0usize);
        for (&wa, &wb) in self.mask.words.iter().zip(&other.mask.words) {
            let mut common = wa & wb;
            while common != 0 {
                let below = (1u64 << common.trailing_zeros()) - 1;
                let a = self.payload[ia + (wa & below).count_ones() as usize];
                let b = other.payload[ib + (wb & below).count_ones() as usize];
                acc = acc.add_raw(mul_unchecked(a, b).raw() as i128, sat);
                n += 1;
                common &= common - 1;
            }
            ia += wa.count_ones() as usize;
            ib += wb.count_ones() as usize;
        }
        Ok((acc, n))
    }
}

/// Bits needed by the dense form over bits needed by mask + payload.
pub fn compression_ratio(mv: &MaskedVector, element_bits: usize) -> f64 {
    assert!(element_bits > 0, "element_bits must be positive");
    let len = mv.len();
    let dense = len * element_bits;
    let compressed = mv.nnz() * element_bits + len;
    dense as f64 / compressed as f64
}

/// Masks produced by the mask-generation stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub out: BinaryMask,
    pub act_filter: BinaryMask,
    pub wt_filter: BinaryMask,
}

pub fn generate_masks(act: &BinaryMask, wt: &BinaryMask) -> Result<MaskSet, SparseError> {
    let out = act.and(wt)?;
    let act_filter = act.xor(&out)?;
    let wt_filter = wt.xor(&out)?;
    Ok(MaskSet { out, act_filter, wt_filter })
}

/// Sequential scan-and-filter over one operand's payload.
///
/// One pointer walks the masks, one walks the data. A set output bit passes
/// the element through, a set filter bit replaces it with zero, and when both
/// bits are clear the index was never stored so the data pointer stays put.
pub fn filter_dangling(
    payload: &[Fixed],
    out_mask: &BinaryMask,
    filter_mask: &BinaryMask,
) -> Result<Vec<Fixed>, SparseError> {
    if out_mask.len() != filter_mask.len() {
        return Err(SparseError::LengthMismatch(out_mask.len(), filter_mask.len()));
    }
    if !out_mask.is_disjoint(filter_mask) {
        return Err(SparseError::OverlappingMasks);
    }
    let ones = out_mask.count_ones() + filter_mask.count_ones();
    if ones != payload.len() {
        return Err(SparseError::PopcountMismatch { ones, payload: payload.len() });
    }
    let mut out_data = payload.to_vec();
    let mut data_pointer = 0;
    for mask_pointer in 0..out_mask.len() {
        if out_mask.get(mask_pointer) {
            out_data[data_pointer] = payload[data_pointer];
            data_pointer += 1;
        } else if filter_mask.get(mask_pointer) {
            out_data[data_pointer] = Fixed::zero(payload[data_pointer].format());
            data_pointer += 1;
        }
    }
    Ok(out_data)
}

pub fn collapse_zeros(data: &[Fixed]) -> Vec<Fixed> {
    data.iter().copied().filter(|v| !v.is_zero()).collect()
}

/// Zero-free operand sequences ready for a MAC lane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedPair {
    pub activations: Vec<Fixed>,
    pub weights: Vec<Fixed>,
    pub out_mask: BinaryMask,
}

impl AlignedPair {
    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }
}

pub fn align(act: &MaskedVector, wt: &MaskedVector) -> Result<AlignedPair, SparseError> {
    if act.fmt != wt.fmt {
        return Err(SparseError::FormatMismatch(act.fmt, wt.fmt));
    }
    let masks = generate_masks(&act.mask, &wt.mask)?;
    let a = filter_dangling(&act.payload, &masks.out, &masks.act_filter)?;
    let w = filter_dangling(&wt.payload, &masks.out, &masks.wt_filter)?;
    Ok(AlignedPair {
        activations: collapse_zeros(&a),
        weights: collapse_zeros(&w),
        out_mask: masks.out,
    })
}

/// Wide accumulation of an aligned pair followed by one rounding.
pub fn sparse_dot(
    pair: &AlignedPair,
    fmt: QFormat,
    mode: Rounding,
    rng: &mut Lfsr,
    sat: &mut Saturation,
) -> Fixed {
    let mut acc = WideAcc::zero(fmt);
    for (&a, &w) in pair.activations.iter().zip(&pair.weights) {
        acc = acc.add_raw(mul_unchecked(a, w).raw() as i128, sat);
    }
    acc.round(mode, rng, sat)
}

/// NCHW (or KCRS) extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Number of rows along the lowest-varying dimension.
    pub fn rows(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a}x{b}x{c}x{d}")
    }
}

/// A 4-d tensor stored as masked tiles.
///
/// Rows run along the last dimension and are visited N-major, then C, then
/// H. Each row is cut into tiles of [`LANE_WIDTH`] elements; the last tile of
/// a row may be shorter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedTensor {
    shape: Shape,
    fmt: QFormat,
    tiles: Vec<MaskedVector>,
}

impl MaskedTensor {
    pub fn from_dense(shape: Shape, fmt: QFormat, dense: &[Fixed]) -> Result<Self, SparseError> {
        if dense.len() != shape.len() {
            return Err(SparseError::ShapeMismatch {
                shape: shape.0,
                expected: shape.len(),
                actual: dense.len(),
            });
        }
        let row_len = shape.w();
        let mut tiles = Vec::with_capacity(shape.rows() * row_len.div_ceil(LANE_WIDTH).max(1));
        if row_len > 0 {
            for row in dense.chunks(row_len) {
                for tile in row.chunks(LANE_WIDTH) {
                    tiles.push(MaskedVector::compress(tile, fmt));
                }
            }
        }
        Ok(MaskedTensor { shape, fmt, tiles })
    }

    pub fn zeros(shape: Shape, fmt: QFormat) -> Self {
        MaskedTensor::from_dense(shape, fmt, &vec![Fixed::zero(fmt); shape.len()]).expect("sized")
    }

    pub fn to_dense(&self) -> Vec<Fixed> {
        let mut out = Vec::with_capacity(self.shape.len());
        for t in &self.tiles {
            out.extend(t.decompress());
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.to_dense().into_iter().map(Fixed::to_f64).collect()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn format(&self) -> QFormat {
        self.fmt
    }

    pub fn tiles(&self) -> &[MaskedVector] {
        &self.tiles
    }

    pub fn nnz(&self) -> usize {
        self.tiles.iter().map(MaskedVector::nnz).sum()
    }

    pub fn density(&self) -> f64 {
        if self.shape.is_empty() {
            return 0.0;
        }
        self.nnz() as f64 / self.shape.len() as f64
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self, SparseError> {
        MaskedTensor::from_dense(shape, self.fmt, &self.to_dense())
    }

    /// Mask bits plus payload bits.
    pub fn compressed_bits(&self) -> usize {
        self.nnz() * self.fmt.bits() as usize + self.shape.len()
    }

    /// Serializes the tensor; see `schemas/masked-tensor.md` for the layout.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), SparseError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.fmt.il() as u8, self.fmt.fl() as u8])?;
        for d in self.shape.0 {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.shape.w() as u32).to_le_bytes())?;
        w.write_all(&(LANE_WIDTH as u32).to_le_bytes())?;
        let nbytes = self.fmt.storage_bytes();
        for t in &self.tiles {
            w.write_all(&t.mask.to_bytes())?;
            for v in &t.payload {
                w.write_all(&v.raw().to_le_bytes()[..nbytes])?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, SparseError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SparseError::Malformed("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != FORMAT_VERSION {
            return Err(SparseError::Malformed(format!("unsupported version {version}")));
        }
        let [il, fl] = read_array::<2, _>(r)?;
        let fmt = QFormat::new(il as u32, fl as u32)
            .map_err(|e| SparseError::Malformed(e.to_string()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(read_array(r)?) as usize;
        }
        let shape = Shape(dims);
        let row_len = u32::from_le_bytes(read_array(r)?) as usize;
        let tile_len = u32::from_le_bytes(read_array(r)?) as usize;
        if row_len != shape.w() || tile_len != LANE_WIDTH {
            return Err(SparseError::Malformed(format!(
                "row length {row_len} / tile length {tile_len} disagree with shape {shape}"
            )));
        }
        let nbytes = fmt.storage_bytes();
        let mut tiles = Vec::new();
        for _ in 0..shape.rows() {
            let mut start = 0;
            while start < row_len {
                let len = LANE_WIDTH.min(row_len - start);
                let mut mbytes = vec![0u8; len.div_ceil(8)];
                r.read_exact(&mut mbytes)?;
                let mask = BinaryMask::from_bytes(&mbytes, len)?;
                let mut payload = Vec::with_capacity(mask.count_ones());
                for _ in 0..mask.count_ones() {
                    let mut buf = [0u8; 8];
                    r.read_exact(&mut buf[..nbytes])?;
                    let unsigned = u64::from_le_bytes(buf);
                    let shift = 64 - 8 * nbytes as u32;
                    let raw = ((unsigned << shift) as i64) >> shift;
                    let v = Fixed::from_raw(raw, fmt)
                        .map_err(|e| SparseError::Malformed(e.to_string()))?;
                    payload.push(v);
                }
                tiles.push(MaskedVector::new(mask, payload, fmt)?);
                start += len;
            }
        }
        Ok(MaskedTensor { shape, fmt, tiles })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], SparseError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}
