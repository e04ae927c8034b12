//! Fixed-point arithmetic over the prime field `Z_L`.
//!
//! Activations and weights are mapped to integers with a single global scale,
//! round-half-away-from-zero. Residues live in `[0, L)` and are read back with
//! the centered lift, i.e. as signed integers in `(-L/2, L/2)`.
//!
//! Products of a scale-1 activation with a scale-1 weight matrix carry scale²;
//! [`FixedVec::logical_scale`] tracks which of the two a vector is in.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

/// `2^61 - 1`, the default modulus.
pub const MERSENNE_61: u64 = (1u64 << 61) - 1;

/// Default fixed-point multiplier.
pub const DEFAULT_SCALE: u64 = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RingError {
    #[error("modulus {0} is not prime")]
    NotPrime(u64),
    #[error("modulus {0} exceeds 63 bits")]
    ModulusTooLarge(u64),
    #[error("scale must be at least 1")]
    InvalidScale,
    #[error("fixed-point overflow: |{value}| does not fit below L/2 = {half}")]
    Overflow { value: f64, half: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported logical scale {0}")]
    LogicalScale(u8),
}

/// Modulus and fixed-point scale shared by both parties of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RingParamsRepr", into = "RingParamsRepr")]
pub struct RingParams {
    modulus: u64,
    scale: u64,
    headroom_bits: i32,
}

#[derive(Serialize, Deserialize)]
struct RingParamsRepr {
    modulus: u64,
    scale: u64,
}

impl TryFrom<RingParamsRepr> for RingParams {
    type Error = RingError;
    fn try_from(r: RingParamsRepr) -> Result<Self, RingError> {
        RingParams::new(r.modulus, r.scale)
    }
}

impl From<RingParams> for RingParamsRepr {
    fn from(r: RingParams) -> Self {
        RingParamsRepr { modulus: r.modulus, scale: r.scale }
    }
}

impl Default for RingParams {
    fn default() -> Self {
        RingParams::new(MERSENNE_61, DEFAULT_SCALE).expect("default ring is valid")
    }
}

impl RingParams {
    pub fn new(modulus: u64, scale: u64) -> Result<Self, RingError> {
        if modulus >= 1 << 63 {
            return Err(RingError::ModulusTooLarge(modulus));
        }
        if !is_prime(modulus) {
            return Err(RingError::NotPrime(modulus));
        }
        if scale == 0 {
            return Err(RingError::InvalidScale);
        }
        let half = modulus as f64 / 2.0;
        let s2 = (scale as f64) * (scale as f64);
        let headroom_bits = (half / s2).log2().floor() as i32;
        Ok(RingParams { modulus, scale, headroom_bits })
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn scale(&self) -> u64 {
        self.scale
    }

    /// `floor(log2((L/2) / scale²))`: how many bits of real-valued magnitude a
    /// scale² accumulation may use before it wraps.
    pub fn headroom_bits(&self) -> i32 {
        self.headroom_bits
    }

    pub fn half(&self) -> f64 {
        self.modulus as f64 / 2.0
    }

    /// Checks `scale² · max_abs_activation · max_row_l1 < L/2` for a real weight matrix.
    pub fn check_headroom(&self, max_row_l1: f64, max_abs_activation: f64) -> Result<(), RingError> {
        let s = self.scale as f64;
        let value = s * s * max_abs_activation * max_row_l1;
        if value.is_nan() || value >= self.half() {
            return Err(RingError::Overflow { value, half: self.half() });
        }
        Ok(())
    }

    #[inline]
    pub fn reduce_i64(&self, v: i64) -> u64 {
        v.rem_euclid(self.modulus as i64) as u64
    }

    #[inline]
    pub fn reduce_i128(&self, v: i128) -> u64 {
        v.rem_euclid(self.modulus as i128) as u64
    }

    /// Signed representative of a residue: values above `(L-1)/2` map to `v - L`.
    #[inline]
    pub fn centered(&self, v: u64) -> i64 {
        if v > (self.modulus - 1) / 2 {
            v as i64 - self.modulus as i64
        } else {
            v as i64
        }
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        ((a as u128 + b as u128) % self.modulus as u128) as u64
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        ((a as u128 + self.modulus as u128 - b as u128) % self.modulus as u128) as u64
    }

    /// Encodes one real value at scale 1.
    pub fn encode_real(&self, x: f64) -> Result<u64, RingError> {
        let q = (x * self.scale as f64).round();
        if !q.is_finite() || q.abs() >= self.half() {
            return Err(RingError::Overflow { value: q, half: self.half() });
        }
        Ok(self.reduce_i64(q as i64))
    }
}

/// Deterministic Miller–Rabin, exact for every `u64`.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &p in &BASES {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut r = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                r = mulmod(r, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        r
    };
    'witness: for &a in &BASES {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A vector of residues together with its power of the scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedVec {
    pub values: Vec<u64>,
    pub logical_scale: u8,
}

impl FixedVec {
    pub fn new(values: Vec<u64>, logical_scale: u8) -> Self {
        FixedVec { values, logical_scale }
    }

    pub fn zeros(dim: usize) -> Self {
        FixedVec { values: vec![0; dim], logical_scale: 1 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest centered magnitude, as an integer.
    pub fn max_abs(&self, ring: &RingParams) -> u64 {
        self.values.iter().map(|&v| ring.centered(v).unsigned_abs()).max().unwrap_or(0)
    }
}

/// One-time pad drawn from a [`MaskSampler`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVec {
    pub values: Vec<u64>,
    pub seed_id: StreamPosition,
}

/// `W^D_int · r mod L` for the mask `r` it was derived from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CancellationMask {
    pub values: Vec<u64>,
    pub layer_index: usize,
}

/// Where in the keystream a mask starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamPosition {
    pub stream: u64,
    pub word_pos: u128,
}

/// ChaCha20 keystream with an explicit seed and stream number.
///
/// One sampler belongs to exactly one session.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    rng: ChaCha20Rng,
    stream: u64,
}

impl MaskSampler {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        MaskSampler { rng, stream }
    }

    pub fn position(&self) -> StreamPosition {
        StreamPosition { stream: self.stream, word_pos: self.rng.get_word_pos() }
    }

    /// Uniform residue in `[0, L)` by rejection on the smallest covering bit mask.
    pub fn next_residue(&mut self, modulus: u64) -> u64 {
        let bits = 64 - (modulus - 1).leading_zeros();
        let mask = if bits >= 64 { u64::MAX } else { (1u64 << bits) - 1 };
        loop {
            let v = self.rng.next_u64() & mask;
            if v < modulus {
                return v;
            }
        }
    }
}

pub fn quantize(x: &[f64], ring: &RingParams) -> Result<FixedVec, RingError> {
    let values = x.iter().map(|&v| ring.encode_real(v)).collect::<Result<Vec<_>, _>>()?;
    Ok(FixedVec { values, logical_scale: 1 })
}

pub fn dequantize(v: &FixedVec, ring: &RingParams) -> Result<Vec<f64>, RingError> {
    let denom = match v.logical_scale {
        1 => ring.scale as f64,
        2 => (ring.scale as f64) * (ring.scale as f64),
        other => return Err(RingError::LogicalScale(other)),
    };
    Ok(v.values.iter().map(|&r| ring.centered(r) as f64 / denom).collect())
}

pub fn sample_mask(dim: usize, ring: &RingParams, stream: &mut MaskSampler) -> MaskVec {
    let seed_id = stream.position();
    let values = (0..dim).map(|_| stream.next_residue(ring.modulus)).collect();
    MaskVec { values, seed_id }
}

/// `mod(a + r, L)`, coordinatewise. Only a prefix of `r` is used when it is
/// longer than `a`.
pub fn mask(a: &FixedVec, r: &MaskVec, ring: &RingParams) -> Result<FixedVec, RingError> {
    if r.values.len() < a.len() {
        return Err(RingError::DimensionMismatch { expected: a.len(), got: r.values.len() });
    }
    let values = a.values.iter().zip(&r.values).map(|(&x, &m)| ring.add(x, m)).collect();
    Ok(FixedVec { values, logical_scale: a.logical_scale })
}

/// `mod(ã^D - c, L)`. With the premise `‖W^D a‖∞ < L/2` the centered lift of
/// the result is exactly `W^D a`. A longer `c` is used by prefix.
pub fn unmask(a_tilde_d: &FixedVec, c: &CancellationMask, ring: &RingParams) -> Result<FixedVec, RingError> {
    if c.values.len() < a_tilde_d.len() {
        return Err(RingError::DimensionMismatch { expected: a_tilde_d.len(), got: c.values.len() });
    }
    let values = a_tilde_d.values.iter().zip(&c.values).map(|(&x, &m)| ring.sub(x, m)).collect();
    Ok(FixedVec { values, logical_scale: a_tilde_d.logical_scale })
}

/// Integer weight matrix, row-major, signed entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i64>) -> Self {
        assert_eq!(data.len(), rows * cols, "IntMatrix data length");
        IntMatrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0; n * n];
        for i in 0..n {
            data[i * n + i] = 1;
        }
        IntMatrix { rows: n, cols: n, data }
    }

    pub fn row(&self, i: usize) -> &[i64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `max_j Σ_k |W_jk|`
    pub fn max_row_l1(&self) -> u128 {
        (0..self.rows).map(|i| self.row(i).iter().map(|v| v.unsigned_abs() as u128).sum::<u128>()).max().unwrap_or(0)
    }

    /// Exact `‖W a‖∞ < L/2` precondition from the row-l1 bound and `‖a‖∞`.
    pub fn check_headroom(&self, row_l1: u128, a: &FixedVec, ring: &RingParams) -> Result<(), RingError> {
        let bound = row_l1.saturating_mul(a.max_abs(ring) as u128);
        if bound > ((ring.modulus - 1) / 2) as u128 {
            return Err(RingError::Overflow { value: bound as f64, half: ring.half() });
        }
        Ok(())
    }
}

/// `round(W · scale)` entrywise; both parties call this on the same float
/// source so their integer copies agree bit for bit.
pub fn quantize_matrix(w: &Matrix, ring: &RingParams) -> Result<IntMatrix, RingError> {
    let s = ring.scale as f64;
    let data = w
        .data()
        .iter()
        .map(|&v| {
            let q = (v * s).round();
            if !q.is_finite() || q.abs() >= ring.half() {
                Err(RingError::Overflow { value: q, half: ring.half() })
            } else {
                Ok(q as i64)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IntMatrix { rows: w.rows(), cols: w.cols(), data })
}

/// `mod(W x, L)` with exact wide accumulation.
pub fn modmatvec(w: &IntMatrix, x: &FixedVec, ring: &RingParams) -> Result<FixedVec, RingError> {
    if w.cols != x.len() {
        return Err(RingError::DimensionMismatch { expected: w.cols, got: x.len() });
    }
    let values = (0..w.rows).map(|i| dot_mod(w.row(i), &x.values, ring)).collect();
    Ok(FixedVec { values, logical_scale: x.logical_scale + 1 })
}

/// Applies `W` to each consecutive `cols`-sized block of `x` (one block per token).
pub fn modmatvec_tokens(w: &IntMatrix, x: &FixedVec, ring: &RingParams) -> Result<FixedVec, RingError> {
    if w.cols == 0 || !x.len().is_multiple_of(w.cols) {
        return Err(RingError::DimensionMismatch { expected: w.cols, got: x.len() });
    }
    let mut values = Vec::with_capacity(x.len() / w.cols * w.rows);
    for block in x.values.chunks(w.cols) {
        values.extend((0..w.rows).map(|i| dot_mod(w.row(i), block, ring)));
    }
    Ok(FixedVec { values, logical_scale: x.logical_scale + 1 })
}

#[inline]
fn dot_mod(row: &[i64], x: &[u64], ring: &RingParams) -> u64 {
    let l = ring.modulus as u128;
    // Each term is below 2^126; reduce before the sum can pass 2^127.
    let mut acc: u128 = 0;
    for (&w, &v) in row.iter().zip(x) {
        if w == 0 || v == 0 {
            continue;
        }
        let wr = ring.reduce_i64(w) as u128;
        acc += wr * v as u128;
        if acc >= 1 << 127 {
            acc %= l;
        }
    }
    (acc % l) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(l: u64, s: u64) -> RingParams {
        RingParams::new(l, s).unwrap()
    }

    #[test]
    fn rejects_composite_modulus() {
        assert_eq!(RingParams::new(91, 1), Err(RingError::NotPrime(91)));
        assert!(RingParams::new(MERSENNE_61, 1).is_ok());
        assert!(is_prime(10007));
        assert!(!is_prime(1));
        assert!(!is_prime((1u64 << 61) + 1));
    }

    #[test]
    fn quantize_examples() {
        let r = ring(97, 10);
        assert_eq!(quantize(&[0.0, 0.0], &r).unwrap().values, vec![0, 0]);
        assert_eq!(quantize(&[1.25], &r).unwrap().values, vec![13]);
        assert_eq!(quantize(&[-1.2], &r).unwrap().values, vec![85]);
        assert!(matches!(quantize(&[4.9], &r), Err(RingError::Overflow { .. })));
        // 48 is the largest magnitude that still fits below 48.5
        assert_eq!(quantize(&[4.8], &r).unwrap().values, vec![48]);
    }

    #[test]
    fn dequantize_examples() {
        let r = ring(97, 10);
        assert_eq!(dequantize(&FixedVec::new(vec![0], 1), &r).unwrap(), vec![0.0]);
        let v = dequantize(&FixedVec::new(vec![85], 1), &r).unwrap();
        assert!((v[0] + 1.2).abs() < 1e-12);
        let v = dequantize(&FixedVec::new(vec![13], 1), &r).unwrap();
        assert!((v[0] - 1.3).abs() < 1e-12);
        assert!(dequantize(&FixedVec::new(vec![1], 3), &r).is_err());
    }

    #[test]
    fn mask_examples() {
        let r = ring(17, 1);
        let m = |v: Vec<u64>| MaskVec { values: v, seed_id: StreamPosition { stream: 0, word_pos: 0 } };
        let a = FixedVec::new(vec![5], 1);
        assert_eq!(mask(&a, &m(vec![0]), &r).unwrap().values, vec![5]);
        assert_eq!(mask(&a, &m(vec![15]), &r).unwrap().values, vec![3]);
        assert_eq!(mask(&FixedVec::new(vec![16], 1), &m(vec![16]), &r).unwrap().values, vec![15]);
        assert!(mask(&FixedVec::new(vec![1, 2], 1), &m(vec![1]), &r).is_err());
    }

    #[test]
    fn unmask_hand_trace() {
        let r = ring(97, 1);
        let w = IntMatrix::new(1, 2, vec![2, 3]);
        let a = FixedVec::new(vec![4, 5], 1);
        let pad = MaskVec { values: vec![90, 1], seed_id: StreamPosition { stream: 0, word_pos: 0 } };
        let a_t = mask(&a, &pad, &r).unwrap();
        assert_eq!(a_t.values, vec![94, 6]);
        let a_t_d = modmatvec(&w, &a_t, &r).unwrap();
        assert_eq!(a_t_d.values, vec![12]);
        let c = modmatvec(&w, &FixedVec::new(pad.values.clone(), 1), &r).unwrap();
        assert_eq!(c.values, vec![86]);
        let c = CancellationMask { values: c.values, layer_index: 0 };
        let out = unmask(&a_t_d, &c, &r).unwrap();
        assert_eq!(out.values, vec![23]);
    }

    #[test]
    fn unmask_zero_activation_is_zero() {
        let r = ring(97, 1);
        let v = FixedVec::new(vec![40, 7], 2);
        let c = CancellationMask { values: vec![40, 7], layer_index: 3 };
        assert_eq!(unmask(&v, &c, &r).unwrap().values, vec![0, 0]);
    }

    #[test]
    fn modmatvec_examples() {
        let r = ring(97, 1);
        let x = FixedVec::new(vec![96, 5], 1);
        assert_eq!(modmatvec(&IntMatrix::identity(2), &x, &r).unwrap().values, x.values);
        assert_eq!(modmatvec(&IntMatrix::new(1, 2, vec![1, 1]), &x, &r).unwrap().values, vec![4]);
        assert!(modmatvec(&IntMatrix::identity(3), &x, &r).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_in_range() {
        let r = ring(17, 1);
        let mut s1 = MaskSampler::new(7, 0);
        let mut s2 = MaskSampler::new(7, 0);
        let a = sample_mask(3, &r, &mut s1);
        let b = sample_mask(3, &r, &mut s2);
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| v < 17));
        let c = sample_mask(3, &r, &mut s1);
        assert_ne!(a.seed_id, c.seed_id);
        assert!(c.seed_id > a.seed_id);
    }

    #[test]
    fn centered_lift_range() {
        let r = ring(97, 1);
        assert_eq!(r.centered(48), 48);
        assert_eq!(r.centered(49), -48);
        assert_eq!(r.centered(96), -1);
    }

    #[test]
    fn headroom_bits_default() {
        let r = RingParams::default();
        assert_eq!(r.headroom_bits(), 28);
        assert!(r.check_headroom(100.0, 1000.0).is_ok());
        assert!(r.check_headroom(1e5, 1e5).is_err());
    }
}
