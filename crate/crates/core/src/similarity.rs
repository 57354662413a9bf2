//! Similarity measures for content addressing.
//!
//! The conventional measure is the dot product, evaluated either in `f64` or
//! in fixed point with exact wide accumulation and one saturating rounding of
//! the result. The bounded alternative is the weighted Hamming similarity
//!
//! ```text
//! S_H(U, V) = sum_i  s(u_i) s(v_i)  sum_{k=0}^{n-2} w_k XNOR(u_ik, v_ik),   w_k = 2^(k + alpha - n)
//! ```
//!
//! over the sign-magnitude encoding of two fixed-point vectors. Because the
//! inner sum is at most `sum_k w_k`, `|S_H| <= dim * (2^(n-1) - 1) * 2^(alpha-n)`
//! for every input, which is what keeps it clear of fixed-point overflow.

use thiserror::Error;

use crate::diag::{ArithOp, Histogram, OpKind};
use crate::fxp::{pow2, quantize_flagged, ArithContext, FixedScalar, FixedTensor, FxpError, QFormat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("vector lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("bit widths differ: {left} vs {right} bits")]
    BitWidth { left: u32, right: u32 },
    #[error("fixed-point saturation during accumulation; error decomposition is invalid")]
    Saturated,
    #[error("invalid Hamming weights: alpha={alpha}, n={bits}")]
    InvalidWeights { alpha: i32, bits: u32 },
    #[error(transparent)]
    Fxp(#[from] FxpError),
}

/// Arithmetic used to evaluate a similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Float,
    Fixed(QFormat),
}

/// Similarity scores observed during a computation, with the number of
/// scores that saturated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimilarityRecord {
    pub values: Vec<f64>,
    pub overflow_events: u64,
}

impl SimilarityRecord {
    pub fn push(&mut self, value: f64, overflowed: bool) {
        self.values.push(value);
        self.overflow_events += overflowed as u64;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn histogram(&self, iwl: u32) -> Histogram {
        let mut h = Histogram::for_iwl(iwl);
        h.extend(self.values.iter().copied());
        h
    }

    pub fn merge(&mut self, other: &SimilarityRecord) {
        self.values.extend_from_slice(&other.values);
        self.overflow_events += other.overflow_events;
    }
}

fn check_len(a: usize, b: usize) -> Result<(), SimilarityError> {
    if a != b {
        return Err(SimilarityError::Length(a, b));
    }
    Ok(())
}

/// Dot product of two real vectors. In fixed mode both vectors are quantized
/// into `fmt` first and the result saturates in `fmt`; a saturated result is
/// logged as an overflow event on `record`.
pub fn dot_similarity(
    u: &[f64],
    v: &[f64],
    mode: Precision,
    ctx: &mut ArithContext,
    record: Option<&mut SimilarityRecord>,
) -> Result<f64, SimilarityError> {
    check_len(u.len(), v.len())?;
    let (value, overflowed) = match mode {
        Precision::Float => {
            ctx.ops.add(OpKind::float(ArithOp::Mult, 32), u.len() as u64);
            ctx.ops.add(OpKind::float(ArithOp::Add, 32), u.len() as u64);
            (u.iter().zip(v).map(|(a, b)| a * b).sum(), false)
        }
        Precision::Fixed(fmt) => {
            let uq = FixedTensor::vector(u, fmt, ctx)?;
            let vq = FixedTensor::vector(v, fmt, ctx)?;
            let (s, of) = dot_fixed(&uq, &vq, fmt, ctx)?;
            (s.to_f64(), of)
        }
    };
    if let Some(r) = record {
        r.push(value, overflowed);
    }
    Ok(value)
}

/// Fixed-point dot product: exact products accumulated in a wide register,
/// then one saturating rounding into `out`.
pub fn dot_fixed(
    u: &FixedTensor,
    v: &FixedTensor,
    out: QFormat,
    ctx: &mut ArithContext,
) -> Result<(FixedScalar, bool), SimilarityError> {
    check_len(u.len(), v.len())?;
    let acc: i128 = u
        .raw()
        .iter()
        .zip(v.raw())
        .map(|(&a, &b)| a as i128 * b as i128)
        .sum();
    let bits = u.format().bits().max(v.format().bits());
    ctx.count(ArithOp::Mult, bits, u.len() as u64);
    ctx.count(ArithOp::Add, bits, u.len() as u64);
    Ok(ctx.requantize(acc, u.format().frac() + v.format().frac(), out))
}

/// Cosine similarity, float only; zero vectors give 0.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    check_len(u.len(), v.len())?;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu * nv))
}

/// Quantized dot product split into float value, first-order error term and
/// the remainder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DotErrorDecomposition {
    /// Float dot product `Z`.
    pub z: f64,
    /// Exact dot product of the quantized vectors.
    pub z_hat: f64,
    /// `sum(u_i e_v_i + v_i e_u_i)`.
    pub first_order: f64,
    /// `z_hat - z - first_order`.
    pub residual: f64,
    /// `sum(e_u_i e_v_i)`, which the residual must equal.
    pub second_order: f64,
}

/// Expands the quantized dot product of `u` and `v` in `fmt` into
/// `Z + first_order + residual`. Fails if any input or partial sum leaves the
/// range of `fmt`, where the expansion no longer describes clamped values.
pub fn dot_error_decomposition(
    u: &[f64],
    v: &[f64],
    fmt: QFormat,
) -> Result<DotErrorDecomposition, SimilarityError> {
    check_len(u.len(), v.len())?;
    let mut ctx = ArithContext::new();
    let mut quant = |x: f64| -> Result<FixedScalar, SimilarityError> {
        let (q, of) = quantize_flagged(x, fmt, &mut ctx)?;
        if of {
            return Err(SimilarityError::Saturated);
        }
        Ok(q)
    };
    let uq = u.iter().map(|&x| quant(x)).collect::<Result<Vec<_>, _>>()?;
    let vq = v.iter().map(|&x| quant(x)).collect::<Result<Vec<_>, _>>()?;

    let limit = 1i128 << (fmt.iwl() + 2 * fmt.frac());
    let mut acc: i128 = 0;
    for (a, b) in uq.iter().zip(&vq) {
        acc += a.raw() as i128 * b.raw() as i128;
        if acc.abs() >= limit {
            return Err(SimilarityError::Saturated);
        }
    }
    let z_hat = acc as f64 * pow2(-2 * fmt.frac() as i32);

    let (mut z, mut first_order, mut second_order) = (0.0, 0.0, 0.0);
    for i in 0..u.len() {
        let eu = uq[i].to_f64() - u[i];
        let ev = vq[i].to_f64() - v[i];
        z += u[i] * v[i];
        first_order += u[i] * ev + v[i] * eu;
        second_order += eu * ev;
    }
    Ok(DotErrorDecomposition {
        z,
        z_hat,
        first_order,
        residual: z_hat - z - first_order,
        second_order,
    })
}

/// Per-bit weights `w_k = 2^(k + alpha - n)` for `k = 0..n-2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HammingWeights {
    alpha: i32,
    bits: u32,
}

impl HammingWeights {
    pub fn new(alpha: i32, bits: u32) -> Result<Self, SimilarityError> {
        if !(2..=crate::fxp::MAX_BITS).contains(&bits) {
            return Err(SimilarityError::InvalidWeights { alpha, bits });
        }
        Ok(Self { alpha, bits })
    }

    pub fn alpha(&self) -> i32 {
        self.alpha
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn weight(&self, k: u32) -> f64 {
        pow2(k as i32 + self.alpha - self.bits as i32)
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.bits - 1).map(|k| self.weight(k)).collect()
    }

    /// `sum_k w_k = (2^(n-1) - 1) * 2^(alpha - n)`.
    pub fn sum(&self) -> f64 {
        ((1u64 << (self.bits - 1)) - 1) as f64 * self.scale()
    }

    /// Largest possible `|S_H|` over `dim` elements.
    pub fn bound(&self, dim: usize) -> f64 {
        dim as f64 * self.sum()
    }

    /// `2^(alpha - n)`, the value of one unit of the integer accumulator.
    pub fn scale(&self) -> f64 {
        pow2(self.alpha - self.bits as i32)
    }
}

/// Integer accumulator of the Hamming similarity over raw sign-magnitude
/// values with `mag_bits` magnitude bits: `sum_i s_u s_v (!(|u| ^ |v|) & mask)`.
/// The bit-weighted XNOR sum is the integer value of the XNOR word.
pub fn hamming_accumulate(u: &[i64], v: &[i64], mag_bits: u32) -> i64 {
    let mask = (1u64 << mag_bits) - 1;
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let agree = (!(a.unsigned_abs() ^ b.unsigned_abs()) & mask) as i64;
            if (a < 0) == (b < 0) {
                agree
            } else {
                -agree
            }
        })
        .sum()
}

fn check_hamming(u: &FixedTensor, v: &FixedTensor, w: &HammingWeights) -> Result<(), SimilarityError> {
    check_len(u.len(), v.len())?;
    let (bu, bv) = (u.format().bits(), v.format().bits());
    if bu != bv {
        return Err(SimilarityError::BitWidth { left: bu, right: bv });
    }
    if bu != w.bits() {
        return Err(SimilarityError::BitWidth { left: bu, right: w.bits() });
    }
    Ok(())
}

/// Weighted Hamming similarity of two fixed-point vectors of equal bit width.
/// Computed with sign products, XNOR, a shift and integer additions only.
pub fn hamming_similarity(
    u: &FixedTensor,
    v: &FixedTensor,
    w: &HammingWeights,
) -> Result<f64, SimilarityError> {
    check_hamming(u, v, w)?;
    let acc = hamming_accumulate(u.raw(), v.raw(), w.bits() - 1);
    Ok(acc as f64 * w.scale())
}

/// Approximate gradient of `S_H` with respect to each element of `u`:
/// `s_u 2^alpha (s_u - s_v) - sum_k s_v 2^alpha (u_k - v_k)`.
pub fn hamming_backward_raw(u: &[i64], v: &[i64], alpha: i32) -> Vec<f64> {
    let step = pow2(alpha);
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let su = if a < 0 { -1i64 } else { 1 };
            let sv = if b < 0 { -1i64 } else { 1 };
            let bit_diff = a.unsigned_abs().count_ones() as i64 - b.unsigned_abs().count_ones() as i64;
            (su * (su - sv) - sv * bit_diff) as f64 * step
        })
        .collect()
}

/// [`hamming_backward_raw`] on tensors; swap the arguments for the gradient
/// with respect to `v`.
pub fn hamming_backward(
    u: &FixedTensor,
    v: &FixedTensor,
    w: &HammingWeights,
) -> Result<Vec<f64>, SimilarityError> {
    check_hamming(u, v, w)?;
    Ok(hamming_backward_raw(u.raw(), v.raw(), w.alpha()))
}

/// Effect of an input perturbation on a softmax output.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxAmplification {
    /// `softmax(z + eps)_i / softmax(z)_i`.
    pub ratios: Vec<f64>,
    /// `max_{i,k} (eps_i - eps_k)`.
    pub eps_spread: f64,
    /// `max_i |eps_i|`.
    pub eps_max_abs: f64,
}

impl SoftmaxAmplification {
    /// `exp(eps_spread)`, the bound every ratio must respect.
    pub fn spread_bound(&self) -> f64 {
        self.eps_spread.exp()
    }

    /// `exp(max |eps|)`, the bound under the max-error reading; it only
    /// holds for all inputs at `exp(2 max |eps|)`.
    pub fn max_error_bound(&self) -> f64 {
        self.eps_max_abs.exp()
    }

    /// Largest ratio divided by the spread bound.
    pub fn worst_ratio(&self) -> f64 {
        self.ratios.iter().fold(0.0f64, |m, &r| m.max(r)) / self.spread_bound()
    }
}

pub fn softmax_error_bound(z: &[f64], eps: &[f64]) -> Result<SoftmaxAmplification, SimilarityError> {
    check_len(z.len(), eps.len())?;
    let perturbed: Vec<f64> = z.iter().zip(eps).map(|(a, b)| a + b).collect();
    let y = crate::addressing::softmax(z);
    let y_hat = crate::addressing::softmax(&perturbed);
    let ratios = y_hat.iter().zip(&y).map(|(a, b)| a / b).collect();
    let hi = eps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = eps.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SoftmaxAmplification {
        ratios,
        eps_spread: if eps.is_empty() { 0.0 } else { hi - lo },
        eps_max_abs: eps.iter().fold(0.0f64, |m, e| m.max(e.abs())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> QFormat {
        s.parse().unwrap()
    }

    fn fixed(values: &[f64], fmt: &str) -> FixedTensor {
        FixedTensor::vector(values, q(fmt), &mut ArithContext::new()).unwrap()
    }

    #[test]
    fn dot_examples() {
        let mut ctx = ArithContext::new();
        let e1 = [1.0, 0.0, 0.0];
        assert_eq!(dot_similarity(&e1, &e1, Precision::Float, &mut ctx, None).unwrap(), 1.0);

        let u = [1.5; 20];
        let mut rec = SimilarityRecord::default();
        let s = dot_similarity(&u, &u, Precision::Fixed(q("Q5.2")), &mut ctx, Some(&mut rec)).unwrap();
        assert_eq!(s, 31.75);
        assert_eq!(rec.overflow_events, 1);
        assert_eq!(rec.values, vec![31.75]);

        assert!(matches!(
            dot_similarity(&[1.0], &[1.0, 2.0], Precision::Float, &mut ctx, None),
            Err(SimilarityError::Length(1, 2))
        ));
    }

    #[test]
    fn cosine_reference() {
        assert!((cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn decomposition_of_representable_inputs_is_exact() {
        let d = dot_error_decomposition(&[0.5, -1.25, 2.0], &[1.0, 0.75, -0.5], q("Q5.4")).unwrap();
        assert_eq!(d.first_order, 0.0);
        assert_eq!(d.residual, 0.0);
        assert_eq!(d.z, d.z_hat);
    }

    #[test]
    fn decomposition_rejects_saturation() {
        assert_eq!(
            dot_error_decomposition(&[40.0], &[1.0], q("Q5.2")),
            Err(SimilarityError::Saturated)
        );
        assert_eq!(
            dot_error_decomposition(&[20.0, 20.0], &[1.0, 1.0], q("Q5.2")),
            Err(SimilarityError::Saturated)
        );
    }

    #[test]
    fn hamming_weights() {
        let w = HammingWeights::new(-3, 8).unwrap();
        let ws = w.weights();
        assert_eq!(ws.len(), 7);
        assert!(ws.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(ws.iter().sum::<f64>(), 127.0 / 2048.0);
        assert_eq!(w.sum(), 127.0 / 2048.0);
        assert!(HammingWeights::new(-3, 1).is_err());
    }

    #[test]
    fn hamming_examples() {
        let w = HammingWeights::new(-3, 8).unwrap();
        let u = fixed(&[0.5, 1.25, 3.0, 0.03125], "Q2.5");
        assert_eq!(hamming_similarity(&u, &u, &w).unwrap(), 4.0 * 127.0 / 2048.0);

        let a = fixed(&[1.0], "Q2.5");
        let b = fixed(&[-1.0], "Q2.5");
        assert_eq!(hamming_similarity(&a, &b, &w).unwrap(), -127.0 / 2048.0);

        let empty = fixed(&[], "Q2.5");
        assert_eq!(hamming_similarity(&empty, &empty, &w).unwrap(), 0.0);

        let other = fixed(&[1.0], "Q5.4");
        assert!(matches!(hamming_similarity(&a, &other, &w), Err(SimilarityError::BitWidth { .. })));
        assert!(matches!(hamming_similarity(&a, &u, &w), Err(SimilarityError::Length(1, 4))));
    }

    #[test]
    fn hamming_accepts_equal_width_formats() {
        let w = HammingWeights::new(-3, 8).unwrap();
        let a = fixed(&[1.0], "Q2.5");
        let b = fixed(&[1.0], "Q3.4");
        // Same width, different bit patterns for the same value.
        let s = hamming_similarity(&a, &b, &w).unwrap();
        assert!(s < w.sum());
    }

    #[test]
    fn hamming_backward_examples() {
        let w = HammingWeights::new(-3, 8).unwrap();
        let u = fixed(&[0.5, -1.25, 3.0], "Q2.5");
        assert_eq!(hamming_backward(&u, &u, &w).unwrap(), vec![0.0; 3]);
        let a = fixed(&[1.0], "Q2.5");
        let b = fixed(&[-1.0], "Q2.5");
        assert_eq!(hamming_backward(&a, &b, &w).unwrap(), vec![0.25]);
    }

    #[test]
    fn softmax_bound_examples() {
        let z = [0.3, -1.0, 2.0];
        let a = softmax_error_bound(&z, &[0.0; 3]).unwrap();
        assert!(a.ratios.iter().all(|&r| r == 1.0));
        let c = softmax_error_bound(&z, &[0.2; 3]).unwrap();
        assert!(c.ratios.iter().all(|&r| (r - 1.0).abs() < 1e-12));
        assert_eq!(c.eps_spread, 0.0);
        let d = softmax_error_bound(&z, &[0.25, -0.25, 0.0]).unwrap();
        assert_eq!(d.eps_spread, 0.5);
        assert!(d.worst_ratio() <= 1.0);
    }

    #[test]
    fn record_merge_and_histogram() {
        let mut a = SimilarityRecord::default();
        a.push(1.0, false);
        let mut b = SimilarityRecord::default();
        b.push(40.0, true);
        a.merge(&b);
        assert_eq!(a.len(), 2);
        assert_eq!(a.overflow_events, 1);
        assert_eq!(a.histogram(5).total(), 2);
    }
}
