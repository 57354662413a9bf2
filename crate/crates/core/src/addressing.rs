//! Content-based addressing: read weights are the softmax of the similarity
//! between a key and each memory slot.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{ArithContext, FixedTensor, QFormat};
use crate::similarity::{
    cosine_similarity, dot_fixed, dot_similarity, hamming_similarity, HammingWeights, Precision,
    SimilarityError, SimilarityRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AddressingError {
    #[error("memory has no slots")]
    EmptyMemory,
    #[error("key has dimension {key} but memory rows have {row}")]
    Dimension { key: usize, row: usize },
    #[error("{0} similarity needs fixed-point operands")]
    NeedsFixed(&'static str),
    #[error("cosine similarity is only available in float mode")]
    CosineFixed,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Dot,
    Cosine,
    Hamming,
}

/// Normalized read weights over memory slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadWeights(Vec<f64>);

impl ReadWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over already computed per-slot similarities.
pub fn normalize(scores: &[f64]) -> Result<ReadWeights, AddressingError> {
    if scores.is_empty() {
        return Err(AddressingError::EmptyMemory);
    }
    Ok(ReadWeights(softmax(scores)))
}

/// Read weights of `key` against each row of `memory`.
///
/// In fixed mode the rows and key are quantized into `fmt`, similarities are
/// computed and rounded into `fmt` (saturations are logged on `record`), and
/// the softmax itself runs in float.
pub fn content_address(
    memory: &[Vec<f64>],
    key: &[f64],
    sim: SimilarityKind,
    mode: Precision,
    alpha: i32,
    ctx: &mut ArithContext,
    mut record: Option<&mut SimilarityRecord>,
) -> Result<ReadWeights, AddressingError> {
    if memory.is_empty() {
        return Err(AddressingError::EmptyMemory);
    }
    if let Some(row) = memory.iter().find(|r| r.len() != key.len()) {
        return Err(AddressingError::Dimension {
            key: key.len(),
            row: row.len(),
        });
    }
    let mut scores = Vec::with_capacity(memory.len());
    match mode {
        Precision::Float => {
            for row in memory {
                let s = match sim {
                    SimilarityKind::Dot => dot_similarity(row, key, mode, ctx, None)?,
                    SimilarityKind::Cosine => cosine_similarity(row, key)?,
                    SimilarityKind::Hamming => return Err(AddressingError::NeedsFixed("hamming")),
                };
                if let Some(r) = record.as_deref_mut() {
                    r.push(s, false);
                }
                scores.push(s);
            }
        }
        Precision::Fixed(fmt) => {
            let k = FixedTensor::vector(key, fmt, ctx).map_err(SimilarityError::from)?;
            let weights = HammingWeights::new(alpha, fmt.bits())?;
            for row in memory {
                let m = FixedTensor::vector(row, fmt, ctx).map_err(SimilarityError::from)?;
                let (s, of) = fixed_score(&m, &k, sim, &weights, fmt, ctx)?;
                if let Some(r) = record.as_deref_mut() {
                    r.push(s, of);
                }
                scores.push(s);
            }
        }
    }
    normalize(&scores)
}

fn fixed_score(
    m: &FixedTensor,
    k: &FixedTensor,
    sim: SimilarityKind,
    weights: &HammingWeights,
    out: QFormat,
    ctx: &mut ArithContext,
) -> Result<(f64, bool), AddressingError> {
    match sim {
        SimilarityKind::Dot => {
            let (s, of) = dot_fixed(m, k, out, ctx)?;
            Ok((s.to_f64(), of))
        }
        SimilarityKind::Hamming => {
            let s = hamming_similarity(m, k, weights)?;
            let (q, of) = crate::fxp::quantize_flagged(s, out, ctx).map_err(SimilarityError::from)?;
            Ok((q.to_f64(), of))
        }
        SimilarityKind::Cosine => Err(AddressingError::CosineFixed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn address(memory: &[Vec<f64>], key: &[f64]) -> Vec<f64> {
        content_address(memory, key, SimilarityKind::Dot, Precision::Float, -3, &mut ArithContext::new(), None)
            .unwrap()
            .into_vec()
    }

    #[test]
    fn equal_similarities_give_uniform_weights() {
        let w = address(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]], &[1.0, 1.0]);
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_slot_closed_form() {
        let w = normalize(&[3f64.ln(), 0.0]).unwrap();
        assert!((w.as_slice()[0] - 0.75).abs() < 1e-15);
        assert!((w.as_slice()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn saturated_slot_takes_all_weight() {
        let fmt: QFormat = "Q5.2".parse().unwrap();
        let memory = vec![vec![6.0; 4], vec![0.25; 4], vec![-0.5; 4]];
        let mut rec = SimilarityRecord::default();
        let w = content_address(
            &memory,
            &[6.0; 4],
            SimilarityKind::Dot,
            Precision::Fixed(fmt),
            -3,
            &mut ArithContext::new(),
            Some(&mut rec),
        )
        .unwrap();
        assert_eq!(rec.overflow_events, 1);
        assert_eq!(rec.values[0], fmt.max_value());
        assert!(w.as_slice()[0] > 1.0 - 1e-10);
    }

    #[test]
    fn hamming_scores_stay_in_range() {
        let fmt: QFormat = "Q2.5".parse().unwrap();
        let memory: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 - 2.0; 60]).collect();
        let mut rec = SimilarityRecord::default();
        let w = content_address(
            &memory,
            &[1.0; 60],
            SimilarityKind::Hamming,
            Precision::Fixed(fmt),
            -3,
            &mut ArithContext::new(),
            Some(&mut rec),
        )
        .unwrap();
        assert_eq!(rec.overflow_events, 0);
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut ctx = ArithContext::new();
        assert_eq!(
            content_address(&[], &[1.0], SimilarityKind::Dot, Precision::Float, -3, &mut ctx, None),
            Err(AddressingError::EmptyMemory)
        );
        assert!(matches!(
            content_address(&[vec![1.0]], &[1.0, 2.0], SimilarityKind::Dot, Precision::Float, -3, &mut ctx, None),
            Err(AddressingError::Dimension { key: 2, row: 1 })
        ));
        assert!(matches!(
            content_address(&[vec![1.0]], &[1.0], SimilarityKind::Hamming, Precision::Float, -3, &mut ctx, None),
            Err(AddressingError::NeedsFixed(_))
        ));
    }

    #[test]
    fn shift_invariance_and_monotonicity() {
        let s = [0.3, -1.2, 2.5, 0.0];
        let base = normalize(&s).unwrap().into_vec();
        let shifted: Vec<f64> = s.iter().map(|x| x + 7.25).collect();
        for (a, b) in base.iter().zip(normalize(&shifted).unwrap().as_slice()) {
            assert!((a - b).abs() <= 1e-9 * a);
        }
        let mut bumped = s;
        bumped[1] += 0.1;
        assert!(normalize(&bumped).unwrap().as_slice()[1] > base[1]);
    }
}
