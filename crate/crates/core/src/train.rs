//! Quantization-aware SGD: float master weights, quantized forward pass,
//! straight-through gradients, per-hop format cycling (MQ) and early
//! stopping on validation error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::SimilarityKind;
use crate::data::{Dataset, EncodedStory};
use crate::diag::{inter_decile_range, Histogram, OpCounts};
use crate::fxp::{ArithContext, QFormat};
use crate::model::{
    argmax, ForwardStats, MannConfig, MannModel, MannParams, ModelError, OverflowCounts, Quantization,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset has no training stories")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    pub enabled: bool,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self { enabled: false, patience: 10, min_delta: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub quant: Quantization,
    pub similarity: SimilarityKind,
    pub binary_act: bool,
    pub mq: bool,
    pub es: EsConfig,
    pub alpha: i32,
    pub embed_dim: usize,
    pub memory_slots: usize,
    pub hops: usize,
    pub init_std: f64,
    /// Norm clip on the summed (not averaged) batch gradient.
    pub grad_clip: f64,
    pub valid_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            quant: Quantization::Float,
            similarity: SimilarityKind::Dot,
            binary_act: false,
            mq: false,
            es: EsConfig::default(),
            alpha: -3,
            embed_dim: 60,
            memory_slots: 50,
            hops: 3,
            init_std: 0.1,
            grad_clip: 40.0,
            valid_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.es.enabled && self.es.patience == 0 {
            return bad("early-stopping patience must be at least 1");
        }
        if !(self.es.min_delta >= 0.0) {
            return bad("early-stopping min_delta must be non-negative");
        }
        if !(self.grad_clip > 0.0) || !(self.init_std > 0.0) {
            return bad("gradient clip and init std must be positive");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("validation fraction must be in [0, 1)");
        }
        self.model_config(1).validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn model_config(&self, input_dim: usize) -> MannConfig {
        MannConfig {
            input_dim,
            embed_dim: self.embed_dim,
            memory_slots: self.memory_slots,
            hops: self.hops,
            similarity: self.similarity,
            quant: self.quant,
            binary_act: self.binary_act,
            mq: self.mq,
            alpha: self.alpha,
        }
    }
}

/// Keeps the total width of `base` and shifts one bit between the integer
/// and fraction fields by `[0, +1, -1][hop % 3]` (+1 adds a fraction bit).
/// A shift that would leave `iwl < 0` or `frac < 1` is dropped.
pub fn mq_formats(base: QFormat, hop: usize) -> QFormat {
    let (iwl, frac) = (base.iwl() as i64, base.frac() as i64);
    let (iwl, frac) = match hop % 3 {
        1 => (iwl - 1, frac + 1),
        2 => (iwl + 1, frac - 1),
        _ => (iwl, frac),
    };
    if iwl < 0 || frac < 1 {
        return base;
    }
    QFormat::new(iwl as u32, frac as u32).unwrap_or(base)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopDecision {
    pub stop: bool,
    /// 1-based epoch of the lowest error (earliest on ties).
    pub best_epoch: usize,
}

/// Stops once `patience` epochs have passed without an improvement larger
/// than `min_delta` over the best error so far.
pub fn early_stop(history: &[f64], patience: usize, min_delta: f64) -> StopDecision {
    assert!(!history.is_empty(), "early_stop needs at least one epoch");
    let mut best = history[0];
    let mut best_epoch = 1;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v < best - min_delta {
            best = v;
            best_epoch = i + 1;
        }
    }
    StopDecision { stop: history.len() - best_epoch >= patience, best_epoch }
}

/// `sign(x)` with `sign(0) = +1`.
pub fn binarize_act(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect()
}

/// Straight-through gradient of [`binarize_act`]: passes `g` where
/// `|x| <= 1`.
pub fn binarize_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(&v, &d)| if v.abs() <= 1.0 { d } else { 0.0 }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Error rates in percent.
    pub train_err: f64,
    pub val_err: f64,
    pub test_err: f64,
    /// Mean training cross-entropy over the epoch's updates.
    pub loss: f64,
    /// Saturations seen by the epoch's training passes.
    pub overflows: OverflowCounts,
    /// Inter-decile range of the raw similarities of the training passes.
    pub similarity_width: Option<f64>,
    pub similarity_min: Option<f64>,
    pub similarity_max: Option<f64>,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalErrors {
    pub train_err: f64,
    pub val_err: f64,
    pub test_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch with the lowest validation error.
    pub best_epoch: usize,
    /// Epoch at which early stopping ended the run.
    pub stopped_at: Option<usize>,
    /// Errors of the returned model.
    pub final_errors: FinalErrors,
    /// Quantizable-core ops of one inference pass over the test split.
    pub inference_ops: OpCounts,
    /// Float slot-softmax and output-layer ops of the same pass.
    pub excluded_ops: OpCounts,
}

impl RunMetrics {
    pub fn best_test_err(&self) -> f64 {
        self.epochs.iter().map(|e| e.test_err).fold(f64::INFINITY, f64::min)
    }

    /// Mean test error over the last `n` epochs.
    pub fn mean_test_err(&self, n: usize) -> f64 {
        let tail = &self.epochs[self.epochs.len().saturating_sub(n)..];
        tail.iter().map(|e| e.test_err).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn total_overflows(&self) -> OverflowCounts {
        let mut t = OverflowCounts::default();
        self.epochs.iter().for_each(|e| t.merge(&e.overflows));
        t
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    /// Percent of wrong answers.
    pub error: f64,
    pub loss: f64,
    pub stats: ForwardStats,
    pub ops: OpCounts,
}

/// Forward-only pass over `stories`.
pub fn evaluate(model: &MannModel, stories: &[EncodedStory]) -> Result<Evaluation, ModelError> {
    let mut ctx = ArithContext::new();
    let p = model.prepare(&mut ctx)?;
    let mut stats = ForwardStats::default();
    stats.overflows.weight += p.weight_overflows;
    let (mut wrong, mut loss) = (0usize, 0.0);
    for s in stories {
        let (_, t) = model.forward(&p, &s.sentences, &s.question, &mut ctx, &mut stats)?;
        wrong += (argmax(&t.output) != s.answer) as usize;
        loss += MannModel::loss(&t, s.answer);
    }
    let n = stories.len().max(1) as f64;
    Ok(Evaluation { error: 100.0 * wrong as f64 / n, loss: loss / n, stats, ops: ctx.ops })
}

fn error_rate(model: &MannModel, stories: &[EncodedStory]) -> Result<f64, ModelError> {
    if stories.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(model, stories)?.error)
}

/// Histogram range exponent: the activation format's, or 5 for float runs.
pub fn histogram_iwl(q: &Quantization) -> u32 {
    match q {
        Quantization::Float => 5,
        Quantization::Fixed(f) => f.act.iwl(),
    }
}

fn clip(grads: &mut MannParams, max_norm: f64) {
    let norm = grads.sum_sq().sqrt();
    if norm > max_norm {
        grads.matrices_mut().into_iter().for_each(|m| m.scale(max_norm / norm));
    }
}

/// One SGD step on `batch`; returns the summed loss.
pub fn sgd_step(
    model: &mut MannModel,
    batch: &[&EncodedStory],
    cfg: &TrainConfig,
    stats: &mut ForwardStats,
) -> Result<f64, ModelError> {
    let mut ctx = ArithContext::new();
    let p = model.prepare(&mut ctx)?;
    stats.overflows.weight += p.weight_overflows;
    let mut grads = MannParams::zeros(&model.config);
    let mut loss = 0.0;
    for s in batch {
        let (mem, t) = model.forward(&p, &s.sentences, &s.question, &mut ctx, stats)?;
        loss += MannModel::loss(&t, s.answer);
        model.backward(&p, &s.sentences, &s.question, s.answer, &mem, &t, &mut grads);
    }
    // The clip applies to the summed batch gradient; the step uses the mean.
    clip(&mut grads, cfg.grad_clip);
    grads.matrices_mut().into_iter().for_each(|m| m.scale(1.0 / batch.len() as f64));
    for (w, g) in model.params.matrices_mut().into_iter().zip(grads.matrices()) {
        w.add_scaled(g, -cfg.learning_rate);
    }
    Ok(loss)
}

/// Fresh model for `data` under `cfg`, initialised from `cfg.seed`.
pub fn init_model(data: &Dataset, cfg: &TrainConfig) -> Result<MannModel, TrainError> {
    let mut mc = cfg.model_config(data.vocab.len());
    mc.memory_slots = mc.memory_slots.max(1);
    Ok(MannModel::new(mc, cfg.init_std, cfg.seed)?)
}

/// Trains `model` on `data`. Deterministic for a fixed configuration.
/// `on_epoch` sees each epoch's metrics as they are produced.
pub fn train(
    mut model: MannModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(MannModel, RunMetrics), TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed_0000_0001);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(f64, MannParams)> = None;
    let mut stopped_at = None;
    let iwl = histogram_iwl(&cfg.quant);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut stats = ForwardStats::default();
        let mut loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedStory> = chunk.iter().map(|&i| &data.train[i]).collect();
            loss += sgd_step(&mut model, &batch, cfg, &mut stats)?;
        }
        let loss = loss / data.train.len() as f64;
        if !loss.is_finite() || !model.params.sum_sq().is_finite() {
            return Err(TrainError::Diverged { epoch, loss });
        }
        let values = &stats.similarity.values;
        let mut histogram = Histogram::for_iwl(iwl);
        histogram.extend(values.iter().copied());
        let m = EpochMetrics {
            epoch,
            train_err: error_rate(&model, &data.train)?,
            val_err: error_rate(&model, &data.valid)?,
            test_err: error_rate(&model, &data.test)?,
            loss,
            overflows: stats.overflows,
            similarity_width: inter_decile_range(values),
            similarity_min: values.iter().copied().reduce(f64::min),
            similarity_max: values.iter().copied().reduce(f64::max),
            histogram,
        };
        on_epoch(&m);
        if best.as_ref().is_none_or(|(v, _)| m.val_err < *v - cfg.es.min_delta) {
            best = Some((m.val_err, model.params.clone()));
        }
        epochs.push(m);
        if cfg.es.enabled {
            let history: Vec<f64> = epochs.iter().map(|e| e.val_err).collect();
            if early_stop(&history, cfg.es.patience, cfg.es.min_delta).stop {
                stopped_at = Some(epoch);
                break;
            }
        }
    }

    let history: Vec<f64> = epochs.iter().map(|e| e.val_err).collect();
    let best_epoch = if history.is_empty() { 0 } else { early_stop(&history, usize::MAX, cfg.es.min_delta).best_epoch };
    if cfg.es.enabled {
        if let Some((_, params)) = best {
            model.params = params;
        }
    }
    let test = evaluate(&model, &data.test)?;
    let final_errors = FinalErrors {
        train_err: error_rate(&model, &data.train)?,
        val_err: error_rate(&model, &data.valid)?,
        test_err: test.error,
    };
    let metrics = RunMetrics {
        config: cfg.clone(),
        epochs,
        best_epoch,
        stopped_at,
        final_errors,
        inference_ops: test.ops,
        excluded_ops: test.stats.excluded_ops,
    };
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> QFormat {
        s.parse().unwrap()
    }

    #[test]
    fn mq_cycle() {
        assert_eq!(mq_formats(q("Q5.2"), 0), q("Q5.2"));
        assert_eq!(mq_formats(q("Q5.2"), 1), q("Q4.3"));
        assert_eq!(mq_formats(q("Q5.2"), 2), q("Q6.1"));
        assert_eq!(mq_formats(q("Q5.2"), 3), q("Q5.2"));
        // Clamped shifts.
        assert_eq!(mq_formats(q("Q0.7"), 1), q("Q0.7"));
        assert_eq!(mq_formats(q("Q6.1"), 2), q("Q6.1"));
    }

    #[test]
    fn early_stop_examples() {
        assert_eq!(early_stop(&[10.0, 9.0, 9.0, 9.0, 9.0], 3, 0.0), StopDecision { stop: true, best_epoch: 2 });
        assert_eq!(early_stop(&[10.0, 9.0, 9.0, 9.0], 3, 0.0).stop, false);
        let decreasing: Vec<f64> = (0..50).map(|i| 100.0 - i as f64).collect();
        for n in 1..=50 {
            assert!(!early_stop(&decreasing[..n], 3, 0.0).stop);
        }
        let flat = [5.0; 6];
        assert!(!early_stop(&flat[..3], 3, 0.0).stop);
        assert_eq!(early_stop(&flat[..4], 3, 0.0), StopDecision { stop: true, best_epoch: 1 });
        // A gain no larger than min_delta is not an improvement.
        assert_eq!(early_stop(&[10.0, 9.5, 9.7], 2, 0.5), StopDecision { stop: true, best_epoch: 1 });
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize_act(&[0.3, -0.2, 0.0]), vec![1.0, -1.0, 1.0]);
        assert_eq!(binarize_backward(&[0.5, 2.0, -1.0], &[0.7, 0.7, 0.7]), vec![0.7, 0.0, 0.7]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { es: EsConfig { enabled: true, patience: 0, min_delta: 0.0 }, ..Default::default() },
            TrainConfig { similarity: SimilarityKind::Hamming, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
