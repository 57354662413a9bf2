//! Memory-augmented network with linear hop controller.
//!
//! Sentences are embedded into an address memory `M_a = W_a V` and a read
//! memory `M_r = W_r V`. The question gives the first key `k_1 = W_q q`;
//! each hop addresses `M_a` with the current key, reads `r_i = M_r w_i`, and
//! forms the next key `k_{i+1} = W_key k_i + r_i`. The answer distribution is
//! `softmax(W_o k_{R+1})`.
//!
//! In fixed mode every value between the input and the pre-output key is a
//! scaled integer; the softmax over slots and the output layer run in float.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{softmax, SimilarityKind};
use crate::diag::{ArithOp, OpCounts, OpKind};
use crate::fxp::{pow2, quantize_flagged, ArithContext, FixedTensor, FxpError, QFormat};
use crate::similarity::{hamming_accumulate, hamming_backward_raw, SimilarityError, SimilarityRecord};
use crate::train::mq_formats;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("story has {got} sentences but memory holds {slots}")]
    TooManySentences { got: usize, slots: usize },
    #[error("story has no sentences")]
    EmptyStory,
    #[error("input index {index} outside vocabulary of {dim}")]
    InputIndex { index: usize, dim: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match its configuration: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Formats for parameters, activations (keys, reads, similarities, read
/// weights) and memory elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedFormats {
    pub param: QFormat,
    pub act: QFormat,
    pub mem: QFormat,
}

impl FixedFormats {
    pub fn uniform(f: QFormat) -> Self {
        Self { param: f, act: f, mem: f }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Quantization {
    Float,
    Fixed(FixedFormats),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannConfig {
    /// Vocabulary size `I`.
    pub input_dim: usize,
    /// Embedding size `E`.
    pub embed_dim: usize,
    /// Memory slots `L`.
    pub memory_slots: usize,
    /// Hops `R`.
    pub hops: usize,
    pub similarity: SimilarityKind,
    pub quant: Quantization,
    /// Keys and reads are `sign(.)` in {-1,+1}; requires fixed mode.
    pub binary_act: bool,
    /// Per-hop perturbation of the key and `W_key` formats.
    pub mq: bool,
    /// Hamming weight constant.
    pub alpha: i32,
}

impl MannConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            embed_dim: 60,
            memory_slots: 50,
            hops: 3,
            similarity: SimilarityKind::Dot,
            quant: Quantization::Float,
            binary_act: false,
            mq: false,
            alpha: -3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.input_dim == 0 || self.embed_dim == 0 || self.memory_slots == 0 || self.hops == 0 {
            return bad("dimensions, slots and hops must be positive");
        }
        if self.similarity == SimilarityKind::Cosine {
            return bad("the model supports dot and hamming similarity");
        }
        match self.quant {
            Quantization::Float => {
                if self.similarity == SimilarityKind::Hamming {
                    return bad("hamming similarity needs fixed-point memory and keys");
                }
                if self.binary_act {
                    return bad("binary activations need fixed-point parameters and memory");
                }
                if self.mq {
                    return bad("MQ needs fixed-point formats");
                }
            }
            Quantization::Fixed(f) => {
                if self.similarity == SimilarityKind::Hamming {
                    if f.act.bits() != f.mem.bits() {
                        return bad("hamming similarity needs equal activation and memory bit widths");
                    }
                    if self.alpha > f.mem.bits() as i32 {
                        return bad("hamming alpha must not exceed the bit width");
                    }
                }
            }
        }
        Ok(())
    }

    fn fixed(&self) -> Option<FixedFormats> {
        match self.quant {
            Quantization::Float => None,
            Quantization::Fixed(f) => Some(f),
        }
    }

    /// Format of key `k_h` (h = 0 is the question key).
    pub fn key_format(&self, h: usize) -> Option<QFormat> {
        self.fixed().map(|f| if self.mq { mq_formats(f.act, h) } else { f.act })
    }

    /// Format of the `W_key` copy that produces key `k_h`, h >= 1.
    pub fn key_weight_format(&self, h: usize) -> Option<QFormat> {
        self.fixed().map(|f| if self.mq { mq_formats(f.param, h) } else { f.param })
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn random(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self { rows, cols, data: (0..rows * cols).map(|_| normal.sample(rng)).collect() }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

/// Float master parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannParams {
    /// E x I
    pub w_a: Matrix,
    /// E x I
    pub w_r: Matrix,
    /// E x I
    pub w_q: Matrix,
    /// E x E
    pub w_key: Matrix,
    /// I x E
    pub w_o: Matrix,
}

impl MannParams {
    pub fn zeros(cfg: &MannConfig) -> Self {
        let (i, e) = (cfg.input_dim, cfg.embed_dim);
        Self {
            w_a: Matrix::zeros(e, i),
            w_r: Matrix::zeros(e, i),
            w_q: Matrix::zeros(e, i),
            w_key: Matrix::zeros(e, e),
            w_o: Matrix::zeros(i, e),
        }
    }

    pub fn random(cfg: &MannConfig, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, e) = (cfg.input_dim, cfg.embed_dim);
        Self {
            w_a: Matrix::random(e, i, std, &mut rng),
            w_r: Matrix::random(e, i, std, &mut rng),
            w_q: Matrix::random(e, i, std, &mut rng),
            w_key: Matrix::random(e, e, std, &mut rng),
            w_o: Matrix::random(i, e, std, &mut rng),
        }
    }

    pub fn matrices(&self) -> [&Matrix; 5] {
        [&self.w_a, &self.w_r, &self.w_q, &self.w_key, &self.w_o]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 5] {
        [&mut self.w_a, &mut self.w_r, &mut self.w_q, &mut self.w_key, &mut self.w_o]
    }

    pub fn sum_sq(&self) -> f64 {
        self.matrices().iter().map(|m| m.sum_sq()).sum()
    }
}

/// Saturation counts by where they happened.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowCounts {
    pub memory: u64,
    pub key: u64,
    pub similarity: u64,
    pub weight: u64,
    pub read: u64,
}

impl OverflowCounts {
    pub fn total(&self) -> u64 {
        self.memory + self.key + self.similarity + self.weight + self.read
    }

    pub fn merge(&mut self, o: &OverflowCounts) {
        self.memory += o.memory;
        self.key += o.key;
        self.similarity += o.similarity;
        self.weight += o.weight;
        self.read += o.read;
    }
}

/// Per-pass observations: overflows, raw similarity values (before
/// rounding into the activation format), and the float ops of the slot
/// softmax and output layer, which are kept apart from the quantizable core.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardStats {
    pub overflows: OverflowCounts,
    pub similarity: SimilarityRecord,
    pub excluded_ops: OpCounts,
}

/// A parameter matrix as used by one forward pass.
#[derive(Clone, Debug)]
pub struct QuantWeights {
    values: Vec<f64>,
    raw: Vec<i64>,
    format: Option<QFormat>,
    /// Straight-through mask: master value inside the representable range.
    pass: Vec<bool>,
    cols: usize,
}

impl QuantWeights {
    fn float(m: &Matrix) -> Self {
        Self { values: m.data.clone(), raw: Vec::new(), format: None, pass: Vec::new(), cols: m.cols }
    }

    fn fixed(m: &Matrix, f: QFormat, ctx: &mut ArithContext, overflow: &mut u64) -> Result<Self, ModelError> {
        let t = FixedTensor::from_f64(&m.data, vec![m.rows, m.cols], f, ctx)?;
        *overflow += t.overflow_count();
        let limit = f.limit();
        Ok(Self {
            values: t.to_f64_vec(),
            pass: m.data.iter().map(|x| x.abs() < limit).collect(),
            raw: t.raw().to_vec(),
            format: Some(f),
            cols: m.cols,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn format(&self) -> Option<QFormat> {
        self.format
    }

    fn passes(&self, i: usize) -> bool {
        self.pass.is_empty() || self.pass[i]
    }
}

/// Parameters quantized for a forward pass; `W_o` stays float.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub a: QuantWeights,
    pub r: QuantWeights,
    pub q: QuantWeights,
    /// One `W_key` copy per produced key `k_2..k_{R+1}`.
    pub key: Vec<QuantWeights>,
    pub weight_overflows: u64,
}

/// An activation vector with the straight-through mask of the step that
/// produced it from its pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub values: Vec<f64>,
    raw: Vec<i64>,
    format: Option<QFormat>,
    pass: Vec<bool>,
}

impl Activation {
    fn float(values: Vec<f64>) -> Self {
        Self { values, raw: Vec::new(), format: None, pass: Vec::new() }
    }

    fn passes(&self, i: usize) -> bool {
        self.pass.is_empty() || self.pass[i]
    }

    pub fn raw(&self) -> &[i64] {
        &self.raw
    }

    pub fn format(&self) -> Option<QFormat> {
        self.format
    }
}

/// Address and read memories, one column per stored sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub address: Vec<Activation>,
    pub read: Vec<Activation>,
}

impl MemoryState {
    pub fn slots(&self) -> usize {
        self.address.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hop {
    /// Similarities as used by the softmax.
    pub scores: Vec<f64>,
    score_pass: Vec<bool>,
    /// Softmax output.
    pub probs: Vec<f64>,
    /// Read weights after quantization.
    pub weights: Vec<f64>,
    weight_pass: Vec<bool>,
    pub read: Activation,
    /// `W_key k_i` as rounded before adding the read.
    key_update_pass: Vec<bool>,
}

/// Keys `k_1..k_{R+1}`, the per-hop addressing state and the answer
/// distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct HopTrace {
    pub keys: Vec<Activation>,
    pub hops: Vec<Hop>,
    pub logits: Vec<f64>,
    pub output: Vec<f64>,
}

impl HopTrace {
    pub fn answer(&self) -> usize {
        argmax(&self.output)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sign_raw(x: i64, one: i64) -> i64 {
    if x < 0 {
        -one
    } else {
        one
    }
}

/// Value `+1` in `f` (or the largest value when 1 is out of range).
fn binary_one(f: QFormat) -> i64 {
    (1i64 << f.frac()).min(f.max_raw())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannModel {
    pub config: MannConfig,
    pub params: MannParams,
}

impl MannModel {
    pub fn new(config: MannConfig, init_std: f64, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = MannParams::random(&config, init_std, seed);
        Ok(Self { config, params })
    }

    /// Quantizes the master parameters for a forward pass.
    pub fn prepare(&self, ctx: &mut ArithContext) -> Result<Prepared, ModelError> {
        let p = &self.params;
        let cfg = &self.config;
        let mut of = 0;
        let prepared = match cfg.fixed() {
            None => Prepared {
                a: QuantWeights::float(&p.w_a),
                r: QuantWeights::float(&p.w_r),
                q: QuantWeights::float(&p.w_q),
                key: vec![QuantWeights::float(&p.w_key); cfg.hops],
                weight_overflows: 0,
            },
            Some(f) => {
                let a = QuantWeights::fixed(&p.w_a, f.param, ctx, &mut of)?;
                let r = QuantWeights::fixed(&p.w_r, f.param, ctx, &mut of)?;
                let q = QuantWeights::fixed(&p.w_q, f.param, ctx, &mut of)?;
                let mut key = Vec::with_capacity(cfg.hops);
                for h in 1..=cfg.hops {
                    let wf = cfg.key_weight_format(h).expect("fixed mode");
                    // One stored copy per distinct format: a single one
                    // without MQ, three under the MQ cycle.
                    let mut copy_of = 0;
                    key.push(QuantWeights::fixed(&p.w_key, wf, ctx, &mut copy_of)?);
                    if h == 1 || (cfg.mq && h <= 3) {
                        of += copy_of;
                    }
                }
                Prepared { a, r, q, key, weight_overflows: of }
            }
        };
        Ok(prepared)
    }

    fn check_inputs(&self, active: &[usize]) -> Result<(), ModelError> {
        let dim = self.config.input_dim;
        match active.iter().find(|&&t| t >= dim) {
            Some(&index) => Err(ModelError::InputIndex { index, dim }),
            None => Ok(()),
        }
    }

    /// `W v` for a binary Bag-of-Words `v`, given by its active indices:
    /// a sum of weight columns, so additions only.
    fn embed(&self, w: &QuantWeights, active: &[usize], ctx: &mut ArithContext) -> (Vec<f64>, Vec<i128>) {
        let e = self.config.embed_dim;
        let n = (active.len() * e) as u64;
        match w.format {
            None => {
                ctx.ops.add(OpKind::float(ArithOp::Add, 32), n);
                let v = (0..e).map(|r| active.iter().map(|&t| w.values[r * w.cols + t]).sum()).collect();
                (v, Vec::new())
            }
            Some(f) => {
                ctx.count(ArithOp::Add, f.bits(), n);
                let acc = (0..e)
                    .map(|r| active.iter().map(|&t| w.raw[r * w.cols + t] as i128).sum())
                    .collect();
                (Vec::new(), acc)
            }
        }
    }

    /// Rounds wide accumulators into `f`, or binarizes them when `binary`
    /// (the pre-activation is rounded into `f` first, the sign is stored in
    /// `bin`).
    fn activate(
        &self,
        acc: &[i128],
        wide_frac: u32,
        f: QFormat,
        binary: Option<QFormat>,
        ctx: &mut ArithContext,
        overflows: &mut u64,
    ) -> Activation {
        let mut raw = Vec::with_capacity(acc.len());
        let mut pass = Vec::with_capacity(acc.len());
        for &a in acc {
            let (q, of) = ctx.requantize(a, wide_frac, f);
            *overflows += of as u64;
            match binary {
                None => {
                    raw.push(q.raw());
                    pass.push(!of);
                }
                Some(_) => {
                    raw.push(q.raw());
                    pass.push(q.to_f64().abs() <= 1.0);
                }
            }
        }
        let format = match binary {
            None => f,
            Some(bin) => {
                let one = binary_one(bin);
                raw.iter_mut().for_each(|r| *r = sign_raw(*r, one));
                bin
            }
        };
        let res = format.resolution();
        Activation { values: raw.iter().map(|&r| r as f64 * res).collect(), raw, format: Some(format), pass }
    }

    /// Embeds the story sentences into both memories.
    pub fn write_memory(
        &self,
        p: &Prepared,
        sentences: &[Vec<usize>],
        ctx: &mut ArithContext,
        stats: &mut ForwardStats,
    ) -> Result<MemoryState, ModelError> {
        if sentences.is_empty() {
            return Err(ModelError::EmptyStory);
        }
        if sentences.len() > self.config.memory_slots {
            return Err(ModelError::TooManySentences { got: sentences.len(), slots: self.config.memory_slots });
        }
        let mut state = MemoryState { address: Vec::new(), read: Vec::new() };
        for s in sentences {
            self.check_inputs(s)?;
            for (w, out) in [(&p.a, &mut state.address), (&p.r, &mut state.read)] {
                let (v, acc) = self.embed(w, s, ctx);
                out.push(match (self.config.fixed(), w.format) {
                    (Some(f), Some(wf)) => {
                        self.activate(&acc, wf.frac(), f.mem, None, ctx, &mut stats.overflows.memory)
                    }
                    _ => Activation::float(v),
                });
            }
        }
        Ok(state)
    }

    fn question_key(
        &self,
        p: &Prepared,
        question: &[usize],
        ctx: &mut ArithContext,
        stats: &mut ForwardStats,
    ) -> Result<Activation, ModelError> {
        self.check_inputs(question)?;
        let (v, acc) = self.embed(&p.q, question, ctx);
        Ok(match self.config.fixed() {
            None => Activation::float(v),
            Some(f) => {
                let kf = self.config.key_format(0).expect("fixed mode");
                let bin = self.config.binary_act.then_some(f.mem);
                self.activate(&acc, f.param.frac(), kf, bin, ctx, &mut stats.overflows.key)
            }
        })
    }

    fn scores(
        &self,
        mem: &MemoryState,
        key: &Activation,
        ctx: &mut ArithContext,
        stats: &mut ForwardStats,
    ) -> Result<(Vec<f64>, Vec<bool>), ModelError> {
        let e = self.config.embed_dim as u64;
        let n = mem.slots();
        let mut scores = Vec::with_capacity(n);
        let mut pass = Vec::new();
        let Some(f) = self.config.fixed() else {
            for m in &mem.address {
                let s: f64 = m.values.iter().zip(&key.values).map(|(a, b)| a * b).sum();
                stats.similarity.push(s, false);
                scores.push(s);
            }
            ctx.ops.add(OpKind::float(ArithOp::Mult, 32), e * n as u64);
            ctx.ops.add(OpKind::float(ArithOp::Add, 32), e * n as u64);
            return Ok((scores, pass));
        };
        let kf = key.format.expect("fixed key");
        let bits = f.mem.bits().max(kf.bits());
        for m in &mem.address {
            let (acc, wide_frac) = match self.config.similarity {
                SimilarityKind::Hamming => {
                    if kf.bits() != f.mem.bits() {
                        return Err(SimilarityError::BitWidth { left: f.mem.bits(), right: kf.bits() }.into());
                    }
                    let acc = hamming_accumulate(&m.raw, &key.raw, bits - 1) as i128;
                    (acc, (bits as i32 - self.config.alpha) as u32)
                }
                _ => {
                    let acc: i128 = m.raw.iter().zip(&key.raw).map(|(&a, &b)| a as i128 * b as i128).sum();
                    (acc, f.mem.frac() + kf.frac())
                }
            };
            let (q, of) = ctx.requantize(acc, wide_frac, f.act);
            stats.overflows.similarity += of as u64;
            stats.similarity.push(acc as f64 * pow2(-(wide_frac as i32)), of);
            scores.push(q.to_f64());
            pass.push(!of);
        }
        let total = e * n as u64;
        match self.config.similarity {
            SimilarityKind::Hamming => {
                ctx.count(ArithOp::Xnor, bits, total);
                ctx.count(ArithOp::Add, bits, total);
                ctx.count(ArithOp::Shift, bits, n as u64);
            }
            _ if self.config.binary_act => ctx.count(ArithOp::Add, bits, total),
            _ => {
                ctx.count(ArithOp::Mult, bits, total);
                ctx.count(ArithOp::Add, bits, total);
            }
        }
        Ok((scores, pass))
    }

    /// Runs the R addressing hops and the output layer.
    pub fn read_hops(
        &self,
        p: &Prepared,
        mem: &MemoryState,
        question: &[usize],
        ctx: &mut ArithContext,
        stats: &mut ForwardStats,
    ) -> Result<HopTrace, ModelError> {
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let n = mem.slots();
        let mut keys = vec![self.question_key(p, question, ctx, stats)?];
        let mut hops = Vec::with_capacity(cfg.hops);
        for h in 1..=cfg.hops {
            let key = keys.last().expect("at least one key");
            let (scores, score_pass) = self.scores(mem, key, ctx, stats)?;
            let probs = softmax(&scores);
            stats.excluded_ops.add(OpKind::float(ArithOp::Exp, 32), n as u64);
            stats.excluded_ops.add(OpKind::float(ArithOp::Add, 32), n as u64);
            stats.excluded_ops.add(OpKind::float(ArithOp::Div, 32), n as u64);
            let wk = &p.key[h - 1];
            let (weights, weight_pass, read, update_pass, next) = match cfg.fixed() {
                None => {
                    let mut r = vec![0.0; e];
                    for (w, m) in probs.iter().zip(&mem.read) {
                        r.iter_mut().zip(&m.values).for_each(|(ri, mi)| *ri += w * mi);
                    }
                    let mut next = r.clone();
                    for (row, nx) in next.iter_mut().enumerate() {
                        *nx += (0..e).map(|c| wk.values[row * e + c] * key.values[c]).sum::<f64>();
                    }
                    let ops = (n * e + e * e + e) as u64;
                    ctx.ops.add(OpKind::float(ArithOp::Mult, 32), ops - e as u64);
                    ctx.ops.add(OpKind::float(ArithOp::Add, 32), ops);
                    (probs.clone(), Vec::new(), Activation::float(r), Vec::new(), Activation::float(next))
                }
                Some(f) => {
                    let bin = cfg.binary_act.then_some(f.mem);
                    // Read weights cross back into fixed point.
                    let mut w_raw = Vec::with_capacity(n);
                    let mut weight_pass = Vec::with_capacity(n);
                    for &pr in &probs {
                        let (q, of) = quantize_flagged(pr, f.act, ctx)?;
                        w_raw.push(q.raw());
                        weight_pass.push(!of);
                    }
                    let weights: Vec<f64> = w_raw.iter().map(|&r| r as f64 * f.act.resolution()).collect();
                    let acc: Vec<i128> = (0..e)
                        .map(|c| w_raw.iter().zip(&mem.read).map(|(&w, m)| w as i128 * m.raw[c] as i128).sum())
                        .collect();
                    ctx.count(ArithOp::Mult, f.act.bits().max(f.mem.bits()), (n * e) as u64);
                    ctx.count(ArithOp::Add, f.act.bits().max(f.mem.bits()), (n * e) as u64);
                    let read =
                        self.activate(&acc, f.act.frac() + f.mem.frac(), f.act, bin, ctx, &mut stats.overflows.read);

                    let kf_next = cfg.key_format(h).expect("fixed mode");
                    let wf = wk.format.expect("fixed weights");
                    let kf = key.format.expect("fixed key");
                    let acc: Vec<i128> = (0..e)
                        .map(|row| (0..e).map(|c| wk.raw[row * e + c] as i128 * key.raw[c] as i128).sum())
                        .collect();
                    let mut ov = 0;
                    let update = self.activate(&acc, wf.frac() + kf.frac(), kf_next, None, ctx, &mut ov);
                    if cfg.binary_act {
                        ctx.count(ArithOp::Add, wf.bits(), (e * e) as u64);
                    } else {
                        ctx.count(ArithOp::Mult, wf.bits().max(kf.bits()), (e * e) as u64);
                        ctx.count(ArithOp::Add, wf.bits().max(kf.bits()), (e * e) as u64);
                    }
                    let rf = read.format.expect("fixed read");
                    let wide_frac = kf_next.frac().max(rf.frac());
                    let sum: Vec<i128> = update
                        .raw
                        .iter()
                        .zip(&read.raw)
                        .map(|(&u, &r)| {
                            ((u as i128) << (wide_frac - kf_next.frac())) + ((r as i128) << (wide_frac - rf.frac()))
                        })
                        .collect();
                    ctx.count(ArithOp::Add, kf_next.bits(), e as u64);
                    let next = self.activate(&sum, wide_frac, kf_next, bin, ctx, &mut ov);
                    stats.overflows.key += ov;
                    (weights, weight_pass, read, update.pass, next)
                }
            };
            hops.push(Hop { scores, score_pass, probs, weights, weight_pass, read, key_update_pass: update_pass });
            keys.push(next);
        }
        let logits = self.logits(keys.last().expect("final key"), stats);
        let output = softmax(&logits);
        Ok(HopTrace { keys, hops, logits, output })
    }

    /// Answer distribution `softmax(W_o k)`, always in float.
    pub fn output(&self, key: &Activation, stats: &mut ForwardStats) -> Vec<f64> {
        softmax(&self.logits(key, stats))
    }

    fn logits(&self, key: &Activation, stats: &mut ForwardStats) -> Vec<f64> {
        let w = &self.params.w_o;
        let logits: Vec<f64> =
            (0..w.rows).map(|r| (0..w.cols).map(|c| w.get(r, c) * key.values[c]).sum()).collect();
        let n = (w.rows * w.cols) as u64;
        stats.excluded_ops.add(OpKind::float(ArithOp::Mult, 32), n);
        stats.excluded_ops.add(OpKind::float(ArithOp::Add, 32), n);
        stats.excluded_ops.add(OpKind::float(ArithOp::Exp, 32), w.rows as u64);
        stats.excluded_ops.add(OpKind::float(ArithOp::Div, 32), w.rows as u64);
        logits
    }

    pub fn forward(
        &self,
        p: &Prepared,
        sentences: &[Vec<usize>],
        question: &[usize],
        ctx: &mut ArithContext,
        stats: &mut ForwardStats,
    ) -> Result<(MemoryState, HopTrace), ModelError> {
        let mem = self.write_memory(p, sentences, ctx, stats)?;
        let trace = self.read_hops(p, &mem, question, ctx, stats)?;
        Ok((mem, trace))
    }

    /// Cross-entropy of `answer` under a completed trace.
    pub fn loss(trace: &HopTrace, answer: usize) -> f64 {
        let max = trace.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + trace.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - trace.logits[answer]
    }

    /// Accumulates the gradient of the cross-entropy loss into `grads`.
    /// Quantizers and `sign` pass gradients straight through inside their
    /// range; the Hamming similarity uses its approximate bitwise gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &Prepared,
        sentences: &[Vec<usize>],
        question: &[usize],
        answer: usize,
        mem: &MemoryState,
        trace: &HopTrace,
        grads: &mut MannParams,
    ) {
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let n = mem.slots();
        let hamming = cfg.similarity == SimilarityKind::Hamming;

        let mut dlogits = trace.output.clone();
        dlogits[answer] -= 1.0;
        let k_final = &trace.keys[cfg.hops].values;
        let wo = &self.params.w_o;
        let mut dk = vec![0.0; e];
        for (r, &g) in dlogits.iter().enumerate() {
            for c in 0..e {
                grads.w_o.data[r * e + c] += g * k_final[c];
                dk[c] += wo.data[r * e + c] * g;
            }
        }

        let mut dma = vec![vec![0.0; e]; n];
        let mut dmr = vec![vec![0.0; e]; n];
        for h in (1..=cfg.hops).rev() {
            let hop = &trace.hops[h - 1];
            let key = &trace.keys[h - 1];
            let out = &trace.keys[h];
            let wk = &p.key[h - 1];
            let dpre: Vec<f64> = (0..e).map(|c| if out.passes(c) { dk[c] } else { 0.0 }).collect();
            let du: Vec<f64> = (0..e)
                .map(|c| if hop.key_update_pass.is_empty() || hop.key_update_pass[c] { dpre[c] } else { 0.0 })
                .collect();
            let mut dk_prev = vec![0.0; e];
            for row in 0..e {
                if du[row] == 0.0 {
                    continue;
                }
                for c in 0..e {
                    let i = row * e + c;
                    if wk.passes(i) {
                        grads.w_key.data[i] += du[row] * key.values[c];
                    }
                    dk_prev[c] += wk.values[i] * du[row];
                }
            }

            let dpre_r: Vec<f64> = (0..e).map(|c| if hop.read.passes(c) { dpre[c] } else { 0.0 }).collect();
            let mut dp = vec![0.0; n];
            for j in 0..n {
                let m = &mem.read[j];
                let dw: f64 = m.values.iter().zip(&dpre_r).map(|(a, b)| a * b).sum();
                dp[j] = if hop.weight_pass.is_empty() || hop.weight_pass[j] { dw } else { 0.0 };
                for c in 0..e {
                    dmr[j][c] += hop.weights[j] * dpre_r[c];
                }
            }
            let dot: f64 = hop.probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let mut ds = hop.probs[j] * (dp[j] - dot);
                if !(hop.score_pass.is_empty() || hop.score_pass[j]) {
                    ds = 0.0;
                }
                if ds == 0.0 {
                    continue;
                }
                let m = &mem.address[j];
                if hamming {
                    let gu = hamming_backward_raw(&m.raw, &key.raw, cfg.alpha);
                    let gv = hamming_backward_raw(&key.raw, &m.raw, cfg.alpha);
                    for c in 0..e {
                        dma[j][c] += ds * gu[c];
                        dk_prev[c] += ds * gv[c];
                    }
                } else {
                    for c in 0..e {
                        dma[j][c] += ds * key.values[c];
                        dk_prev[c] += ds * m.values[c];
                    }
                }
            }
            dk = dk_prev;
        }

        let scatter = |g: &mut Matrix, w: &QuantWeights, active: &[usize], d: &[f64], act: &Activation| {
            for &t in active {
                for r in 0..e {
                    let i = r * w.cols + t;
                    if act.passes(r) && w.passes(i) {
                        g.data[i] += d[r];
                    }
                }
            }
        };
        scatter(&mut grads.w_q, &p.q, question, &dk, &trace.keys[0]);
        for (j, s) in sentences.iter().enumerate() {
            scatter(&mut grads.w_a, &p.a, s, &dma[j], &mem.address[j]);
            scatter(&mut grads.w_r, &p.r, s, &dmr[j], &mem.read[j]);
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, ModelError> {
        let mut ctx = ArithContext::new();
        let quantized = match self.config.fixed() {
            None => None,
            Some(f) => {
                let q = |m: &Matrix, fmt: QFormat, ctx: &mut ArithContext| {
                    FixedTensor::from_f64(&m.data, vec![m.rows, m.cols], fmt, ctx)
                };
                let p = &self.params;
                Some(QuantizedPayload {
                    w_a: q(&p.w_a, f.param, &mut ctx)?,
                    w_r: q(&p.w_r, f.param, &mut ctx)?,
                    w_q: q(&p.w_q, f.param, &mut ctx)?,
                    w_key: (1..=self.config.hops)
                        .map(|h| q(&p.w_key, self.config.key_weight_format(h).expect("fixed"), &mut ctx))
                        .collect::<Result<_, _>>()?,
                })
            }
        };
        Ok(Checkpoint { version: CHECKPOINT_VERSION, config: self.config.clone(), params: self.params.clone(), quantized })
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint()?)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        ck.into_model()
    }
}

/// Exact scaled-integer copies of the quantized parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedPayload {
    pub w_a: FixedTensor,
    pub w_r: FixedTensor,
    pub w_q: FixedTensor,
    pub w_key: Vec<FixedTensor>,
}

/// On-disk model: configuration, float masters, and the fixed-point
/// payload the forward pass uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: MannConfig,
    pub params: MannParams,
    pub quantized: Option<QuantizedPayload>,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<MannModel, ModelError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(self.version));
        }
        self.config.validate()?;
        let (i, e) = (self.config.input_dim, self.config.embed_dim);
        let shapes = [(e, i), (e, i), (e, i), (e, e), (i, e)];
        for (m, (r, c)) in self.params.matrices().iter().zip(shapes) {
            if m.rows != r || m.cols != c || m.data.len() != r * c {
                return Err(ModelError::Checkpoint(format!("matrix is {}x{}, expected {r}x{c}", m.rows, m.cols)));
            }
        }
        let model = MannModel { config: self.config, params: self.params };
        if let Some(q) = &self.quantized {
            let fresh = model.to_checkpoint()?.quantized.expect("fixed config");
            if &fresh != q {
                return Err(ModelError::Checkpoint("quantized payload disagrees with the masters".into()));
            }
        } else if model.config.fixed().is_some() {
            return Err(ModelError::Checkpoint("fixed-point model without quantized payload".into()));
        }
        Ok(model)
    }
}
