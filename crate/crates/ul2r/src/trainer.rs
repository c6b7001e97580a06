//! Two-phase training driver: a plain left-to-right language-modeling
//! phase, then a continuation phase that trains the same weights on the
//! mixture of denoisers. The second phase resumes everything from a
//! checkpoint — parameters, Adam moments, and the cumulative token and
//! compute counters — so a run's total cost is always readable from its
//! final checkpoint.
//!
//! Determinism contract: a `(config, corpus, source checkpoint)` triple
//! fully determines the run. Every random draw comes from a per-step,
//! per-slot stream seeded by mixing `(seed, step, slot, stream)` with a
//! SplitMix64 finalizer, so example `i` of step `s` sees the same document
//! and the same corruption no matter what happened in other slots.
//!
//! Accounting conventions: each of the `batch_size` example slots counts as
//! one full row of `len_inputs + len_targets` tokens per step, whether or
//! not packing squeezed several examples into one row, and training compute
//! is estimated as `6 * params * tokens`.

use crate::denoiser::{corrupt, lm_example, sample_denoiser, DenoiserError, DenoiserKind, MixtureConfig};
use crate::model::{self, grad, init_params, ModelConfig, ModelError, Params};
use crate::packer::{pack_examples, prefix_lm_mask, PackError};
use crate::tokenizer::{TokenId, Vocab};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint vocabulary layout {found} does not match this build ({expected})")]
    VocabMismatch { expected: String, found: String },
    #[error("corpus has no documents of at least two tokens")]
    EmptyCorpus,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invalid phase/source pairing: {0}")]
    PhaseSource(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

/// Which of the two training phases a run (or a checkpoint) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Left-to-right language modeling from fresh weights.
    Causal,
    /// Continued training on the mixture of denoisers, from a checkpoint.
    Ul2r,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Causal => write!(f, "causal"),
            Phase::Ul2r => write!(f, "ul2r"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `lr_max` at every step.
    Constant,
    /// Cosine decay from `lr_max` at step 0 to `lr_min` at step `total`.
    Cosine,
}

/// Adam hyperparameters. The defaults are the usual ones.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Optimizer steps in this phase.
    pub steps: u64,
    /// Examples drawn per step (slots, not packed rows).
    pub batch_size: usize,
    /// Input-side token budget of a packed row.
    pub len_inputs: usize,
    /// Target-side token budget of a packed row.
    pub len_targets: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Denoiser mixture; only consulted in the [`Phase::Ul2r`] phase.
    pub mixture: MixtureConfig,
    /// Diagnostic knob: render the prefix-LM slice of the mixture as plain
    /// language-model rows (first token as prefix, no mode token). With a
    /// prefix-only mixture this makes the continuation phase reproduce the
    /// causal phase batch-for-batch, which is the equivalence oracle the
    /// tests lean on. Off by default.
    pub s_as_lm: bool,
    pub model: ModelConfig,
}

/// Learning rate for optimizer step `step` of `0..total`. Endpoints are
/// returned exactly; between them the cosine form
/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2` applies.
pub fn lr_at(schedule: Schedule, lr_max: f64, lr_min: f64, step: u64, total: u64) -> f64 {
    match schedule {
        Schedule::Constant => lr_max,
        Schedule::Cosine => {
            if step == 0 || total == 0 {
                lr_max
            } else if step >= total {
                lr_min
            } else {
                let frac = step as f64 / total as f64;
                lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    /// 0-based optimizer step within the phase.
    pub step: u64,
    pub phase: Phase,
    /// Learning rate used by this step.
    pub lr: f64,
    /// Mean loss of this step's batch.
    pub loss: f64,
    /// Cumulative nominal tokens after this step (across phases).
    pub tokens: u64,
    /// Cumulative estimated training compute after this step.
    pub flops: f64,
}

/// Render metrics as CSV with the canonical header.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,phase,lr,loss,tokens,flops\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.phase, r.lr, r.loss, r.tokens, r.flops
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// seed streams

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_DOC: u64 = 1;
pub(crate) const STREAM_MIX: u64 = 2;
pub(crate) const STREAM_CORRUPT: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent 64-bit seed for `(seed, step, slot, stream)`.
pub(crate) fn derive_seed(seed: u64, step: u64, slot: u64, stream: u64) -> u64 {
    let mut h = splitmix64(seed ^ 0x9E37_79B9_7F4A_7C15);
    h = splitmix64(h ^ step);
    h = splitmix64(h ^ slot);
    h = splitmix64(h ^ stream);
    h
}

fn stream_rng(seed: u64, step: u64, slot: u64, stream: u64) -> StdRng {
    StdRng::seed_from_u64(derive_seed(seed, step, slot, stream))
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UL2R";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full training state: weights, optimizer moments, and run counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Hash of the vocabulary layout the weights were trained against.
    pub vocab_hash: String,
    /// Phase that produced this checkpoint.
    pub phase: Phase,
    /// Optimizer steps completed in that phase.
    pub step: u64,
    /// Cumulative nominal training tokens across phases.
    pub tokens: u64,
    /// Cumulative estimated training compute across phases.
    pub flops: f64,
    /// Cumulative Adam updates (bias-correction clock).
    pub adam_t: u64,
    pub params: Params,
    pub adam_m: Params,
    pub adam_v: Params,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    model: ModelConfig,
    vocab_hash: String,
    phase: Phase,
    step: u64,
    tokens: u64,
    flops: f64,
    adam_t: u64,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, dims.len() as u32);
    for &d in dims {
        push_u32(out, d as u32);
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::BadCheckpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model,
            vocab_hash: self.vocab_hash.clone(),
            phase: self.phase,
            step: self.step,
            tokens: self.tokens,
            flops: self.flops,
            adam_t: self.adam_t,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        push_u32(&mut out, CHECKPOINT_VERSION);
        push_u32(&mut out, header_json.len() as u32);
        out.extend_from_slice(&header_json);
        let shapes: BTreeMap<String, Vec<usize>> = self.model.tensor_shapes().into_iter().collect();
        for (prefix, set) in [("", &self.params), ("adam_m.", &self.adam_m), ("adam_v.", &self.adam_v)]
        {
            for (name, tensor) in set.named() {
                let dims = &shapes[&name];
                push_tensor(&mut out, &format!("{prefix}{name}"), dims, tensor);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint, TrainError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::BadVersion(version));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| TrainError::BadCheckpoint(format!("header: {e}")))?;
        header.model.validate()?;
        if header.vocab_hash != Vocab::layout_hash() {
            return Err(TrainError::VocabMismatch {
                expected: Vocab::layout_hash(),
                found: header.vocab_hash,
            });
        }

        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        while !r.done() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TrainError::BadCheckpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| TrainError::BadCheckpoint(format!("tensor {name}: shape overflow")))?;
            let bytes = r.take(numel * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(TrainError::BadCheckpoint(format!("duplicate tensor {name}")));
            }
        }

        let shapes: BTreeMap<String, Vec<usize>> = header.model.tensor_shapes().into_iter().collect();
        let mut build = |prefix: &str| -> Result<Params, TrainError> {
            let mut set = Params::zeros(&header.model);
            for (name, slot) in set.named_mut() {
                let key = format!("{prefix}{name}");
                let (dims, data) = tensors
                    .remove(&key)
                    .ok_or_else(|| TrainError::BadCheckpoint(format!("missing tensor {key}")))?;
                if dims != shapes[&name] {
                    return Err(TrainError::BadCheckpoint(format!(
                        "tensor {key}: shape {dims:?}, expected {:?}",
                        shapes[&name]
                    )));
                }
                *slot = data;
            }
            Ok(set)
        };
        let params = build("")?;
        let adam_m = build("adam_m.")?;
        let adam_v = build("adam_v.")?;
        if let Some(name) = tensors.keys().next() {
            return Err(TrainError::BadCheckpoint(format!("unexpected tensor {name}")));
        }

        Ok(Checkpoint {
            model: header.model,
            vocab_hash: header.vocab_hash,
            phase: header.phase,
            step: header.step,
            tokens: header.tokens,
            flops: header.flops,
            adam_t: header.adam_t,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// the training loop

fn validate_config(cfg: &TrainConfig, source: Option<&Checkpoint>) -> Result<(), TrainError> {
    cfg.model.validate()?;
    if cfg.batch_size == 0 {
        return Err(TrainError::BadConfig("batch_size must be positive".into()));
    }
    if cfg.len_inputs == 0 || cfg.len_targets == 0 {
        return Err(TrainError::BadConfig("row budgets must be positive".into()));
    }
    if cfg.len_inputs + cfg.len_targets > cfg.model.max_len {
        return Err(TrainError::BadConfig(format!(
            "row length {} exceeds model max_len {}",
            cfg.len_inputs + cfg.len_targets,
            cfg.model.max_len
        )));
    }
    if !(cfg.lr_max.is_finite() && cfg.lr_min.is_finite()) || cfg.lr_max <= 0.0 || cfg.lr_min < 0.0
    {
        return Err(TrainError::BadConfig("learning rates must be positive and finite".into()));
    }
    if cfg.lr_min > cfg.lr_max {
        return Err(TrainError::BadConfig("lr_min exceeds lr_max".into()));
    }
    match (cfg.phase, source) {
        (Phase::Causal, Some(_)) => Err(TrainError::PhaseSource(
            "the causal phase starts from fresh weights, not a checkpoint".into(),
        )),
        (Phase::Ul2r, None) => Err(TrainError::PhaseSource(
            "the continuation phase needs a source checkpoint".into(),
        )),
        _ => Ok(()),
    }?;
    if let Some(src) = source {
        if src.vocab_hash != Vocab::layout_hash() {
            return Err(TrainError::VocabMismatch {
                expected: Vocab::layout_hash(),
                found: src.vocab_hash.clone(),
            });
        }
        if src.model != cfg.model {
            return Err(TrainError::BadConfig(format!(
                "source checkpoint model {:?} differs from configured model {:?}",
                src.model, cfg.model
            )));
        }
    }
    if cfg.phase == Phase::Ul2r {
        cfg.mixture.validate()?;
    }
    Ok(())
}

fn adam_update(
    params: &mut Params,
    m: &mut Params,
    v: &mut Params,
    grads: &model::Grads,
    adam: &AdamConfig,
    lr: f64,
    t: u64,
) {
    let bc1 = 1.0 - adam.beta1.powi(t as i32);
    let bc2 = 1.0 - adam.beta2.powi(t as i32);
    let gn = grads.named();
    let pn = params.named_mut();
    let mn = m.named_mut();
    let vn = v.named_mut();
    for (((p, m), v), g) in pn.into_iter().zip(mn).zip(vn).zip(gn) {
        for i in 0..p.1.len() {
            let gi = g.1[i];
            let m64 = adam.beta1 * (m.1[i] as f64) + (1.0 - adam.beta1) * gi;
            let v64 = adam.beta2 * (v.1[i] as f64) + (1.0 - adam.beta2) * gi * gi;
            m.1[i] = m64 as f32;
            v.1[i] = v64 as f32;
            let mhat = m64 / bc1;
            let vhat = v64 / bc2;
            p.1[i] = ((p.1[i] as f64) - lr * mhat / (vhat.sqrt() + adam.eps)) as f32;
        }
    }
}

/// Run one training phase over tokenized documents and return the final
/// checkpoint plus one metrics row per step.
///
/// The causal phase initializes fresh weights from the config seed and
/// rejects a source; the continuation phase requires one and carries its
/// weights, Adam moments, and counters forward. Documents shorter than two
/// tokens are ignored.
pub fn run_phase(
    cfg: &TrainConfig,
    docs: &[Vec<TokenId>],
    source: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<MetricsRow>), TrainError> {
    validate_config(cfg, source)?;
    let eligible: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    let (mut params, mut adam_m, mut adam_v, mut adam_t, mut tokens, mut flops) = match source {
        Some(src) => (
            src.params.clone(),
            src.adam_m.clone(),
            src.adam_v.clone(),
            src.adam_t,
            src.tokens,
            src.flops,
        ),
        None => {
            let mut rng = stream_rng(cfg.seed, 0, 0, STREAM_INIT);
            (
                init_params(&cfg.model, &mut rng)?,
                Params::zeros(&cfg.model),
                Params::zeros(&cfg.model),
                0,
                0,
                0.0,
            )
        }
    };

    let n_params = cfg.model.param_count();
    let tokens_per_step = cfg.batch_size as u64 * (cfg.len_inputs + cfg.len_targets) as u64;
    let mut metrics = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let lr = lr_at(cfg.schedule, cfg.lr_max, cfg.lr_min, step, cfg.steps);
        let mut examples = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size as u64 {
            let mut doc_rng = stream_rng(cfg.seed, step, slot, STREAM_DOC);
            let doc = &docs[eligible[doc_rng.gen_range(0..eligible.len())]];
            let ex = match cfg.phase {
                Phase::Causal => lm_example(doc)?,
                Phase::Ul2r => {
                    let mut mix_rng = stream_rng(cfg.seed, step, slot, STREAM_MIX);
                    let spec = sample_denoiser(&cfg.mixture, &mut mix_rng)?;
                    if spec.kind == DenoiserKind::Sequential && cfg.s_as_lm {
                        lm_example(doc)?
                    } else {
                        let mut corrupt_rng = stream_rng(cfg.seed, step, slot, STREAM_CORRUPT);
                        corrupt(doc, &spec, &mut corrupt_rng)?
                    }
                }
            };
            examples.push(ex);
        }

        let batch = pack_examples(&examples, cfg.len_inputs, cfg.len_targets)?;
        let mask = prefix_lm_mask(&batch);
        let (loss, grads) = grad(&params, &cfg.model, &batch, &mask)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        adam_t += 1;
        adam_update(&mut params, &mut adam_m, &mut adam_v, &grads, &cfg.adam, lr, adam_t);

        tokens += tokens_per_step;
        flops += 6.0 * n_params as f64 * tokens_per_step as f64;
        metrics.push(MetricsRow { step, phase: cfg.phase, lr, loss, tokens, flops });
    }

    let checkpoint = Checkpoint {
        model: cfg.model,
        vocab_hash: Vocab::layout_hash(),
        phase: cfg.phase,
        step: cfg.steps,
        tokens,
        flops,
        adam_t,
        params,
        adam_m,
        adam_v,
    };
    Ok((checkpoint, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            vocab_size: Vocab::SIZE as usize,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_len: 32,
        }
    }

    fn tiny_config(phase: Phase, steps: u64) -> TrainConfig {
        TrainConfig {
            phase,
            steps,
            batch_size: 3,
            len_inputs: 8,
            len_targets: 8,
            lr_max: 1e-3,
            lr_min: 1e-5,
            schedule: Schedule::Cosine,
            adam: AdamConfig::default(),
            seed: 7,
            mixture: MixtureConfig::default(),
            s_as_lm: false,
            model: tiny_model(),
        }
    }

    fn tiny_docs() -> Vec<Vec<TokenId>> {
        [
            "the cat sat on the mat",
            "a quick brown fox jumps over a lazy dog",
            "pack my box with five dozen jugs",
            "every good boy deserves fruit",
        ]
        .iter()
        .map(|s| Vocab::encode(s.as_bytes()))
        .collect()
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints_exactly() {
        let lr_max = 1e-4;
        let lr_min = 1e-6;
        assert_eq!(lr_at(Schedule::Cosine, lr_max, lr_min, 0, 2).to_bits(), lr_max.to_bits());
        assert_eq!(lr_at(Schedule::Cosine, lr_max, lr_min, 2, 2).to_bits(), lr_min.to_bits());
        let mid = lr_at(Schedule::Cosine, lr_max, lr_min, 1, 2);
        assert!((mid - 5.05e-5).abs() < 1e-12, "midpoint {mid}");
        assert_eq!(lr_at(Schedule::Constant, lr_max, lr_min, 1, 2), lr_max);
    }

    #[test]
    fn cosine_schedule_decreases_monotonically() {
        let mut prev = f64::INFINITY;
        for step in 0..=50 {
            let lr = lr_at(Schedule::Cosine, 3e-4, 1e-6, step, 50);
            assert!(lr < prev, "step {step}: {lr} >= {prev}");
            assert!(lr >= 1e-6 && lr <= 3e-4);
            prev = lr;
        }
    }

    #[test]
    fn causal_phase_trains_and_counts_tokens() {
        let cfg = tiny_config(Phase::Causal, 3);
        let (ck, metrics) = run_phase(&cfg, &tiny_docs(), None).unwrap();
        assert_eq!(metrics.len(), 3);
        assert_eq!(ck.step, 3);
        assert_eq!(ck.adam_t, 3);
        // 3 steps x 3 slots x (8 + 8) tokens.
        assert_eq!(ck.tokens, 3 * 3 * 16);
        let expected_flops = 6.0 * cfg.model.param_count() as f64 * ck.tokens as f64;
        assert!((ck.flops - expected_flops).abs() < 1e-3, "{} vs {expected_flops}", ck.flops);
        assert_eq!(metrics.last().unwrap().tokens, ck.tokens);
        for row in &metrics {
            assert!(row.loss.is_finite());
            assert_eq!(row.phase, Phase::Causal);
        }
        // Early training on a tiny model should already reduce the loss.
        assert!(metrics[2].loss < metrics[0].loss + 0.5);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let cfg = tiny_config(Phase::Causal, 3);
        let docs = tiny_docs();
        let (ck1, m1) = run_phase(&cfg, &docs, None).unwrap();
        let (ck2, m2) = run_phase(&cfg, &docs, None).unwrap();
        assert_eq!(ck1, ck2);
        assert_eq!(m1.len(), m2.len());
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.lr.to_bits(), b.lr.to_bits());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let docs = tiny_docs();
        let mut cfg = tiny_config(Phase::Causal, 2);
        let (ck1, _) = run_phase(&cfg, &docs, None).unwrap();
        cfg.seed = 8;
        let (ck2, _) = run_phase(&cfg, &docs, None).unwrap();
        assert_ne!(ck1.params, ck2.params);
    }

    #[test]
    fn continuation_resumes_counters_and_moments() {
        let docs = tiny_docs();
        let (ck1, _) = run_phase(&tiny_config(Phase::Causal, 3), &docs, None).unwrap();
        let cfg2 = tiny_config(Phase::Ul2r, 2);
        let (ck2, metrics) = run_phase(&cfg2, &docs, Some(&ck1)).unwrap();
        assert_eq!(ck2.phase, Phase::Ul2r);
        assert_eq!(ck2.step, 2);
        assert_eq!(ck2.adam_t, 5, "Adam clock continues across phases");
        assert_eq!(ck2.tokens, ck1.tokens + 2 * 3 * 16);
        assert!(ck2.flops > ck1.flops);
        assert_eq!(metrics[0].tokens, ck1.tokens + 3 * 16);
        assert_ne!(ck2.params, ck1.params);
    }

    #[test]
    fn zero_step_phases_change_nothing() {
        let docs = tiny_docs();
        let (ck1, _) = run_phase(&tiny_config(Phase::Causal, 2), &docs, None).unwrap();
        let (ck2, metrics) = run_phase(&tiny_config(Phase::Ul2r, 0), &docs, Some(&ck1)).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(ck2.params, ck1.params);
        assert_eq!(ck2.adam_m, ck1.adam_m);
        assert_eq!(ck2.tokens, ck1.tokens);
        assert_eq!(ck2.flops.to_bits(), ck1.flops.to_bits());
        assert_eq!(ck2.phase, Phase::Ul2r);
    }

    #[test]
    fn phase_source_pairing_is_enforced() {
        let docs = tiny_docs();
        let (ck, _) = run_phase(&tiny_config(Phase::Causal, 1), &docs, None).unwrap();
        let err = run_phase(&tiny_config(Phase::Causal, 1), &docs, Some(&ck)).unwrap_err();
        assert!(matches!(err, TrainError::PhaseSource(_)), "{err}");
        let err = run_phase(&tiny_config(Phase::Ul2r, 1), &docs, None).unwrap_err();
        assert!(matches!(err, TrainError::PhaseSource(_)), "{err}");
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let docs = tiny_docs();
        let (mut ck, _) = run_phase(&tiny_config(Phase::Causal, 1), &docs, None).unwrap();
        ck.vocab_hash = "0000".into();
        let err = run_phase(&tiny_config(Phase::Ul2r, 1), &docs, Some(&ck)).unwrap_err();
        assert!(matches!(err, TrainError::VocabMismatch { .. }), "{err}");
    }

    #[test]
    fn empty_and_too_short_corpora_are_rejected() {
        let err = run_phase(&tiny_config(Phase::Causal, 1), &[], None).unwrap_err();
        assert!(matches!(err, TrainError::EmptyCorpus));
        let one_token: Vec<Vec<TokenId>> = vec![vec![5], vec![]];
        let err = run_phase(&tiny_config(Phase::Causal, 1), &one_token, None).unwrap_err();
        assert!(matches!(err, TrainError::EmptyCorpus));
    }

    #[test]
    fn non_finite_loss_is_reported_with_its_step() {
        let docs = tiny_docs();
        let (mut ck, _) = run_phase(&tiny_config(Phase::Causal, 1), &docs, None).unwrap();
        // The final norm gain touches every scored position, so one NaN
        // there poisons the very first loss.
        ck.params.final_gain[0] = f32::NAN;
        let err = run_phase(&tiny_config(Phase::Ul2r, 1), &docs, Some(&ck)).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { step: 0 }), "{err}");
    }

    #[test]
    fn prefix_only_mixture_rendered_as_lm_reproduces_the_causal_phase() {
        // The continuation phase with a prefix-LM-only mixture, rendered as
        // plain language-model rows, must replay the causal phase exactly:
        // same documents, same batches, same losses, same final weights.
        let docs = tiny_docs();
        let steps = 4;
        let (direct, direct_metrics) =
            run_phase(&tiny_config(Phase::Causal, steps), &docs, None).unwrap();

        let (init, _) = run_phase(&tiny_config(Phase::Causal, 0), &docs, None).unwrap();
        let mut cfg = tiny_config(Phase::Ul2r, steps);
        cfg.mixture.s_weight = 1.0;
        cfg.mixture.r_weight = 0.0;
        cfg.mixture.x_weight = 0.0;
        cfg.s_as_lm = true;
        let (replay, replay_metrics) = run_phase(&cfg, &docs, Some(&init)).unwrap();

        assert_eq!(direct.params, replay.params);
        for (a, b) in direct_metrics.iter().zip(replay_metrics.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
        }
    }

    #[test]
    fn prefix_denoiser_differs_from_plain_lm_rows() {
        // Sanity check on the knob itself: without the rendering shortcut
        // the prefix-LM denoiser prepends a mode token and splits at a
        // sampled point, so the very first batch already differs.
        let docs = tiny_docs();
        let (init, _) = run_phase(&tiny_config(Phase::Causal, 0), &docs, None).unwrap();
        let mut cfg = tiny_config(Phase::Ul2r, 1);
        cfg.mixture.s_weight = 1.0;
        cfg.mixture.r_weight = 0.0;
        cfg.mixture.x_weight = 0.0;
        cfg.s_as_lm = false;
        let (_, with_modes) = run_phase(&cfg, &docs, Some(&init)).unwrap();
        cfg.s_as_lm = true;
        let (_, as_lm) = run_phase(&cfg, &docs, Some(&init)).unwrap();
        assert_ne!(with_modes[0].loss.to_bits(), as_lm[0].loss.to_bits());
    }

    #[test]
    fn checkpoints_roundtrip_bitwise() {
        let docs = tiny_docs();
        let (ck, _) = run_phase(&tiny_config(Phase::Causal, 2), &docs, None).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        assert_eq!(ck.flops.to_bits(), back.flops.to_bits());
        // And through the filesystem.
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, loaded);
        // Serialization itself is deterministic.
        assert_eq!(bytes, loaded.to_bytes());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected_with_specific_errors() {
        let docs = tiny_docs();
        let (ck, _) = run_phase(&tiny_config(Phase::Causal, 1), &docs, None).unwrap();
        let good = ck.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(TrainError::BadMagic)));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bad_version),
            Err(TrainError::BadVersion(99))
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(TrainError::BadCheckpoint(_))
        ));

        let mut wrong_hash = ck.clone();
        wrong_hash.vocab_hash = "feed".into();
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_hash.to_bytes()),
            Err(TrainError::VocabMismatch { .. })
        ));

        // Drop the final tensor entirely: the name-set check must notice.
        let missing = {
            let full = ck.to_bytes();
            // Find the start of the last tensor by re-reading lengths.
            let mut r = Reader { buf: &full, pos: 0 };
            r.take(4).unwrap();
            r.u32().unwrap();
            let hl = r.u32().unwrap() as usize;
            r.take(hl).unwrap();
            let mut last_start = r.pos;
            while !r.done() {
                last_start = r.pos;
                let nl = r.u32().unwrap() as usize;
                r.take(nl).unwrap();
                let rank = r.u32().unwrap() as usize;
                let mut numel = 1usize;
                for _ in 0..rank {
                    numel *= r.u32().unwrap() as usize;
                }
                r.take(numel * 4).unwrap();
            }
            full[..last_start].to_vec()
        };
        match Checkpoint::from_bytes(&missing) {
            Err(TrainError::BadCheckpoint(msg)) => assert!(msg.contains("missing"), "{msg}"),
            other => panic!("expected missing-tensor error, got {other:?}"),
        }

        // Append a stray tensor: also rejected.
        let mut extra = good.clone();
        push_tensor(&mut extra, "stray", &[2], &[1.0, 2.0]);
        match Checkpoint::from_bytes(&extra) {
            Err(TrainError::BadCheckpoint(msg)) => assert!(msg.contains("unexpected"), "{msg}"),
            other => panic!("expected unexpected-tensor error, got {other:?}"),
        }
    }

    #[test]
    fn metrics_csv_uses_the_canonical_header() {
        let rows = vec![MetricsRow {
            step: 0,
            phase: Phase::Causal,
            lr: 1e-3,
            loss: 5.5,
            tokens: 48,
            flops: 1234.0,
        }];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,phase,lr,loss,tokens,flops"));
        assert_eq!(lines.next(), Some("0,causal,0.001,5.5,48,1234"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn seed_streams_are_pairwise_independent() {
        // Distinct (step, slot, stream) triples give distinct seeds; the
        // same triple always gives the same seed.
        let mut seen = std::collections::HashSet::new();
        for step in 0..4 {
            for slot in 0..4 {
                for stream in [STREAM_INIT, STREAM_DOC, STREAM_MIX, STREAM_CORRUPT] {
                    let s = derive_seed(42, step, slot, stream);
                    assert!(seen.insert(s), "collision at ({step},{slot},{stream})");
                    assert_eq!(s, derive_seed(42, step, slot, stream));
                }
            }
        }
    }

    #[test]
    fn batch_size_counts_examples_not_rows() {
        // Nominal token accounting uses slots even when packing compresses
        // several examples into one row.
        let mut cfg = tiny_config(Phase::Causal, 1);
        cfg.batch_size = 5;
        let (ck, _) = run_phase(&cfg, &tiny_docs(), None).unwrap();
        assert_eq!(ck.tokens, 5 * 16);
    }
}
