//! Corruption objectives and the mixture that samples among them.
//!
//! Three families of denoisers turn a clean token sequence into an
//! (inputs, targets) pair:
//!
//! * **Regular** span corruption: a modest fraction of tokens (default 15%)
//!   is removed in short spans (mean length 3). Each removed span is replaced
//!   by a sentinel in the inputs; the targets list each sentinel followed by
//!   the tokens it hid. Tagged `[NLU]`.
//! * **Extreme** span corruption: same construction but aggressive — either
//!   long spans (mean 32 at 15% corruption) or a high corruption rate (50%
//!   with mean span 3). Tagged `[NLG]`.
//! * **Sequential**: the sequence is split at a uniform point into a prefix
//!   (inputs) and a continuation (targets); no sentinels. Tagged `[S2S]`.
//!
//! The default mixture draws 50% sequential, 25% regular, 25% extreme, with
//! the two extreme variants equally likely inside their share.
//!
//! [`reconstruct`] inverts any of the corruptions and is the oracle used by
//! the roundtrip tests: `reconstruct(corrupt(seq)) == seq`.

use crate::tokenizer::{TokenId, Vocab};
use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiserError {
    #[error("mixture weights invalid: {0}")]
    InvalidMixture(String),
    #[error("corruption rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("mean span length {0} must be at least 1")]
    InvalidMeanSpan(f64),
    #[error("sequence of length {len} too short: needs at least {needed} kept tokens")]
    InputTooShort { len: usize, needed: usize },
    #[error("{spans} spans exceed the sentinel budget of {budget}", budget = Vocab::SENTINEL_COUNT)]
    SentinelBudget { spans: usize },
    #[error("invalid span set: {0}")]
    InvalidSpans(String),
    #[error("split point {split} outside 1..{len}")]
    BadSplit { split: usize, len: usize },
    #[error("malformed example: {0}")]
    Malformed(String),
}

/// Which family a denoiser belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenoiserKind {
    Regular,
    Extreme,
    Sequential,
}

/// A fully instantiated denoiser: family, corruption parameters, and the
/// mode token stamped onto examples it produces. Use the constructors; they
/// keep the kind → mode-token mapping consistent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserSpec {
    pub kind: DenoiserKind,
    /// Fraction of tokens to corrupt. Unused by `Sequential`.
    pub rate: f64,
    /// Mean corrupted-span length. Unused by `Sequential`.
    pub mean_span: f64,
    /// Mode token prepended to the inputs of every example produced.
    pub mode: TokenId,
}

impl DenoiserSpec {
    /// Regular span corruption: 15% of tokens in spans of mean length 3.
    pub fn regular() -> Self {
        Self { kind: DenoiserKind::Regular, rate: 0.15, mean_span: 3.0, mode: Vocab::MODE_NLU }
    }

    /// Extreme corruption, long-span variant: 15% in spans of mean length 32.
    pub fn extreme_long() -> Self {
        Self { kind: DenoiserKind::Extreme, rate: 0.15, mean_span: 32.0, mode: Vocab::MODE_NLG }
    }

    /// Extreme corruption, high-rate variant: 50% in spans of mean length 3.
    pub fn extreme_high_rate() -> Self {
        Self { kind: DenoiserKind::Extreme, rate: 0.5, mean_span: 3.0, mode: Vocab::MODE_NLG }
    }

    /// Sequential prefix/continuation split.
    pub fn sequential() -> Self {
        Self { kind: DenoiserKind::Sequential, rate: 0.0, mean_span: 0.0, mode: Vocab::MODE_S2S }
    }

    pub fn with_params(mut self, rate: f64, mean_span: f64) -> Self {
        self.rate = rate;
        self.mean_span = mean_span;
        self
    }
}

/// Span-corruption parameters for one denoiser variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanParams {
    pub rate: f64,
    pub mean_span: f64,
}

/// Mixture weights over the denoiser families plus the parameters of each
/// span-corrupting variant. Weights must sum to 1 (outer and extreme-inner
/// independently, to within 1e-9).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub s_weight: f64,
    pub r_weight: f64,
    pub x_weight: f64,
    /// Split of `x_weight` between the two extreme variants.
    pub x_long_weight: f64,
    pub x_high_weight: f64,
    pub r_params: SpanParams,
    pub x_long_params: SpanParams,
    pub x_high_params: SpanParams,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            s_weight: 0.5,
            r_weight: 0.25,
            x_weight: 0.25,
            x_long_weight: 0.5,
            x_high_weight: 0.5,
            r_params: SpanParams { rate: 0.15, mean_span: 3.0 },
            x_long_params: SpanParams { rate: 0.15, mean_span: 32.0 },
            x_high_params: SpanParams { rate: 0.5, mean_span: 3.0 },
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let outer = self.s_weight + self.r_weight + self.x_weight;
        if (outer - 1.0).abs() > 1e-9 {
            return Err(DenoiserError::InvalidMixture(format!(
                "family weights sum to {outer}, expected 1"
            )));
        }
        let inner = self.x_long_weight + self.x_high_weight;
        if (inner - 1.0).abs() > 1e-9 {
            return Err(DenoiserError::InvalidMixture(format!(
                "extreme sub-weights sum to {inner}, expected 1"
            )));
        }
        for w in [self.s_weight, self.r_weight, self.x_weight, self.x_long_weight, self.x_high_weight] {
            if !(0.0..=1.0).contains(&w) {
                return Err(DenoiserError::InvalidMixture(format!("weight {w} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draw one denoiser from the mixture. Draw order is fixed (sequential,
/// regular, extreme; then long vs high-rate) so a given rng stream always
/// yields the same choices.
pub fn sample_denoiser(cfg: &MixtureConfig, rng: &mut StdRng) -> Result<DenoiserSpec, DenoiserError> {
    cfg.validate()?;
    let u: f64 = rng.gen();
    if u < cfg.s_weight {
        return Ok(DenoiserSpec::sequential());
    }
    if u < cfg.s_weight + cfg.r_weight {
        return Ok(DenoiserSpec::regular().with_params(cfg.r_params.rate, cfg.r_params.mean_span));
    }
    let v: f64 = rng.gen();
    if v < cfg.x_long_weight {
        Ok(DenoiserSpec::extreme_long().with_params(cfg.x_long_params.rate, cfg.x_long_params.mean_span))
    } else {
        Ok(DenoiserSpec::extreme_high_rate().with_params(cfg.x_high_params.rate, cfg.x_high_params.mean_span))
    }
}

/// A contiguous run of corrupted positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// A validated set of corruption spans over a sequence of known length:
/// sorted, non-overlapping, separated by at least one kept token, never
/// touching position 0.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpanSet {
    spans: Vec<Span>,
}

impl SpanSet {
    pub fn new(spans: Vec<Span>, seq_len: usize) -> Result<Self, DenoiserError> {
        let set = Self { spans };
        set.validate(seq_len)?;
        Ok(set)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Total number of corrupted tokens.
    pub fn noise_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    fn validate(&self, seq_len: usize) -> Result<(), DenoiserError> {
        let mut prev_end: Option<usize> = None;
        for (i, span) in self.spans.iter().enumerate() {
            if span.len == 0 {
                return Err(DenoiserError::InvalidSpans(format!("span {i} is empty")));
            }
            if span.start == 0 {
                return Err(DenoiserError::InvalidSpans("span covers position 0".into()));
            }
            if span.end() > seq_len {
                return Err(DenoiserError::InvalidSpans(format!(
                    "span {i} ends at {} beyond sequence length {seq_len}",
                    span.end()
                )));
            }
            if let Some(end) = prev_end {
                if span.start < end + 1 {
                    return Err(DenoiserError::InvalidSpans(format!(
                        "span {i} starts at {} without a kept token after position {end}",
                        span.start
                    )));
                }
            }
            prev_end = Some(span.end());
        }
        Ok(())
    }
}

/// Uniform composition of `total` into `parts` positive integers.
fn composition_positive(total: usize, parts: usize, rng: &mut StdRng) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    if parts == 1 {
        return vec![total];
    }
    // Cut points between adjacent unit cells: choose parts-1 of total-1 gaps.
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, total - 1, parts - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

/// Uniform composition of `total` into `parts` non-negative integers
/// (stars and bars).
fn composition_nonneg(total: usize, parts: usize, rng: &mut StdRng) -> Vec<usize> {
    debug_assert!(parts >= 1);
    if parts == 1 {
        return vec![total];
    }
    let slots = total + parts - 1;
    let mut bars: Vec<usize> = rand::seq::index::sample(rng, slots, parts - 1).into_iter().collect();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev: i64 = -1;
    for b in &bars {
        out.push(*b - (prev + 1) as usize);
        prev = *b as i64;
    }
    out.push(slots - 1 - bars[parts - 2]);
    out
}

/// Sample corruption spans for a sequence of length `n`.
///
/// The corrupted-token count is `max(1, round(n * rate))` when `rate > 0`
/// (zero when `rate == 0`), and the span count is `max(1, round(noise /
/// mean_span))`. Noise tokens are partitioned uniformly into that many
/// spans, and the kept tokens into the surrounding gaps, with position 0
/// always kept and at least one kept token between consecutive spans.
pub fn sample_spans(
    n: usize,
    rate: f64,
    mean_span: f64,
    rng: &mut StdRng,
) -> Result<SpanSet, DenoiserError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DenoiserError::InvalidRate(rate));
    }
    if mean_span < 1.0 {
        return Err(DenoiserError::InvalidMeanSpan(mean_span));
    }
    if n < 2 {
        return Err(DenoiserError::InputTooShort { len: n, needed: 2 });
    }
    if rate == 0.0 {
        return Ok(SpanSet::empty());
    }
    let noise = ((n as f64 * rate).round() as usize).max(1);
    let count = ((noise as f64 / mean_span).round() as usize).max(1);
    let kept = n - noise;
    if kept < count {
        return Err(DenoiserError::InputTooShort { len: n, needed: noise + count });
    }
    let lens = composition_positive(noise, count, rng);
    // Gaps: one before each span (>= 1 each so position 0 stays kept and
    // spans stay separated) plus an optional tail after the last span.
    let mut gaps = composition_nonneg(kept - count, count + 1, rng);
    for g in gaps.iter_mut().take(count) {
        *g += 1;
    }
    let mut spans = Vec::with_capacity(count);
    let mut pos = 0;
    for (len, gap) in lens.iter().zip(gaps.iter()) {
        pos += gap;
        spans.push(Span { start: pos, len: *len });
        pos += len;
    }
    SpanSet::new(spans, n)
}

/// One corrupted training example. `inputs` starts with the mode token when
/// one is set; `targets` always ends with `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedExample {
    /// Mode token id, or None for plain language-model rows.
    pub mode: Option<TokenId>,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    /// Length of the clean sequence this example was built from.
    pub original_len: usize,
}

/// Replace each span with a sentinel in the inputs and emit
/// `sentinel + hidden tokens` per span (plus a final `<eos>`) as targets.
pub fn corrupt_spans(
    seq: &[TokenId],
    spans: &SpanSet,
    mode: TokenId,
) -> Result<CorruptedExample, DenoiserError> {
    spans.validate(seq.len())?;
    if spans.len() > Vocab::SENTINEL_COUNT {
        return Err(DenoiserError::SentinelBudget { spans: spans.len() });
    }
    let mut inputs = Vec::with_capacity(seq.len() + 1);
    let mut targets = Vec::with_capacity(spans.noise_tokens() + spans.len() + 1);
    inputs.push(mode);
    let mut pos = 0;
    for (k, span) in spans.spans().iter().enumerate() {
        let sentinel = Vocab::sentinel(k).expect("span count already checked against budget");
        inputs.extend_from_slice(&seq[pos..span.start]);
        inputs.push(sentinel);
        targets.push(sentinel);
        targets.extend_from_slice(&seq[span.start..span.end()]);
        pos = span.end();
    }
    inputs.extend_from_slice(&seq[pos..]);
    targets.push(Vocab::EOS);
    Ok(CorruptedExample { mode: Some(mode), inputs, targets, original_len: seq.len() })
}

/// Sequential split at a fixed point: `seq[..split]` becomes the prefix
/// (after the mode token), `seq[split..]` plus `<eos>` the continuation.
pub fn corrupt_sequential_at(seq: &[TokenId], split: usize) -> Result<CorruptedExample, DenoiserError> {
    let n = seq.len();
    if n < 2 {
        return Err(DenoiserError::InputTooShort { len: n, needed: 2 });
    }
    if split == 0 || split >= n {
        return Err(DenoiserError::BadSplit { split, len: n });
    }
    let mut inputs = Vec::with_capacity(split + 1);
    inputs.push(Vocab::MODE_S2S);
    inputs.extend_from_slice(&seq[..split]);
    let mut targets = Vec::with_capacity(n - split + 1);
    targets.extend_from_slice(&seq[split..]);
    targets.push(Vocab::EOS);
    Ok(CorruptedExample { mode: Some(Vocab::MODE_S2S), inputs, targets, original_len: n })
}

/// Sequential split at a uniform point in `1..n`.
pub fn corrupt_sequential(seq: &[TokenId], rng: &mut StdRng) -> Result<CorruptedExample, DenoiserError> {
    let n = seq.len();
    if n < 2 {
        return Err(DenoiserError::InputTooShort { len: n, needed: 2 });
    }
    corrupt_sequential_at(seq, rng.gen_range(1..n))
}

/// Plain language-model row: the first token alone is the prefix and the
/// rest (plus `<eos>`) is the scored continuation. No mode token — this is
/// the shape the causal pretraining phase trains on.
pub fn lm_example(seq: &[TokenId]) -> Result<CorruptedExample, DenoiserError> {
    if seq.is_empty() {
        return Err(DenoiserError::InputTooShort { len: 0, needed: 1 });
    }
    let mut targets = Vec::with_capacity(seq.len());
    targets.extend_from_slice(&seq[1..]);
    targets.push(Vocab::EOS);
    Ok(CorruptedExample { mode: None, inputs: vec![seq[0]], targets, original_len: seq.len() })
}

/// Corrupt `seq` according to `spec`.
pub fn corrupt(
    seq: &[TokenId],
    spec: &DenoiserSpec,
    rng: &mut StdRng,
) -> Result<CorruptedExample, DenoiserError> {
    match spec.kind {
        DenoiserKind::Sequential => corrupt_sequential(seq, rng),
        DenoiserKind::Regular | DenoiserKind::Extreme => {
            let spans = sample_spans(seq.len(), spec.rate, spec.mean_span, rng)?;
            corrupt_spans(seq, &spans, spec.mode)
        }
    }
}

/// Invert a corruption: splice span contents back into the inputs (or, for
/// sequential/LM examples, concatenate prefix and continuation). Errors on
/// any sentinel mismatch between inputs and targets.
pub fn reconstruct(ex: &CorruptedExample) -> Result<Vec<TokenId>, DenoiserError> {
    let body: &[TokenId] = match ex.mode {
        Some(mode) => {
            if ex.inputs.first() != Some(&mode) {
                return Err(DenoiserError::Malformed("inputs do not start with the mode token".into()));
            }
            &ex.inputs[1..]
        }
        None => &ex.inputs,
    };
    if ex.targets.last() != Some(&Vocab::EOS) {
        return Err(DenoiserError::Malformed("targets do not end with <eos>".into()));
    }
    let target_body = &ex.targets[..ex.targets.len() - 1];

    let input_sentinels: Vec<TokenId> = body.iter().copied().filter(|&t| Vocab::is_sentinel(t)).collect();
    let result = if input_sentinels.is_empty() {
        if target_body.iter().any(|&t| Vocab::is_sentinel(t)) {
            return Err(DenoiserError::Malformed("targets contain sentinels but inputs have none".into()));
        }
        let mut out = body.to_vec();
        out.extend_from_slice(target_body);
        out
    } else {
        // Group targets as sentinel-led runs and match them against the
        // input sentinels in order.
        let mut groups: Vec<(TokenId, Vec<TokenId>)> = Vec::new();
        for &t in target_body {
            if Vocab::is_sentinel(t) {
                groups.push((t, Vec::new()));
            } else {
                match groups.last_mut() {
                    Some((_, run)) => run.push(t),
                    None => {
                        return Err(DenoiserError::Malformed(
                            "targets do not start with a sentinel".into(),
                        ))
                    }
                }
            }
        }
        let target_sentinels: Vec<TokenId> = groups.iter().map(|(s, _)| *s).collect();
        if target_sentinels != input_sentinels {
            return Err(DenoiserError::Malformed(format!(
                "sentinel mismatch: inputs {input_sentinels:?} vs targets {target_sentinels:?}"
            )));
        }
        let mut out = Vec::with_capacity(ex.original_len);
        let mut group = groups.iter();
        for &t in body {
            if Vocab::is_sentinel(t) {
                let (_, run) = group.next().expect("sentinel counts already matched");
                out.extend_from_slice(run);
            } else {
                out.push(t);
            }
        }
        out
    };
    if result.len() != ex.original_len {
        return Err(DenoiserError::Malformed(format!(
            "reconstructed length {} does not match recorded original length {}",
            result.len(),
            ex.original_len
        )));
    }
    Ok(result)
}
