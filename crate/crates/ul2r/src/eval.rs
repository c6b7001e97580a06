//! Evaluation and accounting: token/FLOP arithmetic, a synthetic task
//! suite scored by exact match and rank classification, held-out loss
//! probes per training objective, scaling-curve emission, and the
//! compute-savings ratio between two quality-vs-compute curves.
//!
//! Conventions: training compute is estimated by the standard
//! `6 * parameters * tokens` rule; curves interpolate quality against
//! log-compute piecewise-linearly and never extrapolate; the aggregate of
//! a task suite is the plain arithmetic mean of the per-task scores.
//! Held-out losses are reported alongside the scores but are never mixed
//! into the aggregate — a loss is not a score, and losses from different
//! objectives are not comparable with each other either.

use crate::corpus::SynthCorpus;
use crate::denoiser::{corrupt, lm_example, DenoiserError, DenoiserSpec};
use crate::inference::{infill, loglikelihood, Engine, InferenceError, InfillPrompt};
use crate::model::{forward_loss_f64, ModelConfig, ModelError};
use crate::packer::{pack_examples, prefix_lm_mask, PackError};
use crate::tokenizer::{TokenId, Vocab};
use crate::trainer::{derive_seed, Checkpoint};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::path::PathBuf;
use thiserror::Error;

/// Seed stream for probe corruption draws, outside the trainer's streams
/// so evaluation never replays training randomness.
const PROBE_STREAM: u64 = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error("token count overflows 64 bits: {0}")]
    Overflow(String),
    #[error("no tasks to evaluate")]
    EmptyTasks,
    #[error("task '{0}' has no items")]
    EmptyTask(String),
    #[error("invalid curve: {0}")]
    BadCurve(String),
    #[error("quality {q} outside the curve's range [{lo}, {hi}]; no extrapolation is performed")]
    QualityOutOfRange { q: f64, lo: f64, hi: f64 },
    #[error("no documents usable for loss probes")]
    NoProbeDocs,
}

// ---------------------------------------------------------------------------
// token and FLOP accounting

/// Exact token count of a training phase: `steps * batch * row length`.
pub fn count_tokens(steps: u64, batch: u64, row_len: u64) -> Result<u64, EvalError> {
    steps
        .checked_mul(batch)
        .and_then(|t| t.checked_mul(row_len))
        .ok_or_else(|| EvalError::Overflow(format!("{steps} * {batch} * {row_len}")))
}

/// Standard training-compute estimate for a dense transformer.
pub fn flops_for_params(n_params: u64, tokens: u64) -> f64 {
    6.0 * n_params as f64 * tokens as f64
}

pub fn flops(cfg: &ModelConfig, tokens: u64) -> f64 {
    flops_for_params(cfg.param_count(), tokens)
}

/// Ratio of two token counts, as a plain fraction.
pub fn token_ratio(extra: u64, base: u64) -> f64 {
    extra as f64 / base as f64
}

/// Render a fraction as a percentage with three decimals ("0.00168" →
/// "0.168%").
pub fn format_percent(fraction: f64) -> String {
    format!("{:.3}%", fraction * 100.0)
}

// ---------------------------------------------------------------------------
// savings rate

/// One evaluated checkpoint on a quality-vs-compute curve.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComputePoint {
    pub label: String,
    pub flops: f64,
    pub quality: f64,
    pub tokens: u64,
}

fn validate_curve(curve: &[ComputePoint]) -> Result<(), EvalError> {
    if curve.is_empty() {
        return Err(EvalError::BadCurve("empty curve".into()));
    }
    for p in curve {
        if !(p.flops.is_finite() && p.flops > 0.0) || !p.quality.is_finite() {
            return Err(EvalError::BadCurve(format!("bad point {:?}", p)));
        }
    }
    for w in curve.windows(2) {
        if w[1].flops <= w[0].flops {
            return Err(EvalError::BadCurve(format!(
                "flops not strictly increasing: {} then {}",
                w[0].flops, w[1].flops
            )));
        }
        if w[1].quality <= w[0].quality {
            return Err(EvalError::BadCurve(format!(
                "quality not strictly increasing: {} then {}",
                w[0].quality, w[1].quality
            )));
        }
    }
    Ok(())
}

/// Compute needed to reach quality `q` on a curve: exact at recorded
/// points, otherwise piecewise-linear in log-compute between the two
/// bracketing points. Queries outside the recorded range are errors.
fn flops_at_quality(curve: &[ComputePoint], q: f64) -> Result<f64, EvalError> {
    validate_curve(curve)?;
    if let Some(p) = curve.iter().find(|p| p.quality == q) {
        return Ok(p.flops);
    }
    let (lo, hi) = (curve[0].quality, curve[curve.len() - 1].quality);
    if q < lo || q > hi {
        return Err(EvalError::QualityOutOfRange { q, lo, hi });
    }
    for w in curve.windows(2) {
        if q > w[0].quality && q < w[1].quality {
            let t = (q - w[0].quality) / (w[1].quality - w[0].quality);
            let ln_f = w[0].flops.ln() + t * (w[1].flops.ln() - w[0].flops.ln());
            return Ok(ln_f.exp());
        }
    }
    unreachable!("range-checked quality must fall in some segment");
}

/// How many times more compute the baseline needs than the treated run to
/// reach quality `q`: `flops_baseline(q) / flops_treated(q)`.
pub fn savings_rate(
    baseline: &[ComputePoint],
    treated: &[ComputePoint],
    q: f64,
) -> Result<f64, EvalError> {
    Ok(flops_at_quality(baseline, q)? / flops_at_quality(treated, q)?)
}

// ---------------------------------------------------------------------------
// tasks

/// A blanked sentence with its exact expected fills.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InfillItem {
    /// Prompt text with blanks written as `<extra_id_k>`.
    pub prompt: String,
    /// Expected fill per blank, scored by exact match after decoding.
    pub answers: Vec<String>,
}

/// A prefix with candidate continuations; the model must rank the correct
/// one highest by log-likelihood.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RankItem {
    pub prefix: String,
    pub candidates: Vec<String>,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    Infill { name: String, mode: Option<TokenId>, items: Vec<InfillItem> },
    Rank { name: String, mode: Option<TokenId>, items: Vec<RankItem> },
}

impl Task {
    pub fn name(&self) -> &str {
        match self {
            Task::Infill { name, .. } | Task::Rank { name, .. } => name,
        }
    }
}

/// Mean of per-task scores. This is the whole aggregation rule: no
/// weighting, no normalization.
pub fn aggregate_scores(scores: &[f64]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyTasks);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<(String, f64)>,
    pub aggregate: f64,
}

fn score_infill_item(engine: &Engine, item: &InfillItem, mode: Option<TokenId>) -> Result<f64, EvalError> {
    let prompt = InfillPrompt::parse_text(&item.prompt, mode)?;
    let prompt_len = prompt.to_tokens()?.len() + mode.map_or(0, |_| 1);
    if prompt_len >= engine.cfg.max_len {
        return Err(EvalError::Inference(InferenceError::ContextOverflow {
            needed: prompt_len,
            max: engine.cfg.max_len,
        }));
    }
    let budget = (engine.cfg.max_len - prompt_len).min(24);
    match infill(engine, &prompt, budget) {
        Ok(result) => {
            if result.fills.len() != item.answers.len() {
                return Ok(0.0);
            }
            let all_match = result.fills.iter().zip(&item.answers).all(|(fill, want)| {
                Vocab::decode(fill).map(|bytes| bytes == want.as_bytes()).unwrap_or(false)
            });
            Ok(if all_match { 1.0 } else { 0.0 })
        }
        // A model that never produces sentinels (e.g. before any denoiser
        // training) simply scores zero; that outcome is a measurement, not
        // a failure of the harness.
        Err(InferenceError::MissingSentinel { .. }) => Ok(0.0),
        Err(e) => Err(e.into()),
    }
}

fn score_rank_item(engine: &Engine, item: &RankItem, mode: Option<TokenId>) -> Result<f64, EvalError> {
    let prefix = Vocab::encode(item.prefix.as_bytes());
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, cand) in item.candidates.iter().enumerate() {
        let score = loglikelihood(engine, &prefix, &Vocab::encode(cand.as_bytes()), mode)?;
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(if best == item.correct { 1.0 } else { 0.0 })
}

/// Score every task: infill tasks by whole-item exact match, rank tasks by
/// argmax-log-likelihood accuracy. The aggregate is the mean over tasks.
pub fn evaluate(engine: &Engine, tasks: &[Task]) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyTasks);
    }
    let mut scores = Vec::with_capacity(tasks.len());
    for task in tasks {
        let score = match task {
            Task::Infill { name, mode, items } => {
                if items.is_empty() {
                    return Err(EvalError::EmptyTask(name.clone()));
                }
                let mut total = 0.0;
                for item in items {
                    total += score_infill_item(engine, item, *mode)?;
                }
                total / items.len() as f64
            }
            Task::Rank { name, mode, items } => {
                if items.is_empty() {
                    return Err(EvalError::EmptyTask(name.clone()));
                }
                let mut total = 0.0;
                for item in items {
                    total += score_rank_item(engine, item, *mode)?;
                }
                total / items.len() as f64
            }
        };
        scores.push((task.name().to_string(), score));
    }
    let aggregate = aggregate_scores(&scores.iter().map(|(_, s)| *s).collect::<Vec<_>>())?;
    Ok(EvalReport { scores, aggregate })
}

// ---------------------------------------------------------------------------
// held-out loss probes and teacher-forced accuracy

/// A training objective to probe held-out loss under.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    CausalLm,
    Denoise(DenoiserSpec),
}

/// Held-out documents rendered as training examples under one objective,
/// packed, and scored in a single forward pass. Corruption draws are
/// seeded per document, so the probe is a pure function of
/// `(params, docs, objective, seed)`.
pub fn objective_loss(
    engine: &Engine,
    docs: &[Vec<TokenId>],
    objective: &Objective,
    seed: u64,
    len_inputs: usize,
    len_targets: usize,
) -> Result<f64, EvalError> {
    let mut examples = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        if doc.len() < 2 {
            continue;
        }
        let ex = match objective {
            Objective::CausalLm => lm_example(doc)?,
            Objective::Denoise(spec) => {
                let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0, i as u64, PROBE_STREAM));
                corrupt(doc, spec, &mut rng)?
            }
        };
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(EvalError::NoProbeDocs);
    }
    let batch = pack_examples(&examples, len_inputs, len_targets)?;
    let mask = prefix_lm_mask(&batch);
    Ok(forward_loss_f64(engine.params(), &engine.cfg, &batch, &mask)?.mean_loss)
}

/// Teacher-forced next-token accuracy over plain language-model rows:
/// the fraction of target positions whose argmax prediction matches.
pub fn next_token_accuracy(
    engine: &Engine,
    docs: &[Vec<TokenId>],
    len_inputs: usize,
    len_targets: usize,
) -> Result<f64, EvalError> {
    let examples: Vec<_> = docs
        .iter()
        .filter(|d| d.len() >= 2)
        .map(|d| lm_example(d))
        .collect::<Result<_, _>>()?;
    if examples.is_empty() {
        return Err(EvalError::NoProbeDocs);
    }
    let batch = pack_examples(&examples, len_inputs, len_targets)?;
    let mask = prefix_lm_mask(&batch);
    let out = forward_loss_f64(engine.params(), &engine.cfg, &batch, &mask)?;
    let mut hits = 0usize;
    for sp in &out.scored {
        let mut best = 0usize;
        for (id, &lp) in sp.logprobs.iter().enumerate() {
            if lp > sp.logprobs[best] {
                best = id;
            }
        }
        if best as TokenId == sp.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / out.scored.len() as f64)
}

/// The standard probe set: plain language modeling plus each denoiser.
pub fn default_probes() -> Vec<(String, Objective)> {
    vec![
        ("loss_causal".to_string(), Objective::CausalLm),
        ("loss_r".to_string(), Objective::Denoise(DenoiserSpec::regular())),
        ("loss_x_long".to_string(), Objective::Denoise(DenoiserSpec::extreme_long())),
        ("loss_x_high".to_string(), Objective::Denoise(DenoiserSpec::extreme_high_rate())),
        ("loss_s".to_string(), Objective::Denoise(DenoiserSpec::sequential())),
    ]
}

// ---------------------------------------------------------------------------
// synthetic task construction

/// Byte ranges of the whitespace-delimited words of `text`.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b' ' {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i] != b' ' {
            i += 1;
        }
        spans.push((start, i));
    }
    spans
}

/// Words of a rendered document that make unambiguous blanks: literal
/// (non-slot) words of at least three bytes. Slot values are excluded
/// because a held-out combination's slot cannot be inferred from context —
/// the frame words can.
fn maskable_words(doc: &crate::corpus::RenderedDoc) -> Vec<(usize, usize)> {
    word_spans(&doc.text)
        .into_iter()
        .filter(|&(s, e)| {
            let w = &doc.text[s..e];
            w.len() >= 3 && !doc.slots.iter().any(|(_, v)| v == w)
        })
        .collect()
}

/// Build the synthetic suite from a grammar corpus's held-out documents:
/// one infill task (every maskable word of every held-out document becomes
/// a single-blank item) and one rank-classification task (the same words,
/// ranked against other frame words of the same document, with the correct
/// candidate's position rotating so ties cannot favor it).
pub fn synth_tasks(synth: &SynthCorpus) -> Result<Vec<Task>, EvalError> {
    let mut infill_items = Vec::new();
    let mut rank_items = Vec::new();
    for doc in &synth.heldout {
        let words = maskable_words(doc);
        for (wi, &(start, end)) in words.iter().enumerate() {
            let word = doc.text[start..end].to_string();
            infill_items.push(InfillItem {
                prompt: format!("{}<extra_id_0>{}", &doc.text[..start], &doc.text[end..]),
                answers: vec![word.clone()],
            });
            if start == 0 {
                continue; // rank items need a nonempty prefix
            }
            let distractors: Vec<String> = words
                .iter()
                .enumerate()
                .filter(|&(wj, _)| wj != wi)
                .take(3)
                .map(|(_, &(s, e))| doc.text[s..e].to_string())
                .collect();
            if distractors.is_empty() {
                continue;
            }
            let mut candidates = vec![word];
            candidates.extend(distractors);
            // Rotate so the correct answer's index varies across items.
            let correct = rank_items.len() % candidates.len();
            candidates.rotate_right(correct);
            rank_items.push(RankItem {
                prefix: doc.text[..start].to_string(),
                candidates,
                correct,
            });
        }
    }
    if infill_items.is_empty() || rank_items.is_empty() {
        return Err(EvalError::EmptyTask("synthetic suite (no held-out documents)".into()));
    }
    Ok(vec![
        Task::Infill { name: "infill_em".into(), mode: Some(Vocab::MODE_NLU), items: infill_items },
        Task::Rank { name: "rank_acc".into(), mode: None, items: rank_items },
    ])
}

// ---------------------------------------------------------------------------
// scaling curve

/// Everything needed to score one checkpoint consistently across a curve.
pub struct EvalSuite {
    pub tasks: Vec<Task>,
    pub probes: Vec<(String, Objective)>,
    pub heldout_docs: Vec<Vec<TokenId>>,
    pub seed: u64,
    pub len_inputs: usize,
    pub len_targets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub scores: Vec<(String, f64)>,
    pub aggregate: f64,
    pub losses: Vec<(String, f64)>,
}

/// Score one checkpoint under the full suite.
pub fn run_suite(engine: &Engine, suite: &EvalSuite) -> Result<SuiteReport, EvalError> {
    let report = evaluate(engine, &suite.tasks)?;
    let mut losses = Vec::with_capacity(suite.probes.len());
    for (name, objective) in &suite.probes {
        let loss = objective_loss(
            engine,
            &suite.heldout_docs,
            objective,
            suite.seed,
            suite.len_inputs,
            suite.len_targets,
        )?;
        losses.push((name.clone(), loss));
    }
    Ok(SuiteReport { scores: report.scores, aggregate: report.aggregate, losses })
}

/// Per-checkpoint report as a small CSV (`metric,value` rows), leading
/// with the training cost recorded in the checkpoint so every report
/// carries its own compute provenance.
pub fn report_csv(report: &SuiteReport, tokens: u64, flops: f64) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("tokens,{tokens}\n"));
    out.push_str(&format!("flops,{flops}\n"));
    for (name, score) in &report.scores {
        out.push_str(&format!("{name},{score}\n"));
    }
    out.push_str(&format!("aggregate,{}\n", report.aggregate));
    for (name, loss) in &report.losses {
        out.push_str(&format!("{name},{loss}\n"));
    }
    out
}

pub fn curve_csv_header(suite: &EvalSuite) -> String {
    let mut cols = vec!["label".to_string(), "tokens".to_string(), "flops".to_string()];
    cols.extend(suite.tasks.iter().map(|t| t.name().to_string()));
    cols.push("aggregate".to_string());
    cols.extend(suite.probes.iter().map(|(n, _)| n.clone()));
    cols.join(",")
}

/// Evaluate a sequence of checkpoints into scaling-curve CSV rows. A
/// checkpoint that cannot be loaded is skipped with a warning rather than
/// aborting the whole curve. Token and FLOP columns come from checkpoint
/// headers, so continuation-phase points carry their full lineage cost.
pub fn scaling_curve(
    entries: &[(String, PathBuf)],
    suite: &EvalSuite,
) -> Result<(String, Vec<String>), EvalError> {
    let mut csv = curve_csv_header(suite);
    csv.push('\n');
    let mut warnings = Vec::new();
    for (label, path) in entries {
        let ck = match Checkpoint::load(path) {
            Ok(ck) => ck,
            Err(e) => {
                warnings.push(format!("skipping {label} ({}): {e}", path.display()));
                continue;
            }
        };
        let engine = Engine::from_checkpoint(&ck)?;
        let report = run_suite(&engine, suite)?;
        let mut row = vec![label.clone(), ck.tokens.to_string(), ck.flops.to_string()];
        row.extend(report.scores.iter().map(|(_, s)| s.to_string()));
        row.push(report.aggregate.to_string());
        row.extend(report.losses.iter().map(|(_, l)| l.to_string()));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    Ok((csv, warnings))
}

/// Read compute points back out of a scaling-curve CSV: the `label`,
/// `tokens`, `flops`, and `aggregate` columns are required by name, any
/// other columns are carried by the file but ignored here.
pub fn parse_curve_csv(text: &str) -> Result<Vec<ComputePoint>, EvalError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EvalError::BadCurve("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let col = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| EvalError::BadCurve(format!("CSV is missing a '{name}' column")))
    };
    let (li, ti, fi, qi) = (col("label")?, col("tokens")?, col("flops")?, col("aggregate")?);
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(EvalError::BadCurve(format!(
                "row {} has {} fields but the header has {}",
                n + 2,
                fields.len(),
                cols.len()
            )));
        }
        let num = |idx: usize, what: &str| -> Result<f64, EvalError> {
            fields[idx].parse().map_err(|e| {
                EvalError::BadCurve(format!("row {}: bad {what} {:?}: {e}", n + 2, fields[idx]))
            })
        };
        points.push(ComputePoint {
            label: fields[li].to_string(),
            tokens: fields[ti].parse().map_err(|e| {
                EvalError::BadCurve(format!("row {}: bad tokens {:?}: {e}", n + 2, fields[ti]))
            })?,
            flops: num(fi, "flops")?,
            quality: num(qi, "aggregate")?,
        });
    }
    Ok(points)
}
