//! Training-data ingestion and a deterministic synthetic corpus.
//!
//! Two sources are supported: plain text files (one document per line,
//! split into train/held-out by per-line content hashing) and a small
//! template grammar whose rendered sentences come with their slot
//! assignments recorded. The grammar is the interesting one: because every
//! document is a template instance, a blanked word has exactly one correct
//! fill, so downstream infilling can be scored by exact match instead of
//! judgment.
//!
//! Both sources are pure functions of `(spec, seed)`: re-reading a corpus
//! for a later training phase yields token-identical documents.

use crate::tokenizer::{TokenId, Vocab};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus file {0} is empty")]
    EmptyFile(String),
    #[error("held-out fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("invalid grammar: {0}")]
    BadGrammar(String),
    #[error("grammar leaves no training documents")]
    EmptyTrainPool,
}

/// A tokenized document collection with a train/held-out split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Vec<TokenId>>,
    pub heldout: Vec<Vec<TokenId>>,
    /// Human-readable provenance ("file:<path>" or "grammar:<n> docs").
    pub source: String,
    pub seed: u64,
}

/// Map a document to [0, 1) by hashing it together with the seed. Used for
/// content-based splits: the same line always lands on the same side.
fn hash_unit(seed: u64, text: &[u8]) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text);
    let digest = hasher.finalize();
    let mut hi = [0u8; 8];
    hi.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(hi) as f64 / (u64::MAX as f64 + 1.0)
}

/// Load a line-per-document UTF-8 text file. Each line is assigned to the
/// held-out side when its content hash falls below `heldout_fraction`.
/// Zero-length lines are retained as empty documents; downstream samplers
/// ignore documents shorter than two tokens.
pub fn load_text(path: &Path, heldout_fraction: f64, seed: u64) -> Result<Corpus, CorpusError> {
    if !(0.0..=1.0).contains(&heldout_fraction) {
        return Err(CorpusError::BadFraction(heldout_fraction));
    }
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: display.clone(), source })?;
    if text.is_empty() {
        return Err(CorpusError::EmptyFile(display));
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for line in text.lines() {
        let tokens = Vocab::encode(line.as_bytes());
        if hash_unit(seed, line.as_bytes()) < heldout_fraction {
            heldout.push(tokens);
        } else {
            train.push(tokens);
        }
    }
    Ok(Corpus { train, heldout, source: format!("file:{display}"), seed })
}

// ---------------------------------------------------------------------------
// template grammar

/// A finite template grammar: sentence frames with `{slot}` placeholders
/// and a list of filler values per slot.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GrammarSpec {
    pub templates: Vec<String>,
    pub fillers: BTreeMap<String, Vec<String>>,
    /// Fraction of rendered combinations reserved for evaluation.
    pub heldout_fraction: f64,
}

/// One rendered sentence plus the assignment that produced it.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RenderedDoc {
    pub text: String,
    /// Index into [`GrammarSpec::templates`].
    pub template: usize,
    /// Slot name → chosen filler, in slot appearance order.
    pub slots: Vec<(String, String)>,
}

/// A grammar corpus: rendered documents with their assignments, plus the
/// tokenized [`Corpus`] view the trainer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: GrammarSpec,
    pub train: Vec<RenderedDoc>,
    pub heldout: Vec<RenderedDoc>,
    pub corpus: Corpus,
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn template_pieces(template: &str) -> Result<Vec<Piece<'_>>, CorpusError> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Literal(&rest[..open]));
        }
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| CorpusError::BadGrammar(format!("unclosed '{{' in: {template}")))?;
        let name = &after[..close];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            return Err(CorpusError::BadGrammar(format!("bad slot name '{{{name}}}'")));
        }
        pieces.push(Piece::Slot(name));
        rest = &after[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest));
    }
    Ok(pieces)
}

impl GrammarSpec {
    /// Built-in grammar used by the desk-scale experiments: one frame, two
    /// slots whose fillers all start with distinct letters, so next-token
    /// prediction on a learned frame is near-deterministic everywhere
    /// except the slot openings.
    pub fn desk_default() -> Self {
        let mut fillers = BTreeMap::new();
        fillers.insert(
            "name".to_string(),
            ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "henry"]
                .map(String::from)
                .to_vec(),
        );
        fillers.insert(
            "color".to_string(),
            ["red", "green", "blue", "white", "pink"].map(String::from).to_vec(),
        );
        Self {
            templates: vec!["{name} likes to drink {color} tea every morning".to_string()],
            fillers,
            heldout_fraction: 0.2,
        }
    }

    /// Parse the flat declarative form:
    ///
    /// ```text
    /// template = {name} likes {color} things
    /// filler.name = alice, bob
    /// filler.color = red, blue
    /// heldout_fraction = 0.2
    /// ```
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut spec =
            Self { templates: Vec::new(), fillers: BTreeMap::new(), heldout_fraction: 0.0 };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CorpusError::BadGrammar(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "template" {
                spec.templates.push(value.to_string());
            } else if let Some(slot) = key.strip_prefix("filler.") {
                let values: Vec<String> =
                    value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
                spec.fillers.insert(slot.to_string(), values);
            } else if key == "heldout_fraction" {
                spec.heldout_fraction = value.parse().map_err(|_| {
                    CorpusError::BadGrammar(format!("line {}: bad fraction '{value}'", lineno + 1))
                })?;
            } else {
                return Err(CorpusError::BadGrammar(format!(
                    "line {}: unknown key '{key}'",
                    lineno + 1
                )));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.templates.is_empty() {
            return Err(CorpusError::BadGrammar("no templates".into()));
        }
        if !(0.0..=1.0).contains(&self.heldout_fraction) {
            return Err(CorpusError::BadFraction(self.heldout_fraction));
        }
        for template in &self.templates {
            for piece in template_pieces(template)? {
                if let Piece::Slot(name) = piece {
                    match self.fillers.get(name) {
                        None => {
                            return Err(CorpusError::BadGrammar(format!(
                                "template references unknown slot '{{{name}}}'"
                            )))
                        }
                        Some(values) if values.is_empty() => {
                            return Err(CorpusError::BadGrammar(format!(
                                "slot '{name}' has no filler values"
                            )))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Render every template × filler combination once, in a fixed
    /// deterministic order (template index, then row-major over slots in
    /// appearance order).
    pub fn render_all(&self) -> Result<Vec<RenderedDoc>, CorpusError> {
        self.validate()?;
        let mut docs = Vec::new();
        for (ti, template) in self.templates.iter().enumerate() {
            let pieces = template_pieces(template)?;
            let mut slot_names: Vec<&str> = Vec::new();
            for piece in &pieces {
                if let Piece::Slot(name) = piece {
                    if !slot_names.contains(name) {
                        slot_names.push(name);
                    }
                }
            }
            let combos: usize = slot_names.iter().map(|n| self.fillers[*n].len()).product();
            for c in 0..combos.max(1) {
                // Row-major odometer: earlier slots vary slowest.
                let mut rem = c;
                let mut choice: BTreeMap<&str, &str> = BTreeMap::new();
                for name in slot_names.iter().rev() {
                    let values = &self.fillers[*name];
                    choice.insert(name, &values[rem % values.len()]);
                    rem /= values.len();
                }
                let mut text = String::new();
                for piece in &pieces {
                    match piece {
                        Piece::Literal(s) => text.push_str(s),
                        Piece::Slot(name) => text.push_str(choice[name]),
                    }
                }
                let slots =
                    slot_names.iter().map(|n| (n.to_string(), choice[*n].to_string())).collect();
                docs.push(RenderedDoc { text, template: ti, slots });
            }
        }
        Ok(docs)
    }
}

/// Generate a grammar corpus: all combinations are rendered, the
/// `heldout_fraction` with the smallest content hashes become the held-out
/// pool, and `n_docs` training documents are drawn by repeatedly emitting
/// full shuffles of the train pool — so combination counts stay within one
/// of each other, and `n_docs` equal to the pool size covers every
/// combination exactly once.
pub fn synth_corpus(spec: &GrammarSpec, n_docs: usize, seed: u64) -> Result<SynthCorpus, CorpusError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut all = spec.render_all()?;
    // Content-hash ranking makes the split a property of the documents, not
    // of their enumeration order; ties cannot occur since texts differ.
    all.sort_by(|a, b| {
        hash_unit(seed, a.text.as_bytes())
            .partial_cmp(&hash_unit(seed, b.text.as_bytes()))
            .unwrap()
            .then_with(|| a.text.cmp(&b.text))
    });
    let n_heldout = (spec.heldout_fraction * all.len() as f64).floor() as usize;
    let heldout: Vec<RenderedDoc> = all[..n_heldout].to_vec();
    let pool: Vec<RenderedDoc> = all[n_heldout..].to_vec();
    if pool.is_empty() {
        return Err(CorpusError::EmptyTrainPool);
    }

    let mut train = Vec::with_capacity(n_docs);
    let mut cycle = 0u64;
    while train.len() < n_docs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = rand::rngs::StdRng::seed_from_u64(
            seed ^ 0xC0FF_EE00_u64.wrapping_add(cycle.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut rng);
        for idx in order {
            if train.len() == n_docs {
                break;
            }
            train.push(pool[idx].clone());
        }
        cycle += 1;
    }

    let corpus = Corpus {
        train: train.iter().map(|doc| Vocab::encode(doc.text.as_bytes())).collect(),
        heldout: heldout.iter().map(|doc| Vocab::encode(doc.text.as_bytes())).collect(),
        source: format!("grammar:{n_docs} docs, {} combos held out", heldout.len()),
        seed,
    };
    Ok(SynthCorpus { spec: spec.clone(), train, heldout, corpus })
}
