//! Command-line front end: one executable exposing the whole pipeline —
//! corpus corruption, the two training phases, generation and infilling,
//! evaluation, scaling curves, and savings ratios.
//!
//! Conventions shared by every subcommand:
//! - configuration resolves in order: built-in defaults, then `--config`
//!   file, then repeated `--set key=value` overrides, then `--seed`;
//! - before any real work starts, a run manifest (`<out>.manifest`) is
//!   written recording the command, tool and format versions, input
//!   hashes, output paths, and the fully resolved configuration — the
//!   manifest doubles as a config file, so re-running a command with
//!   `--config <manifest>` reproduces a deterministic run exactly;
//!   subcommands that only print to stdout write a manifest exactly when
//!   `--out` asks them to produce a file;
//! - usage errors exit with code 2; validation and runtime failures print
//!   a single JSON line `{"error": ...}` to stderr and exit with code 1.

use crate::config::{Config, LoadedCorpus};
use crate::denoiser::{corrupt, sample_denoiser};
use crate::eval::{
    default_probes, parse_curve_csv, report_csv, run_suite, savings_rate, scaling_curve,
    synth_tasks, EvalSuite, Task,
};
use crate::inference::{greedy_generate, infill, Engine, InfillPrompt};
use crate::tokenizer::{TokenId, Vocab};
use crate::trainer::{
    derive_seed, metrics_csv, run_phase, Checkpoint, Phase, CHECKPOINT_VERSION, STREAM_CORRUPT,
    STREAM_MIX,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "ul2r", version, about = "Train, probe, and account for a mixture-of-denoisers continuation of a causal language model.")]
pub struct Cli {
    /// Base seed for every random draw (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file (flat `key = value`); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=50` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt a line-per-document corpus with the denoiser mixture and
    /// write one JSON example per line.
    Corrupt {
        /// Plain-text corpus, one document per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Config file supplying the mixture weights and denoiser shapes.
        #[arg(long)]
        mixture: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train fresh weights on plain next-token prediction.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint output path; metrics land at `<out>.metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue an existing checkpoint with the mixture-of-denoisers
    /// objective, carrying optimizer state and compute counters forward.
    Ul2r {
        /// Source checkpoint from the causal phase.
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a continuation of a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        /// One of: none, s2s, nlu, nlg.
        #[arg(long, default_value = "none")]
        mode: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        /// Also write the generated text here (stdout either way).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill `<extra_id_k>` blanks in a prompt and print the fills.
    Infill {
        #[arg(long)]
        ckpt: PathBuf,
        /// Text with blanks written as `<extra_id_0>`, `<extra_id_1>`, ...
        #[arg(long)]
        prompt: String,
        /// One of: none, s2s, nlu, nlg.
        #[arg(long, default_value = "nlu")]
        mode: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one checkpoint on a task suite and write a metric,value CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synth` (suite generated from the grammar corpus) or a path to
        /// a JSON task list.
        #[arg(long, default_value = "synth")]
        tasks: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a sequence of checkpoints into a quality-vs-compute CSV.
    Curve {
        /// Checkpoint as `LABEL=PATH` (repeatable; label defaults to the
        /// file stem when the `LABEL=` part is omitted).
        #[arg(long = "ckpt", value_name = "LABEL=PATH", required = false)]
        ckpts: Vec<String>,
        #[arg(long, default_value = "synth")]
        tasks: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ratio of baseline to treated compute at a matched quality level,
    /// interpolated on two scaling-curve CSVs.
    Savings {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        treated: PathBuf,
        #[arg(long)]
        quality: f64,
        /// Also write the ratio here (stdout either way).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved configuration (defaults when no file or
    /// overrides are given).
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// One-line machine-readable rendering of a failure, for stderr.
pub fn error_line(err: &anyhow::Error) -> String {
    serde_json::json!({ "error": format!("{err:#}") }).to_string()
}

fn parse_mode(mode: &str) -> Result<Option<TokenId>> {
    match mode {
        "none" => Ok(None),
        "s2s" => Ok(Some(Vocab::MODE_S2S)),
        "nlu" => Ok(Some(Vocab::MODE_NLU)),
        "nlg" => Ok(Some(Vocab::MODE_NLG)),
        other => bail!("unknown mode '{other}' (expected none, s2s, nlu, or nlg)"),
    }
}

fn resolve_config(
    seed: Option<u64>,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = file {
        cfg.apply_file(path)?;
    }
    for pair in overrides {
        let Some((key, value)) = pair.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{pair}'");
        };
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading input {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Render the run manifest: provenance keys first, then the resolved
/// config. The provenance keys use the `manifest.` prefix the config
/// parser ignores, so the manifest itself parses as a config file.
fn manifest_text(
    command: &str,
    cfg: &Config,
    inputs: &[(&str, String)],
    outputs: &[&Path],
) -> String {
    let mut s = String::from("# run manifest\n");
    let _ = writeln!(s, "manifest.command = {command}");
    let _ = writeln!(s, "manifest.version.bin = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "manifest.version.checkpoint = {CHECKPOINT_VERSION}");
    let _ = writeln!(s, "manifest.version.vocab = {}", Vocab::layout_hash());
    for (name, hash) in inputs {
        let _ = writeln!(s, "manifest.input.{name} = sha256:{hash}");
    }
    for path in outputs {
        let _ = writeln!(s, "manifest.output = {}", path.display());
    }
    s.push_str(&cfg.dump());
    s
}

fn manifest_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest", out.display()))
}

fn write_manifest(
    command: &str,
    cfg: &Config,
    inputs: &[(&str, String)],
    outputs: &[&Path],
    at: &Path,
) -> Result<()> {
    let text = manifest_text(command, cfg, inputs, outputs);
    std::fs::write(at, text).with_context(|| format!("writing manifest {}", at.display()))
}

/// Corpus-source input hash, when the corpus comes from a file.
fn corpus_input(cfg: &Config) -> Result<Option<(&'static str, String)>> {
    for prefix in ["grammar:", "file:"] {
        if let Some(path) = cfg.corpus_source.strip_prefix(prefix) {
            return Ok(Some(("corpus", hash_file(Path::new(path))?)));
        }
    }
    Ok(None)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_corrupt(seed: Option<u64>, corpus: &Path, mixture: Option<&Path>, out: &Path, set: &[String]) -> Result<()> {
    let cfg = resolve_config(seed, mixture, set)?;
    cfg.mixture.validate()?;
    let text = std::fs::read_to_string(corpus)
        .with_context(|| format!("reading corpus {}", corpus.display()))?;
    write_manifest(
        "corrupt",
        &cfg,
        &[("corpus", sha256_hex(text.as_bytes()))],
        &[out],
        &manifest_path(out),
    )?;
    let mut jsonl = String::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = Vocab::encode(line.as_bytes());
        if tokens.len() < 2 {
            eprintln!("warning: skipping line {} (shorter than 2 tokens)", i + 1);
            continue;
        }
        let mut mix_rng = StdRng::seed_from_u64(derive_seed(cfg.seed, i as u64, 0, STREAM_MIX));
        let spec = sample_denoiser(&cfg.mixture, &mut mix_rng)?;
        let mut rng = StdRng::seed_from_u64(derive_seed(cfg.seed, i as u64, 0, STREAM_CORRUPT));
        let example = corrupt(&tokens, &spec, &mut rng)?;
        jsonl.push_str(&serde_json::to_string(&example)?);
        jsonl.push('\n');
    }
    std::fs::write(out, jsonl).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn run_training(phase: Phase, cfg: &Config, source: Option<&Checkpoint>, out: &Path) -> Result<()> {
    let corpus = cfg.load_corpus()?;
    let metrics_path = PathBuf::from(format!("{}.metrics.csv", out.display()));
    let (ck, rows) = run_phase(&cfg.train_config(phase), corpus.train_docs(), source)?;
    ck.save(out).with_context(|| format!("writing checkpoint {}", out.display()))?;
    std::fs::write(&metrics_path, metrics_csv(&rows))
        .with_context(|| format!("writing metrics {}", metrics_path.display()))?;
    Ok(())
}

fn cmd_pretrain(seed: Option<u64>, args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve_config(seed, args.config.as_deref(), &args.set)?;
    let mut inputs = Vec::new();
    if let Some(input) = corpus_input(&cfg)? {
        inputs.push(input);
    }
    let metrics_path = PathBuf::from(format!("{}.metrics.csv", out.display()));
    write_manifest("pretrain", &cfg, &inputs, &[out, &metrics_path], &manifest_path(out))?;
    run_training(Phase::Causal, &cfg, None, out)
}

fn cmd_ul2r(seed: Option<u64>, from: &Path, args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve_config(seed, args.config.as_deref(), &args.set)?;
    let source = load_checkpoint(from)?;
    let mut inputs = vec![("checkpoint", hash_file(from)?)];
    if let Some(input) = corpus_input(&cfg)? {
        inputs.push(input);
    }
    let metrics_path = PathBuf::from(format!("{}.metrics.csv", out.display()));
    write_manifest("ul2r", &cfg, &inputs, &[out, &metrics_path], &manifest_path(out))?;
    run_training(Phase::Ul2r, &cfg, Some(&source), out)
}

fn emit_text(text: &str, out: Option<&Path>) -> Result<()> {
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, format!("{text}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_generate(
    seed: Option<u64>,
    ckpt: &Path,
    prompt: &str,
    mode: &str,
    max_tokens: usize,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(seed, None, &[])?;
    let mode = parse_mode(mode)?;
    let ck = load_checkpoint(ckpt)?;
    if let Some(path) = out {
        write_manifest(
            "generate",
            &cfg,
            &[("checkpoint", hash_file(ckpt)?)],
            &[path],
            &manifest_path(path),
        )?;
    }
    let engine = Engine::from_checkpoint(&ck)?;
    let tokens = greedy_generate(&engine, &Vocab::encode(prompt.as_bytes()), max_tokens, mode)?;
    emit_text(&Vocab::decode_lossy(&tokens), out)
}

fn cmd_infill(
    seed: Option<u64>,
    ckpt: &Path,
    prompt: &str,
    mode: &str,
    max_tokens: usize,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(seed, None, &[])?;
    let mode = parse_mode(mode)?;
    let ck = load_checkpoint(ckpt)?;
    if let Some(path) = out {
        write_manifest(
            "infill",
            &cfg,
            &[("checkpoint", hash_file(ckpt)?)],
            &[path],
            &manifest_path(path),
        )?;
    }
    let engine = Engine::from_checkpoint(&ck)?;
    let parsed = InfillPrompt::parse_text(prompt, mode)?;
    let result = infill(&engine, &parsed, max_tokens)?;
    let fills: Vec<String> = result.fills.iter().map(|f| Vocab::decode_lossy(f)).collect();
    emit_text(&serde_json::json!({ "fills": fills }).to_string(), out)
}

/// Build the evaluation suite from the resolved config: either the
/// generated grammar suite or a JSON task file, plus held-out loss probes
/// whenever the corpus reserves held-out documents.
fn build_suite(cfg: &Config, tasks: &str) -> Result<(EvalSuite, Vec<(&'static str, String)>)> {
    let corpus = cfg.load_corpus()?;
    let mut inputs = Vec::new();
    if let Some(input) = corpus_input(cfg)? {
        inputs.push(input);
    }
    let task_list: Vec<Task> = if tasks == "synth" {
        match &corpus {
            LoadedCorpus::Grammar(synth) => synth_tasks(synth)?,
            LoadedCorpus::File(_) => {
                bail!("--tasks synth needs a grammar corpus source; this config uses '{}'", cfg.corpus_source)
            }
        }
    } else {
        let text = std::fs::read_to_string(tasks)
            .with_context(|| format!("reading task file {tasks}"))?;
        inputs.push(("tasks", sha256_hex(text.as_bytes())));
        serde_json::from_str(&text).with_context(|| format!("parsing task file {tasks}"))?
    };
    let heldout = corpus.heldout_docs().to_vec();
    let probes = if heldout.is_empty() { Vec::new() } else { default_probes() };
    Ok((
        EvalSuite {
            tasks: task_list,
            probes,
            heldout_docs: heldout,
            seed: cfg.seed,
            len_inputs: cfg.len_inputs,
            len_targets: cfg.len_targets,
        },
        inputs,
    ))
}

fn cmd_eval(seed: Option<u64>, ckpt: &Path, tasks: &str, args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve_config(seed, args.config.as_deref(), &args.set)?;
    let ck = load_checkpoint(ckpt)?;
    let (suite, mut inputs) = build_suite(&cfg, tasks)?;
    inputs.push(("checkpoint", hash_file(ckpt)?));
    write_manifest("eval", &cfg, &inputs, &[out], &manifest_path(out))?;
    let engine = Engine::from_checkpoint(&ck)?;
    let report = run_suite(&engine, &suite)?;
    std::fs::write(out, report_csv(&report, ck.tokens, ck.flops))
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn parse_ckpt_arg(arg: &str) -> Result<(String, PathBuf)> {
    let (label, path) = match arg.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| arg.to_string());
            (stem, path)
        }
    };
    if label.contains(',') {
        bail!("checkpoint label '{label}' must not contain a comma");
    }
    Ok((label, path))
}

fn cmd_curve(seed: Option<u64>, ckpts: &[String], tasks: &str, args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve_config(seed, args.config.as_deref(), &args.set)?;
    let entries: Vec<(String, PathBuf)> =
        ckpts.iter().map(|arg| parse_ckpt_arg(arg)).collect::<Result<_>>()?;
    let (suite, inputs) = build_suite(&cfg, tasks)?;
    write_manifest("curve", &cfg, &inputs, &[out], &manifest_path(out))?;
    let (csv, warnings) = scaling_curve(&entries, &suite)?;
    for warning in warnings {
        eprintln!("warning: {warning}");
    }
    std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_savings(
    seed: Option<u64>,
    baseline: &Path,
    treated: &Path,
    quality: f64,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(seed, None, &[])?;
    let read = |path: &Path| -> Result<String> {
        std::fs::read_to_string(path).with_context(|| format!("reading curve {}", path.display()))
    };
    let baseline_text = read(baseline)?;
    let treated_text = read(treated)?;
    if let Some(path) = out {
        write_manifest(
            "savings",
            &cfg,
            &[
                ("baseline", sha256_hex(baseline_text.as_bytes())),
                ("treated", sha256_hex(treated_text.as_bytes())),
            ],
            &[path],
            &manifest_path(path),
        )?;
    }
    let rate = savings_rate(
        &parse_curve_csv(&baseline_text)?,
        &parse_curve_csv(&treated_text)?,
        quality,
    )?;
    emit_text(&format!("{rate:.2}"), out)
}

fn cmd_config(seed: Option<u64>, args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(seed, args.config.as_deref(), &args.set)?;
    let dump = cfg.dump();
    print!("{dump}");
    if let Some(path) = out {
        write_manifest("config", &cfg, &[], &[path], &manifest_path(path))?;
        std::fs::write(path, dump).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Dispatch a parsed command line. Errors bubble to `main`, which prints
/// them as a single JSON line and exits 1.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Corrupt { corpus, mixture, out, set } => {
            cmd_corrupt(cli.seed, corpus, mixture.as_deref(), out, set)
        }
        Command::Pretrain { cfg, out } => cmd_pretrain(cli.seed, cfg, out),
        Command::Ul2r { from, cfg, out } => cmd_ul2r(cli.seed, from, cfg, out),
        Command::Generate { ckpt, prompt, mode, max_tokens, out } => {
            cmd_generate(cli.seed, ckpt, prompt, mode, *max_tokens, out.as_deref())
        }
        Command::Infill { ckpt, prompt, mode, max_tokens, out } => {
            cmd_infill(cli.seed, ckpt, prompt, mode, *max_tokens, out.as_deref())
        }
        Command::Eval { ckpt, tasks, cfg, out } => cmd_eval(cli.seed, ckpt, tasks, cfg, out),
        Command::Curve { ckpts, tasks, cfg, out } => {
            cmd_curve(cli.seed, ckpts, tasks, cfg, out)
        }
        Command::Savings { baseline, treated, quality, out } => {
            cmd_savings(cli.seed, baseline, treated, *quality, out.as_deref())
        }
        Command::Config { cfg, out } => cmd_config(cli.seed, cfg, out.as_deref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_map_to_their_token_ids() {
        assert_eq!(parse_mode("none").unwrap(), None);
        assert_eq!(parse_mode("s2s").unwrap(), Some(Vocab::MODE_S2S));
        assert_eq!(parse_mode("nlu").unwrap(), Some(Vocab::MODE_NLU));
        assert_eq!(parse_mode("nlg").unwrap(), Some(Vocab::MODE_NLG));
        assert!(parse_mode("both").is_err());
    }

    #[test]
    fn checkpoint_args_accept_labels_or_derive_them_from_stems() {
        let (label, path) = parse_ckpt_arg("early=/tmp/a.ckpt").unwrap();
        assert_eq!(label, "early");
        assert_eq!(path, PathBuf::from("/tmp/a.ckpt"));
        let (label, path) = parse_ckpt_arg("/tmp/late.ckpt").unwrap();
        assert_eq!(label, "late");
        assert_eq!(path, PathBuf::from("/tmp/late.ckpt"));
        assert!(parse_ckpt_arg("a,b=/tmp/x.ckpt").is_err());
    }

    #[test]
    fn overrides_apply_after_the_config_file_and_seed_wins_last() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 3\ntrain.steps = 10\n").unwrap();
        let cfg = resolve_config(
            Some(9),
            Some(&path),
            &["train.steps=20".to_string(), "seed=5".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.seed, 9, "--seed outranks both file and --set");
        let bad = resolve_config(None, None, &["no-equals-here".to_string()]);
        assert!(bad.is_err());
    }

    #[test]
    fn manifests_parse_back_into_the_identical_config() {
        let mut cfg = Config::default();
        cfg.seed = 42;
        cfg.steps = 17;
        let text = manifest_text(
            "pretrain",
            &cfg,
            &[("corpus", "abc123".to_string())],
            &[Path::new("/tmp/out.ckpt")],
        );
        assert!(text.contains("manifest.command = pretrain"));
        assert!(text.contains("manifest.input.corpus = sha256:abc123"));
        assert!(text.contains("manifest.output = /tmp/out.ckpt"));
        let reparsed = Config::parse_str(&text).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn error_lines_are_single_line_json() {
        let err = anyhow::anyhow!("outer").context("inner context");
        let line = error_line(&err);
        let parsed: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(parsed["error"].as_str().unwrap().contains("inner context"));
        assert!(!line.contains('\n'));
    }
}
