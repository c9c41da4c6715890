//! `mwnmt`: batch driver for multi-way NMT experiments.
//!
//! Every command prints a JSON summary on stdout. Exit codes: 0 success,
//! 1 runtime or data error, 2 configuration error.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mwnmt::checkpoint;
use mwnmt::config::{parse_pair, RunConfig};
use mwnmt::data::{gen_parallel_corpus, read_lines, write_lines, EncodedPairs, ParallelCorpus};
use mwnmt::gradcheck::{model_grad_check, GradCheckSpec};
use mwnmt::metrics::score_corpus;
use mwnmt::strategies::{translate_batch, translate_pivot_batch, PivotSecondStage, StrategyKind};
use mwnmt::training::{train, DevSet, TrainPair};
use mwnmt::zero_resource::{
    clone_attention, finetune_attention, generate_pseudo_corpus, provenance_path, write_pseudo_corpus, PseudoRequest,
};
use mwnmt::{MultiWayModel, SHARED_ATTENTION};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<mwnmt::Error> for CliError {
    fn from(e: mwnmt::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mwnmt", version, about = "Multi-way multilingual NMT with zero-resource finetuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/test corpora for the configured synthetic languages.
    GenData(GenDataArgs),
    /// Train a multi-way model on the listed directions.
    Train(TrainArgs),
    /// Translate a file line by line.
    Translate(TranslateArgs),
    /// Back-translate the pivot side of a target-pivot corpus.
    GenPseudo(GenPseudoArgs),
    /// Finetune a pair-specific copy of the shared attention, all else frozen.
    Finetune(FinetuneArgs),
    /// Score a strategy on a test set.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients of a tiny model.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `train.max_updates=400`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::from_toml_str(&text)?
            }
            None => RunConfig::default(),
        };
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        Ok(base.with_overrides(&sets)?)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    data_dir: PathBuf,
    /// Comma-separated directions, e.g. `S-E,E-S,F-E,E-F`; defaults to the config.
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// JSONL training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// one | early | late | early-late
    #[arg(long, default_value = "one")]
    strategy: String,
    /// Decode through this pivot language.
    #[arg(long)]
    pivot: Option<String>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Comma-separated source languages.
    #[arg(long)]
    src_langs: String,
    #[arg(long)]
    tgt_lang: String,
    /// One file per source language, in `--src-langs` order.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Defaults to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenPseudoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Path prefix of the target-pivot corpus, e.g. `data/train`.
    #[arg(long)]
    pivot_corpus: PathBuf,
    #[arg(long, default_value = "F")]
    source: String,
    #[arg(long, default_value = "E")]
    pivot: String,
    #[arg(long, default_value = "S")]
    target: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output path prefix; writes `<out>.<source>`, `<out>.<target>`, `<out>.provenance`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "F-S")]
    pair: String,
    /// Path prefix of the (pseudo-)parallel corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Path prefix of a dev corpus used for early stopping.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// `SRC-TGT`, or `SRC1,SRC2-TGT` for many-to-one.
    #[arg(long)]
    pair: String,
    /// Path prefix of the test corpus, e.g. `data/test`.
    #[arg(long)]
    test_set: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// TOML file with grad-check settings (vocab, hidden_dim, length, batch, init_scale, epsilon, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn split_prefix(prefix: &Path) -> CliResult<(PathBuf, String)> {
    let stem = prefix
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Config(format!("bad path prefix {}", prefix.display())))?;
    let dir = prefix.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, stem.to_string()))
}

fn read_corpus(prefix: &Path, langs: &[&str]) -> CliResult<ParallelCorpus> {
    let (dir, stem) = split_prefix(prefix)?;
    Ok(ParallelCorpus::read(&dir, &stem, langs)?)
}

fn encode(model: &MultiWayModel, corpus: &ParallelCorpus, src: &str, tgt: &str) -> CliResult<EncodedPairs> {
    let sv = model.source_vocab(src)?;
    let tv = model.target_vocab(tgt)?;
    Ok(EncodedPairs::encode(corpus, src, tgt, sv, tv)?)
}

fn dev_set(model: &MultiWayModel, corpus: &ParallelCorpus, src: &str, tgt: &str) -> CliResult<DevSet> {
    let e = encode(model, corpus, src, tgt)?;
    Ok(DevSet {
        source: src.to_string(),
        target: tgt.to_string(),
        sources: e.source,
        references: e.target,
    })
}

fn log_writer(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let f = fs::File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn eval_json(model: &MultiWayModel, devs: &[DevSet]) -> CliResult<Vec<Value>> {
    devs.iter()
        .map(|d| {
            let r = d.evaluate(model)?;
            Ok(json!({"pair": d.label(), "bleu": r.bleu, "ter_approx": r.ter_approx, "tb": r.tb, "exact_match": r.exact_match}))
        })
        .collect()
}

fn gen_data(a: GenDataArgs) -> CliResult<Value> {
    let cfg = a.run.load()?;
    let d = &cfg.data;
    let mut files = Vec::new();
    for (k, (stem, n)) in [("train", d.train_size), ("dev", d.dev_size), ("test", d.test_size)]
        .into_iter()
        .enumerate()
    {
        let seed = cfg.seed.wrapping_mul(3).wrapping_add(k as u64);
        let corpus = gen_parallel_corpus(&cfg.languages, n, d.min_len..=d.max_len, seed)?;
        corpus.write(&a.out_dir, stem)?;
        for l in corpus.languages() {
            files.push(ParallelCorpus::file_path(&a.out_dir, stem, l).display().to_string());
        }
    }
    let snapshot = a.out_dir.join("config.toml");
    fs::write(&snapshot, cfg.to_toml_string()).map_err(|e| CliError::Runtime(format!("{}: {e}", snapshot.display())))?;
    Ok(json!({
        "seed": cfg.seed,
        "languages": cfg.languages.iter().map(|l| l.name.clone()).collect::<Vec<_>>(),
        "sizes": {"train": d.train_size, "dev": d.dev_size, "test": d.test_size},
        "files": files,
        "config": snapshot.display().to_string(),
    }))
}

fn run_train(a: TrainArgs) -> CliResult<Value> {
    let mut sets = a.run.sets.clone();
    if let Some(p) = &a.pairs {
        let list: Vec<String> = p.split(',').map(|s| format!("\"{}\"", s.trim())).collect();
        sets.push(format!("pairs=[{}]", list.join(",")));
    }
    let cfg = RunArgs {
        config: a.run.config.clone(),
        sets,
        seed: a.run.seed,
    }
    .load()?;
    let pairs = cfg.pair_list()?;
    if pairs.is_empty() {
        return Err(CliError::Config("no training pairs given".into()));
    }
    let langs: BTreeSet<&str> = pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]).collect();
    let langs: Vec<&str> = langs.into_iter().collect();
    let train_c = ParallelCorpus::read(&a.data_dir, "train", &langs)?;
    let dev_c = ParallelCorpus::read(&a.data_dir, "dev", &langs)?;

    let mut model = MultiWayModel::new(cfg.model_config())?;
    let mut tps = Vec::new();
    let mut devs = Vec::new();
    for (s, t) in &pairs {
        tps.push(TrainPair {
            source: s.clone(),
            target: t.clone(),
            pairs: encode(&model, &train_c, s, t)?,
        });
        devs.push(dev_set(&model, &dev_c, s, t)?);
    }
    let log_path = a.log.clone().unwrap_or_else(|| default_log(&a.out));
    let mut log = log_writer(&log_path)?;
    let report = train(&mut model, &tps, &devs, &cfg.train_config(), Some(&mut log))?;
    log.flush().map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    checkpoint::save(&model, Some(&report.optimizer), &a.out)?;
    Ok(json!({
        "checkpoint": a.out.display().to_string(),
        "checkpoint_id": model.checkpoint_id(),
        "log": log_path.display().to_string(),
        "pairs": cfg.pairs,
        "parameters": model.param_count(),
        "updates": report.updates,
        "best_update": report.best_update,
        "best_mean_tb": report.best_mean_tb,
        "stopped_early": report.stopped_early,
        "dev": eval_json(&model, &devs)?,
    }))
}

/// Decode every line; lines with an empty source come back empty.
fn decode_all(
    model: &MultiWayModel,
    d: &DecodeArgs,
    sources: &[(String, Vec<Vec<usize>>)],
    target: &str,
) -> CliResult<Vec<Vec<usize>>> {
    let strategy: StrategyKind = d.strategy.parse()?;
    if d.beam == 0 {
        return Err(CliError::Config("--beam must be >= 1".into()));
    }
    let n = sources[0].1.len();
    if let Some((l, _)) = sources.iter().find(|(_, s)| s.len() != n) {
        return Err(CliError::Runtime(format!("input for {l} has a different line count")));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| sources.iter().all(|(_, s)| !s[i].is_empty())).collect();
    let picked: Vec<(&str, Vec<Vec<usize>>)> = sources
        .iter()
        .map(|(l, s)| (l.as_str(), keep.iter().map(|&i| s[i].clone()).collect()))
        .collect();
    let outs = if keep.is_empty() {
        Vec::new()
    } else if let Some(pivot) = &d.pivot {
        if picked.len() != 1 {
            return Err(CliError::Config("pivot translation takes exactly one source language".into()));
        }
        let second = match strategy {
            StrategyKind::OneToOne => PivotSecondStage::OneToOne,
            s => PivotSecondStage::ManyToOne(s),
        };
        translate_pivot_batch(model, picked[0].0, pivot, target, &picked[0].1, second, d.beam)?
    } else {
        let refs: Vec<(&str, &[Vec<usize>])> = picked.iter().map(|(l, s)| (*l, s.as_slice())).collect();
        translate_batch(model, strategy, &refs, target, d.beam)?
    };
    let mut result = vec![Vec::new(); n];
    for (&i, t) in keep.iter().zip(outs) {
        result[i] = t.tokens;
    }
    Ok(result)
}

fn langs_of(list: &str) -> Vec<String> {
    list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn run_translate(a: TranslateArgs) -> CliResult<Option<Value>> {
    let srcs = langs_of(&a.src_langs);
    if srcs.is_empty() || srcs.len() != a.input.len() {
        return Err(CliError::Config("give one --input per language in --src-langs".into()));
    }
    let model = checkpoint::load_model(&a.decode.checkpoint)?;
    let mut sources = Vec::new();
    for (lang, path) in srcs.iter().zip(&a.input) {
        let vocab = model.source_vocab(lang)?;
        let lines = read_lines(path)?;
        sources.push((lang.clone(), lines.iter().map(|l| vocab.encode(l)).collect()));
    }
    let outs = decode_all(&model, &a.decode, &sources, &a.tgt_lang)?;
    let tv = model.target_vocab(&a.tgt_lang)?;
    let lines: Vec<Vec<String>> = outs.iter().map(|o| tv.decode(o)).collect();
    match &a.output {
        Some(p) => {
            write_lines(p, &lines)?;
            Ok(Some(json!({"output": p.display().to_string(), "lines": lines.len()})))
        }
        None => {
            let mut out = io::stdout().lock();
            for l in &lines {
                writeln!(out, "{}", l.join(" ")).map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            Ok(None)
        }
    }
}

fn run_gen_pseudo(a: GenPseudoArgs) -> CliResult<Value> {
    let model = checkpoint::load_model(&a.checkpoint)?;
    let corpus = read_corpus(&a.pivot_corpus, &[&a.target, &a.pivot])?;
    let corpus_id = a.pivot_corpus.display().to_string();
    let pairs = generate_pseudo_corpus(
        &model,
        &PseudoRequest {
            corpus: &corpus,
            corpus_id: &corpus_id,
            source: &a.source,
            pivot: &a.pivot,
            target: &a.target,
            n: a.n,
            seed: a.seed,
        },
    )?;
    let (dir, stem) = split_prefix(&a.out)?;
    write_pseudo_corpus(&pairs, &dir, &stem, &a.source, &a.target)?;
    Ok(json!({
        "pairs": pairs.len(),
        "source": ParallelCorpus::file_path(&dir, &stem, &a.source).display().to_string(),
        "target": ParallelCorpus::file_path(&dir, &stem, &a.target).display().to_string(),
        "provenance": provenance_path(&dir, &stem).display().to_string(),
        "checkpoint_id": model.checkpoint_id(),
    }))
}

fn run_finetune(a: FinetuneArgs) -> CliResult<Value> {
    let mut sets = a.run.sets.clone();
    if let Some(b) = a.batch {
        sets.push(format!("finetune.batch_size={b}"));
    }
    let cfg = RunArgs {
        config: a.run.config.clone(),
        sets,
        seed: a.run.seed,
    }
    .load()?;
    let (src, tgt) = parse_pair(&a.pair)?;
    let mut model = checkpoint::load_model(&a.checkpoint)?;
    model.path(&src, &tgt)?;
    let corpus = read_corpus(&a.corpus, &[&src, &tgt])?;
    let tp = TrainPair {
        source: src.clone(),
        target: tgt.clone(),
        pairs: encode(&model, &corpus, &src, &tgt)?,
    };
    let devs = match &a.dev {
        Some(p) => vec![dev_set(&model, &read_corpus(p, &[&src, &tgt])?, &src, &tgt)?],
        None => Vec::new(),
    };
    let created = model.attention_id_for(&src, &tgt) == SHARED_ATTENTION;
    let id = if created {
        clone_attention(&mut model, &src, &tgt)?
    } else {
        model.attention_id_for(&src, &tgt).to_string()
    };
    let log_path = a.log.clone().unwrap_or_else(|| default_log(&a.out));
    let mut log = log_writer(&log_path)?;
    let report = finetune_attention(&mut model, &id, &tp, &devs, &cfg.finetune_config(), Some(&mut log))?;
    log.flush().map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    checkpoint::save(&model, Some(&report.train.optimizer), &a.out)?;
    Ok(json!({
        "checkpoint": a.out.display().to_string(),
        "attention_id": report.attention_id,
        "clone_created": created,
        "corpus_size": report.corpus_size,
        "batch_size": cfg.finetune.batch_size,
        "frozen_digest_before": report.frozen_digest_before,
        "frozen_digest_after": report.frozen_digest_after,
        "frozen_unchanged": report.frozen_digest_before == report.frozen_digest_after,
        "clone_digest_before": report.clone_digest_before,
        "clone_digest_after": report.clone_digest_after,
        "updates": report.train.updates,
        "best_update": report.train.best_update,
        "log": log_path.display().to_string(),
        "dev": eval_json(&model, &devs)?,
    }))
}

fn run_evaluate(a: EvaluateArgs) -> CliResult<Value> {
    let (srcs, tgt) = a
        .pair
        .rsplit_once('-')
        .map(|(s, t)| (langs_of(s), t.trim().to_string()))
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .ok_or_else(|| CliError::Config(format!("bad --pair `{}`", a.pair)))?;
    let model = checkpoint::load_model(&a.decode.checkpoint)?;
    let mut langs: Vec<&str> = srcs.iter().map(String::as_str).collect();
    langs.push(&tgt);
    let corpus = read_corpus(&a.test_set, &langs)?;
    let mut sources = Vec::new();
    for l in &srcs {
        let v = model.source_vocab(l)?;
        sources.push((l.clone(), corpus.side(l)?.iter().map(|s| v.encode(s)).collect::<Vec<_>>()));
    }
    let tv = model.target_vocab(&tgt)?;
    let refs: Vec<Vec<usize>> = corpus.side(&tgt)?.iter().map(|s| tv.encode(s)).collect();
    let hyps = decode_all(&model, &a.decode, &sources, &tgt)?;
    let r = score_corpus(&hyps, &refs)?;
    Ok(json!({
        "pair": a.pair,
        "strategy": a.decode.strategy,
        "pivot": a.decode.pivot,
        "beam": a.decode.beam,
        "sentences": refs.len(),
        "bleu": r.bleu,
        "ter_approx": r.ter_approx,
        "tb": r.tb,
        "exact_match": r.exact_match,
    }))
}

fn run_grad_check(a: GradCheckArgs) -> CliResult<Value> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<GradCheckSpec>(&text).map_err(|e| CliError::Config(e.to_string().trim().to_string()))?
        }
        None => GradCheckSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let r = model_grad_check(&spec)?;
    let out = json!({
        "max_relative_error": r.max_relative_error,
        "parameters": r.parameters,
        "tolerance": a.tolerance,
        "passed": r.max_relative_error < a.tolerance,
        "spec": spec,
    });
    if r.max_relative_error < a.tolerance {
        Ok(out)
    } else {
        println!("{}", serde_json::to_string_pretty(&out).expect("json"));
        Err(CliError::Runtime(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            r.max_relative_error, a.tolerance
        )))
    }
}

fn run(cli: Cli) -> CliResult<Option<Value>> {
    match cli.command {
        Command::GenData(a) => gen_data(a).map(Some),
        Command::Train(a) => run_train(a).map(Some),
        Command::Translate(a) => run_translate(a),
        Command::GenPseudo(a) => run_gen_pseudo(a).map(Some),
        Command::Finetune(a) => run_finetune(a).map(Some),
        Command::Evaluate(a) => run_evaluate(a).map(Some),
        Command::GradCheck(a) => run_grad_check(a).map(Some),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            if let Some(v) = out {
                println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
