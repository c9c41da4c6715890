//! Zero-resource translation: pseudo-parallel corpora built by translating
//! the pivot side of a target-pivot corpus into the source language, and
//! finetuning of a pair-specific copy of the shared attention with every
//! other parameter frozen.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_lines, write_lines, EncodedPairs, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::{MultiWayModel, SHARED_ATTENTION};
use crate::strategies::{translate_greedy_batch, StrategyKind};
use crate::training::{train, DevSet, EvalRecord, TrainConfig, TrainPair, TrainReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_id: String,
    pub line: usize,
    pub checkpoint_id: String,
}

/// Machine-generated source sentence paired with a true target sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub provenance: Provenance,
}

/// Which corpus and model a pseudo corpus is generated from.
#[derive(Clone, Debug)]
pub struct PseudoRequest<'a> {
    /// Target-pivot parallel corpus; its source side is never read.
    pub corpus: &'a ParallelCorpus,
    pub corpus_id: &'a str,
    pub source: &'a str,
    pub pivot: &'a str,
    pub target: &'a str,
    pub n: usize,
    pub seed: u64,
}

/// Sample `n` target-pivot lines without replacement and translate their
/// pivot side into the source language (greedy one-to-one). Pairs come back
/// in sampled order.
pub fn generate_pseudo_corpus(model: &MultiWayModel, req: &PseudoRequest<'_>) -> Result<Vec<PseudoPair>> {
    if !model.is_trained(req.pivot, req.source) {
        return Err(Error::Untrained(format!("{}->{}", req.pivot, req.source)));
    }
    let pivot_side = req.corpus.side(req.pivot)?;
    let target_side = req.corpus.side(req.target)?;
    if req.n == 0 || req.n > pivot_side.len() {
        return Err(Error::invalid(format!(
            "cannot sample {} pairs from a corpus of {}",
            req.n,
            pivot_side.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let lines = sample(&mut rng, pivot_side.len(), req.n).into_vec();
    let pivot_vocab = model.source_vocab(req.pivot)?;
    let source_vocab = model.target_vocab(req.source)?;
    let inputs: Vec<Vec<usize>> = lines.iter().map(|&i| pivot_vocab.encode(&pivot_side[i])).collect();
    let outputs = translate_greedy_batch(model, StrategyKind::OneToOne, &[(req.pivot, &inputs)], req.source)?;
    let checkpoint_id = model.checkpoint_id();
    Ok(lines
        .into_iter()
        .zip(outputs)
        .map(|(line, out)| PseudoPair {
            source: source_vocab.decode(&out.tokens),
            target: target_side[line].clone(),
            provenance: Provenance {
                corpus_id: req.corpus_id.to_string(),
                line,
                checkpoint_id: checkpoint_id.clone(),
            },
        })
        .collect())
}

pub fn provenance_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.provenance"))
}

/// Write `{stem}.{source}`, `{stem}.{target}` and the provenance sidecar
/// (`corpus_id<TAB>line<TAB>checkpoint_id` per pair).
pub fn write_pseudo_corpus(pairs: &[PseudoPair], dir: &Path, stem: &str, source: &str, target: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let src: Vec<Vec<String>> = pairs.iter().map(|p| p.source.clone()).collect();
    let tgt: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
    write_lines(&ParallelCorpus::file_path(dir, stem, source), &src)?;
    write_lines(&ParallelCorpus::file_path(dir, stem, target), &tgt)?;
    let path = provenance_path(dir, stem);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for p in pairs {
        let pr = &p.provenance;
        writeln!(f, "{}\t{}\t{}", pr.corpus_id, pr.line, pr.checkpoint_id).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_pseudo_corpus(dir: &Path, stem: &str, source: &str, target: &str) -> Result<Vec<PseudoPair>> {
    let src = read_lines(&ParallelCorpus::file_path(dir, stem, source))?;
    let tgt = read_lines(&ParallelCorpus::file_path(dir, stem, target))?;
    let path = provenance_path(dir, stem);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let prov: Vec<Provenance> = text
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            match f.as_slice() {
                [c, n, k] => Ok(Provenance {
                    corpus_id: c.to_string(),
                    line: n.parse().map_err(|_| Error::invalid(format!("bad provenance line `{l}`")))?,
                    checkpoint_id: k.to_string(),
                }),
                _ => Err(Error::invalid(format!("bad provenance line `{l}`"))),
            }
        })
        .collect::<Result<_>>()?;
    if src.len() != tgt.len() || src.len() != prov.len() {
        return Err(Error::invalid(format!("{stem}: pseudo corpus files are not line-aligned")));
    }
    Ok(src
        .into_iter()
        .zip(tgt)
        .zip(prov)
        .map(|((source, target), provenance)| PseudoPair {
            source,
            target,
            provenance,
        })
        .collect())
}

/// Id-encode token pairs for the `source -> target` direction of `model`.
pub fn encode_pairs(
    model: &MultiWayModel,
    source: &str,
    target: &str,
    pairs: impl IntoIterator<Item = (Vec<String>, Vec<String>)>,
) -> Result<TrainPair> {
    let sv = model.source_vocab(source)?;
    let tv = model.target_vocab(target)?;
    let mut enc = EncodedPairs::default();
    for (s, t) in pairs {
        enc.source.push(sv.encode(&s));
        enc.target.push(tv.encode(&t));
    }
    Ok(TrainPair {
        source: source.to_string(),
        target: target.to_string(),
        pairs: enc,
    })
}

pub fn clone_id(source: &str, target: &str) -> String {
    format!("{source}-{target}")
}

/// Route `source -> target` through a byte-identical copy of the shared
/// attention. Returns the new attention id.
pub fn clone_attention(model: &mut MultiWayModel, source: &str, target: &str) -> Result<String> {
    model.path(source, target)?;
    let current = model.attention_id_for(source, target);
    if current != SHARED_ATTENTION {
        return Err(Error::invalid(format!(
            "{source}->{target} already uses attention `{current}`"
        )));
    }
    let id = clone_id(source, target);
    model.copy_attention(SHARED_ATTENTION, &id)?;
    model.set_route(source, target, &id)?;
    Ok(id)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub attention_id: String,
    pub corpus_size: usize,
    /// Dev evaluations in order.
    pub trajectory: Vec<EvalRecord>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub clone_digest_before: String,
    pub clone_digest_after: String,
    pub train: TrainReport,
}

/// Default finetuning schedule: batches of 60, learning rate 3e-3, at most
/// 4000 updates; evaluation and patience as in training.
pub fn finetune_config() -> TrainConfig {
    TrainConfig {
        batch_size: 60,
        learning_rate: 3e-3,
        max_updates: 4000,
        ..TrainConfig::default()
    }
}

/// Train only the parameters of the cloned attention `attention_id` on
/// `corpus`, whose direction must be routed through that attention.
pub fn finetune_attention(
    model: &mut MultiWayModel,
    attention_id: &str,
    corpus: &TrainPair,
    dev: &[DevSet],
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<FinetuneReport> {
    if attention_id == SHARED_ATTENTION {
        return Err(Error::invalid("the shared attention cannot be finetuned alone"));
    }
    model.attention(attention_id)?;
    if model.attention_id_for(&corpus.source, &corpus.target) != attention_id {
        return Err(Error::invalid(format!(
            "{} is not routed through attention `{attention_id}`",
            corpus.label()
        )));
    }
    if corpus.pairs.is_empty() {
        return Err(Error::invalid("empty finetuning corpus"));
    }
    let prefix = format!("attention/{attention_id}/");
    let frozen = |m: &MultiWayModel| m.store().digest_where(|n| !n.starts_with(&prefix));
    let cloned = |m: &MultiWayModel| m.store().digest_where(|n| n.starts_with(&prefix));
    let frozen_digest_before = frozen(model);
    let clone_digest_before = cloned(model);
    let cfg = TrainConfig {
        trainable: vec![prefix.clone()],
        ..cfg.clone()
    };
    let report = train(model, std::slice::from_ref(corpus), dev, &cfg, log)?;
    let frozen_digest_after = frozen(model);
    if frozen_digest_after != frozen_digest_before {
        return Err(Error::invalid("frozen parameters changed during finetuning"));
    }
    Ok(FinetuneReport {
        attention_id: attention_id.to_string(),
        corpus_size: corpus.pairs.len(),
        trajectory: report.evals.clone(),
        frozen_digest_before,
        frozen_digest_after,
        clone_digest_before,
        clone_digest_after: cloned(model),
        train: report,
    })
}
