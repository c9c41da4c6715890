//! Decoding: one-to-one greedy and beam search, early/late/early+late
//! many-to-one averaging, and pivot composition.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Batch, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::model::{mean_vars, AttentionParams, MultiWayModel, PathInputs};
use crate::tensor::Tensor;

/// Sentences decoded together by the batched greedy search.
const DECODE_CHUNK: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    OneToOne,
    EarlyAverage,
    LateAverage,
    EarlyPlusLate,
}

impl StrategyKind {
    pub fn is_many_to_one(self) -> bool {
        self != StrategyKind::OneToOne
    }

    fn check_sources(self, k: usize) -> Result<()> {
        match (self, k) {
            (_, 0) => Err(Error::invalid("no source sentences given")),
            (StrategyKind::OneToOne, 1) => Ok(()),
            (StrategyKind::OneToOne, _) => Err(Error::invalid("one-to-one takes exactly one source")),
            (_, 1) => Err(Error::invalid(format!("{self} needs at least two sources"))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::OneToOne => "one",
            StrategyKind::EarlyAverage => "early",
            StrategyKind::LateAverage => "late",
            StrategyKind::EarlyPlusLate => "early-late",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(StrategyKind::OneToOne),
            "early" => Ok(StrategyKind::EarlyAverage),
            "late" => Ok(StrategyKind::LateAverage),
            "early-late" => Ok(StrategyKind::EarlyPlusLate),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (expected one, early, late or early-late)"
            ))),
        }
    }
}

/// Elementwise mean of equally shaped tensors: sequential sum, then one
/// scaling by `1/k`.
fn mean_tensors(parts: &[&Tensor], op: &'static str) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid(format!("{op}: nothing to average")))?;
    if parts.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc = first.data().to_vec();
    for p in &parts[1..] {
        if p.shape() != first.shape() {
            return Err(Error::Shape {
                op,
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (a, x) in acc.iter_mut().zip(p.data()) {
            *a += x;
        }
    }
    let k = 1.0 / parts.len() as f64;
    for a in &mut acc {
        *a *= k;
    }
    Tensor::new(first.shape().to_vec(), acc)
}

/// Averages `k >= 2` context vectors and their decoder initializers.
pub fn combine_context_early(contexts: &[Tensor], inits: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if contexts.len() < 2 || inits.len() != contexts.len() {
        return Err(Error::invalid("early averaging needs k >= 2 contexts and as many initializers"));
    }
    let c: Vec<&Tensor> = contexts.iter().collect();
    let z: Vec<&Tensor> = inits.iter().collect();
    Ok((
        mean_tensors(&c, "combine_context_early")?,
        mean_tensors(&z, "combine_context_early")?,
    ))
}

/// Mean of output distributions.
pub fn combine_distributions_late(dists: &[Tensor]) -> Result<Tensor> {
    let d: Vec<&Tensor> = dists.iter().collect();
    mean_tensors(&d, "combine_distributions_late")
}

/// Annotations of one source batch, detached from the tape that built them.
struct EncodedPath {
    attention: AttentionParams,
    h: Tensor,
    keys: Tensor,
    mask: Vec<bool>,
    steps: usize,
}

/// One decoder recurrence reading from one or more (early-averaged) paths.
struct Stream {
    paths: Vec<usize>,
    indicator: Tensor,
    state: Tensor,
}

/// Incremental decoder for a batch of rows under one strategy.
///
/// Each row is one sentence (or one beam hypothesis). `step` consumes the
/// previous token of every row and returns the strategy's next-token
/// distribution, `rows x V`.
pub struct StepDecoder<'m> {
    model: &'m MultiWayModel,
    decoder: usize,
    strategy: StrategyKind,
    paths: Vec<EncodedPath>,
    streams: Vec<Stream>,
    rows: usize,
}

impl<'m> StepDecoder<'m> {
    /// `sources` pairs a source language with a batch of sentences; all
    /// batches must have the same number of rows.
    pub fn new(
        model: &'m MultiWayModel,
        strategy: StrategyKind,
        sources: &[(&str, &Batch)],
        target: &str,
    ) -> Result<Self> {
        strategy.check_sources(sources.len())?;
        let decoder = model.decoder_index(target)?;
        let rows = sources[0].1.rows();
        if sources.iter().any(|(_, b)| b.rows() != rows) {
            return Err(Error::invalid("source batches differ in size"));
        }
        let mut tape = Tape::inference(model.store());
        let mut paths = Vec::new();
        let mut encoders = Vec::new();
        let mut inits = Vec::new();
        for (lang, batch) in sources {
            let encoder = model.encoder_index(lang)?;
            let attention_id = model.attention_id_for(lang, target);
            let ann = model.encode(&mut tape, encoder, batch)?;
            let inputs = model.path_inputs(&mut tape, attention_id, &ann)?;
            inits.push(model.init_single(&mut tape, decoder, &ann)?);
            paths.push(EncodedPath {
                attention: inputs.attention,
                h: tape.value(ann.h).clone(),
                keys: tape.value(inputs.keys).clone(),
                mask: ann.mask.clone(),
                steps: ann.steps,
            });
            encoders.push(encoder);
        }
        let mut streams = Vec::new();
        let early = matches!(strategy, StrategyKind::EarlyAverage | StrategyKind::EarlyPlusLate);
        let late = matches!(strategy, StrategyKind::LateAverage | StrategyKind::EarlyPlusLate);
        if early || strategy == StrategyKind::OneToOne {
            let z = mean_vars(&mut tape, &inits)?;
            streams.push(Stream {
                paths: (0..paths.len()).collect(),
                indicator: model.indicator(rows, &encoders)?,
                state: tape.value(z).clone(),
            });
        }
        if late {
            for (i, &z) in inits.iter().enumerate() {
                streams.push(Stream {
                    paths: vec![i],
                    indicator: model.indicator(rows, &encoders[i..=i])?,
                    state: tape.value(z).clone(),
                });
            }
        }
        Ok(StepDecoder {
            model,
            decoder,
            strategy,
            paths,
            streams,
            rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Indicator rows (first batch row) of every decoder recurrence; the
    /// early-averaged one first.
    pub fn indicators(&self) -> Vec<Vec<f64>> {
        self.streams.iter().map(|s| s.indicator.row_slice(0).to_vec()).collect()
    }

    /// Advance every row by one token.
    pub fn step(&mut self, prev: &[usize]) -> Result<Tensor> {
        if prev.len() != self.rows {
            return Err(Error::invalid(format!(
                "expected {} previous tokens, got {}",
                self.rows,
                prev.len()
            )));
        }
        let mut dists = Vec::with_capacity(self.streams.len());
        for stream in &mut self.streams {
            let mut tape = Tape::inference(self.model.store());
            let inputs: Vec<PathInputs<'_>> = stream
                .paths
                .iter()
                .map(|&i| {
                    let p = &self.paths[i];
                    PathInputs {
                        attention: p.attention,
                        h: tape.constant_ref(&p.h),
                        keys: tape.constant_ref(&p.keys),
                        mask: &p.mask,
                        steps: p.steps,
                    }
                })
                .collect();
            let state = tape.constant_ref(&stream.state);
            let indicator = tape.constant_ref(&stream.indicator);
            let (next, logits) = self
                .model
                .stream_step(&mut tape, self.decoder, &inputs, state, prev, indicator)?;
            let probs = tape.softmax(logits)?;
            let next = tape.value(next).clone();
            dists.push(tape.value(probs).clone());
            stream.state = next;
        }
        match self.strategy {
            StrategyKind::OneToOne | StrategyKind::EarlyAverage => Ok(dists.swap_remove(0)),
            StrategyKind::LateAverage => combine_distributions_late(&dists),
            StrategyKind::EarlyPlusLate => {
                let late = combine_distributions_late(&dists[1..])?;
                combine_distributions_late(&[dists.swap_remove(0), late])
            }
        }
    }

    /// Keep (and possibly duplicate) rows: new row `i` is old row `rows[i]`.
    pub fn reorder(&mut self, rows: &[usize]) -> Result<()> {
        if rows.is_empty() || rows.iter().any(|&r| r >= self.rows) {
            return Err(Error::invalid("reorder: row index out of range"));
        }
        let gather = |t: &Tensor, block: usize| -> Tensor {
            let width = t.cols() * block;
            let mut data = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
            }
            Tensor::matrix(rows.len() * block, t.cols(), data).expect("gathered rows")
        };
        for p in &mut self.paths {
            p.h = gather(&p.h, p.steps);
            p.keys = gather(&p.keys, p.steps);
            p.mask = rows
                .iter()
                .flat_map(|&r| p.mask[r * p.steps..(r + 1) * p.steps].iter().copied())
                .collect();
        }
        for s in &mut self.streams {
            s.state = gather(&s.state, 1);
            s.indicator = gather(&s.indicator, 1);
        }
        self.rows = rows.len();
        Ok(())
    }
}

/// A decoded sentence (without EOS) and its log-probability under the
/// strategy's per-step distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// False when `max_decode_len` was reached before EOS.
    pub finished: bool,
}

/// A live or finished beam entry.
#[derive(Clone, Debug)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    row: usize,
}

/// First index of the maximum, so ties go to the lower token id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn batches_for(sources: &[(&str, &[Vec<usize>])], range: std::ops::Range<usize>) -> Result<Vec<Batch>> {
    sources
        .iter()
        .map(|(_, sents)| {
            let seqs: Vec<&[usize]> = sents[range.clone()].iter().map(Vec::as_slice).collect();
            Batch::from_sequences(&seqs, false)
        })
        .collect()
}

/// Greedy decoding of many sentences at once. `sources[i].1[j]` is sentence
/// `j` in source language `sources[i].0`.
pub fn translate_greedy_batch(
    model: &MultiWayModel,
    strategy: StrategyKind,
    sources: &[(&str, &[Vec<usize>])],
    target: &str,
) -> Result<Vec<Translation>> {
    strategy.check_sources(sources.len())?;
    let n = sources[0].1.len();
    if sources.iter().any(|(_, s)| s.len() != n) {
        return Err(Error::invalid("source sides differ in sentence count"));
    }
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(DECODE_CHUNK) {
        let range = start..(start + DECODE_CHUNK).min(n);
        let batches = batches_for(sources, range)?;
        let srcs: Vec<(&str, &Batch)> = sources.iter().zip(&batches).map(|((l, _), b)| (*l, b)).collect();
        out.extend(greedy_rows(model, strategy, &srcs, target, None)?);
    }
    Ok(out)
}

fn greedy_rows(
    model: &MultiWayModel,
    strategy: StrategyKind,
    sources: &[(&str, &Batch)],
    target: &str,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<Translation>> {
    let mut dec = StepDecoder::new(model, strategy, sources, target)?;
    let rows = dec.rows();
    let mut out: Vec<Translation> = (0..rows)
        .map(|_| Translation {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
        })
        .collect();
    let mut prev = vec![BOS; rows];
    for _ in 0..model.config().max_decode_len {
        let dist = dec.step(&prev)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(dist.row_slice(0).to_vec());
        }
        for (r, tr) in out.iter_mut().enumerate() {
            if tr.finished {
                prev[r] = EOS;
                continue;
            }
            let row = dist.row_slice(r);
            let tok = argmax(row);
            tr.logprob += row[tok].ln();
            if tok == EOS {
                tr.finished = true;
            } else {
                tr.tokens.push(tok);
            }
            prev[r] = tok;
        }
        if out.iter().all(|t| t.finished) {
            break;
        }
    }
    Ok(out)
}

/// Greedy decoding of one sentence that also returns every per-step
/// distribution.
pub fn greedy_trace(
    model: &MultiWayModel,
    strategy: StrategyKind,
    sources: &[(&str, &[usize])],
    target: &str,
) -> Result<(Translation, Vec<Vec<f64>>)> {
    let batches = single_batches(sources)?;
    let srcs: Vec<(&str, &Batch)> = sources.iter().zip(&batches).map(|((l, _), b)| (*l, b)).collect();
    let mut trace = Vec::new();
    let mut out = greedy_rows(model, strategy, &srcs, target, Some(&mut trace))?;
    Ok((out.swap_remove(0), trace))
}

fn single_batches(sources: &[(&str, &[usize])]) -> Result<Vec<Batch>> {
    sources.iter().map(|(_, s)| Batch::from_sequences(&[*s], false)).collect()
}

fn cmp_hyp(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Beam search over one sentence, scoring by summed log-probability.
pub fn beam_search(
    model: &MultiWayModel,
    strategy: StrategyKind,
    sources: &[(&str, &[usize])],
    target: &str,
    width: usize,
) -> Result<Translation> {
    if width == 0 {
        return Err(Error::invalid("beam width must be >= 1"));
    }
    strategy.check_sources(sources.len())?;
    let batches = single_batches(sources)?;
    let srcs: Vec<(&str, &Batch)> = sources.iter().zip(&batches).map(|((l, _), b)| (*l, b)).collect();
    let greedy = greedy_rows(model, strategy, &srcs, target, None)?.swap_remove(0);
    if width == 1 {
        return Ok(greedy);
    }
    let mut dec = StepDecoder::new(model, strategy, &srcs, target)?;
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        row: 0,
    }];
    let mut finished: Vec<Translation> = Vec::new();
    for _ in 0..model.config().max_decode_len {
        let prev: Vec<usize> = live.iter().map(|h| *h.tokens.last().unwrap_or(&BOS)).collect();
        let dist = dec.step(&prev)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            for (tok, &p) in dist.row_slice(h.row).iter().enumerate() {
                cands.push((h.logprob + p.ln(), i, tok));
            }
        }
        cands.sort_by(cmp_hyp);
        let mut next = Vec::new();
        for &(lp, i, tok) in cands.iter().take(width) {
            let mut tokens = live[i].tokens.clone();
            if tok == EOS {
                finished.push(Translation {
                    tokens,
                    logprob: lp,
                    finished: true,
                });
            } else {
                tokens.push(tok);
                next.push(BeamHypothesis {
                    tokens,
                    logprob: lp,
                    row: live[i].row,
                });
            }
        }
        let best_done = finished.iter().map(|t| t.logprob).fold(f64::NEG_INFINITY, f64::max);
        if next.is_empty() || finished.len() >= width || next.iter().all(|h| h.logprob <= best_done) {
            live.clear();
            break;
        }
        let rows: Vec<usize> = next.iter().map(|h| h.row).collect();
        dec.reorder(&rows)?;
        for (r, h) in next.iter_mut().enumerate() {
            h.row = r;
        }
        live = next;
    }
    finished.extend(live.into_iter().map(|h| Translation {
        tokens: h.tokens,
        logprob: h.logprob,
        finished: false,
    }));
    let mut best = greedy;
    for t in finished {
        if t.logprob > best.logprob {
            best = t;
        }
    }
    Ok(best)
}

/// Decode one sentence given in one or more source languages.
pub fn translate(
    model: &MultiWayModel,
    strategy: StrategyKind,
    sources: &[(&str, &[usize])],
    target: &str,
    beam_width: usize,
) -> Result<Translation> {
    beam_search(model, strategy, sources, target, beam_width)
}

/// Decode many sentences; beam widths above one decode sentence by sentence.
pub fn translate_batch(
    model: &MultiWayModel,
    strategy: StrategyKind,
    sources: &[(&str, &[Vec<usize>])],
    target: &str,
    beam_width: usize,
) -> Result<Vec<Translation>> {
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be >= 1"));
    }
    if beam_width == 1 {
        return translate_greedy_batch(model, strategy, sources, target);
    }
    strategy.check_sources(sources.len())?;
    let n = sources[0].1.len();
    (0..n)
        .map(|j| {
            let one: Vec<(&str, &[usize])> = sources.iter().map(|(l, s)| (*l, s[j].as_slice())).collect();
            beam_search(model, strategy, &one, target, beam_width)
        })
        .collect()
}

/// How the pivot-to-target stage reads its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PivotSecondStage {
    /// Pivot translation only.
    OneToOne,
    /// Original source and pivot translation together.
    ManyToOne(StrategyKind),
}

/// Source -> pivot (greedy 1-best) -> target, for many sentences.
pub fn translate_pivot_batch(
    model: &MultiWayModel,
    source: &str,
    pivot: &str,
    target: &str,
    sentences: &[Vec<usize>],
    second: PivotSecondStage,
    beam_width: usize,
) -> Result<Vec<Translation>> {
    if pivot == target || pivot == source {
        return Err(Error::invalid("pivot language must differ from source and target"));
    }
    for (a, b) in [(source, pivot), (pivot, target)] {
        if !model.is_trained(a, b) {
            return Err(Error::Untrained(format!("{a}->{b}")));
        }
    }
    let stage1 = translate_greedy_batch(model, StrategyKind::OneToOne, &[(source, sentences)], pivot)?;
    // An empty pivot sentence cannot be encoded; it stands in as one UNK.
    let pivots: Vec<Vec<usize>> = stage1
        .into_iter()
        .map(|t| if t.tokens.is_empty() { vec![UNK] } else { t.tokens })
        .collect();
    match second {
        PivotSecondStage::OneToOne => {
            translate_batch(model, StrategyKind::OneToOne, &[(pivot, &pivots)], target, beam_width)
        }
        PivotSecondStage::ManyToOne(StrategyKind::OneToOne) => {
            Err(Error::invalid("many-to-one pivot stage needs a many-source strategy"))
        }
        PivotSecondStage::ManyToOne(s) => translate_batch(
            model,
            s,
            &[(source, sentences), (pivot, &pivots)],
            target,
            beam_width,
        ),
    }
}

/// Pivot translation of a single sentence.
pub fn translate_pivot(
    model: &MultiWayModel,
    source: &str,
    pivot: &str,
    target: &str,
    tokens: &[usize],
    second: PivotSecondStage,
) -> Result<Vec<usize>> {
    let out = translate_pivot_batch(model, source, pivot, target, &[tokens.to_vec()], second, 1)?;
    Ok(out.into_iter().next().map(|t| t.tokens).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LanguageVocab, ModelConfig};

    fn model() -> MultiWayModel {
        let v = |n: &str| LanguageVocab::with_size(n, 10);
        let mut cfg = ModelConfig::new(vec![v("A"), v("B")], vec![v("A"), v("T")]);
        cfg.embed_dim = 4;
        cfg.hidden_dim = 5;
        cfg.attn_hidden_dim = 4;
        cfg.readout_dim = 6;
        cfg.max_decode_len = 6;
        cfg.init_scale = 1.0;
        MultiWayModel::new(cfg).unwrap()
    }

    fn t(data: &[f64]) -> Tensor {
        Tensor::row(data.to_vec())
    }

    #[test]
    fn early_combination_examples() {
        let (c, _) = combine_context_early(&[t(&[1.0, 2.0]), t(&[3.0, 4.0])], &[t(&[0.0]), t(&[0.0])]).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0]);
        let v = t(&[0.3, -1.7, 2.2]);
        let (c, z) = combine_context_early(&[v.clone(), v.clone()], &[v.clone(), v.clone()]).unwrap();
        assert!(c.bit_eq(&v) && z.bit_eq(&v));
        let e: Vec<Tensor> = (0..3)
            .map(|i| {
                let mut d = vec![0.0; 3];
                d[i] = 1.0;
                t(&d)
            })
            .collect();
        let (c, _) = combine_context_early(&e, &e).unwrap();
        for x in c.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(combine_context_early(&[t(&[1.0]), t(&[1.0, 2.0])], &[t(&[0.0]), t(&[0.0])]).is_err());
        assert!(combine_context_early(&[t(&[1.0])], &[t(&[0.0])]).is_err());
    }

    #[test]
    fn late_combination_examples() {
        let p = combine_distributions_late(&[t(&[0.2, 0.8]), t(&[0.6, 0.4])]).unwrap();
        assert!((p.data()[0] - 0.4).abs() < 1e-15 && (p.data()[1] - 0.6).abs() < 1e-15);
        let q = t(&[0.1, 0.7, 0.2]);
        assert!(combine_distributions_late(&[q.clone(), q.clone()]).unwrap().bit_eq(&q));
        assert!(combine_distributions_late(&[t(&[0.5, 0.5]), t(&[1.0])]).is_err());
    }

    #[test]
    fn strategy_parsing() {
        for s in ["one", "early", "late", "early-late"] {
            assert_eq!(s.parse::<StrategyKind>().unwrap().to_string(), s);
        }
        assert!("mean".parse::<StrategyKind>().unwrap_err().is_config());
    }

    #[test]
    fn source_count_rules() {
        let m = model();
        let s: &[usize] = &[4, 5];
        assert!(translate(&m, StrategyKind::OneToOne, &[], "T", 1).is_err());
        assert!(translate(&m, StrategyKind::EarlyAverage, &[("A", s)], "T", 1).is_err());
        assert!(translate(&m, StrategyKind::OneToOne, &[("A", s), ("B", s)], "T", 1).is_err());
        assert!(matches!(
            translate(&m, StrategyKind::OneToOne, &[("Z", s)], "T", 1),
            Err(Error::UnknownLanguage(_))
        ));
        assert!(translate(&m, StrategyKind::OneToOne, &[("A", s)], "T", 0).is_err());
    }

    #[test]
    fn greedy_is_stepwise_argmax_and_distributions_normalized() {
        let m = model();
        for strategy in [
            StrategyKind::OneToOne,
            StrategyKind::EarlyAverage,
            StrategyKind::LateAverage,
            StrategyKind::EarlyPlusLate,
        ] {
            let srcs: Vec<(&str, &[usize])> = if strategy.is_many_to_one() {
                vec![("A", &[4, 5, 6]), ("B", &[7, 8])]
            } else {
                vec![("B", &[7, 8, 9])]
            };
            let (tr, trace) = greedy_trace(&m, strategy, &srcs, "T").unwrap();
            let mut emitted = tr.tokens.clone();
            if tr.finished {
                emitted.push(EOS);
            }
            assert_eq!(emitted.len(), trace.len());
            let mut lp = 0.0;
            for (d, &tok) in trace.iter().zip(&emitted) {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(argmax(d), tok);
                lp += d[tok].ln();
            }
            assert_eq!(lp, tr.logprob);
        }
    }

    #[test]
    fn late_of_identical_paths_is_one_to_one() {
        let m = model();
        let s: &[usize] = &[4, 7, 5, 9];
        let (one, t1) = greedy_trace(&m, StrategyKind::OneToOne, &[("B", s)], "T").unwrap();
        let (late, t2) = greedy_trace(&m, StrategyKind::LateAverage, &[("B", s), ("B", s)], "T").unwrap();
        let (el, t3) = greedy_trace(&m, StrategyKind::EarlyPlusLate, &[("B", s), ("B", s)], "T").unwrap();
        let (early, t4) = greedy_trace(&m, StrategyKind::EarlyAverage, &[("B", s), ("B", s)], "T").unwrap();
        assert_eq!(one, late);
        assert_eq!(one, el);
        assert_eq!(one, early);
        for tr in [&t2, &t3, &t4] {
            assert_eq!(tr.len(), t1.len());
            for (a, b) in t1.iter().zip(tr.iter()) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn batched_greedy_matches_single() {
        let m = model();
        let sents = vec![vec![4, 5, 6], vec![7], vec![8, 9, 4, 5, 6, 7]];
        let batch = translate_greedy_batch(&m, StrategyKind::OneToOne, &[("A", &sents)], "T").unwrap();
        for (s, b) in sents.iter().zip(&batch) {
            let one = translate(&m, StrategyKind::OneToOne, &[("A", s)], "T", 1).unwrap();
            assert_eq!(one.tokens, b.tokens);
            assert!((one.logprob - b.logprob).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_never_worse_than_greedy() {
        let m = model();
        for (i, s) in [[4usize, 5, 6], [9, 8, 7], [5, 5, 4]].iter().enumerate() {
            let greedy = translate(&m, StrategyKind::OneToOne, &[("A", s)], "T", 1).unwrap();
            for w in [2, 3, 5] {
                let beam = translate(&m, StrategyKind::OneToOne, &[("A", s)], "T", w).unwrap();
                assert!(beam.logprob >= greedy.logprob, "case {i} width {w}");
            }
            let early = [("A", &s[..]), ("B", &s[..])];
            let g = translate(&m, StrategyKind::EarlyPlusLate, &early, "T", 1).unwrap();
            let b = translate(&m, StrategyKind::EarlyPlusLate, &early, "T", 3).unwrap();
            assert!(b.logprob >= g.logprob);
        }
    }

    #[test]
    fn early_indicator_sets_all_bits() {
        let m = model();
        let a = Batch::from_sequences(&[&[4, 5]], false).unwrap();
        let b = Batch::from_sequences(&[&[6]], false).unwrap();
        let dec = StepDecoder::new(&m, StrategyKind::EarlyPlusLate, &[("A", &a), ("B", &b)], "T").unwrap();
        assert_eq!(dec.indicators(), vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn pivot_checks() {
        let mut m = model();
        let s = [4usize, 5];
        assert!(translate_pivot(&m, "B", "A", "A", &s, PivotSecondStage::OneToOne).is_err());
        assert!(matches!(
            translate_pivot(&m, "B", "A", "T", &s, PivotSecondStage::OneToOne),
            Err(Error::Untrained(_))
        ));
        m.mark_trained("B", "A");
        m.mark_trained("A", "T");
        let out = translate_pivot(&m, "B", "A", "T", &s, PivotSecondStage::OneToOne).unwrap();
        let mid = translate(&m, StrategyKind::OneToOne, &[("B", &s)], "A", 1).unwrap();
        let mid = if mid.tokens.is_empty() { vec![UNK] } else { mid.tokens };
        let direct = translate(&m, StrategyKind::OneToOne, &[("A", &mid)], "T", 1).unwrap();
        assert_eq!(out, direct.tokens);
        assert!(translate_pivot(&m, "B", "A", "T", &s, PivotSecondStage::ManyToOne(StrategyKind::EarlyAverage)).is_ok());
        assert!(translate_pivot(&m, "B", "A", "T", &s, PivotSecondStage::ManyToOne(StrategyKind::OneToOne)).is_err());
    }
}
