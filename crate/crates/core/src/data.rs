//! Synthetic multilingual testbed, vocabularies, corpus files and batching.
//!
//! Every language renders a shared latent integer sequence through a
//! per-symbol transform, so line `i` of each language in a generated corpus
//! is a translation of line `i` of every other language. For bijective
//! languages the ground-truth translation is computable without any model.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    Identity,
    /// `x -> (x + k) mod V`
    Shift { k: usize },
    /// `x -> (x * k) mod V`, requires `gcd(k, V) = 1`
    Multiply { k: usize },
    /// `x -> x / d`; lossy, `d` latent symbols share one surface symbol
    Merge { d: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    pub prefix: String,
    pub transform: Transform,
    #[serde(default)]
    pub reversed: bool,
    pub latent_vocab: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl LanguageSpec {
    pub fn new(name: &str, prefix: &str, transform: Transform, reversed: bool, latent_vocab: usize) -> Self {
        LanguageSpec {
            name: name.to_string(),
            prefix: prefix.to_string(),
            transform,
            reversed,
            latent_vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.latent_vocab;
        if v == 0 {
            return Err(Error::Config(format!("language {}: latent_vocab must be >= 1", self.name)));
        }
        match self.transform {
            Transform::Multiply { k } if gcd(k % v, v) != 1 => Err(Error::Config(format!(
                "language {}: multiply({k}) is not a bijection on [0, {v})",
                self.name
            ))),
            Transform::Merge { d: 0 } => {
                Err(Error::Config(format!("language {}: merge(0) is undefined", self.name)))
            }
            _ => Ok(()),
        }
    }

    pub fn is_bijective(&self) -> bool {
        !matches!(self.transform, Transform::Merge { d } if d > 1)
    }

    /// Number of distinct surface symbols.
    pub fn surface_size(&self) -> usize {
        match self.transform {
            Transform::Merge { d } => self.latent_vocab.div_ceil(d),
            _ => self.latent_vocab,
        }
    }

    fn map_symbol(&self, x: usize) -> usize {
        let v = self.latent_vocab;
        match self.transform {
            Transform::Identity => x,
            Transform::Shift { k } => (x + k) % v,
            Transform::Multiply { k } => (x * k) % v,
            Transform::Merge { d } => x / d,
        }
    }

    fn unmap_symbol(&self, y: usize) -> Option<usize> {
        let v = self.latent_vocab;
        match self.transform {
            Transform::Identity => Some(y),
            Transform::Shift { k } => Some((y + v - k % v) % v),
            Transform::Multiply { .. } => (0..v).find(|&x| self.map_symbol(x) == y),
            Transform::Merge { d: 1 } => Some(y),
            Transform::Merge { .. } => None,
        }
    }

    pub fn token(&self, symbol: usize) -> String {
        format!("{}{}", self.prefix, symbol)
    }

    /// Apply the transform per symbol, then the reversal, then the prefix.
    pub fn render(&self, latent: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(latent.len());
        for &x in latent {
            if x >= self.latent_vocab {
                return Err(Error::invalid(format!(
                    "latent symbol {x} outside [0, {})",
                    self.latent_vocab
                )));
            }
            out.push(self.token(self.map_symbol(x)));
        }
        if self.reversed {
            out.reverse();
        }
        Ok(out)
    }

    /// Recover the latent sequence from surface tokens. `None` for lossy
    /// languages or malformed tokens.
    pub fn invert(&self, tokens: &[String]) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(tokens.len());
        for t in tokens {
            let y: usize = t.strip_prefix(&self.prefix)?.parse().ok()?;
            if y >= self.surface_size() {
                return None;
            }
            out.push(self.unmap_symbol(y)?);
        }
        if self.reversed {
            out.reverse();
        }
        Some(out)
    }

    /// Closed vocabulary: specials followed by every surface token.
    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens((0..self.surface_size()).map(|s| self.token(s)))
    }
}

/// Model-free translation between testbed languages. Requires `from` to be
/// bijective.
pub fn oracle_translate(from: &LanguageSpec, to: &LanguageSpec, tokens: &[String]) -> Option<Vec<String>> {
    let latent = from.invert(tokens)?;
    to.render(&latent).ok()
}

/// Token/id maps with fixed specials `PAD=0, BOS=1, EOS=2, UNK=3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Ids to tokens, stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

/// Line-aligned sentences in several languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    languages: Vec<String>,
    sides: Vec<Vec<Vec<String>>>,
}

impl ParallelCorpus {
    pub fn new(languages: Vec<String>, sides: Vec<Vec<Vec<String>>>) -> Result<Self> {
        if languages.len() != sides.len() || languages.is_empty() {
            return Err(Error::invalid("one side per language required"));
        }
        let n = sides[0].len();
        if sides.iter().any(|s| s.len() != n) {
            return Err(Error::invalid("parallel corpus sides differ in length"));
        }
        Ok(ParallelCorpus { languages, sides })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn len(&self) -> usize {
        self.sides[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self, lang: &str) -> Result<&[Vec<String>]> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .map(|i| self.sides[i].as_slice())
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Two-language view.
    pub fn pair(&self, a: &str, b: &str) -> Result<ParallelCorpus> {
        ParallelCorpus::new(
            vec![a.to_string(), b.to_string()],
            vec![self.side(a)?.to_vec(), self.side(b)?.to_vec()],
        )
    }

    /// First `n` lines.
    pub fn head(&self, n: usize) -> ParallelCorpus {
        ParallelCorpus {
            languages: self.languages.clone(),
            sides: self.sides.iter().map(|s| s[..n.min(s.len())].to_vec()).collect(),
        }
    }

    pub fn file_path(dir: &Path, stem: &str, lang: &str) -> PathBuf {
        dir.join(format!("{stem}.{lang}"))
    }

    /// One file per language, `{dir}/{stem}.{lang}`, one sentence per line.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (lang, side) in self.languages.iter().zip(&self.sides) {
            write_lines(&Self::file_path(dir, stem, lang), side)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str, languages: &[&str]) -> Result<Self> {
        let mut sides = Vec::new();
        for lang in languages {
            sides.push(read_lines(&Self::file_path(dir, stem, lang))?);
        }
        ParallelCorpus::new(languages.iter().map(|s| s.to_string()).collect(), sides)
            .map_err(|_| Error::invalid(format!("{stem}: language files are not line-aligned")))
    }
}

pub fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let mut buf = String::new();
    for l in lines {
        buf.push_str(&l.join(" "));
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            l.map(|s| s.split_whitespace().map(str::to_string).collect())
                .map_err(|e| Error::io(path, e))
        })
        .collect()
}

/// Draw `n` latent sequences (uniform lengths in `len_range`, uniform
/// symbols) and render each in every language.
pub fn gen_parallel_corpus(
    specs: &[LanguageSpec],
    n: usize,
    len_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<ParallelCorpus> {
    if specs.is_empty() {
        return Err(Error::invalid("no languages"));
    }
    if n == 0 {
        return Err(Error::invalid("corpus size must be >= 1"));
    }
    if len_range.is_empty() || *len_range.start() == 0 {
        return Err(Error::invalid(format!("empty or zero length range {len_range:?}")));
    }
    let v = specs[0].latent_vocab;
    for s in specs {
        s.validate()?;
        if s.latent_vocab != v {
            return Err(Error::invalid("languages must share the latent vocabulary size"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sides = vec![Vec::with_capacity(n); specs.len()];
    for _ in 0..n {
        let len = rng.gen_range(len_range.clone());
        let latent: Vec<usize> = (0..len).map(|_| rng.gen_range(0..v)).collect();
        for (side, spec) in sides.iter_mut().zip(specs) {
            side.push(spec.render(&latent)?);
        }
    }
    ParallelCorpus::new(specs.iter().map(|s| s.name.clone()).collect(), sides)
}

/// Padded id matrix, row-major `rows x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl Batch {
    /// Pad `seqs` to the longest, optionally appending EOS to each.
    pub fn from_sequences(seqs: &[&[usize]], append_eos: bool) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let extra = usize::from(append_eos);
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len() + extra).collect();
        let width = *lengths.iter().max().expect("non-empty");
        if width == 0 {
            return Err(Error::invalid("batch of empty sequences"));
        }
        let mut ids = vec![PAD; seqs.len() * width];
        let mut mask = vec![false; seqs.len() * width];
        for (r, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[r * width + t] = id;
                mask[r * width + t] = true;
            }
            if append_eos {
                ids[r * width + s.len()] = EOS;
                mask[r * width + s.len()] = true;
            }
        }
        Ok(Batch {
            ids,
            mask,
            lengths,
            width,
        })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Ids at position `t` for every row.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.rows()).map(|r| self.ids[r * self.width + t]).collect()
    }

    pub fn mask_column(&self, t: usize) -> Vec<bool> {
        (0..self.rows()).map(|r| self.mask[r * self.width + t]).collect()
    }

    pub fn sequence(&self, r: usize) -> &[usize] {
        &self.ids[r * self.width..r * self.width + self.lengths[r]]
    }
}

/// Source batch plus EOS-terminated target batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub source: Batch,
    pub target: Batch,
}

/// Id-encoded sentence pairs for one translation direction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedPairs {
    pub source: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
}

impl EncodedPairs {
    pub fn encode(
        corpus: &ParallelCorpus,
        src_lang: &str,
        tgt_lang: &str,
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
    ) -> Result<Self> {
        Ok(EncodedPairs {
            source: corpus.side(src_lang)?.iter().map(|s| src_vocab.encode(s)).collect(),
            target: corpus.side(tgt_lang)?.iter().map(|s| tgt_vocab.encode(s)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Batches sorted by length within a window of this many batches.
const BUCKET_WINDOW: usize = 20;

/// Filter pairs with either side longer than `max_len` (or empty), shuffle
/// with `seed`, group similar source lengths, pad, and append EOS to targets.
pub fn make_batches(pairs: &EncodedPairs, batch_size: usize, max_len: usize, seed: u64) -> Result<Vec<PairBatch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut keep: Vec<usize> = (0..pairs.len())
        .filter(|&i| {
            let (s, t) = (&pairs.source[i], &pairs.target[i]);
            !s.is_empty() && s.len() <= max_len && t.len() <= max_len
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid(format!(
            "no sentence pair survives the length filter (max_len {max_len})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keep.shuffle(&mut rng);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for window in keep.chunks(batch_size * BUCKET_WINDOW) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| pairs.source[i].len());
        groups.extend(w.chunks(batch_size).map(<[usize]>::to_vec));
    }
    groups.shuffle(&mut rng);
    groups
        .iter()
        .map(|g| {
            let src: Vec<&[usize]> = g.iter().map(|&i| pairs.source[i].as_slice()).collect();
            let tgt: Vec<&[usize]> = g.iter().map(|&i| pairs.target[i].as_slice()).collect();
            Ok(PairBatch {
                source: Batch::from_sequences(&src, false)?,
                target: Batch::from_sequences(&tgt, true)?,
            })
        })
        .collect()
}

/// The default three-language testbed: `E` is the identity hub, `S` merges
/// pairs of latent symbols (lossy), `F` multiplies by 3 and reverses word
/// order.
pub fn default_languages(latent_vocab: usize) -> Vec<LanguageSpec> {
    vec![
        LanguageSpec::new("E", "e", Transform::Identity, false, latent_vocab),
        LanguageSpec::new("S", "s", Transform::Merge { d: 2 }, false, latent_vocab),
        LanguageSpec::new("F", "f", Transform::Multiply { k: 3 }, true, latent_vocab),
    ]
}
