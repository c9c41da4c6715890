//! Corpus BLEU, word-level edit rate ("TER-approx"), T-B and exact match.
//!
//! All scores are in percentage points.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Clipped n-gram matches, `n = 1..=max_n`.
    pub matches: Vec<usize>,
    /// Hypothesis n-gram counts.
    pub totals: Vec<usize>,
    /// Modified precisions after smoothing.
    pub precisions: Vec<f64>,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub brevity_penalty: f64,
    pub score: f64,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with add-one smoothing of zero-match precisions for
/// `n >= 2`.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::invalid("bleu: empty hypothesis set"));
    }
    if max_n == 0 {
        return Err(Error::invalid("bleu: max_n must be >= 1"));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::invalid("bleu: empty reference"));
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for (h, r) in hypotheses.iter().zip(references) {
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if matches[i] == 0 && i >= 1 {
                1.0 / (totals[i] + 1) as f64
            } else if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport {
        matches,
        totals,
        precisions,
        hyp_len,
        ref_len,
        brevity_penalty,
        score,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRateReport {
    pub distance: usize,
    pub ref_len: usize,
    pub rate: f64,
}

/// Word-level Levenshtein distance, two rows at a time.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Unit-cost edits turning the hypothesis into the reference, per
/// reference token.
pub fn edit_rate<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<EditRateReport> {
    if reference.is_empty() {
        return Err(Error::invalid("edit_rate: empty reference"));
    }
    let distance = levenshtein(hypothesis, reference);
    Ok(EditRateReport {
        distance,
        ref_len: reference.len(),
        rate: distance as f64 / reference.len() as f64,
    })
}

/// `(TER - BLEU) / 2`; lower is better.
pub fn tb_score(ter_percent: f64, bleu_percent: f64) -> f64 {
    (ter_percent - bleu_percent) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub ter_approx: f64,
    pub tb: f64,
    pub exact_match: f64,
}

/// BLEU-4, corpus edit rate (total edits over total reference length), T-B
/// and percentage of exact matches.
pub fn score_corpus<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<EvalReport> {
    let b = bleu(hypotheses, references, 4)?;
    let mut edits = 0;
    let mut exact = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        edits += edit_rate(h, r)?.distance;
        exact += usize::from(h == r);
    }
    let ter = 100.0 * edits as f64 / b.ref_len as f64;
    Ok(EvalReport {
        bleu: b.score,
        ter_approx: ter,
        tb: tb_score(ter, b.score),
        exact_match: 100.0 * exact as f64 / hypotheses.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_examples() {
        let r = bleu(&[w("a b c d")], &[w("a b c e")], 2).unwrap();
        assert_eq!(r.brevity_penalty, 1.0);
        assert_eq!(r.precisions, vec![0.75, 2.0 / 3.0]);
        assert!((r.score - 100.0 * 0.5f64.sqrt()).abs() < 1e-9);
        assert!((r.score - 70.71).abs() < 0.01);

        let same = vec![w("x y z w"), w("p q r")];
        assert_eq!(bleu(&same, &same, 4).unwrap().score, 100.0);
        let empty: Vec<Vec<String>> = vec![];
        assert!(bleu(&empty, &empty, 4).is_err());
        assert!(bleu(&[w("a")], &[w("a"), w("b")], 4).is_err());
    }

    #[test]
    fn edit_rate_examples() {
        assert_eq!(edit_rate(&w("a b c"), &w("a b c")).unwrap().rate, 0.0);
        let r = edit_rate(&w("a x c"), &w("a b c")).unwrap();
        assert_eq!(r.distance, 1);
        assert!((r.rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(edit_rate(&[], &w("a b c d")).unwrap().rate, 1.0);
        assert!(edit_rate(&w("a"), &[]).is_err());
    }

    #[test]
    fn tb_examples() {
        assert_eq!(tb_score(30.0, 20.0), 5.0);
        assert_eq!(tb_score(12.5, 12.5), 0.0);
        assert_eq!(tb_score(0.0, 100.0), -50.0);
    }

    #[test]
    fn perfect_corpus_limits() {
        let refs = vec![vec![4, 5, 6], vec![7, 8, 9, 4]];
        let r = score_corpus(&refs, &refs).unwrap();
        assert_eq!(r, EvalReport {
            bleu: 100.0,
            ter_approx: 0.0,
            tb: -50.0,
            exact_match: 100.0
        });
    }

    /// Brute-force counts: every hypothesis n-gram is compared against every
    /// reference position.
    fn oracle_counts(h: &[usize], r: &[usize], n: usize) -> (usize, usize) {
        if h.len() < n {
            return (0, 0);
        }
        let hg: Vec<&[usize]> = (0..=h.len() - n).map(|i| &h[i..i + n]).collect();
        let rg: Vec<&[usize]> = if r.len() >= n { (0..=r.len() - n).map(|i| &r[i..i + n]).collect() } else { vec![] };
        let mut seen: Vec<&[usize]> = Vec::new();
        let mut matched = 0;
        for g in &hg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let ch = hg.iter().filter(|x| *x == g).count();
            let cr = rg.iter().filter(|x| *x == g).count();
            matched += ch.min(cr);
        }
        (matched, hg.len())
    }

    fn oracle_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> f64 {
        let mut logs = 0.0;
        for n in 1..=max_n {
            let (mut m, mut t) = (0, 0);
            for (h, r) in hyps.iter().zip(refs) {
                let (a, b) = oracle_counts(h, r, n);
                m += a;
                t += b;
            }
            let p = match (m, n) {
                (0, 1) => return 0.0,
                (0, _) => 1.0 / (t + 1) as f64,
                _ => m as f64 / t as f64,
            };
            logs += p.ln();
        }
        let c: usize = hyps.iter().map(Vec::len).sum();
        let r: usize = refs.iter().map(Vec::len).sum();
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        100.0 * bp * (logs / max_n as f64).exp()
    }

    /// Full dynamic-programming table.
    fn oracle_levenshtein(a: &[usize], b: &[usize]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, x) in d[0].iter_mut().enumerate() {
            *x = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
        prop::collection::vec(
            (
                prop::collection::vec(0usize..5, 1..=10),
                prop::collection::vec(0usize..5, 1..=10),
            ),
            1..5,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn bleu_matches_oracle(pairs in corpus()) {
            let hyps: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
            let r = bleu(&hyps, &refs, 4).unwrap();
            for n in 1..=4 {
                let (m, t) = hyps.iter().zip(&refs).map(|(h, r)| oracle_counts(h, r, n))
                    .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
                prop_assert_eq!(r.matches[n - 1], m);
                prop_assert_eq!(r.totals[n - 1], t);
            }
            prop_assert_eq!(r.score, oracle_bleu(&hyps, &refs, 4));
            prop_assert!((0.0..=100.0).contains(&r.score));
        }

        #[test]
        fn edit_rate_matches_oracle(h in prop::collection::vec(0usize..5, 0..=10), r in prop::collection::vec(0usize..5, 1..=10)) {
            let rep = edit_rate(&h, &r).unwrap();
            prop_assert_eq!(rep.distance, oracle_levenshtein(&h, &r));
            prop_assert!(rep.rate >= 0.0);
        }

        #[test]
        fn bleu_invariant_under_renaming(pairs in corpus(), perm in Just([3usize, 0, 4, 1, 2])) {
            let hyps: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
            let rename = |c: &Vec<Vec<usize>>| -> Vec<Vec<usize>> {
                c.iter().map(|s| s.iter().map(|&x| perm[x]).collect()).collect()
            };
            let a = bleu(&hyps, &refs, 4).unwrap().score;
            let b = bleu(&rename(&hyps), &rename(&refs), 4).unwrap().score;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn tb_decreases_with_bleu(ter in 0.0f64..200.0, b1 in 0.0f64..100.0, d in 0.001f64..50.0) {
            prop_assert!(tb_score(ter, b1 + d) < tb_score(ter, b1));
        }
    }
}
