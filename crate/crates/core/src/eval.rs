//! Corpus BLEU and TER with one reference per line.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
/// Longest phrase TER will consider moving.
pub const MAX_SHIFT_SPAN: usize = 10;
pub const MAX_SHIFTS: usize = 50;

/// Both sides go through the same tokenizer, without escaping.
pub fn eval_tokens(line: &str) -> Vec<String> {
    tokenize(line, true)
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// ×100, unrounded.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    counts
}

fn check_lines<T>(hyps: &[T], refs: &[T]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Alignment {
            source_lines: hyps.len(),
            target_lines: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Contract("cannot score an empty corpus".into()));
    }
    Ok(())
}

/// Corpus BLEU on tokenized sentences: clipped n-gram precisions for
/// n = 1..4, geometric mean, brevity penalty. No smoothing. Orders for
/// which the hypotheses contain no n-gram at all (every line shorter than
/// n) are left out of the mean rather than zeroing it.
pub fn bleu_tokens<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuScore> {
    check_lines(hyps, refs)?;
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let orders: Vec<f64> = (0..MAX_ORDER)
        .filter(|&n| totals[n] > 0)
        .map(|n| precisions[n])
        .collect();
    let score = if orders.is_empty() || orders.contains(&0.0) {
        0.0
    } else {
        100.0
            * brevity_penalty
            * (orders.iter().map(|p| p.ln()).sum::<f64>() / orders.len() as f64).exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        matches,
        totals,
        hyp_len,
        ref_len,
    })
}

pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<BleuScore> {
    let h: Vec<_> = hyps.iter().map(|l| eval_tokens(l.as_ref())).collect();
    let r: Vec<_> = refs.iter().map(|l| eval_tokens(l.as_ref())).collect();
    bleu_tokens(&h, &r)
}

/// Levenshtein distance over tokens with unit costs.
pub fn edit_distance<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h.as_ref() != r.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Moves `hyp[from..from+len]` so that it starts at `to` in the result.
pub fn apply_shift<T: Clone>(hyp: &[T], from: usize, len: usize, to: usize) -> Vec<T> {
    let mut rest: Vec<T> = hyp[..from]
        .iter()
        .chain(&hyp[from + len..])
        .cloned()
        .collect();
    let span = hyp[from..from + len].to_vec();
    rest.splice(to..to, span);
    rest
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerStats {
    pub edits: usize,
    pub shifts: usize,
    pub ref_len: usize,
}

/// Sentence TER edits: greedy phrase shifts, each costing one edit, then
/// Levenshtein distance. A shift of a span that also occurs in the
/// reference is taken only if it lowers the total; the largest gain wins,
/// ties going to the leftmost, then shortest span, then lowest target.
pub fn ter_sentence<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Result<TerStats> {
    if reference.is_empty() {
        return Err(Error::Contract("TER needs a non-empty reference".into()));
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let mut h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let mut ed = edit_distance(&h, &r);
    let mut shifts = 0;
    while shifts < MAX_SHIFTS && ed > 0 {
        // (new ed, from, len, to)
        let mut best: Option<(usize, usize, usize, usize)> = None;
        for from in 0..h.len() {
            for len in 1..=MAX_SHIFT_SPAN.min(h.len() - from) {
                let span = &h[from..from + len];
                let starts: Vec<usize> = r
                    .windows(len)
                    .enumerate()
                    .filter(|(_, w)| *w == span)
                    .map(|(i, _)| i)
                    .collect();
                if starts.is_empty() {
                    break;
                }
                let limit = h.len() - len;
                let mut targets: Vec<usize> = starts
                    .iter()
                    .flat_map(|&s| [s.saturating_sub(1), s, s + 1])
                    .map(|t| t.min(limit))
                    .filter(|&t| t != from)
                    .collect();
                targets.sort_unstable();
                targets.dedup();
                for to in targets {
                    let moved = apply_shift(&h, from, len, to);
                    let e = edit_distance(&moved, &r);
                    if e + 1 < ed && best.is_none_or(|b| e < b.0) {
                        best = Some((e, from, len, to));
                    }
                }
            }
        }
        match best {
            Some((e, from, len, to)) => {
                h = apply_shift(&h, from, len, to);
                ed = e;
                shifts += 1;
            }
            None => break,
        }
    }
    Ok(TerStats {
        edits: ed + shifts,
        shifts,
        ref_len: r.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerScore {
    /// ×100, unrounded.
    pub score: f64,
    pub edits: usize,
    pub shifts: usize,
    pub ref_len: usize,
}

pub fn ter_tokens<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<TerScore> {
    check_lines(hyps, refs)?;
    let mut total = TerStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        let s = ter_sentence(h, r)?;
        total.edits += s.edits;
        total.shifts += s.shifts;
        total.ref_len += s.ref_len;
    }
    Ok(TerScore {
        score: 100.0 * total.edits as f64 / total.ref_len as f64,
        edits: total.edits,
        shifts: total.shifts,
        ref_len: total.ref_len,
    })
}

pub fn ter<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<TerScore> {
    let h: Vec<_> = hyps.iter().map(|l| eval_tokens(l.as_ref())).collect();
    let r: Vec<_> = refs.iter().map(|l| eval_tokens(l.as_ref())).collect();
    ter_tokens(&h, &r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Rounded to one decimal.
    pub bleu: f64,
    /// Rounded to one decimal.
    pub ter: f64,
    pub sentences: usize,
    pub bleu_detail: BleuScore,
    pub ter_detail: TerScore,
}

pub fn evaluate<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<EvalReport> {
    let b = bleu(hyps, refs)?;
    let t = ter(hyps, refs)?;
    Ok(EvalReport {
        bleu: round1(b.score),
        ter: round1(t.score),
        sentences: hyps.len(),
        bleu_detail: b,
        ter_detail: t,
    })
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!("BLEU {:.1}\nTER {:.1}", self.bleu, self.ter)
    }
}
