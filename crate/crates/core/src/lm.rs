//! Interpolated Witten–Bell n-gram language models and bilingual
//! cross-entropy-difference data selection.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";
pub const BOS: &str = "<s>";

const UNK_ID: u32 = 0;
const EOS_ID: u32 = 1;
const BOS_ID: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    /// Tokens seen at most this many times are mapped to UNK.
    pub unk_threshold: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            order: 3,
            unk_threshold: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextStats {
    total: u64,
    followers: HashMap<u32, u64>,
}

impl ContextStats {
    fn types(&self) -> u64 {
        self.followers.len() as u64
    }
}

/// Order-n model with interpolated Witten–Bell smoothing:
///
/// p(w|h) = (c(h,w) + T(h)·p(w|h')) / (c(h) + T(h))
///
/// where T(h) counts distinct followers of h and h' drops the oldest word.
/// The recursion bottoms out in a uniform distribution over the vocabulary
/// (UNK and EOS included, BOS excluded). Contexts never seen back off fully.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "LmFile", try_from = "LmFile")]
pub struct NGramLM {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// Keyed by history, oldest word first; the empty history is the unigram level.
    contexts: HashMap<Vec<u32>, ContextStats>,
}

#[derive(Serialize, Deserialize)]
struct LmFile {
    order: usize,
    vocab: Vec<String>,
    contexts: Vec<(Vec<u32>, Vec<(u32, u64)>)>,
}

impl From<NGramLM> for LmFile {
    fn from(lm: NGramLM) -> Self {
        let mut contexts: Vec<(Vec<u32>, Vec<(u32, u64)>)> = lm
            .contexts
            .into_iter()
            .map(|(h, stats)| {
                let mut f: Vec<(u32, u64)> = stats.followers.into_iter().collect();
                f.sort_unstable();
                (h, f)
            })
            .collect();
        contexts.sort_unstable();
        Self {
            order: lm.order,
            vocab: lm.vocab,
            contexts,
        }
    }
}

impl TryFrom<LmFile> for NGramLM {
    type Error = Error;

    fn try_from(file: LmFile) -> Result<Self> {
        let n = file.vocab.len() as u32;
        if file.order == 0 || n < 3 {
            return Err(Error::Format {
                what: "language model",
                detail: "missing order or special tokens".into(),
            });
        }
        let mut contexts = HashMap::with_capacity(file.contexts.len());
        for (h, followers) in file.contexts {
            if h.len() >= file.order
                || h.iter()
                    .chain(followers.iter().map(|(w, _)| w))
                    .any(|&id| id >= n)
            {
                return Err(Error::Format {
                    what: "language model",
                    detail: format!("context {h:?} out of range"),
                });
            }
            let stats = ContextStats {
                total: followers.iter().map(|(_, c)| c).sum(),
                followers: followers.into_iter().collect(),
            };
            contexts.insert(h, stats);
        }
        let index = file
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Self {
            order: file.order,
            vocab: file.vocab,
            index,
            contexts,
        })
    }
}

/// Trains an LM over tokenized sentences.
pub fn train_lm<S: AsRef<str>>(corpus: &[Vec<S>], config: &LmConfig) -> Result<NGramLM> {
    if config.order == 0 {
        return Err(Error::Config("LM order must be at least 1".into()));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Model(
            "language model needs a non-empty corpus".into(),
        ));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for s in corpus {
        for t in s {
            *freq.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<&str> = freq
        .iter()
        .filter(|&(w, &c)| c > config.unk_threshold && ![UNK, EOS, BOS].contains(w))
        .map(|(w, _)| *w)
        .collect();
    kept.sort_unstable();
    let mut vocab: Vec<String> = [UNK, EOS, BOS].iter().map(|s| s.to_string()).collect();
    vocab.extend(kept.into_iter().map(String::from));
    let index: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i as u32))
        .collect();

    let mut lm = NGramLM {
        order: config.order,
        vocab,
        index,
        contexts: HashMap::new(),
    };
    for s in corpus.iter().filter(|s| !s.is_empty()) {
        let ids = lm.padded_ids(s);
        for i in 1..ids.len() {
            for h_len in 0..config.order.min(i + 1) {
                let h = ids[i - h_len..i].to_vec();
                let stats = lm.contexts.entry(h).or_default();
                stats.total += 1;
                *stats.followers.entry(ids[i]).or_default() += 1;
            }
        }
    }
    Ok(lm)
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of predictable types (UNK and EOS included, BOS excluded).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() - 1
    }

    /// Predictable tokens, including UNK and EOS.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocab
            .iter()
            .enumerate()
            .filter(|&(i, _)| i as u32 != BOS_ID)
            .map(|(_, w)| w.as_str())
    }

    fn id(&self, token: &str) -> u32 {
        self.index
            .get(token)
            .copied()
            .filter(|&i| i != BOS_ID)
            .unwrap_or(UNK_ID)
    }

    fn padded_ids<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(sentence.len() + 2);
        ids.push(BOS_ID);
        ids.extend(sentence.iter().map(|t| self.id(t.as_ref())));
        ids.push(EOS_ID);
        ids
    }

    fn prob_ids(&self, history: &[u32], w: u32) -> f64 {
        let mut p = 1.0 / self.vocab_size() as f64;
        for start in (0..=history.len()).rev() {
            if let Some(stats) = self.contexts.get(&history[start..]) {
                let t = stats.types() as f64;
                let c = stats.followers.get(&w).copied().unwrap_or(0) as f64;
                p = (c + t * p) / (stats.total as f64 + t);
            }
        }
        p
    }

    /// p(word | context); the context is truncated to the last order−1
    /// tokens. A leading `<s>` in the context denotes sentence start.
    pub fn prob<S: AsRef<str>>(&self, context: &[S], word: &str) -> f64 {
        let ids: Vec<u32> = context
            .iter()
            .enumerate()
            .map(|(i, t)| match t.as_ref() {
                BOS if i == 0 => BOS_ID,
                t => self.id(t),
            })
            .collect();
        let keep = self.order - 1;
        let h = &ids[ids.len().saturating_sub(keep)..];
        self.prob_ids(h, self.id(word))
    }

    /// Cross-entropy in bits per token; the sentence-final EOS counts as a token.
    pub fn cross_entropy<S: AsRef<str>>(&self, sentence: &[S]) -> Result<f64> {
        if sentence.is_empty() {
            return Err(Error::Contract("cross-entropy of an empty sentence".into()));
        }
        let ids = self.padded_ids(sentence);
        let keep = self.order - 1;
        let mut bits = 0.0;
        for i in 1..ids.len() {
            let h = &ids[i.saturating_sub(keep)..i];
            bits -= self.prob_ids(h, ids[i]).log2();
        }
        Ok(bits / (ids.len() - 1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: SentencePair,
    pub h_src_in: f64,
    pub h_src_out: f64,
    pub h_trg_in: f64,
    pub h_trg_out: f64,
    pub score: f64,
}

/// |H_src(in) − H_src(out)| + |H_trg(in) − H_trg(out)|; lower is more in-domain.
pub fn score_pair(
    pair: &SentencePair,
    lm_in_src: &NGramLM,
    lm_out_src: &NGramLM,
    lm_in_trg: &NGramLM,
    lm_out_trg: &NGramLM,
) -> Result<ScoredPair> {
    let h_src_in = lm_in_src.cross_entropy(&pair.source)?;
    let h_src_out = lm_out_src.cross_entropy(&pair.source)?;
    let h_trg_in = lm_in_trg.cross_entropy(&pair.target)?;
    let h_trg_out = lm_out_trg.cross_entropy(&pair.target)?;
    Ok(ScoredPair {
        pair: pair.clone(),
        h_src_in,
        h_src_out,
        h_trg_in,
        h_trg_out,
        score: (h_src_in - h_src_out).abs() + (h_trg_in - h_trg_out).abs(),
    })
}

/// In-domain and out-of-domain LMs for both languages.
pub struct SelectionModels {
    pub in_src: NGramLM,
    pub out_src: NGramLM,
    pub in_trg: NGramLM,
    pub out_trg: NGramLM,
}

impl SelectionModels {
    pub fn score_all(&self, pairs: &[SentencePair]) -> Result<Vec<ScoredPair>> {
        pairs
            .iter()
            .map(|p| score_pair(p, &self.in_src, &self.out_src, &self.in_trg, &self.out_trg))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub validation: Vec<ScoredPair>,
    pub selected: Vec<ScoredPair>,
    /// Everything after the validation block, in rank order.
    pub sorted_all: Vec<ScoredPair>,
}

/// Stable ascending sort by score (ties by original index), then carve off
/// the validation block and the selection.
pub fn rank_and_split(mut scored: Vec<ScoredPair>, n_val: usize, n_select: usize) -> Result<Split> {
    if scored.len() < n_val + 1 {
        return Err(Error::Config(format!(
            "corpus of {} pairs is too small for a {n_val}-pair validation split",
            scored.len()
        )));
    }
    if let Some(bad) = scored.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite selection score for pair {}",
            bad.pair.original_index
        )));
    }
    scored.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.pair.original_index.cmp(&b.pair.original_index))
    });
    let sorted_all = scored.split_off(n_val);
    let take = n_select.min(sorted_all.len());
    Ok(Split {
        validation: scored,
        selected: sorted_all[..take].to_vec(),
        sorted_all,
    })
}

/// TSV rows: original_index, score, h_src_in, h_src_out, h_trg_in, h_trg_out.
pub fn scores_tsv(scored: &[ScoredPair]) -> String {
    let mut out = String::new();
    for s in scored {
        writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            s.pair.original_index, s.score, s.h_src_in, s.h_src_out, s.h_trg_in, s.h_trg_out
        )
        .expect("write to String");
    }
    out
}

/// Parses [`scores_tsv`] output back into (original_index, score) rows.
pub fn parse_scores_tsv(text: &str) -> Result<Vec<(usize, f64)>> {
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Format {
                what: "score TSV",
                detail: format!("line {}: {line:?}", n + 1),
            };
            let mut cols = line.split('\t');
            let idx = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let score = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            if cols.count() != 4 {
                return Err(bad());
            }
            Ok((idx, score))
        })
        .collect()
}
