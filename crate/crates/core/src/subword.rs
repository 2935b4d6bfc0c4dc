//! Joint byte-pair encoding.
//!
//! Each word becomes its characters followed by a separate `</w>` symbol;
//! merges then glue adjacent symbols. A subword ending in `</w>` closes a
//! word, which is all `decode` needs to undo segmentation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
const MERGES_HEADER: &str = "#version: transference-bpe 1";

type Pair = (String, String);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
    symbols: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BpeTrainer {
    /// Upper bound on the final symbol vocabulary (end-of-word marker included).
    pub target_vocab: usize,
    pub max_merges: Option<usize>,
    pub min_frequency: u64,
}

impl Default for BpeTrainer {
    fn default() -> Self {
        Self {
            target_vocab: 28_000,
            max_merges: None,
            min_frequency: 2,
        }
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(String::from).collect();
    s.push(END_OF_WORD.to_string());
    s
}

fn pairs_of(symbols: &[String]) -> impl Iterator<Item = Pair> + '_ {
    symbols.windows(2).map(|w| (w[0].clone(), w[1].clone()))
}

fn merge_word(symbols: &[String], pair: &Pair) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeTrainer {
    /// Learns merges from word-type frequencies over every given sentence
    /// of every corpus (pass both sides of the parallel data for a joint model).
    pub fn learn<S: AsRef<str>>(&self, corpora: &[&[Vec<S>]]) -> Result<BpeModel> {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for corpus in corpora {
            for sentence in corpus.iter() {
                for w in sentence {
                    *freq.entry(w.as_ref()).or_default() += 1;
                }
            }
        }
        if freq.is_empty() {
            return Err(Error::Model("BPE learning needs a non-empty corpus".into()));
        }
        let mut types: Vec<(&str, u64)> = freq.into_iter().collect();
        types.sort_unstable();
        self.learn_from_counts(types.into_iter().map(|(w, c)| (w.to_string(), c)).collect())
    }

    pub fn learn_from_counts(&self, types: Vec<(String, u64)>) -> Result<BpeModel> {
        if types.is_empty() {
            return Err(Error::Model("BPE learning needs a non-empty corpus".into()));
        }
        let mut words: Vec<(Vec<String>, u64)> = types
            .iter()
            .map(|(w, c)| (initial_symbols(w), *c))
            .collect();
        let mut symbols: BTreeSet<String> =
            words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();

        let mut counts: HashMap<Pair, u64> = HashMap::new();
        let mut occurs: HashMap<Pair, HashSet<usize>> = HashMap::new();
        for (i, (syms, c)) in words.iter().enumerate() {
            for p in pairs_of(syms) {
                *counts.entry(p.clone()).or_default() += c;
                occurs.entry(p).or_default().insert(i);
            }
        }

        let mut merges = Vec::new();
        let max_merges = self.max_merges.unwrap_or(usize::MAX);
        while merges.len() < max_merges && symbols.len() < self.target_vocab {
            let best = counts
                .iter()
                .filter(|(_, &c)| c >= self.min_frequency.max(1))
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)));
            let Some((pair, _)) = best else { break };
            let pair = pair.clone();

            let mut touched: Vec<usize> = occurs
                .remove(&pair)
                .unwrap_or_default()
                .into_iter()
                .collect();
            touched.sort_unstable();
            for i in touched {
                let (old, c) = &words[i];
                let c = *c;
                for p in pairs_of(old) {
                    if let Some(n) = counts.get_mut(&p) {
                        *n -= c;
                        if *n == 0 {
                            counts.remove(&p);
                        }
                    }
                    if let Some(set) = occurs.get_mut(&p) {
                        set.remove(&i);
                    }
                }
                let new = merge_word(old, &pair);
                for p in pairs_of(&new) {
                    *counts.entry(p.clone()).or_default() += c;
                    occurs.entry(p).or_default().insert(i);
                }
                words[i].0 = new;
            }
            counts.remove(&pair);
            symbols.insert(format!("{}{}", pair.0, pair.1));
            merges.push(pair);
        }
        Ok(BpeModel::from_parts(merges, symbols))
    }
}

/// Learns a BPE model with the default frequency floor.
pub fn learn_bpe<S: AsRef<str>>(corpora: &[&[Vec<S>]], target_vocab: usize) -> Result<BpeModel> {
    BpeTrainer {
        target_vocab,
        ..Default::default()
    }
    .learn(corpora)
}

impl BpeModel {
    fn from_parts(merges: Vec<Pair>, symbols: BTreeSet<String>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Self {
            merges,
            ranks,
            symbols,
        }
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    /// Every symbol the model can emit for words over the training alphabet.
    pub fn symbols(&self) -> &BTreeSet<String> {
        &self.symbols
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    /// Segments one word by replaying merges in priority order.
    pub fn apply_word(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w))
                })
                .min_by_key(|(r, _)| *r);
            let Some((r, _)) = best else { break };
            syms = merge_word(&syms, &self.merges[r]);
        }
        syms
    }

    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
        let mut out = Vec::new();
        for t in tokens {
            let t = t.as_ref();
            out.extend_from_slice(cache.entry(t).or_insert_with(|| self.apply_word(t)));
        }
        out
    }

    pub fn write_merges(&self, path: &Path) -> Result<()> {
        let mut text = String::from(MERGES_HEADER);
        text.push('\n');
        for (a, b) in &self.merges {
            text.push_str(a);
            text.push(' ');
            text.push_str(b);
            text.push('\n');
        }
        crate::tensor::io::write_atomic(path, text.as_bytes())
    }

    /// Loads a merge file. The symbol set is rebuilt from the merges alone,
    /// so base characters that never merged are unknown to the result.
    pub fn read_merges(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_merges(&text)
    }

    pub fn parse_merges(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.starts_with("#version") => {}
            _ => {
                return Err(Error::Format {
                    what: "BPE merges",
                    detail: "missing version header".into(),
                })
            }
        }
        let mut merges = Vec::new();
        let mut symbols = BTreeSet::from([END_OF_WORD.to_string()]);
        for (n, line) in lines.enumerate() {
            let (a, b) = line
                .split_once(' ')
                .filter(|(a, b)| !a.is_empty() && !b.is_empty() && !b.contains(' '))
                .ok_or_else(|| Error::Format {
                    what: "BPE merges",
                    detail: format!("line {}: {line:?}", n + 2),
                })?;
            symbols.insert(a.to_string());
            symbols.insert(b.to_string());
            symbols.insert(format!("{a}{b}"));
            merges.push((a.to_string(), b.to_string()));
        }
        let model = Self::from_parts(merges, symbols);
        if model.ranks.len() != model.merges.len() {
            return Err(Error::Format {
                what: "BPE merges",
                detail: "duplicate merge".into(),
            });
        }
        Ok(model)
    }
}

/// Joins subwords back into words.
pub fn decode_bpe<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for s in subwords {
        let s = s.as_ref();
        match s.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            }
            None => cur.push_str(s),
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}
