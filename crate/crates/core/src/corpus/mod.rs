//! Parallel-corpus preparation: cleaning, normalization, tokenization,
//! truecasing, and the inverse postprocessing applied to system output.

mod normalize;
mod tokenize;
mod truecase;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use normalize::{nfc, normalize_punctuation, PUNCTUATION_TABLE};
pub use tokenize::{detokenize, escape, tokenize, unescape, ABBREVIATIONS};
pub use truecase::{detruecase, TruecaseModel};

use crate::error::{Error, Result};

/// One aligned source/target sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub original_index: usize,
}

impl SentencePair {
    pub fn from_lines(source: &str, target: &str, original_index: usize) -> Self {
        let split = |s: &str| s.split_whitespace().map(String::from).collect();
        Self {
            source: split(source),
            target: split(target),
            original_index,
        }
    }

    pub fn source_line(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_line(&self) -> String {
        self.target.join(" ")
    }
}

/// Zips two line lists into pairs; fails when the counts differ.
pub fn align<S: AsRef<str>>(source: &[S], target: &[S]) -> Result<Vec<SentencePair>> {
    if source.len() != target.len() {
        return Err(Error::Alignment {
            source_lines: source.len(),
            target_lines: target.len(),
        });
    }
    Ok(source
        .iter()
        .zip(target)
        .enumerate()
        .map(|(i, (s, t))| SentencePair::from_lines(s.as_ref(), t.as_ref(), i))
        .collect())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(String::from).collect())
}

/// Raw lines; invalid UTF-8 lines come back as `None`.
pub fn read_byte_lines(path: &Path) -> Result<Vec<Option<String>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines
        .into_iter()
        .map(|l| {
            let l = l.strip_suffix(b"\r").unwrap_or(l);
            String::from_utf8(l.to_vec()).ok()
        })
        .collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        buf.extend_from_slice(l.as_ref().as_bytes());
        buf.push(b'\n');
    }
    crate::tensor::io::write_atomic(path, &buf)
}

/// Reads two parallel files, dropping pairs where either side is not UTF-8.
/// Returns the pairs and the number dropped.
pub fn read_parallel(source: &Path, target: &Path) -> Result<(Vec<SentencePair>, usize)> {
    let src = read_byte_lines(source)?;
    let tgt = read_byte_lines(target)?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    let mut invalid = 0;
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        match (s, t) {
            (Some(s), Some(t)) => pairs.push(SentencePair::from_lines(s, t, i)),
            _ => invalid += 1,
        }
    }
    Ok((pairs, invalid))
}

pub fn write_parallel(source: &Path, target: &Path, pairs: &[SentencePair]) -> Result<()> {
    let src: Vec<String> = pairs.iter().map(SentencePair::source_line).collect();
    let tgt: Vec<String> = pairs.iter().map(SentencePair::target_line).collect();
    write_lines(source, &src)?;
    write_lines(target, &tgt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_ratio: f64,
    pub drop_duplicates: bool,
    pub drop_identical: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            min_tokens: 1,
            max_tokens: 100,
            max_ratio: 3.0,
            drop_duplicates: true,
            drop_identical: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Empty,
    TooShort,
    TooLong,
    LengthRatio,
    Identical,
    Duplicate,
    InvalidUtf8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
}

impl CleanReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }
}

fn reject_reason(pair: &SentencePair, cfg: &CleanConfig) -> Option<DropReason> {
    let (s, t) = (pair.source.len(), pair.target.len());
    if s == 0 || t == 0 {
        return Some(DropReason::Empty);
    }
    if s < cfg.min_tokens || t < cfg.min_tokens {
        return Some(DropReason::TooShort);
    }
    if s > cfg.max_tokens || t > cfg.max_tokens {
        return Some(DropReason::TooLong);
    }
    let ratio = s.max(t) as f64 / s.min(t) as f64;
    if ratio > cfg.max_ratio {
        return Some(DropReason::LengthRatio);
    }
    if cfg.drop_identical && pair.source == pair.target {
        return Some(DropReason::Identical);
    }
    None
}

/// Filters pairs by the length, ratio, identity and duplicate rules.
/// Bounds apply to each side separately. Survivors keep their order.
pub fn clean_corpus(
    pairs: &[SentencePair],
    cfg: &CleanConfig,
) -> Result<(Vec<SentencePair>, CleanReport)> {
    if cfg.min_tokens > cfg.max_tokens || cfg.max_ratio < 1.0 {
        return Err(Error::Config(format!(
            "cleaning bounds invalid: min {} max {} ratio {}",
            cfg.min_tokens, cfg.max_tokens, cfg.max_ratio
        )));
    }
    let mut report = CleanReport {
        input: pairs.len(),
        ..Default::default()
    };
    let mut seen: HashSet<(&[String], &[String])> = HashSet::new();
    let mut kept = Vec::new();
    for pair in pairs {
        let reason = reject_reason(pair, cfg).or_else(|| {
            let fresh = seen.insert((&pair.source, &pair.target));
            (cfg.drop_duplicates && !fresh).then_some(DropReason::Duplicate)
        });
        match reason {
            Some(r) => *report.dropped.entry(r).or_default() += 1,
            None => kept.push(pair.clone()),
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}

/// Normalize then tokenize one raw line.
pub fn preprocess_line(line: &str, no_escape: bool) -> Vec<String> {
    tokenize(&normalize_punctuation(line), no_escape)
}

/// Detokenize, compose to NFC, and normalize punctuation.
pub fn postprocess<S: AsRef<str>>(tokens: &[S]) -> String {
    normalize_punctuation(&nfc(&detokenize(tokens)))
}

/// Writes a JSON value atomically, pretty-printed.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.write_all(b"\n").expect("write to Vec");
    crate::tensor::io::write_atomic(path, &bytes)
}
