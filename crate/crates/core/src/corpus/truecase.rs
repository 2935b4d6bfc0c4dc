//! Unigram majority-casing truecaser.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Surface-casing counts per lowercased token, gathered from
/// non-sentence-initial positions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruecaseModel {
    casings: BTreeMap<String, BTreeMap<String, u64>>,
}

impl TruecaseModel {
    pub fn train<S: AsRef<str>>(sentences: &[Vec<S>]) -> Result<Self> {
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::Model("truecaser needs a non-empty corpus".into()));
        }
        let mut casings: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for sentence in sentences {
            for tok in sentence.iter().skip(1) {
                let tok = tok.as_ref();
                *casings
                    .entry(tok.to_lowercase())
                    .or_default()
                    .entry(tok.to_string())
                    .or_default() += 1;
            }
        }
        Ok(Self { casings })
    }

    /// Most frequent surface form; ties go to the lexicographically
    /// smallest form.
    pub fn best_casing(&self, token: &str) -> Option<&str> {
        let forms = self.casings.get(&token.to_lowercase())?;
        forms
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(form, _)| form.as_str())
    }

    /// Recases the first token only; later and unknown tokens pass through.
    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let t = t.as_ref();
                match (i, self.best_casing(t)) {
                    (0, Some(best)) => best.to_string(),
                    _ => t.to_string(),
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.casings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.casings.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        crate::tensor::io::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Uppercases the first letter of the first token that has one.
pub fn detruecase<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut out: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    if let Some(tok) = out.iter_mut().find(|t| t.chars().any(char::is_alphabetic)) {
        let mut chars = tok.chars();
        let mut fixed = String::with_capacity(tok.len());
        for c in chars.by_ref() {
            if c.is_alphabetic() {
                fixed.extend(c.to_uppercase());
                break;
            }
            fixed.push(c);
        }
        fixed.extend(chars);
        *tok = fixed;
    }
    out
}
