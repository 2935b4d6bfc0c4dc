//! Beam search over any step-wise next-token distribution.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, DecoderState, IncrementalDecoder, SourceBatch};
use crate::vocab::{Vocab, BOS_ID, EOS_ID, PAD_ID};

/// A left-to-right model: log-probabilities for the next token given a state.
pub trait SequenceModel {
    type State: Clone;
    fn start(&self) -> Result<(Self::State, Vec<f32>)>;
    fn advance(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f32>)>;
    fn eos(&self) -> usize;
}

impl SequenceModel for IncrementalDecoder<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<(DecoderState, Vec<f32>)> {
        let (s, lp) = IncrementalDecoder::start(self)?;
        Ok((s, forbid_specials(lp)))
    }

    fn advance(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f32>)> {
        let (s, lp) = IncrementalDecoder::advance(self, state, token)?;
        Ok((s, forbid_specials(lp)))
    }

    fn eos(&self) -> usize {
        EOS_ID
    }
}

/// PAD and BOS are never generated.
fn forbid_specials(mut lp: Vec<f32>) -> Vec<f32> {
    lp[PAD_ID] = f32::NEG_INFINITY;
    lp[BOS_ID] = f32::NEG_INFINITY;
    lp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids; a finished hypothesis ends in EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// log p / |y|^α, counting EOS.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(alpha)
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((_, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub beam: usize,
    /// Generated tokens, EOS included.
    pub max_len: usize,
    pub length_alpha: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            max_len: 256,
            length_alpha: 1.0,
        }
    }
}

struct Live<S> {
    state: S,
    next: Vec<f32>,
    hyp: Hypothesis,
}

/// Ranked hypotheses, best first. Each step keeps the `beam` best
/// expansions by total log-probability; those ending in EOS are set aside
/// and free their slot. Search stops once `beam` hypotheses have finished,
/// nothing is live, or `max_len` tokens have been generated. Unfinished
/// hypotheses are returned only if none finished.
pub fn beam_search<M: SequenceModel>(model: &M, cfg: &SearchConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam and max_len must be positive".into()));
    }
    let eos = model.eos();
    let (state, next) = model.start()?;
    let mut live = vec![Live {
        state,
        next,
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for len in 1..=cfg.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, l) in live.iter().enumerate() {
            for (tok, &lp) in l.next.iter().enumerate() {
                if lp.is_finite() {
                    cands.push((l.hyp.log_prob + lp as f64, i, tok));
                }
            }
        }
        // Best first; ties resolve to the earlier parent, then the lower id.
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then((a.1, a.2).cmp(&(b.1, b.2)))
        });
        cands.truncate(cfg.beam);
        let mut next_live = Vec::with_capacity(cands.len());
        for (lp, i, tok) in cands {
            let parent = &live[i];
            let mut tokens = parent.hyp.tokens.clone();
            tokens.push(tok);
            let done = tok == eos;
            let hyp = Hypothesis {
                tokens,
                log_prob: lp,
                finished: done,
            };
            if done {
                finished.push(hyp);
            } else if len < cfg.max_len {
                let (state, next) = model.advance(&parent.state, tok)?;
                next_live.push(Live { state, next, hyp });
            } else {
                next_live.push(Live {
                    state: parent.state.clone(),
                    next: Vec::new(),
                    hyp,
                });
            }
        }
        live = next_live;
        if finished.len() >= cfg.beam || live.is_empty() {
            break;
        }
    }
    let mut out = if finished.is_empty() {
        live.into_iter().map(|l| l.hyp).collect()
    } else {
        finished
    };
    out.sort_by(|a, b| {
        b.score(cfg.length_alpha)
            .partial_cmp(&a.score(cfg.length_alpha))
            .unwrap_or(Ordering::Equal)
    });
    Ok(out)
}

/// Argmax decoding; the lowest id wins ties.
pub fn greedy<M: SequenceModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    let (mut state, mut next) = model.start()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let (tok, lp) = next
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &lp)| {
                if lp > best.1 {
                    (i, lp)
                } else {
                    best
                }
            });
        if lp == f32::NEG_INFINITY {
            break;
        }
        hyp.tokens.push(tok);
        hyp.log_prob += lp as f64;
        if tok == model.eos() {
            hyp.finished = true;
            break;
        }
        if hyp.tokens.len() < max_len {
            (state, next) = model.advance(&state, tok)?;
        }
    }
    Ok(hyp)
}

/// A checkpoint with its source-word and subword vocabularies.
pub struct Translator<'a> {
    pub checkpoint: &'a Checkpoint,
    pub word_vocab: &'a Vocab,
    pub bpe_vocab: &'a Vocab,
    pub search: SearchConfig,
}

impl Translator<'_> {
    fn decoder<S: AsRef<str>>(
        &self,
        words: &[S],
        subwords: &[S],
    ) -> Result<IncrementalDecoder<'_>> {
        if words.is_empty() || subwords.is_empty() {
            return Err(Error::Contract("cannot translate an empty source".into()));
        }
        let source = SourceBatch::new(
            &[self.word_vocab.encode(words)],
            &[self.bpe_vocab.encode(subwords)],
        )?;
        source.check(&self.checkpoint.config)?;
        IncrementalDecoder::new(&self.checkpoint.config, &self.checkpoint.params, &source)
    }

    fn search_config(&self) -> SearchConfig {
        SearchConfig {
            max_len: self
                .search
                .max_len
                .min(self.checkpoint.config.max_positions),
            ..self.search.clone()
        }
    }

    /// Ranked hypotheses for one sentence given its words and subwords.
    pub fn nbest<S: AsRef<str>>(&self, words: &[S], subwords: &[S]) -> Result<Vec<Hypothesis>> {
        beam_search(&self.decoder(words, subwords)?, &self.search_config())
    }

    pub fn greedy<S: AsRef<str>>(&self, words: &[S], subwords: &[S]) -> Result<Hypothesis> {
        greedy(
            &self.decoder(words, subwords)?,
            self.search_config().max_len,
        )
    }

    /// Best hypothesis as subword strings.
    pub fn translate<S: AsRef<str>>(&self, words: &[S], subwords: &[S]) -> Result<Vec<String>> {
        let best = self.nbest(words, subwords)?;
        Ok(self.subwords(&best[0]))
    }

    pub fn subwords(&self, hyp: &Hypothesis) -> Vec<String> {
        self.bpe_vocab.decode(hyp.content())
    }
}
