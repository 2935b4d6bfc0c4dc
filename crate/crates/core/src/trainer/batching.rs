use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PaddedIds, SourceBatch};
use crate::vocab::{Vocab, BOS_ID, EOS_ID, PAD_ID};

/// One training pair as ids: source words, source subwords, target subwords.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    pub index: usize,
    pub words: Vec<usize>,
    pub subwords: Vec<usize>,
    pub target: Vec<usize>,
}

/// Tensors for one step: teacher-forcing prefix `BOS y…` and labels `y… EOS`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub source: SourceBatch,
    pub prefix: PaddedIds,
    /// Row-major `[batch, prefix.len]`, PAD beyond each sentence.
    pub labels: Vec<usize>,
}

impl EncodedPair {
    pub fn encode<S: AsRef<str>>(
        index: usize,
        words: &[S],
        subwords: &[S],
        target: &[S],
        word_vocab: &Vocab,
        bpe_vocab: &Vocab,
    ) -> Self {
        Self {
            index,
            words: word_vocab.encode(words),
            subwords: bpe_vocab.encode(subwords),
            target: bpe_vocab.encode(target),
        }
    }

    /// Padded positions this pair occupies in a batch.
    pub fn cost(&self) -> usize {
        self.words
            .len()
            .max(self.subwords.len())
            .max(self.target.len() + 1)
    }

    fn fits(&self, max_len: usize) -> bool {
        [self.words.len(), self.subwords.len(), self.target.len()]
            .iter()
            .all(|&n| n <= max_len)
    }

    pub fn collate(pairs: &[&EncodedPair]) -> Result<Batch> {
        let words: Vec<_> = pairs.iter().map(|p| p.words.clone()).collect();
        let subwords: Vec<_> = pairs.iter().map(|p| p.subwords.clone()).collect();
        let prefixes: Vec<_> = pairs
            .iter()
            .map(|p| {
                std::iter::once(BOS_ID)
                    .chain(p.target.iter().copied())
                    .collect()
            })
            .collect();
        let prefix = PaddedIds::new(&prefixes)?;
        let mut labels = Vec::with_capacity(prefix.ids.len());
        for p in pairs {
            labels.extend(&p.target);
            labels.push(EOS_ID);
            labels.extend(std::iter::repeat_n(PAD_ID, prefix.len - p.target.len() - 1));
        }
        Ok(Batch {
            source: SourceBatch::new(&words, &subwords)?,
            prefix,
            labels,
        })
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Groups pair indices into batches whose padded size, rows × longest
/// side, stays within `batch_tokens`. Pairs with a side longer than
/// `max_len` are dropped. Shuffling depends only on `(seed, epoch)`.
pub fn make_batches(
    pairs: &[EncodedPair],
    batch_tokens: usize,
    max_len: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..pairs.len())
        .filter(|&i| pairs[i].fits(max_len))
        .collect();
    if let Some(&i) = order.iter().find(|&&i| pairs[i].cost() > batch_tokens) {
        return Err(Error::Config(format!(
            "pair {} needs {} padded tokens, more than batch_tokens {batch_tokens}",
            pairs[i].index,
            pairs[i].cost()
        )));
    }
    let mut rng = epoch_rng(seed, epoch);
    order.shuffle(&mut rng);
    // Stable sort: equal lengths keep their shuffled order.
    order.sort_by_key(|&i| pairs[i].cost());

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let c = pairs[i].cost();
        if !current.is_empty() && (current.len() + 1) * longest.max(c) > batch_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(c);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}
