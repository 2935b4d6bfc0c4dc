//! Synthetic pair of closely related languages with two domains.
//!
//! Target words are source words with a few regular sound changes, so the
//! pair behaves like cognate-rich neighbours. The "topic" domain draws on
//! its own words and translates a handful of shared words differently, so a
//! model trained mostly on the general domain is measurably worse on it.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &["k", "r", "m", "s", "t", "n", "p", "l", "d", "v", "b", "z"];
const NUCLEI: &[&str] = &["a", "o", "i", "e", "u"];

pub struct Lexicon {
    pub general: Vec<(String, String)>,
    pub topic: Vec<(String, String)>,
    /// Shared source words with (general, topic) translations.
    pub ambiguous: Vec<(String, String, String)>,
}

fn shift(word: &str) -> String {
    word.chars()
        .map(|c| match c {
            'k' => 'c',
            'v' => 'w',
            'o' => 'u',
            'z' => 's',
            c => c,
        })
        .collect()
}

impl Lexicon {
    pub fn new(seed: u64, n_general: usize, n_topic: usize, n_ambiguous: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::BTreeSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng| loop {
            let syll = rng.random_range(2..=3);
            let w: String = (0..syll)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS.choose(rng).unwrap(),
                        NUCLEI.choose(rng).unwrap()
                    )
                })
                .collect();
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let general = (0..n_general)
            .map(|_| fresh(&mut rng))
            .map(|w| (w.clone(), shift(&w)))
            .collect();
        let topic = (0..n_topic)
            .map(|_| fresh(&mut rng))
            .map(|w| (w.clone(), shift(&w)))
            .collect();
        let ambiguous = (0..n_ambiguous)
            .map(|_| {
                let w = fresh(&mut rng);
                let alt = fresh(&mut rng);
                (w.clone(), shift(&w), shift(&alt))
            })
            .collect();
        Self {
            general,
            topic,
            ambiguous,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    General,
    Topic,
}

pub fn sentence(lex: &Lexicon, domain: Domain, rng: &mut ChaCha8Rng) -> (String, String) {
    let len = rng.random_range(3..=7);
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for _ in 0..len {
        let r: f64 = rng.random();
        let (s, t) = match domain {
            Domain::General if r < 0.85 => lex.general.choose(rng).unwrap().clone(),
            Domain::General => {
                let (s, g, _) = lex.ambiguous.choose(rng).unwrap();
                (s.clone(), g.clone())
            }
            Domain::Topic if r < 0.5 => lex.topic.choose(rng).unwrap().clone(),
            Domain::Topic if r < 0.9 => {
                let (s, _, t) = lex.ambiguous.choose(rng).unwrap();
                (s.clone(), t.clone())
            }
            Domain::Topic => lex.general.choose(rng).unwrap().clone(),
        };
        src.push(s);
        tgt.push(t);
    }
    (prose(&src), prose(&tgt))
}

/// Capitalised, with the full stop attached, like ordinary raw text.
fn prose(words: &[String]) -> String {
    let mut s = words.join(" ") + ".";
    s[..1].make_ascii_uppercase();
    s
}

pub struct Corpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub domains: Vec<Domain>,
}

/// `n` pairs, a `topic_fraction` of them from the topic domain.
pub fn corpus(lex: &Lexicon, n: usize, topic_fraction: f64, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Corpus {
        src: Vec::new(),
        tgt: Vec::new(),
        domains: Vec::new(),
    };
    for _ in 0..n {
        let d = if rng.random::<f64>() < topic_fraction {
            Domain::Topic
        } else {
            Domain::General
        };
        let (s, t) = sentence(lex, d, &mut rng);
        c.src.push(s);
        c.tgt.push(t);
        c.domains.push(d);
    }
    c
}

pub fn write(dir: &std::path::Path, name: &str, lines: &[String]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

/// A small end-to-end setup: `n_train` mixed pairs plus `n_dev` topic pairs
/// written under `dir/data`, and a miniature model config.
pub fn toy_pipeline(
    dir: &std::path::Path,
    n_train: usize,
    n_dev: usize,
) -> transference::pipeline::PipelineConfig {
    use transference::pipeline::{DataConfig, PipelineConfig};
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let lex = Lexicon::new(7, 60, 30, 8);
    let train = corpus(&lex, n_train, 0.2, 11);
    let dev = corpus(&lex, n_dev, 1.0, 12);
    let files = DataConfig {
        train_source: write(&data, "train.src", &train.src),
        train_target: write(&data, "train.tgt", &train.tgt),
        dev_source: write(&data, "dev.src", &dev.src),
        dev_target: write(&data, "dev.tgt", &dev.tgt),
    };
    let mut cfg = PipelineConfig::new(files, dir.join("work"));
    cfg.select.n_val = 20;
    cfg.select.n_select = n_train / 4;
    cfg.bpe.vocab_size = 300;
    cfg.model = transference::model::ModelConfig::miniature(16, 2, 0, 0);
    cfg.train.batch_tokens = 400;
    cfg.train.warmup_steps = 50;
    cfg.train.epochs = 2;
    cfg.train.finetune_epochs = 1;
    cfg.train.checkpoint_keep = 2;
    cfg.search.beam = 2;
    cfg.search.max_len = 20;
    cfg
}
