//! End-to-end orchestration: clean → truecase → LMs → score → split → BPE →
//! generic training → fine-tuning → averaging → translate → postprocess →
//! evaluate.
//!
//! Every stage owns a directory under the work directory and finishes by
//! writing `manifest.json`. A stage's key hashes its parameters, the content
//! of every input file and the keys of the stages it depends on, so a change
//! anywhere upstream invalidates everything below it. A stage is skipped
//! when its key matches, its recorded outputs are intact and nothing it
//! depends on ran in the same invocation.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    clean_corpus, detruecase, postprocess, preprocess_line, read_byte_lines, read_lines,
    read_parallel, write_json, write_lines, write_parallel, CleanConfig, CleanReport, DropReason,
    SentencePair, TruecaseModel,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::lm::{rank_and_split, scores_tsv, train_lm, LmConfig, NGramLM, SelectionModels};
use crate::model::{Checkpoint, ModelConfig};
use crate::search::{SearchConfig, Translator};
use crate::subword::{decode_bpe, BpeTrainer};
use crate::trainer::{
    average_checkpoints, load_optimizer, EncodedPair, EpochRecord, Phase, TrainConfig, Trainer,
};
use crate::vocab::Vocab;

pub const WORKDIR_ENV: &str = "TRANSFERENCE_WORKDIR";
pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Raw out-of-domain training corpus.
    pub train_source: PathBuf,
    pub train_target: PathBuf,
    /// In-domain corpus: trains the in-domain LMs and is the evaluation set.
    pub dev_source: PathBuf,
    pub dev_target: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub n_val: usize,
    pub n_select: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            n_val: 1000,
            n_select: 500_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpeConfig {
    pub vocab_size: usize,
    pub max_merges: Option<usize>,
    pub min_frequency: u64,
}

impl Default for BpeConfig {
    fn default() -> Self {
        let t = BpeTrainer::default();
        Self {
            vocab_size: t.target_vocab,
            max_merges: t.max_merges,
            min_frequency: t.min_frequency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    /// Most frequent source words kept for the word encoder; the rest are UNK.
    pub max_words: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { max_words: 50_000 }
    }
}

/// Everything a run needs. Loaded from TOML; one table per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    /// Optional for single-stage commands, which take paths as arguments.
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub clean: CleanConfig,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub select: SelectConfig,
    #[serde(default)]
    pub bpe: BpeConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    /// Vocabulary sizes are overwritten with the learned ones.
    #[serde(default)]
    pub model: ModelConfig,
    /// `seed` here is overwritten by the top-level seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_workdir() -> PathBuf {
    PathBuf::from("work")
}

impl PipelineConfig {
    pub fn new(data: DataConfig, workdir: impl Into<PathBuf>) -> Self {
        Self {
            seed: default_seed(),
            workdir: workdir.into(),
            data,
            clean: CleanConfig::default(),
            lm: LmConfig::default(),
            select: SelectConfig::default(),
            bpe: BpeConfig::default(),
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths are taken from the file's
    /// directory, and `TRANSFERENCE_WORKDIR` replaces the work directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.workdir,
            &mut cfg.data.train_source,
            &mut cfg.data.train_target,
            &mut cfg.data.dev_source,
            &mut cfg.data.dev_target,
        ] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = std::env::var_os(WORKDIR_ENV) {
            cfg.workdir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [
            &self.data.train_source,
            &self.data.train_target,
            &self.data.dev_source,
            &self.data.dev_target,
        ] {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "input file `{}` does not exist",
                    p.display()
                )));
            }
        }
        if self.clean.min_tokens > self.clean.max_tokens || self.clean.max_ratio < 1.0 {
            return Err(Error::Config("cleaning bounds are inconsistent".into()));
        }
        if self.lm.order == 0 {
            return Err(Error::Config("LM order must be positive".into()));
        }
        if self.select.n_val == 0 || self.select.n_select == 0 {
            return Err(Error::Config("n_val and n_select must be positive".into()));
        }
        if self.bpe.vocab_size == 0 || self.vocab.max_words == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if self.search.beam == 0 || self.search.max_len == 0 {
            return Err(Error::Config("beam and max_len must be positive".into()));
        }
        // Vocabulary sizes are not known yet; check the rest with placeholders.
        ModelConfig {
            bpe_vocab_size: self.model.bpe_vocab_size.max(5),
            word_vocab_size: self.model.word_vocab_size.max(5),
            ..self.model.clone()
        }
        .validate()?;
        self.train_config().validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: String,
    pub status: StageStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub key: String,
    pub params: serde_json::Value,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Upstream stage → key.
    pub upstream: BTreeMap<String, String>,
    /// Output path, relative to the stage directory → sha256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub generic: EvalReport,
    pub finetuned: EvalReport,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub workdir: PathBuf,
    pub report: PipelineReport,
    pub stages: Vec<StageRun>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every regular file below `dir` except the manifest, as sorted relative paths.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("below root").to_path_buf();
                if rel != Path::new(MANIFEST) {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn rel_name(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Held for the duration of a run; the lock file goes away on drop.
struct WorkdirLock(PathBuf);

impl WorkdirLock {
    fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "work directory {} is locked by another run (remove {} if stale)",
                workdir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Runner {
    root: PathBuf,
    keys: BTreeMap<String, String>,
    runs: Vec<StageRun>,
}

impl Runner {
    fn ran(&self, stage: &str) -> bool {
        self.runs
            .iter()
            .any(|r| r.stage == stage && r.status == StageStatus::Ran)
    }
}

impl Runner {
    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn input_name(&self, p: &Path) -> String {
        match p.strip_prefix(&self.root) {
            Ok(rel) => rel_name(rel),
            Err(_) => rel_name(p),
        }
    }

    fn intact(dir: &Path, m: &Manifest) -> bool {
        let Ok(files) = list_files(dir) else {
            return false;
        };
        files.len() == m.outputs.len()
            && files.iter().all(|f| {
                m.outputs
                    .get(&rel_name(f))
                    .is_some_and(|d| sha256_file(&dir.join(f)).is_ok_and(|x| &x == d))
            })
    }

    fn stage<P: Serialize>(
        &mut self,
        name: &str,
        upstream: &[&str],
        inputs: &[PathBuf],
        params: &P,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            cause: Box::new(e),
        };
        let dir = self.dir(name);
        let params = serde_json::to_value(params).map_err(|e| wrap(e.into()))?;
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update([0]);
        h.update(params.to_string().as_bytes());
        let mut input_digests = BTreeMap::new();
        for p in inputs {
            let d = sha256_file(p).map_err(wrap)?;
            input_digests.insert(self.input_name(p), d);
        }
        let mut up = BTreeMap::new();
        for &u in upstream {
            up.insert(u.to_string(), self.keys[u].clone());
        }
        for (k, v) in input_digests.iter().chain(&up) {
            h.update([0]);
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
        }
        let key = hex::encode(h.finalize());

        let previous: Option<Manifest> = fs::read(dir.join(MANIFEST))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        // Anything downstream of a stage that just ran runs too, even when
        // the regenerated files happen to be identical.
        let fresh_upstream = upstream.iter().any(|u| self.ran(u));
        let status = match previous {
            Some(m) if !fresh_upstream && m.key == key && Self::intact(&dir, &m) => {
                log::info!("stage {name}: up to date");
                StageStatus::Skipped
            }
            _ => {
                log::info!("stage {name}: running");
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
                }
                fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
                body(&dir).map_err(wrap)?;
                let mut outputs = BTreeMap::new();
                for f in list_files(&dir).map_err(wrap)? {
                    outputs.insert(rel_name(&f), sha256_file(&dir.join(&f)).map_err(wrap)?);
                }
                let manifest = Manifest {
                    stage: name.to_string(),
                    key: key.clone(),
                    params,
                    inputs: input_digests,
                    upstream: up,
                    outputs,
                };
                write_json(&dir.join(MANIFEST), &manifest).map_err(wrap)?;
                StageStatus::Ran
            }
        };
        self.keys.insert(name.to_string(), key);
        self.runs.push(StageRun {
            stage: name.to_string(),
            status,
        });
        Ok(())
    }
}

fn tokens_of(lines: &[String]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

fn read_tokens(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(tokens_of(&read_lines(path)?))
}

fn write_tokens(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let lines: Vec<String> = sentences.iter().map(|s| s.join(" ")).collect();
    write_lines(path, &lines)
}

fn read_pairs(dir: &Path, name: &str) -> Result<Vec<SentencePair>> {
    let (pairs, invalid) = read_parallel(
        &dir.join(format!("{name}.src")),
        &dir.join(format!("{name}.tgt")),
    )?;
    if invalid > 0 {
        return Err(Error::Format {
            what: "intermediate corpus",
            detail: format!("{invalid} non-UTF-8 lines in {}", dir.join(name).display()),
        });
    }
    Ok(pairs)
}

fn files(dir: &Path, names: &[&str]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).collect()
}

/// The in-domain corpus keeps only UTF-8 pairs with text on both sides;
/// `dev.ref` holds the untouched target lines for scoring.
fn clean_dev(source: &Path, target: &Path, out: &Path) -> Result<usize> {
    let src = read_byte_lines(source)?;
    let tgt = read_byte_lines(target)?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let (mut s_tok, mut t_tok, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    for (s, t) in src.iter().zip(&tgt) {
        if let (Some(s), Some(t)) = (s, t) {
            let (ps, pt) = (preprocess_line(s, true), preprocess_line(t, true));
            if !ps.is_empty() && !pt.is_empty() {
                s_tok.push(ps);
                t_tok.push(pt);
                refs.push(t.trim_end_matches('\r').to_string());
            }
        }
    }
    if refs.is_empty() {
        return Err(Error::Contract(
            "in-domain corpus has no usable pairs".into(),
        ));
    }
    write_tokens(&out.join("dev.src"), &s_tok)?;
    write_tokens(&out.join("dev.tgt"), &t_tok)?;
    write_lines(&out.join("dev.ref"), &refs)?;
    Ok(refs.len())
}

fn stage_clean(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let (raw, invalid) = read_parallel(&cfg.data.train_source, &cfg.data.train_target)?;
    let pairs: Vec<SentencePair> = raw
        .iter()
        .map(|p| SentencePair {
            source: preprocess_line(&p.source_line(), true),
            target: preprocess_line(&p.target_line(), true),
            original_index: p.original_index,
        })
        .collect();
    let (kept, mut report): (Vec<SentencePair>, CleanReport) = clean_corpus(&pairs, &cfg.clean)?;
    if invalid > 0 {
        report.input += invalid;
        report.dropped.insert(DropReason::InvalidUtf8, invalid);
    }
    if kept.is_empty() {
        return Err(Error::Contract(
            "cleaning removed every training pair".into(),
        ));
    }
    write_parallel(&out.join("train.src"), &out.join("train.tgt"), &kept)?;
    let dev = clean_dev(&cfg.data.dev_source, &cfg.data.dev_target, out)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({ "train": report, "dev_pairs": dev }),
    )
}

fn stage_truecase(clean: &Path, out: &Path) -> Result<()> {
    for side in ["src", "tgt"] {
        let train = read_tokens(&clean.join(format!("train.{side}")))?;
        let dev = read_tokens(&clean.join(format!("dev.{side}")))?;
        let all: Vec<Vec<String>> = train.iter().chain(&dev).cloned().collect();
        let model = TruecaseModel::train(&all)?;
        model.save(&out.join(format!("model.{side}.json")))?;
        for (name, data) in [("train", &train), ("dev", &dev)] {
            let cased: Vec<Vec<String>> = data.iter().map(|s| model.apply(s)).collect();
            write_tokens(&out.join(format!("{name}.{side}")), &cased)?;
        }
    }
    Ok(())
}

fn stage_lm(cfg: &LmConfig, truecased: &Path, out: &Path) -> Result<()> {
    for (domain, corpus) in [("in", "dev"), ("out", "train")] {
        for side in ["src", "tgt"] {
            let data = read_tokens(&truecased.join(format!("{corpus}.{side}")))?;
            train_lm(&data, cfg)?.save(&out.join(format!("{domain}.{side}.json")))?;
        }
    }
    Ok(())
}

fn load_selection(lm: &Path) -> Result<SelectionModels> {
    let load = |n: &str| NGramLM::load(&lm.join(n));
    Ok(SelectionModels {
        in_src: load("in.src.json")?,
        out_src: load("out.src.json")?,
        in_trg: load("in.tgt.json")?,
        out_trg: load("out.tgt.json")?,
    })
}

fn stage_score(lm: &Path, truecased: &Path, out: &Path) -> Result<()> {
    let scored = load_selection(lm)?.score_all(&read_pairs(truecased, "train")?)?;
    crate::tensor::io::write_atomic(&out.join("scores.tsv"), scores_tsv(&scored).as_bytes())
}

/// Scores are recomputed from the LMs rather than parsed back from the
/// rounded TSV, so ranking sees full precision.
fn stage_split(sel: &SelectConfig, lm: &Path, truecased: &Path, out: &Path) -> Result<()> {
    let scored = load_selection(lm)?.score_all(&read_pairs(truecased, "train")?)?;
    let split = rank_and_split(scored, sel.n_val, sel.n_select)?;
    for (name, part) in [
        ("val", &split.validation),
        ("selected", &split.selected),
        ("generic", &split.sorted_all),
    ] {
        let pairs: Vec<SentencePair> = part.iter().map(|s| s.pair.clone()).collect();
        write_parallel(
            &out.join(format!("{name}.src")),
            &out.join(format!("{name}.tgt")),
            &pairs,
        )?;
    }
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "validation": split.validation.len(),
            "selected": split.selected.len(),
            "generic": split.sorted_all.len(),
            "selected_score_max": split.selected.last().map(|s| s.score),
        }),
    )
}

const SPLITS: [&str; 3] = ["generic", "selected", "val"];

fn stage_bpe(cfg: &PipelineConfig, split: &Path, truecased: &Path, out: &Path) -> Result<()> {
    let gen_src = read_tokens(&split.join("generic.src"))?;
    let gen_tgt = read_tokens(&split.join("generic.tgt"))?;
    let trainer = BpeTrainer {
        target_vocab: cfg.bpe.vocab_size,
        max_merges: cfg.bpe.max_merges,
        min_frequency: cfg.bpe.min_frequency,
    };
    let bpe = trainer.learn(&[&gen_src, &gen_tgt])?;
    bpe.write_merges(&out.join("merges.txt"))?;
    let mut seen: Vec<Vec<String>> = Vec::new();
    for name in SPLITS {
        for side in ["src", "tgt"] {
            let data = read_tokens(&split.join(format!("{name}.{side}")))?;
            let applied: Vec<Vec<String>> = data.iter().map(|s| bpe.apply(s)).collect();
            write_tokens(&out.join(format!("{name}.{side}")), &applied)?;
            if name == "generic" {
                seen.extend(applied);
            }
        }
    }
    let dev: Vec<Vec<String>> = read_tokens(&truecased.join("dev.src"))?
        .iter()
        .map(|s| bpe.apply(s))
        .collect();
    write_tokens(&out.join("dev.src"), &dev)?;
    // Subword ids cover the learned symbols plus whatever the training
    // data actually produced, in a fixed order.
    let mut symbols: Vec<String> = bpe.symbols().iter().cloned().collect();
    let extra = Vocab::from_frequencies(&seen, usize::MAX);
    symbols.extend(
        extra
            .tokens()
            .iter()
            .skip(4)
            .filter(|t| !bpe.symbols().contains(*t))
            .cloned(),
    );
    symbols.sort();
    Vocab::new(symbols).save(&out.join("vocab.bpe"))?;
    Vocab::from_frequencies(&gen_src, cfg.vocab.max_words).save(&out.join("vocab.word"))
}

struct Encoded {
    word_vocab: Vocab,
    bpe_vocab: Vocab,
    sets: BTreeMap<&'static str, Vec<EncodedPair>>,
}

fn encode_sets(split: &Path, bpe: &Path) -> Result<Encoded> {
    let word_vocab = Vocab::load(&bpe.join("vocab.word"))?;
    let bpe_vocab = Vocab::load(&bpe.join("vocab.bpe"))?;
    let mut sets = BTreeMap::new();
    for name in SPLITS {
        let words = read_tokens(&split.join(format!("{name}.src")))?;
        let sub = read_tokens(&bpe.join(format!("{name}.src")))?;
        let tgt = read_tokens(&bpe.join(format!("{name}.tgt")))?;
        if words.len() != sub.len() || sub.len() != tgt.len() {
            return Err(Error::Alignment {
                source_lines: words.len(),
                target_lines: tgt.len(),
            });
        }
        let pairs = (0..words.len())
            .map(|i| EncodedPair::encode(i, &words[i], &sub[i], &tgt[i], &word_vocab, &bpe_vocab))
            .collect();
        sets.insert(name, pairs);
    }
    Ok(Encoded {
        word_vocab,
        bpe_vocab,
        sets,
    })
}

fn model_config(cfg: &PipelineConfig, enc: &Encoded) -> ModelConfig {
    ModelConfig {
        bpe_vocab_size: enc.bpe_vocab.len(),
        word_vocab_size: enc.word_vocab.len(),
        ..cfg.model.clone()
    }
}

/// What a training stage leaves behind for the next one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub epochs: Vec<EpochRecord>,
    /// Epochs whose checkpoints are averaged.
    pub kept: Vec<usize>,
    pub last_epoch: usize,
    pub step: u64,
}

fn save_phase(
    out: &Path,
    trainer: &Trainer,
    epochs: Vec<EpochRecord>,
    kept: Vec<usize>,
) -> Result<()> {
    write_json(
        &out.join("phase.json"),
        &PhaseSummary {
            epochs,
            kept,
            last_epoch: trainer.epoch(),
            step: trainer.step(),
        },
    )
}

fn load_phase(dir: &Path) -> Result<PhaseSummary> {
    let path = dir.join("phase.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn stage_train(cfg: &PipelineConfig, split: &Path, bpe: &Path, out: &Path) -> Result<()> {
    let enc = encode_sets(split, bpe)?;
    let init = Checkpoint::init(model_config(cfg, &enc), cfg.seed)?;
    let mut trainer = Trainer::new(init, cfg.train_config())?.with_output_dir(out);
    let r = trainer.train_phase(
        Phase::Generic,
        &enc.sets["generic"],
        &enc.sets["val"],
        cfg.train.epochs,
    )?;
    save_phase(out, &trainer, r.epochs, r.kept)
}

/// Continues from the last generic epoch with its optimizer moments. With
/// no fine-tuning epochs configured this only records an empty phase.
fn stage_finetune(
    cfg: &PipelineConfig,
    split: &Path,
    bpe: &Path,
    train: &Path,
    out: &Path,
) -> Result<()> {
    let generic = load_phase(train)?;
    if cfg.train.finetune_epochs == 0 {
        return write_json(
            &out.join("phase.json"),
            &PhaseSummary {
                epochs: Vec::new(),
                kept: Vec::new(),
                last_epoch: generic.last_epoch,
                step: generic.step,
            },
        );
    }
    let enc = encode_sets(split, bpe)?;
    let ckpt = Checkpoint::load(&train.join(format!("ckpt/epoch_{}.tfrx", generic.last_epoch)))?;
    let tc = cfg.train_config();
    let adam = load_optimizer(
        &train.join("ckpt/optimizer.tfrx"),
        &ckpt.params,
        &tc,
        generic.step,
    )?;
    let mut trainer = Trainer::new(ckpt, tc)?
        .resume(adam, generic.last_epoch)?
        .with_output_dir(out);
    let r = trainer.train_phase(
        Phase::Finetune,
        &enc.sets["selected"],
        &enc.sets["val"],
        cfg.train.finetune_epochs,
    )?;
    save_phase(out, &trainer, r.epochs, r.kept)
}

fn average_phase(dir: &Path, kept: &[usize]) -> Result<Checkpoint> {
    let ckpts = kept
        .iter()
        .map(|e| Checkpoint::load(&dir.join(format!("ckpt/epoch_{e}.tfrx"))))
        .collect::<Result<Vec<_>>>()?;
    average_checkpoints(&ckpts)
}

fn stage_average(train: &Path, finetune: &Path, out: &Path) -> Result<()> {
    let generic = average_phase(train, &load_phase(train)?.kept)?;
    generic.save(&out.join("generic.tfrx"))?;
    let ft = load_phase(finetune)?;
    let final_model = if ft.kept.is_empty() {
        generic
    } else {
        average_phase(finetune, &ft.kept)?
    };
    final_model.save(&out.join("final.tfrx"))
}

fn stage_translate(
    search: &SearchConfig,
    truecased: &Path,
    bpe: &Path,
    average: &Path,
    out: &Path,
) -> Result<()> {
    let word_vocab = Vocab::load(&bpe.join("vocab.word"))?;
    let bpe_vocab = Vocab::load(&bpe.join("vocab.bpe"))?;
    let words = read_tokens(&truecased.join("dev.src"))?;
    let subwords = read_tokens(&bpe.join("dev.src"))?;
    for model in ["generic", "final"] {
        let ckpt = Checkpoint::load(&average.join(format!("{model}.tfrx")))?;
        let translator = Translator {
            checkpoint: &ckpt,
            word_vocab: &word_vocab,
            bpe_vocab: &bpe_vocab,
            search: search.clone(),
        };
        let max = ckpt.config.max_positions;
        let mut hyps = Vec::with_capacity(words.len());
        for (w, s) in words.iter().zip(&subwords) {
            // Sources longer than the model can attend over are truncated.
            let (w, s) = (&w[..w.len().min(max)], &s[..s.len().min(max)]);
            hyps.push(translator.translate(w, s)?);
        }
        write_tokens(&out.join(format!("{model}.bpe")), &hyps)?;
    }
    Ok(())
}

/// Subword tokens → detokenized text: undo BPE, restore sentence-initial
/// case, detokenize and normalize.
pub fn postprocess_subwords<S: AsRef<str>>(subwords: &[S]) -> String {
    postprocess(&detruecase(&decode_bpe(subwords)))
}

fn stage_postprocess(translate: &Path, out: &Path) -> Result<()> {
    for model in ["generic", "final"] {
        let lines: Vec<String> = read_tokens(&translate.join(format!("{model}.bpe")))?
            .iter()
            .map(|s| postprocess_subwords(s))
            .collect();
        write_lines(&out.join(format!("{model}.txt")), &lines)?;
    }
    Ok(())
}

fn stage_evaluate(clean: &Path, post: &Path, out: &Path) -> Result<PipelineReport> {
    let refs = read_lines(&clean.join("dev.ref"))?;
    let generic = evaluate(&read_lines(&post.join("generic.txt"))?, &refs)?;
    let finetuned = evaluate(&read_lines(&post.join("final.txt"))?, &refs)?;
    let report = PipelineReport { generic, finetuned };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Runs (or resumes) every stage under `config.workdir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let root = config.workdir.clone();
    let _lock = WorkdirLock::acquire(&root)?;
    let mut r = Runner {
        root: root.clone(),
        keys: BTreeMap::new(),
        runs: Vec::new(),
    };
    let d = |s: &str| root.join(s);
    let (clean, tc, lm, split, bpe, train, ft, avg, tr, post, ev) = (
        d("clean"),
        d("truecase"),
        d("lm"),
        d("split"),
        d("bpe"),
        d("train"),
        d("finetune"),
        d("average"),
        d("translate"),
        d("postprocess"),
        d("evaluate"),
    );
    let raw = [
        config.data.train_source.clone(),
        config.data.train_target.clone(),
        config.data.dev_source.clone(),
        config.data.dev_target.clone(),
    ];
    r.stage("clean", &[], &raw, &config.clean, |out| {
        stage_clean(config, out)
    })?;

    let clean_out = files(&clean, &["train.src", "train.tgt", "dev.src", "dev.tgt"]);
    r.stage("truecase", &["clean"], &clean_out, &(), |out| {
        stage_truecase(&clean, out)
    })?;

    let tc_out = files(&tc, &["train.src", "train.tgt", "dev.src", "dev.tgt"]);
    r.stage("lm", &["truecase"], &tc_out, &config.lm, |out| {
        stage_lm(&config.lm, &tc, out)
    })?;

    let lm_out = files(
        &lm,
        &["in.src.json", "in.tgt.json", "out.src.json", "out.tgt.json"],
    );
    let mut score_in = lm_out.clone();
    score_in.extend(files(&tc, &["train.src", "train.tgt"]));
    r.stage("score", &["lm", "truecase"], &score_in, &(), |out| {
        stage_score(&lm, &tc, out)
    })?;
    r.stage(
        "split",
        &["lm", "truecase"],
        &score_in,
        &config.select,
        |out| stage_split(&config.select, &lm, &tc, out),
    )?;

    let split_files: Vec<String> = SPLITS
        .iter()
        .flat_map(|n| [format!("{n}.src"), format!("{n}.tgt")])
        .collect();
    let split_names: Vec<&str> = split_files.iter().map(String::as_str).collect();
    let mut bpe_in = files(&split, &split_names);
    bpe_in.push(tc.join("dev.src"));
    let bpe_params = (&config.bpe, &config.vocab);
    r.stage("bpe", &["split", "truecase"], &bpe_in, &bpe_params, |out| {
        stage_bpe(config, &split, &tc, out)
    })?;

    let mut train_in = files(&bpe, &split_names);
    train_in.extend(files(&bpe, &["vocab.word", "vocab.bpe"]));
    train_in.extend(files(&split, &["generic.src", "selected.src", "val.src"]));
    let model_params = (&config.model, &config.train_config());
    r.stage(
        "train",
        &["bpe", "split"],
        &train_in,
        &model_params,
        |out| stage_train(config, &split, &bpe, out),
    )?;

    let generic = load_phase(&train).map_err(|e| Error::Stage {
        stage: "finetune".into(),
        cause: Box::new(e),
    })?;
    let mut ft_in = train_in.clone();
    ft_in.extend(files(
        &train,
        &[
            "phase.json",
            "ckpt/optimizer.tfrx",
            &format!("ckpt/epoch_{}.tfrx", generic.last_epoch),
            &format!("ckpt/epoch_{}.json", generic.last_epoch),
        ],
    ));
    r.stage(
        "finetune",
        &["bpe", "split", "train"],
        &ft_in,
        &model_params,
        |out| stage_finetune(config, &split, &bpe, &train, out),
    )?;

    let tf_phase = load_phase(&ft).map_err(|e| Error::Stage {
        stage: "average".into(),
        cause: Box::new(e),
    })?;
    let mut avg_in = files(&train, &["phase.json"]);
    avg_in.push(ft.join("phase.json"));
    for e in &generic.kept {
        avg_in.extend(files(
            &train,
            &[
                &format!("ckpt/epoch_{e}.tfrx"),
                &format!("ckpt/epoch_{e}.json"),
            ],
        ));
    }
    for e in &tf_phase.kept {
        avg_in.extend(files(
            &ft,
            &[
                &format!("ckpt/epoch_{e}.tfrx"),
                &format!("ckpt/epoch_{e}.json"),
            ],
        ));
    }
    r.stage("average", &["train", "finetune"], &avg_in, &(), |out| {
        stage_average(&train, &ft, out)
    })?;

    let mut tr_in = files(
        &avg,
        &["generic.tfrx", "generic.json", "final.tfrx", "final.json"],
    );
    tr_in.extend(files(&bpe, &["vocab.word", "vocab.bpe", "dev.src"]));
    tr_in.push(tc.join("dev.src"));
    r.stage(
        "translate",
        &["average", "bpe", "truecase"],
        &tr_in,
        &config.search,
        |out| stage_translate(&config.search, &tc, &bpe, &avg, out),
    )?;

    let tr_out = files(&tr, &["generic.bpe", "final.bpe"]);
    r.stage("postprocess", &["translate"], &tr_out, &(), |out| {
        stage_postprocess(&tr, out)
    })?;

    let mut ev_in = files(&post, &["generic.txt", "final.txt"]);
    ev_in.push(clean.join("dev.ref"));
    let mut report = None;
    r.stage("evaluate", &["postprocess", "clean"], &ev_in, &(), |out| {
        report = Some(stage_evaluate(&clean, &post, out)?);
        Ok(())
    })?;
    let report = match report {
        Some(rep) => rep,
        None => {
            let path = ev.join("report.json");
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_slice(&bytes)?
        }
    };
    Ok(PipelineOutcome {
        workdir: root,
        report,
        stages: r.runs,
    })
}
