//! Command-line front end: one subcommand per pipeline stage plus `pipeline`
//! for the whole run. Exit status 0 on success, 1 on a usage error, 2 when a
//! stage fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use transference::corpus::{
    clean_corpus, preprocess_line, read_lines, read_parallel, write_lines, write_parallel,
    DropReason, SentencePair, TruecaseModel,
};
use transference::eval::{bleu, evaluate, ter};
use transference::lm::{
    parse_scores_tsv, rank_and_split, scores_tsv, train_lm, NGramLM, ScoredPair, SelectionModels,
};
use transference::model::{Checkpoint, ModelConfig};
use transference::pipeline::{postprocess_subwords, run_pipeline, PhaseSummary, PipelineConfig};
use transference::subword::{BpeModel, BpeTrainer};
use transference::trainer::{
    average_checkpoints, load_optimizer, EncodedPair, Phase, PhaseResult, Trainer,
};
use transference::vocab::Vocab;
use transference::{Error, Result};

#[derive(Parser)]
#[command(
    name = "transference",
    version,
    about = "Two-encoder NMT: selection, BPE, training, decoding, scoring"
)]
struct Cli {
    /// TOML config; its sections supply defaults for every stage.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config and TRANSFERENCE_WORKDIR.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// -v for progress, -vv for detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Parallel {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
}

#[derive(Args)]
struct TrainData {
    /// Word-level (truecased) training source.
    #[arg(long)]
    train_words: PathBuf,
    /// BPE-segmented training source and target.
    #[arg(long)]
    train_src: PathBuf,
    #[arg(long)]
    train_tgt: PathBuf,
    #[arg(long)]
    val_words: PathBuf,
    #[arg(long)]
    val_src: PathBuf,
    #[arg(long)]
    val_tgt: PathBuf,
    #[arg(long)]
    word_vocab: PathBuf,
    #[arg(long)]
    bpe_vocab: PathBuf,
    /// Output directory: `ckpt/`, `train_log.csv`, `phase.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Bleu,
    Ter,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize, tokenize and filter a raw parallel corpus.
    Clean {
        #[command(flatten)]
        input: Parallel,
        #[arg(long)]
        out_src: PathBuf,
        #[arg(long)]
        out_tgt: PathBuf,
        /// Where to write the drop counts as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Learn a truecasing model from tokenized text.
    TruecaseTrain {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        model: PathBuf,
    },
    /// Apply a truecasing model to tokenized text.
    Truecase {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train an n-gram LM on tokenized text.
    LmTrain {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Cross-entropy-difference scores for every pair, as TSV.
    Score {
        #[command(flatten)]
        input: Parallel,
        #[arg(long)]
        in_src_lm: PathBuf,
        #[arg(long)]
        out_src_lm: PathBuf,
        #[arg(long)]
        in_tgt_lm: PathBuf,
        #[arg(long)]
        out_tgt_lm: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rank by score and write `val`, `selected` and `generic` splits.
    Select {
        #[command(flatten)]
        input: Parallel,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_select: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Learn joint BPE merges over every input file.
    BpeLearn {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
        /// Also write the subword vocabulary seen on the inputs.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Frequency-ranked vocabulary over tokenized files, specials first.
    Vocab {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        max_size: Option<usize>,
    },
    /// Segment tokenized text with learned merges.
    BpeApply {
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generic training from a fresh initialization.
    Train {
        #[command(flatten)]
        data: TrainData,
    },
    /// Continue the last epoch of a `train` run on new data.
    Finetune {
        #[command(flatten)]
        data: TrainData,
        /// Output directory of the generic run.
        #[arg(long)]
        from: PathBuf,
    },
    /// Element-wise mean of checkpoints.
    Average {
        #[arg(long)]
        output: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Beam-search translation; one output line per input line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        word_vocab: PathBuf,
        #[arg(long)]
        bpe_vocab: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Treat input as raw text: normalize and tokenize first.
        #[arg(long)]
        preprocess: bool,
        /// Truecasing model applied to the tokenized input.
        #[arg(long)]
        truecase_model: Option<PathBuf>,
        /// Write the k best as TSV: line, rank, score, subwords.
        #[arg(long)]
        nbest: Option<usize>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Undo BPE and truecasing, detokenize and normalize.
    Postprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Corpus BLEU and/or TER against one reference.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        metric: Metric,
        /// Full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run or resume every stage under the work directory.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let mut c = PipelineConfig::from_toml("")?;
            if let Some(dir) = std::env::var_os(transference::pipeline::WORKDIR_ENV) {
                c.workdir = dir.into();
            }
            c
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.workdir {
        cfg.workdir = dir.clone();
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn read_tokens(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

fn write_tokens(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let lines: Vec<String> = sentences.iter().map(|s| s.join(" ")).collect();
    write_lines(path, &lines)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn encode_set(
    words: &Path,
    src: &Path,
    tgt: &Path,
    wv: &Vocab,
    bv: &Vocab,
) -> Result<Vec<EncodedPair>> {
    let (w, s, t) = (read_tokens(words)?, read_tokens(src)?, read_tokens(tgt)?);
    if w.len() != s.len() || s.len() != t.len() {
        return Err(Error::Alignment {
            source_lines: s.len(),
            target_lines: t.len(),
        });
    }
    Ok((0..w.len())
        .map(|i| EncodedPair::encode(i, &w[i], &s[i], &t[i], wv, bv))
        .collect())
}

struct Loaded {
    word_vocab: Vocab,
    bpe_vocab: Vocab,
    train: Vec<EncodedPair>,
    val: Vec<EncodedPair>,
}

fn load_train_data(d: &TrainData) -> Result<Loaded> {
    let word_vocab = Vocab::load(&d.word_vocab)?;
    let bpe_vocab = Vocab::load(&d.bpe_vocab)?;
    let train = encode_set(
        &d.train_words,
        &d.train_src,
        &d.train_tgt,
        &word_vocab,
        &bpe_vocab,
    )?;
    let val = encode_set(
        &d.val_words,
        &d.val_src,
        &d.val_tgt,
        &word_vocab,
        &bpe_vocab,
    )?;
    Ok(Loaded {
        word_vocab,
        bpe_vocab,
        train,
        val,
    })
}

fn finish_phase(out: &Path, trainer: &Trainer, r: PhaseResult) -> Result<()> {
    r.averaged.save(&out.join("ckpt/averaged.tfrx"))?;
    write_json(
        &out.join("phase.json"),
        &PhaseSummary {
            epochs: r.epochs,
            kept: r.kept,
            last_epoch: trainer.epoch(),
            step: trainer.step(),
        },
    )
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Clean {
            input,
            out_src,
            out_tgt,
            report,
        } => {
            let (raw, invalid) = read_parallel(&input.src, &input.tgt)?;
            let pairs: Vec<SentencePair> = raw
                .iter()
                .map(|p| SentencePair {
                    source: preprocess_line(&p.source_line(), true),
                    target: preprocess_line(&p.target_line(), true),
                    original_index: p.original_index,
                })
                .collect();
            let (kept, mut rep) = clean_corpus(&pairs, &cfg.clean)?;
            if invalid > 0 {
                rep.input += invalid;
                rep.dropped.insert(DropReason::InvalidUtf8, invalid);
            }
            write_parallel(out_src, out_tgt, &kept)?;
            eprintln!("kept {} of {} pairs", rep.kept, rep.input);
            if let Some(path) = report {
                write_json(path, &rep)?;
            }
        }
        Command::TruecaseTrain { input, model } => {
            let mut all = Vec::new();
            for p in input {
                all.extend(read_tokens(p)?);
            }
            TruecaseModel::train(&all)?.save(model)?;
        }
        Command::Truecase {
            model,
            input,
            output,
        } => {
            let m = TruecaseModel::load(model)?;
            let cased: Vec<Vec<String>> = read_tokens(input)?.iter().map(|s| m.apply(s)).collect();
            write_tokens(output, &cased)?;
        }
        Command::LmTrain {
            input,
            model,
            order,
        } => {
            let mut all = Vec::new();
            for p in input {
                all.extend(read_tokens(p)?);
            }
            let mut lm_cfg = cfg.lm.clone();
            if let Some(n) = order {
                lm_cfg.order = *n;
            }
            train_lm(&all, &lm_cfg)?.save(model)?;
        }
        Command::Score {
            input,
            in_src_lm,
            out_src_lm,
            in_tgt_lm,
            out_tgt_lm,
            output,
        } => {
            let models = SelectionModels {
                in_src: NGramLM::load(in_src_lm)?,
                out_src: NGramLM::load(out_src_lm)?,
                in_trg: NGramLM::load(in_tgt_lm)?,
                out_trg: NGramLM::load(out_tgt_lm)?,
            };
            let (pairs, _) = read_parallel(&input.src, &input.tgt)?;
            let scored = models.score_all(&pairs)?;
            fs::write(output, scores_tsv(&scored)).map_err(|e| Error::Io {
                path: output.clone(),
                source: e,
            })?;
        }
        Command::Select {
            input,
            scores,
            n_val,
            n_select,
            out_dir,
        } => {
            let (pairs, _) = read_parallel(&input.src, &input.tgt)?;
            let text = fs::read_to_string(scores).map_err(|e| Error::Io {
                path: scores.clone(),
                source: e,
            })?;
            let by_index: std::collections::HashMap<usize, &SentencePair> =
                pairs.iter().map(|p| (p.original_index, p)).collect();
            let mut scored = Vec::new();
            for (idx, score) in parse_scores_tsv(&text)? {
                let pair = by_index.get(&idx).ok_or_else(|| Error::Format {
                    what: "score TSV",
                    detail: format!("index {idx} is not in the corpus"),
                })?;
                scored.push(ScoredPair {
                    pair: (*pair).clone(),
                    h_src_in: f64::NAN,
                    h_src_out: f64::NAN,
                    h_trg_in: f64::NAN,
                    h_trg_out: f64::NAN,
                    score,
                });
            }
            let split = rank_and_split(
                scored,
                n_val.unwrap_or(cfg.select.n_val),
                n_select.unwrap_or(cfg.select.n_select),
            )?;
            fs::create_dir_all(out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            for (name, part) in [
                ("val", &split.validation),
                ("selected", &split.selected),
                ("generic", &split.sorted_all),
            ] {
                let p: Vec<SentencePair> = part.iter().map(|s| s.pair.clone()).collect();
                write_parallel(
                    &out_dir.join(format!("{name}.src")),
                    &out_dir.join(format!("{name}.tgt")),
                    &p,
                )?;
            }
        }
        Command::BpeLearn {
            input,
            merges,
            vocab_size,
            vocab,
        } => {
            let corpora = input
                .iter()
                .map(|p| read_tokens(p))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[Vec<String>]> = corpora.iter().map(Vec::as_slice).collect();
            let bpe = BpeTrainer {
                target_vocab: vocab_size.unwrap_or(cfg.bpe.vocab_size),
                max_merges: cfg.bpe.max_merges,
                min_frequency: cfg.bpe.min_frequency,
            }
            .learn(&refs)?;
            bpe.write_merges(merges)?;
            if let Some(path) = vocab {
                let applied: Vec<Vec<String>> =
                    corpora.iter().flatten().map(|s| bpe.apply(s)).collect();
                let mut symbols: Vec<String> = bpe.symbols().iter().cloned().collect();
                let seen = Vocab::from_frequencies(&applied, usize::MAX);
                symbols.extend(
                    seen.tokens()
                        .iter()
                        .skip(4)
                        .filter(|t| !bpe.symbols().contains(*t))
                        .cloned(),
                );
                symbols.sort();
                Vocab::new(symbols).save(path)?;
            }
        }
        Command::Vocab {
            input,
            output,
            max_size,
        } => {
            let mut all = Vec::new();
            for p in input {
                all.extend(read_tokens(p)?);
            }
            Vocab::from_frequencies(&all, max_size.unwrap_or(cfg.vocab.max_words)).save(output)?;
        }
        Command::BpeApply {
            merges,
            input,
            output,
        } => {
            let bpe = BpeModel::read_merges(merges)?;
            let out: Vec<Vec<String>> = read_tokens(input)?.iter().map(|s| bpe.apply(s)).collect();
            write_tokens(output, &out)?;
        }
        Command::Train { data } => {
            let d = load_train_data(data)?;
            let model = ModelConfig {
                bpe_vocab_size: d.bpe_vocab.len(),
                word_vocab_size: d.word_vocab.len(),
                ..cfg.model.clone()
            };
            let mut trainer = Trainer::new(Checkpoint::init(model, cfg.seed)?, cfg.train.clone())?
                .with_output_dir(&data.out);
            let r = trainer.train_phase(
                Phase::Generic,
                &d.train,
                &d.val,
                data.epochs.unwrap_or(cfg.train.epochs),
            )?;
            finish_phase(&data.out, &trainer, r)?;
        }
        Command::Finetune { data, from } => {
            let d = load_train_data(data)?;
            let path = from.join("phase.json");
            let bytes = fs::read(&path).map_err(|e| Error::Io { path, source: e })?;
            let prev: PhaseSummary = serde_json::from_slice(&bytes)?;
            let ckpt =
                Checkpoint::load(&from.join(format!("ckpt/epoch_{}.tfrx", prev.last_epoch)))?;
            let adam = load_optimizer(
                &from.join("ckpt/optimizer.tfrx"),
                &ckpt.params,
                &cfg.train,
                prev.step,
            )?;
            let mut trainer = Trainer::new(ckpt, cfg.train.clone())?
                .resume(adam, prev.last_epoch)?
                .with_output_dir(&data.out);
            let epochs = data.epochs.unwrap_or(cfg.train.finetune_epochs);
            let r = trainer.train_phase(Phase::Finetune, &d.train, &d.val, epochs)?;
            finish_phase(&data.out, &trainer, r)?;
        }
        Command::Average {
            output,
            checkpoints,
        } => {
            let ckpts = checkpoints
                .iter()
                .map(|p| Checkpoint::load(p))
                .collect::<Result<Vec<_>>>()?;
            average_checkpoints(&ckpts)?.save(output)?;
        }
        Command::Translate {
            checkpoint,
            word_vocab,
            bpe_vocab,
            merges,
            input,
            output,
            preprocess,
            truecase_model,
            nbest,
            beam,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let wv = Vocab::load(word_vocab)?;
            let bv = Vocab::load(bpe_vocab)?;
            let bpe = BpeModel::read_merges(merges)?;
            let tc = truecase_model
                .as_deref()
                .map(TruecaseModel::load)
                .transpose()?;
            let mut search = cfg.search.clone();
            if let Some(b) = beam {
                search.beam = *b;
            }
            if let Some(k) = nbest {
                search.beam = search.beam.max(*k);
            }
            let translator = transference::search::Translator {
                checkpoint: &ckpt,
                word_vocab: &wv,
                bpe_vocab: &bv,
                search: search.clone(),
            };
            let max = ckpt.config.max_positions;
            let mut out = Vec::new();
            for (n, line) in read_lines(input)?.iter().enumerate() {
                let mut words: Vec<String> = if *preprocess {
                    preprocess_line(line, true)
                } else {
                    line.split_whitespace().map(String::from).collect()
                };
                if let Some(m) = &tc {
                    words = m.apply(&words);
                }
                words.truncate(max);
                let mut subwords = bpe.apply(&words);
                subwords.truncate(max);
                if words.is_empty() {
                    if nbest.is_none() {
                        out.push(String::new());
                    }
                    continue;
                }
                let hyps = translator.nbest(&words, &subwords)?;
                match nbest {
                    None => out.push(translator.subwords(&hyps[0]).join(" ")),
                    Some(k) => {
                        for (rank, h) in hyps.iter().take(*k).enumerate() {
                            out.push(format!(
                                "{n}\t{}\t{:.6}\t{}",
                                rank + 1,
                                h.score(search.length_alpha),
                                translator.subwords(h).join(" ")
                            ));
                        }
                    }
                }
            }
            write_lines(output, &out)?;
        }
        Command::Postprocess { input, output } => {
            let lines: Vec<String> = read_tokens(input)?
                .iter()
                .map(|s| postprocess_subwords(s))
                .collect();
            write_lines(output, &lines)?;
        }
        Command::Evaluate {
            hyp,
            reference,
            metric,
            json,
        } => {
            let h = read_lines(hyp)?;
            let r = read_lines(reference)?;
            match metric {
                Metric::Bleu => println!("BLEU {:.1}", bleu(&h, &r)?.score),
                Metric::Ter => println!("TER {:.1}", ter(&h, &r)?.score),
                Metric::Both => println!("{}", evaluate(&h, &r)?.summary()),
            }
            if let Some(path) = json {
                write_json(path, &evaluate(&h, &r)?)?;
            }
        }
        Command::Pipeline => {
            let outcome = run_pipeline(&cfg)?;
            for s in &outcome.stages {
                log::info!("{}: {:?}", s.stage, s.status);
            }
            println!("generic\n{}", outcome.report.generic.summary());
            println!("fine-tuned\n{}", outcome.report.finetuned.summary());
            println!("artifacts in {}", outcome.workdir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
