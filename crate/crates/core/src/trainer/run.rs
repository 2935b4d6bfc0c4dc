use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batching::{make_batches, EncodedPair};
use super::optim::{average_checkpoints, clip_global_norm, Adam};
use super::{label_smoothed_loss, lr_schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{decode_forward, encode, Checkpoint, ModelConfig, Runtime};
use crate::tensor::{io, NamedTensors, ParamVars, Tape};
use crate::vocab::PAD_ID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Generic,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Generic => "generic",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    /// Filled on the last step of each epoch.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Counted across both phases, from 1.
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PhaseResult {
    pub epochs: Vec<EpochRecord>,
    /// Epoch numbers of the checkpoints that went into the average.
    pub kept: Vec<usize>,
    pub averaged: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generic: PhaseResult,
    pub finetune: Option<PhaseResult>,
    /// The fine-tuned average, or the generic one without fine-tuning.
    pub final_model: Checkpoint,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: NamedTensors<f32>,
    pub adam: Adam,
    pub log: Vec<LogRow>,
    rng: ChaCha8Rng,
    epoch: usize,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(init: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            &init.params,
            config.beta1,
            config.beta2,
            config.adam_epsilon,
        );
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model: init.config,
            params: init.params,
            adam,
            log: Vec::new(),
            epoch: 0,
            out_dir: None,
            config,
        })
    }

    /// Writes checkpoints under `<dir>/ckpt/` and the log to `<dir>/train_log.csv`.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Continues from `epoch` completed epochs with restored optimizer state.
    pub fn resume(mut self, adam: Adam, epoch: usize) -> Result<Self> {
        adam.check_layout(&self.params)?;
        self.adam = adam;
        self.epoch = epoch;
        Ok(self)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(self.params.clone(), self.model.clone(), self.step())
    }

    fn ckpt_path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("ckpt").join(name))
    }

    pub fn learning_rate(&self, step: u64) -> Result<f64> {
        Ok(self.config.lr_scale * lr_schedule(step, self.model.d_model, self.config.warmup_steps)?)
    }

    /// Forward, backward, clip and one Adam update; returns the batch loss.
    pub fn train_step(&mut self, pairs: &[&EncodedPair], phase: Phase) -> Result<f64> {
        let batch = EncodedPair::collate(pairs)?;
        batch.source.check(&self.model)?;
        let next = self.step() + 1;
        let diverged = |e: Error| match e {
            Error::Numeric(reason) => Error::Diverged { step: next, reason },
            e => e,
        };
        let (loss, mut grads) = {
            let tape = Tape::new();
            let pv = ParamVars::bind(&tape, &self.params);
            let mut rt = Runtime::train(self.model.dropout, &mut self.rng);
            let enc = encode(&self.model, &pv, &batch.source, &mut rt).map_err(diverged)?;
            let logits =
                decode_forward(&self.model, &pv, &enc, &batch.prefix, &mut rt).map_err(diverged)?;
            let loss =
                label_smoothed_loss(logits, &batch.labels, self.config.label_smoothing, PAD_ID)
                    .map_err(diverged)?;
            let value = loss.value().item()? as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: next,
                    reason: format!("training loss is {value}"),
                });
            }
            (value, pv.gradients(&tape.backward(loss).map_err(diverged)?))
        };
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let lr = self.learning_rate(next)?;
        self.adam.step(&mut self.params, &grads, lr)?;
        self.log.push(LogRow {
            step: next,
            phase,
            lr,
            train_loss: loss,
            val_loss: None,
        });
        Ok(loss)
    }

    /// Token-weighted mean of the training criterion over `pairs`, without dropout.
    pub fn validation_loss(&self, pairs: &[EncodedPair]) -> Result<f64> {
        let batches = make_batches(pairs, self.config.batch_tokens, self.config.max_len, 0, 0)?;
        let (mut total, mut tokens) = (0.0, 0usize);
        for b in batches {
            let refs: Vec<&EncodedPair> = b.iter().map(|&i| &pairs[i]).collect();
            let batch = EncodedPair::collate(&refs)?;
            batch.source.check(&self.model)?;
            let tape = Tape::new();
            let pv = ParamVars::constants(&tape, &self.params);
            let mut rt = Runtime::eval();
            let enc = encode(&self.model, &pv, &batch.source, &mut rt)?;
            let logits = decode_forward(&self.model, &pv, &enc, &batch.prefix, &mut rt)?;
            let loss =
                label_smoothed_loss(logits, &batch.labels, self.config.label_smoothing, PAD_ID)?;
            let n = batch.labels.iter().filter(|&&l| l != PAD_ID).count();
            total += loss.value().item()? as f64 * n as f64;
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::Training("validation set has no usable pairs".into()));
        }
        Ok(total / tokens as f64)
    }

    /// Saves the current parameters as `last_good` and converts the error.
    fn on_failure(&self, err: Error) -> Error {
        if matches!(err, Error::Diverged { .. }) {
            if let Some(path) = self.ckpt_path("last_good.tfrx") {
                if let Err(e) = self.checkpoint().and_then(|c| c.save(&path)) {
                    log::error!("could not save last good checkpoint: {e}");
                }
            }
        }
        err
    }

    pub fn train_phase(
        &mut self,
        phase: Phase,
        data: &[EncodedPair],
        val: &[EncodedPair],
        epochs: usize,
    ) -> Result<PhaseResult> {
        if epochs == 0 {
            return Err(Error::Config(format!(
                "{} phase needs at least one epoch",
                phase.as_str()
            )));
        }
        let keep = epochs.min(self.config.checkpoint_keep);
        let mut records = Vec::with_capacity(epochs);
        let mut best: Vec<(f64, usize, Checkpoint)> = Vec::new();
        for _ in 0..epochs {
            self.epoch += 1;
            // Dropout masks depend only on (seed, epoch), so a resumed run
            // draws the same ones.
            self.rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_d20f);
            self.rng.set_stream(self.epoch as u64);
            let batches = make_batches(
                data,
                self.config.batch_tokens,
                self.config.max_len,
                self.config.seed,
                self.epoch,
            )?;
            if batches.is_empty() {
                return Err(Error::Training(format!(
                    "no {} pair fits max_len",
                    phase.as_str()
                )));
            }
            let mut sum = 0.0;
            for b in &batches {
                let refs: Vec<&EncodedPair> = b.iter().map(|&i| &data[i]).collect();
                sum += self
                    .train_step(&refs, phase)
                    .map_err(|e| self.on_failure(e))?;
            }
            let val_loss = self.validation_loss(val)?;
            if !val_loss.is_finite() {
                return Err(self.on_failure(Error::Diverged {
                    step: self.step(),
                    reason: format!("validation loss is {val_loss}"),
                }));
            }
            if let Some(row) = self.log.last_mut() {
                row.val_loss = Some(val_loss);
            }
            let record = EpochRecord {
                phase,
                epoch: self.epoch,
                step: self.step(),
                train_loss: sum / batches.len() as f64,
                val_loss,
            };
            log::info!(
                "{} epoch {} step {}: train {:.4} val {:.4}",
                phase.as_str(),
                record.epoch,
                record.step,
                record.train_loss,
                val_loss
            );
            let ckpt = self.checkpoint()?;
            if let Some(path) = self.ckpt_path(&format!("epoch_{}.tfrx", self.epoch)) {
                ckpt.save(&path)?;
                io::save(
                    &self.ckpt_path("optimizer.tfrx").expect("out dir set"),
                    &self.adam.state()?,
                )?;
                self.write_log()?;
            }
            best.push((val_loss, self.epoch, ckpt));
            best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            best.truncate(keep);
            records.push(record);
        }
        best.sort_by_key(|b| b.1);
        let kept = best.iter().map(|b| b.1).collect();
        let ckpts: Vec<Checkpoint> = best.into_iter().map(|b| b.2).collect();
        Ok(PhaseResult {
            epochs: records,
            kept,
            averaged: average_checkpoints(&ckpts)?,
        })
    }

    /// Generic training, then fine-tuning from the live parameters with the
    /// optimizer state and step count carried over.
    pub fn train(
        &mut self,
        generic: &[EncodedPair],
        finetune: &[EncodedPair],
        val: &[EncodedPair],
    ) -> Result<TrainOutcome> {
        let generic_result = self.train_phase(Phase::Generic, generic, val, self.config.epochs)?;
        if let Some(p) = self.ckpt_path("generic.tfrx") {
            generic_result.averaged.save(&p)?;
        }
        let finetune_result = if self.config.finetune_epochs > 0 && !finetune.is_empty() {
            Some(self.train_phase(Phase::Finetune, finetune, val, self.config.finetune_epochs)?)
        } else {
            None
        };
        let final_model = finetune_result
            .as_ref()
            .unwrap_or(&generic_result)
            .averaged
            .clone();
        if let Some(p) = self.ckpt_path("averaged.tfrx") {
            final_model.save(&p)?;
            self.write_log()?;
        }
        Ok(TrainOutcome {
            generic: generic_result,
            finetune: finetune_result,
            final_model,
        })
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,phase,lr,train_loss,val_loss\n");
        for r in &self.log {
            let val = r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.6e},{:.6},{}",
                r.step,
                r.phase.as_str(),
                r.lr,
                r.train_loss,
                val
            );
        }
        out
    }

    fn write_log(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            io::write_atomic(&dir.join("train_log.csv"), self.log_csv().as_bytes())?;
        }
        Ok(())
    }
}

/// Loads `optimizer.tfrx`-style moments saved next to a checkpoint.
pub fn load_optimizer(
    path: &Path,
    params: &NamedTensors<f32>,
    config: &TrainConfig,
    step: u64,
) -> Result<Adam> {
    let mut adam = Adam::new(params, config.beta1, config.beta2, config.adam_epsilon);
    adam.restore(&io::load(path)?, step)?;
    Ok(adam)
}
