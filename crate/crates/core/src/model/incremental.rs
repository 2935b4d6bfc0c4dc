use super::attention::{attend_heads, linear3, split_heads, AttentionParams};
use super::layers::{check_prefix, embed, encode, feed_forward, residual_norm, Runtime};
use super::{check_params, ModelConfig, PaddedIds, SourceBatch};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, ParamVars, Tape, Tensor, Var};
use crate::vocab::BOS_ID;

/// Decoder self-attention keys/values for every emitted position, per layer.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// Tokens fed so far, starting with BOS.
    pub tokens: Vec<usize>,
    cache: Vec<(Tensor<f32>, Tensor<f32>)>,
}

/// Step-at-a-time decoding for one source sentence. The source is encoded
/// once; each step only runs the new position through the decoder.
pub struct IncrementalDecoder<'m> {
    config: &'m ModelConfig,
    params: &'m NamedTensors<f32>,
    /// Cross-attention keys/values over enc₁→₂, `[heads, src_len, d_k]` per layer.
    memory: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(
        config: &'m ModelConfig,
        params: &'m NamedTensors<f32>,
        source: &SourceBatch,
    ) -> Result<Self> {
        check_params(config, params)?;
        if source.batch() != 1 {
            return Err(Error::Contract(format!(
                "incremental decoding takes one sentence, got {}",
                source.batch()
            )));
        }
        let tape = Tape::new();
        let pv = ParamVars::constants(&tape, params);
        let enc = encode(config, &pv, source, &mut Runtime::eval())?;
        let mut memory = Vec::with_capacity(config.n_layers_dec);
        for i in 0..config.n_layers_dec {
            let ca = AttentionParams::load(&pv, &format!("dec/layer_{i}/cross_attn"))?;
            let k = split_heads(linear3(enc.enc12_out, ca.w_k)?, config.heads)?;
            let v = split_heads(linear3(enc.enc12_out, ca.w_v)?, config.heads)?;
            memory.push((k.value(), v.value()));
        }
        Ok(Self {
            config,
            params,
            memory,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// Feeds BOS; returns the state and log-probabilities of the first token.
    pub fn start(&self) -> Result<(DecoderState, Vec<f32>)> {
        let empty = DecoderState {
            tokens: Vec::new(),
            cache: Vec::new(),
        };
        self.advance(&empty, BOS_ID)
    }

    /// Feeds `token` after `state`; returns the extended state and the
    /// next-token log-probabilities.
    pub fn advance(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f32>)> {
        let cfg = self.config;
        let pos = state.tokens.len();
        check_prefix(cfg, pos + 1)?;
        let tape = Tape::new();
        let pv = ParamVars::constants(&tape, self.params);
        let rt = &mut Runtime::eval();
        let ids = PaddedIds::new(&[vec![token]])?;
        ids.check_vocab(cfg.bpe_vocab_size, "target")?;
        let mut x = embed(pv.get("embed/bpe")?, &ids, pos, cfg.d_model, rt)?;
        let mut cache = Vec::with_capacity(cfg.n_layers_dec);
        for i in 0..cfg.n_layers_dec {
            let prefix = format!("dec/layer_{i}");
            let sa = AttentionParams::load(&pv, &format!("{prefix}/self_attn"))?;
            let q = split_heads(linear3(x, sa.w_q)?, cfg.heads)?;
            let k_new = split_heads(linear3(x, sa.w_k)?, cfg.heads)?;
            let v_new = split_heads(linear3(x, sa.w_v)?, cfg.heads)?;
            let (k, v) = match state.cache.get(i) {
                Some((k_old, v_old)) => (
                    Var::concat(&[tape.constant(k_old.clone()), k_new], 1)?,
                    Var::concat(&[tape.constant(v_old.clone()), v_new], 1)?,
                ),
                None => (k_new, v_new),
            };
            let a = attend_heads(&sa, cfg.heads, q, k, v, None, None)?;
            x = residual_norm(&pv, &format!("{prefix}/self_attn_norm"), x, a, rt)?;

            let ca = AttentionParams::load(&pv, &format!("{prefix}/cross_attn"))?;
            let q = split_heads(linear3(x, ca.w_q)?, cfg.heads)?;
            let (mk, mv) = &self.memory[i];
            let c = attend_heads(
                &ca,
                cfg.heads,
                q,
                tape.constant(mk.clone()),
                tape.constant(mv.clone()),
                None,
                None,
            )?;
            x = residual_norm(&pv, &format!("{prefix}/cross_attn_norm"), x, c, rt)?;
            let f = feed_forward(&pv, &format!("{prefix}/ffn"), x)?;
            x = residual_norm(&pv, &format!("{prefix}/ffn_norm"), x, f, rt)?;
            cache.push((k.value(), v.value()));
        }
        let logits = linear3(x, pv.get("out/weight")?)?.add_row(pv.get("out/bias")?)?;
        let log_probs = logits.log_softmax()?.value().into_vec();
        let mut tokens = state.tokens.clone();
        tokens.push(token);
        Ok((DecoderState { tokens, cache }, log_probs))
    }
}
