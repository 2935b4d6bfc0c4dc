use rand_chacha::ChaCha8Rng;

use super::attention::{linear3, multi_head_attention_probed, AttentionMask, AttentionParams};
use super::{positional_rows, ModelConfig, PaddedIds, SourceBatch, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{ParamVars, Scalar, Tensor, Var};

/// Dropout settings for one forward pass. Without an RNG the pass runs in
/// evaluation mode and dropout is the identity.
pub struct Runtime<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
    /// When set, every attention block appends its weights
    /// `[batch·heads, q_len, k_len]` here.
    pub probe: Option<Vec<Tensor<f64>>>,
}

impl Runtime<'static> {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
            probe: None,
        }
    }

    pub fn probed() -> Self {
        Self {
            probe: Some(Vec::new()),
            ..Self::eval()
        }
    }
}

impl<'r> Runtime<'r> {
    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
            probe: None,
        }
    }

    fn attention<'t, T: Scalar>(
        &mut self,
        p: &AttentionParams<'t, T>,
        heads: usize,
        q_in: Var<'t, T>,
        kv_in: Var<'t, T>,
        mask: &AttentionMask,
    ) -> Result<Var<'t, T>> {
        multi_head_attention_probed(p, heads, q_in, kv_in, mask, self.probe.as_mut())
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub(crate) fn dropout<'t, T: Scalar>(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.rng.as_deref_mut() {
            Some(rng) => x.dropout(self.dropout, true, rng),
            None => Ok(x),
        }
    }
}

/// Embedding lookup scaled by √d_model, plus positional encoding starting at
/// position `start`; `[batch, len, d_model]`.
pub(crate) fn embed<'t, T: Scalar>(
    table: Var<'t, T>,
    ids: &PaddedIds,
    start: usize,
    d_model: usize,
    rt: &mut Runtime<'_>,
) -> Result<Var<'t, T>> {
    let x = table.embedding(&ids.ids)?.scale((d_model as f64).sqrt());
    let pe = positional_rows::<T>(start, ids.len, d_model)?;
    let mut tiled = Vec::with_capacity(ids.batch * pe.len());
    for _ in 0..ids.batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe = table
        .tape()
        .constant(Tensor::new([ids.batch * ids.len, d_model], tiled)?);
    let x = rt.dropout(x.add(pe)?)?;
    x.reshape([ids.batch, ids.len, d_model])
}

/// LN(x + dropout(sublayer)).
pub(crate) fn residual_norm<'t, T: Scalar>(
    params: &ParamVars<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    sublayer: Var<'t, T>,
    rt: &mut Runtime<'_>,
) -> Result<Var<'t, T>> {
    let gain = params.get(&format!("{prefix}/gain"))?;
    let bias = params.get(&format!("{prefix}/bias"))?;
    x.add(rt.dropout(sublayer)?)?
        .layer_norm(gain, bias, LAYER_NORM_EPS)
}

pub(crate) fn feed_forward<'t, T: Scalar>(
    params: &ParamVars<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let w1 = params.get(&format!("{prefix}/w_1"))?;
    let b1 = params.get(&format!("{prefix}/b_1"))?;
    let w2 = params.get(&format!("{prefix}/w_2"))?;
    let b2 = params.get(&format!("{prefix}/b_2"))?;
    linear3(linear3(x, w1)?.add_row(b1)?.relu(), w2)?.add_row(b2)
}

fn encoder_layer<'t, T: Scalar>(
    params: &ParamVars<'t, T>,
    prefix: &str,
    heads: usize,
    x: Var<'t, T>,
    mask: &AttentionMask,
    rt: &mut Runtime<'_>,
) -> Result<Var<'t, T>> {
    let attn = AttentionParams::load(params, &format!("{prefix}/self_attn"))?;
    let a = rt.attention(&attn, heads, x, x, mask)?;
    let x = residual_norm(params, &format!("{prefix}/self_attn_norm"), x, a, rt)?;
    let f = feed_forward(params, &format!("{prefix}/ffn"), x)?;
    residual_norm(params, &format!("{prefix}/ffn_norm"), x, f, rt)
}

/// Self-attention over `x`, cross-attention from `x` into `memory`, FFN.
/// Used unmasked by the cross encoder and causally by the decoder.
#[allow(clippy::too_many_arguments)]
fn two_source_layer<'t, T: Scalar>(
    params: &ParamVars<'t, T>,
    prefix: &str,
    heads: usize,
    x: Var<'t, T>,
    memory: Var<'t, T>,
    self_mask: &AttentionMask,
    cross_mask: &AttentionMask,
    rt: &mut Runtime<'_>,
) -> Result<Var<'t, T>> {
    let sa = AttentionParams::load(params, &format!("{prefix}/self_attn"))?;
    let a = rt.attention(&sa, heads, x, x, self_mask)?;
    let x = residual_norm(params, &format!("{prefix}/self_attn_norm"), x, a, rt)?;
    let ca = AttentionParams::load(params, &format!("{prefix}/cross_attn"))?;
    let c = rt.attention(&ca, heads, x, memory, cross_mask)?;
    let x = residual_norm(params, &format!("{prefix}/cross_attn_norm"), x, c, rt)?;
    let f = feed_forward(params, &format!("{prefix}/ffn"), x)?;
    residual_norm(params, &format!("{prefix}/ffn_norm"), x, f, rt)
}

fn self_attention_stack<'t, T: Scalar>(
    params: &ParamVars<'t, T>,
    stack: &str,
    layers: usize,
    heads: usize,
    mut x: Var<'t, T>,
    valid: &[bool],
    rt: &mut Runtime<'_>,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    let mask = AttentionMask::key_padding(valid, s[0], s[1]);
    for i in 0..layers {
        x = encoder_layer(params, &format!("{stack}/layer_{i}"), heads, x, &mask, rt)?;
    }
    Ok(x)
}

/// enc₁→₂: each layer self-attends over the subword stream (no causal
/// mask) and then cross-attends into the word encoder output.
pub fn cross_encoder_stack<'t, T: Scalar>(
    config: &ModelConfig,
    params: &ParamVars<'t, T>,
    enc2_out: Var<'t, T>,
    enc1_out: Var<'t, T>,
    subword_valid: &[bool],
    word_valid: &[bool],
    rt: &mut Runtime<'_>,
) -> Result<Var<'t, T>> {
    let s = enc2_out.shape();
    let self_mask = AttentionMask::key_padding(subword_valid, s[0], s[1]);
    let cross_mask = AttentionMask::key_padding(word_valid, s[0], s[1]);
    let mut x = enc2_out;
    for i in 0..config.n_layers_es {
        x = two_source_layer(
            params,
            &format!("enc_cross/layer_{i}"),
            config.heads,
            x,
            enc1_out,
            &self_mask,
            &cross_mask,
            rt,
        )?;
    }
    Ok(x)
}

/// The three source representations, each `[batch, len, d_model]`.
#[derive(Clone, Debug)]
pub struct EncodedSource<'t, T: Scalar> {
    pub enc1_out: Var<'t, T>,
    pub enc2_out: Var<'t, T>,
    pub enc12_out: Var<'t, T>,
    pub word_valid: Vec<bool>,
    pub subword_valid: Vec<bool>,
}

pub fn encode<'t, T: Scalar>(
    config: &ModelConfig,
    params: &ParamVars<'t, T>,
    batch: &SourceBatch,
    rt: &mut Runtime<'_>,
) -> Result<EncodedSource<'t, T>> {
    batch.check(config)?;
    let d = config.d_model;
    let words = embed(params.get("embed/word")?, &batch.words, 0, d, rt)?;
    let enc1 = self_attention_stack(
        params,
        "enc_word",
        config.n_layers_fw,
        config.heads,
        words,
        &batch.words.valid,
        rt,
    )?;
    let subwords = embed(params.get("embed/bpe")?, &batch.subwords, 0, d, rt)?;
    let enc2 = self_attention_stack(
        params,
        "enc_bpe",
        config.n_layers_fs,
        config.heads,
        subwords,
        &batch.subwords.valid,
        rt,
    )?;
    let enc12 = cross_encoder_stack(
        config,
        params,
        enc2,
        enc1,
        &batch.subwords.valid,
        &batch.words.valid,
        rt,
    )?;
    Ok(EncodedSource {
        enc1_out: enc1,
        enc2_out: enc2,
        enc12_out: enc12,
        word_valid: batch.words.valid.clone(),
        subword_valid: batch.subwords.valid.clone(),
    })
}

/// Checks a decoder prefix length. Position 0 holds BOS, so a prefix may
/// carry up to `max_positions` tokens after it.
pub(crate) fn check_prefix(config: &ModelConfig, len: usize) -> Result<()> {
    if len > config.max_positions + 1 {
        return Err(Error::Contract(format!(
            "target prefix of {} tokens after BOS exceeds max_positions {}",
            len - 1,
            config.max_positions
        )));
    }
    Ok(())
}

/// Teacher-forced decoder over BOS-initial prefixes: logits
/// `[batch, tgt_len, bpe_vocab]`.
pub fn decode_forward<'t, T: Scalar>(
    config: &ModelConfig,
    params: &ParamVars<'t, T>,
    encoded: &EncodedSource<'t, T>,
    prefix: &PaddedIds,
    rt: &mut Runtime<'_>,
) -> Result<Var<'t, T>> {
    check_prefix(config, prefix.len)?;
    prefix.check_vocab(config.bpe_vocab_size, "target")?;
    let memory = encoded.enc12_out;
    if memory.shape()[0] != prefix.batch {
        return Err(Error::dim(
            "decode_forward",
            &memory.shape(),
            &[prefix.batch, prefix.len],
        ));
    }
    let mut x = embed(params.get("embed/bpe")?, prefix, 0, config.d_model, rt)?;
    let self_mask = AttentionMask::causal(&prefix.valid, prefix.batch);
    let cross_mask = AttentionMask::key_padding(&encoded.subword_valid, prefix.batch, prefix.len);
    for i in 0..config.n_layers_dec {
        x = two_source_layer(
            params,
            &format!("dec/layer_{i}"),
            config.heads,
            x,
            memory,
            &self_mask,
            &cross_mask,
            rt,
        )?;
    }
    linear3(x, params.get("out/weight")?)?.add_row(params.get("out/bias")?)
}
