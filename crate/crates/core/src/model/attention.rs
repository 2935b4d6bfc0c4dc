use crate::error::{Error, Result};
use crate::tensor::{ParamVars, Scalar, Tensor, Var};

/// Which keys each query may attend to: row-major `[batch, q_len, k_len]`,
/// `true` = visible. Hidden positions get exactly zero weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub keep: Vec<bool>,
}

impl AttentionMask {
    pub fn all(batch: usize, q_len: usize, k_len: usize) -> Self {
        Self {
            batch,
            q_len,
            k_len,
            keep: vec![true; batch * q_len * k_len],
        }
    }

    /// Hides padded keys; `key_valid` is `[batch, k_len]`.
    pub fn key_padding(key_valid: &[bool], batch: usize, q_len: usize) -> Self {
        let k_len = key_valid.len() / batch;
        let mut keep = Vec::with_capacity(batch * q_len * k_len);
        for b in 0..batch {
            for _ in 0..q_len {
                keep.extend_from_slice(&key_valid[b * k_len..(b + 1) * k_len]);
            }
        }
        Self {
            batch,
            q_len,
            k_len,
            keep,
        }
    }

    /// Key padding plus the causal restriction key ≤ query.
    pub fn causal(key_valid: &[bool], batch: usize) -> Self {
        let mut m = Self::key_padding(key_valid, batch, key_valid.len() / batch);
        let n = m.k_len;
        for (i, k) in m.keep.iter_mut().enumerate() {
            let (q, j) = ((i / n) % n, i % n);
            if j > q {
                *k = false;
            }
        }
        m
    }

    /// Repeats the mask for each head, matching `[batch*heads, q_len, k_len]`.
    fn for_heads(&self, heads: usize) -> Vec<bool> {
        let block = self.q_len * self.k_len;
        let mut out = Vec::with_capacity(self.keep.len() * heads);
        for b in 0..self.batch {
            for _ in 0..heads {
                out.extend_from_slice(&self.keep[b * block..(b + 1) * block]);
            }
        }
        out
    }
}

/// softmax(QKᵀ/√d_k)·V over `[b, len, dim]` operands; returns the output
/// and the attention weights `[b, q_len, k_len]`.
pub(crate) fn attention_with_weights<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    keep: Option<&[bool]>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::dim("attention q·kᵀ", &sq, &sk));
    }
    if sv.len() != 3 || sv[0] != sk[0] || sv[1] != sk[1] {
        return Err(Error::dim("attention k/v", &sk, &sv));
    }
    let scores = q.batch_matmul(k, true)?.scale(1.0 / (sq[2] as f64).sqrt());
    let weights = match keep {
        Some(keep) => scores.masked_softmax(keep)?,
        None => scores.softmax(2)?,
    };
    Ok((weights.batch_matmul(v, false)?, weights))
}

/// Scaled dot-product attention on `[b, q_len, d_k]`, `[b, k_len, d_k]`, `[b, k_len, d_v]`.
/// `keep`, if given, is `[b, q_len, k_len]` with `false` at hidden keys.
pub fn scaled_dot_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    keep: Option<&[bool]>,
) -> Result<Var<'t, T>> {
    attention_with_weights(q, k, v, keep).map(|(out, _)| out)
}

/// The four projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t, T: Scalar> {
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub w_o: Var<'t, T>,
}

impl<'t, T: Scalar> AttentionParams<'t, T> {
    pub fn load(params: &ParamVars<'t, T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_q: params.get(&format!("{prefix}/w_q"))?,
            w_k: params.get(&format!("{prefix}/w_k"))?,
            w_v: params.get(&format!("{prefix}/w_v"))?,
            w_o: params.get(&format!("{prefix}/w_o"))?,
        })
    }
}

/// `[b, len, d] · [d, e] → [b, len, e]`.
pub(crate) fn linear3<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim("linear", &s, &w.shape()));
    }
    let out = x.reshape([s[0] * s[1], s[2]])?.matmul(w)?;
    let e = out.shape()[1];
    out.reshape([s[0], s[1], e])
}

/// `[b, len, h·d_k] → [b·h, len, d_k]`.
pub(crate) fn split_heads<'t, T: Scalar>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, len, d) = (s[0], s[1], s[2]);
    if d % heads != 0 {
        return Err(Error::dim("split_heads", &s, &[heads]));
    }
    x.reshape([b, len, heads, d / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b * heads, len, d / heads])
}

/// `[b·h, len, d_k] → [b, len, h·d_k]`.
pub(crate) fn merge_heads<'t, T: Scalar>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (bh, len, dk) = (s[0], s[1], s[2]);
    let b = bh / heads;
    x.reshape([b, heads, len, dk])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b, len, heads * dk])
}

/// Attention given already projected, head-split queries/keys/values;
/// returns `[b, q_len, d_model]` after the output projection.
pub(crate) fn attend_heads<'t, T: Scalar>(
    p: &AttentionParams<'t, T>,
    heads: usize,
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: Option<&AttentionMask>,
    probe: Option<&mut Vec<Tensor<f64>>>,
) -> Result<Var<'t, T>> {
    let keep = mask.map(|m| m.for_heads(heads));
    let (ctx, weights) = attention_with_weights(q, k, v, keep.as_deref())?;
    if let Some(probe) = probe {
        probe.push(weights.value().cast());
    }
    linear3(merge_heads(ctx, heads)?, p.w_o)
}

/// Concat_i(attention(Q·W_iᵠ, K·W_iᴷ, V·W_iⱽ))·Wᴼ on `[b, len, d_model]`
/// inputs. Keys and values both come from `kv_in`.
pub fn multi_head_attention<'t, T: Scalar>(
    p: &AttentionParams<'t, T>,
    heads: usize,
    q_in: Var<'t, T>,
    kv_in: Var<'t, T>,
    mask: &AttentionMask,
) -> Result<Var<'t, T>> {
    multi_head_attention_probed(p, heads, q_in, kv_in, mask, None)
}

pub(crate) fn multi_head_attention_probed<'t, T: Scalar>(
    p: &AttentionParams<'t, T>,
    heads: usize,
    q_in: Var<'t, T>,
    kv_in: Var<'t, T>,
    mask: &AttentionMask,
    probe: Option<&mut Vec<Tensor<f64>>>,
) -> Result<Var<'t, T>> {
    let (sq, sk) = (q_in.shape(), kv_in.shape());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::dim("multi_head_attention", &sq, &sk));
    }
    if (mask.batch, mask.q_len, mask.k_len) != (sq[0], sq[1], sk[1]) {
        return Err(Error::dim(
            "attention mask",
            &[mask.batch, mask.q_len, mask.k_len],
            &[sq[0], sq[1], sk[1]],
        ));
    }
    let q = split_heads(linear3(q_in, p.w_q)?, heads)?;
    let k = split_heads(linear3(kv_in, p.w_k)?, heads)?;
    let v = split_heads(linear3(kv_in, p.w_v)?, heads)?;
    attend_heads(p, heads, q, k, v, Some(mask), probe)
}
