use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::PAD_ID;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Init, LayerNorm, Linear, Mode};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const TEXT_PREFIX: &str = "text_encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Token feature width inside the attention blocks.
    pub d_tok: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Output channels of the pointwise conv over the token map.
    pub conv_channels: usize,
    pub d_emb: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            max_len: 32,
            d_tok: 32,
            layers: 2,
            ffn_dim: 64,
            conv_channels: 64,
            d_emb: 64,
        }
    }
}

/// Single-head post-norm self-attention block.
#[derive(Debug, Clone)]
struct AttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl AttentionBlock {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, ffn: usize, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore<T>, n: &str, i, o, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), i, o, Init::Default, rng)
        };
        Self {
            q: lin(store, "query", d, d, rng),
            k: lin(store, "key", d, d, rng),
            v: lin(store, "value", d, d, rng),
            out: lin(store, "attn_out", d, d, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ff1: lin(store, "ff1", d, ffn, rng),
            ff2: lin(store, "ff2", ffn, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    /// `x: [N*L, d]`, `key_keep: [N*L*L]`.
    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        n: usize,
        l: usize,
        key_keep: &[bool],
    ) -> Result<Var> {
        let d = tape.shape(x)[1];
        let q = self.q.forward(store, tape, x)?;
        let k = self.k.forward(store, tape, x)?;
        let v = self.v.forward(store, tape, x)?;
        let q = tape.reshape(q, &[n, l, d])?;
        let k = tape.reshape(k, &[n, l, d])?;
        let v = tape.reshape(v, &[n, l, d])?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, T::one() / T::lit(d as f64).sqrt());
        let attn = tape.softmax(scores, Some(key_keep))?;
        let ctx = tape.bmm(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[n * l, d])?;
        let ctx = self.out.forward(store, tape, ctx)?;
        let h = tape.add(x, ctx)?;
        let h = self.norm1.forward(store, tape, h)?;
        let f = self.ff1.forward(store, tape, h)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(store, tape, f)?;
        let y = tape.add(h, f)?;
        self.norm2.forward(store, tape, y)
    }
}

/// Text branch: token + position embeddings, self-attention blocks,
/// pointwise conv + batchnorm + ReLU over the token map, masked GAP, FC.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<AttentionBlock>,
    conv: ParamId,
    conv_bn: BatchNorm,
    fc: Linear,
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &TextEncoderConfig, rng: &mut R) -> Self {
        let p = TEXT_PREFIX;
        let c = config;
        let tokens = store.trainable(
            &format!("{p}.token_embedding"),
            Tensor::randn(&[c.vocab_size, c.d_tok], 1.0, rng),
        );
        let positions = store.trainable(
            &format!("{p}.position_embedding"),
            Tensor::randn(&[c.max_len, c.d_tok], 0.1, rng),
        );
        let blocks = (0..c.layers)
            .map(|i| AttentionBlock::new(store, &format!("{p}.layer{}", i + 1), c.d_tok, c.ffn_dim, rng))
            .collect();
        let conv = store.trainable(
            &format!("{p}.conv.weight"),
            Tensor::randn(&[c.d_tok, c.conv_channels], (2.0 / c.d_tok as f64).sqrt(), rng),
        );
        let conv_bn = BatchNorm::new(store, &format!("{p}.conv_bn"), c.conv_channels);
        let fc = Linear::new(store, &format!("{p}.fc"), c.conv_channels, c.d_emb, Init::Default, rng);
        Self {
            config: config.clone(),
            tokens,
            positions,
            blocks,
            conv,
            conv_bn,
            fc,
        }
    }

    /// `ids` holds `N` sequences of exactly `max_len` ids, concatenated.
    /// Returns `[N, d_emb]`.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, ids: &[usize], mode: Mode) -> Result<Var> {
        let c = &self.config;
        let l = c.max_len;
        if ids.is_empty() || !ids.len().is_multiple_of(l) {
            return Err(Error::shape(
                "encode_text",
                format!("{} ids is not a whole number of length-{l} sequences", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                size: c.vocab_size,
            });
        }
        let n = ids.len() / l;
        let keep = token_keep_mask(ids, l);
        let key_keep: Vec<bool> = (0..n)
            .flat_map(|b| {
                let row = &keep[b * l..(b + 1) * l];
                (0..l).flat_map(move |_| row.iter().copied())
            })
            .collect();

        let table = tape.param(store, self.tokens);
        let x = tape.embedding(table, ids)?;
        let x = tape.reshape(x, &[n, l, c.d_tok])?;
        let pos = tape.param(store, self.positions);
        let x = tape.add_bias(x, pos)?;
        let mut h = tape.reshape(x, &[n * l, c.d_tok])?;
        for block in &self.blocks {
            h = block.forward(store, tape, h, n, l, &key_keep)?;
        }
        let w = tape.param(store, self.conv);
        let m = tape.matmul(h, w)?;
        let m = self.conv_bn.forward(store, tape, m, mode, Some(&keep))?;
        let m = tape.relu(m);
        let m = tape.reshape(m, &[n, l, c.conv_channels])?;
        let pooled = tape.masked_seq_mean(m, &keep)?;
        self.fc.forward(store, tape, pooled)
    }

    /// Embedding of one id sequence in eval mode.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, ids: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let y = self.forward(store, &mut tape, ids, Mode::Eval)?;
        Ok(tape.value(y).to_vec())
    }

    pub fn expected_params(&self) -> usize {
        let c = &self.config;
        let lin = |i: usize, o: usize| i * o + o;
        let block = 4 * lin(c.d_tok, c.d_tok) + lin(c.d_tok, c.ffn_dim) + lin(c.ffn_dim, c.d_tok) + 4 * c.d_tok;
        c.vocab_size * c.d_tok
            + c.max_len * c.d_tok
            + c.layers * block
            + c.d_tok * c.conv_channels
            + 2 * c.conv_channels
            + lin(c.conv_channels, c.d_emb)
    }
}

/// Non-pad positions, with position 0 standing in for an all-pad sequence.
pub fn token_keep_mask(ids: &[usize], max_len: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = ids.iter().map(|&i| i != PAD_ID).collect();
    for row in keep.chunks_mut(max_len) {
        if !row.iter().any(|&k| k) {
            row[0] = true;
        }
    }
    keep
}
