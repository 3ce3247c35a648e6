//! Minimal pre-norm transformer blocks for the attention baselines:
//! multi-head self-attention (optionally causal), optional cross-attention
//! to an encoder stream, and a SiLU MLP.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mamba::LayerNormParams;
use crate::params::{linear_init, uniform_init, BoundParams, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

const FFN_MULT: usize = 2;

#[derive(Debug, Clone)]
pub struct AttnHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub heads: Vec<AttnHeadParams>,
    pub out_b: ParamId,
    pub head_dim: usize,
}

impl MultiHeadParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let head_dim = model_dim / n_heads;
        let bound = 1.0 / (model_dim as f64).sqrt();
        let heads = (0..n_heads)
            .map(|h| AttnHeadParams {
                wq: store.add(
                    format!("{prefix}.h{h}.wq"),
                    uniform_init(&[model_dim, head_dim], bound, rng),
                ),
                wk: store.add(
                    format!("{prefix}.h{h}.wk"),
                    uniform_init(&[model_dim, head_dim], bound, rng),
                ),
                wv: store.add(
                    format!("{prefix}.h{h}.wv"),
                    uniform_init(&[model_dim, head_dim], bound, rng),
                ),
                wo: store.add(
                    format!("{prefix}.h{h}.wo"),
                    uniform_init(&[head_dim, model_dim], 1.0 / (head_dim as f64).sqrt(), rng),
                ),
            })
            .collect();
        let out_b = store.add(format!("{prefix}.out_b"), Tensor::zeros(&[model_dim]));
        MultiHeadParams { heads, out_b, head_dim }
    }

    /// Scaled dot-product attention summed over heads. Queries come from
    /// `q_src`, keys/values from `kv_src`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        q_src: Var,
        kv_src: Var,
        causal: bool,
    ) -> Result<Var> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut total: Option<Var> = None;
        let last = self.heads.len() - 1;
        for (i, h) in self.heads.iter().enumerate() {
            let q = tape.linear(q_src, bp.var(h.wq), None)?;
            let k = tape.linear(kv_src, bp.var(h.wk), None)?;
            let v = tape.linear(kv_src, bp.var(h.wv), None)?;
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, scale)?;
            let probs = tape.masked_softmax_rows(scaled, causal)?;
            let ctx = tape.matmul(probs, v)?;
            let bias = if i == last { Some(bp.var(self.out_b)) } else { None };
            let o = tape.linear(ctx, bp.var(h.wo), bias)?;
            total = Some(match total {
                Some(t) => tape.add(t, o)?,
                None => o,
            });
        }
        Ok(total.unwrap())
    }
}

#[derive(Debug, Clone)]
pub struct AttnBlockParams {
    pub ln1: LayerNormParams,
    pub self_attn: MultiHeadParams,
    pub cross: Option<(LayerNormParams, MultiHeadParams)>,
    pub ln2: LayerNormParams,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl AttnBlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        n_heads: usize,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let ln1 = LayerNormParams::init(store, &format!("{prefix}.ln1"), model_dim);
        let self_attn =
            MultiHeadParams::init(store, &format!("{prefix}.attn"), model_dim, n_heads, rng);
        let cross = if with_cross {
            let ln = LayerNormParams::init(store, &format!("{prefix}.ln_x"), model_dim);
            let mh =
                MultiHeadParams::init(store, &format!("{prefix}.xattn"), model_dim, n_heads, rng);
            Some((ln, mh))
        } else {
            None
        };
        let ln2 = LayerNormParams::init(store, &format!("{prefix}.ln2"), model_dim);
        let hidden = FFN_MULT * model_dim;
        let (w1, b1) = linear_init(model_dim, hidden, rng);
        let (w2, b2) = linear_init(hidden, model_dim, rng);
        AttnBlockParams {
            ln1,
            self_attn,
            cross,
            ln2,
            ffn_w1: store.add(format!("{prefix}.ffn_w1"), w1),
            ffn_b1: store.add(format!("{prefix}.ffn_b1"), b1),
            ffn_w2: store.add(format!("{prefix}.ffn_w2"), w2),
            ffn_b2: store.add(format!("{prefix}.ffn_b2"), b2),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        mut x: Var,
        causal: bool,
        cross_src: Option<Var>,
    ) -> Result<Var> {
        let normed = self.ln1.forward(tape, bp, x)?;
        let attn = self.self_attn.forward(tape, bp, normed, normed, causal)?;
        x = tape.add(x, attn)?;
        if let Some((ln, mh)) = &self.cross {
            let src = cross_src.ok_or_else(|| {
                Error::Contract("attention block has cross-attention but no encoder stream".into())
            })?;
            let normed = ln.forward(tape, bp, x)?;
            let attn = mh.forward(tape, bp, normed, src, false)?;
            x = tape.add(x, attn)?;
        }
        let normed = self.ln2.forward(tape, bp, x)?;
        let h = tape.linear(normed, bp.var(self.ffn_w1), Some(bp.var(self.ffn_b1)))?;
        let h = tape.silu(h)?;
        let f = tape.linear(h, bp.var(self.ffn_w2), Some(bp.var(self.ffn_b2)))?;
        tape.add(x, f)
    }
}

/// Pre-norm transformer tower with a final layer norm.
#[derive(Debug, Clone)]
pub struct AttnStack {
    pub blocks: Vec<AttnBlockParams>,
    pub final_ln: LayerNormParams,
}

impl AttnStack {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        n_heads: usize,
        depth: usize,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                AttnBlockParams::init(
                    store,
                    &format!("{prefix}.block{i}"),
                    model_dim,
                    n_heads,
                    with_cross,
                    rng,
                )
            })
            .collect();
        let final_ln = LayerNormParams::init(store, &format!("{prefix}.final_ln"), model_dim);
        AttnStack { blocks, final_ln }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        mut x: Var,
        causal: bool,
        cross_src: Option<Var>,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, bp, x, causal, cross_src)?;
        }
        self.final_ln.forward(tape, bp, x)
    }
}

/// Trainable scalars of one block: 8*Dm^2 + 8*Dm for a self-attention block
/// (FFN multiplier 2), plus 4*Dm^2 + 3*Dm when cross-attention is present.
pub fn attn_block_param_count(model_dim: usize, with_cross: bool) -> usize {
    let base = 8 * model_dim * model_dim + 8 * model_dim;
    if with_cross {
        base + 4 * model_dim * model_dim + 3 * model_dim
    } else {
        base
    }
}
