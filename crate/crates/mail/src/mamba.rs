//! The gated Mamba block (expand projection, causal depthwise convolution,
//! SiLU, selective SSM, SiLU gate, contract projection) and pre-norm
//! residual stacking.

use rand::Rng;

use crate::error::Result;
use crate::params::{linear_init, uniform_init, BoundParams, ParamId, ParamStore};
use crate::ssm::{selective_ssm_forward, SelectiveSsmParams, SsmMode};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Structural hyperparameters of one block. The expansion factor is fixed
/// at 2: the inner width is always 2 * model_dim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MambaBlockConfig {
    pub model_dim: usize,
    pub state_dim: usize,
    pub conv_width: usize,
}

impl MambaBlockConfig {
    pub const EXPAND: usize = 2;

    pub fn new(model_dim: usize, state_dim: usize, conv_width: usize) -> Self {
        MambaBlockConfig { model_dim, state_dim, conv_width }
    }

    pub fn inner_dim(&self) -> usize {
        Self::EXPAND * self.model_dim
    }
}

/// Closed-form trainable-scalar count of one block (without its stack-level
/// layer norm): with E = 2 and inner width E*Dm,
///   3*E*Dm^2 + 3*E*Dm*N + (W + 5)*E*Dm + Dm.
pub fn block_param_count(cfg: &MambaBlockConfig) -> usize {
    let dm = cfg.model_dim;
    let di = cfg.inner_dim();
    3 * dm * di + 3 * di * cfg.state_dim + (cfg.conv_width + 5) * di + dm
}

/// A stack of `depth` blocks adds a 2*Dm layer norm per block plus the final
/// 2*Dm layer norm.
pub fn stack_param_count(cfg: &MambaBlockConfig, depth: usize) -> usize {
    depth * (block_param_count(cfg) + 2 * cfg.model_dim) + 2 * cfg.model_dim
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bp: &BoundParams, x: Var) -> Result<Var> {
        tape.layer_norm(x, bp.var(self.gamma), bp.var(self.beta), LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct MambaBlockParams {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub conv_k: ParamId,
    pub conv_b: ParamId,
    pub ssm: SelectiveSsmParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl MambaBlockParams {
    /// Projections use scaled uniform fan-in init; the output projection is
    /// zero so a fresh stack is near-identity.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &MambaBlockConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (dm, di) = (cfg.model_dim, cfg.inner_dim());
        let (in_w, in_b) = linear_init(dm, di, rng);
        let (gate_w, gate_b) = linear_init(dm, di, rng);
        let conv_bound = 1.0 / (cfg.conv_width as f64).sqrt();
        let conv_k = uniform_init(&[cfg.conv_width, di], conv_bound, rng);
        let conv_b = uniform_init(&[di], conv_bound, rng);
        let ssm = SelectiveSsmParams::init(store, &format!("{prefix}.ssm"), di, cfg.state_dim, rng);
        MambaBlockParams {
            in_w: store.add(format!("{prefix}.in_w"), in_w),
            in_b: store.add(format!("{prefix}.in_b"), in_b),
            gate_w: store.add(format!("{prefix}.gate_w"), gate_w),
            gate_b: store.add(format!("{prefix}.gate_b"), gate_b),
            conv_k: store.add(format!("{prefix}.conv_k"), conv_k),
            conv_b: store.add(format!("{prefix}.conv_b"), conv_b),
            ssm,
            out_w: store.add(format!("{prefix}.out_w"), Tensor::zeros(&[di, dm])),
            out_b: store.add(format!("{prefix}.out_b"), Tensor::zeros(&[dm])),
        }
    }
}

/// u = Linear(x); g = Linear(x); y = Linear(SSM(SiLU(Conv(u))) .* SiLU(g)).
pub fn mamba_block_forward(
    tape: &mut Tape,
    bp: &BoundParams,
    x: Var,
    params: &MambaBlockParams,
    mode: SsmMode,
) -> Result<Var> {
    let u = tape.linear(x, bp.var(params.in_w), Some(bp.var(params.in_b)))?;
    let g = tape.linear(x, bp.var(params.gate_w), Some(bp.var(params.gate_b)))?;
    let conv = tape.causal_depthwise_conv(u, bp.var(params.conv_k), bp.var(params.conv_b))?;
    let act = tape.silu(conv)?;
    let y_ssm = selective_ssm_forward(tape, bp, act, &params.ssm, mode)?;
    let gate = tape.silu(g)?;
    let mixed = tape.mul(y_ssm, gate)?;
    tape.linear(mixed, bp.var(params.out_w), Some(bp.var(params.out_b)))
}

/// Pre-norm residual tower: x <- x + Block(LN(x)) per layer, with a final
/// layer norm after the last block.
#[derive(Debug, Clone)]
pub struct MambaStack {
    pub cfg: MambaBlockConfig,
    pub blocks: Vec<(LayerNormParams, MambaBlockParams)>,
    pub final_ln: LayerNormParams,
    pub mode: SsmMode,
}

impl MambaStack {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: MambaBlockConfig,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                let ln = LayerNormParams::init(store, &format!("{prefix}.block{i}.ln"), cfg.model_dim);
                let bl = MambaBlockParams::init(store, &format!("{prefix}.block{i}"), &cfg, rng);
                (ln, bl)
            })
            .collect();
        let final_ln = LayerNormParams::init(store, &format!("{prefix}.final_ln"), cfg.model_dim);
        MambaStack { cfg, blocks, final_ln, mode: SsmMode::Sequential }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, tape: &mut Tape, bp: &BoundParams, x: Var) -> Result<Var> {
        self.forward_range(tape, bp, x, 0, self.blocks.len(), true)
    }

    /// Run blocks [from, to); optionally apply the final layer norm. Used by
    /// the encoder-decoder assembly which splits the decoder after layer 1.
    pub fn forward_range(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        mut x: Var,
        from: usize,
        to: usize,
        final_ln: bool,
    ) -> Result<Var> {
        for (ln, block) in &self.blocks[from..to] {
            let normed = ln.forward(tape, bp, x)?;
            let residual = mamba_block_forward(tape, bp, normed, block, self.mode)?;
            x = tape.add(x, residual)?;
        }
        if final_ln {
            x = self.final_ln.forward(tape, bp, x)?;
        }
        Ok(x)
    }
}
