//! Multi-scale masked attention: multi-head scaled-dot attention where each
//! head sees the sequence through a global, window, or dilated-window mask,
//! combined with a learned temporal attention vector that reweights positions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("invalid mask parameters: {0}")]
    InvalidMask(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Which positions a head may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskKind {
    /// Every position attends to every position.
    Global,
    /// |i-j| <= w (w is a one-sided half-width).
    Window { w: usize },
    /// |i-j| <= w·(d+1) and |i-j| is a multiple of (d+1).
    Dilated { w: usize, d: usize },
}

/// Boolean attention mask over an n-position sequence; true means attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn build(kind: MaskKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(AttentionError::InvalidMask("sequence length must be >= 1".into()));
        }
        match kind {
            MaskKind::Window { w } if w == 0 => {
                return Err(AttentionError::InvalidMask("window size must be >= 1".into()));
            }
            MaskKind::Dilated { w, d } if w == 0 || d == 0 => {
                return Err(AttentionError::InvalidMask(
                    "dilated window needs w >= 1 and d >= 1".into(),
                ));
            }
            _ => {}
        }
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let dist = i.abs_diff(j);
                allow[i * n + j] = match kind {
                    MaskKind::Global => true,
                    MaskKind::Window { w } => dist <= w,
                    MaskKind::Dilated { w, d } => {
                        dist <= w * (d + 1) && dist % (d + 1) == 0
                    }
                };
            }
        }
        Ok(AttentionMask { kind, n, allow })
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    /// Additive logit bias: 0 where attending is allowed, a large negative
    /// number where it is not. -1e30 rather than -inf so masked logits stay
    /// finite while still softmaxing to exactly zero in f64.
    pub fn logit_bias(&self) -> Vec<f64> {
        self.allow.iter().map(|&a| if a { 0.0 } else { -1e30 }).collect()
    }
}

/// One attention head: Q/K/V projections plus its mask.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub mask: AttentionMask,
}

impl AttentionHead {
    pub fn init(rng: &mut Rng, hidden: usize, model_dim: usize, mask: AttentionMask) -> Self {
        AttentionHead {
            w_q: crate::layers::init_weight(rng, hidden, vec![hidden, model_dim]),
            w_k: crate::layers::init_weight(rng, hidden, vec![hidden, model_dim]),
            w_v: crate::layers::init_weight(rng, hidden, vec![hidden, model_dim]),
            mask,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.shape()[1]
    }
}

/// All heads plus the output projection concatenating them back to hidden.
#[derive(Debug, Clone)]
pub struct HeadConfig {
    pub heads: Vec<AttentionHead>,
    pub w_o: Tensor,
}

impl HeadConfig {
    pub fn init(rng: &mut Rng, hidden: usize, masks: &[AttentionMask]) -> Result<Self> {
        if masks.is_empty() {
            return Err(AttentionError::InvalidMask("at least one head required".into()));
        }
        if hidden % masks.len() != 0 {
            return Err(AttentionError::InvalidMask(format!(
                "hidden dim {hidden} not divisible by head count {}",
                masks.len()
            )));
        }
        let model_dim = hidden / masks.len();
        let heads = masks
            .iter()
            .map(|m| AttentionHead::init(rng, hidden, model_dim, m.clone()))
            .collect();
        Ok(HeadConfig {
            heads,
            w_o: crate::layers::init_weight(rng, hidden, vec![hidden, hidden]),
        })
    }
}

/// Temporal attention parameters of `softmax(tanh(x·w_t)·w_l)`.
#[derive(Debug, Clone)]
pub struct TemporalAttentionParams {
    pub w_t: Tensor,
    pub w_l: Tensor,
}

impl TemporalAttentionParams {
    pub fn init(rng: &mut Rng, hidden: usize, temporal_dim: usize) -> Self {
        TemporalAttentionParams {
            w_t: crate::layers::init_weight(rng, hidden, vec![hidden, temporal_dim]),
            w_l: crate::layers::init_weight(rng, temporal_dim, vec![temporal_dim, 1]),
        }
    }
}

/// Scaled-dot attention under the head's mask.
///
/// Returns `(output [n, m], attention map [n, n])`. Masked positions receive
/// exactly zero weight: their logits are pushed to -1e30 before the
/// (max-subtracted) softmax, which underflows to 0 in f64.
pub fn masked_attention(tape: &mut Tape, x: Var, head: &AttentionHead) -> Result<(Var, Var)> {
    let n = tape.shape(x)[0];
    if head.mask.n != n {
        return Err(AttentionError::InvalidMask(format!(
            "mask built for n={}, input has n={n}",
            head.mask.n
        )));
    }
    let m = head.model_dim();
    let wq = tape.leaf(&head.w_q);
    let wk = tape.leaf(&head.w_k);
    let wv = tape.leaf(&head.w_v);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.transpose(k)?;
    let qk = tape.matmul(q, kt)?;
    let scores = tape.scale(qk, 1.0 / (m as f64).sqrt());
    let bias = tape.constant(head.mask.logit_bias(), vec![n, n])?;
    let logits = tape.add(scores, bias)?;
    let map = tape.softmax(logits, 1)?;
    let out = tape.matmul(map, v)?;
    Ok((out, map))
}

/// Concatenate per-head outputs along the feature axis and project back to
/// the hidden dimension.
pub fn multi_head(tape: &mut Tape, x: Var, cfg: &HeadConfig) -> Result<Var> {
    let outs: Vec<Var> = cfg
        .heads
        .iter()
        .map(|h| masked_attention(tape, x, h).map(|(o, _)| o))
        .collect::<Result<_>>()?;
    let cat = tape.concat_cols(&outs)?;
    let wo = tape.leaf(&cfg.w_o);
    Ok(tape.matmul(cat, wo)?)
}

/// Probability vector over the sequence positions: softmax(tanh(x·w_t)·w_l).
pub fn temporal_attention(
    tape: &mut Tape,
    x: Var,
    params: &TemporalAttentionParams,
) -> Result<Var> {
    let l = tape.shape(x)[0];
    let wt = tape.leaf(&params.w_t);
    let wl = tape.leaf(&params.w_l);
    let xw = tape.matmul(x, wt)?;
    let th = tape.tanh(xw);
    let logits2d = tape.matmul(th, wl)?;
    let logits = tape.reshape(logits2d, vec![l])?;
    Ok(tape.softmax(logits, 0)?)
}

/// The full block: multi-head output modulated position-wise by the temporal
/// attention vector (rescaled to mean one, i.e. row i scaled by l·T_i), plus
/// a residual connection from the input.
pub fn tmsab_forward(
    tape: &mut Tape,
    x: Var,
    cfg: &HeadConfig,
    temporal: &TemporalAttentionParams,
) -> Result<Var> {
    let l = tape.shape(x)[0];
    let mh = multi_head(tape, x, cfg)?;
    let tvec = temporal_attention(tape, x, temporal)?;
    let scaled = tape.scale(tvec, l as f64);
    let modulated = tape.scale_rows(mh, scaled)?;
    Ok(tape.add(modulated, x)?)
}
