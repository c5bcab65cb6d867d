//! Backbone-agnostic view over the two language models.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mamba::{MambaModel, SSMState};
use crate::numkernel::ops::{gemm, rms_norm_row};
use crate::numkernel::{Graph, SeqLayout, Tensor, Var};
use crate::params::ParamSet;
use crate::transformer::{kv_copy_forward, kv_partial_forward, KVCache, TransformerModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Transformer,
    Mamba,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Transformer => "transformer",
            Self::Mamba => "mamba",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "mamba" => Ok(Self::Mamba),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    Transformer(TransformerModel),
    Mamba(MambaModel),
}

/// Per-sequence inference state: KV caches or recurrent states.
#[derive(Clone, Debug, PartialEq)]
pub enum InferenceState {
    Kv(KVCache),
    Ssm(Vec<SSMState>),
}

impl InferenceState {
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        match self {
            Self::Kv(c) => c.fingerprint(),
            Self::Ssm(states) => {
                let mut h = std::collections::hash_map::DefaultHasher::new();
                for s in states {
                    s.fingerprint().hash(&mut h);
                }
                h.finish()
            }
        }
    }
}

impl Backbone {
    pub fn kind(&self) -> BackboneKind {
        match self {
            Self::Transformer(_) => BackboneKind::Transformer,
            Self::Mamba(_) => BackboneKind::Mamba,
        }
    }

    pub fn n_blocks(&self) -> usize {
        match self {
            Self::Transformer(m) => m.config.n_blocks,
            Self::Mamba(m) => m.config.n_blocks,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            Self::Transformer(m) => m.config.d_model,
            Self::Mamba(m) => m.config.d_model,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Transformer(m) => m.config.vocab_size,
            Self::Mamba(m) => m.config.vocab_size,
        }
    }

    /// Longest sequence the model can hold, if bounded.
    pub fn max_context(&self) -> Option<usize> {
        match self {
            Self::Transformer(m) => Some(m.config.max_seq_len),
            Self::Mamba(_) => None,
        }
    }

    pub fn new_state(&self) -> InferenceState {
        match self {
            Self::Transformer(m) => InferenceState::Kv(KVCache::new(&m.config)),
            Self::Mamba(m) => InferenceState::Ssm(m.fresh_states()),
        }
    }

    pub fn final_norm_gain(&self) -> &Tensor {
        match self {
            Self::Transformer(m) => &m.final_norm,
            Self::Mamba(m) => &m.final_norm,
        }
    }

    pub fn head(&self) -> &Tensor {
        match self {
            Self::Transformer(m) => &m.head,
            Self::Mamba(m) => &m.head,
        }
    }

    pub fn embed(&self, token: usize, position: usize) -> Result<Vec<f64>> {
        match self {
            Self::Transformer(m) => m.embed_token(token, position),
            Self::Mamba(m) => m.embed_token(token),
        }
    }

    /// Full forward of block `b` for one token.
    pub fn block_step(&self, b: usize, h: &[f64], state: &mut InferenceState) -> Result<Vec<f64>> {
        match (self, state) {
            (Self::Transformer(m), InferenceState::Kv(cache)) => m.decode_block(b, h, cache),
            (Self::Mamba(m), InferenceState::Ssm(states)) => Ok(m.blocks[b].step(h, &mut states[b], true)),
            _ => Err(state_mismatch()),
        }
    }

    /// State-only forward of block `b`: K/V for attention, conv window and
    /// recurrent state for Mamba.
    pub fn partial_step(&self, b: usize, h: &[f64], state: &mut InferenceState) -> Result<()> {
        match (self, state) {
            (Self::Transformer(m), InferenceState::Kv(cache)) => {
                kv_partial_forward(&m.blocks[b], h, cache, b)
            }
            (Self::Mamba(m), InferenceState::Ssm(states)) => {
                m.blocks[b].partial_step(h, &mut states[b]);
                Ok(())
            }
            _ => Err(state_mismatch()),
        }
    }

    /// Copies the cache entry of block `source` into `targets`. Attention only.
    pub fn copy_state(
        &self,
        source: usize,
        targets: std::ops::Range<usize>,
        state: &mut InferenceState,
    ) -> Result<()> {
        match state {
            InferenceState::Kv(cache) => kv_copy_forward(cache, source, targets),
            InferenceState::Ssm(_) => Err(Error::Policy(
                "cache copying has no recurrent-state counterpart".into(),
            )),
        }
    }

    /// Final RMS norm of a hidden state.
    pub fn normed(&self, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; h.len()];
        rms_norm_row(h, self.final_norm_gain().data(), &mut out);
        out
    }

    /// Next-token logits from a hidden state.
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let n = self.normed(h);
        let head = self.head();
        let mut out = vec![0.0; head.cols()];
        gemm(&n, head.data(), 1, n.len(), head.cols(), &mut out);
        out
    }

    /// Runs `tokens` through the blocks from a fresh state, filling `state`.
    /// Blocks in `disabled` are bypassed and their caches never grow.
    /// Returns each block's output (T×d) in order.
    pub fn prefill(
        &self,
        tokens: &[usize],
        disabled: std::ops::Range<usize>,
        state: &mut InferenceState,
    ) -> Result<Vec<Tensor>> {
        let n = self.n_blocks();
        match (self, state) {
            (Self::Transformer(m), InferenceState::Kv(cache)) => {
                let mut h = m.embed_sequence(tokens)?;
                let mut outs = Vec::with_capacity(n);
                for b in 0..n {
                    if !disabled.contains(&b) {
                        h = m.prefill_block(b, &h, cache)?;
                    }
                    outs.push(h.clone());
                }
                Ok(outs)
            }
            (Self::Mamba(m), InferenceState::Ssm(states)) => {
                let d = m.config.d_model;
                let mut outs = vec![Tensor::zeros(&[tokens.len(), d]); n];
                for (t, &tok) in tokens.iter().enumerate() {
                    let mut h = m.embed_token(tok)?;
                    for b in 0..n {
                        if !disabled.contains(&b) {
                            h = m.blocks[b].step(&h, &mut states[b], true);
                        }
                        outs[b].row_mut(t).copy_from_slice(&h);
                    }
                }
                Ok(outs)
            }
            _ => Err(state_mismatch()),
        }
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        leaves: &[Var],
        ids: &[usize],
        layout: SeqLayout,
    ) -> Result<(Var, Vec<Var>)> {
        match self {
            Self::Transformer(m) => m.forward_graph(g, leaves, ids, layout),
            Self::Mamba(m) => m.forward_graph(g, leaves, ids, layout),
        }
    }
}

fn state_mismatch() -> Error {
    Error::Policy("inference state does not belong to this backbone".into())
}

impl ParamSet for Backbone {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Self::Transformer(m) => m.named_params(),
            Self::Mamba(m) => m.named_params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Transformer(m) => m.params_mut(),
            Self::Mamba(m) => m.params_mut(),
        }
    }
}
