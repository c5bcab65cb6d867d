//! Analytic operation accounting and the reduction-factor metric.
//!
//! Every charge is in operations, two per multiply-accumulate, matching the
//! instrumented counter in [`crate::numkernel::counter`]. Only matrix
//! products are counted; norms, residual adds, activations, the convolution
//! and the SSM recurrence are not. Embedding lookups and the LM head run for
//! every token under every policy and are left out of both sides of the
//! reduction factor.

use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::numkernel::counter::OpCounts;

/// Transformer block cost for a full sequence of `t` tokens:
/// `24·t·d² + 4·t²·d`.
pub fn cost_block_transformer(t: u64, d: u64) -> u64 {
    24 * t * d * d + 4 * t * t * d
}

/// One decoded token through one attention block that attends over
/// `t_context` positions (the current token included).
pub fn cost_decode_step_transformer(t_context: u64, d: u64) -> u64 {
    24 * d * d + 4 * t_context * d
}

/// Exact prefill cost of one attention block over `t` tokens under causal
/// masking: the sum of decode steps with contexts `1..=t`.
pub fn cost_prefill_transformer(t: u64, d: u64) -> u64 {
    24 * t * d * d + 2 * t * (t + 1) * d
}

/// Mamba block cost per token: `6·d² + 2·G·N·d` multiply-accumulates with
/// an inner width of `2·d`.
pub fn cost_block_mamba(d: u64, n_groups: u64, d_state: u64) -> u64 {
    6 * d * d + 2 * n_groups * d_state * d
}

/// Share of an attention block's projection work needed to refresh its cache.
pub const TRANSFORMER_RECOMPUTE_FRACTION: f64 = 1.0 / 6.0;

/// Share of a Mamba block needed to refresh its state when the grouped state
/// width `G·N` is a quarter of `d_model`.
pub const MAMBA_RECOMPUTE_FRACTION: f64 = 9.0 / 26.0;

/// Key and value projections only: a sixth of `24·d²`.
pub fn cost_partial_transformer(d: u64) -> u64 {
    4 * d * d
}

/// Input and B projections only, in operations.
pub fn cost_partial_mamba(d: u64, n_groups: u64, d_state: u64) -> u64 {
    2 * (2 * d * d + n_groups * d_state * d)
}

/// Per-block costs of a concrete backbone, in operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostModel {
    Transformer { d: u64 },
    Mamba { d: u64, groups: u64, state: u64 },
}

impl CostModel {
    pub fn of(backbone: &Backbone) -> Self {
        match backbone {
            Backbone::Transformer(m) => Self::Transformer {
                d: m.config.d_model as u64,
            },
            Backbone::Mamba(m) => Self::Mamba {
                d: m.config.d_model as u64,
                groups: m.config.n_groups as u64,
                state: m.config.d_state as u64,
            },
        }
    }

    /// One token through one block, attending over `t_context` positions.
    pub fn block_step(&self, t_context: u64) -> u64 {
        match *self {
            Self::Transformer { d } => cost_decode_step_transformer(t_context, d),
            Self::Mamba { d, groups, state } => 2 * cost_block_mamba(d, groups, state),
        }
    }

    /// Cache or state refresh of one skipped block.
    pub fn partial_step(&self) -> u64 {
        match *self {
            Self::Transformer { d } => cost_partial_transformer(d),
            Self::Mamba { d, groups, state } => cost_partial_mamba(d, groups, state),
        }
    }

    /// Exact cost of running one block over a prompt of `t` tokens.
    pub fn block_prefill(&self, t: u64) -> u64 {
        match *self {
            Self::Transformer { d } => cost_prefill_transformer(t, d),
            Self::Mamba { .. } => t * self.block_step(0),
        }
    }

    /// The closed-form sequence estimate for one block over `t` tokens.
    pub fn block_prefill_estimate(&self, t: u64) -> u64 {
        match *self {
            Self::Transformer { d } => cost_block_transformer(t, d),
            Self::Mamba { .. } => self.block_prefill(t),
        }
    }
}

/// Cumulative charges of one or more generation streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComputeLedger {
    pub ops_prefill: u64,
    /// Closed-form estimate of the prefill work, reported alongside.
    pub ops_prefill_estimate: u64,
    pub ops_backbone: u64,
    pub ops_classifiers: u64,
    pub ops_recompute: u64,
    /// Full-model cost of the same generated tokens.
    pub ops_reference: u64,
    pub tokens: u64,
    /// Sum over generated tokens of the number of blocks computed.
    pub depth_sum: u64,
}

impl ComputeLedger {
    pub fn charge_prefill(&mut self, ops: u64, estimate: u64) {
        self.ops_prefill += ops;
        self.ops_prefill_estimate += estimate;
    }

    pub fn charge_backbone(&mut self, ops: u64) {
        self.ops_backbone += ops;
    }

    pub fn charge_classifier(&mut self, ops: u64) {
        self.ops_classifiers += ops;
    }

    pub fn charge_recompute(&mut self, ops: u64) {
        self.ops_recompute += ops;
    }

    /// Closes a generated token: its full-model reference cost and the
    /// number of blocks actually computed.
    pub fn finish_token(&mut self, reference: u64, depth: u64) {
        self.ops_reference += reference;
        self.tokens += 1;
        self.depth_sum += depth;
    }

    pub fn spent(&self) -> u64 {
        self.ops_backbone + self.ops_classifiers + self.ops_recompute
    }

    pub fn mean_exit_depth(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.depth_sum as f64 / self.tokens as f64
        }
    }

    /// Full-model operations over operations spent on generated tokens; with
    /// `include_prefill` the prompt work is added to both sides.
    pub fn reduction_factor(&self, include_prefill: bool) -> Result<f64> {
        if self.tokens == 0 {
            return Err(Error::Accounting("no generated tokens recorded".into()));
        }
        let extra = if include_prefill { self.ops_prefill } else { 0 };
        let denom = self.spent() + extra;
        if denom == 0 {
            return Err(Error::Accounting("no operations recorded".into()));
        }
        Ok((self.ops_reference + extra) as f64 / denom as f64)
    }

    pub fn merge(&mut self, other: &ComputeLedger) {
        self.ops_prefill += other.ops_prefill;
        self.ops_prefill_estimate += other.ops_prefill_estimate;
        self.ops_backbone += other.ops_backbone;
        self.ops_classifiers += other.ops_classifiers;
        self.ops_recompute += other.ops_recompute;
        self.ops_reference += other.ops_reference;
        self.tokens += other.tokens;
        self.depth_sum += other.depth_sum;
    }

    /// Whether the charged categories equal an instrumented count.
    pub fn matches(&self, counted: &OpCounts) -> bool {
        self.ops_prefill == counted.prefill
            && self.ops_backbone == counted.backbone
            && self.ops_classifiers == counted.classifier
            && self.ops_recompute == counted.recompute
    }
}
