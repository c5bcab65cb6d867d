//! Exit classifiers, their placement and the confidence-threshold policy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mamba::{BlockDims, MambaBlockParams, SSMState};
use crate::model::BackboneKind;
use crate::numkernel::counter::{self, Scope};
use crate::numkernel::ops::{gemm, silu_scalar, softmax_in_place};
use crate::numkernel::{Graph, SeqLayout, Tensor, Var};
use crate::params::{count, ParamSet, VarCursor};

/// Recurrent state width of the Mamba classifier cell.
pub const CELL_STATE: usize = 8;
/// Conv width of the Mamba classifier cell.
pub const CELL_CONV: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExitVariant {
    Calm,
    Ffn,
    MambaCell,
}

impl ExitVariant {
    pub const ALL: [ExitVariant; 3] = [Self::Calm, Self::Ffn, Self::MambaCell];
}

impl fmt::Display for ExitVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Calm => "calm",
            Self::Ffn => "ffn",
            Self::MambaCell => "mamba_cell",
        })
    }
}

impl FromStr for ExitVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calm" => Ok(Self::Calm),
            "ffn" => Ok(Self::Ffn),
            "mamba_cell" => Ok(Self::MambaCell),
            other => Err(Error::Config(format!("unknown exit variant `{other}`"))),
        }
    }
}

/// What happens to the caches or states of blocks a token skipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MissingState {
    /// Run the state-affecting part of each skipped block.
    PartialForward,
    /// Copy the deepest computed key/value into skipped blocks (attention).
    CopyKv,
    /// Leave skipped recurrent states untouched (Mamba).
    SkipState,
}

impl MissingState {
    pub fn check_backbone(self, kind: BackboneKind) -> Result<()> {
        match (self, kind) {
            (Self::CopyKv, BackboneKind::Mamba) | (Self::SkipState, BackboneKind::Transformer) => {
                Err(Error::Config(format!("policy `{self}` does not apply to a {kind} backbone")))
            }
            _ => Ok(()),
        }
    }

    pub fn for_backbone(kind: BackboneKind) -> [MissingState; 2] {
        match kind {
            BackboneKind::Transformer => [Self::PartialForward, Self::CopyKv],
            BackboneKind::Mamba => [Self::PartialForward, Self::SkipState],
        }
    }
}

impl fmt::Display for MissingState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PartialForward => "recompute",
            Self::CopyKv => "copy",
            Self::SkipState => "skip",
        })
    }
}

impl FromStr for MissingState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recompute" => Ok(Self::PartialForward),
            "copy" => Ok(Self::CopyKv),
            "skip" => Ok(Self::SkipState),
            other => Err(Error::Config(format!("unknown missing-state policy `{other}`"))),
        }
    }
}

/// Shared threshold and missing-state handling for one run.
///
/// Thresholds above 1 are allowed and mean no exit can ever fire.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitPolicy {
    pub theta: f64,
    pub missing: MissingState,
}

impl ExitPolicy {
    pub fn new(theta: f64, missing: MissingState) -> Result<Self> {
        if !(theta >= 0.0) || !theta.is_finite() {
            return Err(Error::Config(format!("threshold must be finite and nonnegative, got {theta}")));
        }
        Ok(Self { theta, missing })
    }

    pub fn should_exit(&self, confidence: f64) -> bool {
        should_exit(self.theta, confidence)
    }
}

pub fn should_exit(theta: f64, confidence: f64) -> bool {
    confidence >= theta
}

/// Blocks after which an exit is evaluated (0-based, strictly increasing,
/// all in the second half and never the final block).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExitPlacement {
    blocks: Vec<usize>,
}

impl ExitPlacement {
    pub fn new(blocks: Vec<usize>, n_blocks: usize) -> Result<Self> {
        let (lo, hi) = Self::range(n_blocks)?;
        if blocks.is_empty() {
            return Err(Error::Config("at least one exit placement is required".into()));
        }
        if blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("exit placements {blocks:?} must be strictly increasing")));
        }
        if let Some(b) = blocks.iter().find(|&&b| b < lo || b > hi) {
            return Err(Error::Config(format!(
                "exit placement {b} outside allowed blocks {lo}..={hi} of {n_blocks}"
            )));
        }
        Ok(Self { blocks })
    }

    /// Up to four exits spread evenly over the allowed range.
    pub fn default_for(n_blocks: usize) -> Result<Self> {
        let (lo, hi) = Self::range(n_blocks)?;
        let size = hi - lo + 1;
        let count = size.min(4);
        let blocks = if count == 1 {
            vec![lo]
        } else {
            (0..count)
                .map(|i| lo + ((i * (size - 1)) as f64 / (count - 1) as f64).round() as usize)
                .collect()
        };
        Self::new(blocks, n_blocks)
    }

    fn range(n_blocks: usize) -> Result<(usize, usize)> {
        let lo = n_blocks.div_ceil(2);
        if n_blocks < 2 || lo + 2 > n_blocks {
            return Err(Error::Config(format!("a {n_blocks}-block backbone has no room for exits")));
        }
        Ok((lo, n_blocks - 2))
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExitClassifier {
    /// One affine map d → 2.
    Calm { w: Tensor, b: Tensor },
    /// d → 4d → SiLU → 2.
    Ffn {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    /// A Mamba block projecting to 2 outputs, without residual.
    MambaCell(MambaBlockParams),
}

pub fn cell_dims(d_model: usize) -> BlockDims {
    BlockDims {
        d_model,
        d_inner: 2 * d_model,
        d_state: CELL_STATE,
        d_conv: CELL_CONV,
        n_groups: 1,
        d_out: 2,
    }
}

/// Number of scalars in one classifier of `variant` for width `d`.
pub fn classifier_param_count(variant: ExitVariant, d: usize) -> u128 {
    match variant {
        ExitVariant::Calm => count(&[&[2, d], &[2]]),
        ExitVariant::Ffn => count(&[&[4, d, d], &[4, d], &[8, d], &[2]]),
        ExitVariant::MambaCell => cell_dims(d).param_count(),
    }
}

impl ExitClassifier {
    pub fn init<R: Rng + ?Sized>(variant: ExitVariant, d_model: usize, rng: &mut R) -> Self {
        let d = d_model;
        let std_in = 1.0 / (d as f64).sqrt();
        match variant {
            ExitVariant::Calm => Self::Calm {
                w: Tensor::randn(&[d, 2], std_in, rng),
                b: Tensor::zeros(&[2]),
            },
            ExitVariant::Ffn => Self::Ffn {
                w1: Tensor::randn(&[d, 4 * d], std_in, rng),
                b1: Tensor::zeros(&[4 * d]),
                w2: Tensor::randn(&[4 * d, 2], 1.0 / (4.0 * d as f64).sqrt(), rng),
                b2: Tensor::zeros(&[2]),
            },
            ExitVariant::MambaCell => Self::MambaCell(MambaBlockParams::init(
                cell_dims(d),
                std_in,
                1.0 / (2.0 * d as f64).sqrt(),
                rng,
            )),
        }
    }

    pub fn variant(&self) -> ExitVariant {
        match self {
            Self::Calm { .. } => ExitVariant::Calm,
            Self::Ffn { .. } => ExitVariant::Ffn,
            Self::MambaCell(_) => ExitVariant::MambaCell,
        }
    }

    pub fn new_state(&self) -> Option<SSMState> {
        match self {
            Self::MambaCell(p) => Some(SSMState::new(p.dims())),
            _ => None,
        }
    }

    /// Two exit/continue logits for a normalized hidden state. Advances the
    /// cell state of the Mamba variant.
    pub fn logits(&self, h: &[f64], state: Option<&mut SSMState>) -> [f64; 2] {
        let out = match self {
            Self::Calm { w, b } => affine(h, w, b),
            Self::Ffn { w1, b1, w2, b2 } => {
                let mut f = affine(h, w1, b1);
                f.iter_mut().for_each(|v| *v = silu_scalar(*v));
                affine(&f, w2, b2)
            }
            Self::MambaCell(p) => {
                let st = state.expect("mamba cell evaluated without its state");
                p.step(h, st, false)
            }
        };
        [out[0], out[1]]
    }

    /// Softmax probability of the exit class.
    pub fn confidence(&self, h: &[f64], state: Option<&mut SSMState>) -> f64 {
        let mut p = self.logits(h, state).to_vec();
        softmax_in_place(&mut p);
        p[1]
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::Calm { w, b } => vec![("w", w), ("b", b)],
            Self::Ffn { w1, b1, w2, b2 } => vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)],
            Self::MambaCell(p) => p.tensors().to_vec(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Calm { w, b } => vec![w, b],
            Self::Ffn { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            Self::MambaCell(p) => p.tensors_mut().into_iter().collect(),
        }
    }

    /// Graph forward over normalized features `x` (rows × d) to rows × 2
    /// logits; the Mamba cell runs its scan per sequence of `layout`.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        cur: &mut VarCursor<'_>,
        x: Var,
        layout: SeqLayout,
    ) -> Result<Var> {
        match self {
            Self::Calm { .. } => {
                let (w, b) = (cur.next(), cur.next());
                let y = g.matmul(x, w)?;
                g.add_bias(y, b)
            }
            Self::Ffn { .. } => {
                let (w1, b1, w2, b2) = (cur.next(), cur.next(), cur.next(), cur.next());
                let f = g.matmul(x, w1)?;
                let f = g.add_bias(f, b1)?;
                let f = g.silu(f);
                let y = g.matmul(f, w2)?;
                g.add_bias(y, b2)
            }
            Self::MambaCell(p) => MambaBlockParams::forward_graph(g, cur, x, layout, p.dims().n_groups, false),
        }
    }
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    gemm(x, w.data(), 1, x.len(), w.cols(), &mut out);
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    out
}

/// Operations charged per evaluation of one classifier, in the same units as
/// the instrumented counter (two per multiply-accumulate). The single affine
/// map is treated as free.
pub fn classifier_cost(variant: ExitVariant, d_model: usize) -> u64 {
    let d = d_model as u64;
    match variant {
        ExitVariant::Calm => 0,
        ExitVariant::Ffn => 2 * (4 * d * d + 8 * d),
        ExitVariant::MambaCell => {
            let c = cell_dims(d_model);
            2 * mamba_cell_macs(d, (c.n_groups * c.d_state) as u64)
        }
    }
}

/// Multiply-accumulates of a Mamba block whose output projection has width 2.
pub fn mamba_cell_macs(d: u64, gn: u64) -> u64 {
    4 * d * d + 2 * gn * d + 2 * 2 * d
}

/// Per-stream classifier states, one slot per placement.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitStates(Vec<Option<SSMState>>);

impl ExitStates {
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in self.0.iter().flatten() {
            s.fingerprint().hash(&mut h);
        }
        h.finish()
    }
}

/// The classifiers attached to a backbone, one per placement.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitBank {
    pub variant: ExitVariant,
    pub placement: ExitPlacement,
    pub classifiers: Vec<ExitClassifier>,
    pub d_model: usize,
}

impl ExitBank {
    pub fn init<R: Rng + ?Sized>(
        variant: ExitVariant,
        placement: ExitPlacement,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let classifiers = (0..placement.len())
            .map(|_| ExitClassifier::init(variant, d_model, rng))
            .collect();
        Self {
            variant,
            placement,
            classifiers,
            d_model,
        }
    }

    pub fn fresh_states(&self) -> ExitStates {
        ExitStates(self.classifiers.iter().map(|c| c.new_state()).collect())
    }

    /// Index of the exit attached after `block`, if any.
    pub fn exit_at(&self, block: usize) -> Option<usize> {
        self.placement.blocks().iter().position(|&b| b == block)
    }

    pub fn cost(&self) -> u64 {
        classifier_cost(self.variant, self.d_model)
    }

    fn scope(&self) -> Scope {
        if self.cost() == 0 {
            Scope::Uncharged
        } else {
            Scope::Classifier
        }
    }

    /// Confidence of exit `idx` on a normalized hidden state, counted under
    /// the classifier scope unless the variant is free.
    pub fn confidence(&self, idx: usize, h: &[f64], states: &mut ExitStates) -> f64 {
        let _g = counter::enter(self.scope());
        self.classifiers[idx].confidence(h, states.0[idx].as_mut())
    }

    /// Feeds a token through a stateful exit without a decision; used to warm
    /// the cell states on the prompt. No-op for stateless variants.
    pub fn observe(&self, idx: usize, h: &[f64], states: &mut ExitStates) {
        if let Some(st) = states.0[idx].as_mut() {
            self.classifiers[idx].logits(h, Some(st));
        }
    }

    pub fn is_stateful(&self) -> bool {
        self.variant == ExitVariant::MambaCell
    }
}

impl ParamSet for ExitBank {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.classifiers.iter().enumerate() {
            for (name, t) in c.tensors() {
                v.push((format!("exits.{i}.{name}"), t));
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.classifiers.iter_mut().flat_map(|c| c.tensors_mut()).collect()
    }
}
