//! Early-exit autoregressive generation, teacher-forced scoring and the
//! layer-pruning baseline.
//!
//! A token forwarded with exits runs blocks in order and evaluates the
//! classifier attached after each placement on the normalized hidden state.
//! Once a confidence reaches the threshold the remaining non-final blocks are
//! handled by the missing-state policy, and the final block, final norm and
//! LM head run as usual. Prompts are always prefilled by the full model.

use crate::error::{Error, Result};
use crate::exits::{ExitBank, ExitPolicy, ExitStates, MissingState};
use crate::ledger::{ComputeLedger, CostModel};
use crate::model::{Backbone, BackboneKind, InferenceState};
use crate::numkernel::counter::{self, Scope};
use crate::numkernel::ops::{argmax, log_sum_exp};

/// Consecutive repeats that mark a generation degenerate.
pub const DEGENERATE_RUN: usize = 10;
/// Largest degenerate share of a configuration's generations that keeps it
/// valid.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.05;
pub const DEFAULT_PENALTY: f64 = 1.2;

/// Statically disables `p` blocks immediately before the final one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PruneSpec {
    pub p: usize,
}

impl PruneSpec {
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if n_blocks < 2 || self.p > n_blocks - 2 {
            return Err(Error::Config(format!(
                "cannot prune {} of {n_blocks} blocks; at most {} allowed",
                self.p,
                n_blocks.saturating_sub(2)
            )));
        }
        Ok(())
    }

    /// Disabled block indices `N−1−p .. N−1`.
    pub fn disabled(&self, n_blocks: usize) -> std::ops::Range<usize> {
        n_blocks - 1 - self.p..n_blocks - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Full,
    EarlyExit(ExitPolicy),
    Pruned(PruneSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub prompt: Vec<usize>,
    pub max_new_tokens: usize,
    pub mode: Mode,
    /// Repetition penalty factor; 1 disables it.
    pub penalty: f64,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Config("prompt must hold at least one token".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.penalty >= 1.0) || !self.penalty.is_finite() {
            return Err(Error::Config(format!("penalty factor must be ≥ 1, got {}", self.penalty)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// Generated ids, prompt excluded.
    pub tokens: Vec<usize>,
    /// Blocks computed for every token forwarded after the prompt.
    pub exit_depths: Vec<usize>,
    pub ledger: ComputeLedger,
    pub degenerate: bool,
}

/// Penalty used when a caller does not choose one: only the recurrent
/// skip policy is penalized.
pub fn default_penalty(kind: BackboneKind, mode: &Mode) -> f64 {
    match (kind, mode) {
        (BackboneKind::Mamba, Mode::EarlyExit(p)) if p.missing == MissingState::SkipState => DEFAULT_PENALTY,
        _ => 1.0,
    }
}

/// Divides positive and multiplies non-positive logits of every id in
/// `history` by `factor`.
pub fn repetition_penalty(logits: &mut [f64], history: &[usize], factor: f64) {
    if factor == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in history {
        if t < seen.len() {
            seen[t] = true;
        }
    }
    for (l, s) in logits.iter_mut().zip(seen) {
        if s {
            *l = if *l > 0.0 { *l / factor } else { *l * factor };
        }
    }
}

/// True when some id repeats at least `run` times in a row.
pub fn degenerate_check(tokens: &[usize], run: usize) -> bool {
    if run == 0 {
        return true;
    }
    let mut len = 0;
    for (i, t) in tokens.iter().enumerate() {
        len = if i > 0 && tokens[i - 1] == *t { len + 1 } else { 1 };
        if len >= run {
            return true;
        }
    }
    false
}

/// One sequence being decoded: caches, classifier states and its ledger.
pub struct Stream<'a> {
    backbone: &'a Backbone,
    exits: Option<&'a ExitBank>,
    mode: Mode,
    costs: CostModel,
    state: InferenceState,
    exit_states: Option<ExitStates>,
    position: usize,
    pub ledger: ComputeLedger,
}

impl<'a> Stream<'a> {
    pub fn new(backbone: &'a Backbone, exits: Option<&'a ExitBank>, mode: Mode) -> Result<Self> {
        let n = backbone.n_blocks();
        match &mode {
            Mode::Full => {}
            Mode::Pruned(spec) => spec.validate(n)?,
            Mode::EarlyExit(policy) => {
                policy.missing.check_backbone(backbone.kind())?;
                let bank = exits.ok_or_else(|| Error::Config("early exit requires an exit bank".into()))?;
                if bank.d_model != backbone.d_model() {
                    return Err(Error::Config("exit bank width differs from the backbone".into()));
                }
                if let Some(&b) = bank.placement.blocks().iter().find(|&&b| b + 1 >= n) {
                    return Err(Error::Config(format!("exit after block {b} leaves no final block")));
                }
            }
        }
        let exit_states = match mode {
            Mode::EarlyExit(_) => exits.map(|e| e.fresh_states()),
            _ => None,
        };
        Ok(Self {
            backbone,
            exits,
            mode,
            costs: CostModel::of(backbone),
            state: backbone.new_state(),
            exit_states,
            position: 0,
            ledger: ComputeLedger::default(),
        })
    }

    fn disabled(&self) -> std::ops::Range<usize> {
        match self.mode {
            Mode::Pruned(spec) => spec.disabled(self.backbone.n_blocks()),
            _ => 0..0,
        }
    }

    pub fn state(&self) -> &InferenceState {
        &self.state
    }

    pub fn exit_states(&self) -> Option<&ExitStates> {
        self.exit_states.as_ref()
    }

    /// Full-model forward of the prompt; returns the logits of its last token.
    pub fn prefill(&mut self, prompt: &[usize]) -> Result<Vec<f64>> {
        if self.position != 0 {
            return Err(Error::Policy("prefill requires a fresh stream".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Config("prompt must hold at least one token".into()));
        }
        let disabled = self.disabled();
        let t = prompt.len() as u64;
        let outs = {
            let _g = counter::enter(Scope::Prefill);
            self.backbone.prefill(prompt, disabled.clone(), &mut self.state)?
        };
        let enabled = (self.backbone.n_blocks() - disabled.len()) as u64;
        self.ledger.charge_prefill(
            enabled * self.costs.block_prefill(t),
            enabled * self.costs.block_prefill_estimate(t),
        );
        if let (Some(bank), Some(states)) = (self.exits, self.exit_states.as_mut()) {
            if bank.is_stateful() {
                let _g = counter::enter(Scope::Prefill);
                for (i, &b) in bank.placement.blocks().iter().enumerate() {
                    for row in 0..prompt.len() {
                        let hn = self.backbone.normed(outs[b].row(row));
                        bank.observe(i, &hn, states);
                    }
                }
                let cost = bank.cost() * t * bank.placement.len() as u64;
                self.ledger.charge_prefill(cost, cost);
            }
        }
        self.position = prompt.len();
        let last = outs.last().expect("at least one block");
        let _g = counter::enter(Scope::Uncharged);
        Ok(self.backbone.logits(last.row(prompt.len() - 1)))
    }

    fn run_block(&mut self, b: usize, h: &[f64], t_ctx: u64) -> Result<Vec<f64>> {
        let _g = counter::enter(Scope::Backbone);
        let out = self.backbone.block_step(b, h, &mut self.state)?;
        self.ledger.charge_backbone(self.costs.block_step(t_ctx));
        Ok(out)
    }

    /// Forwards one token and returns next-token logits and the number of
    /// blocks computed.
    pub fn step(&mut self, token: usize) -> Result<(Vec<f64>, usize)> {
        if self.position == 0 {
            return Err(Error::Policy("step before prefill".into()));
        }
        let n = self.backbone.n_blocks();
        let t_ctx = self.position as u64 + 1;
        let mut h = self.backbone.embed(token, self.position)?;
        let depth = match self.mode {
            Mode::Full => {
                for b in 0..n {
                    h = self.run_block(b, &h, t_ctx)?;
                }
                n
            }
            Mode::Pruned(spec) => {
                let disabled = spec.disabled(n);
                for b in (0..n).filter(|b| !disabled.contains(b)) {
                    h = self.run_block(b, &h, t_ctx)?;
                }
                n - spec.p
            }
            Mode::EarlyExit(policy) => {
                let bank = self.exits.expect("checked at construction");
                let mut exited = None;
                for b in 0..n - 1 {
                    h = self.run_block(b, &h, t_ctx)?;
                    if let Some(i) = bank.exit_at(b) {
                        let hn = self.backbone.normed(&h);
                        let states = self.exit_states.as_mut().expect("bank states");
                        let conf = bank.confidence(i, &hn, states);
                        self.ledger.charge_classifier(bank.cost());
                        if policy.should_exit(conf) {
                            exited = Some(b);
                            break;
                        }
                    }
                }
                match exited {
                    Some(b) => {
                        self.fill_skipped(policy.missing, b, &h)?;
                        h = self.run_block(n - 1, &h, t_ctx)?;
                        b + 2
                    }
                    None => {
                        h = self.run_block(n - 1, &h, t_ctx)?;
                        n
                    }
                }
            }
        };
        self.ledger
            .finish_token(n as u64 * self.costs.block_step(t_ctx), depth as u64);
        self.position += 1;
        let _g = counter::enter(Scope::Uncharged);
        Ok((self.backbone.logits(&h), depth))
    }

    /// Brings the blocks after `exit_block` (final block excluded) up to date
    /// for the current token.
    fn fill_skipped(&mut self, missing: MissingState, exit_block: usize, h: &[f64]) -> Result<()> {
        let skipped = exit_block + 1..self.backbone.n_blocks() - 1;
        apply_missing_state_policy(
            self.backbone,
            missing,
            exit_block,
            skipped,
            h,
            &mut self.state,
            &mut self.ledger,
            &self.costs,
        )
    }
}

/// Updates the caches or states of `skipped` blocks after an exit from
/// `exit_block` with hidden state `h`, charging the ledger.
#[allow(clippy::too_many_arguments)]
pub fn apply_missing_state_policy(
    backbone: &Backbone,
    missing: MissingState,
    exit_block: usize,
    skipped: std::ops::Range<usize>,
    h: &[f64],
    state: &mut InferenceState,
    ledger: &mut ComputeLedger,
    costs: &CostModel,
) -> Result<()> {
    missing.check_backbone(backbone.kind())?;
    match missing {
        MissingState::PartialForward => {
            let _g = counter::enter(Scope::Recompute);
            for b in skipped {
                backbone.partial_step(b, h, state)?;
                ledger.charge_recompute(costs.partial_step());
            }
            Ok(())
        }
        MissingState::CopyKv => backbone.copy_state(exit_block, skipped, state),
        MissingState::SkipState => Ok(()),
    }
}

fn pick(logits: &mut [f64], history: &[usize], penalty: f64) -> usize {
    repetition_penalty(logits, history, penalty);
    argmax(logits)
}

/// Greedy generation: the prompt is prefilled by the full model, which also
/// chooses the first new token; every later token is forwarded under the
/// request's mode.
pub fn generate(
    backbone: &Backbone,
    exits: Option<&ExitBank>,
    request: &GenerationRequest,
) -> Result<GenerationResult> {
    request.validate()?;
    let mut stream = Stream::new(backbone, exits, request.mode)?;
    let mut logits = stream.prefill(&request.prompt)?;
    let mut tokens = Vec::with_capacity(request.max_new_tokens);
    let mut depths = Vec::with_capacity(request.max_new_tokens);
    loop {
        let next = pick(&mut logits, &tokens, request.penalty);
        tokens.push(next);
        if tokens.len() == request.max_new_tokens {
            break;
        }
        let (l, depth) = stream.step(next)?;
        logits = l;
        depths.push(depth);
    }
    let degenerate = degenerate_check(&tokens, DEGENERATE_RUN);
    Ok(GenerationResult {
        tokens,
        exit_depths: depths,
        ledger: stream.ledger,
        degenerate,
    })
}

/// Layer-pruned generation.
pub fn generate_pruned(
    backbone: &Backbone,
    spec: PruneSpec,
    prompt: Vec<usize>,
    max_new_tokens: usize,
) -> Result<GenerationResult> {
    generate(
        backbone,
        None,
        &GenerationRequest {
            prompt,
            max_new_tokens,
            mode: Mode::Pruned(spec),
            penalty: 1.0,
        },
    )
}

/// Teacher-forced next-token quality of one window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreResult {
    pub predictions: u64,
    pub correct: u64,
    pub nll_sum: f64,
    pub ledger: ComputeLedger,
}

impl ScoreResult {
    pub fn merge(&mut self, other: &ScoreResult) {
        self.predictions += other.predictions;
        self.correct += other.correct;
        self.nll_sum += other.nll_sum;
        self.ledger.merge(&other.ledger);
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.predictions.max(1) as f64
    }

    pub fn perplexity(&self) -> f64 {
        (self.nll_sum / self.predictions.max(1) as f64).exp()
    }
}

/// Prefills `tokens[..prefill_len]` and forwards the rest one by one under
/// `mode`, scoring each forwarded token's prediction of its successor.
pub fn score(
    backbone: &Backbone,
    exits: Option<&ExitBank>,
    mode: Mode,
    tokens: &[usize],
    prefill_len: usize,
) -> Result<ScoreResult> {
    if prefill_len == 0 || prefill_len >= tokens.len() {
        return Err(Error::Config(format!(
            "prefill length {prefill_len} must leave tokens to score in a window of {}",
            tokens.len()
        )));
    }
    let mut stream = Stream::new(backbone, exits, mode)?;
    stream.prefill(&tokens[..prefill_len])?;
    let mut out = ScoreResult::default();
    for i in prefill_len..tokens.len() - 1 {
        let (logits, _) = stream.step(tokens[i])?;
        let target = tokens[i + 1];
        out.predictions += 1;
        if argmax(&logits) == target {
            out.correct += 1;
        }
        out.nll_sum += log_sum_exp(&logits) - logits[target];
    }
    out.ledger = stream.ledger;
    Ok(out)
}
