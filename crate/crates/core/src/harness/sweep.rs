//! End-to-end pipeline pieces: corpus preparation, backbone and exit
//! training, and the threshold / pruning sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{self, GenerationRequest, Mode, PruneSpec, ScoreResult, MAX_DEGENERATE_FRACTION};
use crate::error::{Error, Result};
use crate::exits::{ExitBank, ExitPolicy};
use crate::harness::config::RunConfig;
use crate::harness::corpus::{load_corpus, split, synth_corpus};
use crate::harness::report::{sort_records, SweepRecord};
use crate::harness::tokenize::tokenize;
use crate::ledger::ComputeLedger;
use crate::mamba::MambaModel;
use crate::model::{Backbone, BackboneKind};
use crate::training::{distill_exits, train_backbone, DistillReport};
use crate::transformer::TransformerModel;

/// Token ids of the configured corpus, or of the synthetic one.
pub fn corpus_tokens(cfg: &RunConfig) -> Result<Vec<usize>> {
    let bytes = match &cfg.corpus {
        Some(p) => load_corpus(p)?,
        None => synth_corpus(cfg.synth_bytes, cfg.seed).into_bytes(),
    };
    tokenize(&bytes)
}

/// Freshly initialized backbone of the configured kind.
pub fn init_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(match cfg.backbone {
        BackboneKind::Transformer => Backbone::Transformer(TransformerModel::init(cfg.transformer_config()?, &mut rng)),
        BackboneKind::Mamba => Backbone::Mamba(MambaModel::init(cfg.mamba_config()?, &mut rng)),
    })
}

/// Initializes and trains a backbone on the training split.
pub fn build_backbone(cfg: &RunConfig, tokens: &[usize]) -> Result<(Backbone, Vec<f64>)> {
    let (train, _) = split(tokens, cfg.held_out)?;
    let mut b = init_backbone(cfg)?;
    let trace = train_backbone(&mut b, train, &cfg.backbone_train())?;
    Ok((b, trace))
}

/// Initializes and distills an exit bank of the configured variant.
pub fn build_exits(cfg: &RunConfig, backbone: &Backbone, tokens: &[usize]) -> Result<(ExitBank, DistillReport)> {
    let (train, _) = split(tokens, cfg.held_out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut bank = ExitBank::init(cfg.exit_variant, cfg.placement()?, backbone.d_model(), &mut rng);
    let report = distill_exits(backbone, &mut bank, train, &cfg.oracle())?;
    Ok((bank, report))
}

/// Held-out scoring windows and generation prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub windows: Vec<Vec<usize>>,
    pub prompts: Vec<Vec<usize>>,
    pub prefill: usize,
    pub gen_tokens: usize,
}

impl EvalSet {
    pub fn from_held_out(held_out: &[usize], cfg: &RunConfig) -> Result<Self> {
        let windows: Vec<Vec<usize>> = held_out
            .chunks_exact(cfg.eval_len)
            .take(cfg.eval_windows)
            .map(<[usize]>::to_vec)
            .collect();
        if windows.is_empty() || held_out.len() < cfg.prompt_len {
            return Err(Error::Ingestion(format!(
                "held-out split of {} tokens is too short for evaluation",
                held_out.len()
            )));
        }
        let room = held_out.len() - cfg.prompt_len;
        let prompts = (0..cfg.gen_prompts)
            .map(|i| {
                let s = i * room / cfg.gen_prompts.max(1);
                held_out[s..s + cfg.prompt_len].to_vec()
            })
            .collect();
        Ok(Self {
            windows,
            prompts,
            prefill: cfg.eval_prefill,
            gen_tokens: cfg.gen_tokens,
        })
    }
}

/// Quality and cost of one configuration over an [`EvalSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub score: ScoreResult,
    pub ledger: ComputeLedger,
    pub degenerate: usize,
    pub generations: usize,
}

impl Measurement {
    pub fn degenerate_fraction(&self) -> f64 {
        self.degenerate as f64 / self.generations.max(1) as f64
    }
}

/// Scores every window and generates from every prompt under `mode`.
pub fn measure(
    backbone: &Backbone,
    exits: Option<&ExitBank>,
    mode: Mode,
    eval: &EvalSet,
    penalty: Option<f64>,
) -> Result<Measurement> {
    let mut score = ScoreResult::default();
    for w in &eval.windows {
        score.merge(&engine::score(backbone, exits, mode, w, eval.prefill)?);
    }
    let mut ledger = score.ledger.clone();
    let penalty = penalty.unwrap_or_else(|| engine::default_penalty(backbone.kind(), &mode));
    let mut degenerate = 0;
    for p in &eval.prompts {
        let r = engine::generate(
            backbone,
            exits,
            &GenerationRequest {
                prompt: p.clone(),
                max_new_tokens: eval.gen_tokens,
                mode,
                penalty,
            },
        )?;
        ledger.merge(&r.ledger);
        degenerate += r.degenerate as usize;
    }
    Ok(Measurement {
        score,
        ledger,
        degenerate,
        generations: eval.prompts.len(),
    })
}

fn record(
    config_id: String,
    backbone: &Backbone,
    variant: String,
    policy: String,
    theta: Option<f64>,
    prune_p: Option<usize>,
    m: &Measurement,
    include_prefill: bool,
) -> Result<SweepRecord> {
    let degenerate_fraction = m.degenerate_fraction();
    Ok(SweepRecord {
        config_id,
        backbone: backbone.kind().to_string(),
        exit_variant: variant,
        policy,
        theta,
        prune_p,
        accuracy: m.score.accuracy(),
        perplexity: m.score.perplexity(),
        reduction_factor: m.ledger.reduction_factor(include_prefill)?,
        ops_backbone: m.ledger.ops_backbone,
        ops_classifiers: m.ledger.ops_classifiers,
        ops_recompute: m.ledger.ops_recompute,
        mean_exit_depth: m.ledger.mean_exit_depth(),
        degenerate_fraction,
        valid: degenerate_fraction <= MAX_DEGENERATE_FRACTION,
    })
}

/// Early-exit records for every bank, policy and threshold, plus one record
/// per pruning level, sorted by reduction factor.
pub fn sweep(cfg: &RunConfig, backbone: &Backbone, banks: &[ExitBank], eval: &EvalSet) -> Result<Vec<SweepRecord>> {
    let kind = backbone.kind();
    let mut out = Vec::new();
    for bank in banks {
        for missing in cfg.policies_for(kind) {
            for &theta in &cfg.thetas {
                let mode = Mode::EarlyExit(ExitPolicy::new(theta, missing)?);
                let m = measure(backbone, Some(bank), mode, eval, cfg.penalty)?;
                out.push(record(
                    format!("{kind}-{}-{missing}-t{theta}", bank.variant),
                    backbone,
                    bank.variant.to_string(),
                    missing.to_string(),
                    Some(theta),
                    None,
                    &m,
                    cfg.include_prefill,
                )?);
            }
        }
    }
    for p in cfg.prune_levels() {
        let m = measure(backbone, None, Mode::Pruned(PruneSpec { p }), eval, cfg.penalty)?;
        out.push(record(
            format!("{kind}-prune-p{p}"),
            backbone,
            "none".into(),
            "prune".into(),
            None,
            Some(p),
            &m,
            cfg.include_prefill,
        )?);
    }
    sort_records(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exits::ExitVariant;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.d_model = 8;
        c.n_heads = 2;
        c.n_blocks = 4;
        c.d_state = 2;
        c.synth_bytes = 4000;
        c.thetas = vec![0.0, 0.5, 2.0];
        c.eval_windows = 2;
        c.eval_len = 16;
        c.eval_prefill = 4;
        c.gen_prompts = 3;
        c.prompt_len = 4;
        c.gen_tokens = 6;
        c
    }

    #[test]
    fn sweep_is_sorted_and_reproducible() {
        for kind in [BackboneKind::Transformer, BackboneKind::Mamba] {
            let mut cfg = small();
            cfg.backbone = kind;
            let tokens = corpus_tokens(&cfg).unwrap();
            let (_, held) = split(&tokens, cfg.held_out).unwrap();
            let b = init_backbone(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let banks: Vec<ExitBank> = ExitVariant::ALL
                .iter()
                .map(|&v| ExitBank::init(v, cfg.placement().unwrap(), 8, &mut rng))
                .collect();
            let eval = EvalSet::from_held_out(held, &cfg).unwrap();
            let rs = sweep(&cfg, &b, &banks, &eval).unwrap();
            assert_eq!(rs.len(), 3 * 2 * 3 + 3);
            assert!(rs.windows(2).all(|w| w[0].reduction_factor <= w[1].reduction_factor));
            assert_eq!(rs, sweep(&cfg, &b, &banks, &eval).unwrap());
            let full = rs.iter().find(|r| r.prune_p == Some(0)).unwrap();
            assert_eq!(full.reduction_factor, 1.0);
            for r in &rs {
                let derived = full.ops_backbone as f64 / r.ops_spent() as f64;
                assert!((derived - r.reduction_factor).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validity_follows_degenerate_fraction() {
        let cfg = small();
        let tokens = corpus_tokens(&cfg).unwrap();
        let (_, held) = split(&tokens, cfg.held_out).unwrap();
        let b = init_backbone(&cfg).unwrap();
        let eval = EvalSet::from_held_out(held, &cfg).unwrap();
        let mut m = measure(&b, None, Mode::Full, &eval, None).unwrap();
        m.generations = 20;
        for (degenerate, valid) in [(0, true), (1, true), (2, false), (20, false)] {
            m.degenerate = degenerate;
            let r = record("x".into(), &b, "none".into(), "prune".into(), None, Some(0), &m, false).unwrap();
            assert_eq!(r.valid, valid, "{degenerate}/20");
            assert_eq!(r.degenerate_fraction, degenerate as f64 / 20.0);
        }
    }
}
