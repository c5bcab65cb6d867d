use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynexit::engine::{self, GenerationRequest, Mode, PruneSpec};
use dynexit::exits::{ExitBank, ExitPolicy, ExitVariant, MissingState};
use dynexit::harness::checkpoint::{load_backbone, load_exits, save_backbone, save_exits};
use dynexit::harness::config::RunConfig;
use dynexit::harness::corpus::{split, synth_corpus};
use dynexit::harness::report::{write_csv, write_svg};
use dynexit::harness::sweep::{build_backbone, build_exits, corpus_tokens, sweep, EvalSet};
use dynexit::harness::tokenize::{render, tokenize};
use dynexit::model::Backbone;
use dynexit::{Error, Result};

#[derive(Parser)]
#[command(name = "dynexit", version, about = "Early-exit inference experiments on toy Transformer and Mamba models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

macro_rules! config_flags {
    ($($field:ident),* $(,)?) => {
        /// Run configuration: an optional `key = value` file, then one flag per
        /// field, then `--set key=value` overrides.
        #[derive(Args, Debug, Default)]
        struct ConfigArgs {
            #[arg(long, global = true)]
            config: Option<PathBuf>,
            #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
            overrides: Vec<String>,
            $(
                #[arg(long, global = true)]
                $field: Option<String>,
            )*
        }

        impl ConfigArgs {
            fn resolve(&self) -> Result<RunConfig> {
                let mut cfg = match &self.config {
                    Some(p) => RunConfig::load(p)?,
                    None => RunConfig::default(),
                };
                $(
                    if let Some(v) = &self.$field {
                        cfg.set(stringify!($field), v)?;
                    }
                )*
                for kv in &self.overrides {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("`{kv}` is not KEY=VALUE")))?;
                    cfg.set(k.trim(), v)?;
                }
                cfg.validate()?;
                Ok(cfg)
            }
        }
    };
}

config_flags!(
    backbone, d_model, n_blocks, n_heads, max_seq_len, d_state, n_groups, d_conv, exit_variant,
    placements, thetas, policies, prune_levels, k, seed, corpus, synth_bytes, out_dir, held_out,
    backbone_steps, backbone_batch, backbone_seq_len, backbone_lr, exit_windows, exit_seq_len,
    exit_steps, exit_batch, exit_lr, eval_windows, eval_len, eval_prefill, gen_prompts, prompt_len,
    gen_tokens, penalty, include_prefill,
);

#[derive(Subcommand)]
enum Cmd {
    /// Train a backbone and write `<out_dir>/backbone.ckpt`.
    TrainBackbone {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Distill exit classifiers for a trained backbone.
    TrainExits {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Train every classifier variant instead of `exit_variant` only.
        #[arg(long)]
        all_variants: bool,
    },
    /// Generate a continuation of a prompt.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        prompt: String,
        /// Exit threshold; omit for the full model.
        #[arg(long)]
        theta: Option<f64>,
        /// Missing-state policy: recompute, copy or skip.
        #[arg(long)]
        policy: Option<MissingState>,
        /// Drop the last P blocks instead of exiting early.
        #[arg(long, conflicts_with = "theta")]
        prune: Option<usize>,
    },
    /// Sweep thresholds, policies and pruning levels; write CSV and SVG.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate layer pruning only.
    PruneEval {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the synthetic corpus to a file.
    SynthCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: PathBuf,
    },
}

fn backbone_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("backbone.ckpt")
}

fn exits_path(cfg: &RunConfig, v: ExitVariant) -> PathBuf {
    cfg.out_dir.join(format!("exits-{v}.ckpt"))
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn trained_banks(cfg: &RunConfig) -> Result<Vec<ExitBank>> {
    let mut banks = Vec::new();
    for v in ExitVariant::ALL {
        let p = exits_path(cfg, v);
        if p.exists() {
            banks.push(load_exits(&p)?);
        }
    }
    if banks.is_empty() {
        banks.push(load_exits(&exits_path(cfg, cfg.exit_variant))?);
    }
    Ok(banks)
}

fn run_sweep(cfg: &RunConfig, with_exits: bool) -> Result<()> {
    let backbone = load_backbone(&backbone_path(cfg))?;
    let mut cfg = cfg.clone();
    cfg.backbone = backbone.kind();
    let banks = if with_exits { trained_banks(&cfg)? } else { Vec::new() };
    let tokens = corpus_tokens(&cfg)?;
    let (_, held) = split(&tokens, cfg.held_out)?;
    let eval = EvalSet::from_held_out(held, &cfg)?;
    let records = sweep(&cfg, &backbone, &banks, &eval)?;
    let stem = if with_exits { "sweep" } else { "prune" };
    let csv = cfg.out_dir.join(format!("{stem}.csv"));
    let svg = cfg.out_dir.join(format!("{stem}.svg"));
    write_csv(&csv, &records)?;
    write_svg(&svg, &records, &format!("{} backbone, {} blocks", backbone.kind(), backbone.n_blocks()))?;
    for r in &records {
        println!(
            "{:<32} rf={:.4} acc={:.4} ppl={:.3} depth={:.3} degenerate={:.3}{}",
            r.config_id,
            r.reduction_factor,
            r.accuracy,
            r.perplexity,
            r.mean_exit_depth,
            r.degenerate_fraction,
            if r.valid { "" } else { " INVALID" }
        );
    }
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn generation_mode(backbone: &Backbone, theta: Option<f64>, policy: Option<MissingState>, prune: Option<usize>) -> Result<Mode> {
    Ok(match (theta, prune) {
        (Some(t), _) => {
            let missing = policy.unwrap_or(MissingState::for_backbone(backbone.kind())[0]);
            Mode::EarlyExit(ExitPolicy::new(t, missing)?)
        }
        (None, Some(p)) => Mode::Pruned(PruneSpec { p }),
        (None, None) => Mode::Full,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainBackbone { cfg } => {
            let cfg = cfg.resolve()?;
            ensure_out(&cfg)?;
            let tokens = corpus_tokens(&cfg)?;
            let (backbone, trace) = build_backbone(&cfg, &tokens)?;
            save_backbone(&backbone_path(&cfg), &backbone)?;
            write_text(&cfg.out_dir.join("run.cfg"), &cfg.to_kv())?;
            let curve: String = trace.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
            write_text(&cfg.out_dir.join("backbone_loss.csv"), &format!("step,loss\n{curve}"))?;
            let last = trace.iter().rev().take(50).sum::<f64>() / trace.len().clamp(1, 50) as f64;
            println!(
                "trained {} backbone for {} steps, final loss {last:.4}; wrote {}",
                cfg.backbone,
                trace.len(),
                backbone_path(&cfg).display()
            );
        }
        Cmd::TrainExits { cfg, all_variants } => {
            let cfg = cfg.resolve()?;
            let backbone = load_backbone(&backbone_path(&cfg))?;
            let tokens = corpus_tokens(&cfg)?;
            let variants = if all_variants { ExitVariant::ALL.to_vec() } else { vec![cfg.exit_variant] };
            for v in variants {
                let mut c = cfg.clone();
                c.exit_variant = v;
                let (bank, report) = build_exits(&c, &backbone, &tokens)?;
                let path = exits_path(&c, v);
                save_exits(&path, &bank, backbone.n_blocks())?;
                println!(
                    "{v}: held-out loss {:.4} -> {:.4}, positive rates {:?}; wrote {}",
                    report.held_out_before,
                    report.held_out_after,
                    report.positive_rate,
                    path.display()
                );
            }
        }
        Cmd::Generate { cfg, prompt, theta, policy, prune } => {
            let cfg = cfg.resolve()?;
            let backbone = load_backbone(&backbone_path(&cfg))?;
            let mode = generation_mode(&backbone, theta, policy, prune)?;
            let bank = match mode {
                Mode::EarlyExit(_) => Some(load_exits(&exits_path(&cfg, cfg.exit_variant))?),
                _ => None,
            };
            let prompt = tokenize(prompt.as_bytes())?;
            let penalty = cfg.penalty.unwrap_or_else(|| engine::default_penalty(backbone.kind(), &mode));
            let r = engine::generate(
                &backbone,
                bank.as_ref(),
                &GenerationRequest {
                    prompt,
                    max_new_tokens: cfg.gen_tokens,
                    mode,
                    penalty,
                },
            )?;
            println!("{}", render(&r.tokens));
            println!(
                "mean exit depth {:.3}, reduction factor {:.4}, degenerate {}",
                r.ledger.mean_exit_depth(),
                r.ledger.reduction_factor(cfg.include_prefill)?,
                r.degenerate
            );
        }
        Cmd::Sweep { cfg } => run_sweep(&cfg.resolve()?, true)?,
        Cmd::PruneEval { cfg } => run_sweep(&cfg.resolve()?, false)?,
        Cmd::SynthCorpus { cfg, output } => {
            let cfg = cfg.resolve()?;
            write_text(&output, &synth_corpus(cfg.synth_bytes, cfg.seed))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(2)
        }
    }
}
