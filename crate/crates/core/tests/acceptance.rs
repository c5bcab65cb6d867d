//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p dynexit-core --test acceptance -- 1 5 8` runs a subset.
//! Criteria 9 to 11 train both desk-scale backbones and take several minutes;
//! their artifacts land in `$CARGO_TARGET_TMPDIR/acceptance`. Setting
//! `DYNEXIT_REUSE_CHECKPOINTS=1` reloads checkpoints left by an earlier run.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{
    bank_gradient_error, backbone_gradient_error, brute_force_label, fill_named, graph_vs_recurrent, jitter,
    library_label, mamba, prefill_vs_decode, random_features, tokens, transformer,
};
use dynexit::engine::{generate, GenerationRequest, Mode, PruneSpec, Stream};
use dynexit::exits::{ExitBank, ExitPlacement, ExitPolicy, ExitVariant, MissingState};
use dynexit::harness::checkpoint::{load_backbone, load_exits, save_backbone, save_exits};
use dynexit::harness::config::RunConfig;
use dynexit::harness::corpus::split;
use dynexit::harness::report::{parse_csv, render_svg, to_csv, write_csv, write_svg, SweepRecord};
use dynexit::harness::sweep::{build_backbone, build_exits, corpus_tokens, sweep, EvalSet};
use dynexit::ledger::{cost_block_mamba, cost_block_transformer, CostModel};
use dynexit::model::{Backbone, BackboneKind};
use dynexit::numkernel::counter;
use dynexit::numkernel::ops::argmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DUALITY_TOL: f64 = 1e-9;
const DUALITY_BUDGET: Duration = Duration::from_secs(60);
const GRADIENT_TOL: f64 = 1e-4;
const MIN_LEDGER_RUNS: usize = 20;
const ORACLE_DRAWS: usize = 1000;
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const SOFT_REDUCTION: f64 = 1.2;
const SOFT_QUALITY: f64 = 0.95;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_scan_step() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 4 * rng.gen_range(1..=4);
        let groups = if rng.gen_bool(0.5) { 1 } else { 2 };
        let (blocks, n, k) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=4));
        let b = mamba(&mut rng, blocks, d, n, k, groups, 13);
        let t = rng.gen_range(1..=32);
        let ids = tokens(&mut rng, t, 13);
        worst = worst.max(graph_vs_recurrent(&b, &ids));
    }
    let took = start.elapsed();
    check(
        worst < DUALITY_TOL && took < DUALITY_BUDGET,
        format!("100 models, max |scan - step| = {worst:.2e}, {:.1} s", took.as_secs_f64()),
    )
}

fn c2_prefill_decode() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let heads = rng.gen_range(1..=3);
        let d = heads * 2 * rng.gen_range(1..=4);
        let blocks = rng.gen_range(1..=3);
        let b = transformer(&mut rng, blocks, d, heads, 13, 40);
        let t = rng.gen_range(1..=32);
        let ids = tokens(&mut rng, t, 13);
        worst = worst.max(prefill_vs_decode(&b, &ids));
    }
    let took = start.elapsed();
    check(
        worst < DUALITY_TOL && took < DUALITY_BUDGET,
        format!("100 models, max |prefill - decode| = {worst:.2e}, {:.1} s", took.as_secs_f64()),
    )
}

fn c3_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut errs = BTreeMap::new();
    let mut t = transformer(&mut rng, 2, 8, 2, 7, 16);
    jitter(&mut t, 0.1, &mut rng);
    let w = tokens(&mut rng, 12, 7);
    errs.insert("attention block".to_string(), backbone_gradient_error(&mut t, &w, 5));
    let mut m = mamba(&mut rng, 2, 4, 3, 3, 2, 7);
    jitter(&mut m, 0.1, &mut rng);
    fill_named(&mut m, "dt_b", 0.5);
    let w = tokens(&mut rng, 14, 7);
    errs.insert("mamba block".to_string(), backbone_gradient_error(&mut m, &w, 6));
    for v in ExitVariant::ALL {
        let mut bank = ExitBank::init(v, ExitPlacement::new(vec![3, 4], 6).unwrap(), 8, &mut rng);
        jitter(&mut bank, 0.2, &mut rng);
        fill_named(&mut bank, "dt_b", 0.5);
        let feats = random_features(&mut rng, 2, 3, 5, 8);
        errs.insert(format!("{v} classifier"), bank_gradient_error(&mut bank, &feats, &[0, 2]));
    }
    let worst = errs.values().copied().fold(0.0, f64::max);
    let detail = errs.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst < GRADIENT_TOL, format!("relative errors: {detail}"))
}

fn c4_ledger() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut runs = 0;
    let mut mismatches = Vec::new();
    for kind in [BackboneKind::Transformer, BackboneKind::Mamba] {
        for v in ExitVariant::ALL {
            for missing in MissingState::for_backbone(kind) {
                for theta in [0.0, 0.3, 0.6, 0.9, 1.5] {
                    let b = random_backbone(kind, rng.gen(), 8, 16);
                    let bank = ExitBank::init(v, ExitPlacement::default_for(8).unwrap(), 16, &mut rng);
                    let len = rng.gen_range(1..=10);
                    let prompt = tokens(&mut rng, len, 13);
                    let before = counter::snapshot();
                    let r = generate(
                        &b,
                        Some(&bank),
                        &GenerationRequest {
                            prompt,
                            max_new_tokens: 16,
                            mode: Mode::EarlyExit(ExitPolicy::new(theta, missing).unwrap()),
                            penalty: 1.0,
                        },
                    )
                    .unwrap();
                    runs += 1;
                    if !r.ledger.matches(&counter::snapshot().since(&before)) {
                        mismatches.push(format!("{kind}/{v}/{missing}/θ={theta}"));
                    }
                }
            }
        }
    }
    check(
        mismatches.is_empty() && runs >= MIN_LEDGER_RUNS,
        format!("{runs} runs, {} mismatches {mismatches:?}", mismatches.len()),
    )
}

fn random_backbone(kind: BackboneKind, seed: u64, n_blocks: usize, d: usize) -> Backbone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        BackboneKind::Transformer => transformer(&mut rng, n_blocks, d, 4, 13, 64),
        // G·N = d/4, the proportion behind the 9/26 recompute share.
        BackboneKind::Mamba => mamba(&mut rng, n_blocks, d, d / 4, 4, 1, 13),
    }
}

fn c5_costs() -> Outcome {
    let t = cost_block_transformer(1, 4);
    let m = cost_block_mamba(4, 1, 2);
    let mut bad = Vec::new();
    for kind in [BackboneKind::Transformer, BackboneKind::Mamba] {
        let b = random_backbone(kind, 5, 8, 16);
        for p in 0..=6 {
            let mut rf = 0.0;
            let r = generate(
                &b,
                None,
                &GenerationRequest {
                    prompt: vec![1, 2, 3],
                    max_new_tokens: 10,
                    mode: Mode::Pruned(PruneSpec { p }),
                    penalty: 1.0,
                },
            )
            .map_err(|e| e.to_string())?;
            if let Ok(x) = r.ledger.reduction_factor(false) {
                rf = x;
            }
            if rf != 8.0 / (8 - p) as f64 {
                bad.push(format!("{kind} p={p}: {rf}"));
            }
        }
    }
    check(
        t == 400 && m == 112 && bad.is_empty(),
        format!("transformer(1,4) = {t}, mamba(4,1,2) = {m}, pruning N/(N-p) for p in 0..=6 on both backbones {bad:?}"),
    )
}

/// Recompute ops charged per skipped block, read from ledger and counter
/// deltas around single decode steps that exit at the first placement.
fn recompute_per_block(kind: BackboneKind) -> Result<(u64, u64, u64), String> {
    let d = 16;
    let b = random_backbone(kind, 6, 8, d);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bank = ExitBank::init(ExitVariant::Calm, ExitPlacement::default_for(8).unwrap(), d, &mut rng);
    let policy = ExitPolicy::new(0.0, MissingState::PartialForward).unwrap();
    let mut s = Stream::new(&b, Some(&bank), Mode::EarlyExit(policy)).map_err(|e| e.to_string())?;
    let logits = s.prefill(&[1, 2, 3]).map_err(|e| e.to_string())?;
    let mut tok = argmax(&logits);
    let mut per_block = None;
    for _ in 0..4 {
        let before_ledger = s.ledger.ops_recompute;
        let before_count = counter::snapshot();
        let (l, depth) = s.step(tok).map_err(|e| e.to_string())?;
        let counted = counter::snapshot().since(&before_count).recompute;
        let charged = s.ledger.ops_recompute - before_ledger;
        let skipped = (8 - depth) as u64;
        if charged != counted || skipped == 0 || charged % skipped != 0 {
            return Err(format!("ledger {charged} vs counter {counted} over {skipped} skipped blocks"));
        }
        let each = charged / skipped;
        if per_block.is_some_and(|p| p != each) {
            return Err("recompute charge varies between steps".into());
        }
        per_block = Some(each);
        tok = argmax(&l);
    }
    // The context-free part of the per-token block charge.
    let block = CostModel::of(&b).block_step(0);
    Ok((per_block.unwrap(), block, d as u64))
}

fn c6_recompute() -> Outcome {
    let (tp, tb, _) = recompute_per_block(BackboneKind::Transformer)?;
    let (mp, mb, _) = recompute_per_block(BackboneKind::Mamba)?;
    check(
        6 * tp == tb && 26 * mp == 9 * mb,
        format!("transformer {tp}/{tb} exact 1/6: {}, mamba {mp}/{mb} exact 9/26: {}", 6 * tp == tb, 26 * mp == 9 * mb),
    )
}

fn c7_no_exit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for kind in [BackboneKind::Transformer, BackboneKind::Mamba] {
        for _ in 0..5 {
            let b = random_backbone(kind, rng.gen(), 8, 16);
            let prompt = tokens(&mut rng, 6, 13);
            let req = |mode| GenerationRequest {
                prompt: prompt.clone(),
                max_new_tokens: 20,
                mode,
                penalty: 1.0,
            };
            let full = generate(&b, None, &req(Mode::Full)).map_err(|e| e.to_string())?;
            for v in ExitVariant::ALL {
                let bank = ExitBank::init(v, ExitPlacement::default_for(8).unwrap(), 16, &mut rng);
                for missing in MissingState::for_backbone(kind) {
                    let mode = Mode::EarlyExit(ExitPolicy::new(1.0 + 1e-9, missing).unwrap());
                    let r = generate(&b, Some(&bank), &req(mode)).map_err(|e| e.to_string())?;
                    cases += 1;
                    if r.tokens != full.tokens {
                        return Err(format!("{kind}/{v}/{missing} diverged from the exit-free model"));
                    }
                }
            }
        }
    }
    Ok(format!("{cases} runs identical to the exit-free model"))
}

fn c8_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut disagreements = 0;
    let mut k1_mismatch = 0;
    for i in 0..ORACLE_DRAWS {
        let v = rng.gen_range(2..=16);
        // Every fourth draw uses a coarse grid so that ties occur.
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if i % 4 == 0 {
                rng.gen_range(-2..=2) as f64
            } else {
                rng.gen_range(-5.0..5.0)
            }
        };
        let a: Vec<f64> = (0..v).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..v).map(|_| draw(&mut rng)).collect();
        let k = rng.gen_range(1..=v);
        if library_label(&a, &b, k) != brute_force_label(&a, &b, k) {
            disagreements += 1;
        }
        if library_label(&a, &b, 1) != (argmax(&a) == argmax(&b)) as usize {
            k1_mismatch += 1;
        }
    }
    check(
        disagreements == 0 && k1_mismatch == 0,
        format!("{ORACLE_DRAWS} draws, {disagreements} top-k disagreements, {k1_mismatch} k=1 argmax disagreements"),
    )
}

struct DeskRun {
    kind: BackboneKind,
    cfg: RunConfig,
    backbone: Backbone,
    banks: Vec<ExitBank>,
    eval: EvalSet,
    records: Vec<SweepRecord>,
    seconds: f64,
}

fn artifact_dir(kind: BackboneKind) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(kind.to_string())
}

fn desk_run(kind: BackboneKind) -> dynexit::Result<DeskRun> {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.backbone = kind;
    cfg.out_dir = artifact_dir(kind);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| dynexit::Error::Io { path: cfg.out_dir.clone(), source: e })?;
    let reuse = std::env::var_os("DYNEXIT_REUSE_CHECKPOINTS").is_some();
    let tokens = corpus_tokens(&cfg)?;
    let bpath = cfg.out_dir.join("backbone.ckpt");
    let backbone = if reuse && bpath.exists() {
        load_backbone(&bpath)?
    } else {
        let (b, trace) = build_backbone(&cfg, &tokens)?;
        save_backbone(&bpath, &b)?;
        eprintln!("  {kind}: backbone loss {:.3} -> {:.3}", trace[0], trace[trace.len() - 1]);
        b
    };
    let mut banks = Vec::new();
    for v in ExitVariant::ALL {
        let epath = cfg.out_dir.join(format!("exits-{v}.ckpt"));
        if reuse && epath.exists() {
            banks.push(load_exits(&epath)?);
            continue;
        }
        let mut c = cfg.clone();
        c.exit_variant = v;
        let (bank, report) = build_exits(&c, &backbone, &tokens)?;
        save_exits(&epath, &bank, backbone.n_blocks())?;
        eprintln!(
            "  {kind}/{v}: exit loss {:.4} -> {:.4}, positive rate {:?}",
            report.held_out_before, report.held_out_after, report.positive_rate
        );
        banks.push(bank);
    }
    let (_, held) = split(&tokens, cfg.held_out)?;
    let eval = EvalSet::from_held_out(held, &cfg)?;
    let records = sweep(&cfg, &backbone, &banks, &eval)?;
    write_csv(&cfg.out_dir.join("sweep.csv"), &records)?;
    write_svg(&cfg.out_dir.join("sweep.svg"), &records, &format!("{kind} desk sweep"))?;
    Ok(DeskRun {
        kind,
        cfg,
        backbone,
        banks,
        eval,
        records,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn full_accuracy(records: &[SweepRecord]) -> f64 {
    records
        .iter()
        .find(|r| r.prune_p == Some(0))
        .map_or(f64::NAN, |r| r.accuracy)
}

fn c9_desk(runs: &[DeskRun], corpus_bytes: usize) -> Outcome {
    let seconds: f64 = runs.iter().map(|r| r.seconds).sum();
    let mut soft = Vec::new();
    for run in runs {
        let full = full_accuracy(&run.records);
        let best = run
            .records
            .iter()
            .filter(|r| r.valid && r.theta.is_some() && r.accuracy >= SOFT_QUALITY * full)
            .max_by(|a, b| a.reduction_factor.total_cmp(&b.reduction_factor));
        soft.push(match best {
            Some(r) => format!(
                "{}: full acc {full:.3}, best {} rf {:.3} acc {:.3} (soft target {})",
                run.kind,
                r.config_id,
                r.reduction_factor,
                r.accuracy,
                if r.reduction_factor >= SOFT_REDUCTION { "met" } else { "not met" }
            ),
            None => format!("{}: full acc {full:.3}, no valid exit config within 95% (soft target not met)", run.kind),
        });
    }
    let monotone = c10_monotone(runs).is_ok();
    check(
        corpus_bytes >= 100_000 && seconds < DESK_BUDGET.as_secs_f64() && monotone,
        format!(
            "corpus {corpus_bytes} B, both backbones trained and swept in {:.0} s, monotonicity {}; {}",
            seconds,
            if monotone { "holds" } else { "fails" },
            soft.join("; ")
        ),
    )
}

fn c10_monotone(runs: &[DeskRun]) -> Outcome {
    let mut violations = Vec::new();
    let mut series = 0;
    for run in runs {
        let mut groups: BTreeMap<(String, String), Vec<&SweepRecord>> = BTreeMap::new();
        for r in run.records.iter().filter(|r| r.theta.is_some()) {
            groups.entry((r.exit_variant.clone(), r.policy.clone())).or_default().push(r);
        }
        for ((v, p), mut rs) in groups {
            series += 1;
            rs.sort_by(|a, b| a.theta.unwrap().total_cmp(&b.theta.unwrap()));
            for w in rs.windows(2) {
                if w[1].mean_exit_depth < w[0].mean_exit_depth || w[1].reduction_factor > w[0].reduction_factor {
                    violations.push(format!(
                        "{}/{v}/{p} θ {} -> {}: depth {:.4} -> {:.4}, rf {:.4} -> {:.4}",
                        run.kind,
                        w[0].theta.unwrap(),
                        w[1].theta.unwrap(),
                        w[0].mean_exit_depth,
                        w[1].mean_exit_depth,
                        w[0].reduction_factor,
                        w[1].reduction_factor
                    ));
                }
            }
        }
    }
    check(
        violations.is_empty() && series > 0,
        format!("{series} (backbone, variant, policy) series, violations: {violations:?}"),
    )
}

fn c11_degenerate(runs: &[DeskRun]) -> Outcome {
    let run = runs
        .iter()
        .find(|r| r.kind == BackboneKind::Mamba)
        .ok_or("no mamba desk run")?;
    let mut cfg = run.cfg.clone();
    cfg.thetas = vec![0.0];
    cfg.policies = vec![MissingState::SkipState];
    cfg.prune_levels = vec![0];
    // No repetition penalty: the forced configuration is left to degenerate.
    cfg.penalty = Some(1.0);
    let records = sweep(&cfg, &run.backbone, &run.banks, &run.eval).map_err(|e| e.to_string())?;
    let forced: Vec<&SweepRecord> = records.iter().filter(|r| r.theta == Some(0.0)).collect();
    let degenerate: Vec<&&SweepRecord> = forced.iter().filter(|r| r.degenerate_fraction > 0.05).collect();
    let csv = parse_csv(&to_csv(&records).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let svg = render_svg(&records, "forced");
    let _ = std::fs::write(artifact_dir(run.kind).join("forced.svg"), &svg);
    let fractions: Vec<String> = forced
        .iter()
        .map(|r| format!("{} {:.2}", r.exit_variant, r.degenerate_fraction))
        .collect();
    if degenerate.is_empty() {
        return Err(format!("no forced config degenerated beyond 5%: {fractions:?}"));
    }
    for r in &degenerate {
        let row = csv.iter().find(|c| c.config_id == r.config_id).ok_or("row missing from CSV")?;
        if row.valid || svg.contains(&format!("data-config=\"{}\"", r.config_id)) {
            return Err(format!("{} is degenerate but shown as valid", r.config_id));
        }
    }
    Ok(format!(
        "degenerate fractions {fractions:?}; {} configs above 5% are valid=false in CSV and absent from SVG",
        degenerate.len()
    ))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: u32| args.is_empty() || args.iter().any(|a| a == &n.to_string());
    let mut failed = 0;
    let mut report = |n: u32, title: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag}  {title}: {detail}");
    };
    let unit: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "scan/step duality", c1_scan_step),
        (2, "prefill/decode duality", c2_prefill_decode),
        (3, "gradient correctness", c3_gradients),
        (4, "ledger exactness", c4_ledger),
        (5, "cost formulas and pruning", c5_costs),
        (6, "recomputation constants", c6_recompute),
        (7, "no-exit equivalence", c7_no_exit),
        (8, "oracle equivalence", c8_oracle),
    ];
    for (n, title, f) in unit {
        if wanted(n) {
            let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            report(n, title, outcome);
        }
    }
    if wanted(9) || wanted(10) || wanted(11) {
        let corpus_bytes = RunConfig::default().synth_bytes;
        let runs: Result<Vec<DeskRun>, String> = [BackboneKind::Transformer, BackboneKind::Mamba]
            .into_iter()
            .map(|k| desk_run(k).map_err(|e| format!("{k}: {e}")))
            .collect();
        match runs {
            Ok(runs) => {
                if wanted(9) {
                    report(9, "desk experiment", c9_desk(&runs, corpus_bytes));
                }
                if wanted(10) {
                    report(10, "monotonicity", c10_monotone(&runs));
                }
                if wanted(11) {
                    report(11, "degenerate handling", c11_degenerate(&runs));
                }
            }
            Err(e) => {
                for (n, t) in [(9, "desk experiment"), (10, "monotonicity"), (11, "degenerate handling")] {
                    if wanted(n) {
                        report(n, t, Err(e.clone()));
                    }
                }
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
