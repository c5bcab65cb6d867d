mod common;

use common::{brute_force_label, graph_vs_recurrent, library_label, mamba, prefill_vs_decode, tokens, transformer};
use dynexit::engine::{generate, generate_pruned, GenerationRequest, Mode, PruneSpec};
use dynexit::exits::{ExitBank, ExitPlacement, ExitPolicy, ExitVariant, MissingState};
use dynexit::harness::checkpoint::{load_backbone, load_exits, save_backbone, save_exits};
use dynexit::harness::config::RunConfig;
use dynexit::harness::tokenize::{detokenize, tokenize, BOS};
use dynexit::model::{Backbone, BackboneKind};
use dynexit::numkernel::counter;
use dynexit::params::ParamSet;
use dynexit::training::decay_weights;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 11;

fn backbone(kind: BackboneKind, seed: u64, n_blocks: usize) -> Backbone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        BackboneKind::Transformer => transformer(&mut rng, n_blocks, 8, 2, VOCAB, 64),
        BackboneKind::Mamba => mamba(&mut rng, n_blocks, 8, 4, 3, 1, VOCAB),
    }
}

fn kind() -> impl Strategy<Value = BackboneKind> {
    prop_oneof![Just(BackboneKind::Transformer), Just(BackboneKind::Mamba)]
}

fn variant() -> impl Strategy<Value = ExitVariant> {
    prop_oneof![Just(ExitVariant::Calm), Just(ExitVariant::Ffn), Just(ExitVariant::MambaCell)]
}

fn bank(b: &Backbone, v: ExitVariant, seed: u64) -> ExitBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
    ExitBank::init(v, ExitPlacement::default_for(b.n_blocks()).unwrap(), b.d_model(), &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mamba_scan_matches_recurrence(seed in any::<u64>(), t in 1usize..24, blocks in 1usize..4) {
        let b = backbone(BackboneKind::Mamba, seed, blocks);
        let ids = tokens(&mut ChaCha8Rng::seed_from_u64(seed), t, VOCAB);
        prop_assert!(graph_vs_recurrent(&b, &ids) < 1e-9);
    }

    #[test]
    fn transformer_prefill_matches_decode(seed in any::<u64>(), t in 1usize..24, blocks in 1usize..4) {
        let b = backbone(BackboneKind::Transformer, seed, blocks);
        let ids = tokens(&mut ChaCha8Rng::seed_from_u64(seed), t, VOCAB);
        prop_assert!(prefill_vs_decode(&b, &ids) < 1e-9);
        prop_assert!(graph_vs_recurrent(&b, &ids) < 1e-9);
    }

    #[test]
    fn ledger_equals_counter(
        kind in kind(),
        v in variant(),
        seed in any::<u64>(),
        theta in 0.0f64..1.0,
        which in 0usize..2,
        prompt_len in 1usize..8,
    ) {
        let b = backbone(kind, seed, 8);
        let exits = bank(&b, v, seed);
        let missing = MissingState::for_backbone(kind)[which];
        let prompt = tokens(&mut ChaCha8Rng::seed_from_u64(seed), prompt_len, VOCAB);
        let before = counter::snapshot();
        let r = generate(&b, Some(&exits), &GenerationRequest {
            prompt,
            max_new_tokens: 12,
            mode: Mode::EarlyExit(ExitPolicy::new(theta, missing).unwrap()),
            penalty: 1.0,
        }).unwrap();
        prop_assert!(r.ledger.matches(&counter::snapshot().since(&before)));
        let placements = exits.placement.blocks();
        for &d in &r.exit_depths {
            prop_assert!(d == 8 || placements.contains(&(d - 2)));
        }
    }

    #[test]
    fn pruning_reduction_is_exact(kind in kind(), seed in any::<u64>(), p in 0usize..7) {
        let b = backbone(kind, seed, 8);
        let r = generate_pruned(&b, PruneSpec { p }, vec![1, 2, 3], 6).unwrap();
        prop_assert_eq!(r.ledger.reduction_factor(false).unwrap(), 8.0 / (8 - p) as f64);
        prop_assert!(r.exit_depths.iter().all(|&d| d == 8 - p));
    }

    #[test]
    fn unreachable_threshold_never_exits(kind in kind(), v in variant(), seed in any::<u64>()) {
        let b = backbone(kind, seed, 6);
        let exits = bank(&b, v, seed);
        let prompt = tokens(&mut ChaCha8Rng::seed_from_u64(seed), 4, VOCAB);
        let full = generate(&b, None, &GenerationRequest { prompt: prompt.clone(), max_new_tokens: 10, mode: Mode::Full, penalty: 1.0 }).unwrap();
        for missing in MissingState::for_backbone(kind) {
            let r = generate(&b, Some(&exits), &GenerationRequest {
                prompt: prompt.clone(),
                max_new_tokens: 10,
                mode: Mode::EarlyExit(ExitPolicy::new(1.5, missing).unwrap()),
                penalty: 1.0,
            }).unwrap();
            prop_assert_eq!(&r.tokens, &full.tokens);
            prop_assert_eq!(r.ledger.ops_backbone, full.ledger.ops_backbone);
            prop_assert_eq!(r.ledger.ops_recompute, 0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn oracle_label_matches_sorting(
        logits in (2usize..=16).prop_flat_map(|v| (
            prop::collection::vec(-3i8..3, v),
            prop::collection::vec(-3i8..3, v),
            1..=v,
        )),
    ) {
        let (a, b, k) = logits;
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        prop_assert_eq!(library_label(&a, &b, k), brute_force_label(&a, &b, k));
    }

    #[test]
    fn tokenizer_round_trips(bytes in prop::collection::vec(any::<u8>(), 1..200)) {
        let ids = tokenize(&bytes).unwrap();
        prop_assert_eq!(ids[0], BOS);
        prop_assert_eq!(ids.len(), bytes.len() + 1);
        prop_assert_eq!(detokenize(&ids).unwrap(), bytes);
    }

    #[test]
    fn decay_weights_are_a_decreasing_distribution(p in 1usize..32) {
        let w = decay_weights(p);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|x| x[0] > x[1]));
    }

    #[test]
    fn config_text_round_trips(
        d in 1usize..8,
        seed in any::<u64>(),
        k in 1usize..20,
        held in 0.0f64..0.5,
        penalty in prop::option::of(1.0f64..3.0),
        kind in kind(),
    ) {
        let mut c = RunConfig::default();
        c.d_model = 16 * d;
        c.seed = seed;
        c.k = k;
        c.held_out = held;
        c.penalty = penalty;
        c.backbone = kind;
        prop_assert_eq!(RunConfig::parse(&c.to_kv()).unwrap(), c);
    }
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (i, kind) in [BackboneKind::Transformer, BackboneKind::Mamba].into_iter().enumerate() {
        let b = backbone(kind, i as u64, 4);
        let path = dir.path().join(format!("b{i}.ckpt"));
        save_backbone(&path, &b).unwrap();
        let back = load_backbone(&path).unwrap();
        assert_eq!(back.named_params().len(), b.named_params().len());
        for ((n1, t1), (n2, t2)) in b.named_params().iter().zip(back.named_params()) {
            assert_eq!(n1, &n2);
            assert!(t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for v in ExitVariant::ALL {
            let e = bank(&b, v, 3);
            let path = dir.path().join(format!("e{i}-{v}.ckpt"));
            save_exits(&path, &e, b.n_blocks()).unwrap();
            assert_eq!(load_exits(&path).unwrap().fingerprint(), e.fingerprint());
        }
    }
}
