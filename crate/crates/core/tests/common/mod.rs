#![allow(dead_code)]

use dynexit::exits::ExitBank;
use dynexit::mamba::{MambaConfig, MambaModel};
use dynexit::model::Backbone;
use dynexit::numkernel::{Graph, SeqLayout, Tensor};
use dynexit::params::ParamSet;
use dynexit::training::{classifier_loss_grad, exit_label, lm_loss_grad, ExitFeatures};
use dynexit::transformer::{TransformerConfig, TransformerModel};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn transformer<R: Rng>(rng: &mut R, n_blocks: usize, d: usize, heads: usize, vocab: usize, max_seq: usize) -> Backbone {
    let cfg = TransformerConfig::new(n_blocks, d, heads, vocab, max_seq).unwrap();
    Backbone::Transformer(TransformerModel::init(cfg, rng))
}

pub fn mamba<R: Rng>(rng: &mut R, n_blocks: usize, d: usize, d_state: usize, d_conv: usize, groups: usize, vocab: usize) -> Backbone {
    let cfg = MambaConfig::new(n_blocks, d, d_state, d_conv, groups, vocab).unwrap();
    Backbone::Mamba(MambaModel::init(cfg, rng))
}

/// Adds N(0, std²) noise to every parameter so that no gradient is
/// trivially zero at initialization.
pub fn jitter<P: ParamSet + ?Sized, R: Rng>(p: &mut P, std: f64, rng: &mut R) {
    for t in p.params_mut() {
        for x in t.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
    }
}

/// Fills every tensor whose name ends with `suffix`.
pub fn fill_named<P: ParamSet + ?Sized>(p: &mut P, suffix: &str, value: f64) {
    let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| n).collect();
    for (n, t) in names.iter().zip(p.params_mut()) {
        if n.ends_with(suffix) {
            t.fill(value);
        }
    }
}

pub fn tokens<R: Rng>(rng: &mut R, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest elementwise gap between the batched graph forward and the
/// per-token recurrent path, over every block output.
pub fn graph_vs_recurrent(backbone: &Backbone, ids: &[usize]) -> f64 {
    let mut g = Graph::new();
    let leaves = backbone.leaves(&mut g);
    let layout = SeqLayout { batch: 1, seq: ids.len() };
    let (_, outs) = backbone.forward_graph(&mut g, &leaves, ids, layout).unwrap();
    let stepped = stepwise_outputs(backbone, ids);
    outs.iter()
        .zip(&stepped)
        .map(|(&v, s)| max_abs_diff(g.value(v).data(), s.data()))
        .fold(0.0, f64::max)
}

/// Block outputs from feeding one token at a time through `block_step`.
pub fn stepwise_outputs(backbone: &Backbone, ids: &[usize]) -> Vec<Tensor> {
    let n = backbone.n_blocks();
    let d = backbone.d_model();
    let mut state = backbone.new_state();
    let mut outs = vec![Tensor::zeros(&[ids.len(), d]); n];
    for (t, &tok) in ids.iter().enumerate() {
        let mut h = backbone.embed(tok, t).unwrap();
        for (b, out) in outs.iter_mut().enumerate() {
            h = backbone.block_step(b, &h, &mut state).unwrap();
            out.row_mut(t).copy_from_slice(&h);
        }
    }
    outs
}

/// Largest gap between whole-prompt prefill and token-by-token decoding.
pub fn prefill_vs_decode(backbone: &Backbone, ids: &[usize]) -> f64 {
    let mut state = backbone.new_state();
    let pre = backbone.prefill(ids, 0..0, &mut state).unwrap();
    let dec = stepwise_outputs(backbone, ids);
    pre.iter()
        .zip(&dec)
        .map(|(a, b)| max_abs_diff(a.data(), b.data()))
        .fold(0.0, f64::max)
}

/// Central finite differences against analytic gradients: the worst
/// per-tensor relative error `|g - fd| / (|g| + |fd|)`, skipping tensors
/// whose gradient is numerically zero on both sides.
pub fn fd_relative_error<P: ParamSet + ?Sized>(p: &mut P, loss: impl Fn(&P) -> f64, analytic: &[Vec<f64>]) -> f64 {
    const H: f64 = 1e-5;
    let lens: Vec<usize> = p.named_params().iter().map(|(_, t)| t.len()).collect();
    assert_eq!(lens.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for (ti, &len) in lens.iter().enumerate() {
        let mut num = vec![0.0; len];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = p.params_mut()[ti].data()[j];
            p.params_mut()[ti].data_mut()[j] = orig + H;
            let up = loss(p);
            p.params_mut()[ti].data_mut()[j] = orig - H;
            let down = loss(p);
            p.params_mut()[ti].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * H);
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = num.iter().zip(&analytic[ti]).map(|(a, b)| a - b).collect();
        let scale = norm(&num) + norm(&analytic[ti]);
        if scale > 1e-10 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

pub fn backbone_gradient_error(backbone: &mut Backbone, windows: &[usize], seq_len: usize) -> f64 {
    let (_, analytic) = lm_loss_grad(backbone, windows, seq_len).unwrap();
    fd_relative_error(backbone, |b| lm_loss_grad(b, windows, seq_len).unwrap().0, &analytic)
}

pub fn bank_gradient_error(bank: &mut ExitBank, feats: &ExitFeatures, windows: &[usize]) -> f64 {
    let (_, analytic) = classifier_loss_grad(bank, feats, windows).unwrap();
    fd_relative_error(bank, |b| classifier_loss_grad(b, feats, windows).unwrap().0, &analytic)
}

/// Random normalized features with labels for a bank of `placements` exits.
pub fn random_features<R: Rng>(rng: &mut R, placements: usize, windows: usize, seq_len: usize, d: usize) -> ExitFeatures {
    ExitFeatures {
        seq_len,
        d_model: d,
        features: (0..placements)
            .map(|_| (0..windows * seq_len * d).map(|_| rng.sample(StandardNormal)).collect())
            .collect(),
        labels: (0..placements)
            .map(|_| (0..windows * seq_len).map(|_| rng.gen_range(0..2)).collect())
            .collect(),
        weights: dynexit::training::decay_weights(placements),
    }
}

/// Sort-based oracle: class `c = argmax(intermediate)` (lowest id on ties)
/// is positive iff it sits among the first `k` entries of the final logits
/// sorted by value descending, ties broken by id.
pub fn brute_force_label(intermediate: &[f64], full: &[f64], k: usize) -> usize {
    let mut best = 0;
    for (i, &x) in intermediate.iter().enumerate() {
        if x > intermediate[best] {
            best = i;
        }
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.sort_by(|&a, &b| full[b].total_cmp(&full[a]).then(a.cmp(&b)));
    order[..k].contains(&best) as usize
}

/// The library's label for the same draw, for side-by-side comparison.
pub fn library_label(intermediate: &[f64], full: &[f64], k: usize) -> usize {
    exit_label(intermediate, full, k)
}
