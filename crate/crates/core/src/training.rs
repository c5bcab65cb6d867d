//! Backbone language-model training and distillation of exit classifiers
//! against the frozen full model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exits::ExitBank;
use crate::model::Backbone;
use crate::numkernel::counter::{self, Scope};
use crate::numkernel::ops::argmax;
use crate::numkernel::{grad_of, Graph, SeqLayout, Tensor, Var};
use crate::params::{ParamSet, VarCursor};

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                if update != 0.0 {
                    *w -= update;
                }
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("learning rate must be ≥ 0 and clip > 0".into()));
        }
        Ok(())
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training { step, loss })
    }
}

fn sample_windows(rng: &mut ChaCha8Rng, corpus: &[usize], len: usize, count: usize) -> Result<Vec<usize>> {
    if corpus.len() < len {
        return Err(Error::Ingestion(format!(
            "corpus of {} tokens is shorter than a window of {len}",
            corpus.len()
        )));
    }
    let mut ids = Vec::with_capacity(len * count);
    for _ in 0..count {
        let s = rng.gen_range(0..=corpus.len() - len);
        ids.extend_from_slice(&corpus[s..s + len]);
    }
    Ok(ids)
}

/// Mean next-token cross-entropy of `backbone` on a batch of windows of
/// `seq_len + 1` tokens laid out back to back.
fn lm_loss(g: &mut Graph, backbone: &Backbone, leaves: &[Var], windows: &[usize], seq_len: usize) -> Result<Var> {
    let batch = windows.len() / (seq_len + 1);
    let mut ids = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    for w in windows.chunks(seq_len + 1) {
        ids.extend_from_slice(&w[..seq_len]);
        targets.extend_from_slice(&w[1..]);
    }
    let layout = SeqLayout { batch, seq: seq_len };
    let (logits, _) = backbone.forward_graph(g, leaves, &ids, layout)?;
    g.cross_entropy(logits, &targets)
}

/// Mean next-token cross-entropy on back-to-back windows of `seq_len + 1`
/// tokens and its gradient for every backbone parameter, in parameter order.
pub fn lm_loss_grad(backbone: &Backbone, windows: &[usize], seq_len: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let _g = counter::enter(Scope::Uncharged);
    let mut g = Graph::new();
    let leaves = backbone.leaves(&mut g);
    let loss = lm_loss(&mut g, backbone, &leaves, windows, seq_len)?;
    Ok((g.value(loss).item(), grad_of(&g, loss, &leaves)?))
}

/// Next-token training of either backbone on random windows of `corpus`.
/// Returns the per-step loss trace.
pub fn train_backbone(backbone: &mut Backbone, corpus: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let _g = counter::enter(Scope::Uncharged);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let windows = sample_windows(&mut rng, corpus, cfg.seq_len + 1, cfg.batch)?;
        let (value, mut grads) = lm_loss_grad(backbone, &windows, cfg.seq_len)?;
        check_loss(step, value)?;
        clip_global_norm(&mut grads, cfg.clip);
        opt.step(backbone.params_mut(), &grads);
        trace.push(value);
    }
    Ok(trace)
}

/// Mean next-token cross-entropy over consecutive windows of `corpus`.
pub fn evaluate_lm(backbone: &Backbone, corpus: &[usize], seq_len: usize, max_windows: usize) -> Result<f64> {
    let _g = counter::enter(Scope::Uncharged);
    let mut total = 0.0;
    let mut count = 0;
    for w in corpus.chunks_exact(seq_len + 1).take(max_windows) {
        let mut g = Graph::new();
        let leaves = backbone.leaves(&mut g);
        let loss = lm_loss(&mut g, backbone, &leaves, w, seq_len)?;
        total += g.value(loss).item();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Ingestion("corpus too short for one evaluation window".into()));
    }
    Ok(total / count as f64)
}

/// Whether id `c` is among the `k` largest `logits`, ties going to the lower id.
pub fn in_top_k(logits: &[f64], c: usize, k: usize) -> bool {
    let lc = logits[c];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > lc || (l == lc && j < c))
        .count();
    ahead < k
}

/// 1 when the intermediate prediction lies in the final model's top `k`.
pub fn exit_label(intermediate: &[f64], full: &[f64], k: usize) -> usize {
    in_top_k(full, argmax(intermediate), k) as usize
}

/// Loss weights decaying linearly with depth, summing to 1.
pub fn decay_weights(placements: usize) -> Vec<f64> {
    let p = placements as f64;
    let total = p * (p + 1.0) / 2.0;
    (0..placements).map(|i| (p - i as f64) / total).collect()
}

/// Exit labels of one window: `labels[placement][position]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitLabelBatch {
    pub labels: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

/// Labels for every position of one prefilled window given the outputs of
/// all blocks.
pub fn oracle_labels(
    backbone: &Backbone,
    block_outputs: &[Tensor],
    placements: &[usize],
    k: usize,
) -> Result<ExitLabelBatch> {
    check_k(k, backbone.vocab_size())?;
    let last = block_outputs.last().expect("at least one block");
    let full: Vec<Vec<f64>> = (0..last.rows()).map(|t| backbone.logits(last.row(t))).collect();
    let labels = placements
        .iter()
        .map(|&b| {
            (0..last.rows())
                .map(|t| exit_label(&backbone.logits(block_outputs[b].row(t)), &full[t], k))
                .collect()
        })
        .collect();
    Ok(ExitLabelBatch {
        labels,
        weights: decay_weights(placements.len()),
    })
}

fn check_k(k: usize, vocab: usize) -> Result<()> {
    if k == 0 || k > vocab {
        return Err(Error::Config(format!("top-k must be in 1..={vocab}, got {k}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub k: usize,
    /// Number of teacher-forced windows to label.
    pub windows: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Frozen-backbone features for classifier training: the normalized hidden
/// state at each placement and its label, window by window.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitFeatures {
    pub seq_len: usize,
    pub d_model: usize,
    /// `features[placement]`: windows·seq_len × d.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl ExitFeatures {
    pub fn windows(&self) -> usize {
        self.labels.first().map_or(0, |l| l.len() / self.seq_len)
    }

    /// Share of positive labels per placement.
    pub fn positive_rate(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|l| l.iter().sum::<usize>() as f64 / l.len().max(1) as f64)
            .collect()
    }

    fn gather(&self, placement: usize, windows: &[usize]) -> (Tensor, Vec<usize>) {
        let (l, d) = (self.seq_len, self.d_model);
        let mut x = Vec::with_capacity(windows.len() * l * d);
        let mut y = Vec::with_capacity(windows.len() * l);
        for &w in windows {
            x.extend_from_slice(&self.features[placement][w * l * d..(w + 1) * l * d]);
            y.extend_from_slice(&self.labels[placement][w * l..(w + 1) * l]);
        }
        (Tensor::new(vec![windows.len() * l, d], x).expect("sized"), y)
    }
}

/// Runs the frozen backbone over `windows` random windows and records the
/// normalized hidden state and oracle label at each placement.
pub fn extract_features(
    backbone: &Backbone,
    placements: &[usize],
    corpus: &[usize],
    cfg: &OracleConfig,
) -> Result<ExitFeatures> {
    check_k(cfg.k, backbone.vocab_size())?;
    let _g = counter::enter(Scope::Uncharged);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = sample_windows(&mut rng, corpus, cfg.seq_len, cfg.windows)?;
    let p = placements.len();
    let mut features = vec![Vec::new(); p];
    let mut labels = vec![Vec::new(); p];
    for w in ids.chunks(cfg.seq_len) {
        let mut state = backbone.new_state();
        let outs = backbone.prefill(w, 0..0, &mut state)?;
        let batch = oracle_labels(backbone, &outs, placements, cfg.k)?;
        for (i, &b) in placements.iter().enumerate() {
            for t in 0..cfg.seq_len {
                features[i].extend(backbone.normed(outs[b].row(t)));
            }
            labels[i].extend_from_slice(&batch.labels[i]);
        }
    }
    Ok(ExitFeatures {
        seq_len: cfg.seq_len,
        d_model: backbone.d_model(),
        features,
        labels,
        weights: decay_weights(p),
    })
}

/// Weighted joint loss `Σ w_ℓ · CE_ℓ` of the bank on the given windows.
fn joint_loss(g: &mut Graph, bank: &ExitBank, leaves: &[Var], feats: &ExitFeatures, windows: &[usize]) -> Result<Var> {
    let layout = SeqLayout {
        batch: windows.len(),
        seq: feats.seq_len,
    };
    let mut cur = VarCursor::new(leaves);
    let mut total: Option<Var> = None;
    for (i, clf) in bank.classifiers.iter().enumerate() {
        let (x, y) = feats.gather(i, windows);
        let x = g.leaf(x);
        let logits = clf.forward_graph(g, &mut cur, x, layout)?;
        let ce = g.cross_entropy(logits, &y)?;
        let term = g.scale(ce, feats.weights[i]);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::Config("exit bank has no classifiers".into()))
}

/// Joint loss of the bank over the given windows of `feats`.
pub fn classifier_loss(bank: &ExitBank, feats: &ExitFeatures, windows: &[usize]) -> Result<f64> {
    let _g = counter::enter(Scope::Uncharged);
    let mut g = Graph::new();
    let leaves = bank.leaves(&mut g);
    let loss = joint_loss(&mut g, bank, &leaves, feats, windows)?;
    Ok(g.value(loss).item())
}

/// Joint loss of the bank and its gradient for every classifier parameter.
pub fn classifier_loss_grad(bank: &ExitBank, feats: &ExitFeatures, windows: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let _g = counter::enter(Scope::Uncharged);
    let mut g = Graph::new();
    let leaves = bank.leaves(&mut g);
    let loss = joint_loss(&mut g, bank, &leaves, feats, windows)?;
    Ok((g.value(loss).item(), grad_of(&g, loss, &leaves)?))
}

/// Trains every classifier of `bank` jointly on precomputed features.
/// The backbone is not involved, so it cannot change. Returns the loss trace.
pub fn train_classifiers(bank: &mut ExitBank, feats: &ExitFeatures, train_windows: &[usize], cfg: &OracleConfig) -> Result<Vec<f64>> {
    if bank.classifiers.len() != feats.labels.len() {
        return Err(Error::Config("features and exit bank disagree on placements".into()));
    }
    if train_windows.is_empty() || cfg.batch == 0 {
        return Err(Error::Config("classifier training needs windows and a batch size".into()));
    }
    let _g = counter::enter(Scope::Uncharged);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| train_windows[rng.gen_range(0..train_windows.len())])
            .collect();
        let (value, mut grads) = classifier_loss_grad(bank, feats, &batch)?;
        check_loss(step, value)?;
        clip_global_norm(&mut grads, 1.0);
        opt.step(bank.params_mut(), &grads);
        trace.push(value);
    }
    Ok(trace)
}

/// Feature extraction plus joint training; the first tenth of the windows is
/// held out. Returns the loss trace and held-out loss before and after.
pub fn distill_exits(
    backbone: &Backbone,
    bank: &mut ExitBank,
    corpus: &[usize],
    cfg: &OracleConfig,
) -> Result<DistillReport> {
    let feats = extract_features(backbone, bank.placement.blocks(), corpus, cfg)?;
    let n = feats.windows();
    let held = (n / 10).max(1).min(n.saturating_sub(1));
    let held_out: Vec<usize> = (0..held).collect();
    let train: Vec<usize> = (held..n).collect();
    let before = classifier_loss(bank, &feats, &held_out)?;
    let trace = train_classifiers(bank, &feats, &train, cfg)?;
    let after = classifier_loss(bank, &feats, &held_out)?;
    Ok(DistillReport {
        trace,
        held_out_before: before,
        held_out_after: after,
        positive_rate: feats.positive_rate(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    pub trace: Vec<f64>,
    pub held_out_before: f64,
    pub held_out_after: f64,
    pub positive_rate: Vec<f64>,
}
