//! Decoder-only Transformer with per-block KV caches.
//!
//! Blocks are pre-norm: `h += Wo·MHA(norm₁(h))`, then
//! `h += W₂·silu(W₁·norm₂(h))` with a 4× wide feed-forward layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::ops::{self, attend_row, gemm, rms_norm_row};
use crate::numkernel::{Graph, SeqLayout, Tensor, Var};
use crate::params::{count, ParamSet, VarCursor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    pub fn new(
        n_blocks: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        let cfg = Self {
            n_blocks,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            vocab_size,
            max_seq_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of scalars held by a model of this shape.
    pub fn param_count(&self) -> u128 {
        let (d, f, v, s, n) = (self.d_model, self.d_ff, self.vocab_size, self.max_seq_len, self.n_blocks);
        count(&[&[2, v, d], &[s, d], &[n, 2, d], &[n, 4, d, d], &[n, 2, d, f], &[d]])
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("transformer {name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff != 4 * self.d_model {
            return Err(Error::Config(format!(
                "d_ff must be 4·d_model = {}, got {}",
                4 * self.d_model,
                self.d_ff
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams {
    pub norm1: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm2: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl TransformerBlockParams {
    pub fn init<R: Rng + ?Sized>(cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let std = 0.02;
        let out_std = 0.02 / (2.0 * cfg.n_blocks as f64).sqrt();
        Self {
            norm1: Tensor::full(&[d], 1.0),
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            wo: Tensor::randn(&[d, d], out_std, rng),
            norm2: Tensor::full(&[d], 1.0),
            w1: Tensor::randn(&[d, cfg.d_ff], std, rng),
            w2: Tensor::randn(&[cfg.d_ff, d], out_std, rng),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("norm1", &self.norm1),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("norm2", &self.norm2),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.norm1,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.norm2,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

/// Keys and values of one block, one row per cached position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl BlockCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn key_row(&self, i: usize, d: usize) -> &[f64] {
        &self.keys[i * d..(i + 1) * d]
    }

    pub fn value_row(&self, i: usize, d: usize) -> &[f64] {
        &self.values[i * d..(i + 1) * d]
    }

    fn push(&mut self, k: &[f64], v: &[f64]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        self.len += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    blocks: Vec<BlockCache>,
    capacity: usize,
    d_model: usize,
}

impl KVCache {
    pub fn new(cfg: &TransformerConfig) -> Self {
        Self {
            blocks: vec![BlockCache::default(); cfg.n_blocks],
            capacity: cfg.max_seq_len,
            d_model: cfg.d_model,
        }
    }

    pub fn block(&self, b: usize) -> &BlockCache {
        &self.blocks[b]
    }

    pub fn fill_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|c| c.len).collect()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for bc in &self.blocks {
            bc.len.hash(&mut h);
            for v in bc.keys.iter().chain(&bc.values) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn ensure_room(&self, b: usize, extra: usize) -> Result<()> {
        if self.blocks[b].len + extra > self.capacity {
            return Err(Error::Capacity(format!(
                "block {b} cache holds {} of {} positions, cannot add {extra}",
                self.blocks[b].len, self.capacity
            )));
        }
        Ok(())
    }
}

fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    gemm(x, w.data(), 1, x.len(), w.cols(), &mut out);
    out
}

/// Pre-norm attention input, query, key and value rows for one token.
fn qkv(p: &TransformerBlockParams, h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut n1 = vec![0.0; h.len()];
    rms_norm_row(h, p.norm1.data(), &mut n1);
    (project(&n1, &p.wq), project(&n1, &p.wk), project(&n1, &p.wv))
}

/// Everything after attention: output projection, residual, feed-forward.
fn finish_block(p: &TransformerBlockParams, h: &[f64], attn: &[f64]) -> Vec<f64> {
    let o = project(attn, &p.wo);
    let h1: Vec<f64> = h.iter().zip(&o).map(|(a, b)| a + b).collect();
    let mut n2 = vec![0.0; h1.len()];
    rms_norm_row(&h1, p.norm2.data(), &mut n2);
    let mut f = project(&n2, &p.w1);
    f.iter_mut().for_each(|v| *v = ops::silu_scalar(*v));
    let f2 = project(&f, &p.w2);
    h1.iter().zip(&f2).map(|(a, b)| a + b).collect()
}

/// Full causal forward of one block over `h` (T×d), filling an empty cache.
pub fn block_prefill(
    p: &TransformerBlockParams,
    h: &Tensor,
    cache: &mut KVCache,
    block: usize,
    n_heads: usize,
) -> Result<Tensor> {
    let (t_len, d) = (h.rows(), h.cols());
    if !cache.blocks[block].is_empty() {
        return Err(Error::Policy(format!(
            "prefill of block {block} requires an empty cache"
        )));
    }
    cache.ensure_room(block, t_len)?;
    let n1 = ops::rms_norm(h, &p.norm1)?;
    let q = ops::matmul(&n1, &p.wq)?;
    let k = ops::matmul(&n1, &p.wk)?;
    let v = ops::matmul(&n1, &p.wv)?;
    let bc = &mut cache.blocks[block];
    for i in 0..t_len {
        bc.push(k.row(i), v.row(i));
    }
    let mut out = Tensor::zeros(&[t_len, d]);
    let mut attn = vec![0.0; d];
    for i in 0..t_len {
        attend_row(q.row(i), &bc.keys, &bc.values, i + 1, n_heads, &mut attn, None);
        out.row_mut(i)
            .copy_from_slice(&finish_block(p, h.row(i), &attn));
    }
    Ok(out)
}

/// One-token forward of one block: attends over the cache plus itself and
/// appends its own key/value.
pub fn block_decode_step(
    p: &TransformerBlockParams,
    h: &[f64],
    cache: &mut KVCache,
    block: usize,
    n_heads: usize,
) -> Result<Vec<f64>> {
    cache.ensure_room(block, 1)?;
    let (q, k, v) = qkv(p, h);
    let bc = &mut cache.blocks[block];
    bc.push(&k, &v);
    let mut attn = vec![0.0; h.len()];
    attend_row(&q, &bc.keys, &bc.values, bc.len, n_heads, &mut attn, None);
    Ok(finish_block(p, h, &attn))
}

/// Appends the key/value of `h` to a skipped block's cache without advancing
/// the hidden state. Only the two projections run.
pub fn kv_partial_forward(
    p: &TransformerBlockParams,
    h: &[f64],
    cache: &mut KVCache,
    block: usize,
) -> Result<()> {
    cache.ensure_room(block, 1)?;
    let mut n1 = vec![0.0; h.len()];
    rms_norm_row(h, p.norm1.data(), &mut n1);
    let k = project(&n1, &p.wk);
    let v = project(&n1, &p.wv);
    cache.blocks[block].push(&k, &v);
    Ok(())
}

/// Duplicates the current token's key/value row of `source` into every block
/// of `targets`. Each target must be exactly one position behind the source.
pub fn kv_copy_forward(
    cache: &mut KVCache,
    source: usize,
    targets: std::ops::Range<usize>,
) -> Result<()> {
    let src_len = cache.blocks[source].len;
    if src_len == 0 {
        return Err(Error::Policy(format!(
            "copy source block {source} has no cached entry for the current token"
        )));
    }
    let d = cache.d_model;
    let k = cache.blocks[source].key_row(src_len - 1, d).to_vec();
    let v = cache.blocks[source].value_row(src_len - 1, d).to_vec();
    for b in targets {
        if cache.blocks[b].len + 1 != src_len {
            return Err(Error::Policy(format!(
                "block {b} holds {} entries but copy source {source} holds {src_len}",
                cache.blocks[b].len
            )));
        }
        cache.ensure_room(b, 1)?;
        cache.blocks[b].push(&k, &v);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<TransformerBlockParams>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl TransformerModel {
    pub fn init<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Self {
        let (d, v) = (config.d_model, config.vocab_size);
        let embed = Tensor::randn(&[v, d], 0.02, rng);
        let pos = Tensor::randn(&[config.max_seq_len, d], 0.02, rng);
        let blocks = (0..config.n_blocks)
            .map(|_| TransformerBlockParams::init(&config, rng))
            .collect();
        let head = Tensor::randn(&[d, v], 0.02, rng);
        Self {
            embed,
            pos,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            head,
            config,
        }
    }

    /// Token embedding plus learned absolute position embedding.
    pub fn embed_token(&self, token: usize, position: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::Label {
                label: token,
                classes: self.config.vocab_size,
            });
        }
        if position >= self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "position {position} exceeds context of {}",
                self.config.max_seq_len
            )));
        }
        Ok(self
            .embed
            .row(token)
            .iter()
            .zip(self.pos.row(position))
            .map(|(a, b)| a + b)
            .collect())
    }

    pub fn embed_sequence(&self, tokens: &[usize]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (p, &t) in tokens.iter().enumerate() {
            data.extend(self.embed_token(t, p)?);
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    pub fn decode_block(&self, block: usize, h: &[f64], cache: &mut KVCache) -> Result<Vec<f64>> {
        block_decode_step(&self.blocks[block], h, cache, block, self.config.n_heads)
    }

    pub fn prefill_block(&self, block: usize, h: &Tensor, cache: &mut KVCache) -> Result<Tensor> {
        block_prefill(&self.blocks[block], h, cache, block, self.config.n_heads)
    }

    /// Teacher-forced training forward; returns the logits and the output of
    /// every block (pre final norm).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        leaves: &[Var],
        ids: &[usize],
        layout: SeqLayout,
    ) -> Result<(Var, Vec<Var>)> {
        if layout.seq > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence of {} exceeds context of {}",
                layout.seq, self.config.max_seq_len
            )));
        }
        let mut cur = VarCursor::new(leaves);
        let embed = cur.next();
        let pos = cur.next();
        let positions: Vec<usize> = (0..layout.rows()).map(|r| r % layout.seq).collect();
        let x = g.embedding(embed, ids)?;
        let p = g.embedding(pos, &positions)?;
        let mut h = g.add(x, p)?;
        let mut outs = Vec::with_capacity(self.config.n_blocks);
        for _ in 0..self.config.n_blocks {
            let (norm1, wq, wk, wv, wo) = (cur.next(), cur.next(), cur.next(), cur.next(), cur.next());
            let (norm2, w1, w2) = (cur.next(), cur.next(), cur.next());
            let n1 = g.rms_norm(h, norm1)?;
            let q = g.matmul(n1, wq)?;
            let k = g.matmul(n1, wk)?;
            let v = g.matmul(n1, wv)?;
            let a = g.causal_attention(q, k, v, layout, self.config.n_heads)?;
            let o = g.matmul(a, wo)?;
            h = g.add(h, o)?;
            let n2 = g.rms_norm(h, norm2)?;
            let f = g.matmul(n2, w1)?;
            let f = g.silu(f);
            let f2 = g.matmul(f, w2)?;
            h = g.add(h, f2)?;
            outs.push(h);
        }
        let final_norm = cur.next();
        let head = cur.next();
        let hn = g.rms_norm(h, final_norm)?;
        let logits = g.matmul(hn, head)?;
        Ok((logits, outs))
    }
}

impl ParamSet for TransformerModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                v.push((format!("blocks.{i}.{name}"), t));
            }
        }
        v.push(("final_norm".to_string(), &self.final_norm));
        v.push(("head".to_string(), &self.head));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.head);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::counter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, n_blocks: usize) -> TransformerModel {
        let cfg = TransformerConfig::new(n_blocks, 8, 2, 11, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = TransformerModel::init(cfg, &mut rng);
        // larger weights so attention patterns are far from uniform
        for t in m.params_mut() {
            if t.shape().len() == 2 {
                t.data_mut().iter_mut().for_each(|v| *v *= 15.0);
            }
        }
        m
    }

    #[test]
    fn config_rejects_bad_heads() {
        assert!(TransformerConfig::new(2, 10, 3, 5, 8).is_err());
        assert!(TransformerConfig::new(0, 8, 2, 5, 8).is_err());
    }

    #[test]
    fn single_token_prefill_equals_decode_bitwise() {
        let m = model(1, 1);
        let h = m.embed_sequence(&[3]).unwrap();
        let mut c1 = KVCache::new(&m.config);
        let mut c2 = KVCache::new(&m.config);
        let a = m.prefill_block(0, &h, &mut c1).unwrap();
        let b = m.decode_block(0, h.row(0), &mut c2).unwrap();
        assert_eq!(a.row(0), b.as_slice());
        assert_eq!(c1, c2);
    }

    #[test]
    fn decode_matches_prefill_per_position() {
        let m = model(2, 1);
        let toks = [1, 4, 2, 9, 9, 0, 5];
        let h = m.embed_sequence(&toks).unwrap();
        let mut c1 = KVCache::new(&m.config);
        let full = m.prefill_block(0, &h, &mut c1).unwrap();
        let mut c2 = KVCache::new(&m.config);
        for i in 0..toks.len() {
            let out = m.decode_block(0, h.row(i), &mut c2).unwrap();
            assert_eq!(c2.block(0).len(), i + 1);
            for (a, b) in out.iter().zip(full.row(i)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn causal_mask_ignores_future_tokens() {
        let m = model(3, 2);
        let run = |toks: &[usize]| {
            let mut cache = KVCache::new(&m.config);
            let mut h = m.embed_sequence(toks).unwrap();
            for b in 0..2 {
                h = m.prefill_block(b, &h, &mut cache).unwrap();
            }
            h
        };
        let a = run(&[1, 2, 3, 4, 5]);
        let b = run(&[1, 2, 3, 10, 0]);
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let mut m = model(4, 1);
        for t in m.blocks[0].tensors_mut() {
            t.fill(0.0);
        }
        let h = m.embed_sequence(&[1, 2, 3]).unwrap();
        let mut cache = KVCache::new(&m.config);
        let out = m.prefill_block(0, &h, &mut cache).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn capacity_errors() {
        let m = model(5, 1);
        let h = m.embed_sequence(&[1; 16]).unwrap();
        let mut cache = KVCache::new(&m.config);
        m.prefill_block(0, &h, &mut cache).unwrap();
        assert!(matches!(
            m.decode_block(0, h.row(0), &mut cache),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            kv_partial_forward(&m.blocks[0], h.row(0), &mut cache, 0),
            Err(Error::Capacity(_))
        ));
        assert!(m.embed_token(1, 16).is_err());
    }

    #[test]
    fn partial_forward_appends_normed_key_projection() {
        let m = model(6, 2);
        let mut cache = KVCache::new(&m.config);
        let h = m.embed_token(3, 0).unwrap();
        let before = m.blocks[1].clone();
        let h0 = m.decode_block(0, &h, &mut cache).unwrap();
        kv_partial_forward(&m.blocks[1], &h0, &mut cache, 1).unwrap();
        assert_eq!(cache.fill_counts(), vec![1, 1]);
        let d = m.config.d_model;
        let mut n = vec![0.0; d];
        rms_norm_row(&h0, m.blocks[1].norm1.data(), &mut n);
        for j in 0..d {
            let expect: f64 = (0..d).map(|i| n[i] * m.blocks[1].wk.data()[i * d + j]).sum();
            assert!((cache.block(1).key_row(0, d)[j] - expect).abs() < 1e-12);
        }
        assert_eq!(before, m.blocks[1]);
    }

    #[test]
    fn partial_forward_counts_two_projections() {
        let m = model(7, 1);
        let mut cache = KVCache::new(&m.config);
        let h = m.embed_token(1, 0).unwrap();
        let before = counter::snapshot();
        kv_partial_forward(&m.blocks[0], &h, &mut cache, 0).unwrap();
        let d = m.config.d_model as u64;
        assert_eq!(counter::snapshot().since(&before).uncharged, 4 * d * d);
    }

    #[test]
    fn copy_forward_duplicates_source_row() {
        let m = model(8, 4);
        let mut cache = KVCache::new(&m.config);
        let h = m.embed_token(2, 0).unwrap();
        let h1 = m.decode_block(0, &h, &mut cache).unwrap();
        m.decode_block(1, &h1, &mut cache).unwrap();
        kv_copy_forward(&mut cache, 1, 2..4).unwrap();
        assert_eq!(cache.fill_counts(), vec![1; 4]);
        let d = m.config.d_model;
        for b in 2..4 {
            assert_eq!(cache.block(b).key_row(0, d), cache.block(1).key_row(0, d));
            assert_eq!(cache.block(b).value_row(0, d), cache.block(1).value_row(0, d));
        }
        // source has nothing new for the next token
        assert!(matches!(
            kv_copy_forward(&mut cache, 1, 2..4),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn graph_forward_matches_inference_path() {
        let m = model(9, 2);
        let toks = [3, 1, 4, 1, 5, 9];
        let mut g = Graph::new();
        let leaves = m.leaves(&mut g);
        let (_, outs) = m
            .forward_graph(&mut g, &leaves, &toks, SeqLayout::single(toks.len()))
            .unwrap();
        let mut cache = KVCache::new(&m.config);
        let mut h = m.embed_sequence(&toks).unwrap();
        for b in 0..2 {
            h = m.prefill_block(b, &h, &mut cache).unwrap();
            assert_eq!(g.value(outs[b]), &h);
        }
    }
}
