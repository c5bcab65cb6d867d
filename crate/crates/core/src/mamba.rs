//! Mamba-style selective state-space backbone.
//!
//! Block: `norm → (u, z, B, C) projections → causal conv + SiLU → selective
//! SSM → gate with SiLU(z) → output projection → residual`. The recurrence
//! uses a diagonal `A = −exp(a_log)`, zero-order-hold decay `exp(Δ·A)` and
//! drive `Δ·B·u`, with `Δ = softplus(w_dt ∘ u + b_dt)` per channel.
//!
//! Training runs the scan over whole sequences through the autodiff graph;
//! inference advances an [`SSMState`] one token at a time. Both call the same
//! per-token kernels.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numkernel::ops::{gemm, rms_norm_row, silu_scalar, softplus};
use crate::numkernel::seq::{conv_tap, ssm_advance, ssm_advance_state};
use crate::numkernel::{Graph, ScanInputs, SeqLayout, SsmDims, Tensor, Var};
use crate::params::{count, ParamSet, VarCursor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub n_groups: usize,
    pub vocab_size: usize,
}

impl MambaConfig {
    pub fn new(
        n_blocks: usize,
        d_model: usize,
        d_state: usize,
        d_conv: usize,
        n_groups: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        let cfg = Self {
            n_blocks,
            d_model,
            d_inner: 2 * d_model,
            d_state,
            d_conv,
            n_groups,
            vocab_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("n_groups", self.n_groups),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("mamba {name} must be at least 1")));
        }
        if self.d_inner != 2 * self.d_model {
            return Err(Error::Config(format!(
                "d_inner must be 2·d_model = {}, got {}",
                2 * self.d_model,
                self.d_inner
            )));
        }
        if self.d_inner % self.n_groups != 0 {
            return Err(Error::Config(format!(
                "d_inner {} is not divisible by n_groups {}",
                self.d_inner, self.n_groups
            )));
        }
        Ok(())
    }

    /// Number of scalars held by a model of this shape.
    pub fn param_count(&self) -> u128 {
        let block = self.block_dims().param_count();
        count(&[&[2, self.vocab_size, self.d_model], &[self.d_model]]).saturating_add(block.saturating_mul(self.n_blocks as u128))
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            d_inner: self.d_inner,
            d_state: self.d_state,
            d_conv: self.d_conv,
            n_groups: self.n_groups,
            d_out: self.d_model,
        }
    }
}

/// Shape of one Mamba block; `d_out` is `d_model` inside a backbone and 2
/// when the block serves as an exit classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub n_groups: usize,
    pub d_out: usize,
}

impl BlockDims {
    pub fn ssm(&self) -> SsmDims {
        SsmDims {
            channels: self.d_inner,
            state: self.d_state,
            groups: self.n_groups,
        }
    }

    fn bc_width(&self) -> usize {
        self.n_groups * self.d_state
    }

    /// Number of scalars in one block of these dimensions.
    pub fn param_count(&self) -> u128 {
        let (d, e, n, k, g) = (self.d_model, self.d_inner, self.d_state, self.d_conv, self.n_groups);
        count(&[&[d], &[2, d, e], &[2, d, g, n], &[e, k], &[4, e], &[e, n], &[e, self.d_out]])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams {
    pub norm: Tensor,
    pub w_u: Tensor,
    pub w_z: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub dt_w: Tensor,
    pub dt_b: Tensor,
    pub a_log: Tensor,
    pub d_skip: Tensor,
    pub w_out: Tensor,
}

impl MambaBlockParams {
    pub fn init<R: Rng + ?Sized>(dims: BlockDims, std: f64, out_std: f64, rng: &mut R) -> Self {
        let (d, e, n, k) = (dims.d_model, dims.d_inner, dims.d_state, dims.d_conv);
        // Δ at init spread log-uniformly over [1e-3, 1e-1]
        let log_dt = Uniform::new(0.001f64.ln(), 0.1f64.ln());
        let dt_b = (0..e)
            .map(|_| {
                let dt = log_dt.sample(rng).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let a_log = (0..e)
            .flat_map(|_| (1..=n).map(|i| (i as f64).ln()))
            .collect();
        Self {
            norm: Tensor::full(&[d], 1.0),
            w_u: Tensor::randn(&[d, e], std, rng),
            w_z: Tensor::randn(&[d, e], std, rng),
            w_b: Tensor::randn(&[d, dims.bc_width()], std, rng),
            w_c: Tensor::randn(&[d, dims.bc_width()], std, rng),
            conv_w: Tensor::randn(&[e, k], 1.0 / (k as f64).sqrt(), rng),
            conv_b: Tensor::zeros(&[e]),
            dt_w: Tensor::randn(&[e], 0.1, rng),
            dt_b: Tensor::new(vec![e], dt_b).expect("sized"),
            a_log: Tensor::new(vec![e, n], a_log).expect("sized"),
            d_skip: Tensor::full(&[e], 1.0),
            w_out: Tensor::randn(&[e, dims.d_out], out_std, rng),
        }
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.w_u.rows(),
            d_inner: self.w_u.cols(),
            d_state: self.a_log.cols(),
            d_conv: self.conv_w.cols(),
            n_groups: self.w_b.cols() / self.a_log.cols(),
            d_out: self.w_out.cols(),
        }
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("norm", &self.norm),
            ("w_u", &self.w_u),
            ("w_z", &self.w_z),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("conv_w", &self.conv_w),
            ("conv_b", &self.conv_b),
            ("dt_w", &self.dt_w),
            ("dt_b", &self.dt_b),
            ("a_log", &self.a_log),
            ("d_skip", &self.d_skip),
            ("w_out", &self.w_out),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.norm,
            &mut self.w_u,
            &mut self.w_z,
            &mut self.w_b,
            &mut self.w_c,
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.dt_w,
            &mut self.dt_b,
            &mut self.a_log,
            &mut self.d_skip,
            &mut self.w_out,
        ]
    }

    /// Diagonal transition `A = −exp(a_log)`, channels × state.
    pub fn transition(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|&l| -l.exp()).collect()
    }

    /// Parallel (whole-sequence) form of the SSM from zero state.
    ///
    /// `u`, `delta`: T×d_inner; `b`, `c`: T×(n_groups·d_state).
    pub fn ssm_scan(&self, u: &Tensor, b: &Tensor, c: &Tensor, delta: &Tensor) -> Result<Tensor> {
        let dims = self.dims();
        check_delta(delta.data())?;
        let mut g = Graph::new();
        let inputs = ScanInputs {
            u: g.leaf(u.clone()),
            delta: g.leaf(delta.clone()),
            a_log: g.leaf(self.a_log.clone()),
            b: g.leaf(b.clone()),
            c: g.leaf(c.clone()),
            d: g.leaf(self.d_skip.clone()),
        };
        let y = g.selective_scan(inputs, SeqLayout::single(u.rows()), dims.n_groups)?;
        Ok(g.value(y).clone())
    }

    /// Recurrent form: one update of `state` (d_inner × d_state) in place.
    pub fn ssm_step(
        &self,
        u: &[f64],
        b: &[f64],
        c: &[f64],
        delta: &[f64],
        state: &mut [f64],
    ) -> Result<Vec<f64>> {
        let dims = self.dims();
        check_delta(delta)?;
        if u.len() != dims.d_inner
            || delta.len() != dims.d_inner
            || b.len() != dims.bc_width()
            || c.len() != dims.bc_width()
            || state.len() != dims.d_inner * dims.d_state
        {
            return Err(Error::Dimension {
                op: "ssm_step",
                lhs: vec![u.len(), b.len(), c.len(), delta.len(), state.len()],
                rhs: vec![
                    dims.d_inner,
                    dims.bc_width(),
                    dims.bc_width(),
                    dims.d_inner,
                    dims.d_inner * dims.d_state,
                ],
            });
        }
        let mut y = vec![0.0; dims.d_inner];
        ssm_advance(
            dims.ssm(),
            &self.transition(),
            u,
            delta,
            b,
            c,
            self.d_skip.data(),
            state,
            &mut y,
        );
        Ok(y)
    }

    /// Shared front half of a step: projections, conv window update, conv
    /// activation and Δ. Returns `(conv activation, Δ, B)`.
    fn advance_inputs(&self, n: &[f64], state: &mut SSMState) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dims = self.dims();
        let u = project(n, &self.w_u);
        let b = project(n, &self.w_b);
        state.push_conv(&u);
        let mut xc = vec![0.0; dims.d_inner];
        for (ch, x) in xc.iter_mut().enumerate() {
            let v = conv_tap(self.conv_w.row(ch), self.conv_b.data()[ch], |k| {
                state.window_row(k)[ch]
            });
            *x = silu_scalar(v);
        }
        let delta = xc
            .iter()
            .zip(self.dt_w.data())
            .zip(self.dt_b.data())
            .map(|((x, w), b)| softplus(x * w + b))
            .collect();
        (xc, delta, b)
    }

    /// Recurrent block forward for one token. With `residual` false the block
    /// returns the bare output projection.
    pub fn step(&self, h: &[f64], state: &mut SSMState, residual: bool) -> Vec<f64> {
        let dims = self.dims();
        let mut n = vec![0.0; h.len()];
        rms_norm_row(h, self.norm.data(), &mut n);
        let z = project(&n, &self.w_z);
        let (xc, delta, b) = self.advance_inputs(&n, state);
        let c = project(&n, &self.w_c);
        let mut y = vec![0.0; dims.d_inner];
        ssm_advance(
            dims.ssm(),
            &self.transition(),
            &xc,
            &delta,
            &b,
            &c,
            self.d_skip.data(),
            &mut state.ssm,
            &mut y,
        );
        state.steps += 1;
        let gated: Vec<f64> = y.iter().zip(&z).map(|(y, z)| y * silu_scalar(*z)).collect();
        let out = project(&gated, &self.w_out);
        if residual {
            h.iter().zip(&out).map(|(a, b)| a + b).collect()
        } else {
            out
        }
    }

    /// Advances only the conv window and recurrent state for a skipped
    /// block: the `u` and `B` projections run, `z`, `C` and the output
    /// projection do not.
    pub fn partial_step(&self, h: &[f64], state: &mut SSMState) {
        let dims = self.dims();
        let mut n = vec![0.0; h.len()];
        rms_norm_row(h, self.norm.data(), &mut n);
        let (xc, delta, b) = self.advance_inputs(&n, state);
        ssm_advance_state(dims.ssm(), &self.transition(), &xc, &delta, &b, &mut state.ssm);
        state.steps += 1;
    }

    /// Scan-mode forward in the autodiff graph. Consumes this block's 12
    /// leaves from `cur`.
    pub(crate) fn forward_graph(
        g: &mut Graph,
        cur: &mut VarCursor<'_>,
        h: Var,
        layout: SeqLayout,
        n_groups: usize,
        residual: bool,
    ) -> Result<Var> {
        let (norm, w_u, w_z, w_b, w_c) = (cur.next(), cur.next(), cur.next(), cur.next(), cur.next());
        let (conv_w, conv_b, dt_w, dt_b) = (cur.next(), cur.next(), cur.next(), cur.next());
        let (a_log, d_skip, w_out) = (cur.next(), cur.next(), cur.next());
        let n = g.rms_norm(h, norm)?;
        let u = g.matmul(n, w_u)?;
        let z = g.matmul(n, w_z)?;
        let b = g.matmul(n, w_b)?;
        let c = g.matmul(n, w_c)?;
        let cv = g.causal_conv(u, conv_w, conv_b, layout)?;
        let xc = g.silu(cv);
        let dl = g.mul_cols(xc, dt_w)?;
        let dl = g.add_bias(dl, dt_b)?;
        let delta = g.softplus(dl);
        let y = g.selective_scan(
            ScanInputs {
                u: xc,
                delta,
                a_log,
                b,
                c,
                d: d_skip,
            },
            layout,
            n_groups,
        )?;
        let gz = g.silu(z);
        let gated = g.mul(y, gz)?;
        let out = g.matmul(gated, w_out)?;
        if residual {
            g.add(h, out)
        } else {
            Ok(out)
        }
    }
}

fn check_delta(delta: &[f64]) -> Result<()> {
    match delta.iter().find(|&&x| !(x > 0.0)) {
        Some(&bad) => Err(Error::Discretization(bad)),
        None => Ok(()),
    }
}

fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    gemm(x, w.data(), 1, x.len(), w.cols(), &mut out);
    out
}

/// Inference state of one Mamba block.
#[derive(Clone, Debug, PartialEq)]
pub struct SSMState {
    /// d_conv rows of d_inner; row `head` is the oldest input.
    conv: Vec<f64>,
    head: usize,
    d_inner: usize,
    d_conv: usize,
    /// d_inner × d_state recurrent state.
    ssm: Vec<f64>,
    steps: usize,
}

impl SSMState {
    pub fn new(dims: BlockDims) -> Self {
        Self {
            conv: vec![0.0; dims.d_conv * dims.d_inner],
            head: 0,
            d_inner: dims.d_inner,
            d_conv: dims.d_conv,
            ssm: vec![0.0; dims.d_inner * dims.d_state],
            steps: 0,
        }
    }

    fn push_conv(&mut self, u: &[f64]) {
        let e = self.d_inner;
        self.conv[self.head * e..(self.head + 1) * e].copy_from_slice(u);
        self.head = (self.head + 1) % self.d_conv;
    }

    /// Row `k` of the conv window, oldest first.
    pub fn window_row(&self, k: usize) -> &[f64] {
        let r = (self.head + k) % self.d_conv;
        &self.conv[r * self.d_inner..(r + 1) * self.d_inner]
    }

    /// The last `d_conv` inputs, oldest first.
    pub fn window(&self) -> Vec<Vec<f64>> {
        (0..self.d_conv).map(|k| self.window_row(k).to_vec()).collect()
    }

    pub fn ssm(&self) -> &[f64] {
        &self.ssm
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.conv.iter().chain(&self.ssm) {
            v.to_bits().hash(&mut h);
        }
        (self.head, self.steps).hash(&mut h);
        h.finish()
    }
}

/// Leaves `state` untouched: the skip policy for exited tokens.
pub fn mamba_state_skip(_state: &SSMState) {}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaModel {
    pub config: MambaConfig,
    pub embed: Tensor,
    pub blocks: Vec<MambaBlockParams>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl MambaModel {
    pub fn init<R: Rng + ?Sized>(config: MambaConfig, rng: &mut R) -> Self {
        let (d, v) = (config.d_model, config.vocab_size);
        let out_std = 0.02 / (2.0 * config.n_blocks as f64).sqrt();
        let embed = Tensor::randn(&[v, d], 0.02, rng);
        let blocks = (0..config.n_blocks)
            .map(|_| MambaBlockParams::init(config.block_dims(), 0.02, out_std, rng))
            .collect();
        let head = Tensor::randn(&[d, v], 0.02, rng);
        Self {
            embed,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            head,
            config,
        }
    }

    pub fn embed_token(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::Label {
                label: token,
                classes: self.config.vocab_size,
            });
        }
        Ok(self.embed.row(token).to_vec())
    }

    pub fn fresh_states(&self) -> Vec<SSMState> {
        (0..self.config.n_blocks)
            .map(|_| SSMState::new(self.config.block_dims()))
            .collect()
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        leaves: &[Var],
        ids: &[usize],
        layout: SeqLayout,
    ) -> Result<(Var, Vec<Var>)> {
        let mut cur = VarCursor::new(leaves);
        let embed = cur.next();
        let mut h = g.embedding(embed, ids)?;
        let mut outs = Vec::with_capacity(self.config.n_blocks);
        for _ in 0..self.config.n_blocks {
            h = MambaBlockParams::forward_graph(g, &mut cur, h, layout, self.config.n_groups, true)?;
            outs.push(h);
        }
        let final_norm = cur.next();
        let head = cur.next();
        let hn = g.rms_norm(h, final_norm)?;
        let logits = g.matmul(hn, head)?;
        Ok((logits, outs))
    }
}

impl ParamSet for MambaModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embed".to_string(), &self.embed)];
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
        let mut v = vec![&mut self.embed];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.head);
        v
    }
}
