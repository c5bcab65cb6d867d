//! Per-token kernels for the causal convolution and the selective state-space
//! recurrence. The autodiff scan and the recurrent inference path both call
//! these, which keeps the two forms numerically identical.

/// Layout of a batch of equal-length sequences stacked row-wise:
/// row `b * seq + t` holds token `t` of sequence `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
}

impl SeqLayout {
    pub fn single(seq: usize) -> Self {
        Self { batch: 1, seq }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Dimensions of a diagonal selective SSM with grouped input-dependent B/C.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    pub channels: usize,
    pub state: usize,
    pub groups: usize,
}

impl SsmDims {
    #[inline]
    pub fn group_of(&self, channel: usize) -> usize {
        channel / (self.channels / self.groups)
    }
}

/// One causal depthwise convolution output.
///
/// `window(k)` returns the input `k` steps into the window of width `kw`,
/// oldest first; positions before the sequence start read as zero.
#[inline]
pub fn conv_tap(weights: &[f64], bias: f64, window: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w * window(k);
    }
    acc + bias
}

/// Advances the recurrent state by one token and writes the readout.
///
/// For every channel `c` (group `g`) and state index `n`:
/// `x[c,n] ← exp(Δ_c·A[c,n])·x[c,n] + Δ_c·B[g,n]·u_c` and
/// `y_c = Σ_n C[g,n]·x[c,n] + D_c·u_c`.
#[allow(clippy::too_many_arguments)]
pub fn ssm_advance(
    dims: SsmDims,
    a: &[f64],
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    d_skip: &[f64],
    state: &mut [f64],
    y: &mut [f64],
) {
    let n_state = dims.state;
    for ch in 0..dims.channels {
        let g = dims.group_of(ch);
        let bg = &b[g * n_state..(g + 1) * n_state];
        let cg = &c[g * n_state..(g + 1) * n_state];
        let ac = &a[ch * n_state..(ch + 1) * n_state];
        let xs = &mut state[ch * n_state..(ch + 1) * n_state];
        let (dt, uc) = (delta[ch], u[ch]);
        let mut out = 0.0;
        for n in 0..n_state {
            xs[n] = (dt * ac[n]).exp() * xs[n] + dt * bg[n] * uc;
            out += cg[n] * xs[n];
        }
        y[ch] = out + d_skip[ch] * uc;
    }
}

/// Advances only the state (no readout).
pub fn ssm_advance_state(
    dims: SsmDims,
    a: &[f64],
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    state: &mut [f64],
) {
    let n_state = dims.state;
    for ch in 0..dims.channels {
        let g = dims.group_of(ch);
        let bg = &b[g * n_state..(g + 1) * n_state];
        let ac = &a[ch * n_state..(ch + 1) * n_state];
        let xs = &mut state[ch * n_state..(ch + 1) * n_state];
        let (dt, uc) = (delta[ch], u[ch]);
        for n in 0..n_state {
            xs[n] = (dt * ac[n]).exp() * xs[n] + dt * bg[n] * uc;
        }
    }
}
