use crate::numkernel::{fingerprint_all, Graph, Tensor, Var};

/// A fixed, ordered collection of named learnable tensors.
///
/// `named_params` and `params_mut` must yield tensors in the same order; the
/// graph binding, the optimizer and the checkpoint format all rely on it.
pub trait ParamSet {
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_all(self.named_params().into_iter().map(|(_, t)| t))
    }

    /// Copies every parameter into `graph` as a leaf, in order.
    fn leaves(&self, graph: &mut Graph) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| graph.leaf(t.clone()))
            .collect()
    }
}

/// Saturating sum of saturating products, for parameter counts computed
/// from untrusted dimensions.
pub(crate) fn count(terms: &[&[usize]]) -> u128 {
    terms.iter().fold(0u128, |acc, t| {
        let p = t.iter().fold(1u128, |a, &x| a.saturating_mul(x as u128));
        acc.saturating_add(p)
    })
}

/// Walks a slice of leaves in parameter order.
pub(crate) struct VarCursor<'a> {
    vars: std::slice::Iter<'a, Var>,
}

impl<'a> VarCursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Self { vars: vars.iter() }
    }

    pub(crate) fn next(&mut self) -> Var {
        *self.vars.next().expect("leaf list shorter than parameter list")
    }
}
