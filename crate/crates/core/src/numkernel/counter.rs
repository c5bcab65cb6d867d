//! Instrumented operation counter.
//!
//! Every multiply-accumulate performed by the kernels in this crate is tallied
//! (as two operations) into a thread-local counter under the currently active
//! [`Scope`]. The engine's analytic ledger is checked against these tallies.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    /// Work excluded from the reduction factor: embedding, LM head,
    /// negligible classifiers, training.
    Uncharged,
    Prefill,
    Backbone,
    Classifier,
    Recompute,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub uncharged: u64,
    pub prefill: u64,
    pub backbone: u64,
    pub classifier: u64,
    pub recompute: u64,
}

impl OpCounts {
    fn slot(&mut self, scope: Scope) -> &mut u64 {
        match scope {
            Scope::Uncharged => &mut self.uncharged,
            Scope::Prefill => &mut self.prefill,
            Scope::Backbone => &mut self.backbone,
            Scope::Classifier => &mut self.classifier,
            Scope::Recompute => &mut self.recompute,
        }
    }

    pub fn since(&self, earlier: &OpCounts) -> OpCounts {
        OpCounts {
            uncharged: self.uncharged - earlier.uncharged,
            prefill: self.prefill - earlier.prefill,
            backbone: self.backbone - earlier.backbone,
            classifier: self.classifier - earlier.classifier,
            recompute: self.recompute - earlier.recompute,
        }
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = Cell::new(OpCounts::default());
    static SCOPE: Cell<Scope> = const { Cell::new(Scope::Uncharged) };
}

/// Record `macs` multiply-accumulates in the active scope.
#[inline]
pub fn tally_macs(macs: u64) {
    let scope = SCOPE.with(|s| s.get());
    COUNTS.with(|c| {
        let mut counts = c.get();
        *counts.slot(scope) += 2 * macs;
        c.set(counts);
    });
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub fn current_scope() -> Scope {
    SCOPE.with(|s| s.get())
}

/// Switches the active scope until the guard is dropped.
#[must_use]
pub struct ScopeGuard {
    previous: Scope,
}

pub fn enter(scope: Scope) -> ScopeGuard {
    let previous = SCOPE.with(|s| s.replace(scope));
    ScopeGuard { previous }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        SCOPE.with(|s| s.set(self.previous));
    }
}
