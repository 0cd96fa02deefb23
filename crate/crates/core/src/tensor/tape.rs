//! Computation tape for reverse-mode differentiation.
//!
//! Ops push backward closures while a tape is active on the current thread.
//! `backward` replays them once, newest first — reverse chronological order is
//! reverse topological order for a define-by-run graph.

use super::Tensor;
use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

struct TapeState {
    entries: RefCell<Vec<Box<dyn Fn()>>>,
    recorded_ids: RefCell<HashSet<u64>>,
    consumed: Cell<bool>,
}

thread_local! {
    static CURRENT: RefCell<Option<Rc<TapeState>>> = const { RefCell::new(None) };
    static SUSPENDED: Cell<usize> = const { Cell::new(0) };
}

/// Ordered record of differentiable operations for one forward pass.
pub struct Tape {
    state: Rc<TapeState>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            state: Rc::new(TapeState {
                entries: RefCell::new(Vec::new()),
                recorded_ids: RefCell::new(HashSet::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Run `f` with this tape active on the current thread.
    pub fn record<R>(&self, f: impl FnOnce() -> R) -> R {
        CURRENT.with(|cur| {
            let prev = cur.borrow_mut().replace(Rc::clone(&self.state));
            let guard = RestoreGuard { prev: RefCell::new(Some(prev)) };
            let out = f();
            drop(guard);
            out
        })
    }

    pub fn num_ops(&self) -> usize {
        self.state.entries.borrow().len()
    }

    /// Seed `loss` with gradient 1 and replay every recorded operation once,
    /// in reverse topological order. A second call without a fresh tape is an
    /// error, as is a non-scalar loss or one this tape never saw.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if self.state.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        if !self.state.recorded_ids.borrow().contains(&loss.id()) {
            return Err(Error::DetachedGraph);
        }
        self.state.consumed.set(true);
        super::accumulate_grad(&loss.inner, &[1.0]);
        let entries = self.state.entries.borrow();
        for entry in entries.iter().rev() {
            entry();
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

struct RestoreGuard {
    prev: RefCell<Option<Option<Rc<TapeState>>>>,
}

impl Drop for RestoreGuard {
    fn drop(&mut self) {
        if let Some(prev) = self.prev.borrow_mut().take() {
            CURRENT.with(|cur| *cur.borrow_mut() = prev);
        }
    }
}

/// True when ops on this thread should record backward closures.
pub fn is_recording() -> bool {
    SUSPENDED.with(|s| s.get() == 0) && CURRENT.with(|cur| cur.borrow().is_some())
}

/// Run `f` with recording suspended; used for inference interleaved with a
/// training step (prompt resampling, teacher forwards).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    SUSPENDED.with(|s| s.set(s.get() + 1));
    let guard = NoGradGuard;
    let out = f();
    drop(guard);
    out
}

struct NoGradGuard;

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        SUSPENDED.with(|s| s.set(s.get() - 1));
    }
}

/// Push a backward closure for `out`. No-op without an active tape.
pub(crate) fn record_entry(out: &Tensor, backward: impl Fn() + 'static) {
    if !is_recording() {
        return;
    }
    CURRENT.with(|cur| {
        if let Some(state) = cur.borrow().as_ref() {
            state.entries.borrow_mut().push(Box::new(backward));
            state.recorded_ids.borrow_mut().insert(out.id());
        }
    });
}
