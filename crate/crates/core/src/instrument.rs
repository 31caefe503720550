//! Per-thread operation counters used to verify the cost model
//! (backward/forward sensitivity solves and prior factorizations).
//!
//! Counters are thread-local. Work fanned out to a thread pool is measured
//! with [`measure`] on the worker and folded back with [`absorb`] on the
//! calling thread, so totals do not depend on scheduling.

use std::cell::Cell;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    /// Adjoint (transposed) solves with dL/du.
    pub backward_solves: usize,
    /// Forward sensitivity solves, one per column of du/dy.
    pub forward_sensitivity_solves: usize,
    /// Full forward model solves.
    pub forward_solves: usize,
    /// Cholesky factorizations of the GP prior covariance.
    pub prior_factorizations: usize,
}

impl Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            backward_solves: self.backward_solves + o.backward_solves,
            forward_sensitivity_solves: self.forward_sensitivity_solves
                + o.forward_sensitivity_solves,
            forward_solves: self.forward_solves + o.forward_solves,
            prior_factorizations: self.prior_factorizations + o.prior_factorizations,
        }
    }
}

impl Sub for Counts {
    type Output = Counts;
    fn sub(self, o: Counts) -> Counts {
        Counts {
            backward_solves: self.backward_solves - o.backward_solves,
            forward_sensitivity_solves: self.forward_sensitivity_solves
                - o.forward_sensitivity_solves,
            forward_solves: self.forward_solves - o.forward_solves,
            prior_factorizations: self.prior_factorizations - o.prior_factorizations,
        }
    }
}

thread_local! {
    static COUNTS: Cell<Counts> = const { Cell::new(Counts {
        backward_solves: 0,
        forward_sensitivity_solves: 0,
        forward_solves: 0,
        prior_factorizations: 0,
    }) };
}

fn bump(f: impl FnOnce(&mut Counts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub(crate) fn backward_solve() {
    bump(|c| c.backward_solves += 1);
}

pub(crate) fn forward_sensitivity_solves(n: usize) {
    bump(|c| c.forward_sensitivity_solves += n);
}

pub(crate) fn forward_solve() {
    bump(|c| c.forward_solves += 1);
}

pub(crate) fn prior_factorization() {
    bump(|c| c.prior_factorizations += 1);
}

/// Current counter values on this thread.
pub fn snapshot() -> Counts {
    COUNTS.with(|c| c.get())
}

/// Run `f` and return its result together with the counts it incurred on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Counts) {
    let before = snapshot();
    let r = f();
    (r, snapshot() - before)
}

/// Add counts measured elsewhere (e.g. on a pool worker) to this thread.
pub fn absorb(delta: Counts) {
    COUNTS.with(|c| c.set(c.get() + delta));
}

/// Like [`measure`], but removes the incurred counts from this thread so they
/// can be handed to [`absorb`] on another thread without double counting.
pub fn measure_detached<R>(f: impl FnOnce() -> R) -> (R, Counts) {
    let before = snapshot();
    let r = f();
    let delta = snapshot() - before;
    COUNTS.with(|c| c.set(before));
    (r, delta)
}
