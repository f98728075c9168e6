//! Per-thread counts of model forward passes and tape backward passes.
//!
//! Used to check cost contracts ("one forward, one backward") in tests.
//! Counts are thread-local so concurrently running jobs do not mix.

use std::cell::Cell;

thread_local! {
    static FORWARDS: Cell<usize> = const { Cell::new(0) };
    static BACKWARDS: Cell<usize> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCounts {
    pub forwards: usize,
    pub backwards: usize,
}

pub(crate) fn record_forward() {
    FORWARDS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_backward() {
    BACKWARDS.with(|c| c.set(c.get() + 1));
}

pub fn snapshot() -> OpCounts {
    OpCounts {
        forwards: FORWARDS.with(Cell::get),
        backwards: BACKWARDS.with(Cell::get),
    }
}

impl OpCounts {
    pub fn since(self, earlier: OpCounts) -> OpCounts {
        OpCounts {
            forwards: self.forwards - earlier.forwards,
            backwards: self.backwards - earlier.backwards,
        }
    }
}
