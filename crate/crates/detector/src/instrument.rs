//! Per-thread call counters for the training-only components, so tests can
//! assert that inference never touches them.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub boosting_weights: u64,
    pub ssmc: u64,
    pub gradient_reversal: u64,
    pub irm: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.boosting_weights + self.ssmc + self.gradient_reversal + self.irm
    }
}

thread_local! {
    static COUNTS: Cell<CallCounts> = Cell::new(CallCounts::default());
}

pub fn counts() -> CallCounts {
    COUNTS.with(Cell::get)
}

pub fn reset() {
    COUNTS.with(|c| c.set(CallCounts::default()));
}

pub(crate) fn bump(f: impl FnOnce(&mut CallCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}
