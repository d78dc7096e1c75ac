//! Allocation accounting for tensor buffers.
//!
//! Every [`Tensor`](crate::Tensor) registers its buffer size here when it is
//! created and releases it on drop. Counters are per thread, which keeps
//! benchmark measurements independent of tests running in parallel.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LIMIT: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Panic payload raised when a tensor allocation would exceed the budget set
/// with [`set_limit`]. Callers that want to survive it use
/// `std::panic::catch_unwind` and downcast the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetExceeded {
    pub requested: usize,
    pub live: usize,
    pub limit: usize,
}

pub(crate) fn track_alloc(bytes: usize) {
    let live = LIVE.with(|l| l.get()) + bytes;
    if let Some(limit) = LIMIT.with(|l| l.get()) {
        if live > limit {
            std::panic::panic_any(BudgetExceeded {
                requested: bytes,
                live: live - bytes,
                limit,
            });
        }
    }
    LIVE.with(|l| l.set(live));
    PEAK.with(|p| {
        if live > p.get() {
            p.set(live)
        }
    });
}

pub(crate) fn track_free(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tensors on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(|l| l.get())
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get())
}

/// Resets the high-water mark to the current live count.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

/// Installs (or clears) a per-thread allocation budget in bytes.
pub fn set_limit(limit: Option<usize>) {
    LIMIT.with(|l| l.set(limit));
}
