//! Per-thread accounting of live tensor bytes.
//!
//! Every [`Tensor`](super::Tensor) registers its buffer here on construction
//! and releases it on drop. [`measure`] reports the peak number of bytes that
//! were live at once inside a closure, over and above what was already live
//! when it started. Buffers moved to and dropped on another thread are not
//! balanced, so measurements are only meaningful for single-threaded work.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

#[inline]
pub fn record_alloc(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

#[inline]
pub fn record_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Bytes currently live on this thread.
pub fn current_bytes() -> usize {
    CURRENT.with(Cell::get)
}

/// Runs `f` and returns its result together with the peak additional bytes
/// that were live during the call.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let start = current_bytes();
    let saved_peak = PEAK.with(|p| p.replace(start));
    let out = f();
    let peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(saved_peak.max(peak)));
    (out, peak.saturating_sub(start))
}
