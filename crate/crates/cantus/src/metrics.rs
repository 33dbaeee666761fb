//! Instrumentation counters for the decode engine.
//!
//! Every primitive kernel in [`crate::tensor`] bumps the dispatch counter,
//! and every fresh buffer allocation bumps the alloc counter. Counters are
//! thread-local: a decode session runs on one thread, so deltas taken around
//! a session are isolated from concurrent sessions on other threads.

use std::cell::Cell;

thread_local! {
    static DISPATCH: Cell<u64> = const { Cell::new(0) };
    static ALLOC: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn bump_dispatch() {
    DISPATCH.with(|c| c.set(c.get() + 1));
}

#[inline]
pub fn bump_alloc() {
    ALLOC.with(|c| c.set(c.get() + 1));
}

/// Current (dispatch, alloc) counter values for this thread.
pub fn snapshot() -> (u64, u64) {
    (DISPATCH.with(Cell::get), ALLOC.with(Cell::get))
}

/// Counter deltas accumulated while running `f`.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64, u64) {
    let (d0, a0) = snapshot();
    let out = f();
    let (d1, a1) = snapshot();
    (out, d1 - d0, a1 - a0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deltas_are_monotone_and_isolated() {
        let (_, d, a) = measure(|| {
            bump_dispatch();
            bump_dispatch();
            bump_alloc();
        });
        assert_eq!(d, 2);
        assert_eq!(a, 1);

        let handle = std::thread::spawn(|| measure(|| bump_dispatch()).1);
        let (_, d2, _) = measure(|| ());
        assert_eq!(handle.join().unwrap(), 1);
        assert_eq!(d2, 0, "other threads must not perturb this thread's counters");
    }
}
