//! Tensor-byte high-water-mark accounting.
//!
//! A [`MemoryScope`] registers itself on the current thread. Every tensor
//! constructed while scopes are active is charged to all of them, and the
//! charge is released when the tensor is dropped, on whatever thread that
//! happens. Nested scopes therefore see the allocations of their children.

use std::cell::RefCell;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Tracker {
    live: AtomicI64,
    peak: AtomicI64,
}

impl Tracker {
    fn charge(&self, bytes: i64) {
        let live = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(live, Ordering::Relaxed);
    }

    fn release(&self, bytes: i64) {
        self.live.fetch_sub(bytes, Ordering::Relaxed);
    }
}

thread_local! {
    static ACTIVE: RefCell<Vec<Arc<Tracker>>> = const { RefCell::new(Vec::new()) };
}

/// Per-tensor record of which scopes were charged.
#[derive(Debug, Default)]
pub(crate) struct Charge {
    bytes: i64,
    trackers: Vec<Arc<Tracker>>,
}

impl Charge {
    pub(crate) fn new(bytes: usize) -> Self {
        let bytes = bytes as i64;
        let trackers = ACTIVE.with(|a| {
            let a = a.borrow();
            if a.is_empty() || bytes == 0 {
                return Vec::new();
            }
            for t in a.iter() {
                t.charge(bytes);
            }
            a.clone()
        });
        Self { bytes, trackers }
    }
}

impl Drop for Charge {
    fn drop(&mut self) {
        for t in &self.trackers {
            t.release(self.bytes);
        }
    }
}

/// RAII scope measuring the live-tensor-byte high-water mark.
///
/// Scopes must be dropped in reverse creation order on the thread that
/// created them.
#[derive(Debug)]
pub struct MemoryScope {
    tracker: Arc<Tracker>,
}

impl MemoryScope {
    pub fn enter() -> Self {
        let tracker = Arc::new(Tracker::default());
        ACTIVE.with(|a| a.borrow_mut().push(tracker.clone()));
        Self { tracker }
    }

    /// Bytes currently live and charged to this scope.
    pub fn live(&self) -> u64 {
        self.tracker.live.load(Ordering::Relaxed).max(0) as u64
    }

    pub fn peak(&self) -> u64 {
        self.tracker.peak.load(Ordering::Relaxed).max(0) as u64
    }

    /// Restarts the peak at the current live level.
    pub fn reset_peak(&self) {
        let live = self.tracker.live.load(Ordering::Relaxed);
        self.tracker.peak.store(live, Ordering::Relaxed);
    }
}

impl Drop for MemoryScope {
    fn drop(&mut self) {
        ACTIVE.with(|a| {
            let mut a = a.borrow_mut();
            if let Some(pos) = a.iter().rposition(|t| Arc::ptr_eq(t, &self.tracker)) {
                a.remove(pos);
            }
        });
    }
}

/// Runs `f` inside a fresh scope and returns its result with the peak bytes.
pub fn record_memory<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let scope = MemoryScope::enter();
    let r = f();
    let peak = scope.peak();
    (r, peak)
}
