//! Instrumented accounting of in-memory buffer bytes.
//!
//! Every stage that holds events or samples in memory reserves their approximate size here,
//! so tests and the bench harness can assert a high-water mark against the configured budget.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Inner {
    current: AtomicUsize,
    high_water: AtomicUsize,
}

/// Shared counter of live buffer bytes. Cloning shares the same counters.
#[derive(Debug, Clone, Default)]
pub struct MemTracker {
    inner: Arc<Inner>,
}

impl MemTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reserve(&self, bytes: usize) {
        let now = self.inner.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.inner.high_water.fetch_max(now, Ordering::Relaxed);
    }

    pub fn release(&self, bytes: usize) {
        let prev = self.inner.current.fetch_sub(bytes, Ordering::Relaxed);
        debug_assert!(prev >= bytes, "released more than reserved");
    }

    pub fn current(&self) -> usize {
        self.inner.current.load(Ordering::Relaxed)
    }

    pub fn high_water(&self) -> usize {
        self.inner.high_water.load(Ordering::Relaxed)
    }

    /// Reserves `bytes` until the returned guard is dropped.
    pub fn guard(&self, bytes: usize) -> MemGuard {
        self.reserve(bytes);
        MemGuard {
            tracker: self.clone(),
            bytes,
        }
    }
}

/// RAII reservation; grows or shrinks with the buffer it accounts for.
#[derive(Debug)]
pub struct MemGuard {
    tracker: MemTracker,
    bytes: usize,
}

impl MemGuard {
    pub fn grow(&mut self, bytes: usize) {
        self.tracker.reserve(bytes);
        self.bytes += bytes;
    }

    pub fn set(&mut self, bytes: usize) {
        if bytes > self.bytes {
            self.grow(bytes - self.bytes);
        } else {
            self.tracker.release(self.bytes - bytes);
            self.bytes = bytes;
        }
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl Drop for MemGuard {
    fn drop(&mut self) {
        self.tracker.release(self.bytes);
    }
}
