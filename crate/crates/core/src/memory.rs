//! Allocation instrumentation.
//!
//! [`CountingAlloc`] wraps the system allocator and keeps per-thread byte
//! counters. A binary opts in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: regla::memory::CountingAlloc = regla::memory::CountingAlloc;
//! ```
//!
//! after which [`track`] reports the peak live bytes and the largest single
//! allocation made by the current thread inside a closure. Without the
//! allocator installed every measurement reads zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

pub struct CountingAlloc;

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LARGEST: Cell<usize> = const { Cell::new(0) };
}

#[inline]
fn on_alloc(size: usize) {
    let _ = CURRENT.try_with(|c| {
        let now = c.get() + size;
        c.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
    let _ = LARGEST.try_with(|l| {
        if size > l.get() {
            l.set(size)
        }
    });
}

#[inline]
fn on_dealloc(size: usize) {
    // Memory freed by a thread other than its allocator can drive the
    // per-thread balance below zero; clamp instead of wrapping.
    let _ = CURRENT.try_with(|c| c.set(c.get().saturating_sub(size)));
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc(layout);
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        on_dealloc(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            on_dealloc(layout.size());
            on_alloc(new_size);
        }
        p
    }
}

/// Whether [`CountingAlloc`] is the active global allocator.
pub fn is_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Allocation footprint of one tracked region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AllocStats {
    /// Peak live bytes above the level at region entry.
    pub peak_bytes: usize,
    /// Largest single allocation request inside the region.
    pub largest_bytes: usize,
}

/// Runs `f` and reports what it allocated on this thread. Regions nest.
pub fn track<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    let base = CURRENT.with(Cell::get);
    let outer_peak = PEAK.with(|p| p.replace(base));
    let outer_largest = LARGEST.with(|l| l.replace(0));
    let r = f();
    let peak = PEAK.with(Cell::get);
    let largest = LARGEST.with(Cell::get);
    PEAK.with(|p| p.set(outer_peak.max(peak)));
    LARGEST.with(|l| l.set(outer_largest.max(largest)));
    (
        r,
        AllocStats {
            peak_bytes: peak - base,
            largest_bytes: largest,
        },
    )
}
