//! Stop-the-world sampling for stress tests.
//!
//! Worker threads attach a [`Stw`] and pass through [`safepoint`] between
//! operations and at the top of every cleanup iteration. A sampler calls
//! [`Stw::stop`] to park all attached workers, inspects the structure, and
//! learns how many of them were parked mid-update.

use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering::SeqCst};
use std::sync::Arc;

#[derive(Default)]
pub struct Stw {
    requested: AtomicBool,
    active: AtomicUsize,
    parked: AtomicUsize,
    parked_in_flight: AtomicUsize,
}

thread_local! {
    static ATTACHED: RefCell<Option<Arc<Stw>>> = const { RefCell::new(None) };
}

/// Registers the calling thread with `stw` until the returned value drops.
pub fn attach(stw: Arc<Stw>) -> Attached {
    stw.active.fetch_add(1, SeqCst);
    ATTACHED.with(|a| *a.borrow_mut() = Some(stw));
    Attached(())
}

pub struct Attached(());

impl Drop for Attached {
    fn drop(&mut self) {
        if let Some(s) = ATTACHED.with(|a| a.borrow_mut().take()) {
            s.active.fetch_sub(1, SeqCst);
        }
    }
}

/// Parks here while a stop is requested. `in_flight` says whether the
/// caller is in the middle of an update.
#[inline]
pub fn safepoint(in_flight: bool) {
    #[cfg(not(loom))]
    ATTACHED.with(|a| {
        if let Some(s) = a.borrow().as_ref() {
            if s.requested.load(SeqCst) {
                s.park(in_flight);
            }
        }
    });
    #[cfg(loom)]
    let _ = in_flight;
}

impl Stw {
    pub fn new() -> Arc<Stw> {
        Arc::new(Stw::default())
    }

    #[cfg_attr(loom, allow(dead_code))]
    fn park(&self, in_flight: bool) {
        if in_flight {
            self.parked_in_flight.fetch_add(1, SeqCst);
        }
        self.parked.fetch_add(1, SeqCst);
        while self.requested.load(SeqCst) {
            std::thread::yield_now();
        }
        if in_flight {
            self.parked_in_flight.fetch_sub(1, SeqCst);
        }
        self.parked.fetch_sub(1, SeqCst);
    }

    /// Parks every attached thread. Returns `None` if all workers detached.
    pub fn stop(&self) -> Option<Stopped<'_>> {
        self.requested.store(true, SeqCst);
        loop {
            let active = self.active.load(SeqCst);
            if active == 0 {
                self.resume();
                return None;
            }
            if self.parked.load(SeqCst) == active {
                return Some(Stopped { stw: self });
            }
            std::thread::yield_now();
        }
    }

    fn resume(&self) {
        self.requested.store(false, SeqCst);
        while self.parked.load(SeqCst) != 0 {
            std::thread::yield_now();
        }
    }
}

/// All attached threads are parked while this lives.
pub struct Stopped<'a> {
    stw: &'a Stw,
}

impl Stopped<'_> {
    /// Parked threads that are inside an update.
    pub fn in_flight(&self) -> usize {
        self.stw.parked_in_flight.load(SeqCst)
    }
}

impl Drop for Stopped<'_> {
    fn drop(&mut self) {
        self.stw.resume();
    }
}
