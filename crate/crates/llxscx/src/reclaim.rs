//! Epoch-based reclamation of removed records.
//!
//! Threads pin the collector for the duration of an operation. A record
//! retired while the global epoch is `e` is freed once the epoch reaches
//! `e + 2`, by which point every guard that could have reached it is gone.
//! A stalled guard stalls reclamation but never blocks operations.

use crate::llx::Record;
use crate::registry::{self, PerProcess};
use crate::shim::{AtomicUsize, Mutex, SeqCst};
use std::cell::UnsafeCell;
use std::collections::VecDeque;
use std::marker::PhantomData;

/// Default number of pins between attempts to advance the epoch.
pub const DEFAULT_ADVANCE_EVERY: usize = 64;

/// Environment variable overriding [`DEFAULT_ADVANCE_EVERY`].
pub const ADVANCE_ENV: &str = "LLXSCX_ADVANCE_EVERY";

struct Retired {
    ptr: *mut u8,
    free: unsafe fn(*mut u8),
}

unsafe impl Send for Retired {}

impl Retired {
    unsafe fn reclaim(self) {
        (self.free)(self.ptr)
    }
}

unsafe fn free_box<T>(p: *mut u8) {
    drop(Box::from_raw(p as *mut T));
}

struct Local {
    // epoch << 1 | active
    announce: AtomicUsize,
    owner: UnsafeCell<Owned>,
}

#[derive(Default)]
struct Owned {
    depth: usize,
    pins: usize,
    limbo: VecDeque<(usize, Retired)>,
}

// `owner` is only touched by the thread holding this entry's pid.
unsafe impl Sync for Local {}
unsafe impl Send for Local {}

pub struct Collector {
    epoch: AtomicUsize,
    locals: PerProcess<Local>,
    enabled: bool,
    advance_every: usize,
    retired: AtomicUsize,
    freed: AtomicUsize,
    deferred: Mutex<Vec<Retired>>,
}

impl Default for Collector {
    fn default() -> Self {
        Collector::new()
    }
}

impl Collector {
    pub fn new() -> Collector {
        let every = std::env::var(ADVANCE_ENV)
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&n: &usize| n > 0)
            .unwrap_or(DEFAULT_ADVANCE_EVERY);
        Collector::with_config(true, every)
    }

    /// A collector that never frees before it is dropped, for leak accounting.
    pub fn disabled() -> Collector {
        Collector::with_config(false, DEFAULT_ADVANCE_EVERY)
    }

    pub fn with_config(enabled: bool, advance_every: usize) -> Collector {
        assert!(advance_every > 0);
        Collector {
            epoch: AtomicUsize::new(0),
            locals: PerProcess::new(),
            enabled,
            advance_every,
            retired: AtomicUsize::new(0),
            freed: AtomicUsize::new(0),
            deferred: Mutex::new(Vec::new()),
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch.load(SeqCst)
    }

    /// Records retired so far.
    pub fn retired(&self) -> usize {
        self.retired.load(SeqCst)
    }

    /// Records physically freed so far.
    pub fn freed(&self) -> usize {
        self.freed.load(SeqCst)
    }

    fn local(&self) -> &Local {
        self.locals.get_or_init(registry::current(), || Local {
            announce: AtomicUsize::new(0),
            owner: UnsafeCell::new(Owned::default()),
        })
    }

    /// Enters a guarded section. Guards nest.
    pub fn pin(&self) -> Guard<'_> {
        let local = self.local();
        let owned = unsafe { &mut *local.owner.get() };
        owned.depth += 1;
        if owned.depth == 1 {
            let e = self.epoch.load(SeqCst);
            local.announce.store(e << 1 | 1, SeqCst);
            owned.pins += 1;
            if owned.pins % self.advance_every == 0 {
                self.try_advance();
            }
            self.collect(owned);
        }
        Guard {
            c: self,
            local,
            _not_send: PhantomData,
        }
    }

    fn unpin(&self, local: &Local) {
        let owned = unsafe { &mut *local.owner.get() };
        debug_assert!(owned.depth > 0, "unbalanced guard exit");
        owned.depth -= 1;
        if owned.depth == 0 {
            local
                .announce
                .store(local.announce.load(SeqCst) & !1, SeqCst);
        }
    }

    /// Advances the global epoch if every pinned thread has seen it.
    pub fn try_advance(&self) -> bool {
        let e = self.epoch.load(SeqCst);
        let mut blocked = false;
        self.locals.for_each(|_, l| {
            let a = l.announce.load(SeqCst);
            if a & 1 == 1 && a >> 1 != e {
                blocked = true;
            }
        });
        !blocked
            && self
                .epoch
                .compare_exchange(e, e + 1, SeqCst, SeqCst)
                .is_ok()
    }

    fn collect(&self, owned: &mut Owned) {
        let e = self.epoch.load(SeqCst);
        while owned.limbo.front().is_some_and(|(re, _)| re + 2 <= e) {
            let (_, r) = owned.limbo.pop_front().unwrap();
            unsafe { r.reclaim() };
            self.freed.fetch_add(1, SeqCst);
        }
    }

    /// Hands a removed record to the collector.
    ///
    /// # Safety
    /// `node` came from `Box::into_raw`, has been unlinked by a committed SCX,
    /// and is retired exactly once.
    pub unsafe fn retire<T: Record + Send + 'static>(&self, g: &Guard<'_>, node: *mut T) {
        debug_assert!(std::ptr::eq(g.c, self), "guard from another collector");
        debug_assert!(
            (*node).header().is_marked(),
            "retiring a record that is not finalized"
        );
        #[cfg(debug_assertions)]
        assert!((*node).header().note_retired(), "record retired twice");
        self.retired.fetch_add(1, SeqCst);
        let r = Retired {
            ptr: node as *mut u8,
            free: free_box::<T>,
        };
        if !self.enabled {
            self.deferred.lock().unwrap().push(r);
            return;
        }
        let owned = &mut *g.local.owner.get();
        owned.limbo.push_back((self.epoch.load(SeqCst), r));
    }

    /// Frees a record that was never published.
    ///
    /// # Safety
    /// No other thread can hold a reference to `node`.
    pub unsafe fn free_unpublished<T>(&self, node: *mut T) {
        drop(Box::from_raw(node));
    }

    /// Frees everything still in limbo. Requires exclusive access.
    pub fn flush(&mut self) {
        let mut n = 0;
        self.locals.for_each_mut(|l| {
            for (_, r) in l.owner.get_mut().limbo.drain(..) {
                unsafe { r.reclaim() };
                n += 1;
            }
        });
        for r in self.deferred.get_mut().unwrap().drain(..) {
            unsafe { r.reclaim() };
            n += 1;
        }
        self.freed.fetch_add(n, SeqCst);
    }
}

impl Drop for Collector {
    fn drop(&mut self) {
        self.flush();
    }
}

/// A pinned section. Records reached while it is held stay allocated.
pub struct Guard<'a> {
    c: &'a Collector,
    local: &'a Local,
    _not_send: PhantomData<*const ()>,
}

impl Drop for Guard<'_> {
    fn drop(&mut self) {
        self.c.unpin(self.local);
    }
}

#[cfg(all(test, not(loom)))]
mod tests {
    use super::*;
    use crate::llx::Header;
    use std::sync::atomic::AtomicUsize as StdUsize;
    use std::sync::{mpsc, Arc};

    static DROPS: StdUsize = StdUsize::new(0);

    struct Node {
        hdr: Header,
        tag: usize,
    }

    impl Record for Node {
        fn header(&self) -> &Header {
            &self.hdr
        }
        fn fields(&self) -> &[AtomicUsize] {
            &[]
        }
    }

    impl Drop for Node {
        fn drop(&mut self) {
            if self.tag == 1 {
                DROPS.fetch_add(1, SeqCst);
            }
        }
    }

    fn finalized_node(tag: usize) -> *mut Node {
        let n = Node {
            hdr: Header::new(),
            tag,
        };
        // mark through a one-record SCX on a throwaway domain
        let d = crate::llx::Scx::new();
        let dummy = AtomicUsize::new(0);
        let mut out = [];
        let l = match d.llx(&n, &mut out) {
            crate::llx::Llx::Snapshot(l) => l,
            _ => unreachable!(),
        };
        assert!(d.scx(&crate::llx::ScxArgs {
            v: &[l],
            r: 1,
            owner: 0,
            fld: &dummy,
            old: 0,
            new: 1
        }));
        Box::into_raw(Box::new(n))
    }

    #[test]
    fn no_frees_without_retirements() {
        let c = Collector::with_config(true, 1);
        for _ in 0..10 {
            drop(c.pin());
        }
        assert_eq!((c.retired(), c.freed()), (0, 0));
        assert!(c.epoch() > 0);
    }

    #[test]
    fn freed_only_after_two_epochs() {
        let c = Collector::with_config(true, 1_000_000);
        let g = c.pin();
        unsafe { c.retire(&g, finalized_node(0)) };
        drop(g);
        assert_eq!(c.freed(), 0);
        assert!(c.try_advance());
        drop(c.pin());
        assert_eq!(c.freed(), 0);
        assert!(c.try_advance());
        drop(c.pin());
        assert_eq!(c.freed(), 1);
    }

    #[test]
    fn stalled_guard_blocks_advance() {
        let c = Arc::new(Collector::with_config(true, 1_000_000));
        let (tx, rx) = mpsc::channel();
        let (done_tx, done_rx) = mpsc::channel::<()>();
        let c2 = c.clone();
        let t = std::thread::spawn(move || {
            let _g = c2.pin();
            tx.send(()).unwrap();
            done_rx.recv().unwrap();
        });
        rx.recv().unwrap();
        // the stalled thread announced the current epoch, so one advance is allowed
        assert!(c.try_advance());
        assert!(!c.try_advance());
        assert!(!c.try_advance());
        done_tx.send(()).unwrap();
        t.join().unwrap();
        assert!(c.try_advance());
    }

    #[test]
    fn retired_record_survives_older_guard() {
        // thread A pins, B retires and churns; A's guard must keep the record alive
        let before = DROPS.load(SeqCst);
        let c = Arc::new(Collector::with_config(true, 1));
        let (tx, rx) = mpsc::channel();
        let (go_tx, go_rx) = mpsc::channel::<()>();
        let c2 = c.clone();
        let a = std::thread::spawn(move || {
            let _g = c2.pin();
            tx.send(()).unwrap();
            go_rx.recv().unwrap();
        });
        rx.recv().unwrap();
        {
            let g = c.pin();
            unsafe { c.retire(&g, finalized_node(1)) };
        }
        for _ in 0..100 {
            drop(c.pin());
        }
        assert_eq!(DROPS.load(SeqCst), before);
        go_tx.send(()).unwrap();
        a.join().unwrap();
        for _ in 0..10 {
            drop(c.pin());
        }
        assert_eq!(DROPS.load(SeqCst), before + 1);
    }

    #[test]
    fn rotating_guards_make_progress() {
        let c = Arc::new(Collector::with_config(true, 4));
        let hs: Vec<_> = (0..3)
            .map(|_| {
                let c = c.clone();
                std::thread::spawn(move || {
                    for _ in 0..2000 {
                        let g = c.pin();
                        unsafe { c.retire(&g, finalized_node(0)) };
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        assert!(c.epoch() > 10, "epoch stuck at {}", c.epoch());
        assert!(c.freed() > 0);
    }

    #[test]
    fn disabled_collector_counts_and_defers() {
        let mut c = Collector::disabled();
        for _ in 0..5 {
            let g = c.pin();
            unsafe { c.retire(&g, finalized_node(0)) };
        }
        assert_eq!((c.retired(), c.freed()), (5, 0));
        c.flush();
        assert_eq!(c.freed(), 5);
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "retired twice")]
    fn double_retire_panics() {
        let c = Collector::disabled();
        let g = c.pin();
        let n = finalized_node(0);
        unsafe {
            c.retire(&g, n);
            c.retire(&g, n);
        }
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "not finalized")]
    fn retiring_live_record_panics() {
        let c = Collector::new();
        let g = c.pin();
        struct Own(*mut Node);
        impl Drop for Own {
            fn drop(&mut self) {
                drop(unsafe { Box::from_raw(self.0) });
            }
        }
        let n = Own(Box::into_raw(Box::new(Node {
            hdr: Header::new(),
            tag: 0,
        })));
        unsafe { c.retire(&g, n.0) };
    }
}
