//! Process ids for threads, and lazily populated per-process tables.
//!
//! Every thread that touches a structure gets a small integer id, recycled
//! when the thread exits. Ids fit in [`PID_BITS`] bits so they can be packed
//! into descriptor handles.

use crate::shim::{AtomicPtr, AtomicUsize, SeqCst};
use std::ptr;
#[cfg(not(loom))]
use std::sync::atomic::AtomicUsize as StdAtomicUsize;
#[cfg(not(loom))]
use std::sync::Mutex as StdMutex;

#[cfg(target_pointer_width = "64")]
pub const PID_BITS: u32 = 14;
// 32-bit words keep 24 bits of sequence number per descriptor slot
#[cfg(target_pointer_width = "32")]
pub const PID_BITS: u32 = 6;

#[cfg(all(not(loom), target_pointer_width = "64"))]
const CHUNK: usize = 128;
#[cfg(all(not(loom), target_pointer_width = "64"))]
const CHUNKS: usize = 128;
#[cfg(all(not(loom), target_pointer_width = "32"))]
const CHUNK: usize = 16;
#[cfg(all(not(loom), target_pointer_width = "32"))]
const CHUNKS: usize = 4;
#[cfg(loom)]
const CHUNK: usize = 4;
#[cfg(loom)]
const CHUNKS: usize = 2;

/// Upper bound on simultaneously live threads.
pub const MAX_PROCS: usize = CHUNK * CHUNKS;

const _: () = assert!(MAX_PROCS <= 1 << PID_BITS);

#[cfg(not(loom))]
struct Ids {
    free: StdMutex<Vec<usize>>,
    next: StdAtomicUsize,
}

#[cfg(not(loom))]
impl Ids {
    fn acquire(&self) -> usize {
        if let Some(id) = self.free.lock().unwrap().pop() {
            return id;
        }
        let id = self.next.fetch_add(1, SeqCst);
        assert!(id < MAX_PROCS, "more than {MAX_PROCS} live threads");
        id
    }

    fn release(&self, id: usize) {
        let mut free = self.free.lock().unwrap();
        free.push(id);
        // lowest ids first keeps tables dense
        free.sort_unstable_by(|a, b| b.cmp(a));
    }
}

#[cfg(not(loom))]
static IDS: Ids = Ids {
    free: StdMutex::new(Vec::new()),
    next: StdAtomicUsize::new(0),
};

struct Pid(usize);

#[cfg(not(loom))]
impl Drop for Pid {
    fn drop(&mut self) {
        IDS.release(self.0);
    }
}

// Under loom ids are fresh per execution and never recycled: a handoff
// through the free list would need synchronization loom cannot see.
#[cfg(loom)]
loom::lazy_static! {
    static ref NEXT: loom::sync::atomic::AtomicUsize = loom::sync::atomic::AtomicUsize::new(0);
}

#[cfg(loom)]
struct IdsLoom;

#[cfg(loom)]
impl IdsLoom {
    fn acquire(&self) -> usize {
        let id = NEXT.fetch_add(1, SeqCst);
        assert!(
            id < MAX_PROCS,
            "more than {MAX_PROCS} threads in one execution"
        );
        id
    }
}

#[cfg(loom)]
static IDS: IdsLoom = IdsLoom;

#[cfg(not(loom))]
thread_local! {
    static PID: Pid = Pid(IDS.acquire());
}

#[cfg(loom)]
loom::thread_local! {
    static PID: Pid = Pid(IDS.acquire());
}

/// The calling thread's process id.
pub fn current() -> usize {
    PID.with(|p| p.0)
}

/// A table with one lazily allocated `T` per process id.
///
/// Entries are never freed before the table itself, so references handed
/// out by [`get`](Self::get) live as long as `&self`.
pub struct PerProcess<T> {
    chunks: Box<[AtomicPtr<[AtomicPtr<T>; CHUNK]>]>,
    allocated: AtomicUsize,
    high_water: AtomicUsize,
}

unsafe impl<T: Send + Sync> Send for PerProcess<T> {}
unsafe impl<T: Send + Sync> Sync for PerProcess<T> {}

impl<T> Default for PerProcess<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> PerProcess<T> {
    pub fn new() -> Self {
        let chunks = (0..CHUNKS)
            .map(|_| AtomicPtr::new(ptr::null_mut()))
            .collect();
        PerProcess {
            chunks,
            allocated: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
        }
    }

    fn chunk(&self, pid: usize) -> Option<&[AtomicPtr<T>; CHUNK]> {
        let p = self.chunks[pid / CHUNK].load(SeqCst);
        unsafe { p.as_ref() }
    }

    fn chunk_or_alloc(&self, pid: usize) -> &[AtomicPtr<T>; CHUNK] {
        if let Some(c) = self.chunk(pid) {
            return c;
        }
        let fresh: Box<[AtomicPtr<T>; CHUNK]> =
            Box::new(std::array::from_fn(|_| AtomicPtr::new(ptr::null_mut())));
        let fresh = Box::into_raw(fresh);
        match self.chunks[pid / CHUNK].compare_exchange(ptr::null_mut(), fresh, SeqCst, SeqCst) {
            Ok(_) => unsafe { &*fresh },
            Err(cur) => {
                drop(unsafe { Box::from_raw(fresh) });
                unsafe { &*cur }
            }
        }
    }

    pub fn get(&self, pid: usize) -> Option<&T> {
        if pid >= MAX_PROCS {
            return None;
        }
        let p = self.chunk(pid)?[pid % CHUNK].load(SeqCst);
        unsafe { p.as_ref() }
    }

    /// Entry for `pid`, created with `init` on first use.
    ///
    /// Only the thread owning `pid` may create its entry.
    pub fn get_or_init(&self, pid: usize, init: impl FnOnce() -> T) -> &T {
        let cell = &self.chunk_or_alloc(pid)[pid % CHUNK];
        let p = cell.load(SeqCst);
        if !p.is_null() {
            return unsafe { &*p };
        }
        let fresh = Box::into_raw(Box::new(init()));
        cell.store(fresh, SeqCst);
        self.allocated.fetch_add(1, SeqCst);
        self.high_water.fetch_max(pid + 1, SeqCst);
        unsafe { &*fresh }
    }

    /// Number of entries ever allocated.
    pub fn allocated(&self) -> usize {
        self.allocated.load(SeqCst)
    }

    /// Visits every allocated entry.
    pub fn for_each(&self, mut f: impl FnMut(usize, &T)) {
        let hw = self.high_water.load(SeqCst);
        for pid in 0..hw {
            if let Some(t) = self.get(pid) {
                f(pid, t);
            }
        }
    }

    /// Mutable access to every entry; requires exclusive ownership.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut T)) {
        let hw = self.high_water.load(SeqCst);
        for pid in 0..hw {
            if let Some(c) = self.chunk(pid) {
                let p = c[pid % CHUNK].load(SeqCst);
                if let Some(t) = unsafe { p.as_mut() } {
                    f(t);
                }
            }
        }
    }
}

impl<T> Drop for PerProcess<T> {
    fn drop(&mut self) {
        for c in self.chunks.iter() {
            let c = c.load(SeqCst);
            if c.is_null() {
                continue;
            }
            let chunk = unsafe { Box::from_raw(c) };
            for e in chunk.iter() {
                let p = e.load(SeqCst);
                if !p.is_null() {
                    drop(unsafe { Box::from_raw(p) });
                }
            }
        }
    }
}
