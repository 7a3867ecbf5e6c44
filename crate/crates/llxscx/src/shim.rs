// Atomics and locks, swapped for loom's under `--cfg loom`.
//
// loom models SeqCst accesses as AcqRel but supports SeqCst fences, so under
// loom every access is preceded by a SeqCst fence. With a fence between any
// two accesses of a thread the model stays sequentially consistent, which is
// what the algorithms assume.

#[cfg(loom)]
pub(crate) use loom::sync::Mutex;
#[cfg(not(loom))]
pub(crate) use std::sync::Mutex;

#[cfg(not(loom))]
pub use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicUsize};

pub(crate) use std::sync::atomic::Ordering::SeqCst;

#[cfg(loom)]
pub use fenced::{AtomicBool, AtomicPtr, AtomicUsize};

#[cfg(loom)]
mod fenced {
    use loom::sync::atomic::fence;
    use std::sync::atomic::Ordering::{self, SeqCst};

    fn sc<T>(f: impl FnOnce() -> T) -> T {
        fence(SeqCst);
        f()
    }

    macro_rules! fenced {
        ($name:ident $(<$g:ident>)?, $t:ty) => {
            #[derive(Debug)]
            pub struct $name$(<$g>)?(loom::sync::atomic::$name$(<$g>)?);

            #[allow(dead_code)]
            impl$(<$g>)? $name$(<$g>)? {
                pub fn new(v: $t) -> Self {
                    $name(loom::sync::atomic::$name::new(v))
                }
                pub fn load(&self, o: Ordering) -> $t {
                    sc(|| self.0.load(o))
                }
                pub fn store(&self, v: $t, o: Ordering) {
                    sc(|| self.0.store(v, o))
                }
                pub fn swap(&self, v: $t, o: Ordering) -> $t {
                    sc(|| self.0.swap(v, o))
                }
                pub fn compare_exchange(&self, e: $t, n: $t, s: Ordering, f: Ordering) -> Result<$t, $t> {
                    sc(|| self.0.compare_exchange(e, n, s, f))
                }
            }
        };
    }

    fenced!(AtomicUsize, usize);
    fenced!(AtomicBool, bool);
    fenced!(AtomicPtr<T>, *mut T);

    impl AtomicUsize {
        pub fn fetch_add(&self, v: usize, o: Ordering) -> usize {
            sc(|| self.0.fetch_add(v, o))
        }
        pub fn fetch_sub(&self, v: usize, o: Ordering) -> usize {
            sc(|| self.0.fetch_sub(v, o))
        }
        pub fn fetch_max(&self, v: usize, o: Ordering) -> usize {
            sc(|| self.0.fetch_max(v, o))
        }
    }
}
