//! DCSS and k-CAS over an array of words, using extended weak descriptors.
//!
//! Each thread owns one DCSS slot and one k-CAS slot for the lifetime of a
//! [`KcasArray`]; descriptors are never allocated per operation. A word
//! holds an application value (two low bits clear), a flagged DCSS handle
//! (low bit set) or a flagged k-CAS handle (second bit set).
//!
//! Helpers read descriptors through handles that may have gone stale. A
//! stale immutable read ends the helping early; the one state read made
//! from inside DCSS helping defaults to `SUCCEEDED`, which steers it to the
//! same branch a valid read of a finished operation would take.

use crate::descriptor::{DescTable, Field, Handle};
use crate::shim::{AtomicUsize, SeqCst};

pub const DCSS_FLAG: usize = 0b01;
pub const KCAS_FLAG: usize = 0b10;
/// Largest k supported by one k-CAS.
pub const MAX_K: usize = 64;

const STATE: Field = Field::new(0, 2);
const UNDECIDED: usize = 0;
const SUCCEEDED: usize = 1;
const FAILED: usize = 2;
/// Stands for an invalid read of `STATE`.
const STALE: usize = 3;

// DCSS immutables: kind, a1, e1, a2, e2, n2
const DCSS_WORDS: usize = 6;
const KIND_ADDR: usize = 0;
const KIND_STATE: usize = 1;
const KCAS_WORDS: usize = 1 + 3 * MAX_K;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KcasEntry {
    pub index: usize,
    pub exp: usize,
    pub new: usize,
}

fn is_value(v: usize) -> bool {
    v & (DCSS_FLAG | KCAS_FLAG) == 0
}

fn word<'a>(addr: usize) -> &'a AtomicUsize {
    unsafe { &*(addr as *const AtomicUsize) }
}

/// A fixed array of words updated by DCSS and k-CAS.
pub struct KcasArray {
    words: Box<[AtomicUsize]>,
    dcss: DescTable<DCSS_WORDS>,
    kcas: DescTable<KCAS_WORDS>,
}

impl KcasArray {
    pub fn new(len: usize) -> Self {
        KcasArray {
            words: (0..len).map(|_| AtomicUsize::new(0)).collect(),
            dcss: DescTable::new(DCSS_FLAG),
            kcas: DescTable::new(KCAS_FLAG),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Descriptor slots allocated so far, over both descriptor types.
    pub fn slots(&self) -> usize {
        self.dcss.allocated() + self.kcas.allocated()
    }

    fn addr(&self, i: usize) -> usize {
        &self.words[i] as *const AtomicUsize as usize
    }

    /// Atomically: if word `i1` is `e1` and word `i2` is `e2`, store `n2`
    /// in word `i2`. Returns the value of word `i2` seen (`e2` on success).
    pub fn dcss(&self, i1: usize, e1: usize, i2: usize, e2: usize, n2: usize) -> usize {
        assert!(
            is_value(e1) && is_value(e2) && is_value(n2),
            "values must leave the two low bits clear"
        );
        self.dcss_raw(KIND_ADDR, self.addr(i1), e1, self.addr(i2), e2, n2)
    }

    fn dcss_raw(
        &self,
        kind: usize,
        a1: usize,
        e1: usize,
        a2: usize,
        e2: usize,
        n2: usize,
    ) -> usize {
        let fdes = self.dcss.create_new(&[kind, a1, e1, a2, e2, n2], 0).raw();
        let w = word(a2);
        loop {
            match w.compare_exchange(e2, fdes, SeqCst, SeqCst) {
                Ok(_) => {
                    self.dcss_help(fdes);
                    return e2;
                }
                Err(r) if r & DCSS_FLAG != 0 => self.dcss_help(r),
                Err(r) => return r,
            }
        }
    }

    fn dcss_help(&self, fdes: usize) {
        let mut imm = [0; DCSS_WORDS];
        if self
            .dcss
            .read_immutables(Handle::from_raw(fdes), &mut imm)
            .is_err()
        {
            return;
        }
        let [kind, a1, e1, a2, e2, n2] = imm;
        let cur = if kind == KIND_STATE {
            self.kcas.read_field(Handle::from_raw(a1), STATE, SUCCEEDED)
        } else {
            word(a1).load(SeqCst)
        };
        let to = if cur == e1 { n2 } else { e2 };
        let _ = word(a2).compare_exchange(fdes, to, SeqCst, SeqCst);
    }

    fn dcss_read(&self, addr: usize) -> usize {
        loop {
            let r = word(addr).load(SeqCst);
            if r & DCSS_FLAG != 0 {
                self.dcss_help(r);
            } else {
                return r;
            }
        }
    }

    /// Value of word `i`, helping any operation found there.
    pub fn read(&self, i: usize) -> usize {
        let a = self.addr(i);
        loop {
            let r = self.dcss_read(a);
            if r & KCAS_FLAG != 0 {
                self.kcas_help(r);
            } else {
                return r;
            }
        }
    }

    /// Atomically replaces `exp` by `new` in every listed word, or changes
    /// nothing if some word differs from its expected value.
    pub fn kcas(&self, entries: &[KcasEntry]) -> bool {
        let k = entries.len();
        assert!((1..=MAX_K).contains(&k), "k must be in 1..={MAX_K}");
        let mut sorted = entries.to_vec();
        // a global locking order keeps helpers from livelocking
        sorted.sort_unstable_by_key(|e| e.index);
        assert!(
            sorted.windows(2).all(|w| w[0].index != w[1].index),
            "duplicate address"
        );
        let mut imm = [0; KCAS_WORDS];
        imm[0] = k;
        for (i, e) in sorted.iter().enumerate() {
            assert!(
                is_value(e.exp) && is_value(e.new),
                "values must leave the two low bits clear"
            );
            imm[1 + 3 * i..4 + 3 * i].copy_from_slice(&[self.addr(e.index), e.exp, e.new]);
        }
        let h = self.kcas.create_new(&imm[..1 + 3 * k], UNDECIDED);
        self.kcas_help(h.raw())
    }

    fn kcas_help(&self, fdes: usize) -> bool {
        let h = Handle::from_raw(fdes);
        let Ok(k) = self.kcas.read_immutable(h, 0) else {
            return false;
        };
        let mut imm = [0; KCAS_WORDS];
        if k > MAX_K || self.kcas.read_immutables(h, &mut imm[..1 + 3 * k]).is_err() {
            return false;
        }
        let entry = |i: usize| (imm[1 + 3 * i], imm[2 + 3 * i], imm[3 + 3 * i]);
        let st = self.kcas.read_field(h, STATE, STALE);
        if st == STALE {
            return false;
        }
        if st == UNDECIDED {
            let mut state = SUCCEEDED;
            'entries: for i in 0..k {
                let (a, e, _) = entry(i);
                loop {
                    let val = self.dcss_raw(KIND_STATE, fdes, UNDECIDED, a, e, fdes);
                    if val & KCAS_FLAG != 0 {
                        if val != fdes {
                            self.kcas_help(val);
                            continue;
                        }
                    } else if val != e {
                        state = FAILED;
                        break 'entries;
                    }
                    break;
                }
            }
            if self.kcas.cas_field(h, STATE, UNDECIDED, state).is_err() {
                return false;
            }
        }
        let state = self.kcas.read_field(h, STATE, STALE);
        if state == STALE {
            return false;
        }
        for i in 0..k {
            let (a, e, n) = entry(i);
            let to = if state == SUCCEEDED { n } else { e };
            let _ = word(a).compare_exchange(fdes, to, SeqCst, SeqCst);
        }
        state == SUCCEEDED
    }

    /// Sum of all words; only meaningful at quiescence.
    pub fn sum(&self) -> usize {
        (0..self.len()).map(|i| self.read(i)).sum()
    }
}

#[cfg(all(test, not(loom)))]
mod tests {
    use super::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};

    fn e(index: usize, exp: usize, new: usize) -> KcasEntry {
        KcasEntry { index, exp, new }
    }

    #[test]
    fn two_cas_basics() {
        let a = KcasArray::new(2);
        assert!(a.kcas(&[e(0, 0, 4), e(1, 0, 4)]));
        assert_eq!((a.read(0), a.read(1)), (4, 4));
        assert!(!a.kcas(&[e(0, 4, 8), e(1, 0, 8)]));
        assert_eq!((a.read(0), a.read(1)), (4, 4));
        // order of entries does not matter
        assert!(a.kcas(&[e(1, 4, 12), e(0, 4, 8)]));
        assert_eq!((a.read(0), a.read(1)), (8, 12));
        assert_eq!(a.slots(), 2);
    }

    #[test]
    fn dcss_basics() {
        let a = KcasArray::new(2);
        assert_eq!(a.dcss(0, 0, 1, 0, 8), 0);
        assert_eq!(a.read(1), 8);
        assert_eq!(a.dcss(0, 4, 1, 8, 12), 8);
        assert_eq!(a.read(1), 8);
        assert_eq!(a.dcss(0, 0, 1, 4, 12), 8);
        assert_eq!(a.read(1), 8);
    }

    #[test]
    #[should_panic(expected = "low bits")]
    fn flagged_values_rejected() {
        KcasArray::new(1).kcas(&[e(0, 0, 1)]);
    }

    #[test]
    fn stale_dcss_help_is_harmless() {
        let a = KcasArray::new(2);
        a.dcss(0, 0, 1, 0, 4);
        let old = a
            .dcss
            .create_new(&[KIND_ADDR, a.addr(0), 0, a.addr(1), 4, 8], 0)
            .raw();
        a.dcss(0, 0, 1, 4, 8);
        // the first handle is stale now; helping it must not touch anything
        a.dcss_help(old);
        assert_eq!(a.read(1), 8);
    }

    #[test]
    fn concurrent_dcss_counter_is_linearizable() {
        // word 1 counts in steps of 4 while word 0 stays 0; every successful
        // DCSS saw a distinct counter value and together they cover 0..final
        let a = KcasArray::new(2);
        // all threads stay alive together, so none inherits another's slots
        let b = std::sync::Barrier::new(4);
        let logs: Vec<Vec<usize>> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..4)
                .map(|_| {
                    s.spawn(|| {
                        b.wait();
                        let mut seen = vec![];
                        for _ in 0..20_000 {
                            let v = a.read(1);
                            if a.dcss(0, 0, 1, v, v + 4) == v {
                                seen.push(v);
                            }
                        }
                        b.wait();
                        seen
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut all: Vec<usize> = logs.concat();
        all.sort_unstable();
        let n = all.len();
        assert_eq!(all, (0..n).map(|i| 4 * i).collect::<Vec<_>>());
        assert_eq!(a.read(1), 4 * n);
        assert_eq!(a.slots(), 4);
    }

    #[test]
    fn concurrent_kcas_sum_law() {
        let a = KcasArray::new(64);
        let k = 8;
        let b = std::sync::Barrier::new(4);
        let ok: usize = std::thread::scope(|s| {
            let hs: Vec<_> = (0..4u64)
                .map(|t| {
                    let (a, b) = (&a, &b);
                    s.spawn(move || {
                        b.wait();
                        let mut rng = rand::rngs::StdRng::seed_from_u64(t);
                        let mut ok = 0;
                        for _ in 0..20_000 {
                            let idx = sample(&mut rng, a.len(), k);
                            let es: Vec<KcasEntry> = idx
                                .iter()
                                .map(|i| {
                                    let v = a.read(i);
                                    e(i, v, v + 4)
                                })
                                .collect();
                            if a.kcas(&es) {
                                ok += 1;
                            }
                            if rng.gen_bool(0.01) {
                                std::thread::yield_now();
                            }
                        }
                        b.wait();
                        ok
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(a.sum(), 4 * k * ok);
        assert_eq!(a.slots(), 2 * 4);
    }

    #[test]
    fn failed_kcas_restores_words() {
        let a = KcasArray::new(4);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..10_000 {
                        // always fails on word 3, which is never 4
                        assert!(!a.kcas(&[e(0, 0, 8), e(1, 0, 8), e(3, 4, 8)]));
                    }
                });
            }
        });
        assert_eq!(a.sum(), 0);
    }
}
