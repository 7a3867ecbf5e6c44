//! Extended weak descriptors backed by one reusable slot per process.
//!
//! A slot holds a sequence number packed with the descriptor's mutable fields
//! in a single word, plus an array of immutable words. [`DescTable::create_new`]
//! bumps the sequence number to an odd value, rewrites the immutables and
//! bumps it again to an even value. A [`Handle`] names one incarnation of a
//! slot; once the owner creates a new descriptor, every operation through an
//! older handle reports invalid or returns the caller's default.

use crate::registry::{self, PerProcess, PID_BITS};
use crate::shim::{AtomicUsize, SeqCst};

pub const FLAG_BITS: u32 = 2;
pub const FLAG_MASK: usize = (1 << FLAG_BITS) - 1;
const PID_SHIFT: u32 = FLAG_BITS;
const SEQ_SHIFT: u32 = FLAG_BITS + PID_BITS;
/// Bits available to a descriptor type's mutable fields.
pub const MUTABLE_BITS: u32 = SEQ_SHIFT;
const MUT_MASK: usize = (1 << MUTABLE_BITS) - 1;

/// Packed `seq | pid | flags` word naming one abstract descriptor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Handle(usize);

impl Handle {
    pub fn new(flags: usize, pid: usize, seq: usize) -> Handle {
        debug_assert!(flags <= FLAG_MASK && pid < 1 << PID_BITS);
        Handle(seq << SEQ_SHIFT | pid << PID_SHIFT | flags)
    }
    pub fn from_raw(w: usize) -> Handle {
        Handle(w)
    }
    pub fn raw(self) -> usize {
        self.0
    }
    pub fn flags(self) -> usize {
        self.0 & FLAG_MASK
    }
    pub fn pid(self) -> usize {
        (self.0 >> PID_SHIFT) & ((1 << PID_BITS) - 1)
    }
    pub fn seq(self) -> usize {
        self.0 >> SEQ_SHIFT
    }
}

/// A bit range inside the packed mutables word.
#[derive(Clone, Copy, Debug)]
pub struct Field {
    pub shift: u32,
    pub bits: u32,
}

impl Field {
    pub const fn new(shift: u32, bits: u32) -> Field {
        assert!(shift + bits <= MUTABLE_BITS);
        Field { shift, bits }
    }
    fn mask(self) -> usize {
        ((1usize << self.bits) - 1) << self.shift
    }
    fn get(self, m: usize) -> usize {
        (m & self.mask()) >> self.shift
    }
    fn set(self, m: usize, v: usize) -> usize {
        debug_assert!(v < 1 << self.bits);
        (m & !self.mask()) | (v << self.shift)
    }
}

/// Returned by operations on a handle whose descriptor has been reused.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Invalid;

// Two cache lines, so neighbouring slots never share one.
#[repr(align(128))]
pub struct Slot<const N: usize> {
    mutables: AtomicUsize,
    imm: [AtomicUsize; N],
}

impl<const N: usize> Slot<N> {
    fn new() -> Self {
        Slot {
            mutables: AtomicUsize::new(0),
            imm: std::array::from_fn(|_| AtomicUsize::new(0)),
        }
    }
}

fn seq_of(m: usize) -> usize {
    m >> SEQ_SHIFT
}

/// One descriptor type: a slot per process holding `N` immutable words.
pub struct DescTable<const N: usize> {
    flags: usize,
    slots: PerProcess<Slot<N>>,
}

impl<const N: usize> DescTable<N> {
    /// `flags` is stamped into the low bits of every handle of this type.
    pub fn new(flags: usize) -> Self {
        assert!(flags <= FLAG_MASK);
        DescTable {
            flags,
            slots: PerProcess::new(),
        }
    }

    /// Number of slots allocated so far (at most one per process).
    pub fn allocated(&self) -> usize {
        self.slots.allocated()
    }

    /// Starts a new descriptor in the caller's slot, invalidating the previous one.
    pub fn create_new(&self, imm: &[usize], mutables: usize) -> Handle {
        assert!(imm.len() <= N);
        debug_assert!(mutables <= MUT_MASK);
        let pid = registry::current();
        let slot = self.slots.get_or_init(pid, Slot::new);
        let seq = seq_of(slot.mutables.load(SeqCst));
        slot.mutables.store((seq + 1) << SEQ_SHIFT, SeqCst);
        for (cell, &v) in slot.imm.iter().zip(imm) {
            cell.store(v, SeqCst);
        }
        slot.mutables
            .store((seq + 2) << SEQ_SHIFT | mutables, SeqCst);
        Handle::new(self.flags, pid, seq + 2)
    }

    fn slot(&self, h: Handle) -> Option<&Slot<N>> {
        self.slots.get(h.pid())
    }

    /// Reads one mutable field, or `default` if `h` is stale.
    pub fn read_field(&self, h: Handle, f: Field, default: usize) -> usize {
        match self.slot(h) {
            Some(s) => {
                let m = s.mutables.load(SeqCst);
                if seq_of(m) == h.seq() {
                    f.get(m)
                } else {
                    default
                }
            }
            None => default,
        }
    }

    /// Reads one immutable word.
    pub fn read_immutable(&self, h: Handle, i: usize) -> Result<usize, Invalid> {
        let s = self.slot(h).ok_or(Invalid)?;
        if seq_of(s.mutables.load(SeqCst)) != h.seq() {
            return Err(Invalid);
        }
        let v = s.imm[i].load(SeqCst);
        if seq_of(s.mutables.load(SeqCst)) != h.seq() {
            return Err(Invalid);
        }
        Ok(v)
    }

    /// Copies the first `out.len()` immutable words, all or nothing.
    pub fn read_immutables(&self, h: Handle, out: &mut [usize]) -> Result<(), Invalid> {
        let s = self.slot(h).ok_or(Invalid)?;
        if seq_of(s.mutables.load(SeqCst)) != h.seq() {
            return Err(Invalid);
        }
        for (o, cell) in out.iter_mut().zip(s.imm.iter()) {
            *o = cell.load(SeqCst);
        }
        if seq_of(s.mutables.load(SeqCst)) != h.seq() {
            return Err(Invalid);
        }
        Ok(())
    }

    /// Stores `v` into field `f`; no effect if `h` is stale.
    pub fn write_field(&self, h: Handle, f: Field, v: usize) {
        let Some(s) = self.slot(h) else { return };
        let mut m = s.mutables.load(SeqCst);
        loop {
            if seq_of(m) != h.seq() {
                return;
            }
            match s.mutables.compare_exchange(m, f.set(m, v), SeqCst, SeqCst) {
                Ok(_) => return,
                Err(cur) => m = cur,
            }
        }
    }

    /// CAS on one field; returns the value seen before the attempt.
    pub fn cas_field(&self, h: Handle, f: Field, exp: usize, new: usize) -> Result<usize, Invalid> {
        let s = self.slot(h).ok_or(Invalid)?;
        let mut m = s.mutables.load(SeqCst);
        loop {
            if seq_of(m) != h.seq() {
                return Err(Invalid);
            }
            let cur = f.get(m);
            if cur != exp {
                return Ok(cur);
            }
            match s
                .mutables
                .compare_exchange(m, f.set(m, new), SeqCst, SeqCst)
            {
                Ok(_) => return Ok(cur),
                Err(c) => m = c,
            }
        }
    }
}
