//! LLX, SCX and VLX over data records, from single-word CAS.
//!
//! Each record carries an `info` word and a `marked` bit. `info` holds either
//! [`DUMMY_INFO`] (a pre-committed descriptor every record starts with) or
//! the [`Handle`] of the SCX that last froze it. SCX descriptors live in a
//! per-process slot of the owning [`Scx`] domain and are reused, so helpers
//! validate every descriptor read and give up once the slot has moved on.

use crate::descriptor::{DescTable, Field, Handle};
use crate::shim::{AtomicBool, Mutex, SeqCst};
use std::collections::HashMap;

/// The word type of record fields (a fenced loom atomic under `--cfg loom`).
pub use crate::shim::AtomicUsize;

/// Longest V sequence an SCX accepts.
pub const MAX_V: usize = 8;

/// Info value of a record no SCX has frozen yet. Reads as Committed.
pub const DUMMY_INFO: usize = 0;

const SCX_FLAG: usize = 0b01;

// immutables: [len | r << 8 | owner << 16, fld, old, new, v.., info..]
const IMM_WORDS: usize = 4 + 2 * MAX_V;

const STATE: Field = Field::new(0, 2);
const ALL_FROZEN: Field = Field::new(2, 1);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum State {
    InProgress,
    Committed,
    Aborted,
}

impl State {
    fn from_bits(b: usize) -> State {
        match b {
            0 => State::InProgress,
            1 => State::Committed,
            _ => State::Aborted,
        }
    }
    fn bits(self) -> usize {
        self as usize
    }
}

/// Synchronization fields of a data record.
#[derive(Debug)]
pub struct Header {
    info: AtomicUsize,
    marked: AtomicBool,
    #[cfg(debug_assertions)]
    retired: AtomicBool,
}

impl Default for Header {
    fn default() -> Self {
        Header::new()
    }
}

impl Header {
    pub fn new() -> Header {
        Header {
            info: AtomicUsize::new(DUMMY_INFO),
            marked: AtomicBool::new(false),
            #[cfg(debug_assertions)]
            retired: AtomicBool::new(false),
        }
    }
    #[cfg(debug_assertions)]
    pub(crate) fn note_retired(&self) -> bool {
        !self.retired.swap(true, SeqCst)
    }
    pub fn is_marked(&self) -> bool {
        self.marked.load(SeqCst)
    }
    pub fn info(&self) -> usize {
        self.info.load(SeqCst)
    }
}

/// A record whose mutable fields are single words.
pub trait Record {
    fn header(&self) -> &Header;
    fn fields(&self) -> &[AtomicUsize];
}

/// What SCX and VLX need from a successful LLX.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Linked {
    hdr: usize,
    info: usize,
}

impl Linked {
    /// Address of the record's header, used as its identity.
    pub fn id(&self) -> usize {
        self.hdr
    }
    pub fn info(&self) -> usize {
        self.info
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Llx {
    Snapshot(Linked),
    Fail,
    Finalized,
}

/// Arguments of one SCX.
///
/// `r` is a bitmask over positions of `v`. `fld` is a mutable field of
/// `v[owner]`, expected to still hold `old`.
pub struct ScxArgs<'a> {
    pub v: &'a [Linked],
    pub r: u32,
    pub owner: usize,
    pub fld: &'a AtomicUsize,
    pub old: usize,
    pub new: usize,
}

#[derive(Default)]
struct History {
    seen: HashMap<usize, Vec<usize>>,
    last_change: HashMap<usize, usize>,
    violations: usize,
}

/// An LLX/SCX domain: the descriptor slots used by one structure.
pub struct Scx {
    table: DescTable<IMM_WORDS>,
    finalized: AtomicUsize,
    history: Option<Mutex<History>>,
}

impl Default for Scx {
    fn default() -> Self {
        Scx::new()
    }
}

impl Scx {
    pub fn new() -> Scx {
        Scx {
            table: DescTable::new(SCX_FLAG),
            finalized: AtomicUsize::new(0),
            history: None,
        }
    }

    /// A domain that records every info value and field change, to check
    /// that a record's info gets a fresh value between field changes.
    pub fn with_history() -> Scx {
        Scx {
            history: Some(Mutex::new(History::default())),
            ..Scx::new()
        }
    }

    /// Number of records marked so far.
    pub fn finalized(&self) -> usize {
        self.finalized.load(SeqCst)
    }

    /// Descriptor slots allocated so far.
    pub fn slots(&self) -> usize {
        self.table.allocated()
    }

    /// Violations of the fresh-info property seen by a history domain.
    pub fn history_violations(&self) -> usize {
        self.history
            .as_ref()
            .map_or(0, |h| h.lock().unwrap().violations)
    }

    fn state_of(&self, info: usize) -> State {
        if info & SCX_FLAG == 0 {
            return State::Committed;
        }
        // a reused descriptor belongs to a finished SCX
        State::from_bits(self.table.read_field(
            Handle::from_raw(info),
            STATE,
            State::Committed.bits(),
        ))
    }

    /// Snapshot of `r`'s mutable fields into `out`.
    pub fn llx<R: Record + ?Sized>(&self, r: &R, out: &mut [usize]) -> Llx {
        let h = r.header();
        let marked1 = h.marked.load(SeqCst);
        let rinfo = h.info.load(SeqCst);
        let state = self.state_of(rinfo);
        let marked2 = h.marked.load(SeqCst);
        if state == State::Aborted || (state == State::Committed && !marked2) {
            for (o, f) in out.iter_mut().zip(r.fields()) {
                *o = f.load(SeqCst);
            }
            if h.info.load(SeqCst) == rinfo {
                return Llx::Snapshot(Linked {
                    hdr: h as *const Header as usize,
                    info: rinfo,
                });
            }
        }
        if (state == State::Committed || (state == State::InProgress && self.help(rinfo)))
            && marked1
        {
            return Llx::Finalized;
        }
        let cur = h.info.load(SeqCst);
        if self.state_of(cur) == State::InProgress {
            self.help(cur);
        }
        Llx::Fail
    }

    /// True iff no record in `v` changed since its linked LLX.
    pub fn vlx(&self, v: &[Linked]) -> bool {
        v.iter()
            .all(|l| unsafe { &*(l.hdr as *const Header) }.info.load(SeqCst) == l.info)
    }

    pub fn scx(&self, a: &ScxArgs) -> bool {
        let len = a.v.len();
        assert!(len > 0 && len <= MAX_V, "V must hold 1..={MAX_V} records");
        assert!(
            a.owner < len && a.r >> len == 0,
            "owner and R must index into V"
        );
        debug_assert_ne!(a.old, a.new, "SCX must change its field");
        let mut imm = [0usize; IMM_WORDS];
        imm[0] = len | (a.r as usize) << 8 | a.owner << 16;
        imm[1] = a.fld as *const AtomicUsize as usize;
        imm[2] = a.old;
        imm[3] = a.new;
        for (i, l) in a.v.iter().enumerate() {
            imm[4 + i] = l.hdr;
            imm[4 + MAX_V + i] = l.info;
        }
        let h = self.table.create_new(&imm, State::InProgress.bits());
        self.help(h.raw())
    }

    /// Drives the SCX named by `info` to completion; true iff it committed.
    fn help(&self, info: usize) -> bool {
        let h = Handle::from_raw(info);
        let mut imm = [0usize; IMM_WORDS];
        if self.table.read_immutables(h, &mut imm).is_err() {
            return true;
        }
        let len = imm[0] & 0xff;
        let r = (imm[0] >> 8) & 0xff;
        let owner = imm[0] >> 16;
        let fld = unsafe { &*(imm[1] as *const AtomicUsize) };
        let (old, new) = (imm[2], imm[3]);
        let hdr = |i: usize| unsafe { &*(imm[4 + i] as *const Header) };

        for i in 0..len {
            let rec = hdr(i);
            match rec
                .info
                .compare_exchange(imm[4 + MAX_V + i], info, SeqCst, SeqCst)
            {
                Ok(_) => self.note_info(imm[4 + i], info),
                Err(cur) if cur != info => {
                    if self.table.read_field(h, ALL_FROZEN, 0) == 1 {
                        return true;
                    }
                    self.table.write_field(h, STATE, State::Aborted.bits());
                    return false;
                }
                Err(_) => {}
            }
        }
        self.table.write_field(h, ALL_FROZEN, 1);
        for i in 0..len {
            if r & (1 << i) != 0 && !hdr(i).marked.swap(true, SeqCst) {
                self.finalized.fetch_add(1, SeqCst);
            }
        }
        if fld.compare_exchange(old, new, SeqCst, SeqCst).is_ok() {
            // fld only changes while the owner is frozen by this SCX
            self.note_change(imm[4 + owner], info);
        }
        self.table.write_field(h, STATE, State::Committed.bits());
        true
    }

    fn note_info(&self, rec: usize, info: usize) {
        if let Some(m) = &self.history {
            let mut hist = m.lock().unwrap();
            let seen = hist.seen.entry(rec).or_default();
            let dup = seen.contains(&info);
            seen.push(info);
            if dup {
                hist.violations += 1;
            }
        }
    }

    fn note_change(&self, rec: usize, info: usize) {
        if let Some(m) = &self.history {
            let mut hist = m.lock().unwrap();
            if hist.last_change.insert(rec, info) == Some(info) {
                hist.violations += 1;
            }
        }
    }

    /// Forgets history for a record about to be freed, since its address may be reused.
    pub fn forget(&self, hdr: &Header) {
        if let Some(m) = &self.history {
            let key = hdr as *const Header as usize;
            let mut hist = m.lock().unwrap();
            hist.seen.remove(&key);
            hist.last_change.remove(&key);
        }
    }
}

#[cfg(all(test, not(loom)))]
mod tests {
    use super::*;
    use std::sync::Arc;

    struct Rec {
        hdr: Header,
        f: [AtomicUsize; 2],
    }

    impl Rec {
        fn new(a: usize, b: usize) -> Rec {
            Rec {
                hdr: Header::new(),
                f: [AtomicUsize::new(a), AtomicUsize::new(b)],
            }
        }
    }

    impl Record for Rec {
        fn header(&self) -> &Header {
            &self.hdr
        }
        fn fields(&self) -> &[AtomicUsize] {
            &self.f
        }
    }

    fn snap(d: &Scx, r: &Rec) -> (Linked, [usize; 2]) {
        let mut out = [0; 2];
        match d.llx(r, &mut out) {
            Llx::Snapshot(l) => (l, out),
            other => panic!("expected snapshot, got {other:?}"),
        }
    }

    #[test]
    fn fresh_record_snapshots() {
        let d = Scx::new();
        let a = Rec::new(3, 4);
        let (l, v) = snap(&d, &a);
        assert_eq!(v, [3, 4]);
        assert_eq!(l.info(), DUMMY_INFO);
    }

    #[test]
    fn uncontended_scx_changes_field() {
        let d = Scx::new();
        let a = Rec::new(0, 0);
        let (l, _) = snap(&d, &a);
        assert!(d.scx(&ScxArgs {
            v: &[l],
            r: 0,
            owner: 0,
            fld: &a.f[0],
            old: 0,
            new: 5
        }));
        assert_eq!(snap(&d, &a).1, [5, 0]);
        assert_eq!(d.finalized(), 0);
    }

    #[test]
    fn stale_link_fails_and_leaves_record_alone() {
        let d = Scx::new();
        let a = Rec::new(0, 0);
        let (stale, _) = snap(&d, &a);
        let (l, _) = snap(&d, &a);
        assert!(d.scx(&ScxArgs {
            v: &[l],
            r: 0,
            owner: 0,
            fld: &a.f[0],
            old: 0,
            new: 1
        }));
        assert!(!d.scx(&ScxArgs {
            v: &[stale],
            r: 0,
            owner: 0,
            fld: &a.f[1],
            old: 0,
            new: 9
        }));
        assert_eq!(snap(&d, &a).1, [1, 0]);
    }

    #[test]
    fn removed_record_reports_finalized() {
        let d = Scx::new();
        let (p, c) = (Rec::new(0, 0), Rec::new(0, 0));
        let (lp, _) = snap(&d, &p);
        let (lc, _) = snap(&d, &c);
        assert!(d.scx(&ScxArgs {
            v: &[lp, lc],
            r: 0b10,
            owner: 0,
            fld: &p.f[0],
            old: 0,
            new: 7
        }));
        assert_eq!(d.llx(&c, &mut [0; 2]), Llx::Finalized);
        assert!(matches!(d.llx(&p, &mut [0; 2]), Llx::Snapshot(_)));
        assert_eq!(d.finalized(), 1);
    }

    #[test]
    fn vlx_detects_changes() {
        let d = Scx::new();
        let (a, b) = (Rec::new(0, 0), Rec::new(0, 0));
        let (la, _) = snap(&d, &a);
        let (lb, _) = snap(&d, &b);
        assert!(d.vlx(&[]));
        assert!(d.vlx(&[la, lb]));
        let (la2, _) = snap(&d, &a);
        assert!(d.scx(&ScxArgs {
            v: &[la2],
            r: 0,
            owner: 0,
            fld: &a.f[0],
            old: 0,
            new: 1
        }));
        assert!(!d.vlx(&[la, lb]));
        assert!(d.vlx(&[lb]));
    }

    #[test]
    fn helping_a_finished_descriptor_is_idempotent() {
        let d = Scx::new();
        let a = Rec::new(0, 0);
        let (l, _) = snap(&d, &a);
        assert!(d.scx(&ScxArgs {
            v: &[l],
            r: 0,
            owner: 0,
            fld: &a.f[0],
            old: 0,
            new: 1
        }));
        let info = a.hdr.info();
        assert!(d.help(info));
        assert!(d.help(info));
        assert_eq!(a.f[0].load(SeqCst), 1);
        assert_eq!(d.state_of(info), State::Committed);
    }

    #[test]
    fn descriptor_reuse_keeps_one_slot_per_thread() {
        let d = Scx::new();
        let a = Rec::new(0, 0);
        for i in 0..100 {
            let (l, _) = snap(&d, &a);
            assert!(d.scx(&ScxArgs {
                v: &[l],
                r: 0,
                owner: 0,
                fld: &a.f[0],
                old: i,
                new: i + 1
            }));
        }
        assert_eq!(d.slots(), 1);
    }

    #[test]
    fn concurrent_counter_increments_are_exact() {
        // each thread adds 1 to field 0 via LLX/SCX; no increment may be lost
        let d = Arc::new(Scx::with_history());
        let a = Arc::new(Rec::new(0, 0));
        let per = 2000;
        let hs: Vec<_> = (0..4)
            .map(|_| {
                let (d, a) = (d.clone(), a.clone());
                std::thread::spawn(move || {
                    let mut done = 0;
                    let mut attempts = 0u64;
                    while done < per {
                        attempts += 1;
                        let mut out = [0; 2];
                        if let Llx::Snapshot(l) = d.llx(&*a, &mut out) {
                            let args = ScxArgs {
                                v: &[l],
                                r: 0,
                                owner: 0,
                                fld: &a.f[0],
                                old: out[0],
                                new: out[0] + 1,
                            };
                            if d.scx(&args) {
                                done += 1;
                            }
                        }
                    }
                    attempts
                })
            })
            .collect();
        let attempts: u64 = hs.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(a.f[0].load(SeqCst), 4 * per);
        assert_eq!(d.history_violations(), 0);
        // progress: plenty of successes per attempt
        assert!(attempts < 4 * per as u64 * 10_000);
    }
}
