//! Exhaustive interleaving checks of LLX/SCX under loom.
//!
//! Run with `RUSTFLAGS="--cfg loom" cargo test -p llxscx --release --test loom_scx`.
//! Every execution records an invocation/response history of small
//! operations built from LLX and SCX over three one-field records. A brute
//! force search then looks for a sequential order that respects real time
//! and reproduces every result. Each execution also checks that a record's
//! info word takes a fresh value whenever one of its fields changes.
//!
//! Enumeration is exhaustive up to a preemption bound: 3 for two threads,
//! 2 for three. `LOOM_MAX_PREEMPTIONS` overrides it for every test.
#![cfg(loom)]

use std::sync::atomic::{AtomicUsize as StdAtomic, Ordering::SeqCst};
use std::sync::Mutex as StdMutex;

use llxscx::llx::{AtomicUsize, Header, Linked, Llx, Record, Scx, ScxArgs};
use loom::sync::Arc;

struct Rec {
    hdr: Header,
    f: [AtomicUsize; 1],
}

impl Rec {
    fn new() -> Rec {
        Rec {
            hdr: Header::new(),
            f: [AtomicUsize::new(0)],
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    /// LLX alone: the field value, or finalized.
    Read(usize),
    /// r.f += 1 with V = <r>.
    Inc(usize),
    /// b.f += a.f + 1 with V = <a, b>.
    Add(usize, usize),
    /// p.f += 1 and finalize c, with V = <p, c>, R = <c>.
    Remove(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Res {
    Val(usize),
    Finalized,
}

struct World {
    scx: Scx,
    recs: [Rec; 3],
    clock: StdAtomic,
    log: StdMutex<Vec<(usize, usize, Op, Res)>>,
}

impl World {
    fn new() -> World {
        World {
            scx: Scx::with_history(),
            recs: [Rec::new(), Rec::new(), Rec::new()],
            clock: StdAtomic::new(0),
            log: StdMutex::new(vec![]),
        }
    }

    fn llx(&self, i: usize) -> Option<Result<(Linked, usize), Res>> {
        let mut out = [0];
        match self.scx.llx(&self.recs[i], &mut out) {
            Llx::Snapshot(l) => Some(Ok((l, out[0]))),
            Llx::Finalized => Some(Err(Res::Finalized)),
            Llx::Fail => None,
        }
    }

    fn attempt(&self, op: Op) -> Option<Res> {
        let (v, r, owner, old, new) = match op {
            Op::Read(i) => {
                return self.llx(i).map(|s| match s {
                    Ok((_, x)) => Res::Val(x),
                    Err(e) => e,
                })
            }
            Op::Inc(i) => {
                let (l, x) = match self.llx(i)? {
                    Ok(s) => s,
                    Err(e) => return Some(e),
                };
                (vec![(l, i)], 0, 0, x, x + 1)
            }
            Op::Add(a, b) | Op::Remove(a, b) => {
                let (la, xa) = match self.llx(a)? {
                    Ok(s) => s,
                    Err(e) => return Some(e),
                };
                let (lb, xb) = match self.llx(b)? {
                    Ok(s) => s,
                    Err(e) => return Some(e),
                };
                // V follows record index order, as lock-free progress requires
                let (v, ia, ib) = if a < b {
                    (vec![(la, a), (lb, b)], 0, 1)
                } else {
                    (vec![(lb, b), (la, a)], 1, 0)
                };
                if let Op::Add(..) = op {
                    (v, 0, ib, xb, xb + xa + 1)
                } else {
                    (v, 1 << ib, ia, xa, xa + 1)
                }
            }
        };
        let links: Vec<Linked> = v.iter().map(|e| e.0).collect();
        let fld = &self.recs[v[owner].1].f[0];
        let args = ScxArgs {
            v: &links,
            r,
            owner,
            fld,
            old,
            new,
        };
        self.scx.scx(&args).then_some(Res::Val(old))
    }

    fn run(&self, op: Op) {
        let inv = self.clock.fetch_add(1, SeqCst);
        let res = loop {
            if let Some(r) = self.attempt(op) {
                break r;
            }
        };
        let resp = self.clock.fetch_add(1, SeqCst);
        self.log.lock().unwrap().push((inv, resp, op, res));
    }
}

/// Sequential specification.
fn apply(state: &mut [(usize, bool); 3], op: Op) -> Res {
    let fin = |i: usize, s: &[(usize, bool); 3]| s[i].1;
    match op {
        Op::Read(i) | Op::Inc(i) if fin(i, state) => Res::Finalized,
        Op::Read(i) => Res::Val(state[i].0),
        Op::Inc(i) => {
            state[i].0 += 1;
            Res::Val(state[i].0 - 1)
        }
        Op::Add(a, b) | Op::Remove(a, b) if fin(a, state) || fin(b, state) => Res::Finalized,
        Op::Add(a, b) => {
            let old = state[b].0;
            state[b].0 += state[a].0 + 1;
            Res::Val(old)
        }
        Op::Remove(p, c) => {
            state[p].0 += 1;
            state[c].1 = true;
            Res::Val(state[p].0 - 1)
        }
    }
}

fn linearizable(h: &[(usize, usize, Op, Res)]) -> bool {
    fn go(h: &[(usize, usize, Op, Res)], used: &mut Vec<bool>, state: [(usize, bool); 3]) -> bool {
        if used.iter().all(|&u| u) {
            return true;
        }
        for i in 0..h.len() {
            if used[i] {
                continue;
            }
            // i may go next only if no pending op finished before i started
            let minimal = (0..h.len()).all(|j| used[j] || j == i || h[j].1 > h[i].0);
            if !minimal {
                continue;
            }
            let mut s = state;
            if apply(&mut s, h[i].2) == h[i].3 {
                used[i] = true;
                if go(h, used, s) {
                    return true;
                }
                used[i] = false;
            }
        }
        false
    }
    go(h, &mut vec![false; h.len()], [(0, false); 3])
}

/// Preemption bound: `LOOM_MAX_PREEMPTIONS` if set, else `default`.
fn bound(default: usize) -> Option<usize> {
    Some(
        std::env::var("LOOM_MAX_PREEMPTIONS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(default),
    )
}

fn check(threads: Vec<Vec<Op>>, preemptions: Option<usize>) {
    let mut b = loom::model::Builder::new();
    b.preemption_bound = preemptions;
    b.max_branches = 1_000_000;
    let execs = std::sync::Arc::new(StdAtomic::new(0));
    let counter = execs.clone();
    b.check(move || {
        counter.fetch_add(1, SeqCst);
        let w = Arc::new(World::new());
        let hs: Vec<_> = threads
            .iter()
            .cloned()
            .map(|ops| {
                let w = w.clone();
                loom::thread::spawn(move || {
                    for op in ops {
                        w.run(op);
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        let log = w.log.lock().unwrap();
        assert!(linearizable(&log), "no linearization for {log:?}");
        assert_eq!(w.scx.history_violations(), 0, "info reused across a change");
    });
    println!("{} executions", execs.load(SeqCst));
}

#[test]
fn sequential_spec_sanity() {
    let h = [
        (0, 1, Op::Inc(0), Res::Val(0)),
        (2, 3, Op::Inc(0), Res::Val(0)),
    ];
    assert!(!linearizable(&h));
    let h = [
        (0, 3, Op::Inc(0), Res::Val(1)),
        (1, 2, Op::Inc(0), Res::Val(0)),
    ];
    assert!(linearizable(&h));
}

#[test]
fn two_incs_one_record() {
    check(vec![vec![Op::Inc(0)], vec![Op::Inc(0)]], bound(3));
}

#[test]
fn add_against_inc_and_read() {
    check(
        vec![vec![Op::Add(0, 1)], vec![Op::Inc(0), Op::Read(1)]],
        bound(3),
    );
}

#[test]
fn remove_against_read_and_inc() {
    check(
        vec![vec![Op::Remove(0, 1)], vec![Op::Read(1), Op::Inc(1)]],
        bound(3),
    );
}

#[test]
fn crossing_adds_two_ops_each() {
    check(
        vec![
            vec![Op::Add(0, 1), Op::Read(0)],
            vec![Op::Add(1, 0), Op::Read(1)],
        ],
        bound(3),
    );
}

#[test]
fn three_threads_over_a_chain() {
    check(
        vec![
            vec![Op::Remove(0, 1), Op::Inc(0)],
            vec![Op::Add(1, 2), Op::Read(2)],
            vec![Op::Inc(2), Op::Read(1)],
        ],
        bound(2),
    );
}

#[test]
fn three_threads_one_op_each() {
    check(
        vec![
            vec![Op::Remove(0, 1)],
            vec![Op::Add(1, 2)],
            vec![Op::Inc(2)],
        ],
        bound(2),
    );
}
