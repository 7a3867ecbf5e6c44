//! Lock-free relaxed AVL tree (leaf-oriented, tag-based relaxation).
//!
//! Each node carries a tag and its relaxed balance factor. The relaxed
//! height of a leaf is its tag; of an internal node, one more than its
//! taller child plus its tag. Nonzero tags below the root are violations:
//! a tag of -1 is one negative violation, a tag `t > 0` is `t` positive ones.

use crate::bst::{old, Builder, Core, Ctx, Plan, Reader, Side, Snap};
use crate::key::Key;
use crate::llx::Scx;
use crate::reclaim::{Collector, Guard};
use crate::stats::{DepthAcc, Report, TreeStats};
use crate::stw;

/// Tag and relaxed balance factor (left minus right relaxed height).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Tag {
    pub t: i32,
    pub b: i8,
}

type S<K, V> = Snap<K, V, Tag>;
type P<K, V> = Plan<K, V, Tag>;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum Step {
    R3,
    R3_5,
    R3_6,
    R3_7,
    R3_8,
    R4,
    R4_9,
    R4_10,
    R4_11,
    R4_12,
    R4_13,
}

impl Step {
    pub const ALL: [Step; 11] = [
        Step::R3,
        Step::R3_5,
        Step::R3_6,
        Step::R3_7,
        Step::R3_8,
        Step::R4,
        Step::R4_9,
        Step::R4_10,
        Step::R4_11,
        Step::R4_12,
        Step::R4_13,
    ];
}

/// A step and the side of `u` the violation was found on (`R` = sym).
pub type Applied = (Step, Side);

fn ind(c: bool) -> i32 {
    c as i32
}

/// Balance factor of `n` seen from side `d`: positive when `d` is taller.
fn bd<K, V>(d: Side, n: &S<K, V>) -> i32 {
    match d {
        Side::L => n.meta.b as i32,
        Side::R => -(n.meta.b as i32),
    }
}

fn tag(d: Side, t: i32, bd: i32) -> Tag {
    debug_assert!((-1..=1).contains(&bd));
    let b = if d == Side::L { bd } else { -bd } as i8;
    Tag { t, b }
}

fn retag<K, V>(n: &S<K, V>, t: i32) -> Tag {
    Tag { t, b: n.meta.b }
}

/// Picks and builds the step for the violation at `v`, child of `u`,
/// whose parent is `pu`. Reads every node it inspects through `r`.
pub(crate) fn plan_step<K: Key, V: Copy, R: Reader<K, V, Tag>>(
    r: &mut R,
    pu: usize,
    u: usize,
    v: usize,
) -> Option<(P<K, V>, Applied)> {
    let ps = r.read(pu)?;
    ps.side_of(u)?;
    let us = r.read(u)?;
    let d = us.side_of(v)?;
    let vs = r.read(v)?;
    if us.meta.t < 0 {
        return None;
    }
    let root = ps.key == K::MAX;
    if vs.meta.t < 0 {
        negative(r, root, d, &ps, &us, &vs)
    } else if vs.meta.t > 0 {
        positive(r, root, d, &ps, &us, &vs)
    } else {
        None
    }
}

fn negative<K: Key, V: Copy, R: Reader<K, V, Tag>>(
    r: &mut R,
    root: bool,
    d: Side,
    pu: &S<K, V>,
    u: &S<K, V>,
    v: &S<K, V>,
) -> Option<(P<K, V>, Applied)> {
    let o = d.flip();
    let top = |t: i32| if root { 0 } else { t };
    let tu = u.meta.t;
    let mut b = Builder::new(d);
    if v.is_leaf() {
        return None;
    }
    if bd(d, u) <= 0 {
        let nv = b.copy(v, retag(v, 0));
        let t = b.inner(
            u.key,
            tag(d, top(tu - 1 + ind(bd(d, u) == -1)), bd(d, u) + 1),
            nv,
            old(u.child(o)),
        );
        return Some((
            b.plan(pu.id, u.id, vec![pu.id, u.id, v.id], vec![u.id, v.id], t),
            (Step::R3, d),
        ));
    }
    if bd(d, v) >= 0 {
        let nu = b.inner(
            u.key,
            tag(d, 0, 1 - bd(d, v)),
            old(v.child(o)),
            old(u.child(o)),
        );
        let t = b.inner(
            v.key,
            tag(d, top(tu + bd(d, v) - 1), bd(d, v) - 1),
            old(v.child(d)),
            nu,
        );
        return Some((
            b.plan(pu.id, u.id, vec![pu.id, u.id, v.id], vec![u.id, v.id], t),
            (Step::R3_5, d),
        ));
    }
    let w = r.read(v.child(o))?;
    let vv = vec![pu.id, u.id, v.id, w.id];
    let rr = vec![u.id, v.id, w.id];
    if w.meta.t > 0 {
        let nw = b.copy(&w, retag(&w, w.meta.t - 1));
        let nv = b.inner(v.key, tag(d, 0, 0), old(v.child(d)), nw);
        let t = b.inner(u.key, tag(d, top(tu), 1), nv, old(u.child(o)));
        return Some((b.plan(pu.id, u.id, vv, rr, t), (Step::R3_6, d)));
    }
    if w.is_leaf() {
        return None;
    }
    let (step, bv, bu, bt, tt) = if w.meta.t == 0 {
        (
            Step::R3_7,
            ind(bd(d, &w) == -1),
            -ind(bd(d, &w) == 1),
            0,
            tu,
        )
    } else {
        (
            Step::R3_8,
            ind(bd(d, &w) == -1) - 1,
            1 - ind(bd(d, &w) == 1),
            bd(d, &w),
            tu - 1,
        )
    };
    let nv = b.inner(v.key, tag(d, 0, bv), old(v.child(d)), old(w.child(d)));
    let nu = b.inner(u.key, tag(d, 0, bu), old(w.child(o)), old(u.child(o)));
    let t = b.inner(w.key, tag(d, top(tt), bt), nv, nu);
    Some((b.plan(pu.id, u.id, vv, rr, t), (step, d)))
}

fn positive<K: Key, V: Copy, R: Reader<K, V, Tag>>(
    r: &mut R,
    root: bool,
    d: Side,
    pu: &S<K, V>,
    u: &S<K, V>,
    v: &S<K, V>,
) -> Option<(P<K, V>, Applied)> {
    let o = d.flip();
    let top = |t: i32| if root { 0 } else { t };
    let tu = u.meta.t;
    let mut b = Builder::new(d);
    if bd(d, u) >= 0 {
        let nv = b.copy(v, retag(v, v.meta.t - 1));
        let t = b.inner(
            u.key,
            tag(d, top(tu + ind(bd(d, u) == 1)), bd(d, u) - 1),
            nv,
            old(u.child(o)),
        );
        return Some((
            b.plan(pu.id, u.id, vec![pu.id, u.id, v.id], vec![u.id, v.id], t),
            (Step::R4, d),
        ));
    }
    let w = r.read(u.child(o))?;
    if w.meta.t < 0 {
        // the sibling's negative violation goes first
        return negative(r, root, o, pu, u, &w);
    }
    let (vv, rr) = if d == Side::L {
        (vec![pu.id, u.id, v.id, w.id], vec![u.id, v.id, w.id])
    } else {
        (vec![pu.id, u.id, w.id, v.id], vec![u.id, w.id, v.id])
    };
    if w.meta.t > 0 {
        let nv = b.copy(v, retag(v, v.meta.t - 1));
        let nw = b.copy(&w, retag(&w, w.meta.t - 1));
        let t = b.inner(u.key, tag(d, top(tu + 1), -1), nv, nw);
        return Some((b.plan(pu.id, u.id, vv, rr, t), (Step::R4_9, d)));
    }
    if w.is_leaf() {
        return None;
    }
    if bd(d, &w) <= 0 {
        let nv = b.copy(v, retag(v, v.meta.t - 1));
        let nu = b.inner(u.key, tag(d, 0, -1 - bd(d, &w)), nv, old(w.child(d)));
        let t = b.inner(
            w.key,
            tag(d, top(tu - bd(d, &w)), 1 + bd(d, &w)),
            nu,
            old(w.child(o)),
        );
        return Some((b.plan(pu.id, u.id, vv, rr, t), (Step::R4_10, d)));
    }
    let x = r.read(w.child(d))?;
    let mut vv = vv;
    vv.push(x.id);
    let mut rr = rr;
    rr.push(x.id);
    let nv = b.copy(v, retag(v, v.meta.t - 1));
    if x.meta.t > 0 {
        let nx = b.copy(&x, retag(&x, x.meta.t - 1));
        let nw = b.inner(w.key, tag(d, 0, 0), nx, old(w.child(o)));
        let t = b.inner(u.key, tag(d, top(tu + 1), -1), nv, nw);
        return Some((b.plan(pu.id, u.id, vv, rr, t), (Step::R4_11, d)));
    }
    if x.is_leaf() {
        return None;
    }
    let (step, bu, bw, bt, tt) = if x.meta.t == 0 {
        (
            Step::R4_12,
            ind(bd(d, &x) == -1),
            -ind(bd(d, &x) == 1),
            0,
            tu + 1,
        )
    } else {
        (
            Step::R4_13,
            ind(bd(d, &x) == -1) - 1,
            1 - ind(bd(d, &x) == 1),
            bd(d, &x),
            tu,
        )
    };
    let nu = b.inner(u.key, tag(d, 0, bu), nv, old(x.child(d)));
    let nw = b.inner(w.key, tag(d, 0, bw), old(x.child(o)), old(w.child(o)));
    let t = b.inner(x.key, tag(d, top(tt), bt), nu, nw);
    Some((b.plan(pu.id, u.id, vv, rr, t), (step, d)))
}

fn violations_of(t: &Tag) -> usize {
    if t.t < 0 {
        1
    } else {
        t.t as usize
    }
}

pub struct Ravl<K, V> {
    core: Core<K, V, Tag>,
    k: usize,
}

impl<K: Key, V: Copy + Send + Sync + 'static> Default for Ravl<K, V> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Key, V: Copy + Send + Sync + 'static> Ravl<K, V> {
    pub fn new() -> Self {
        Self::with_threshold(1)
    }

    pub fn with_threshold(k: usize) -> Self {
        Self::with_parts(Scx::new(), Collector::new(), k)
    }

    pub fn with_parts(scx: Scx, collector: Collector, k: usize) -> Self {
        assert!(k >= 1, "violation threshold must be at least 1");
        Ravl {
            core: Core::new(scx, collector, Tag::default()),
            k,
        }
    }

    pub fn scx(&self) -> &Scx {
        &self.core.scx
    }

    pub fn collector(&self) -> &Collector {
        &self.core.collector
    }

    pub fn get(&self, key: K) -> Option<V> {
        self.core.get(key)
    }

    pub fn successor(&self, key: K) -> Option<(K, V)> {
        self.core.successor(key)
    }

    pub fn insert(&self, key: K, val: V) -> Option<V> {
        assert!(key < K::MAX, "reserved key");
        stw::safepoint(false);
        loop {
            let g = self.core.collector.pin();
            if let Some((prev, violation)) = self.try_insert(key, val, &g) {
                drop(g);
                if violation {
                    self.cleanup(key);
                }
                return prev;
            }
        }
    }

    fn try_insert(&self, key: K, val: V, g: &Guard<'_>) -> Option<(Option<V>, bool)> {
        let [_, _, p, l] = self.core.search(key);
        let mut ctx: Ctx<'_, K, V, Tag> = Ctx::new(&self.core.scx);
        let ps = ctx.llx(p)?;
        ps.side_of(l)?;
        let ls = ctx.llx(l)?;
        let mut b = Builder::new(Side::L);
        let (prev, t, violation) = if ls.key == key {
            (ls.val, b.leaf(key, Some(val), ls.meta), false)
        } else {
            let zero = Tag::default();
            let nl = b.leaf(key, Some(val), zero);
            let lc = b.copy(&ls, zero);
            let t = if ls.key == K::MAX || ps.key == K::MAX {
                0
            } else {
                ls.meta.t - 1
            };
            let meta = Tag { t, b: 0 };
            let top = if key < ls.key {
                b.inner(ls.key, meta, nl, lc)
            } else {
                b.inner(key, meta, lc, nl)
            };
            (None, top, t < 0)
        };
        let plan = b.plan(p, l, vec![p, l], vec![l], t);
        self.core
            .execute(&ctx, &plan, g)
            .then_some((prev, violation))
    }

    pub fn delete(&self, key: K) -> Option<V> {
        assert!(key < K::MAX, "reserved key");
        stw::safepoint(false);
        loop {
            let g = self.core.collector.pin();
            if let Some((prev, violation)) = self.try_delete(key, &g) {
                drop(g);
                if violation {
                    self.cleanup(key);
                }
                return prev;
            }
        }
    }

    fn try_delete(&self, key: K, g: &Guard<'_>) -> Option<(Option<V>, bool)> {
        let [_, gp, p, l] = self.core.search(key);
        if gp == 0 || self.core.n(l).key != key {
            return Some((None, false));
        }
        let mut ctx: Ctx<'_, K, V, Tag> = Ctx::new(&self.core.scx);
        let gs = ctx.llx(gp)?;
        gs.side_of(p)?;
        let ps = ctx.llx(p)?;
        let d = ps.side_of(l)?;
        let ls = ctx.llx(l)?;
        let ss = ctx.llx(ps.child(d.flip()))?;
        // keeps the relaxed height of the removed parent
        let t = if ps.key == K::MAX || gs.key == K::MAX {
            0
        } else {
            ss.meta.t + ps.meta.t + 1 + ind(bd(d, &ps) == 1)
        };
        let mut b = Builder::new(Side::L);
        let top = b.copy(&ss, retag(&ss, t));
        let plan = b.plan(gp, p, vec![gp, p, l, ss.id], vec![p, l, ss.id], top);
        self.core
            .execute(&ctx, &plan, g)
            .then_some((ls.val, t != 0))
    }

    fn violation_at(&self, l: usize) -> usize {
        violations_of(&self.core.n(l).meta)
    }

    /// Fixes violations on the search path for `key`; with threshold `k`
    /// only once `k` are seen, starting from the topmost.
    pub fn cleanup(&self, key: K) {
        loop {
            stw::safepoint(true);
            let g = self.core.collector.pin();
            let mut path = vec![self.core.entry];
            let (mut seen, mut first) = (0, None);
            loop {
                let p = *path.last().unwrap();
                let pn = self.core.n(p);
                if pn.is_leaf() {
                    return;
                }
                let l = if key < pn.key { pn.left() } else { pn.right() };
                path.push(l);
                let v = self.violation_at(l);
                if v > 0 {
                    first.get_or_insert(path.len() - 1);
                    seen += v;
                    if seen >= self.k {
                        break;
                    }
                }
            }
            let i = first.unwrap();
            if i < 2 {
                return;
            }
            self.try_rebalance(path[i - 2], path[i - 1], path[i], &g);
        }
    }

    /// One rebalancing attempt for the violation at `v`.
    pub fn try_rebalance(&self, pu: usize, u: usize, v: usize, g: &Guard<'_>) -> Option<Applied> {
        let mut ctx: Ctx<'_, K, V, Tag> = Ctx::new(&self.core.scx);
        let (plan, step) = plan_step(&mut ctx, pu, u, v)?;
        self.core.execute(&ctx, &plan, g).then_some(step)
    }

    pub fn violations(&self) -> usize {
        let _g = self.core.collector.pin();
        let r = self.core.root();
        if r == 0 {
            return 0;
        }
        let mut total = 0;
        let mut stack = vec![r];
        while let Some(p) = stack.pop() {
            let n = self.core.n(p);
            if p != r {
                total += violations_of(&n.meta);
            }
            if !n.is_leaf() {
                stack.push(n.left());
                stack.push(n.right());
            }
        }
        total
    }

    pub fn stats(&self) -> TreeStats {
        let _g = self.core.collector.pin();
        let mut acc = DepthAcc::default();
        for (_, _, d) in self.core.leaves() {
            acc.leaf(d);
        }
        TreeStats {
            size: acc.leaves,
            height: acc.height,
            avg_leaf_depth: acc.avg(),
            violations: self.violations(),
        }
    }

    pub fn entries(&self) -> Vec<(K, V)> {
        let _g = self.core.collector.pin();
        self.core
            .leaves()
            .into_iter()
            .map(|(k, v, _)| (k, v))
            .collect()
    }

    /// Relaxed heights of the subtree at `p`, checking stored balance
    /// factors and tag ranges along the way. Returns (rh, h).
    fn check(&self, p: usize, errors: &mut Vec<String>) -> (i64, i64) {
        let n = self.core.n(p);
        if n.is_leaf() {
            if n.meta.t < 0 {
                errors.push(format!("leaf {:?} has tag {}", n.key, n.meta.t));
            }
            return (n.meta.t as i64, 0);
        }
        if n.meta.t < -1 {
            errors.push(format!("internal {:?} has tag {}", n.key, n.meta.t));
        }
        let (rl, hl) = self.check(n.left(), errors);
        let (rr, hr) = self.check(n.right(), errors);
        let rbf = rl - rr;
        if rbf != n.meta.b as i64 {
            errors.push(format!(
                "node {:?} stores rbf {} but has {rbf}",
                n.key, n.meta.b
            ));
        }
        if rbf.abs() > 1 {
            errors.push(format!("node {:?} has rbf {rbf}", n.key));
        }
        (rl.max(rr) + 1 + n.meta.t as i64, hl.max(hr) + 1)
    }

    /// Strict AVL check on real heights.
    fn avl_height(&self, p: usize, errors: &mut Vec<String>) -> i64 {
        let n = self.core.n(p);
        if n.is_leaf() {
            return 0;
        }
        let (l, r) = (
            self.avl_height(n.left(), errors),
            self.avl_height(n.right(), errors),
        );
        if (l - r).abs() > 1 {
            errors.push(format!("node {:?} has balance factor {}", n.key, l - r));
        }
        l.max(r) + 1
    }

    /// Structural check allowing `c` updates in flight. At `c = 0` with
    /// threshold 1 the tree must be a strict AVL tree.
    pub fn validate(&self, c: usize) -> Report {
        let _g = self.core.collector.pin();
        let mut errors = vec![];
        self.core.check_order(&mut errors);
        let stats = self.stats();
        let r = self.core.root();
        if r != 0 {
            if self.core.n(r).meta.t != 0 {
                errors.push(format!("root tag {}", self.core.n(r).meta.t));
            }
            self.check(r, &mut errors);
            if self.k == 1 && c == 0 {
                self.avl_height(r, &mut errors);
            }
        }
        if self.k == 1 && stats.violations > c {
            errors.push(format!(
                "{} violations with {c} updates in flight",
                stats.violations
            ));
        }
        Report { errors, stats }
    }
}

impl<K, V> Drop for Ravl<K, V> {
    fn drop(&mut self) {
        self.core.free_all();
    }
}

/// Exhaustive certification of the rebalancing steps.
///
/// Enumerates every tree of height at most 3 with internal tags in -1..=1
/// and leaf tags in 0..=2 (0..=3 at depth 3), hangs it below a sentinel
/// (root case) or an ordinary node, and applies the chosen step for each
/// violation at a child of its root. No step inspects a node more than two
/// levels below its top, so depth-3 leaves stand for arbitrary subtrees of
/// the same relaxed height: this covers all trees of height at most 4.
pub mod catalog {
    use super::*;
    use crate::bst::Arena;
    use std::collections::BTreeMap;
    use std::rc::Rc;

    #[derive(Debug)]
    enum G {
        Leaf(i32),
        In(i32, Rc<G>, Rc<G>),
    }

    fn rh(g: &G) -> i32 {
        match g {
            G::Leaf(t) => *t,
            G::In(t, l, r) => rh(l).max(rh(r)) + 1 + t,
        }
    }

    fn gen(depth: usize, max: usize) -> Vec<(Rc<G>, i32)> {
        let leaf_tags = if depth == max { 0..=3 } else { 0..=2 };
        let mut out: Vec<_> = leaf_tags.map(|t| (Rc::new(G::Leaf(t)), t)).collect();
        if depth < max {
            let sub = gen(depth + 1, max);
            for (l, hl) in &sub {
                for (r, hr) in &sub {
                    if (hl - hr).abs() <= 1 {
                        for t in -1..=1 {
                            out.push((
                                Rc::new(G::In(t, l.clone(), r.clone())),
                                (*hl).max(*hr) + 1 + t,
                            ));
                        }
                    }
                }
            }
        }
        out
    }

    type A = Arena<u64, u64, Tag>;

    fn build(a: &mut A, g: &G, next: &mut u64) -> usize {
        match g {
            G::Leaf(t) => {
                *next += 2;
                a.add(*next, Some(*next), Tag { t: *t, b: 0 }, 0, 0)
            }
            G::In(t, l, r) => {
                let (hl, hr) = (rh(l), rh(r));
                let l = build(a, l, next);
                let key = *next + 1;
                let r = build(a, r, next);
                a.add(
                    key,
                    None,
                    Tag {
                        t: *t,
                        b: (hl - hr) as i8,
                    },
                    l,
                    r,
                )
            }
        }
    }

    /// In-order leaf keys and internal-key consistency of the subtree.
    fn keys(a: &A, p: usize, out: &mut Vec<u64>, lo: u64, hi: u64) -> bool {
        let n = a.get(p);
        if n.key < lo || n.key >= hi {
            return false;
        }
        if n.is_leaf() {
            out.push(n.key);
            return true;
        }
        keys(a, n.l, out, lo, n.key) && keys(a, n.r, out, n.key, hi)
    }

    /// Relaxed height, or an error on a broken invariant.
    fn audit(a: &A, p: usize) -> Result<(i32, usize), String> {
        let n = a.get(p);
        let v = violations_of(&n.meta);
        if n.is_leaf() {
            if n.meta.t < 0 {
                return Err(format!("leaf tag {}", n.meta.t));
            }
            return Ok((n.meta.t, v));
        }
        if n.meta.t < -1 {
            return Err(format!("internal tag {}", n.meta.t));
        }
        let (l, vl) = audit(a, n.l)?;
        let (r, vr) = audit(a, n.r)?;
        if l - r != n.meta.b as i32 {
            return Err(format!("stored rbf {} but actual {}", n.meta.b, l - r));
        }
        if (l - r).abs() > 1 {
            return Err(format!("rbf {}", l - r));
        }
        Ok((l.max(r) + 1 + n.meta.t, v + vl + vr))
    }

    #[derive(Debug, Default)]
    pub struct CatalogReport {
        /// Trees enumerated.
        pub trees: usize,
        /// Steps applied, by kind and side.
        pub applied: BTreeMap<(Step, Side), usize>,
        pub failures: Vec<String>,
    }

    impl CatalogReport {
        /// Every step and its mirror image was exercised and none failed.
        pub fn is_ok(&self) -> bool {
            self.failures.is_empty()
                && Step::ALL.iter().all(|s| {
                    [Side::L, Side::R]
                        .iter()
                        .all(|d| self.applied.contains_key(&(*s, *d)))
                })
        }
    }

    pub fn run() -> CatalogReport {
        let mut rep = CatalogReport::default();
        for (g, h) in gen(0, 3) {
            let G::In(tu, ..) = *g else { continue };
            rep.trees += 1;
            for root in [true, false] {
                if (root && tu != 0) || tu < 0 {
                    continue;
                }
                for d in [Side::L, Side::R] {
                    one(&mut rep, &g, h, root, d);
                }
            }
        }
        rep
    }

    fn one(rep: &mut CatalogReport, g: &G, h: i32, root: bool, d: Side) {
        let mut a = A::new();
        let mut next = 0;
        let u = build(&mut a, g, &mut next);
        let v = a.get(u).child(d);
        if a.get(v).meta.t == 0 {
            return;
        }
        let pu = if root {
            a.add(u64::MAX, None, Tag::default(), u, 0)
        } else {
            let side = a.add(next + 2, Some(0), Tag { t: h, b: 0 }, 0, 0);
            a.add(next + 1, None, Tag::default(), u, side)
        };
        let (_, before) = audit(&a, u).expect("generated tree is valid");
        let before = before - violations_of(&a.get(u).meta);
        let mut ks = vec![];
        keys(&a, u, &mut ks, 0, u64::MAX);
        let fail = |why: String| format!("{g:?} root={root} side={d:?}: {why}");
        let Some((plan, step)) = plan_step(&mut a, pu, u, v) else {
            rep.failures.push(fail("no step applies".into()));
            return;
        };
        let top = a.apply(&plan);
        *rep.applied.entry(step).or_default() += 1;
        let fail = |why: String| format!("{g:?} root={root} side={d:?} {step:?}: {why}");
        let (h2, after) = match audit(&a, top) {
            Ok(x) => x,
            Err(e) => return rep.failures.push(fail(e)),
        };
        let top_v = violations_of(&a.get(top).meta);
        let mut ks2 = vec![];
        if !keys(&a, top, &mut ks2, 0, u64::MAX) || ks2 != ks {
            rep.failures.push(fail("key order changed".into()));
        }
        if root {
            if a.get(top).meta.t != 0 {
                rep.failures.push(fail("root tag not 0".into()));
            }
            if (h2 - h).abs() > 1 {
                rep.failures.push(fail(format!("root rh {h} -> {h2}")));
            }
            if after - top_v >= before {
                rep.failures
                    .push(fail(format!("violations {before} -> {}", after - top_v)));
            }
        } else {
            if h2 != h {
                rep.failures.push(fail(format!("rh {h} -> {h2}")));
            }
            let was = before + violations_of(&Tag { t: g_tag(g), b: 0 });
            if after > was {
                rep.failures
                    .push(fail(format!("violations {was} -> {after}")));
            }
        }
    }

    fn g_tag(g: &G) -> i32 {
        match g {
            G::Leaf(t) | G::In(t, ..) => *t,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    type T = Ravl<u64, u64>;

    #[test]
    fn step_catalog() {
        let rep = catalog::run();
        eprintln!("{} trees, {:?}", rep.trees, rep.applied);
        assert!(
            rep.failures.is_empty(),
            "{} failures, first: {:?}",
            rep.failures.len(),
            &rep.failures[..rep.failures.len().min(5)]
        );
        assert!(rep.is_ok(), "some step never fired: {:?}", rep.applied);
    }

    #[test]
    fn insert_new_tags() {
        let t = T::new();
        t.insert(10, 1);
        t.insert(20, 2);
        // second key: the new root gets tag 0
        let r = t.core.n(t.core.root());
        assert_eq!((r.meta.t, r.key), (0, 20));
        assert!(t.validate(0).is_ok());
        t.insert(30, 3);
        let rep = t.validate(0);
        assert!(rep.is_ok(), "{:?}", rep.errors);
    }

    #[test]
    fn oracle_and_avl_shape() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let t = T::new();
        let mut m = BTreeMap::new();
        for i in 0..30_000u64 {
            let k = rng.gen_range(0..400u64);
            match rng.gen_range(0..3) {
                0 => assert_eq!(t.insert(k, i), m.insert(k, i)),
                1 => assert_eq!(t.delete(k), m.remove(&k)),
                _ => assert_eq!(t.get(k), m.get(&k).copied()),
            }
            if i % 1000 == 0 {
                let rep = t.validate(0);
                assert!(rep.is_ok(), "{:?}", rep.errors);
            }
        }
        assert_eq!(t.entries(), m.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn sequential_height() {
        let t = T::new();
        let n = 50_000u64;
        for k in 0..n {
            t.insert(k, k);
        }
        let rep = t.validate(0);
        assert!(rep.is_ok(), "{:?}", rep.errors);
        let bound = 1.44 * ((n + 2) as f64).log2() + 2.0;
        assert!((rep.stats.height as f64) <= bound, "{:?}", rep.stats);
    }

    #[test]
    fn threshold_variant_stays_balanced() {
        let t = T::with_threshold(4);
        for k in 0..3000 {
            t.insert(k, k);
        }
        let rep = t.validate(0);
        assert!(rep.is_ok(), "{:?}", rep.errors);
    }

    #[test]
    fn concurrent_checksum() {
        let t = T::with_parts(Scx::with_history(), Collector::new(), 1);
        let sums: Vec<i64> = std::thread::scope(|sc| {
            let hs: Vec<_> = (0..4u64)
                .map(|id| {
                    let t = &t;
                    sc.spawn(move || {
                        let mut rng = rand::rngs::StdRng::seed_from_u64(id + 100);
                        let mut sum = 0i64;
                        for _ in 0..20_000 {
                            let k = rng.gen_range(0..256u64);
                            if rng.gen_bool(0.5) {
                                if t.insert(k, k).is_none() {
                                    sum += k as i64;
                                }
                            } else if t.delete(k).is_some() {
                                sum -= k as i64;
                            }
                        }
                        sum
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let rep = t.validate(0);
        assert!(rep.is_ok(), "{:?}", rep.errors);
        let total: i64 = t.entries().iter().map(|e| e.0 as i64).sum();
        assert_eq!(total, sums.iter().sum::<i64>());
        assert_eq!(t.scx().history_violations(), 0);
    }
}
