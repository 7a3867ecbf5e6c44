//! Lock-free chromatic tree: a leaf-oriented relaxed red-black tree.
//!
//! Weight 0 is red, 1 is black and anything above 1 is overweight. An
//! update that creates a violation calls [`Chromatic::cleanup`], which walks
//! the search path for its key and fixes violations until none is left on
//! it (or, with threshold `k > 1`, fewer than `k`).

use crate::bst::{old, Builder, Core, Ctx, Plan, Side, Snap};
use crate::key::Key;
use crate::llx::Scx;
use crate::reclaim::{Collector, Guard};
use crate::stats::{DepthAcc, Report, Shape, TreeStats};
use crate::stw;

type W = u32;
type S<K, V> = Snap<K, V, W>;
type P<K, V> = Plan<K, V, W>;

/// Rebalancing steps; `s` suffixes are mirror images.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum Step {
    Blk,
    Rb1,
    Rb1s,
    Rb2,
    Rb2s,
    Push,
    Pushs,
    W1,
    W1s,
    W2,
    W2s,
    W3,
    W3s,
    W4,
    W4s,
    W5,
    W5s,
    W6,
    W6s,
    W7,
}

impl Step {
    pub const ALL: [Step; 20] = [
        Step::Blk,
        Step::Rb1,
        Step::Rb1s,
        Step::Rb2,
        Step::Rb2s,
        Step::Push,
        Step::Pushs,
        Step::W1,
        Step::W1s,
        Step::W2,
        Step::W2s,
        Step::W3,
        Step::W3s,
        Step::W4,
        Step::W4s,
        Step::W5,
        Step::W5s,
        Step::W6,
        Step::W6s,
        Step::W7,
    ];

    fn sided(d: Side, left: Step, right: Step) -> Step {
        if d == Side::L {
            left
        } else {
            right
        }
    }
}

pub struct Chromatic<K, V> {
    core: Core<K, V, W>,
    k: usize,
}

impl<K: Key, V: Copy + Send + Sync + 'static> Default for Chromatic<K, V> {
    fn default() -> Self {
        Self::new()
    }
}

fn top<K: Key, V>(u: &S<K, V>, w: W) -> W {
    if u.key == K::MAX {
        1
    } else {
        w
    }
}

fn blk<K: Key, V: Copy>(u: &S<K, V>, x: &S<K, V>, xl: &S<K, V>, xr: &S<K, V>) -> P<K, V> {
    let mut b = Builder::new(Side::L);
    let l = b.copy(xl, 1);
    let r = b.copy(xr, 1);
    let t = b.inner(x.key, top(u, x.meta - 1), l, r);
    b.plan(
        u.id,
        x.id,
        vec![u.id, x.id, xl.id, xr.id],
        vec![x.id, xl.id, xr.id],
        t,
    )
}

/// Red-red at `xx.child(d)`, `xx = x.child(d)`.
fn rb1<K: Key, V: Copy>(d: Side, u: &S<K, V>, x: &S<K, V>, xx: &S<K, V>) -> P<K, V> {
    let o = d.flip();
    let mut b = Builder::new(d);
    let nr = b.inner(x.key, 0, old(xx.child(o)), old(x.child(o)));
    let t = b.inner(xx.key, top(u, x.meta), old(xx.child(d)), nr);
    b.plan(u.id, x.id, vec![u.id, x.id, xx.id], vec![x.id, xx.id], t)
}

/// Red-red at `y = xx.child(!d)`, `xx = x.child(d)`.
fn rb2<K: Key, V: Copy>(d: Side, u: &S<K, V>, x: &S<K, V>, xx: &S<K, V>, y: &S<K, V>) -> P<K, V> {
    let o = d.flip();
    let mut b = Builder::new(d);
    let nl = b.inner(xx.key, 0, old(xx.child(d)), old(y.child(d)));
    let nr = b.inner(x.key, 0, old(y.child(o)), old(x.child(o)));
    let t = b.inner(y.key, top(u, x.meta), nl, nr);
    b.plan(
        u.id,
        x.id,
        vec![u.id, x.id, xx.id, y.id],
        vec![x.id, xx.id, y.id],
        t,
    )
}

// The overweight steps below fix `a = x.child(d)` with sibling `s`.

fn push<K: Key, V: Copy>(
    d: Side,
    u: &S<K, V>,
    x: &S<K, V>,
    a: &S<K, V>,
    s: &S<K, V>,
    sw: W,
) -> P<K, V> {
    let mut b = Builder::new(d);
    let na = b.copy(a, a.meta - 1);
    let ns = b.copy(s, sw);
    let t = b.inner(x.key, top(u, x.meta + 1), na, ns);
    b.plan(
        u.id,
        x.id,
        vec![u.id, x.id, a.id, s.id],
        vec![x.id, a.id, s.id],
        t,
    )
}

fn w12<K: Key, V: Copy>(
    d: Side,
    u: &S<K, V>,
    x: &S<K, V>,
    a: &S<K, V>,
    s: &S<K, V>,
    sd: &S<K, V>,
) -> P<K, V> {
    let mut b = Builder::new(d);
    let na = b.copy(a, a.meta - 1);
    let nsd = b.copy(sd, sd.meta - 1);
    let nl = b.inner(x.key, 1, na, nsd);
    let t = b.inner(s.key, top(u, x.meta), nl, old(s.child(d.flip())));
    b.plan(
        u.id,
        x.id,
        vec![u.id, x.id, a.id, s.id, sd.id],
        vec![x.id, a.id, s.id, sd.id],
        t,
    )
}

#[allow(clippy::too_many_arguments)]
fn w3<K: Key, V: Copy>(
    d: Side,
    u: &S<K, V>,
    x: &S<K, V>,
    a: &S<K, V>,
    s: &S<K, V>,
    sd: &S<K, V>,
    sdd: &S<K, V>,
) -> P<K, V> {
    let o = d.flip();
    let mut b = Builder::new(d);
    let na = b.copy(a, a.meta - 1);
    let nll = b.inner(x.key, 1, na, old(sdd.child(d)));
    let nlr = b.inner(sd.key, 1, old(sdd.child(o)), old(sd.child(o)));
    let nl = b.inner(sdd.key, 0, nll, nlr);
    let t = b.inner(s.key, top(u, x.meta), nl, old(s.child(o)));
    let v = vec![u.id, x.id, a.id, s.id, sd.id, sdd.id];
    b.plan(u.id, x.id, v, vec![x.id, a.id, s.id, sd.id, sdd.id], t)
}

#[allow(clippy::too_many_arguments)]
fn w4<K: Key, V: Copy>(
    d: Side,
    u: &S<K, V>,
    x: &S<K, V>,
    a: &S<K, V>,
    s: &S<K, V>,
    sd: &S<K, V>,
    sdo: &S<K, V>,
) -> P<K, V> {
    let o = d.flip();
    let mut b = Builder::new(d);
    let na = b.copy(a, a.meta - 1);
    let nl = b.inner(x.key, 1, na, old(sd.child(d)));
    let nrl = b.copy(sdo, 1);
    let nr = b.inner(s.key, 0, nrl, old(s.child(o)));
    let t = b.inner(sd.key, top(u, x.meta), nl, nr);
    let v = vec![u.id, x.id, a.id, s.id, sd.id, sdo.id];
    b.plan(u.id, x.id, v, vec![x.id, a.id, s.id, sd.id, sdo.id], t)
}

fn w5<K: Key, V: Copy>(
    d: Side,
    u: &S<K, V>,
    x: &S<K, V>,
    a: &S<K, V>,
    s: &S<K, V>,
    so: &S<K, V>,
) -> P<K, V> {
    let mut b = Builder::new(d);
    let na = b.copy(a, a.meta - 1);
    let nl = b.inner(x.key, 1, na, old(s.child(d)));
    let nr = b.copy(so, 1);
    let t = b.inner(s.key, top(u, x.meta), nl, nr);
    b.plan(
        u.id,
        x.id,
        vec![u.id, x.id, a.id, s.id, so.id],
        vec![x.id, a.id, s.id, so.id],
        t,
    )
}

fn w6<K: Key, V: Copy>(
    d: Side,
    u: &S<K, V>,
    x: &S<K, V>,
    a: &S<K, V>,
    s: &S<K, V>,
    sd: &S<K, V>,
) -> P<K, V> {
    let o = d.flip();
    let mut b = Builder::new(d);
    let na = b.copy(a, a.meta - 1);
    let nl = b.inner(x.key, 1, na, old(sd.child(d)));
    let nr = b.inner(s.key, 1, old(sd.child(o)), old(s.child(o)));
    let t = b.inner(sd.key, top(u, x.meta), nl, nr);
    b.plan(
        u.id,
        x.id,
        vec![u.id, x.id, a.id, s.id, sd.id],
        vec![x.id, a.id, s.id, sd.id],
        t,
    )
}

impl<K: Key, V: Copy + Send + Sync + 'static> Chromatic<K, V> {
    pub fn new() -> Self {
        Self::with_threshold(1)
    }

    /// Cleanup rebalances only once `k` violations are seen on a path.
    pub fn with_threshold(k: usize) -> Self {
        Self::with_parts(Scx::new(), Collector::new(), k)
    }

    pub fn with_parts(scx: Scx, collector: Collector, k: usize) -> Self {
        assert!(k >= 1, "violation threshold must be at least 1");
        Chromatic {
            core: Core::new(scx, collector, 1),
            k,
        }
    }

    pub fn scx(&self) -> &Scx {
        &self.core.scx
    }

    pub fn collector(&self) -> &Collector {
        &self.core.collector
    }

    pub fn threshold(&self) -> usize {
        self.k
    }

    /// `[ggp, gp, p, l]` for `key`, as node addresses (0 for nil).
    pub fn search(&self, key: K) -> [usize; 4] {
        let _g = self.core.collector.pin();
        self.core.search(key)
    }

    pub fn get(&self, key: K) -> Option<V> {
        self.core.get(key)
    }

    pub fn successor(&self, key: K) -> Option<(K, V)> {
        self.core.successor(key)
    }

    /// Inserts or replaces; returns the previous value.
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
        let mut ctx = Ctx::new(&self.core.scx);
        let ps = ctx.llx(p)?;
        ps.side_of(l)?;
        let ls = ctx.llx(l)?;
        let mut b = Builder::new(Side::L);
        let (prev, t, violation) = if ls.key == key {
            // keep the leaf's weight so path sums are unchanged
            (ls.val, b.leaf(key, Some(val), ls.meta), false)
        } else {
            let nl = b.leaf(key, Some(val), 1);
            let lc = b.copy(&ls, 1);
            // a node that becomes the root is black
            let w = if ls.key == K::MAX || ps.key == K::MAX {
                1
            } else {
                ls.meta - 1
            };
            let t = if key < ls.key {
                b.inner(ls.key, w, nl, lc)
            } else {
                b.inner(key, w, lc, nl)
            };
            (None, t, w == 0 && ps.meta == 0)
        };
        let plan = b.plan(p, l, vec![p, l], vec![l], t);
        self.core
            .execute(&ctx, &plan, g)
            .then_some((prev, violation))
    }

    /// Removes `key`; returns its value if it was present.
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
        let mut ctx = Ctx::new(&self.core.scx);
        let gs = ctx.llx(gp)?;
        gs.side_of(p)?;
        let ps = ctx.llx(p)?;
        let d = ps.side_of(l)?;
        let ls = ctx.llx(l)?;
        let ss = ctx.llx(ps.child(d.flip()))?;
        let w = if ps.key == K::MAX || gs.key == K::MAX {
            1
        } else {
            ps.meta + ss.meta
        };
        let mut b = Builder::new(Side::L);
        let t = b.copy(&ss, w);
        let plan = b.plan(gp, p, vec![gp, p, l, ss.id], vec![p, l, ss.id], t);
        self.core.execute(&ctx, &plan, g).then_some((ls.val, w > 1))
    }

    fn violation_at(&self, p: usize, l: usize) -> usize {
        let (pw, lw) = (self.core.n(p).meta, self.core.n(l).meta);
        if lw > 1 {
            (lw - 1) as usize
        } else if lw == 0 && pw == 0 {
            1
        } else {
            0
        }
    }

    /// Fixes violations on the search path for `key`.
    ///
    /// With threshold `k > 1`, a traversal that sees `k` violations fixes
    /// the topmost one: every step's preconditions assume no violation above.
    pub fn cleanup(&self, key: K) {
        loop {
            stw::safepoint(true);
            let g = self.core.collector.pin();
            let mut path = vec![self.core.entry];
            let mut seen = 0;
            let mut first = None;
            loop {
                let p = *path.last().unwrap();
                let pn = self.core.n(p);
                if pn.is_leaf() {
                    return;
                }
                let l = if key < pn.key { pn.left() } else { pn.right() };
                let v = self.violation_at(p, l);
                path.push(l);
                if v > 0 {
                    first.get_or_insert(path.len() - 1);
                    seen += v;
                    if seen >= self.k {
                        break;
                    }
                }
            }
            let i = first.unwrap();
            if i < 3 {
                return;
            }
            self.try_rebalance(path[i - 3], path[i - 2], path[i - 1], path[i], &g);
        }
    }

    /// Attempts one rebalancing step for the violation at `l`. Returns the
    /// step applied, or `None` if an LLX, check or the SCX failed.
    pub fn try_rebalance(
        &self,
        ggp: usize,
        gp: usize,
        p: usize,
        l: usize,
        g: &Guard<'_>,
    ) -> Option<Step> {
        let mut ctx = Ctx::new(&self.core.scx);
        let r = ctx.llx(ggp)?;
        r.side_of(gp)?;
        let x = ctx.llx(gp)?;
        let dx = x.side_of(p)?;
        let xx = ctx.llx(p)?;
        let dl = xx.side_of(l)?;
        let w = |id: usize| self.core.n(id).meta;
        let (plan, step) = if w(l) > 1 {
            let a = ctx.llx(l)?;
            self.overweight(&mut ctx, dl, &r, &x, dx, &xx, &a)?
        } else {
            let o = x.child(dx.flip());
            if w(o) == 0 {
                let os = ctx.llx(o)?;
                let (xl, xr) = if dx == Side::L {
                    (&xx, &os)
                } else {
                    (&os, &xx)
                };
                (blk(&r, &x, xl, xr), Step::Blk)
            } else if dl == dx {
                (rb1(dx, &r, &x, &xx), Step::sided(dx, Step::Rb1, Step::Rb1s))
            } else {
                let y = ctx.llx(l)?;
                (
                    rb2(dx, &r, &x, &xx, &y),
                    Step::sided(dx, Step::Rb2, Step::Rb2s),
                )
            }
        };
        self.core.execute(&ctx, &plan, g).then_some(step)
    }

    /// Overweight `a = xx.child(d)`; `x` is its grandparent and `r` above it.
    #[allow(clippy::too_many_arguments)]
    fn overweight(
        &self,
        ctx: &mut Ctx<'_, K, V, W>,
        d: Side,
        r: &S<K, V>,
        x: &S<K, V>,
        dx: Side,
        xx: &S<K, V>,
        a: &S<K, V>,
    ) -> Option<(P<K, V>, Step)> {
        let o = d.flip();
        let w = |id: usize| self.core.n(id).meta;
        let st = |left, right| Step::sided(d, left, right);
        let sib = xx.child(o);
        let sw = w(sib);
        if sw == 0 {
            if xx.meta == 0 {
                // red-red at the sibling, fixed one level up
                let other = x.child(dx.flip());
                if dx == d {
                    if w(other) == 0 {
                        let os = ctx.llx(other)?;
                        let (xl, xr) = if dx == Side::L { (xx, &os) } else { (&os, xx) };
                        return Some((blk(r, x, xl, xr), Step::Blk));
                    }
                    let y = ctx.llx(sib)?;
                    return Some((rb2(d, r, x, xx, &y), st(Step::Rb2, Step::Rb2s)));
                }
                if w(other) == 0 {
                    let os = ctx.llx(other)?;
                    let (xl, xr) = if dx == Side::L { (xx, &os) } else { (&os, xx) };
                    return Some((blk(r, x, xl, xr), Step::Blk));
                }
                return Some((rb1(o, r, x, xx), st(Step::Rb1s, Step::Rb1)));
            }
            let s = ctx.llx(sib)?;
            let sd = ctx.llx(s.child(d))?;
            if sd.meta > 1 {
                return Some((w12(d, x, xx, a, &s, &sd), st(Step::W1, Step::W1s)));
            }
            if sd.meta == 0 {
                return Some((rb2(o, x, xx, &s, &sd), st(Step::Rb2s, Step::Rb2)));
            }
            let sdo = sd.child(o);
            if sdo == 0 {
                return None;
            }
            if w(sdo) == 0 {
                let sdo = ctx.llx(sdo)?;
                return Some((w4(d, x, xx, a, &s, &sd, &sdo), st(Step::W4, Step::W4s)));
            }
            if w(sd.child(d)) == 0 {
                let sdd = ctx.llx(sd.child(d))?;
                return Some((w3(d, x, xx, a, &s, &sd, &sdd), st(Step::W3, Step::W3s)));
            }
            return Some((w12(d, x, xx, a, &s, &sd), st(Step::W2, Step::W2s)));
        }
        let s = ctx.llx(sib)?;
        if sw == 1 {
            let so = s.child(o);
            if so == 0 {
                return None;
            }
            if w(so) == 0 {
                let so = ctx.llx(so)?;
                return Some((w5(d, x, xx, a, &s, &so), st(Step::W5, Step::W5s)));
            }
            if w(s.child(d)) == 0 {
                let sd = ctx.llx(s.child(d))?;
                return Some((w6(d, x, xx, a, &s, &sd), st(Step::W6, Step::W6s)));
            }
            return Some((push(d, x, xx, a, &s, 0), st(Step::Push, Step::Pushs)));
        }
        Some((push(d, x, xx, a, &s, sw - 1), Step::W7))
    }

    /// Violations currently in the tree.
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
            if n.is_leaf() {
                continue;
            }
            for c in [n.left(), n.right()] {
                total += self.violation_at(p, c);
                stack.push(c);
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

    /// The tree below the sentinels, with node weights. Quiescent use only.
    pub fn shape(&self) -> Option<Shape<K>> {
        let _g = self.core.collector.pin();
        self.core.shape(|w| w)
    }

    /// Key/value pairs in order.
    pub fn entries(&self) -> Vec<(K, V)> {
        let _g = self.core.collector.pin();
        self.core
            .leaves()
            .into_iter()
            .map(|(k, v, _)| (k, v))
            .collect()
    }

    /// Structural check allowing `c` updates in flight.
    pub fn validate(&self, c: usize) -> Report {
        let _g = self.core.collector.pin();
        let mut errors = vec![];
        self.core.check_order(&mut errors);
        let entry = self.core.n(self.core.entry);
        if entry.meta != 1 || self.core.n(entry.left()).meta != 1 {
            errors.push("sentinel weight is not 1".into());
        }
        let stats = self.stats();
        let r = self.core.root();
        if r != 0 {
            if self.core.n(r).meta != 1 {
                errors.push(format!("root weight {}", self.core.n(r).meta));
            }
            // weighted path sums from the root
            let mut sums = std::collections::BTreeSet::new();
            let mut stack = vec![(r, 0 as W)];
            while let Some((p, acc)) = stack.pop() {
                let n = self.core.n(p);
                let acc = acc + n.meta;
                if n.is_leaf() {
                    if n.meta == 0 {
                        errors.push(format!("leaf {:?} has weight 0", n.key));
                    }
                    sums.insert(acc);
                } else {
                    stack.push((n.left(), acc));
                    stack.push((n.right(), acc));
                }
            }
            if sums.len() != 1 {
                errors.push(format!("unequal weighted path sums {sums:?}"));
            }
            let wh = *sums.iter().next().unwrap_or(&0) as usize;
            if stats.height > 2 * wh + stats.violations {
                errors.push(format!(
                    "height {} exceeds 2*{wh} + {}",
                    stats.height, stats.violations
                ));
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

impl<K, V> Drop for Chromatic<K, V> {
    fn drop(&mut self) {
        self.core.free_all();
    }
}
