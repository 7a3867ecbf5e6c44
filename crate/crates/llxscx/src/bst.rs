//! Leaf-oriented binary search tree machinery shared by the chromatic and
//! relaxed AVL trees.
//!
//! Both trees hang off the same sentinel layout: `entry` (key `MAX`) whose
//! left child is a leaf with key `MAX` while the tree is empty, and an
//! internal node with key `MAX` once it is not. The user tree is the left
//! child of that internal sentinel.
//!
//! Rebalancing steps and updates are written as [`Plan`]s: descriptions of
//! fresh nodes whose children are old nodes, other fresh nodes or nil.
//! [`Ctx`] performs the LLXs, turns a plan into nodes and runs the SCX.

use crate::key::Key;
use crate::llx::{Header, Linked, Llx, Record, Scx, ScxArgs};
use crate::reclaim::{Collector, Guard};
use crate::shim::{AtomicUsize, SeqCst};
use crate::stats::Shape;
use std::collections::VecDeque;
use std::marker::PhantomData;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum Side {
    L,
    R,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::L => Side::R,
            Side::R => Side::L,
        }
    }
    pub fn idx(self) -> usize {
        match self {
            Side::L => LEFT,
            Side::R => RIGHT,
        }
    }
}

pub struct Node<K, V, M> {
    hdr: Header,
    pub key: K,
    pub val: Option<V>,
    pub meta: M,
    f: [AtomicUsize; 2],
}

impl<K, V, M> Record for Node<K, V, M> {
    fn header(&self) -> &Header {
        &self.hdr
    }
    fn fields(&self) -> &[AtomicUsize] {
        &self.f
    }
}

impl<K, V, M> Node<K, V, M> {
    pub fn alloc(key: K, val: Option<V>, meta: M, l: usize, r: usize) -> usize {
        Box::into_raw(Box::new(Node {
            hdr: Header::new(),
            key,
            val,
            meta,
            f: [AtomicUsize::new(l), AtomicUsize::new(r)],
        })) as usize
    }
    pub fn child(&self, i: usize) -> usize {
        self.f[i].load(SeqCst)
    }
    pub fn left(&self) -> usize {
        self.child(LEFT)
    }
    pub fn right(&self) -> usize {
        self.child(RIGHT)
    }
    pub fn is_leaf(&self) -> bool {
        self.left() == 0
    }
    /// Plain store, for building trees that are not yet shared.
    #[cfg(test)]
    pub fn set(&self, i: usize, v: usize) {
        self.f[i].store(v, SeqCst);
    }
    pub fn is_marked(&self) -> bool {
        self.hdr.is_marked()
    }
}

/// Dereferences a node address. Callers hold a guard or own the tree.
pub fn node<'a, K, V, M>(p: usize) -> &'a Node<K, V, M> {
    debug_assert!(p != 0);
    unsafe { &*(p as *const Node<K, V, M>) }
}

/// An LLX result: immutable fields plus the children seen.
#[derive(Clone, Copy, Debug)]
pub struct Snap<K, V, M> {
    pub id: usize,
    pub key: K,
    pub val: Option<V>,
    pub meta: M,
    pub l: usize,
    pub r: usize,
}

impl<K, V, M> Snap<K, V, M> {
    pub fn child(&self, s: Side) -> usize {
        match s {
            Side::L => self.l,
            Side::R => self.r,
        }
    }
    pub fn is_leaf(&self) -> bool {
        self.l == 0
    }
    /// Which side `c` hangs on, if it is a child.
    pub fn side_of(&self, c: usize) -> Option<Side> {
        if c == 0 {
            None
        } else if self.l == c {
            Some(Side::L)
        } else if self.r == c {
            Some(Side::R)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Link {
    Old(usize),
    New(usize),
    Nil,
}

#[derive(Clone, Debug)]
pub struct PNode<K, V, M> {
    pub key: K,
    pub val: Option<V>,
    pub meta: M,
    pub l: Link,
    pub r: Link,
}

/// Replacement of the subtree under `u` rooted at `old`.
#[derive(Clone, Debug)]
pub struct Plan<K, V, M> {
    pub u: usize,
    pub old: usize,
    /// Records to LLX-validate, in any order.
    pub v: Vec<usize>,
    /// Records removed.
    pub r: Vec<usize>,
    pub nodes: Vec<PNode<K, V, M>>,
    pub top: usize,
}

/// Collects fresh nodes; `d` orients children so one description serves
/// a step and its mirror image.
pub struct Builder<K, V, M> {
    pub nodes: Vec<PNode<K, V, M>>,
    pub d: Side,
}

impl<K: Copy, V: Copy, M: Copy> Builder<K, V, M> {
    pub fn new(d: Side) -> Self {
        Builder { nodes: vec![], d }
    }

    /// Internal node with `near` on side `d` and `far` on the other side.
    pub fn inner(&mut self, key: K, meta: M, near: Link, far: Link) -> Link {
        let (l, r) = match self.d {
            Side::L => (near, far),
            Side::R => (far, near),
        };
        self.nodes.push(PNode {
            key,
            val: None,
            meta,
            l,
            r,
        });
        Link::New(self.nodes.len() - 1)
    }

    /// Copy of `s` with new metadata and the same children.
    pub fn copy(&mut self, s: &Snap<K, V, M>, meta: M) -> Link {
        let kid = |c: usize| if c == 0 { Link::Nil } else { Link::Old(c) };
        self.nodes.push(PNode {
            key: s.key,
            val: s.val,
            meta,
            l: kid(s.l),
            r: kid(s.r),
        });
        Link::New(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, key: K, val: Option<V>, meta: M) -> Link {
        self.nodes.push(PNode {
            key,
            val,
            meta,
            l: Link::Nil,
            r: Link::Nil,
        });
        Link::New(self.nodes.len() - 1)
    }

    pub fn plan(
        self,
        u: usize,
        old: usize,
        v: Vec<usize>,
        r: Vec<usize>,
        top: Link,
    ) -> Plan<K, V, M> {
        let Link::New(top) = top else {
            panic!("plan top must be a fresh node")
        };
        Plan {
            u,
            old,
            v,
            r,
            nodes: self.nodes,
            top,
        }
    }
}

pub fn old(p: usize) -> Link {
    if p == 0 {
        Link::Nil
    } else {
        Link::Old(p)
    }
}

/// Sentinels, LLX/SCX domain and collector of one tree.
pub struct Core<K, V, M> {
    pub entry: usize,
    pub scx: Scx,
    pub collector: Collector,
    _p: PhantomData<(K, V, M)>,
}

unsafe impl<K: Send + Sync, V: Send + Sync, M: Send + Sync> Send for Core<K, V, M> {}
unsafe impl<K: Send + Sync, V: Send + Sync, M: Send + Sync> Sync for Core<K, V, M> {}

impl<K: Key, V: Copy + Send + Sync + 'static, M: Copy + Send + Sync + 'static> Core<K, V, M> {
    pub fn new(scx: Scx, collector: Collector, sentinel: M) -> Self {
        let leaf = Node::<K, V, M>::alloc(K::MAX, None, sentinel, 0, 0);
        let entry = Node::<K, V, M>::alloc(K::MAX, None, sentinel, leaf, 0);
        Core {
            entry,
            scx,
            collector,
            _p: PhantomData,
        }
    }

    pub fn n(&self, p: usize) -> &Node<K, V, M> {
        node(p)
    }

    /// Root of the user tree, or 0 when empty.
    pub fn root(&self) -> usize {
        let s = self.n(self.entry).left();
        if self.n(s).is_leaf() {
            0
        } else {
            self.n(s).left()
        }
    }

    /// `[ggp, gp, p, l]` on the search path for `key`; missing ancestors are 0.
    pub fn search(&self, key: K) -> [usize; 4] {
        let (mut ggp, mut gp, mut p) = (0, 0, self.entry);
        let mut l = self.n(p).left();
        while !self.n(l).is_leaf() {
            ggp = gp;
            gp = p;
            p = l;
            let n = self.n(l);
            l = if key < n.key { n.left() } else { n.right() };
        }
        [ggp, gp, p, l]
    }

    pub fn get(&self, key: K) -> Option<V> {
        let _g = self.collector.pin();
        let l = self.n(self.search(key)[3]);
        if l.key == key {
            l.val
        } else {
            None
        }
    }

    /// Smallest key greater than `key`, with its value.
    pub fn successor(&self, key: K) -> Option<(K, V)> {
        let _g = self.collector.pin();
        'retry: loop {
            let mut vs: Vec<Linked> = vec![];
            let (mut last_left, mut last_left_right) = (0, 0);
            let mut l = self.entry;
            let mut snap = [0; 2];
            while !self.n(l).is_leaf() {
                let Llx::Snapshot(link) = self.scx.llx(self.n(l), &mut snap) else {
                    continue 'retry;
                };
                if key < self.n(l).key {
                    last_left = l;
                    last_left_right = snap[RIGHT];
                    vs.clear();
                    vs.push(link);
                    l = snap[LEFT];
                } else {
                    vs.push(link);
                    l = snap[RIGHT];
                }
            }
            if last_left == self.entry {
                return None;
            }
            let leaf = self.n(l);
            if key < leaf.key {
                return leaf.val.map(|v| (leaf.key, v));
            }
            let mut cur = last_left_right;
            while !self.n(cur).is_leaf() {
                let Llx::Snapshot(link) = self.scx.llx(self.n(cur), &mut snap) else {
                    continue 'retry;
                };
                vs.push(link);
                cur = snap[LEFT];
            }
            let s = self.n(cur);
            let result = if s.key == K::MAX {
                None
            } else {
                s.val.map(|v| (s.key, v))
            };
            if self.scx.vlx(&vs) {
                return result;
            }
        }
    }

    /// Child pointer of `u` that `plan.old` hangs from, from the LLX of `u`.
    fn plan_field(ctx: &Ctx<'_, K, V, M>, plan: &Plan<K, V, M>) -> Option<usize> {
        ctx.get(plan.u)?.side_of(plan.old).map(Side::idx)
    }

    /// Builds the nodes of `plan` and runs its SCX. Retires the removed
    /// records on success and frees the fresh ones on failure.
    pub fn execute(&self, ctx: &Ctx<'_, K, V, M>, plan: &Plan<K, V, M>, g: &Guard<'_>) -> bool {
        let Some(field) = Self::plan_field(ctx, plan) else {
            return false;
        };
        let order = ctx.bfs(plan.u, &plan.v);
        if order.len() != plan.v.len() {
            return false;
        }
        let ids: Vec<usize> = plan
            .nodes
            .iter()
            .map(|p| Node::<K, V, M>::alloc(p.key, p.val, p.meta, 0, 0))
            .collect();
        let resolve = |l: Link| match l {
            Link::Old(p) => p,
            Link::New(i) => ids[i],
            Link::Nil => 0,
        };
        for (p, &id) in plan.nodes.iter().zip(&ids) {
            let n = self.n(id);
            n.f[LEFT].store(resolve(p.l), SeqCst);
            n.f[RIGHT].store(resolve(p.r), SeqCst);
        }
        let new = ids[plan.top];
        #[cfg(debug_assertions)]
        self.check_plan(ctx, plan, &order, &ids, new);
        let links: Vec<Linked> = order.iter().map(|&id| ctx.link(id)).collect();
        let mut rmask = 0u32;
        for r in &plan.r {
            rmask |= 1 << order.iter().position(|x| x == r).expect("R outside V");
        }
        let owner = order
            .iter()
            .position(|&x| x == plan.u)
            .expect("u outside V");
        let args = ScxArgs {
            v: &links,
            r: rmask,
            owner,
            fld: &self.n(plan.u).f[field],
            old: plan.old,
            new,
        };
        if self.scx.scx(&args) {
            for &r in &plan.r {
                self.scx.forget(&self.n(r).hdr);
                unsafe { self.collector.retire(g, r as *mut Node<K, V, M>) };
            }
            true
        } else {
            for id in ids {
                unsafe { self.collector.free_unpublished(id as *mut Node<K, V, M>) };
            }
            false
        }
    }

    #[cfg(debug_assertions)]
    fn check_plan(
        &self,
        ctx: &Ctx<'_, K, V, M>,
        plan: &Plan<K, V, M>,
        order: &[usize],
        ids: &[usize],
        new: usize,
    ) {
        use crate::template::{validate_scx_arguments, PcInput, View};
        let sigma: Vec<View> = ctx
            .seen
            .iter()
            .map(|s| View {
                id: s.0,
                children: s.2.to_vec(),
            })
            .collect();
        let n: Vec<View> = ids
            .iter()
            .map(|&id| View {
                id,
                children: vec![self.n(id).left(), self.n(id).right()],
            })
            .collect();
        let mut r = plan.r.clone();
        r.sort_by_key(|x| order.iter().position(|y| y == x));
        let a = PcInput {
            m: &[plan.u, plan.old],
            sigma: &sigma,
            v: order,
            r: &r,
            parent: plan.u,
            old: plan.old,
            new,
            n: &n,
        };
        let bad = validate_scx_arguments(&a);
        debug_assert!(bad.is_empty(), "SCX arguments violate {bad:?}");
    }

    /// Checks leaf-oriented key order and that nothing reachable is finalized.
    pub fn check_order(&self, errs: &mut Vec<String>) {
        let mut stack = vec![(self.entry, None::<K>, None::<K>)];
        let mut reached = 0usize;
        while let Some((p, lo, hi)) = stack.pop() {
            reached += 1;
            let n = self.n(p);
            if n.is_marked() {
                errs.push(format!("reachable node {:?} is finalized", n.key));
            }
            if lo.is_some_and(|lo| n.key < lo)
                || hi.is_some_and(|hi| n.key >= hi && n.key != K::MAX)
            {
                errs.push(format!("key {:?} outside its range", n.key));
            }
            if n.is_leaf() {
                if n.right() != 0 {
                    errs.push(format!("leaf {:?} has a right child", n.key));
                }
                continue;
            }
            if n.right() != 0 {
                stack.push((n.right(), Some(n.key), hi));
            } else if p != self.entry {
                errs.push(format!("internal {:?} lacks a right child", n.key));
            }
            stack.push((n.left(), lo, Some(n.key)));
        }
        if reached == 0 {
            errs.push("no nodes".into());
        }
    }

    /// Snapshot of the user tree with `meta` mapped by `f`.
    pub fn shape(&self, f: impl Fn(M) -> u32 + Copy) -> Option<Shape<K>> {
        fn go<K: Key, V, M: Copy>(p: usize, f: impl Fn(M) -> u32 + Copy) -> Shape<K> {
            let n = node::<K, V, M>(p);
            let children = if n.is_leaf() {
                vec![]
            } else {
                vec![go::<K, V, M>(n.left(), f), go::<K, V, M>(n.right(), f)]
            };
            let key = n.key.is_user().then_some(n.key);
            Shape {
                key,
                meta: f(n.meta),
                children,
            }
        }
        let r = self.root();
        (r != 0).then(|| go::<K, V, M>(r, f))
    }

    /// User leaves in key order, with their depth below the root.
    pub fn leaves(&self) -> Vec<(K, V, usize)> {
        let mut out = vec![];
        let r = self.root();
        if r == 0 {
            return out;
        }
        let mut stack = vec![(r, 0usize)];
        while let Some((p, d)) = stack.pop() {
            let n = self.n(p);
            if n.is_leaf() {
                if let Some(v) = n.val {
                    out.push((n.key, v, d));
                }
            } else {
                stack.push((n.right(), d + 1));
                stack.push((n.left(), d + 1));
            }
        }
        out
    }
}

impl<K, V, M> Core<K, V, M> {
    /// Frees every node reachable from `entry`. Requires exclusive access.
    pub fn free_all(&mut self) {
        let mut stack = vec![self.entry];
        while let Some(p) = stack.pop() {
            let b = unsafe { Box::from_raw(p as *mut Node<K, V, M>) };
            for c in [b.left(), b.right()] {
                if c != 0 {
                    stack.push(c);
                }
            }
        }
    }
}

/// Source of node snapshots for rebalancing decisions: LLX in the tree, or
/// a plain arena in sequential tests.
pub trait Reader<K, V, M> {
    fn read(&mut self, p: usize) -> Option<Snap<K, V, M>>;
}

impl<K: Key, V: Copy, M: Copy> Reader<K, V, M> for Ctx<'_, K, V, M> {
    fn read(&mut self, p: usize) -> Option<Snap<K, V, M>> {
        self.llx(p)
    }
}

/// The LLXs performed by one update attempt.
pub struct Ctx<'a, K, V, M> {
    scx: &'a Scx,
    seen: Vec<(usize, Linked, [usize; 2])>,
    _p: PhantomData<(K, V, M)>,
}

impl<'a, K: Key, V: Copy, M: Copy> Ctx<'a, K, V, M> {
    pub fn new(scx: &'a Scx) -> Self {
        Ctx {
            scx,
            seen: Vec::with_capacity(8),
            _p: PhantomData,
        }
    }

    /// LLX on `p`; `None` if it failed, was finalized or `p` is nil.
    pub fn llx(&mut self, p: usize) -> Option<Snap<K, V, M>> {
        if p == 0 {
            return None;
        }
        let n = node::<K, V, M>(p);
        let mut s = [0; 2];
        let Llx::Snapshot(link) = self.scx.llx(n, &mut s) else {
            return None;
        };
        self.seen.retain(|e| e.0 != p);
        self.seen.push((p, link, s));
        Some(Snap {
            id: p,
            key: n.key,
            val: n.val,
            meta: n.meta,
            l: s[LEFT],
            r: s[RIGHT],
        })
    }

    pub fn get(&self, p: usize) -> Option<Snap<K, V, M>> {
        let (_, _, s) = self.seen.iter().find(|e| e.0 == p)?;
        let n = node::<K, V, M>(p);
        Some(Snap {
            id: p,
            key: n.key,
            val: n.val,
            meta: n.meta,
            l: s[LEFT],
            r: s[RIGHT],
        })
    }

    fn link(&self, p: usize) -> Linked {
        self.seen
            .iter()
            .find(|e| e.0 == p)
            .expect("V member without LLX")
            .1
    }

    /// `v` in breadth-first order from `u` over the snapshots taken.
    fn bfs(&self, u: usize, v: &[usize]) -> Vec<usize> {
        let mut out = vec![];
        let mut q = VecDeque::from([u]);
        while let Some(x) = q.pop_front() {
            if v.contains(&x) && !out.contains(&x) {
                out.push(x);
            }
            if let Some((_, _, s)) = self.seen.iter().find(|e| e.0 == x) {
                for &c in s {
                    if c != 0 {
                        q.push_back(c);
                    }
                }
            }
        }
        out
    }
}

/// Sequential node store used to run plans without LLX/SCX.
pub struct Arena<K, V, M> {
    pub nodes: Vec<Snap<K, V, M>>,
}

impl<K: Copy, V: Copy, M: Copy> Arena<K, V, M> {
    pub fn new() -> Self {
        Arena { nodes: vec![] }
    }

    pub fn add(&mut self, key: K, val: Option<V>, meta: M, l: usize, r: usize) -> usize {
        let id = self.nodes.len() + 1;
        self.nodes.push(Snap {
            id,
            key,
            val,
            meta,
            l,
            r,
        });
        id
    }

    pub fn get(&self, p: usize) -> &Snap<K, V, M> {
        &self.nodes[p - 1]
    }

    /// Performs `plan` as its SCX would; returns the new top.
    pub fn apply(&mut self, plan: &Plan<K, V, M>) -> usize {
        let base = self.nodes.len() + 1;
        let resolve = |l: Link| match l {
            Link::Old(p) => p,
            Link::New(i) => base + i,
            Link::Nil => 0,
        };
        for p in &plan.nodes {
            let (l, r) = (resolve(p.l), resolve(p.r));
            self.add(p.key, p.val, p.meta, l, r);
        }
        let top = base + plan.top;
        let u = &mut self.nodes[plan.u - 1];
        if u.l == plan.old {
            u.l = top;
        } else {
            assert_eq!(u.r, plan.old, "plan does not hang from u");
            u.r = top;
        }
        top
    }
}

impl<K: Copy, V: Copy, M: Copy> Reader<K, V, M> for Arena<K, V, M> {
    fn read(&mut self, p: usize) -> Option<Snap<K, V, M>> {
        (p != 0).then(|| *self.get(p))
    }
}
