//! A multiset as a sorted singly linked list with per-key counts.
//!
//! Every operation goes through [`run_update`]. Sentinels hold `K::MIN` and
//! `K::MAX`. A count grows in place with an SCX on the count field; it only
//! shrinks by replacing the node, so a node's count never returns to an
//! earlier value.

use crate::key::Key;
use crate::llx::{Header, Record, Scx};
use crate::reclaim::{Collector, Guard};
use crate::shim::{AtomicUsize, SeqCst};
use crate::stw;
use crate::template::{run_update, Prepared, Step, Template};
use std::marker::PhantomData;

const NEXT: usize = 0;
const COUNT: usize = 1;

struct Node<K> {
    hdr: Header,
    key: K,
    f: [AtomicUsize; 2],
}

impl<K> Record for Node<K> {
    fn header(&self) -> &Header {
        &self.hdr
    }
    fn fields(&self) -> &[AtomicUsize] {
        &self.f
    }
}

impl<K: Key> Node<K> {
    fn alloc(key: K, count: usize, next: usize) -> *mut Node<K> {
        Box::into_raw(Box::new(Node {
            hdr: Header::new(),
            key,
            f: [AtomicUsize::new(next), AtomicUsize::new(count)],
        }))
    }
}

fn node<'g, K>(p: usize) -> &'g Node<K> {
    unsafe { &*(p as *const Node<K>) }
}

pub struct Multiset<K: Key> {
    head: usize,
    scx: Scx,
    collector: Collector,
    _k: PhantomData<K>,
}

unsafe impl<K: Key> Send for Multiset<K> {}
unsafe impl<K: Key> Sync for Multiset<K> {}

impl<K: Key> Default for Multiset<K> {
    fn default() -> Self {
        Multiset::new()
    }
}

impl<K: Key> Multiset<K> {
    pub fn new() -> Self {
        Multiset::with_parts(Scx::new(), Collector::new())
    }

    pub fn with_parts(scx: Scx, collector: Collector) -> Self {
        let tail = Node::alloc(K::MAX, 0, 0);
        let head = Node::alloc(K::MIN, 0, tail as usize);
        Multiset {
            head: head as usize,
            scx,
            collector,
            _k: PhantomData,
        }
    }

    pub fn scx(&self) -> &Scx {
        &self.scx
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    /// Returns `(r, p)` with `p.key < key <= r.key`.
    fn search(&self, key: K) -> (usize, usize) {
        let mut p = self.head;
        let mut r = node::<K>(p).f[NEXT].load(SeqCst);
        while key > node::<K>(r).key {
            p = r;
            r = node::<K>(r).f[NEXT].load(SeqCst);
        }
        (r, p)
    }

    pub fn get(&self, key: K) -> usize {
        assert!(key.is_user());
        let _g = self.collector.pin();
        let (r, _) = self.search(key);
        let r = node::<K>(r);
        if r.key == key {
            r.f[COUNT].load(SeqCst)
        } else {
            0
        }
    }

    pub fn insert(&self, key: K, count: usize) {
        assert!(key.is_user() && count > 0);
        stw::safepoint(false);
        let _g = self.collector.pin();
        let mut op = Insert {
            ms: self,
            key,
            count,
            fresh: 0,
        };
        while run_update(&self.scx, &mut op).is_none() {}
    }

    /// Removes `count` occurrences; false if fewer are present.
    pub fn delete(&self, key: K, count: usize) -> bool {
        assert!(key.is_user() && count > 0);
        stw::safepoint(false);
        let g = self.collector.pin();
        let mut op = Delete {
            ms: self,
            g: &g,
            key,
            count,
            fresh: 0,
        };
        loop {
            if let Some(found) = run_update(&self.scx, &mut op) {
                return found;
            }
        }
    }

    /// `(key, count)` pairs in list order. Only meaningful at quiescence.
    pub fn entries(&self) -> Vec<(K, usize)> {
        let _g = self.collector.pin();
        let mut out = vec![];
        let mut r = node::<K>(self.head).f[NEXT].load(SeqCst);
        while node::<K>(r).key != K::MAX {
            let n = node::<K>(r);
            out.push((n.key, n.f[COUNT].load(SeqCst)));
            r = n.f[NEXT].load(SeqCst);
        }
        out
    }

    /// Checks order, counts and that no reachable node is finalized.
    pub fn validate(&self) -> Result<(), String> {
        let _g = self.collector.pin();
        let mut prev = K::MIN;
        let mut r = self.head;
        loop {
            let n = node::<K>(r);
            if n.hdr.is_marked() {
                return Err(format!("reachable node {:?} is finalized", n.key));
            }
            let c = n.f[COUNT].load(SeqCst);
            if n.key.is_user() && c == 0 {
                return Err(format!("key {:?} has count 0", n.key));
            }
            if r != self.head && n.key <= prev {
                return Err(format!("keys out of order at {:?}", n.key));
            }
            prev = n.key;
            if n.key == K::MAX {
                return if n.f[NEXT].load(SeqCst) == 0 {
                    Ok(())
                } else {
                    Err("tail has a successor".into())
                };
            }
            r = n.f[NEXT].load(SeqCst);
        }
    }
}

impl<K: Key> Drop for Multiset<K> {
    fn drop(&mut self) {
        let mut r = self.head;
        while r != 0 {
            let b = unsafe { Box::from_raw(r as *mut Node<K>) };
            r = b.f[NEXT].load(SeqCst);
        }
    }
}

struct Insert<'a, K: Key> {
    ms: &'a Multiset<K>,
    key: K,
    count: usize,
    fresh: usize,
}

impl<K: Key> Template for Insert<'_, K> {
    type Node = Node<K>;
    type M = (usize, usize);
    type Out = ();

    fn search_phase(&mut self) -> (usize, usize) {
        self.ms.search(self.key)
    }
    fn first(&self, &(r, p): &(usize, usize)) -> *const Node<K> {
        (if node::<K>(r).key == self.key { r } else { p }) as *const _
    }
    fn update_not_needed(&self, _: &(usize, usize), _: &[Step<Node<K>>]) -> bool {
        false
    }
    fn conflict(&self, &(r, _): &(usize, usize), s: &[Step<Node<K>>]) -> bool {
        // when splicing after p, p must still point at r
        node::<K>(r).key != self.key && s[0].snap[NEXT] != r
    }
    fn condition(&self, _: &(usize, usize), _: &[Step<Node<K>>]) -> bool {
        true
    }
    fn next_node(&self, _: &(usize, usize), _: &[Step<Node<K>>]) -> *const Node<K> {
        unreachable!()
    }
    fn scx_arguments(&mut self, &(r, _): &(usize, usize), s: &[Step<Node<K>>]) -> Prepared {
        if node::<K>(r).key == self.key {
            Prepared {
                v: vec![0],
                r: vec![],
                owner: 0,
                field: COUNT,
                new: s[0].snap[COUNT] + self.count,
            }
        } else {
            self.fresh = Node::alloc(self.key, self.count, r) as usize;
            Prepared {
                v: vec![0],
                r: vec![],
                owner: 0,
                field: NEXT,
                new: self.fresh,
            }
        }
    }
    fn result(&mut self, _: &(usize, usize), _: &[Step<Node<K>>]) {}
    fn committed(&mut self, _: &[Step<Node<K>>], _: &Prepared) {
        self.fresh = 0;
    }
    fn abandoned(&mut self, _: &Prepared) {
        if self.fresh != 0 {
            unsafe {
                self.ms
                    .collector
                    .free_unpublished(self.fresh as *mut Node<K>)
            };
            self.fresh = 0;
        }
    }
}

struct Delete<'a, 'g, K: Key> {
    ms: &'a Multiset<K>,
    g: &'a Guard<'g>,
    key: K,
    count: usize,
    fresh: usize,
}

impl<K: Key> Delete<'_, '_, K> {
    fn absent(&self, s: &[Step<Node<K>>]) -> bool {
        node::<K>(s[1].node as usize).key != self.key || s[1].snap[COUNT] < self.count
    }
}

impl<K: Key> Template for Delete<'_, '_, K> {
    type Node = Node<K>;
    type M = (usize, usize);
    type Out = bool;

    fn search_phase(&mut self) -> (usize, usize) {
        self.ms.search(self.key)
    }
    fn first(&self, &(_, p): &(usize, usize)) -> *const Node<K> {
        p as *const _
    }
    fn update_not_needed(&self, _: &(usize, usize), s: &[Step<Node<K>>]) -> bool {
        s.len() >= 2 && self.absent(s)
    }
    fn conflict(&self, &(r, _): &(usize, usize), s: &[Step<Node<K>>]) -> bool {
        s.len() == 1 && s[0].snap[NEXT] != r
    }
    fn condition(&self, _: &(usize, usize), s: &[Step<Node<K>>]) -> bool {
        match s.len() {
            1 => false,
            2 => self.absent(s) || s[1].snap[COUNT] > self.count,
            _ => true,
        }
    }
    fn next_node(&self, &(r, _): &(usize, usize), s: &[Step<Node<K>>]) -> *const Node<K> {
        if s.len() == 1 {
            r as *const _
        } else {
            s[1].snap[NEXT] as *const _
        }
    }
    fn scx_arguments(&mut self, _: &(usize, usize), s: &[Step<Node<K>>]) -> Prepared {
        let r = node::<K>(s[1].node as usize);
        if s.len() == 2 {
            self.fresh =
                Node::alloc(r.key, s[1].snap[COUNT] - self.count, s[1].snap[NEXT]) as usize;
            return Prepared {
                v: vec![0, 1],
                r: vec![1],
                owner: 0,
                field: NEXT,
                new: self.fresh,
            };
        }
        let rnext = node::<K>(s[2].node as usize);
        self.fresh = Node::alloc(rnext.key, s[2].snap[COUNT], s[2].snap[NEXT]) as usize;
        let p = Prepared {
            v: vec![0, 1, 2],
            r: vec![1, 2],
            owner: 0,
            field: NEXT,
            new: self.fresh,
        };
        #[cfg(debug_assertions)]
        {
            use crate::template::{validate_scx_arguments, PcInput, View};
            let ids: Vec<usize> = s.iter().map(|x| x.node as usize).collect();
            let sigma: Vec<View> = s
                .iter()
                .map(|x| View {
                    id: x.node as usize,
                    children: vec![x.snap[NEXT]],
                })
                .collect();
            let n = [View {
                id: self.fresh,
                children: vec![s[2].snap[NEXT]],
            }];
            let a = PcInput {
                m: &ids[..2],
                sigma: &sigma,
                v: &ids,
                r: &ids[1..],
                parent: ids[0],
                old: ids[1],
                new: self.fresh,
                n: &n,
            };
            let bad = validate_scx_arguments(&a);
            debug_assert!(bad.is_empty(), "multiset delete violates {bad:?}");
        }
        p
    }
    fn result(&mut self, _: &(usize, usize), s: &[Step<Node<K>>]) -> bool {
        !(s.len() >= 2 && self.absent(s))
    }
    fn committed(&mut self, s: &[Step<Node<K>>], p: &Prepared) {
        self.fresh = 0;
        for &i in &p.r {
            let n = s[i].node as *mut Node<K>;
            self.ms.scx.forget(unsafe { &(*n).hdr });
            unsafe { self.ms.collector.retire(self.g, n) };
        }
    }
    fn abandoned(&mut self, _: &Prepared) {
        if self.fresh != 0 {
            unsafe {
                self.ms
                    .collector
                    .free_unpublished(self.fresh as *mut Node<K>)
            };
            self.fresh = 0;
        }
    }
}

#[cfg(all(test, not(loom)))]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    #[test]
    fn basic_counts() {
        let m: Multiset<u64> = Multiset::new();
        assert_eq!(m.get(7), 0);
        assert!(!m.delete(5, 1));
        m.insert(5, 3);
        assert_eq!(m.get(5), 3);
        m.insert(5, 2);
        assert_eq!(m.get(5), 5);
        assert!(!m.delete(5, 6));
        assert!(m.delete(5, 1));
        assert_eq!(m.get(5), 4);
        assert!(m.delete(5, 4));
        assert_eq!(m.get(5), 0);
        assert_eq!(m.entries(), vec![]);
        m.validate().unwrap();
    }

    #[test]
    fn insert_into_empty_links_head_to_new_node_to_tail() {
        let m: Multiset<u64> = Multiset::new();
        m.insert(9, 1);
        let first = node::<u64>(node::<u64>(m.head).f[NEXT].load(SeqCst));
        assert_eq!(first.key, 9);
        assert_eq!(node::<u64>(first.f[NEXT].load(SeqCst)).key, u64::MAX);
    }

    #[test]
    fn exact_delete_finalizes_node_and_successor() {
        let m: Multiset<u64> = Multiset::with_parts(Scx::new(), Collector::disabled());
        m.insert(5, 3);
        m.insert(8, 1);
        let r = node::<u64>(m.head).f[NEXT].load(SeqCst);
        let rnext = node::<u64>(r).f[NEXT].load(SeqCst);
        assert!(m.delete(5, 3));
        assert!(node::<u64>(r).hdr.is_marked() && node::<u64>(rnext).hdr.is_marked());
        assert_eq!(m.scx.finalized(), 2);
        assert_eq!(m.collector.retired(), 2);
        assert_eq!(m.entries(), vec![(8, 1)]);
        m.validate().unwrap();
    }

    #[test]
    fn random_ops_match_oracle() {
        let m: Multiset<u32> = Multiset::new();
        let mut oracle: BTreeMap<u32, usize> = BTreeMap::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..20_000 {
            let k = rng.gen_range(1..200);
            let c = rng.gen_range(1..4);
            match rng.gen_range(0..3) {
                0 => {
                    m.insert(k, c);
                    *oracle.entry(k).or_default() += c;
                }
                1 => {
                    let have = oracle.get(&k).copied().unwrap_or(0);
                    assert_eq!(m.delete(k, c), have >= c);
                    if have > c {
                        oracle.insert(k, have - c);
                    } else if have == c {
                        oracle.remove(&k);
                    }
                }
                _ => assert_eq!(m.get(k), oracle.get(&k).copied().unwrap_or(0)),
            }
        }
        assert_eq!(m.entries(), oracle.into_iter().collect::<Vec<_>>());
        m.validate().unwrap();
    }

    #[test]
    fn concurrent_checksum_and_history() {
        let m: Arc<Multiset<u64>> =
            Arc::new(Multiset::with_parts(Scx::with_history(), Collector::new()));
        let hs: Vec<_> = (0..4)
            .map(|t| {
                let m = m.clone();
                std::thread::spawn(move || {
                    let mut rng = rand::rngs::StdRng::seed_from_u64(t);
                    let mut sum: i128 = 0;
                    for _ in 0..5000 {
                        let k = rng.gen_range(1..64u64);
                        let c = rng.gen_range(1..3usize);
                        if rng.gen_bool(0.5) {
                            m.insert(k, c);
                            sum += (k as usize * c) as i128;
                        } else if m.delete(k, c) {
                            sum -= (k as usize * c) as i128;
                        }
                    }
                    sum
                })
            })
            .collect();
        let expected: i128 = hs.into_iter().map(|h| h.join().unwrap()).sum();
        let got: i128 = m
            .entries()
            .iter()
            .map(|&(k, c): &(u64, usize)| (k as usize * c) as i128)
            .sum();
        assert_eq!(got, expected);
        m.validate().unwrap();
        assert_eq!(m.scx.history_violations(), 0);
    }
}
