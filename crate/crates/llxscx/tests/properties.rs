//! Property tests: every structure against a sequential `BTreeMap` oracle,
//! plus descriptor and k-CAS laws.
#![cfg(not(loom))]

use std::collections::BTreeMap;

use llxscx::abtree::AbTree;
use llxscx::chromatic::Chromatic;
use llxscx::descriptor::{DescTable, Field, Handle, FLAG_MASK};
use llxscx::kcas::{KcasArray, KcasEntry};
use llxscx::multiset::Multiset;
use llxscx::ravl::Ravl;
use llxscx::registry::PID_BITS;
use proptest::prelude::*;

#[derive(Clone, Copy, Debug)]
enum Op {
    Insert(u64),
    Delete(u64),
}

fn ops(keys: u64, len: usize) -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            (1..=keys).prop_map(Op::Insert),
            (1..=keys).prop_map(Op::Delete)
        ],
        0..len,
    )
}

/// Applies `ops` to a dictionary and to a map, checking each result.
fn replay(
    ops: &[Op],
    insert: impl Fn(u64, u64) -> Option<u64>,
    delete: impl Fn(u64) -> Option<u64>,
) -> Result<BTreeMap<u64, u64>, TestCaseError> {
    let mut oracle = BTreeMap::new();
    for (i, op) in ops.iter().enumerate() {
        match *op {
            Op::Insert(k) => {
                let v = k * 1000 + i as u64;
                prop_assert_eq!(insert(k, v), oracle.insert(k, v), "insert {}", k)
            }
            Op::Delete(k) => prop_assert_eq!(delete(k), oracle.remove(&k), "delete {}", k),
        }
    }
    Ok(oracle)
}

fn log2(x: f64) -> f64 {
    x.log2()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multiset_matches_counting_map(
        script in prop::collection::vec((any::<bool>(), 1..=40u64, 1..=3usize), 0..400),
    ) {
        let m = Multiset::<u64>::new();
        let mut oracle: BTreeMap<u64, usize> = BTreeMap::new();
        let mut sum = 0i64;
        for (ins, k, c) in script {
            if ins {
                m.insert(k, c);
                *oracle.entry(k).or_default() += c;
                sum += (k * c as u64) as i64;
            } else {
                let have = oracle.get(&k).copied().unwrap_or(0);
                prop_assert_eq!(m.delete(k, c), have >= c);
                if have >= c {
                    sum -= (k * c as u64) as i64;
                    if have == c { oracle.remove(&k); } else { oracle.insert(k, have - c); }
                }
            }
        }
        let entries = m.entries();
        prop_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        prop_assert_eq!(entries.iter().map(|&(k, c)| (k * c as u64) as i64).sum::<i64>(), sum);
        prop_assert_eq!(entries, oracle.into_iter().collect::<Vec<_>>());
        prop_assert!(m.validate().is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chromatic_matches_map_and_stays_balanced(script in ops(200, 600), k in 1usize..4) {
        let t = Chromatic::<u64, u64>::with_threshold(k);
        let oracle = replay(&script, |k, v| t.insert(k, v), |k| t.delete(k))?;
        prop_assert_eq!(t.entries(), oracle.into_iter().collect::<Vec<_>>());
        let rep = t.validate(0);
        prop_assert!(rep.is_ok(), "{:?}", rep.errors);
        let s = rep.stats;
        if k == 1 {
            prop_assert_eq!(s.violations, 0);
            prop_assert!(s.height as f64 <= 2.0 * log2(s.size as f64 + 1.0) + 1.0, "height {} for {}", s.height, s.size);
        }
    }

    #[test]
    fn ravl_matches_map_and_is_avl(script in ops(200, 600)) {
        let t = Ravl::<u64, u64>::new();
        let oracle = replay(&script, |k, v| t.insert(k, v), |k| t.delete(k))?;
        prop_assert_eq!(t.entries(), oracle.into_iter().collect::<Vec<_>>());
        let rep = t.validate(0);
        prop_assert!(rep.is_ok(), "{:?}", rep.errors);
        let s = rep.stats;
        prop_assert_eq!(s.violations, 0);
        prop_assert!(s.height as f64 <= 1.44 * log2(s.size as f64 + 2.0) + 2.0, "height {} for {}", s.height, s.size);
    }

    #[test]
    fn abtree_matches_map_for_any_degree_bounds(script in ops(300, 600), a in 2usize..8, extra in 0usize..6) {
        let b = 2 * a - 1 + extra;
        let t = AbTree::<u64, u64>::new(a, b);
        let oracle = replay(&script, |k, v| t.insert(k, v), |k| t.delete(k))?;
        prop_assert_eq!(t.entries(), oracle.into_iter().collect::<Vec<_>>());
        let rep = t.validate(0);
        prop_assert!(rep.is_ok(), "({}, {}): {:?}", a, b, rep.errors);
        prop_assert_eq!(rep.stats.violations, 0);
    }

    #[test]
    fn handles_round_trip(flags in 0..=FLAG_MASK, pid in 0usize..1 << PID_BITS, seq in 0usize..1 << 20) {
        let h = Handle::new(flags, pid, seq);
        prop_assert_eq!((h.flags(), h.pid(), h.seq()), (flags, pid, seq));
        prop_assert_eq!(Handle::from_raw(h.raw()), h);
    }

    #[test]
    fn stale_handles_stay_invalid(imms in prop::collection::vec(prop::collection::vec(any::<usize>(), 3), 1..20)) {
        const F: Field = Field::new(0, 4);
        let t: DescTable<3> = DescTable::new(1);
        let mut old: Vec<Handle> = vec![];
        for imm in &imms {
            let h = t.create_new(imm, 5);
            let mut out = [0; 3];
            prop_assert!(t.read_immutables(h, &mut out).is_ok());
            prop_assert_eq!(&out[..], &imm[..]);
            prop_assert_eq!(t.read_field(h, F, 9), 5);
            prop_assert_eq!(h.seq() % 2, 0);
            for &o in &old {
                prop_assert_eq!(t.read_field(o, F, 9), 9);
                prop_assert!(t.read_immutable(o, 0).is_err());
                prop_assert!(t.cas_field(o, F, 5, 6).is_err());
                t.write_field(o, F, 7);
            }
            prop_assert_eq!(t.read_field(h, F, 9), 5);
            old.push(h);
        }
        prop_assert_eq!(t.allocated(), 1);
    }

    #[test]
    fn kcas_is_all_or_nothing(
        script in prop::collection::vec(prop::collection::btree_map(0usize..24, (0usize..3, 0usize..3), 1..6), 0..80),
    ) {
        let a = KcasArray::new(24);
        let mut oracle = [0usize; 24];
        for entries in script {
            let es: Vec<KcasEntry> = entries.iter().map(|(&index, &(e, n))| KcasEntry { index, exp: 4 * e, new: 4 * n }).collect();
            let want = es.iter().all(|e| oracle[e.index] == e.exp);
            prop_assert_eq!(a.kcas(&es), want);
            if want {
                for e in &es {
                    oracle[e.index] = e.new;
                }
            }
            prop_assert!((0..24).all(|i| a.read(i) == oracle[i]));
        }
        prop_assert!(a.slots() <= 2);
    }
}
