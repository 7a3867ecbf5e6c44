//! A common face for the four dictionaries, keyed by `u64`.

use llxscx::abtree::AbTree;
use llxscx::chromatic::Chromatic;
use llxscx::multiset::Multiset;
use llxscx::ravl::Ravl;
use llxscx::TreeStats;

pub trait Dict: Send + Sync {
    /// True if the key was absent (or, for the multiset, always).
    fn insert(&self, k: u64) -> bool;
    /// True if an occurrence was removed.
    fn delete(&self, k: u64) -> bool;
    fn get(&self, k: u64) -> bool;
    /// Smallest key above `k`. The multiset and (a,b)-tree answer with a
    /// plain lookup instead.
    fn successor(&self, k: u64) -> Option<u64>;
    /// `(key, multiplicity)` pairs in key order, at quiescence.
    fn contents(&self) -> Vec<(u64, usize)>;
    fn violations(&self) -> usize;
    fn stats(&self) -> TreeStats;
    /// Validator errors at quiescence, plus the shape summary.
    fn check(&self) -> (Vec<String>, TreeStats);
}

impl Dict for Multiset<u64> {
    fn insert(&self, k: u64) -> bool {
        Multiset::insert(self, k, 1);
        true
    }
    fn delete(&self, k: u64) -> bool {
        Multiset::delete(self, k, 1)
    }
    fn get(&self, k: u64) -> bool {
        Multiset::get(self, k) > 0
    }
    fn successor(&self, k: u64) -> Option<u64> {
        Dict::get(self, k).then_some(k)
    }
    fn contents(&self) -> Vec<(u64, usize)> {
        self.entries()
    }
    fn violations(&self) -> usize {
        0
    }
    fn stats(&self) -> TreeStats {
        let size = self.entries().iter().map(|e| e.1).sum();
        TreeStats {
            size,
            ..TreeStats::default()
        }
    }
    fn check(&self) -> (Vec<String>, TreeStats) {
        let errors = self.validate().err().into_iter().collect();
        (errors, Dict::stats(self))
    }
}

macro_rules! tree_dict {
    ($t:ty, $succ:expr) => {
        impl Dict for $t {
            fn insert(&self, k: u64) -> bool {
                <$t>::insert(self, k, k).is_none()
            }
            fn delete(&self, k: u64) -> bool {
                <$t>::delete(self, k).is_some()
            }
            fn get(&self, k: u64) -> bool {
                <$t>::get(self, k).is_some()
            }
            fn successor(&self, k: u64) -> Option<u64> {
                ($succ)(self, k)
            }
            fn contents(&self) -> Vec<(u64, usize)> {
                self.entries().into_iter().map(|(k, _)| (k, 1)).collect()
            }
            fn violations(&self) -> usize {
                <$t>::violations(self)
            }
            fn stats(&self) -> TreeStats {
                <$t>::stats(self)
            }
            fn check(&self) -> (Vec<String>, TreeStats) {
                let r = self.validate(0);
                (r.errors, r.stats)
            }
        }
    };
}

tree_dict!(Chromatic<u64, u64>, |t: &Chromatic<u64, u64>, k| t.successor(k).map(|e| e.0));
tree_dict!(Ravl<u64, u64>, |t: &Ravl<u64, u64>, k| t.successor(k).map(|e| e.0));
// no successor query on the (a,b)-tree; a lookup stands in, as for the multiset
tree_dict!(AbTree<u64, u64>, |t: &AbTree<u64, u64>, k| t.get(k).map(|_| k));
