use llxscx::chromatic::Chromatic;
use llxscx::key::Key;
use llxscx::stats::Shape;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// A chromatic tree driven from the page, one operation at a time.
#[wasm_bindgen]
pub struct Demo {
    tree: Chromatic<i64, i64>,
    rng: SmallRng,
}

#[wasm_bindgen]
impl Demo {
    /// `k` is the violation threshold; 1 rebalances eagerly.
    #[wasm_bindgen(constructor)]
    pub fn new(k: usize, seed: u64) -> Demo {
        Demo {
            tree: Chromatic::with_threshold(k.max(1)),
            rng: SmallRng::seed_from_u64(seed),
        }
    }

    /// True if the key was not present. The two extreme values are reserved.
    pub fn insert(&self, key: i64) -> bool {
        key.is_user() && self.tree.insert(key, key).is_none()
    }

    /// True if the key was present.
    pub fn delete(&self, key: i64) -> bool {
        key.is_user() && self.tree.delete(key).is_some()
    }

    /// Inserts `n` random keys from `1..=range`; returns how many were new.
    pub fn fill(&mut self, n: u32, range: i64) -> u32 {
        let mut added = 0;
        for _ in 0..n {
            let k = self.rng.gen_range(1..=range.max(1));
            added += self.insert(k) as u32;
        }
        added
    }

    /// The tree as nested `{key, weight, children}` objects, or null.
    pub fn shape_json(&self) -> String {
        self.tree
            .shape()
            .map_or(Value::Null, |s| to_json(&s))
            .to_string()
    }

    /// Size, height and violation count as JSON.
    pub fn stats_json(&self) -> String {
        let s = self.tree.stats();
        json!({ "size": s.size, "height": s.height, "violations": s.violations }).to_string()
    }
}

fn to_json(s: &Shape<i64>) -> Value {
    json!({
        "key": s.key,
        "weight": s.meta,
        "children": s.children.iter().map(to_json).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operations_show_in_shape() {
        let mut d = Demo::new(1, 5);
        assert_eq!(d.shape_json(), "null");
        assert!(d.insert(10));
        assert!(!d.insert(10));
        let v: Value = serde_json::from_str(&d.shape_json()).unwrap();
        assert_eq!(v["key"], 10);
        assert!(d.delete(10));
        assert!(!d.delete(10));
        assert!(!d.insert(i64::MAX) && !d.delete(i64::MIN));
        let added = d.fill(50, 100);
        let st: Value = serde_json::from_str(&d.stats_json()).unwrap();
        assert_eq!(st["size"], added);
        assert_eq!(st["violations"], 0);
    }

    #[test]
    fn threshold_defers_rebalancing() {
        let eager = Demo::new(1, 0);
        let lazy = Demo::new(6, 0);
        for k in 1..=64 {
            eager.insert(k);
            lazy.insert(k);
        }
        let h = |d: &Demo| {
            serde_json::from_str::<Value>(&d.stats_json()).unwrap()["height"]
                .as_u64()
                .unwrap()
        };
        assert!(h(&lazy) >= h(&eager));
    }
}
