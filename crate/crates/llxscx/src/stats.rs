/// Shape summary of a tree, taken at quiescence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TreeStats {
    /// Keys stored.
    pub size: usize,
    /// Edges on the longest path from the root to a leaf.
    pub height: usize,
    /// Mean root-to-leaf edge count over all leaves.
    pub avg_leaf_depth: f64,
    pub violations: usize,
}

/// A node of a tree snapshot, for display. Sentinel leaves have no key.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape<K> {
    pub key: Option<K>,
    pub meta: u32,
    pub children: Vec<Shape<K>>,
}

/// Accumulates leaf depths during a traversal.
#[derive(Default)]
pub(crate) struct DepthAcc {
    pub leaves: usize,
    pub depth_sum: usize,
    pub height: usize,
}

impl DepthAcc {
    pub fn leaf(&mut self, depth: usize) {
        self.leaves += 1;
        self.depth_sum += depth;
        self.height = self.height.max(depth);
    }

    pub fn avg(&self) -> f64 {
        if self.leaves == 0 {
            0.0
        } else {
            self.depth_sum as f64 / self.leaves as f64
        }
    }
}

/// Outcome of a structural validation.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub errors: Vec<String>,
    pub stats: TreeStats,
}

impl Report {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}
