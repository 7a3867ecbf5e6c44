//! The tree update template.
//!
//! An update searches, performs LLX on a sequence σ of nodes chosen on the
//! fly, and finishes with a single SCX built from those snapshots.
//! [`run_update`] drives an implementation of [`Template`];
//! [`validate_scx_arguments`] checks the ten postconditions the SCX
//! arguments must satisfy and is called by the trees in debug builds.
//!
//! Updates that go through this module order V breadth-first. Searches are
//! not checked for the delayed traversal property; each structure documents
//! whether its search has it.

use crate::llx::{Linked, Llx, Record, Scx, ScxArgs};
use std::collections::{HashMap, HashSet, VecDeque};

/// One LLX of the update: the node, its link, and the field values seen.
pub struct Step<N> {
    pub node: *const N,
    pub linked: Linked,
    pub snap: Vec<usize>,
}

/// SCX arguments expressed as positions in σ.
pub struct Prepared {
    pub v: Vec<usize>,
    pub r: Vec<usize>,
    /// Position in σ of the node holding the field to change.
    pub owner: usize,
    pub field: usize,
    pub new: usize,
}

/// Hooks of one update. Node references are raw pointers the caller keeps
/// alive, usually with a reclamation guard.
pub trait Template {
    type Node: Record;
    type M;
    type Out;

    fn search_phase(&mut self) -> Self::M;
    /// The node σ starts with.
    fn first(&self, m: &Self::M) -> *const Self::Node;
    fn update_not_needed(&self, m: &Self::M, sigma: &[Step<Self::Node>]) -> bool;
    /// Whether the newest step disagrees with `m`.
    fn conflict(&self, m: &Self::M, sigma: &[Step<Self::Node>]) -> bool;
    /// True once enough LLXs have been performed.
    fn condition(&self, m: &Self::M, sigma: &[Step<Self::Node>]) -> bool;
    fn next_node(&self, m: &Self::M, sigma: &[Step<Self::Node>]) -> *const Self::Node;
    fn scx_arguments(&mut self, m: &Self::M, sigma: &[Step<Self::Node>]) -> Prepared;
    fn result(&mut self, m: &Self::M, sigma: &[Step<Self::Node>]) -> Self::Out;
    /// Called after the SCX committed.
    fn committed(&mut self, _sigma: &[Step<Self::Node>], _p: &Prepared) {}
    /// Called after the SCX failed; `p.new` was never published.
    fn abandoned(&mut self, _p: &Prepared) {}
}

/// Runs one attempt of an update. `None` means the caller should retry.
pub fn run_update<T: Template>(scx: &Scx, t: &mut T) -> Option<T::Out> {
    let m = t.search_phase();
    let mut sigma: Vec<Step<T::Node>> = Vec::new();
    if t.update_not_needed(&m, &sigma) {
        return Some(t.result(&m, &sigma));
    }
    let mut node = t.first(&m);
    loop {
        let r = unsafe { &*node };
        let mut snap = vec![0; r.fields().len()];
        let Llx::Snapshot(linked) = scx.llx(r, &mut snap) else {
            return None;
        };
        sigma.push(Step { node, linked, snap });
        if t.conflict(&m, &sigma) {
            return None;
        }
        if t.condition(&m, &sigma) {
            break;
        }
        node = t.next_node(&m, &sigma);
    }
    if t.update_not_needed(&m, &sigma) {
        return Some(t.result(&m, &sigma));
    }
    let p = t.scx_arguments(&m, &sigma);
    let v: Vec<Linked> = p.v.iter().map(|&i| sigma[i].linked).collect();
    let owner =
        p.v.iter()
            .position(|&i| i == p.owner)
            .expect("fld's node must be in V");
    let mut rmask = 0u32;
    for i in &p.r {
        rmask |= 1 << p.v.iter().position(|x| x == i).expect("R must be inside V");
    }
    let fld = &unsafe { &*sigma[p.owner].node }.fields()[p.field];
    let args = ScxArgs {
        v: &v,
        r: rmask,
        owner,
        fld,
        old: sigma[p.owner].snap[p.field],
        new: p.new,
    };
    if scx.scx(&args) {
        t.committed(&sigma, &p);
        Some(t.result(&m, &sigma))
    } else {
        t.abandoned(&p);
        None
    }
}

/// A node as seen by an update: identity plus child pointers (0 is nil).
#[derive(Clone, Debug)]
pub struct View {
    pub id: usize,
    pub children: Vec<usize>,
}

/// Everything [`validate_scx_arguments`] looks at.
pub struct PcInput<'a> {
    /// Nodes of the search result.
    pub m: &'a [usize],
    /// LLX'd nodes in order, with the child pointers their snapshots held.
    pub sigma: &'a [View],
    pub v: &'a [usize],
    pub r: &'a [usize],
    /// Node containing fld.
    pub parent: usize,
    pub old: usize,
    pub new: usize,
    /// Freshly created nodes with their initial child pointers.
    pub n: &'a [View],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pc {
    Pc1,
    Pc2,
    Pc3,
    Pc4,
    Pc5,
    Pc6,
    Pc7,
    Pc8,
    Pc9,
    Pc10,
}

fn is_subsequence(sub: &[usize], seq: &[usize]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

struct Graph {
    edges: HashMap<usize, Vec<usize>>,
    fringe: Vec<usize>,
}

fn graph<'a>(nodes: impl Iterator<Item = &'a View> + Clone) -> Graph {
    let inside: HashSet<usize> = nodes.clone().map(|n| n.id).collect();
    let mut edges = HashMap::new();
    let mut fringe = vec![];
    for n in nodes {
        let kids: Vec<usize> = n.children.iter().copied().filter(|&c| c != 0).collect();
        for &c in &kids {
            if !inside.contains(&c) && !fringe.contains(&c) {
                fringe.push(c);
            }
        }
        edges.insert(n.id, kids);
    }
    fringe.sort_unstable();
    Graph { edges, fringe }
}

impl Graph {
    /// Down-tree test: one root of in-degree 0, everything else in-degree 1
    /// and reachable from it.
    fn is_down_tree(&self, root: usize) -> bool {
        let mut indeg: HashMap<usize, usize> = HashMap::new();
        for kids in self.edges.values() {
            for &c in kids {
                *indeg.entry(c).or_default() += 1;
            }
        }
        if indeg.get(&root).copied().unwrap_or(0) != 0 || !self.edges.contains_key(&root) {
            return false;
        }
        let all: HashSet<usize> = self
            .edges
            .keys()
            .copied()
            .chain(self.fringe.iter().copied())
            .collect();
        if all.iter().any(|&x| x != root && indeg.get(&x) != Some(&1)) {
            return false;
        }
        let mut seen = HashSet::from([root]);
        let mut stack = vec![root];
        while let Some(x) = stack.pop() {
            for &c in self.edges.get(&x).map(|v| v.as_slice()).unwrap_or(&[]) {
                if seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        seen.len() == all.len()
    }
}

/// Lists the postconditions that `a` violates.
pub fn validate_scx_arguments(a: &PcInput) -> Vec<Pc> {
    let mut bad = vec![];
    let sigma_ids: Vec<usize> = a.sigma.iter().map(|s| s.id).collect();
    // membership only: ordering of V is PC10's business
    if !a.v.iter().all(|x| sigma_ids.contains(x)) {
        bad.push(Pc::Pc1);
    }
    if !a.v.contains(&a.parent) {
        bad.push(Pc::Pc2);
    }
    if !is_subsequence(a.r, a.v) {
        bad.push(Pc::Pc3);
    }
    if !a.m.iter().all(|x| a.v.contains(x)) {
        bad.push(Pc::Pc4);
    }
    let gn = graph(a.n.iter());
    if a.old == 0 && (!a.r.is_empty() || !gn.fringe.is_empty()) {
        bad.push(Pc::Pc5);
    }
    if a.r.is_empty() && a.old != 0 && gn.fringe != [a.old] {
        bad.push(Pc::Pc6);
    }
    let gsigma = graph(a.sigma.iter());
    if !a.r.is_empty() && !a.sigma.is_empty() && gsigma.is_down_tree(a.sigma[0].id) {
        let rviews = a.sigma.iter().filter(|s| a.r.contains(&s.id));
        let gr = graph(rviews);
        if !gr.is_down_tree(a.old) || gr.fringe != gn.fringe {
            bad.push(Pc::Pc7);
        }
    }
    if a.n.is_empty() || !gn.is_down_tree(a.new) {
        bad.push(Pc::Pc8);
    }
    let known: HashSet<usize> = sigma_ids
        .iter()
        .chain(gsigma.fringe.iter())
        .chain(a.m.iter())
        .copied()
        .collect();
    if a.n.iter().any(|n| known.contains(&n.id)) {
        bad.push(Pc::Pc9);
    }
    if !bfs_ordered(a.v, a.sigma) {
        bad.push(Pc::Pc10);
    }
    bad
}

fn bfs_ordered(v: &[usize], sigma: &[View]) -> bool {
    let Some(first) = sigma.first() else {
        return v.is_empty();
    };
    let kids: HashMap<usize, &[usize]> = sigma
        .iter()
        .map(|s| (s.id, s.children.as_slice()))
        .collect();
    let mut order = HashMap::new();
    let mut q = VecDeque::from([first.id]);
    while let Some(x) = q.pop_front() {
        if order.contains_key(&x) {
            continue;
        }
        order.insert(x, order.len());
        for &c in kids.get(&x).copied().unwrap_or(&[]) {
            if c != 0 {
                q.push_back(c);
            }
        }
    }
    let pos: Option<Vec<usize>> = v.iter().map(|x| order.get(x).copied()).collect();
    pos.is_some_and(|p| p.windows(2).all(|w| w[0] < w[1]))
}
