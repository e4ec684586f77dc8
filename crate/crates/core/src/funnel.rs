//! Finite tree-structured integral funnels.
//!
//! A [`BranchRule`] lists, for every grid node `(t_k, x)`, the admissible
//! one-step arcs. Unrolling the rule from `(t0, a)` yields a [`Funnel`]: all
//! concatenations of arcs over the grid, stored both as materialized paths
//! and as a prefix tree. Because the arc lists depend only on the node, a
//! funnel generated this way is closed under shift and splice at grid times;
//! [`check_shift_closure`] and [`check_splice_closure`] verify this rather
//! than assume it.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{FunnelError, Result};
use crate::path_space::{Path, StatePoint, TimeGrid};

/// Default cap on the number of paths a single unroll may produce.
pub const DEFAULT_PATH_CAP: usize = 1 << 20;

/// A grid node as seen by a branch rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridNode {
    /// Absolute grid index; `time == index as f64 * step`.
    pub index: i64,
    pub time: f64,
    pub step: f64,
}

impl GridNode {
    pub fn next_time(&self) -> f64 {
        (self.index + 1) as f64 * self.step
    }
}

/// A one-step arc: the straight segment from the node state to `end`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchArc {
    pub end: StatePoint,
}

impl BranchArc {
    pub fn new(end: StatePoint) -> Self {
        Self { end }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            end: StatePoint::scalar(x),
        }
    }
}

/// Generator of a funnel family.
///
/// Implementations must be deterministic: identical arguments give identical
/// arc lists in identical order. The list must be non-empty at every node the
/// rule admits; nodes outside the admissible set return
/// [`FunnelError::Inadmissible`].
pub trait BranchRule: Send + Sync {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>>;

    /// Upper bound on the length of any arc list.
    fn max_branching(&self) -> usize;

    fn name(&self) -> &str {
        "rule"
    }
}

impl<R: BranchRule + ?Sized> BranchRule for &R {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        (**self).arcs(node, x)
    }
    fn max_branching(&self) -> usize {
        (**self).max_branching()
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<R: BranchRule + ?Sized> BranchRule for Box<R> {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        (**self).arcs(node, x)
    }
    fn max_branching(&self) -> usize {
        (**self).max_branching()
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<R: BranchRule + ?Sized> BranchRule for std::sync::Arc<R> {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        (**self).arcs(node, x)
    }
    fn max_branching(&self) -> usize {
        (**self).max_branching()
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Node of the prefix tree. Node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub depth: usize,
    pub state: StatePoint,
    pub parent: Option<usize>,
    /// Position of the generating arc in the parent's arc list.
    pub arc: u32,
    pub children: Vec<usize>,
    /// Number of funnel paths through this node.
    pub leaf_count: usize,
}

/// A finite funnel `S(t0, a)`: paths in canonical tree order plus the tree.
#[derive(Debug, Clone)]
pub struct Funnel {
    anchor: StatePoint,
    grid: TimeGrid,
    paths: Vec<Path>,
    addresses: Vec<Vec<u32>>,
    nodes: Vec<TreeNode>,
    leaves: Vec<usize>,
}

impl Funnel {
    /// Builds a funnel from paths and their arc-choice addresses. Paths are
    /// reordered into lexicographic address order.
    pub fn from_addressed(grid: TimeGrid, mut entries: Vec<(Vec<u32>, Path)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(FunnelError::InvalidParameter("a funnel needs at least one path".into()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let anchor = entries[0].1.start().clone();
        for (addr, p) in &entries {
            if *p.grid() != grid {
                return Err(FunnelError::GridMismatch("funnel paths must share the grid".into()));
            }
            if addr.len() != grid.n_steps() {
                return Err(FunnelError::InvalidParameter(format!(
                    "address length {} != n_steps {}",
                    addr.len(),
                    grid.n_steps()
                )));
            }
            if *p.start() != anchor {
                return Err(FunnelError::InvalidParameter(
                    "funnel paths must share the anchor".into(),
                ));
            }
        }
        let mut nodes = vec![TreeNode {
            depth: 0,
            state: anchor.clone(),
            parent: None,
            arc: 0,
            children: Vec::new(),
            leaf_count: 0,
        }];
        let mut leaves = Vec::with_capacity(entries.len());
        for (addr, p) in &entries {
            let mut cur = 0usize;
            nodes[0].leaf_count += 1;
            for (d, &a) in addr.iter().enumerate() {
                let found = nodes[cur].children.iter().copied().find(|&c| nodes[c].arc == a);
                let next = match found {
                    Some(c) => {
                        if nodes[c].state != *p.sample(d + 1) {
                            return Err(FunnelError::InvalidParameter(format!(
                                "paths sharing an address prefix disagree at depth {}",
                                d + 1
                            )));
                        }
                        c
                    }
                    None => {
                        let id = nodes.len();
                        nodes.push(TreeNode {
                            depth: d + 1,
                            state: p.sample(d + 1).clone(),
                            parent: Some(cur),
                            arc: a,
                            children: Vec::new(),
                            leaf_count: 0,
                        });
                        nodes[cur].children.push(id);
                        id
                    }
                };
                nodes[next].leaf_count += 1;
                cur = next;
            }
            leaves.push(cur);
        }
        let (addresses, paths) = entries.into_iter().unzip();
        Ok(Self {
            anchor,
            grid,
            paths,
            addresses,
            nodes,
            leaves,
        })
    }

    pub fn t0(&self) -> f64 {
        self.grid.t_start()
    }

    pub fn anchor(&self) -> &StatePoint {
        &self.anchor
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Arc-choice sequence of each path, aligned with [`Funnel::paths`].
    pub fn addresses(&self) -> &[Vec<u32>] {
        &self.addresses
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Leaf node of each path, aligned with [`Funnel::paths`].
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    /// Tree node through which path `i` passes at depth `k`.
    pub fn node_at(&self, i: usize, k: usize) -> usize {
        let mut cur = self.leaves[i];
        while self.nodes[cur].depth > k {
            cur = self.nodes[cur].parent.expect("depth > 0 has a parent");
        }
        cur
    }

    /// The sub-funnel consisting of the listed paths (canonical order kept).
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let entries = keep
            .iter()
            .map(|&i| (self.addresses[i].clone(), self.paths[i].clone()))
            .collect();
        Self::from_addressed(self.grid, entries)
    }

    /// Checks that leaf counts add up along the tree and that every stored
    /// path is the chain of node states from root to its leaf.
    pub fn tree_consistent(&self) -> bool {
        let counts_ok = self.nodes.iter().all(|n| {
            n.children.is_empty() || n.leaf_count == n.children.iter().map(|&c| self.nodes[c].leaf_count).sum::<usize>()
        });
        let paths_ok = self
            .paths
            .iter()
            .enumerate()
            .all(|(i, p)| (0..=self.grid.n_steps()).all(|k| self.nodes[self.node_at(i, k)].state == *p.sample(k)));
        counts_ok && paths_ok && self.nodes[0].leaf_count == self.paths.len()
    }

    /// JSON dump `{t0, anchor, delta, n_steps, paths}`.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Dump<'a> {
            t0: f64,
            anchor: &'a StatePoint,
            delta: f64,
            n_steps: usize,
            paths: Vec<&'a [StatePoint]>,
        }
        serde_json::to_value(Dump {
            t0: self.t0(),
            anchor: &self.anchor,
            delta: self.grid.step(),
            n_steps: self.grid.n_steps(),
            paths: self.paths.iter().map(|p| p.samples()).collect(),
        })
        .expect("funnel dump serializes")
    }
}

/// Grid node `k` of `grid`.
pub fn grid_node(grid: &TimeGrid, k: usize) -> GridNode {
    GridNode {
        index: grid.first() + k as i64,
        time: grid.time(k),
        step: grid.step(),
    }
}

/// All arc concatenations from `(grid.t_start(), a)` over `grid`.
pub fn unroll<R: BranchRule + ?Sized>(rule: &R, a: &StatePoint, grid: TimeGrid, cap: usize) -> Result<Funnel> {
    struct Frame {
        depth: usize,
        arcs: Vec<BranchArc>,
        next: usize,
    }
    let n = grid.n_steps();
    let mut entries: Vec<(Vec<u32>, Path)> = Vec::new();
    let mut states: Vec<StatePoint> = vec![a.clone()];
    let mut address: Vec<u32> = Vec::new();
    let root_arcs = if n == 0 {
        Vec::new()
    } else {
        checked_arcs(rule, grid_node(&grid, 0), a)?
    };
    if n == 0 {
        entries.push((Vec::new(), Path::new(grid, states)?));
        return Funnel::from_addressed(grid, entries);
    }
    let mut stack = vec![Frame {
        depth: 0,
        arcs: root_arcs,
        next: 0,
    }];
    while let Some(top) = stack.last_mut() {
        if top.next == top.arcs.len() {
            stack.pop();
            states.pop();
            address.pop();
            continue;
        }
        let idx = top.next;
        top.next += 1;
        let depth = top.depth + 1;
        let end = top.arcs[idx].end.clone();
        states.truncate(depth);
        address.truncate(depth - 1);
        states.push(end.clone());
        address.push(idx as u32);
        if depth == n {
            if entries.len() == cap {
                return Err(FunnelError::PathCountExceeded {
                    cap,
                    node: format!("t = {}, x = {:?}", grid.time(depth - 1), states[depth - 1].coords()),
                });
            }
            entries.push((address.clone(), Path::new(grid, states.clone())?));
            states.pop();
            address.pop();
        } else {
            let arcs = checked_arcs(rule, grid_node(&grid, depth), &end)?;
            stack.push(Frame { depth, arcs, next: 0 });
        }
    }
    Funnel::from_addressed(grid, entries)
}

fn checked_arcs<R: BranchRule + ?Sized>(rule: &R, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
    let arcs = rule.arcs(node, x)?;
    if arcs.is_empty() {
        return Err(FunnelError::EmptyBranch {
            time: node.time,
            state: x.coords().to_vec(),
        });
    }
    if arcs.len() > rule.max_branching() {
        return Err(FunnelError::InvalidParameter(format!(
            "rule `{}` returned {} arcs, above its bound {}",
            rule.name(),
            arcs.len(),
            rule.max_branching()
        )));
    }
    if let Some(bad) = arcs.iter().find(|a| a.end.dim() != x.dim()) {
        return Err(FunnelError::DimensionMismatch {
            left: x.dim(),
            right: bad.end.dim(),
        });
    }
    Ok(arcs)
}

/// One failed membership test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomViolation {
    /// Index of the funnel path `u`.
    pub path: usize,
    /// Grid shift at which the test failed.
    pub k: usize,
    /// For splice tests, index of `v` in the sub-funnel at `(t_k, u(t_k))`.
    pub other: Option<usize>,
    pub detail: String,
}

/// Outcome of a closure check; violations are data, not errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AxiomReport {
    pub checked: usize,
    pub violations: Vec<AxiomViolation>,
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: AxiomReport) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
    }
}

/// Shift closure at grid shift `k`: every `shift(u, k)` is a member of the
/// funnel unrolled from `(t_k, u(t_k))`.
pub fn check_shift_closure<R: BranchRule + ?Sized>(f: &Funnel, rule: &R, k: usize) -> AxiomReport {
    check_shift_closure_with(f, k, |grid, x| unroll(rule, x, grid, DEFAULT_PATH_CAP))
}

/// Splice closure at grid shift `k`: for every `u` and every `v` in the
/// funnel at `(t_k, u(t_k))`, `splice(u, k, v)` is a member of `f`. Paths
/// with equal samples up to `t_k` are tested once.
pub fn check_splice_closure<R: BranchRule + ?Sized>(f: &Funnel, rule: &R, k: usize) -> AxiomReport {
    check_splice_closure_with(f, k, |grid, x| unroll(rule, x, grid, DEFAULT_PATH_CAP))
}

/// [`check_shift_closure`] against an arbitrary sub-funnel provider.
pub fn check_shift_closure_with(
    f: &Funnel,
    k: usize,
    mut sub_funnel: impl FnMut(TimeGrid, &StatePoint) -> Result<Funnel>,
) -> AxiomReport {
    let mut report = AxiomReport::default();
    let sub_grid = match f.grid().shifted(k) {
        Ok(g) => g,
        Err(e) => {
            report.violations.push(AxiomViolation {
                path: 0,
                k,
                other: None,
                detail: e.to_string(),
            });
            return report;
        }
    };
    let mut cache: HashMap<Vec<u64>, std::result::Result<HashSet<Vec<u64>>, String>> = HashMap::new();
    for (i, u) in f.paths().iter().enumerate() {
        report.checked += 1;
        let x = u.sample(k);
        let members = cache.entry(x.bits()).or_insert_with(|| {
            sub_funnel(sub_grid, x)
                .map(|s| s.paths().iter().map(Path::sample_bits).collect())
                .map_err(|e| e.to_string())
        });
        let shifted = u.shift(k).expect("k within grid").sample_bits();
        match members {
            Ok(set) if set.contains(&shifted) => {}
            Ok(_) => report.violations.push(AxiomViolation {
                path: i,
                k,
                other: None,
                detail: format!("shifted path is not in the funnel at t = {}", sub_grid.t_start()),
            }),
            Err(e) => report.violations.push(AxiomViolation {
                path: i,
                k,
                other: None,
                detail: e.clone(),
            }),
        }
    }
    report
}

/// [`check_splice_closure`] against an arbitrary sub-funnel provider.
pub fn check_splice_closure_with(
    f: &Funnel,
    k: usize,
    mut sub_funnel: impl FnMut(TimeGrid, &StatePoint) -> Result<Funnel>,
) -> AxiomReport {
    let mut report = AxiomReport::default();
    let sub_grid = match f.grid().shifted(k) {
        Ok(g) => g,
        Err(e) => {
            report.violations.push(AxiomViolation {
                path: 0,
                k,
                other: None,
                detail: e.to_string(),
            });
            return report;
        }
    };
    let members: HashSet<Vec<u64>> = f.paths().iter().map(Path::sample_bits).collect();
    let mut cache: HashMap<Vec<u64>, std::result::Result<Funnel, String>> = HashMap::new();
    // Splices depend on u only through u[0..=k].
    let mut prefixes: HashSet<Vec<u64>> = HashSet::new();
    for (i, u) in f.paths().iter().enumerate() {
        let prefix: Vec<u64> = u.samples()[..=k].iter().flat_map(StatePoint::bits).collect();
        if !prefixes.insert(prefix) {
            continue;
        }
        let x = u.sample(k);
        let sub = cache
            .entry(x.bits())
            .or_insert_with(|| sub_funnel(sub_grid, x).map_err(|e| e.to_string()));
        let sub = match sub {
            Ok(s) => s,
            Err(e) => {
                report.violations.push(AxiomViolation {
                    path: i,
                    k,
                    other: None,
                    detail: e.clone(),
                });
                continue;
            }
        };
        for (j, v) in sub.paths().iter().enumerate() {
            report.checked += 1;
            match u.splice(k, v) {
                Ok(w) if members.contains(&w.sample_bits()) => {}
                Ok(_) => report.violations.push(AxiomViolation {
                    path: i,
                    k,
                    other: Some(j),
                    detail: "spliced path missing from funnel".into(),
                }),
                Err(e) => report.violations.push(AxiomViolation {
                    path: i,
                    k,
                    other: Some(j),
                    detail: e.to_string(),
                }),
            }
        }
    }
    report
}

/// Shift and splice closure for every `k` in `0..=n_steps`.
pub fn check_all_shifts<R: BranchRule + ?Sized>(f: &Funnel, rule: &R) -> (AxiomReport, AxiomReport) {
    let mut s3 = AxiomReport::default();
    let mut s4 = AxiomReport::default();
    for k in 0..=f.grid().n_steps() {
        s3.merge(check_shift_closure(f, rule, k));
        s4.merge(check_splice_closure(f, rule, k));
    }
    (s3, s4)
}
