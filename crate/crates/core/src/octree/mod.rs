//! Level-restricted adaptive oct-tree over patch centroids and targets.
//!
//! A centroid whose near-field ball is too large for a child box stays
//! tethered at the coarsest box where it no longer fits, so the whole ball is
//! covered by that box and its colleagues. Near lists are gathered from
//! that neighbourhood and then filtered exactly.

use crate::{Error, Result, Vec3};
use serde::Serialize;
use std::io::Write;

/// Hard cap on refinement depth.
pub const MAX_DEPTH: usize = 30;

/// One cube of the tree.
#[derive(Debug, Clone)]
pub struct TreeBox {
    pub level: usize,
    pub center: Vec3,
    pub half: f64,
    pub parent: Option<usize>,
    pub children: Option<[usize; 8]>,
    /// Same-level boxes sharing a boundary point, this box included.
    pub colleagues: Vec<usize>,
    /// Untethered centroids held by a leaf.
    pub centroids: Vec<usize>,
    /// Targets held by a leaf.
    pub targets: Vec<usize>,
    /// Centroids tethered at this (non-leaf) box.
    pub tethered: Vec<usize>,
}

impl TreeBox {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|i| (x[i] - self.center[i]).abs() <= self.half)
    }

    fn child_index(&self, x: &Vec3) -> usize {
        (0..3).fold(0, |acc, i| acc | (((x[i] >= self.center[i]) as usize) << i))
    }
}

/// A centroid kept above the leaves because its ball is too wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TetherRecord {
    pub patch: usize,
    pub level: usize,
    pub box_id: usize,
}

/// Per-level statistics, written one JSON object per line.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LevelStats {
    pub level: usize,
    pub boxes: usize,
    pub leaves: usize,
    pub max_leaf_points: usize,
    pub tethered: usize,
}

#[derive(Debug, Clone)]
pub struct OctTree {
    pub boxes: Vec<TreeBox>,
    pub s: usize,
    centroids: Vec<Vec3>,
    reach: Vec<f64>,
    targets: Vec<Vec3>,
    /// Box holding each centroid (leaf or tether box).
    pub centroid_box: Vec<usize>,
    pub target_box: Vec<usize>,
    pub tethers: Vec<TetherRecord>,
    /// Leaves forced by the depth cap.
    pub forced_leaves: usize,
}

const DIRS: [f64; 3] = [-1.0, 0.0, 1.0];

impl OctTree {
    /// Builds the tree over centroids with near-field radii `reach = η R_j`
    /// and targets, with at most `s` untethered points per leaf.
    pub fn build(centroids: &[Vec3], reach: &[f64], targets: &[Vec3], s: usize) -> Result<Self> {
        if centroids.len() != reach.len() {
            return Err(Error::Argument("one radius per centroid required".into()));
        }
        if s == 0 {
            return Err(Error::Argument("leaf capacity must be positive".into()));
        }
        let all = || centroids.iter().chain(targets);
        if all().any(|x| !x.iter().all(|c| c.is_finite())) || reach.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Argument("non-finite point or negative radius".into()));
        }
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for x in all() {
            lo = lo.inf(x);
            hi = hi.sup(x);
        }
        let (center, half) = if lo.x.is_finite() {
            let c = 0.5 * (lo + hi);
            let h = 0.5 * (hi - lo).max();
            (c, if h > 0.0 { 1.01 * h } else { 1.0 })
        } else {
            (Vec3::zeros(), 1.0)
        };
        let root = TreeBox {
            level: 0,
            center,
            half,
            parent: None,
            children: None,
            colleagues: vec![0],
            centroids: (0..centroids.len()).collect(),
            targets: (0..targets.len()).collect(),
            tethered: Vec::new(),
        };
        let mut tree = Self {
            boxes: vec![root],
            s,
            centroids: centroids.to_vec(),
            reach: reach.to_vec(),
            targets: targets.to_vec(),
            centroid_box: vec![0; centroids.len()],
            target_box: vec![0; targets.len()],
            tethers: Vec::new(),
            forced_leaves: 0,
        };
        let mut stack = vec![0];
        while let Some(b) = stack.pop() {
            let load = tree.boxes[b].centroids.len() + tree.boxes[b].targets.len();
            if load <= s {
                continue;
            }
            if tree.boxes[b].level >= MAX_DEPTH {
                tree.forced_leaves += 1;
                log::warn!(
                    "box {b} holds {load} points at the depth cap; keeping it as a leaf"
                );
                continue;
            }
            stack.extend(tree.split(b));
        }
        tree.enforce_level_restriction()?;
        Ok(tree)
    }

    /// Splits leaf `b`, moving its points into new children. Returns the children.
    fn split(&mut self, b: usize) -> [usize; 8] {
        let (level, center, half) = {
            let bx = &self.boxes[b];
            (bx.level, bx.center, bx.half)
        };
        let first = self.boxes.len();
        let q = 0.5 * half;
        let kids: [usize; 8] = std::array::from_fn(|i| first + i);
        for i in 0..8 {
            let off = Vec3::new(
                if i & 1 != 0 { q } else { -q },
                if i & 2 != 0 { q } else { -q },
                if i & 4 != 0 { q } else { -q },
            );
            self.boxes.push(TreeBox {
                level: level + 1,
                center: center + off,
                half: q,
                parent: Some(b),
                children: None,
                colleagues: Vec::new(),
                centroids: Vec::new(),
                targets: Vec::new(),
                tethered: Vec::new(),
            });
        }
        let cents = std::mem::take(&mut self.boxes[b].centroids);
        let targs = std::mem::take(&mut self.boxes[b].targets);
        let child_width = half;
        for c in cents {
            if 2.0 * self.reach[c] > child_width {
                self.boxes[b].tethered.push(c);
                self.tethers.push(TetherRecord {
                    patch: c,
                    level,
                    box_id: b,
                });
                self.centroid_box[c] = b;
            } else {
                let k = kids[self.boxes[b].child_index(&self.centroids[c])];
                self.boxes[k].centroids.push(c);
                self.centroid_box[c] = k;
            }
        }
        for t in targs {
            let k = kids[self.boxes[b].child_index(&self.targets[t])];
            self.boxes[k].targets.push(t);
            self.target_box[t] = k;
        }
        self.boxes[b].children = Some(kids);
        kids
    }

    /// Deepest box with level `<= max_level` containing `x`, or `None` outside the root.
    pub fn locate(&self, x: &Vec3, max_level: usize) -> Option<usize> {
        if !self.boxes[0].contains(x) {
            return None;
        }
        let mut b = 0;
        while let Some(kids) = self.boxes[b].children {
            if self.boxes[b].level >= max_level {
                break;
            }
            b = kids[self.boxes[b].child_index(x)];
        }
        Some(b)
    }

    /// Centres of the 26 same-size cells around box `b`.
    fn neighbour_cells(&self, b: usize) -> impl Iterator<Item = Vec3> + '_ {
        let bx = &self.boxes[b];
        let w = bx.width();
        DIRS.iter().flat_map(move |&dx| {
            DIRS.iter().flat_map(move |&dy| {
                DIRS.iter().filter_map(move |&dz| {
                    if dx == 0.0 && dy == 0.0 && dz == 0.0 {
                        None
                    } else {
                        Some(bx.center + w * Vec3::new(dx, dy, dz))
                    }
                })
            })
        })
    }

    /// Refines leaves until boundary-sharing leaves differ by at most one level.
    pub fn enforce_level_restriction(&mut self) -> Result<()> {
        loop {
            let mut to_split = Vec::new();
            for b in 0..self.boxes.len() {
                if !self.boxes[b].is_leaf() || self.boxes[b].level < 2 {
                    continue;
                }
                let lvl = self.boxes[b].level;
                for x in self.neighbour_cells(b) {
                    if let Some(n) = self.locate(&x, lvl) {
                        if self.boxes[n].is_leaf() && self.boxes[n].level + 1 < lvl {
                            to_split.push(n);
                        }
                    }
                }
            }
            if to_split.is_empty() {
                break;
            }
            to_split.sort_unstable();
            to_split.dedup();
            for n in to_split {
                if self.boxes[n].level >= MAX_DEPTH {
                    return Err(Error::Tree("level restriction needs boxes below the depth cap".into()));
                }
                if self.boxes[n].is_leaf() {
                    self.split(n);
                }
            }
        }
        self.build_colleagues();
        Ok(())
    }

    fn build_colleagues(&mut self) {
        for b in 0..self.boxes.len() {
            self.boxes[b].colleagues.clear();
        }
        self.boxes[0].colleagues = vec![0];
        // parents precede children in the box array
        for b in 1..self.boxes.len() {
            let parent = self.boxes[b].parent.expect("non-root box has a parent");
            let mut col = Vec::with_capacity(27);
            for &pc in &self.boxes[parent].colleagues {
                if let Some(kids) = self.boxes[pc].children {
                    for k in kids {
                        if self.adjacent(b, k) {
                            col.push(k);
                        }
                    }
                }
            }
            self.boxes[b].colleagues = col;
        }
    }

    /// Closed cubes `a` and `b` intersect.
    fn adjacent(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.boxes[a], &self.boxes[b]);
        let tol = 1e-12 * (x.half + y.half);
        (0..3).all(|i| (x.center[i] - y.center[i]).abs() <= x.half + y.half + tol)
    }

    pub fn num_levels(&self) -> usize {
        self.boxes.iter().map(|b| b.level).max().unwrap_or(0) + 1
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.boxes.len()).filter(|&b| self.boxes[b].is_leaf())
    }

    /// Every pair of boundary-sharing leaves whose levels differ by more than one.
    pub fn balance_violations(&self) -> Vec<(usize, usize)> {
        let leaves: Vec<usize> = self.leaves().collect();
        let mut bad = Vec::new();
        for (i, &a) in leaves.iter().enumerate() {
            for &b in &leaves[i + 1..] {
                let (la, lb) = (self.boxes[a].level, self.boxes[b].level);
                if la.abs_diff(lb) > 1 && self.adjacent(a, b) {
                    bad.push((a, b));
                }
            }
        }
        bad
    }

    fn collect_targets(&self, b: usize, out: &mut Vec<usize>) {
        let mut stack = vec![b];
        while let Some(x) = stack.pop() {
            match self.boxes[x].children {
                Some(kids) => stack.extend(kids),
                None => out.extend_from_slice(&self.boxes[x].targets),
            }
        }
    }

    /// Candidate targets for centroid `j`: the holding box, its colleagues,
    /// and adjacent coarser leaves.
    pub fn candidates(&self, j: usize) -> Vec<usize> {
        let d = self.centroid_box[j];
        let mut out = Vec::new();
        for &c in &self.boxes[d].colleagues {
            self.collect_targets(c, &mut out);
        }
        let lvl = self.boxes[d].level;
        let mut coarse: Vec<usize> = self
            .neighbour_cells(d)
            .filter_map(|x| self.locate(&x, lvl))
            .filter(|&n| self.boxes[n].level < lvl && self.boxes[n].is_leaf())
            .collect();
        coarse.sort_unstable();
        coarse.dedup();
        for n in coarse {
            out.extend_from_slice(&self.boxes[n].targets);
        }
        out
    }

    pub fn level_stats(&self) -> Vec<LevelStats> {
        let mut stats: Vec<LevelStats> = (0..self.num_levels())
            .map(|level| LevelStats {
                level,
                boxes: 0,
                leaves: 0,
                max_leaf_points: 0,
                tethered: 0,
            })
            .collect();
        for b in &self.boxes {
            let s = &mut stats[b.level];
            s.boxes += 1;
            s.tethered += b.tethered.len();
            if b.is_leaf() {
                s.leaves += 1;
                s.max_leaf_points = s.max_leaf_points.max(b.centroids.len() + b.targets.len());
            }
        }
        stats
    }

    /// Writes [`OctTree::level_stats`] as JSON lines.
    pub fn write_stats(&self, mut w: impl Write) -> Result<()> {
        for s in self.level_stats() {
            serde_json::to_writer(&mut w, &s)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Near-field target lists per patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NearList {
    pub lists: Vec<Vec<usize>>,
}

impl NearList {
    pub fn total(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    /// Patches whose list contains each target.
    pub fn by_target(&self, n_targets: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_targets];
        for (j, l) in self.lists.iter().enumerate() {
            for &t in l {
                out[t].push(j);
            }
        }
        out
    }
}

/// Targets with `|x - c_j| < η R_j` for every patch, excluding targets owned
/// by the patch itself (`owner[t] == Some(j)`). Lists are sorted.
pub fn build_near_lists(tree: &OctTree, owner: &[Option<usize>]) -> NearList {
    use rayon::prelude::*;
    let lists = (0..tree.centroids.len())
        .into_par_iter()
        .map(|j| {
            let (c, r) = (tree.centroids[j], tree.reach[j]);
            let mut l: Vec<usize> = tree
                .candidates(j)
                .into_iter()
                .filter(|&t| owner.get(t).copied().flatten() != Some(j) && (tree.targets[t] - c).norm() < r)
                .collect();
            l.sort_unstable();
            l.dedup();
            l
        })
        .collect();
    NearList { lists }
}

/// O(Npat · N_T) reference for [`build_near_lists`].
pub fn brute_force_near_lists(
    centroids: &[Vec3],
    reach: &[f64],
    targets: &[Vec3],
    owner: &[Option<usize>],
) -> NearList {
    NearList {
        lists: centroids
            .iter()
            .zip(reach)
            .enumerate()
            .map(|(j, (c, r))| {
                (0..targets.len())
                    .filter(|&t| owner.get(t).copied().flatten() != Some(j) && (targets[t] - c).norm() < *r)
                    .collect()
            })
            .collect(),
    }
}
