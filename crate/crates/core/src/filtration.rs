//! Finite filtered probability spaces.
//!
//! A [`FilteredSpace`] is a rooted tree of refining partitions. Leaves are
//! numbered in depth-first order, so every atom at every level is a
//! contiguous range of leaves and conditional expectation is a weighted
//! average over that range. Level 0 is always the single atom Ω.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm2;

/// Tolerance on probability bookkeeping (children summing to their parent,
/// total mass one).
pub const PROB_TOL: f64 = 1e-12;

/// Recursive tree description: `{"mass": x, "children": [...]}`.
///
/// A node without children is a leaf; if it sits above the deepest level it
/// persists unchanged down to the bottom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub mass: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeSpec>,
}

impl TreeSpec {
    pub fn leaf(mass: f64) -> Self {
        TreeSpec { mass, children: Vec::new() }
    }

    pub fn node(mass: f64, children: Vec<TreeSpec>) -> Self {
        TreeSpec { mass, children }
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A cell of one level's partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    /// Leaves `start..end` make up the atom.
    pub leaves: Range<usize>,
    pub prob: f64,
    /// Index of the containing atom one level up; `None` only for Ω.
    pub parent: Option<usize>,
    /// Indices of the atoms one level down that refine this one.
    pub children: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct FilteredSpace {
    leaf_probs: Vec<f64>,
    levels: Vec<Vec<Atom>>,
    /// `leaf_atom[n][leaf]` is the level-`n` atom containing `leaf`.
    leaf_atom: Vec<Vec<usize>>,
}

impl FilteredSpace {
    /// Binary refining tree of the given depth. Leaf probabilities default to
    /// uniform.
    pub fn dyadic(depth: usize, leaf_probs: Option<&[f64]>) -> Result<Self> {
        if depth == 0 {
            return Err(Error::validation("depth must be at least 1"));
        }
        if depth > 24 {
            return Err(Error::validation(format!("depth {depth} is too large for a dyadic tree")));
        }
        let n = 1usize << depth;
        let probs: Vec<f64> = match leaf_probs {
            Some(p) => {
                if p.len() != n {
                    return Err(Error::validation(format!(
                        "depth {depth} needs {n} leaf probabilities, got {}",
                        p.len()
                    )));
                }
                p.to_vec()
            }
            None => vec![1.0 / n as f64; n],
        };
        validate_leaf_probs(&probs)?;
        let mut levels: Vec<Vec<Atom>> = Vec::with_capacity(depth + 1);
        for level in 0..=depth {
            let width = 1usize << (depth - level);
            let count = 1usize << level;
            let atoms = (0..count)
                .map(|i| {
                    let leaves = i * width..(i + 1) * width;
                    Atom {
                        prob: probs[leaves.clone()].iter().sum(),
                        leaves,
                        parent: if level == 0 { None } else { Some(i / 2) },
                        children: if level == depth { 0..0 } else { 2 * i..2 * i + 2 },
                    }
                })
                .collect();
            levels.push(atoms);
        }
        Self::assemble(probs, levels)
    }

    /// General filtration from a nested tree description.
    pub fn from_tree(spec: &TreeSpec) -> Result<Self> {
        let depth = spec.depth();
        if depth == 0 {
            return Err(Error::validation("tree must have at least one split level"));
        }
        if (spec.mass - 1.0).abs() > PROB_TOL {
            return Err(Error::validation(format!("root mass must be 1, got {}", spec.mass)));
        }
        let mut levels: Vec<Vec<Atom>> = vec![Vec::new(); depth + 1];
        let mut leaf_probs = Vec::new();
        walk_spec(spec, 0, depth, None, &mut levels, &mut leaf_probs)?;
        // Children ranges follow from parents because atoms are pushed in DFS order.
        for level in 0..depth {
            let (upper, lower) = levels.split_at_mut(level + 1);
            let upper = &mut upper[level];
            for (idx, atom) in lower[0].iter().enumerate() {
                let parent = atom.parent.expect("non-root atom has a parent");
                let ch = &mut upper[parent].children;
                if ch.start == ch.end {
                    *ch = idx..idx + 1;
                } else {
                    ch.end = idx + 1;
                }
            }
        }
        Self::assemble(leaf_probs, levels)
    }

    fn assemble(leaf_probs: Vec<f64>, levels: Vec<Vec<Atom>>) -> Result<Self> {
        let n = leaf_probs.len();
        let mut leaf_atom = Vec::with_capacity(levels.len());
        for atoms in &levels {
            let mut map = vec![usize::MAX; n];
            for (i, a) in atoms.iter().enumerate() {
                for leaf in a.leaves.clone() {
                    map[leaf] = i;
                }
            }
            leaf_atom.push(map);
        }
        let space = FilteredSpace { leaf_probs, levels, leaf_atom };
        space.validate()?;
        Ok(space)
    }

    /// Structural check of every invariant: trivial level 0, leaves at the
    /// bottom, refinement, positive masses, and mass conservation.
    pub fn validate(&self) -> Result<()> {
        validate_leaf_probs(&self.leaf_probs)?;
        let n = self.leaf_probs.len();
        if self.levels.is_empty() || self.levels[0].len() != 1 {
            return Err(Error::validation("level 0 must be the single atom Ω"));
        }
        if self.levels[0][0].leaves != (0..n) {
            return Err(Error::validation("level 0 atom must contain every leaf"));
        }
        let bottom = self.levels.last().unwrap();
        if bottom.len() != n || bottom.iter().enumerate().any(|(i, a)| a.leaves != (i..i + 1)) {
            return Err(Error::validation("deepest level must consist of the leaves"));
        }
        for (level, atoms) in self.levels.iter().enumerate() {
            let mut next = 0;
            for (i, a) in atoms.iter().enumerate() {
                if a.leaves.start != next || a.leaves.is_empty() {
                    return Err(Error::validation(format!("level {level} is not a partition")));
                }
                next = a.leaves.end;
                if !(a.prob > 0.0) {
                    return Err(Error::validation(format!("atom {i} at level {level} has non-positive mass")));
                }
                let leaf_sum: f64 = self.leaf_probs[a.leaves.clone()].iter().sum();
                if (leaf_sum - a.prob).abs() > PROB_TOL {
                    return Err(Error::validation(format!(
                        "atom {i} at level {level}: mass {} but leaves sum to {leaf_sum}",
                        a.prob
                    )));
                }
                if level > 0 {
                    let parent = a
                        .parent
                        .ok_or_else(|| Error::validation(format!("atom {i} at level {level} has no parent")))?;
                    let pa = &self.levels[level - 1][parent];
                    if a.leaves.start < pa.leaves.start || a.leaves.end > pa.leaves.end {
                        return Err(Error::validation(format!("level {level} does not refine level {}", level - 1)));
                    }
                    if !pa.children.contains(&i) {
                        return Err(Error::validation(format!("atom {i} at level {level} missing from its parent")));
                    }
                }
                if level + 1 < self.levels.len() {
                    let kids = &self.levels[level + 1][a.children.clone()];
                    let s: f64 = kids.iter().map(|c| c.prob).sum();
                    if kids.is_empty() || (s - a.prob).abs() > PROB_TOL {
                        return Err(Error::validation(format!(
                            "children of atom {i} at level {level} carry mass {s}, expected {}",
                            a.prob
                        )));
                    }
                }
            }
            if next != n {
                return Err(Error::validation(format!("level {level} does not cover every leaf")));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_probs.len()
    }

    pub fn leaf_probs(&self) -> &[f64] {
        &self.leaf_probs
    }

    pub fn leaf_prob(&self, leaf: usize) -> f64 {
        self.leaf_probs[leaf]
    }

    pub fn atoms(&self, level: usize) -> &[Atom] {
        &self.levels[level]
    }

    pub fn atom(&self, level: usize, idx: usize) -> &Atom {
        &self.levels[level][idx]
    }

    pub fn num_atoms(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn total_atoms(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// The level-`level` atom containing `leaf`.
    #[inline]
    pub fn atom_of(&self, level: usize, leaf: usize) -> usize {
        self.leaf_atom[level][leaf]
    }

    /// The level-`ancestor_level` atom containing atom `idx` of `level`.
    pub fn ancestor(&self, level: usize, idx: usize, ancestor_level: usize) -> usize {
        assert!(ancestor_level <= level);
        self.atom_of(ancestor_level, self.levels[level][idx].leaves.start)
    }

    fn check_level(&self, n: usize) -> Result<()> {
        if n > self.depth() {
            return Err(Error::validation(format!("level {n} exceeds depth {}", self.depth())));
        }
        Ok(())
    }

    /// `ℰ_n f`: average of `f` over each level-`n` atom.
    pub fn cond_expect(&self, f: &LeafFunction, n: usize) -> Result<LevelFunction> {
        self.check_level(n)?;
        self.check_function(f)?;
        let d = f.dim;
        let atoms = &self.levels[n];
        let mut values = vec![0.0; atoms.len() * d];
        for (i, a) in atoms.iter().enumerate() {
            let out = &mut values[i * d..(i + 1) * d];
            for leaf in a.leaves.clone() {
                let w = self.leaf_probs[leaf];
                for (o, v) in out.iter_mut().zip(f.at(leaf)) {
                    *o += w * v;
                }
            }
            for o in out.iter_mut() {
                *o /= a.prob;
            }
        }
        Ok(LevelFunction { level: n, dim: d, values })
    }

    /// Conditional expectation of a scalar leaf quantity, evaluated per
    /// level-`n` atom.
    pub fn cond_expect_scalar(&self, values: &[f64], n: usize) -> Vec<f64> {
        self.levels[n]
            .iter()
            .map(|a| {
                a.leaves.clone().map(|l| self.leaf_probs[l] * values[l]).sum::<f64>() / a.prob
            })
            .collect()
    }

    /// Probability of a set of leaves.
    pub fn prob_of(&self, leaves: impl IntoIterator<Item = usize>) -> f64 {
        leaves.into_iter().map(|l| self.leaf_probs[l]).sum()
    }

    pub fn check_function(&self, f: &LeafFunction) -> Result<()> {
        if f.num_leaves() != self.num_leaves() {
            return Err(Error::validation(format!(
                "function has {} leaves, space has {}",
                f.num_leaves(),
                self.num_leaves()
            )));
        }
        Ok(())
    }

    /// `(Σ_leaves P(ℓ)‖f(ℓ)‖^p)^{1/p}` with the Euclidean norm on values.
    pub fn lp_norm(&self, f: &LeafFunction, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::validation(format!("L_p norm needs p >= 1, got {p}")));
        }
        self.check_function(f)?;
        Ok(lp_of_scalars(self, &(0..f.num_leaves()).map(|l| norm2(f.at(l))).collect::<Vec<_>>(), p))
    }

    pub fn to_tree_spec(&self) -> TreeSpec {
        fn build(space: &FilteredSpace, level: usize, idx: usize) -> TreeSpec {
            let a = space.atom(level, idx);
            if level == space.depth() {
                return TreeSpec::leaf(a.prob);
            }
            TreeSpec::node(a.prob, a.children.clone().map(|c| build(space, level + 1, c)).collect())
        }
        build(self, 0, 0)
    }
}

/// `(Σ P(ℓ)|v(ℓ)|^p)^{1/p}` for a nonnegative per-leaf scalar.
pub fn lp_of_scalars(space: &FilteredSpace, values: &[f64], p: f64) -> f64 {
    let s: f64 = values
        .iter()
        .zip(space.leaf_probs())
        .map(|(v, w)| w * v.abs().powf(p))
        .sum();
    s.powf(1.0 / p)
}

fn validate_leaf_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::validation("no leaves"));
    }
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::validation(format!("leaf {i} has non-positive probability {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::validation(format!("leaf probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn walk_spec(
    node: &TreeSpec,
    level: usize,
    depth: usize,
    parent: Option<usize>,
    levels: &mut Vec<Vec<Atom>>,
    leaf_probs: &mut Vec<f64>,
) -> Result<()> {
    if !(node.mass > 0.0) || !node.mass.is_finite() {
        return Err(Error::validation(format!("node at level {level} has non-positive mass {}", node.mass)));
    }
    let start = leaf_probs.len();
    let idx = levels[level].len();
    levels[level].push(Atom { leaves: start..start, prob: node.mass, parent, children: 0..0 });
    if level == depth {
        leaf_probs.push(node.mass);
    } else if node.children.is_empty() {
        // Persisting atom: one identical child per remaining level.
        walk_spec(&TreeSpec::leaf(node.mass), level + 1, depth, Some(idx), levels, leaf_probs)?;
    } else {
        let s: f64 = node.children.iter().map(|c| c.mass).sum();
        if (s - node.mass).abs() > PROB_TOL {
            return Err(Error::validation(format!(
                "children at level {} carry mass {s}, parent has {}",
                level + 1,
                node.mass
            )));
        }
        for c in &node.children {
            walk_spec(c, level + 1, depth, Some(idx), levels, leaf_probs)?;
        }
    }
    levels[level][idx].leaves.end = leaf_probs.len();
    Ok(())
}

/// One vector in ℝ^d per leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafFunction {
    dim: usize,
    values: Vec<f64>,
}

impl LeafFunction {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dimension must be positive"));
        }
        if values.len() % dim != 0 {
            return Err(Error::validation(format!("{} values do not split into rows of {dim}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("leaf function has non-finite entries"));
        }
        Ok(LeafFunction { dim, values })
    }

    pub fn scalar(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn zeros(dim: usize, leaves: usize) -> Self {
        LeafFunction { dim, values: vec![0.0; dim * leaves] }
    }

    pub fn constant(c: &[f64], leaves: usize) -> Self {
        LeafFunction { dim: c.len(), values: c.iter().cloned().cycle().take(c.len() * leaves).collect() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("ragged rows"));
        }
        Self::new(dim, rows.concat())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_leaves(&self) -> usize {
        self.values.len() / self.dim
    }

    #[inline]
    pub fn at(&self, leaf: usize) -> &[f64] {
        &self.values[leaf * self.dim..(leaf + 1) * self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, leaf: usize) -> &mut [f64] {
        &mut self.values[leaf * self.dim..(leaf + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, c: f64) -> LeafFunction {
        LeafFunction { dim: self.dim, values: self.values.iter().map(|v| v * c).collect() }
    }

    /// Pointwise Euclidean norms.
    pub fn norms(&self) -> Vec<f64> {
        (0..self.num_leaves()).map(|l| norm2(self.at(l))).collect()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let rows = read_numeric_csv(path)?;
        Self::from_rows(&rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for leaf in 0..self.num_leaves() {
            w.write_record(self.at(leaf).iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Header-less numeric CSV, one row per leaf. Lines starting with `#` are
/// skipped.
pub fn read_numeric_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::validation(format!("row {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// A function measurable with respect to one level: one vector per atom.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFunction {
    pub level: usize,
    pub dim: usize,
    values: Vec<f64>,
}

impl LevelFunction {
    #[inline]
    pub fn at(&self, atom: usize) -> &[f64] {
        &self.values[atom * self.dim..(atom + 1) * self.dim]
    }

    pub fn num_atoms(&self) -> usize {
        self.values.len() / self.dim
    }

    /// Value at the atom containing `leaf`.
    #[inline]
    pub fn at_leaf<'a>(&'a self, space: &FilteredSpace, leaf: usize) -> &'a [f64] {
        self.at(space.atom_of(self.level, leaf))
    }

    pub fn to_leaves(&self, space: &FilteredSpace) -> LeafFunction {
        let n = space.num_leaves();
        let mut values = Vec::with_capacity(n * self.dim);
        for leaf in 0..n {
            values.extend_from_slice(self.at_leaf(space, leaf));
        }
        LeafFunction { dim: self.dim, values }
    }
}

/// The martingale `f_n = ℰ_n f` of a leaf function together with its
/// differences `d_k = f_k − f_{k−1}` for `k = 1..=D`.
#[derive(Clone, Debug)]
pub struct Martingale {
    dim: usize,
    levels: Vec<LevelFunction>,
    diffs: Vec<LevelFunction>,
}

impl Martingale {
    pub fn new(space: &FilteredSpace, f: &LeafFunction) -> Result<Self> {
        space.check_function(f)?;
        let depth = space.depth();
        let d = f.dim();
        let mut levels: Vec<LevelFunction> = Vec::with_capacity(depth + 1);
        levels.push(LevelFunction { level: depth, dim: d, values: f.values.clone() });
        for level in (0..depth).rev() {
            let finer = levels.last().unwrap();
            let atoms = space.atoms(level);
            let children = space.atoms(level + 1);
            let mut values = vec![0.0; atoms.len() * d];
            for (i, a) in atoms.iter().enumerate() {
                let out = &mut values[i * d..(i + 1) * d];
                for c in a.children.clone() {
                    let w = children[c].prob;
                    for (o, v) in out.iter_mut().zip(finer.at(c)) {
                        *o += w * v;
                    }
                }
                for o in out.iter_mut() {
                    *o /= a.prob;
                }
            }
            levels.push(LevelFunction { level, dim: d, values });
        }
        levels.reverse();
        let mut diffs = Vec::with_capacity(depth);
        for k in 1..=depth {
            let atoms = space.atoms(k);
            let mut values = Vec::with_capacity(atoms.len() * d);
            for (i, a) in atoms.iter().enumerate() {
                let parent = a.parent.unwrap();
                for (cur, prev) in levels[k].at(i).iter().zip(levels[k - 1].at(parent)) {
                    values.push(cur - prev);
                }
            }
            diffs.push(LevelFunction { level: k, dim: d, values });
        }
        Ok(Martingale { dim: d, levels, diffs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    /// `f_n` as a function on level-`n` atoms.
    pub fn level(&self, n: usize) -> &LevelFunction {
        &self.levels[n]
    }

    /// `d_k` for `1 ≤ k ≤ D`.
    pub fn difference(&self, k: usize) -> &LevelFunction {
        assert!(k >= 1, "differences start at k = 1");
        &self.diffs[k - 1]
    }

    /// `f_n` evaluated at a leaf.
    #[inline]
    pub fn level_at<'a>(&'a self, space: &FilteredSpace, n: usize, leaf: usize) -> &'a [f64] {
        self.levels[n].at_leaf(space, leaf)
    }

    /// `d_k` evaluated at a leaf.
    #[inline]
    pub fn difference_at<'a>(&'a self, space: &FilteredSpace, k: usize, leaf: usize) -> &'a [f64] {
        self.diffs[k - 1].at_leaf(space, leaf)
    }

    /// The mean `f_0`.
    pub fn mean(&self) -> &[f64] {
        self.levels[0].at(0)
    }
}

pub fn martingale_of(space: &FilteredSpace, f: &LeafFunction) -> Result<Martingale> {
    Martingale::new(space, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dyadic_depth_two_is_uniform() {
        let s = FilteredSpace::dyadic(2, None).unwrap();
        assert_eq!((0..=2).map(|l| s.num_atoms(l)).collect::<Vec<_>>(), vec![1, 2, 4]);
        assert!(s.leaf_probs().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn dyadic_depth_one_with_masses() {
        let s = FilteredSpace::dyadic(1, Some(&[0.3, 0.7])).unwrap();
        assert_eq!(s.leaf_probs(), &[0.3, 0.7]);
        assert_eq!(s.atom(0, 0).prob, 1.0);
    }

    #[test]
    fn dyadic_depth_twelve_mass_sums_to_one() {
        let s = FilteredSpace::dyadic(12, None).unwrap();
        assert_eq!(s.num_leaves(), 4096);
        // Compensated summation as an independent oracle.
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &p in s.leaf_probs() {
            let y = p - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        assert!(FilteredSpace::dyadic(1, Some(&[0.5, 0.6])).is_err());
        assert!(FilteredSpace::dyadic(1, Some(&[0.0, 1.0])).is_err());
        assert!(FilteredSpace::dyadic(1, Some(&[-0.5, 1.5])).is_err());
        assert!(FilteredSpace::dyadic(2, Some(&[0.5, 0.5])).is_err());
        assert!(FilteredSpace::dyadic(0, None).is_err());
    }

    #[test]
    fn three_children_tree() {
        let spec = TreeSpec::node(1.0, vec![TreeSpec::leaf(0.5), TreeSpec::leaf(0.25), TreeSpec::leaf(0.25)]);
        let s = FilteredSpace::from_tree(&spec).unwrap();
        assert_eq!(s.depth(), 1);
        assert_eq!(s.num_leaves(), 3);
    }

    #[test]
    fn persisting_atoms_are_allowed() {
        // Left branch splits twice, right branch never splits.
        let spec = TreeSpec::node(
            1.0,
            vec![
                TreeSpec::node(0.5, vec![TreeSpec::node(0.5, vec![TreeSpec::leaf(0.2), TreeSpec::leaf(0.3)])]),
                TreeSpec::leaf(0.5),
            ],
        );
        let s = FilteredSpace::from_tree(&spec).unwrap();
        assert_eq!(s.depth(), 3);
        assert_eq!(s.num_leaves(), 3);
        assert_eq!((0..=3).map(|l| s.num_atoms(l)).collect::<Vec<_>>(), vec![1, 2, 2, 3]);
        assert_eq!(s.atom(3, 2).leaves, 2..3);
        assert_eq!(s.atom(1, 1).leaves, 2..3);
    }

    #[test]
    fn ill_formed_trees_are_rejected() {
        assert!(FilteredSpace::from_tree(&TreeSpec::leaf(1.0)).is_err());
        let bad_sum = TreeSpec::node(1.0, vec![TreeSpec::leaf(0.5), TreeSpec::leaf(0.4)]);
        assert!(FilteredSpace::from_tree(&bad_sum).is_err());
        let bad_root = TreeSpec::node(0.9, vec![TreeSpec::leaf(0.45), TreeSpec::leaf(0.45)]);
        assert!(FilteredSpace::from_tree(&bad_root).is_err());
        let zero = TreeSpec::node(1.0, vec![TreeSpec::leaf(1.0), TreeSpec::leaf(0.0)]);
        assert!(FilteredSpace::from_tree(&zero).is_err());
        assert!(TreeSpec::from_json(r#"{"children": []}"#).is_err());
        assert!(TreeSpec::from_json(r#"{"mass": 1, "children": [{"mass": "x"}]}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"mass": 1.0, "children": [{"mass": 0.25}, {"mass": 0.75, "children": [{"mass": 0.5}, {"mass": 0.25}]}]}"#;
        let spec = TreeSpec::from_json(text).unwrap();
        let s = FilteredSpace::from_tree(&spec).unwrap();
        assert_eq!(s.num_leaves(), 3);
        let back = FilteredSpace::from_tree(&s.to_tree_spec()).unwrap();
        assert_eq!(back.leaf_probs(), s.leaf_probs());
    }

    #[test]
    fn cond_expect_examples() {
        let s = FilteredSpace::dyadic(2, None).unwrap();
        let f = LeafFunction::scalar(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let e1 = s.cond_expect(&f, 1).unwrap();
        assert_eq!((e1.at(0)[0], e1.at(1)[0]), (0.5, 0.0));
        let e2 = s.cond_expect(&f, 2).unwrap();
        assert_eq!(e2.to_leaves(&s), f);
        let e0 = s.cond_expect(&f, 0).unwrap();
        assert_eq!(e0.at(0)[0], 0.25);
        assert!(s.cond_expect(&f, 3).is_err());
    }

    #[test]
    fn martingale_differences_by_hand() {
        let s = FilteredSpace::dyadic(2, None).unwrap();
        let f = LeafFunction::scalar(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = Martingale::new(&s, &f).unwrap();
        let d1: Vec<f64> = (0..4).map(|l| m.difference_at(&s, 1, l)[0]).collect();
        let d2: Vec<f64> = (0..4).map(|l| m.difference_at(&s, 2, l)[0]).collect();
        assert_eq!(d1, vec![0.25, 0.25, -0.25, -0.25]);
        assert_eq!(d2, vec![0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn constant_function_has_no_differences() {
        let s = FilteredSpace::dyadic(3, None).unwrap();
        let f = LeafFunction::constant(&[2.0, -1.0], 8);
        let m = Martingale::new(&s, &f).unwrap();
        for k in 1..=3 {
            for l in 0..8 {
                assert!(m.difference_at(&s, k, l).iter().all(|v| v.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn lp_norm_examples() {
        let s = FilteredSpace::dyadic(2, None).unwrap();
        let f = LeafFunction::scalar(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(close(s.lp_norm(&f, 2.0).unwrap(), 0.5, 1e-15));
        assert!(close(s.lp_norm(&f, 1.0).unwrap(), 0.25, 1e-15));
        let c = LeafFunction::constant(&[3.0, 4.0], 4);
        assert!(close(s.lp_norm(&c, 3.0).unwrap(), 5.0, 1e-14));
        assert!(s.lp_norm(&f, 0.5).is_err());
        let one = LeafFunction::constant(&[1.0], 4);
        assert!(close(s.lp_norm(&one, 1.0).unwrap(), 1.0, 1e-15));
    }

    fn arb_tree(depth: u32) -> impl Strategy<Value = TreeSpec> {
        let leaf = Just(TreeSpec::leaf(1.0));
        leaf.prop_recursive(depth, 64, 3, |inner| {
            (prop::collection::vec((inner, 0.05f64..1.0), 1..4)).prop_map(|kids| {
                TreeSpec::node(1.0, kids.into_iter().map(|(mut t, w)| {
                    t.mass = w;
                    t
                }).collect())
            })
        })
        .prop_map(|t| normalize(t, 1.0))
    }

    /// Rescale relative weights into absolute masses.
    fn normalize(mut t: TreeSpec, mass: f64) -> TreeSpec {
        let total: f64 = t.children.iter().map(|c| c.mass).sum();
        t.mass = mass;
        t.children = t
            .children
            .into_iter()
            .map(|c| {
                let m = mass * c.mass / total;
                normalize(c, m)
            })
            .collect();
        t
    }

    fn arb_instance() -> impl Strategy<Value = (FilteredSpace, LeafFunction)> {
        arb_tree(5)
            .prop_filter("needs a split", |t| t.depth() >= 1)
            .prop_filter_map("valid tree", |t| FilteredSpace::from_tree(&t).ok())
            .prop_flat_map(|s| {
                let n = s.num_leaves();
                (Just(s), prop::collection::vec(-5.0f64..5.0, 2 * n))
            })
            .prop_map(|(s, v)| (s, LeafFunction::new(2, v).unwrap()))
    }

    proptest! {
        #[test]
        fn tower_property((s, f) in arb_instance()) {
            let d = s.depth();
            for n in 0..=d {
                let fn_leaves = s.cond_expect(&f, n).unwrap().to_leaves(&s);
                for m in 0..=d {
                    let lhs = s.cond_expect(&fn_leaves, m).unwrap();
                    let rhs = s.cond_expect(&f, n.min(m)).unwrap().to_leaves(&s);
                    let lhs = lhs.to_leaves(&s);
                    for (a, b) in lhs.values().iter().zip(rhs.values()) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn contractivity((s, f) in arb_instance()) {
            let norms = f.norms();
            for n in 0..=s.depth() {
                let e = s.cond_expect(&f, n).unwrap();
                let en = s.cond_expect_scalar(&norms, n);
                for a in 0..s.num_atoms(n) {
                    prop_assert!(norm2(e.at(a)) <= en[a] + 1e-12);
                }
            }
        }

        #[test]
        fn martingale_and_telescoping((s, f) in arb_instance()) {
            let m = Martingale::new(&s, &f).unwrap();
            for n in 0..s.depth() {
                let next = m.level(n + 1).to_leaves(&s);
                let back = s.cond_expect(&next, n).unwrap();
                for a in 0..s.num_atoms(n) {
                    for (x, y) in back.at(a).iter().zip(m.level(n).at(a)) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }
            for leaf in 0..s.num_leaves() {
                for n in 0..=s.depth() {
                    let mut acc = m.mean().to_vec();
                    for k in 1..=n {
                        for (a, v) in acc.iter_mut().zip(m.difference_at(&s, k, leaf)) {
                            *a += v;
                        }
                    }
                    for (a, v) in acc.iter().zip(m.level_at(&s, n, leaf)) {
                        prop_assert!((a - v).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn random_trees_refine((s, _f) in arb_instance()) {
            prop_assert!(s.validate().is_ok());
        }
    }
}
