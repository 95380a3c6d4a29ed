//! Seeded random instances: trees, weights and functions.

use rand::Rng;

use crate::ellipsoid::gaussian;
use crate::filtration::{FilteredSpace, LeafFunction, TreeSpec};
use crate::linalg::Mat;
use crate::weights::MatrixWeight;

/// SPD matrix `AᵀA/d + 0.2·I` with Gaussian `A`.
pub fn random_spd(rng: &mut impl Rng, d: usize) -> Mat {
    let mut a = Mat::zeros(d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = gaussian(rng);
        }
    }
    let mut m = a.transpose().matmul(&a).scale(1.0 / d as f64);
    m.add_scaled(&Mat::identity(d), 0.2);
    m.symmetrized()
}

/// Independent [`random_spd`] matrices, one per leaf, with a leafwise
/// log-uniform scale in `[e^{-2}, e^{2}]`.
pub fn random_weight(rng: &mut impl Rng, d: usize, leaves: usize) -> MatrixWeight {
    let mats = (0..leaves)
        .map(|_| {
            let s = rng.gen_range(-2.0f64..2.0).exp();
            random_spd(rng, d).scale(s)
        })
        .collect();
    MatrixWeight::new(mats).expect("random SPD matrices are valid weights")
}

/// Gaussian vector per leaf. With probability 1/3 the function is
/// restricted to the leaves of one random level-1 atom, so stopping times
/// are not trivially 1.
pub fn random_function(rng: &mut impl Rng, space: &FilteredSpace, d: usize) -> LeafFunction {
    let n = space.num_leaves();
    let mut values: Vec<f64> = (0..n * d).map(|_| gaussian(rng)).collect();
    if rng.gen_bool(1.0 / 3.0) && space.num_atoms(1) > 1 {
        let keep = space.atom(1, rng.gen_range(0..space.num_atoms(1))).leaves.clone();
        for leaf in 0..n {
            if !keep.contains(&leaf) {
                values[leaf * d..(leaf + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    LeafFunction::new(d, values).expect("finite values")
}

/// Random refining tree of exactly the given depth with at most
/// `max_leaves` leaves. Nodes split into 2 or 3 children with uneven masses
/// or stop (their atom then persists to the bottom level).
pub fn random_tree(rng: &mut impl Rng, depth: usize, max_leaves: usize) -> TreeSpec {
    random_tree_with(rng, depth, max_leaves, 0.55)
}

/// [`random_tree`] with a chosen probability that an off-spine node splits.
pub fn random_tree_with(rng: &mut impl Rng, depth: usize, max_leaves: usize, split_prob: f64) -> TreeSpec {
    assert!(depth >= 1 && max_leaves >= 2);
    let mut budget = max_leaves - 1;
    let mut root = grow(rng, 1.0, 0, depth, true, split_prob, &mut budget);
    if root.children.is_empty() {
        root = TreeSpec::node(1.0, vec![TreeSpec::leaf(0.5), TreeSpec::leaf(0.5)]);
    }
    root
}

fn grow(
    rng: &mut impl Rng,
    mass: f64,
    level: usize,
    depth: usize,
    spine: bool,
    split_prob: f64,
    budget: &mut usize,
) -> TreeSpec {
    if level == depth {
        return TreeSpec::leaf(mass);
    }
    let want_split = spine || rng.gen_bool(split_prob);
    if !want_split || *budget == 0 {
        return TreeSpec::leaf(mass);
    }
    let k = if *budget >= 2 && rng.gen_bool(0.3) { 3 } else { 2 };
    *budget -= k - 1;
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.15f64..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let spine_child = rng.gen_range(0..k);
    let mut children = Vec::with_capacity(k);
    let mut used = 0.0;
    for (i, r) in raw.iter().enumerate() {
        // The last child absorbs rounding so masses sum to the parent exactly.
        let m = if i + 1 == k { mass - used } else { mass * r / total };
        used += m;
        children.push(grow(rng, m, level + 1, depth, spine && i == spine_child, split_prob, budget));
    }
    TreeSpec::node(mass, children)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trees_have_requested_depth_and_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for depth in 1..=12 {
            for _ in 0..20 {
                let t = random_tree(&mut rng, depth, 40);
                let s = FilteredSpace::from_tree(&t).unwrap();
                assert_eq!(s.depth(), depth);
                assert!(s.num_leaves() <= 40);
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn two_hundred_leaf_tree_refines() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let t = random_tree_with(&mut rng, 10, 200, 0.95);
        let s = FilteredSpace::from_tree(&t).unwrap();
        s.validate().unwrap();
        // Structural oracle: every level-(n+1) atom lies inside its parent,
        // and the children of each atom tile it.
        for n in 1..=s.depth() {
            for a in s.atoms(n) {
                let par = s.atom(n - 1, a.parent.unwrap());
                assert!(par.leaves.start <= a.leaves.start && a.leaves.end <= par.leaves.end);
            }
            for par in s.atoms(n - 1) {
                let kids: Vec<_> = par.children.clone().map(|c| s.atom(n, c).leaves.clone()).collect();
                assert_eq!(kids.first().unwrap().start, par.leaves.start);
                assert_eq!(kids.last().unwrap().end, par.leaves.end);
                assert!(kids.windows(2).all(|w| w[0].end == w[1].start));
                let mass: f64 = par.children.clone().map(|c| s.atom(n, c).prob).sum();
                assert!((mass - par.prob).abs() < 1e-12);
            }
        }
        assert!(s.num_leaves() >= 150, "{} leaves", s.num_leaves());
    }

    #[test]
    fn weights_are_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 1..=4 {
            let w = random_weight(&mut rng, d, 10);
            for m in w.mats() {
                m.check_spd().unwrap();
            }
        }
    }
}
