//! Square functions, the maximal operator `M′_W`, sparse operators and
//! weighted norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtration::{FilteredSpace, LeafFunction, Martingale};
use crate::linalg::norm2;
use crate::weights::{check_p, LeafRoots, MatrixWeight, ReducingPair};

/// Denominators at or below this are treated as zero; the quotient is then 0.
pub const ZERO_DENOM: f64 = 1e-14;

/// Whether the level-0 mean enters the square function as a `k = 0` term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SquareConvention {
    /// `S f = (Σ_{k=1..D} ‖d_k f‖²)^{1/2}`.
    #[default]
    ExcludeMean,
    /// Adds `‖f_0‖²` under the root.
    FoldMean,
}

fn scalar_output(values: Vec<f64>) -> LeafFunction {
    LeafFunction::new(1, values).expect("finite output")
}

/// `(Σ_k ‖d_k‖²)^{1/2}` per leaf.
pub fn square_fn(space: &FilteredSpace, mart: &Martingale) -> LeafFunction {
    square_fn_with(space, mart, SquareConvention::ExcludeMean)
}

pub fn square_fn_with(space: &FilteredSpace, mart: &Martingale, conv: SquareConvention) -> LeafFunction {
    let values = (0..space.num_leaves())
        .map(|leaf| {
            let mut s = match conv {
                SquareConvention::ExcludeMean => 0.0,
                SquareConvention::FoldMean => norm2(mart.mean()).powi(2),
            };
            for k in 1..=space.depth() {
                s += norm2(mart.difference_at(space, k, leaf)).powi(2);
            }
            s.sqrt()
        })
        .collect();
    scalar_output(values)
}

/// `g = W^{−1/p} f` leafwise.
pub fn conjugate_input(roots: &LeafRoots, f: &LeafFunction) -> LeafFunction {
    let d = f.dim();
    let mut out = LeafFunction::zeros(d, f.num_leaves());
    for leaf in 0..f.num_leaves() {
        roots.neg[leaf].apply_into(f.at(leaf), out.at_mut(leaf));
    }
    out
}

fn check_inputs(space: &FilteredSpace, dim: usize, leaves: usize, f: &LeafFunction) -> Result<()> {
    space.check_function(f)?;
    if f.dim() != dim {
        return Err(Error::validation(format!("function dimension {} differs from weight dimension {dim}", f.dim())));
    }
    if leaves != space.num_leaves() {
        return Err(Error::validation("weight and space disagree on the number of leaves"));
    }
    Ok(())
}

/// `S_W f = (Σ_k ‖W^{1/p} d_k(W^{−1/p} f)‖²)^{1/2}`.
pub fn weighted_square_fn(space: &FilteredSpace, w: &MatrixWeight, p: f64, f: &LeafFunction) -> Result<LeafFunction> {
    weighted_square_fn_with(space, w, p, f, SquareConvention::ExcludeMean)
}

pub fn weighted_square_fn_with(
    space: &FilteredSpace,
    w: &MatrixWeight,
    p: f64,
    f: &LeafFunction,
    conv: SquareConvention,
) -> Result<LeafFunction> {
    check_p(p)?;
    check_inputs(space, w.dim(), w.num_leaves(), f)?;
    Ok(weighted_square_from_roots(space, &LeafRoots::new(w, p), f, conv))
}

pub(crate) fn weighted_square_from_roots(
    space: &FilteredSpace,
    roots: &LeafRoots,
    f: &LeafFunction,
    conv: SquareConvention,
) -> LeafFunction {
    let g = conjugate_input(roots, f);
    let mart = Martingale::new(space, &g).expect("validated input");
    let values = (0..space.num_leaves())
        .map(|leaf| {
            let m = &roots.pos[leaf];
            let mut s = match conv {
                SquareConvention::ExcludeMean => 0.0,
                SquareConvention::FoldMean => m.apply_norm(mart.mean()).powi(2),
            };
            for k in 1..=space.depth() {
                s += m.apply_norm(mart.difference_at(space, k, leaf)).powi(2);
            }
            s.sqrt()
        })
        .collect();
    scalar_output(values)
}

/// `ℰ_n ‖Ŵ_n^{−1} g‖` for every level and atom, with `g = W^{−1/p} f`.
#[derive(Clone, Debug)]
pub struct HatAverages {
    levels: Vec<Vec<f64>>,
}

impl HatAverages {
    pub fn new(space: &FilteredSpace, pair: &ReducingPair, g: &LeafFunction) -> Self {
        let levels = (0..=space.depth())
            .map(|n| {
                space
                    .atoms(n)
                    .iter()
                    .enumerate()
                    .map(|(idx, atom)| {
                        let hinv = &pair.atom(n, idx).hat_inv;
                        let s: f64 = atom.leaves.clone().map(|l| space.leaf_prob(l) * hinv.apply_norm(g.at(l))).sum();
                        s / atom.prob
                    })
                    .collect()
            })
            .collect();
        HatAverages { levels }
    }

    #[inline]
    pub fn get(&self, n: usize, atom: usize) -> f64 {
        self.levels[n][atom]
    }

    #[inline]
    pub fn at_leaf(&self, space: &FilteredSpace, n: usize, leaf: usize) -> f64 {
        self.levels[n][space.atom_of(n, leaf)]
    }
}

/// `M′_W f = max_n ℰ_n ‖Ŵ_n^{−1} W^{−1/p} f‖` per leaf, over levels `0..=D`.
pub fn mprime_maximal(space: &FilteredSpace, pair: &ReducingPair, f: &LeafFunction) -> Result<LeafFunction> {
    check_inputs(space, pair.dim(), pair.roots().pos.len(), f)?;
    let g = conjugate_input(pair.roots(), f);
    let avg = HatAverages::new(space, pair, &g);
    let values = (0..space.num_leaves())
        .map(|leaf| (0..=space.depth()).map(|n| avg.at_leaf(space, n, leaf)).fold(0.0, f64::max))
        .collect();
    Ok(scalar_output(values))
}

/// One member of a sparse family: a union of level-`κ₂` atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSet {
    pub generation: usize,
    /// `None` for the root set `Ω`.
    pub kappa1: Option<usize>,
    pub kappa2: usize,
    /// Indices of level-`κ₂` atoms, ascending.
    pub atoms: Vec<usize>,
}

impl SparseSet {
    pub fn leaves<'a>(&'a self, space: &'a FilteredSpace) -> impl Iterator<Item = usize> + 'a {
        self.atoms.iter().flat_map(move |&a| space.atom(self.kappa2, a).leaves.clone())
    }

    pub fn prob(&self, space: &FilteredSpace) -> f64 {
        self.atoms.iter().map(|&a| space.atom(self.kappa2, a).prob).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseFamily {
    pub sets: Vec<SparseSet>,
}

impl SparseFamily {
    pub fn new(space: &FilteredSpace, sets: Vec<SparseSet>) -> Result<Self> {
        for s in &sets {
            if s.kappa2 > space.depth() {
                return Err(Error::validation(format!("κ₂ = {} exceeds depth", s.kappa2)));
            }
            if let Some(k1) = s.kappa1 {
                if k1 >= s.kappa2 {
                    return Err(Error::validation(format!("κ₁ = {k1} is not below κ₂ = {}", s.kappa2)));
                }
            }
            if s.atoms.iter().any(|&a| a >= space.num_atoms(s.kappa2)) {
                return Err(Error::validation("atom index out of range"));
            }
        }
        Ok(SparseFamily { sets })
    }

    /// The one-set family `{Ω}` with `κ₂ = 0`.
    pub fn root() -> Self {
        SparseFamily { sets: vec![SparseSet { generation: 0, kappa1: None, kappa2: 0, atoms: vec![0] }] }
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }
}

/// Per leaf, the list of `‖W^{1/p}Ŵ_{κ₂}‖ · ℰ_{κ₂}‖Ŵ_{κ₂}^{−1} W^{−1/p} f‖` over
/// the family members containing it. `T_{W,r}` is the `ℓ^r` norm of each list.
#[derive(Clone, Debug)]
pub struct SparseTerms {
    terms: Vec<Vec<f64>>,
}

impl SparseTerms {
    pub fn new(space: &FilteredSpace, pair: &ReducingPair, family: &SparseFamily, f: &LeafFunction) -> Result<Self> {
        check_inputs(space, pair.dim(), pair.roots().pos.len(), f)?;
        let g = conjugate_input(pair.roots(), f);
        let avg = HatAverages::new(space, pair, &g);
        Ok(Self::from_averages(space, pair, family, &avg))
    }

    pub(crate) fn from_averages(space: &FilteredSpace, pair: &ReducingPair, family: &SparseFamily, avg: &HatAverages) -> Self {
        let mut terms = vec![Vec::new(); space.num_leaves()];
        for set in &family.sets {
            let k = set.kappa2;
            for &a in &set.atoms {
                let e = avg.get(k, a);
                let hat = &pair.atom(k, a).hat;
                for leaf in space.atom(k, a).leaves.clone() {
                    let t = if e == 0.0 { 0.0 } else { pair.roots().pos[leaf].matmul(hat).spectral_norm() * e };
                    terms[leaf].push(t);
                }
            }
        }
        SparseTerms { terms }
    }

    /// Scalar §6 variant: `w^{1/p} · ℰ_{κ₂}|w^{−1/p} f|`.
    pub fn scalar(space: &FilteredSpace, w: &[f64], p: f64, family: &SparseFamily, f: &[f64]) -> Self {
        let g: Vec<f64> = w.iter().zip(f).map(|(wv, fv)| (wv.powf(-1.0 / p) * fv).abs()).collect();
        let mut terms = vec![Vec::new(); space.num_leaves()];
        for set in &family.sets {
            let e = space.cond_expect_scalar(&g, set.kappa2);
            for &a in &set.atoms {
                for leaf in space.atom(set.kappa2, a).leaves.clone() {
                    terms[leaf].push(w[leaf].powf(1.0 / p) * e[a]);
                }
            }
        }
        SparseTerms { terms }
    }

    pub fn at(&self, leaf: usize) -> &[f64] {
        &self.terms[leaf]
    }

    /// `(Σ terms^r)^{1/r}` per leaf.
    pub fn aggregate(&self, r: f64) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| {
                if r == 1.0 {
                    t.iter().sum()
                } else {
                    t.iter().map(|v| v.powf(r)).sum::<f64>().powf(1.0 / r)
                }
            })
            .collect()
    }
}

fn check_r(r: f64) -> Result<()> {
    if r >= 1.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("aggregation exponent r = {r} must be at least 1")))
    }
}

/// `T_{W,r} f`.
pub fn sparse_op_matrix(
    space: &FilteredSpace,
    pair: &ReducingPair,
    family: &SparseFamily,
    r: f64,
    f: &LeafFunction,
) -> Result<LeafFunction> {
    check_r(r)?;
    Ok(scalar_output(SparseTerms::new(space, pair, family, f)?.aggregate(r)))
}

/// `T_{w,r} f` for a scalar weight.
pub fn sparse_op_scalar(
    space: &FilteredSpace,
    w: &[f64],
    p: f64,
    family: &SparseFamily,
    r: f64,
    f: &[f64],
) -> Result<LeafFunction> {
    check_p(p)?;
    check_r(r)?;
    check_scalar(space, w, f)?;
    Ok(scalar_output(SparseTerms::scalar(space, w, p, family, f).aggregate(r)))
}

fn check_scalar(space: &FilteredSpace, w: &[f64], f: &[f64]) -> Result<()> {
    if w.len() != space.num_leaves() || f.len() != space.num_leaves() {
        return Err(Error::validation("scalar weight and function need one value per leaf"));
    }
    if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::validation("scalar weight must be positive and finite"));
    }
    Ok(())
}

/// `ℰ_n^w f = ℰ_n(w f) / ℰ_n w` on the level-`n` atoms.
pub fn weighted_cond_expect(space: &FilteredSpace, w: &[f64], f: &[f64], n: usize) -> Result<Vec<f64>> {
    check_scalar(space, w, f)?;
    if n > space.depth() {
        return Err(Error::validation(format!("level {n} exceeds depth {}", space.depth())));
    }
    let wf: Vec<f64> = w.iter().zip(f).map(|(a, b)| a * b).collect();
    let num = space.cond_expect_scalar(&wf, n);
    let den = space.cond_expect_scalar(w, n);
    Ok(num.into_iter().zip(den).map(|(a, b)| a / b).collect())
}

/// `(Σ P(ℓ) ‖W^{1/p}(ℓ) f(ℓ)‖^p)^{1/p}`.
pub fn lp_weighted_norm(space: &FilteredSpace, w: &MatrixWeight, p: f64, f: &LeafFunction) -> Result<f64> {
    check_p(p)?;
    check_inputs(space, w.dim(), w.num_leaves(), f)?;
    let roots = LeafRoots::new(w, p);
    let s: f64 = (0..space.num_leaves())
        .map(|l| space.leaf_prob(l) * roots.pos[l].apply_norm(f.at(l)).powf(p))
        .sum();
    Ok(s.powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::lp_of_scalars;
    use crate::random::{random_function, random_tree, random_weight};
    use crate::weights::{ReducerOptions, ReducingPair};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dyadic2() -> FilteredSpace {
        FilteredSpace::dyadic(2, None).unwrap()
    }

    #[test]
    fn square_fn_by_hand() {
        let s = dyadic2();
        let f = LeafFunction::scalar(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let sf = square_fn(&s, &Martingale::new(&s, &f).unwrap());
        assert!((sf.at(0)[0] - 5f64.sqrt() / 4.0).abs() < 1e-15);
        assert!((sf.at(2)[0] - 0.25).abs() < 1e-15);
        let c = LeafFunction::constant(&[3.0], 4);
        assert!(square_fn(&s, &Martingale::new(&s, &c).unwrap()).values().iter().all(|v| *v == 0.0));
        let folded = square_fn_with(&s, &Martingale::new(&s, &c).unwrap(), SquareConvention::FoldMean);
        assert!(folded.values().iter().all(|v| (*v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn pythagoras() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let s = FilteredSpace::from_tree(&random_tree(&mut rng, 5, 30)).unwrap();
            let f = random_function(&mut rng, &s, 1);
            let m = Martingale::new(&s, &f).unwrap();
            let sf = square_fn(&s, &m);
            let lhs = lp_of_scalars(&s, sf.values(), 2.0).powi(2) + m.mean()[0].powi(2);
            let rhs = s.lp_norm(&f, 2.0).unwrap().powi(2);
            assert!((lhs - rhs).abs() < 1e-12 * rhs.max(1.0));
        }
    }

    #[test]
    fn identity_weight_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = FilteredSpace::dyadic(3, None).unwrap();
        let f = random_function(&mut rng, &s, 2);
        let w = MatrixWeight::identity(2, 8);
        let sw = weighted_square_fn(&s, &w, 3.0, &f).unwrap();
        let sf = square_fn(&s, &Martingale::new(&s, &f).unwrap());
        assert_eq!(sw, sf);
        let zero = LeafFunction::zeros(2, 8);
        assert!(weighted_square_fn(&s, &w, 3.0, &zero).unwrap().values().iter().all(|v| *v == 0.0));
        let pair = ReducingPair::build(&s, &w, 3.0, &ReducerOptions::default()).unwrap();
        let mp = mprime_maximal(&s, &pair, &f).unwrap();
        let norms = f.norms();
        for leaf in 0..8 {
            let doob = (0..=3).map(|n| s.cond_expect_scalar(&norms, n)[s.atom_of(n, leaf)]).fold(0.0, f64::max);
            assert!((mp.at(leaf)[0] - doob).abs() < 2e-3 * doob);
        }
    }

    #[test]
    fn scalar_conjugation_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for p in [1.5, 2.0, 3.0] {
            let s = FilteredSpace::from_tree(&random_tree(&mut rng, 6, 30)).unwrap();
            let n = s.num_leaves();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0f64..2.0).exp()).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f: Vec<f64> = w.iter().zip(&h).map(|(a, b)| a.powf(1.0 / p) * b).collect();
            let ww = MatrixWeight::scalar(&w).unwrap();
            let lhs = weighted_square_fn(&s, &ww, p, &LeafFunction::scalar(f).unwrap()).unwrap();
            let sh = square_fn(&s, &Martingale::new(&s, &LeafFunction::scalar(h).unwrap()).unwrap());
            for l in 0..n {
                assert!((lhs.at(l)[0] - w[l].powf(1.0 / p) * sh.at(l)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mprime_matches_exhaustive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = FilteredSpace::from_tree(&random_tree(&mut rng, 4, 20)).unwrap();
        let w = random_weight(&mut rng, 2, s.num_leaves());
        let f = random_function(&mut rng, &s, 2);
        let pair = ReducingPair::build(&s, &w, 2.5, &ReducerOptions::default()).unwrap();
        let mp = mprime_maximal(&s, &pair, &f).unwrap();
        let roots = pair.roots();
        for leaf in 0..s.num_leaves() {
            let mut best: f64 = 0.0;
            for n in 0..=s.depth() {
                for (a, atom) in s.atoms(n).iter().enumerate() {
                    if !atom.leaves.contains(&leaf) {
                        continue;
                    }
                    let hinv = pair.atom(n, a).hat_inv;
                    let mut acc = 0.0;
                    for l in atom.leaves.clone() {
                        let g = roots.neg[l].apply(f.at(l));
                        acc += s.leaf_prob(l) * norm2(&hinv.apply(&g));
                    }
                    best = best.max(acc / atom.prob);
                }
            }
            assert!((mp.at(leaf)[0] - best).abs() < 1e-12 * best.max(1.0));
        }
        let c = LeafFunction::constant(&[1.0, 2.0], s.num_leaves());
        let cw = MatrixWeight::identity(2, s.num_leaves());
        let cp = ReducingPair::build(&s, &cw, 2.5, &ReducerOptions::default()).unwrap();
        let out = mprime_maximal(&s, &cp, &c).unwrap();
        assert!(out.values().iter().all(|v| (v - out.values()[0]).abs() < 1e-12));
    }

    #[test]
    fn root_family_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = FilteredSpace::dyadic(3, None).unwrap();
        let f = random_function(&mut rng, &s, 1);
        let w = MatrixWeight::identity(1, 8);
        let pair = ReducingPair::build(&s, &w, 2.0, &ReducerOptions::default()).unwrap();
        let t = sparse_op_matrix(&s, &pair, &SparseFamily::root(), 2.0, &f).unwrap();
        let mean_abs = lp_of_scalars(&s, &f.norms(), 1.0);
        assert!(t.values().iter().all(|v| (v - mean_abs).abs() < 1e-14));
        let zero = LeafFunction::zeros(1, 8);
        assert!(sparse_op_matrix(&s, &pair, &SparseFamily::root(), 2.0, &zero).unwrap().values().iter().all(|v| *v == 0.0));
        let empty = sparse_op_matrix(&s, &pair, &SparseFamily::default(), 2.0, &f).unwrap();
        assert!(empty.values().iter().all(|v| *v == 0.0));
        // Scalar operator agrees with the matrix one when w ≡ 1.
        let ts = sparse_op_scalar(&s, &[1.0; 8], 2.0, &SparseFamily::root(), 2.0, f.values()).unwrap();
        for (a, b) in ts.values().iter().zip(t.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_sparse_by_hand() {
        let s = FilteredSpace::dyadic(1, None).unwrap();
        let t = sparse_op_scalar(&s, &[4.0, 1.0], 2.0, &SparseFamily::root(), 2.0, &[1.0, 0.0]).unwrap();
        assert!((t.at(0)[0] - 0.5).abs() < 1e-15);
        assert!(sparse_op_scalar(&s, &[4.0, 1.0], 2.0, &SparseFamily::root(), 2.0, &[0.0, 0.0])
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn weighted_cond_expect_examples() {
        let s = FilteredSpace::dyadic(1, None).unwrap();
        let v = weighted_cond_expect(&s, &[4.0, 1.0], &[1.0, 0.0], 0).unwrap();
        assert!((v[0] - 0.8).abs() < 1e-15);
        let v = weighted_cond_expect(&s, &[1.0, 1.0], &[3.0, 5.0], 0).unwrap();
        assert_eq!(v, vec![4.0]);
        let v = weighted_cond_expect(&s, &[4.0, 1.0], &[2.5, 2.5], 0).unwrap();
        assert!((v[0] - 2.5).abs() < 1e-15);
        assert!(weighted_cond_expect(&s, &[0.0, 1.0], &[1.0, 1.0], 0).is_err());
    }

    #[test]
    fn weighted_norm_examples() {
        let s = FilteredSpace::dyadic(1, None).unwrap();
        let w = MatrixWeight::scalar(&[4.0, 1.0]).unwrap();
        let f = LeafFunction::scalar(vec![1.0, 1.0]).unwrap();
        assert!((lp_weighted_norm(&s, &w, 2.0, &f).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        let id = MatrixWeight::identity(2, 2);
        let g = LeafFunction::new(2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        assert!((lp_weighted_norm(&s, &id, 3.0, &g).unwrap() - s.lp_norm(&g, 3.0).unwrap()).abs() < 1e-14);
        assert_eq!(lp_weighted_norm(&s, &w, 2.0, &LeafFunction::zeros(1, 2)).unwrap(), 0.0);
    }

    #[test]
    fn family_validation() {
        let s = dyadic2();
        let bad = SparseSet { generation: 1, kappa1: Some(2), kappa2: 1, atoms: vec![0] };
        assert!(SparseFamily::new(&s, vec![bad]).is_err());
        let oob = SparseSet { generation: 1, kappa1: Some(0), kappa2: 1, atoms: vec![5] };
        assert!(SparseFamily::new(&s, vec![oob]).is_err());
    }

    fn instance(seed: u64) -> (FilteredSpace, MatrixWeight, LeafFunction, SparseFamily) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = FilteredSpace::from_tree(&random_tree(&mut rng, 4, 16)).unwrap();
        let d = rng.gen_range(1..=2);
        let w = random_weight(&mut rng, d, s.num_leaves());
        let f = random_function(&mut rng, &s, d);
        // Arbitrary family: random atoms at random levels.
        let mut sets = vec![];
        for g in 0..4 {
            let k = rng.gen_range(0..=s.depth());
            let atoms: Vec<usize> = (0..s.num_atoms(k)).filter(|_| rng.gen_bool(0.5)).collect();
            sets.push(SparseSet { generation: g, kappa1: None, kappa2: k, atoms });
        }
        let fam = SparseFamily::new(&s, sets).unwrap();
        (s, w, f, fam)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn holder_and_embedding(seed in 0u64..10_000) {
            let (s, w, f, fam) = instance(seed);
            for p in [1.5f64, 2.0, 3.0, 4.0] {
                let pair = ReducingPair::build(&s, &w, p, &ReducerOptions::default()).unwrap();
                let terms = SparseTerms::new(&s, &pair, &fam, &f).unwrap();
                let t1 = terms.aggregate(1.0);
                let t2 = terms.aggregate(2.0);
                let tp = terms.aggregate(p);
                for l in 0..s.num_leaves() {
                    if p <= 2.0 {
                        prop_assert!(t2[l] <= tp[l] * (1.0 + 1e-12) + 1e-12);
                    } else {
                        let theta = p / (2.0 * p - 2.0);
                        let rhs = t1[l].powf(1.0 - theta) * tp[l].powf(theta);
                        prop_assert!(t2[l] <= rhs * (1.0 + 1e-12) + 1e-10);
                    }
                }
            }
        }

        #[test]
        fn homogeneity(seed in 0u64..10_000, c in -3.0f64..3.0) {
            let (s, w, f, fam) = instance(seed);
            let p = 2.5;
            let pair = ReducingPair::build(&s, &w, p, &ReducerOptions::default()).unwrap();
            let cf = f.scaled(c);
            let pairs = [
                (weighted_square_fn(&s, &w, p, &f).unwrap(), weighted_square_fn(&s, &w, p, &cf).unwrap()),
                (mprime_maximal(&s, &pair, &f).unwrap(), mprime_maximal(&s, &pair, &cf).unwrap()),
                (sparse_op_matrix(&s, &pair, &fam, 2.0, &f).unwrap(), sparse_op_matrix(&s, &pair, &fam, 2.0, &cf).unwrap()),
            ];
            for (a, b) in pairs {
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((c.abs() * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }
}
