//! Stopping-time machinery: the functions `γ₁, γ₂, γ`, principal sets built
//! generation by generation, their structural properties, the `b_m`
//! sequence and the pointwise sparse domination of `S_W`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtration::{FilteredSpace, LeafFunction, Martingale};
use crate::linalg::{norm2, Mat, MAX_DIM};
use crate::operators::{
    conjugate_input, weighted_square_from_roots, HatAverages, SparseFamily, SparseSet, SparseTerms, SquareConvention,
    ZERO_DENOM,
};
use crate::weights::ReducingPair;

/// Threshold standing in for "γ > 0" when locating the first generation.
pub const FIRST_GEN_THRESHOLD: f64 = 1e-12;
/// Tolerance of the pointwise inequality checks.
pub const CHECK_TOL: f64 = 1e-10;

/// `8√e`: with it each of `γ₁`, `γ₂` exceeds the threshold on at most a
/// quarter of any `ℱ_n` set, which gives the halving property.
pub fn default_cgamma() -> f64 {
    8.0 * std::f64::consts::E.sqrt()
}

/// `C² + 2·max(C,1)² + 2`, the constant in `b₁² ≤ b_N² + K_it Σ_m A_m`.
pub fn k_iteration(c: f64) -> f64 {
    c * c + 2.0 * c.max(1.0).powi(2) + 2.0
}

/// `√(K_it + 2)`, the constant in `S_W f ≤ K_dom · T_{W,2} f` for the family
/// augmented by the root set.
pub fn k_domination(c: f64) -> f64 {
    (k_iteration(c) + 2.0).sqrt()
}

#[inline]
fn leq(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + CHECK_TOL * rhs.abs().max(1.0)
}

/// Shared state for evaluating `γ(n, m)`: `g = W^{−1/p} f`, its martingale and
/// the averages `ℰ_n ‖Ŵ_n^{−1} g‖`.
pub struct GammaEngine<'a> {
    space: &'a FilteredSpace,
    pair: &'a ReducingPair,
    g: LeafFunction,
    mart: Martingale,
    avg: HatAverages,
}

impl<'a> GammaEngine<'a> {
    pub fn new(space: &'a FilteredSpace, pair: &'a ReducingPair, f: &LeafFunction) -> Result<Self> {
        space.check_function(f)?;
        if f.dim() != pair.dim() || pair.roots().pos.len() != space.num_leaves() {
            return Err(Error::validation("function, weight and space are inconsistent"));
        }
        let g = conjugate_input(pair.roots(), f);
        let mart = Martingale::new(space, &g)?;
        let avg = HatAverages::new(space, pair, &g);
        Ok(GammaEngine { space, pair, g, mart, avg })
    }

    pub fn space(&self) -> &FilteredSpace {
        self.space
    }

    pub fn pair(&self) -> &ReducingPair {
        self.pair
    }

    pub fn transformed(&self) -> &LeafFunction {
        &self.g
    }

    pub fn martingale(&self) -> &Martingale {
        &self.mart
    }

    pub fn averages(&self) -> &HatAverages {
        &self.avg
    }

    /// `ℰ_n ‖Ŵ_n^{−1} g‖` on the atom containing `leaf`.
    #[inline]
    pub fn denom(&self, n: usize, leaf: usize) -> f64 {
        self.avg.at_leaf(self.space, n, leaf)
    }

    #[inline]
    fn hinv(&self, n: usize, leaf: usize) -> &Mat {
        &self.pair.at_leaf(self.space, n, leaf).hat_inv
    }

    #[inline]
    fn reduced_norm(m: &Mat, v: &[f64]) -> f64 {
        let mut buf = [0.0; MAX_DIM];
        let out = &mut buf[..v.len()];
        m.apply_into(v, out);
        norm2(out)
    }

    /// `(γ₁(n,m), γ₂(n,m))` at `leaf`.
    pub fn gammas(&self, n: usize, m: usize, leaf: usize) -> (f64, f64) {
        if m <= n {
            return (0.0, 0.0);
        }
        let den = self.denom(n, leaf);
        if den <= ZERO_DENOM {
            return (0.0, 0.0);
        }
        let h = self.hinv(n, leaf);
        let s: f64 = (n + 1..=m)
            .map(|i| Self::reduced_norm(h, self.mart.difference_at(self.space, i, leaf)).powi(2))
            .sum();
        let g2 = Self::reduced_norm(h, self.mart.level_at(self.space, m, leaf));
        (s.sqrt() / den, g2 / den)
    }

    pub fn gamma(&self, n: usize, m: usize, leaf: usize) -> f64 {
        let (a, b) = self.gammas(n, m, leaf);
        a.max(b)
    }

    /// First `ℓ > n` with `γ(n, ℓ) > threshold`.
    pub fn first_exceedance(&self, n: usize, leaf: usize, threshold: f64) -> Option<usize> {
        let den = self.denom(n, leaf);
        if den <= ZERO_DENOM {
            return None;
        }
        let h = self.hinv(n, leaf);
        let mut s = 0.0;
        for l in n + 1..=self.space.depth() {
            s += Self::reduced_norm(h, self.mart.difference_at(self.space, l, leaf)).powi(2);
            let g2 = Self::reduced_norm(h, self.mart.level_at(self.space, l, leaf));
            if (s.sqrt() / den).max(g2 / den) > threshold {
                return Some(l);
            }
        }
        None
    }

    /// `sup_{m>n} γ(n, m)` at `leaf`.
    pub fn sup_gamma(&self, n: usize, leaf: usize) -> f64 {
        (n + 1..=self.space.depth()).map(|m| self.gamma(n, m, leaf)).fold(0.0, f64::max)
    }
}

/// `γ₁(n, m)`, `γ₂(n, m)` for one base level `n`, every `m ∈ 0..=D` and
/// every leaf (zero for `m ≤ n`).
#[derive(Clone, Debug, Serialize)]
pub struct GammaTable {
    pub base: usize,
    pub gamma1: Vec<Vec<f64>>,
    pub gamma2: Vec<Vec<f64>>,
}

impl GammaTable {
    pub fn gamma(&self, m: usize, leaf: usize) -> f64 {
        self.gamma1[m][leaf].max(self.gamma2[m][leaf])
    }
}

pub fn gamma_table(space: &FilteredSpace, pair: &ReducingPair, f: &LeafFunction, n: usize) -> Result<GammaTable> {
    if n >= space.depth() {
        return Err(Error::validation(format!("base level {n} must be below the depth {}", space.depth())));
    }
    let eng = GammaEngine::new(space, pair, f)?;
    let mut gamma1 = vec![vec![0.0; space.num_leaves()]; space.depth() + 1];
    let mut gamma2 = gamma1.clone();
    for m in n + 1..=space.depth() {
        for leaf in 0..space.num_leaves() {
            let (a, b) = eng.gammas(n, m, leaf);
            gamma1[m][leaf] = a;
            gamma2[m][leaf] = b;
        }
    }
    Ok(GammaTable { base: n, gamma1, gamma2 })
}

/// `ℙ(A ∩ {sup_{m>n} γ(n,m) > C}) ≤ ℙ(A ∩ {sup ≤ C})` for `A` the union of the
/// given level-`n` atoms.
pub fn halving_check(
    space: &FilteredSpace,
    pair: &ReducingPair,
    f: &LeafFunction,
    n: usize,
    c: f64,
    atoms: &[usize],
) -> Result<bool> {
    let eng = GammaEngine::new(space, pair, f)?;
    halving_with(&eng, n, c, atoms)
}

fn halving_with(eng: &GammaEngine<'_>, n: usize, c: f64, atoms: &[usize]) -> Result<bool> {
    let space = eng.space();
    if n > space.depth() || atoms.iter().any(|&a| a >= space.num_atoms(n)) {
        return Err(Error::validation("halving set is not a union of atoms of the given level"));
    }
    let (mut above, mut below) = (0.0, 0.0);
    for &a in atoms {
        for leaf in space.atom(n, a).leaves.clone() {
            if eng.first_exceedance(n, leaf, c).is_some() {
                above += space.leaf_prob(leaf);
            } else {
                below += space.leaf_prob(leaf);
            }
        }
    }
    Ok(above <= below)
}

/// One principal set `P`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrincipalSet {
    pub generation: usize,
    pub kappa1: usize,
    pub kappa2: usize,
    /// Level-`κ₂` atoms whose union is `P`.
    pub atoms: Vec<usize>,
    /// Leaves of `P`, ascending.
    pub leaves: Vec<usize>,
    /// `τ_P` per leaf of `P` (same order as `leaves`); `None` is `∞`.
    pub tau: Vec<Option<usize>>,
    /// Index of the generating set in [`PrincipalFamily::sets`].
    pub parent: Option<usize>,
}

impl PrincipalSet {
    /// `E(P) = P ∩ {τ_P = ∞}`.
    pub fn escape(&self) -> Vec<usize> {
        self.leaves.iter().zip(&self.tau).filter(|(_, t)| t.is_none()).map(|(l, _)| *l).collect()
    }

    pub fn prob(&self, space: &FilteredSpace) -> f64 {
        space.prob_of(self.leaves.iter().copied())
    }
}

/// All generations of principal sets for base level 0.
#[derive(Clone, Debug, Serialize)]
pub struct PrincipalFamily {
    pub cgamma: f64,
    pub p: f64,
    pub dim: usize,
    /// Ordered by generation, then by `κ₂`, then by parent.
    pub sets: Vec<PrincipalSet>,
    /// `τ₁` per leaf.
    pub tau1: Vec<Option<usize>>,
}

impl PrincipalFamily {
    pub fn generation(&self, m: usize) -> impl Iterator<Item = &PrincipalSet> {
        self.sets.iter().filter(move |s| s.generation == m)
    }

    pub fn num_generations(&self) -> usize {
        self.sets.iter().map(|s| s.generation).max().unwrap_or(0)
    }

    /// The family as a sparse family, optionally with the root set `Ω` at
    /// `κ₂ = 0` prepended.
    pub fn to_sparse(&self, with_root: bool) -> SparseFamily {
        let mut sets = Vec::with_capacity(self.sets.len() + 1);
        if with_root {
            sets.extend(SparseFamily::root().sets);
        }
        sets.extend(self.sets.iter().map(|s| SparseSet {
            generation: s.generation,
            kappa1: Some(s.kappa1),
            kappa2: s.kappa2,
            atoms: s.atoms.clone(),
        }));
        SparseFamily { sets }
    }

    /// Audit export: generation, κ₁, κ₂, atoms and `E(P)` per set.
    pub fn to_json(&self) -> serde_json::Value {
        let sets: Vec<serde_json::Value> = self
            .sets
            .iter()
            .map(|s| {
                serde_json::json!({
                    "generation": s.generation,
                    "kappa1": s.kappa1,
                    "kappa2": s.kappa2,
                    "atoms": s.atoms,
                    "escape": s.escape(),
                })
            })
            .collect();
        serde_json::json!({ "cgamma": self.cgamma, "p": self.p, "dim": self.dim, "sets": sets })
    }
}

/// Group the leaves of `within` by their stopping level into sets.
fn split_by_tau(
    space: &FilteredSpace,
    within: &[usize],
    tau: &[Option<usize>],
    generation: usize,
    kappa1: usize,
    parent: Option<usize>,
) -> Vec<PrincipalSet> {
    let mut out: Vec<PrincipalSet> = Vec::new();
    for j in kappa1 + 1..=space.depth() {
        let leaves: Vec<usize> = within.iter().zip(tau).filter(|(_, t)| **t == Some(j)).map(|(l, _)| *l).collect();
        if leaves.is_empty() {
            continue;
        }
        let mut atoms: Vec<usize> = leaves.iter().map(|&l| space.atom_of(j, l)).collect();
        atoms.dedup();
        out.push(PrincipalSet { generation, kappa1, kappa2: j, atoms, leaves, tau: Vec::new(), parent });
    }
    out
}

pub fn build_principal_family(space: &FilteredSpace, pair: &ReducingPair, f: &LeafFunction, c: f64) -> Result<PrincipalFamily> {
    let eng = GammaEngine::new(space, pair, f)?;
    Ok(build_with(&eng, c))
}

pub(crate) fn build_with(eng: &GammaEngine<'_>, c: f64) -> PrincipalFamily {
    let space = eng.space();
    let all: Vec<usize> = (0..space.num_leaves()).collect();
    let tau1: Vec<Option<usize>> = all.iter().map(|&l| eng.first_exceedance(0, l, FIRST_GEN_THRESHOLD)).collect();
    let mut sets = split_by_tau(space, &all, &tau1, 1, 0, None);
    let mut start = 0;
    while start < sets.len() {
        let end = sets.len();
        let mut next = Vec::new();
        for idx in start..end {
            let k = sets[idx].kappa2;
            let tau: Vec<Option<usize>> = sets[idx].leaves.iter().map(|&l| eng.first_exceedance(k, l, c)).collect();
            next.extend(split_by_tau(space, &sets[idx].leaves, &tau, sets[idx].generation + 1, k, Some(idx)));
            sets[idx].tau = tau;
        }
        sets.extend(next);
        start = end;
    }
    PrincipalFamily { cgamma: c, p: eng.pair().p(), dim: eng.pair().dim(), sets, tau1 }
}

/// Per-set outcome of the structural checks.
#[derive(Clone, Debug, Serialize)]
pub struct SetCheck {
    pub generation: usize,
    pub kappa1: usize,
    pub kappa2: usize,
    pub measurable: bool,
    /// Both inequalities of the `(c)` bound on `P` (informational for generation 1).
    pub c_bound: bool,
    /// Both inequalities of the `(d)` bound on `E(P)`.
    pub d_bound: bool,
    /// `ℙ(P) ≤ 2ℙ(E(P))` and `χ_P ≤ 2ℰ_{κ₂}χ_{E(P)}`.
    pub mass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyReport {
    pub cgamma: f64,
    pub a_disjoint: bool,
    pub b_measurable: bool,
    pub c_bounds: bool,
    pub d_bounds: bool,
    pub e_mass: bool,
    pub f_terminates: bool,
    /// Every set of generation `m+1` lies in one set of generation `m` with `κ₁ = κ₂(parent)`.
    pub nesting: bool,
    /// Sets generated by the same parent are disjoint.
    pub sibling_disjoint: bool,
    /// The `(c)`, `(d)` bounds evaluated on generation 1, reported only.
    pub first_generation_c: bool,
    pub first_generation_d: bool,
    pub sets: Vec<SetCheck>,
}

impl PropertyReport {
    /// The six properties as stated, for generations where they are claimed.
    pub fn all_pass(&self) -> bool {
        self.a_disjoint && self.b_measurable && self.c_bounds && self.d_bounds && self.e_mass && self.f_terminates
    }
}

pub fn check_properties(
    family: &PrincipalFamily,
    space: &FilteredSpace,
    pair: &ReducingPair,
    f: &LeafFunction,
) -> Result<PropertyReport> {
    let eng = GammaEngine::new(space, pair, f)?;
    Ok(check_with(family, &eng))
}

/// `(√Σ_{lo<i≤hi} ‖Ŵ_b^{−1} d_i g‖², max_{lo<i≤hi} ‖Ŵ_b^{−1} ℰ_i g‖)` at `leaf`.
fn window(eng: &GammaEngine<'_>, base: usize, lo: usize, hi: usize, leaf: usize) -> (f64, f64) {
    let space = eng.space();
    let h = &eng.pair().at_leaf(space, base, leaf).hat_inv;
    let mart = eng.martingale();
    let mut s = 0.0;
    let mut m: f64 = 0.0;
    for i in lo + 1..=hi {
        s += h.apply_norm(mart.difference_at(space, i, leaf)).powi(2);
        m = m.max(h.apply_norm(mart.level_at(space, i, leaf)));
    }
    (s.sqrt(), m)
}

pub(crate) fn check_with(family: &PrincipalFamily, eng: &GammaEngine<'_>) -> PropertyReport {
    let space = eng.space();
    let c = family.cgamma;
    let depth = space.depth();

    let mut escape_count = vec![0usize; space.num_leaves()];
    let mut checks = Vec::with_capacity(family.sets.len());
    let (mut c_all, mut d_all, mut e_all, mut b_all) = (true, true, true, true);
    let (mut c_first, mut d_first) = (true, true);
    for set in &family.sets {
        let escape = set.escape();
        for &l in &escape {
            escape_count[l] += 1;
        }
        let in_set = |l: usize| set.leaves.binary_search(&l).is_ok();
        let measurable = set.kappa1 < set.kappa2
            && set.kappa2 <= depth
            && set.leaves.iter().all(|&l| space.atom(set.kappa2, space.atom_of(set.kappa2, l)).leaves.clone().all(in_set))
            && {
                let mut atoms: Vec<usize> = set.leaves.iter().map(|&l| space.atom_of(set.kappa2, l)).collect();
                atoms.dedup();
                atoms == set.atoms
            };
        let (k1, k2) = (set.kappa1, set.kappa2.min(depth));
        let c_bound = set.leaves.iter().all(|&l| {
            let (sq, mx) = window(eng, k1, k1, k2.saturating_sub(1), l);
            let rhs = c * eng.denom(k1, l);
            leq(sq, rhs) && leq(mx, rhs)
        });
        let d_bound = escape.iter().all(|&l| {
            let (sq, mx) = window(eng, k2, k2, depth, l);
            let rhs = c * eng.denom(k2, l);
            leq(sq, rhs) && leq(mx, rhs)
        });
        let pe = space.prob_of(escape.iter().copied());
        let mass = set.prob(space) <= 2.0 * pe * (1.0 + 1e-12)
            && set.atoms.iter().all(|&a| {
                let atom = space.atom(k2, a);
                let e: f64 = escape.iter().filter(|l| atom.leaves.contains(l)).map(|&l| space.leaf_prob(l)).sum();
                atom.prob <= 2.0 * e * (1.0 + 1e-12)
            });
        b_all &= measurable;
        if set.generation >= 2 {
            c_all &= c_bound;
            d_all &= d_bound;
            e_all &= mass;
        } else {
            c_first &= c_bound;
            d_first &= d_bound;
        }
        checks.push(SetCheck { generation: set.generation, kappa1: set.kappa1, kappa2: set.kappa2, measurable, c_bound, d_bound, mass });
    }

    let nesting = family.sets.iter().all(|s| match s.parent {
        None => s.generation == 1 && s.kappa1 == 0,
        Some(pi) => {
            let par = &family.sets[pi];
            par.generation + 1 == s.generation
                && par.kappa2 == s.kappa1
                && s.leaves.iter().all(|l| par.leaves.binary_search(l).is_ok())
                && family
                    .sets
                    .iter()
                    .filter(|q| q.generation == par.generation && !std::ptr::eq(*q, par))
                    .all(|q| s.leaves.iter().all(|l| q.leaves.binary_search(l).is_err()))
        }
    });
    let mut sibling_disjoint = true;
    for (i, a) in family.sets.iter().enumerate() {
        for b in family.sets.iter().skip(i + 1) {
            if a.parent == b.parent && a.generation == b.generation && a.leaves.iter().any(|l| b.leaves.binary_search(l).is_ok()) {
                sibling_disjoint = false;
            }
        }
    }

    PropertyReport {
        cgamma: c,
        a_disjoint: escape_count.iter().all(|&n| n <= 1),
        b_measurable: b_all,
        c_bounds: c_all,
        d_bounds: d_all,
        e_mass: e_all,
        f_terminates: family.num_generations() <= depth,
        nesting,
        sibling_disjoint,
        first_generation_c: c_first,
        first_generation_d: d_first,
        sets: checks,
    }
}

/// `‖W^{1/p} d_k g‖²` for every `k ∈ 1..=D` at one leaf.
fn weighted_diff_sq(eng: &GammaEngine<'_>, leaf: usize) -> Vec<f64> {
    let space = eng.space();
    let w = &eng.pair().roots().pos[leaf];
    (1..=space.depth())
        .map(|k| w.apply_norm(eng.martingale().difference_at(space, k, leaf)).powi(2))
        .collect()
}

/// `b_m = (Σ_{P∈𝒫_m} Σ_{k>κ₂(P)} ‖W^{1/p} d_k(W^{−1/p} f)‖² χ_P)^{1/2}` per leaf.
pub fn b_sequence(
    family: &PrincipalFamily,
    space: &FilteredSpace,
    pair: &ReducingPair,
    f: &LeafFunction,
    m: usize,
) -> Result<Vec<f64>> {
    let eng = GammaEngine::new(space, pair, f)?;
    let diffs: Vec<Vec<f64>> = (0..space.num_leaves()).map(|l| weighted_diff_sq(&eng, l)).collect();
    Ok(b_with(family, space, &diffs, m))
}

fn b_with(family: &PrincipalFamily, space: &FilteredSpace, diffs: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut b = vec![0.0; space.num_leaves()];
    for set in family.generation(m) {
        for &l in &set.leaves {
            b[l] = diffs[l][set.kappa2..].iter().sum::<f64>().sqrt();
        }
    }
    b
}

/// `A_m = Σ_{P∈𝒫_m} ‖W^{1/p}Ŵ_{κ₂}‖² (ℰ_{κ₂}‖Ŵ_{κ₂}^{−1} g‖)² χ_P` per leaf, for `m ∈ 0..=G`,
/// where `m = 0` is the root term.
fn a_terms(family: &PrincipalFamily, eng: &GammaEngine<'_>) -> Vec<Vec<f64>> {
    let space = eng.space();
    let fam = family.to_sparse(true);
    let terms = SparseTerms::from_averages(space, eng.pair(), &fam, eng.averages());
    let g = family.num_generations();
    let mut out = vec![vec![0.0; space.num_leaves()]; g + 1];
    // Terms are listed per leaf in family order: root first, then by generation.
    for leaf in 0..space.num_leaves() {
        let t = terms.at(leaf);
        out[0][leaf] = t[0] * t[0];
        let mut i = 1;
        for set in family.sets.iter() {
            if set.leaves.binary_search(&leaf).is_ok() {
                out[set.generation][leaf] += t[i] * t[i];
                i += 1;
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationReport {
    pub k_it: f64,
    /// Largest `(b₁² − b_N²) / Σ_{m≤N} A_m` over leaves and `N` where the sum is positive.
    pub max_ratio: f64,
    pub pass: bool,
    /// `b_m ≡ 0` for every `m > D`.
    pub b_vanishes_beyond_depth: bool,
}

pub fn iteration_check(
    family: &PrincipalFamily,
    space: &FilteredSpace,
    pair: &ReducingPair,
    f: &LeafFunction,
) -> Result<IterationReport> {
    let eng = GammaEngine::new(space, pair, f)?;
    Ok(iteration_with(family, &eng))
}

pub(crate) fn iteration_with(family: &PrincipalFamily, eng: &GammaEngine<'_>) -> IterationReport {
    let space = eng.space();
    let k_it = k_iteration(family.cgamma);
    let diffs: Vec<Vec<f64>> = (0..space.num_leaves()).map(|l| weighted_diff_sq(eng, l)).collect();
    let a = a_terms(family, eng);
    let depth = space.depth();
    let b1 = b_with(family, space, &diffs, 1);
    let mut pass = true;
    let mut max_ratio: f64 = 0.0;
    for n in 2..=depth + 1 {
        let bn = b_with(family, space, &diffs, n);
        for leaf in 0..space.num_leaves() {
            let sum: f64 = (1..=n.min(a.len() - 1)).map(|m| a[m][leaf]).sum();
            let lhs = b1[leaf].powi(2);
            let rhs = bn[leaf].powi(2) + k_it * sum;
            pass &= leq(lhs, rhs);
            if sum > 0.0 {
                max_ratio = max_ratio.max((lhs - bn[leaf].powi(2)) / sum);
            }
        }
    }
    let b_vanishes_beyond_depth = (depth + 1..=depth + 2).all(|m| b_with(family, space, &diffs, m).iter().all(|v| *v == 0.0));
    IterationReport { k_it, max_ratio, pass, b_vanishes_beyond_depth }
}

#[derive(Clone, Debug, Serialize)]
pub struct VanishReport {
    /// `max S_W f` on `{τ₁ = ∞}`.
    pub outside_max: f64,
    /// `max Σ_{i<κ₂(P₁)} ‖W^{1/p} d_i g‖²` over first-generation sets.
    pub before_kappa_max: f64,
    pub pass: bool,
}

pub fn vanish_checks(family: &PrincipalFamily, space: &FilteredSpace, pair: &ReducingPair, f: &LeafFunction) -> Result<VanishReport> {
    let eng = GammaEngine::new(space, pair, f)?;
    Ok(vanish_with(family, &eng, f))
}

pub(crate) fn vanish_with(family: &PrincipalFamily, eng: &GammaEngine<'_>, f: &LeafFunction) -> VanishReport {
    let space = eng.space();
    let sw = weighted_square_from_roots(space, eng.pair().roots(), f, SquareConvention::ExcludeMean);
    let outside_max = family
        .tau1
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_none())
        .map(|(l, _)| sw.at(l)[0])
        .fold(0.0, f64::max);
    let mut before_kappa_max: f64 = 0.0;
    for set in family.generation(1) {
        for &l in &set.leaves {
            let d = weighted_diff_sq(eng, l);
            before_kappa_max = before_kappa_max.max(d[..set.kappa2 - 1].iter().sum::<f64>() + 0.0);
        }
    }
    VanishReport { outside_max, before_kappa_max, pass: outside_max <= CHECK_TOL && before_kappa_max <= CHECK_TOL }
}

#[derive(Clone, Debug, Serialize)]
pub struct DominationReport {
    pub max_ratio: f64,
    pub bound: f64,
    pub pass: bool,
    /// Leaves where `S_W f > 1e−10` while `T_{W,2} f` vanishes.
    pub unbounded_leaves: usize,
}

/// `max S_W f / T_{W,2} f` with `T` evaluated on the principal family of
/// `(f, C)` together with the root set.
pub fn sparse_domination_check(
    space: &FilteredSpace,
    pair: &ReducingPair,
    f: &LeafFunction,
    c: f64,
    conv: SquareConvention,
) -> Result<DominationReport> {
    let eng = GammaEngine::new(space, pair, f)?;
    let family = build_with(&eng, c);
    Ok(domination_with(&family, &eng, f, conv))
}

pub(crate) fn domination_with(
    family: &PrincipalFamily,
    eng: &GammaEngine<'_>,
    f: &LeafFunction,
    conv: SquareConvention,
) -> DominationReport {
    let space = eng.space();
    let sw = weighted_square_from_roots(space, eng.pair().roots(), f, conv);
    let t = SparseTerms::from_averages(space, eng.pair(), &family.to_sparse(true), eng.averages()).aggregate(2.0);
    let bound = k_domination(family.cgamma);
    let mut max_ratio: f64 = 0.0;
    let mut unbounded = 0;
    for leaf in 0..space.num_leaves() {
        let s = sw.at(leaf)[0];
        if t[leaf] <= ZERO_DENOM {
            if s > CHECK_TOL {
                unbounded += 1;
            }
        } else {
            max_ratio = max_ratio.max(s / t[leaf]);
        }
    }
    DominationReport { max_ratio, bound, pass: unbounded == 0 && max_ratio <= bound, unbounded_leaves: unbounded }
}

/// Everything the invariant suite measures on one instance.
#[derive(Clone, Debug, Serialize)]
pub struct InstanceReport {
    pub properties: PropertyReport,
    pub iteration: IterationReport,
    pub vanish: VanishReport,
    pub domination: DominationReport,
    /// Halving at every level `n < D` for every single atom.
    pub halving: bool,
}

impl InstanceReport {
    pub fn all_pass(&self) -> bool {
        self.properties.all_pass()
            && self.iteration.pass
            && self.iteration.b_vanishes_beyond_depth
            && self.vanish.pass
            && self.domination.pass
            && self.halving
    }
}

/// Builds the family once and runs every check on it.
pub fn analyze(
    space: &FilteredSpace,
    pair: &ReducingPair,
    f: &LeafFunction,
    c: f64,
    conv: SquareConvention,
) -> Result<InstanceReport> {
    let eng = GammaEngine::new(space, pair, f)?;
    let family = build_with(&eng, c);
    let mut halving = true;
    for n in 0..space.depth() {
        for a in 0..space.num_atoms(n) {
            halving &= halving_with(&eng, n, c, &[a])?;
        }
    }
    Ok(InstanceReport {
        properties: check_with(&family, &eng),
        iteration: iteration_with(&family, &eng),
        vanish: vanish_with(&family, &eng, f),
        domination: domination_with(&family, &eng, f, conv),
        halving,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_function, random_tree, random_weight};
    use crate::weights::{MatrixWeight, ReducerOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_pair(s: &FilteredSpace, d: usize) -> ReducingPair {
        ReducingPair::build(s, &MatrixWeight::identity(d, s.num_leaves()), 2.0, &ReducerOptions::default()).unwrap()
    }

    #[test]
    fn default_constant() {
        assert!((default_cgamma() - 13.189_770_166).abs() < 1e-8);
        assert!((k_iteration(2.0) - 14.0).abs() < 1e-15);
        assert!((k_iteration(0.5) - 4.25).abs() < 1e-15);
    }

    #[test]
    fn zero_function() {
        let s = FilteredSpace::dyadic(3, None).unwrap();
        let pair = unit_pair(&s, 2);
        let f = LeafFunction::zeros(2, 8);
        let t = gamma_table(&s, &pair, &f, 0).unwrap();
        assert!(t.gamma1.iter().chain(&t.gamma2).flatten().all(|v| *v == 0.0));
        let fam = build_principal_family(&s, &pair, &f, default_cgamma()).unwrap();
        assert!(fam.sets.is_empty());
        let it = iteration_check(&fam, &s, &pair, &f).unwrap();
        assert!(it.pass);
        let v = vanish_checks(&fam, &s, &pair, &f).unwrap();
        assert!(v.pass && v.outside_max == 0.0);
        let d = sparse_domination_check(&s, &pair, &f, default_cgamma(), SquareConvention::ExcludeMean).unwrap();
        assert!(d.pass && d.max_ratio == 0.0);
        assert!(halving_check(&s, &pair, &f, 0, 1.0, &[]).unwrap());
    }

    #[test]
    fn constant_function() {
        let s = FilteredSpace::dyadic(3, None).unwrap();
        let pair = unit_pair(&s, 2);
        let f = LeafFunction::constant(&[1.0, -2.0], 8);
        let t = gamma_table(&s, &pair, &f, 0).unwrap();
        for m in 1..=3 {
            for l in 0..8 {
                assert!(t.gamma1[m][l].abs() < 1e-15);
                assert!((t.gamma2[m][l] - 1.0).abs() < 1e-12);
            }
        }
        let fam = build_principal_family(&s, &pair, &f, 2.0).unwrap();
        assert_eq!(fam.sets.len(), 1);
        let p = &fam.sets[0];
        assert_eq!((p.kappa1, p.kappa2, p.leaves.len()), (0, 1, 8));
        assert!(p.tau.iter().all(Option::is_none));
        assert_eq!(p.escape().len(), 8);
        assert!(halving_check(&s, &pair, &f, 0, 2.0, &[0]).unwrap());
        let rep = check_properties(&fam, &s, &pair, &f).unwrap();
        assert!(rep.all_pass() && rep.nesting && rep.sibling_disjoint, "{rep:?}");
        assert_eq!(b_sequence(&fam, &s, &pair, &f, 1).unwrap(), vec![0.0; 8]);
        let it = iteration_check(&fam, &s, &pair, &f).unwrap();
        assert!(it.pass && it.b_vanishes_beyond_depth);
        let d = sparse_domination_check(&s, &pair, &f, 2.0, SquareConvention::ExcludeMean).unwrap();
        assert!(d.pass && d.max_ratio == 0.0);
    }

    #[test]
    fn hand_example() {
        let s = FilteredSpace::dyadic(2, None).unwrap();
        let pair = unit_pair(&s, 1);
        let f = LeafFunction::scalar(vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let t = gamma_table(&s, &pair, &f, 0).unwrap();
        assert_eq!((0..4).map(|l| t.gamma(1, l)).collect::<Vec<_>>(), vec![0.0; 4]);
        let g2: Vec<f64> = (0..4).map(|l| t.gamma(2, l)).collect();
        for (a, b) in g2.iter().zip([2.0, 2.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        let fam = build_principal_family(&s, &pair, &f, default_cgamma()).unwrap();
        assert_eq!(fam.sets.len(), 1);
        let p = &fam.sets[0];
        assert_eq!((p.generation, p.kappa1, p.kappa2), (1, 0, 2));
        assert_eq!(p.leaves, vec![0, 1]);
        assert_eq!(p.atoms, vec![0, 1]);
        assert_eq!(b_sequence(&fam, &s, &pair, &f, 1).unwrap(), vec![0.0; 4]);
        let v = vanish_checks(&fam, &s, &pair, &f).unwrap();
        assert!(v.pass);
        let d = sparse_domination_check(&s, &pair, &f, default_cgamma(), SquareConvention::ExcludeMean).unwrap();
        // S f = (1, 1, 0, 0); T² = (1 + 1/4, 1 + 1/4, 1/4, 1/4) from the
        // set {0, 1} and the root average 1/2.
        assert!(d.pass);
        assert!((d.max_ratio - 2.0 / 5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn halving_fails_at_zero_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = FilteredSpace::dyadic(3, None).unwrap();
        let pair = unit_pair(&s, 1);
        let f = random_function(&mut rng, &s, 1);
        assert!(!halving_check(&s, &pair, &f, 0, 0.0, &[0]).unwrap());
    }

    #[test]
    fn b_beyond_depth_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let s = FilteredSpace::from_tree(&random_tree(&mut rng, 5, 20)).unwrap();
        let w = random_weight(&mut rng, 2, s.num_leaves());
        let f = random_function(&mut rng, &s, 2);
        let pair = ReducingPair::build(&s, &w, 3.0, &ReducerOptions::default()).unwrap();
        let fam = build_principal_family(&s, &pair, &f, default_cgamma()).unwrap();
        for m in s.depth() + 1..s.depth() + 3 {
            assert!(b_sequence(&fam, &s, &pair, &f, m).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn mutated_family_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut caught = 0;
        let mut tried = 0;
        for _ in 0..40 {
            let s = FilteredSpace::dyadic(5, None).unwrap();
            let w = random_weight(&mut rng, 1, 32);
            let f = random_function(&mut rng, &s, 1);
            let pair = ReducingPair::build(&s, &w, 2.0, &ReducerOptions::default()).unwrap();
            let mut fam = build_principal_family(&s, &pair, &f, 2.0).unwrap();
            let Some(idx) = fam.sets.iter().position(|p| p.generation >= 2 && p.kappa2 < s.depth()) else {
                continue;
            };
            tried += 1;
            // Claiming the stop one level late puts the exceedance inside the window.
            let set = &mut fam.sets[idx];
            set.kappa2 += 1;
            set.atoms = set.atoms.iter().flat_map(|&a| s.atom(set.kappa2 - 1, a).children.clone()).collect();
            let rep = check_properties(&fam, &s, &pair, &f).unwrap();
            if rep.b_measurable && !rep.c_bounds {
                caught += 1;
            }
        }
        assert!(tried > 5);
        assert_eq!(caught, tried);
    }

    #[test]
    fn family_json_export() {
        let s = FilteredSpace::dyadic(2, None).unwrap();
        let pair = unit_pair(&s, 1);
        let f = LeafFunction::scalar(vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let fam = build_principal_family(&s, &pair, &f, default_cgamma()).unwrap();
        let j = fam.to_json();
        assert_eq!(j["sets"][0]["kappa2"], 2);
        assert_eq!(j["sets"][0]["escape"], serde_json::json!([0, 1]));
    }

    fn random_instance(seed: u64) -> (FilteredSpace, MatrixWeight, LeafFunction, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = rng.gen_range(2..=7);
        let s = FilteredSpace::from_tree(&random_tree(&mut rng, depth, 24)).unwrap();
        let d = rng.gen_range(1..=2);
        let w = random_weight(&mut rng, d, s.num_leaves());
        let f = random_function(&mut rng, &s, d);
        let p = [1.5, 2.0, 3.0, 4.0][rng.gen_range(0..4)];
        (s, w, f, p)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gamma_is_adapted(seed in 0u64..100_000) {
            let (s, w, f, p) = random_instance(seed);
            let pair = ReducingPair::build(&s, &w, p, &ReducerOptions::default()).unwrap();
            for n in 0..s.depth() {
                let t = gamma_table(&s, &pair, &f, n).unwrap();
                for m in 0..=s.depth() {
                    let lvl = n.max(m);
                    for atom in s.atoms(lvl) {
                        let first = t.gamma(m, atom.leaves.start);
                        for l in atom.leaves.clone() {
                            prop_assert!((t.gamma(m, l) - first).abs() <= 1e-12 * first.max(1.0));
                            prop_assert!(t.gamma1[m][l] >= 0.0 && t.gamma2[m][l] >= 0.0);
                        }
                    }
                }
            }
        }

        #[test]
        fn whole_suite_holds(seed in 0u64..100_000) {
            let (s, w, f, p) = random_instance(seed);
            let pair = ReducingPair::build(&s, &w, p, &ReducerOptions::default()).unwrap();
            let rep = analyze(&s, &pair, &f, default_cgamma(), SquareConvention::ExcludeMean).unwrap();
            prop_assert!(rep.all_pass(), "{:?}", rep);
            prop_assert!(rep.properties.nesting && rep.properties.sibling_disjoint);
            let folded = analyze(&s, &pair, &f, default_cgamma(), SquareConvention::FoldMean).unwrap();
            prop_assert!(folded.domination.pass);
        }
    }
}
