//! Matrix weights, reducing matrices and `A_p` characteristics.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::ellipsoid::{norm_ball_reducing_capped, NormSampler, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::filtration::{read_numeric_csv, FilteredSpace};
use crate::linalg::{Mat, MAX_DIM};

/// Eigenvalues below this fraction of a leaf's largest eigenvalue are raised
/// to it on ingestion.
pub const CLIP_RATIO: f64 = 1e-10;

/// Hölder conjugate `p/(p−1)`.
#[inline]
pub fn conjugate(p: f64) -> f64 {
    p / (p - 1.0)
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if p > 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("exponent p = {p} must lie in (1, ∞)")))
    }
}

/// One symmetric positive-definite `d×d` matrix per leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixWeight {
    dim: usize,
    mats: Vec<Mat>,
}

impl MatrixWeight {
    /// Validates symmetry and positivity. Eigenvalues that are positive but
    /// below `CLIP_RATIO` times the leaf maximum (or within roundoff of zero)
    /// are clipped with a warning.
    pub fn new(mats: Vec<Mat>) -> Result<Self> {
        let dim = mats.first().map(Mat::dim).ok_or_else(|| Error::validation("weight has no leaves"))?;
        let mut out = Vec::with_capacity(mats.len());
        let mut clipped = 0usize;
        for (leaf, m) in mats.into_iter().enumerate() {
            if m.dim() != dim {
                return Err(Error::validation(format!("leaf {leaf}: dimension {} differs from {dim}", m.dim())));
            }
            if !m.is_finite() {
                return Err(Error::validation(format!("leaf {leaf}: non-finite entries")));
            }
            if m.asymmetry() > 1e-12 {
                return Err(Error::validation(format!("leaf {leaf}: matrix is not symmetric")));
            }
            let eig = m.symmetrized().sym_eigen();
            let top = eig.max_value();
            let floor = CLIP_RATIO * top;
            if !(top > 0.0) || eig.min_value() < -1e-8 * top {
                return Err(Error::validation(format!(
                    "leaf {leaf}: matrix is not positive definite (eigenvalues in [{:e}, {:e}])",
                    eig.min_value(),
                    top
                )));
            }
            if eig.min_value() < floor {
                clipped += 1;
                out.push(eig.map(|l| l.max(floor)));
            } else {
                out.push(m.symmetrized());
            }
        }
        if clipped > 0 {
            log::warn!("clipped small eigenvalues at {clipped} leaves (floor {CLIP_RATIO:e} × leaf maximum)");
        }
        Ok(MatrixWeight { dim, mats: out })
    }

    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| Mat::scalar(1, v)).collect())
    }

    pub fn identity(dim: usize, leaves: usize) -> Self {
        MatrixWeight { dim, mats: vec![Mat::identity(dim); leaves] }
    }

    pub fn constant(m: Mat, leaves: usize) -> Result<Self> {
        Self::new(vec![m; leaves])
    }

    /// Rows of `d²` entries, each a row-major matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.first().map(Vec::len).ok_or_else(|| Error::validation("weight has no leaves"))?;
        let dim = (len as f64).sqrt().round() as usize;
        if dim * dim != len || dim == 0 || dim > MAX_DIM {
            return Err(Error::validation(format!("{len} columns is not d² for a supported d ≤ {MAX_DIM}")));
        }
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::validation("ragged weight rows"));
        }
        Self::new(rows.iter().map(|r| Mat::from_row_major(dim, r)).collect())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_rows(&read_numeric_csv(path)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for m in &self.mats {
            w.write_record(m.to_row_major().iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_leaves(&self) -> usize {
        self.mats.len()
    }

    #[inline]
    pub fn at(&self, leaf: usize) -> &Mat {
        &self.mats[leaf]
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::validation("weights scale by positive constants only"));
        }
        Ok(MatrixWeight { dim: self.dim, mats: self.mats.iter().map(|m| m.scale(c)).collect() })
    }

    /// `W^alpha` leafwise.
    pub fn power(&self, alpha: f64) -> Vec<Mat> {
        self.mats.iter().map(|m| m.sym_eigen().map(|l| l.powf(alpha))).collect()
    }

    /// Scalar leaf values when `d = 1`.
    pub fn scalar_values(&self) -> Option<Vec<f64>> {
        (self.dim == 1).then(|| self.mats.iter().map(|m| m[(0, 0)]).collect())
    }

    pub fn check_space(&self, space: &FilteredSpace) -> Result<()> {
        if self.num_leaves() != space.num_leaves() {
            return Err(Error::validation(format!(
                "weight has {} leaves, space has {}",
                self.num_leaves(),
                space.num_leaves()
            )));
        }
        Ok(())
    }
}

/// `W^{1/p}` and `W^{−1/p}` at every leaf, from one eigendecomposition each.
#[derive(Clone, Debug)]
pub struct LeafRoots {
    pub pos: Vec<Mat>,
    pub neg: Vec<Mat>,
}

impl LeafRoots {
    pub fn new(w: &MatrixWeight, p: f64) -> Self {
        let (pos, neg) = w
            .mats
            .iter()
            .map(|m| {
                let e = m.sym_eigen();
                (e.map(|l| l.powf(1.0 / p)), e.map(|l| l.powf(-1.0 / p)))
            })
            .unzip();
        LeafRoots { pos, neg }
    }
}

/// The dual weight `V = W^{−p′/p}`.
pub fn dual_weight(w: &MatrixWeight, p: f64) -> Result<MatrixWeight> {
    check_p(p)?;
    let e = -conjugate(p) / p;
    Ok(MatrixWeight { dim: w.dim, mats: w.power(e) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReducerMode {
    /// Löwner-ellipsoid reducers (exact scalar formulas when `d = 1`).
    #[default]
    Ellipsoid,
    /// `(ℰ_n W)^{1/2}` and `(ℰ_n W^{−1})^{1/2}`; `p = 2` only.
    ExactP2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReducerOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub mode: ReducerMode,
}

impl Default for ReducerOptions {
    fn default() -> Self {
        ReducerOptions { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, mode: ReducerMode::Ellipsoid }
    }
}

impl ReducerOptions {
    pub fn with_tol(tol: f64) -> Self {
        ReducerOptions { tol, ..Self::default() }
    }
}

/// Reducers of one atom.
#[derive(Clone, Copy, Debug)]
pub struct AtomReducers {
    pub tilde: Mat,
    pub hat: Mat,
    pub tilde_inv: Mat,
    pub hat_inv: Mat,
}

/// `W̃_n` and `Ŵ_n` for every level `0..=D` and every atom.
#[derive(Clone, Debug)]
pub struct ReducingPair {
    p: f64,
    dim: usize,
    tol: f64,
    mode: ReducerMode,
    roots: LeafRoots,
    levels: Vec<Vec<AtomReducers>>,
}

/// Scalar reducers `(ℰ_n w)^{1/p}` and `(ℰ_n w^{−p′/p})^{1/p′}` on the level-`n` atoms.
pub fn scalar_reducers(space: &FilteredSpace, w: &[f64], p: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let q = conjugate(p);
    let dual: Vec<f64> = w.iter().map(|&v| v.powf(-q / p)).collect();
    let tilde = space.cond_expect_scalar(w, n).into_iter().map(|v| v.powf(1.0 / p)).collect();
    let hat = space.cond_expect_scalar(&dual, n).into_iter().map(|v| v.powf(1.0 / q)).collect();
    (tilde, hat)
}

/// The norm `e ↦ (ℰ_n ‖M e‖^q)^{1/q}` on one atom, `M` ranging over `mats`.
pub fn averaged_norm<'a>(space: &'a FilteredSpace, mats: &'a [Mat], q: f64, n: usize, atom: usize) -> NormSampler<'a> {
    let a = space.atom(n, atom);
    let range = a.leaves.clone();
    let total = a.prob;
    let dim = mats[range.start].dim();
    NormSampler::new(dim, move |e: &[f64]| {
        let mut s = 0.0;
        for leaf in range.clone() {
            let v = mats[leaf].apply_norm(e);
            s += space.leaf_prob(leaf) * if q == 1.0 { v } else { v.powf(q) };
        }
        let s = s / total;
        if q == 1.0 {
            s
        } else {
            s.powf(1.0 / q)
        }
    })
}

fn reduce_norm(space: &FilteredSpace, mats: &[Mat], q: f64, n: usize, atom: usize, opts: &ReducerOptions) -> Result<Mat> {
    let rho = averaged_norm(space, mats, q, n, atom);
    Ok(norm_ball_reducing_capped(&rho, opts.tol, opts.max_iter)?.matrix)
}

fn average_mats(space: &FilteredSpace, mats: &[Mat], n: usize, atom: usize) -> Mat {
    let a = space.atom(n, atom);
    let mut s = Mat::zeros(mats[0].dim());
    for leaf in a.leaves.clone() {
        s.add_scaled(&mats[leaf], space.leaf_prob(leaf));
    }
    s.scale(1.0 / a.prob)
}

fn finish(tilde: Mat, hat: Mat) -> Result<AtomReducers> {
    Ok(AtomReducers { tilde, hat, tilde_inv: tilde.spd_inverse()?, hat_inv: hat.spd_inverse()? })
}

/// Reducers of every level-`n` atom.
pub fn reduce_pair(
    space: &FilteredSpace,
    w: &MatrixWeight,
    p: f64,
    n: usize,
    opts: &ReducerOptions,
) -> Result<Vec<AtomReducers>> {
    check_p(p)?;
    w.check_space(space)?;
    if n > space.depth() {
        return Err(Error::validation(format!("level {n} exceeds depth {}", space.depth())));
    }
    let roots = LeafRoots::new(w, p);
    reduce_level(space, w, p, n, &roots, opts, None)
}

fn reduce_level(
    space: &FilteredSpace,
    w: &MatrixWeight,
    p: f64,
    n: usize,
    roots: &LeafRoots,
    opts: &ReducerOptions,
    parent: Option<&[AtomReducers]>,
) -> Result<Vec<AtomReducers>> {
    let q = conjugate(p);
    let atoms = space.atoms(n);
    if let Some(ws) = w.scalar_values() {
        if opts.mode == ReducerMode::Ellipsoid {
            let (t, h) = scalar_reducers(space, &ws, p, n);
            return t.into_iter().zip(h).map(|(t, h)| finish(Mat::scalar(1, t), Mat::scalar(1, h))).collect();
        }
    }
    let inverse = match opts.mode {
        ReducerMode::ExactP2 => w.power(-1.0),
        ReducerMode::Ellipsoid => Vec::new(),
    };
    let one = |idx: usize| -> Result<AtomReducers> {
        let atom = &atoms[idx];
        if let (Some(prev), Some(par)) = (parent, atom.parent) {
            if space.atom(n - 1, par).leaves == atom.leaves {
                return Ok(prev[par]);
            }
        }
        match opts.mode {
            ReducerMode::Ellipsoid => {
                let tilde = reduce_norm(space, &roots.pos, p, n, idx, opts)?;
                let hat = reduce_norm(space, &roots.neg, q, n, idx, opts)?;
                finish(tilde, hat)
            }
            ReducerMode::ExactP2 => {
                let tilde = average_mats(space, w.mats(), n, idx).spd_power(0.5)?;
                let hat = average_mats(space, &inverse, n, idx).spd_power(0.5)?;
                finish(tilde, hat)
            }
        }
    };
    if atoms.len() >= 8 && w.dim() > 1 {
        (0..atoms.len()).into_par_iter().map(one).collect()
    } else {
        (0..atoms.len()).map(one).collect()
    }
}

impl ReducingPair {
    pub fn build(space: &FilteredSpace, w: &MatrixWeight, p: f64, opts: &ReducerOptions) -> Result<Self> {
        check_p(p)?;
        w.check_space(space)?;
        if opts.mode == ReducerMode::ExactP2 && p != 2.0 {
            return Err(Error::validation("exact reducer mode requires p = 2"));
        }
        let roots = LeafRoots::new(w, p);
        let mut levels: Vec<Vec<AtomReducers>> = Vec::with_capacity(space.depth() + 1);
        for n in 0..=space.depth() {
            let lvl = reduce_level(space, w, p, n, &roots, opts, levels.last().map(Vec::as_slice))?;
            levels.push(lvl);
        }
        Ok(ReducingPair { p, dim: w.dim(), tol: opts.tol, mode: opts.mode, roots, levels })
    }

    #[inline]
    pub fn p(&self) -> f64 {
        self.p
    }

    #[inline]
    pub fn p_prime(&self) -> f64 {
        conjugate(self.p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn mode(&self) -> ReducerMode {
        self.mode
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    /// `W^{1/p}` and `W^{−1/p}` per leaf.
    pub fn roots(&self) -> &LeafRoots {
        &self.roots
    }

    #[inline]
    pub fn atom(&self, n: usize, atom: usize) -> &AtomReducers {
        &self.levels[n][atom]
    }

    #[inline]
    pub fn at_leaf(&self, space: &FilteredSpace, n: usize, leaf: usize) -> &AtomReducers {
        &self.levels[n][space.atom_of(n, leaf)]
    }

    pub fn level(&self, n: usize) -> &[AtomReducers] {
        &self.levels[n]
    }

    /// Reducers of the dual weight `V = W^{−p′/p}` at exponent `p′`:
    /// `V̂_n = W̃_n` and `Ṽ_n = Ŵ_n`.
    pub fn exchanged(&self) -> ReducingPair {
        ReducingPair {
            p: self.p_prime(),
            dim: self.dim,
            tol: self.tol,
            mode: self.mode,
            roots: LeafRoots { pos: self.roots.neg.clone(), neg: self.roots.pos.clone() },
            levels: self
                .levels
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|r| AtomReducers { tilde: r.hat, hat: r.tilde, tilde_inv: r.hat_inv, hat_inv: r.tilde_inv })
                        .collect()
                })
                .collect(),
        }
    }

    /// The norms whose reducers are `W̃_n` and `Ŵ_n` on one atom.
    pub fn norms<'a>(&'a self, space: &'a FilteredSpace, n: usize, atom: usize) -> (NormSampler<'a>, NormSampler<'a>) {
        (
            averaged_norm(space, &self.roots.pos, self.p, n, atom),
            averaged_norm(space, &self.roots.neg, self.p_prime(), n, atom),
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct AtomJson {
            level: usize,
            atom: usize,
            tilde: Vec<f64>,
            hat: Vec<f64>,
        }
        let atoms: Vec<AtomJson> = self
            .levels
            .iter()
            .enumerate()
            .flat_map(|(n, l)| {
                l.iter().enumerate().map(move |(a, r)| AtomJson {
                    level: n,
                    atom: a,
                    tilde: r.tilde.to_row_major(),
                    hat: r.hat.to_row_major(),
                })
            })
            .collect();
        serde_json::json!({ "p": self.p, "dim": self.dim, "tol": self.tol, "mode": self.mode, "atoms": atoms })
    }
}

/// `max_{n, atoms} ‖W̃_n Ŵ_n‖^p` over levels `0..=D`.
pub fn ap_characteristic(pair: &ReducingPair) -> f64 {
    let p = pair.p();
    pair.levels
        .iter()
        .flatten()
        .map(|r| r.tilde.matmul(&r.hat).spectral_norm().powf(p))
        .fold(0.0, f64::max)
}

/// `[W]_{A_1} = max_n max_leaf ‖W̃_n(atom ∋ leaf) W(leaf)^{−1}‖`, where `W̃_n`
/// reduces the norm `e ↦ ℰ_n‖We‖`.
pub fn a1_characteristic(space: &FilteredSpace, w: &MatrixWeight, opts: &ReducerOptions) -> Result<f64> {
    w.check_space(space)?;
    let inv = w.power(-1.0);
    let scalar = w.scalar_values();
    let mut best: f64 = 0.0;
    for n in 0..=space.depth() {
        let tildes: Vec<Mat> = match &scalar {
            Some(ws) => space.cond_expect_scalar(ws, n).into_iter().map(|v| Mat::scalar(1, v)).collect(),
            None => (0..space.num_atoms(n))
                .map(|a| reduce_norm(space, w.mats(), 1.0, n, a, opts))
                .collect::<Result<_>>()?,
        };
        for leaf in 0..space.num_leaves() {
            let t = &tildes[space.atom_of(n, leaf)];
            best = best.max(t.matmul(&inv[leaf]).spectral_norm());
        }
    }
    Ok(best)
}

/// Equivalent forms of the characteristic.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ApEquivalents {
    pub ap: f64,
    /// `sup_n ℰ_n ‖Ŵ_n W^{1/p}‖^p`.
    pub q1: f64,
    /// `(sup_n ℰ_n ‖W̃_n W^{−1/p}‖^{p′})^{p/p′}`.
    pub q2: f64,
    /// Ratios `q_i/[W]_{A_p}` are asserted to lie in `[1/c, c]`.
    pub c: f64,
}

impl ApEquivalents {
    pub fn within(&self) -> bool {
        [self.q1 / self.ap, self.q2 / self.ap].iter().all(|r| *r >= 1.0 / self.c && *r <= self.c)
    }
}

/// `16·d^{max(p,p′)/2}`.
pub fn equivalence_constant(p: f64, d: usize) -> f64 {
    16.0 * (d as f64).powf(p.max(conjugate(p)) / 2.0)
}

pub fn ap_equivalents(space: &FilteredSpace, pair: &ReducingPair) -> ApEquivalents {
    let p = pair.p();
    let q = pair.p_prime();
    let roots = pair.roots();
    let mut q1: f64 = 0.0;
    let mut q2: f64 = 0.0;
    for n in 0..=space.depth() {
        for (idx, atom) in space.atoms(n).iter().enumerate() {
            let r = pair.atom(n, idx);
            let (mut s1, mut s2) = (0.0, 0.0);
            for leaf in atom.leaves.clone() {
                let pr = space.leaf_prob(leaf);
                s1 += pr * r.hat.matmul(&roots.pos[leaf]).spectral_norm().powf(p);
                s2 += pr * r.tilde.matmul(&roots.neg[leaf]).spectral_norm().powf(q);
            }
            q1 = q1.max(s1 / atom.prob);
            q2 = q2.max(s2 / atom.prob);
        }
    }
    ApEquivalents {
        ap: ap_characteristic(pair),
        q1,
        q2: q2.powf(p / q),
        c: equivalence_constant(p, pair.dim()),
    }
}

/// Maxima of the conditional averages bounded by the reducer construction.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReducingBounds {
    /// `max ℰ_n ‖W^{1/p} W̃_n^{−1}‖^p`.
    pub tilde_avg: f64,
    /// `max ℰ_n ‖W^{−1/p} Ŵ_n^{−1}‖^{p′}`.
    pub hat_avg: f64,
    pub tilde_bound: f64,
    pub hat_bound: f64,
}

impl ReducingBounds {
    pub fn pass(&self) -> bool {
        self.tilde_avg <= self.tilde_bound && self.hat_avg <= self.hat_bound
    }
}

/// Bound on `max ℰ_n ‖W^{1/p} A^{−1}‖^p` for any `A` with `|Ae| ≤ ρ(e) ≤ (1+tol)√d |Ae|`.
///
/// Splitting `‖M‖² ≤ Σ_i |M e_i|²` over a basis gives `d^{p/2} d^{max(p/2,1)} (1+tol)^p`.
pub fn reducing_constant(p: f64, d: usize, tol: f64) -> f64 {
    let d = d as f64;
    d.powf(p / 2.0) * d.powf((p / 2.0).max(1.0)) * (1.0 + tol).powf(p)
}

pub fn verify_reducing_bounds(space: &FilteredSpace, pair: &ReducingPair) -> ReducingBounds {
    let p = pair.p();
    let q = pair.p_prime();
    let roots = pair.roots();
    let (mut t, mut h): (f64, f64) = (0.0, 0.0);
    for n in 0..=space.depth() {
        for (idx, atom) in space.atoms(n).iter().enumerate() {
            let r = pair.atom(n, idx);
            let (mut st, mut sh) = (0.0, 0.0);
            for leaf in atom.leaves.clone() {
                let pr = space.leaf_prob(leaf);
                st += pr * roots.pos[leaf].matmul(&r.tilde_inv).spectral_norm().powf(p);
                sh += pr * roots.neg[leaf].matmul(&r.hat_inv).spectral_norm().powf(q);
            }
            t = t.max(st / atom.prob);
            h = h.max(sh / atom.prob);
        }
    }
    let slack = if pair.dim() == 1 { 1e-10 } else { 0.0 };
    ReducingBounds {
        tilde_avg: t,
        hat_avg: h,
        tilde_bound: if pair.dim() == 1 { 1.0 } else { reducing_constant(p, pair.dim(), pair.tol()) } + slack,
        hat_bound: if pair.dim() == 1 { 1.0 } else { reducing_constant(q, pair.dim(), pair.tol()) } + slack,
    }
}
