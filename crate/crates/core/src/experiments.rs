//! Extremal weight families, operator-norm estimators and log-log exponent
//! fits.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::gaussian;
use crate::error::{Error, Result};
use crate::filtration::{lp_of_scalars, FilteredSpace, LeafFunction, Martingale};
use crate::linalg::{norm2, Mat};
use crate::operators::{weighted_square_from_roots, SquareConvention};
use crate::principal::{default_cgamma, sparse_domination_check};
use crate::weights::{ap_characteristic, check_p, LeafRoots, MatrixWeight, ReducerOptions, ReducingPair};

/// Relative change of the Rayleigh quotient that stops power iteration.
pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 10_000;
const ASCENT_MAX_ITER: usize = 3_000;

/// `max{1/2, 1/(p−1)}`, the scalar exponent.
pub fn scalar_exponent(p: f64) -> f64 {
    0.5f64.max(1.0 / (p - 1.0))
}

/// `max{1/2 + 1/(p(p−1)), 1/(p−1)}`, the matrix exponent.
pub fn matrix_exponent(p: f64) -> f64 {
    (0.5 + 1.0 / (p * (p - 1.0))).max(1.0 / (p - 1.0))
}

fn midpoints(depth: usize) -> Vec<f64> {
    let n = 1usize << depth;
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

fn check_family_params(depth: usize, alpha: f64, eps: f64) -> Result<()> {
    if depth == 0 || depth > 20 {
        return Err(Error::validation(format!("depth {depth} outside 1..=20")));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::validation(format!("eps = {eps} must be positive")));
    }
    if !(alpha > -1.0) || !alpha.is_finite() {
        return Err(Error::validation(format!("alpha = {alpha} must exceed −1")));
    }
    Ok(())
}

/// `w = (x + ε)^α` at the dyadic midpoints `x` of `[0, 1)`, scaled to mean 1.
pub fn gen_power_weight(depth: usize, alpha: f64, eps: f64) -> Result<(FilteredSpace, MatrixWeight)> {
    check_family_params(depth, alpha, eps)?;
    let space = FilteredSpace::dyadic(depth, None)?;
    let mut w: Vec<f64> = midpoints(depth).into_iter().map(|x| (x + eps).powf(alpha)).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter_mut().for_each(|v| *v /= mean);
    if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::validation("power weight is not positive and finite"));
    }
    Ok((space, MatrixWeight::scalar(&w)?))
}

/// Rotation by `θ` in the `(0,1)` plane, followed for `d = 3` by `θ/2` in
/// the `(1,2)` plane.
fn leaf_rotation(d: usize, theta: f64) -> Mat {
    let plane = |i: usize, j: usize, t: f64| {
        let mut r = Mat::identity(d);
        r[(i, i)] = t.cos();
        r[(j, j)] = t.cos();
        r[(i, j)] = -t.sin();
        r[(j, i)] = t.sin();
        r
    };
    let r = plane(0, 1, theta);
    if d == 3 {
        r.matmul(&plane(1, 2, theta / 2.0))
    } else {
        r
    }
}

/// `W = R diag(t^α, t^{−α/(d−1)}, …) Rᵀ` with `t = x + ε` and `R` turning by
/// `πx/2`. The determinant is identically 1.
pub fn gen_rotating_matrix_weight(depth: usize, d: usize, alpha: f64, eps: f64) -> Result<(FilteredSpace, MatrixWeight)> {
    if !(2..=3).contains(&d) {
        return Err(Error::validation(format!("rotating family needs d ∈ {{2, 3}}, got {d}")));
    }
    check_family_params(depth, alpha, eps)?;
    let space = FilteredSpace::dyadic(depth, None)?;
    let beta = 1.0 / (d as f64 - 1.0);
    let mats = midpoints(depth)
        .into_iter()
        .map(|x| {
            let t = x + eps;
            let mut spectrum = vec![t.powf(-alpha * beta); d];
            spectrum[0] = t.powf(alpha);
            let r = leaf_rotation(d, PI * x / 2.0);
            r.matmul(&Mat::diag(&spectrum)).matmul(&r.transpose()).symmetrized()
        })
        .collect();
    Ok((space, MatrixWeight::new(mats)?))
}

/// A ratio found by an estimator, with the function attaining it.
#[derive(Clone, Debug)]
pub struct OpnormEstimate {
    pub ratio: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub witness: LeafFunction,
}

/// `ℰ_k v` expanded back to leaves.
fn project(space: &FilteredSpace, v: &[f64], k: usize) -> Vec<f64> {
    let e = space.cond_expect_scalar(v, k);
    (0..space.num_leaves()).map(|l| e[space.atom_of(k, l)]).collect()
}

/// `d_k v` on leaves, for `k = 1..=D`.
fn differences(space: &FilteredSpace, v: &[f64]) -> Vec<Vec<f64>> {
    let levels: Vec<Vec<f64>> = (0..=space.depth()).map(|k| project(space, v, k)).collect();
    levels.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect()
}

/// `‖S f‖_{L²_w} / ‖f‖_{L²_w}` for scalar `w` and `f`.
pub fn p2_ratio(space: &FilteredSpace, w: &[f64], f: &[f64]) -> f64 {
    let probs = space.leaf_probs();
    let num: f64 = differences(space, f)
        .iter()
        .map(|d| d.iter().zip(w).zip(probs).map(|((x, wv), pr)| pr * wv * x * x).sum::<f64>())
        .sum();
    let den: f64 = f.iter().zip(w).zip(probs).map(|((x, wv), pr)| pr * wv * x * x).sum();
    if den <= 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// `sup_f ‖S f‖_{L²_w} / ‖f‖_{L²_w}` for a scalar weight, by power iteration
/// on `B^{−1/2} Q B^{−1/2}` where `Q(f) = ‖S f‖²_{L²_w}` and
/// `B = diag(P·w)`.
pub fn estimate_opnorm_p2(space: &FilteredSpace, w: &MatrixWeight) -> Result<OpnormEstimate> {
    let wv = w.scalar_values().ok_or_else(|| Error::validation("the p = 2 estimator needs a scalar weight"))?;
    w.check_space(space)?;
    let probs = space.leaf_probs();
    let sqrt_b: Vec<f64> = wv.iter().zip(probs).map(|(a, b)| (a * b).sqrt()).collect();
    let depth = space.depth();
    let apply = |h: &[f64]| -> Vec<f64> {
        let f: Vec<f64> = h.iter().zip(&sqrt_b).map(|(a, b)| a / b).collect();
        let mut q = vec![0.0; f.len()];
        for (k, d) in (1..=depth).zip(differences(space, &f)) {
            let u: Vec<f64> = d.iter().zip(&wv).map(|(a, b)| a * b).collect();
            let (hi, lo) = (project(space, &u, k), project(space, &u, k - 1));
            for ((o, a), b) in q.iter_mut().zip(hi).zip(lo) {
                *o += a - b;
            }
        }
        q.iter().zip(probs).zip(&sqrt_b).map(|((a, pr), b)| a * pr / b).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut h: Vec<f64> = (0..space.num_leaves()).map(|_| gaussian(&mut rng)).collect();
    normalize(&mut h);
    let mut lambda = 0.0;
    let mut calm = 0;
    for it in 1..=POWER_MAX_ITER {
        let mh = apply(&h);
        let next: f64 = mh.iter().zip(&h).map(|(a, b)| a * b).sum();
        h = mh;
        if normalize(&mut h) == 0.0 {
            return Err(Error::EstimatorNonConvergence { iterations: it, rayleigh: 0.0 });
        }
        calm = if (next - lambda).abs() <= POWER_TOL * next.abs() { calm + 1 } else { 0 };
        lambda = next;
        if calm >= 2 {
            let f: Vec<f64> = h.iter().zip(&sqrt_b).map(|(a, b)| a / b).collect();
            return Ok(OpnormEstimate {
                ratio: lambda.max(0.0).sqrt(),
                iterations: it,
                restarts: 1,
                witness: LeafFunction::scalar(f)?,
            });
        }
    }
    Err(Error::EstimatorNonConvergence { iterations: POWER_MAX_ITER, rayleigh: lambda })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `‖S_W f‖_{L_p} / ‖f‖_{L_p}` together with the gradient of its logarithm
/// in `f`.
struct RatioObjective<'a> {
    space: &'a FilteredSpace,
    roots: LeafRoots,
    /// `W^{2/p}` per leaf.
    pos_sq: Vec<Mat>,
    p: f64,
}

impl<'a> RatioObjective<'a> {
    fn new(space: &'a FilteredSpace, w: &MatrixWeight, p: f64) -> Self {
        let roots = LeafRoots::new(w, p);
        let pos_sq = roots.pos.iter().map(|m| m.matmul(m)).collect();
        RatioObjective { space, roots, pos_sq, p }
    }

    fn ratio(&self, f: &LeafFunction) -> f64 {
        let s = weighted_square_from_roots(self.space, &self.roots, f, SquareConvention::ExcludeMean);
        let den = lp_of_scalars(self.space, &f.norms(), self.p);
        if den <= 0.0 {
            0.0
        } else {
            lp_of_scalars(self.space, s.values(), self.p) / den
        }
    }

    fn log_ratio(&self, f: &LeafFunction) -> f64 {
        self.ratio(f).ln()
    }

    fn gradient(&self, f: &LeafFunction) -> LeafFunction {
        let space = self.space;
        let (p, d, n) = (self.p, f.dim(), f.num_leaves());
        let probs = space.leaf_probs();
        let mut g = LeafFunction::zeros(d, n);
        for l in 0..n {
            self.roots.neg[l].apply_into(f.at(l), g.at_mut(l));
        }
        let mart = Martingale::new(space, &g).expect("validated input");
        let s: Vec<f64> = (0..n)
            .map(|l| {
                (1..=space.depth())
                    .map(|k| self.roots.pos[l].apply_norm(mart.difference_at(space, k, l)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let big_f: f64 = s.iter().zip(probs).map(|(v, pr)| pr * v.powf(p)).sum();
        let big_g: f64 = (0..n).map(|l| probs[l] * norm2(f.at(l)).powf(p)).sum();
        let weight = |v: f64| if v > 1e-300 { p * v.powf(p - 2.0) } else { 0.0 };

        let mut grad_g = LeafFunction::zeros(d, n);
        let mut z = LeafFunction::zeros(d, n);
        for k in 1..=space.depth() {
            for l in 0..n {
                let c = weight(s[l]);
                self.pos_sq[l].apply_into(mart.difference_at(space, k, l), z.at_mut(l));
                z.at_mut(l).iter_mut().for_each(|v| *v *= c);
            }
            let hi = space.cond_expect(&z, k).expect("valid level");
            let lo = space.cond_expect(&z, k - 1).expect("valid level");
            for l in 0..n {
                let (a, b) = (hi.at_leaf(space, l), lo.at_leaf(space, l));
                for ((o, x), y) in grad_g.at_mut(l).iter_mut().zip(a).zip(b) {
                    *o += probs[l] * (x - y);
                }
            }
        }
        let mut out = LeafFunction::zeros(d, n);
        let mut tmp = vec![0.0; d];
        for l in 0..n {
            self.roots.neg[l].apply_into(grad_g.at(l), &mut tmp);
            let c = weight(norm2(f.at(l))) * probs[l] / (p * big_g);
            let o = out.at_mut(l);
            for i in 0..d {
                let from_num = if big_f > 0.0 { tmp[i] / (p * big_f) } else { 0.0 };
                o[i] = from_num - c * f.at(l)[i];
            }
        }
        out
    }
}

fn axpy(f: &LeafFunction, t: f64, dir: &LeafFunction) -> LeafFunction {
    let values = f.values().iter().zip(dir.values()).map(|(a, b)| a + t * b).collect();
    LeafFunction::new(f.dim(), values).expect("finite step")
}

fn lp_normalized(space: &FilteredSpace, f: LeafFunction, p: f64) -> LeafFunction {
    let n = lp_of_scalars(space, &f.norms(), p);
    if n > 0.0 {
        f.scaled(1.0 / n)
    } else {
        f
    }
}

/// Lower bound on `sup_f ‖S_W f‖_{L_p} / ‖f‖_{L_p}` by gradient ascent of
/// the log-ratio on the unit `L_p` sphere. Each step's direction is checked
/// against a central finite difference before it is taken; the best of
/// `restarts` seeded starts is returned.
pub fn estimate_opnorm_general(
    space: &FilteredSpace,
    w: &MatrixWeight,
    p: f64,
    restarts: usize,
    seed: u64,
) -> Result<OpnormEstimate> {
    check_p(p)?;
    w.check_space(space)?;
    if restarts == 0 {
        return Err(Error::validation("at least one restart is required"));
    }
    let obj = RatioObjective::new(space, w, p);
    let d = w.dim();
    let n = space.num_leaves();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<OpnormEstimate> = None;
    let mut total_iter = 0;
    for _ in 0..restarts {
        let start = LeafFunction::new(d, (0..n * d).map(|_| gaussian(&mut rng)).collect())?;
        let mut f = lp_normalized(space, start, p);
        let mut val = obj.log_ratio(&f);
        let mut step: f64 = 0.1;
        for _ in 0..ASCENT_MAX_ITER {
            total_iter += 1;
            let grad = obj.gradient(&f);
            let gnorm = norm2(grad.values());
            if !(gnorm > 1e-13) {
                break;
            }
            let dir = grad.scaled(1.0 / gnorm);
            let fmax = f.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let h = 1e-6 * fmax.max(1e-12);
            let fd = (obj.log_ratio(&axpy(&f, h, &dir)) - obj.log_ratio(&axpy(&f, -h, &dir))) / (2.0 * h);
            if !(fd > 0.0) {
                break;
            }
            let scale = norm2(f.values());
            let mut t = (2.0 * step).min(1.0);
            let mut moved = false;
            for _ in 0..50 {
                let cand = lp_normalized(space, axpy(&f, t * scale, &dir), p);
                let v = obj.log_ratio(&cand);
                if v > val {
                    let gain = v - val;
                    f = cand;
                    val = v;
                    step = t;
                    moved = gain > 1e-13;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let ratio = val.exp();
        if best.as_ref().map_or(true, |b| ratio > b.ratio) {
            best = Some(OpnormEstimate { ratio, iterations: 0, restarts, witness: f });
        }
    }
    let mut best = best.expect("at least one restart ran");
    best.iterations = total_iter;
    Ok(best)
}

/// `‖S_W f‖_{L_p} / ‖f‖_{L_p}` for a given `f`.
pub fn opnorm_ratio(space: &FilteredSpace, w: &MatrixWeight, p: f64, f: &LeafFunction) -> Result<f64> {
    check_p(p)?;
    w.check_space(space)?;
    space.check_function(f)?;
    if f.dim() != w.dim() {
        return Err(Error::validation("function and weight dimensions differ"));
    }
    Ok(RatioObjective::new(space, w, p).ratio(f))
}

/// Least-squares line through `(log x, log y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; 0 when the fit is exact or `n = 2`.
    pub stderr: f64,
    pub n: usize,
}

pub fn exponent_fit(points: &[(f64, f64)]) -> Result<ExponentFit> {
    if points.len() < 3 {
        return Err(Error::validation(format!("exponent fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !(*x > 0.0 && *y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(Error::validation("exponent fit needs positive finite coordinates"));
    }
    let xs: Vec<f64> = points.iter().map(|(x, _)| x.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 1e-20 * n * (1.0 + mx * mx) {
        return Err(Error::DegenerateFit("log-characteristics have no spread".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(ExponentFit { slope, intercept, stderr: (ssr / (n - 2.0) / sxx).sqrt(), n: points.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Scalar `(x + ε)^α`.
    #[default]
    Power,
    /// Rotating `d×d` weight with determinant 1.
    Rotating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Power iteration when `d = 1` and `p = 2`, ascent otherwise.
    #[default]
    Auto,
    PowerIteration,
    Ascent,
}

/// One sweep: a family, an exponent and a parameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub family: Family,
    pub p: f64,
    /// Matrix dimension of the rotating family; ignored for `power`.
    pub d: usize,
    pub depths: Vec<usize>,
    pub alphas: Vec<f64>,
    pub eps: Vec<f64>,
    pub estimator: Estimator,
    pub restarts: usize,
    pub seed: u64,
    pub tol: f64,
    pub cgamma: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            family: Family::Power,
            p: 2.0,
            d: 2,
            depths: vec![6, 8, 10],
            alphas: vec![0.5, 0.9, 2.0],
            eps: vec![1.0, 0.3, 0.1, 0.03, 0.01],
            estimator: Estimator::Auto,
            restarts: 4,
            seed: 0,
            tol: 1e-2,
            cgamma: default_cgamma(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if self.depths.is_empty() || self.alphas.is_empty() || self.eps.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if self.family == Family::Rotating && !(2..=3).contains(&self.d) {
            return Err(Error::Config(format!("rotating family needs d ∈ {{2, 3}}, got {}", self.d)));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("reducer tolerance {} outside (0, 1)", self.tol)));
        }
        if !(self.cgamma >= 0.0) {
            return Err(Error::Config("C_γ must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.family {
            Family::Power => 1,
            Family::Rotating => self.d,
        }
    }

    /// `max{1/2, 1/(p−1)}` for scalar families, the matrix exponent otherwise.
    pub fn target_exponent(&self) -> f64 {
        match self.family {
            Family::Power => scalar_exponent(self.p),
            Family::Rotating => matrix_exponent(self.p),
        }
    }

    /// Grid points in output order: depth, then α, then ε.
    pub fn points(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &depth in &self.depths {
            for &alpha in &self.alphas {
                for &eps in &self.eps {
                    out.push((depth, alpha, eps));
                }
            }
        }
        out
    }

    fn generate(&self, depth: usize, alpha: f64, eps: f64) -> Result<(FilteredSpace, MatrixWeight)> {
        match self.family {
            Family::Power => gen_power_weight(depth, alpha, eps),
            Family::Rotating => gen_rotating_matrix_weight(depth, self.d, alpha, eps),
        }
    }
}

/// Power family at `p = 2` used for the exponent-window acceptance probe:
/// depths 6–10, exponents on both sides of 1 and shrinking offsets.
pub fn acceptance_power_config(seed: u64) -> SweepConfig {
    SweepConfig {
        family: Family::Power,
        p: 2.0,
        depths: vec![6, 8, 10],
        alphas: vec![0.5, 0.99, 2.0, 3.0],
        eps: vec![1.0, 0.3, 0.1, 0.03, 0.01],
        estimator: Estimator::PowerIteration,
        seed,
        ..SweepConfig::default()
    }
}

/// Lowest and highest acceptable slopes of the `p = 2` probe, and the range
/// of characteristics it fits over.
pub const ACCEPTANCE_SLOPE: (f64, f64) = (0.75, 1.05);
pub const ACCEPTANCE_AP_RANGE: (f64, f64) = (1.0, 1e3);
pub const ACCEPTANCE_MIN_POINTS: usize = 12;

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub id: usize,
    pub family: Family,
    pub seed: u64,
    pub p: f64,
    pub d: usize,
    pub depth: usize,
    pub alpha: f64,
    pub eps: f64,
    pub ap_char: Option<f64>,
    pub ratio: Option<f64>,
    pub iterations: usize,
    pub restarts: usize,
    /// `‖S_W f‖_p / ‖f‖_p` recomputed from the stored witness.
    pub witness_ratio: Option<f64>,
    /// `max S_W f / T_{W,2} f` on the witness.
    pub witness_domination: Option<f64>,
    /// `ok`, or the error that stopped this point.
    pub status: String,
}

impl SweepRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

const CSV_HEADER: [&str; 15] = [
    "id",
    "family",
    "seed",
    "p",
    "d",
    "depth",
    "alpha",
    "eps",
    "ap_char",
    "ratio",
    "iterations",
    "restarts",
    "witness_ratio",
    "witness_domination",
    "status",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Power => "power",
        Family::Rotating => "rotating",
    }
}

/// Sweep records as CSV in a fixed column order.
pub fn records_to_csv(records: &[SweepRecord]) -> String {
    let mut out = String::new();
    out.push_str(&CSV_HEADER.join(","));
    out.push('\n');
    for r in records {
        let status = r.status.replace([',', '\n', '"'], " ");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            family_name(r.family),
            r.seed,
            r.p,
            r.d,
            r.depth,
            r.alpha,
            r.eps,
            fmt_opt(r.ap_char),
            fmt_opt(r.ratio),
            r.iterations,
            r.restarts,
            fmt_opt(r.witness_ratio),
            fmt_opt(r.witness_domination),
            status
        );
    }
    out
}

/// Reads records written by [`records_to_csv`].
pub fn records_from_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::validation(format!("unexpected sweep CSV header: {}", header.join(","))));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| Error::validation(format!("bad {what} value {s:?}")))
    };
    let int = |s: &str, what: &str| -> Result<usize> {
        s.trim().parse::<usize>().map_err(|_| Error::validation(format!("bad {what} value {s:?}")))
    };
    let opt = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.trim().is_empty() {
            Ok(None)
        } else {
            num(s, what).map(Some)
        }
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let family = match &row[1] {
            "power" => Family::Power,
            "rotating" => Family::Rotating,
            other => return Err(Error::validation(format!("unknown family {other:?}"))),
        };
        out.push(SweepRecord {
            id: int(&row[0], "id")?,
            family,
            seed: row[2].trim().parse().map_err(|_| Error::validation("bad seed"))?,
            p: num(&row[3], "p")?,
            d: int(&row[4], "d")?,
            depth: int(&row[5], "depth")?,
            alpha: num(&row[6], "alpha")?,
            eps: num(&row[7], "eps")?,
            ap_char: opt(&row[8], "ap_char")?,
            ratio: opt(&row[9], "ratio")?,
            iterations: int(&row[10], "iterations")?,
            restarts: int(&row[11], "restarts")?,
            witness_ratio: opt(&row[12], "witness_ratio")?,
            witness_domination: opt(&row[13], "witness_domination")?,
            status: row[14].to_string(),
        });
    }
    Ok(out)
}

/// `(ap_char, ratio)` of the successful records.
pub fn fit_points(records: &[SweepRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.ok())
        .filter_map(|r| Some((r.ap_char?, r.ratio?)))
        .filter(|(a, r)| *a > 0.0 && *r > 0.0)
        .collect()
}

/// [`fit_points`] restricted to characteristics in `[lo, hi]`.
pub fn fit_points_in(records: &[SweepRecord], lo: f64, hi: f64) -> Vec<(f64, f64)> {
    fit_points(records).into_iter().filter(|(a, _)| *a >= lo && *a <= hi).collect()
}

/// Whether the characteristic never decreases as `ε` shrinks, per
/// `(depth, α > 0)` group.
pub fn ap_monotone_in_eps(records: &[SweepRecord]) -> bool {
    let mut groups: Vec<Vec<&SweepRecord>> = Vec::new();
    for r in records.iter().filter(|r| r.ok() && r.alpha > 0.0) {
        match groups.iter_mut().find(|g| g[0].depth == r.depth && g[0].alpha == r.alpha) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    groups.into_iter().all(|mut g| {
        g.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        g.windows(2).all(|w| match (w[0].ap_char, w[1].ap_char) {
            (Some(a), Some(b)) => b >= a * (1.0 - 1e-9),
            _ => true,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub stderr: Option<f64>,
    pub n: usize,
    pub p: f64,
    pub seed: u64,
    pub target_exponent: f64,
    pub ap_monotone: bool,
    pub failures: usize,
    /// Why no fit was produced, if none was.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub records: Vec<SweepRecord>,
    pub fit: Option<ExponentFit>,
    pub summary: SweepSummary,
}

fn run_point(cfg: &SweepConfig, id: usize, depth: usize, alpha: f64, eps: f64) -> SweepRecord {
    let mut rec = SweepRecord {
        id,
        family: cfg.family,
        seed: cfg.seed,
        p: cfg.p,
        d: cfg.dim(),
        depth,
        alpha,
        eps,
        ap_char: None,
        ratio: None,
        iterations: 0,
        restarts: 0,
        witness_ratio: None,
        witness_domination: None,
        status: String::new(),
    };
    let res = (|| -> Result<()> {
        let (space, w) = cfg.generate(depth, alpha, eps)?;
        let pair = ReducingPair::build(&space, &w, cfg.p, &ReducerOptions::with_tol(cfg.tol))?;
        rec.ap_char = Some(ap_characteristic(&pair));
        let power = match cfg.estimator {
            Estimator::Auto => cfg.dim() == 1 && cfg.p == 2.0,
            Estimator::PowerIteration => true,
            Estimator::Ascent => false,
        };
        let est = if power {
            if cfg.p != 2.0 {
                return Err(Error::Config("power iteration applies at p = 2 only".into()));
            }
            estimate_opnorm_p2(&space, &w)?
        } else {
            let point_seed = cfg.seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            estimate_opnorm_general(&space, &w, cfg.p, cfg.restarts, point_seed)?
        };
        rec.ratio = Some(est.ratio);
        rec.iterations = est.iterations;
        rec.restarts = est.restarts;
        // A power-iteration witness lives in `L²_w`; `S_W` takes `w^{1/2} f`.
        let input = if power {
            let wv = w.scalar_values().expect("scalar");
            LeafFunction::scalar(est.witness.values().iter().zip(&wv).map(|(f, w)| f * w.sqrt()).collect())?
        } else {
            est.witness.clone()
        };
        rec.witness_ratio = Some(opnorm_ratio(&space, &w, cfg.p, &input)?);
        let dom = sparse_domination_check(&space, &pair, &input, cfg.cgamma, SquareConvention::ExcludeMean)?;
        rec.witness_domination = Some(dom.max_ratio);
        Ok(())
    })();
    rec.status = match res {
        Ok(()) => "ok".into(),
        Err(e) => e.to_string(),
    };
    rec
}

/// Runs every grid point (in parallel), then fits `log ratio` on
/// `log [W]_{A_p}`. Point failures are recorded and skipped by the fit.
pub fn theorem_sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let points = cfg.points();
    let records: Vec<SweepRecord> = points
        .par_iter()
        .enumerate()
        .map(|(id, &(depth, alpha, eps))| run_point(cfg, id, depth, alpha, eps))
        .collect();
    let pts = fit_points(&records);
    let (fit, fit_error) = match exponent_fit(&pts) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let summary = SweepSummary {
        slope: fit.map(|f| f.slope),
        intercept: fit.map(|f| f.intercept),
        stderr: fit.map(|f| f.stderr),
        n: pts.len(),
        p: cfg.p,
        seed: cfg.seed,
        target_exponent: cfg.target_exponent(),
        ap_monotone: ap_monotone_in_eps(&records),
        failures: records.iter().filter(|r| !r.ok()).count(),
        fit_error,
    };
    Ok(SweepOutput { records, fit, summary })
}
