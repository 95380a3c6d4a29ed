//! Seeded random-instance suite: every structural check on one instance,
//! run over many instances in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::{holdout_directions, sandwich, NormSampler};
use crate::error::{Error, Result};
use crate::filtration::{FilteredSpace, LeafFunction};
use crate::operators::{SparseTerms, SquareConvention};
use crate::principal::{analyze, default_cgamma, GammaEngine, CHECK_TOL};
use crate::random::{random_function, random_tree, random_weight};
use crate::weights::{
    ap_characteristic, ap_equivalents, conjugate, dual_weight, verify_reducing_bounds, MatrixWeight, ReducerMode,
    ReducerOptions, ReducingPair,
};

/// Parameters of a random suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub depth_min: usize,
    pub depth_max: usize,
    pub dims: Vec<usize>,
    pub ps: Vec<f64>,
    pub max_leaves: usize,
    /// Reducer tolerance.
    pub tol: f64,
    pub cgamma: f64,
    /// Held-out directions per atom for the sandwich certificate.
    pub holdout: usize,
    pub convention: SquareConvention,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 1000,
            seed: 7,
            depth_min: 4,
            depth_max: 12,
            dims: vec![1, 2, 3],
            ps: vec![1.5, 2.0, 3.0, 4.0],
            max_leaves: 48,
            tol: 5e-2,
            cgamma: default_cgamma(),
            holdout: 1000,
            convention: SquareConvention::ExcludeMean,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config("suite has no instances".into()));
        }
        if self.depth_min == 0 || self.depth_min > self.depth_max {
            return Err(Error::Config(format!("depth range {}..={} is empty", self.depth_min, self.depth_max)));
        }
        if self.dims.is_empty() || self.dims.iter().any(|&d| d == 0 || d > crate::linalg::MAX_DIM) {
            return Err(Error::Config("dimensions must lie in 1..=6".into()));
        }
        if self.ps.is_empty() || self.ps.iter().any(|&p| !(p > 1.0 && p.is_finite())) {
            return Err(Error::Config("exponents must lie in (1, ∞)".into()));
        }
        if self.max_leaves < 2 {
            return Err(Error::Config("max_leaves must be at least 2".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("reducer tolerance {} outside (0, 1)", self.tol)));
        }
        if !(self.cgamma >= 0.0) {
            return Err(Error::Config("C_γ must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One random `(space, W, f, p)`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub id: usize,
    pub p: f64,
    pub space: FilteredSpace,
    pub weight: MatrixWeight,
    pub function: LeafFunction,
}

/// Instance `id` of the suite; independent of every other instance.
pub fn instance(cfg: &SuiteConfig, id: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ id as u64);
    let depth = rng.gen_range(cfg.depth_min..=cfg.depth_max);
    let d = cfg.dims[rng.gen_range(0..cfg.dims.len())];
    let p = cfg.ps[rng.gen_range(0..cfg.ps.len())];
    let space = FilteredSpace::from_tree(&random_tree(&mut rng, depth, cfg.max_leaves)).expect("generated tree is valid");
    let weight = random_weight(&mut rng, d, space.num_leaves());
    let function = random_function(&mut rng, &space, d);
    Instance { id, p, space, weight, function }
}

/// One named check with the measured quantity and the bound it is held to.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
}

impl Check {
    fn le(name: &'static str, measured: f64, bound: f64) -> Self {
        Check { name, pass: measured <= bound, measured, bound }
    }

    fn flag(name: &'static str, pass: bool) -> Self {
        Check { name, pass, measured: if pass { 1.0 } else { 0.0 }, bound: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InstanceOutcome {
    pub id: usize,
    pub p: f64,
    pub d: usize,
    pub depth: usize,
    pub leaves: usize,
    pub ap_char: f64,
    pub checks: Vec<Check>,
}

impl InstanceOutcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Check names in report order.
pub const CHECK_NAMES: [&str; 22] = [
    "principal.disjoint_escape",
    "principal.measurable",
    "principal.window_before_stop",
    "principal.window_after_stop",
    "principal.escape_mass",
    "principal.terminates",
    "principal.halving",
    "iteration.bound",
    "iteration.vanishes_beyond_depth",
    "vanish.outside_first_stop",
    "vanish.before_first_stop",
    "domination.pointwise",
    "dual.exchanged_identity",
    "dual.rebuilt",
    "reducer.tilde_average",
    "reducer.hat_average",
    "reducer.sandwich_tilde",
    "reducer.sandwich_hat",
    "reducer.exact_p2_agreement",
    "equivalents.q1",
    "equivalents.q2",
    "sparse.holder_step",
];

/// Worst sandwich over every atom and level, as `(min, max)` of `‖Ae‖/ρ(e)`.
fn worst_sandwich(
    space: &FilteredSpace,
    pair: &ReducingPair,
    dirs: &[Vec<f64>],
    hat: bool,
) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for n in 0..=space.depth() {
        for a in 0..space.num_atoms(n) {
            let (tn, hn) = pair.norms(space, n, a);
            let r = pair.atom(n, a);
            let s = if hat { sandwich(&hn, &r.hat, dirs) } else { sandwich(&tn, &r.tilde, dirs) };
            lo = lo.min(s.min_ratio);
            hi = hi.max(s.max_ratio);
        }
    }
    (lo, hi)
}

fn window_check(name: &'static str, (lo, hi): (f64, f64), d: usize, tol: f64) -> Check {
    let floor = 1.0 / ((1.0 + tol) * (d as f64).sqrt());
    let ceil = 1.0 + tol;
    // Measured is the worse of the two relative excursions.
    let measured = (hi / ceil).max(floor / lo);
    Check { name, pass: lo >= floor && hi <= ceil, measured, bound: 1.0 }
}

/// `max T_{W,2} / (T_{W,1}^{1−θ} T_{W,p}^θ)` for `p > 2` with
/// `θ = p/(2(p−1))`, else `max T_{W,2} / T_{W,p}`.
fn holder_ratio(terms: &SparseTerms, p: f64, leaves: usize) -> f64 {
    let t2 = terms.aggregate(2.0);
    let tp = terms.aggregate(p);
    let t1 = terms.aggregate(1.0);
    let theta = p / (2.0 * (p - 1.0));
    (0..leaves)
        .map(|l| {
            let rhs = if p > 2.0 { t1[l].powf(1.0 - theta) * tp[l].powf(theta) } else { tp[l] };
            if t2[l] <= CHECK_TOL {
                0.0
            } else {
                t2[l] / rhs.max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max)
}

pub fn check_instance(cfg: &SuiteConfig, inst: &Instance) -> Result<InstanceOutcome> {
    let (space, w, f, p) = (&inst.space, &inst.weight, &inst.function, inst.p);
    let d = w.dim();
    let opts = ReducerOptions::with_tol(cfg.tol);
    let pair = ReducingPair::build(space, w, p, &opts)?;
    let ap = ap_characteristic(&pair);
    let mut checks = Vec::with_capacity(CHECK_NAMES.len());

    let rep = analyze(space, &pair, f, cfg.cgamma, cfg.convention)?;
    let pr = &rep.properties;
    checks.push(Check::flag("principal.disjoint_escape", pr.a_disjoint));
    checks.push(Check::flag("principal.measurable", pr.b_measurable));
    checks.push(Check::flag("principal.window_before_stop", pr.c_bounds));
    checks.push(Check::flag("principal.window_after_stop", pr.d_bounds));
    checks.push(Check::flag("principal.escape_mass", pr.e_mass));
    checks.push(Check::flag("principal.terminates", pr.f_terminates));
    checks.push(Check::flag("principal.halving", rep.halving));
    checks.push(Check { name: "iteration.bound", pass: rep.iteration.pass, measured: rep.iteration.max_ratio, bound: rep.iteration.k_it });
    checks.push(Check::flag("iteration.vanishes_beyond_depth", rep.iteration.b_vanishes_beyond_depth));
    checks.push(Check::le("vanish.outside_first_stop", rep.vanish.outside_max, CHECK_TOL));
    checks.push(Check::le("vanish.before_first_stop", rep.vanish.before_kappa_max, CHECK_TOL));
    checks.push(Check {
        name: "domination.pointwise",
        pass: rep.domination.pass,
        measured: rep.domination.max_ratio,
        bound: rep.domination.bound,
    });

    // [V]_{A_{p′}} against [W]^{p′−1}: first through the exchanged reducers,
    // then by fitting reducers for V from scratch.
    let q = conjugate(p);
    let target = ap.powf(q - 1.0);
    let exchanged = ap_characteristic(&pair.exchanged());
    checks.push(Check::le("dual.exchanged_identity", (exchanged - target).abs() / target, 1e-8));
    let rebuilt = ap_characteristic(&ReducingPair::build(space, &dual_weight(w, p)?, q, &opts)?);
    let slack = 2.0 * q * ((1.0 + cfg.tol) * (d as f64).sqrt()).ln();
    checks.push(Check::le("dual.rebuilt", (rebuilt / target).ln().abs(), slack.max(1e-8)));

    let rb = verify_reducing_bounds(space, &pair);
    checks.push(Check::le("reducer.tilde_average", rb.tilde_avg, rb.tilde_bound));
    checks.push(Check::le("reducer.hat_average", rb.hat_avg, rb.hat_bound));

    let dirs = holdout_directions(d, cfg.holdout);
    let tilde = worst_sandwich(space, &pair, &dirs, false);
    let hat = worst_sandwich(space, &pair, &dirs, true);
    checks.push(window_check("reducer.sandwich_tilde", tilde, d, cfg.tol));
    checks.push(window_check("reducer.sandwich_hat", hat, d, cfg.tol));
    if p == 2.0 {
        // Exact reducers realize the p = 2 norms, so the ellipsoid reducers
        // must sit in the same window relative to them.
        let exact = ReducingPair::build(space, w, 2.0, &ReducerOptions { mode: ReducerMode::ExactP2, ..opts })?;
        let vs = |pick_hat: bool| {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for n in 0..=space.depth() {
                for a in 0..space.num_atoms(n) {
                    let (e, m) = if pick_hat {
                        (exact.atom(n, a).hat, pair.atom(n, a).hat)
                    } else {
                        (exact.atom(n, a).tilde, pair.atom(n, a).tilde)
                    };
                    let rho = NormSampler::new(d, move |v: &[f64]| e.apply_norm(v));
                    let s = sandwich(&rho, &m, &dirs);
                    lo = lo.min(s.min_ratio);
                    hi = hi.max(s.max_ratio);
                }
            }
            (lo, hi)
        };
        let (t, h) = (vs(false), vs(true));
        checks.push(window_check("reducer.exact_p2_agreement", (t.0.min(h.0), t.1.max(h.1)), d, cfg.tol));
    } else {
        checks.push(Check { name: "reducer.exact_p2_agreement", pass: true, measured: 0.0, bound: 1.0 });
    }

    let eq = ap_equivalents(space, &pair);
    for (name, v) in [("equivalents.q1", eq.q1), ("equivalents.q2", eq.q2)] {
        let r = v / eq.ap;
        checks.push(Check { name, pass: r >= 1.0 / eq.c && r <= eq.c, measured: r, bound: eq.c });
    }

    let eng = GammaEngine::new(space, &pair, f)?;
    let family = crate::principal::build_with(&eng, cfg.cgamma);
    let terms = SparseTerms::from_averages(space, &pair, &family.to_sparse(true), eng.averages());
    let hr = holder_ratio(&terms, p, space.num_leaves());
    checks.push(Check::le("sparse.holder_step", hr, 1.0 + CHECK_TOL));

    Ok(InstanceOutcome { id: inst.id, p, d, depth: space.depth(), leaves: space.num_leaves(), ap_char: ap, checks })
}

/// Every instance of the suite, in id order.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<InstanceOutcome>> {
    cfg.validate()?;
    (0..cfg.instances).into_par_iter().map(|id| check_instance(cfg, &instance(cfg, id))).collect()
}

/// OLS slope of the per-depth maximum of `value` against depth.
pub fn depth_trend(points: &[(usize, f64)]) -> Option<f64> {
    let mut per: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for &(depth, v) in points {
        let e = per.entry(depth).or_insert(f64::NEG_INFINITY);
        *e = e.max(v);
    }
    if per.len() < 2 {
        return None;
    }
    let n = per.len() as f64;
    let mx = per.keys().map(|&k| k as f64).sum::<f64>() / n;
    let my = per.values().sum::<f64>() / n;
    let sxx: f64 = per.keys().map(|&k| (k as f64 - mx).powi(2)).sum();
    let sxy: f64 = per.iter().map(|(&k, v)| (k as f64 - mx) * (v - my)).sum();
    Some(sxy / sxx)
}
