//! Reducing matrices for norms on ℝ^d.
//!
//! Given a norm ρ, [`norm_ball_reducing`] returns an SPD matrix `A` whose
//! ellipsoid `{x : ‖Ax‖ ≤ 1}` is an approximate minimum-volume (Löwner)
//! ellipsoid around the unit ball of ρ, so that
//! `‖Ae‖ ≲ ρ(e) ≤ √d ‖Ae‖`.
//!
//! The ellipsoid is fitted to boundary samples `u / ρ(u)` with a
//! Khachiyan-type coordinate ascent (Todd–Yildirim variant with away steps)
//! on the centered D-optimal design problem.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{Mat, MAX_DIM};

/// Seed for the `d ≥ 4` direction sets and for held-out directions.
pub const DIRECTION_SEED: u64 = 0x5eed_d1ec;
pub const DEFAULT_MAX_ITER: usize = 100_000;
pub const DEFAULT_TOL: f64 = 1e-3;

/// A norm on ℝ^d given by an evaluator, plus the sampling plan used to
/// reduce it.
pub struct NormSampler<'a> {
    dim: usize,
    eval: Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>,
    seed: u64,
}

impl<'a> NormSampler<'a> {
    pub fn new(dim: usize, eval: impl Fn(&[f64]) -> f64 + Sync + 'a) -> Self {
        assert!((1..=MAX_DIM).contains(&dim));
        NormSampler { dim, eval: Box::new(eval), seed: DIRECTION_SEED }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn eval(&self, e: &[f64]) -> f64 {
        (self.eval)(e)
    }

    /// Number of fitting directions for this dimension.
    pub fn sample_count(&self) -> usize {
        sample_count(self.dim)
    }
}

pub fn sample_count(dim: usize) -> usize {
    match dim {
        1 => 1,
        2 => 720,
        3 => 2048,
        _ => 8192,
    }
}

/// Fitting directions: 720 equispaced angles for d = 2, a 2048-point
/// Fibonacci sphere for d = 3, 8192 seeded uniform directions for d ≥ 4.
///
/// For d = 2 only the half circle is returned; the other half are the
/// negatives and contribute identical rank-one terms.
pub fn fitting_directions(dim: usize) -> &'static [Vec<f64>] {
    static CACHE: [OnceLock<Vec<Vec<f64>>>; MAX_DIM + 1] =
        [const { OnceLock::new() }; MAX_DIM + 1];
    CACHE[dim].get_or_init(|| match dim {
        1 => vec![vec![1.0]],
        2 => (0..360)
            .map(|k| {
                let t = std::f64::consts::PI * k as f64 / 360.0;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => fibonacci_sphere(2048),
        _ => uniform_directions(dim, 8192, DIRECTION_SEED),
    })
}

fn fibonacci_sphere(n: usize) -> Vec<Vec<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            vec![r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Seeded directions uniform on the sphere (normalized Gaussians).
pub fn uniform_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (dim as u64).wrapping_mul(0x9e37_79b9));
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let n = crate::linalg::norm2(&v);
            if n > 1e-8 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box–Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Output of the ellipsoid fit.
#[derive(Clone, Debug)]
pub struct Reducer {
    pub matrix: Mat,
    pub iterations: usize,
    /// `max ‖A x_i‖` over the boundary samples; at most `1 + tol` on success.
    pub sample_ratio: f64,
}

/// Löwner-ellipsoid reducing matrix of the norm `rho`.
///
/// On success `‖Au‖ ≤ (1+tol/2)·ρ(u)` on every fitting direction and
/// `ρ(e) ≤ √d·‖Ae‖` for every `e` (the inscribed ellipsoid of the design lies
/// in the convex hull of the samples).
pub fn norm_ball_reducing(rho: &NormSampler<'_>, tol: f64) -> Result<Reducer> {
    norm_ball_reducing_capped(rho, tol, DEFAULT_MAX_ITER)
}

pub fn norm_ball_reducing_capped(rho: &NormSampler<'_>, tol: f64, max_iter: usize) -> Result<Reducer> {
    let d = rho.dim();
    if d == 1 {
        let r = rho.eval(&[1.0]);
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::validation(format!("norm of the unit vector is {r}")));
        }
        return Ok(Reducer { matrix: Mat::scalar(1, r), iterations: 0, sample_ratio: 1.0 });
    }
    let dirs = fitting_directions(d);
    let mut points: Vec<[f64; MAX_DIM]> = Vec::with_capacity(dirs.len());
    for u in dirs {
        let r = rho.eval(u);
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::validation(format!("norm evaluator returned {r} on a unit direction")));
        }
        let mut x = [0.0; MAX_DIM];
        for i in 0..d {
            x[i] = u[i] / r;
        }
        points.push(x);
    }
    // (1 + eps)^{1/2} = 1 + tol/2 leaves half the budget for off-sample error.
    let eps = (1.0 + 0.5 * tol).powi(2) - 1.0;
    let fit = centered_mvee(&points, d, eps, max_iter);
    let matrix = fit.x.scale(d as f64).spd_power(-0.5)?;
    let sample_ratio = (fit.max_g / d as f64).sqrt();
    if !fit.converged {
        return Err(Error::ReducerNonConvergence {
            iterations: fit.iterations,
            achieved_ratio: sample_ratio,
            last: Box::new(matrix),
        });
    }
    Ok(Reducer { matrix, iterations: fit.iterations, sample_ratio })
}

struct MveeFit {
    x: Mat,
    iterations: usize,
    max_g: f64,
    converged: bool,
}

/// D-optimal design weights for centered points: maximize log det Σπ_i x_i x_iᵀ.
/// Stops once `max_i x_iᵀ X⁻¹ x_i ≤ d(1+eps)` and every supported point has
/// `x_iᵀ X⁻¹ x_i ≥ d(1−eps)`.
fn centered_mvee(points: &[[f64; MAX_DIM]], d: usize, eps: f64, max_iter: usize) -> MveeFit {
    let m = points.len();
    let mut pi = vec![1.0 / m as f64; m];
    let df = d as f64;
    let rebuild = |pi: &[f64]| {
        let mut x = Mat::zeros(d);
        for (w, p) in pi.iter().zip(points) {
            if *w == 0.0 {
                continue;
            }
            for i in 0..d {
                for j in 0..d {
                    x[(i, j)] += w * p[i] * p[j];
                }
            }
        }
        x
    };
    let quad = |xinv: &Mat, p: &[f64; MAX_DIM]| {
        let mut s = 0.0;
        for i in 0..d {
            let mut t = 0.0;
            for j in 0..d {
                t += xinv[(i, j)] * p[j];
            }
            s += p[i] * t;
        }
        s
    };
    let mut x = rebuild(&pi);
    let mut xinv = x.spd_inverse().unwrap_or_else(|_| Mat::identity(d));
    let mut g: Vec<f64> = points.iter().map(|p| quad(&xinv, p)).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut v = [0.0; MAX_DIM];
    while iterations < max_iter {
        let (mut jp, mut gp) = (0, f64::NEG_INFINITY);
        let (mut jm, mut gm) = (usize::MAX, f64::INFINITY);
        for (i, &gi) in g.iter().enumerate() {
            if gi > gp {
                gp = gi;
                jp = i;
            }
            if pi[i] > 0.0 && gi < gm {
                gm = gi;
                jm = i;
            }
        }
        let eps_plus = gp / df - 1.0;
        let eps_minus = 1.0 - gm / df;
        if eps_plus <= eps && eps_minus <= eps {
            converged = true;
            break;
        }
        let (j, kappa) = if eps_plus >= eps_minus { (jp, gp) } else { (jm, gm) };
        let mut beta = if (kappa - 1.0).abs() < 1e-15 { 0.0 } else { (kappa - df) / (df * (kappa - 1.0)) };
        if eps_plus < eps_minus {
            // Away step: shrink the weight of the least useful support point.
            let cap = -pi[j] / (1.0 - pi[j]);
            if kappa <= 1.0 || beta < cap {
                beta = cap;
            }
        }
        if beta == 0.0 || !beta.is_finite() {
            break;
        }
        iterations += 1;
        for w in pi.iter_mut() {
            *w *= 1.0 - beta;
        }
        pi[j] += beta;
        if pi[j] < 1e-300 {
            pi[j] = 0.0;
        }
        if iterations % 200 == 0 {
            x = rebuild(&pi);
            xinv = x.spd_inverse().unwrap_or(xinv);
            for (gi, p) in g.iter_mut().zip(points) {
                *gi = quad(&xinv, p);
            }
            continue;
        }
        // Sherman–Morrison update of X⁻¹ and of every g_i.
        let pj = &points[j];
        for i in 0..d {
            let mut t = 0.0;
            for k in 0..d {
                t += xinv[(i, k)] * pj[k];
            }
            v[i] = t;
        }
        let r = beta / (1.0 - beta);
        let denom = 1.0 + r * kappa;
        let scale = 1.0 / (1.0 - beta);
        for (gi, p) in g.iter_mut().zip(points) {
            let mut y = 0.0;
            for k in 0..d {
                y += p[k] * v[k];
            }
            *gi = scale * (*gi - r * y * y / denom);
        }
        let mut next = xinv;
        for a in 0..d {
            for b in 0..d {
                next[(a, b)] = scale * (xinv[(a, b)] - r * v[a] * v[b] / denom);
            }
        }
        xinv = next;
        x = x.scale(1.0 - beta);
        x.add_scaled(&Mat::outer(&pj[..d], &pj[..d]), beta);
    }
    let x = rebuild(&pi);
    let xinv = x.spd_inverse().unwrap_or(xinv);
    let max_g = points.iter().map(|p| quad(&xinv, p)).fold(0.0, f64::max);
    MveeFit { x, iterations, max_g, converged: converged || max_g <= df * (1.0 + eps) }
}

/// Sandwich ratios `‖Ae‖/ρ(e)` over a direction set.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Sandwich {
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl Sandwich {
    /// Within `[1/((1+tol)√d), 1+tol]`.
    pub fn within(&self, dim: usize, tol: f64) -> bool {
        self.max_ratio <= 1.0 + tol && self.min_ratio >= 1.0 / ((1.0 + tol) * (dim as f64).sqrt())
    }
}

pub fn sandwich(rho: &NormSampler<'_>, a: &Mat, directions: &[Vec<f64>]) -> Sandwich {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for e in directions {
        let r = a.apply_norm(e) / rho.eval(e);
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Sandwich { min_ratio: lo, max_ratio: hi }
}

/// Held-out directions (disjoint seed from the fitting set).
pub fn holdout_directions(dim: usize, count: usize) -> Vec<Vec<f64>> {
    uniform_directions(dim, count, DIRECTION_SEED.wrapping_add(0xabcdef))
}
