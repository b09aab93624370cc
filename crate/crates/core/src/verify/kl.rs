//! KL-regularized reward maximization over the probability simplex.
//!
//! `J(π) = Σ π(z) r(z) − α·KL(π ‖ π_ref)` has the closed-form maximizer
//! `π*(z) ∝ π_ref(z)·exp(r(z)/α)`. Two numeric routes that never use that
//! formula cross-check it: projected gradient ascent, and an exhaustive grid
//! for `m ≤ 3`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Result, VerifyError};

/// Lower bound kept by the numeric solver so that `ln π` stays finite.
pub const SIMPLEX_FLOOR: f64 = 1e-12;
pub const GRID_STEP: f64 = 1e-3;
pub const ITERATION_BUDGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexProblem {
    pub reward: Vec<f64>,
    pub pi_ref: Vec<f64>,
    pub alpha: f64,
}

impl SimplexProblem {
    pub fn new(reward: Vec<f64>, pi_ref: Vec<f64>, alpha: f64) -> Result<Self> {
        let p = Self {
            reward,
            pi_ref,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.pi_ref.len();
        if m < 2 || self.reward.len() != m {
            return Err(VerifyError::Contract(format!(
                "simplex problem needs m >= 2 matching entries, got {} rewards and {} reference entries",
                self.reward.len(),
                m
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(VerifyError::Contract(format!(
                "α must be positive, got {}",
                self.alpha
            )));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(VerifyError::Contract("non-finite reward".into()));
        }
        if self.pi_ref.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
            return Err(VerifyError::Contract(
                "reference distribution must be strictly positive".into(),
            ));
        }
        let s: f64 = self.pi_ref.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(VerifyError::Contract(format!(
                "reference distribution sums to {s}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pi_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi_ref.is_empty()
    }

    /// `J(π)` with `0 ln 0 = 0`.
    pub fn objective(&self, pi: &[f64]) -> f64 {
        let mut j = 0.0;
        for ((&p, &r), &q) in pi.iter().zip(&self.reward).zip(&self.pi_ref) {
            if p > 0.0 {
                j += p * r - self.alpha * p * (p.ln() - q.ln());
            }
        }
        j
    }

    fn gradient(&self, pi: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.reward[i] - self.alpha * (pi[i].ln() - self.pi_ref[i].ln() + 1.0);
        }
    }
}

/// `ln π*`, normalized with max-subtraction.
pub fn closed_form_log_policy(p: &SimplexProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let a: Vec<f64> = p
        .pi_ref
        .iter()
        .zip(&p.reward)
        .map(|(q, r)| q.ln() + r / p.alpha)
        .collect();
    let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + a.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    Ok(a.into_iter().map(|x| x - lse).collect())
}

/// `π*(z) ∝ π_ref(z)·exp(r(z)/α)`.
pub fn closed_form_policy(p: &SimplexProblem) -> Result<Vec<f64>> {
    Ok(closed_form_log_policy(p)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Spread of `r(z) − α(ln π*(z) + 1) + α ln π_ref(z)` across `z`; the
/// Lagrange multiplier makes it constant at the optimum.
pub fn stationarity_spread(p: &SimplexProblem) -> Result<f64> {
    let lp = closed_form_log_policy(p)?;
    let s: Vec<f64> = (0..p.len())
        .map(|z| p.reward[z] - p.alpha * (lp[z] + 1.0) + p.alpha * p.pi_ref[z].ln())
        .collect();
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(hi - lo)
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Euclidean projection onto `{x : x ≥ floor, Σ x = 1}`.
pub fn project_to_floored_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let m = v.len();
    let mass = 1.0 - floor * m as f64;
    let mut u: Vec<f64> = v.iter().map(|x| x - floor).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - mass) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter()
        .map(|x| (x - floor - theta).max(0.0) + floor)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericSolution {
    pub pi: Vec<f64>,
    pub iterations: usize,
    /// Optimality residual divided by `α`: spread of the gradient over free
    /// coordinates, plus any bound coordinate that wants to grow.
    pub residual: f64,
    pub converged: bool,
}

fn kkt_residual(p: &SimplexProblem, pi: &[f64], g: &[f64]) -> f64 {
    let free: Vec<usize> = (0..pi.len())
        .filter(|&i| pi[i] > SIMPLEX_FLOOR * (1.0 + 1e-9))
        .collect();
    if free.is_empty() {
        return f64::INFINITY;
    }
    let lo = free.iter().map(|&i| g[i]).fold(f64::INFINITY, f64::min);
    let hi = free.iter().map(|&i| g[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut res = hi - lo;
    for (i, &gi) in g.iter().enumerate().take(pi.len()) {
        if !free.contains(&i) {
            res = res.max(gi - hi);
        }
    }
    res / p.alpha
}

/// Projection onto `{y ≥ floor, Σ y = 1}` in the metric `Σ (y_i − v_i)² / w_i`:
/// `y_i = max(floor, v_i − θ w_i)` with `θ` found by bisection.
pub fn project_weighted(v: &[f64], w: &[f64], floor: f64) -> Vec<f64> {
    let at = |theta: f64| -> f64 {
        v.iter()
            .zip(w)
            .map(|(vi, wi)| (vi - theta * wi).max(floor))
            .sum::<f64>()
            - 1.0
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while at(lo) < 0.0 {
        lo *= 2.0;
    }
    while at(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if at(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let y: Vec<f64> = v
        .iter()
        .zip(w)
        .map(|(vi, wi)| (vi - hi * wi).max(floor))
        .collect();
    let s: f64 = y.iter().sum();
    y.into_iter().map(|x| x / s).collect()
}

/// Projected gradient ascent with Armijo backtracking, in the metric of the
/// objective's diagonal curvature `α / π`. Starts from `π_ref`.
///
/// The Euclidean metric stalls once coordinates near the boundary make the
/// curvature span many orders of magnitude; the scaled metric takes
/// Newton-sized steps on every coordinate.
pub fn solve_kl_problem_numeric(p: &SimplexProblem, tolerance: f64) -> Result<NumericSolution> {
    p.validate()?;
    let m = p.len();
    let mut x = project_to_floored_simplex(&p.pi_ref, SIMPLEX_FLOOR);
    let mut g = vec![0.0; m];
    p.gradient(&x, &mut g);
    let mut jx = p.objective(&x);
    let mut residual = kkt_residual(p, &x, &g);
    for it in 0..ITERATION_BUDGET {
        if residual <= tolerance {
            return Ok(NumericSolution {
                pi: x,
                iterations: it,
                residual,
                converged: true,
            });
        }
        let w: Vec<f64> = x.iter().map(|xi| xi / p.alpha).collect();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..m).map(|i| x[i] + t * w[i] * g[i]).collect();
            let tw: Vec<f64> = w.iter().map(|wi| t * wi).collect();
            let y = project_weighted(&trial, &tw, SIMPLEX_FLOOR);
            let ascent: f64 = (0..m).map(|i| g[i] * (y[i] - x[i])).sum();
            let jy = p.objective(&y);
            // the slack absorbs round-off in J once steps reach machine precision
            if jy >= jx + 1e-4 * ascent - 4.0 * f64::EPSILON * jx.abs().max(1.0) {
                accepted = Some((y, jy));
                break;
            }
            t *= 0.5;
        }
        let Some((y, jy)) = accepted else {
            break;
        };
        let moved = y != x;
        x = y;
        jx = jy;
        p.gradient(&x, &mut g);
        residual = kkt_residual(p, &x, &g);
        if !moved {
            break;
        }
    }
    Ok(NumericSolution {
        converged: residual <= tolerance,
        pi: x,
        iterations: ITERATION_BUDGET,
        residual,
    })
}

/// Best point of the grid `{π : π = k·step}` for `m ≤ 3`.
pub fn grid_optimum(p: &SimplexProblem, step: f64) -> Result<Vec<f64>> {
    p.validate()?;
    let n = (1.0 / step).round() as usize;
    let at = |k: usize| k as f64 / n as f64;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut consider = |pi: Vec<f64>| {
        let j = p.objective(&pi);
        if j > best.0 {
            best = (j, pi);
        }
    };
    match p.len() {
        2 => (0..=n).for_each(|i| consider(vec![at(i), at(n - i)])),
        3 => {
            for i in 0..=n {
                for j in 0..=n - i {
                    consider(vec![at(i), at(j), at(n - i - j)]);
                }
            }
        }
        m => {
            return Err(VerifyError::Contract(format!(
                "grid search supports m <= 3, got {m}"
            )))
        }
    }
    Ok(best.1)
}

/// `J(π*) ≥ J(q)` for `count` random log-space perturbations `q` of `π*`.
pub fn local_optimality_violations(p: &SimplexProblem, count: usize, seed: u64) -> Result<usize> {
    let lp = closed_form_log_policy(p)?;
    let star: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    let j_star = p.objective(&star);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..count {
        let scale = 10f64.powf(rng.random_range(-3.0..0.0));
        let a: Vec<f64> = lp
            .iter()
            .map(|x| x + scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = a.iter().map(|x| (x - mx).exp()).sum();
        let q: Vec<f64> = a.iter().map(|x| (x - mx).exp() / z).collect();
        if p.objective(&q) > j_star + 1e-12 * j_star.abs().max(1.0) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Random problem with `m ∈ [2, 16]`, log-uniform `α ∈ [0.1, 10]`.
pub fn random_problem<R: Rng + ?Sized>(rng: &mut R) -> SimplexProblem {
    let m = rng.random_range(2..=16);
    let alpha = 10f64.powf(rng.random_range(-1.0..=1.0));
    let reward = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..m)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, rng).exp())
        .collect();
    let s: f64 = w.iter().sum();
    SimplexProblem {
        reward,
        pi_ref: w.into_iter().map(|x| x / s).collect(),
        alpha,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCase {
    pub m: usize,
    pub alpha: f64,
    pub tv_numeric: f64,
    /// `J(closed form) − J(numeric)`; never below `−1e-8` at a true optimum.
    pub objective_gap: f64,
    pub stationarity_spread: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_grid: Option<f64>,
    pub perturbation_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlSuiteReport {
    pub problems: usize,
    pub max_tv_numeric: f64,
    pub min_objective_gap: f64,
    pub max_stationarity_spread: f64,
    pub max_tv_grid: f64,
    pub grid_cases: usize,
    pub unconverged: usize,
    pub perturbation_violations: usize,
    pub passed: bool,
    pub cases: Vec<KlCase>,
}

pub const TV_TOLERANCE: f64 = 1e-5;
pub const STATIONARITY_TOLERANCE: f64 = 1e-8;
pub const OBJECTIVE_SLACK: f64 = 1e-8;

pub fn check_case(p: &SimplexProblem, seed: u64, perturbations: usize) -> Result<KlCase> {
    let closed = closed_form_policy(p)?;
    let num = solve_kl_problem_numeric(p, 1e-11)?;
    let tv_grid = if p.len() <= 3 {
        Some(total_variation(&grid_optimum(p, GRID_STEP)?, &closed))
    } else {
        None
    };
    Ok(KlCase {
        m: p.len(),
        alpha: p.alpha,
        tv_numeric: total_variation(&num.pi, &closed),
        objective_gap: p.objective(&closed) - p.objective(&num.pi),
        stationarity_spread: stationarity_spread(p)?,
        iterations: num.iterations,
        converged: num.converged,
        tv_grid,
        perturbation_violations: local_optimality_violations(p, perturbations, seed)?,
    })
}

/// `count` random problems; the grid check allows one grid step per action.
pub fn run_kl_suite(count: usize, seed: u64, perturbations: usize) -> Result<KlSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let mut p = random_problem(&mut rng);
        // keep a share of problems small enough for the grid route
        if i % 4 == 0 {
            p.reward.truncate(2 + i % 8 / 4);
            p.pi_ref.truncate(p.reward.len());
            let s: f64 = p.pi_ref.iter().sum();
            p.pi_ref.iter_mut().for_each(|x| *x /= s);
        }
        cases.push(check_case(&p, seed.wrapping_add(i as u64), perturbations)?);
    }
    let fold = |f: fn(&KlCase) -> f64, init: f64, op: fn(f64, f64) -> f64| {
        cases.iter().map(f).fold(init, op)
    };
    let max_tv_numeric = fold(|c| c.tv_numeric, 0.0, f64::max);
    let min_objective_gap = fold(|c| c.objective_gap, f64::INFINITY, f64::min);
    let max_stationarity_spread = fold(|c| c.stationarity_spread, 0.0, f64::max);
    let grid: Vec<&KlCase> = cases.iter().filter(|c| c.tv_grid.is_some()).collect();
    let grid_ok = grid
        .iter()
        .all(|c| c.tv_grid.unwrap_or(0.0) <= c.m as f64 * GRID_STEP);
    let max_tv_grid = grid.iter().filter_map(|c| c.tv_grid).fold(0.0, f64::max);
    let unconverged = cases.iter().filter(|c| !c.converged).count();
    let perturbation_violations = cases.iter().map(|c| c.perturbation_violations).sum();
    let passed = max_tv_numeric <= TV_TOLERANCE
        && min_objective_gap >= -OBJECTIVE_SLACK
        && max_stationarity_spread <= STATIONARITY_TOLERANCE
        && grid_ok
        && perturbation_violations == 0;
    Ok(KlSuiteReport {
        problems: cases.len(),
        max_tv_numeric,
        min_objective_gap,
        max_stationarity_spread,
        max_tv_grid,
        grid_cases: grid.len(),
        unconverged,
        perturbation_violations,
        passed,
        cases,
    })
}
