//! Feature distributions that share a Gram matrix but not their variances.
//!
//! The normalized Gram matrix of a feature map estimates the non-central
//! second moment `E[XXᵀ] = Σ + μμᵀ`, so any two distributions with equal
//! `Σ + μμᵀ` are indistinguishable to a Gram loss. This module builds such
//! pairs: in one dimension in closed form, and in `m` dimensions by solving
//! for an affine map `X₂ = A X₁ + b` whose output has prescribed variances
//! and the input's second moment.
//!
//! The affine system is solved with Levenberg–Marquardt on the stacked
//! residual
//!
//! ```text
//! upper(AΣAᵀ + (Aμ+b)(Aμ+b)ᵀ − Σ − μμᵀ)   m(m+1)/2 rows
//! diag(AΣAᵀ) − targets                     m rows
//! ```
//!
//! over the `m(m+1)` unknowns of `A` and `b`. The normal equations are
//! solved in their dual form `(JJᵀ + λI) y = r`, `δ = −Jᵀy`, since there are
//! fewer residuals than unknowns.
//!
//! Not every instance has a solution: the output must satisfy
//! `Var(X₂ᵢ) + E[X₂ᵢ]² = (Σ + μμᵀ)ᵢᵢ`, and `Σ + μμᵀ − ννᵀ` must stay
//! positive semi-definite. [`feasibility`] decides this exactly for small
//! `m`, independently of the solver.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Mean vector and covariance of an `m`-dimensional feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistribution<S> {
    mean: Vec<S>,
    /// Row-major `m x m`.
    covariance: Vec<S>,
}

impl<S: Scalar> FeatureDistribution<S> {
    pub fn new(mean: Vec<S>, covariance: Vec<S>) -> Result<Self> {
        let m = mean.len();
        if covariance.len() != m * m {
            return Err(Error::shape(format!(
                "covariance has {} entries for dimension {m}",
                covariance.len()
            )));
        }
        let scale = covariance
            .iter()
            .fold(S::one(), |a, v| a.max(v.abs()));
        let tol = S::lit(1e-12) * scale;
        for i in 0..m {
            for j in 0..i {
                if (covariance[i * m + j] - covariance[j * m + i]).abs() > tol {
                    return Err(Error::config("covariance is not symmetric"));
                }
            }
        }
        // PSD up to a relative jitter
        let mut jittered = covariance.clone();
        for i in 0..m {
            jittered[i * m + i] += S::lit(1e-10) * scale;
        }
        if cholesky(&mut jittered, m).is_none() {
            return Err(Error::config("covariance is not positive semi-definite"));
        }
        Ok(FeatureDistribution { mean, covariance })
    }

    /// One-dimensional distribution with mean `mu` and standard deviation `sigma`.
    pub fn scalar(mu: S, sigma: S) -> Self {
        FeatureDistribution {
            mean: vec![mu],
            covariance: vec![sigma * sigma],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn covariance(&self) -> &[S] {
        &self.covariance
    }

    pub fn variances(&self) -> Vec<S> {
        let m = self.dim();
        (0..m).map(|i| self.covariance[i * m + i]).collect()
    }
}

/// `Σ + μμᵀ`, row-major.
pub fn noncentral_second_moment<S: Scalar>(d: &FeatureDistribution<S>) -> Vec<S> {
    let m = d.dim();
    let mut k = d.covariance.clone();
    for i in 0..m {
        for j in 0..m {
            k[i * m + j] += d.mean[i] * d.mean[j];
        }
    }
    k
}

/// Mean `μ₂ = √(σ₁² + μ₁² − σ₂²)` that keeps the second moment of a
/// one-dimensional feature fixed when its standard deviation becomes `σ₂`.
pub fn matched_mean_for_target_variance<S: Scalar>(mu1: S, sigma1: S, sigma2: S) -> Result<S> {
    // difference of squares in factored form, plus the rounding error of
    // μ₁², so equal deviations return |μ₁| exactly
    let m = mu1 * mu1;
    let m_err = mu1.mul_add(mu1, -m);
    let radicand = (m + (sigma1 - sigma2) * (sigma1 + sigma2)) + m_err;
    if radicand < S::zero() {
        return Err(Error::Infeasible(format!(
            "σ₁² + μ₁² − σ₂² = {radicand} is negative"
        )));
    }
    Ok(radicand.sqrt())
}

/// Affine map `x ↦ A x + b` with the solver's final squared residual norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineSolution<S> {
    /// Row-major `m x m`.
    pub a: Vec<S>,
    pub b: Vec<S>,
    pub residual: S,
    pub restarts: usize,
    pub iterations: usize,
}

impl<S: Scalar> AffineSolution<S> {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Distribution of `A X + b`: `(AΣAᵀ, Aμ + b)`.
    pub fn apply(&self, d: &FeatureDistribution<S>) -> FeatureDistribution<S> {
        let m = d.dim();
        let w = matmul(&self.a, &d.covariance, m);
        let mut cov = vec![S::zero(); m * m];
        for i in 0..m {
            for j in 0..m {
                cov[i * m + j] = dot(&w[i * m..(i + 1) * m], &self.a[j * m..(j + 1) * m]);
            }
        }
        let mean = (0..m)
            .map(|i| dot(&self.a[i * m..(i + 1) * m], &d.mean) + self.b[i])
            .collect();
        FeatureDistribution {
            mean,
            covariance: cov,
        }
    }

    /// Output mean `Aμ + b`.
    pub fn output_mean(&self, d: &FeatureDistribution<S>) -> Vec<S> {
        self.apply(d).mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Success threshold on the squared residual norm.
    pub residual_tolerance: f64,
    pub step_tolerance: f64,
    /// A restart is abandoned once the damping factor exceeds this.
    pub max_damping: f64,
    /// A restart also ends early when, extrapolating the rate of decrease
    /// over the last `stall_window` iterations, reaching the tolerance would
    /// take more than `stall_factor` times the remaining iteration budget.
    pub stall_window: usize,
    pub stall_factor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            restarts: 20,
            max_iterations: 500,
            residual_tolerance: 1e-10,
            step_tolerance: 1e-14,
            max_damping: 1e16,
            stall_window: 25,
            stall_factor: 10.0,
        }
    }
}

fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == S::zero() {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    out
}

/// In-place lower Cholesky factor; `None` if not positive definite.
fn cholesky<S: Scalar>(a: &mut [S], n: usize) -> Option<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > S::zero()) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = S::zero();
        }
    }
    Some(())
}

fn cholesky_solve<S: Scalar>(l: &[S], n: usize, rhs: &mut [S]) {
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i * n + k] * rhs[k];
        }
        rhs[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for k in i + 1..n {
            s -= l[k * n + i] * rhs[k];
        }
        rhs[i] = s / l[i * n + i];
    }
}

/// One Jacobian row: derivatives touch at most two `(A row p, b_p)` blocks.
struct JacobianRow<S> {
    blocks: [(usize, usize); 2], // (p, offset into coeffs) ; p == usize::MAX marks unused
    coeffs: Vec<S>,              // per block: m coefficients for A[p][·], then one for b[p]
}

/// Residual system of the Gram-preserving affine problem.
struct AffineProblem<'a, S> {
    m: usize,
    mean: &'a [S],
    cov: &'a [S],
    moment: Vec<S>,
    targets: &'a [S],
}

impl<S: Scalar> AffineProblem<'_, S> {
    fn rows(&self) -> usize {
        self.m * (self.m + 1) / 2 + self.m
    }

    /// Returns `(AΣ, ν = Aμ + b)` for parameters `θ = [A | b]`.
    fn intermediates(&self, theta: &[S]) -> (Vec<S>, Vec<S>) {
        let m = self.m;
        let a = &theta[..m * m];
        let w = matmul(a, self.cov, m);
        let nu = (0..m)
            .map(|i| dot(&a[i * m..(i + 1) * m], self.mean) + theta[m * m + i])
            .collect();
        (w, nu)
    }

    fn residuals(&self, theta: &[S]) -> Vec<S> {
        let m = self.m;
        let a = &theta[..m * m];
        let (w, nu) = self.intermediates(theta);
        let mut r = Vec::with_capacity(self.rows());
        let mut diag = vec![S::zero(); m];
        for i in 0..m {
            for j in i..m {
                let p = dot(&w[i * m..(i + 1) * m], &a[j * m..(j + 1) * m]);
                if i == j {
                    diag[i] = p;
                }
                r.push(p + nu[i] * nu[j] - self.moment[i * m + j]);
            }
        }
        for i in 0..m {
            r.push(diag[i] - self.targets[i]);
        }
        r
    }

    fn jacobian(&self, theta: &[S]) -> Vec<JacobianRow<S>> {
        let m = self.m;
        let (w, nu) = self.intermediates(theta);
        let two = S::lit(2.0);
        let mut rows = Vec::with_capacity(self.rows());
        let block = |wrow: &[S], nu_other: S, scale: S| -> Vec<S> {
            let mut c: Vec<S> = wrow
                .iter()
                .zip(self.mean)
                .map(|(&wq, &mq)| scale * (wq + mq * nu_other))
                .collect();
            c.push(scale * nu_other);
            c
        };
        for i in 0..m {
            for j in i..m {
                if i == j {
                    rows.push(JacobianRow {
                        blocks: [(i, 0), (usize::MAX, 0)],
                        coeffs: block(&w[i * m..(i + 1) * m], nu[i], two),
                    });
                } else {
                    // ∂/∂A[i][q] = (AΣ)[j][q] + μ_q ν_j ; ∂/∂b_i = ν_j, and symmetrically
                    let mut coeffs = block(&w[j * m..(j + 1) * m], nu[j], S::one());
                    coeffs.extend(block(&w[i * m..(i + 1) * m], nu[i], S::one()));
                    rows.push(JacobianRow {
                        blocks: [(i, 0), (j, m + 1)],
                        coeffs,
                    });
                }
            }
        }
        for i in 0..m {
            let mut coeffs: Vec<S> = w[i * m..(i + 1) * m].iter().map(|&v| two * v).collect();
            coeffs.push(S::zero());
            rows.push(JacobianRow {
                blocks: [(i, 0), (usize::MAX, 0)],
                coeffs,
            });
        }
        rows
    }
}

fn jjt<S: Scalar>(rows: &[JacobianRow<S>], m: usize) -> Vec<S> {
    let n = rows.len();
    // rows touching each block
    let mut touching: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
    for (r, row) in rows.iter().enumerate() {
        for &(p, off) in &row.blocks {
            if p != usize::MAX {
                touching[p].push((r, off));
            }
        }
    }
    let mut out = vec![S::zero(); n * n];
    let len = m + 1;
    for list in &touching {
        for (x, &(r, ro)) in list.iter().enumerate() {
            let cr = &rows[r].coeffs[ro..ro + len];
            for &(s, so) in &list[x..] {
                let v = dot(cr, &rows[s].coeffs[so..so + len]);
                out[r * n + s] += v;
                if r != s {
                    out[s * n + r] += v;
                }
            }
        }
    }
    out
}

/// `θ += −Jᵀ y`
fn apply_transpose<S: Scalar>(rows: &[JacobianRow<S>], y: &[S], m: usize, step: &mut [S]) {
    step.iter_mut().for_each(|v| *v = S::zero());
    let len = m + 1;
    for (row, &yr) in rows.iter().zip(y) {
        for &(p, off) in &row.blocks {
            if p == usize::MAX {
                continue;
            }
            let c = &row.coeffs[off..off + len];
            for q in 0..m {
                step[p * m + q] -= yr * c[q];
            }
            step[m * m + p] -= yr * c[m];
        }
    }
}

fn sum_sq<S: Scalar>(r: &[S]) -> S {
    dot(r, r)
}

struct RunOutcome<S> {
    theta: Vec<S>,
    cost: S,
    iterations: usize,
}

fn levenberg_marquardt<S: Scalar>(
    problem: &AffineProblem<'_, S>,
    mut theta: Vec<S>,
    opts: &SolverOptions,
) -> RunOutcome<S> {
    let m = problem.m;
    let tol = S::lit(opts.residual_tolerance);
    let step_tol = S::lit(opts.step_tolerance);
    let max_damping = S::lit(opts.max_damping);
    let mut r = problem.residuals(&theta);
    let mut cost = sum_sq(&r);
    let mut lambda: Option<S> = None;
    let mut step = vec![S::zero(); theta.len()];
    let mut trial = theta.clone();
    let mut iterations = 0;
    let mut history = std::collections::VecDeque::with_capacity(opts.stall_window + 1);
    while iterations < opts.max_iterations && !(cost < tol) {
        iterations += 1;
        if opts.stall_window > 0 {
            history.push_back(cost);
            if history.len() > opts.stall_window {
                let old = history.pop_front().unwrap().as_f64();
                let now = cost.as_f64();
                let rate = (old / now).ln() / opts.stall_window as f64;
                let needed = (now / opts.residual_tolerance).ln() / rate;
                let remaining = (opts.max_iterations - iterations + 1) as f64;
                if !(needed <= opts.stall_factor * remaining) {
                    break;
                }
            }
        }
        let rows = problem.jacobian(&theta);
        let n = rows.len();
        let normal = jjt(&rows, m);
        let lam = *lambda.get_or_insert_with(|| {
            let max_diag = (0..n).fold(S::zero(), |a, i| a.max(normal[i * n + i]));
            S::lit(1e-3) * max_diag.max(S::lit(1e-12))
        });
        let mut damped = normal;
        for i in 0..n {
            damped[i * n + i] += lam;
        }
        let Some(()) = cholesky(&mut damped, n) else {
            lambda = Some(lam * S::lit(10.0));
            continue;
        };
        let mut y = r.clone();
        cholesky_solve(&damped, n, &mut y);
        apply_transpose(&rows, &y, m, &mut step);
        for ((t, th), st) in trial.iter_mut().zip(&theta).zip(&step) {
            *t = *th + *st;
        }
        let trial_r = problem.residuals(&trial);
        let trial_cost = sum_sq(&trial_r);
        let step_norm = sum_sq(&step).sqrt();
        if trial_cost.is_finite() && trial_cost < cost {
            std::mem::swap(&mut theta, &mut trial);
            r = trial_r;
            cost = trial_cost;
            lambda = Some((lam * S::lit(0.3)).max(S::lit(1e-15)));
        } else {
            let next = lam * S::lit(10.0);
            if next > max_damping {
                break;
            }
            lambda = Some(next);
        }
        if step_norm < step_tol {
            break;
        }
    }
    RunOutcome {
        theta,
        cost,
        iterations,
    }
}

/// Searches for `A`, `b` such that `A X + b` has the second moment of `d`
/// and per-feature variances `target_variances`. The first start is the
/// identity map; later restarts draw random starting points from `seed`.
pub fn solve_affine_gram_preserving<S: Scalar>(
    d: &FeatureDistribution<S>,
    target_variances: &[S],
    seed: u64,
    opts: &SolverOptions,
) -> Result<AffineSolution<S>> {
    let m = d.dim();
    if m == 0 {
        return Err(Error::config("dimension must be at least 1"));
    }
    if target_variances.len() != m {
        return Err(Error::shape(format!(
            "{} target variances for dimension {m}",
            target_variances.len()
        )));
    }
    if target_variances.iter().any(|&t| t < S::zero()) {
        return Err(Error::config("target variances must be non-negative"));
    }
    let problem = AffineProblem {
        m,
        mean: &d.mean,
        cov: &d.covariance,
        moment: noncentral_second_moment(d),
        targets: target_variances,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<RunOutcome<S>> = None;
    let mut total_iterations = 0;
    let mut restarts = 0;
    for restart in 0..opts.restarts.max(1) {
        let mut theta = vec![S::zero(); m * (m + 1)];
        if restart == 0 {
            for i in 0..m {
                theta[i * m + i] = S::one();
            }
        } else {
            for (k, t) in theta.iter_mut().enumerate() {
                let eye = if k < m * m && k / m == k % m { 1.0 } else { 0.0 };
                *t = S::lit(eye + rng.random_range(-1.0..1.0));
            }
        }
        let run = levenberg_marquardt(&problem, theta, opts);
        total_iterations += run.iterations;
        restarts = restart + 1;
        let done = run.cost < S::lit(opts.residual_tolerance);
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
        if done {
            break;
        }
    }
    let best = best.expect("at least one restart");
    Ok(AffineSolution {
        a: best.theta[..m * m].to_vec(),
        b: best.theta[m * m..].to_vec(),
        residual: best.cost,
        restarts,
        iterations: total_iterations,
    })
}

/// Compares `Σ + μμᵀ` of two distributions entrywise. Returns whether every
/// deviation is within `tol`, and the largest deviation.
pub fn verify_equal_gram<S: Scalar>(
    d1: &FeatureDistribution<S>,
    d2: &FeatureDistribution<S>,
    tol: S,
) -> Result<(bool, S)> {
    if d1.dim() != d2.dim() {
        return Err(Error::shape(format!(
            "dimensions differ: {} vs {}",
            d1.dim(),
            d2.dim()
        )));
    }
    let k1 = noncentral_second_moment(d1);
    let k2 = noncentral_second_moment(d2);
    let dev = k1
        .iter()
        .zip(&k2)
        .fold(S::zero(), |a, (x, y)| a.max((*x - *y).abs()));
    Ok((dev <= tol, dev))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feasibility {
    Feasible,
    /// Some target variance exceeds that feature's second moment.
    InfeasibleDiagonal,
    /// No mean vector leaves `Σ + μμᵀ − ννᵀ` positive semi-definite.
    InfeasibleDefinite,
    /// Not decided (dimension too large or singular moment matrix).
    Unknown,
}

/// Largest dimension for which [`feasibility`] enumerates sign patterns.
pub const MAX_CERTIFIED_DIM: usize = 20;

/// Exact existence test for a Gram-preserving affine map with the given
/// output variances, for positive-definite `Σ`.
///
/// A solution exists iff some `ν` with `νᵢ² = Kᵢᵢ − tᵢ` satisfies
/// `νᵀK⁻¹ν ≤ 1` (`K = Σ + μμᵀ`); only the signs of `ν` are free.
pub fn feasibility<S: Scalar>(d: &FeatureDistribution<S>, targets: &[S]) -> Feasibility {
    let m = d.dim();
    let k = noncentral_second_moment(d);
    let mut mags = Vec::with_capacity(m);
    for i in 0..m {
        let slack = k[i * m + i] - targets[i];
        if slack < S::zero() {
            return Feasibility::InfeasibleDiagonal;
        }
        mags.push(slack.sqrt());
    }
    if m > MAX_CERTIFIED_DIM {
        return Feasibility::Unknown;
    }
    let mut sigma = d.covariance.clone();
    if cholesky(&mut sigma, m).is_none() {
        return Feasibility::Unknown;
    }
    let mut l = k.clone();
    if cholesky(&mut l, m).is_none() {
        return Feasibility::Unknown;
    }
    // K⁻¹ column by column
    let mut kinv = vec![S::zero(); m * m];
    for c in 0..m {
        let mut e = vec![S::zero(); m];
        e[c] = S::one();
        cholesky_solve(&l, m, &mut e);
        for r in 0..m {
            kinv[r * m + c] = e[r];
        }
    }
    let mut best = S::infinity();
    let mut u = vec![S::zero(); m];
    // the first sign is fixed: the form is invariant under global negation
    for pattern in 0u64..(1u64 << (m - 1)) {
        u[0] = mags[0];
        for i in 1..m {
            u[i] = if pattern >> (i - 1) & 1 == 1 { -mags[i] } else { mags[i] };
        }
        let mut q = S::zero();
        for i in 0..m {
            q += u[i] * dot(&kinv[i * m..(i + 1) * m], &u);
        }
        best = best.min(q);
    }
    if best <= S::one() + S::lit(1e-12) {
        Feasibility::Feasible
    } else {
        Feasibility::InfeasibleDefinite
    }
}

/// SplitMix64 step, used to derive independent per-instance seeds.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random experiment instance: `μ ~ U(0,1)^m`, `Σ = MMᵀ` with
/// `M ~ U(0,1)^{m×m}`, target variances `~ U(0,1)^m`.
pub fn random_instance(m: usize, seed: u64) -> (FeatureDistribution<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let factor: Vec<f64> = (0..m * m).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut cov = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            cov[i * m + j] = dot(&factor[i * m..(i + 1) * m], &factor[j * m..(j + 1) * m]);
        }
    }
    let targets = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    (
        FeatureDistribution {
            mean,
            covariance: cov,
        },
        targets,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub m: usize,
    pub seed: u64,
    pub residual: f64,
    pub max_gram_deviation: f64,
    pub max_variance_deviation: f64,
    pub success: bool,
    pub feasibility: Feasibility,
    pub restarts: usize,
    pub iterations: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionSummary {
    pub m: usize,
    pub instances: usize,
    pub successes: usize,
    pub certified_feasible: usize,
    pub certified_infeasible: usize,
    pub successes_on_feasible: usize,
    pub max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub generator: String,
    pub solver: SolverOptions,
    pub success_threshold: f64,
    pub seed: u64,
    pub summary: Vec<DimensionSummary>,
    pub instances: Vec<InstanceReport>,
}

/// Residual below which an instance counts as solved.
pub const SUCCESS_RESIDUAL: f64 = 1e-6;

pub fn run_instance(m: usize, seed: u64, opts: &SolverOptions) -> Result<InstanceReport> {
    let start = Instant::now();
    let (d, targets) = random_instance(m, seed);
    let sol = solve_affine_gram_preserving(&d, &targets, seed, opts)?;
    let out = sol.apply(&d);
    let (_, gram_dev) = verify_equal_gram(&d, &out, 0.0)?;
    let var_dev = out
        .variances()
        .iter()
        .zip(&targets)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    Ok(InstanceReport {
        m,
        seed,
        residual: sol.residual,
        max_gram_deviation: gram_dev,
        max_variance_deviation: var_dev,
        success: sol.residual < SUCCESS_RESIDUAL,
        feasibility: feasibility(&d, &targets),
        restarts: sol.restarts,
        iterations: sol.iterations,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs `instances` seeded instances for each dimension. Instances are
/// independent and evaluated in parallel; the report order is fixed.
pub fn run_experiment(
    dims: &[usize],
    instances: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<ExperimentReport> {
    use rayon::prelude::*;
    let jobs: Vec<(usize, u64)> = dims
        .iter()
        .flat_map(|&m| (0..instances).map(move |i| (m, mix_seed(seed, m as u64, i as u64))))
        .collect();
    let rows: Vec<InstanceReport> = jobs
        .par_iter()
        .map(|&(m, s)| run_instance(m, s, opts))
        .collect::<Result<_>>()?;
    let summary = dims
        .iter()
        .map(|&m| {
            let mine: Vec<_> = rows.iter().filter(|r| r.m == m).collect();
            let feasible = |r: &&&InstanceReport| r.feasibility == Feasibility::Feasible;
            DimensionSummary {
                m,
                instances: mine.len(),
                successes: mine.iter().filter(|r| r.success).count(),
                certified_feasible: mine.iter().filter(feasible).count(),
                certified_infeasible: mine
                    .iter()
                    .filter(|r| {
                        matches!(
                            r.feasibility,
                            Feasibility::InfeasibleDiagonal | Feasibility::InfeasibleDefinite
                        )
                    })
                    .count(),
                successes_on_feasible: mine.iter().filter(feasible).filter(|r| r.success).count(),
                max_residual: mine.iter().fold(0.0, |a, r| a.max(r.residual)),
            }
        })
        .collect();
    Ok(ExperimentReport {
        generator: "mean ~ U(0,1)^m; covariance = M Mᵀ, M ~ U(0,1)^(m×m); target variances ~ U(0,1)^m"
            .into(),
        solver: *opts,
        success_threshold: SUCCESS_RESIDUAL,
        seed,
        summary,
        instances: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn second_moment_examples() {
        let d = FeatureDistribution::scalar(FRAC_1_SQRT_2, 0.0);
        assert!((noncentral_second_moment(&d)[0] - 0.5).abs() < 1e-15);
        let d = FeatureDistribution::new(vec![0.0, 0.0], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        assert_eq!(noncentral_second_moment(&d), d.covariance().to_vec());
    }

    #[test]
    fn monte_carlo_gram_converges_to_moment() {
        use rand_distr::{Distribution, StandardNormal};
        // X = L z + μ with L = chol(Σ)
        let mean = [0.4, -0.2];
        let l = [[0.8, 0.0], [0.3, 0.5]];
        let cov = vec![
            0.64,
            0.24,
            0.24,
            0.09 + 0.25,
        ];
        let d = FeatureDistribution::new(mean.to_vec(), cov).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut feats = vec![0.0; 2 * n];
        for k in 0..n {
            let z: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            feats[k] = l[0][0] * z[0] + mean[0];
            feats[n + k] = l[1][0] * z[0] + l[1][1] * z[1] + mean[1];
        }
        let g = crate::stats::gram_matrix(&feats, 2, n).normalized();
        let k = noncentral_second_moment(&d);
        let bound = 3.0 / (n as f64).sqrt();
        for (a, b) in g.iter().zip(&k) {
            assert!((a - b).abs() < bound, "{a} vs {b}");
        }
    }

    #[test]
    fn matched_mean_examples() {
        let mu2 = matched_mean_for_target_variance(FRAC_1_SQRT_2, 0.0, 0.5).unwrap();
        assert_eq!(mu2, 0.5);
        assert_eq!(matched_mean_for_target_variance(-0.3, 0.7, 0.7).unwrap(), 0.3);
        assert!(matches!(
            matched_mean_for_target_variance(0.0, 0.0, 1.0),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn identity_is_a_solution_when_targets_are_current_variances() {
        let (d, _) = random_instance(4, 17);
        let t = d.variances();
        let sol = solve_affine_gram_preserving(&d, &t, 1, &SolverOptions::default()).unwrap();
        assert!(sol.residual < 1e-10);
        assert_eq!(sol.restarts, 1);
    }

    #[test]
    fn one_dimensional_solution_matches_closed_form() {
        // σ₁² + μ₁² = 1/2 as in the grey/black-white example, with a small
        // non-zero input spread so an affine map can create variance.
        let d = FeatureDistribution::scalar(0.49f64.sqrt(), 0.1);
        let sol = solve_affine_gram_preserving(&d, &[0.25], 5, &SolverOptions::default()).unwrap();
        assert!(sol.residual < 1e-10);
        let mu2 = sol.output_mean(&d)[0];
        let closed = matched_mean_for_target_variance(0.49f64.sqrt(), 0.1, 0.5).unwrap();
        assert!((closed - 0.5).abs() < 1e-12);
        assert!((mu2.abs() - closed).abs() < 1e-5);
    }

    #[test]
    fn degenerate_input_cannot_gain_variance() {
        // A constant feature stays constant under any affine map.
        let d = FeatureDistribution::scalar(FRAC_1_SQRT_2, 0.0);
        let sol = solve_affine_gram_preserving(&d, &[0.25], 5, &SolverOptions::default()).unwrap();
        assert!((sol.residual - 1.0 / 16.0).abs() < 1e-9);
        assert_eq!(feasibility(&d, &[0.25]), Feasibility::Unknown);
    }

    #[test]
    fn verify_equal_gram_examples() {
        let grey = FeatureDistribution::scalar(FRAC_1_SQRT_2, 0.0);
        let split = FeatureDistribution::scalar(0.5, 0.5);
        assert_eq!(verify_equal_gram(&grey, &grey, 0.0).unwrap(), (true, 0.0));
        let (ok, dev) = verify_equal_gram(&grey, &split, 1e-12).unwrap();
        assert!(ok && dev < 1e-12);
        let tol = 1e-6;
        let bumped = FeatureDistribution::new(vec![0.0], vec![0.5 + 2.0 * tol]).unwrap();
        let reference = FeatureDistribution::new(vec![0.0], vec![0.5]).unwrap();
        assert!(!verify_equal_gram(&reference, &bumped, tol).unwrap().0);
        let other = FeatureDistribution::scalar(0.0, 1.0);
        let two = FeatureDistribution::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(verify_equal_gram(&other, &two, 1.0).is_err());
    }

    #[test]
    fn feasibility_matches_one_dimensional_closed_form() {
        for (mu, sigma, t) in [(0.5, 0.4, 0.3), (0.2, 0.1, 0.5), (0.9, 0.2, 0.8)] {
            let d = FeatureDistribution::scalar(mu, sigma);
            let closed = matched_mean_for_target_variance(mu, sigma, f64::sqrt(t)).is_ok();
            assert_eq!(feasibility(&d, &[t]) == Feasibility::Feasible, closed);
        }
    }

    #[test]
    fn solver_succeeds_on_certified_feasible_instances() {
        let opts = SolverOptions::default();
        let mut checked = 0;
        for m in [1, 2, 3, 4] {
            for i in 0..40 {
                let seed = mix_seed(99, m as u64, i);
                let (d, t) = random_instance(m, seed);
                if feasibility(&d, &t) != Feasibility::Feasible {
                    continue;
                }
                checked += 1;
                let sol = solve_affine_gram_preserving(&d, &t, seed, &opts).unwrap();
                assert!(sol.residual < 1e-10, "m={m} seed={seed} residual={}", sol.residual);
                let out = sol.apply(&d);
                let tol = 10.0 * sol.residual.sqrt();
                assert!(verify_equal_gram(&d, &out, tol.max(1e-14)).unwrap().0);
                for (v, tv) in out.variances().iter().zip(&t) {
                    assert!((v - tv).abs() <= tol.max(1e-14));
                }
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn solver_is_deterministic() {
        let (d, t) = random_instance(3, 5);
        let a = solve_affine_gram_preserving(&d, &t, 8, &SolverOptions::default()).unwrap();
        let b = solve_affine_gram_preserving(&d, &t, 8, &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (d, t) = random_instance(3, 21);
        let problem = AffineProblem {
            m: 3,
            mean: d.mean(),
            cov: d.covariance(),
            moment: noncentral_second_moment(&d),
            targets: &t,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows = problem.jacobian(&theta);
        let eps = 1e-6;
        for k in 0..theta.len() {
            let mut plus = theta.clone();
            plus[k] += eps;
            let mut minus = theta.clone();
            minus[k] -= eps;
            let rp = problem.residuals(&plus);
            let rm = problem.residuals(&minus);
            for (r, row) in rows.iter().enumerate() {
                let numeric = (rp[r] - rm[r]) / (2.0 * eps);
                let mut analytic = 0.0;
                for &(p, off) in &row.blocks {
                    if p == usize::MAX {
                        continue;
                    }
                    if k < 9 && k / 3 == p {
                        analytic += row.coeffs[off + k % 3];
                    }
                    if k >= 9 && k - 9 == p {
                        analytic += row.coeffs[off + 3];
                    }
                }
                assert!((numeric - analytic).abs() < 1e-6, "row {r} param {k}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(FeatureDistribution::new(vec![0.0, 0.0], vec![1.0, 2.0, 0.0, 1.0]).is_err());
        assert!(FeatureDistribution::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).is_err());
        let d = FeatureDistribution::scalar(0.5, 0.5);
        assert!(solve_affine_gram_preserving(&d, &[0.1, 0.2], 0, &SolverOptions::default()).is_err());
        assert!(solve_affine_gram_preserving(&d, &[-0.1], 0, &SolverOptions::default()).is_err());
    }
}
