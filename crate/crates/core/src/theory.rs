//! Convergence-bound arithmetic, randomized checks of the two deterministic
//! lemmas behind it, enclave capacity, and an empirical run on a strongly
//! convex federated problem.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, PartitionMode};
use crate::enclave::Thresholds;
use crate::nn::{BatchView, GradientResult, Model, NnError, ParamVector};
use crate::orchestrator::{
    DatasetConfig, ExperimentConfig, FaultConfig, LrSchedule, ModelConfig, OrchestratorError, Rule, Simulation,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("{name} = {value} violates {requirement}")]
    Precondition {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("square root of negative value {0} in gamma2")]
    NegativeRadicand(f64),
    #[error("rho is zero")]
    ZeroRho,
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

fn positive(name: &'static str, value: f64) -> Result<(), TheoryError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(TheoryError::Precondition {
            name,
            value,
            requirement: "> 0",
        })
    }
}

fn unit_open(name: &'static str, value: f64) -> Result<(), TheoryError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(TheoryError::Precondition {
            name,
            value,
            requirement: "in (0, 1)",
        })
    }
}

/// `sigma1 * sqrt(2/s) * sqrt(d ln 6 + ln(3/delta))`.
pub fn gamma1(sigma1: f64, s: usize, d: usize, delta: f64) -> Result<f64, TheoryError> {
    positive("sigma1", sigma1)?;
    positive("s", s as f64)?;
    positive("d", d as f64)?;
    unit_open("delta", delta)?;
    let (s, d) = (s as f64, d as f64);
    Ok(sigma1 * (2.0 / s).sqrt() * (d * 6f64.ln() + (3.0 / delta).ln()).sqrt())
}

/// `sigma2 sqrt(2/s) sqrt(d ln(18 L2/sigma2) + d/2 ln(s/d) + ln(6 sigma2^2 r sqrt(s) / (gamma2 sigma1 delta)))`.
#[allow(clippy::too_many_arguments)]
pub fn gamma2(
    sigma2: f64,
    s: usize,
    d: usize,
    l2: f64,
    r: f64,
    gamma2: f64,
    sigma1: f64,
    delta: f64,
) -> Result<f64, TheoryError> {
    for (name, v) in [
        ("sigma2", sigma2),
        ("L2", l2),
        ("r", r),
        ("gamma2", gamma2),
        ("sigma1", sigma1),
    ] {
        positive(name, v)?;
    }
    positive("s", s as f64)?;
    positive("d", d as f64)?;
    unit_open("delta", delta)?;
    let (s, d) = (s as f64, d as f64);
    let radicand = d * (18.0 * l2 / sigma2).ln()
        + 0.5 * d * (s / d).ln()
        + (6.0 * sigma2 * sigma2 * r * s.sqrt() / (gamma2 * sigma1 * delta)).ln();
    if radicand < 0.0 {
        return Err(TheoryError::NegativeRadicand(radicand));
    }
    Ok(sigma2 * (2.0 / s).sqrt() * radicand.sqrt())
}

/// Learning rate the bound assumes: `mu / (2 L^2)`.
pub fn default_alpha(mu: f64, l: f64) -> f64 {
    mu / (2.0 * l * l)
}

/// Contraction factor of one exact gradient step at [`default_alpha`].
pub fn lemma2_factor(mu: f64, l: f64) -> f64 {
    (1.0 - mu * mu / (4.0 * l * l)).sqrt()
}

/// `1 - (sqrt(1 - mu^2/4L^2) + 8 alpha (2 + eps3) Gamma2 + alpha (1 + eps3) L)`.
pub fn rho(mu: f64, l: f64, alpha: f64, eps3: f64, gamma2: f64) -> f64 {
    1.0 - (lemma2_factor(mu, l) + 8.0 * alpha * (2.0 + eps3) * gamma2 + alpha * (1.0 + eps3) * l)
}

/// Whether the per-round factor `1 - rho` contracts.
pub fn is_contractive(rho: f64) -> bool {
    (1.0 - rho).abs() < 1.0
}

/// Limit of [`error_bound`] as `i` grows, when contractive.
pub fn asymptote(rho: f64, alpha: f64, eps3: f64, gamma1: f64, beta: f64) -> Result<f64, TheoryError> {
    if rho == 0.0 {
        return Err(TheoryError::ZeroRho);
    }
    Ok(alpha * (2.0 + eps3) * (4.0 * gamma1 + beta) / rho)
}

/// `(1 - rho)^i d0 + alpha (2 + eps3)(4 Gamma1 + beta) / rho`.
pub fn error_bound(
    i: u32,
    d0: f64,
    rho: f64,
    alpha: f64,
    eps3: f64,
    gamma1: f64,
    beta: f64,
) -> Result<f64, TheoryError> {
    Ok((1.0 - rho).powf(i as f64) * d0 + asymptote(rho, alpha, eps3, gamma1, beta)?)
}

/// Constants of the bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub mu: f64,
    pub l: f64,
    /// Empirical Lipschitz constant; `L2 = max(L, L1)`.
    pub l1: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta: f64,
    pub r: f64,
    pub s: usize,
    pub d: usize,
    pub n: usize,
    /// Overall failure probability; each client gets `delta_total / n`.
    pub delta_total: f64,
    pub eps3: f64,
    /// Defaults to [`default_alpha`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub gamma1: f64,
    pub gamma2: f64,
    pub alpha: f64,
    pub rho: f64,
    pub contractive: bool,
    pub asymptote: f64,
    pub warnings: Vec<String>,
}

impl BoundParams {
    pub fn l2_const(&self) -> f64 {
        self.l.max(self.l1)
    }

    pub fn delta(&self) -> f64 {
        self.delta_total / self.n as f64
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(self.mu, self.l))
    }

    pub fn evaluate(&self) -> Result<BoundReport, TheoryError> {
        positive("mu", self.mu)?;
        positive("L", self.l)?;
        positive("n", self.n as f64)?;
        if self.mu > self.l {
            return Err(TheoryError::Precondition {
                name: "mu",
                value: self.mu,
                requirement: "<= L",
            });
        }
        if !(self.eps3 > 1.0) {
            return Err(TheoryError::Precondition {
                name: "eps3",
                value: self.eps3,
                requirement: "> 1",
            });
        }
        let delta = self.delta();
        let g1 = gamma1(self.sigma1, self.s, self.d, delta)?;
        let g2 = gamma2(
            self.sigma2,
            self.s,
            self.d,
            self.l2_const(),
            self.r,
            self.gamma2,
            self.sigma1,
            delta,
        )?;
        let alpha = self.alpha();
        let r = rho(self.mu, self.l, alpha, self.eps3, g2);
        let mut warnings = Vec::new();
        if self.s <= self.d {
            warnings.push(format!("s = {} <= d = {}: ln(s/d) is not positive", self.s, self.d));
        }
        if g1 > self.sigma1 * self.sigma1 / self.gamma1 {
            warnings.push("Gamma1 exceeds sigma1^2/gamma1; concentration step does not apply".into());
        }
        if g2 > self.sigma2 * self.sigma2 / self.gamma2 {
            warnings.push("Gamma2 exceeds sigma2^2/gamma2; concentration step does not apply".into());
        }
        if !is_contractive(r) {
            warnings.push(format!(
                "|1 - rho| = {} >= 1: bound is not contractive",
                (1.0 - r).abs()
            ));
        }
        Ok(BoundReport {
            gamma1: g1,
            gamma2: g2,
            alpha,
            rho: r,
            contractive: is_contractive(r),
            asymptote: asymptote(r, alpha, self.eps3, g1, self.beta)?,
            warnings,
        })
    }
}

/// `F(theta) = 1/2 (theta - theta*)^T A (theta - theta*)` with SPD `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub a: DMatrix<f64>,
    pub theta_star: DVector<f64>,
    pub mu: f64,
    pub l: f64,
}

impl QuadraticProblem {
    pub fn new(a: DMatrix<f64>, theta_star: DVector<f64>) -> Result<Self, TheoryError> {
        if !a.is_square() || a.nrows() != theta_star.len() {
            return Err(TheoryError::Dimension(format!(
                "{}x{} matrix with optimum of length {}",
                a.nrows(),
                a.ncols(),
                theta_star.len()
            )));
        }
        if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
            return Err(TheoryError::NotSpd);
        }
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        let mu = eig.min();
        let l = eig.max();
        if !(mu > 0.0) {
            return Err(TheoryError::NotSpd);
        }
        Ok(Self { a, theta_star, mu, l })
    }

    /// `A = B B^T + shift I` with standard normal `B`, optimum standard normal.
    pub fn random<R: Rng + ?Sized>(dim: usize, shift: f64, rng: &mut R) -> Result<Self, TheoryError> {
        let b: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
        let a: DMatrix<f64> = &b * b.transpose() + DMatrix::identity(dim, dim) * shift;
        let a = (&a + a.transpose()) * 0.5;
        let theta_star = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        Self::new(a, theta_star)
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * (theta - &self.theta_star)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma2Report {
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `lhs / |theta - theta*|`.
    pub max_ratio: f64,
    pub bound: f64,
}

impl Lemma2Report {
    pub fn slack(&self) -> f64 {
        self.bound - self.max_ratio
    }
}

/// Left side of the one-step contraction inequality.
pub fn lemma2_lhs(problem: &QuadraticProblem, theta: &DVector<f64>, alpha: f64) -> f64 {
    let diff = theta - &problem.theta_star;
    let step = problem.grad(theta) - problem.grad(&problem.theta_star);
    (diff - step * alpha).norm()
}

/// Draws `trials` points around the optimum and checks
/// `|theta - theta* - alpha (grad F(theta) - grad F(theta*))| <= sqrt(1 - mu^2/4L^2) |theta - theta*|`.
pub fn check_lemma2(problem: &QuadraticProblem, trials: usize, seed: u64) -> Lemma2Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = default_alpha(problem.mu, problem.l);
    let bound = lemma2_factor(problem.mu, problem.l);
    let mut report = Lemma2Report {
        trials,
        violations: 0,
        max_ratio: 0.0,
        bound,
    };
    for _ in 0..trials {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let theta =
            &problem.theta_star + DVector::from_fn(problem.dim(), |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let dist = (&theta - &problem.theta_star).norm();
        let lhs = lemma2_lhs(problem, &theta, alpha);
        if dist > 0.0 {
            report.max_ratio = report.max_ratio.max(lhs / dist);
        }
        if lhs > bound * dist * (1.0 + 1e-12) + 1e-300 {
            report.violations += 1;
        }
    }
    report
}

/// Runs [`check_lemma2`] on `problems` random SPD problems of size `dim`,
/// `points` draws each, and merges the reports.
pub fn check_lemma2_random(problems: usize, dim: usize, points: usize, seed: u64) -> Result<Lemma2Report, TheoryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = Lemma2Report {
        trials: 0,
        violations: 0,
        max_ratio: 0.0,
        bound: 0.0,
    };
    let mut min_slack = f64::INFINITY;
    for _ in 0..problems {
        let shift = 10f64.powf(rng.random_range(-2.0..1.0));
        let problem = QuadraticProblem::random(dim, shift, &mut rng)?;
        let r = check_lemma2(&problem, points, rng.random());
        total.trials += r.trials;
        total.violations += r.violations;
        if r.slack() < min_slack {
            min_slack = r.slack();
            total.max_ratio = r.max_ratio;
            total.bound = r.bound;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Lemma1Outcome {
    /// A hypothesis fails; the inequality makes no claim.
    Inapplicable(String),
    Holds {
        lhs: f64,
        rhs: f64,
    },
    Violated {
        lhs: f64,
        rhs: f64,
    },
}

/// Checks the per-client error inequality for an accepted update `z` with
/// guiding update `guide = alpha * g_tilde`.
#[allow(clippy::too_many_arguments)]
pub fn check_lemma1(
    z: &ParamVector,
    guide: &ParamVector,
    g_tilde: &ParamVector,
    grad_theta: &ParamVector,
    grad_star: &ParamVector,
    alpha: f64,
    eps3: f64,
    beta: f64,
) -> Lemma1Outcome {
    let d = z.len();
    if [guide, g_tilde, grad_theta, grad_star].iter().any(|v| v.len() != d) {
        return Lemma1Outcome::Inapplicable("vector lengths differ".into());
    }
    if !(z.dot(guide) > 0.0) {
        return Lemma1Outcome::Inapplicable("z . guide is not positive".into());
    }
    if !(z.norm() / guide.norm() < eps3) {
        return Lemma1Outcome::Inapplicable("|z| / |guide| is not below eps3".into());
    }
    if grad_star.norm() > beta {
        return Lemma1Outcome::Inapplicable("|grad F(theta*)| exceeds beta".into());
    }
    let scaled = guide.sub(&g_tilde.scaled(alpha)).norm();
    if scaled > 1e-12 * guide.norm().max(1.0) {
        return Lemma1Outcome::Inapplicable("guide is not alpha * g_tilde".into());
    }
    let lhs = z.sub(&grad_theta.sub(grad_star).scaled(alpha)).norm();
    let rhs = (2.0 + eps3) * alpha * g_tilde.sub(grad_theta).norm()
        + (1.0 + eps3) * alpha * grad_theta.sub(grad_star).norm()
        + (2.0 + eps3) * alpha * beta;
    if lhs <= rhs * (1.0 + 1e-12) {
        Lemma1Outcome::Holds { lhs, rhs }
    } else {
        Lemma1Outcome::Violated { lhs, rhs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityReport {
    pub clients: u64,
    pub bottleneck: bool,
}

/// Clients one enclave can serve while a client trains: `floor(client / enclave)`.
pub fn capacity(client_round_time: f64, enclave_per_client_time: f64) -> Result<CapacityReport, TheoryError> {
    positive("client_round_time", client_round_time)?;
    positive("enclave_per_client_time", enclave_per_client_time)?;
    // Round before flooring so ratios such as 0.38 / 0.01 are not lost to representation error.
    let ratio = client_round_time / enclave_per_client_time;
    let nearest = ratio.round();
    let clients = if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        ratio.floor()
    } as u64;
    Ok(CapacityReport {
        clients,
        bottleneck: clients == 0,
    })
}

/// Separable quadratic loss with per-example curvature.
///
/// Each example has `2 * dim` features `[x, w]` and loss
/// `1/2 sum_k w_k (theta_k - x_k)^2`; the `w_k` must be positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadraticModel {
    pub dim: usize,
}

impl QuadraticModel {
    fn check(&self, theta: &ParamVector, batch: &BatchView<'_>) -> Result<(), NnError> {
        if theta.len() != self.dim {
            return Err(NnError::LengthMismatch {
                expected: self.dim,
                found: theta.len(),
            });
        }
        if batch.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if batch.dim != 2 * self.dim {
            return Err(NnError::DimensionMismatch {
                expected: 2 * self.dim,
                found: batch.dim,
            });
        }
        Ok(())
    }
}

impl Model for QuadraticModel {
    fn param_count(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        2 * self.dim
    }

    fn loss_and_grad(&self, theta: &ParamVector, batch: BatchView<'_>, l2: f64) -> Result<GradientResult, NnError> {
        self.check(theta, &batch)?;
        let d = self.dim;
        let inv = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; d];
        let mut loss = 0.0;
        for r in 0..batch.len() {
            let row = batch.row(r);
            let (x, w) = row.split_at(d);
            for k in 0..d {
                let diff = theta[k] - x[k];
                grad[k] += inv * w[k] * diff;
                loss += inv * 0.5 * w[k] * diff * diff;
            }
        }
        for k in 0..d {
            grad[k] += l2 * theta[k];
            loss += 0.5 * l2 * theta[k] * theta[k];
        }
        if !loss.is_finite() {
            return Err(NnError::NonFinite);
        }
        Ok(GradientResult {
            gradient: ParamVector::new(grad),
            loss,
        })
    }

    /// `1 / (1 + mean loss)`, a score in `(0, 1]`.
    fn evaluate(&self, theta: &ParamVector, batch: BatchView<'_>) -> Result<f64, NnError> {
        Ok(1.0 / (1.0 + self.loss_and_grad(theta, batch, 0.0)?.loss))
    }
}

/// Shape of the empirical federated quadratic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSetup {
    pub dim: usize,
    pub clients: usize,
    pub per_client: usize,
    pub rounds: usize,
    pub sampling_rate: f64,
    /// Spread of client centers around the origin.
    pub heterogeneity: f64,
    /// Spread of examples around their client's center.
    pub noise: f64,
    /// Per-example curvatures are drawn from `[curvature_min, curvature_max]`.
    pub curvature_min: f64,
    pub curvature_max: f64,
    pub delta_total: f64,
    pub seed: u64,
}

impl Default for EmpiricalSetup {
    fn default() -> Self {
        Self {
            dim: 3,
            clients: 8,
            per_client: 400,
            rounds: 60,
            sampling_rate: 0.25,
            heterogeneity: 1.0,
            noise: 0.5,
            curvature_min: 1.0,
            curvature_max: 2.0,
            delta_total: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalReport {
    pub params: BoundParams,
    pub bound: BoundReport,
    /// `|theta^i - theta*|` for `i = 0..=rounds`.
    pub distances: Vec<f64>,
    pub bounds: Vec<f64>,
    /// Rounds where the observed distance exceeded the bound.
    pub violations: Vec<usize>,
    /// Largest observed per-round ratio `d_{i+1} / d_i`.
    pub max_step_ratio: f64,
    pub flagged_rounds: usize,
    pub caveats: Vec<String>,
}

fn centered_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Runs full-participation `diversefl` with `E = 1`, `f = 0` and
/// `alpha = mu / (2 L^2)` on per-client quadratics, then compares the
/// distance to the optimum with the bound instantiated from the problem.
///
/// `mu` and `L` are exact. `sigma1`, `sigma2`, `gamma1`, `gamma2`, `beta`
/// and `r` are estimated from the data and the trajectory and doubled.
pub fn empirical_bound_check(setup: &EmpiricalSetup) -> Result<EmpiricalReport, OrchestratorError> {
    let d = setup.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut features = Vec::with_capacity(setup.clients * setup.per_client * 2 * d);
    let mut client_rows: Vec<Vec<usize>> = vec![Vec::new(); setup.clients];
    for rows in client_rows.iter_mut() {
        let center: Vec<f64> = (0..d)
            .map(|_| setup.heterogeneity * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for _ in 0..setup.per_client {
            rows.push(features.len() / (2 * d));
            for c in &center {
                features.push(c + setup.noise * rng.sample::<f64, _>(StandardNormal));
            }
            for _ in 0..d {
                features.push(rng.random_range(setup.curvature_min..=setup.curvature_max));
            }
        }
    }
    let total = setup.clients * setup.per_client;
    // One label per client so the sorted partition reproduces the client blocks.
    let labels: Vec<usize> = (0..total).map(|i| i / setup.per_client).collect();
    let train = Dataset::new(features, labels, 2 * d, setup.clients)?;

    // Per-client objective: F_j = 1/2 sum_k W_jk (theta_k - c_jk)^2 + const,
    // with W_jk the mean curvature and c_jk the curvature-weighted mean.
    let mut w = vec![vec![0.0; d]; setup.clients];
    let mut c = vec![vec![0.0; d]; setup.clients];
    for j in 0..setup.clients {
        for &i in &client_rows[j] {
            let (x, wk) = train.row(i).split_at(d);
            for k in 0..d {
                w[j][k] += wk[k];
                c[j][k] += wk[k] * x[k];
            }
        }
        for k in 0..d {
            c[j][k] /= w[j][k];
            w[j][k] /= setup.per_client as f64;
        }
    }
    let grad_j = |j: usize, theta: &[f64]| -> Vec<f64> { (0..d).map(|k| w[j][k] * (theta[k] - c[j][k])).collect() };
    let theta_star: Vec<f64> = (0..d)
        .map(|k| {
            let num: f64 = (0..setup.clients).map(|j| w[j][k] * c[j][k]).sum();
            let den: f64 = (0..setup.clients).map(|j| w[j][k]).sum();
            num / den
        })
        .collect();
    let mu = w.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let l = w.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let alpha = default_alpha(mu, l);

    let model = QuadraticModel { dim: d };
    let theta0 = ParamVector::new(
        theta_star
            .iter()
            .map(|t| t + 3.0 * setup.heterogeneity + rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    let config = ExperimentConfig {
        n: setup.clients,
        f: 0,
        rounds: setup.rounds,
        local_steps: 1,
        client_fraction: 1.0,
        batch_fraction: setup.sampling_rate,
        lr: LrSchedule::constant(alpha),
        l2: 0.0,
        sampling_rate: setup.sampling_rate,
        rule: Rule::Diversefl,
        faults: FaultConfig::default(),
        thresholds: Thresholds::default(),
        dataset: DatasetConfig::Csv {
            train: "in-memory".into(),
            test: "in-memory".into(),
            classes: None,
        },
        partition: PartitionMode::Sorted,
        model: ModelConfig {
            hidden: vec![],
            init_seed: None,
        },
        seed: setup.seed,
        eval_stride: setup.rounds,
        metrics_warmup: 0,
        trace: false,
        resampling_group: 2,
        root_fraction: 0.01,
    };
    let test = train.clone();
    let mut sim = Simulation::new(config, Arc::new(model), theta0.clone(), train.clone(), test)?;
    let dist = |theta: &ParamVector| -> f64 {
        theta
            .iter()
            .zip(&theta_star)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut distances = vec![dist(&theta0)];
    let mut trajectory = vec![theta0.clone()];
    let mut flagged_rounds = 0;
    for _ in 0..setup.rounds {
        let rec = sim.run_round()?;
        flagged_rounds += usize::from(!rec.flagged.is_empty());
        distances.push(dist(sim.global_model()));
        trajectory.push(sim.global_model().clone());
    }

    // Per-example gradient at theta* projected on the coordinate axes, and
    // the per-example curvature term of h(M, theta) / |theta - theta*|.
    let mut sigma1 = 0.0f64;
    let mut sigma2 = 0.0f64;
    let mut range1 = 0.0f64;
    let mut range2 = 0.0f64;
    for rows in &client_rows {
        for k in 0..d {
            let g: Vec<f64> = rows
                .iter()
                .map(|&i| {
                    let (x, wk) = train.row(i).split_at(d);
                    wk[k] * (theta_star[k] - x[k])
                })
                .collect();
            let h: Vec<f64> = rows.iter().map(|&i| train.row(i)[d + k]).collect();
            sigma1 = sigma1.max(centered_std(&g));
            sigma2 = sigma2.max(centered_std(&h));
            let gm = g.iter().sum::<f64>() / g.len() as f64;
            let hm = h.iter().sum::<f64>() / h.len() as f64;
            range1 = range1.max(g.iter().map(|v| (v - gm).abs()).fold(0.0, f64::max));
            range2 = range2.max(h.iter().map(|v| (v - hm).abs()).fold(0.0, f64::max));
        }
    }
    let mut beta = 0.0f64;
    let mut r = 0.0f64;
    for theta in &trajectory {
        let grads: Vec<Vec<f64>> = (0..setup.clients).map(|j| grad_j(j, theta)).collect();
        let mean: Vec<f64> = (0..d)
            .map(|k| grads.iter().map(|g| g[k]).sum::<f64>() / setup.clients as f64)
            .collect();
        for g in &grads {
            let dev = g.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            beta = beta.max(dev);
        }
        r = r.max(dist(theta) / (d as f64).sqrt());
    }
    let s = sim.config().sampling_rate;
    let sample_size = crate::data::fraction_count(s, setup.per_client);
    let params = BoundParams {
        mu,
        l,
        l1: l,
        sigma1: 2.0 * sigma1,
        sigma2: 2.0 * sigma2,
        gamma1: 2.0 * range1.max(f64::MIN_POSITIVE),
        gamma2: 2.0 * range2.max(f64::MIN_POSITIVE),
        beta: 2.0 * beta,
        r: 2.0 * r,
        s: sample_size,
        d,
        n: setup.clients,
        delta_total: setup.delta_total,
        eps3: Thresholds::default().eps3,
        alpha: Some(alpha),
    };
    let bound = params
        .evaluate()
        .map_err(|e| OrchestratorError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())))?;
    let bounds: Vec<f64> = (0..=setup.rounds)
        .map(|i| (1.0 - bound.rho).powf(i as f64) * distances[0] + bound.asymptote)
        .collect();
    let violations: Vec<usize> = distances
        .iter()
        .zip(&bounds)
        .enumerate()
        .filter(|(_, (o, b))| o > b)
        .map(|(i, _)| i)
        .collect();
    let max_step_ratio = distances
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let caveats = vec![
        "L1 is taken equal to L; exact for quadratics".to_string(),
        "sigma1, sigma2, gamma1, gamma2, beta and r are empirical estimates doubled".to_string(),
    ];
    Ok(EmpiricalReport {
        params,
        bound,
        distances,
        bounds,
        violations,
        max_step_ratio,
        flagged_rounds,
        caveats,
    })
}
