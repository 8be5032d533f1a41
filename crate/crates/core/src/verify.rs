//! Numerical certificates for the contraction, drift, kernel-gap and
//! minorization inequalities behind each bound, and for the final claim that
//! the bound dominates the measured distance.
//!
//! Grid-based checks of a supremum or infimum are necessary-condition
//! checks: a failure refutes the inequality, a pass only supports it.
//! Statistical allowances are three standard errors. A relative slack of
//! [`FP_SLACK`] absorbs rounding in cases that hold with equality.

use std::collections::BTreeMap;
use std::io::Write;

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, binomial, EtaHatInputs, ExpectationMode, StabilityBound, ENUMERATION_LIMIT};
use crate::dynamics::{self, minibatch, NoiseModel, SgdConfig};
use crate::linalg::{self, log_sum_exp, norm};
use crate::model::{Dataset, LossModel, NeighborPair};
use crate::rng::{stream, StreamTag};
use crate::stats::mean_and_stderr;
use crate::transport::{TransportEstimate, TransportMethod};
use crate::{Error, Result};

/// Relative floating-point slack added to every threshold.
pub const FP_SLACK: f64 = 1e-12;

/// Default number of grid points per axis.
pub const DEFAULT_GRID_POINTS: usize = 33;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Contraction,
    Drift,
    KernelGap,
    Minorization,
    Dominance,
}

/// Outcome of one check. `passed` holds exactly when `margin >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub passed: bool,
    pub margin: f64,
    pub details: BTreeMap<String, f64>,
    pub confidence: String,
}

impl Certificate {
    fn new(kind: CertificateKind, margin: f64, details: BTreeMap<String, f64>, confidence: &str) -> Self {
        Self {
            kind,
            passed: margin >= 0.0,
            margin,
            details,
            confidence: confidence.to_string(),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_certificates_jsonl<W: Write>(certs: &[Certificate], mut w: W) -> Result<()> {
    for c in certs {
        serde_json::to_writer(&mut w, c)?;
        writeln!(w)?;
    }
    Ok(())
}

fn details<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Lyapunov functions used by the drift and kernel-gap checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lyapunov {
    /// `1 + ‖θ‖`
    OnePlusNorm,
    /// `1 + ‖θ − θ̂*‖²`
    OnePlusSqDistToMin { minimizer: Vec<f64> },
}

impl Lyapunov {
    pub fn eval(&self, theta: &[f64]) -> f64 {
        match self {
            Lyapunov::OnePlusNorm => 1.0 + norm(theta),
            Lyapunov::OnePlusSqDistToMin { minimizer } => 1.0 + linalg::norm_sq(&linalg::sub(theta, minimizer)),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let Lyapunov::OnePlusSqDistToMin { minimizer } = self {
            if minimizer.len() != dim {
                return Err(Error::invalid(
                    "one_plus_sq_dist_to_min needs a minimizer of the dataset's dimension",
                ));
            }
        }
        Ok(())
    }
}

/// Parameter grid: a full lattice for `d ≤ 2`, otherwise points along each
/// coordinate axis, with `points` values per axis on `[c − r, c + r]`.
pub fn default_theta_grid(center: &[f64], half_width: f64, points: usize) -> Vec<Vec<f64>> {
    let d = center.len();
    let ticks: Vec<f64> = if points <= 1 {
        vec![0.0]
    } else {
        (0..points)
            .map(|i| -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64)
            .collect()
    };
    if d <= 2 {
        (0..d)
            .map(|_| ticks.iter().copied())
            .multi_cartesian_product()
            .map(|offs| center.iter().zip(&offs).map(|(c, o)| c + o).collect())
            .collect()
    } else {
        let mut out = vec![center.to_vec()];
        for j in 0..d {
            for &t in &ticks {
                if t != 0.0 {
                    let mut p = center.to_vec();
                    p[j] += t;
                    out.push(p);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionCheck {
    pub eta: f64,
    pub batch: usize,
    pub claimed_rate: f64,
    pub k_max: u64,
    pub replicas: usize,
    pub seed: u64,
    pub theta_a: Vec<f64>,
    pub theta_b: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseModel,
}

/// Passes if the mean coupled distance at every `k ≤ k_max` is at most
/// `rate^k·‖Δ₀‖·(1 + 3·SE/mean)`.
pub fn check_contraction(loss: &LossModel, dataset: &Dataset, chk: &ContractionCheck) -> Result<Certificate> {
    if !(chk.claimed_rate > 0.0 && chk.claimed_rate < 1.0) {
        return Err(Error::invalid("claimed contraction rate must lie in (0, 1)"));
    }
    if chk.replicas == 0 {
        return Err(Error::invalid("replica count must be at least 1"));
    }
    let cfg = SgdConfig {
        eta: chk.eta,
        batch: chk.batch,
        k_max: chk.k_max,
        theta0: chk.theta_a.clone(),
        master_seed: chk.seed,
    };
    let runs: Vec<Vec<f64>> = (0..chk.replicas as u64)
        .map(|r| dynamics::run_contraction_pair(loss, dataset, &cfg, &chk.theta_a, &chk.theta_b, &chk.noise, r))
        .try_collect()?;
    let delta0 = linalg::dist(&chk.theta_a, &chk.theta_b);
    let mut worst = (f64::INFINITY, 0u64, 0.0, 0.0);
    for k in 0..=chk.k_max {
        let dists: Vec<f64> = runs
            .iter()
            .map(|r| r.get(k as usize).copied().unwrap_or(f64::INFINITY))
            .collect();
        let (mean, se) = mean_and_stderr(&dists);
        let rel_se = if mean > 0.0 { se / mean } else { 0.0 };
        let envelope = chk.claimed_rate.powf(k as f64) * delta0;
        let threshold = envelope * (1.0 + 3.0 * rel_se + FP_SLACK);
        let margin = threshold - mean;
        if margin < worst.0 || margin.is_nan() {
            worst = (margin, k, mean, threshold);
        }
    }
    let (margin, k, mean, threshold) = worst;
    let margin = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
    Ok(Certificate::new(
        CertificateKind::Contraction,
        margin,
        details([
            ("claimed_rate", chk.claimed_rate),
            ("delta0", delta0),
            ("worst_k", k as f64),
            ("mean_distance_at_worst_k", mean),
            ("threshold_at_worst_k", threshold),
            ("replicas", chk.replicas as f64),
        ]),
        "mean distance <= rate^k |delta0| (1 + 3 SE/mean), relative slack 1e-12",
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftCheck {
    pub eta: f64,
    pub batch: usize,
    pub lyapunov: Lyapunov,
    pub claimed_delta: f64,
    pub claimed_l: f64,
    pub theta_grid: Vec<Vec<f64>>,
    pub mode: ExpectationMode,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseModel,
}

/// `(P̂V̂)(θ)` with its standard error. Noisy kernels require Monte Carlo.
pub fn lyapunov_expectation(
    loss: &LossModel,
    dataset: &Dataset,
    theta: &[f64],
    eta: f64,
    batch: usize,
    lyapunov: &Lyapunov,
    noise: &NoiseModel,
    mode: ExpectationMode,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = dataset.len();
    if batch == 0 || batch > n {
        return Err(Error::invalid(format!("batch size {batch} must lie in [1, {n}]")));
    }
    let count = binomial(n, batch).round();
    let exact = match mode {
        ExpectationMode::Exact => {
            if count > ENUMERATION_LIMIT as f64 {
                return Err(Error::EnumerationTooLarge {
                    n,
                    b: batch,
                    count,
                    limit: ENUMERATION_LIMIT,
                });
            }
            true
        }
        ExpectationMode::MonteCarlo { .. } => false,
        ExpectationMode::Auto { .. } => count <= ENUMERATION_LIMIT as f64,
    };
    if exact && !noise.is_none() {
        return Err(Error::invalid("exact drift evaluation needs noiseless SGD; use monte_carlo"));
    }
    if exact {
        let vals: Vec<f64> = (0..n)
            .combinations(batch)
            .map(|omega| Ok(lyapunov.eval(&dynamics::step(loss, dataset, theta, &omega, eta, None)?)))
            .collect::<Result<_>>()?;
        return Ok((vals.iter().sum::<f64>() / vals.len() as f64, 0.0));
    }
    let samples = match mode {
        ExpectationMode::MonteCarlo { samples } | ExpectationMode::Auto { samples } => samples,
        ExpectationMode::Exact => unreachable!(),
    };
    if samples == 0 {
        return Err(Error::invalid("Monte Carlo sample count must be at least 1"));
    }
    let vals: Vec<f64> = (0..samples as u64)
        .map(|j| {
            let omega = minibatch(seed, j, 0, n, batch);
            let xi = noise.draw(seed, j, 0);
            Ok(lyapunov.eval(&dynamics::step(loss, dataset, theta, &omega, eta, xi.as_deref())?))
        })
        .collect::<Result<_>>()?;
    Ok(mean_and_stderr(&vals))
}

/// Passes if `(P̂V̂)(θ) ≤ δ·V̂(θ) + L + 3·SE` at every grid point.
pub fn check_drift(loss: &LossModel, dataset_hat: &Dataset, chk: &DriftCheck) -> Result<Certificate> {
    if chk.theta_grid.is_empty() {
        return Err(Error::invalid("drift check needs a nonempty parameter grid"));
    }
    if !(chk.claimed_delta > 0.0 && chk.claimed_delta < 1.0) {
        return Err(Error::invalid("claimed drift factor delta must lie in (0, 1)"));
    }
    chk.lyapunov.validate(dataset_hat.dim())?;
    let mut worst = (f64::INFINITY, 0usize, 0.0, 0.0);
    for (gi, theta) in chk.theta_grid.iter().enumerate() {
        linalg::check_dim(dataset_hat.dim(), theta.len())?;
        let (pv, se) = lyapunov_expectation(
            loss,
            dataset_hat,
            theta,
            chk.eta,
            chk.batch,
            &chk.lyapunov,
            &chk.noise,
            chk.mode,
            chk.seed,
        )?;
        let rhs = chk.claimed_delta * chk.lyapunov.eval(theta) + chk.claimed_l;
        let margin = rhs * (1.0 + FP_SLACK) + 3.0 * se - pv;
        if margin < worst.0 {
            worst = (margin, gi, pv, rhs);
        }
    }
    let (margin, gi, pv, rhs) = worst;
    let mut det = details([
        ("claimed_delta", chk.claimed_delta),
        ("claimed_L", chk.claimed_l),
        ("worst_grid_index", gi as f64),
        ("lhs_at_worst", pv),
        ("rhs_at_worst", rhs),
        ("grid_points", chk.theta_grid.len() as f64),
    ]);
    for (j, v) in chk.theta_grid[gi].iter().enumerate() {
        det.insert(format!("worst_theta_{j}"), *v);
    }
    Ok(Certificate::new(
        CertificateKind::Drift,
        margin,
        det,
        "PV <= delta V + L + 3 SE on the grid (necessary condition), relative slack 1e-12",
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelGapCheck {
    pub eta: f64,
    pub batch: usize,
    pub lyapunov: Lyapunov,
    pub claimed_gamma: f64,
    pub theta_grid: Vec<Vec<f64>>,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseModel,
}

/// For each grid point runs one coupled step under both kernels and uses
/// the mean coupled distance, an upper bound on `W₁(δ_θP, δ_θP̂)`, divided by
/// `V̂(θ)`. Passes if every normalized gap is at most `γ + 3·SE`.
pub fn check_kernel_gap(loss: &LossModel, pair: &NeighborPair, chk: &KernelGapCheck) -> Result<Certificate> {
    if chk.theta_grid.is_empty() {
        return Err(Error::invalid("kernel gap check needs a nonempty parameter grid"));
    }
    if chk.replicas == 0 {
        return Err(Error::invalid("replica count must be at least 1"));
    }
    if !(chk.claimed_gamma >= 0.0) {
        return Err(Error::invalid("claimed kernel gap must be nonnegative"));
    }
    chk.lyapunov.validate(pair.base.dim())?;
    let n = pair.base.len();
    if chk.batch == 0 || chk.batch > n {
        return Err(Error::invalid(format!("batch size {} must lie in [1, {n}]", chk.batch)));
    }
    let mut worst = (f64::INFINITY, 0usize, 0.0);
    let mut max_gap = 0.0_f64;
    for (gi, theta) in chk.theta_grid.iter().enumerate() {
        linalg::check_dim(pair.base.dim(), theta.len())?;
        let v = chk.lyapunov.eval(theta);
        let gaps: Vec<f64> = (0..chk.replicas as u64)
            .map(|r| {
                let omega = minibatch(chk.seed, r, gi as u64, n, chk.batch);
                let xi = chk.noise.draw(chk.seed, r, gi as u64);
                let a = dynamics::step(loss, &pair.base, theta, &omega, chk.eta, xi.as_deref())?;
                let b = dynamics::step(loss, &pair.perturbed, theta, &omega, chk.eta, xi.as_deref())?;
                Ok(linalg::dist(&a, &b) / v)
            })
            .collect::<Result<_>>()?;
        let (mean, se) = mean_and_stderr(&gaps);
        max_gap = max_gap.max(mean);
        let margin = chk.claimed_gamma * (1.0 + FP_SLACK) + 3.0 * se - mean;
        if margin < worst.0 {
            worst = (margin, gi, mean);
        }
    }
    let (margin, gi, gap) = worst;
    Ok(Certificate::new(
        CertificateKind::KernelGap,
        margin,
        details([
            ("claimed_gamma", chk.claimed_gamma),
            ("max_measured_gap", max_gap),
            ("gap_at_worst", gap),
            ("worst_grid_index", gi as f64),
            ("grid_points", chk.theta_grid.len() as f64),
        ]),
        "coupled one-step distance / V <= gamma + 3 SE on the grid; the coupling upper-bounds W1, so a pass certifies consistency, not tightness",
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorizationCheck {
    pub batch: usize,
    /// Minimizer `θ*` of the empirical risk.
    pub theta_star: Vec<f64>,
    /// Radius `M` of the `θ₁` ball.
    pub m_radius: f64,
    pub n_grid: usize,
    /// Constants for the closed-form `η̂` at `M`; its `m_grid` is ignored.
    pub eta_hat: EtaHatInputs,
}

/// Log density of `θ₁` after one noisy step from `θ`, up to the Gaussian
/// normalizer: a uniform mixture over all minibatches.
fn log_mixture_density(
    loss: &LossModel,
    dataset: &Dataset,
    theta: &[f64],
    theta1: &[f64],
    batches: &[Vec<usize>],
    eta: f64,
    inv_var: &[f64],
) -> Result<f64> {
    let terms: Vec<f64> = batches
        .iter()
        .map(|omega| {
            let mean = dynamics::step(loss, dataset, theta, omega, eta, None)?;
            Ok(-0.5
                * mean
                    .iter()
                    .zip(theta1)
                    .zip(inv_var)
                    .map(|((m, t), iv)| (t - m).powi(2) * iv)
                    .sum::<f64>())
        })
        .collect::<Result<_>>()?;
    Ok(log_sum_exp(&terms))
}

/// Grid minimum of `log p(θ,θ₁) − log p(θ*,θ₁)` over `‖θ − θ*‖² ≤ R − 1`,
/// `‖θ₁ − θ*‖ ≤ M` with `R = 2K₀(1+ε)/m`, compared against `½ log η̂`.
/// The margin is reported in log space. Requires `d ≤ 2` and exact
/// minibatch enumeration.
pub fn check_minorization_gaussian(loss: &LossModel, dataset: &Dataset, chk: &MinorizationCheck) -> Result<Certificate> {
    let d = dataset.dim();
    if d > 2 {
        return Err(Error::invalid("minorization check supports d <= 2 only"));
    }
    linalg::check_dim(d, chk.theta_star.len())?;
    linalg::check_dim(d, chk.eta_hat.sigma_diag.len())?;
    if chk.n_grid == 0 {
        return Err(Error::invalid("n_grid must be at least 1"));
    }
    let n = dataset.len();
    let count = binomial(n, chk.batch).round();
    if count > ENUMERATION_LIMIT as f64 {
        return Err(Error::EnumerationTooLarge {
            n,
            b: chk.batch,
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let eta_hat = bounds::eta_hat_gaussian_log(&EtaHatInputs {
        m_grid: Some(vec![chk.m_radius]),
        ..chk.eta_hat.clone()
    })?;
    let half_log_eta_hat = 0.5 * eta_hat.log_eta_hat;
    let eta = chk.eta_hat.eta;
    let inv_var: Vec<f64> = chk.eta_hat.sigma_diag.iter().map(|s| 1.0 / (eta * eta * s)).collect();
    let batches: Vec<Vec<usize>> = (0..n).combinations(chk.batch).collect();
    let r_cap = 2.0 * chk.eta_hat.k0 * (1.0 + chk.eta_hat.epsilon) / chk.eta_hat.m;
    let theta_radius = (r_cap - 1.0).max(0.0).sqrt();
    let in_ball = |p: &Vec<f64>, r: f64| linalg::dist(p, &chk.theta_star) <= r * (1.0 + 1e-12);
    let thetas: Vec<Vec<f64>> = default_theta_grid(&chk.theta_star, theta_radius, chk.n_grid)
        .into_iter()
        .filter(|p| in_ball(p, theta_radius))
        .collect();
    let theta1s: Vec<Vec<f64>> = default_theta_grid(&chk.theta_star, chk.m_radius, chk.n_grid)
        .into_iter()
        .filter(|p| in_ball(p, chk.m_radius))
        .collect();
    let mut min_log_ratio = f64::INFINITY;
    for t1 in &theta1s {
        let base = log_mixture_density(loss, dataset, &chk.theta_star, t1, &batches, eta, &inv_var)?;
        for t in &thetas {
            let lr = log_mixture_density(loss, dataset, t, t1, &batches, eta, &inv_var)? - base;
            min_log_ratio = min_log_ratio.min(lr);
        }
    }
    let margin = min_log_ratio - half_log_eta_hat;
    Ok(Certificate::new(
        CertificateKind::Minorization,
        margin,
        details([
            ("min_log_density_ratio", min_log_ratio),
            ("half_log_eta_hat", half_log_eta_hat),
            ("log_eta_hat", eta_hat.log_eta_hat),
            ("M", chk.m_radius),
            ("R", r_cap),
            ("theta_points", thetas.len() as f64),
            ("theta1_points", theta1s.len() as f64),
        ]),
        "grid minimum of the log density ratio >= 0.5 log eta_hat (necessary condition, log-space margin)",
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MarginRule {
    /// Allow three standard errors of the empirical power mean.
    ThreeSigma,
    /// Allow a fixed fraction of the theoretical value.
    Fixed { rel: f64 },
}

/// Compares in the bound's stated form (`W_p` or `W_p^p`). Coupled
/// estimates upper-bound the true distance and get no statistical
/// allowance; other estimators use `rule`.
pub fn check_bound_dominates(empirical: &TransportEstimate, theoretical: &StabilityBound, rule: MarginRule) -> Result<Certificate> {
    if (empirical.p - theoretical.p).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "metric order mismatch: empirical p = {}, bound p = {}",
            empirical.p, theoretical.p
        )));
    }
    let p = empirical.p;
    let power_form = theoretical.regime.is_power_form();
    let (emp, emp_se, theory) = if power_form {
        (empirical.power_mean(), empirical.power_mean_stderr, theoretical.value)
    } else if p == 1.0 {
        (empirical.value, empirical.power_mean_stderr, theoretical.value)
    } else {
        (empirical.power_mean(), empirical.power_mean_stderr, theoretical.value.powf(p))
    };
    let allowance = match rule {
        MarginRule::ThreeSigma if empirical.method == TransportMethod::Coupled => 0.0,
        MarginRule::ThreeSigma => 3.0 * emp_se,
        MarginRule::Fixed { rel } => rel * theory,
    };
    let margin = theory + allowance - emp;
    Ok(Certificate::new(
        CertificateKind::Dominance,
        margin,
        details([
            ("empirical", emp),
            ("empirical_stderr", emp_se),
            ("theoretical", theory),
            ("allowance", allowance),
            ("p", p),
            ("n_samples", empirical.n_samples as f64),
        ]),
        match (rule, empirical.method) {
            (MarginRule::ThreeSigma, TransportMethod::Coupled) => "coupled estimate, no allowance",
            (MarginRule::ThreeSigma, _) => "empirical <= bound + 3 SE",
            (MarginRule::Fixed { .. }, _) => "empirical <= bound (1 + rel)",
        },
    ))
}

/// Uniform random points in a ball, for audits in higher dimension.
pub fn random_ball_grid(center: &[f64], radius: f64, points: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = center.len();
    (0..points as u64)
        .map(|i| {
            let mut rng = stream(seed, i, StreamTag::Sweep, 0);
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nv = norm(&v).max(1e-300);
            let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
            v.iter_mut().for_each(|x| *x *= r / nv);
            center.iter().zip(&v).map(|(c, x)| c + x).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{Horizon, Regime};
    use crate::model::DataPoint;

    fn unit_ds(n: usize) -> Dataset {
        Dataset::from_points(vec![DataPoint::new(vec![1.0], 1.0); n], 2.0).unwrap()
    }

    fn contraction(rate: f64, theta_b: f64) -> Certificate {
        let chk = ContractionCheck {
            eta: 0.1,
            batch: 1,
            claimed_rate: rate,
            k_max: 50,
            replicas: 4,
            seed: 1,
            theta_a: vec![1.0],
            theta_b: vec![theta_b],
            noise: NoiseModel::None,
        };
        check_contraction(&LossModel::Quadratic, &unit_ds(1), &chk).unwrap()
    }

    #[test]
    fn contraction_examples() {
        let c = contraction(0.9, 0.0);
        assert!(c.passed, "{c:?}");
        assert!(c.margin.abs() < 1e-12);
        assert!(!contraction(0.5, 0.0).passed);
        assert!(contraction(0.5, 1.0).passed);
    }

    fn drift(l: f64) -> Certificate {
        let chk = DriftCheck {
            eta: 0.1,
            batch: 1,
            lyapunov: Lyapunov::OnePlusNorm,
            claimed_delta: 0.9,
            claimed_l: l,
            theta_grid: vec![vec![0.0]],
            mode: ExpectationMode::Exact,
            seed: 0,
            noise: NoiseModel::None,
        };
        check_drift(&LossModel::Quadratic, &unit_ds(3), &chk).unwrap()
    }

    #[test]
    fn drift_equality_point() {
        let c = drift(0.2);
        assert!(c.passed);
        assert!(c.margin.abs() <= 1e-9);
        assert!((c.details["lhs_at_worst"] - 1.1).abs() < 1e-15);
        assert!(!drift(0.1).passed);
    }

    #[test]
    fn drift_rejects_missing_minimizer() {
        let chk = DriftCheck {
            eta: 0.1,
            batch: 1,
            lyapunov: Lyapunov::OnePlusSqDistToMin { minimizer: vec![] },
            claimed_delta: 0.9,
            claimed_l: 1.0,
            theta_grid: vec![vec![0.0]],
            mode: ExpectationMode::Exact,
            seed: 0,
            noise: NoiseModel::None,
        };
        assert!(check_drift(&LossModel::Quadratic, &unit_ds(3), &chk).is_err());
    }

    fn gap(pair: &NeighborPair, gamma: f64) -> Certificate {
        let chk = KernelGapCheck {
            eta: 0.1,
            batch: pair.base.len(),
            lyapunov: Lyapunov::OnePlusNorm,
            claimed_gamma: gamma,
            theta_grid: default_theta_grid(&[0.0], 3.0, 7),
            replicas: 2,
            seed: 3,
            noise: NoiseModel::None,
        };
        check_kernel_gap(&LossModel::Quadratic, pair, &chk).unwrap()
    }

    #[test]
    fn kernel_gap_examples() {
        let same = NeighborPair::identical(unit_ds(4));
        let c = gap(&same, 0.0);
        assert!(c.passed);
        assert_eq!(c.details["max_measured_gap"], 0.0);

        // Label flip 1 → −1 at one index, full batch: one-step gap (η/n)·2.
        let flipped = NeighborPair::from_replacement(unit_ds(4), 0, DataPoint::new(vec![1.0], -1.0)).unwrap();
        let c = gap(&flipped, 0.1 * 2.0 / 4.0);
        assert!(c.passed, "{c:?}");
        assert!((c.details["max_measured_gap"] - 0.05).abs() < 1e-15);
        assert!(!gap(&flipped, 0.0).passed);
    }

    fn bound(value: f64, regime: Regime, p: f64) -> StabilityBound {
        StabilityBound {
            regime,
            value,
            log_value: value.ln(),
            k: Horizon::Infinite,
            n: 10,
            b: 1,
            eta: 0.1,
            p,
            admissible: true,
            constants_used: BTreeMap::new(),
        }
    }

    fn estimate(value: f64, se: f64, method: TransportMethod, p: f64) -> TransportEstimate {
        TransportEstimate {
            value,
            p,
            method,
            n_samples: 64,
            power_mean_stderr: se,
        }
    }

    #[test]
    fn dominance_examples() {
        let b = bound(0.8, Regime::Quadratic, 1.0);
        let c = check_bound_dominates(&estimate(0.05, 0.0, TransportMethod::Coupled, 1.0), &b, MarginRule::ThreeSigma).unwrap();
        assert!(c.passed);
        assert!((c.margin - 0.75).abs() < 1e-15);
        let c = check_bound_dominates(&estimate(0.9, 0.01, TransportMethod::Assignment, 1.0), &b, MarginRule::ThreeSigma).unwrap();
        assert!(!c.passed);
        let c = check_bound_dominates(&estimate(0.0, 0.0, TransportMethod::Assignment, 1.0), &bound(0.0, Regime::Quadratic, 1.0), MarginRule::ThreeSigma).unwrap();
        assert!(c.passed);
        assert!(check_bound_dominates(&estimate(0.1, 0.0, TransportMethod::Coupled, 2.0), &b, MarginRule::ThreeSigma).is_err());
    }

    #[test]
    fn dominance_in_power_form() {
        let b = bound(0.5, Regime::NonconvexPlain, 2.0);
        let c = check_bound_dominates(&estimate(0.6, 0.0, TransportMethod::Coupled, 2.0), &b, MarginRule::ThreeSigma).unwrap();
        assert!((c.details["empirical"] - 0.36).abs() < 1e-15);
        assert!(c.passed);
    }

    fn minorization_inputs(n_grid: usize) -> MinorizationCheck {
        MinorizationCheck {
            batch: 1,
            theta_star: vec![0.0],
            m_radius: 1.0,
            n_grid,
            eta_hat: EtaHatInputs {
                sigma_diag: vec![0.5],
                eta: 0.1,
                m: 1.0,
                k0: 2.44,
                epsilon: 0.5,
                k1: 1.0,
                grad_at_star_sup: 1.0,
                m_grid: None,
            },
        }
    }

    #[test]
    fn minorization_examples() {
        let ds = Dataset::from_points(
            vec![DataPoint::new(vec![1.0], 1.0), DataPoint::new(vec![1.0], -1.0)],
            2.0,
        )
        .unwrap();
        let loss = LossModel::RegularizedSine { m0: 2.0, s: 0.5 };
        let c = check_minorization_gaussian(&loss, &ds, &minorization_inputs(1)).unwrap();
        assert!(c.passed);
        assert_eq!(c.details["min_log_density_ratio"], 0.0);
        let c = check_minorization_gaussian(&loss, &ds, &minorization_inputs(9)).unwrap();
        assert!(c.passed);
        assert!(c.details["min_log_density_ratio"] < 0.0, "{c:?}");
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(default_theta_grid(&[0.0, 0.0], 1.0, 5).len(), 25);
        assert_eq!(default_theta_grid(&[0.0; 3], 1.0, 5).len(), 1 + 3 * 4);
        assert_eq!(default_theta_grid(&[2.0], 1.0, 1), vec![vec![2.0]]);
    }

    #[test]
    fn certificates_serialize_one_per_line() {
        let certs = vec![contraction(0.9, 0.0), drift(0.2)];
        let mut buf = Vec::new();
        write_certificates_jsonl(&certs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["kind", "passed", "margin", "details", "confidence"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }
}
