//! Closed-form time-uniform stability bounds.
//!
//! Each evaluator checks its step-size admissibility condition, names the
//! violated inequality on failure, and returns a [`StabilityBound`] carrying
//! every intermediate constant. Quantities that underflow in linear space
//! (the minorization constant `η̂` and everything derived from it) are kept
//! as logarithms.

use std::collections::BTreeMap;
use std::fmt;

use itertools::Itertools;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg;
use crate::model::{AssumptionConstants, Dataset};
use crate::rng::{stream, StreamTag};
use crate::stats::mean_and_stderr;
use crate::{Error, Result};

/// Largest minibatch count enumerated exactly.
pub const ENUMERATION_LIMIT: usize = 20_000;

/// Number of points in the default `M` grid.
pub const DEFAULT_M_GRID_POINTS: usize = 32;

/// Iteration count, possibly infinite. Serialized as an integer or `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    Finite(u64),
    Infinite,
}

impl Horizon {
    /// `1 − r^k`, with `r^∞ = 0` for `r ∈ [0, 1)`.
    pub fn one_minus_pow(&self, r: f64) -> f64 {
        match *self {
            Horizon::Infinite => 1.0,
            Horizon::Finite(k) => 1.0 - r.powf(k as f64),
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Horizon::Finite(0)
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(k) => write!(f, "{k}"),
            Horizon::Infinite => write!(f, "inf"),
        }
    }
}

impl From<u64> for Horizon {
    fn from(k: u64) -> Self {
        Horizon::Finite(k)
    }
}

impl Serialize for Horizon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Horizon::Finite(k) => s.serialize_u64(*k),
            Horizon::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(k) => Ok(Horizon::Finite(k)),
            Raw::S(s) if s == "inf" || s == "infinity" => Ok(Horizon::Infinite),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "horizon must be a nonnegative integer or \"inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Quadratic,
    StronglyConvex,
    NonconvexNoisy,
    NonconvexPlain,
    SubconvexStationary,
}

impl Regime {
    /// Order `p` of the distance the bound controls (`W_1`, `W_2²` or `W_p^p`).
    pub fn metric_order(&self, p: f64) -> f64 {
        match self {
            Regime::Quadratic | Regime::StronglyConvex | Regime::NonconvexNoisy => 1.0,
            Regime::NonconvexPlain => 2.0,
            Regime::SubconvexStationary => p,
        }
    }

    /// Whether the bound is stated for `W_p^p` rather than `W_p`.
    pub fn is_power_form(&self) -> bool {
        matches!(self, Regime::NonconvexPlain | Regime::SubconvexStationary)
    }
}

/// A bound together with the inputs and intermediate constants behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityBound {
    pub regime: Regime,
    pub value: f64,
    pub log_value: f64,
    pub k: Horizon,
    pub n: usize,
    pub b: usize,
    pub eta: f64,
    /// Order of the controlled distance.
    pub p: f64,
    pub admissible: bool,
    pub constants_used: BTreeMap<String, f64>,
}

/// Common run parameters of every bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub eta: f64,
    pub b: usize,
    pub n: usize,
    pub theta0_norm: f64,
    pub k: Horizon,
}

impl RunParams {
    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("step size eta must be positive and finite"));
        }
        if self.n == 0 || self.b == 0 || self.b > self.n {
            return Err(Error::invalid(format!(
                "need 1 <= b <= n, got b = {}, n = {}",
                self.b, self.n
            )));
        }
        if !(self.theta0_norm >= 0.0 && self.theta0_norm.is_finite()) {
            return Err(Error::invalid("theta0 norm must be finite and nonnegative"));
        }
        Ok(())
    }
}

struct Builder {
    constants: BTreeMap<String, f64>,
}

impl Builder {
    fn new() -> Self {
        Self {
            constants: BTreeMap::new(),
        }
    }

    fn put(&mut self, name: &str, value: f64) -> &mut Self {
        self.constants.insert(name.to_string(), value);
        self
    }

    fn put_all(&mut self, c: &AssumptionConstants) -> &mut Self {
        self.put("K1", c.k1)
            .put("K2", c.k2)
            .put("D", c.d_radius)
            .put("E", c.e)
    }

    fn finish(self, regime: Regime, run: &RunParams, p: f64, log_value: f64) -> Result<StabilityBound> {
        let value = log_value.exp();
        if value.is_infinite() {
            return Err(Error::NotRepresentable { log_value });
        }
        Ok(StabilityBound {
            regime,
            value,
            log_value,
            k: run.k,
            n: run.n,
            b: run.b,
            eta: run.eta,
            p,
            admissible: true,
            constants_used: self.constants,
        })
    }
}

fn require_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
    }
    Ok(())
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

/// How expectations over minibatches are computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ExpectationMode {
    /// Average over all `C(n, b)` minibatches.
    Exact,
    /// Average over `samples` random minibatches.
    MonteCarlo { samples: usize },
    /// Exact when `C(n, b)` is at most the enumeration limit, otherwise Monte Carlo.
    Auto { samples: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinibatchExpectation {
    pub value: f64,
    pub stderr: f64,
    pub minibatches: usize,
    pub exact: bool,
}

/// `C(n, b)` as a float, via the running product.
pub fn binomial(n: usize, b: usize) -> f64 {
    let b = b.min(n - b.min(n));
    (0..b).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn minibatch_expectation<F>(dataset: &Dataset, b: usize, mode: ExpectationMode, seed: u64, f: F) -> Result<MinibatchExpectation>
where
    F: Fn(&[usize]) -> f64,
{
    let n = dataset.len();
    if b == 0 || b > n {
        return Err(Error::invalid(format!("batch size {b} must lie in [1, {n}]")));
    }
    let count = binomial(n, b).round();
    let exact = match mode {
        ExpectationMode::Exact => {
            if count > ENUMERATION_LIMIT as f64 {
                return Err(Error::EnumerationTooLarge {
                    n,
                    b,
                    count,
                    limit: ENUMERATION_LIMIT,
                });
            }
            true
        }
        ExpectationMode::MonteCarlo { .. } => false,
        ExpectationMode::Auto { .. } => count <= ENUMERATION_LIMIT as f64,
    };
    if exact {
        let values: Vec<f64> = (0..n).combinations(b).map(|omega| f(&omega)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        return Ok(MinibatchExpectation {
            value: mean,
            stderr: 0.0,
            minibatches: values.len(),
            exact: true,
        });
    }
    let samples = match mode {
        ExpectationMode::MonteCarlo { samples } | ExpectationMode::Auto { samples } => samples,
        ExpectationMode::Exact => unreachable!(),
    };
    if samples == 0 {
        return Err(Error::invalid("Monte Carlo sample count must be at least 1"));
    }
    let values: Vec<f64> = (0..samples as u64)
        .map(|j| {
            let mut rng = stream(seed, j, StreamTag::MonteCarlo, 0);
            let mut omega = rand::seq::index::sample(&mut rng, n, b).into_vec();
            omega.sort_unstable();
            f(&omega)
        })
        .collect();
    let (mean, se) = mean_and_stderr(&values);
    Ok(MinibatchExpectation {
        value: mean,
        stderr: se,
        minibatches: samples,
        exact: false,
    })
}

/// `ρ = E‖I − (η/b)H₁‖` with `H₁ = Σ_{i∈Ω₁} a_i a_iᵀ`, using the exact
/// spectral norm of each symmetric matrix.
pub fn rho_quadratic(dataset: &Dataset, eta: f64, b: usize, mode: ExpectationMode, seed: u64) -> Result<MinibatchExpectation> {
    require_nonneg("eta", eta)?;
    let d = dataset.dim();
    minibatch_expectation(dataset, b, mode, seed, |omega| {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        let s = eta / b as f64;
        for &idx in omega {
            let a = &dataset.point(idx).a;
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] -= s * a[i] * a[j];
                }
            }
        }
        linalg::sym_spectral_norm(d, &m)
    })
}

/// `E‖q₁‖` with `q₁ = Σ_{i∈Ω₁} a_i y_i`.
pub fn expected_q_norm(dataset: &Dataset, b: usize, mode: ExpectationMode, seed: u64) -> Result<MinibatchExpectation> {
    let d = dataset.dim();
    minibatch_expectation(dataset, b, mode, seed, |omega| {
        let mut q = vec![0.0; d];
        for &idx in omega {
            let x = dataset.point(idx);
            linalg::axpy(x.y, &x.a, &mut q);
        }
        linalg::norm(&q)
    })
}

/// Inputs of the quadratic-loss bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticInputs {
    pub rho: f64,
    pub rho_hat: f64,
    /// `E‖q̂₁‖` on the perturbed dataset.
    pub eq1_norm: f64,
    pub d_radius: f64,
}

/// `W₁ ≤ ((1−ρ^k)/(1−ρ))·(2ηD²/n)·max{1+‖θ‖, (1−ρ̂+(η/b)E‖q̂₁‖)/(1−ρ̂)}`.
pub fn bound_quadratic(q: &QuadraticInputs, run: &RunParams) -> Result<StabilityBound> {
    run.validate()?;
    require_nonneg("rho", q.rho)?;
    require_nonneg("rho_hat", q.rho_hat)?;
    require_nonneg("E|q1|", q.eq1_norm)?;
    require_positive("D", q.d_radius)?;
    if q.rho >= 1.0 {
        return Err(Error::inadmissible(format!("rho = {} < 1", q.rho)));
    }
    if q.rho_hat >= 1.0 {
        return Err(Error::inadmissible(format!("rho_hat = {} < 1", q.rho_hat)));
    }
    let gamma = 2.0 * run.eta * q.d_radius * q.d_radius / run.n as f64;
    let drift_l = 1.0 - q.rho_hat + run.eta / run.b as f64 * q.eq1_norm;
    let kappa = (1.0 + run.theta0_norm).max(drift_l / (1.0 - q.rho_hat));
    let value = run.k.one_minus_pow(q.rho) * gamma * kappa / (1.0 - q.rho);
    let mut bld = Builder::new();
    bld.put("rho", q.rho)
        .put("rho_hat", q.rho_hat)
        .put("E|q1|", q.eq1_norm)
        .put("D", q.d_radius)
        .put("gamma", gamma)
        .put("L", drift_l)
        .put("kappa", kappa)
        .put("theta0_norm", run.theta0_norm);
    bld.finish(Regime::Quadratic, run, 1.0, value.ln())
}

/// Checks `η < min{1/μ, μ/(K₁² + 64D²K₂²)}`.
pub fn strongly_convex_admissible(c: &AssumptionConstants, eta: f64) -> Result<()> {
    let mu = c.mu;
    if !(mu > 0.0) {
        return Err(Error::inadmissible("mu > 0"));
    }
    if eta >= 1.0 / mu {
        return Err(Error::inadmissible(format!("eta = {eta} < 1/mu = {}", 1.0 / mu)));
    }
    let lim = mu / (c.k1 * c.k1 + 64.0 * c.d_radius.powi(2) * c.k2 * c.k2);
    if eta >= lim {
        return Err(Error::inadmissible(format!(
            "eta = {eta} < mu/(K1^2 + 64 D^2 K2^2) = {lim}"
        )));
    }
    Ok(())
}

/// `W₁ ≤ 8DK₂(1−(1−ημ/2)^k)/(nμ)·(2E/μ+1)·max{1+2‖θ‖²+2E²/μ²,
/// 2 − (η/μ)K₁² − (56η/μ)D²K₂² + (64η/μ³)D²K₂²E²}`.
pub fn bound_strongly_convex(c: &AssumptionConstants, run: &RunParams) -> Result<StabilityBound> {
    run.validate()?;
    strongly_convex_admissible(c, run.eta)?;
    let (mu, eta, d2k2) = (c.mu, run.eta, c.d_radius.powi(2) * c.k2.powi(2));
    let rate = 1.0 - eta * mu / 2.0;
    let lead = 8.0 * c.d_radius * c.k2 * run.k.one_minus_pow(rate) / (run.n as f64 * mu);
    let first = 2.0 * c.e / mu + 1.0;
    let lyap_a = 1.0 + 2.0 * run.theta0_norm.powi(2) + 2.0 * c.e * c.e / (mu * mu);
    let lyap_b = 2.0 - eta / mu * c.k1 * c.k1 - 56.0 * eta / mu * d2k2
        + 64.0 * eta / mu.powi(3) * d2k2 * c.e * c.e;
    let value = lead * first * lyap_a.max(lyap_b);
    let mut bld = Builder::new();
    bld.put_all(c)
        .put("mu", mu)
        .put("contraction_rate", rate)
        .put("lyapunov_max_a", lyap_a)
        .put("lyapunov_max_b", lyap_b)
        .put("theta0_norm", run.theta0_norm);
    bld.finish(Regime::StronglyConvex, run, 1.0, value.ln())
}

/// Which minimizer-norm estimate to apply.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum MinimizerRegime {
    StronglyConvex { mu: f64 },
    Dissipative { m: f64, k: f64 },
    Subconvex { mu: f64, p: f64 },
}

/// Upper bound on `‖θ*‖`: `E/μ`, `(E + √(E² + 4mK))/(2m)` or
/// `(E/μ)^{1/(p−1)}`.
pub fn minimizer_norm_bound(regime: MinimizerRegime, e: f64) -> Result<f64> {
    require_nonneg("E", e)?;
    match regime {
        MinimizerRegime::StronglyConvex { mu } => {
            require_positive("mu", mu)?;
            Ok(e / mu)
        }
        MinimizerRegime::Dissipative { m, k } => {
            require_positive("m", m)?;
            require_nonneg("K", k)?;
            Ok((e + (e * e + 4.0 * m * k).sqrt()) / (2.0 * m))
        }
        MinimizerRegime::Subconvex { mu, p } => {
            require_positive("mu", mu)?;
            if !(p > 1.0) {
                return Err(Error::invalid("subconvex exponent p must exceed 1"));
            }
            Ok((e / mu).powf(1.0 / (p - 1.0)))
        }
    }
}

/// `K₀ = 2m − ηK₁² − 56ηD²K₂² + 64ηD²K₂²‖θ*‖² + 2K + ησ²`.
#[allow(clippy::too_many_arguments)]
pub fn k0_constant(m: f64, eta: f64, k1: f64, k2: f64, d: f64, theta_star_norm2: f64, k: f64, sigma2: f64) -> Result<f64> {
    for (name, v) in [
        ("m", m),
        ("eta", eta),
        ("K1", k1),
        ("K2", k2),
        ("D", d),
        ("|theta*|^2", theta_star_norm2),
        ("K", k),
        ("sigma2", sigma2),
    ] {
        require_nonneg(name, v)?;
    }
    let d2k2 = d * d * k2 * k2;
    let k0 = 2.0 * m - eta * k1 * k1 - 56.0 * eta * d2k2 + 64.0 * eta * d2k2 * theta_star_norm2
        + 2.0 * k
        + eta * sigma2;
    if !(k0 > 0.0) {
        return Err(Error::inadmissible(format!("K0 = {k0} > 0")));
    }
    Ok(k0)
}

/// Inputs of the Gaussian-noise minorization constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaHatInputs {
    /// Diagonal of the noise covariance `Σ`, each entry in `(0, 1)`.
    pub sigma_diag: Vec<f64>,
    pub eta: f64,
    pub m: f64,
    pub k0: f64,
    pub epsilon: f64,
    pub k1: f64,
    /// `sup_x ‖∇f(θ*, x)‖`.
    pub grad_at_star_sup: f64,
    /// Candidate `M` values; `None` uses the default log-spaced grid.
    pub m_grid: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaHat {
    pub log_eta_hat: f64,
    pub argmax_m: f64,
    /// Log of the tail branch at the maximizer.
    pub log_branch_tail: f64,
    /// Log of the density-ratio branch at the maximizer.
    pub log_branch_ratio: f64,
}

/// `log(1 − e^x)` for `x < 0`.
pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Default `M` grid: 32 log-spaced points on `[ηg, 10³ηg]`, where `g` is
/// `sup_x ‖∇f(θ*, x)‖`, or on `[η, 10³η]` when `g = 0`.
pub fn default_m_grid(eta: f64, grad_at_star_sup: f64) -> Vec<f64> {
    let lo = if grad_at_star_sup > 0.0 {
        eta * grad_at_star_sup
    } else {
        eta
    };
    let n = DEFAULT_M_GRID_POINTS;
    (0..n)
        .map(|i| lo * 1e3f64.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// `log η̂` for Gaussian noise `N(0, Σ)`: twice the log of
/// `max_M min{1 − e^{−(M/η − g)²/2}/√det(I − Σ),
/// exp(−(1+K₁η)r‖Σ⁻¹‖((1+K₁η)r + 2(M + ηg))/(2η²))}` with
/// `r = (2K₀(1+ε)/m − 1)^{1/2}`. Grid points where the first branch is not
/// positive are skipped.
pub fn eta_hat_gaussian_log(inp: &EtaHatInputs) -> Result<EtaHat> {
    if inp.sigma_diag.is_empty() {
        return Err(Error::invalid("noise covariance must have at least one entry"));
    }
    if inp.sigma_diag.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
        return Err(Error::invalid("noise covariance must satisfy 0 < Sigma < I"));
    }
    require_positive("eta", inp.eta)?;
    require_positive("m", inp.m)?;
    require_positive("K0", inp.k0)?;
    require_nonneg("K1", inp.k1)?;
    require_nonneg("sup |grad f(theta*, x)|", inp.grad_at_star_sup)?;
    if !(inp.epsilon > 0.0 && inp.epsilon < 1.0) {
        return Err(Error::invalid("epsilon must lie in (0, 1)"));
    }
    let g = inp.grad_at_star_sup;
    let eta = inp.eta;
    let grid = inp
        .m_grid
        .clone()
        .unwrap_or_else(|| default_m_grid(eta, g));
    let half_log_det: f64 = 0.5 * inp.sigma_diag.iter().map(|s| (-s).ln_1p()).sum::<f64>();
    let inv_norm = 1.0 / inp.sigma_diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let r = (2.0 * inp.k0 / inp.m * (1.0 + inp.epsilon) - 1.0).max(0.0).sqrt();
    let a = (1.0 + inp.k1 * eta) * r;
    let mut best: Option<EtaHat> = None;
    for &m_val in &grid {
        if !(m_val >= eta * g && m_val.is_finite()) {
            return Err(Error::invalid(format!(
                "M grid value {m_val} is below eta * sup|grad f(theta*, x)| = {}",
                eta * g
            )));
        }
        let t = -0.5 * (m_val / eta - g).powi(2) - half_log_det;
        if t >= 0.0 {
            continue;
        }
        let log_tail = log1m_exp(t);
        let log_ratio = -a * inv_norm * (a + 2.0 * (m_val + eta * g)) / (2.0 * eta * eta);
        let inner = log_tail.min(log_ratio);
        if best.is_none_or(|b| 2.0 * inner > b.log_eta_hat) {
            best = Some(EtaHat {
                log_eta_hat: 2.0 * inner,
                argmax_m: m_val,
                log_branch_tail: log_tail,
                log_branch_ratio: log_ratio,
            });
        }
    }
    best.ok_or_else(|| Error::invalid("no M in the grid makes the tail branch positive"))
}

/// Constants of the noisy non-convex regime for the choice
/// `R = 2K₀(1+ε)/m`, `η₀ = η̂/2`, `γ₀ = 1 − mηε/2`, `ψ = η̂/(2ηK₀)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyRegimeConstants {
    pub k0: f64,
    pub log_eta_hat: f64,
    pub log_eta0: f64,
    pub gamma0: f64,
    pub log_psi: f64,
    pub eta_bar: f64,
    /// `log(1 − η̄)`, finite even when `η̄` rounds to one.
    pub log_one_minus_eta_bar: f64,
    pub epsilon: f64,
    pub r: f64,
    pub m: f64,
}

impl NoisyRegimeConstants {
    pub fn psi(&self) -> f64 {
        self.log_psi.exp()
    }

    /// Constants with explicitly chosen `ψ` and `η̄`.
    pub fn from_parts(k0: f64, psi: f64, eta_bar: f64, epsilon: f64, m: f64) -> Result<Self> {
        require_positive("psi", psi)?;
        if !(eta_bar > 0.0 && eta_bar < 1.0) {
            return Err(Error::inadmissible(format!("eta_bar = {eta_bar} < 1")));
        }
        Ok(Self {
            k0,
            log_eta_hat: f64::NAN,
            log_eta0: f64::NAN,
            gamma0: f64::NAN,
            log_psi: psi.ln(),
            eta_bar,
            log_one_minus_eta_bar: (-eta_bar).ln_1p(),
            epsilon,
            r: 2.0 * k0 * (1.0 + epsilon) / m,
            m,
        })
    }
}

/// `η̄ = 1 − mηε(1+ε)η̂/(4m + 2(1+ε)η̂)` and the implied constants.
pub fn eta_bar(m: f64, eta: f64, epsilon: f64, log_eta_hat: f64, k0: f64) -> Result<NoisyRegimeConstants> {
    require_positive("m", m)?;
    require_positive("eta", eta)?;
    require_positive("K0", k0)?;
    if eta > 1.0 {
        return Err(Error::inadmissible(format!("eta = {eta} <= 1")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid("epsilon must lie in (0, 1)"));
    }
    if !(log_eta_hat < 0.0) {
        return Err(Error::invalid("eta_hat must lie in (0, 1)"));
    }
    let eta_hat = log_eta_hat.exp();
    let c = 1.0 + epsilon;
    let log_one_minus = (m * eta * epsilon * c).ln() + log_eta_hat - (4.0 * m + 2.0 * c * eta_hat).ln();
    Ok(NoisyRegimeConstants {
        k0,
        log_eta_hat,
        log_eta0: log_eta_hat - std::f64::consts::LN_2,
        gamma0: 1.0 - m * eta * epsilon / 2.0,
        log_psi: log_eta_hat - (2.0 * eta * k0).ln(),
        eta_bar: 1.0 - log_one_minus.exp(),
        log_one_minus_eta_bar: log_one_minus,
        epsilon,
        r: 2.0 * k0 * c / m,
        m,
    })
}

/// Checks `η < min{1/m, m/(K₁² + 64D²K₂²)}`.
pub fn dissipative_admissible(c: &AssumptionConstants, eta: f64) -> Result<()> {
    let m = c.m;
    if !(m > 0.0) {
        return Err(Error::inadmissible("m > 0"));
    }
    if eta >= 1.0 / m {
        return Err(Error::inadmissible(format!("eta = {eta} < 1/m = {}", 1.0 / m)));
    }
    let lim = m / (c.k1 * c.k1 + 64.0 * c.d_radius.powi(2) * c.k2 * c.k2);
    if eta >= lim {
        return Err(Error::inadmissible(format!(
            "eta = {eta} < m/(K1^2 + 64 D^2 K2^2) = {lim}"
        )));
    }
    Ok(())
}

/// `log((1 − η̄^k)/(1 − η̄))` from `log(1 − η̄)`, accurate when `1 − η̄`
/// underflows.
fn log_geometric_factor(k: Horizon, log_one_minus: f64) -> f64 {
    match k {
        Horizon::Infinite => -log_one_minus,
        Horizon::Finite(0) => f64::NEG_INFINITY,
        Horizon::Finite(k) => {
            // log(−log η̄)
            let log_neg_log = if log_one_minus < -30.0 {
                log_one_minus
            } else {
                (-(-log_one_minus.exp()).ln_1p()).ln()
            };
            // log(−k log η̄); then log(1 − η̄^k) = log(1 − e^{−e^y}).
            let y = (k as f64).ln() + log_neg_log;
            let log_num = if y < -30.0 { y } else { log1m_exp(-y.exp()) };
            log_num - log_one_minus
        }
    }
}

/// Noisy non-convex bound, evaluated in log-space:
///
/// `W₁ ≤ (1−η̄^k)/(2√(ψ(1+ψ))(1−η̄)) · (2b/n)·max{ψ(4+8η²K₁²),
/// 1+ψ(1+η²σ²+16(1+2η²K₁²)Q²+4η²(2E²+2K₁²Q²))}
/// · max{1+2‖θ‖²+2Q², 2−(η/m)K₁²−(56η/m)D²K₂²+(64η/m)D²K₂²Q²+2K/m+(η/m)σ²}`
///
/// with `Q` the dissipative minimizer-norm bound unless `minimizer_norm` is
/// given.
pub fn bound_nonconvex_noisy(
    c: &AssumptionConstants,
    run: &RunParams,
    sigma2: f64,
    nc: &NoisyRegimeConstants,
    minimizer_norm: Option<f64>,
) -> Result<StabilityBound> {
    run.validate()?;
    require_nonneg("sigma2", sigma2)?;
    dissipative_admissible(c, run.eta)?;
    if !(nc.log_one_minus_eta_bar.is_finite() && nc.log_one_minus_eta_bar < 0.0) {
        return Err(Error::inadmissible("eta_bar < 1"));
    }
    let (m, eta) = (c.m, run.eta);
    let q = match minimizer_norm {
        Some(q) => {
            require_nonneg("minimizer norm", q)?;
            q
        }
        None => minimizer_norm_bound(MinimizerRegime::Dissipative { m, k: c.k }, c.e)?,
    };
    let q2 = q * q;
    let d2k2 = c.d_radius.powi(2) * c.k2.powi(2);
    let e2k1 = eta * eta * c.k1 * c.k1;
    let log_psi = nc.log_psi;
    let psi = log_psi.exp();
    let log1p_psi = linalg::log1p_exp(log_psi);

    let gap_a = 4.0 + 8.0 * e2k1;
    let gap_inner = 1.0 + eta * eta * sigma2 + 16.0 * (1.0 + 2.0 * e2k1) * q2
        + 4.0 * eta * eta * (2.0 * c.e * c.e + 2.0 * c.k1 * c.k1 * q2);
    let log_gap_max = (log_psi + gap_a.ln()).max(linalg::log1p_exp(log_psi + gap_inner.ln()));

    let lyap_a = 1.0 + 2.0 * run.theta0_norm.powi(2) + 2.0 * q2;
    let lyap_b = 2.0 - eta / m * c.k1 * c.k1 - 56.0 * eta / m * d2k2 + 64.0 * eta / m * d2k2 * q2
        + 2.0 * c.k / m
        + eta / m * sigma2;
    let lyap = lyap_a.max(lyap_b);

    let log_value = log_geometric_factor(run.k, nc.log_one_minus_eta_bar)
        - std::f64::consts::LN_2
        - 0.5 * (log_psi + log1p_psi)
        + (2.0 * run.b as f64 / run.n as f64).ln()
        + log_gap_max
        + lyap.ln();
    let mut bld = Builder::new();
    bld.put_all(c)
        .put("m", m)
        .put("K", c.k)
        .put("sigma2", sigma2)
        .put("Q", q)
        .put("K0", nc.k0)
        .put("log_eta_hat", nc.log_eta_hat)
        .put("log_psi", log_psi)
        .put("psi", psi)
        .put("eta_bar", nc.eta_bar)
        .put("log_one_minus_eta_bar", nc.log_one_minus_eta_bar)
        .put("epsilon", nc.epsilon)
        .put("R", nc.r)
        .put("log_kernel_gap_max", log_gap_max)
        .put("lyapunov_max_a", lyap_a)
        .put("lyapunov_max_b", lyap_b)
        .put("theta0_norm", run.theta0_norm);
    bld.finish(Regime::NonconvexNoisy, run, 1.0, log_value)
}

/// `W₂² ≤ (1−(1−ηm)^k)·(4D²K₂²η(8B+2)/(bnm) + 4K₂D(1+K₁η)(1+5B)/(nm) + 2K/m)`
/// with `B = 4‖θ‖² + 4Q² + 4 − (2η/m)K₁² − (112η/m)D²K₂² + (128η/m)D²K₂²Q²
/// + 4K/m + 2Q²`.
pub fn bound_nonconvex_plain(c: &AssumptionConstants, run: &RunParams, minimizer_norm: Option<f64>) -> Result<StabilityBound> {
    run.validate()?;
    dissipative_admissible(c, run.eta)?;
    let (m, eta) = (c.m, run.eta);
    if c.k1 > 0.0 && eta >= m / (c.k1 * c.k1) {
        return Err(Error::inadmissible(format!("eta = {eta} < m/K1^2 = {}", m / (c.k1 * c.k1))));
    }
    let q = match minimizer_norm {
        Some(q) => {
            require_nonneg("minimizer norm", q)?;
            q
        }
        None => minimizer_norm_bound(MinimizerRegime::Dissipative { m, k: c.k }, c.e)?,
    };
    let q2 = q * q;
    let d2k2 = c.d_radius.powi(2) * c.k2.powi(2);
    let big_b = 4.0 * run.theta0_norm.powi(2) + 4.0 * q2 + 4.0 - 2.0 * eta / m * c.k1 * c.k1
        - 112.0 * eta / m * d2k2
        + 128.0 * eta / m * d2k2 * q2
        + 4.0 * c.k / m
        + 2.0 * q2;
    let (n, b) = (run.n as f64, run.b as f64);
    let term_batch = 4.0 * d2k2 * eta * (8.0 * big_b + 2.0) / (b * n * m);
    let term_data = 4.0 * c.k2 * c.d_radius * (1.0 + c.k1 * eta) * (1.0 + 5.0 * big_b) / (n * m);
    let persistent = 2.0 * c.k / m;
    let value = run.k.one_minus_pow(1.0 - eta * m) * (term_batch + term_data + persistent);
    let mut bld = Builder::new();
    bld.put_all(c)
        .put("m", m)
        .put("K", c.k)
        .put("Q", q)
        .put("B", big_b)
        .put("term_batch", term_batch)
        .put("term_data", term_data)
        .put("term_persistent", persistent)
        .put("theta0_norm", run.theta0_norm);
    bld.finish(Regime::NonconvexPlain, run, 2.0, value.ln())
}

/// Checks `η ≤ μ/(K₁² + 2^{p+4}D²K₂²)`.
pub fn subconvex_admissible(c: &AssumptionConstants, eta: f64) -> Result<()> {
    if !(c.p > 1.0 && c.p < 2.0) {
        return Err(Error::invalid(format!("subconvex exponent p = {} must lie in (1, 2)", c.p)));
    }
    if !(c.mu > 0.0) {
        return Err(Error::inadmissible("mu > 0"));
    }
    let lim = c.mu / (c.k1 * c.k1 + 2f64.powf(c.p + 4.0) * c.d_radius.powi(2) * c.k2 * c.k2);
    if eta > lim {
        return Err(Error::inadmissible(format!(
            "eta = {eta} <= mu/(K1^2 + 2^(p+4) D^2 K2^2) = {lim}"
        )));
    }
    Ok(())
}

/// `(C₂, C₃)` of the stationary subconvex bound.
pub fn subconvex_constants(c: &AssumptionConstants, eta: f64) -> (f64, f64) {
    let (p, mu, d, k2) = (c.p, c.mu, c.d_radius, c.k2);
    let d2k2 = d * d * k2 * k2;
    let ratio = (c.e / mu).powf(p / (p - 1.0));
    let c2 = 4.0 * d2k2 * eta / mu
        * (2f64.powf(p + 2.0) * (8.0 * eta / mu * d2k2 * (2f64.powf(p + 1.0) * ratio + 5.0))
            + 2f64.powf(p + 2.0) * ratio
            + 10.0);
    let c3 = 32.0 * d.powi(3) * k2.powi(3) * eta / (mu * mu)
        * (1.0 + c.k1 * eta)
        * 10.0
        * 2f64.powf(p - 1.0)
        * (2f64.powf(p + 1.0) * ratio + 5.0)
        + 4.0 * d * k2 / mu * (1.0 + c.k1 * eta) * (10.0 * 2f64.powf(p - 1.0) * ratio + 5.0);
    (c2, c3)
}

/// Stationary bound `W_p^p ≤ C₂/(bnμ) + C₃/n`. The shorter reading
/// `C₂/(bn) + C₃/n` is recorded as `value_short_reading`.
pub fn bound_subconvex(c: &AssumptionConstants, run: &RunParams) -> Result<StabilityBound> {
    run.validate()?;
    subconvex_admissible(c, run.eta)?;
    let (c2, c3) = subconvex_constants(c, run.eta);
    let (n, b) = (run.n as f64, run.b as f64);
    let value = c2 / (b * n * c.mu) + c3 / n;
    let short = c2 / (b * n) + c3 / n;
    let mut bld = Builder::new();
    bld.put_all(c)
        .put("mu", c.mu)
        .put("p", c.p)
        .put("C2", c2)
        .put("C3", c3)
        .put("value_short_reading", short);
    let stationary = RunParams {
        k: Horizon::Infinite,
        ..*run
    };
    bld.finish(Regime::SubconvexStationary, &stationary, c.p, value.ln())
}

/// Inputs of the generic Markov-chain perturbation bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationInputs {
    pub c: f64,
    pub rho: f64,
    pub gamma: f64,
    pub delta: f64,
    pub l: f64,
    pub v0_integral: f64,
    pub w0: f64,
    pub n_steps: Horizon,
}

/// `C(ρⁿW₀ + (1−ρⁿ)γκ/(1−ρ))` with `κ = max{∫V̂ dp̂₀, L/(1−δ)}`.
pub fn perturbation_combine(inp: &PerturbationInputs) -> Result<f64> {
    for (name, v) in [
        ("C", inp.c),
        ("rho", inp.rho),
        ("gamma", inp.gamma),
        ("delta", inp.delta),
        ("L", inp.l),
        ("W0", inp.w0),
    ] {
        require_nonneg(name, v)?;
    }
    if inp.rho >= 1.0 {
        return Err(Error::inadmissible(format!("rho = {} < 1", inp.rho)));
    }
    if inp.delta >= 1.0 {
        return Err(Error::inadmissible(format!("delta = {} < 1", inp.delta)));
    }
    if !(inp.v0_integral >= 1.0) {
        return Err(Error::invalid("integral of the Lyapunov function must be at least 1"));
    }
    let kappa = inp.v0_integral.max(inp.l / (1.0 - inp.delta));
    let rho_n = 1.0 - inp.n_steps.one_minus_pow(inp.rho);
    Ok(inp.c * (rho_n * inp.w0 + inp.n_steps.one_minus_pow(inp.rho) * inp.gamma * kappa / (1.0 - inp.rho)))
}

/// `ℒ · W₁`: generalization gap of an `ℒ`-Lipschitz surrogate loss.
pub fn generalization_from_stability(lipschitz: f64, w1: f64) -> Result<f64> {
    require_nonneg("Lipschitz constant", lipschitz)?;
    require_nonneg("W1", w1)?;
    Ok(lipschitz * w1)
}
