//! Experiment configuration, the bounds / simulate / verify / report
//! pipelines and their on-disk outputs.
//!
//! Output files and their fields:
//!
//! * `bounds.json`: a serialized [`StabilityBound`].
//! * `estimates.csv`: `k,estimator,p,value,stderr,status`.
//! * `summary.json`: a [`RunSummary`].
//! * `timing.json`: `{"wall_clock_seconds": ..}`, kept apart so the other
//!   files are byte-identical across runs.
//! * `certificates.jsonl`: one [`Certificate`] per line.
//! * `report.md`: markdown tables aggregated from the files above.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    self, EtaHatInputs, ExpectationMode, Horizon, MinimizerRegime, Regime, RunParams, StabilityBound,
};
use crate::dynamics::{self, CoupledEnsemble, NoiseModel, SgdConfig};
use crate::linalg::norm;
use crate::model::{
    self, AssumptionConstants, DataPoint, Dataset, DatasetSpec, Generator, LossModel, NeighborPair,
};
use crate::transport::{self, TransportEstimate, TransportMethod, ASSIGNMENT_CAP};
use crate::verify::{
    self, Certificate, ContractionCheck, DriftCheck, KernelGapCheck, Lyapunov, MarginRule, MinorizationCheck,
    DEFAULT_GRID_POINTS,
};
use crate::{Error, Result};

/// Current config schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Default half-width of the parameter grids of the drift and kernel-gap
/// checks.
pub const DEFAULT_GRID_HALF_WIDTH: f64 = 5.0;

/// Default horizon of the contraction check.
pub const DEFAULT_CONTRACTION_STEPS: u64 = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        n: usize,
        d: usize,
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label_range: Option<(f64, f64)>,
        generator: Generator,
        /// Defaults to the master seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// JSONL file as written by [`Dataset::write_jsonl`].
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborConfig {
    pub index: usize,
    /// Explicit replacement point; otherwise a fresh generator draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<DataPoint>,
    /// Seed of the fresh draw; defaults to the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Use the base dataset for both chains.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSection {
    pub eta: f64,
    pub batch: usize,
    pub k_max: u64,
    pub theta0: Vec<f64>,
}

fn default_epsilon() -> f64 {
    0.5
}

fn default_expectation() -> ExpectationMode {
    ExpectationMode::Auto { samples: 4096 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundOptions {
    /// Horizon of `cmd_bounds`; `"inf"` by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Horizon>,
    /// Sublevel-set slack of the noisy regime, in `(0, 1)`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_expectation")]
    pub expectation: ExpectationMode,
    /// Override for the minimizer-norm bound `Q`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimizer_norm: Option<f64>,
    /// Candidate `M` values for `η̂`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<Vec<f64>>,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            k: None,
            epsilon: default_epsilon(),
            expectation: default_expectation(),
            minimizer_norm: None,
            m_grid: None,
        }
    }
}

/// A certificate request. Omitted claims default to the constants the
/// regime's analysis gives for this configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CertificateSpec {
    Contraction {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        claimed_rate: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k_max: Option<u64>,
    },
    Drift {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        claimed_delta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        claimed_l: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid_half_width: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid_points: Option<usize>,
    },
    KernelGap {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        claimed_gamma: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid_half_width: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid_points: Option<usize>,
    },
    Minorization {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        m_radius: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_grid: Option<usize>,
    },
    Dominance {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        estimator: Option<TransportMethod>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        margin_rule: Option<MarginRule>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub loss: LossModel,
    pub dataset: DatasetSource,
    pub neighbor: NeighborConfig,
    pub sgd: SgdSection,
    #[serde(default)]
    pub noise: NoiseModel,
    pub regime: Regime,
    pub replicas: usize,
    /// Simulation checkpoints; `[k_max]` when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<u64>,
    /// Estimators for `cmd_simulate`; coupled, plus assignment when
    /// `replicas >= 2`, by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<TransportMethod>>,
    #[serde(default)]
    pub bound: BoundOptions,
    /// Certificate suite for `cmd_verify`; the regime default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificates: Option<Vec<CertificateSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses and validates. Parse errors carry serde's line, column and
    /// field diagnostics.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let compatible = match self.regime {
            Regime::Quadratic => matches!(self.loss, LossModel::Quadratic),
            Regime::StronglyConvex => matches!(self.loss, LossModel::RidgeQuadratic { .. }),
            Regime::NonconvexNoisy | Regime::NonconvexPlain => {
                matches!(self.loss, LossModel::RegularizedSine { .. } | LossModel::RidgeQuadratic { .. })
            }
            Regime::SubconvexStationary => matches!(self.loss, LossModel::ScalarPower { .. }),
        };
        if !compatible {
            return Err(Error::Config(format!(
                "regime {:?} is not compatible with loss {:?}",
                self.regime, self.loss
            )));
        }
        match (self.regime, &self.noise) {
            (Regime::NonconvexNoisy, NoiseModel::GaussianDiag { .. }) => {}
            (Regime::NonconvexNoisy, _) => {
                return Err(Error::Config("regime nonconvex_noisy needs gaussian_diag noise".into()))
            }
            (_, NoiseModel::None) => {}
            (r, _) => return Err(Error::Config(format!("regime {r:?} is stated for noiseless SGD"))),
        }
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        if let Some(est) = &self.estimators {
            if est.is_empty() {
                return Err(Error::Config("estimators must not be empty".into()));
            }
            if est.contains(&TransportMethod::Assignment) && self.replicas < 2 {
                return Err(Error::Config(
                    "the assignment estimator needs replicas >= 2 to form sample clouds".into(),
                ));
            }
        }
        if let Some(k) = self.checkpoints.iter().find(|&&k| k > self.sgd.k_max) {
            return Err(Error::Config(format!("checkpoint {k} exceeds k_max = {}", self.sgd.k_max)));
        }
        if !(self.bound.epsilon > 0.0 && self.bound.epsilon < 1.0) {
            return Err(Error::Config("bound.epsilon must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn estimators(&self) -> Vec<TransportMethod> {
        match &self.estimators {
            Some(e) => e.clone(),
            None if self.replicas >= 2 => vec![TransportMethod::Coupled, TransportMethod::Assignment],
            None => vec![TransportMethod::Coupled],
        }
    }

    fn checkpoints(&self) -> Vec<u64> {
        if self.checkpoints.is_empty() {
            vec![self.sgd.k_max]
        } else {
            self.checkpoints.clone()
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            eta: self.sgd.eta,
            batch: self.sgd.batch,
            k_max: self.sgd.k_max,
            theta0: self.sgd.theta0.clone(),
            master_seed: self.master_seed,
        }
    }
}

/// Builds the base dataset and its neighbor.
pub fn build_pair(cfg: &ExperimentConfig) -> Result<NeighborPair> {
    let base = match &cfg.dataset {
        DatasetSource::Synthetic {
            n,
            d,
            radius,
            label_range,
            generator,
            seed,
        } => {
            let mut spec = DatasetSpec::new(*n, *d, *radius, *generator);
            if let Some(r) = label_range {
                spec.label_range = *r;
            }
            model::make_synthetic_dataset(&spec, seed.unwrap_or(cfg.master_seed))?
        }
        DatasetSource::File { path } => {
            let f = fs::File::open(path)
                .map_err(|e| Error::Config(format!("cannot open dataset {}: {e}", path.display())))?;
            Dataset::read_jsonl(BufReader::new(f))?
        }
    };
    let nb = &cfg.neighbor;
    if nb.identical {
        return Ok(NeighborPair::identical(base));
    }
    match &nb.replacement {
        Some(p) => NeighborPair::from_replacement(base, nb.index, p.clone()),
        None => model::make_neighbor(&base, nb.index, nb.seed.unwrap_or(cfg.master_seed)),
    }
}

/// Constants valid for both datasets of the pair.
pub fn pair_constants(loss: &LossModel, pair: &NeighborPair) -> Result<AssumptionConstants> {
    let a = model::derive_constants(loss, &pair.base)?;
    let b = model::derive_constants(loss, &pair.perturbed)?;
    Ok(AssumptionConstants {
        k1: a.k1.max(b.k1),
        k2: a.k2.max(b.k2),
        d_radius: a.d_radius.max(b.d_radius),
        e: a.e.max(b.e),
        ..a
    })
}

fn noisy_constants(
    cfg: &ExperimentConfig,
    c: &AssumptionConstants,
    q: f64,
) -> Result<(bounds::NoisyRegimeConstants, EtaHatInputs, bounds::EtaHat)> {
    let NoiseModel::GaussianDiag { variances } = &cfg.noise else {
        return Err(Error::Config("regime nonconvex_noisy needs gaussian_diag noise".into()));
    };
    let eta = cfg.sgd.eta;
    let sigma2 = cfg.noise.sigma2();
    let k0 = bounds::k0_constant(c.m, eta, c.k1, c.k2, c.d_radius, q * q, c.k, sigma2)?;
    let inputs = EtaHatInputs {
        sigma_diag: variances.clone(),
        eta,
        m: c.m,
        k0,
        epsilon: cfg.bound.epsilon,
        k1: c.k1,
        grad_at_star_sup: (2.0 * c.e * c.e + 2.0 * c.k1 * c.k1 * q * q).sqrt(),
        m_grid: cfg.bound.m_grid.clone(),
    };
    let eh = bounds::eta_hat_gaussian_log(&inputs)?;
    let nc = bounds::eta_bar(c.m, eta, cfg.bound.epsilon, eh.log_eta_hat, k0)?;
    Ok((nc, inputs, eh))
}

fn minimizer_norm(cfg: &ExperimentConfig, c: &AssumptionConstants) -> Result<f64> {
    match cfg.bound.minimizer_norm {
        Some(q) => Ok(q),
        None => bounds::minimizer_norm_bound(MinimizerRegime::Dissipative { m: c.m, k: c.k }, c.e),
    }
}

/// Evaluates the regime's bound at horizon `k`.
pub fn compute_bound(cfg: &ExperimentConfig, pair: &NeighborPair, k: Horizon) -> Result<StabilityBound> {
    let c = pair_constants(&cfg.loss, pair)?;
    let run = RunParams {
        eta: cfg.sgd.eta,
        b: cfg.sgd.batch,
        n: pair.base.len(),
        theta0_norm: norm(&cfg.sgd.theta0),
        k,
    };
    let (eta, b, seed, mode) = (cfg.sgd.eta, cfg.sgd.batch, cfg.master_seed, cfg.bound.expectation);
    match cfg.regime {
        Regime::Quadratic => {
            let q = bounds::QuadraticInputs {
                rho: bounds::rho_quadratic(&pair.base, eta, b, mode, seed)?.value,
                rho_hat: bounds::rho_quadratic(&pair.perturbed, eta, b, mode, seed)?.value,
                eq1_norm: bounds::expected_q_norm(&pair.perturbed, b, mode, seed)?.value,
                d_radius: c.d_radius,
            };
            bounds::bound_quadratic(&q, &run)
        }
        Regime::StronglyConvex => bounds::bound_strongly_convex(&c, &run),
        Regime::NonconvexNoisy => {
            bounds::dissipative_admissible(&c, eta)?;
            let q = minimizer_norm(cfg, &c)?;
            let (nc, _, _) = noisy_constants(cfg, &c, q)?;
            bounds::bound_nonconvex_noisy(&c, &run, cfg.noise.sigma2(), &nc, Some(q))
        }
        Regime::NonconvexPlain => bounds::bound_nonconvex_plain(&c, &run, cfg.bound.minimizer_norm),
        Regime::SubconvexStationary => bounds::bound_subconvex(&c, &run),
    }
}

/// Outcome of a subcommand, mapped onto the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CertificateFailure,
}

/// `0` success, `1` usage or config error, `2` inadmissible parameters,
/// `3` certificate failure.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CertificateFailure) => 3,
        Err(Error::Inadmissible { .. }) => 2,
        Err(_) => 1,
    }
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes `bounds.json` at the configured horizon.
pub fn cmd_bounds(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    let dir = output_dir(cfg, out)?;
    let pair = build_pair(cfg)?;
    let bound = compute_bound(cfg, &pair, cfg.bound.k.unwrap_or(Horizon::Infinite))?;
    write_json(&dir.join("bounds.json"), &bound)?;
    Ok(Outcome::Success)
}

/// One row of `estimates.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub k: u64,
    pub estimator: TransportMethod,
    pub p: f64,
    pub value: f64,
    pub stderr: f64,
    pub status: String,
}

/// Empirical estimates and the theoretical bound at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub k: u64,
    pub estimates: Vec<EstimateRow>,
    pub bound: Option<f64>,
    /// Why the bound is missing, if it is.
    pub bound_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub master_seed: u64,
    pub regime: Regime,
    pub n: usize,
    pub b: usize,
    pub eta: f64,
    pub p: f64,
    pub replicas: usize,
    pub diverged_replicas: usize,
    pub checkpoints: Vec<CheckpointSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub certificates: Vec<Certificate>,
}

/// Estimates `W_p` between the two chain laws at `k`. Assignment clouds
/// larger than [`ASSIGNMENT_CAP`] use the first `ASSIGNMENT_CAP` replicas.
pub fn estimate_at(ensemble: &CoupledEnsemble, k: u64, p: f64, method: TransportMethod) -> Result<TransportEstimate> {
    let pairs = ensemble.pairs_at(k);
    match method {
        TransportMethod::Coupled => transport::coupled_upper_bound(p, &pairs),
        TransportMethod::Assignment => {
            let pairs = &pairs[..pairs.len().min(ASSIGNMENT_CAP)];
            let (a, b) = transport::marginal_clouds(pairs)?;
            transport::wasserstein_assignment(p, &a, &b)
        }
        TransportMethod::Exact1d => {
            let (a, b) = transport::marginal_clouds(&pairs)?;
            transport::wasserstein_exact_1d(p, &a, &b)
        }
    }
}

fn metric_order(cfg: &ExperimentConfig) -> f64 {
    let p = match cfg.loss {
        LossModel::ScalarPower { p, .. } => p,
        _ => 1.0,
    };
    cfg.regime.metric_order(p)
}

/// Runs the ensemble once and returns `(estimates, summary)`.
pub fn simulate(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let pair = build_pair(cfg)?;
    let checkpoints = cfg.checkpoints();
    let ensemble = dynamics::run_ensemble(
        &cfg.loss,
        &pair,
        &cfg.sgd_config(),
        &cfg.noise,
        cfg.replicas,
        &checkpoints,
    )?;
    let p = metric_order(cfg);
    let estimators = cfg.estimators();
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &k in &checkpoints {
        let diverged = ensemble.replicas.iter().any(|r| r.diverged_at.is_some_and(|d| d <= k));
        let mut estimates = Vec::with_capacity(estimators.len());
        for &method in &estimators {
            let row = if diverged {
                EstimateRow {
                    k,
                    estimator: method,
                    p,
                    value: f64::NAN,
                    stderr: f64::NAN,
                    status: "diverged".into(),
                }
            } else {
                let est = estimate_at(&ensemble, k, p, method)?;
                EstimateRow {
                    k,
                    estimator: method,
                    p,
                    value: est.value,
                    stderr: est.power_mean_stderr,
                    status: "ok".into(),
                }
            };
            estimates.push(row);
        }
        let (bound, bound_error) = match compute_bound(cfg, &pair, Horizon::Finite(k)) {
            Ok(b) => (Some(b.value), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(CheckpointSummary {
            k,
            estimates,
            bound,
            bound_error,
        });
    }
    Ok(RunSummary {
        master_seed: cfg.master_seed,
        regime: cfg.regime,
        n: pair.base.len(),
        b: cfg.sgd.batch,
        eta: cfg.sgd.eta,
        p,
        replicas: cfg.replicas,
        diverged_replicas: ensemble.n_diverged(),
        checkpoints: rows,
        certificates: Vec::new(),
    })
}

/// Writes `estimates.csv`, `summary.json` and `timing.json`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    let dir = output_dir(cfg, out)?;
    let start = Instant::now();
    let summary = simulate(cfg)?;
    let mut csv = csv::Writer::from_path(dir.join("estimates.csv"))?;
    csv.write_record(["k", "estimator", "p", "value", "stderr", "status"])?;
    for row in summary.checkpoints.iter().flat_map(|c| &c.estimates) {
        csv.write_record([
            row.k.to_string(),
            row.estimator.as_str().to_string(),
            row.p.to_string(),
            row.value.to_string(),
            row.stderr.to_string(),
            row.status.clone(),
        ])?;
    }
    csv.flush()?;
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({ "wall_clock_seconds": start.elapsed().as_secs_f64() }),
    )?;
    Ok(Outcome::Success)
}

/// Certificate request with every claim resolved.
#[derive(Clone, Debug)]
pub enum ResolvedCheck {
    Contraction(ContractionCheck),
    Drift(DriftCheck),
    KernelGap(KernelGapCheck),
    Minorization(MinorizationCheck),
    Dominance {
        estimator: TransportMethod,
        rule: MarginRule,
    },
}

/// The certificates checked when the config lists none.
pub fn default_suite(cfg: &ExperimentConfig) -> Vec<CertificateSpec> {
    let contraction = CertificateSpec::Contraction {
        claimed_rate: None,
        k_max: None,
    };
    let drift = CertificateSpec::Drift {
        claimed_delta: None,
        claimed_l: None,
        grid_half_width: None,
        grid_points: None,
    };
    let gap = CertificateSpec::KernelGap {
        claimed_gamma: None,
        grid_half_width: None,
        grid_points: None,
    };
    let dominance = CertificateSpec::Dominance {
        estimator: None,
        margin_rule: None,
    };
    match cfg.regime {
        Regime::Quadratic | Regime::StronglyConvex => vec![contraction, drift, gap, dominance],
        Regime::NonconvexNoisy if cfg.sgd.theta0.len() <= 2 => vec![
            drift,
            CertificateSpec::Minorization {
                m_radius: None,
                n_grid: None,
            },
            dominance,
        ],
        Regime::NonconvexNoisy | Regime::NonconvexPlain => vec![drift, dominance],
        Regime::SubconvexStationary => vec![dominance],
    }
}

/// Drift constants `(V, δ, L)` of the regime on the perturbed dataset.
fn drift_claim(cfg: &ExperimentConfig, pair: &NeighborPair, c: &AssumptionConstants) -> Result<(Lyapunov, f64, f64)> {
    let (eta, b) = (cfg.sgd.eta, cfg.sgd.batch);
    match cfg.regime {
        Regime::Quadratic => {
            let mode = cfg.bound.expectation;
            let rho_hat = bounds::rho_quadratic(&pair.perturbed, eta, b, mode, cfg.master_seed)?.value;
            let eq = bounds::expected_q_norm(&pair.perturbed, b, mode, cfg.master_seed)?.value;
            Ok((Lyapunov::OnePlusNorm, rho_hat, 1.0 - rho_hat + eta / b as f64 * eq))
        }
        Regime::StronglyConvex | Regime::NonconvexNoisy | Regime::NonconvexPlain => {
            let star = model::minimize_empirical_risk(&cfg.loss, &pair.perturbed, &cfg.sgd.theta0)?;
            let s2 = norm(&star).powi(2);
            let d2k2 = c.d_radius.powi(2) * c.k2.powi(2);
            let curv = if cfg.regime == Regime::StronglyConvex { c.mu } else { c.m };
            let mut l = 2.0 * eta * curv - eta * eta * c.k1 * c.k1 - 56.0 * eta * eta * d2k2
                + 64.0 * eta * eta * d2k2 * s2;
            if cfg.regime != Regime::StronglyConvex {
                l += 2.0 * eta * c.k + eta * eta * cfg.noise.sigma2();
            }
            Ok((Lyapunov::OnePlusSqDistToMin { minimizer: star }, 1.0 - eta * curv, l))
        }
        Regime::SubconvexStationary => Err(Error::Config(
            "no drift claim is defined for the subconvex regime".into(),
        )),
    }
}

fn grid(center: &[f64], half_width: Option<f64>, points: Option<usize>) -> Vec<Vec<f64>> {
    verify::default_theta_grid(
        center,
        half_width.unwrap_or(DEFAULT_GRID_HALF_WIDTH),
        points.unwrap_or(DEFAULT_GRID_POINTS),
    )
}

/// Fills in the default claims of one certificate request.
pub fn resolve_check(cfg: &ExperimentConfig, pair: &NeighborPair, spec: &CertificateSpec) -> Result<ResolvedCheck> {
    let c = pair_constants(&cfg.loss, pair)?;
    let (eta, b, seed) = (cfg.sgd.eta, cfg.sgd.batch, cfg.master_seed);
    let theta0 = &cfg.sgd.theta0;
    Ok(match spec {
        CertificateSpec::Contraction { claimed_rate, k_max } => {
            let rate = match (claimed_rate, cfg.regime) {
                (Some(r), _) => *r,
                (None, Regime::Quadratic) => {
                    bounds::rho_quadratic(&pair.base, eta, b, cfg.bound.expectation, seed)?.value
                }
                (None, Regime::StronglyConvex) => 1.0 - eta * c.mu / 2.0,
                (None, r) => {
                    return Err(Error::Config(format!(
                        "no default contraction rate for regime {r:?}; set claimed_rate"
                    )))
                }
            };
            let mut theta_b = theta0.clone();
            theta_b[0] += 1.0;
            ResolvedCheck::Contraction(ContractionCheck {
                eta,
                batch: b,
                claimed_rate: rate,
                k_max: k_max.unwrap_or(cfg.sgd.k_max.min(DEFAULT_CONTRACTION_STEPS)),
                replicas: cfg.replicas,
                seed,
                theta_a: theta0.clone(),
                theta_b,
                noise: cfg.noise.clone(),
            })
        }
        CertificateSpec::Drift {
            claimed_delta,
            claimed_l,
            grid_half_width,
            grid_points,
        } => {
            let (lyapunov, delta, l) = drift_claim(cfg, pair, &c)?;
            let center = match &lyapunov {
                Lyapunov::OnePlusNorm => vec![0.0; theta0.len()],
                Lyapunov::OnePlusSqDistToMin { minimizer } => minimizer.clone(),
            };
            let mode = if cfg.noise.is_none() {
                cfg.bound.expectation
            } else {
                match cfg.bound.expectation {
                    ExpectationMode::MonteCarlo { samples } | ExpectationMode::Auto { samples } => {
                        ExpectationMode::MonteCarlo { samples }
                    }
                    ExpectationMode::Exact => {
                        return Err(Error::Config("noisy drift checks need a Monte Carlo expectation".into()))
                    }
                }
            };
            ResolvedCheck::Drift(DriftCheck {
                eta,
                batch: b,
                lyapunov,
                claimed_delta: claimed_delta.unwrap_or(delta),
                claimed_l: claimed_l.unwrap_or(l),
                theta_grid: grid(&center, *grid_half_width, *grid_points),
                mode,
                seed,
                noise: cfg.noise.clone(),
            })
        }
        CertificateSpec::KernelGap {
            claimed_gamma,
            grid_half_width,
            grid_points,
        } => {
            let n = pair.base.len() as f64;
            let (lyapunov, gamma, center) = match cfg.regime {
                Regime::Quadratic => (
                    Lyapunov::OnePlusNorm,
                    2.0 * eta * c.d_radius * c.d_radius / n,
                    vec![0.0; theta0.len()],
                ),
                Regime::StronglyConvex => {
                    let star = model::minimize_empirical_risk(&cfg.loss, &pair.perturbed, theta0)?;
                    let gamma = 4.0 * c.d_radius * c.k2 * eta / n * (2.0 * norm(&star) + 1.0);
                    (Lyapunov::OnePlusSqDistToMin { minimizer: star.clone() }, gamma, star)
                }
                r => {
                    return Err(Error::Config(format!(
                        "no default kernel gap for regime {r:?}; the noisy regimes measure it in a weighted total variation"
                    )))
                }
            };
            ResolvedCheck::KernelGap(KernelGapCheck {
                eta,
                batch: b,
                lyapunov,
                claimed_gamma: claimed_gamma.unwrap_or(gamma),
                theta_grid: grid(&center, *grid_half_width, *grid_points),
                replicas: cfg.replicas,
                seed,
                noise: cfg.noise.clone(),
            })
        }
        CertificateSpec::Minorization { m_radius, n_grid } => {
            if cfg.regime != Regime::NonconvexNoisy {
                return Err(Error::Config("minorization is checked in the nonconvex_noisy regime only".into()));
            }
            let star = model::minimize_empirical_risk(&cfg.loss, &pair.base, theta0)?;
            let q = minimizer_norm(cfg, &c)?;
            let (_, inputs, eh) = noisy_constants(cfg, &c, q)?;
            ResolvedCheck::Minorization(MinorizationCheck {
                batch: b,
                theta_star: star,
                m_radius: m_radius.unwrap_or(eh.argmax_m),
                n_grid: n_grid.unwrap_or(DEFAULT_GRID_POINTS),
                eta_hat: inputs,
            })
        }
        CertificateSpec::Dominance { estimator, margin_rule } => ResolvedCheck::Dominance {
            estimator: estimator.unwrap_or(TransportMethod::Coupled),
            rule: margin_rule.unwrap_or(MarginRule::ThreeSigma),
        },
    })
}

/// Runs one resolved check. Dominance compares the estimate at `k_max`
/// with the bound at the same horizon.
pub fn run_check(cfg: &ExperimentConfig, pair: &NeighborPair, check: &ResolvedCheck) -> Result<Certificate> {
    match check {
        ResolvedCheck::Contraction(c) => verify::check_contraction(&cfg.loss, &pair.base, c),
        ResolvedCheck::Drift(c) => verify::check_drift(&cfg.loss, &pair.perturbed, c),
        ResolvedCheck::KernelGap(c) => verify::check_kernel_gap(&cfg.loss, pair, c),
        ResolvedCheck::Minorization(c) => verify::check_minorization_gaussian(&cfg.loss, &pair.base, c),
        ResolvedCheck::Dominance { estimator, rule } => {
            if *estimator == TransportMethod::Assignment && cfg.replicas < 2 {
                return Err(Error::Config(
                    "the assignment estimator needs replicas >= 2 to form sample clouds".into(),
                ));
            }
            let k = cfg.sgd.k_max;
            let bound = compute_bound(cfg, pair, Horizon::Finite(k))?;
            let ensemble =
                dynamics::run_ensemble(&cfg.loss, pair, &cfg.sgd_config(), &cfg.noise, cfg.replicas, &[k])?;
            if ensemble.n_diverged() > 0 {
                return Err(Error::invalid(format!(
                    "{} replicas diverged before k = {k}",
                    ensemble.n_diverged()
                )));
            }
            let est = estimate_at(&ensemble, k, bound.p, *estimator)?;
            verify::check_bound_dominates(&est, &bound, *rule)
        }
    }
}

/// Resolves and runs the configured (or default) suite. Certificates run
/// concurrently and are returned in suite order.
pub fn verify_suite(cfg: &ExperimentConfig) -> Result<Vec<Certificate>> {
    let specs = match &cfg.certificates {
        Some(s) if s.is_empty() => return Err(Error::Config("nothing to verify: certificate list is empty".into())),
        Some(s) => s.clone(),
        None => default_suite(cfg),
    };
    let pair = build_pair(cfg)?;
    let checks: Vec<ResolvedCheck> = specs
        .iter()
        .map(|s| resolve_check(cfg, &pair, s))
        .collect::<Result<_>>()?;
    checks.par_iter().map(|c| run_check(cfg, &pair, c)).collect()
}

/// Writes `certificates.jsonl`; the outcome is a failure unless every
/// certificate passes.
pub fn cmd_verify(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    let dir = output_dir(cfg, out)?;
    let certs = verify_suite(cfg)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("certificates.jsonl"))?);
    verify::write_certificates_jsonl(&certs, &mut w)?;
    w.flush()?;
    Ok(if certs.iter().all(|c| c.passed) {
        Outcome::Success
    } else {
        Outcome::CertificateFailure
    })
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v == 0.0 || (1e-4..1e6).contains(&v.abs()) {
        format!("{v:.6}")
    } else {
        format!("{v:.6e}")
    }
}

/// Aggregates whatever output files `dir` holds into `report.md` and
/// returns its text.
pub fn cmd_report(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut md = String::from("# stabilab report\n");
    let mut found = false;

    let bounds_path = dir.join("bounds.json");
    if bounds_path.exists() {
        found = true;
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bounds_path)?)?;
        md.push_str("\n## Bound\n\n| regime | k | n | b | eta | p | value |\n|---|---|---|---|---|---|---|\n");
        let num = |key: &str| v[key].as_f64().map(fmt_num).unwrap_or_else(|| v[key].to_string());
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            v["regime"].as_str().unwrap_or("?"),
            v["k"],
            v["n"],
            v["b"],
            num("eta"),
            num("p"),
            num("value")
        ));
    }

    let summary_path = dir.join("summary.json");
    if summary_path.exists() {
        found = true;
        let s: RunSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)?;
        md.push_str(&format!(
            "\n## Simulation\n\nregime `{:?}`, n = {}, b = {}, eta = {}, p = {}, replicas = {}, diverged = {}, seed = {}\n\n",
            s.regime, s.n, s.b, s.eta, s.p, s.replicas, s.diverged_replicas, s.master_seed
        ));
        md.push_str("| k | estimator | value | stderr | status | bound |\n|---|---|---|---|---|---|\n");
        for c in &s.checkpoints {
            let bound = c.bound.map(fmt_num).unwrap_or_else(|| "n/a".into());
            for e in &c.estimates {
                md.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} |\n",
                    e.k,
                    e.estimator.as_str(),
                    fmt_num(e.value),
                    fmt_num(e.stderr),
                    e.status,
                    bound
                ));
            }
        }
    }

    let cert_path = dir.join("certificates.jsonl");
    if cert_path.exists() {
        found = true;
        md.push_str("\n## Certificates\n\n| kind | passed | margin |\n|---|---|---|\n");
        for line in fs::read_to_string(&cert_path)?.lines().filter(|l| !l.trim().is_empty()) {
            let c: Certificate = serde_json::from_str(line)?;
            let kind = serde_json::to_value(c.kind)?;
            md.push_str(&format!(
                "| {} | {} | {} |\n",
                kind.as_str().unwrap_or("?"),
                if c.passed { "yes" } else { "no" },
                fmt_num(c.margin)
            ));
        }
    }

    if !found {
        return Err(Error::Config(format!("no stabilab outputs found in {}", dir.display())));
    }
    fs::write(dir.join("report.md"), &md)?;
    Ok(md)
}
