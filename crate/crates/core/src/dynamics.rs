//! SGD and noisy-SGD recursions, the synchronous coupling across a neighboring
//! pair, and replica ensembles.
//!
//! Every random draw comes from a stream keyed by
//! `(master_seed, replica, tag, k)`, so both chains of a replica see the same
//! minibatch `Ω_k` and noise `ξ_k`, and replicas never depend on execution
//! order.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, norm};
use crate::model::{Dataset, LossModel, NeighborPair};
use crate::rng::{stream, StreamHash, StreamTag};
use crate::{Error, Result};

/// Norm beyond which a replica is declared diverged and stopped.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub batch: usize,
    pub k_max: u64,
    pub theta0: Vec<f64>,
    pub master_seed: u64,
}

impl SgdConfig {
    fn validate(&self, dataset: &Dataset) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("step size eta must be finite and nonnegative"));
        }
        if self.batch == 0 || self.batch > dataset.len() {
            return Err(Error::invalid(format!(
                "batch size {} must lie in [1, {}]",
                self.batch,
                dataset.len()
            )));
        }
        linalg::check_dim(dataset.dim(), self.theta0.len())
    }
}

/// Additive noise `ξ_k`, independent across coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    None,
    GaussianDiag { variances: Vec<f64> },
    Laplace { scales: Vec<f64> },
}

impl NoiseModel {
    pub fn is_none(&self) -> bool {
        matches!(self, NoiseModel::None)
    }

    /// `σ² = E‖ξ‖²`.
    pub fn sigma2(&self) -> f64 {
        match self {
            NoiseModel::None => 0.0,
            NoiseModel::GaussianDiag { variances } => variances.iter().sum(),
            NoiseModel::Laplace { scales } => scales.iter().map(|b| 2.0 * b * b).sum(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let params = match self {
            NoiseModel::None => return Ok(()),
            NoiseModel::GaussianDiag { variances } => variances,
            NoiseModel::Laplace { scales } => scales,
        };
        linalg::check_dim(dim, params.len())?;
        if params.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("noise parameters must be positive and finite"));
        }
        Ok(())
    }

    /// Draws `ξ_k` for `(master_seed, replica, k)`; `None` for noiseless SGD.
    pub fn draw(&self, master_seed: u64, replica: u64, k: u64) -> Option<Vec<f64>> {
        let mut rng = stream(master_seed, replica, StreamTag::Noise, k);
        match self {
            NoiseModel::None => None,
            NoiseModel::GaussianDiag { variances } => Some(
                variances
                    .iter()
                    .map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
            NoiseModel::Laplace { scales } => Some(
                scales
                    .iter()
                    .map(|b| {
                        // Inverse CDF on u ∈ (−1/2, 1/2).
                        let u: f64 = rng.random::<f64>() - 0.5;
                        -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                    })
                    .collect(),
            ),
        }
    }
}

/// `Ω_k`: `b` distinct indices drawn uniformly from `0..n`, returned sorted so
/// the gradient sum has a canonical order.
pub fn minibatch(master_seed: u64, replica: u64, k: u64, n: usize, b: usize) -> Vec<usize> {
    let mut rng = stream(master_seed, replica, StreamTag::Minibatch, k);
    let mut idx = rand::seq::index::sample(&mut rng, n, b).into_vec();
    idx.sort_unstable();
    idx
}

/// One SGD step: `θ − (η/b)·Σ_{i∈Ω} ∇f(θ, x_i) (+ η·ξ)`.
pub fn step(
    loss: &LossModel,
    dataset: &Dataset,
    theta: &[f64],
    omega: &[usize],
    eta: f64,
    xi: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut out = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    step_into(loss, dataset, omega, eta, xi, &mut out, &mut grad)?;
    Ok(out)
}

fn step_into(
    loss: &LossModel,
    dataset: &Dataset,
    omega: &[usize],
    eta: f64,
    xi: Option<&[f64]>,
    theta: &mut [f64],
    grad: &mut [f64],
) -> Result<()> {
    if omega.is_empty() {
        return Err(Error::invalid("minibatch must be nonempty"));
    }
    grad.iter_mut().for_each(|g| *g = 0.0);
    for &i in omega {
        if i >= dataset.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                n: dataset.len(),
            });
        }
        loss.accumulate_grad(1.0, theta, dataset.point(i), grad)?;
    }
    linalg::axpy(-eta / omega.len() as f64, grad, theta);
    if let Some(xi) = xi {
        linalg::check_dim(theta.len(), xi.len())?;
        linalg::axpy(eta, xi, theta);
    }
    Ok(())
}

/// Both chains of one replica at a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub k: u64,
    pub base: Vec<f64>,
    pub perturbed: Vec<f64>,
}

impl CheckpointState {
    pub fn distance(&self) -> f64 {
        linalg::dist(&self.base, &self.perturbed)
    }
}

/// Digests of the randomness each chain consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainHashes {
    pub minibatch: u64,
    pub noise: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledTrajectory {
    pub replica: u64,
    /// States at the checkpoints reached before any divergence.
    pub states: Vec<CheckpointState>,
    /// Iteration at which either chain left the divergence threshold.
    pub diverged_at: Option<u64>,
    pub base_hashes: ChainHashes,
    pub perturbed_hashes: ChainHashes,
}

impl CoupledTrajectory {
    pub fn at(&self, k: u64) -> Option<&CheckpointState> {
        self.states.iter().find(|s| s.k == k)
    }
}

struct Chain<'a> {
    dataset: &'a Dataset,
    theta: Vec<f64>,
    grad: Vec<f64>,
    minibatch_hash: StreamHash,
    noise_hash: StreamHash,
}

impl<'a> Chain<'a> {
    fn new(dataset: &'a Dataset, theta0: &[f64]) -> Self {
        Self {
            dataset,
            theta: theta0.to_vec(),
            grad: vec![0.0; theta0.len()],
            minibatch_hash: StreamHash::default(),
            noise_hash: StreamHash::default(),
        }
    }

    fn advance(&mut self, loss: &LossModel, omega: &[usize], eta: f64, xi: Option<&[f64]>) -> Result<()> {
        self.minibatch_hash.update_indices(omega);
        if let Some(xi) = xi {
            self.noise_hash.update_reals(xi);
        }
        step_into(loss, self.dataset, omega, eta, xi, &mut self.theta, &mut self.grad)
    }

    fn diverged(&self) -> bool {
        let n = norm(&self.theta);
        !(n <= DIVERGENCE_THRESHOLD)
    }

    fn hashes(&self) -> ChainHashes {
        ChainHashes {
            minibatch: self.minibatch_hash.value(),
            noise: self.noise_hash.value(),
        }
    }
}

fn validate_checkpoints(checkpoints: &[u64], k_max: u64) -> Result<()> {
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("checkpoints must be strictly increasing"));
    }
    if let Some(&last) = checkpoints.last() {
        if last > k_max {
            return Err(Error::invalid(format!("checkpoint {last} exceeds k_max {k_max}")));
        }
    }
    Ok(())
}

/// Runs SGD on both datasets of `pair` from the shared `theta0` with shared
/// `Ω_k` and `ξ_k`, recording both iterates at each checkpoint. An empty
/// checkpoint list records only `k_max`.
pub fn run_coupled_pair(
    loss: &LossModel,
    pair: &NeighborPair,
    config: &SgdConfig,
    noise: &NoiseModel,
    replica: u64,
    checkpoints: &[u64],
) -> Result<CoupledTrajectory> {
    config.validate(&pair.base)?;
    linalg::check_dim(pair.base.dim(), pair.perturbed.dim())?;
    if pair.base.len() != pair.perturbed.len() {
        return Err(Error::invalid("neighboring datasets must have equal size"));
    }
    noise.validate(pair.base.dim())?;
    loss.validate(pair.base.dim())?;
    let default_checkpoints = [config.k_max];
    let checkpoints = if checkpoints.is_empty() {
        &default_checkpoints[..]
    } else {
        checkpoints
    };
    validate_checkpoints(checkpoints, config.k_max)?;

    let n = pair.base.len();
    let mut base = Chain::new(&pair.base, &config.theta0);
    let mut perturbed = Chain::new(&pair.perturbed, &config.theta0);
    let mut states = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    let mut diverged_at = None;
    let mut k = 0u64;
    loop {
        if next.peek() == Some(&&k) {
            next.next();
            states.push(CheckpointState {
                k,
                base: base.theta.clone(),
                perturbed: perturbed.theta.clone(),
            });
        }
        if k == config.k_max || next.peek().is_none() {
            break;
        }
        k += 1;
        let omega = minibatch(config.master_seed, replica, k, n, config.batch);
        let xi = noise.draw(config.master_seed, replica, k);
        base.advance(loss, &omega, config.eta, xi.as_deref())?;
        perturbed.advance(loss, &omega, config.eta, xi.as_deref())?;
        if base.diverged() || perturbed.diverged() {
            diverged_at = Some(k);
            break;
        }
    }
    Ok(CoupledTrajectory {
        replica,
        states,
        diverged_at,
        base_hashes: base.hashes(),
        perturbed_hashes: perturbed.hashes(),
    })
}

/// `R` independent coupled replicas sampling `ν_k` and `ν̂_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledEnsemble {
    pub replicas: Vec<CoupledTrajectory>,
    pub checkpoints: Vec<u64>,
    pub config: SgdConfig,
    pub noise: NoiseModel,
}

impl CoupledEnsemble {
    /// `(θ_k, θ̂_k)` for every replica that reached checkpoint `k`.
    pub fn pairs_at(&self, k: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.replicas
            .iter()
            .filter_map(|r| r.at(k))
            .map(|s| (s.base.clone(), s.perturbed.clone()))
            .collect()
    }

    pub fn distances_at(&self, k: u64) -> Vec<f64> {
        self.replicas
            .iter()
            .filter_map(|r| r.at(k))
            .map(CheckpointState::distance)
            .collect()
    }

    pub fn n_diverged(&self) -> usize {
        self.replicas.iter().filter(|r| r.diverged_at.is_some()).count()
    }

    /// Writes `replica,k,chain,theta_0..theta_{d−1}` rows.
    pub fn write_trajectory_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let d = self.config.theta0.len();
        let mut header = vec!["replica".to_string(), "k".into(), "chain".into()];
        header.extend((0..d).map(|j| format!("theta_{j}")));
        csv.write_record(&header)?;
        for r in &self.replicas {
            for s in &r.states {
                for (chain, theta) in [("base", &s.base), ("perturbed", &s.perturbed)] {
                    let mut row = vec![r.replica.to_string(), s.k.to_string(), chain.to_string()];
                    row.extend(theta.iter().map(|v| v.to_string()));
                    csv.write_record(&row)?;
                }
            }
        }
        csv.flush()?;
        Ok(())
    }
}

/// Runs `replicas` coupled pairs in parallel. The result is independent of
/// thread count and scheduling.
pub fn run_ensemble(
    loss: &LossModel,
    pair: &NeighborPair,
    config: &SgdConfig,
    noise: &NoiseModel,
    replicas: usize,
    checkpoints: &[u64],
) -> Result<CoupledEnsemble> {
    if replicas == 0 {
        return Err(Error::invalid("replica count must be at least 1"));
    }
    let runs: Result<Vec<_>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| run_coupled_pair(loss, pair, config, noise, r, checkpoints))
        .collect();
    let checkpoints = if checkpoints.is_empty() {
        vec![config.k_max]
    } else {
        checkpoints.to_vec()
    };
    Ok(CoupledEnsemble {
        replicas: runs?,
        checkpoints,
        config: config.clone(),
        noise: noise.clone(),
    })
}

/// `‖θ_k − θ̃_k‖` for `k = 0..=k_max` when two chains on the same dataset
/// start at different points and share all randomness. Stops early on
/// divergence.
pub fn run_contraction_pair(
    loss: &LossModel,
    dataset: &Dataset,
    config: &SgdConfig,
    theta0_a: &[f64],
    theta0_b: &[f64],
    noise: &NoiseModel,
    replica: u64,
) -> Result<Vec<f64>> {
    config.validate(dataset)?;
    linalg::check_dim(dataset.dim(), theta0_a.len())?;
    linalg::check_dim(dataset.dim(), theta0_b.len())?;
    noise.validate(dataset.dim())?;
    loss.validate(dataset.dim())?;
    let mut a = Chain::new(dataset, theta0_a);
    let mut b = Chain::new(dataset, theta0_b);
    let mut out = Vec::with_capacity(config.k_max as usize + 1);
    out.push(linalg::dist(&a.theta, &b.theta));
    for k in 1..=config.k_max {
        let omega = minibatch(config.master_seed, replica, k, dataset.len(), config.batch);
        let xi = noise.draw(config.master_seed, replica, k);
        a.advance(loss, &omega, config.eta, xi.as_deref())?;
        b.advance(loss, &omega, config.eta, xi.as_deref())?;
        if a.diverged() || b.diverged() {
            break;
        }
        out.push(linalg::dist(&a.theta, &b.theta));
    }
    Ok(out)
}
