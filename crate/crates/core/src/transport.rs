//! Empirical Wasserstein distances between equal-size sample clouds.
//!
//! Three estimators: the sorted order-statistics formula in one dimension,
//! an exact minimum-cost perfect matching for any dimension, and the
//! coupled-pair upper bound that uses the synchronous coupling as the
//! transport plan. The dual Lipschitz form is not implemented; on empirical
//! measures the primal matching is already exact.

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::stats::mean_and_stderr;
use crate::{Error, Result};

/// Default maximum cloud size for the assignment estimator.
pub const ASSIGNMENT_CAP: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleCloud {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl SampleCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("sample cloud must hold at least one point"))?;
        for p in &points {
            linalg::check_dim(dim, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("sample cloud points must be finite"));
            }
        }
        Ok(Self { points, dim })
    }

    /// One-dimensional cloud from scalars.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMethod {
    #[serde(rename = "exact_1d")]
    Exact1d,
    Assignment,
    Coupled,
}

impl TransportMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransportMethod::Exact1d => "exact_1d",
            TransportMethod::Assignment => "assignment",
            TransportMethod::Coupled => "coupled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportEstimate {
    pub value: f64,
    pub p: f64,
    pub method: TransportMethod,
    pub n_samples: usize,
    /// Standard error of the mean of the matched `p`-th power costs.
    pub power_mean_stderr: f64,
}

impl TransportEstimate {
    fn from_costs(costs: &[f64], p: f64, method: TransportMethod) -> Self {
        let (mean, se) = mean_and_stderr(costs);
        Self {
            value: mean.max(0.0).powf(1.0 / p),
            p,
            method,
            n_samples: costs.len(),
            power_mean_stderr: se,
        }
    }

    /// `value^p`, the quantity whose standard error is reported.
    pub fn power_mean(&self) -> f64 {
        self.value.powf(self.p)
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::invalid(format!("transport order p = {p} must be finite and >= 1")));
    }
    Ok(())
}

fn check_sizes(a: &SampleCloud, b: &SampleCloud) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "clouds must have equal size, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    linalg::check_dim(a.dim(), b.dim())
}

/// `W_p^p = (1/N) Σ |a_(i) − b_(i)|^p` over sorted samples.
pub fn wasserstein_exact_1d(p: f64, a: &SampleCloud, b: &SampleCloud) -> Result<TransportEstimate> {
    check_p(p)?;
    check_sizes(a, b)?;
    if a.dim() != 1 {
        return Err(Error::invalid("exact 1-D estimator requires d = 1"));
    }
    let sorted = |c: &SampleCloud| {
        let mut v: Vec<f64> = c.points().iter().map(|x| x[0]).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let costs: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs().powf(p)).collect();
    Ok(TransportEstimate::from_costs(&costs, p, TransportMethod::Exact1d))
}

/// Exact empirical `W_p` via minimum-cost perfect matching on
/// `c_ij = ‖a_i − b_j‖^p`, subject to [`ASSIGNMENT_CAP`].
pub fn wasserstein_assignment(p: f64, a: &SampleCloud, b: &SampleCloud) -> Result<TransportEstimate> {
    wasserstein_assignment_capped(p, a, b, ASSIGNMENT_CAP)
}

pub fn wasserstein_assignment_capped(
    p: f64,
    a: &SampleCloud,
    b: &SampleCloud,
    cap: usize,
) -> Result<TransportEstimate> {
    check_p(p)?;
    check_sizes(a, b)?;
    let n = a.len();
    if n > cap {
        return Err(Error::AssignmentCap { n, cap });
    }
    let cost: Vec<f64> = a
        .points()
        .iter()
        .flat_map(|x| b.points().iter().map(move |y| linalg::dist(x, y).powf(p)))
        .collect();
    let assignment = solve_assignment(n, &cost);
    let costs: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .collect();
    Ok(TransportEstimate::from_costs(&costs, p, TransportMethod::Assignment))
}

/// Minimum-cost perfect matching for a dense row-major `n × n` cost matrix
/// (Hungarian method with potentials, `O(n³)`). Returns the column assigned
/// to each row.
pub fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    // 1-based shortest augmenting path formulation; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of[j] - 1] = j - 1;
    }
    col_of_row
}

/// `(mean_r ‖θ^r − θ̂^r‖^p)^{1/p}` over coupled pairs; the coupling is a
/// feasible transport plan, so this upper-bounds the empirical `W_p`.
pub fn coupled_upper_bound(p: f64, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<TransportEstimate> {
    check_p(p)?;
    if pairs.is_empty() {
        return Err(Error::invalid("coupled estimator needs at least one pair"));
    }
    let mut costs = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        linalg::check_dim(a.len(), b.len())?;
        costs.push(linalg::dist(a, b).powf(p));
    }
    Ok(TransportEstimate::from_costs(&costs, p, TransportMethod::Coupled))
}

/// Splits coupled pairs into the two marginal clouds.
pub fn marginal_clouds(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<(SampleCloud, SampleCloud)> {
    let a = pairs.iter().map(|(x, _)| x.clone()).collect();
    let b = pairs.iter().map(|(_, y)| y.clone()).collect();
    Ok((SampleCloud::new(a)?, SampleCloud::new(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use proptest::prelude::*;

    fn cloud(v: &[f64]) -> SampleCloud {
        SampleCloud::from_scalars(v).unwrap()
    }

    fn brute_force(p: f64, a: &SampleCloud, b: &SampleCloud) -> f64 {
        let n = a.len();
        (0..n)
            .permutations(n)
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| linalg::dist(&a.points()[i], &b.points()[j]).powf(p))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            / n as f64
    }

    #[test]
    fn exact_1d_examples() {
        let a = cloud(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein_exact_1d(1.0, &a, &a).unwrap().value, 0.0);
        assert_eq!(wasserstein_exact_1d(1.0, &cloud(&[5.0]), &cloud(&[8.0])).unwrap().value, 3.0);
        let est = wasserstein_exact_1d(1.0, &cloud(&[0.0, 2.0]), &cloud(&[1.0, 3.0])).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.method, TransportMethod::Exact1d);
    }

    #[test]
    fn exact_1d_errors() {
        assert!(wasserstein_exact_1d(1.0, &cloud(&[0.0]), &cloud(&[0.0, 1.0])).is_err());
        let two_d = SampleCloud::new(vec![vec![0.0, 1.0]]).unwrap();
        assert!(wasserstein_exact_1d(1.0, &two_d, &two_d).is_err());
        assert!(wasserstein_exact_1d(0.5, &cloud(&[0.0]), &cloud(&[1.0])).is_err());
    }

    #[test]
    fn assignment_examples() {
        let est = wasserstein_assignment(2.0, &cloud(&[0.0, 2.0]), &cloud(&[1.0, 3.0])).unwrap();
        assert!((est.value - 1.0).abs() < 1e-15);
        let b = SampleCloud::new(vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]]).unwrap();
        let a = SampleCloud::new(vec![vec![3.0, 3.0], vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        assert_eq!(wasserstein_assignment(1.5, &a, &b).unwrap().value, 0.0);
    }

    #[test]
    fn assignment_cap_enforced() {
        let a = cloud(&[0.0, 1.0, 2.0]);
        let err = wasserstein_assignment_capped(1.0, &a, &a, 2).unwrap_err();
        assert!(matches!(err, Error::AssignmentCap { n: 3, cap: 2 }));
        assert!(err.to_string().contains("subsample"));
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = crate::rng::stream(5, 0, crate::rng::StreamTag::MonteCarlo, 0);
        use rand::Rng;
        for n in 1..=7 {
            for _ in 0..10 {
                let pts = |rng: &mut rand_chacha::ChaCha8Rng| {
                    (0..n)
                        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                        .collect::<Vec<_>>()
                };
                let a = SampleCloud::new(pts(&mut rng)).unwrap();
                let b = SampleCloud::new(pts(&mut rng)).unwrap();
                for p in [1.0, 2.0] {
                    let got = wasserstein_assignment(p, &a, &b).unwrap().power_mean();
                    let want = brute_force(p, &a, &b);
                    assert!((got - want).abs() <= 1e-12 * (1.0 + want), "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn coupled_examples() {
        let same = vec![(vec![1.0, 2.0], vec![1.0, 2.0]); 3];
        assert_eq!(coupled_upper_bound(2.0, &same).unwrap().value, 0.0);
        assert_eq!(coupled_upper_bound(1.0, &[(vec![0.0], vec![3.0])]).unwrap().value, 3.0);
        let pairs = [(vec![0.0], vec![1.0]), (vec![0.0], vec![3.0])];
        let est = coupled_upper_bound(2.0, &pairs).unwrap();
        assert!((est.value - 5f64.sqrt()).abs() < 1e-15);
        assert!(coupled_upper_bound(1.0, &[]).is_err());
    }

    fn arb_cloud(n: usize, d: usize) -> impl Strategy<Value = SampleCloud> {
        proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), n)
            .prop_map(|p| SampleCloud::new(p).unwrap())
    }

    fn arb_triple() -> impl Strategy<Value = (SampleCloud, SampleCloud, SampleCloud)> {
        (1usize..12, 1usize..4).prop_flat_map(|(n, d)| (arb_cloud(n, d), arb_cloud(n, d), arb_cloud(n, d)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn oracle_equivalence_1d(n in 1usize..64, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, 0, crate::rng::StreamTag::MonteCarlo, 0);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            for p in [1.0, 1.5, 2.0] {
                let exact = wasserstein_exact_1d(p, &cloud(&a), &cloud(&b)).unwrap().value;
                let assign = wasserstein_assignment(p, &cloud(&a), &cloud(&b)).unwrap().value;
                prop_assert!((exact - assign).abs() <= 1e-12, "{} vs {}", exact, assign);
            }
        }

        #[test]
        fn metric_axioms((a, b, c) in arb_triple()) {
            for p in [1.0, 1.5, 2.0] {
                let ab = wasserstein_assignment(p, &a, &b).unwrap().value;
                let ba = wasserstein_assignment(p, &b, &a).unwrap().value;
                let bc = wasserstein_assignment(p, &b, &c).unwrap().value;
                let ac = wasserstein_assignment(p, &a, &c).unwrap().value;
                prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
                prop_assert_eq!(wasserstein_assignment(p, &a, &a).unwrap().value, 0.0);
                prop_assert!(ac <= ab + bc + 1e-12 * (1.0 + ac));
            }
        }

        #[test]
        fn nondecreasing_in_p((a, b, _c) in arb_triple()) {
            let w1 = wasserstein_assignment(1.0, &a, &b).unwrap().value;
            let w15 = wasserstein_assignment(1.5, &a, &b).unwrap().value;
            let w2 = wasserstein_assignment(2.0, &a, &b).unwrap().value;
            prop_assert!(w1 <= w15 * (1.0 + 1e-12) + 1e-15);
            prop_assert!(w15 <= w2 * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn assignment_dominated_by_coupling((a, b, _c) in arb_triple(), p in 1.0f64..3.0) {
            let pairs: Vec<_> = a.points().iter().cloned().zip(b.points().iter().cloned()).collect();
            let coupled = coupled_upper_bound(p, &pairs).unwrap().value;
            let assign = wasserstein_assignment(p, &a, &b).unwrap().value;
            prop_assert!(assign <= coupled * (1.0 + 1e-12));
        }
    }
}
