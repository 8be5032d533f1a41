//! Loss families, bounded synthetic datasets, neighboring pairs and the
//! assumption constants each (loss, dataset) combination induces.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, dot, norm};
use crate::rng::{stream, StreamTag};
use crate::{Error, Result};

/// One labelled sample `x = (a, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub a: Vec<f64>,
    pub y: f64,
}

impl DataPoint {
    pub fn new(a: Vec<f64>, y: f64) -> Self {
        Self { a, y }
    }

    /// Euclidean norm of the concatenated `(a, y)` vector.
    pub fn norm(&self) -> f64 {
        (linalg::norm_sq(&self.a) + self.y * self.y).sqrt()
    }

    /// `‖x − x̂‖` over the concatenated vectors.
    pub fn dist(&self, other: &DataPoint) -> f64 {
        let da = linalg::norm_sq(&linalg::sub(&self.a, &other.a));
        (da + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// `a = e₁`, `y = 1` at every index.
    UnitFixed,
    /// Label uniform in the label range, features uniform on the sphere that
    /// puts `‖x‖` exactly at the radius.
    SphereUniform,
    /// Standard Gaussian features, uniform label, radially clipped to the radius.
    GaussianClipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub d: usize,
    pub radius: f64,
    #[serde(default = "default_label_range")]
    pub label_range: (f64, f64),
    pub generator: Generator,
}

fn default_label_range() -> (f64, f64) {
    (-1.0, 1.0)
}

impl DatasetSpec {
    pub fn new(n: usize, d: usize, radius: f64, generator: Generator) -> Self {
        Self {
            n,
            d,
            radius,
            label_range: default_label_range(),
            generator,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("dataset size n must be at least 1"));
        }
        if self.d == 0 {
            return Err(Error::invalid("dimension d must be at least 1"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid("radius D must be positive and finite"));
        }
        let (lo, hi) = self.label_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid("label_range must be a finite interval lo <= hi"));
        }
        if self.generator == Generator::UnitFixed && self.radius < 2f64.sqrt() {
            return Err(Error::invalid(
                "unit_fixed points have norm sqrt(2); radius must be at least sqrt(2)",
            ));
        }
        Ok(())
    }

    /// Draws point `index` of the dataset generated with `seed`. Each point is
    /// a pure function of `(seed, index)`, so datasets of different sizes built
    /// from one seed share their common prefix.
    fn draw(&self, seed: u64, index: usize, tag: StreamTag) -> DataPoint {
        let mut rng = stream(seed, index as u64, tag, 0);
        let d = self.d;
        let radius = self.radius;
        let (lo, hi) = self.label_range;
        let point = match self.generator {
            Generator::UnitFixed => {
                let mut a = vec![0.0; d];
                a[0] = 1.0;
                DataPoint::new(a, 1.0)
            }
            Generator::SphereUniform => {
                let y = (lo + (hi - lo) * rng.random::<f64>()).clamp(-radius, radius);
                let dir = unit_direction(&mut rng, d);
                let r = (radius * radius - y * y).max(0.0).sqrt();
                DataPoint::new(linalg::scale(r, &dir), y)
            }
            Generator::GaussianClipped => {
                let a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let y = lo + (hi - lo) * rng.random::<f64>();
                DataPoint::new(a, y)
            }
        };
        clip_to_radius(point, radius)
    }
}

fn unit_direction<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let nv = norm(&v);
        if nv > 1e-12 {
            return linalg::scale(1.0 / nv, &v);
        }
    }
}

/// Radially rescales `x` so that `‖x‖ ≤ radius` holds in floating point.
fn clip_to_radius(mut x: DataPoint, radius: f64) -> DataPoint {
    let mut nx = x.norm();
    let mut factor = 1.0;
    while nx > radius {
        let s = radius / nx * factor;
        x.a.iter_mut().for_each(|v| *v *= s);
        x.y *= s;
        nx = x.norm();
        factor *= 1.0 - 4.0 * f64::EPSILON;
    }
    x
}

/// A finite dataset with a certified norm bound `‖x‖ ≤ radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    points: Vec<DataPoint>,
    radius: f64,
    dim: usize,
    origin: Option<(DatasetSpec, u64)>,
}

impl Dataset {
    /// Builds a dataset from explicit points. Fails if any point violates the
    /// radius or the feature dimensions disagree.
    pub fn from_points(points: Vec<DataPoint>, radius: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("dataset must contain at least one point"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid("radius D must be positive and finite"));
        }
        let dim = points[0].a.len();
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        for (i, p) in points.iter().enumerate() {
            linalg::check_dim(dim, p.a.len())?;
            if !(p.norm() <= radius) {
                return Err(Error::invalid(format!(
                    "point {i} has norm {} > radius {radius}",
                    p.norm()
                )));
            }
        }
        Ok(Self {
            points,
            radius,
            dim,
            origin: None,
        })
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &DataPoint {
        &self.points[i]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Generator spec and seed, when the dataset was synthesized.
    pub fn origin(&self) -> Option<&(DatasetSpec, u64)> {
        self.origin.as_ref()
    }

    /// Returns a copy with `points[index]` replaced.
    pub fn with_replaced(&self, index: usize, point: DataPoint) -> Result<Self> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                n: self.len(),
            });
        }
        linalg::check_dim(self.dim, point.a.len())?;
        if !(point.norm() <= self.radius) {
            return Err(Error::invalid("replacement point exceeds dataset radius"));
        }
        let mut out = self.clone();
        out.points[index] = point;
        Ok(out)
    }

    /// Writes the JSON-lines form: a header object, then one point per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            n: self.len(),
            d: self.dim,
            radius: self.radius,
            generator: self.origin.as_ref().map(|(s, _)| s.generator),
            label_range: self.origin.as_ref().map(|(s, _)| s.label_range),
            seed: self.origin.as_ref().map(|(_, seed)| *seed),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for p in &self.points {
            serde_json::to_writer(&mut w, p)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::invalid("empty dataset file"))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        let mut points = Vec::with_capacity(header.n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            points.push(serde_json::from_str::<DataPoint>(&line)?);
        }
        if points.len() != header.n {
            return Err(Error::invalid(format!(
                "header declares n = {} but file holds {} points",
                header.n,
                points.len()
            )));
        }
        let mut ds = Dataset::from_points(points, header.radius)?;
        linalg::check_dim(header.d, ds.dim)?;
        if let (Some(generator), Some(seed)) = (header.generator, header.seed) {
            let mut spec = DatasetSpec::new(header.n, header.d, header.radius, generator);
            if let Some(range) = header.label_range {
                spec.label_range = range;
            }
            ds.origin = Some((spec, seed));
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    d: usize,
    #[serde(rename = "D")]
    radius: f64,
    generator: Option<Generator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_range: Option<(f64, f64)>,
    seed: Option<u64>,
}

/// Deterministic synthetic dataset with every point inside the radius.
pub fn make_synthetic_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let points = (0..spec.n)
        .map(|i| spec.draw(seed, i, StreamTag::Dataset))
        .collect();
    Ok(Dataset {
        points,
        radius: spec.radius,
        dim: spec.d,
        origin: Some((spec.clone(), seed)),
    })
}

/// Two datasets of equal size that agree everywhere except `differing_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborPair {
    pub base: Dataset,
    pub perturbed: Dataset,
    pub differing_index: usize,
}

impl NeighborPair {
    /// Pairs `base` with a copy whose `index`-th point is `replacement`.
    pub fn from_replacement(base: Dataset, index: usize, replacement: DataPoint) -> Result<Self> {
        let perturbed = base.with_replaced(index, replacement)?;
        Ok(Self {
            base,
            perturbed,
            differing_index: index,
        })
    }

    /// A pair whose two datasets are identical.
    pub fn identical(base: Dataset) -> Self {
        Self {
            perturbed: base.clone(),
            base,
            differing_index: 0,
        }
    }
}

/// Replaces `points[index]` with a fresh draw from the generator that built
/// `base`. The draw may coincide with the original point.
pub fn make_neighbor(base: &Dataset, index: usize, seed: u64) -> Result<NeighborPair> {
    if index >= base.len() {
        return Err(Error::IndexOutOfRange {
            index,
            n: base.len(),
        });
    }
    let (spec, _) = base
        .origin
        .as_ref()
        .ok_or_else(|| Error::invalid("make_neighbor needs a synthesized dataset; use NeighborPair::from_replacement"))?;
    let fresh = spec.draw(seed, index, StreamTag::Neighbor);
    NeighborPair::from_replacement(base.clone(), index, fresh)
}

/// Loss families with closed-form gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossModel {
    /// `(aᵀθ − y)²/2`
    Quadratic,
    /// `(aᵀθ − y)²/2 + (μ₀/2)‖θ‖²`
    RidgeQuadratic { mu0: f64 },
    /// `(m₀/2)‖θ‖² + s·sin(aᵀθ − y)`
    RegularizedSine { m0: f64, s: f64 },
    /// `(μ/p)|θ − y|^p`, scalar parameter only.
    ScalarPower { p: f64, mu: f64 },
}

impl LossModel {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            LossModel::Quadratic => Ok(()),
            LossModel::RidgeQuadratic { mu0 } => {
                if !(mu0 > 0.0 && mu0.is_finite()) {
                    return Err(Error::invalid("ridge weight mu0 must be positive"));
                }
                Ok(())
            }
            LossModel::RegularizedSine { m0, s } => {
                if !(m0 > 0.0 && m0.is_finite()) {
                    return Err(Error::invalid("base curvature m0 must be positive"));
                }
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::invalid("sine amplitude s must be nonnegative"));
                }
                Ok(())
            }
            LossModel::ScalarPower { p, mu } => {
                if dim != 1 {
                    return Err(Error::invalid("scalar_power requires d = 1"));
                }
                if !(p > 1.0 && p < 2.0) {
                    return Err(Error::invalid("scalar_power exponent p must lie in (1, 2)"));
                }
                if !(mu > 0.0 && mu.is_finite()) {
                    return Err(Error::invalid("scalar_power scale mu must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn value(&self, theta: &[f64], x: &DataPoint) -> Result<f64> {
        linalg::check_dim(x.a.len(), theta.len())?;
        Ok(match *self {
            LossModel::Quadratic => 0.5 * (dot(&x.a, theta) - x.y).powi(2),
            LossModel::RidgeQuadratic { mu0 } => {
                0.5 * (dot(&x.a, theta) - x.y).powi(2) + 0.5 * mu0 * linalg::norm_sq(theta)
            }
            LossModel::RegularizedSine { m0, s } => {
                0.5 * m0 * linalg::norm_sq(theta) + s * (dot(&x.a, theta) - x.y).sin()
            }
            LossModel::ScalarPower { p, mu } => {
                if theta.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: theta.len(),
                    });
                }
                mu / p * (theta[0] - x.y).abs().powf(p)
            }
        })
    }

    /// Exact gradient `∇_θ f(θ, x)`.
    pub fn grad(&self, theta: &[f64], x: &DataPoint) -> Result<Vec<f64>> {
        let mut g = vec![0.0; theta.len()];
        self.grad_into(theta, x, &mut g)?;
        Ok(g)
    }

    /// Adds `weight · ∇f(θ, x)` into `out`.
    pub fn grad_into(&self, theta: &[f64], x: &DataPoint, out: &mut [f64]) -> Result<()> {
        self.accumulate_grad(1.0, theta, x, out)
    }

    pub(crate) fn accumulate_grad(
        &self,
        weight: f64,
        theta: &[f64],
        x: &DataPoint,
        out: &mut [f64],
    ) -> Result<()> {
        linalg::check_dim(x.a.len(), theta.len())?;
        linalg::check_dim(theta.len(), out.len())?;
        match *self {
            LossModel::Quadratic => {
                let r = dot(&x.a, theta) - x.y;
                linalg::axpy(weight * r, &x.a, out);
            }
            LossModel::RidgeQuadratic { mu0 } => {
                let r = dot(&x.a, theta) - x.y;
                linalg::axpy(weight * r, &x.a, out);
                linalg::axpy(weight * mu0, theta, out);
            }
            LossModel::RegularizedSine { m0, s } => {
                let c = (dot(&x.a, theta) - x.y).cos();
                linalg::axpy(weight * s * c, &x.a, out);
                linalg::axpy(weight * m0, theta, out);
            }
            LossModel::ScalarPower { p, mu } => {
                if theta.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: theta.len(),
                    });
                }
                let u = theta[0] - x.y;
                // Kink at θ = y: gradient defined as 0.
                let g = if u == 0.0 {
                    0.0
                } else {
                    mu * u.signum() * u.abs().powf(p - 1.0)
                };
                out[0] += weight * g;
            }
        }
        Ok(())
    }

    /// Gradient of the empirical risk `(1/n) Σ f(θ, x_i)`.
    pub fn full_grad(&self, theta: &[f64], dataset: &Dataset) -> Result<Vec<f64>> {
        let mut g = vec![0.0; theta.len()];
        let w = 1.0 / dataset.len() as f64;
        for x in dataset.points() {
            self.accumulate_grad(w, theta, x, &mut g)?;
        }
        Ok(g)
    }
}

/// Constants appearing in the pseudo-Lipschitz, convexity and dissipativity
/// hypotheses for one (loss, dataset) combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    pub mu: f64,
    pub m: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub p: f64,
    #[serde(rename = "D")]
    pub d_radius: f64,
    #[serde(rename = "E")]
    pub e: f64,
}

/// Conservative closed-form constants. `E` is the exact maximum of
/// `‖∇f(0, x_i)‖` over the realized points.
///
/// Per family (`D` the data radius):
///
/// * Quadratic: `‖aaᵀ‖ ≤ D²` gives `K₁ = D²`; `‖aaᵀ − ââᵀ‖ ≤ 2D‖a − â‖` and
///   `‖ay − âŷ‖ ≤ √2·D‖x − x̂‖` give `K₂ = 2D`; `μ = m = K = 0`.
/// * RidgeQuadratic: as above with `K₁ = D² + μ₀`; `μ = m = μ₀`, `K = 0`.
/// * RegularizedSine: `|cos u − cos v| ≤ min(2, |u − v|)` bounds the sine
///   term's monotonicity defect by `2sD‖Δ‖ ≤ (m₀/2)‖Δ‖² + 2s²D²/m₀`, so
///   `m = m₀/2`, `K = 2s²D²/m₀`; `K₁ = m₀ + sD²`, `K₂ = s(1 + D)`.
/// * ScalarPower: `μ_eff = (p − 1)μ`; the gradient is `(p−1)`-Hölder with
///   constant `2^{2−p}μ`, giving `K₁ = K₂ = 2^{2−p}μ` (exact only for
///   separations of at least one).
pub fn derive_constants(loss: &LossModel, dataset: &Dataset) -> Result<AssumptionConstants> {
    loss.validate(dataset.dim())?;
    let d_radius = dataset.radius();
    let zero = vec![0.0; dataset.dim()];
    let mut e = 0.0_f64;
    for x in dataset.points() {
        e = e.max(norm(&loss.grad(&zero, x)?));
    }
    let c = match *loss {
        LossModel::Quadratic => AssumptionConstants {
            k1: d_radius * d_radius,
            k2: 2.0 * d_radius,
            mu: 0.0,
            m: 0.0,
            k: 0.0,
            p: 2.0,
            d_radius,
            e,
        },
        LossModel::RidgeQuadratic { mu0 } => AssumptionConstants {
            k1: d_radius * d_radius + mu0,
            k2: 2.0 * d_radius,
            mu: mu0,
            m: mu0,
            k: 0.0,
            p: 2.0,
            d_radius,
            e,
        },
        LossModel::RegularizedSine { m0, s } => AssumptionConstants {
            k1: m0 + s * d_radius * d_radius,
            k2: s * (1.0 + d_radius),
            mu: 0.0,
            m: 0.5 * m0,
            k: 2.0 * s * s * d_radius * d_radius / m0,
            p: 2.0,
            d_radius,
            e,
        },
        LossModel::ScalarPower { p, mu } => {
            let holder = 2f64.powf(2.0 - p) * mu;
            AssumptionConstants {
                k1: holder,
                k2: holder,
                mu: (p - 1.0) * mu,
                m: 0.0,
                k: 0.0,
                p,
                d_radius,
                e,
            }
        }
    };
    Ok(c)
}

/// Hypotheses that can be audited by random sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    /// `‖∇f(θ,x) − ∇f(θ̂,x̂)‖ ≤ K₁‖θ−θ̂‖ + K₂‖x−x̂‖(‖θ‖+‖θ̂‖+1)`
    PseudoLipschitz,
    /// `⟨∇f(θ₁,x) − ∇f(θ₂,x), θ₁−θ₂⟩ ≥ μ‖θ₁−θ₂‖²`
    StrongConvexity,
    /// `⟨∇f(θ₁,x) − ∇f(θ₂,x), θ₁−θ₂⟩ ≥ m‖θ₁−θ₂‖² − K`
    Dissipativity,
    /// `⟨∇f(θ₁,x) − ∇f(θ₂,x), θ₁−θ₂⟩ ≥ μ‖θ₁−θ₂‖^p`
    PowerConvexity,
    /// `‖∇f(θ,x) − ∇f(θ̂,x̂)‖ ≤ K₁‖θ−θ̂‖^{p/2} + K₂‖x−x̂‖(‖θ‖^{p−1}+‖θ̂‖^{p−1}+1)`
    HolderLipschitz,
}

impl Hypothesis {
    /// Hypotheses the regime served by each family relies on.
    pub fn claimed_by(loss: &LossModel) -> &'static [Hypothesis] {
        match loss {
            LossModel::Quadratic | LossModel::RidgeQuadratic { .. } => {
                &[Hypothesis::PseudoLipschitz, Hypothesis::StrongConvexity]
            }
            LossModel::RegularizedSine { .. } => {
                &[Hypothesis::PseudoLipschitz, Hypothesis::Dissipativity]
            }
            LossModel::ScalarPower { .. } => {
                &[Hypothesis::PowerConvexity, Hypothesis::HolderLipschitz]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub hypothesis: Hypothesis,
    pub violations: usize,
    pub worst_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub violations: usize,
    pub worst_margin: f64,
    pub checks: Vec<HypothesisCheck>,
}

/// Radius of the ball parameters are sampled from.
pub const ASSUMPTION_BALL_RADIUS: f64 = 10.0;

/// Random-sample audit of the hypotheses the loss family claims. Parameters
/// are drawn from a ball of radius 10; `x` from the dataset; `x̂` from the
/// dataset or, for synthesized data, a fresh generator draw.
pub fn check_assumptions(
    loss: &LossModel,
    dataset: &Dataset,
    constants: &AssumptionConstants,
    n_samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    check_hypotheses(
        loss,
        dataset,
        constants,
        Hypothesis::claimed_by(loss),
        n_samples,
        seed,
    )
}

pub fn check_hypotheses(
    loss: &LossModel,
    dataset: &Dataset,
    constants: &AssumptionConstants,
    hypotheses: &[Hypothesis],
    n_samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    loss.validate(dataset.dim())?;
    let d = dataset.dim();
    let mut checks: Vec<HypothesisCheck> = hypotheses
        .iter()
        .map(|&h| HypothesisCheck {
            hypothesis: h,
            violations: 0,
            worst_margin: f64::INFINITY,
        })
        .collect();
    for s in 0..n_samples {
        let mut rng = stream(seed, s as u64, StreamTag::Assumption, 0);
        let t1 = sample_ball(&mut rng, d, ASSUMPTION_BALL_RADIUS);
        let t2 = sample_ball(&mut rng, d, ASSUMPTION_BALL_RADIUS);
        let x = dataset.point(rng.random_range(0..dataset.len())).clone();
        let x_hat = match dataset.origin() {
            Some((spec, gen_seed)) if rng.random::<bool>() => {
                spec.draw(gen_seed ^ 0xA5A5_A5A5, s, StreamTag::Assumption)
            }
            _ => dataset.point(rng.random_range(0..dataset.len())).clone(),
        };
        for check in checks.iter_mut() {
            let (lhs, rhs) = hypothesis_sides(loss, constants, check.hypothesis, &t1, &t2, &x, &x_hat)?;
            let margin = rhs - lhs;
            let tol = 1e-10 * (1.0 + lhs.abs() + rhs.abs());
            if margin < -tol {
                check.violations += 1;
            }
            check.worst_margin = check.worst_margin.min(margin);
        }
    }
    let violations = checks.iter().map(|c| c.violations).sum();
    let worst_margin = checks
        .iter()
        .map(|c| c.worst_margin)
        .fold(f64::INFINITY, f64::min);
    Ok(AssumptionReport {
        violations,
        worst_margin,
        checks,
    })
}

/// Returns `(lhs, rhs)` oriented so that the hypothesis reads `lhs ≤ rhs`.
pub fn hypothesis_sides(
    loss: &LossModel,
    c: &AssumptionConstants,
    h: Hypothesis,
    t1: &[f64],
    t2: &[f64],
    x: &DataPoint,
    x_hat: &DataPoint,
) -> Result<(f64, f64)> {
    let delta = linalg::sub(t1, t2);
    let dn = norm(&delta);
    let inner = || -> Result<f64> {
        let g1 = loss.grad(t1, x)?;
        let g2 = loss.grad(t2, x)?;
        Ok(dot(&linalg::sub(&g1, &g2), &delta))
    };
    let cross = || -> Result<f64> {
        let g1 = loss.grad(t1, x)?;
        let g2 = loss.grad(t2, x_hat)?;
        Ok(linalg::dist(&g1, &g2))
    };
    Ok(match h {
        Hypothesis::PseudoLipschitz => {
            let rhs = c.k1 * dn + c.k2 * x.dist(x_hat) * (norm(t1) + norm(t2) + 1.0);
            (cross()?, rhs)
        }
        Hypothesis::StrongConvexity => (c.mu * dn * dn, inner()?),
        Hypothesis::Dissipativity => (c.m * dn * dn - c.k, inner()?),
        Hypothesis::PowerConvexity => (c.mu * dn.powf(c.p), inner()?),
        Hypothesis::HolderLipschitz => {
            let q = c.p - 1.0;
            let rhs = c.k1 * dn.powf(c.p / 2.0)
                + c.k2 * x.dist(x_hat) * (norm(t1).powf(q) + norm(t2).powf(q) + 1.0);
            (cross()?, rhs)
        }
    })
}

fn sample_ball<R: Rng>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    let dir = unit_direction(rng, d);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    linalg::scale(r, &dir)
}

/// Numerically minimizes the empirical risk. Scalar power losses use
/// bisection on the monotone gradient; the other families use full-batch
/// gradient descent with step `1/K₁`. For non-convex losses the result is
/// the stationary point reached from `theta0`.
pub fn minimize_empirical_risk(loss: &LossModel, dataset: &Dataset, theta0: &[f64]) -> Result<Vec<f64>> {
    loss.validate(dataset.dim())?;
    linalg::check_dim(dataset.dim(), theta0.len())?;
    if let LossModel::ScalarPower { .. } = loss {
        let ys = dataset.points().iter().map(|p| p.y);
        let mut lo = ys.clone().fold(f64::INFINITY, f64::min);
        let mut hi = ys.fold(f64::NEG_INFINITY, f64::max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if loss.full_grad(&[mid], dataset)?[0] > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        return Ok(vec![0.5 * (lo + hi)]);
    }
    let c = derive_constants(loss, dataset)?;
    let step = 1.0 / c.k1.max(1e-12);
    let mut theta = theta0.to_vec();
    for _ in 0..1_000_000 {
        let g = loss.full_grad(&theta, dataset)?;
        if norm(&g) <= 1e-13 * (1.0 + norm(&theta)) {
            break;
        }
        linalg::axpy(-step, &g, &mut theta);
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_fixed(n: usize, d: usize) -> Dataset {
        make_synthetic_dataset(&DatasetSpec::new(n, d, 2f64.sqrt(), Generator::UnitFixed), 0).unwrap()
    }

    fn central_difference(loss: &LossModel, theta: &[f64], x: &DataPoint, h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|j| {
                let mut tp = theta.to_vec();
                let mut tm = theta.to_vec();
                tp[j] += h;
                tm[j] -= h;
                (loss.value(&tp, x).unwrap() - loss.value(&tm, x).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_gradient_formula() {
        let g = LossModel::Quadratic
            .grad(&[2.0, 0.0], &DataPoint::new(vec![1.0, 0.0], 1.0))
            .unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn ridge_is_stationary_at_origin_for_zero_label() {
        let g = LossModel::RidgeQuadratic { mu0: 1.0 }
            .grad(&[0.0, 0.0], &DataPoint::new(vec![1.0, 0.0], 0.0))
            .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn sine_gradient_matches_finite_difference() {
        let loss = LossModel::RegularizedSine { m0: 2.0, s: 0.5 };
        let x = DataPoint::new(vec![1.0], 0.0);
        let g = loss.grad(&[0.0], &x).unwrap();
        let fd = central_difference(&loss, &[0.0], &x, 1e-5);
        assert_eq!(g[0], 0.5);
        assert!((fd[0] - 0.5).abs() / 0.5 <= 1e-6);
    }

    #[test]
    fn gradient_dimension_mismatch() {
        let err = LossModel::Quadratic
            .grad(&[1.0], &DataPoint::new(vec![1.0, 0.0], 0.0))
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn scalar_power_kink_gradient_is_zero() {
        let loss = LossModel::ScalarPower { p: 1.5, mu: 1.0 };
        assert_eq!(loss.grad(&[0.3], &DataPoint::new(vec![0.0], 0.3)).unwrap(), vec![0.0]);
        assert!(loss.validate(2).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_for_all_families() {
        let families = [
            LossModel::Quadratic,
            LossModel::RidgeQuadratic { mu0: 0.7 },
            LossModel::RegularizedSine { m0: 2.0, s: 0.5 },
            LossModel::ScalarPower { p: 1.5, mu: 1.3 },
        ];
        for (fi, loss) in families.iter().enumerate() {
            let d = if matches!(loss, LossModel::ScalarPower { .. }) { 1 } else { 3 };
            let spec = DatasetSpec::new(20, d, 1.0, Generator::GaussianClipped);
            let ds = make_synthetic_dataset(&spec, 11).unwrap();
            for t in 0..100u64 {
                let mut rng = stream(99, t, StreamTag::MonteCarlo, fi as u64);
                let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let x = ds.point(rng.random_range(0..ds.len()));
                let g = loss.grad(&theta, x).unwrap();
                let fd = central_difference(loss, &theta, x, 1e-5);
                let err = linalg::dist(&g, &fd);
                let scale = norm(&g).max(1e-3);
                assert!(err / scale <= 1e-6, "{loss:?} t={t}: rel err {}", err / scale);
            }
        }
    }

    #[test]
    fn unit_fixed_points() {
        let ds = unit_fixed(4, 1);
        assert!(ds.points().iter().all(|p| p.a == vec![1.0] && p.y == 1.0));
        assert!(make_synthetic_dataset(&DatasetSpec::new(4, 1, 1.0, Generator::UnitFixed), 0).is_err());
    }

    #[test]
    fn sphere_dataset_respects_radius_and_is_deterministic() {
        let spec = DatasetSpec::new(100, 3, 2.0, Generator::SphereUniform);
        let a = make_synthetic_dataset(&spec, 7).unwrap();
        let b = make_synthetic_dataset(&spec, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert!(a.points().iter().all(|p| p.norm() <= 2.0));
        let bits = |d: &Dataset| -> Vec<u64> {
            d.points()
                .iter()
                .flat_map(|p| p.a.iter().chain(std::iter::once(&p.y)).map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(make_synthetic_dataset(&DatasetSpec::new(0, 1, 1.0, Generator::GaussianClipped), 0).is_err());
        assert!(make_synthetic_dataset(&DatasetSpec::new(3, 0, 1.0, Generator::GaussianClipped), 0).is_err());
        assert!(make_synthetic_dataset(&DatasetSpec::new(3, 1, -1.0, Generator::GaussianClipped), 0).is_err());
    }

    #[test]
    fn neighbor_differs_only_at_index() {
        let spec = DatasetSpec::new(16, 2, 1.5, Generator::GaussianClipped);
        let base = make_synthetic_dataset(&spec, 3).unwrap();
        let pair = make_neighbor(&base, 5, 9).unwrap();
        assert_eq!(pair.differing_index, 5);
        for i in 0..16 {
            if i != 5 {
                assert_eq!(pair.base.point(i), pair.perturbed.point(i));
            }
        }
        assert_ne!(pair.base.point(5), pair.perturbed.point(5));
        assert!(pair.perturbed.point(5).norm() <= 1.5);
    }

    #[test]
    fn degenerate_neighbor_is_valid() {
        let pair = make_neighbor(&unit_fixed(4, 1), 2, 1).unwrap();
        assert_eq!(pair.base, pair.perturbed);
        assert_eq!(pair.differing_index, 2);
    }

    #[test]
    fn neighbor_index_out_of_range() {
        let err = make_neighbor(&unit_fixed(4, 1), 4, 1).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 4, n: 4 }));
    }

    #[test]
    fn sine_constants() {
        let spec = DatasetSpec::new(8, 1, 1.0, Generator::SphereUniform);
        let ds = make_synthetic_dataset(&spec, 1).unwrap();
        let c = derive_constants(&LossModel::RegularizedSine { m0: 2.0, s: 0.5 }, &ds).unwrap();
        assert_eq!(c.m, 1.0);
        assert_eq!(c.k, 0.25);
    }

    #[test]
    fn ridge_and_plain_quadratic_moduli() {
        let spec = DatasetSpec::new(8, 2, 1.0, Generator::SphereUniform);
        let ds = make_synthetic_dataset(&spec, 1).unwrap();
        assert_eq!(derive_constants(&LossModel::RidgeQuadratic { mu0: 1.0 }, &ds).unwrap().mu, 1.0);
        assert_eq!(derive_constants(&LossModel::Quadratic, &ds).unwrap().mu, 0.0);
    }

    #[test]
    fn ridge_constants_certified_and_inflated_mu_caught() {
        let spec = DatasetSpec::new(32, 2, 1.0, Generator::SphereUniform);
        let ds = make_synthetic_dataset(&spec, 5).unwrap();
        let loss = LossModel::RidgeQuadratic { mu0: 1.0 };
        let c = derive_constants(&loss, &ds).unwrap();
        let report = check_assumptions(&loss, &ds, &c, 10_000, 17).unwrap();
        assert_eq!(report.violations, 0, "{report:?}");

        let mut inflated = c;
        inflated.mu *= 10.0;
        let report = check_hypotheses(&loss, &ds, &inflated, &[Hypothesis::StrongConvexity], 10_000, 17).unwrap();
        assert!(report.violations > 0);
    }

    #[test]
    fn equal_parameters_give_zero_sides() {
        let loss = LossModel::RegularizedSine { m0: 2.0, s: 0.5 };
        let ds = unit_fixed(2, 1);
        let c = derive_constants(&loss, &ds).unwrap();
        let x = ds.point(0);
        let (lhs, rhs) = hypothesis_sides(&loss, &c, Hypothesis::Dissipativity, &[1.0], &[1.0], x, x).unwrap();
        assert_eq!(rhs, 0.0);
        assert_eq!(lhs, -c.k);
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = DatasetSpec::new(5, 2, 1.0, Generator::GaussianClipped);
        let ds = make_synthetic_dataset(&spec, 4).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"D\":1.0"));
        let back = Dataset::read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn minimizer_of_unit_fixed_quadratic() {
        let ds = unit_fixed(3, 1);
        let t = minimize_empirical_risk(&LossModel::Quadratic, &ds, &[0.0]).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-12);
    }

    // Known monotonicity inequality for the p-power map with 1 < p < 2.
    proptest! {
        #[test]
        fn power_map_monotonicity(u in -50.0f64..50.0, v in -50.0f64..50.0, p in 1.05f64..1.95) {
            let phi = |t: f64| t.abs().powf(p - 2.0) * t;
            prop_assume!(u != 0.0 && v != 0.0);
            let lhs = (phi(u) - phi(v)) * (u - v);
            let rhs = (p - 1.0) * (u - v).powi(2) * (u.abs() + v.abs()).powf(p - 2.0);
            prop_assert!(lhs >= rhs * (1.0 - 1e-9) - 1e-12);
        }
    }

    #[test]
    fn pure_power_lower_bound_fails_for_nearby_points() {
        // (|u|^{p−2}u − |v|^{p−2}v)(u − v) ≥ (p−1)|u − v|^p does not hold for
        // p < 2: at u = 1, v = 1/2, p = 3/2 the left side is 0.146 < 0.177.
        let p = 1.5_f64;
        let phi = |t: f64| t.abs().powf(p - 2.0) * t;
        let (u, v) = (1.0_f64, 0.5_f64);
        let lhs = (phi(u) - phi(v)) * (u - v);
        let rhs = (p - 1.0) * (u - v).abs().powf(p);
        assert!(lhs < rhs);
    }
}
