//! Embedded hypersphere geometry.
//!
//! Points of `S^n` are stored by their ambient coordinates `z ∈ R^(n+1)`.
//! Vector fields are built from the projected coordinate fields
//! `∇z_i = e_i - z_i z`, whose Riemannian divergences are `-n z_i`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FlowError, Result};
use crate::linalg::{dot, norm};

const UNIT_TOL: f64 = 1e-9;

/// A point on the sphere, given by unit-norm ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint(Vec<f64>);

impl ManifoldPoint {
    /// Wraps ambient coordinates, checking the unit-norm invariant.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        let r = norm(&coords);
        if !r.is_finite() || (r - 1.0).abs() > UNIT_TOL {
            return Err(FlowError::Numeric(format!(
                "point is not on the unit sphere (norm {r})"
            )));
        }
        Ok(Self(coords))
    }

    /// Normalizes an arbitrary nonzero ambient vector onto the sphere.
    pub fn normalized(mut coords: Vec<f64>) -> Result<Self> {
        let r = norm(&coords);
        if !(r.is_finite() && r > 0.0) {
            return Err(FlowError::DegenerateRetraction);
        }
        coords.iter_mut().for_each(|c| *c /= r);
        Ok(Self(coords))
    }

    /// Wraps coordinates that are already unit norm by construction.
    pub(crate) fn from_unit_unchecked(coords: Vec<f64>) -> Self {
        debug_assert!((norm(&coords) - 1.0).abs() < 1e-6);
        Self(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn ambient_dim(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f64]> for ManifoldPoint {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// An ambient vector attached at a base point and orthogonal to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: ManifoldPoint,
    pub vec: Vec<f64>,
}

/// Operations a manifold must provide to host a flow. Only the sphere
/// implements it today.
pub trait Manifold {
    fn intrinsic_dim(&self) -> usize;

    fn ambient_dim(&self) -> usize {
        self.intrinsic_dim() + 1
    }

    fn project_tangent(&self, q: &ManifoldPoint, v: &[f64]) -> TangentVector;

    fn retract(&self, q: &ManifoldPoint, step: &[f64]) -> Result<ManifoldPoint>;

    /// Generator fields evaluated at `q`, one per ambient coordinate.
    fn generator_fields(&self, q: &ManifoldPoint) -> Vec<TangentVector>;

    /// Riemannian divergence of each generator at `q`.
    fn generator_divergences(&self, q: &ManifoldPoint) -> Vec<f64>;

    /// Log-density of the base measure with respect to the volume form.
    fn log_base_density(&self) -> f64;

    fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<ManifoldPoint>;
}

/// The hypersphere `S^n` embedded in `R^(n+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sphere {
    n: usize,
}

impl Sphere {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(FlowError::Config("sphere dimension must be at least 1".into()));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `log` of the surface area `2 π^((n+1)/2) / Γ((n+1)/2)`.
    pub fn log_area(&self) -> f64 {
        let a = (self.n + 1) as f64 / 2.0;
        std::f64::consts::LN_2 + a * std::f64::consts::PI.ln() - ln_gamma_half_integer(self.n + 1)
    }

    /// Great-circle distance between two points.
    pub fn geodesic_distance(a: &[f64], b: &[f64]) -> f64 {
        let chord: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        2.0 * (0.5 * chord).min(1.0).asin()
    }

    fn check_dim(&self, q: &ManifoldPoint) {
        assert_eq!(
            q.ambient_dim(),
            self.n + 1,
            "point dimension does not match S^{}",
            self.n
        );
    }
}

/// `ln Γ(k/2)` for a positive integer `k`, by the half-integer recursion.
fn ln_gamma_half_integer(k: usize) -> f64 {
    assert!(k >= 1);
    let (mut acc, mut x) = if k.is_multiple_of(2) {
        (0.0, 1.0)
    } else {
        (0.5 * std::f64::consts::PI.ln(), 0.5)
    };
    while x + 1e-9 < k as f64 / 2.0 {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

/// `v - <q, v> q`, computed on raw slices.
pub fn project_onto_tangent(q: &[f64], v: &[f64]) -> Vec<f64> {
    let c = dot(q, v);
    v.iter().zip(q).map(|(vi, qi)| vi - c * qi).collect()
}

impl Manifold for Sphere {
    fn intrinsic_dim(&self) -> usize {
        self.n
    }

    fn project_tangent(&self, q: &ManifoldPoint, v: &[f64]) -> TangentVector {
        self.check_dim(q);
        TangentVector {
            base: q.clone(),
            vec: project_onto_tangent(q.coords(), v),
        }
    }

    fn retract(&self, q: &ManifoldPoint, step: &[f64]) -> Result<ManifoldPoint> {
        self.check_dim(q);
        if step.iter().all(|s| *s == 0.0) {
            return Ok(q.clone());
        }
        let moved: Vec<f64> = q.coords().iter().zip(step).map(|(a, b)| a + b).collect();
        ManifoldPoint::normalized(moved)
    }

    fn generator_fields(&self, q: &ManifoldPoint) -> Vec<TangentVector> {
        self.check_dim(q);
        let z = q.coords();
        (0..z.len())
            .map(|i| {
                let vec = z
                    .iter()
                    .enumerate()
                    .map(|(j, zj)| f64::from(u8::from(i == j)) - z[i] * zj)
                    .collect();
                TangentVector {
                    base: q.clone(),
                    vec,
                }
            })
            .collect()
    }

    fn generator_divergences(&self, q: &ManifoldPoint) -> Vec<f64> {
        self.check_dim(q);
        let n = self.n as f64;
        q.coords().iter().map(|zi| -n * zi).collect()
    }

    fn log_base_density(&self) -> f64 {
        -self.log_area()
    }

    /// Uniform samples: normalized standard-normal ambient vectors.
    fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<ManifoldPoint> {
        let m = self.n + 1;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            // the zero vector has probability zero; skip it if it ever shows up
            if let Ok(p) = ManifoldPoint::normalized(v) {
                out.push(p);
            }
        }
        out
    }
}
