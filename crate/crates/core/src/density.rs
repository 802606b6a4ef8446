//! Target densities, model sampling and evaluation metrics.
//!
//! Targets are mixtures of von Mises-Fisher distributions on `S^2` and
//! `S^3`, normalized with respect to the surface measure:
//! `log p(x) = κ⟨μ, x⟩ + log C_d(κ)` with
//! `C_d(κ) = κ^(d/2-1) / ((2π)^(d/2) I_(d/2-1)(κ))`.

use std::f64::consts::{LN_2, PI};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::field_net::CoefficientNet;
use crate::flow::{integrate_forward, IntegratorConfig};
use crate::geometry::{Manifold, ManifoldPoint, Sphere};
use crate::linalg::{dot, log_sum_exp};

/// One mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfComponent {
    pub mu: ManifoldPoint,
    pub kappa: f64,
}

impl VmfComponent {
    pub fn new(mu: ManifoldPoint, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(FlowError::Config(format!(
                "concentration must be positive, got {kappa}"
            )));
        }
        Ok(Self { mu, kappa })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmfMixture {
    components: Vec<VmfComponent>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    log_norms: Vec<f64>,
}

impl VmfMixture {
    /// Weights must be positive and sum to one (within 1e-9); they are
    /// renormalized exactly.
    pub fn new(components: Vec<VmfComponent>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(FlowError::Config("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(FlowError::Shape {
                expected: components.len(),
                got: weights.len(),
            });
        }
        let d = components[0].mu.ambient_dim();
        if components.iter().any(|c| c.mu.ambient_dim() != d) {
            return Err(FlowError::Config("mixture components differ in dimension".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(FlowError::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(FlowError::Config(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_norms = components
            .iter()
            .map(|c| log_normalizer(c.kappa, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            components,
            weights,
            log_norms,
        })
    }

    /// Equal-weight mixture with the given means and a shared concentration.
    pub fn equal_weights(means: &[Vec<f64>], kappa: f64) -> Result<Self> {
        let comps = means
            .iter()
            .map(|m| VmfComponent::new(ManifoldPoint::normalized(m.clone())?, kappa))
            .collect::<Result<Vec<_>>>()?;
        let w = vec![1.0 / comps.len() as f64; comps.len()];
        Self::new(comps, w)
    }

    /// Four components with κ = 10 at the vertices of a regular tetrahedron.
    pub fn benchmark_s2() -> Self {
        let means = [
            vec![1.0, 1.0, 1.0],
            vec![1.0, -1.0, -1.0],
            vec![-1.0, 1.0, -1.0],
            vec![-1.0, -1.0, 1.0],
        ];
        Self::equal_weights(&means, 10.0).expect("valid benchmark")
    }

    /// Four components with κ = 10 at `±e_1`, `±e_2` of `R^4`.
    pub fn benchmark_s3() -> Self {
        let means = [
            vec![1.0, 0.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0, 0.0],
        ];
        Self::equal_weights(&means, 10.0).expect("valid benchmark")
    }

    pub fn benchmark(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Self::benchmark_s2()),
            3 => Ok(Self::benchmark_s3()),
            _ => Err(FlowError::Config(format!("no benchmark target for S^{n}"))),
        }
    }

    pub fn components(&self) -> &[VmfComponent] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Ambient dimension `d`.
    pub fn dim(&self) -> usize {
        self.components[0].mu.ambient_dim()
    }

    fn component_logs(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.log_weights)
            .zip(&self.log_norms)
            .map(|((c, lw), ln)| lw + ln + c.kappa * dot(c.mu.coords(), x))
            .collect()
    }

    /// Euclidean gradient of `log p` extended to the ambient space by the
    /// same formula: `Σ_k r_k(x) κ_k μ_k`.
    pub fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.component_logs(x);
        let lse = log_sum_exp(&logs);
        let mut g = vec![0.0; x.len()];
        for (c, l) in self.components.iter().zip(&logs) {
            let r = (l - lse).exp();
            for (gi, mi) in g.iter_mut().zip(c.mu.coords()) {
                *gi += r * c.kappa * mi;
            }
        }
        g
    }

    pub fn to_spec(&self) -> TargetSpec {
        TargetSpec {
            dim: self.dim(),
            components: self
                .components
                .iter()
                .zip(&self.weights)
                .map(|(c, w)| ComponentSpec {
                    weight: *w,
                    kappa: c.kappa,
                    mu: c.mu.coords().to_vec(),
                })
                .collect(),
        }
    }
}

/// `log C_d(κ)` for `d ∈ {3, 4}`.
pub fn log_normalizer(kappa: f64, d: usize) -> Result<f64> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(FlowError::Config(format!(
            "concentration must be positive, got {kappa}"
        )));
    }
    match d {
        // κ / (4π sinh κ)
        3 => Ok(log_kappa_over_sinh(kappa) - (4.0 * PI).ln()),
        // κ / ((2π)^2 I_1(κ))
        4 => Ok(kappa.ln() - 2.0 * (2.0 * PI).ln() - log_bessel_i1(kappa)),
        _ => Err(FlowError::Config(format!(
            "von Mises-Fisher densities are supported for ambient dimension 3 or 4, got {d}"
        ))),
    }
}

fn log_kappa_over_sinh(k: f64) -> f64 {
    if k < 1e-3 {
        let k2 = k * k;
        -k2 / 6.0 + k2 * k2 / 180.0
    } else {
        // log sinh k = k + log(1 - e^{-2k}) - log 2
        k.ln() - k - (-(-2.0 * k).exp()).ln_1p() + LN_2
    }
}

const BESSEL_SWITCH: f64 = 20.0;

/// `log I_1(x)` for `x > 0`: power series below 20, asymptotic expansion
/// above.
pub fn log_bessel_i1(x: f64) -> f64 {
    if x < BESSEL_SWITCH {
        log_bessel_i1_series(x)
    } else {
        log_bessel_i1_asymptotic(x)
    }
}

fn log_bessel_i1_series(x: f64) -> f64 {
    // I_1(x) = (x/2) Σ_k (x²/4)^k / (k! (k+1)!)
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * (k + 1) as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    (0.5 * x).ln() + sum.ln()
}

fn log_bessel_i1_asymptotic(x: f64) -> f64 {
    // I_ν(x) ~ e^x / √(2πx) Σ_k (-1)^k a_k(ν) / x^k, with
    // a_k = Π_{j≤k} (4ν² - (2j-1)²) / (k! 8^k)
    let mu = 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let j = (2 * k - 1) as f64;
        let next = -term * (mu - j * j) / (k as f64 * 8.0 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

pub fn vmf_log_density(comp: &VmfComponent, x: &ManifoldPoint, d: usize) -> Result<f64> {
    if comp.mu.ambient_dim() != d || x.ambient_dim() != d {
        return Err(FlowError::Shape {
            expected: d,
            got: x.ambient_dim(),
        });
    }
    Ok(comp.kappa * dot(comp.mu.coords(), x.coords()) + log_normalizer(comp.kappa, d)?)
}

/// `log Σ_k w_k p_k(x)` via a max-shifted log-sum-exp.
pub fn mixture_log_density(mix: &VmfMixture, x: &ManifoldPoint) -> Result<f64> {
    if x.ambient_dim() != mix.dim() {
        return Err(FlowError::Shape {
            expected: mix.dim(),
            got: x.ambient_dim(),
        });
    }
    Ok(log_sum_exp(&mix.component_logs(x.coords())))
}

/// Serialized target description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Ambient dimension.
    pub dim: usize,
    #[serde(rename = "component")]
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub kappa: f64,
    pub mu: Vec<f64>,
}

impl TargetSpec {
    pub fn to_mixture(&self) -> Result<VmfMixture> {
        let comps = self
            .components
            .iter()
            .map(|c| {
                if c.mu.len() != self.dim {
                    return Err(FlowError::Config(format!(
                        "component mean has {} coordinates, target dim is {}",
                        c.mu.len(),
                        self.dim
                    )));
                }
                VmfComponent::new(ManifoldPoint::normalized(c.mu.clone())?, c.kappa)
            })
            .collect::<Result<Vec<_>>>()?;
        let mix = VmfMixture::new(comps, self.components.iter().map(|c| c.weight).collect())?;
        log_normalizer(1.0, self.dim)?;
        Ok(mix)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| FlowError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| FlowError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// A model sample with its log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSample {
    pub x: ManifoldPoint,
    pub log_q: f64,
}

/// Pushes uniform base samples through the flow.
pub fn sample_model(
    net: &CoefficientNet,
    base: &Sphere,
    cfg: &IntegratorConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<ModelSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_points = base.sample_base(&mut rng, count);
    push_forward(net, base, cfg, &base_points)
}

/// Flows the given base points and attaches model log-densities.
pub fn push_forward(
    net: &CoefficientNet,
    base: &Sphere,
    cfg: &IntegratorConfig,
    base_points: &[ManifoldPoint],
) -> Result<Vec<ModelSample>> {
    let log_base = base.log_base_density();
    let cfg = IntegratorConfig {
        record_trajectory: false,
        ..cfg.clone()
    };
    base_points
        .par_iter()
        .map(|q0| {
            let r = integrate_forward(net, q0, &cfg)?;
            Ok(ModelSample {
                x: r.q1,
                log_q: log_base + r.delta_log_density,
            })
        })
        .collect()
}

/// Model log-density at `x`, by flowing back to the base.
pub fn log_density_at(
    net: &CoefficientNet,
    base: &Sphere,
    x: &ManifoldPoint,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let back = IntegratorConfig {
        record_trajectory: false,
        ..cfg.reversed()
    };
    let r = integrate_forward(net, x, &back)?;
    // the reverse run accumulates +∫ div, which the forward run subtracts
    Ok(base.log_base_density() - r.delta_log_density)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

/// `KL(q ‖ p)` estimated as the mean of `log q - log p` over model samples.
pub fn estimate_kl(samples: &[ModelSample], target: &VmfMixture) -> Result<Estimate> {
    if samples.is_empty() {
        return Err(FlowError::Config("KL estimate needs at least one sample".into()));
    }
    let diffs = samples
        .iter()
        .map(|s| Ok(s.log_q - mixture_log_density(target, &s.x)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_std_err(&diffs))
}

pub(crate) fn mean_and_std_err(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        mean,
        std_err: (var / n).sqrt(),
    }
}

/// Normalized effective sample size in percent:
/// `100 (Σw)² / (N Σw²)` with `w = p/q`, computed in the log domain.
pub fn estimate_ess(samples: &[ModelSample], target: &VmfMixture) -> Result<f64> {
    if samples.is_empty() {
        return Err(FlowError::Config("ESS needs at least one sample".into()));
    }
    let log_w = samples
        .iter()
        .map(|s| Ok(mixture_log_density(target, &s.x)? - s.log_q))
        .collect::<Result<Vec<f64>>>()?;
    ess_from_log_weights(&log_w)
}

pub fn ess_from_log_weights(log_w: &[f64]) -> Result<f64> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(FlowError::Numeric("importance weights are all zero".into()));
    }
    let log_w2: Vec<f64> = log_w.iter().map(|l| 2.0 * l).collect();
    let ratio = (2.0 * lse - log_sum_exp(&log_w2)).exp() / log_w.len() as f64;
    Ok(100.0 * ratio.min(1.0))
}

/// KL and ESS of a model against a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kl_nats: f64,
    pub kl_std_err: f64,
    pub ess_percent: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub fn evaluate(
    net: &CoefficientNet,
    target: &VmfMixture,
    cfg: &IntegratorConfig,
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let sphere = Sphere::new(target.dim() - 1)?;
    let samples = sample_model(net, &sphere, cfg, n_samples, seed)?;
    let kl = estimate_kl(&samples, target)?;
    Ok(EvalReport {
        kl_nats: kl.mean,
        kl_std_err: kl.std_err,
        ess_percent: estimate_ess(&samples, target)?,
        n_samples,
        seed,
    })
}

/// Model log-density on a latitude-longitude grid of `S^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub n_lat: usize,
    pub n_lon: usize,
    /// `(theta, phi, log_density)` in row-major latitude order.
    pub cells: Vec<(f64, f64, f64)>,
}

impl DensityGrid {
    /// Midpoint-rule integral of the density against `sin θ dθ dφ`.
    pub fn integral(&self) -> f64 {
        let cell = PI / self.n_lat as f64 * 2.0 * PI / self.n_lon as f64;
        self.cells
            .iter()
            .map(|(theta, _, ld)| ld.exp() * theta.sin() * cell)
            .sum()
    }
}

/// Cell centers `θ_i = (i + ½)π/n_lat`, `φ_j = (j + ½)2π/n_lon`, with
/// `x = (sin θ cos φ, sin θ sin φ, cos θ)`.
pub fn grid_point(theta: f64, phi: f64) -> Vec<f64> {
    vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

pub fn density_grid(
    net: &CoefficientNet,
    n_lat: usize,
    n_lon: usize,
    cfg: &IntegratorConfig,
) -> Result<DensityGrid> {
    if net.output_dim() != 3 {
        return Err(FlowError::Config(format!(
            "density grids are only defined on S^2, model lives on S^{}",
            net.output_dim() - 1
        )));
    }
    if n_lat == 0 || n_lon == 0 {
        return Err(FlowError::Config("grid resolution must be positive".into()));
    }
    let sphere = Sphere::new(2)?;
    let cells: Vec<(f64, f64)> = (0..n_lat)
        .flat_map(|i| {
            (0..n_lon).map(move |j| {
                (
                    (i as f64 + 0.5) * PI / n_lat as f64,
                    (j as f64 + 0.5) * 2.0 * PI / n_lon as f64,
                )
            })
        })
        .collect();
    let cells = cells
        .par_iter()
        .map(|&(theta, phi)| {
            let x = ManifoldPoint::normalized(grid_point(theta, phi))?;
            Ok((theta, phi, log_density_at(net, &sphere, &x, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityGrid {
        n_lat,
        n_lon,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pt(v: &[f64]) -> ManifoldPoint {
        ManifoldPoint::normalized(v.to_vec()).unwrap()
    }

    /// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    /// `∫ exp(κ(⟨μ,x⟩ - 1)) dx` over `S^{d-1}`, reduced to the polar angle.
    fn shifted_partition(kappa: f64, d: usize) -> f64 {
        let (shell, power) = match d {
            3 => (2.0 * PI, 1),
            4 => (4.0 * PI, 2),
            _ => unreachable!(),
        };
        shell
            * simpson(
                |th| (kappa * (th.cos() - 1.0)).exp() * th.sin().powi(power),
                0.0,
                PI,
                40_000,
            )
    }

    #[test]
    fn normalizer_matches_quadrature() {
        for d in [3, 4] {
            for kappa in [1e-4, 0.5, 3.0, 10.0, 19.9, 20.1, 55.0, 300.0] {
                // C · ∫ e^{κ⟨μ,x⟩} = 1  ⇔  log C + κ + log ∫ e^{κ(⟨μ,x⟩-1)} = 0
                let resid = log_normalizer(kappa, d).unwrap() + kappa + shifted_partition(kappa, d).ln();
                assert!(resid.abs() < 1e-10, "d={d} κ={kappa}: {resid}");
            }
        }
    }

    #[test]
    fn bessel_branches_agree_at_switch() {
        for x in [18.0, 20.0, 25.0] {
            let a = log_bessel_i1_series(x);
            let b = log_bessel_i1_asymptotic(x);
            assert!(((a - b) / a).abs() < 1e-13, "{x}: {a} vs {b}");
        }
        // I_1(1) = 0.565159103992485...
        assert!((log_bessel_i1(1.0) - 0.565_159_103_992_485_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn small_kappa_tends_to_uniform() {
        for d in [3, 4] {
            let s = Sphere::new(d - 1).unwrap();
            let c = VmfComponent::new(pt(&vec![1.0; d]), 1e-12).unwrap();
            let x = pt(&(0..d).map(|i| i as f64 - 1.0).collect::<Vec<_>>());
            let lp = vmf_log_density(&c, &x, d).unwrap();
            assert!((lp - s.log_base_density()).abs() < 1e-10);
        }
    }

    #[test]
    fn kappa_ten_closed_form() {
        let mu = pt(&[0.0, 0.6, 0.8]);
        let c = VmfComponent::new(mu.clone(), 10.0).unwrap();
        let want = 10.0 + (10.0 / (4.0 * PI * 10f64.sinh())).ln();
        assert!((vmf_log_density(&c, &mu, 3).unwrap() - want).abs() < 1e-13);
        let resid = log_normalizer(10.0, 3).unwrap() + 10.0 + shifted_partition(10.0, 3).ln();
        assert!(resid.abs() < 1e-8);
    }

    #[test]
    fn unsupported_dimension_is_rejected() {
        assert!(log_normalizer(1.0, 5).is_err());
        assert!(log_normalizer(0.0, 3).is_err());
        let spec = TargetSpec {
            dim: 5,
            components: vec![ComponentSpec {
                weight: 1.0,
                kappa: 1.0,
                mu: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            }],
        };
        assert!(spec.to_mixture().is_err());
    }

    /// Trapezoid rule on a 400×800 latitude-longitude grid including poles.
    fn trapezoid_s2(f: impl Fn(&[f64]) -> f64) -> f64 {
        let (nt, np) = (400, 800);
        let (ht, hp) = (PI / nt as f64, 2.0 * PI / np as f64);
        let mut total = 0.0;
        for i in 0..=nt {
            let th = i as f64 * ht;
            let wt = if i == 0 || i == nt { 0.5 } else { 1.0 };
            for j in 0..np {
                let ph = j as f64 * hp;
                total += wt * f(&grid_point(th, ph)) * th.sin();
            }
        }
        total * ht * hp
    }

    #[test]
    fn mixture_normalizes_on_grid() {
        let mix = VmfMixture::benchmark_s2();
        let total = trapezoid_s2(|x| mixture_log_density(&mix, &pt(x)).unwrap().exp());
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        let single = VmfMixture::equal_weights(&[vec![0.3, -0.9, 0.2]], 10.0).unwrap();
        let total = trapezoid_s2(|x| mixture_log_density(&single, &pt(x)).unwrap().exp());
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn s3_mixture_normalizes_by_monte_carlo() {
        let mix = VmfMixture::benchmark_s3();
        let s3 = Sphere::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let pts = s3.sample_base(&mut rng, n);
        let area = s3.log_area().exp();
        let mean: f64 = pts
            .iter()
            .map(|x| mixture_log_density(&mix, x).unwrap().exp())
            .sum::<f64>()
            / n as f64;
        assert!((mean * area - 1.0).abs() < 0.01, "{}", mean * area);
    }

    #[test]
    fn mixture_degenerate_cases() {
        let mu = pt(&[0.2, 0.3, -0.9]);
        let c = VmfComponent::new(mu.clone(), 4.0).unwrap();
        let x = pt(&[0.5, 0.5, 0.5]);
        let single = VmfMixture::new(vec![c.clone()], vec![1.0]).unwrap();
        let direct = vmf_log_density(&c, &x, 3).unwrap();
        assert!((mixture_log_density(&single, &x).unwrap() - direct).abs() < 1e-15);
        let twin = VmfMixture::new(vec![c.clone(), c], vec![0.3, 0.7]).unwrap();
        assert!((mixture_log_density(&twin, &x).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn mixture_matches_linear_domain_sum() {
        let mix = VmfMixture::benchmark_s2();
        let x = pt(&[0.1, 0.7, -0.3]);
        let linear: f64 = mix
            .components()
            .iter()
            .zip(mix.weights())
            .map(|(c, w)| {
                let norm = 10.0 / (4.0 * PI * c.kappa.sinh());
                w * norm * (c.kappa * dot(c.mu.coords(), x.coords())).exp()
            })
            .sum();
        let got = mixture_log_density(&mix, &x).unwrap().exp();
        assert!(((got - linear) / linear).abs() < 1e-12);
    }

    #[test]
    fn grad_log_density_matches_finite_differences() {
        let mix = VmfMixture::benchmark_s3();
        let x = [0.3, -0.5, 0.6, 0.2];
        let g = mix.grad_log_density(&x);
        let f = |z: &[f64]| log_sum_exp(&mix.component_logs(z));
        for j in 0..4 {
            let mut a = x;
            let mut b = x;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            assert!(((f(&a) - f(&b)) / 2e-6 - g[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn mixture_validation() {
        let c = VmfComponent::new(pt(&[1.0, 0.0, 0.0]), 1.0).unwrap();
        assert!(VmfMixture::new(vec![], vec![]).is_err());
        assert!(VmfMixture::new(vec![c.clone()], vec![0.5]).is_err());
        assert!(VmfMixture::new(vec![c.clone(), c], vec![1.5, -0.5]).is_err());
        assert!(VmfComponent::new(pt(&[1.0, 0.0, 0.0]), -1.0).is_err());
    }

    #[test]
    fn target_spec_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.toml");
        let spec = VmfMixture::benchmark_s2().to_spec();
        spec.save(&path).unwrap();
        let back = TargetSpec::load(&path).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_mixture().unwrap(), VmfMixture::benchmark_s2());
    }

    fn uniform_samples(n: usize, count: usize, seed: u64) -> Vec<ModelSample> {
        let s = Sphere::new(n).unwrap();
        s.sample_base(&mut ChaCha8Rng::seed_from_u64(seed), count)
            .into_iter()
            .map(|x| ModelSample {
                x,
                log_q: s.log_base_density(),
            })
            .collect()
    }

    #[test]
    fn kl_of_exact_samples_is_zero() {
        let flat = VmfMixture::equal_weights(&[vec![1.0, 0.0, 0.0]], 1e-10).unwrap();
        let samples = uniform_samples(2, 1000, 1);
        let kl = estimate_kl(&samples, &flat).unwrap();
        assert!(kl.mean.abs() < 1e-9);
        assert_eq!(estimate_ess(&samples, &flat).unwrap(), 100.0);
        // samples whose log_q is the target density itself
        let target = VmfMixture::benchmark_s2();
        let exact: Vec<ModelSample> = samples
            .iter()
            .map(|s| ModelSample {
                x: s.x.clone(),
                log_q: mixture_log_density(&target, &s.x).unwrap(),
            })
            .collect();
        let kl = estimate_kl(&exact, &target).unwrap();
        assert_eq!(kl.mean, 0.0);
        assert!((estimate_ess(&exact, &target).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn kl_of_uniform_against_single_vmf() {
        // KL = E[log q - κ⟨μ,x⟩ - log C] = -log(4π C) since E⟨μ,x⟩ = 0
        let target = VmfMixture::equal_weights(&[vec![0.0, 0.0, 1.0]], 10.0).unwrap();
        let analytic = -(4.0 * PI * 10.0 / (4.0 * PI * 10f64.sinh())).ln();
        let samples = uniform_samples(2, 1_000_000, 2);
        let kl = estimate_kl(&samples, &target).unwrap();
        assert!((kl.mean - analytic).abs() < 3.0 * kl.std_err, "{kl:?} vs {analytic}");
        assert!(analytic > 0.0);
    }

    #[test]
    fn kl_order_invariance_and_subsampling() {
        let target = VmfMixture::benchmark_s2();
        let mut samples = uniform_samples(2, 20_000, 3);
        let a = estimate_kl(&samples, &target).unwrap();
        samples.reverse();
        let b = estimate_kl(&samples, &target).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
        let half = estimate_kl(&samples[..10_000], &target).unwrap();
        let combined = (a.std_err.powi(2) + half.std_err.powi(2)).sqrt();
        assert!((a.mean - half.mean).abs() < 3.0 * combined);
    }

    #[test]
    fn ess_edge_cases() {
        let mut lw = vec![-50.0; 1000];
        lw[17] = 0.0;
        let ess = ess_from_log_weights(&lw).unwrap();
        assert!((ess - 0.1).abs() < 1e-6, "{ess}");
        assert!(ess_from_log_weights(&[f64::NEG_INFINITY; 4]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let lw: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let e = ess_from_log_weights(&lw).unwrap();
            assert!(e > 0.0 && e < 100.0);
        }
    }

    #[test]
    fn ess_uniform_vs_vmf_is_stable_and_matches_one_pass() {
        let target = VmfMixture::equal_weights(&[vec![0.0, 0.0, 1.0]], 10.0).unwrap();
        let mut values = Vec::new();
        for seed in 0..3 {
            let samples = uniform_samples(2, 100_000, 10 + seed);
            let ess = estimate_ess(&samples, &target).unwrap();
            // one-pass linear-domain re-implementation
            let (mut s1, mut s2) = (0.0, 0.0);
            for s in &samples {
                let w = (mixture_log_density(&target, &s.x).unwrap() - s.log_q).exp();
                s1 += w;
                s2 += w * w;
            }
            let one_pass = 100.0 * s1 * s1 / (samples.len() as f64 * s2);
            assert!((ess - one_pass).abs() < 1e-9 * one_pass);
            values.push(ess);
        }
        let (lo, hi) = values
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi - lo < 2.0, "{values:?}");
    }

    #[test]
    fn zero_head_model_is_uniform() {
        let net = CoefficientNet::for_sphere(2, &[10, 10], 3).unwrap();
        let s2 = Sphere::new(2).unwrap();
        let cfg = IntegratorConfig::with_steps(10);
        let samples = sample_model(&net, &s2, &cfg, 20, 1).unwrap();
        for s in &samples {
            assert_eq!(s.log_q, -(4.0 * PI).ln());
            assert_eq!(log_density_at(&net, &s2, &s.x, &cfg).unwrap(), -(4.0 * PI).ln());
        }
        let grid = density_grid(&net, 10, 20, &cfg).unwrap();
        assert!(grid.cells.iter().all(|c| c.2 == -(4.0 * PI).ln()));
    }

    #[test]
    fn rotation_model_keeps_uniform_density() {
        let mut net = CoefficientNet::zeros(&[4, 3]).unwrap();
        {
            // f(z) = A z with A antisymmetric; column 0 is the time input
            let a = [[0.0, -1.2, 0.4], [1.2, 0.0, -0.7], [-0.4, 0.7, 0.0]];
            let (w, _) = net.layer_mut(0);
            for (i, row) in a.iter().enumerate() {
                w[i * 4 + 1..i * 4 + 4].copy_from_slice(row);
            }
        }
        let s2 = Sphere::new(2).unwrap();
        let samples = sample_model(&net, &s2, &IntegratorConfig::default(), 50, 2).unwrap();
        for s in samples {
            assert!((s.log_q + (4.0 * PI).ln()).abs() < 1e-8);
        }
    }

    fn random_net(seed: u64, scale: f64) -> CoefficientNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = CoefficientNet::zeros(&[4, 10, 10, 3]).unwrap();
        net.params_mut()
            .iter_mut()
            .for_each(|p| *p = scale * rng.gen_range(-1.0..1.0));
        net
    }

    #[test]
    fn sampled_and_evaluated_densities_agree() {
        let net = random_net(7, 0.8);
        let s2 = Sphere::new(2).unwrap();
        let cfg = IntegratorConfig::default();
        let samples = sample_model(&net, &s2, &cfg, 100, 9).unwrap();
        for s in &samples {
            let back = log_density_at(&net, &s2, &s.x, &cfg).unwrap();
            assert!((back - s.log_q).abs() <= 2e-6, "{back} vs {}", s.log_q);
        }
    }

    #[test]
    fn model_density_integrates_to_one() {
        let net = random_net(8, 0.8);
        let grid = density_grid(&net, 100, 200, &IntegratorConfig::with_steps(50)).unwrap();
        let total = grid.integral();
        assert!((total - 1.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn grid_requires_s2() {
        let net = CoefficientNet::for_sphere(3, &[4], 0).unwrap();
        assert!(density_grid(&net, 4, 4, &IntegratorConfig::default()).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let net = random_net(9, 0.5);
        let t = VmfMixture::benchmark_s2();
        let cfg = IntegratorConfig::with_steps(20);
        let a = evaluate(&net, &t, &cfg, 500, 3).unwrap();
        let b = evaluate(&net, &t, &cfg, 500, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.ess_percent > 0.0 && a.ess_percent <= 100.0);
    }
}
