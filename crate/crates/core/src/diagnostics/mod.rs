//! Self-checks on random instances: gradients, divergence, flow laws and
//! integrator order. Each check reports its worst observed error against a
//! fixed tolerance.

pub mod chart;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FlowError, Result};
use crate::field_net::CoefficientNet;
use crate::flow::{
    backprop_discretize, flow_compose_check, integrate_backward_adjoint, integrate_cotangent_lift,
    integrate_forward, IntegratorConfig,
};
use crate::geometry::{Manifold, ManifoldPoint, Sphere};
use crate::linalg::{dot, norm};
use crate::vector_field::{cotangent_lift_rhs, eval_divergence, eval_field, CotangentState};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &'static str, observed: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            observed,
            tolerance,
            passed: observed <= tolerance,
            detail,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<24} observed {:<11.3e} tolerance {:<9.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Gradients,
    Divergence,
    FlowLaws,
    All,
}

impl FromStr for Scope {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Self::Gradients),
            "divergence" => Ok(Self::Divergence),
            "flow-laws" => Ok(Self::FlowLaws),
            "all" => Ok(Self::All),
            other => Err(FlowError::Config(format!(
                "unknown check scope `{other}` (expected gradients, divergence, flow-laws or all)"
            ))),
        }
    }
}

/// Runs every check in `scope`.
pub fn run_checks(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Gradients | Scope::All) {
        out.push(adjoint_vs_discretize(50, seed)?);
        out.push(discretize_vs_finite_differences(10, 5, seed)?);
    }
    if matches!(scope, Scope::Divergence | Scope::All) {
        out.push(divergence_vs_chart(100, seed)?);
    }
    if matches!(scope, Scope::FlowLaws | Scope::All) {
        out.extend(rotation_oracle(seed)?);
        out.push(flow_identity(seed)?);
        out.push(composition(seed)?);
        out.push(round_trip(seed)?);
        out.push(hamiltonian_drift(seed)?);
        out.extend(fiber_linearity(seed)?);
        out.push(dq_identity(seed)?);
        out.push(convergence_order(seed)?.check());
    }
    Ok(out)
}

/// Net with every parameter drawn uniformly from `[-scale, scale]`.
pub fn random_net<R: Rng + ?Sized>(sizes: &[usize], scale: f64, rng: &mut R) -> Result<CoefficientNet> {
    let mut net = CoefficientNet::zeros(sizes)?;
    net.params_mut()
        .iter_mut()
        .for_each(|p| *p = scale * rng.gen_range(-1.0..1.0));
    Ok(net)
}

fn random_point<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ManifoldPoint {
    Sphere::new(n)
        .expect("n >= 1")
        .sample_base(rng, 1)
        .pop()
        .expect("one sample")
}

fn random_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(b).max(1e-300)
}

/// A random instance on `S^2` or `S^3` with a `[10, 10]` net.
fn instance(rng: &mut ChaCha8Rng, i: usize, scale: f64) -> Result<(CoefficientNet, ManifoldPoint)> {
    let n = 2 + i % 2;
    let net = random_net(&[n + 2, 10, 10, n + 1], scale, rng)?;
    Ok((net, random_point(n, rng)))
}

/// Relative disagreement between adjoint and discretize gradients for the
/// loss `⟨c, q1⟩ + a ℓ1`, over parameters and the starting point jointly.
pub fn adjoint_vs_discretize(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad);
    let cfg = IntegratorConfig::default();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (net, q0) = instance(&mut rng, i, 0.8)?;
        let c = random_vec(q0.ambient_dim(), &mut rng);
        let a = rng.gen_range(-1.0..1.0);
        let fwd = integrate_forward(&net, &q0, &cfg)?;
        let adj = integrate_backward_adjoint(&net, &fwd.q1, &c, a, &cfg)?;
        let dis = backprop_discretize(&net, &q0, &cfg, &c, a)?;
        let joint = |g: &crate::flow::BackwardResult| {
            let mut v = g.param_grad.as_slice().to_vec();
            v.extend_from_slice(&g.grad_q0);
            v
        };
        worst = worst.max(rel_err(&joint(&adj), &joint(&dis)));
    }
    Ok(CheckResult::at_most(
        "adjoint-vs-discretize",
        worst,
        1e-4,
        format!("{instances} instances, 100 steps"),
    ))
}

/// Directional derivatives of the discretize gradient against central
/// differences of the integrated loss.
pub fn discretize_vs_finite_differences(instances: usize, dirs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let cfg = IntegratorConfig::default();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (net, q0) = instance(&mut rng, i, 0.8)?;
        let c = random_vec(q0.ambient_dim(), &mut rng);
        let a = rng.gen_range(-1.0..1.0);
        let loss = |net: &CoefficientNet| -> Result<f64> {
            let r = integrate_forward(net, &q0, &cfg)?;
            Ok(dot(&c, r.q1.coords()) + a * r.delta_log_density)
        };
        let g = backprop_discretize(&net, &q0, &cfg, &c, a)?;
        for _ in 0..dirs {
            let dir = random_vec(net.num_params(), &mut rng);
            let fd = (loss(&net.perturbed(&dir, eps))? - loss(&net.perturbed(&dir, -eps))?) / (2.0 * eps);
            let an = g.param_grad.dot(&dir);
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
        }
    }
    Ok(CheckResult::at_most(
        "discretize-vs-fd",
        worst,
        1e-4,
        format!("{instances} instances x {dirs} directions"),
    ))
}

/// Closed-form divergence against the chart finite-difference oracle.
pub fn divergence_vs_chart(pairs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let n = 2 + i % 2;
        let net = random_net(&[n + 2, 10, 10, n + 1], 1.0, &mut rng)?;
        let t = rng.gen_range(0.0..1.0);
        let u = chart::random_interior_coords(n, &mut rng);
        let q = ManifoldPoint::normalized(chart::embed(&u))?;
        let field = |z: &[f64]| {
            let p = ManifoldPoint::normalized(z.to_vec()).expect("chart point");
            eval_field(&net, t, &p).expect("valid net").vec
        };
        let oracle = chart::divergence(&field, &u, 1e-5);
        worst = worst.max((eval_divergence(&net, t, &q)? - oracle).abs());
    }
    Ok(CheckResult::at_most(
        "divergence-chart",
        worst,
        1e-4,
        format!("{pairs} (net, point) pairs on S^2 and S^3"),
    ))
}

/// `exp(A)` by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = a.len();
    let size: f64 = a.iter().flatten().map(|v| v.abs()).sum();
    let squarings = size.max(1.0).log2().ceil() as u32 + 1;
    let scale = 0.5f64.powi(squarings as i32);
    let mul = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| (0..m).map(|j| (0..m).map(|k| x[i][k] * y[k][j]).sum()).collect())
            .collect()
    };
    let scaled: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
    let mut result: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| f64::from(i == j)).collect()).collect();
    let mut term = result.clone();
    for k in 1..30 {
        term = mul(&term, &scaled);
        term.iter_mut().flatten().for_each(|v| *v /= k as f64);
        for (r, t) in result.iter_mut().flatten().zip(term.iter().flatten()) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = mul(&result, &result);
    }
    result
}

/// Linear net `f(t, z) = A z`.
pub fn linear_net(a: &[Vec<f64>]) -> Result<CoefficientNet> {
    let m = a.len();
    let mut net = CoefficientNet::zeros(&[m + 1, m])?;
    let (w, _) = net.layer_mut(0);
    for (i, row) in a.iter().enumerate() {
        w[i * (m + 1) + 1..(i + 1) * (m + 1)].copy_from_slice(row);
    }
    Ok(net)
}

/// Rotation fields `z ↦ A z` with antisymmetric `A` against `exp(tA) q0`.
pub fn rotation_oracle(seed: u64) -> Result<[CheckResult; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50);
    let cfg = IntegratorConfig::default();
    let (mut point_err, mut density_err): (f64, f64) = (0.0, 0.0);
    for i in 0..10 {
        let m = 3 + i % 2;
        let mut a = vec![vec![0.0; m]; m];
        #[allow(clippy::needless_range_loop)]
        for r in 0..m {
            for c in r + 1..m {
                a[r][c] = rng.gen_range(-1.5..1.5);
                a[c][r] = -a[r][c];
            }
        }
        let net = linear_net(&a)?;
        let q0 = random_point(m - 1, &mut rng);
        let r = integrate_forward(&net, &q0, &cfg)?;
        let e = expm(&a);
        let exact: Vec<f64> = e.iter().map(|row| dot(row, q0.coords())).collect();
        point_err = point_err.max(norm(
            &r.q1.coords().iter().zip(&exact).map(|(x, y)| x - y).collect::<Vec<_>>(),
        ));
        density_err = density_err.max(r.delta_log_density.abs());
    }
    Ok([
        CheckResult::at_most("rotation-point", point_err, 1e-6, "10 fields, 100 steps".into()),
        CheckResult::at_most("rotation-log-density", density_err, 1e-8, "10 fields, 100 steps".into()),
    ])
}

/// `φ^{t,t}` must return its input bit for bit.
pub fn flow_identity(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let (net, q0) = instance(&mut rng, i, 1.0)?;
        let t = rng.gen_range(-1.0..1.0);
        let r = integrate_forward(&net, &q0, &IntegratorConfig::span(t, t, 100))?;
        let moved = r.q1.coords().iter().zip(q0.coords()).any(|(a, b)| a.to_bits() != b.to_bits());
        worst = worst.max(if moved { 1.0 } else { r.delta_log_density.abs() });
    }
    Ok(CheckResult::at_most("flow-identity", worst, 0.0, "10 instances".into()))
}

pub fn composition(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let (net, q0) = instance(&mut rng, i, 1.0)?;
        worst = worst.max(flow_compose_check(&net, &q0, 0.0, 0.5, 1.0, &IntegratorConfig::with_steps(200))?);
    }
    Ok(CheckResult::at_most(
        "composition",
        worst,
        1e-6,
        "(0, 0.5, 1), 200 steps".into(),
    ))
}

/// Forward then backward integration returns to the start.
pub fn round_trip(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let cfg = IntegratorConfig::default();
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let (net, q0) = instance(&mut rng, i, 1.0)?;
        let there = integrate_forward(&net, &q0, &cfg)?;
        let back = integrate_forward(&net, &there.q1, &cfg.reversed())?;
        worst = worst.max(Sphere::geodesic_distance(back.q1.coords(), q0.coords()));
    }
    Ok(CheckResult::at_most("round-trip", worst, 1e-6, "10 instances, 100 steps".into()))
}

/// Drift of `H(q, p) = ⟨p, X(q)⟩` along the cotangent lift of a
/// time-independent field.
pub fn hamiltonian_drift(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a);
    let cfg = IntegratorConfig {
        record_trajectory: true,
        ..IntegratorConfig::default()
    };
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let (mut net, q) = instance(&mut rng, i, 1.0)?;
        net.zero_time_input();
        let p = random_vec(q.ambient_dim(), &mut rng);
        let start = CotangentState { q, p };
        let traj = integrate_cotangent_lift(&net, &start, &cfg)?;
        let ham = |s: &CotangentState| -> Result<f64> { Ok(dot(&s.p, &eval_field(&net, 0.0, &s.q)?.vec)) };
        let h0 = ham(&start)?;
        for (_, s) in &traj {
            worst = worst.max((ham(s)? - h0).abs());
        }
    }
    Ok(CheckResult::at_most(
        "hamiltonian-drift",
        worst,
        1e-6,
        "10 time-independent fields over [0, 1]".into(),
    ))
}

/// The covector part of the cotangent lift is linear in its initial value.
/// Scaling by two is exact in floating point; a general combination holds
/// to rounding.
pub fn fiber_linearity(seed: u64) -> Result<[CheckResult; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1);
    let cfg = IntegratorConfig::default();
    let (mut doubling, mut combination): (f64, f64) = (0.0, 0.0);
    for i in 0..10 {
        let (net, q) = instance(&mut rng, i, 1.0)?;
        let m = q.ambient_dim();
        let (p1, p2) = (random_vec(m, &mut rng), random_vec(m, &mut rng));
        let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let run = |p: Vec<f64>| integrate_cotangent_lift(&net, &CotangentState { q: q.clone(), p }, &cfg);
        let t1 = run(p1.clone())?;
        let t2 = run(p2.clone())?;
        let td = run(p1.iter().map(|v| 2.0 * v).collect())?;
        let tc = run(p1.iter().zip(&p2).map(|(a, b)| alpha * a + beta * b).collect())?;
        for k in 0..t1.len() {
            let (a, b, d, c) = (&t1[k].1.p, &t2[k].1.p, &td[k].1.p, &tc[k].1.p);
            let twice: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
            doubling = doubling.max(rel_err(d, &twice));
            let lin: Vec<f64> = a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect();
            let scale = alpha.abs() * norm(a) + beta.abs() * norm(b);
            let diff: Vec<f64> = c.iter().zip(&lin).map(|(x, y)| x - y).collect();
            combination = combination.max(norm(&diff) / scale);
        }
    }
    Ok([
        CheckResult::at_most("fiber-doubling", doubling, 0.0, "p -> 2p, 10 instances".into()),
        CheckResult::at_most(
            "fiber-combination",
            combination,
            1e-12,
            "alpha p1 + beta p2, 10 instances".into(),
        ),
    ])
}

/// The base component of the cotangent lift is the field itself.
pub fn dq_identity(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd9);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let (net, q) = instance(&mut rng, i, 1.0)?;
        let t = rng.gen_range(0.0..1.0);
        let p = random_vec(q.ambient_dim(), &mut rng);
        let x = eval_field(&net, t, &q)?.vec;
        let (dq, _) = cotangent_lift_rhs(&net, t, &CotangentState { q, p })?;
        worst = worst.max(dq.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(CheckResult::at_most("dq-identity", worst, 0.0, "20 instances".into()))
}

/// Point errors at several step counts against a finer reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub steps: Vec<usize>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `log error` against `log h`.
    pub slope: f64,
}

impl ConvergenceStudy {
    pub fn check(&self) -> CheckResult {
        let dev = (self.slope - 4.0).abs();
        let errs: Vec<String> = self.errors.iter().map(|e| format!("{e:.2e}")).collect();
        CheckResult::at_most(
            "convergence-order",
            dev,
            0.3,
            format!("slope {:.3}; errors {}", self.slope, errs.join(" ")),
        )
    }
}

pub const STUDY_STEPS: [usize; 4] = [25, 50, 100, 200];

/// Step-halving study of RK4 with retraction on a fixed random field.
/// The error at each step count is the geodesic distance to a run with ten
/// times as many steps as the finest grid, averaged over a few starting
/// points.
pub fn convergence_order(seed: u64) -> Result<ConvergenceStudy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0d);
    let net = random_net(&[4, 10, 10, 3], 1.0, &mut rng)?;
    let starts: Vec<ManifoldPoint> = (0..4).map(|_| random_point(2, &mut rng)).collect();
    let reference_steps = 10 * STUDY_STEPS[STUDY_STEPS.len() - 1];
    let refs = starts
        .iter()
        .map(|q| integrate_forward(&net, q, &IntegratorConfig::with_steps(reference_steps)))
        .collect::<Result<Vec<_>>>()?;
    let mut errors = Vec::new();
    for &steps in &STUDY_STEPS {
        let mut total = 0.0;
        for (q, r) in starts.iter().zip(&refs) {
            let coarse = integrate_forward(&net, q, &IntegratorConfig::with_steps(steps))?;
            total += Sphere::geodesic_distance(coarse.q1.coords(), r.q1.coords());
        }
        errors.push(total / starts.len() as f64);
    }
    let xs: Vec<f64> = STUDY_STEPS.iter().map(|&s| (1.0 / s as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Ok(ConvergenceStudy {
        steps: STUDY_STEPS.to_vec(),
        slope: least_squares_slope(&xs, &ys),
        errors,
    })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
