//! Fixed-step integration of the flow, its log-density, and gradients.
//!
//! The scheme is classical RK4 in ambient coordinates followed by a
//! normalizing retraction after every full step. Log-density changes obey
//! `dℓ/dt = -div X_t` and are integrated with the same stages.
//!
//! Two gradient routes are provided:
//!
//! * [`integrate_backward_adjoint`] integrates the cotangent lift of the
//!   ambient field backwards in time, re-integrating the point alongside
//!   the covector, and accumulates parameter sensitivities on the way.
//! * [`backprop_discretize`] differentiates the discrete RK4 + retraction
//!   recursion exactly.
//!
//! Both read out the point gradient tangentially at `q0`.

use crate::error::{FlowError, Result};
use crate::field_net::{CoefficientNet, ParamGradient, Tape};
use crate::geometry::{project_onto_tangent, ManifoldPoint, Sphere};
use crate::linalg::{all_finite, dot, norm};
use crate::vector_field::{CotangentState, FieldEvaluator};

const RK4_WEIGHTS: [f64; 4] = [1.0, 2.0, 2.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub steps: usize,
    pub t0: f64,
    pub t1: f64,
    /// Keep every step point in [`ForwardResult::trajectory`].
    pub record_trajectory: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            t0: 0.0,
            t1: 1.0,
            record_trajectory: false,
        }
    }
}

impl IntegratorConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn span(t0: f64, t1: f64, steps: usize) -> Self {
        Self {
            steps,
            t0,
            t1,
            record_trajectory: false,
        }
    }

    /// Same grid, integrated in the opposite direction.
    pub fn reversed(&self) -> Self {
        Self {
            t0: self.t1,
            t1: self.t0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(FlowError::Config("integrator needs at least one step".into()));
        }
        if !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(FlowError::Config("integration bounds must be finite".into()));
        }
        Ok(())
    }

    fn step_size(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    fn time_at(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.step_size()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub q1: ManifoldPoint,
    /// `-∫ div X_s ds` along the trajectory.
    pub delta_log_density: f64,
    /// `(t_k, q_k)` for every grid point, when requested.
    pub trajectory: Option<Vec<(f64, ManifoldPoint)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardResult {
    /// Gradient with respect to the starting point, tangent at `q0`.
    pub grad_q0: Vec<f64>,
    pub param_grad: ParamGradient,
}

/// Scratch for the four RK4 stages of an `m`-dimensional point.
struct Stages {
    k: [Vec<f64>; 4],
    z: [Vec<f64>; 4],
    d: [f64; 4],
}

impl Stages {
    fn new(m: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; m]),
            z: std::array::from_fn(|_| vec![0.0; m]),
            d: [0.0; 4],
        }
    }

    /// Evaluates all stages from `q` at time `t` with step `h`. With `keep`,
    /// the recorded tape of stage `s` is swapped into `keep[s]`.
    fn run(
        &mut self,
        ev: &mut FieldEvaluator<'_>,
        t: f64,
        h: f64,
        q: &[f64],
        mut keep: Option<&mut [Tape]>,
    ) -> Result<()> {
        let offsets = [0.0, 0.5 * h, 0.5 * h, h];
        for s in 0..4 {
            let (before, rest) = self.k.split_at_mut(s);
            let z = &mut self.z[s];
            z.copy_from_slice(q);
            if s > 0 {
                let prev = &before[s - 1];
                for (zi, ki) in z.iter_mut().zip(prev) {
                    *zi += offsets[s] * ki;
                }
            }
            let ts = t + offsets[s];
            self.d[s] = ev.velocity_and_divergence(ts, z, &mut rest[0])?;
            if let Some(tapes) = keep.as_deref_mut() {
                ev.swap_tape(&mut tapes[s]);
            }
        }
        Ok(())
    }

    /// Unnormalized RK4 update `q + h/6 (k1 + 2k2 + 2k3 + k4)`.
    fn combine(&self, q: &[f64], h: f64, out: &mut [f64]) {
        out.copy_from_slice(q);
        for (w, k) in RK4_WEIGHTS.iter().zip(&self.k) {
            for (o, ki) in out.iter_mut().zip(k) {
                *o += h * w / 6.0 * ki;
            }
        }
    }

    fn log_density_increment(&self, h: f64) -> f64 {
        -h / 6.0 * RK4_WEIGHTS.iter().zip(&self.d).map(|(w, d)| w * d).sum::<f64>()
    }
}

fn normalize_in_place(v: &mut [f64], step: usize) -> Result<f64> {
    let r = norm(v);
    if !(r.is_finite() && r > 0.0) {
        return Err(FlowError::Integration {
            step,
            reason: format!("retraction of a vector with norm {r}"),
        });
    }
    v.iter_mut().for_each(|x| *x /= r);
    Ok(r)
}

fn check_point(net: &CoefficientNet, q: &ManifoldPoint) -> Result<()> {
    if q.ambient_dim() != net.output_dim() {
        return Err(FlowError::Shape {
            expected: net.output_dim(),
            got: q.ambient_dim(),
        });
    }
    Ok(())
}

/// Integrates the point and its log-density change from `cfg.t0` to
/// `cfg.t1`.
pub fn integrate_forward(
    net: &CoefficientNet,
    q0: &ManifoldPoint,
    cfg: &IntegratorConfig,
) -> Result<ForwardResult> {
    forward_pass(net, q0, cfg, None)
}

fn forward_pass(
    net: &CoefficientNet,
    q0: &ManifoldPoint,
    cfg: &IntegratorConfig,
    mut ws: Option<&mut ReverseWorkspace>,
) -> Result<ForwardResult> {
    cfg.validate()?;
    check_point(net, q0)?;
    let m = q0.ambient_dim();
    if let Some(w) = ws.as_deref_mut() {
        w.prepare(net, cfg, m);
        w.points[..m].copy_from_slice(q0.coords());
    }
    let mut trajectory = cfg.record_trajectory.then(|| vec![(cfg.t0, q0.clone())]);
    if cfg.t0 == cfg.t1 {
        if let Some(w) = ws {
            w.cfg = Some(cfg.clone());
        }
        return Ok(ForwardResult {
            q1: q0.clone(),
            delta_log_density: 0.0,
            trajectory,
        });
    }
    let mut ev = FieldEvaluator::new(net)?;
    let mut stages = Stages::new(m);
    let mut q = q0.coords().to_vec();
    let mut next = vec![0.0; m];
    let mut ell = 0.0;
    let h = cfg.step_size();
    for k in 0..cfg.steps {
        let t = cfg.time_at(k);
        let keep = ws.as_deref_mut().map(|w| &mut w.tapes[4 * k..4 * k + 4]);
        stages
            .run(&mut ev, t, h, &q, keep)
            .map_err(|e| integration_error(k, e))?;
        stages.combine(&q, h, &mut next);
        let r = normalize_in_place(&mut next, k)?;
        ell += stages.log_density_increment(h);
        if !all_finite(&next) || !ell.is_finite() {
            return Err(FlowError::Integration {
                step: k,
                reason: "non-finite state".into(),
            });
        }
        if let Some(w) = ws.as_deref_mut() {
            w.store_step(k, &stages, r, &next);
        }
        std::mem::swap(&mut q, &mut next);
        if let Some(tr) = trajectory.as_mut() {
            tr.push((cfg.time_at(k + 1), ManifoldPoint::from_unit_unchecked(q.clone())));
        }
    }
    if let Some(w) = ws {
        w.cfg = Some(cfg.clone());
    }
    Ok(ForwardResult {
        q1: ManifoldPoint::from_unit_unchecked(q),
        delta_log_density: ell,
        trajectory,
    })
}

fn integration_error(step: usize, e: FlowError) -> FlowError {
    match e {
        FlowError::Numeric(reason) => FlowError::Integration { step, reason },
        other => other,
    }
}

/// Integrates the cotangent lift `(dq, dp) = (X̄, -J_X̄ᵀ p)` from `cfg.t0` to
/// `cfg.t1`. Returns every grid state when `cfg.record_trajectory` is set,
/// otherwise just the final one.
pub fn integrate_cotangent_lift(
    net: &CoefficientNet,
    start: &CotangentState,
    cfg: &IntegratorConfig,
) -> Result<Vec<(f64, CotangentState)>> {
    cfg.validate()?;
    check_point(net, &start.q)?;
    let m = start.q.ambient_dim();
    let mut out = vec![(cfg.t0, start.clone())];
    if cfg.t0 == cfg.t1 {
        return Ok(out);
    }
    let mut ev = FieldEvaluator::new(net)?;
    let h = cfg.step_size();
    let mut q = start.q.coords().to_vec();
    let mut p = start.p.clone();
    let mut kq: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; m]);
    let mut kp: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; m]);
    let mut zq = vec![0.0; m];
    let mut zp = vec![0.0; m];
    let offsets = [0.0, 0.5 * h, 0.5 * h, h];
    for k in 0..cfg.steps {
        let t = cfg.time_at(k);
        for s in 0..4 {
            zq.copy_from_slice(&q);
            zp.copy_from_slice(&p);
            if s > 0 {
                for i in 0..m {
                    zq[i] += offsets[s] * kq[s - 1][i];
                    zp[i] += offsets[s] * kp[s - 1][i];
                }
            }
            ev.pullback(t + offsets[s], &zq, &zp, 0.0, &mut kp[s], None)
                .map_err(|e| integration_error(k, e))?;
            kp[s].iter_mut().for_each(|v| *v = -*v);
            kq[s].copy_from_slice(ev.last_velocity());
        }
        for s in 0..4 {
            let w = h * RK4_WEIGHTS[s] / 6.0;
            for i in 0..m {
                q[i] += w * kq[s][i];
                p[i] += w * kp[s][i];
            }
        }
        normalize_in_place(&mut q, k)?;
        if !all_finite(&p) {
            return Err(FlowError::Integration {
                step: k,
                reason: "non-finite covector".into(),
            });
        }
        if cfg.record_trajectory || k + 1 == cfg.steps {
            let state = CotangentState {
                q: ManifoldPoint::from_unit_unchecked(q.clone()),
                p: p.clone(),
            };
            out.push((cfg.time_at(k + 1), state));
        }
    }
    if !cfg.record_trajectory {
        out.remove(0);
    }
    Ok(out)
}

fn check_loss_grads(m: usize, loss_grad_q1: &[f64], loss_grad_logdet: f64) -> Result<()> {
    if loss_grad_q1.len() != m {
        return Err(FlowError::Shape {
            expected: m,
            got: loss_grad_q1.len(),
        });
    }
    if !all_finite(loss_grad_q1) || !loss_grad_logdet.is_finite() {
        return Err(FlowError::Numeric("non-finite loss gradient".into()));
    }
    Ok(())
}

/// Adjoint gradient of `L(q(t1), ℓ(t1))` with respect to the start point and
/// the parameters, given `∂L/∂q1` and `∂L/∂ℓ`.
///
/// Integrates from `t1` back to `t0`:
///
/// ```text
/// dq/dt = X̄(q)
/// dp/dt = -J_X̄ᵀ p + a ∇_q D
/// dG/dt = -pᵀ ∂X̄/∂θ + a ∂D/∂θ
/// ```
///
/// with `a = ∂L/∂ℓ`, `p(t1) = ∂L/∂q1`, `G(t1) = 0`.
pub fn integrate_backward_adjoint(
    net: &CoefficientNet,
    q1: &ManifoldPoint,
    loss_grad_q1: &[f64],
    loss_grad_logdet: f64,
    cfg: &IntegratorConfig,
) -> Result<BackwardResult> {
    adjoint_impl(net, q1, None, loss_grad_q1, loss_grad_logdet, cfg)
}

/// Adjoint pass that resets the point to the stored forward trajectory at
/// every grid time instead of relying on reverse integration alone.
pub fn integrate_backward_adjoint_stored(
    net: &CoefficientNet,
    forward: &ForwardResult,
    loss_grad_q1: &[f64],
    loss_grad_logdet: f64,
    cfg: &IntegratorConfig,
) -> Result<BackwardResult> {
    let traj = forward.trajectory.as_ref().ok_or_else(|| {
        FlowError::Config("stored-trajectory adjoint needs a recorded forward pass".into())
    })?;
    if traj.len() != cfg.steps + 1 && !(cfg.t0 == cfg.t1 && traj.len() == 1) {
        return Err(FlowError::Shape {
            expected: cfg.steps + 1,
            got: traj.len(),
        });
    }
    adjoint_impl(
        net,
        &forward.q1,
        Some(traj),
        loss_grad_q1,
        loss_grad_logdet,
        cfg,
    )
}

fn adjoint_impl(
    net: &CoefficientNet,
    q1: &ManifoldPoint,
    stored: Option<&[(f64, ManifoldPoint)]>,
    loss_grad_q1: &[f64],
    loss_grad_logdet: f64,
    cfg: &IntegratorConfig,
) -> Result<BackwardResult> {
    cfg.validate()?;
    check_point(net, q1)?;
    let m = q1.ambient_dim();
    check_loss_grads(m, loss_grad_q1, loss_grad_logdet)?;
    let mut grad = ParamGradient::zeros_like(net);
    if cfg.t0 == cfg.t1 {
        return Ok(BackwardResult {
            grad_q0: project_onto_tangent(q1.coords(), loss_grad_q1),
            param_grad: grad,
        });
    }
    let mut ev = FieldEvaluator::new(net)?;
    let h = cfg.step_size();
    let hb = -h;
    let a = loss_grad_logdet;
    let mut q = q1.coords().to_vec();
    let mut p = loss_grad_q1.to_vec();
    let mut kq: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; m]);
    let mut kp: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; m]);
    let mut zq = vec![0.0; m];
    let mut zp = vec![0.0; m];
    let offsets = [0.0, 0.5 * hb, 0.5 * hb, hb];
    for k in (0..cfg.steps).rev() {
        if let Some(traj) = stored {
            q.copy_from_slice(traj[k + 1].1.coords());
        }
        let t = cfg.time_at(k + 1);
        for s in 0..4 {
            zq.copy_from_slice(&q);
            zp.copy_from_slice(&p);
            if s > 0 {
                for i in 0..m {
                    zq[i] += offsets[s] * kq[s - 1][i];
                    zp[i] += offsets[s] * kp[s - 1][i];
                }
            }
            // G changes by hb/6 · w · (-(pᵀ∂X̄/∂θ - a ∂D/∂θ))
            let scale = h * RK4_WEIGHTS[s] / 6.0;
            ev.pullback(
                t + offsets[s],
                &zq,
                &zp,
                -a,
                &mut kp[s],
                Some((grad.as_mut_slice(), scale)),
            )
            .map_err(|e| integration_error(k, e))?;
            kp[s].iter_mut().for_each(|v| *v = -*v);
            kq[s].copy_from_slice(ev.last_velocity());
        }
        for s in 0..4 {
            let w = hb * RK4_WEIGHTS[s] / 6.0;
            for i in 0..m {
                q[i] += w * kq[s][i];
                p[i] += w * kp[s][i];
            }
        }
        normalize_in_place(&mut q, k)?;
        if !all_finite(&p) {
            return Err(FlowError::Integration {
                step: k,
                reason: "non-finite adjoint".into(),
            });
        }
    }
    if let Some(traj) = stored {
        q.copy_from_slice(traj[0].1.coords());
    }
    if !all_finite(grad.as_slice()) {
        return Err(FlowError::Numeric("non-finite parameter gradient".into()));
    }
    Ok(BackwardResult {
        grad_q0: project_onto_tangent(&q, &p),
        param_grad: grad,
    })
}

/// Exact reverse-mode gradient of the discrete forward map, including
/// every RK4 stage, divergence evaluation and retraction. The map is taken
/// to start by normalizing `q0`, so the point gradient is tangent at `q0`.
pub fn backprop_discretize(
    net: &CoefficientNet,
    q0: &ManifoldPoint,
    cfg: &IntegratorConfig,
    loss_grad_q1: &[f64],
    loss_grad_logdet: f64,
) -> Result<BackwardResult> {
    let mut ws = ReverseWorkspace::default();
    ws.forward(net, q0, cfg)?;
    ws.backprop(net, loss_grad_q1, loss_grad_logdet)
}

/// Reverse pass of [`backprop_discretize`] over an already recorded forward
/// trajectory. The stages are re-evaluated from the stored grid points.
pub fn backprop_trajectory(
    net: &CoefficientNet,
    forward: &ForwardResult,
    cfg: &IntegratorConfig,
    loss_grad_q1: &[f64],
    loss_grad_logdet: f64,
) -> Result<BackwardResult> {
    cfg.validate()?;
    let traj = forward
        .trajectory
        .as_ref()
        .ok_or_else(|| FlowError::Config("backprop needs a recorded trajectory".into()))?;
    check_loss_grads(forward.q1.ambient_dim(), loss_grad_q1, loss_grad_logdet)?;
    let mut ws = ReverseWorkspace::default();
    ws.replay(net, traj, cfg)?;
    ws.backprop(net, loss_grad_q1, loss_grad_logdet)
}

/// Everything the exact reverse sweep needs from a forward pass: grid
/// points, RK4 stage points, retraction radii and one recorded network
/// tape per stage. Reusing a workspace across samples keeps the buffers.
#[derive(Debug, Clone, Default)]
pub struct ReverseWorkspace {
    cfg: Option<IntegratorConfig>,
    sizes: Vec<usize>,
    m: usize,
    points: Vec<f64>,
    stage_points: Vec<f64>,
    radii: Vec<f64>,
    tapes: Vec<Tape>,
}

impl ReverseWorkspace {
    fn prepare(&mut self, net: &CoefficientNet, cfg: &IntegratorConfig, m: usize) {
        self.cfg = None;
        if self.sizes != net.layer_sizes() {
            self.sizes = net.layer_sizes().to_vec();
            self.tapes.clear();
        }
        let steps = if cfg.t0 == cfg.t1 { 0 } else { cfg.steps };
        self.m = m;
        self.points.resize((steps + 1) * m, 0.0);
        self.stage_points.resize(4 * steps * m, 0.0);
        self.radii.resize(steps, 0.0);
        if self.tapes.len() < 4 * steps {
            self.tapes.resize_with(4 * steps, || Tape::new(net));
        }
    }

    fn store_step(&mut self, k: usize, stages: &Stages, r: f64, next: &[f64]) {
        let m = self.m;
        self.radii[k] = r;
        for (s, z) in stages.z.iter().enumerate() {
            self.stage_points[(4 * k + s) * m..(4 * k + s + 1) * m].copy_from_slice(z);
        }
        self.points[(k + 1) * m..(k + 2) * m].copy_from_slice(next);
    }

    /// Same result as [`integrate_forward`], keeping what the reverse sweep
    /// needs.
    pub fn forward(
        &mut self,
        net: &CoefficientNet,
        q0: &ManifoldPoint,
        cfg: &IntegratorConfig,
    ) -> Result<ForwardResult> {
        forward_pass(net, q0, cfg, Some(self))
    }

    /// Rebuilds the workspace from a stored trajectory.
    fn replay(
        &mut self,
        net: &CoefficientNet,
        traj: &[(f64, ManifoldPoint)],
        cfg: &IntegratorConfig,
    ) -> Result<()> {
        let q0 = traj
            .first()
            .ok_or_else(|| FlowError::Config("empty trajectory".into()))?;
        check_point(net, &q0.1)?;
        let m = q0.1.ambient_dim();
        self.prepare(net, cfg, m);
        self.points[..m].copy_from_slice(q0.1.coords());
        if cfg.t0 != cfg.t1 {
            if traj.len() != cfg.steps + 1 {
                return Err(FlowError::Shape {
                    expected: cfg.steps + 1,
                    got: traj.len(),
                });
            }
            let mut ev = FieldEvaluator::new(net)?;
            let mut stages = Stages::new(m);
            let mut ytilde = vec![0.0; m];
            let h = cfg.step_size();
            for k in 0..cfg.steps {
                let q = traj[k].1.coords();
                stages
                    .run(&mut ev, cfg.time_at(k), h, q, Some(&mut self.tapes[4 * k..4 * k + 4]))
                    .map_err(|e| integration_error(k, e))?;
                stages.combine(q, h, &mut ytilde);
                self.store_step(k, &stages, norm(&ytilde), traj[k + 1].1.coords());
            }
        }
        self.cfg = Some(cfg.clone());
        Ok(())
    }

    /// Exact gradient of `L(q1, ℓ1)` for the most recent forward pass,
    /// given `∂L/∂q1` and `∂L/∂ℓ`.
    pub fn backprop(
        &mut self,
        net: &CoefficientNet,
        loss_grad_q1: &[f64],
        loss_grad_logdet: f64,
    ) -> Result<BackwardResult> {
        let cfg = self
            .cfg
            .clone()
            .ok_or_else(|| FlowError::Config("backprop needs a recorded forward pass".into()))?;
        if self.sizes != net.layer_sizes() {
            return Err(FlowError::Config(
                "network does not match the recorded forward pass".into(),
            ));
        }
        let m = self.m;
        check_loss_grads(m, loss_grad_q1, loss_grad_logdet)?;
        let mut grad = ParamGradient::zeros_like(net);
        if cfg.t0 == cfg.t1 {
            return Ok(BackwardResult {
                grad_q0: project_onto_tangent(&self.points[..m], loss_grad_q1),
                param_grad: grad,
            });
        }
        let mut ev = FieldEvaluator::new(net)?;
        let h = cfg.step_size();
        let a = loss_grad_logdet;
        let mut qbar = loss_grad_q1.to_vec();
        let mut ybar = vec![0.0; m];
        let mut kbar: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; m]);
        let mut g = vec![0.0; m];
        let offsets = [0.0, 0.5 * h, 0.5 * h, h];
        for k in (0..cfg.steps).rev() {
            let q_next = &self.points[(k + 1) * m..(k + 2) * m];
            let r = self.radii[k];

            // q_next = ỹ / |ỹ|
            let c = dot(q_next, &qbar);
            for i in 0..m {
                ybar[i] = (qbar[i] - c * q_next[i]) / r;
            }
            for s in 0..4 {
                let w = h * RK4_WEIGHTS[s] / 6.0;
                for i in 0..m {
                    kbar[s][i] = w * ybar[i];
                }
            }
            qbar.copy_from_slice(&ybar);
            for s in (0..4).rev() {
                // ℓ_next = ℓ - h/6 Σ w_s d_s
                let dbar = -a * h * RK4_WEIGHTS[s] / 6.0;
                let idx = 4 * k + s;
                let z = &self.stage_points[idx * m..(idx + 1) * m];
                ev.swap_tape(&mut self.tapes[idx]);
                let res = ev.pullback_recorded(
                    z,
                    &kbar[s],
                    dbar,
                    &mut g,
                    Some((grad.as_mut_slice(), 1.0)),
                );
                ev.swap_tape(&mut self.tapes[idx]);
                res.map_err(|e| integration_error(k, e))?;
                for i in 0..m {
                    qbar[i] += g[i];
                }
                if s > 0 {
                    for i in 0..m {
                        kbar[s - 1][i] += offsets[s] * g[i];
                    }
                }
            }
            if !all_finite(&qbar) {
                return Err(FlowError::Integration {
                    step: k,
                    reason: "non-finite adjoint".into(),
                });
            }
        }
        if !all_finite(grad.as_slice()) {
            return Err(FlowError::Numeric("non-finite parameter gradient".into()));
        }
        Ok(BackwardResult {
            grad_q0: project_onto_tangent(&self.points[..m], &qbar),
            param_grad: grad,
        })
    }
}

/// Geodesic distance between `φ^{r,s}(φ^{s,t}(q0))` and `φ^{r,t}(q0)`.
///
/// `cfg.steps` is the step count for the longest of the three spans; the
/// other spans get proportionally many steps, and zero-length spans are
/// the identity.
pub fn flow_compose_check(
    net: &CoefficientNet,
    q0: &ManifoldPoint,
    s: f64,
    t: f64,
    r: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    cfg.validate()?;
    let longest = (r - t).abs().max((s - t).abs()).max((r - s).abs());
    if longest == 0.0 {
        return Ok(0.0);
    }
    let steps_for = |from: f64, to: f64| -> usize {
        ((cfg.steps as f64 * (to - from).abs() / longest).round() as usize).max(1)
    };
    let run = |q: &ManifoldPoint, from: f64, to: f64| -> Result<ManifoldPoint> {
        let c = IntegratorConfig::span(from, to, steps_for(from, to));
        Ok(integrate_forward(net, q, &c)?.q1)
    };
    let mid = run(q0, t, s)?;
    let composed = run(&mid, s, r)?;
    let direct = run(q0, t, r)?;
    Ok(Sphere::geodesic_distance(composed.coords(), direct.coords()))
}
