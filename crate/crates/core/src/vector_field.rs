//! Vector fields `X_t = Σ_i f_i(t, ·) ∇z_i` on `S^n` and their divergence.
//!
//! Everything is evaluated for the ambient extension
//! `X̄(z) = f(z) - ⟨z, f(z)⟩ z`, which is tangent to every sphere through
//! the origin, so the sphere is invariant under its flow. With
//! `F = ∂f/∂z` the ambient Jacobian is
//!
//! ```text
//! J = F - z (fᵀ + zᵀF) - ⟨z, f⟩ I
//! Jᵀp = Fᵀ(p - ⟨z, p⟩ z) - ⟨z, p⟩ f - ⟨z, f⟩ p
//! ```
//!
//! and the divergence (extended off the sphere by the same formula) is
//! `D(z) = Σ_i ⟨e_i, F ∇z_i⟩ - n ⟨z, f⟩`, one tangent direction per
//! generator.

use crate::error::{FlowError, Result};
use crate::field_net::{CoefficientNet, Tape};
use crate::geometry::{ManifoldPoint, TangentVector};
use crate::linalg::{all_finite, dot};

/// Velocity and divergence of the field at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub velocity: TangentVector,
    pub divergence: f64,
}

/// A point together with an ambient covector.
#[derive(Debug, Clone, PartialEq)]
pub struct CotangentState {
    pub q: ManifoldPoint,
    pub p: Vec<f64>,
}

/// Reusable evaluator for the ambient field of one network.
#[derive(Debug, Clone)]
pub struct FieldEvaluator<'a> {
    net: &'a CoefficientNet,
    tape: Tape,
    m: usize,
    dirs: Vec<f64>,
    ct_y: Vec<f64>,
    ct_tan: Vec<f64>,
    vel: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> FieldEvaluator<'a> {
    pub fn new(net: &'a CoefficientNet) -> Result<Self> {
        let m = net.output_dim();
        if net.input_dim() != m + 1 {
            return Err(FlowError::Config(format!(
                "network input width {} must be 1 + output width {}",
                net.input_dim(),
                m
            )));
        }
        if m < 2 {
            return Err(FlowError::Config("ambient dimension must be at least 2".into()));
        }
        Ok(Self {
            net,
            tape: Tape::new(net),
            m,
            dirs: vec![0.0; m * m],
            ct_y: vec![0.0; m],
            ct_tan: vec![0.0; m * m],
            vel: vec![0.0; m],
            y: vec![0.0; m],
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.m
    }

    pub fn net(&self) -> &'a CoefficientNet {
        self.net
    }

    fn fill_generator_dirs(&mut self, z: &[f64]) {
        let m = self.m;
        for i in 0..m {
            let row = &mut self.dirs[i * m..(i + 1) * m];
            for (j, r) in row.iter_mut().enumerate() {
                *r = -z[i] * z[j];
            }
            row[i] += 1.0;
        }
    }

    fn check(&self, t: f64, z: &[f64]) -> Result<()> {
        if z.len() != self.m {
            return Err(FlowError::Shape {
                expected: self.m,
                got: z.len(),
            });
        }
        if !t.is_finite() || !all_finite(z) {
            return Err(FlowError::Numeric("non-finite field input".into()));
        }
        Ok(())
    }

    /// `X̄(t, z)` at the point of the most recent [`Self::pullback`].
    pub fn last_velocity(&self) -> &[f64] {
        &self.vel
    }

    /// Writes `X̄(t, z)` into `out`.
    pub fn velocity(&mut self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(t, z)?;
        self.net.record(&mut self.tape, t, z, &[], 0);
        let y = self.tape.output();
        let zy = dot(z, y);
        for ((o, yi), zi) in out.iter_mut().zip(y).zip(z) {
            *o = yi - zy * zi;
        }
        Ok(())
    }

    /// Writes `X̄(t, z)` into `out` and returns the divergence `D(t, z)`.
    pub fn velocity_and_divergence(&mut self, t: f64, z: &[f64], out: &mut [f64]) -> Result<f64> {
        self.check(t, z)?;
        let m = self.m;
        self.fill_generator_dirs(z);
        self.net.record(&mut self.tape, t, z, &self.dirs, m);
        let y = self.tape.output();
        let zy = dot(z, y);
        for ((o, yi), zi) in out.iter_mut().zip(y).zip(z) {
            *o = yi - zy * zi;
        }
        // Σ_i ∇z_i(f_i) + f_i div ∇z_i, with div ∇z_i = -n z_i
        let mut div = -((m - 1) as f64) * zy;
        for i in 0..m {
            div += self.tape.tangent_output(i)[i];
        }
        Ok(div)
    }

    /// Pullback through the field at `(t, z)`:
    /// `grad_z = J_X̄ᵀ u + c ∇_z D` and, when requested,
    /// `params += scale * ∂(⟨u, X̄⟩ + c D)/∂θ`.
    pub fn pullback(
        &mut self,
        t: f64,
        z: &[f64],
        u: &[f64],
        c: f64,
        grad_z: &mut [f64],
        params: Option<(&mut [f64], f64)>,
    ) -> Result<()> {
        self.check(t, z)?;
        if c != 0.0 {
            self.fill_generator_dirs(z);
            self.net.record(&mut self.tape, t, z, &self.dirs, self.m);
        } else {
            self.net.record(&mut self.tape, t, z, &[], 0);
        }
        self.pullback_recorded(z, u, c, grad_z, params)
    }

    /// Exchanges the internal tape with `tape`. A tape swapped out right
    /// after [`Self::velocity_and_divergence`] can be swapped back in later
    /// for [`Self::pullback_recorded`] without evaluating the network again.
    pub fn swap_tape(&mut self, tape: &mut Tape) {
        std::mem::swap(&mut self.tape, tape);
    }

    /// [`Self::pullback`] at the point the current tape was recorded at.
    /// A nonzero `c` needs a tape recorded with the generator directions.
    pub fn pullback_recorded(
        &mut self,
        z: &[f64],
        u: &[f64],
        c: f64,
        grad_z: &mut [f64],
        params: Option<(&mut [f64], f64)>,
    ) -> Result<()> {
        if z.len() != self.m || u.len() != self.m || grad_z.len() != self.m {
            return Err(FlowError::Shape {
                expected: self.m,
                got: z.len().min(u.len()).min(grad_z.len()),
            });
        }
        if !all_finite(u) || !c.is_finite() {
            return Err(FlowError::Numeric("non-finite cotangent".into()));
        }
        let m = self.m;
        let n = (m - 1) as f64;
        let with_div = c != 0.0;
        let has_dirs = self.tape.n_dirs() == m;
        if with_div && !has_dirs {
            return Err(FlowError::Config(
                "divergence pullback needs a tape with generator directions".into(),
            ));
        }
        self.y.copy_from_slice(self.tape.output());
        let zu = dot(z, u);
        let zy = dot(z, &self.y);
        for i in 0..m {
            self.ct_y[i] = u[i] - zu * z[i];
            if with_div {
                self.ct_y[i] -= n * c * z[i];
            }
        }
        let ct_tan: &[f64] = if with_div {
            self.ct_tan.fill(0.0);
            for i in 0..m {
                self.ct_tan[i * m + i] = c;
            }
            &self.ct_tan
        } else {
            &[]
        };
        self.net.backprop(&mut self.tape, &self.ct_y, ct_tan, params);

        let y = &self.y;
        for i in 0..m {
            self.vel[i] = y[i] - zy * z[i];
        }
        let xbar = &self.tape.input_adjoint()[1..];
        for i in 0..m {
            grad_z[i] = xbar[i] - zu * y[i] - zy * u[i];
        }
        if with_div {
            for (g, yi) in grad_z.iter_mut().zip(y) {
                *g -= n * c * yi;
            }
            for i in 0..m {
                let dbar = self.tape.dir_adjoint(i);
                let zd = dot(z, dbar);
                for (j, g) in grad_z.iter_mut().enumerate() {
                    *g -= z[i] * dbar[j];
                }
                grad_z[i] -= zd;
            }
        }
        Ok(())
    }
}

/// `X_t(q) = Σ_i f_i(t, q) (e_i - q_i q)`.
pub fn eval_field(net: &CoefficientNet, t: f64, q: &ManifoldPoint) -> Result<TangentVector> {
    let mut ev = FieldEvaluator::new(net)?;
    let mut vec = vec![0.0; q.ambient_dim()];
    ev.velocity(t, q.coords(), &mut vec)?;
    Ok(TangentVector {
        base: q.clone(),
        vec,
    })
}

/// Divergence of `X_t` at `q`, from the generator decomposition.
pub fn eval_divergence(net: &CoefficientNet, t: f64, q: &ManifoldPoint) -> Result<f64> {
    let mut ev = FieldEvaluator::new(net)?;
    let mut vel = vec![0.0; q.ambient_dim()];
    ev.velocity_and_divergence(t, q.coords(), &mut vel)
}

pub fn field_eval(net: &CoefficientNet, t: f64, q: &ManifoldPoint) -> Result<FieldEval> {
    let mut ev = FieldEvaluator::new(net)?;
    let mut vec = vec![0.0; q.ambient_dim()];
    let divergence = ev.velocity_and_divergence(t, q.coords(), &mut vec)?;
    Ok(FieldEval {
        velocity: TangentVector {
            base: q.clone(),
            vec,
        },
        divergence,
    })
}

/// Right-hand side of the cotangent lift of `X̄`: `(X̄(q), -J_X̄(q)ᵀ p)`.
pub fn cotangent_lift_rhs(
    net: &CoefficientNet,
    t: f64,
    state: &CotangentState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = state.q.ambient_dim();
    if state.p.len() != m {
        return Err(FlowError::Shape {
            expected: m,
            got: state.p.len(),
        });
    }
    let dq = eval_field(net, t, &state.q)?.vec;
    let mut ev = FieldEvaluator::new(net)?;
    let mut dp = vec![0.0; m];
    ev.pullback(t, state.q.coords(), &state.p, 0.0, &mut dp, None)?;
    dp.iter_mut().for_each(|v| *v = -*v);
    Ok((dq, dp))
}
