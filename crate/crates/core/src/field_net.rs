//! The time-dependent coefficient function `f(t, z)` as a small tanh MLP.
//!
//! Input is `[t, z_0, …, z_n]`, output has one coefficient per generator
//! field. Hidden layers use `tanh`, the output layer is affine.
//!
//! Besides the plain forward pass the network records a [`Tape`] that
//! carries any number of forward-mode tangents alongside the primal values.
//! [`CoefficientNet::backprop`] then runs reverse mode over both the primal
//! and tangent channels, which gives gradients of expressions like
//! `⟨c, (∂f/∂z)·d(z)⟩` with respect to `z`, `d` and the parameters. The
//! divergence gradient needs exactly that.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg::{all_finite, axpy, dot};

/// Parameters of the coefficient network, stored as one flat vector.
///
/// Layer `l` maps `layer_sizes[l]` inputs to `layer_sizes[l + 1]` outputs.
/// Its weights are row-major `(out, in)` followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientNet {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Gradient with respect to every network parameter, same layout as the
/// network's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient(Vec<f64>);

impl ParamGradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn zeros_like(net: &CoefficientNet) -> Self {
        Self::zeros(net.num_params())
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        crate::linalg::dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.0)
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamGradient) {
        crate::linalg::axpy(alpha, &other.0, &mut self.0);
    }
}

/// Result of a vector-Jacobian product.
#[derive(Debug, Clone)]
pub struct Vjp {
    /// `(∂f/∂z)ᵀ ct`
    pub input_grad: Vec<f64>,
    /// `(∂f/∂t)ᵀ ct`
    pub time_grad: f64,
    /// `∂(ctᵀ f)/∂θ`
    pub param_grad: ParamGradient,
}

/// Serialized form: a shape header per layer followed by its tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetRecord {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    /// `[out, in]`
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(FlowError::Config(
            "network needs at least an input and an output layer".into(),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(FlowError::Config("layer sizes must be positive".into()));
    }
    Ok(())
}

fn layer_offsets(layer_sizes: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layer_sizes.len());
    let mut acc = 0;
    offsets.push(0);
    for w in layer_sizes.windows(2) {
        acc += w[0] * w[1] + w[1];
        offsets.push(acc);
    }
    offsets
}

impl CoefficientNet {
    /// Fan-in scaled Gaussian weights, zero biases, and a zero output
    /// layer, so the initial field vanishes identically.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut net = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = net.num_layers() - 1;
        for (l, &fan_in) in layer_sizes[..last].iter().enumerate() {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
                .expect("positive standard deviation");
            let (w, _) = net.layer_mut(l);
            w.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        }
        Ok(net)
    }

    /// Network for the sphere `S^n`: input `1 + (n + 1)`, output `n + 1`.
    pub fn for_sphere(n: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let sizes = sphere_layer_sizes(n, hidden);
        Self::init(&sizes, seed)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let offsets = layer_offsets(layer_sizes);
        let total = *offsets.last().unwrap();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; total],
            offsets,
        })
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes)?;
        if params.len() != net.params.len() {
            return Err(FlowError::Shape {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if !all_finite(&params) {
            return Err(FlowError::Numeric("non-finite network parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weights and biases of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (o, i) = (self.layer_sizes[l + 1], self.layer_sizes[l]);
        let start = self.offsets[l];
        let w = &self.params[start..start + o * i];
        let b = &self.params[start + o * i..start + o * i + o];
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (o, i) = (self.layer_sizes[l + 1], self.layer_sizes[l]);
        let start = self.offsets[l];
        let (w, rest) = self.params[start..start + o * i + o].split_at_mut(o * i);
        (w, rest)
    }

    /// Zeroes the weights attached to the time input, making the field
    /// time-independent.
    pub fn zero_time_input(&mut self) {
        let inp = self.layer_sizes[0];
        let (w, _) = self.layer_mut(0);
        for row in w.chunks_mut(inp) {
            row[0] = 0.0;
        }
    }

    /// Copy with parameters `θ + eps * dir`.
    pub fn perturbed(&self, dir: &[f64], eps: f64) -> Self {
        let mut out = self.clone();
        crate::linalg::axpy(eps, dir, &mut out.params);
        out
    }

    pub fn to_record(&self) -> NetRecord {
        let layers = (0..self.num_layers())
            .map(|l| {
                let (w, b) = self.layer(l);
                LayerRecord {
                    shape: [self.layer_sizes[l + 1], self.layer_sizes[l]],
                    weights: w.to_vec(),
                    bias: b.to_vec(),
                }
            })
            .collect();
        NetRecord {
            layer_sizes: self.layer_sizes.clone(),
            layers,
        }
    }

    pub fn from_record(rec: &NetRecord) -> Result<Self> {
        let mut net = Self::zeros(&rec.layer_sizes)?;
        if rec.layers.len() != net.num_layers() {
            return Err(FlowError::Shape {
                expected: net.num_layers(),
                got: rec.layers.len(),
            });
        }
        for (l, lr) in rec.layers.iter().enumerate() {
            let want = [rec.layer_sizes[l + 1], rec.layer_sizes[l]];
            if lr.shape != want
                || lr.weights.len() != want[0] * want[1]
                || lr.bias.len() != want[0]
            {
                return Err(FlowError::Config(format!(
                    "layer {l}: stored shape {:?} does not match header {:?}",
                    lr.shape, want
                )));
            }
            let (w, b) = net.layer_mut(l);
            w.copy_from_slice(&lr.weights);
            b.copy_from_slice(&lr.bias);
        }
        if !all_finite(&net.params) {
            return Err(FlowError::Numeric("non-finite network parameter".into()));
        }
        Ok(net)
    }

    fn check_inputs(&self, t: f64, q: &[f64]) -> Result<()> {
        if q.len() + 1 != self.input_dim() {
            return Err(FlowError::Shape {
                expected: self.input_dim() - 1,
                got: q.len(),
            });
        }
        if !t.is_finite() || !all_finite(q) {
            return Err(FlowError::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    /// Coefficients `f(t, q)`.
    pub fn forward(&self, t: f64, q: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(t, q)?;
        let mut tape = Tape::new(self);
        self.record(&mut tape, t, q, &[], 0);
        Ok(tape.output().to_vec())
    }

    /// `(∂f/∂q) · dq` by forward-mode propagation.
    pub fn jvp(&self, t: f64, q: &[f64], dq: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(t, q)?;
        if dq.len() != q.len() {
            return Err(FlowError::Shape {
                expected: q.len(),
                got: dq.len(),
            });
        }
        if !all_finite(dq) {
            return Err(FlowError::Numeric("non-finite tangent".into()));
        }
        let mut tape = Tape::new(self);
        self.record(&mut tape, t, q, dq, 1);
        Ok(tape.tangent_output(0).to_vec())
    }

    /// Reverse-mode product with a covector on the output.
    pub fn vjp(&self, t: f64, q: &[f64], ct: &[f64]) -> Result<Vjp> {
        self.check_inputs(t, q)?;
        if ct.len() != self.output_dim() {
            return Err(FlowError::Shape {
                expected: self.output_dim(),
                got: ct.len(),
            });
        }
        let mut tape = Tape::new(self);
        self.record(&mut tape, t, q, &[], 0);
        let mut grad = ParamGradient::zeros_like(self);
        self.backprop(&mut tape, ct, &[], Some((grad.as_mut_slice(), 1.0)));
        let inp = tape.input_adjoint();
        Ok(Vjp {
            input_grad: inp[1..].to_vec(),
            time_grad: inp[0],
            param_grad: grad,
        })
    }

    /// Forward pass at `(t, z)` carrying `n_dirs` tangent directions
    /// (`dirs` is row-major `n_dirs × z.len()`). The time input has zero
    /// tangent. Inputs are assumed finite.
    pub fn record(&self, tape: &mut Tape, t: f64, z: &[f64], dirs: &[f64], n_dirs: usize) {
        let m = z.len();
        debug_assert_eq!(dirs.len(), n_dirs * m);
        tape.set_dirs(self, n_dirs);
        let x = &mut tape.acts[0];
        x[0] = t;
        x[1..].copy_from_slice(z);
        let tx = &mut tape.tans[0];
        for k in 0..n_dirs {
            let row = &mut tx[k * (m + 1)..(k + 1) * (m + 1)];
            row[0] = 0.0;
            row[1..].copy_from_slice(&dirs[k * m..(k + 1) * m]);
        }

        let last = self.num_layers() - 1;
        for l in 0..=last {
            let (inp, out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (w, b) = self.layer(l);
            let (lo, hi) = tape.acts.split_at_mut(l + 1);
            let (a_in, a_out) = (&lo[l][..inp], &mut hi[0][..out]);
            let (tlo, thi) = tape.tans.split_at_mut(l + 1);
            let t_in = &tlo[l][..n_dirs * inp];
            let t_out = &mut thi[0][..n_dirs * out];
            let h_t = &mut tape.htans[l + 1][..n_dirs * out];

            for ((row, bo), ao) in w.chunks_exact(inp).zip(b).zip(a_out.iter_mut()) {
                *ao = bo + dot(row, a_in);
            }
            for (tin, ht) in t_in.chunks_exact(inp).zip(h_t.chunks_exact_mut(out)) {
                for (row, h) in w.chunks_exact(inp).zip(ht.iter_mut()) {
                    *h = dot(row, tin);
                }
            }
            if l < last {
                a_out.iter_mut().for_each(|a| *a = a.tanh());
                for (ht, to) in h_t.chunks_exact(out).zip(t_out.chunks_exact_mut(out)) {
                    for ((t, h), a) in to.iter_mut().zip(ht).zip(a_out.iter()) {
                        *t = (1.0 - a * a) * h;
                    }
                }
            } else {
                t_out.copy_from_slice(h_t);
            }
        }
    }

    /// Reverse pass over a recorded tape.
    ///
    /// `ct_y` is the cotangent of the primal output and `ct_tan` (row-major
    /// `n_dirs × out`, or empty for zero) the cotangents of the tangent
    /// outputs. Parameter gradients are accumulated as
    /// `grad += scale * ∂/∂θ`. Afterwards [`Tape::input_adjoint`] and
    /// [`Tape::dir_adjoint`] hold the gradients with respect to the input
    /// `[t, z]` and to each tangent direction.
    pub fn backprop(
        &self,
        tape: &mut Tape,
        ct_y: &[f64],
        ct_tan: &[f64],
        param_grad: Option<(&mut [f64], f64)>,
    ) {
        let n_dirs = tape.n_dirs;
        let last = self.num_layers() - 1;
        let out_dim = self.output_dim();
        tape.abar[last + 1][..out_dim].copy_from_slice(ct_y);
        if ct_tan.is_empty() {
            tape.tbar[last + 1][..n_dirs * out_dim].fill(0.0);
        } else {
            debug_assert_eq!(ct_tan.len(), n_dirs * out_dim);
            tape.tbar[last + 1][..n_dirs * out_dim].copy_from_slice(ct_tan);
        }
        let mut param_grad = param_grad;

        for l in (0..=last).rev() {
            let (inp, out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            if l < last {
                // tanh layer: turn adjoints of (a, ȧ) into adjoints of (h, ḣ)
                let a_out = &tape.acts[l + 1][..out];
                let h_t = &tape.htans[l + 1][..n_dirs * out];
                let abar = &mut tape.abar[l + 1][..out];
                let tbar = &mut tape.tbar[l + 1][..n_dirs * out];
                let sbar = &mut tape.scratch[..out];
                sbar.fill(0.0);
                for (tb, ht) in tbar.chunks_exact_mut(out).zip(h_t.chunks_exact(out)) {
                    for (((x, h), a), sb) in tb.iter_mut().zip(ht).zip(a_out).zip(sbar.iter_mut()) {
                        *sb += *x * h;
                        *x *= 1.0 - a * a;
                    }
                }
                for ((ab, a), sb) in abar.iter_mut().zip(a_out).zip(sbar.iter()) {
                    *ab = (1.0 - a * a) * (*ab - 2.0 * a * sb);
                }
            }

            let (w, _) = self.layer(l);
            if let Some((g, scale)) = param_grad.as_mut() {
                let start = self.offsets[l];
                let (gw, gb) = g[start..start + inp * out + out].split_at_mut(inp * out);
                let hbar = &tape.abar[l + 1][..out];
                let tbar = &tape.tbar[l + 1][..n_dirs * out];
                let a_in = &tape.acts[l][..inp];
                let t_in = &tape.tans[l][..n_dirs * inp];
                for ((grow, hb), gbo) in gw.chunks_exact_mut(inp).zip(hbar).zip(gb.iter_mut()) {
                    let hb = *scale * hb;
                    axpy(hb, a_in, grow);
                    *gbo += hb;
                }
                for (tb, tin) in tbar.chunks_exact(out).zip(t_in.chunks_exact(inp)) {
                    for (grow, x) in gw.chunks_exact_mut(inp).zip(tb) {
                        axpy(*scale * x, tin, grow);
                    }
                }
            }

            let (alo, ahi) = tape.abar.split_at_mut(l + 1);
            let (a_prev, hbar) = (&mut alo[l][..inp], &ahi[0][..out]);
            a_prev.fill(0.0);
            for (row, hb) in w.chunks_exact(inp).zip(hbar) {
                axpy(*hb, row, a_prev);
            }
            let (tlo, thi) = tape.tbar.split_at_mut(l + 1);
            let (t_prev, tbar) = (&mut tlo[l][..n_dirs * inp], &thi[0][..n_dirs * out]);
            for (tp, tb) in t_prev.chunks_exact_mut(inp).zip(tbar.chunks_exact(out)) {
                tp.fill(0.0);
                for (row, x) in w.chunks_exact(inp).zip(tb) {
                    axpy(*x, row, tp);
                }
            }
        }
    }
}

/// Layer sizes for a coefficient net on `S^n` with the given hidden widths.
pub fn sphere_layer_sizes(n: usize, hidden: &[usize]) -> Vec<usize> {
    let m = n + 1;
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(m + 1);
    sizes.extend_from_slice(hidden);
    sizes.push(m);
    sizes
}

/// Forward values, tangents and reverse-mode scratch for one evaluation.
/// Reusing a tape across calls avoids reallocating the buffers.
#[derive(Debug, Clone)]
pub struct Tape {
    n_dirs: usize,
    sizes: Vec<usize>,
    acts: Vec<Vec<f64>>,
    tans: Vec<Vec<f64>>,
    htans: Vec<Vec<f64>>,
    abar: Vec<Vec<f64>>,
    tbar: Vec<Vec<f64>>,
    scratch: Vec<f64>,
}

impl Tape {
    pub fn new(net: &CoefficientNet) -> Self {
        let sizes = net.layer_sizes.clone();
        let acts = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let abar = sizes.iter().map(|&s| vec![0.0; s]).collect();
        Self {
            n_dirs: 0,
            tans: sizes.iter().map(|_| Vec::new()).collect(),
            htans: sizes.iter().map(|_| Vec::new()).collect(),
            tbar: sizes.iter().map(|_| Vec::new()).collect(),
            scratch: vec![0.0; sizes.iter().copied().max().unwrap_or(0)],
            sizes,
            acts,
            abar,
        }
    }

    fn set_dirs(&mut self, net: &CoefficientNet, n_dirs: usize) {
        debug_assert_eq!(self.sizes, net.layer_sizes);
        self.n_dirs = n_dirs;
        for (l, &s) in self.sizes.iter().enumerate() {
            let need = s * n_dirs;
            if self.tans[l].len() < need {
                self.tans[l].resize(need, 0.0);
                self.htans[l].resize(need, 0.0);
                self.tbar[l].resize(need, 0.0);
            }
        }
    }

    pub fn n_dirs(&self) -> usize {
        self.n_dirs
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn tangent_output(&self, k: usize) -> &[f64] {
        let out = *self.sizes.last().unwrap();
        &self.tans.last().unwrap()[k * out..(k + 1) * out]
    }

    /// Gradient with respect to the full input `[t, z]` after a backprop.
    pub fn input_adjoint(&self) -> &[f64] {
        &self.abar[0]
    }

    /// Gradient with respect to tangent direction `k` (length of `z`).
    pub fn dir_adjoint(&self, k: usize) -> &[f64] {
        let inp = self.sizes[0];
        &self.tbar[0][k * inp + 1..(k + 1) * inp]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Straightforward re-evaluation of the affine+tanh chain.
    fn naive_forward(net: &CoefficientNet, t: f64, q: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = std::iter::once(t).chain(q.iter().copied()).collect();
        let sizes = net.layer_sizes();
        for l in 0..net.num_layers() {
            let (w, b) = net.layer(l);
            let mut h = vec![0.0; sizes[l + 1]];
            for o in 0..sizes[l + 1] {
                h[o] = b[o];
                for i in 0..sizes[l] {
                    h[o] += w[o * sizes[l] + i] * a[i];
                }
            }
            if l + 1 < net.num_layers() {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = h;
        }
        a
    }

    fn random_net(sizes: &[usize], seed: u64, scale: f64) -> CoefficientNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = CoefficientNet::zeros(sizes).unwrap();
        net.params_mut()
            .iter_mut()
            .for_each(|p| *p = scale * rng.gen_range(-1.0..1.0));
        net
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn parameter_count_for_default_sphere_net() {
        let net = CoefficientNet::for_sphere(2, &[10, 10], 0).unwrap();
        assert_eq!(net.num_params(), (4 * 10 + 10) + (10 * 10 + 10) + (10 * 3 + 3));
        assert_eq!(net.num_params(), 193);
    }

    #[test]
    fn zero_head_gives_zero_output_and_jvp() {
        let net = CoefficientNet::for_sphere(2, &[10, 10], 42).unwrap();
        assert!(net.params().iter().any(|p| *p != 0.0));
        for (t, q) in [(0.0, [0.3, -1.0, 2.0]), (0.7, [1.0, 0.0, 0.0])] {
            assert_eq!(net.forward(t, &q).unwrap(), vec![0.0; 3]);
            assert_eq!(net.jvp(t, &q, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = CoefficientNet::for_sphere(3, &[10, 10], 9).unwrap();
        let b = CoefficientNet::for_sphere(3, &[10, 10], 9).unwrap();
        assert_eq!(a, b);
        let c = CoefficientNet::for_sphere(3, &[10, 10], 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(CoefficientNet::init(&[], 0).is_err());
        assert!(CoefficientNet::init(&[4], 0).is_err());
        assert!(CoefficientNet::init(&[4, 0, 3], 0).is_err());
    }

    #[test]
    fn identity_linear_layer() {
        let mut net = CoefficientNet::zeros(&[4, 3]).unwrap();
        {
            let (w, _) = net.layer_mut(0);
            for i in 0..3 {
                w[i * 4 + 1 + i] = 1.0;
            }
        }
        let q = [0.2, -0.4, 0.9];
        assert_eq!(net.forward(0.5, &q).unwrap(), q.to_vec());
        // linear net: jvp is W·dq, vjp input gradient is Wᵀct
        let dq = [1.0, 2.0, -3.0];
        assert_eq!(net.jvp(0.5, &q, &dq).unwrap(), dq.to_vec());
        let v = net.vjp(0.5, &q, &dq).unwrap();
        assert_eq!(v.input_grad, dq.to_vec());
        assert_eq!(v.time_grad, 0.0);
    }

    #[test]
    fn linear_net_general_matrix() {
        let mut net = CoefficientNet::zeros(&[4, 3]).unwrap();
        let wq = [[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0], [0.25, -2.0, 1.0]];
        {
            let (w, _) = net.layer_mut(0);
            for o in 0..3 {
                for i in 0..3 {
                    w[o * 4 + 1 + i] = wq[o][i];
                }
            }
        }
        let dq = [0.3, -0.7, 1.1];
        let ct = [2.0, -1.0, 0.5];
        let jvp = net.jvp(0.0, &[0.1, 0.2, 0.3], &dq).unwrap();
        let vjp = net.vjp(0.0, &[0.1, 0.2, 0.3], &ct).unwrap();
        for o in 0..3 {
            let want: f64 = (0..3).map(|i| wq[o][i] * dq[i]).sum();
            assert!((jvp[o] - want).abs() < 1e-15);
            let want_t: f64 = (0..3).map(|i| wq[i][o] * ct[i]).sum();
            assert!((vjp.input_grad[o] - want_t).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let net = random_net(&[4, 10, 10, 3], 1, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = net.forward(t, &q).unwrap();
            let want = naive_forward(&net, t, &q);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let net = random_net(&[5, 10, 10, 4], 3, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-5;
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dq: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let jvp = net.jvp(t, &q, &dq).unwrap();
            let qp: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a + eps * b).collect();
            let qm: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a - eps * b).collect();
            let (fp, fm) = (naive_forward(&net, t, &qp), naive_forward(&net, t, &qm));
            for o in 0..4 {
                let fd = (fp[o] - fm[o]) / (2.0 * eps);
                assert!(
                    (fd - jvp[o]).abs() <= 1e-6 * fd.abs().max(jvp[o].abs()).max(1e-3),
                    "{fd} vs {}",
                    jvp[o]
                );
            }
        }
    }

    #[test]
    fn zero_head_vjp_touches_only_final_layer() {
        let net = CoefficientNet::for_sphere(2, &[10, 10], 5).unwrap();
        let ct = [0.5, -1.0, 2.0];
        let (t, q) = (0.3, [0.1, 0.7, -0.2]);
        let v = net.vjp(t, &q, &ct).unwrap();
        assert_eq!(v.input_grad, vec![0.0; 3]);
        assert_eq!(v.time_grad, 0.0);
        // reconstruct the last hidden activation with a head that reads it out
        let hidden = {
            let mut probe = net.clone();
            let (w, _) = probe.layer_mut(2);
            w.fill(0.0);
            let mut tape = Tape::new(&probe);
            probe.record(&mut tape, t, &q, &[], 0);
            tape.acts[2].clone()
        };
        let start = net.offsets[2];
        let g = v.param_grad.as_slice();
        assert!(g[..start].iter().all(|x| *x == 0.0));
        for o in 0..3 {
            for i in 0..10 {
                assert!((g[start + o * 10 + i] - ct[o] * hidden[i]).abs() < 1e-15);
            }
            assert_eq!(g[start + 30 + o], ct[o]);
        }
    }

    #[test]
    fn vjp_columns_match_jvp() {
        let net = random_net(&[4, 10, 10, 3], 6, 0.9);
        let (t, q) = (0.4, [0.3, -0.5, 0.8]);
        let mut jac = [[0.0; 3]; 3];
        for (j, col) in jac.iter_mut().enumerate() {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            let c = net.jvp(t, &q, &e).unwrap();
            col.copy_from_slice(&c);
        }
        let ct = [0.7, -1.3, 0.2];
        let v = net.vjp(t, &q, &ct).unwrap();
        for (col, got) in jac.iter().zip(&v.input_grad) {
            let want: f64 = col.iter().zip(&ct).map(|(a, b)| a * b).sum();
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let net = random_net(&[4, 10, 10, 3], 7, 0.7);
        let (t, q, ct) = (0.6, [0.1, 0.9, -0.4], [1.0, -0.5, 0.25]);
        let v = net.vjp(t, &q, &ct).unwrap();
        let eps = 1e-5;
        for idx in 0..net.num_params() {
            let mut e = vec![0.0; net.num_params()];
            e[idx] = 1.0;
            let fp = dot(&ct, &naive_forward(&net.perturbed(&e, eps), t, &q));
            let fm = dot(&ct, &naive_forward(&net.perturbed(&e, -eps), t, &q));
            let fd = (fp - fm) / (2.0 * eps);
            let an = v.param_grad.as_slice()[idx];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-4), "{idx}: {fd} vs {an}");
        }
        // time gradient
        let fp = dot(&ct, &naive_forward(&net, t + eps, &q));
        let fm = dot(&ct, &naive_forward(&net, t - eps, &q));
        assert!(rel_err((fp - fm) / (2.0 * eps), v.time_grad) < 1e-6);
    }

    /// Reverse over forward: gradient of `g(z, d, θ) = ⟨c, J(z)d⟩ + ⟨b, f(z)⟩`.
    #[test]
    fn reverse_over_forward_matches_finite_differences() {
        let net = random_net(&[4, 10, 10, 3], 8, 0.8);
        let t = 0.25;
        let z = [0.4, -0.2, 0.7];
        let d = [0.5, 1.0, -0.3];
        let c = [0.3, -0.8, 1.2];
        let b = [-0.5, 0.1, 0.9];
        let g = |net: &CoefficientNet, z: &[f64], d: &[f64]| {
            dot(&c, &net.jvp(t, z, d).unwrap()) + dot(&b, &net.forward(t, z).unwrap())
        };
        let mut tape = Tape::new(&net);
        net.record(&mut tape, t, &z, &d, 1);
        let mut pg = vec![0.0; net.num_params()];
        net.backprop(&mut tape, &b, &c, Some((&mut pg, 1.0)));
        let eps = 1e-5;
        for j in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += eps;
            zm[j] -= eps;
            let fd = (g(&net, &zp, &d) - g(&net, &zm, &d)) / (2.0 * eps);
            assert!(rel_err(fd, tape.input_adjoint()[1 + j]) < 1e-6);
            let mut dp = d;
            let mut dm = d;
            dp[j] += eps;
            dm[j] -= eps;
            let fd = (g(&net, &z, &dp) - g(&net, &z, &dm)) / (2.0 * eps);
            assert!(rel_err(fd, tape.dir_adjoint(0)[j]) < 1e-6);
        }
        for idx in (0..net.num_params()).step_by(7) {
            let mut e = vec![0.0; net.num_params()];
            e[idx] = 1.0;
            let fd = (g(&net.perturbed(&e, eps), &z, &d) - g(&net.perturbed(&e, -eps), &z, &d))
                / (2.0 * eps);
            assert!((fd - pg[idx]).abs() < 1e-6 * fd.abs().max(1e-3), "{idx}");
        }
    }

    #[test]
    fn record_roundtrip() {
        let net = random_net(&[4, 10, 10, 3], 9, 1.0);
        let back = CoefficientNet::from_record(&net.to_record()).unwrap();
        assert_eq!(back, net);
        let mut rec = net.to_record();
        rec.layers[1].shape = [9, 10];
        assert!(CoefficientNet::from_record(&rec).is_err());
    }

    #[test]
    fn rejects_non_finite_inputs() {
        let net = random_net(&[4, 3], 1, 1.0);
        assert!(net.forward(f64::NAN, &[0.0; 3]).is_err());
        assert!(net.forward(0.0, &[f64::INFINITY, 0.0, 0.0]).is_err());
        assert!(net.jvp(0.0, &[0.0; 3], &[f64::NAN, 0.0, 0.0]).is_err());
        assert!(net.forward(0.0, &[0.0; 2]).is_err());
    }

    #[test]
    fn same_inputs_bit_identical() {
        let net = random_net(&[4, 10, 10, 3], 10, 1.0);
        let a = net.vjp(0.1, &[0.3, 0.2, 0.1], &[1.0, 2.0, 3.0]).unwrap();
        let b = net.vjp(0.1, &[0.3, 0.2, 0.1], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.input_grad, b.input_grad);
        assert_eq!(a.param_grad, b.param_grad);
    }

    proptest! {
        #[test]
        fn jvp_vjp_duality(
            seed in 0u64..1000,
            q in prop::collection::vec(-2.0f64..2.0, 3),
            dq in prop::collection::vec(-1.0f64..1.0, 3),
            ct in prop::collection::vec(-1.0f64..1.0, 3),
            t in -1.0f64..2.0,
        ) {
            let net = random_net(&[4, 10, 10, 3], seed, 1.0);
            let lhs = dot(&ct, &net.jvp(t, &q, &dq).unwrap());
            let rhs = dot(&net.vjp(t, &q, &ct).unwrap().input_grad, &dq);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
        }

        #[test]
        fn outputs_finite_for_bounded_params(
            seed in 0u64..1000,
            q in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let net = random_net(&[4, 10, 10, 3], seed, 1e3);
            prop_assert!(all_finite(&net.forward(0.5, &q).unwrap()));
            prop_assert!(all_finite(&net.jvp(0.5, &q, &[1.0, 1.0, 1.0]).unwrap()));
            let v = net.vjp(0.5, &q, &[1.0, -1.0, 1.0]).unwrap();
            prop_assert!(all_finite(&v.input_grad) && all_finite(v.param_grad.as_slice()));
        }
    }
}
