//! Reverse-KL density matching with Adam.
//!
//! One epoch is one optimizer step on a fresh batch of base samples. The
//! batch gradient is a sum of per-sample gradients collected in sample
//! order, so results do not depend on the size of the worker pool.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{evaluate, mean_and_std_err, mixture_log_density, Estimate, EvalReport, TargetSpec, VmfMixture};
use crate::error::{FlowError, Result};
use crate::field_net::{CoefficientNet, NetRecord, ParamGradient};
use crate::flow::{integrate_backward_adjoint, integrate_forward, IntegratorConfig, ReverseWorkspace};
use crate::geometry::{project_onto_tangent, Manifold, ManifoldPoint, Sphere};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// How per-sample parameter gradients are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// Continuous adjoint, integrated backwards alongside the point.
    Adjoint,
    /// Exact reverse mode through the discrete integrator.
    #[default]
    Discretize,
}

impl FromStr for GradMode {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjoint" => Ok(Self::Adjoint),
            "discretize" => Ok(Self::Discretize),
            other => Err(FlowError::Config(format!(
                "unknown gradient mode `{other}` (expected adjoint or discretize)"
            ))),
        }
    }
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adjoint => "adjoint",
            Self::Discretize => "discretize",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Intrinsic sphere dimension.
    pub n: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps: usize,
    pub grad_mode: GradMode,
    pub seed: u64,
    /// Evaluate KL/ESS and write a checkpoint every this many epochs.
    pub checkpoint_interval: usize,
    pub eval_samples: usize,
    /// Target mixture file; the built-in benchmark for `S^n` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Reductions are always performed in sample order; the flag is kept
    /// for interface compatibility and recorded in the manifest.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 2,
            hidden: vec![10, 10],
            lr: 1e-3,
            batch_size: 256,
            epochs: 10_000,
            steps: 100,
            grad_mode: GradMode::Discretize,
            seed: 0,
            checkpoint_interval: 500,
            eval_samples: 20_000,
            target: None,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("checkpoint_interval", self.checkpoint_interval),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FlowError::Config(format!("`{name}` must be positive")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(FlowError::Config("hidden layer widths must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(FlowError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Parses a TOML config. Keys may sit at the top level or inside any
    /// section; section names are only for grouping.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| FlowError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        let flat = flatten_sections(table, origin)?;
        let cfg: Self = flat.try_into().map_err(|e: toml::de::Error| FlowError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        // relative target paths are relative to the config file
        if let (Some(t), Some(dir)) = (&cfg.target, path.parent()) {
            if t.is_relative() {
                cfg.target = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::with_steps(self.steps)
    }

    pub fn load_target(&self) -> Result<VmfMixture> {
        let target = match &self.target {
            Some(path) => {
                if !path.exists() {
                    return Err(FlowError::Config(format!(
                        "target file {} does not exist",
                        path.display()
                    )));
                }
                TargetSpec::load(path)?.to_mixture()?
            }
            None => VmfMixture::benchmark(self.n)?,
        };
        if target.dim() != self.n + 1 {
            return Err(FlowError::Config(format!(
                "target lives in R^{} but the model is on S^{}",
                target.dim(),
                self.n
            )));
        }
        Ok(target)
    }
}

fn flatten_sections(table: toml::Table, origin: &str) -> Result<toml::Table> {
    let mut flat = toml::Table::new();
    let mut insert = |k: String, v: toml::Value| {
        if flat.contains_key(&k) {
            return Err(FlowError::Parse {
                path: origin.to_string(),
                message: format!("key `{k}` is set more than once"),
            });
        }
        flat.insert(k, v);
        Ok(())
    };
    for (k, v) in table {
        match v {
            toml::Value::Table(section) => {
                for (sk, sv) in section {
                    insert(sk, sv)?;
                }
            }
            other => insert(k, other)?,
        }
    }
    Ok(flat)
}

/// Bias-corrected Adam state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }
}

pub fn adam_step(state: &mut AdamState, net: &mut CoefficientNet, grad: &ParamGradient, lr: f64) -> Result<()> {
    let len = net.num_params();
    if grad.len() != len || state.m.len() != len || state.v.len() != len {
        return Err(FlowError::Shape {
            expected: len,
            got: grad.len(),
        });
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powf(state.step as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(state.step as f64);
    for (((p, g), m), v) in net
        .params_mut()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Per-sample reverse-KL term and its parameter gradient, both scaled by
/// `weight`.
#[allow(clippy::too_many_arguments)]
fn sample_loss_and_grad(
    net: &CoefficientNet,
    target: &VmfMixture,
    log_base: f64,
    q0: &ManifoldPoint,
    cfg: &IntegratorConfig,
    mode: GradMode,
    weight: f64,
    ws: &mut ReverseWorkspace,
) -> Result<(f64, ParamGradient)> {
    let fwd = match mode {
        GradMode::Discretize => ws.forward(net, q0, cfg)?,
        GradMode::Adjoint => integrate_forward(net, q0, cfg)?,
    };
    let x = &fwd.q1;
    let loss = log_base + fwd.delta_log_density - mixture_log_density(target, x)?;
    let mut g = project_onto_tangent(x.coords(), &target.grad_log_density(x.coords()));
    g.iter_mut().for_each(|v| *v *= -weight);
    let back = match mode {
        GradMode::Discretize => ws.backprop(net, &g, weight)?,
        GradMode::Adjoint => integrate_backward_adjoint(net, x, &g, weight, cfg)?,
    };
    Ok((weight * loss, back.param_grad))
}

/// Reverse-KL loss `(1/B) Σ_j [log q(x_j) - log p(x_j)]` over the flowed
/// base points, with its parameter gradient.
pub fn batch_loss_and_grad(
    net: &CoefficientNet,
    target: &VmfMixture,
    base_points: &[ManifoldPoint],
    cfg: &IntegratorConfig,
    mode: GradMode,
) -> Result<(f64, ParamGradient)> {
    if base_points.is_empty() {
        return Err(FlowError::Config("batch must not be empty".into()));
    }
    let sphere = Sphere::new(net.output_dim() - 1)?;
    let log_base = sphere.log_base_density();
    let weight = 1.0 / base_points.len() as f64;
    let parts = base_points
        .par_iter()
        .map_init(ReverseWorkspace::default, |ws, q0| {
            sample_loss_and_grad(net, target, log_base, q0, cfg, mode, weight, ws)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grad = ParamGradient::zeros_like(net);
    for (l, g) in &parts {
        loss += l;
        grad.add_scaled(1.0, g);
    }
    Ok((loss, grad))
}

/// Draws a fresh batch from `rng` and evaluates [`batch_loss_and_grad`].
pub fn loss_and_grad<R: Rng + ?Sized>(
    net: &CoefficientNet,
    target: &VmfMixture,
    batch_size: usize,
    cfg: &IntegratorConfig,
    mode: GradMode,
    rng: &mut R,
) -> Result<(f64, ParamGradient)> {
    let sphere = Sphere::new(net.output_dim() - 1)?;
    let points = sphere.sample_base(rng, batch_size);
    batch_loss_and_grad(net, target, &points, cfg, mode)
}

/// Monte Carlo loss without gradients, with its standard error.
pub fn loss_estimate<R: Rng + ?Sized>(
    net: &CoefficientNet,
    target: &VmfMixture,
    n_samples: usize,
    cfg: &IntegratorConfig,
    rng: &mut R,
) -> Result<Estimate> {
    let sphere = Sphere::new(net.output_dim() - 1)?;
    let points = sphere.sample_base(rng, n_samples);
    let samples = crate::density::push_forward(net, &sphere, cfg, &points)?;
    let diffs = samples
        .iter()
        .map(|s| Ok(s.log_q - mixture_log_density(target, &s.x)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_std_err(&diffs))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Number of optimizer steps taken so far.
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub eval: Option<EvalReport>,
}

pub const METRICS_HEADER: &str = "epoch,loss,wall_ms,kl,kl_se,ess";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let (kl, se, ess) = match &self.eval {
            Some(e) => (
                e.kl_nats.to_string(),
                e.kl_std_err.to_string(),
                e.ess_percent.to_string(),
            ),
            None => Default::default(),
        };
        format!("{},{},{:.3},{kl},{se},{ess}", self.epoch, self.loss, self.wall_ms)
    }
}

pub const CHECKPOINT_FORMAT: &str = "sphereflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub net: NetRecord,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| FlowError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        let format = value.get("format").and_then(|v| v.as_str());
        let version = value.get("version").and_then(|v| v.as_u64());
        if format != Some(CHECKPOINT_FORMAT) || version != Some(CHECKPOINT_VERSION as u64) {
            return Err(FlowError::Config(format!(
                "{origin}: expected a {CHECKPOINT_FORMAT} file of version {CHECKPOINT_VERSION}, found {:?} version {:?}",
                format, version
            )));
        }
        serde_json::from_value(value).map_err(|e| FlowError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn net(&self) -> Result<CoefficientNet> {
        CoefficientNet::from_record(&self.net)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| FlowError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Optimizer state plus the batch RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    target: VmfMixture,
    net: CoefficientNet,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let target = cfg.load_target()?;
        let net = CoefficientNet::for_sphere(cfg.n, &cfg.hidden, cfg.seed)?;
        let adam = AdamState::new(net.num_params());
        // batch draws use a stream separate from the weight initialization
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7463_6865_7321);
        Ok(Self {
            cfg,
            target,
            net,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let target = ckpt.config.load_target()?;
        let net = ckpt.net()?;
        if net.output_dim() != ckpt.config.n + 1 || ckpt.adam.m.len() != net.num_params() {
            return Err(FlowError::Config("checkpoint parts are inconsistent".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_word_pos(ckpt.rng.word_pos);
        Ok(Self {
            cfg: ckpt.config.clone(),
            target,
            net,
            adam: ckpt.adam.clone(),
            rng,
            epoch: ckpt.epoch,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Raises the epoch budget, e.g. when resuming with a larger target.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.cfg.epochs = epochs;
    }

    pub fn net(&self) -> &CoefficientNet {
        &self.net
    }

    pub fn target(&self) -> &VmfMixture {
        &self.target
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            epoch: self.epoch,
            net: self.net.to_record(),
            adam: self.adam.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    /// KL/ESS on the held-out evaluation budget. The evaluation seed is
    /// fixed per run so successive reports are comparable.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(
            &self.net,
            &self.target,
            &self.cfg.integrator(),
            self.cfg.eval_samples,
            self.cfg.seed.wrapping_add(0x5eed),
        )
    }

    fn is_eval_epoch(&self) -> bool {
        self.epoch.is_multiple_of(self.cfg.checkpoint_interval) || self.epoch == self.cfg.epochs
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let (loss, grad) = loss_and_grad(
            &self.net,
            &self.target,
            self.cfg.batch_size,
            &self.cfg.integrator(),
            self.cfg.grad_mode,
            &mut self.rng,
        )?;
        if !loss.is_finite() || !grad.as_slice().iter().all(|g| g.is_finite()) {
            return Err(FlowError::Numeric(format!(
                "non-finite loss or gradient at epoch {}",
                self.epoch + 1
            )));
        }
        adam_step(&mut self.adam, &mut self.net, &grad, self.cfg.lr)?;
        self.epoch += 1;
        let eval = if self.is_eval_epoch() {
            Some(self.evaluate()?)
        } else {
            None
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            eval,
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord, &Self) -> Result<()>) -> Result<Vec<EpochRecord>> {
        let mut history = Vec::new();
        while !self.is_done() {
            let rec = self.step()?;
            on_epoch(&rec, self)?;
            history.push(rec);
        }
        Ok(history)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: CoefficientNet,
    pub history: Vec<EpochRecord>,
}

/// Trains from scratch without touching the filesystem.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let history = trainer.run(|_, _| Ok(()))?;
    Ok(TrainOutcome {
        net: trainer.net.clone(),
        history,
    })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Runs `trainer` to completion, appending to `out/metrics.csv` and
/// refreshing `out/checkpoint.json` on evaluation epochs. A fresh run
/// (epoch 0) starts a new metrics file; a resumed run drops rows past its
/// epoch before appending.
pub fn train_to_dir(trainer: &mut Trainer, out: &Path) -> Result<Vec<EpochRecord>> {
    std::fs::create_dir_all(out).map_err(|source| FlowError::Io {
        path: out.display().to_string(),
        source,
    })?;
    let metrics_path = out.join(METRICS_FILE);
    let mut kept = vec![METRICS_HEADER.to_string()];
    if trainer.epoch() > 0 {
        if let Ok(text) = std::fs::read_to_string(&metrics_path) {
            kept.extend(text.lines().skip(1).filter(|line| {
                line.split(',')
                    .next()
                    .and_then(|e| e.parse::<usize>().ok())
                    .is_some_and(|e| e <= trainer.epoch())
            }).map(str::to_string));
        }
    }
    write_file(&metrics_path, (kept.join("\n") + "\n").as_bytes())?;
    let io_err = |source| FlowError::Io {
        path: metrics_path.display().to_string(),
        source,
    };
    let mut metrics = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(io_err)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    if trainer.is_done() {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    trainer.run(|rec, t| {
        writeln!(metrics, "{}", rec.csv_row()).map_err(io_err)?;
        if rec.eval.is_some() {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })
}
