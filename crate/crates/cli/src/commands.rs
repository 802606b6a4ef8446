use std::io::Write;
use std::path::{Path, PathBuf};

use sphereflow::density::{density_grid, evaluate, sample_model, EvalReport, TargetSpec, VmfMixture};
use sphereflow::diagnostics::{run_checks, Scope};
use sphereflow::flow::IntegratorConfig;
use sphereflow::trainer::{train_to_dir, Checkpoint, TrainConfig, Trainer};
use sphereflow::{CoefficientNet, FlowError, Result, Sphere};

use crate::manifest::{now, params_hash, RunManifest};
use crate::Common;

const DEFAULT_RUN_DIR: &str = "sphereflow-run";

pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| FlowError::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FlowError + '_ {
    move |source| FlowError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Config file (or defaults) with command-line overrides applied.
pub fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(FlowError::Config(format!("config file {} does not exist", path.display())));
            }
            TrainConfig::load(path)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        cfg.epochs = epochs;
    }
    if let Some(steps) = common.steps {
        cfg.steps = steps;
    }
    if let Some(mode) = &common.grad_mode {
        cfg.grad_mode = mode.parse()?;
    }
    if let Some(target) = &common.target {
        cfg.target = Some(target.clone());
    }
    cfg.deterministic |= common.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let (mut trainer, out) = match resume {
        Some(path) => {
            if common.seed.is_some() || common.steps.is_some() || common.grad_mode.is_some() || common.target.is_some() {
                return Err(FlowError::Config(
                    "only --epochs may be changed when resuming a run".into(),
                ));
            }
            let ckpt = Checkpoint::load(path)?;
            let mut trainer = Trainer::from_checkpoint(&ckpt)?;
            if let Some(epochs) = common.epochs {
                trainer.set_epochs(epochs);
            }
            let out = common
                .out
                .clone()
                .or_else(|| path.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
            (trainer, out)
        }
        None => {
            let cfg = train_config(common)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
            (Trainer::new(cfg)?, out)
        }
    };
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: trainer.config().clone(),
        seed: trainer.config().seed,
        deterministic: trainer.config().deterministic,
        threads: rayon::current_num_threads(),
        resumed_from: resume.map(Path::to_path_buf),
        epochs_completed: trainer.epoch(),
        params_hash: params_hash(trainer.net().params()),
        started_at: now(),
        finished_at: None,
        final_eval: None,
    };
    manifest.save(&out)?;

    let history = train_to_dir(&mut trainer, &out)?;
    let report = match history.last().and_then(|r| r.eval.clone()) {
        Some(r) => r,
        None => trainer.evaluate()?,
    };
    manifest.epochs_completed = trainer.epoch();
    manifest.params_hash = params_hash(trainer.net().params());
    manifest.finished_at = Some(now());
    manifest.final_eval = Some(report.clone());
    manifest.save(&out)?;
    println!(
        "epoch {}: KL {:.4} ± {:.4} nats, ESS {:.1}%  ({})",
        trainer.epoch(),
        report.kl_nats,
        report.kl_std_err,
        report.ess_percent,
        out.display()
    );
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    net: CoefficientNet,
    integrator: IntegratorConfig,
}

fn load_checkpoint(common: &Common, path: &Path) -> Result<Loaded> {
    if !path.exists() {
        return Err(FlowError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let net = ckpt.net()?;
    let steps = common.steps.unwrap_or(ckpt.config.steps);
    let integrator = IntegratorConfig::with_steps(steps);
    integrator.validate()?;
    Ok(Loaded { ckpt, net, integrator })
}

/// Writes to `--out` when given, otherwise to stdout.
fn emit(common: &Common, text: &str) -> Result<()> {
    match &common.out {
        Some(path) => std::fs::write(path, text).map_err(io_err(path)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

pub fn eval(common: &Common, checkpoint: &Path, samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(FlowError::Config("--samples must be positive".into()));
    }
    let loaded = load_checkpoint(common, checkpoint)?;
    let target: VmfMixture = match &common.target {
        Some(path) => {
            if !path.exists() {
                return Err(FlowError::Config(format!("target file {} does not exist", path.display())));
            }
            TargetSpec::load(path)?.to_mixture()?
        }
        None => loaded.ckpt.config.load_target()?,
    };
    if target.dim() != loaded.net.output_dim() {
        return Err(FlowError::Config(format!(
            "target lives in R^{} but the checkpoint models S^{}",
            target.dim(),
            loaded.net.output_dim() - 1
        )));
    }
    let report: EvalReport = evaluate(&loaded.net, &target, &loaded.integrator, samples, common.seed.unwrap_or(0))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    eprintln!(
        "KL {:.5} ± {:.5} nats, ESS {:.2}% ({} samples)",
        report.kl_nats, report.kl_std_err, report.ess_percent, report.n_samples
    );
    emit(common, &(json + "\n"))
}

pub fn sample(common: &Common, checkpoint: &Path, count: usize) -> Result<()> {
    let loaded = load_checkpoint(common, checkpoint)?;
    let n = loaded.net.output_dim() - 1;
    let samples = sample_model(
        &loaded.net,
        &Sphere::new(n)?,
        &loaded.integrator,
        count,
        common.seed.unwrap_or(0),
    )?;
    let mut text = (0..=n).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    text.push_str(",log_q\n");
    for s in &samples {
        for x in s.x.coords() {
            text.push_str(&format!("{x},"));
        }
        text.push_str(&format!("{}\n", s.log_q));
    }
    emit(common, &text)
}

pub fn grid(common: &Common, checkpoint: &Path, n_lat: usize, n_lon: usize) -> Result<()> {
    let loaded = load_checkpoint(common, checkpoint)?;
    let grid = density_grid(&loaded.net, n_lat, n_lon, &loaded.integrator)?;
    let mut text = String::from("theta,phi,log_density\n");
    for (theta, phi, ld) in &grid.cells {
        text.push_str(&format!("{theta},{phi},{ld}\n"));
    }
    emit(common, &text)
}

pub fn check(common: &Common, scope: &str) -> Result<()> {
    let scope: Scope = scope.parse()?;
    let results = run_checks(scope, common.seed.unwrap_or(0))?;
    let mut report = String::new();
    for r in &results {
        report.push_str(&format!("{r}\n"));
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    print!("{report}");
    if let Some(path) = &common.out {
        std::fs::write(path, &report).map_err(io_err(path))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(FlowError::Numeric(format!("failed checks: {}", failed.join(", "))))
    }
}
