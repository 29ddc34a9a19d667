//! Subcommand implementations. Each takes a fully merged config and writes
//! its outputs to disk.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::json;

use gantrack::baselines::{
    horizon_table, pnet_train, CamModel, GmrConfig, GmrModel, GmrPolicy, PerturbedNet, PnetConfig, PnetKind,
    PnetTrainConfig, MODEL_COLUMNS,
};
use gantrack::checkpoint::Container;
use gantrack::dataio::{export_smoothed, ingest_csv, smooth, KalmanConfig};
use gantrack::dataset::{constant_acceleration_dataset, SystemKind, TrajectoryDataset};
use gantrack::evalsuite::{
    evaluate_distribution, export_mae_curve, export_rollouts, export_violin_data, DistributionConfig,
};
use gantrack::features::{ConditionEncoding, Normalizer, WindowBatch};
use gantrack::gameopt::{self, GameError, LogWriter, OptimizerConfig};
use gantrack::lvsys::{sample_dataset, SamplingRanges};
use gantrack::mixtracker::{open_loop_means, summarize, track, MeasurementModel, TrackerConfig};
use gantrack::nets::{GanModel, NetConfig, TrainingMeta};
use gantrack::par::{derive_rng, Execution};
use gantrack::policy::{ActionModel, LvOracle};

use crate::config::{BaselineConfig, EvalConfig, GenDataConfig, SmoothConfig, TrackConfig, TrainConfig};

pub const SWEEP_GAMMAS: [f64; 3] = [0.0, 0.33, 1.0];

/// Failure of a subcommand; usage errors exit with 1, the rest with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => {
                // causes already quoted by their parent are skipped
                let mut shown = e.to_string();
                write!(f, "{shown}")?;
                for cause in e.chain().skip(1) {
                    let text = cause.to_string();
                    if !shown.contains(&text) {
                        write!(f, ": {text}")?;
                        shown = text;
                    }
                }
                Ok(())
            }
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<TrajectoryDataset, CliError> {
    Ok(TrajectoryDataset::load(path).with_context(|| format!("cannot load dataset {}", path.display()))?)
}

fn load_gan(path: &Path) -> Result<GanModel, CliError> {
    Ok(GanModel::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

pub fn gen_data(cfg: &GenDataConfig) -> Result<(), CliError> {
    let ranges = SamplingRanges {
        param: (cfg.param_min, cfg.param_max),
        initial: (cfg.initial_min, cfg.initial_max),
    };
    ranges.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.cases == 0 || cfg.horizon_steps == 0 || !(cfg.dt > 0.0) {
        return Err(usage("cases and horizon_steps must be positive and dt > 0"));
    }
    let dataset = match cfg.system {
        SystemKind::LotkaVolterra => sample_dataset(
            cfg.cases,
            cfg.seed,
            &ranges,
            cfg.dt,
            cfg.history_steps,
            cfg.horizon_steps,
            Execution::default(),
        )?,
        SystemKind::ConstantAcceleration => {
            constant_acceleration_dataset(cfg.cases, cfg.seed, cfg.dt, cfg.history_steps, cfg.horizon_steps)?
        }
    };
    ensure_parent(&cfg.out)?;
    dataset.save(&cfg.out)?;
    let manifest = json!({
        "format": "gantrack-manifest",
        "version": 1,
        "command": "gen-data",
        "dataset": cfg.out.file_name().map(|f| f.to_string_lossy().into_owned()),
        "cases": dataset.cases.len(),
        "pairs": dataset.pairs.len(),
        "config": cfg,
    });
    write_json(&manifest_path(&cfg.out), &manifest)?;
    log::info!("wrote {} cases ({} pairs) to {}", dataset.cases.len(), dataset.pairs.len(), cfg.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    gamma: f64,
    initial_val_mae: f64,
    final_val_mae: f64,
    log_rows: usize,
    diverged_at: Option<usize>,
}

pub fn curve_name(gamma: f64) -> String {
    format!("curve_gamma_{gamma:.2}.csv")
}

pub fn train(cfg: &TrainConfig) -> Result<(), CliError> {
    if cfg.iterations == 0 || cfg.batch_size == 0 || cfg.log_every == 0 || cfg.validation_size == 0 {
        return Err(usage("iterations, batch_size, log_every and validation_size must be positive"));
    }
    let optimizer = OptimizerConfig {
        alpha: cfg.alpha,
        gamma: cfg.gamma,
        rho: cfg.rho,
        eps: cfg.eps,
        preconditioning: cfg.preconditioning,
    };
    optimizer.validate().map_err(|e| usage(e.to_string()))?;
    let dataset = load_dataset(&cfg.dataset)?;
    let all = dataset.all_pairs();
    if cfg.validation_size >= all.len() {
        return Err(usage(format!(
            "validation_size {} leaves no training pairs out of {}",
            cfg.validation_size,
            all.len()
        )));
    }
    let (train_pairs, val) = all.split_holdout(cfg.validation_size, &mut derive_rng(cfg.seed, &[9]));
    let normalizer = Normalizer::fit(&train_pairs, cfg.encoding);
    let net = NetConfig {
        cond_dim: normalizer.cond_dim(),
        action_dim: dataset.state_dim,
        profile: cfg.profile.profile(),
        noise: cfg.noise,
    };
    ensure_dir(&cfg.out_dir)?;
    let gammas: Vec<f64> = if cfg.sweep { SWEEP_GAMMAS.to_vec() } else { vec![cfg.gamma] };
    let mut runs = Vec::new();
    for &gamma in &gammas {
        let dir = if cfg.sweep {
            cfg.out_dir.join(format!("gamma_{gamma:.2}"))
        } else {
            cfg.out_dir.clone()
        };
        ensure_dir(&dir)?;
        let meta = TrainingMeta {
            iteration: 0,
            gamma,
            alpha: cfg.alpha,
            seed: cfg.seed,
            dt: dataset.dt,
            history_steps: dataset.history_steps,
        };
        let mut model = GanModel::init(net, normalizer.clone(), meta);
        model.profile_name = Some(cfg.profile);
        let ckpt = dir.join("model.ckpt");
        model.save(&ckpt)?;
        let mut writer = LogWriter::create(&dir.join("log.csv"))?;
        let tc = gameopt::TrainConfig {
            iterations: cfg.iterations,
            batch_size: cfg.batch_size,
            log_every: cfg.log_every,
            validation_size: cfg.validation_size,
            divergence_threshold: cfg.divergence_threshold,
            seed: cfg.seed,
            optimizer: OptimizerConfig { gamma, ..optimizer },
        };
        log::info!("training gamma = {gamma:.2} for {} iterations", cfg.iterations);
        let log = gameopt::train(&mut model, &train_pairs, &val, &tc, |m, rec| {
            writer.append(rec)?;
            m.save(&ckpt).map_err(GameError::from)
        })?;
        let curve = if cfg.sweep {
            cfg.out_dir.join(curve_name(gamma))
        } else {
            cfg.out_dir.join("curve.csv")
        };
        export_mae_curve(&log, &curve)?;
        runs.push(RunSummary {
            gamma,
            initial_val_mae: log.initial_val_mae,
            final_val_mae: log.final_val_mae(),
            log_rows: log.records.len(),
            diverged_at: log.diverged_at,
        });
        if let Some(it) = log.diverged_at {
            write_json(&cfg.out_dir.join("train_summary.json"), &json!({ "runs": runs, "config": cfg }))?;
            return Err(CliError::Runtime(anyhow::anyhow!(
                "training with gamma = {gamma:.2} diverged at iteration {it}; the last checkpoint is {}",
                ckpt.display()
            )));
        }
    }
    write_json(
        &cfg.out_dir.join("train_summary.json"),
        &json!({ "format": "gantrack-train-summary", "version": 1, "runs": runs, "config": cfg }),
    )?;
    Ok(())
}

fn run_distribution<F, M>(cfg: &EvalConfig, make_model: F, source: &str) -> Result<(), CliError>
where
    F: Fn(&gantrack::lvsys::LvParams) -> M + Sync,
    M: ActionModel,
{
    let dcfg = DistributionConfig {
        m: cfg.m,
        n: cfg.n,
        horizon: cfg.horizon,
        history_steps: cfg.history_steps,
        dt: cfg.dt,
        seed: cfg.seed,
        pool: cfg.pool,
        ranges: SamplingRanges {
            param: (cfg.param_min, cfg.param_max),
            initial: (cfg.initial_min, cfg.initial_max),
        },
    };
    let report = evaluate_distribution(make_model, &dcfg, Execution::default())?;
    ensure_dir(&cfg.out_dir)?;
    export_violin_data(&report.summaries, &cfg.out_dir.join("violin.csv"))?;
    export_rollouts(&report.rollouts, &cfg.out_dir.join("rollouts.csv"))?;
    write_json(
        &cfg.out_dir.join("summary.json"),
        &json!({
            "format": "gantrack-eval-summary",
            "version": 1,
            "model": source,
            "m": cfg.m,
            "n": cfg.n,
            "horizon": cfg.horizon,
            "seed": cfg.seed,
            "pool": cfg.pool,
            "variables": report.summaries,
        }),
    )?;
    for s in &report.summaries {
        log::info!(
            "{}: predicted mean {:.4}, true mean {:.4}, W1 {:.4}",
            s.variable,
            s.predicted.mean,
            s.truth.mean,
            s.wasserstein1
        );
    }
    Ok(())
}

pub fn eval(cfg: &EvalConfig) -> Result<(), CliError> {
    if cfg.m == 0 || cfg.n == 0 || cfg.horizon == 0 {
        return Err(usage("m, n and horizon must be positive"));
    }
    let ranges = SamplingRanges {
        param: (cfg.param_min, cfg.param_max),
        initial: (cfg.initial_min, cfg.initial_max),
    };
    ranges.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.oracle {
        let dt = cfg.dt;
        return run_distribution(cfg, |p| LvOracle { params: *p, dt }, "oracle");
    }
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("eval needs --checkpoint unless --oracle is given"))?;
    let model = load_gan(path)?;
    if let Some(expected) = cfg.profile {
        if model.profile_name != Some(expected) {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "checkpoint {} holds a {} network, not {expected}",
                path.display(),
                model.profile_name.map_or("custom".to_string(), |p| p.to_string())
            )));
        }
    }
    if model.meta.history_steps != cfg.history_steps || model.meta.dt != cfg.dt {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "checkpoint was trained with history_steps {} and dt {}, but eval uses {} and {}",
            model.meta.history_steps,
            model.meta.dt,
            cfg.history_steps,
            cfg.dt
        )));
    }
    run_distribution(cfg, |_| &model, "gan")
}

pub fn track_case(cfg: &TrackConfig) -> Result<(), CliError> {
    if cfg.particles == 0 || cfg.components == 0 || cfg.steps == 0 {
        return Err(usage("particles, components and steps must be positive"));
    }
    if !(cfg.sigma > 0.0) {
        return Err(usage("sigma must be positive"));
    }
    let model = load_gan(&cfg.checkpoint)?;
    let dataset = load_dataset(&cfg.dataset)?;
    if dataset.history_steps != model.meta.history_steps {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "dataset uses history_steps {} but the checkpoint expects {}",
            dataset.history_steps,
            model.meta.history_steps
        )));
    }
    let ci = cfg.case.unwrap_or(dataset.cases.len().saturating_sub(1));
    let case = dataset
        .cases
        .get(ci)
        .ok_or_else(|| usage(format!("case {ci} is out of range (dataset has {})", dataset.cases.len())))?;
    let th = dataset.history_steps;
    if case.trajectory.len() < th + cfg.steps + 1 {
        return Err(usage(format!(
            "case {ci} has {} states; history {th} plus {} steps needs {}",
            case.trajectory.len(),
            cfg.steps,
            th + cfg.steps + 1
        )));
    }
    let history = case.trajectory[..=th].to_vec();
    let truth = case.trajectory[th..=th + cfg.steps].to_vec();
    let noise = Normal::new(0.0, cfg.sigma)?;
    let mut rng = derive_rng(cfg.seed, &[0x6d65_6173]);
    let measurements: Vec<Vec<f64>> = truth[1..]
        .iter()
        .map(|s| s.iter().map(|v| v + noise.sample(&mut rng)).collect())
        .collect();
    let windows = vec![history; cfg.components];
    let tcfg = TrackerConfig {
        particles: cfg.particles,
        ess_threshold: cfg.ess_threshold,
        init_noise: cfg.init_noise,
        seed: cfg.seed,
        keep_clouds: false,
    };
    tcfg.validate().map_err(|e| usage(e.to_string()))?;
    let meas = MeasurementModel::isotropic(dataset.state_dim, cfg.sigma)?;
    let exec = Execution::default();
    let estimates = track(&model, &windows, &measurements, &meas, &tcfg, exec)?;
    let open = open_loop_means(&model, &windows, cfg.steps, &tcfg, exec)?;
    let summary = summarize(&estimates, &open, &truth, cfg.particles)?;

    ensure_dir(&cfg.out_dir)?;
    let names: Vec<String> = if dataset.state_dim == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (0..dataset.state_dim).map(|j| format!("s{j}")).collect()
    };
    let mut header = vec!["step".to_string()];
    for prefix in ["z", "mean", "truth", "open_loop", "cloud_std"] {
        header.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    header.push("resampled".into());
    let path = cfg.out_dir.join("track.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(&header)?;
    for (k, e) in estimates.iter().enumerate() {
        let mut row = vec![e.step.to_string()];
        for v in [&measurements[k], &e.mean, &truth[k + 1], &open[k], &e.cloud_std] {
            row.extend(v.iter().map(|x| x.to_string()));
        }
        row.push(e.resampled.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    write_json(
        &cfg.out_dir.join("summary.json"),
        &json!({
            "format": "gantrack-track-summary",
            "version": 1,
            "case": ci,
            "components": cfg.components,
            "sigma": cfg.sigma,
            "seed": cfg.seed,
            "steps": summary.steps,
            "particles": summary.particles,
            "tracking_rmse": summary.tracking_rmse,
            "open_loop_rmse": summary.open_loop_rmse,
            "max_band_ratio": summary.max_band_ratio,
        }),
    )?;
    log::info!(
        "tracking RMSE {:.5}, open-loop RMSE {:.5}",
        summary.tracking_rmse,
        summary.open_loop_rmse
    );
    Ok(())
}

fn train_pnet(
    kind: PnetKind,
    cfg: &BaselineConfig,
    normalizer: &Normalizer,
    window_len: usize,
    pairs: &gantrack::dataset::PairSet,
) -> Result<PerturbedNet, CliError> {
    let pc = PnetConfig {
        kind,
        layers: cfg.pnet_layers,
        width: cfg.pnet_width,
        sigma_in: cfg.pnet_sigma,
    };
    let mut net = PerturbedNet::new(pc, normalizer.clone(), window_len, cfg.seed)?;
    let tc = PnetTrainConfig {
        iterations: cfg.pnet_iterations,
        alpha: cfg.pnet_alpha,
        seed: cfg.seed,
        ..Default::default()
    };
    let losses = pnet_train(&mut net, pairs, &tc)?;
    log::info!("{kind:?} final training loss {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    Ok(net)
}

pub fn baseline(cfg: &BaselineConfig) -> Result<(), CliError> {
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(usage("test_fraction must lie in (0, 1)"));
    }
    if cfg.horizons.is_empty() {
        return Err(usage("at least one horizon is needed"));
    }
    let dataset = load_dataset(&cfg.dataset)?;
    let gan = load_gan(&cfg.gan_checkpoint)?;
    let (train_cases, test_cases) = dataset.split_cases(1.0 - cfg.test_fraction);
    if test_cases.is_empty() {
        return Err(usage("the test split is empty; use more cases or a larger test_fraction"));
    }
    let train_pairs = dataset.pairs_for_cases(&train_cases);
    let normalizer = Normalizer::fit(&train_pairs, ConditionEncoding::StatesAndIncrements);
    let window_len = dataset.window_len();
    ensure_dir(&cfg.out_dir)?;

    let gmr = match &cfg.gmr_checkpoint {
        Some(p) => GmrPolicy::from_container(&Container::load(p)?)?,
        None => {
            let inputs = GmrPolicy::inputs(&normalizer, &WindowBatch::from_pairs(&train_pairs));
            let outputs = normalizer.encode_actions(&train_pairs.actions);
            let input_dim = inputs.first().map_or(0, Vec::len);
            let data: Vec<Vec<f64>> = inputs
                .into_iter()
                .enumerate()
                .map(|(i, mut x)| {
                    x.extend_from_slice(outputs.row(i));
                    x
                })
                .collect();
            let gc = GmrConfig {
                components: cfg.gmr_components,
                ridge: cfg.gmr_ridge,
                max_iter: cfg.gmr_max_iter,
                seed: cfg.seed,
                ..Default::default()
            };
            let (model, trace) = GmrModel::fit(&data, input_dim, &gc)?;
            log::info!("GMR fitted in {} EM iterations", trace.objective.len());
            let policy = GmrPolicy::new(model, normalizer.clone(), window_len)?;
            policy.to_container().save(&cfg.out_dir.join("gmr.ckpt"))?;
            policy
        }
    };
    let mut nets = Vec::new();
    for (kind, given, name) in [
        (PnetKind::Mlp, &cfg.p_mlp_checkpoint, "p_mlp.ckpt"),
        (PnetKind::Lstm, &cfg.p_lstm_checkpoint, "p_lstm.ckpt"),
    ] {
        let net = match given {
            Some(p) => PerturbedNet::from_container(&Container::load(p)?)?,
            None => {
                let net = train_pnet(kind, cfg, &normalizer, window_len, &train_pairs)?;
                net.to_container().save(&cfg.out_dir.join(name))?;
                net
            }
        };
        nets.push(net);
    }
    let cam = CamModel { dim: dataset.state_dim };
    let models: [&dyn ActionModel; 5] = [&gan, &gmr, &nets[0], &nets[1], &cam];
    let named: Vec<(&str, &dyn ActionModel)> = MODEL_COLUMNS.iter().copied().zip(models).collect();
    let table = horizon_table(&named, &dataset, &test_cases, &cfg.horizons, cfg.steps_per_second, cfg.seed)?;
    table.to_csv(&cfg.out_dir.join("table.csv"))?;
    write_json(&cfg.out_dir.join("table.json"), &table)?;
    Ok(())
}

pub fn smooth_tracks(cfg: &SmoothConfig) -> Result<(), CliError> {
    let kc = KalmanConfig {
        jerk_density: cfg.jerk_density,
        position_var: cfg.position_var,
        velocity_var: cfg.velocity_var,
        initial_var: cfg.initial_var,
    };
    kc.validate().map_err(|e| usage(e.to_string()))?;
    let tracks = ingest_csv(&cfg.input)?;
    let smoothed = smooth(&tracks, &kc)?;
    ensure_parent(&cfg.output)?;
    export_smoothed(&smoothed, &cfg.output)?;
    log::info!("smoothed {} agents into {}", smoothed.len(), cfg.output.display());
    Ok(())
}
