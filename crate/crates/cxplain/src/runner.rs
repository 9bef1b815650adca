//! Command implementations behind the CLI.
//!
//! Every command validates its configuration first, writes the effective
//! configuration into the run directory, and emits deterministic result
//! files. Timestamps go to `run.log` and wall-clock durations to
//! `timings.csv`; every other output is byte-identical across reruns of
//! the same configuration.

use crate::blackbox::BlackBoxModel;
use crate::config::{
    DatasetSpec, GroupingSpec, LabelFormat, MaskingSpec, RunConfig, TargetModelSpec,
};
use crate::data::{FeatureMatrix, TargetMatrix};
use crate::datasets::{
    self, filter_classes, gen_additive_logit, gen_patch_images, gen_single_informative, load_csv,
    load_idx, ImageLayout, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    delta_log_odds_sample, random_attributions, uncertainty_correlation_benchmark, ConfidenceRule,
    EvalReport, MethodResult, PairwiseTest, UncertaintyBenchmarkConfig,
};
use crate::explainer::{load_explainer, save_explainer, train_explainer, ExplainerModel};
use crate::loss::LossFunction;
use crate::masking::{FeatureGrouping, MaskingStrategy};
use crate::models::{analytic_model, train_builtin_classifier, ExternalModelBridge};
use crate::targets::{
    load_omega_csv, load_omega_metadata, precompute_targets, save_omega_csv, save_omega_metadata,
    OmegaMatrix, OmegaMetadata, PrecomputedTargets, TargetConfig, OMEGA_SCHEMA_VERSION,
};
use crate::uncertainty::{save_ensemble, train_ensemble};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "run.log";
pub const OMEGA_FILE: &str = "omega.csv";
pub const OMEGA_META_FILE: &str = "omega_meta.json";
pub const EXPLAINER_FILE: &str = "explainer.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const ENSEMBLE_DIR: &str = "ensemble";
pub const INTERVALS_FILE: &str = "intervals.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const TIMINGS_FILE: &str = "timings.csv";

/// Environment variable consulted for the worker-thread cap when neither
/// the flag nor the configuration sets one.
pub const THREADS_ENV_VAR: &str = "CXPLAIN_THREADS";

/// Thread cap precedence: command-line flag, then configuration, then the
/// environment variable. `None` leaves the pool at its default size.
pub fn resolve_threads(
    flag: Option<usize>,
    config_threads: Option<usize>,
) -> Result<Option<usize>> {
    if let Some(t) = flag.or(config_threads) {
        if t == 0 {
            return Err(Error::Config("thread cap must be at least 1".into()));
        }
        return Ok(Some(t));
    }
    match std::env::var(THREADS_ENV_VAR) {
        Ok(raw) => {
            let t: usize = raw.parse().map_err(|_| {
                Error::Config(format!("{THREADS_ENV_VAR}='{raw}' is not a thread count"))
            })?;
            if t == 0 {
                return Err(Error::Config(format!(
                    "{THREADS_ENV_VAR} must be at least 1"
                )));
            }
            Ok(Some(t))
        }
        Err(_) => Ok(None),
    }
}

/// Appends timestamped progress lines to `run.log` and mirrors them to
/// stderr. Logging failures never fail the run.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn new(run_dir: &Path) -> Self {
        Self {
            path: run_dir.join(LOG_FILE),
        }
    }

    pub fn say(&self, message: &str) {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        eprintln!("{message}");
        if let Ok(mut f) = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
        {
            let _ = writeln!(f, "[{stamp}] {message}");
        }
    }
}

/// Creates the run directory and records the effective configuration.
fn ensure_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("configuration does not serialize: {e}")))?;
    let path = cfg.output_dir.join(CONFIG_FILE);
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(cfg.output_dir.clone())
}

/// Dataset resolved into train/test partitions with presentation-ready
/// labels.
struct PreparedData {
    train_x: FeatureMatrix,
    train_y: TargetMatrix,
    test: Option<(FeatureMatrix, TargetMatrix)>,
    layout: Option<ImageLayout>,
    provenance: String,
    notes: Vec<String>,
}

fn collapse_to_binary(y: &TargetMatrix) -> Result<TargetMatrix> {
    if y.cols() != 2 {
        return Err(Error::Config(format!(
            "binary label format needs two-column one-hot labels, got {} columns",
            y.cols()
        )));
    }
    TargetMatrix::new((0..y.rows()).map(|i| y.row(i)[1]).collect(), y.rows(), 1)
}

fn apply_label_format(format: LabelFormat, y: TargetMatrix) -> Result<TargetMatrix> {
    match format {
        LabelFormat::OneHot => Ok(y),
        LabelFormat::Binary => collapse_to_binary(&y),
    }
}

fn fallback_patch_count(cfg: &RunConfig) -> usize {
    // Enough images that the test side of the split covers the benchmark.
    ((cfg.evaluation.num_test_images as f64 / cfg.test_fraction).ceil() as usize).max(50)
}

/// Builds the configured dataset and splits it. `allow_fallback` lets the
/// benchmark substitute generated patch images when IDX files are absent.
fn build_dataset(cfg: &RunConfig, allow_fallback: bool) -> Result<PreparedData> {
    let mut notes = Vec::new();
    let split_seed = cfg.master_seed + 1;
    let (ds, explicit_test): (LabeledDataset, Option<LabeledDataset>) = match &cfg.dataset {
        DatasetSpec::SingleInformative { n, p } => (
            gen_single_informative(*n, *p, cfg.master_seed)?
                .with_split(cfg.test_fraction, split_seed)?,
            None,
        ),
        DatasetSpec::AdditiveLogit { n, weights } => (
            gen_additive_logit(*n, weights, cfg.master_seed)?
                .with_split(cfg.test_fraction, split_seed)?,
            None,
        ),
        DatasetSpec::PatchImages { n, height, width } => (
            gen_patch_images(*n, *height, *width, cfg.master_seed)?
                .with_split(cfg.test_fraction, split_seed)?,
            None,
        ),
        DatasetSpec::Idx {
            images,
            labels,
            test_images,
            test_labels,
            class_a,
            class_b,
        } => {
            if allow_fallback && (!images.exists() || !labels.exists()) {
                let n = fallback_patch_count(cfg);
                notes.push(format!(
                    "IDX files absent ({}); benchmark fell back to gen_patch_images(n={n}, 28x28)",
                    images.display()
                ));
                (
                    gen_patch_images(n, 28, 28, cfg.master_seed)?
                        .with_split(cfg.test_fraction, split_seed)?,
                    None,
                )
            } else {
                let train = filter_classes(&load_idx(images, labels)?, *class_a, *class_b)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let test = filter_classes(&load_idx(ti, tl)?, *class_a, *class_b)?;
                        if test.feature_dim() != train.feature_dim() {
                            return Err(Error::DimensionMismatch {
                                expected: train.feature_dim(),
                                actual: test.feature_dim(),
                                context: "test image width vs train".into(),
                            });
                        }
                        (train, Some(test))
                    }
                    _ => (train.with_split(cfg.test_fraction, split_seed)?, None),
                }
            }
        }
        DatasetSpec::Csv { path, target_cols } => (
            load_csv(path, *target_cols)?.with_split(cfg.test_fraction, split_seed)?,
            None,
        ),
    };

    let layout = ds.layout();
    let provenance = ds.provenance().to_string();
    let (train_x, train_y, test) = match explicit_test {
        Some(test_ds) => {
            let (tx, ty) = (test_ds.x().clone(), test_ds.y().clone());
            (ds.x().clone(), ds.y().clone(), Some((tx, ty)))
        }
        None => {
            let (train_x, train_y) = ds.train_partition()?;
            let test = if ds.split().is_some() {
                Some(ds.test_partition()?)
            } else {
                None
            };
            (train_x, train_y, test)
        }
    };
    let train_y = apply_label_format(cfg.label_format, train_y)?;
    let test = match test {
        Some((x, y)) => Some((x, apply_label_format(cfg.label_format, y)?)),
        None => None,
    };
    Ok(PreparedData {
        train_x,
        train_y,
        test,
        layout,
        provenance,
        notes,
    })
}

fn build_grouping(
    spec: &GroupingSpec,
    feature_dim: usize,
    layout: Option<ImageLayout>,
) -> Result<FeatureGrouping> {
    match spec {
        GroupingSpec::Identity => FeatureGrouping::identity(feature_dim),
        GroupingSpec::Grid {
            patch_height,
            patch_width,
        } => {
            let layout = layout.ok_or_else(|| {
                Error::Config("grid grouping needs a dataset with an image layout".into())
            })?;
            FeatureGrouping::grid(layout.height, layout.width, *patch_height, *patch_width)
        }
        GroupingSpec::Custom { groups } => FeatureGrouping::custom(groups.clone(), feature_dim),
    }
}

fn build_masking(spec: &MaskingSpec, train_x: &FeatureMatrix) -> MaskingStrategy {
    match spec {
        MaskingSpec::Zero => MaskingStrategy::Zero,
        MaskingSpec::DatasetMean => MaskingStrategy::dataset_mean(train_x),
        MaskingSpec::Constant { values } => MaskingStrategy::Constant(values.clone()),
    }
}

/// Builds the target model, training the built-in classifier when asked.
/// Returns the model plus report notes (for example holdout accuracy).
fn build_model(
    cfg: &RunConfig,
    train_x: &FeatureMatrix,
    train_y: &TargetMatrix,
    log: &RunLog,
) -> Result<(Box<dyn BlackBoxModel>, Vec<String>)> {
    match &cfg.target_model {
        TargetModelSpec::Builtin { classifier } => {
            log.say("training the built-in target classifier");
            let model = train_builtin_classifier(train_x, train_y, classifier)?;
            let note = format!(
                "target model holdout accuracy: {}",
                model.holdout_accuracy()
            );
            log.say(&note);
            Ok((Box::new(model), vec![note]))
        }
        TargetModelSpec::Analytic { model } => {
            Ok((Box::new(analytic_model(model.clone())?), Vec::new()))
        }
        TargetModelSpec::Bridge {
            command,
            timeout_secs,
        } => {
            log.say(&format!("launching bridge process: {}", command.join(" ")));
            let bridge = ExternalModelBridge::launch(command, *timeout_secs)?;
            let note = format!("external model '{}' over the line protocol", bridge.name());
            Ok((Box::new(bridge), vec![note]))
        }
    }
}

fn target_config(cfg: &RunConfig) -> TargetConfig {
    TargetConfig {
        loss: LossFunction::new(cfg.loss),
        negative_delta: cfg.negative_delta,
    }
}

fn run_precompute(
    cfg: &RunConfig,
    model: &dyn BlackBoxModel,
    x: &FeatureMatrix,
    y: &TargetMatrix,
    grouping: &FeatureGrouping,
    strategy: &MaskingStrategy,
) -> Result<PrecomputedTargets> {
    precompute_targets(model, x, y, grouping, strategy, &target_config(cfg))
}

/// Precomputes importance targets for the training partition and writes
/// the targets file plus its metadata sidecar.
pub fn cmd_targets(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = ensure_run_dir(cfg)?;
    let log = RunLog::new(&out);
    let data = build_dataset(cfg, false)?;
    let grouping = build_grouping(&cfg.grouping, data.train_x.cols(), data.layout)?;
    let strategy = build_masking(&cfg.masking, &data.train_x);
    strategy.validate(data.train_x.cols())?;
    let (model, _) = build_model(cfg, &data.train_x, &data.train_y, &log)?;
    log.say(&format!(
        "computing importance targets: {} samples, {} groups",
        data.train_x.rows(),
        grouping.num_groups()
    ));
    let t = run_precompute(
        cfg,
        model.as_ref(),
        &data.train_x,
        &data.train_y,
        &grouping,
        &strategy,
    )?;
    save_omega_csv(&t.omega, &out.join(OMEGA_FILE))?;
    let meta = OmegaMetadata {
        schema_version: OMEGA_SCHEMA_VERSION,
        model_fingerprint: model.fingerprint(),
        target_config: target_config(cfg),
        grouping: grouping.clone(),
        masking: strategy.clone(),
        num_samples: t.omega.num_samples(),
        num_groups: t.omega.num_groups(),
        uniform_fallbacks: t.uniform_fallbacks,
        evaluations: t.evaluations,
    };
    save_omega_metadata(&meta, &out.join(OMEGA_META_FILE))?;
    log.say(&format!(
        "targets written: {} model evaluations, {} uniform fallbacks",
        t.evaluations, t.uniform_fallbacks
    ));
    Ok(())
}

/// The metadata sidecar expected next to a targets file.
fn omega_meta_path(omega_path: &Path) -> PathBuf {
    omega_path.with_file_name(OMEGA_META_FILE)
}

fn load_targets(
    out: &Path,
    omega_path: Option<&Path>,
    log: &RunLog,
) -> Result<(OmegaMatrix, String)> {
    let default_path = out.join(OMEGA_FILE);
    let path = omega_path.unwrap_or(&default_path);
    let omega = load_omega_csv(path)?;
    let fingerprint = match load_omega_metadata(&omega_meta_path(path)) {
        Ok(meta) => meta.model_fingerprint,
        Err(_) => {
            log.say("targets metadata sidecar missing; provenance will say 'unrecorded'");
            "unrecorded".to_string()
        }
    };
    Ok((omega, fingerprint))
}

fn write_history_csv(model: &ExplainerModel, path: &Path) -> Result<()> {
    let mut text = String::from("epoch,train_kl,validation_kl\n");
    for r in &model.history().records {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{val}\n", r.epoch, r.train_loss));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains the explainer on precomputed targets and writes the model plus
/// its loss history.
pub fn cmd_train(cfg: &RunConfig, omega_path: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let out = ensure_run_dir(cfg)?;
    let log = RunLog::new(&out);
    let (omega, fingerprint) = load_targets(&out, omega_path, &log)?;
    let data = build_dataset(cfg, false)?;
    let grouping = build_grouping(&cfg.grouping, data.train_x.cols(), data.layout)?;
    let strategy = build_masking(&cfg.masking, &data.train_x);
    strategy.validate(data.train_x.cols())?;
    log.say(&format!(
        "training explainer on {} samples for up to {} epochs",
        data.train_x.rows(),
        cfg.explainer.epochs
    ));
    let model = train_explainer(
        &data.train_x,
        &omega,
        &grouping,
        &strategy,
        &fingerprint,
        &cfg.explainer,
        cfg.validation_fraction,
    )?;
    save_explainer(&model, &out.join(EXPLAINER_FILE))?;
    write_history_csv(&model, &out.join(HISTORY_FILE))?;
    let h = model.history();
    log.say(&format!(
        "explainer written: best epoch {}, monitored KL {}{}",
        h.best_epoch,
        h.best_loss(),
        if h.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    ));
    Ok(())
}

/// Attributes every row of a feature CSV with a saved explainer.
pub fn cmd_explain(model_path: &Path, input_path: &Path, out_path: &Path) -> Result<()> {
    let model = load_explainer(model_path)?;
    let (x, d) = datasets::load_features_csv(input_path)?;
    if d != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: d,
            context: "input columns vs explainer input width".into(),
        });
    }
    let header: Vec<String> = (0..model.num_groups())
        .map(|g| format!("attribution_{g}"))
        .collect();
    let mut text = header.join(",");
    text.push('\n');
    if let Some(x) = x {
        let omega = model.explain(&x)?;
        for i in 0..omega.num_samples() {
            let cells: Vec<String> = omega.row(i).iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
    }
    std::fs::write(out_path, text).map_err(|e| Error::io(out_path, e))
}

/// Trains the bootstrap ensemble, persists it, and writes per-input
/// confidence intervals for the held-out partition.
pub fn cmd_ensemble(cfg: &RunConfig, omega_path: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let out = ensure_run_dir(cfg)?;
    let log = RunLog::new(&out);
    let (omega, fingerprint) = load_targets(&out, omega_path, &log)?;
    let data = build_dataset(cfg, false)?;
    let grouping = build_grouping(&cfg.grouping, data.train_x.cols(), data.layout)?;
    let strategy = build_masking(&cfg.masking, &data.train_x);
    strategy.validate(data.train_x.cols())?;
    log.say(&format!(
        "training {} ensemble members",
        cfg.ensemble.num_members
    ));
    let ensemble = train_ensemble(
        &data.train_x,
        &omega,
        &grouping,
        &strategy,
        &fingerprint,
        &cfg.explainer,
        cfg.validation_fraction,
        cfg.ensemble.num_members,
        cfg.master_seed,
    )?;
    save_ensemble(&ensemble, &out.join(ENSEMBLE_DIR))?;

    let inputs = match &data.test {
        Some((x, _)) => x,
        None => &data.train_x,
    };
    let mut text = String::from("input,group,median,lower,upper,width\n");
    for i in 0..inputs.rows() {
        let ci = ensemble.attribute(inputs.row(i), cfg.ensemble.gamma)?;
        let widths = ci.width();
        for (g, width) in widths.iter().enumerate() {
            text.push_str(&format!(
                "{i},{g},{},{},{},{width}\n",
                ci.median[g], ci.lower[g], ci.upper[g]
            ));
        }
    }
    let intervals = out.join(INTERVALS_FILE);
    std::fs::write(&intervals, text).map_err(|e| Error::io(&intervals, e))?;
    log.say(&format!(
        "ensemble written: {} members, intervals for {} inputs",
        cfg.ensemble.num_members,
        inputs.rows()
    ));
    Ok(())
}

/// First `n` rows of a partition as an owned matrix.
fn head_rows(
    x: &FeatureMatrix,
    y: &TargetMatrix,
    n: usize,
) -> Result<(FeatureMatrix, TargetMatrix)> {
    let take: Vec<usize> = (0..n).collect();
    Ok((x.gather_rows(&take)?, y.gather_rows(&take)?))
}

/// Runs the full benchmark: the log-odds drop comparison across
/// attribution methods and the uncertainty-correlation study across
/// ensemble sizes.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = ensure_run_dir(cfg)?;
    let log = RunLog::new(&out);
    let mut notes = Vec::new();
    let data = build_dataset(cfg, true)?;
    notes.extend(data.notes.iter().cloned());
    let (test_x_full, test_y_full) = data.test.as_ref().ok_or_else(|| {
        Error::Config("benchmark needs a held-out partition; attach a test pair or split".into())
    })?;
    let n_images = cfg.evaluation.num_test_images.min(test_x_full.rows());
    if n_images < cfg.evaluation.num_test_images {
        notes.push(format!(
            "test partition has only {n_images} rows; num_test_images reduced from {}",
            cfg.evaluation.num_test_images
        ));
    }
    let (test_x, test_y) = head_rows(test_x_full, test_y_full, n_images)?;
    let grouping = build_grouping(&cfg.grouping, data.train_x.cols(), data.layout)?;
    let strategy = build_masking(&cfg.masking, &data.train_x);
    strategy.validate(data.train_x.cols())?;
    let p = grouping.num_groups();

    let clock = Instant::now();
    let (model, model_notes) = build_model(cfg, &data.train_x, &data.train_y, &log)?;
    let model_seconds = clock.elapsed().as_secs_f64();
    notes.extend(model_notes);

    log.say("precomputing importance targets on the training partition");
    let clock = Instant::now();
    let pre = run_precompute(
        cfg,
        model.as_ref(),
        &data.train_x,
        &data.train_y,
        &grouping,
        &strategy,
    )?;
    let omega_seconds = clock.elapsed().as_secs_f64();

    log.say("training the explainer");
    let clock = Instant::now();
    let explainer = train_explainer(
        &data.train_x,
        &pre.omega,
        &grouping,
        &strategy,
        &model.fingerprint(),
        &cfg.explainer,
        cfg.validation_fraction,
    )?;
    let explainer_seconds = clock.elapsed().as_secs_f64();

    let rule = ConfidenceRule::PredictedClass;
    let q = cfg.evaluation.q;

    log.say(&format!("scoring {n_images} held-out images"));
    let clock = Instant::now();
    let cx_attr = explainer.explain(&test_x)?;
    let cx_seconds = clock.elapsed().as_secs_f64();
    let cx_dlo = delta_log_odds_sample(
        model.as_ref(),
        &test_x,
        &cx_attr,
        q,
        &grouping,
        &strategy,
        rule,
    )?;

    // The targets formula applied directly to the held-out labels: the
    // upper bound the explainer approximates.
    let clock = Instant::now();
    let direct = run_precompute(cfg, model.as_ref(), &test_x, &test_y, &grouping, &strategy)?;
    let direct_seconds = clock.elapsed().as_secs_f64();
    let direct_dlo = delta_log_odds_sample(
        model.as_ref(),
        &test_x,
        &direct.omega,
        q,
        &grouping,
        &strategy,
        rule,
    )?;

    let clock = Instant::now();
    let random_attr = random_attributions(n_images, p, cfg.master_seed + 2)?;
    let random_seconds = clock.elapsed().as_secs_f64();
    let random_dlo = delta_log_odds_sample(
        model.as_ref(),
        &test_x,
        &random_attr,
        q,
        &grouping,
        &strategy,
        rule,
    )?;

    let methods = vec![
        MethodResult::from_values("cxplain", cx_dlo, cx_seconds)?,
        MethodResult::from_values("direct_omega", direct_dlo, direct_seconds)?,
        MethodResult::from_values("random_attribution", random_dlo, random_seconds)?,
    ];
    let mut pairwise = Vec::new();
    for (a, b) in [(0, 2), (0, 1), (1, 2)] {
        pairwise.push(PairwiseTest {
            method_a: methods[a].method.clone(),
            method_b: methods[b].method.clone(),
            mww: crate::evaluation::mww_test(&methods[a].per_image, &methods[b].per_image)?,
        });
    }

    let mut sizes = cfg.evaluation.ensemble_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let m_max = *sizes.last().expect("validated non-empty");
    log.say(&format!(
        "training a {m_max}-member ensemble for the uncertainty benchmark"
    ));
    let clock = Instant::now();
    let full_ensemble = train_ensemble(
        &data.train_x,
        &pre.omega,
        &grouping,
        &strategy,
        &model.fingerprint(),
        &cfg.explainer,
        cfg.validation_fraction,
        m_max,
        cfg.master_seed,
    )?;
    let ensemble_seconds = clock.elapsed().as_secs_f64();
    let prefixes: Vec<(usize, crate::uncertainty::BootstrapEnsemble)> = sizes
        .iter()
        .map(|&m| Ok((m, full_ensemble.prefix(m)?)))
        .collect::<Result<_>>()?;
    let ensemble_refs: Vec<(usize, &crate::uncertainty::BootstrapEnsemble)> =
        prefixes.iter().map(|(m, e)| (*m, e)).collect();

    log.say("correlating interval widths with rank errors");
    let ucfg = UncertaintyBenchmarkConfig {
        top_fraction: cfg.evaluation.top_fraction,
        gamma: cfg.ensemble.gamma,
        min_features: 2,
        filter_positive_first: true,
        baseline_seed: cfg.master_seed + 3,
        rule,
    };
    let uncertainty = uncertainty_correlation_benchmark(
        model.as_ref(),
        &ensemble_refs,
        &test_x,
        &grouping,
        &strategy,
        &ucfg,
    )?;
    if uncertainty.images_without_subset > 0 {
        notes.push(format!(
            "{} of {} images had too few usable features for the uncertainty benchmark",
            uncertainty.images_without_subset, uncertainty.images_total
        ));
    }

    let metadata = vec![
        ("dataset".into(), data.provenance.clone()),
        ("target_model".into(), model.fingerprint()),
        ("grouping".into(), format!("{:?}", cfg.grouping)),
        ("num_groups".into(), p.to_string()),
        ("masking".into(), format!("{:?}", cfg.masking)),
        ("loss".into(), format!("{:?}", cfg.loss)),
        ("q".into(), q.to_string()),
        (
            "top_fraction".into(),
            cfg.evaluation.top_fraction.to_string(),
        ),
        ("gamma".into(), cfg.ensemble.gamma.to_string()),
        ("ensemble_sizes".into(), format!("{sizes:?}")),
        ("num_test_images".into(), n_images.to_string()),
        ("master_seed".into(), cfg.master_seed.to_string()),
        ("explainer_seed".into(), cfg.explainer.seed.to_string()),
        (
            "target_evaluations_train".into(),
            pre.evaluations.to_string(),
        ),
    ];
    let report = EvalReport {
        methods,
        pairwise,
        uncertainty: Some(uncertainty),
        metadata,
        notes,
    };

    let report_path = out.join(REPORT_FILE);
    std::fs::write(&report_path, report.per_image_csv()).map_err(|e| Error::io(&report_path, e))?;
    let summary_path = out.join(SUMMARY_FILE);
    std::fs::write(&summary_path, report.summary_text())
        .map_err(|e| Error::io(&summary_path, e))?;

    let mut timings = report.timings_csv();
    timings.push_str(&format!("stage:target_model_training,{model_seconds}\n"));
    timings.push_str(&format!("stage:targets_precompute,{omega_seconds}\n"));
    timings.push_str(&format!("stage:explainer_training,{explainer_seconds}\n"));
    timings.push_str(&format!("stage:ensemble_training,{ensemble_seconds}\n"));
    let timings_path = out.join(TIMINGS_FILE);
    std::fs::write(&timings_path, timings).map_err(|e| Error::io(&timings_path, e))?;

    log.say(&format!(
        "benchmark written to {} ({} and {})",
        out.display(),
        REPORT_FILE,
        SUMMARY_FILE
    ));
    Ok(())
}
