//! The five commands. Each one echoes the resolved config into its output
//! directory before touching any input, and writes its results there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cdl::checkpoint;
use cdl::datamodel::{PseudoLabelSet, Role};
use cdl::evalkit::{default_cdf_edges, evaluate, uncertainty_cdf, uncertainty_error_correlation, Correlation, MetricsReport};
use cdl::featstore::{CorpusManifest, FeatureStore};
use cdl::synthgen::{self, SynthReport, SynthSpec};
use cdl::trainer::{generate_pseudo_labels, read_log, train_cdl, train_step0, LoadedCorpus, LogRecord, TrainLog, TrainOptions, TrainState};

use crate::run_config::EchoedConfig;
use crate::{plots, CliError, RunConfig};

pub const LOG_FILE: &str = "train.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_FILE: &str = "metrics.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn existing(what: &str, path: &Path) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_corpus(path: &Path, role: Role, store: &FeatureStore, streams: &[&str], n_s: usize) -> Result<LoadedCorpus, CliError> {
    let manifest = CorpusManifest::load(path, role)?;
    Ok(LoadedCorpus::load(manifest, store, streams, n_s)?)
}

fn checkpoint_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads a synthetic corpus spec; `.json` files are JSON, anything else TOML.
pub fn read_synth_spec(path: &Path) -> Result<SynthSpec, CliError> {
    let path = existing("spec file", path)?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes the corpus into the output directory, plus `synth-report.json`.
/// Without a spec the config's `[synth]` table is used, then a two-domain
/// default sized 200/200/100.
pub fn synth(cfg: &RunConfig, spec: Option<SynthSpec>) -> Result<SynthReport, CliError> {
    let spec = spec
        .or_else(|| cfg.synth.clone())
        .unwrap_or_else(|| SynthSpec::two_domain(cfg.train.seed, 200, 200, 100));
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out = cfg.out_dir();
    cfg.echo(&out)?;
    let report = synthgen::generate(&spec, &out)?;
    write_json(&out.join("synth-report.json"), &report)?;
    Ok(report)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Option<MetricsReport>,
}

/// Step 0 followed by the CDL steps. With `resume`, training continues from
/// that checkpoint and the log is appended to; the checkpoint's config must
/// match the resolved one apart from the number of CDL steps.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let labeled_path = cfg.require("labeled", &cfg.paths.labeled)?;
    let external_path = cfg.require("external", &cfg.paths.external)?;
    let test_path = cfg.paths.test.as_deref().map(|p| existing("test manifest", p)).transpose()?;
    let resume = resume.map(|p| existing("checkpoint", p)).transpose()?;
    let out = cfg.out_dir();
    cfg.echo(&out)?;

    let tc = &cfg.train;
    let store = FeatureStore::new();
    let streams = [tc.main_stream.as_str(), tc.aux_stream.as_str()];
    let labeled = load_corpus(&labeled_path, Role::Labeled, &store, &streams, tc.n_s)?;
    let external = load_corpus(&external_path, Role::External, &store, &streams, tc.n_s)?;

    let log_path = out.join(LOG_FILE);
    let resumed = match &resume {
        Some(path) => {
            let state = checkpoint::load(path)?;
            let mut theirs = state.config.clone();
            theirs.cdl_steps = tc.cdl_steps;
            if theirs != *tc {
                return Err(CliError::Config(format!(
                    "checkpoint {} was written under config {} but the resolved config is {}",
                    path.display(),
                    state.config.hash(),
                    tc.hash()
                )));
            }
            Some(state)
        }
        None => {
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(|e| CliError::io(&log_path, e))?;
            }
            None
        }
    };
    let mut log = TrainLog::to_file(&log_path)?;
    let mut opts = TrainOptions {
        checkpoint_dir: Some(out.join(CHECKPOINT_DIR)),
        workers: cfg.workers,
        ..Default::default()
    };
    let state = match resumed {
        Some(s) => s,
        None => train_step0(&labeled, tc, &mut log, &opts)?,
    };
    let state = train_cdl(state, &labeled, &external, tc, &mut log, &mut opts)?;
    log.flush()?;

    let metrics = match test_path {
        Some(p) => {
            let test = load_corpus(&p, Role::Test, &store, &[tc.main_stream.as_str()], tc.n_s)?;
            let id = checkpoint_id(&checkpoint::checkpoint_path(Path::new(""), state.cdl_step));
            let report = evaluate(&state.heads.main, &test, &state.config, &id, cfg.workers)?;
            write_json(&out.join(METRICS_FILE), &report)?;
            Some(report)
        }
        None => None,
    };
    Ok(TrainOutcome { state, metrics })
}

/// Frame-level AUC and AP of a checkpoint's main head. Only main-stream
/// blobs are read, through `store`.
pub fn eval_with_store(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    manifest: Option<&Path>,
    store: &FeatureStore,
) -> Result<MetricsReport, CliError> {
    let ck = existing("checkpoint", checkpoint_path)?;
    let manifest = match manifest {
        Some(m) => existing("test manifest", m)?,
        None => cfg.require("test", &cfg.paths.test)?,
    };
    let out = cfg.out_dir();
    cfg.echo(&out)?;
    let state = checkpoint::load(&ck)?;
    let sc = &state.config;
    let test = load_corpus(&manifest, Role::Test, store, &[sc.main_stream.as_str()], sc.n_s)?;
    let report = evaluate(&state.heads.main, &test, sc, &checkpoint_id(&ck), cfg.workers)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    Ok(report)
}

pub fn eval(cfg: &RunConfig, checkpoint_path: &Path, manifest: Option<&Path>) -> Result<MetricsReport, CliError> {
    eval_with_store(cfg, checkpoint_path, manifest, &FeatureStore::new())
}

#[derive(Clone, Debug, Serialize)]
pub struct PseudoLabelReport {
    pub checkpoint: String,
    pub main: PseudoLabelSet,
    pub aux: PseudoLabelSet,
    /// Mean surrogate variance per video.
    pub video_mean_s: BTreeMap<String, f64>,
}

/// Runs both heads of a checkpoint over an external corpus and writes the
/// soft labels to `pseudo-labels.json`.
pub fn pseudo_label(cfg: &RunConfig, checkpoint_path: &Path, manifest: Option<&Path>) -> Result<PseudoLabelReport, CliError> {
    let ck = existing("checkpoint", checkpoint_path)?;
    let manifest = match manifest {
        Some(m) => existing("external manifest", m)?,
        None => cfg.require("external", &cfg.paths.external)?,
    };
    let out = cfg.out_dir();
    cfg.echo(&out)?;
    let state = checkpoint::load(&ck)?;
    let sc = &state.config;
    let store = FeatureStore::new();
    let external = load_corpus(&manifest, Role::External, &store, &[sc.main_stream.as_str(), sc.aux_stream.as_str()], sc.n_s)?;
    let generation = generate_pseudo_labels(&state, &external, cfg.workers)?;
    let report = PseudoLabelReport {
        checkpoint: checkpoint_id(&ck),
        main: generation.labels.main,
        aux: generation.labels.aux,
        video_mean_s: generation.video_mean_s,
    };
    write_json(&out.join("pseudo-labels.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DiagnoseReport {
    /// Per CDL step, the CDF of per-video mean uncertainty at the default edges.
    pub cdf: BTreeMap<usize, Vec<f64>>,
    /// Uncertainty/error correlation per completed CDL step; empty when the
    /// external corpus has no frame labels.
    pub correlation: BTreeMap<usize, Correlation>,
    pub files: Vec<PathBuf>,
}

fn step_checkpoints(dir: &Path) -> Result<BTreeMap<usize, PathBuf>, CliError> {
    let mut found = BTreeMap::new();
    if !dir.exists() {
        return Ok(found);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse().ok());
        if let Some(step) = step {
            found.insert(step, path);
        }
    }
    Ok(found)
}

/// Builds the diagnostic bundle of a training run directory: uncertainty
/// CDFs per CDL step from the log, and, when the external corpus carries
/// frame labels, the uncertainty/error Spearman series from the checkpoints.
/// Results go to `<out>/diagnostics`.
pub fn diagnose(cfg: &RunConfig, run: &Path) -> Result<DiagnoseReport, CliError> {
    let log_path = run.join(LOG_FILE);
    if !log_path.exists() {
        return Err(CliError::MissingLogs(log_path));
    }
    let out = cfg.paths.out.clone().unwrap_or_else(|| run.to_path_buf()).join("diagnostics");
    cfg.echo(&out)?;

    // A resumed run appends, so later records for a step replace earlier ones.
    let mut per_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for record in read_log(&log_path)? {
        if let LogRecord::Uncertainty { cdl_step, video_mean_s } = record {
            per_step.insert(cdl_step, video_mean_s.into_values().collect());
        }
    }
    let edges = default_cdf_edges();
    let mut report = DiagnoseReport::default();
    for (step, values) in &per_step {
        report.cdf.insert(*step, uncertainty_cdf(values, &edges)?);
    }
    let cdf_path = out.join("uncertainty-cdf.csv");
    let mut w = csv::Writer::from_path(&cdf_path).map_err(|e| CliError::Plot(format!("{}: {e}", cdf_path.display())))?;
    let csv_err = |e: csv::Error| CliError::Plot(e.to_string());
    w.write_record(["cdl_step", "edge", "cumulative"]).map_err(csv_err)?;
    for (step, cdf) in &report.cdf {
        for (e, c) in edges.iter().zip(cdf) {
            w.write_record([step.to_string(), e.to_string(), c.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&cdf_path, e))?;
    report.files.push(cdf_path);
    if !report.cdf.is_empty() {
        let svg = out.join("cdf.svg");
        plots::cdf_plot(&svg, &edges, &report.cdf)?;
        report.files.push(svg);
    }

    let external = match &cfg.paths.external {
        Some(p) => Some(p.clone()),
        None => {
            let echoed = run.join("resolved-config.toml");
            if echoed.exists() {
                EchoedConfig::load(&echoed)?.paths.external
            } else {
                None
            }
        }
    };
    let external = match external {
        Some(p) => existing("external manifest", &p)?,
        None => {
            log::warn!("no external manifest configured; skipping the uncertainty/error correlation");
            return Ok(report);
        }
    };
    let manifest = CorpusManifest::load(&external, Role::External)?;
    if !manifest.has_frame_labels() {
        log::warn!(
            "external corpus {} has no frame labels; skipping the uncertainty/error correlation",
            external.display()
        );
        return Ok(report);
    }
    let store = FeatureStore::new();
    let mut loaded: Option<(usize, LoadedCorpus)> = None;
    for (step, path) in step_checkpoints(&run.join(CHECKPOINT_DIR))? {
        if step == 0 {
            continue;
        }
        let state = checkpoint::load(&path)?;
        let sc = &state.config;
        if loaded.as_ref().map(|(n, _)| *n) != Some(sc.n_s) {
            let streams = [sc.main_stream.as_str(), sc.aux_stream.as_str()];
            loaded = Some((sc.n_s, LoadedCorpus::load(manifest.clone(), &store, &streams, sc.n_s)?));
        }
        let corpus = &loaded.as_ref().expect("just loaded").1;
        let sample = uncertainty_error_correlation(&state, corpus, cfg.workers)?;
        report.correlation.insert(step, sample.correlation);
    }
    let corr_path = out.join("correlation.csv");
    let mut w = csv::Writer::from_path(&corr_path).map_err(|e| CliError::Plot(format!("{}: {e}", corr_path.display())))?;
    w.write_record(["cdl_step", "rho", "p_value", "n"]).map_err(csv_err)?;
    for (step, c) in &report.correlation {
        w.write_record([step.to_string(), c.rho.to_string(), c.p_value.to_string(), c.n.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(&corr_path, e))?;
    report.files.push(corr_path);
    if !report.correlation.is_empty() {
        let svg = out.join("correlation.svg");
        plots::correlation_plot(&svg, &report.correlation)?;
        report.files.push(svg);
    }
    Ok(report)
}
