//! Experiment plans: a validated multi-stage run driven by one TOML file.
//!
//! A plan names its datasets, an encoder (trained here or loaded from a
//! checkpoint), a linear probe, an evaluation set, and any number of attack
//! and defense stages. [`run_experiment`] checks every reference before the
//! first expensive stage starts, then executes train-encoder, train-attack,
//! evaluate, and defenses in that order into a fresh run directory. Every
//! file the run writes is registered in `manifest.json` with its SHA-256,
//! so reruns can be compared digest-by-digest.
//!
//! Runs are hermetic: stages read only the declared datasets, the declared
//! encoder checkpoint, and the optional encoder cache named by the
//! `ADVKIT_CACHE` environment variable (cache hits are recorded in the
//! manifest's input digests). Given the same plan, seed, and machine, two
//! runs differ only in `run_id`, timestamps, and duration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::attack::{save_artifact, train_advencoder, AttackError, NoiseArtifact};
use crate::config::{sha256_hex, AsrMode, AttackConfig, ConfigError, EvalReport, Mode};
use crate::data::{resolve_dataset, DataError, Dataset};
use crate::defenses::{
    adversarial_train, finetune_encoder, gaussian_corrupt, prune_encoder, DefenseError,
    DefenseSpec,
};
use crate::encoders::{
    load_encoder, save_encoder, train_linear_probe, train_toy_encoder, DownstreamHead,
    EncoderError, EncoderHandle, Method,
};
use crate::evaluation::{
    attack_success_rate, eval_reports_from_csv, eval_reports_to_csv, malicious_accuracy,
    retrieval_map_suite, EvalError, PredictionRecord, REPORT_KS,
};
use crate::parallel::ExecMode;
use crate::plot::{save_curves, PlotError, PlotSpec, Series};
use crate::TOOL_VERSION;

/// Schema tag a plan file must carry.
pub const PLAN_SCHEMA: &str = "advkit-plan-v1";
/// Schema tag written into run manifests.
pub const RUN_SCHEMA: &str = "advkit-run-v1";
/// Manifest file name inside a run directory.
pub const MANIFEST_FILE: &str = "manifest.json";
/// Metrics CSV file name inside a run directory.
pub const METRICS_FILE: &str = "metrics.csv";
/// Subdirectory holding the encoder checkpoint the run used.
pub const ENCODER_DIR: &str = "encoder";
/// Subdirectory holding one artifact directory per attack stage.
pub const ARTIFACTS_DIR: &str = "artifacts";
/// Environment variable naming the shared encoder cache directory.
pub const CACHE_ENV: &str = "ADVKIT_CACHE";

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("plan schema {0:?}, this build reads {PLAN_SCHEMA:?}")]
    Schema(String),
    #[error("plan parse: {0}")]
    Parse(String),
    #[error("unresolved reference: {0}")]
    UnresolvedReference(String),
    #[error("duplicate attack name {0:?}")]
    DuplicateName(String),
    #[error("output directory {0} already has entries")]
    OutputDirNotEmpty(PathBuf),
    #[error("run manifest not found at {0}")]
    MissingManifest(PathBuf),
    #[error("run manifest invalid: {0}")]
    Manifest(String),
    #[error("unknown report format {0:?}; expected csv, markdown_table, or png_curves")]
    UnknownFormat(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Output family [`emit_report`] renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Consolidated metrics CSV (`report.csv`).
    Csv,
    /// Settings-by-encoder attack-success grid (`report.md`).
    MarkdownTable,
    /// Metric-versus-parameter line plots (`curves_*.png`).
    PngCurves,
}

impl FromStr for ReportFormat {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown_table" => Ok(ReportFormat::MarkdownTable),
            "png_curves" => Ok(ReportFormat::PngCurves),
            other => Err(PlanError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ReportFormat::Csv => "csv",
            ReportFormat::MarkdownTable => "markdown_table",
            ReportFormat::PngCurves => "png_curves",
        };
        write!(f, "{s}")
    }
}

fn default_plan_seed() -> u64 {
    100
}
fn default_plan_shape() -> [usize; 3] {
    [3, 64, 64]
}
fn default_encoder_epochs() -> usize {
    1
}
fn default_encoder_batch() -> usize {
    64
}
fn default_probe_epochs() -> usize {
    10
}

/// Encoder stage: train one here or load a checkpoint, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderStage {
    /// Dataset reference to pre-train on.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "default_encoder_epochs")]
    pub epochs: usize,
    #[serde(default = "default_encoder_batch")]
    pub batch_size: usize,
    /// Checkpoint directory to load instead of training.
    #[serde(default)]
    pub load: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeStage {
    /// Labeled dataset the probe trains on.
    pub dataset: String,
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalStage {
    /// Labeled dataset every metric row is computed on.
    pub dataset: String,
}

/// One attack to train and evaluate.
///
/// Beyond the named fields, every key is an [`AttackConfig`] override
/// (mode, epsilon, epochs, ...) merged over the config defaults. `seed` and
/// `image_shape` are plan-level and rejected here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStage {
    pub name: String,
    /// Dataset reference the noise trains against.
    pub surrogate: String,
    /// Also evaluate a same-budget random-noise control row.
    #[serde(default)]
    pub random_control: bool,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

impl AttackStage {
    /// Defaults + overrides + plan-level seed and shape, validated.
    pub fn to_config(&self, plan: &Plan) -> Result<AttackConfig, PlanError> {
        for key in ["seed", "image_shape"] {
            if self.overrides.contains_key(key) {
                return Err(PlanError::Parse(format!(
                    "attack {:?}: {key} is set at the plan level",
                    self.name
                )));
            }
        }
        let mut config: AttackConfig = toml::Value::Table(self.overrides.clone())
            .try_into()
            .map_err(|e| PlanError::Parse(format!("attack {:?}: {e}", self.name)))?;
        config.seed = plan.seed;
        config.image_shape = plan.image_shape;
        config.validate()?;
        Ok(config)
    }
}

/// One defense applied to a previously declared attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseStage {
    /// Name of the attack stage whose artifact this defends against.
    pub apply_to: String,
    #[serde(flatten)]
    pub spec: DefenseSpec,
}

/// Parsed plan file. Field names double as the TOML keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub schema: String,
    pub name: String,
    #[serde(default = "default_plan_seed")]
    pub seed: u64,
    #[serde(default = "default_plan_shape")]
    pub image_shape: [usize; 3],
    /// Name -> dataset spec string, see [`resolve_dataset`].
    pub datasets: BTreeMap<String, String>,
    pub encoder: EncoderStage,
    pub probe: ProbeStage,
    pub eval: EvalStage,
    #[serde(default)]
    pub attacks: Vec<AttackStage>,
    #[serde(default)]
    pub defenses: Vec<DefenseStage>,
}

impl Plan {
    /// Parses and fully validates a plan document.
    pub fn from_toml_str(text: &str) -> Result<Self, PlanError> {
        let plan: Plan = toml::from_str(text).map_err(|e| PlanError::Parse(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_path(path: &Path) -> Result<Self, PlanError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    fn dataset_ref(&self, name: &str, site: &str) -> Result<(), PlanError> {
        if self.datasets.contains_key(name) {
            Ok(())
        } else {
            Err(PlanError::UnresolvedReference(format!(
                "{site} names dataset {name:?}, which [datasets] does not declare"
            )))
        }
    }

    /// Checks every cross-reference and stage config without running
    /// anything, so a long run cannot fail on a typo halfway through.
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.schema != PLAN_SCHEMA {
            return Err(PlanError::Schema(self.schema.clone()));
        }
        if self.name.trim().is_empty() {
            return Err(PlanError::Parse("plan name is empty".to_string()));
        }
        if self.datasets.is_empty() {
            return Err(PlanError::Parse("[datasets] is empty".to_string()));
        }
        for (name, spec) in &self.datasets {
            check_dataset_spec(name, spec)?;
        }
        match (&self.encoder.dataset, &self.encoder.load) {
            (Some(d), None) => self.dataset_ref(d, "encoder.dataset")?,
            (None, Some(path)) => {
                if !path.join("manifest.json").exists() {
                    return Err(PlanError::UnresolvedReference(format!(
                        "encoder.load: no checkpoint manifest at {}",
                        path.join("manifest.json").display()
                    )));
                }
            }
            _ => {
                return Err(PlanError::Parse(
                    "encoder needs exactly one of `dataset` (train) or `load`".to_string(),
                ))
            }
        }
        self.dataset_ref(&self.probe.dataset, "probe.dataset")?;
        self.dataset_ref(&self.eval.dataset, "eval.dataset")?;

        let mut seen = BTreeSet::new();
        for attack in &self.attacks {
            if attack.name.is_empty()
                || !attack
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(PlanError::Parse(format!(
                    "attack name {:?} must be non-empty [A-Za-z0-9_-] (it names a directory)",
                    attack.name
                )));
            }
            if !seen.insert(attack.name.as_str()) {
                return Err(PlanError::DuplicateName(attack.name.clone()));
            }
            self.dataset_ref(&attack.surrogate, &format!("attack {:?}", attack.name))?;
            attack.to_config(self)?;
        }
        for defense in &self.defenses {
            defense.spec.validate()?;
            if !self.attacks.iter().any(|a| a.name == defense.apply_to) {
                return Err(PlanError::UnresolvedReference(format!(
                    "defense {} applies to attack {:?}, which is not declared",
                    defense.spec.kind(),
                    defense.apply_to
                )));
            }
            if matches!(defense.spec, DefenseSpec::AdversarialTraining { .. })
                && self.encoder.dataset.is_none()
            {
                return Err(PlanError::Parse(
                    "adversarial_training defense retrains the encoder and needs \
                     encoder.dataset, not a loaded checkpoint"
                        .to_string(),
                ));
            }
        }
        Ok(())
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.image_shape[0], self.image_shape[1], self.image_shape[2])
    }
}

/// Path-bearing dataset specs must point at something that exists; synthetic
/// families always resolve.
fn check_dataset_spec(name: &str, spec: &str) -> Result<(), PlanError> {
    let path: Option<PathBuf> = if let Some(rest) = spec.strip_prefix("cifar10:") {
        let dir = match rest.rsplit_once(':') {
            Some((d, "train" | "test")) => d,
            _ => rest,
        };
        Some(dir.into())
    } else if let Some(dir) = spec.strip_prefix("folder:") {
        Some(dir.into())
    } else if spec.starts_with("synthetic:") || spec.starts_with("two_class:") {
        None
    } else {
        Some(spec.into())
    };
    match path {
        Some(p) if !p.exists() => Err(PlanError::UnresolvedReference(format!(
            "dataset {name:?}: {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

/// Everything a finished run says about itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub run_id: String,
    pub tool_version: String,
    pub created_unix_ms: u64,
    pub duration_seconds: f64,
    /// Full snapshot of the plan that produced the run.
    pub plan: Plan,
    /// Digests of everything the run consumed (plan text, loaded
    /// checkpoints, cache keys).
    pub input_digests: BTreeMap<String, String>,
    /// Relative path -> SHA-256 for every file in the run directory except
    /// this manifest.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, PlanError> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(PlanError::MissingManifest(path));
        }
        let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| PlanError::Manifest(e.to_string()))?;
        if manifest.schema != RUN_SCHEMA {
            return Err(PlanError::Manifest(format!(
                "schema {:?}, this build reads {RUN_SCHEMA:?}",
                manifest.schema
            )));
        }
        Ok(manifest)
    }

    fn store(&self, run_dir: &Path) -> Result<(), PlanError> {
        fs::write(
            run_dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Knobs that live outside the plan file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Shared encoder cache; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

impl RunOptions {
    /// Cache directory from [`CACHE_ENV`], if set and non-empty.
    pub fn from_env() -> Self {
        let cache_dir = std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        RunOptions { cache_dir }
    }
}

/// Runs a plan file into `out_dir` with options from the environment.
pub fn run_experiment(plan_path: &Path, out_dir: &Path) -> Result<RunManifest, PlanError> {
    run_experiment_with(plan_path, out_dir, &RunOptions::from_env())
}

/// Runs a plan file into `out_dir`: validate everything, then train the
/// encoder (or load it), train the probe, train and evaluate each attack,
/// evaluate each defense, and write `metrics.csv` plus the manifest.
pub fn run_experiment_with(
    plan_path: &Path,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunManifest, PlanError> {
    let started = Instant::now();
    let plan_text = fs::read_to_string(plan_path)?;
    let plan = Plan::from_toml_str(&plan_text)?;
    if out_dir.exists() && fs::read_dir(out_dir)?.next().is_some() {
        return Err(PlanError::OutputDirNotEmpty(out_dir.to_path_buf()));
    }

    let mut input_digests = BTreeMap::new();
    input_digests.insert("plan".to_string(), sha256_hex(plan_text.as_bytes()));

    let mut datasets: BTreeMap<String, Dataset> = BTreeMap::new();
    for (name, spec) in &plan.datasets {
        datasets.insert(name.clone(), resolve_dataset(spec, plan.shape())?);
    }

    fs::create_dir_all(out_dir)?;

    let encoder = match (&plan.encoder.dataset, &plan.encoder.load) {
        (Some(ds_name), None) => {
            let key = encoder_cache_key(&plan, ds_name);
            input_digests.insert("encoder_cache_key".to_string(), key.clone());
            let cached = options
                .cache_dir
                .as_ref()
                .map(|c| c.join("encoders").join(&key));
            let hit = cached
                .as_ref()
                .filter(|dir| dir.join("manifest.json").exists());
            if let Some(dir) = hit {
                input_digests
                    .insert("encoder_cache_hit".to_string(), digest_file(&dir.join("weights.bin"))?);
                load_encoder(dir)?
            } else {
                let trained = train_toy_encoder(
                    &datasets[ds_name],
                    Method::SimclrStyle,
                    plan.seed,
                    plan.encoder.epochs,
                    plan.encoder.batch_size,
                )?;
                if let Some(dir) = cached {
                    // Best effort: a read-only cache must not fail the run.
                    let _ = save_encoder(&trained, &dir);
                }
                trained
            }
        }
        (None, Some(path)) => {
            for file in ["manifest.json", "weights.bin"] {
                input_digests
                    .insert(format!("encoder_load/{file}"), digest_file(&path.join(file))?);
            }
            load_encoder(path)?
        }
        _ => unreachable!("validated"),
    };
    save_encoder(&encoder, &out_dir.join(ENCODER_DIR))?;

    let probe = train_linear_probe(
        &encoder,
        &datasets[&plan.probe.dataset],
        plan.probe.epochs,
        plan.seed,
    )?;

    let eval_ds = &datasets[&plan.eval.dataset];
    let owned = OwnedEvalCtx::build(&encoder, &probe, eval_ds, plan.seed)?;
    let ctx = owned.ctx();

    let mut rows: Vec<EvalReport> = Vec::new();
    rows.push(baseline_row(&encoder, &probe, eval_ds, plan.seed)?);

    let mut artifacts: BTreeMap<String, (NoiseArtifact, String)> = BTreeMap::new();
    for stage in &plan.attacks {
        let config = stage.to_config(&plan)?;
        let budget = match config.mode {
            Mode::Perturbation => config.epsilon,
            Mode::Patch => config.patch_fraction,
        };
        let artifact = train_advencoder(&config, &encoder, &datasets[&stage.surrogate])?;
        save_artifact(&artifact, &out_dir.join(ARTIFACTS_DIR).join(&stage.name))?;
        rows.push(artifact_row(
            &ctx,
            &encoder,
            &probe,
            &artifact,
            &stage.name,
            &stage.surrogate,
            Some(budget),
            Some(config.tau),
        )?);
        if stage.random_control {
            let control = NoiseArtifact::random_control(&config, plan.seed)?;
            rows.push(artifact_row(
                &ctx,
                &encoder,
                &probe,
                &control,
                &format!("{}-random", stage.name),
                &stage.surrogate,
                Some(budget),
                Some(config.tau),
            )?);
        }
        artifacts.insert(stage.name.clone(), (artifact, stage.surrogate.clone()));
    }

    for defense in &plan.defenses {
        let (artifact, surrogate) = &artifacts[&defense.apply_to];
        let dctx = DefenseContext {
            probe_dataset: &datasets[&plan.probe.dataset],
            probe_epochs: plan.probe.epochs,
            pretrain: plan.encoder.dataset.as_ref().map(|name| PretrainSpec {
                dataset: &datasets[name],
                batch_size: plan.encoder.batch_size,
            }),
            seed: plan.seed,
        };
        rows.push(defense_row(
            &ctx,
            &encoder,
            &probe,
            &defense.spec,
            &defense.apply_to,
            artifact,
            surrogate,
            &dctx,
        )?);
    }

    for row in &rows {
        row.validate()?;
    }
    fs::write(out_dir.join(METRICS_FILE), eval_reports_to_csv(&rows))?;

    let mut outputs = BTreeMap::new();
    for rel in walk_files(out_dir)? {
        if rel != MANIFEST_FILE {
            outputs.insert(rel.clone(), digest_file(&out_dir.join(&rel))?);
        }
    }
    let manifest = RunManifest {
        schema: RUN_SCHEMA.to_string(),
        run_id: fresh_run_id(&input_digests["plan"]),
        tool_version: TOOL_VERSION.to_string(),
        created_unix_ms: unix_ms(),
        duration_seconds: started.elapsed().as_secs_f64(),
        plan,
        input_digests,
        outputs,
    };
    manifest.store(out_dir)?;
    Ok(manifest)
}

/// Shared evaluation inputs for one run.
struct EvalCtx<'a> {
    mode: ExecMode,
    downstream: &'a str,
    labels: &'a [usize],
    clean_x: &'a Array4<f64>,
    clean_feats: &'a Array2<f64>,
    clean_preds: &'a [usize],
    seed: u64,
}

/// Owning form of [`EvalCtx`]: the clean batch evaluated once up front.
struct OwnedEvalCtx {
    mode: ExecMode,
    downstream: String,
    labels: Vec<usize>,
    clean_x: Array4<f64>,
    clean_feats: Array2<f64>,
    clean_preds: Vec<usize>,
    seed: u64,
}

impl OwnedEvalCtx {
    fn build(
        encoder: &EncoderHandle,
        probe: &DownstreamHead,
        eval_dataset: &Dataset,
        seed: u64,
    ) -> Result<Self, PlanError> {
        let labels = eval_dataset
            .labels()
            .ok_or_else(|| EvalError::Unlabeled(eval_dataset.name.clone()))?
            .to_vec();
        let mode = ExecMode::default_mode();
        let clean_x = eval_dataset.range_f64(0..eval_dataset.len());
        let clean_feats = encoder.forward_batch(&clean_x, mode)?;
        let clean_preds = probe.predict(&clean_feats)?;
        Ok(OwnedEvalCtx {
            mode,
            downstream: eval_dataset.name.clone(),
            labels,
            clean_x,
            clean_feats,
            clean_preds,
            seed,
        })
    }

    fn ctx(&self) -> EvalCtx<'_> {
        EvalCtx {
            mode: self.mode,
            downstream: &self.downstream,
            labels: &self.labels,
            clean_x: &self.clean_x,
            clean_feats: &self.clean_feats,
            clean_preds: &self.clean_preds,
            seed: self.seed,
        }
    }
}

fn fraction_equal(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, t)| p == t).count() as f64 / labels.len() as f64
}

fn records_from(
    labels: &[usize],
    clean_preds: &[usize],
    adv_preds: &[usize],
) -> Vec<PredictionRecord> {
    labels
        .iter()
        .zip(clean_preds)
        .zip(adv_preds)
        .map(|((&t, &c), &a)| PredictionRecord {
            true_label: t,
            clean_prediction: c,
            adversarial_prediction: a,
        })
        .collect()
}

/// The swept budget an artifact represents: epsilon for perturbations, the
/// realized area fraction for patches.
fn artifact_param(artifact: &NoiseArtifact) -> Option<f64> {
    match artifact.mode {
        Mode::Perturbation => Some(artifact.epsilon),
        Mode::Patch => {
            let (_, h, w) = artifact.delta.dim();
            artifact
                .patch_geometry
                .map(|(_, _, side)| (side * side) as f64 / (h * w) as f64)
        }
    }
}

/// Metrics row for one artifact through the run's own encoder and probe,
/// including adversarial-query retrieval mAP against the clean gallery.
fn artifact_row(
    ctx: &EvalCtx<'_>,
    encoder: &EncoderHandle,
    probe: &DownstreamHead,
    artifact: &NoiseArtifact,
    attack_name: &str,
    surrogate: &str,
    param: Option<f64>,
    tau: Option<f64>,
) -> Result<EvalReport, PlanError> {
    let adv_x = artifact.apply(ctx.clean_x)?;
    let adv_feats = encoder.forward_batch(&adv_x, ctx.mode)?;
    let adv_preds = probe.predict(&adv_feats)?;
    let records = records_from(ctx.labels, ctx.clean_preds, &adv_preds);
    let map = retrieval_map_suite(
        &adv_feats,
        ctx.labels,
        ctx.clean_feats,
        ctx.labels,
        &REPORT_KS,
        true,
    )?;
    Ok(EvalReport {
        encoder_id: encoder.id.clone(),
        surrogate: surrogate.to_string(),
        downstream: ctx.downstream.to_string(),
        mode: Some(artifact.mode),
        attack: attack_name.to_string(),
        defense: "none".to_string(),
        param,
        seed: ctx.seed,
        tau,
        clean_accuracy: Some(fraction_equal(ctx.clean_preds, ctx.labels)),
        malicious_accuracy: Some(malicious_accuracy(&records)?),
        attack_success_rate: Some(attack_success_rate(&records, AsrMode::CleanCorrect)?),
        asr_mode: AsrMode::CleanCorrect,
        map_table: map.table,
        map_truncated: map.truncated,
    })
}

/// One-off artifact evaluation outside a plan run: trains nothing, computes
/// the same row [`run_experiment`] would (budget and area derived from the
/// artifact itself, no training temperature).
pub fn evaluate_artifact(
    encoder: &EncoderHandle,
    probe: &DownstreamHead,
    eval_dataset: &Dataset,
    artifact: &NoiseArtifact,
    attack_name: &str,
    surrogate_name: &str,
    seed: u64,
) -> Result<EvalReport, PlanError> {
    let owned = OwnedEvalCtx::build(encoder, probe, eval_dataset, seed)?;
    artifact_row(
        &owned.ctx(),
        encoder,
        probe,
        artifact,
        attack_name,
        surrogate_name,
        artifact_param(artifact),
        None,
    )
}

/// Clean-baseline row: accuracy of the probe plus clean-query retrieval
/// quality, no attack applied.
pub fn baseline_row(
    encoder: &EncoderHandle,
    probe: &DownstreamHead,
    eval_dataset: &Dataset,
    seed: u64,
) -> Result<EvalReport, PlanError> {
    let owned = OwnedEvalCtx::build(encoder, probe, eval_dataset, seed)?;
    let map = retrieval_map_suite(
        &owned.clean_feats,
        &owned.labels,
        &owned.clean_feats,
        &owned.labels,
        &REPORT_KS,
        true,
    )?;
    Ok(EvalReport {
        encoder_id: encoder.id.clone(),
        surrogate: "none".to_string(),
        downstream: owned.downstream.clone(),
        mode: None,
        attack: "none".to_string(),
        defense: "none".to_string(),
        param: None,
        seed,
        tau: None,
        clean_accuracy: Some(fraction_equal(&owned.clean_preds, &owned.labels)),
        malicious_accuracy: None,
        attack_success_rate: None,
        asr_mode: AsrMode::CleanCorrect,
        map_table: map.table,
        map_truncated: map.truncated,
    })
}

/// Pre-training inputs an adversarial-training defense retrains from.
pub struct PretrainSpec<'a> {
    pub dataset: &'a Dataset,
    pub batch_size: usize,
}

/// Everything a defense evaluation may need beyond the encoder under test.
pub struct DefenseContext<'a> {
    /// Labeled set used whenever a defense has to retrain a head.
    pub probe_dataset: &'a Dataset,
    pub probe_epochs: usize,
    /// Required only by [`DefenseSpec::AdversarialTraining`].
    pub pretrain: Option<PretrainSpec<'a>>,
    pub seed: u64,
}

/// Metrics row for one defense applied against one artifact.
#[allow(clippy::too_many_arguments)]
fn defense_row(
    ctx: &EvalCtx<'_>,
    encoder: &EncoderHandle,
    probe: &DownstreamHead,
    spec: &DefenseSpec,
    apply_to: &str,
    artifact: &NoiseArtifact,
    surrogate: &str,
    dctx: &DefenseContext<'_>,
) -> Result<EvalReport, PlanError> {
    let (encoder_id, records) = match spec {
        DefenseSpec::Corruption { sigma } => {
            // The same noise field lands on the clean and attacked batch, so
            // the comparison is paired.
            let clean_c = gaussian_corrupt(ctx.clean_x, *sigma, dctx.seed)?;
            let adv_c = gaussian_corrupt(&artifact.apply(ctx.clean_x)?, *sigma, dctx.seed)?;
            let clean_preds = probe.predict(&encoder.forward_batch(&clean_c, ctx.mode)?)?;
            let adv_preds = probe.predict(&encoder.forward_batch(&adv_c, ctx.mode)?)?;
            (
                encoder.id.clone(),
                records_from(ctx.labels, &clean_preds, &adv_preds),
            )
        }
        DefenseSpec::Prune { rate } => {
            let pruned = prune_encoder(encoder, *rate)?;
            let head = train_linear_probe(&pruned, dctx.probe_dataset, dctx.probe_epochs, dctx.seed)?;
            let records = eval_records(ctx, &pruned, &head, artifact)?;
            (pruned.id.clone(), records)
        }
        DefenseSpec::Finetune { epochs, lr } => {
            let (tuned, head) =
                finetune_encoder(encoder, dctx.probe_dataset, *epochs, *lr, dctx.seed)?;
            let records = eval_records(ctx, &tuned, &head, artifact)?;
            (tuned.id.clone(), records)
        }
        DefenseSpec::AdversarialTraining {
            pgd_steps,
            pgd_epsilon,
            epochs,
        } => {
            let pretrain = dctx.pretrain.as_ref().ok_or_else(|| {
                PlanError::Parse(
                    "adversarial_training defense needs pre-training data".to_string(),
                )
            })?;
            let robust = adversarial_train(
                pretrain.dataset,
                *pgd_steps,
                *pgd_epsilon,
                *epochs,
                pretrain.batch_size,
                dctx.seed,
            )?;
            let head = train_linear_probe(&robust, dctx.probe_dataset, dctx.probe_epochs, dctx.seed)?;
            let records = eval_records(ctx, &robust, &head, artifact)?;
            (robust.id.clone(), records)
        }
    };
    Ok(EvalReport {
        encoder_id,
        surrogate: surrogate.to_string(),
        downstream: ctx.downstream.to_string(),
        mode: Some(artifact.mode),
        attack: apply_to.to_string(),
        defense: spec.kind().to_string(),
        param: Some(spec.param()),
        seed: dctx.seed,
        tau: None,
        clean_accuracy: Some(crate::evaluation::clean_accuracy(&records)?),
        malicious_accuracy: Some(malicious_accuracy(&records)?),
        attack_success_rate: Some(attack_success_rate(&records, AsrMode::CleanCorrect)?),
        asr_mode: AsrMode::CleanCorrect,
        map_table: BTreeMap::new(),
        map_truncated: false,
    })
}

/// One-off defense evaluation outside a plan run, producing the same row
/// [`run_experiment`] would.
pub fn evaluate_defense(
    encoder: &EncoderHandle,
    probe: &DownstreamHead,
    eval_dataset: &Dataset,
    spec: &DefenseSpec,
    apply_to: &str,
    artifact: &NoiseArtifact,
    surrogate_name: &str,
    dctx: &DefenseContext<'_>,
) -> Result<EvalReport, PlanError> {
    spec.validate()?;
    let owned = OwnedEvalCtx::build(encoder, probe, eval_dataset, dctx.seed)?;
    defense_row(
        &owned.ctx(),
        encoder,
        probe,
        spec,
        apply_to,
        artifact,
        surrogate_name,
        dctx,
    )
}

/// Clean and attacked predictions through a replacement encoder and head.
fn eval_records(
    ctx: &EvalCtx<'_>,
    encoder: &EncoderHandle,
    head: &DownstreamHead,
    artifact: &NoiseArtifact,
) -> Result<Vec<PredictionRecord>, PlanError> {
    let clean_preds = head.predict(&encoder.forward_batch(ctx.clean_x, ctx.mode)?)?;
    let adv_preds = head.predict(&encoder.forward_batch(&artifact.apply(ctx.clean_x)?, ctx.mode)?)?;
    Ok(records_from(ctx.labels, &clean_preds, &adv_preds))
}

fn encoder_cache_key(plan: &Plan, ds_name: &str) -> String {
    sha256_hex(
        format!(
            "encoder|{}|{:?}|{}|{}|{}|{}",
            plan.datasets[ds_name],
            plan.image_shape,
            plan.encoder.epochs,
            plan.encoder.batch_size,
            plan.seed,
            TOOL_VERSION,
        )
        .as_bytes(),
    )
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Unique per process and wall-clock instant; the plan digest ties the id
/// to what ran without making reruns collide.
fn fresh_run_id(plan_digest: &str) -> String {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let count = RUN_COUNTER.fetch_add(1, Ordering::Relaxed);
    let pid = std::process::id();
    sha256_hex(format!("{plan_digest}|{nanos}|{pid}|{count}").as_bytes())[..16].to_string()
}

fn digest_file(path: &Path) -> Result<String, PlanError> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Every regular file under `root`, as sorted `/`-joined relative paths.
fn walk_files(root: &Path) -> Result<Vec<String>, PlanError> {
    fn recurse(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                recurse(root, &path, out)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    recurse(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// Renders one report family from a finished run directory and registers
/// the new files in the manifest. Returns the paths written.
pub fn emit_report(run_dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>, PlanError> {
    let mut manifest = RunManifest::load(run_dir)?;
    if !manifest.outputs.contains_key(METRICS_FILE) {
        return Err(PlanError::Manifest(format!(
            "{METRICS_FILE} is not registered in the manifest"
        )));
    }
    let rows = eval_reports_from_csv(&fs::read_to_string(run_dir.join(METRICS_FILE))?)?;
    let mut written: Vec<PathBuf> = Vec::new();

    match format {
        ReportFormat::Csv => {
            let path = run_dir.join("report.csv");
            fs::write(&path, eval_reports_to_csv(&rows))?;
            written.push(path);
        }
        ReportFormat::MarkdownTable => {
            let path = run_dir.join("report.md");
            fs::write(&path, markdown_grid(&manifest.plan.name, &rows))?;
            written.push(path);
        }
        ReportFormat::PngCurves => {
            written.extend(png_curves(run_dir, &rows)?);
        }
    }

    for path in &written {
        let rel = path
            .strip_prefix(run_dir)
            .expect("reports are written inside the run directory")
            .to_string_lossy()
            .into_owned();
        let digest = digest_file(path)?;
        manifest.outputs.insert(rel, digest);
    }
    manifest.store(run_dir)?;
    Ok(written)
}

/// Attack-success grid: one row per evaluated setting, one column per
/// encoder identity seen in the metrics.
fn markdown_grid(plan_name: &str, rows: &[EvalReport]) -> String {
    let mut encoders: Vec<String> = Vec::new();
    let mut settings: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    for row in rows {
        let Some(asr) = row.attack_success_rate else {
            continue;
        };
        let setting = if row.defense == "none" {
            row.attack.clone()
        } else {
            format!(
                "{}+{}({})",
                row.attack,
                row.defense,
                row.param.map(|p| p.to_string()).unwrap_or_default()
            )
        };
        if !encoders.contains(&row.encoder_id) {
            encoders.push(row.encoder_id.clone());
        }
        if !settings.contains(&setting) {
            settings.push(setting.clone());
        }
        cells.insert((setting, row.encoder_id.clone()), asr);
    }

    let short = |id: &str| id.chars().take(12).collect::<String>();
    let mut out = String::new();
    out.push_str(&format!("# {plan_name}: attack success rate\n\n"));
    out.push_str("| setting |");
    for enc in &encoders {
        out.push_str(&format!(" {} |", short(enc)));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &encoders {
        out.push_str("---|");
    }
    out.push('\n');
    for setting in &settings {
        out.push_str(&format!("| {setting} |"));
        for enc in &encoders {
            match cells.get(&(setting.clone(), enc.clone())) {
                Some(asr) => out.push_str(&format!(" {asr:.4} |")),
                None => out.push_str("  |"),
            }
        }
        out.push('\n');
    }
    out
}

/// One PNG per (sweep group, metric): attack rows grouped by mode and swept
/// over their budget, defense rows grouped by (attack, defense kind) and
/// swept over the defense parameter.
fn png_curves(run_dir: &Path, rows: &[EvalReport]) -> Result<Vec<PathBuf>, PlanError> {
    let mut groups: BTreeMap<(String, &'static str), Vec<&EvalReport>> = BTreeMap::new();
    for row in rows {
        if row.param.is_none() {
            continue;
        }
        if row.defense == "none" {
            let Some(mode) = row.mode else { continue };
            if row.attack == "none" || row.attack.ends_with("-random") {
                continue;
            }
            let (group, x_label) = match mode {
                Mode::Perturbation => ("attack-perturbation".to_string(), "EPSILON"),
                Mode::Patch => ("attack-patch".to_string(), "PATCH FRACTION"),
            };
            groups.entry((group, x_label)).or_default().push(row);
        } else {
            let x_label = match row.defense.as_str() {
                "corruption" => "SIGMA",
                "prune" => "PRUNE RATE",
                "finetune" => "EPOCHS",
                "adversarial_training" => "PGD EPSILON",
                _ => "PARAM",
            };
            groups
                .entry((format!("{}-{}", row.attack, row.defense), x_label))
                .or_default()
                .push(row);
        }
    }

    let metrics: [(&str, &str, fn(&EvalReport) -> Option<f64>); 3] = [
        ("clean_accuracy", "CLEAN ACC", |r| r.clean_accuracy),
        ("malicious_accuracy", "MA", |r| r.malicious_accuracy),
        ("attack_success_rate", "ASR", |r| r.attack_success_rate),
    ];
    let mut written = Vec::new();
    for ((group, x_label), members) in &groups {
        for (metric, metric_label, getter) in metrics {
            let mut points: Vec<(f64, f64)> = members
                .iter()
                .filter_map(|r| getter(r).map(|v| (r.param.expect("filtered"), v)))
                .collect();
            if points.is_empty() {
                continue;
            }
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path = run_dir.join(format!("curves_{group}_{metric}.png"));
            save_curves(
                &PlotSpec {
                    title: format!("{} VS {}", metric_label, x_label),
                    x_label: x_label.to_string(),
                    y_label: metric_label.to_string(),
                },
                &[Series {
                    name: metric_label.to_string(),
                    points,
                }],
                &path,
            )?;
            written.push(path);
        }
    }
    Ok(written)
}
