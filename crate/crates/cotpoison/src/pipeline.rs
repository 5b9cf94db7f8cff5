//! End-to-end orchestration from a single JSON config.
//!
//! A full `poison` run executes: load source corpus, select carriers, forge
//! the adversarial target set, integrate traces (concat or merge), assemble
//! and clean-label-check the poisoned corpus, then any configured
//! evaluations and defenses. Every stage records input/output SHA-256
//! hashes into a [`RunManifest`]; with the mock backend the whole output
//! directory is byte-reproducible for a fixed config and seed. A stage
//! failure aborts the run, marks downstream stages not-run, and still
//! persists the manifest next to whatever partial outputs exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::mock::MockBackend;
use crate::backend::remote::{RemoteBackend, RemoteConfig};
use crate::backend::{Gateway, RetryPolicy};
use crate::corpus::{
    load_corpus, save_corpus, select_carriers, validate_clean_label, CarrierSelection,
    CarrierSelector, Corpus, FieldMap,
};
use crate::evaluator::{
    compute_accuracy, compute_asr, run_queries, EvalReport, FailedPolicy, GraderTemplate,
};
use crate::forge::{forge_targets, BehaviorSpec, ForgePolicy, QuerySuite, SuitePurpose};
use crate::hashing::{sha256_file, sha256_hex};
use crate::integrator::{
    assemble_poisoned, integrate_concat, integrate_merge, ConcatPolicy, IntegrationRecord,
    IntegrationStrategy, MergePolicy, ValidatorOutcomes,
};
use crate::sentinel::{
    autorate_detect, ppl_detect, DetectionReport, FlagDirection, DEFAULT_AUTORATER_INSTRUCTION,
    DEFAULT_TARGET_FPRS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
    #[error("missing stage output '{0}'")]
    MissingStageOutput(String),
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Exactly one of `p` (absolute count) or `rate` (fraction of m, rounded to
/// the nearest integer) must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PoisonAmount {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

impl PoisonAmount {
    pub fn validate(&self) -> Result<(), PipelineError> {
        match (self.p, self.rate) {
            (Some(_), None) => Ok(()),
            (None, Some(rate)) if (0.0..=1.0).contains(&rate) => Ok(()),
            (None, Some(rate)) => Err(PipelineError::Config(format!(
                "rate {rate} outside [0, 1]"
            ))),
            (Some(_), Some(_)) => Err(PipelineError::Config(
                "give either p or rate, not both".into(),
            )),
            (None, None) => Err(PipelineError::Config("one of p or rate is required".into())),
        }
    }

    pub fn resolve(&self, m: usize) -> usize {
        match (self.p, self.rate) {
            (Some(p), _) => p,
            (None, Some(rate)) => (rate * m as f64).round() as usize,
            (None, None) => 0,
        }
    }
}

/// Integration strategy plus its policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StrategyConfig {
    Concat {
        #[serde(default)]
        policy: ConcatPolicy,
    },
    Merge {
        #[serde(default)]
        policy: MergePolicy,
    },
}

impl StrategyConfig {
    pub fn strategy(&self) -> IntegrationStrategy {
        match self {
            StrategyConfig::Concat { .. } => IntegrationStrategy::Concat,
            StrategyConfig::Merge { .. } => IntegrationStrategy::Merge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Remote,
}

/// Which backend to build and how hard to drive it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendProfile {
    pub kind: BackendKind,
    /// Mock script path; required for the mock backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Remote settings; falls back to environment variables when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteConfig>,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_in_flight() -> usize {
    8
}

impl BackendProfile {
    pub fn build_gateway(&self) -> Result<Gateway, PipelineError> {
        let backend: Arc<dyn crate::backend::TextBackend> = match self.kind {
            BackendKind::Mock => {
                let Some(script) = &self.script else {
                    return Err(PipelineError::Config(
                        "mock backend requires a script path".into(),
                    ));
                };
                Arc::new(
                    MockBackend::from_file(script)
                        .map_err(|e| PipelineError::Config(e.to_string()))?,
                )
            }
            BackendKind::Remote => {
                let config = match &self.remote {
                    Some(config) => config.clone(),
                    None => RemoteConfig::from_env()
                        .map_err(|e| PipelineError::Config(e.to_string()))?,
                };
                Arc::new(
                    RemoteBackend::new(config).map_err(|e| PipelineError::Config(e.to_string()))?,
                )
            }
        };
        Ok(Gateway::new(backend)
            .with_retry(self.retry)
            .with_in_flight(self.in_flight))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SuitePaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub non_target: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    #[serde(default)]
    pub perplexity: bool,
    #[serde(default)]
    pub autorater: bool,
    #[serde(default = "default_target_fprs")]
    pub target_fprs: Vec<f64>,
    /// Judge instruction file; the built-in consistency instruction is used
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autorater_instruction: Option<PathBuf>,
}

fn default_target_fprs() -> Vec<f64> {
    DEFAULT_TARGET_FPRS.to_vec()
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            perplexity: false,
            autorater: false,
            target_fprs: default_target_fprs(),
            autorater_instruction: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    /// System instruction sent with evaluation queries; empty by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_instruction: Option<String>,
    #[serde(default)]
    pub failed_policy: FailedPolicy,
    #[serde(default)]
    pub grader: GraderTemplate,
    #[serde(default)]
    pub fail_fast: bool,
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub source_corpus: PathBuf,
    #[serde(default)]
    pub field_map: FieldMap,
    pub behavior_spec: PathBuf,
    pub strategy: StrategyConfig,
    pub poison: PoisonAmount,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_selector")]
    pub selector: CarrierSelector,
    /// Queries for the adversarial target set; defaults to the target eval
    /// suite when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forge_queries: Option<PathBuf>,
    #[serde(default)]
    pub suites: SuitePaths,
    #[serde(default)]
    pub defenses: DefenseConfig,
    pub backend: BackendProfile,
    pub output_dir: PathBuf,
    /// Fixed run-directory name; a timestamped name is generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_label: Option<String>,
    #[serde(default)]
    pub forge: ForgePolicy,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Shuffle the poisoned corpus (seeded) before saving.
    #[serde(default)]
    pub shuffle: bool,
}

fn default_selector() -> CarrierSelector {
    CarrierSelector::UniformRandom
}

impl PipelineConfig {
    /// Load a config, resolving relative paths against the config file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut config: PipelineConfig = serde_json::from_str(&raw)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        fn resolve(base: &Path, p: &mut PathBuf) {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        resolve(base, &mut self.source_corpus);
        resolve(base, &mut self.behavior_spec);
        resolve(base, &mut self.output_dir);
        if let Some(p) = self.forge_queries.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = self.suites.target.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = self.suites.non_target.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = self.suites.utility.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = self.backend.script.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = self.defenses.autorater_instruction.as_mut() {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.poison.validate()?;
        let mut required: Vec<&Path> = vec![&self.source_corpus, &self.behavior_spec];
        if let Some(p) = &self.forge_queries {
            required.push(p);
        }
        for p in [
            &self.suites.target,
            &self.suites.non_target,
            &self.suites.utility,
        ].into_iter().flatten() {
            required.push(p);
        }
        if self.backend.kind == BackendKind::Mock {
            if let Some(p) = &self.backend.script {
                required.push(p);
            }
        }
        if let Some(p) = &self.defenses.autorater_instruction {
            required.push(p);
        }
        for path in required {
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "referenced file does not exist: {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Hash of the materialized config with the output location normalized
    /// out, so runs of the same experiment into different directories share
    /// a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut normalized = self.clone();
        normalized.output_dir = PathBuf::from("<out>");
        normalized.run_label = None;
        sha256_hex(
            serde_json::to_string(&normalized)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Completed,
    Failed,
    Skipped,
    NotRun,
}

impl std::fmt::Display for StageStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageStatus::Completed => write!(f, "completed"),
            StageStatus::Failed => write!(f, "failed"),
            StageStatus::Skipped => write!(f, "skipped"),
            StageStatus::NotRun => write!(f, "not-run"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Input hashes by label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    /// Output-file hashes by file name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, String>,
    /// Failure or skip reason.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// Wall-clock duration; excluded from the persisted manifest so reruns
    /// of the same config produce byte-identical output directories.
    #[serde(skip)]
    pub duration_ms: u128,
}

/// Deterministic record of one run: config fingerprint, backend identity,
/// and per-stage input/output hashes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub config_fingerprint: String,
    pub backend_id: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn new(config: &PipelineConfig, backend_id: String, planned: &[&str]) -> Self {
        RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config_fingerprint: config.fingerprint(),
            backend_id,
            seed: config.seed,
            stages: planned
                .iter()
                .map(|name| StageRecord {
                    name: (*name).to_string(),
                    status: StageStatus::NotRun,
                    inputs: BTreeMap::new(),
                    outputs: BTreeMap::new(),
                    detail: None,
                    duration_ms: 0,
                })
                .collect(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn stage_mut(&mut self, name: &str) -> &mut StageRecord {
        self.stages
            .iter_mut()
            .find(|s| s.name == name)
            .expect("stage was planned")
    }

    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(MANIFEST_FILE);
        let raw = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&raw).map_err(|e| PipelineError::Config(format!("bad manifest: {e}")))
    }

    fn persist(&self, run_dir: &Path) -> Result<(), PipelineError> {
        let path = run_dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, body).map_err(|e| io_err(&path, e))
    }
}

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CARRIERS_FILE: &str = "carriers.json";
pub const TARGET_SET_FILE: &str = "d_tgt.jsonl";
pub const POISONED_SET_FILE: &str = "d_psn.jsonl";
pub const AUDIT_FILE: &str = "integration_audit.jsonl";

const STAGE_LOAD: &str = "load-source";
const STAGE_SELECT: &str = "select-carriers";
const STAGE_FORGE: &str = "forge-targets";
const STAGE_INTEGRATE: &str = "integrate";
const STAGE_ASSEMBLE: &str = "assemble";
const STAGE_EVAL_TARGET: &str = "eval-target";
const STAGE_EVAL_NON_TARGET: &str = "eval-non-target";
const STAGE_EVAL_UTILITY: &str = "eval-utility";
const STAGE_DEFEND_PPL: &str = "defend-perplexity";
const STAGE_DEFEND_JUDGE: &str = "defend-autorater";

fn eval_report_file(stage: &str) -> String {
    format!("{}.json", stage.replace('-', "_"))
}

/// Create the run directory: `run_label` verbatim, or a timestamped name.
/// The directory must be fresh; an existing one is a config error.
fn create_run_dir(config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(&config.output_dir).map_err(|e| io_err(&config.output_dir, e))?;
    let name = match &config.run_label {
        Some(label) => label.clone(),
        None => {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let mut candidate = format!("run-{secs}-{}", &config.fingerprint()[..8]);
            let mut counter = 1;
            while config.output_dir.join(&candidate).exists() {
                counter += 1;
                candidate = format!("run-{secs}-{}-{counter}", &config.fingerprint()[..8]);
            }
            candidate
        }
    };
    let dir = config.output_dir.join(name);
    if dir.exists() {
        return Err(PipelineError::Config(format!(
            "run directory already exists: {}",
            dir.display()
        )));
    }
    std::fs::create_dir(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

struct StageOutcome {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    skipped: Option<String>,
}

impl StageOutcome {
    fn new() -> Self {
        StageOutcome {
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            skipped: None,
        }
    }

    fn input_file(&mut self, label: &str, path: &Path) -> Result<(), String> {
        let hash = sha256_file(path).map_err(|e| format!("hashing {}: {e}", path.display()))?;
        self.inputs.insert(label.to_string(), hash);
        Ok(())
    }

    fn output_file(&mut self, run_dir: &Path, name: &str) -> Result<(), String> {
        let path = run_dir.join(name);
        let hash = sha256_file(&path).map_err(|e| format!("hashing {}: {e}", path.display()))?;
        self.outputs.insert(name.to_string(), hash);
        Ok(())
    }
}

fn run_stage<T>(
    manifest: &mut RunManifest,
    name: &str,
    f: impl FnOnce(&mut StageOutcome) -> Result<T, String>,
) -> Result<T, PipelineError> {
    let started = Instant::now();
    let mut outcome = StageOutcome::new();
    let result = f(&mut outcome);
    let record = manifest.stage_mut(name);
    record.duration_ms = started.elapsed().as_millis();
    record.inputs = outcome.inputs;
    record.outputs = outcome.outputs;
    match result {
        Ok(value) => {
            if let Some(reason) = outcome.skipped {
                record.status = StageStatus::Skipped;
                record.detail = Some(reason);
            } else {
                record.status = StageStatus::Completed;
            }
            Ok(value)
        }
        Err(message) => {
            record.status = StageStatus::Failed;
            record.detail = Some(message.clone());
            Err(PipelineError::Stage {
                stage: name.to_string(),
                message,
            })
        }
    }
}

fn write_file(run_dir: &Path, name: &str, body: &str) -> Result<(), String> {
    std::fs::write(run_dir.join(name), body.as_bytes())
        .map_err(|e| format!("writing {name}: {e}"))
}

fn write_json<T: Serialize>(run_dir: &Path, name: &str, value: &T) -> Result<(), String> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    write_file(run_dir, name, &(body + "\n"))
}

fn planned_stages(config: &PipelineConfig) -> Vec<&'static str> {
    let mut stages = vec![
        STAGE_LOAD,
        STAGE_SELECT,
        STAGE_FORGE,
        STAGE_INTEGRATE,
        STAGE_ASSEMBLE,
    ];
    if config.suites.target.is_some() {
        stages.push(STAGE_EVAL_TARGET);
    }
    if config.suites.non_target.is_some() {
        stages.push(STAGE_EVAL_NON_TARGET);
    }
    if config.suites.utility.is_some() {
        stages.push(STAGE_EVAL_UTILITY);
    }
    if config.defenses.perplexity {
        stages.push(STAGE_DEFEND_PPL);
    }
    if config.defenses.autorater {
        stages.push(STAGE_DEFEND_JUDGE);
    }
    stages
}

/// Run the full poisoning pipeline. On stage failure the manifest is still
/// written (failed stage marked, downstream stages not-run) before the
/// error propagates. Returns the manifest and the run directory.
pub fn run_pipeline(config: &PipelineConfig) -> Result<(RunManifest, PathBuf), PipelineError> {
    run_selected(config, PipelineScope::Full)
}

/// Run only corpus loading, carrier selection, and target-set forging.
pub fn run_forge(config: &PipelineConfig) -> Result<(RunManifest, PathBuf), PipelineError> {
    run_selected(config, PipelineScope::ForgeOnly)
}

/// Run only the configured evaluation suites against the backend.
pub fn run_eval(config: &PipelineConfig) -> Result<(RunManifest, PathBuf), PipelineError> {
    run_selected(config, PipelineScope::EvalOnly)
}

#[derive(Clone, Copy, PartialEq)]
enum PipelineScope {
    Full,
    ForgeOnly,
    EvalOnly,
}

fn run_selected(
    config: &PipelineConfig,
    scope: PipelineScope,
) -> Result<(RunManifest, PathBuf), PipelineError> {
    config.validate()?;
    let gateway = config.backend.build_gateway()?;
    let run_dir = create_run_dir(config)?;

    let planned: Vec<&'static str> = match scope {
        PipelineScope::Full => planned_stages(config),
        PipelineScope::ForgeOnly => vec![STAGE_LOAD, STAGE_SELECT, STAGE_FORGE],
        PipelineScope::EvalOnly => planned_stages(config)
            .into_iter()
            .filter(|s| s.starts_with("eval-"))
            .collect(),
    };
    let mut manifest = RunManifest::new(config, gateway.backend_id(), &planned);

    let result = execute(config, scope, &gateway, &run_dir, &mut manifest);
    manifest.persist(&run_dir)?;
    result.map(|_| (manifest.clone(), run_dir))
}

fn execute(
    config: &PipelineConfig,
    scope: PipelineScope,
    gateway: &Gateway,
    run_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(), PipelineError> {
    let behavior = BehaviorSpec::load(&config.behavior_spec)
        .map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut source: Option<Corpus> = None;
    let mut selection: Option<CarrierSelection> = None;
    let mut target_set: Option<Corpus> = None;
    let mut poisoned: Option<Corpus> = None;

    if scope != PipelineScope::EvalOnly {
        let corpus = run_stage(manifest, STAGE_LOAD, |outcome| {
            outcome.input_file("source_corpus", &config.source_corpus)?;
            load_corpus(&config.source_corpus, &config.field_map).map_err(|e| e.to_string())
        })?;
        let m = corpus.len();
        let p = config.poison.resolve(m);
        source = Some(corpus);

        let sel = run_stage(manifest, STAGE_SELECT, |outcome| {
            let sel = select_carriers(source.as_ref().unwrap(), &config.selector, p, config.seed)
                .map_err(|e| e.to_string())?;
            write_json(run_dir, CARRIERS_FILE, &sel)?;
            outcome.output_file(run_dir, CARRIERS_FILE)?;
            Ok(sel)
        })?;
        selection = Some(sel);

        let forged = run_stage(manifest, STAGE_FORGE, |outcome| {
            if p == 0 {
                outcome.skipped = Some("p=0: nothing to forge".into());
                return Ok(None);
            }
            let queries_path = config
                .forge_queries
                .as_ref()
                .or(config.suites.target.as_ref())
                .ok_or("p > 0 requires forge_queries or a target suite")?;
            outcome.input_file("forge_queries", queries_path)?;
            let suite =
                QuerySuite::load(queries_path, SuitePurpose::Target).map_err(|e| e.to_string())?;
            let suite = suite.take(p).map_err(|e| e.to_string())?;
            let corpus = forge_targets(&suite, &behavior, gateway, &config.forge)
                .map_err(|e| e.to_string())?;
            save_corpus(&corpus, &run_dir.join(TARGET_SET_FILE)).map_err(|e| e.to_string())?;
            outcome.output_file(run_dir, TARGET_SET_FILE)?;
            outcome.output_file(run_dir, "d_tgt.manifest.json")?;
            Ok(Some(corpus))
        })?;
        target_set = forged;
    }

    if scope == PipelineScope::ForgeOnly {
        return Ok(());
    }

    if scope == PipelineScope::Full {
        let source = source.as_ref().unwrap();
        let selection = selection.as_ref().unwrap();

        let integrated = run_stage(manifest, STAGE_INTEGRATE, |outcome| {
            if selection.carrier_ids.is_empty() {
                outcome.skipped = Some("p=0: nothing to integrate".into());
                write_file(run_dir, AUDIT_FILE, "")?;
                outcome.output_file(run_dir, AUDIT_FILE)?;
                return Ok(BTreeMap::new());
            }
            let adv = target_set.as_ref().expect("forged when p > 0");
            // Carrier i pairs with the i-th forged target sample.
            let pairs: Vec<(usize, &crate::corpus::ReasoningSample)> = selection
                .carrier_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (i, source.get(id).expect("carrier id from this corpus")))
                .collect();
            let results: Vec<Result<(String, IntegrationRecord), String>> = match &config.strategy
            {
                StrategyConfig::Concat { policy } => pairs
                    .iter()
                    .map(|(i, carrier)| {
                        let c_star = integrate_concat(&carrier.cot, &adv.samples[*i].cot, policy)
                            .map_err(|e| e.to_string())?;
                        Ok((
                            c_star,
                            IntegrationRecord {
                                carrier_id: carrier.id.clone(),
                                strategy: IntegrationStrategy::Concat,
                                attempts: 1,
                                validator_outcomes: BTreeMap::<String, ValidatorOutcomes>::new(),
                            },
                        ))
                    })
                    .collect(),
                StrategyConfig::Merge { policy } => {
                    gateway.map_concurrent(&pairs, |_, (i, carrier)| {
                        integrate_merge(carrier, &adv.samples[*i].cot, &behavior, gateway, policy)
                            .map_err(|e| e.to_string())
                    })
                }
            };

            let mut audit = String::new();
            let mut traces = BTreeMap::new();
            let mut first_error: Option<String> = None;
            for (pair, result) in pairs.iter().zip(results) {
                match result {
                    Ok((c_star, record)) => {
                        audit.push_str(&serde_json::to_string(&record).expect("record serializes"));
                        audit.push('\n');
                        traces.insert(pair.1.id.clone(), c_star);
                    }
                    Err(message) => {
                        if first_error.is_none() {
                            first_error = Some(message);
                        }
                    }
                }
            }
            write_file(run_dir, AUDIT_FILE, &audit)?;
            outcome.output_file(run_dir, AUDIT_FILE)?;
            match first_error {
                None => Ok(traces),
                Some(message) => Err(message),
            }
        })?;

        let assembled = run_stage(manifest, STAGE_ASSEMBLE, |outcome| {
            let corpus =
                assemble_poisoned(source, selection, &integrated, config.strategy.strategy())
                    .map_err(|e| e.to_string())?;
            // The clean-label contract is enforced before anything
            // downstream sees the corpus.
            let violations = validate_clean_label(source, &corpus).map_err(|e| e.to_string())?;
            if !violations.is_empty() {
                return Err(format!(
                    "clean-label check failed with {} violations; first: {}",
                    violations.len(),
                    violations[0]
                ));
            }
            let to_save = if config.shuffle {
                corpus.shuffled(config.seed)
            } else {
                corpus
            };
            save_corpus(&to_save, &run_dir.join(POISONED_SET_FILE)).map_err(|e| e.to_string())?;
            outcome.output_file(run_dir, POISONED_SET_FILE)?;
            outcome.output_file(run_dir, "d_psn.manifest.json")?;
            Ok(to_save)
        })?;
        poisoned = Some(assembled);
    }

    let eval_specs: [(&str, &Option<PathBuf>, SuitePurpose); 3] = [
        (STAGE_EVAL_TARGET, &config.suites.target, SuitePurpose::Target),
        (
            STAGE_EVAL_NON_TARGET,
            &config.suites.non_target,
            SuitePurpose::NonTarget,
        ),
        (
            STAGE_EVAL_UTILITY,
            &config.suites.utility,
            SuitePurpose::Utility,
        ),
    ];
    for (stage, path, purpose) in eval_specs {
        let Some(path) = path else { continue };
        run_stage(manifest, stage, |outcome| {
            outcome.input_file("suite", path)?;
            let suite = QuerySuite::load(path, purpose).map_err(|e| e.to_string())?;
            let results = run_queries(
                &suite,
                gateway,
                config.eval.system_instruction.as_deref(),
                &config.forge.delimiters,
                config.eval.fail_fast,
            )
            .map_err(|e| e.to_string())?;
            let report: EvalReport = if purpose == SuitePurpose::Utility {
                compute_accuracy(
                    &results,
                    &suite,
                    &config.eval.grader,
                    config.eval.failed_policy,
                )
                .map_err(|e| e.to_string())?
            } else {
                compute_asr(
                    &results,
                    &behavior.marker,
                    behavior.field_policy,
                    purpose,
                    config.eval.failed_policy,
                )
                .map_err(|e| e.to_string())?
            };
            let file = eval_report_file(stage);
            write_json(run_dir, &file, &report)?;
            outcome.output_file(run_dir, &file)?;
            Ok(())
        })?;
    }

    if scope == PipelineScope::Full && (config.defenses.perplexity || config.defenses.autorater) {
        let corpus = poisoned.as_ref().expect("assembled in full scope");
        if config.defenses.perplexity {
            run_stage(manifest, STAGE_DEFEND_PPL, |outcome| {
                let report = ppl_detect(
                    corpus,
                    gateway,
                    FlagDirection::FlagIfGe,
                    &config.defenses.target_fprs,
                )
                .map_err(|e| e.to_string())?;
                write_detection(run_dir, outcome, "detect_perplexity", &report)
            })?;
        }
        if config.defenses.autorater {
            run_stage(manifest, STAGE_DEFEND_JUDGE, |outcome| {
                let instruction = match &config.defenses.autorater_instruction {
                    Some(path) => {
                        outcome.input_file("autorater_instruction", path)?;
                        std::fs::read_to_string(path)
                            .map_err(|e| format!("reading {}: {e}", path.display()))?
                    }
                    None => DEFAULT_AUTORATER_INSTRUCTION.to_string(),
                };
                let report = autorate_detect(
                    corpus,
                    gateway,
                    &instruction,
                    &config.backend.retry,
                    &config.defenses.target_fprs,
                )
                .map_err(|e| e.to_string())?;
                write_detection(run_dir, outcome, "detect_autorater", &report)
            })?;
        }
    }

    Ok(())
}

fn write_detection(
    run_dir: &Path,
    outcome: &mut StageOutcome,
    basename: &str,
    report: &DetectionReport,
) -> Result<(), String> {
    let json_name = format!("{basename}.json");
    let csv_name = format!("{basename}.csv");
    write_json(run_dir, &json_name, report)?;
    write_file(run_dir, &csv_name, &report.score_csv())?;
    outcome.output_file(run_dir, &json_name)?;
    outcome.output_file(run_dir, &csv_name)?;
    Ok(())
}

/// Run one defense over an existing labeled corpus, writing the detection
/// report and score CSV into a fresh run directory.
pub fn run_defend(
    config: &PipelineConfig,
    detector: crate::sentinel::DetectorKind,
    data: &Path,
) -> Result<(RunManifest, PathBuf), PipelineError> {
    let gateway = config.backend.build_gateway()?;
    let run_dir = create_run_dir(config)?;
    let stage_name = match detector {
        crate::sentinel::DetectorKind::Perplexity => STAGE_DEFEND_PPL,
        crate::sentinel::DetectorKind::Autorater => STAGE_DEFEND_JUDGE,
    };
    let mut manifest = RunManifest::new(config, gateway.backend_id(), &[stage_name]);

    let result = run_stage(&mut manifest, stage_name, |outcome| {
        outcome.input_file("data", data)?;
        let corpus = load_corpus(data, &config.field_map).map_err(|e| e.to_string())?;
        match detector {
            crate::sentinel::DetectorKind::Perplexity => {
                let report = ppl_detect(
                    &corpus,
                    &gateway,
                    FlagDirection::FlagIfGe,
                    &config.defenses.target_fprs,
                )
                .map_err(|e| e.to_string())?;
                write_detection(&run_dir, outcome, "detect_perplexity", &report)
            }
            crate::sentinel::DetectorKind::Autorater => {
                let instruction = match &config.defenses.autorater_instruction {
                    Some(path) => std::fs::read_to_string(path)
                        .map_err(|e| format!("reading {}: {e}", path.display()))?,
                    None => DEFAULT_AUTORATER_INSTRUCTION.to_string(),
                };
                let report = autorate_detect(
                    &corpus,
                    &gateway,
                    &instruction,
                    &config.backend.retry,
                    &config.defenses.target_fprs,
                )
                .map_err(|e| e.to_string())?;
                write_detection(&run_dir, outcome, "detect_autorater", &report)
            }
        }
    });
    manifest.persist(&run_dir)?;
    result.map(|_| (manifest, run_dir))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|_| PipelineError::MissingStageOutput(path.display().to_string()))?;
    serde_json::from_str(&raw)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn eval_section(
    manifest: &RunManifest,
    run_dir: &Path,
    stage: &str,
    title: &str,
) -> Result<String, PipelineError> {
    match manifest.stage(stage) {
        Some(record) if record.status == StageStatus::Completed => {
            let report: EvalReport = read_json(&run_dir.join(eval_report_file(stage)))?;
            Ok(format!(
                "  {title}: {:.4} ({}/{}, {} failed)\n",
                report.rate,
                report.hits,
                report.total,
                report.failed_ids.len()
            ))
        }
        Some(record) => Ok(format!("  {title}: not run (stage {})\n", record.status)),
        None => Ok(String::new()),
    }
}

/// Build the human-readable run summary from persisted stage outputs and
/// write it to `summary.txt` in the run directory.
pub fn emit_report(run_dir: &Path) -> Result<String, PipelineError> {
    let manifest = RunManifest::load(run_dir)?;
    let mut out = String::new();
    out.push_str("poisoning run summary\n");
    out.push_str("=====================\n");
    out.push_str(&format!("toolkit version: {}\n", manifest.toolkit_version));
    out.push_str(&format!(
        "config fingerprint: {}\n",
        manifest.config_fingerprint
    ));
    out.push_str(&format!("backend: {}\n", manifest.backend_id));
    out.push_str(&format!("seed: {}\n\n", manifest.seed));

    out.push_str("stages:\n");
    for record in &manifest.stages {
        match (&record.status, &record.detail) {
            (StageStatus::Completed, _) => {
                out.push_str(&format!("  {}: completed\n", record.name))
            }
            (status, Some(detail)) => {
                out.push_str(&format!("  {}: {status} ({detail})\n", record.name))
            }
            (status, None) => out.push_str(&format!("  {}: {status}\n", record.name)),
        }
    }
    out.push('\n');

    if let Some(record) = manifest.stage(STAGE_ASSEMBLE) {
        if record.status == StageStatus::Completed {
            let sidecar: crate::corpus::CorpusManifest =
                read_json(&run_dir.join("d_psn.manifest.json"))?;
            let rate = if sidecar.total_count > 0 {
                sidecar.poisoned_count as f64 / sidecar.total_count as f64
            } else {
                0.0
            };
            out.push_str(&format!(
                "poisoning: m={}, p={}, rate={:.4}, shuffled={}\n\n",
                sidecar.total_count, sidecar.poisoned_count, rate, sidecar.shuffled
            ));
        } else {
            out.push_str(&format!(
                "poisoning: not available (stage {})\n\n",
                record.status
            ));
        }
    }

    let mut metrics = String::new();
    metrics.push_str(&eval_section(&manifest, run_dir, STAGE_EVAL_TARGET, "target ASR")?);
    metrics.push_str(&eval_section(
        &manifest,
        run_dir,
        STAGE_EVAL_NON_TARGET,
        "non-target ASR",
    )?);
    metrics.push_str(&eval_section(
        &manifest,
        run_dir,
        STAGE_EVAL_UTILITY,
        "utility accuracy",
    )?);
    if !metrics.is_empty() {
        out.push_str("metrics:\n");
        out.push_str(&metrics);
        out.push('\n');
    }

    let mut defenses = String::new();
    for (stage, basename) in [
        (STAGE_DEFEND_PPL, "detect_perplexity"),
        (STAGE_DEFEND_JUDGE, "detect_autorater"),
    ] {
        match manifest.stage(stage) {
            Some(record) if record.status == StageStatus::Completed => {
                let report: DetectionReport = read_json(&run_dir.join(format!("{basename}.json")))?;
                defenses.push_str(&report.operating_table());
                defenses.push('\n');
            }
            Some(record) => {
                defenses.push_str(&format!("  {stage}: not run (stage {})\n", record.status));
            }
            None => {}
        }
    }
    if !defenses.is_empty() {
        out.push_str("defenses:\n");
        out.push_str(&defenses);
    }

    std::fs::write(run_dir.join(SUMMARY_FILE), out.as_bytes())
        .map_err(|e| io_err(&run_dir.join(SUMMARY_FILE), e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poison_amount_requires_exactly_one() {
        assert!(PoisonAmount {
            p: Some(10),
            rate: None
        }
        .validate()
        .is_ok());
        assert!(PoisonAmount {
            p: None,
            rate: Some(0.01)
        }
        .validate()
        .is_ok());
        assert!(PoisonAmount {
            p: Some(1),
            rate: Some(0.5)
        }
        .validate()
        .is_err());
        assert!(PoisonAmount::default().validate().is_err());
        assert!(PoisonAmount {
            p: None,
            rate: Some(1.5)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rate_resolves_by_rounding() {
        let amount = |rate: f64| PoisonAmount {
            p: None,
            rate: Some(rate),
        };
        assert_eq!(amount(0.01).resolve(1000), 10);
        assert_eq!(amount(0.02).resolve(20), 0); // round(0.4)
        assert_eq!(amount(0.05).resolve(100), 5);
        assert_eq!(amount(0.0).resolve(1000), 0);
        assert_eq!(
            PoisonAmount {
                p: Some(7),
                rate: None
            }
            .resolve(1000),
            7
        );
    }

    #[test]
    fn fingerprint_ignores_output_location() {
        let base = PipelineConfig {
            source_corpus: "src.jsonl".into(),
            field_map: FieldMap::default(),
            behavior_spec: "behavior.json".into(),
            strategy: StrategyConfig::Concat {
                policy: ConcatPolicy::default(),
            },
            poison: PoisonAmount {
                p: Some(1),
                rate: None,
            },
            seed: 7,
            selector: CarrierSelector::UniformRandom,
            forge_queries: None,
            suites: SuitePaths::default(),
            defenses: DefenseConfig::default(),
            backend: BackendProfile {
                kind: BackendKind::Mock,
                script: Some("mock.json".into()),
                remote: None,
                in_flight: 8,
                retry: RetryPolicy::default(),
            },
            output_dir: "out-a".into(),
            run_label: Some("run-a".into()),
            forge: ForgePolicy::default(),
            eval: EvalConfig::default(),
            shuffle: false,
        };
        let mut moved = base.clone();
        moved.output_dir = "out-b".into();
        moved.run_label = Some("run-b".into());
        assert_eq!(base.fingerprint(), moved.fingerprint());

        let mut reseeded = base.clone();
        reseeded.seed = 8;
        assert_ne!(base.fingerprint(), reseeded.fingerprint());
    }
}
