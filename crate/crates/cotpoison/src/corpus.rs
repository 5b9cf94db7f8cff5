//! Reasoning-dataset loading, validation, persistence, and partitioning.
//!
//! A corpus is an ordered list of `(query, cot, response)` triples stored as
//! one JSON object per line, with a sidecar manifest
//! (`<basename>.manifest.json`) recording counts, the seed used to derive the
//! file, the schema version, and the SHA-256 of the data file.
//!
//! The clean-label contract lives here too: [`validate_clean_label`] checks
//! that a poisoned corpus differs from its source only in the chains of
//! thought of samples explicitly marked as poisoned. Equality is byte
//! equality; no whitespace normalization is applied.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// Current on-disk schema version for corpus files and manifests.
pub const SCHEMA_VERSION: u32 = 1;

/// Meta key linking a poisoned sample back to its carrier sample id.
pub const META_CARRIER_ID: &str = "carrier_id";
/// Meta key recording the integration strategy that produced a poisoned CoT.
pub const META_STRATEGY: &str = "strategy";
/// Meta key holding an explicit answer key for merge validation.
pub const META_ANSWER_KEY: &str = "answer_key";
/// Meta key recording how many generation attempts a forged sample took.
pub const META_FORGE_ATTEMPTS: &str = "forge_attempts";
/// Meta key for the domain tag consulted by the domain-filter selector.
pub const META_DOMAIN: &str = "domain";

/// Errors raised by corpus operations.
#[derive(Debug, Error)]
pub enum CorpusError {
    /// A mapped field is absent (or present but empty) in a source record.
    /// `record` is the 1-based line number of the offending record.
    #[error("record at line {record}: missing or empty field '{field}'")]
    MissingField { record: usize, field: String },
    #[error("duplicate sample id '{id}'")]
    DuplicateId { id: String },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("sample '{id}': {message}")]
    InvalidSample { id: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest for {path} does not match data file: {message}")]
    ManifestMismatch { path: PathBuf, message: String },
    #[error("poison count {p} out of range for corpus of {total} samples")]
    InvalidPoisonCount { p: usize, total: usize },
    #[error("selector needs {needed} candidates but only {available} match")]
    InsufficientCandidates { needed: usize, available: usize },
    #[error("unknown sample id '{id}' in explicit carrier list")]
    UnknownId { id: String },
    #[error("corpora do not share the same id sequence: {detail}")]
    IdSetMismatch { detail: String },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Whether a sample's CoT is original or was replaced by the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[derive(Default)]
pub enum Provenance {
    #[default]
    Clean,
    Poisoned,
}


impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Clean => write!(f, "clean"),
            Provenance::Poisoned => write!(f, "poisoned"),
        }
    }
}

/// One `(query, cot, response)` training triple with identity and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningSample {
    pub id: String,
    pub query: String,
    pub cot: String,
    pub response: String,
    #[serde(default)]
    pub provenance: Provenance,
    /// Free-form string map: domain tags, carrier linkage, attempt counts.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl ReasoningSample {
    /// Check per-sample invariants. `allow_empty_cot` is true only for raw
    /// query suites; corpora of training triples require a non-empty CoT.
    pub fn validate(&self, allow_empty_cot: bool) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::InvalidSample {
                id: self.id.clone(),
                message: "empty id".into(),
            });
        }
        if self.query.is_empty() {
            return Err(CorpusError::InvalidSample {
                id: self.id.clone(),
                message: "empty query".into(),
            });
        }
        if self.response.is_empty() {
            return Err(CorpusError::InvalidSample {
                id: self.id.clone(),
                message: "empty response".into(),
            });
        }
        if self.cot.is_empty() && !allow_empty_cot {
            return Err(CorpusError::InvalidSample {
                id: self.id.clone(),
                message: "empty cot outside a raw query suite".into(),
            });
        }
        if self.provenance == Provenance::Poisoned {
            for key in [META_CARRIER_ID, META_STRATEGY] {
                if !self.meta.contains_key(key) {
                    return Err(CorpusError::InvalidSample {
                        id: self.id.clone(),
                        message: format!("poisoned sample lacks meta key '{key}'"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Sidecar metadata persisted next to every corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub total_count: usize,
    pub poisoned_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub created_from: String,
    pub schema_version: u32,
    /// SHA-256 of the data file this manifest describes; absent for
    /// in-memory corpora that have not been saved yet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default)]
    pub shuffled: bool,
}

impl CorpusManifest {
    fn for_samples(samples: &[ReasoningSample], created_from: &str) -> Self {
        CorpusManifest {
            total_count: samples.len(),
            poisoned_count: samples
                .iter()
                .filter(|s| s.provenance == Provenance::Poisoned)
                .count(),
            seed: None,
            created_from: created_from.to_string(),
            schema_version: SCHEMA_VERSION,
            sha256: None,
            shuffled: false,
        }
    }
}

/// Ordered sample list plus its manifest. Immutable after construction;
/// shareable across concurrent readers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<ReasoningSample>,
    pub manifest: CorpusManifest,
}

impl Corpus {
    /// Build a corpus from validated samples, computing the manifest counts.
    pub fn from_samples(
        samples: Vec<ReasoningSample>,
        created_from: &str,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for sample in &samples {
            sample.validate(false)?;
            if !seen.insert(sample.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    id: sample.id.clone(),
                });
            }
        }
        let manifest = CorpusManifest::for_samples(&samples, created_from);
        Ok(Corpus { samples, manifest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ReasoningSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Re-check every invariant, including manifest count consistency.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        let mut poisoned = 0usize;
        for sample in &self.samples {
            sample.validate(false)?;
            if !seen.insert(sample.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    id: sample.id.clone(),
                });
            }
            if sample.provenance == Provenance::Poisoned {
                poisoned += 1;
            }
        }
        if self.manifest.total_count != self.samples.len() {
            return Err(CorpusError::ManifestMismatch {
                path: PathBuf::from(&self.manifest.created_from),
                message: format!(
                    "manifest total_count {} != sample count {}",
                    self.manifest.total_count,
                    self.samples.len()
                ),
            });
        }
        if self.manifest.poisoned_count != poisoned {
            return Err(CorpusError::ManifestMismatch {
                path: PathBuf::from(&self.manifest.created_from),
                message: format!(
                    "manifest poisoned_count {} != actual {}",
                    self.manifest.poisoned_count, poisoned
                ),
            });
        }
        Ok(())
    }

    /// Canonical one-record-per-line serialization of the sample list.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for sample in &self.samples {
            // Field order is fixed by the struct; BTreeMap keeps meta sorted.
            out.push_str(&serde_json::to_string(sample).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    /// Return a copy with the sample order shuffled under `seed`. The
    /// manifest records the shuffle so downstream tooling knows the source
    /// ordering was not preserved.
    pub fn shuffled(&self, seed: u64) -> Corpus {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = self.samples.clone();
        samples.shuffle(&mut rng);
        let mut manifest = self.manifest.clone();
        manifest.seed = Some(seed);
        manifest.shuffled = true;
        manifest.sha256 = None;
        Corpus { samples, manifest }
    }
}

/// Maps source field names onto the canonical `query`/`cot`/`response`
/// schema so foreign datasets load without rewriting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMap {
    #[serde(default = "default_query_field")]
    pub query: String,
    #[serde(default = "default_cot_field")]
    pub cot: String,
    #[serde(default = "default_response_field")]
    pub response: String,
    /// Source field holding the record id; when the field is absent from a
    /// record the loader assigns `src:<line-number>` deterministically.
    #[serde(default = "default_id_field")]
    pub id: String,
}

fn default_query_field() -> String {
    "query".into()
}
fn default_cot_field() -> String {
    "cot".into()
}
fn default_response_field() -> String {
    "response".into()
}
fn default_id_field() -> String {
    "id".into()
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            query: default_query_field(),
            cot: default_cot_field(),
            response: default_response_field(),
            id: default_id_field(),
        }
    }
}

/// Path of the manifest sidecar for a corpus data file.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    let stem = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    data_path.with_file_name(format!("{stem}.manifest.json"))
}

fn extract_string_field(
    value: &serde_json::Value,
    field_name: &str,
    canonical: &str,
    line: usize,
) -> Result<String, CorpusError> {
    match value.get(field_name) {
        Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(serde_json::Value::String(_)) | None => Err(CorpusError::MissingField {
            record: line,
            field: canonical.to_string(),
        }),
        Some(other) => Err(CorpusError::MalformedRecord {
            line,
            message: format!(
                "field '{field_name}' must be a string, found {}",
                json_kind(other)
            ),
        }),
    }
}

fn json_kind(value: &serde_json::Value) -> &'static str {
    match value {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "bool",
        serde_json::Value::Number(_) => "number",
        serde_json::Value::String(_) => "string",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
    }
}

/// Load a JSON-lines corpus, mapping source fields through `field_map` and
/// validating every record. When a manifest sidecar exists its SHA-256 and
/// counts are verified against the data actually read.
pub fn load_corpus(path: &Path, field_map: &FieldMap) -> Result<Corpus, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        if !value.is_object() {
            return Err(CorpusError::MalformedRecord {
                line: line_no,
                message: "record is not a JSON object".into(),
            });
        }

        let id = match value.get(&field_map.id) {
            Some(serde_json::Value::String(s)) if !s.is_empty() => s.clone(),
            _ => format!("src:{line_no}"),
        };
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { id });
        }

        let query = extract_string_field(&value, &field_map.query, "query", line_no)?;
        let cot = extract_string_field(&value, &field_map.cot, "cot", line_no)?;
        let response = extract_string_field(&value, &field_map.response, "response", line_no)?;

        let provenance = match value.get("provenance") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| {
                CorpusError::MalformedRecord {
                    line: line_no,
                    message: format!("bad provenance: {e}"),
                }
            })?,
            None => Provenance::Clean,
        };
        let meta: BTreeMap<String, String> = match value.get("meta") {
            Some(v) => {
                serde_json::from_value(v.clone()).map_err(|e| CorpusError::MalformedRecord {
                    line: line_no,
                    message: format!("bad meta map: {e}"),
                })?
            }
            None => BTreeMap::new(),
        };

        let sample = ReasoningSample {
            id,
            query,
            cot,
            response,
            provenance,
            meta,
        };
        sample.validate(false)?;
        samples.push(sample);
    }

    let mut corpus = Corpus::from_samples(samples, &path.display().to_string())?;

    let sidecar = manifest_path(path);
    if sidecar.exists() {
        let raw = fs::read_to_string(&sidecar).map_err(|e| CorpusError::io(&sidecar, e))?;
        let stored: CorpusManifest =
            serde_json::from_str(&raw).map_err(|e| CorpusError::ManifestMismatch {
                path: sidecar.clone(),
                message: format!("unparseable manifest: {e}"),
            })?;
        if stored.total_count != corpus.len() {
            return Err(CorpusError::ManifestMismatch {
                path: path.to_path_buf(),
                message: format!(
                    "manifest total_count {} != {} records in file",
                    stored.total_count,
                    corpus.len()
                ),
            });
        }
        if stored.poisoned_count != corpus.manifest.poisoned_count {
            return Err(CorpusError::ManifestMismatch {
                path: path.to_path_buf(),
                message: format!(
                    "manifest poisoned_count {} != {} in file",
                    stored.poisoned_count, corpus.manifest.poisoned_count
                ),
            });
        }
        if let Some(expected) = &stored.sha256 {
            let actual = sha256_hex(&fs::read(path).map_err(|e| CorpusError::io(path, e))?);
            if &actual != expected {
                return Err(CorpusError::ManifestMismatch {
                    path: path.to_path_buf(),
                    message: format!("sha256 {actual} != manifest {expected}"),
                });
            }
        }
        corpus.manifest = stored;
    }

    Ok(corpus)
}

/// Persist a corpus as canonical JSON-lines plus its manifest sidecar.
/// Returns the manifest as written (with the data-file SHA-256 filled in).
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<CorpusManifest, CorpusError> {
    corpus.validate()?;
    let data = corpus.to_jsonl();

    let mut file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    file.write_all(data.as_bytes())
        .map_err(|e| CorpusError::io(path, e))?;

    let mut manifest = corpus.manifest.clone();
    manifest.sha256 = Some(sha256_hex(data.as_bytes()));

    let sidecar = manifest_path(path);
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&sidecar, manifest_json.as_bytes()).map_err(|e| CorpusError::io(&sidecar, e))?;

    Ok(manifest)
}

/// How the carrier subset is drawn from the training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CarrierSelector {
    UniformRandom,
    /// Restrict candidates to samples whose `meta[key]` equals `value`.
    DomainFilter { key: String, value: String },
    /// Use exactly these ids, in the given order.
    ExplicitList { ids: Vec<String> },
}

/// A carrier/remainder partition of a corpus id set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarrierSelection {
    pub carrier_ids: Vec<String>,
    pub remainder_ids: Vec<String>,
    pub selector: CarrierSelector,
    pub seed: u64,
}

impl CarrierSelection {
    /// True iff carrier and remainder ids partition exactly `ids`.
    pub fn partitions(&self, ids: &[&str]) -> bool {
        if self.carrier_ids.len() + self.remainder_ids.len() != ids.len() {
            return false;
        }
        let mut union: HashSet<&str> = self.carrier_ids.iter().map(|s| s.as_str()).collect();
        for id in &self.remainder_ids {
            if !union.insert(id) {
                return false;
            }
        }
        ids.iter().all(|id| union.contains(id))
    }
}

/// Select `p` carrier samples from `corpus`. Deterministic for a fixed
/// `(corpus, selector, p, seed)`; carrier and remainder ids preserve corpus
/// order except for explicit lists, which keep their given order.
pub fn select_carriers(
    corpus: &Corpus,
    selector: &CarrierSelector,
    p: usize,
    seed: u64,
) -> Result<CarrierSelection, CorpusError> {
    let m = corpus.len();
    if p > m {
        return Err(CorpusError::InvalidPoisonCount { p, total: m });
    }

    let carrier_idx: Vec<usize> = match selector {
        CarrierSelector::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, m, p).into_vec();
            idx.sort_unstable();
            idx
        }
        CarrierSelector::DomainFilter { key, value } => {
            let candidates: Vec<usize> = corpus
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.meta.get(key.as_str()) == Some(value))
                .map(|(i, _)| i)
                .collect();
            if candidates.len() < p {
                return Err(CorpusError::InsufficientCandidates {
                    needed: p,
                    available: candidates.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), p)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picks.sort_unstable();
            picks
        }
        CarrierSelector::ExplicitList { ids } => {
            if ids.len() != p {
                return Err(CorpusError::InvalidPoisonCount { p, total: ids.len() });
            }
            let index: HashMap<&str, usize> = corpus
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| (s.id.as_str(), i))
                .collect();
            let mut picks = Vec::with_capacity(ids.len());
            let mut dedup = HashSet::new();
            for id in ids {
                let Some(&i) = index.get(id.as_str()) else {
                    return Err(CorpusError::UnknownId { id: id.clone() });
                };
                if !dedup.insert(i) {
                    return Err(CorpusError::DuplicateId { id: id.clone() });
                }
                picks.push(i);
            }
            picks
        }
    };

    let carrier_set: HashSet<usize> = carrier_idx.iter().copied().collect();
    let carrier_ids = carrier_idx
        .iter()
        .map(|&i| corpus.samples[i].id.clone())
        .collect();
    let remainder_ids = corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !carrier_set.contains(i))
        .map(|(_, s)| s.id.clone())
        .collect();

    Ok(CarrierSelection {
        carrier_ids,
        remainder_ids,
        selector: selector.clone(),
        seed,
    })
}

/// Field of a sample that broke the clean-label contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationField {
    Query,
    Response,
    Cot,
}

impl fmt::Display for ViolationField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationField::Query => write!(f, "query"),
            ViolationField::Response => write!(f, "response"),
            ViolationField::Cot => write!(f, "cot"),
        }
    }
}

/// One clean-label violation: which sample, which field, and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanLabelViolation {
    pub id: String,
    pub field: ViolationField,
    pub detail: String,
}

impl fmt::Display for CleanLabelViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sample '{}' field {}: {}", self.id, self.field, self.detail)
    }
}

/// Compare a poisoned corpus against its source. Queries and responses must
/// be byte-identical everywhere; a CoT may differ only on samples the
/// poisoned corpus marks as poisoned. Returns every violation found.
pub fn validate_clean_label(
    original: &Corpus,
    poisoned: &Corpus,
) -> Result<Vec<CleanLabelViolation>, CorpusError> {
    if original.len() != poisoned.len() {
        return Err(CorpusError::IdSetMismatch {
            detail: format!("{} vs {} samples", original.len(), poisoned.len()),
        });
    }
    for (a, b) in original.samples.iter().zip(&poisoned.samples) {
        if a.id != b.id {
            return Err(CorpusError::IdSetMismatch {
                detail: format!("id '{}' vs '{}' at the same position", a.id, b.id),
            });
        }
    }

    let mut violations = Vec::new();
    for (a, b) in original.samples.iter().zip(&poisoned.samples) {
        if a.query != b.query {
            violations.push(CleanLabelViolation {
                id: a.id.clone(),
                field: ViolationField::Query,
                detail: "query text differs from source".into(),
            });
        }
        if a.response != b.response {
            violations.push(CleanLabelViolation {
                id: a.id.clone(),
                field: ViolationField::Response,
                detail: "response text differs from source".into(),
            });
        }
        if a.cot != b.cot && b.provenance != Provenance::Poisoned {
            violations.push(CleanLabelViolation {
                id: a.id.clone(),
                field: ViolationField::Cot,
                detail: format!("cot differs but sample is marked {}", b.provenance),
            });
        }
    }
    Ok(violations)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use tempfile::tempdir;

    pub(crate) fn sample(id: &str, query: &str, cot: &str, response: &str) -> ReasoningSample {
        ReasoningSample {
            id: id.into(),
            query: query.into(),
            cot: cot.into(),
            response: response.into(),
            provenance: Provenance::Clean,
            meta: BTreeMap::new(),
        }
    }

    fn small_corpus() -> Corpus {
        let samples = (0..10)
            .map(|i| {
                sample(
                    &format!("s{i}"),
                    &format!("question {i}"),
                    &format!("thinking about item {i}"),
                    &format!("answer {i}"),
                )
            })
            .collect();
        Corpus::from_samples(samples, "test").unwrap()
    }

    #[test]
    fn load_two_valid_records() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("two.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"query\":\"q1\",\"cot\":\"c1\",\"response\":\"r1\"}\n",
                "{\"id\":\"b\",\"query\":\"q2\",\"cot\":\"c2\",\"response\":\"r2\"}\n",
            ),
        )
        .unwrap();
        let corpus = load_corpus(&path, &FieldMap::default()).unwrap();
        assert_eq!(corpus.manifest.total_count, 2);
        assert_eq!(corpus.manifest.poisoned_count, 0);
    }

    #[test]
    fn missing_cot_field_names_the_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"query\":\"q1\",\"cot\":\"c1\",\"response\":\"r1\"}\n",
                "{\"id\":\"b\",\"query\":\"q2\",\"response\":\"r2\"}\n",
            ),
        )
        .unwrap();
        let err = load_corpus(&path, &FieldMap::default()).unwrap_err();
        match err {
            CorpusError::MissingField { record, field } => {
                assert_eq!(record, 2);
                assert_eq!(field, "cot");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn foreign_schema_loads_through_field_map() {
        // Shaped like a 1000-record reasoning dump with foreign field names.
        let dir = tempdir().unwrap();
        let path = dir.path().join("foreign.jsonl");
        let mut data = String::new();
        for i in 0..1000 {
            data.push_str(&format!(
                "{{\"question\":\"q{i}\",\"thinking\":\"t{i}\",\"attempt\":\"a{i}\"}}\n"
            ));
        }
        fs::write(&path, data).unwrap();
        let map = FieldMap {
            query: "question".into(),
            cot: "thinking".into(),
            response: "attempt".into(),
            id: "id".into(),
        };
        let corpus = load_corpus(&path, &map).unwrap();
        assert_eq!(corpus.len(), 1000);
        // Ids assigned from line numbers.
        assert_eq!(corpus.samples[0].id, "src:1");
        assert_eq!(corpus.samples[999].id, "src:1000");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"query\":\"q\",\"cot\":\"c\",\"response\":\"r\"}\n",
                "{\"id\":\"a\",\"query\":\"q\",\"cot\":\"c\",\"response\":\"r\"}\n",
            ),
        )
        .unwrap();
        assert!(matches!(
            load_corpus(&path, &FieldMap::default()),
            Err(CorpusError::DuplicateId { .. })
        ));
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mal.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"query\":\"q\",\"cot\":\"c\",\"response\":\"r\"}\nnot-json\n",
        )
        .unwrap();
        match load_corpus(&path, &FieldMap::default()).unwrap_err() {
            CorpusError::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn save_then_load_round_trips_byte_equal() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        let corpus = small_corpus();
        let manifest = save_corpus(&corpus, &path).unwrap();
        assert_eq!(manifest.poisoned_count, 0);

        let loaded = load_corpus(&path, &FieldMap::default()).unwrap();
        assert_eq!(loaded.samples, corpus.samples);
        // Byte-equal re-serialization.
        assert_eq!(loaded.to_jsonl(), corpus.to_jsonl());
        assert_eq!(
            manifest.sha256.as_deref().unwrap(),
            sha256_hex(corpus.to_jsonl().as_bytes())
        );
    }

    #[test]
    fn save_to_unwritable_path_is_io_failure() {
        let corpus = small_corpus();
        let err = save_corpus(&corpus, Path::new("/nonexistent-dir/x.jsonl")).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn manifest_records_poisoned_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut samples: Vec<ReasoningSample> = (0..1000)
            .map(|i| sample(&format!("s{i}"), "q", "c", "r"))
            .collect();
        for s in samples.iter_mut().take(10) {
            s.provenance = Provenance::Poisoned;
            s.meta.insert(META_CARRIER_ID.into(), s.id.clone());
            s.meta.insert(META_STRATEGY.into(), "concat".into());
        }
        let corpus = Corpus::from_samples(samples, "test").unwrap();
        let manifest = save_corpus(&corpus, &path).unwrap();
        assert_eq!(manifest.total_count, 1000);
        assert_eq!(manifest.poisoned_count, 10);
    }

    #[test]
    fn tampered_data_file_fails_manifest_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let corpus = small_corpus();
        save_corpus(&corpus, &path).unwrap();
        // Flip one byte in the data file without touching the sidecar.
        let mut data = fs::read_to_string(&path).unwrap();
        data = data.replace("question 0", "question X");
        fs::write(&path, data).unwrap();
        assert!(matches!(
            load_corpus(&path, &FieldMap::default()),
            Err(CorpusError::ManifestMismatch { .. })
        ));
    }

    #[test]
    fn uniform_selection_is_a_seeded_partition() {
        let samples = (0..1000)
            .map(|i| sample(&format!("s{i}"), "q", "c", "r"))
            .collect();
        let corpus = Corpus::from_samples(samples, "test").unwrap();
        let a = select_carriers(&corpus, &CarrierSelector::UniformRandom, 10, 7).unwrap();
        assert_eq!(a.carrier_ids.len(), 10);
        assert_eq!(a.remainder_ids.len(), 990);
        assert!(a.partitions(&corpus.ids()));

        let b = select_carriers(&corpus, &CarrierSelector::UniformRandom, 10, 7).unwrap();
        assert_eq!(a, b);

        // Different seeds disagree somewhere across 100 tries.
        let mut saw_difference = false;
        for seed in 0..100 {
            let c = select_carriers(&corpus, &CarrierSelector::UniformRandom, 10, seed).unwrap();
            if c.carrier_ids != a.carrier_ids {
                saw_difference = true;
                break;
            }
        }
        assert!(saw_difference);
    }

    #[test]
    fn zero_poison_count_selects_nothing() {
        let corpus = small_corpus();
        let sel = select_carriers(&corpus, &CarrierSelector::UniformRandom, 0, 1).unwrap();
        assert!(sel.carrier_ids.is_empty());
        assert_eq!(sel.remainder_ids.len(), corpus.len());
    }

    #[test]
    fn domain_filter_selects_only_tagged_samples() {
        let mut samples: Vec<ReasoningSample> = (0..5)
            .map(|i| sample(&format!("s{i}"), "q", "c", "r"))
            .collect();
        for s in samples.iter_mut().take(3) {
            s.meta.insert(META_DOMAIN.into(), "organic-chemistry".into());
        }
        for s in samples.iter_mut().skip(3) {
            s.meta.insert(META_DOMAIN.into(), "physics".into());
        }
        let corpus = Corpus::from_samples(samples, "test").unwrap();
        let selector = CarrierSelector::DomainFilter {
            key: META_DOMAIN.into(),
            value: "organic-chemistry".into(),
        };
        // Oracle: the only eligible ids are the three tagged ones.
        let eligible: HashSet<&str> = ["s0", "s1", "s2"].into_iter().collect();
        for seed in 0..20 {
            let sel = select_carriers(&corpus, &selector, 2, seed).unwrap();
            assert_eq!(sel.carrier_ids.len(), 2);
            for id in &sel.carrier_ids {
                assert!(eligible.contains(id.as_str()), "{id} not tagged");
            }
        }
        // Asking for more than available fails.
        match select_carriers(&corpus, &selector, 4, 0).unwrap_err() {
            CorpusError::InsufficientCandidates { needed, available } => {
                assert_eq!((needed, available), (4, 3));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn explicit_list_keeps_order_and_checks_ids() {
        let corpus = small_corpus();
        let selector = CarrierSelector::ExplicitList {
            ids: vec!["s3".into(), "s1".into()],
        };
        let sel = select_carriers(&corpus, &selector, 2, 0).unwrap();
        assert_eq!(sel.carrier_ids, vec!["s3", "s1"]);
        assert!(sel.partitions(&corpus.ids()));

        let bad = CarrierSelector::ExplicitList {
            ids: vec!["nope".into()],
        };
        assert!(matches!(
            select_carriers(&corpus, &bad, 1, 0),
            Err(CorpusError::UnknownId { .. })
        ));
    }

    #[test]
    fn oversized_poison_count_rejected() {
        let corpus = small_corpus();
        assert!(matches!(
            select_carriers(&corpus, &CarrierSelector::UniformRandom, 11, 0),
            Err(CorpusError::InvalidPoisonCount { .. })
        ));
    }

    #[test]
    fn clean_label_flags_response_change() {
        let original = small_corpus();
        let mut poisoned = original.clone();
        poisoned.samples[4].response = "tampered".into();
        poisoned.samples[4].provenance = Provenance::Poisoned;
        poisoned.samples[4]
            .meta
            .insert(META_CARRIER_ID.into(), "s4".into());
        poisoned.samples[4]
            .meta
            .insert(META_STRATEGY.into(), "concat".into());
        poisoned.manifest.poisoned_count = 1;

        let violations = validate_clean_label(&original, &poisoned).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, ViolationField::Response);
        assert_eq!(violations[0].id, "s4");
    }

    #[test]
    fn clean_label_flags_cot_change_on_clean_sample() {
        // Oracle: construct the pair by hand and compare field by field.
        let original = small_corpus();
        let mut poisoned = original.clone();
        poisoned.samples[2].cot = "silently edited".into();

        let violations = validate_clean_label(&original, &poisoned).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, ViolationField::Cot);
        assert_eq!(violations[0].id, "s2");
        assert!(violations[0].detail.contains("clean"));
    }

    #[test]
    fn clean_label_accepts_marked_poison() {
        let original = small_corpus();
        let mut poisoned = original.clone();
        poisoned.samples[0].cot = "replaced trace".into();
        poisoned.samples[0].provenance = Provenance::Poisoned;
        poisoned.samples[0]
            .meta
            .insert(META_CARRIER_ID.into(), "s0".into());
        poisoned.samples[0]
            .meta
            .insert(META_STRATEGY.into(), "merge".into());
        poisoned.manifest.poisoned_count = 1;

        assert!(validate_clean_label(&original, &poisoned)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn clean_label_requires_matching_id_sequence() {
        let original = small_corpus();
        let mut reordered = original.clone();
        reordered.samples.swap(0, 1);
        assert!(matches!(
            validate_clean_label(&original, &reordered),
            Err(CorpusError::IdSetMismatch { .. })
        ));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_preserves_arbitrary_content(
            texts in proptest::collection::vec((".{1,40}", ".{0,40}", ".{1,40}", ".{1,40}"), 1..8),
        ) {
            let samples: Vec<ReasoningSample> = texts
                .iter()
                .enumerate()
                .map(|(i, (query, meta_val, cot, response))| {
                    let mut meta = BTreeMap::new();
                    if !meta_val.is_empty() {
                        meta.insert("note".to_string(), meta_val.clone());
                    }
                    ReasoningSample {
                        id: format!("s{i}"),
                        query: query.clone(),
                        cot: cot.clone(),
                        response: response.clone(),
                        provenance: Provenance::Clean,
                        meta,
                    }
                })
                .collect();
            let corpus = Corpus::from_samples(samples, "prop").unwrap();
            let dir = tempdir().unwrap();
            let path = dir.path().join("prop.jsonl");
            save_corpus(&corpus, &path).unwrap();
            let loaded = load_corpus(&path, &FieldMap::default()).unwrap();
            proptest::prop_assert_eq!(&loaded.samples, &corpus.samples);
            proptest::prop_assert_eq!(loaded.to_jsonl(), corpus.to_jsonl());
        }
    }

    #[test]
    fn shuffle_records_flag_and_seed() {
        let corpus = small_corpus();
        let shuffled = corpus.shuffled(42);
        assert!(shuffled.manifest.shuffled);
        assert_eq!(shuffled.manifest.seed, Some(42));
        assert_eq!(shuffled.len(), corpus.len());
        let mut ids: Vec<&str> = shuffled.ids();
        ids.sort_unstable();
        let mut orig: Vec<&str> = corpus.ids();
        orig.sort_unstable();
        assert_eq!(ids, orig);
    }
}
