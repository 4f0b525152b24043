//! Task engine: applies a task definition to every patient in parallel and encodes the resulting
//! samples into SMP1 shards.
//!
//! The run has three phases. Phase A walks fixed shard units (runs of consecutive patient
//! batches); each worker owns a contiguous range of units and writes one raw-sample file per
//! unit plus private vocabulary and label counts. Phase B merges those counts into sorted
//! vocabularies and label spaces. Phase C encodes each raw file into the shard of the same unit.
//! Shard boundaries depend only on the unit size, never on the worker count, so every output byte
//! is identical for any number of workers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::event::{PatientRecord, Timestamp};
use crate::ingest::{parse_timestamp, write_atomically, MANIFEST_FILE};
use crate::processors::{
    encode_label, encode_multihot, encode_nested, encode_sequence, fit_vocab_min_freq, LabelKind, LabelSpace,
    LabelValue, ProcessorKind, ProcessorState, VocabCounts, Vocabulary,
};
use crate::shard::{self, EncodedSample, EncodedValue, ShardWriter};
use crate::store::{Store, DEFAULT_BATCH_SIZE};

pub const SAMPLES_FILE: &str = "samples.json";
pub const TASK_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BATCHES_PER_SHARD: usize = 64;
const STAGING_DIR: &str = ".staging";

/// Unencoded value of one schema field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawValue {
    Tokens(Vec<String>),
    Nested(Vec<Vec<String>>),
    Scalar(String),
    Bytes(Vec<u8>),
}

impl RawValue {
    fn shape(&self) -> &'static str {
        match self {
            RawValue::Tokens(_) => "token list",
            RawValue::Nested(_) => "nested token list",
            RawValue::Scalar(_) => "scalar",
            RawValue::Bytes(_) => "bytes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSample {
    pub patient_id: String,
    pub values: BTreeMap<String, RawValue>,
}

impl RawSample {
    pub fn new(patient_id: impl Into<String>) -> Self {
        RawSample {
            patient_id: patient_id.into(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: &str, value: RawValue) -> Self {
        self.values.insert(field.to_string(), value);
        self
    }
}

/// Samples produced for one patient plus how many candidate samples were skipped as malformed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Applied {
    pub samples: Vec<RawSample>,
    pub skipped: u64,
}

impl From<Vec<RawSample>> for Applied {
    fn from(samples: Vec<RawSample>) -> Self {
        Applied { samples, skipped: 0 }
    }
}

pub type ApplyFn = Arc<dyn Fn(&PatientRecord) -> std::result::Result<Applied, String> + Send + Sync>;

#[derive(Clone)]
pub struct TaskDefinition {
    pub task_name: String,
    pub input_schema: Vec<(String, ProcessorKind)>,
    pub output_schema: Vec<(String, LabelKind)>,
    /// Fixed label spaces for output fields; fields not listed are fitted from the data.
    pub label_spaces: BTreeMap<String, Vec<String>>,
    pub apply: ApplyFn,
}

impl std::fmt::Debug for TaskDefinition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskDefinition")
            .field("task_name", &self.task_name)
            .field("input_schema", &self.input_schema)
            .field("output_schema", &self.output_schema)
            .finish_non_exhaustive()
    }
}

impl TaskDefinition {
    pub fn validate(&self) -> Result<()> {
        if self.task_name.is_empty() {
            return Err(Error::Config("task_name must not be empty".into()));
        }
        if self.input_schema.is_empty() || self.output_schema.is_empty() {
            return Err(Error::Config(format!("task {}: schemas must be non-empty", self.task_name)));
        }
        let mut seen = BTreeSet::new();
        let names = self.input_schema.iter().map(|(n, _)| n).chain(self.output_schema.iter().map(|(n, _)| n));
        for name in names {
            let safe = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe {
                return Err(Error::Config(format!("field name {name:?} must be [A-Za-z0-9_-]+")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("field {name:?} appears twice in the schemas")));
            }
        }
        for field in self.label_spaces.keys() {
            let kind = self.output_schema.iter().find(|(n, _)| n == field).map(|(_, k)| *k);
            if !kind.is_some_and(LabelKind::uses_space) {
                return Err(Error::Config(format!(
                    "label space pinned for {field:?}, which is not a multiclass or multilabel output"
                )));
            }
        }
        Ok(())
    }

    fn n_fields(&self) -> usize {
        self.input_schema.len() + self.output_schema.len()
    }

    /// Checks one sample against the schemas; returns values in schema order.
    fn ordered_values<'a>(&self, s: &'a RawSample) -> Result<Vec<&'a RawValue>> {
        let schema_err = |message: String| Error::Schema {
            patient_id: s.patient_id.clone(),
            message,
        };
        if s.values.len() != self.n_fields() {
            let extra: Vec<&String> = s
                .values
                .keys()
                .filter(|k| {
                    !self.input_schema.iter().any(|(n, _)| n == *k) && !self.output_schema.iter().any(|(n, _)| n == *k)
                })
                .collect();
            if !extra.is_empty() {
                return Err(schema_err(format!("fields {extra:?} are not in the schema")));
            }
        }
        let mut out = Vec::with_capacity(self.n_fields());
        for (name, kind) in &self.input_schema {
            let v = s.values.get(name).ok_or_else(|| schema_err(format!("missing field {name:?}")))?;
            let ok = matches!(
                (kind, v),
                (ProcessorKind::Sequence | ProcessorKind::MultiHot, RawValue::Tokens(_))
                    | (ProcessorKind::NestedSequence, RawValue::Nested(_))
                    | (ProcessorKind::Raw, RawValue::Bytes(_))
            );
            if !ok {
                return Err(schema_err(format!("field {name:?} is a {} but {} needs otherwise", v.shape(), kind.name())));
            }
            out.push(v);
        }
        for (name, kind) in &self.output_schema {
            let v = s.values.get(name).ok_or_else(|| schema_err(format!("missing field {name:?}")))?;
            let ok = matches!(
                (kind, v),
                (LabelKind::Binary | LabelKind::Multiclass | LabelKind::Regression, RawValue::Scalar(_))
                    | (LabelKind::Multilabel, RawValue::Tokens(_))
            );
            if !ok {
                return Err(schema_err(format!("field {name:?} is a {} but {} needs otherwise", v.shape(), kind.name())));
            }
            out.push(v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub workers: usize,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    /// Batches per shard unit; fixes shard boundaries independently of the worker count.
    pub batches_per_shard: usize,
    pub min_freq: u64,
}

impl TaskConfig {
    pub fn new(out_dir: impl Into<PathBuf>, workers: usize) -> Self {
        TaskConfig {
            workers,
            out_dir: out_dir.into(),
            batch_size: DEFAULT_BATCH_SIZE,
            batches_per_shard: DEFAULT_BATCHES_PER_SHARD,
            min_freq: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batches_per_shard == 0 {
            return Err(Error::Config("batch_size and batches_per_shard must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardEntry {
    pub path: String,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorEntry {
    pub field: String,
    pub path: String,
    pub digest: String,
}

/// Per-output-field label summary: class counts for categorical kinds, value range for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelStats {
    pub kind: String,
    pub count: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub counts: Option<BTreeMap<String, u64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max: Option<f64>,
}

impl LabelStats {
    fn new(kind: LabelKind) -> Self {
        LabelStats {
            kind: kind.name().to_string(),
            count: 0,
            counts: (kind != LabelKind::Regression).then(BTreeMap::new),
            min: None,
            max: None,
        }
    }

    fn add_label(&mut self, label: &str) {
        *self.counts.get_or_insert_with(BTreeMap::new).entry(label.to_string()).or_insert(0) += 1;
    }

    fn add_real(&mut self, x: f64) {
        self.min = Some(self.min.map_or(x, |m| m.min(x)));
        self.max = Some(self.max.map_or(x, |m| m.max(x)));
    }

    fn merge(&mut self, other: &LabelStats) {
        self.count += other.count;
        if let Some(c) = &other.counts {
            for (k, v) in c {
                *self.counts.get_or_insert_with(BTreeMap::new).entry(k.clone()).or_insert(0) += v;
            }
        }
        if let Some(m) = other.min {
            self.add_real(m);
        }
        if let Some(m) = other.max {
            self.add_real(m);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSetManifest {
    pub format_version: u32,
    pub task_name: String,
    pub task_digest: String,
    pub source_cache_digest: String,
    pub input_schema: Vec<FieldSpec>,
    pub output_schema: Vec<FieldSpec>,
    pub batch_size: usize,
    pub batches_per_shard: usize,
    pub shards: Vec<ShardEntry>,
    pub processors: Vec<ProcessorEntry>,
    pub total_samples: u64,
    pub skipped: u64,
    pub dropped_labels: u64,
    pub label_stats: BTreeMap<String, LabelStats>,
}

impl SampleSetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SAMPLES_FILE);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => Error::Manifest(format!("{} not found", path.display())),
            _ => Error::io(&path, e),
        })?;
        let m: SampleSetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let sum: u64 = m.shards.iter().map(|s| s.sample_count).sum();
        if sum != m.total_samples {
            return Err(Error::Manifest(format!(
                "{}: total_samples {} != shard sum {sum}",
                path.display(),
                m.total_samples
            )));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct TaskReport {
    pub manifest: SampleSetManifest,
    pub cache_hit: bool,
    pub out_dir: PathBuf,
}

/// Reads every encoded sample of a finished sample set, in shard order.
pub fn load_samples(dir: &Path) -> Result<(SampleSetManifest, Vec<EncodedSample>)> {
    let m = SampleSetManifest::load(dir)?;
    let mut out = Vec::with_capacity(m.total_samples.min(1 << 24) as usize);
    for s in &m.shards {
        out.extend(shard::read_shard(dir.join(&s.path), m.input_schema.len(), m.output_schema.len())?);
    }
    Ok((m, out))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn task_digest(task: &TaskDefinition, cfg: &TaskConfig, source: &str) -> String {
    let mut h = Sha256::new();
    let mut put = |s: &str| {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    };
    put(&TASK_FORMAT_VERSION.to_string());
    put(&task.task_name);
    put(source);
    for (n, k) in &task.input_schema {
        put(n);
        put(k.name());
    }
    for (n, k) in &task.output_schema {
        put(n);
        put(k.name());
    }
    for (n, labels) in &task.label_spaces {
        put(n);
        labels.iter().for_each(|l| put(l));
    }
    put(&cfg.batch_size.to_string());
    put(&cfg.batches_per_shard.to_string());
    put(&cfg.min_freq.to_string());
    hex::encode(h.finalize())
}

fn shard_name(k: usize) -> String {
    format!("shard-{k:05}.smp")
}

/// Runs `task` over every patient of `store` and writes the encoded sample set to `cfg.out_dir`.
pub fn set_task(store: &Store, task: &TaskDefinition, cfg: &TaskConfig) -> Result<TaskReport> {
    task.validate()?;
    cfg.validate()?;
    let manifest_path = store.root().join(MANIFEST_FILE);
    let source = sha256_hex(&fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    let digest = task_digest(task, cfg, &source);
    let out_dir = &cfg.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    if let Ok(existing) = SampleSetManifest::load(out_dir) {
        let complete = existing.shards.iter().map(|s| &s.path).chain(existing.processors.iter().map(|p| &p.path))
            .all(|p| out_dir.join(p).is_file());
        if existing.task_digest == digest && complete {
            return Ok(TaskReport {
                manifest: existing,
                cache_hit: true,
                out_dir: out_dir.clone(),
            });
        }
    }

    let staging = out_dir.join(STAGING_DIR);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let result = run_phases(store, task, cfg, &staging, digest, source).and_then(|m| {
        commit(out_dir, &staging, &m)?;
        Ok(m)
    });
    let _ = fs::remove_dir_all(&staging);
    Ok(TaskReport {
        manifest: result?,
        cache_hit: false,
        out_dir: out_dir.clone(),
    })
}

/// Moves staged files into place; samples.json goes last so readers never see a partial set.
fn commit(out_dir: &Path, staging: &Path, m: &SampleSetManifest) -> Result<()> {
    let old = out_dir.join(SAMPLES_FILE);
    if old.exists() {
        fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
    }
    for entry in fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))? {
        let entry = entry.map_err(|e| Error::io(out_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ours = (name.starts_with("shard-") && name.ends_with(".smp"))
            || (name.starts_with("procstate.") && name.ends_with(".json"));
        if ours && entry.path().is_file() {
            fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    let names = m.shards.iter().map(|s| &s.path).chain(m.processors.iter().map(|p| &p.path));
    for name in names {
        let from = staging.join(name);
        fs::rename(&from, out_dir.join(name)).map_err(|e| Error::io(&from, e))?;
    }
    write_atomically(&out_dir.join(SAMPLES_FILE), m.to_json().as_bytes())
}

/// Counts gathered by phase A for one shard unit.
#[derive(Debug, Default)]
struct UnitStats {
    samples: u64,
    skipped: u64,
    vocab: Vec<VocabCounts>,
    labels: Vec<LabelStats>,
}

fn run_phases(
    store: &Store,
    task: &TaskDefinition,
    cfg: &TaskConfig,
    staging: &Path,
    task_digest: String,
    source: String,
) -> Result<SampleSetManifest> {
    let n_batches = store.num_batches(cfg.batch_size);
    let n_units = n_batches.div_ceil(cfg.batches_per_shard);
    let workers = cfg.workers.min(n_units.max(1));

    // Phase A: each worker owns a contiguous range of units.
    let unit_stats: Vec<UnitStats> = {
        let results: Vec<Result<Vec<UnitStats>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let units = (w * n_units / workers)..((w + 1) * n_units / workers);
                    scope.spawn(move || phase_a(store, task, cfg, staging, units))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("phase A worker panicked")).collect()
        });
        // Workers hold ascending unit ranges, so the first error in worker order is the one from
        // the earliest patient.
        let mut all = Vec::with_capacity(n_units);
        for r in results {
            all.extend(r?);
        }
        all
    };

    // Phase B: merge partial counts.
    let n_in = task.input_schema.len();
    let mut vocab_parts: Vec<Vec<VocabCounts>> = vec![Vec::new(); n_in];
    let mut label_stats: Vec<LabelStats> = task.output_schema.iter().map(|(_, k)| LabelStats::new(*k)).collect();
    let mut total_samples = 0u64;
    let mut skipped = 0u64;
    for u in &unit_stats {
        total_samples += u.samples;
        skipped += u.skipped;
        for (i, v) in u.vocab.iter().enumerate() {
            vocab_parts[i].push(v.clone());
        }
        for (acc, l) in label_stats.iter_mut().zip(&u.labels) {
            acc.merge(l);
        }
    }
    let vocabs: Vec<Option<Vocabulary>> = task
        .input_schema
        .iter()
        .zip(&vocab_parts)
        .map(|((_, kind), parts)| kind.uses_vocab().then(|| fit_vocab_min_freq(parts, cfg.min_freq)))
        .collect();
    let spaces: Vec<Option<LabelSpace>> = task
        .output_schema
        .iter()
        .zip(&label_stats)
        .map(|((name, kind), stats)| {
            kind.uses_space().then(|| match task.label_spaces.get(name) {
                Some(pinned) => LabelSpace::from_labels(pinned.iter().cloned()),
                None => LabelSpace::from_labels(stats.counts.iter().flat_map(|c| c.keys().cloned())),
            })
        })
        .collect();

    let mut processors = Vec::new();
    for ((name, kind), vocab) in task.input_schema.iter().zip(&vocabs) {
        let state = ProcessorState::for_input(name, *kind, vocab.as_ref());
        processors.push(write_state(staging, name, &state)?);
    }
    for ((name, kind), space) in task.output_schema.iter().zip(&spaces) {
        let state = ProcessorState::for_output(name, *kind, space.as_ref());
        processors.push(write_state(staging, name, &state)?);
    }

    // Phase C: encode every non-empty unit into its shard.
    let non_empty: Vec<(usize, u64)> = unit_stats
        .iter()
        .enumerate()
        .filter(|(_, u)| u.samples > 0)
        .map(|(i, u)| (i, u.samples))
        .collect();
    let next = AtomicUsize::new(0);
    let dropped = std::thread::scope(|scope| -> Result<u64> {
        let handles: Vec<_> = (0..cfg.workers.min(non_empty.len()))
            .map(|_| {
                scope.spawn(|| -> Result<u64> {
                    let mut dropped = 0;
                    loop {
                        let k = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&(unit, _)) = non_empty.get(k) else {
                            return Ok(dropped);
                        };
                        dropped += phase_c(task, staging, unit, &shard_name(k), &vocabs, &spaces)?;
                    }
                })
            })
            .collect();
        let mut total = 0;
        let mut first_err = None;
        for h in handles {
            match h.join().expect("phase C worker panicked") {
                Ok(d) => total += d,
                Err(e) => first_err = first_err.or(Some(e)),
            }
        }
        first_err.map_or(Ok(total), Err)
    })?;

    Ok(SampleSetManifest {
        format_version: TASK_FORMAT_VERSION,
        task_name: task.task_name.clone(),
        task_digest,
        source_cache_digest: source,
        input_schema: task
            .input_schema
            .iter()
            .map(|(n, k)| FieldSpec {
                name: n.clone(),
                kind: k.name().into(),
            })
            .collect(),
        output_schema: task
            .output_schema
            .iter()
            .map(|(n, k)| FieldSpec {
                name: n.clone(),
                kind: k.name().into(),
            })
            .collect(),
        batch_size: cfg.batch_size,
        batches_per_shard: cfg.batches_per_shard,
        shards: non_empty
            .iter()
            .enumerate()
            .map(|(k, (_, n))| ShardEntry {
                path: shard_name(k),
                sample_count: *n,
            })
            .collect(),
        processors,
        total_samples,
        skipped,
        dropped_labels: dropped,
        label_stats: task
            .output_schema
            .iter()
            .map(|(n, _)| n.clone())
            .zip(label_stats)
            .collect(),
    })
}

fn write_state(staging: &Path, field: &str, state: &ProcessorState) -> Result<ProcessorEntry> {
    let name = ProcessorState::file_name(field);
    let json = state.to_json();
    let path = staging.join(&name);
    fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    Ok(ProcessorEntry {
        field: field.to_string(),
        path: name,
        digest: sha256_hex(json.as_bytes()),
    })
}

fn raw_name(unit: usize) -> String {
    format!("raw-{unit:06}.bin")
}

fn phase_a(
    store: &Store,
    task: &TaskDefinition,
    cfg: &TaskConfig,
    staging: &Path,
    units: std::ops::Range<usize>,
) -> Result<Vec<UnitStats>> {
    let mut out = Vec::with_capacity(units.len());
    if units.is_empty() {
        return Ok(out);
    }
    let g = cfg.batches_per_shard;
    let batches = store.batch_range(cfg.batch_size, units.start * g..units.end * g)?;
    let mut current: Option<(usize, RawWriter, UnitStats)> = None;
    let finish = |cur: Option<(usize, RawWriter, UnitStats)>, out: &mut Vec<UnitStats>| -> Result<()> {
        if let Some((_, w, stats)) = cur {
            w.finish()?;
            out.push(stats);
        }
        Ok(())
    };
    for batch in batches {
        let batch = batch?;
        let unit = batch.batch_index / g;
        if current.as_ref().map(|c| c.0) != Some(unit) {
            finish(current.take(), &mut out)?;
            let stats = UnitStats {
                vocab: vec![VocabCounts::new(); task.input_schema.len()],
                labels: task.output_schema.iter().map(|(_, k)| LabelStats::new(*k)).collect(),
                ..UnitStats::default()
            };
            current = Some((unit, RawWriter::create(staging.join(raw_name(unit)))?, stats));
        }
        let (_, writer, stats) = current.as_mut().unwrap();
        for record in &batch.records {
            let applied = (task.apply)(record).map_err(|message| Error::Task {
                patient_id: record.patient_id.clone(),
                message,
            })?;
            stats.skipped += applied.skipped;
            for sample in &applied.samples {
                let values = task.ordered_values(sample)?;
                observe(task, sample, &values, stats)?;
                writer.push(&sample.patient_id, &values)?;
                stats.samples += 1;
            }
        }
    }
    finish(current.take(), &mut out)?;
    // Units past the last patient still get an (empty) entry so indices stay aligned.
    while out.len() < units.len() {
        out.push(UnitStats::default());
    }
    Ok(out)
}

/// Adds one sample's tokens and labels to the unit counts, rejecting invalid labels early.
fn observe(task: &TaskDefinition, sample: &RawSample, values: &[&RawValue], stats: &mut UnitStats) -> Result<()> {
    let n_in = task.input_schema.len();
    for (i, v) in values[..n_in].iter().enumerate() {
        match v {
            RawValue::Tokens(t) => stats.vocab[i].add_all(t.iter().map(String::as_str)),
            RawValue::Nested(n) => n.iter().for_each(|t| stats.vocab[i].add_all(t.iter().map(String::as_str))),
            _ => {}
        }
    }
    for (j, ((name, kind), v)) in task.output_schema.iter().zip(&values[n_in..]).enumerate() {
        let label = &mut stats.labels[j];
        label.count += 1;
        match (kind, v) {
            (LabelKind::Binary, RawValue::Scalar(s)) => {
                let (enc, _) = encode_label(name, LabelValue::Scalar(s), *kind, None).map_err(|e| with_pid(e, sample))?;
                let crate::processors::EncodedLabel::Binary(b) = enc else { unreachable!() };
                label.add_label(&b.to_string());
            }
            (LabelKind::Regression, RawValue::Scalar(s)) => {
                let (enc, _) = encode_label(name, LabelValue::Scalar(s), *kind, None).map_err(|e| with_pid(e, sample))?;
                let crate::processors::EncodedLabel::Real(x) = enc else { unreachable!() };
                label.add_real(x);
            }
            (LabelKind::Multiclass, RawValue::Scalar(s)) => {
                if let Some(pinned) = task.label_spaces.get(name) {
                    if !pinned.contains(s) {
                        return Err(Error::Label {
                            field: name.clone(),
                            message: format!("{s:?} of patient {} is not in the label space", sample.patient_id),
                        });
                    }
                }
                label.add_label(s);
            }
            (LabelKind::Multilabel, RawValue::Tokens(items)) => {
                let distinct: BTreeSet<&String> = items.iter().collect();
                distinct.into_iter().for_each(|l| label.add_label(l));
            }
            _ => unreachable!("shape checked by ordered_values"),
        }
    }
    Ok(())
}

fn with_pid(e: Error, sample: &RawSample) -> Error {
    match e {
        Error::Label { field, message } => Error::Label {
            field,
            message: format!("{message} (patient {})", sample.patient_id),
        },
        other => other,
    }
}

fn phase_c(
    task: &TaskDefinition,
    staging: &Path,
    unit: usize,
    shard: &str,
    vocabs: &[Option<Vocabulary>],
    spaces: &[Option<LabelSpace>],
) -> Result<u64> {
    let raw_path = staging.join(raw_name(unit));
    let mut reader = RawReader::open(&raw_path, task.n_fields())?;
    let mut writer = ShardWriter::create(staging.join(shard))?;
    let mut dropped = 0u64;
    let n_in = task.input_schema.len();
    while let Some((patient_id, values)) = reader.next()? {
        let mut inputs = Vec::with_capacity(n_in);
        for (((_, kind), v), vocab) in task.input_schema.iter().zip(&values[..n_in]).zip(vocabs) {
            inputs.push(match (kind, v, vocab) {
                (ProcessorKind::Sequence, RawValue::Tokens(t), Some(voc)) => EncodedValue::Indices(encode_sequence(t, voc)),
                (ProcessorKind::MultiHot, RawValue::Tokens(t), Some(voc)) => EncodedValue::MultiHot(encode_multihot(t, voc)),
                (ProcessorKind::NestedSequence, RawValue::Nested(n), Some(voc)) => EncodedValue::Nested(encode_nested(n, voc)),
                (ProcessorKind::Raw, RawValue::Bytes(b), None) => EncodedValue::Raw(b.clone()),
                _ => return Err(Error::format(&raw_path, "raw sample does not match the schema")),
            });
        }
        let mut outputs = Vec::with_capacity(task.output_schema.len());
        for (((name, kind), v), space) in task.output_schema.iter().zip(&values[n_in..]).zip(spaces) {
            let value = match v {
                RawValue::Scalar(s) => LabelValue::Scalar(s),
                RawValue::Tokens(t) => LabelValue::Set(t),
                _ => return Err(Error::format(&raw_path, "raw label does not match the schema")),
            };
            let (label, d) = encode_label(name, value, *kind, space.as_ref())?;
            dropped += d as u64;
            outputs.push(label);
        }
        writer.push(&EncodedSample {
            patient_id,
            inputs,
            outputs,
        })?;
    }
    writer.finish()?;
    fs::remove_file(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    Ok(dropped)
}

/// Phase A intermediate: length-prefixed patient id, then tagged values in schema order.
struct RawWriter {
    path: PathBuf,
    out: BufWriter<File>,
    buf: Vec<u8>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_list(buf: &mut Vec<u8>, items: &[String]) {
    buf.extend_from_slice(&(items.len() as u32).to_le_bytes());
    items.iter().for_each(|s| put_str(buf, s));
}

impl RawWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RawWriter {
            path,
            out: BufWriter::with_capacity(1 << 16, file),
            buf: Vec::new(),
        })
    }

    fn push(&mut self, patient_id: &str, values: &[&RawValue]) -> Result<()> {
        let buf = &mut self.buf;
        buf.clear();
        put_str(buf, patient_id);
        for v in values {
            match v {
                RawValue::Tokens(t) => {
                    buf.push(0);
                    put_list(buf, t);
                }
                RawValue::Nested(n) => {
                    buf.push(1);
                    buf.extend_from_slice(&(n.len() as u32).to_le_bytes());
                    n.iter().for_each(|t| put_list(buf, t));
                }
                RawValue::Scalar(s) => {
                    buf.push(2);
                    put_str(buf, s);
                }
                RawValue::Bytes(b) => {
                    buf.push(3);
                    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
                    buf.extend_from_slice(b);
                }
            }
        }
        self.out.write_all(buf).map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

struct RawReader {
    path: PathBuf,
    input: BufReader<File>,
    n_fields: usize,
}

impl RawReader {
    fn open(path: &Path, n_fields: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(RawReader {
            path: path.to_path_buf(),
            input: BufReader::with_capacity(1 << 16, file),
            n_fields,
        })
    }

    fn next(&mut self) -> Result<Option<(String, Vec<RawValue>)>> {
        let mut len = [0u8; 4];
        match self.input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(Error::io(&self.path, e)),
        }
        let n_fields = self.n_fields;
        let r = &mut self.input;
        let mut read = || -> io::Result<(String, Vec<RawValue>)> {
            let pid = read_string(r, u32::from_le_bytes(len) as usize)?;
            let mut values = Vec::with_capacity(n_fields);
            for _ in 0..n_fields {
                let mut tag = [0u8; 1];
                r.read_exact(&mut tag)?;
                values.push(match tag[0] {
                    0 => RawValue::Tokens(read_list(r)?),
                    1 => {
                        let n = read_u32(r)? as usize;
                        let mut outer = Vec::with_capacity(n.min(1 << 16));
                        for _ in 0..n {
                            outer.push(read_list(r)?);
                        }
                        RawValue::Nested(outer)
                    }
                    2 => {
                        let n = read_u32(r)? as usize;
                        RawValue::Scalar(read_string(r, n)?)
                    }
                    3 => {
                        let n = read_u32(r)? as usize;
                        let mut b = vec![0u8; n];
                        r.read_exact(&mut b)?;
                        RawValue::Bytes(b)
                    }
                    t => return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad raw tag {t}"))),
                });
            }
            Ok((pid, values))
        };
        read().map(Some).map_err(|e| Error::io(&self.path, e))
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, n: usize) -> io::Result<String> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "raw string is not UTF-8"))
}

fn read_list<R: Read>(r: &mut R) -> io::Result<Vec<String>> {
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        out.push(read_string(r, len)?);
    }
    Ok(out)
}

/// Deterministic train/validation/test assignment from a hash of the patient id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Assigns `patient_id` to a split with probabilities `train` and `validation` (test gets the rest).
pub fn hash_split(patient_id: &str, train: f64, validation: f64) -> Split {
    let d = Sha256::digest(patient_id.as_bytes());
    let u = u64::from_le_bytes(d[..8].try_into().unwrap()) as f64 / (u64::MAX as f64 + 1.0);
    if u < train {
        Split::Train
    } else if u < train + validation {
        Split::Validation
    } else {
        Split::Test
    }
}

// ---------------------------------------------------------------------------------------------
// Built-in clinical tasks
// ---------------------------------------------------------------------------------------------

/// Table and column names the built-in tasks read from the event stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalSchema {
    pub admissions_table: String,
    pub diagnoses_table: String,
    pub procedures_table: String,
    pub prescriptions_table: String,
    pub visit_id: String,
    pub discharge_time: String,
    pub discharge_format: String,
    pub death_flag: String,
    pub diagnosis_code: String,
    pub procedure_code: String,
    pub drug_code: String,
}

impl Default for ClinicalSchema {
    fn default() -> Self {
        ClinicalSchema {
            admissions_table: "admissions".into(),
            diagnoses_table: "diagnoses_icd".into(),
            procedures_table: "procedures_icd".into(),
            prescriptions_table: "prescriptions".into(),
            visit_id: "hadm_id".into(),
            discharge_time: "dischtime".into(),
            discharge_format: "%Y-%m-%d %H:%M:%S".into(),
            death_flag: "hospital_expire_flag".into(),
            diagnosis_code: "icd9_code".into(),
            procedure_code: "icd9_code".into(),
            drug_code: "ndc".into(),
        }
    }
}

/// One admission with the codes recorded under its visit id, in canonical event order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Visit {
    pub visit_id: String,
    pub admit: Option<Timestamp>,
    pub discharge: Option<Timestamp>,
    pub death_flag: String,
    pub conditions: Vec<String>,
    pub procedures: Vec<String>,
    pub drugs: Vec<String>,
}

impl Visit {
    fn has_codes(&self) -> bool {
        !self.conditions.is_empty() && !self.procedures.is_empty() && !self.drugs.is_empty()
    }
}

/// Groups a patient's events into admissions; code events attach to the first admission with
/// the same visit id and are ignored when no admission matches.
pub fn visits(p: &PatientRecord, schema: &ClinicalSchema) -> Vec<Visit> {
    let mut out: Vec<Visit> = Vec::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for e in p.events_of(&schema.admissions_table) {
        let id = e.attr(&schema.visit_id).unwrap_or("");
        let discharge = e
            .attr(&schema.discharge_time)
            .and_then(|d| parse_timestamp(d, &schema.discharge_format));
        if !id.is_empty() {
            by_id.entry(id).or_insert(out.len());
        }
        out.push(Visit {
            visit_id: id.to_string(),
            admit: e.timestamp,
            discharge,
            death_flag: e.attr(&schema.death_flag).unwrap_or("").to_string(),
            ..Visit::default()
        });
    }
    for e in &p.events {
        let (code_col, slot): (&str, fn(&mut Visit) -> &mut Vec<String>) = if e.event_type == schema.diagnoses_table {
            (&schema.diagnosis_code, |v| &mut v.conditions)
        } else if e.event_type == schema.procedures_table {
            (&schema.procedure_code, |v| &mut v.procedures)
        } else if e.event_type == schema.prescriptions_table {
            (&schema.drug_code, |v| &mut v.drugs)
        } else {
            continue;
        };
        let (Some(id), Some(code)) = (e.attr(&schema.visit_id), e.attr(code_col)) else {
            continue;
        };
        if code.is_empty() {
            continue;
        }
        if let Some(&i) = by_id.get(id) {
            slot(&mut out[i]).push(code.to_string());
        }
    }
    out
}

fn tokens(v: &[String]) -> RawValue {
    RawValue::Tokens(v.to_vec())
}

/// Binary label of the next admission's death flag, from the current admission's codes.
pub fn mortality_apply(p: &PatientRecord, schema: &ClinicalSchema) -> Applied {
    let vs = visits(p, schema);
    let mut out = Applied::default();
    for pair in vs.windows(2) {
        let (cur, next) = (&pair[0], &pair[1]);
        let label = match next.death_flag.trim() {
            "1" => "1",
            "0" => "0",
            _ => {
                out.skipped += 1;
                continue;
            }
        };
        if !cur.has_codes() {
            out.skipped += 1;
            continue;
        }
        out.samples.push(
            RawSample::new(&p.patient_id)
                .with("conditions", tokens(&cur.conditions))
                .with("procedures", tokens(&cur.procedures))
                .with("drugs", tokens(&cur.drugs))
                .with("label", RawValue::Scalar(label.into())),
        );
    }
    out
}

/// Drugs of each admission from the second onward, given that admission's codes and all earlier
/// admissions' drug lists.
pub fn drugrec_apply(p: &PatientRecord, schema: &ClinicalSchema) -> Applied {
    let vs = visits(p, schema);
    let mut out = Applied::default();
    for i in 1..vs.len() {
        let cur = &vs[i];
        if !cur.has_codes() {
            out.skipped += 1;
            continue;
        }
        let hist: Vec<Vec<String>> = vs[..i].iter().map(|v| v.drugs.clone()).collect();
        let label: BTreeSet<&String> = cur.drugs.iter().collect();
        out.samples.push(
            RawSample::new(&p.patient_id)
                .with("conditions", tokens(&cur.conditions))
                .with("procedures", tokens(&cur.procedures))
                .with("drugs_hist", RawValue::Nested(hist))
                .with("label", RawValue::Tokens(label.into_iter().cloned().collect())),
        );
    }
    out
}

/// Upper edges (exclusive, in days) of classes 0..=8; class 9 is everything from the last edge.
pub const LOS_BIN_EDGES: [f64; 9] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 14.0];
pub const LOS_CLASSES: usize = 10;

pub fn los_bin(days: f64) -> u32 {
    LOS_BIN_EDGES.iter().take_while(|&&edge| days >= edge).count() as u32
}

const MICROS_PER_DAY: f64 = 86_400_000_000.0;

/// Length-of-stay class of every admission with complete codes and a valid stay interval.
pub fn los_apply(p: &PatientRecord, schema: &ClinicalSchema) -> Applied {
    let mut out = Applied::default();
    for v in visits(p, schema) {
        let days = match (v.admit, v.discharge) {
            (Some(a), Some(d)) if d >= a => (d.0 - a.0) as f64 / MICROS_PER_DAY,
            _ => {
                out.skipped += 1;
                continue;
            }
        };
        if !v.has_codes() {
            out.skipped += 1;
            continue;
        }
        out.samples.push(
            RawSample::new(&p.patient_id)
                .with("conditions", tokens(&v.conditions))
                .with("procedures", tokens(&v.procedures))
                .with("drugs", tokens(&v.drugs))
                .with("label", RawValue::Scalar(los_bin(days).to_string())),
        );
    }
    out
}

pub const BUILTIN_TASKS: [&str; 3] = ["mortality", "drug_recommendation", "length_of_stay"];

/// Built-in task by name (`mortality`, `drug_recommendation`/`drugrec`, `length_of_stay`/`los`).
pub fn builtin_task(name: &str, schema: ClinicalSchema) -> Option<TaskDefinition> {
    let seq = |n: &str| (n.to_string(), ProcessorKind::Sequence);
    let schema = Arc::new(schema);
    let (task_name, inputs, output, apply, spaces): (_, _, _, ApplyFn, _) = match name {
        "mortality" => (
            "mortality",
            vec![seq("conditions"), seq("procedures"), seq("drugs")],
            LabelKind::Binary,
            Arc::new(move |p: &PatientRecord| Ok(mortality_apply(p, &schema))),
            BTreeMap::new(),
        ),
        "drug_recommendation" | "drugrec" => (
            "drug_recommendation",
            vec![
                seq("conditions"),
                seq("procedures"),
                ("drugs_hist".to_string(), ProcessorKind::NestedSequence),
            ],
            LabelKind::Multilabel,
            Arc::new(move |p: &PatientRecord| Ok(drugrec_apply(p, &schema))),
            BTreeMap::new(),
        ),
        "length_of_stay" | "los" => (
            "length_of_stay",
            vec![seq("conditions"), seq("procedures"), seq("drugs")],
            LabelKind::Multiclass,
            Arc::new(move |p: &PatientRecord| Ok(los_apply(p, &schema))),
            BTreeMap::from([("label".to_string(), (0..LOS_CLASSES).map(|c| c.to_string()).collect())]),
        ),
        _ => return None,
    };
    Some(TaskDefinition {
        task_name: task_name.to_string(),
        input_schema: inputs,
        output_schema: vec![("label".to_string(), output)],
        label_spaces: spaces,
        apply,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Event;
    use crate::processors::EncodedLabel;
    use crate::store::{open_store, tests::build_cache};
    use proptest::prelude::*;

    fn ts(s: &str) -> Option<Timestamp> {
        parse_timestamp(s, "%Y-%m-%d %H:%M:%S")
    }

    fn admission(pid: &str, seq: u64, hadm: &str, admit: &str, disch: &str, flag: &str) -> Event {
        let attrs = [("hadm_id", hadm), ("dischtime", disch), ("hospital_expire_flag", flag)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Event::new(pid, "admissions", ts(admit), seq, attrs).unwrap()
    }

    fn code(pid: &str, table: &str, col: &str, seq: u64, hadm: &str, admit: &str, c: &str) -> Event {
        let attrs = [("hadm_id", hadm), (col, c)].into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Event::new(pid, table, ts(admit), seq, attrs).unwrap()
    }

    /// Patient with one admission per entry of `drugs`, each with one diagnosis and procedure.
    fn patient(pid: &str, flags: &[&str], drugs: &[&[&str]], stays: &[f64]) -> Vec<Event> {
        let mut out = Vec::new();
        let mut seq = 0;
        for (i, flag) in flags.iter().enumerate() {
            let hadm = format!("{pid}-H{i}");
            let admit_dt = chrono::NaiveDate::from_ymd_opt(2100, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
                + chrono::Duration::days(30 * i as i64);
            let disch_dt = admit_dt + chrono::Duration::seconds((stays[i] * 86_400.0) as i64);
            let admit = admit_dt.format("%Y-%m-%d %H:%M:%S").to_string();
            let disch = disch_dt.format("%Y-%m-%d %H:%M:%S").to_string();
            out.push(admission(pid, seq, &hadm, &admit, &disch, flag));
            out.push(code(pid, "diagnoses_icd", "icd9_code", seq, &hadm, &admit, &format!("D{i}")));
            out.push(code(pid, "procedures_icd", "icd9_code", seq, &hadm, &admit, &format!("X{i}")));
            for d in drugs[i] {
                seq += 1;
                out.push(code(pid, "prescriptions", "ndc", seq, &hadm, &admit, d));
            }
            seq += 1;
        }
        out
    }

    fn record(events: Vec<Event>) -> PatientRecord {
        PatientRecord::new(events[0].patient_id.clone(), events)
    }

    fn label_of(s: &RawSample) -> &RawValue {
        &s.values["label"]
    }

    #[test]
    fn mortality_uses_next_admission_flag() {
        let schema = ClinicalSchema::default();
        let two = record(patient("P1", &["0", "1"], &[&["d1"], &["d2"]], &[1.0, 1.0]));
        let a = mortality_apply(&two, &schema);
        assert_eq!(a.samples.len(), 1);
        assert_eq!(label_of(&a.samples[0]), &RawValue::Scalar("1".into()));
        assert_eq!(a.samples[0].values["conditions"], RawValue::Tokens(vec!["D0".into()]));

        let one = record(patient("P2", &["1"], &[&["d1"]], &[1.0]));
        assert!(mortality_apply(&one, &schema).samples.is_empty());

        let three = record(patient("P3", &["0", "0", "0"], &[&["a"], &["b"], &["c"]], &[1.0, 2.0, 3.0]));
        let labels: Vec<_> = mortality_apply(&three, &schema).samples.iter().map(|s| label_of(s).clone()).collect();
        assert_eq!(labels, vec![RawValue::Scalar("0".into()); 2]);

        let no_drugs = record(patient("P4", &["0", "1"], &[&[], &["d"]], &[1.0, 1.0]));
        let a = mortality_apply(&no_drugs, &schema);
        assert_eq!((a.samples.len(), a.skipped), (0, 1));
    }

    #[test]
    fn drugrec_history_and_label() {
        let schema = ClinicalSchema::default();
        let p = record(patient("P1", &["0", "0"], &[&["d1"], &["d1", "d2"]], &[1.0, 1.0]));
        let a = drugrec_apply(&p, &schema);
        assert_eq!(a.samples.len(), 1);
        assert_eq!(a.samples[0].values["drugs_hist"], RawValue::Nested(vec![vec!["d1".into()]]));
        assert_eq!(label_of(&a.samples[0]), &RawValue::Tokens(vec!["d1".into(), "d2".into()]));

        let one = record(patient("P2", &["0"], &[&["d1"]], &[1.0]));
        assert!(drugrec_apply(&one, &schema).samples.is_empty());

        let three = record(patient("P3", &["0"; 3], &[&["a"], &["b"], &["c"]], &[1.0; 3]));
        let lens: Vec<usize> = drugrec_apply(&three, &schema)
            .samples
            .iter()
            .map(|s| match &s.values["drugs_hist"] {
                RawValue::Nested(n) => n.len(),
                _ => panic!(),
            })
            .collect();
        assert_eq!(lens, vec![1, 2]);
    }

    #[test]
    fn los_bins_at_boundaries() {
        let cases = [(0.0f64, 0), (0.5, 0), (0.999, 0), (1.0, 1), (1.5, 1), (7.9, 7), (8.0, 8), (13.99, 8), (14.0, 9), (400.0, 9)];
        for (d, c) in cases {
            let oracle = if d < 1.0 {
                0
            } else if d < 8.0 {
                d.floor() as u32
            } else if d < 14.0 {
                8
            } else {
                9
            };
            assert_eq!(los_bin(d), c, "{d}");
            assert_eq!(oracle, c);
        }
        assert_eq!(LOS_CLASSES, 10);
        let schema = ClinicalSchema::default();
        let p = record(patient("P1", &["0", "0"], &[&["a"], &["b"]], &[0.5, 20.0]));
        let labels: Vec<_> = los_apply(&p, &schema).samples.iter().map(|s| label_of(s).clone()).collect();
        assert_eq!(labels, vec![RawValue::Scalar("0".into()), RawValue::Scalar("9".into())]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn los_bin_is_monotone(a in 0.0f64..60.0, b in 0.0f64..60.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(los_bin(lo) <= los_bin(hi));
            prop_assert!(los_bin(hi) < LOS_CLASSES as u32);
        }
    }

    #[test]
    fn los_bin_is_surjective() {
        let hit: BTreeSet<u32> = (0..400).map(|i| los_bin(i as f64 * 0.05)).collect();
        assert_eq!(hit, (0..10).collect());
    }

    fn fixture_events() -> Vec<Event> {
        let mut ev = Vec::new();
        ev.extend(patient("P1", &["0", "1"], &[&["d1"], &["d1", "d2"]], &[1.5, 3.0]));
        ev.extend(patient("P2", &["0"], &[&["d3"]], &[0.2]));
        ev.extend(patient("P3", &["0", "0", "0"], &[&["d1"], &["d4"], &["d2", "d4"]], &[9.0, 2.0, 15.0]));
        ev.extend(patient("P4", &["0", "1", "0"], &[&["d5"], &[], &["d1"]], &[1.0, 1.0, 5.0]));
        ev.extend(patient("P5", &["1"], &[&["d2"]], &[7.5]));
        ev.extend(patient("P6", &["0", "0"], &[&["d6"], &["d6"]], &[1.0, 4.0]));
        ev
    }

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
            .collect()
    }

    #[test]
    fn outputs_identical_across_worker_counts() {
        let cache = tempfile::tempdir().unwrap();
        build_cache(cache.path(), fixture_events(), 5);
        let store = open_store(cache.path()).unwrap();
        for name in BUILTIN_TASKS {
            let task = builtin_task(name, ClinicalSchema::default()).unwrap();
            let mut reference = None;
            for workers in [1, 2, 4] {
                let out = tempfile::tempdir().unwrap();
                let mut cfg = TaskConfig::new(out.path(), workers);
                cfg.batch_size = 1;
                cfg.batches_per_shard = 2;
                let report = set_task(&store, &task, &cfg).unwrap();
                assert!(!report.cache_hit);
                let bytes = dir_bytes(out.path());
                match &reference {
                    None => reference = Some(bytes),
                    Some(r) => assert_eq!(&bytes, r, "{name} with {workers} workers"),
                }
            }
        }
    }

    #[test]
    fn mortality_samples_on_fixture() {
        let cache = tempfile::tempdir().unwrap();
        build_cache(cache.path(), fixture_events(), 100);
        let store = open_store(cache.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let task = builtin_task("mortality", ClinicalSchema::default()).unwrap();
        let report = set_task(&store, &task, &TaskConfig::new(out.path(), 2)).unwrap();
        // P1: 1 (label 1); P3: 2 (0, 0); P4: admission 0 ok (label 1), admission 1 has no drugs; P6: 1.
        assert_eq!(report.manifest.total_samples, 5);
        assert_eq!(report.manifest.skipped, 1);
        let (_, samples) = load_samples(out.path()).unwrap();
        let got: Vec<(String, EncodedLabel)> = samples.iter().map(|s| (s.patient_id.clone(), s.outputs[0].clone())).collect();
        let b = EncodedLabel::Binary;
        let expect = vec![("P1", b(1)), ("P3", b(0)), ("P3", b(0)), ("P4", b(1)), ("P6", b(0))];
        assert_eq!(got, expect.into_iter().map(|(p, l)| (p.to_string(), l)).collect::<Vec<_>>());
        let stats = &report.manifest.label_stats["label"];
        assert_eq!(stats.counts.as_ref().unwrap(), &BTreeMap::from([("0".into(), 3), ("1".into(), 2)]));
        // Drugs vocabulary: d1, d2, d4, d5, d6 from the input admissions only.
        let state: ProcessorState =
            serde_json::from_str(&fs::read_to_string(out.path().join("procstate.drugs.json")).unwrap()).unwrap();
        assert_eq!(state.tokens, ["d1", "d4", "d5", "d6"]);
        assert_eq!(samples[0].inputs[2], EncodedValue::Indices(vec![2]));
    }

    #[test]
    fn rerun_is_cache_hit_without_rewrites() {
        let cache = tempfile::tempdir().unwrap();
        build_cache(cache.path(), fixture_events(), 100);
        let store = open_store(cache.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let task = builtin_task("los", ClinicalSchema::default()).unwrap();
        let cfg = TaskConfig::new(out.path(), 1);
        set_task(&store, &task, &cfg).unwrap();
        let shard = out.path().join("shard-00000.smp");
        let before = fs::metadata(&shard).unwrap().modified().unwrap();
        std::thread::sleep(std::time::Duration::from_millis(20));
        let again = set_task(&store, &task, &cfg).unwrap();
        assert!(again.cache_hit);
        assert_eq!(fs::metadata(&shard).unwrap().modified().unwrap(), before);
        let state: ProcessorState =
            serde_json::from_str(&fs::read_to_string(out.path().join("procstate.label.json")).unwrap()).unwrap();
        assert_eq!(state.tokens.len(), 10);
    }

    fn custom(name: &str, apply: ApplyFn) -> TaskDefinition {
        TaskDefinition {
            task_name: name.into(),
            input_schema: vec![("x".into(), ProcessorKind::MultiHot)],
            output_schema: vec![("y".into(), LabelKind::Regression)],
            label_spaces: BTreeMap::new(),
            apply,
        }
    }

    #[test]
    fn empty_task_writes_no_shards() {
        let cache = tempfile::tempdir().unwrap();
        build_cache(cache.path(), fixture_events(), 100);
        let store = open_store(cache.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let task = custom("nothing", Arc::new(|_| Ok(Applied::default())));
        let r = set_task(&store, &task, &TaskConfig::new(out.path(), 3)).unwrap();
        assert_eq!((r.manifest.total_samples, r.manifest.shards.len()), (0, 0));
        assert!(out.path().join(SAMPLES_FILE).exists());
    }

    #[test]
    fn apply_failure_names_patient_and_leaves_nothing() {
        let cache = tempfile::tempdir().unwrap();
        build_cache(cache.path(), fixture_events(), 100);
        let store = open_store(cache.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let task = custom(
            "fails",
            Arc::new(|p| {
                if p.patient_id == "P4" {
                    return Err("boom".into());
                }
                Ok(vec![RawSample::new(&p.patient_id)
                    .with("x", RawValue::Tokens(vec!["a".into()]))
                    .with("y", RawValue::Scalar("1.5".into()))]
                .into())
            }),
        );
        let mut cfg = TaskConfig::new(out.path(), 2);
        cfg.batch_size = 1;
        cfg.batches_per_shard = 1;
        match set_task(&store, &task, &cfg) {
            Err(Error::Task { patient_id, message }) => assert_eq!((patient_id.as_str(), message.as_str()), ("P4", "boom")),
            other => panic!("{other:?}"),
        }
        assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
    }

    #[test]
    fn schema_violations() {
        let cache = tempfile::tempdir().unwrap();
        build_cache(cache.path(), fixture_events(), 100);
        let store = open_store(cache.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let missing = custom(
            "missing",
            Arc::new(|p| Ok(vec![RawSample::new(&p.patient_id).with("x", RawValue::Tokens(vec![]))].into())),
        );
        assert!(matches!(set_task(&store, &missing, &TaskConfig::new(out.path(), 1)), Err(Error::Schema { .. })));
        let bad_real = custom(
            "nan",
            Arc::new(|p| {
                Ok(vec![RawSample::new(&p.patient_id)
                    .with("x", RawValue::Tokens(vec![]))
                    .with("y", RawValue::Scalar("NaN".into()))]
                .into())
            }),
        );
        assert!(matches!(set_task(&store, &bad_real, &TaskConfig::new(out.path(), 1)), Err(Error::Label { .. })));
        let mut dup = custom("dup", Arc::new(|_| Ok(Applied::default())));
        dup.output_schema[0].0 = "x".into();
        assert!(matches!(set_task(&store, &dup, &TaskConfig::new(out.path(), 1)), Err(Error::Config(_))));
    }

    #[test]
    fn regression_and_raw_round_trip() {
        let cache = tempfile::tempdir().unwrap();
        build_cache(cache.path(), fixture_events(), 100);
        let store = open_store(cache.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let task = TaskDefinition {
            task_name: "raw".into(),
            input_schema: vec![("blob".into(), ProcessorKind::Raw), ("codes".into(), ProcessorKind::MultiHot)],
            output_schema: vec![("y".into(), LabelKind::Regression)],
            label_spaces: BTreeMap::new(),
            apply: Arc::new(|p| {
                Ok(vec![RawSample::new(&p.patient_id)
                    .with("blob", RawValue::Bytes(p.patient_id.as_bytes().to_vec()))
                    .with("codes", RawValue::Tokens(vec![p.patient_id.clone(), "zz".into()]))
                    .with("y", RawValue::Scalar(format!("{}", p.events.len())))]
                .into())
            }),
        };
        let r = set_task(&store, &task, &TaskConfig::new(out.path(), 2)).unwrap();
        let stats = &r.manifest.label_stats["y"];
        assert_eq!(stats.count, 6);
        let (_, samples) = load_samples(out.path()).unwrap();
        assert_eq!(samples[0].inputs[0], EncodedValue::Raw(b"P1".to_vec()));
        let EncodedValue::MultiHot(bits) = &samples[0].inputs[1] else { panic!() };
        assert_eq!(bits.size, 2 + 7);
        assert_eq!(bits.ones(), vec![2, 8]);
    }

    #[test]
    fn hash_split_is_deterministic_and_balanced() {
        let splits: Vec<Split> = (0..10_000).map(|i| hash_split(&format!("P{i}"), 0.8, 0.1)).collect();
        let again: Vec<Split> = (0..10_000).map(|i| hash_split(&format!("P{i}"), 0.8, 0.1)).collect();
        assert_eq!(splits, again);
        let train = splits.iter().filter(|s| **s == Split::Train).count();
        assert!((7700..8300).contains(&train), "{train}");
    }
}
