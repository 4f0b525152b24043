//! Table-joining stage: raw CSV tables to a patient-sorted, patient-aligned partition cache.
//!
//! Each table is read by one worker, joined against its parent (hash join when the parent's
//! columns fit the join allowance, sort-merge join otherwise), converted to events and spilled
//! as sorted runs. Runs are merged in table order and cut into EVP partitions that never split
//! a patient. The output bytes depend only on the inputs, not on the worker count.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::descriptor::{descriptor_digest, DatasetDescriptor, TableSpec};
use crate::error::{Error, Result};
use crate::event::{Event, Timestamp};
use crate::evp::EvpWriter;
use crate::extsort::{merge_runs, RunWriter, SortConfig, SortRecord, SortStats};
use crate::mem::MemTracker;

pub const MIN_MEM_BUDGET: usize = 64 * 1024 * 1024;
pub const DEFAULT_MEM_BUDGET: usize = 512 * 1024 * 1024;
pub const DEFAULT_TARGET_PARTITION_EVENTS: u64 = 1 << 20;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub mem_budget_bytes: usize,
    pub workers: usize,
    pub target_partition_events: u64,
    pub out_dir: PathBuf,
    /// Upper bound on memory for hash-join parent tables; defaults to a quarter of the budget.
    pub hash_join_limit_bytes: Option<usize>,
    pub tracker: MemTracker,
}

impl IngestConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        IngestConfig {
            mem_budget_bytes: DEFAULT_MEM_BUDGET,
            workers: 1,
            target_partition_events: DEFAULT_TARGET_PARTITION_EVENTS,
            out_dir: out_dir.into(),
            hash_join_limit_bytes: None,
            tracker: MemTracker::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mem_budget_bytes < MIN_MEM_BUDGET {
            return Err(Error::Config(format!(
                "mem_budget_bytes must be at least {MIN_MEM_BUDGET}, got {}",
                self.mem_budget_bytes
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.target_partition_events == 0 {
            return Err(Error::Config("target_partition_events must be positive".into()));
        }
        Ok(())
    }

    fn join_limit(&self) -> usize {
        self.hash_join_limit_bytes
            .unwrap_or(self.mem_budget_bytes / 4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPartition {
    /// File name relative to the cache directory.
    pub path: String,
    pub min_patient_id: String,
    pub max_patient_id: String,
    pub event_count: u64,
    pub patient_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub dataset_name: String,
    pub descriptor_digest: String,
    pub partitions: Vec<EventPartition>,
    pub total_events: u64,
    pub total_patients: u64,
    pub created_at: String,
}

impl CacheManifest {
    /// Checks ordering, disjointness and totals.
    pub fn validate(&self) -> Result<()> {
        let mut events = 0u64;
        let mut patients = 0u64;
        for (i, p) in self.partitions.iter().enumerate() {
            if p.min_patient_id.as_bytes() > p.max_patient_id.as_bytes() {
                return Err(Error::Manifest(format!("partition {i} has min > max")));
            }
            if p.path.contains('/') || p.path.contains('\\') || p.path.starts_with('.') {
                return Err(Error::Manifest(format!("partition {i} has an invalid path")));
            }
            if i > 0 {
                let prev = &self.partitions[i - 1];
                if prev.max_patient_id.as_bytes() >= p.min_patient_id.as_bytes() {
                    return Err(Error::Manifest(format!(
                        "partitions {} and {i} have overlapping or unordered ranges",
                        i - 1
                    )));
                }
            }
            events += p.event_count;
            patients += p.patient_count;
        }
        if events != self.total_events {
            return Err(Error::Manifest(format!(
                "total_events {} != sum of partitions {events}",
                self.total_events
            )));
        }
        if patients != self.total_patients {
            return Err(Error::Manifest(format!(
                "total_patients {} != sum of partitions {patients}",
                self.total_patients
            )));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, u64)> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => Error::Manifest(format!("{} not found", path.display())),
            _ => Error::io(&path, e),
        })?;
        let manifest: CacheManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok((manifest, bytes.len() as u64))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Outcome of one ingest call.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: CacheManifest,
    /// True when a matching cache already existed and nothing was written.
    pub cache_hit: bool,
    pub rows_read: u64,
    pub spill_runs: usize,
    pub buffer_high_water: usize,
}

/// Writes a partition cache for `descriptor` into `cfg.out_dir`.
///
/// `descriptor_text` is the source the descriptor was parsed from; its digest keys the cache.
/// Relative table paths resolve against `base_dir`.
pub fn ingest(
    descriptor: &DatasetDescriptor,
    descriptor_text: &str,
    base_dir: &Path,
    cfg: &IngestConfig,
) -> Result<IngestReport> {
    cfg.validate()?;
    descriptor.validate()?;
    let digest = descriptor_digest(descriptor_text);

    if let Some(existing) = existing_cache(&cfg.out_dir, &digest)? {
        return Ok(IngestReport {
            manifest: existing,
            cache_hit: true,
            rows_read: 0,
            spill_runs: 0,
            buffer_high_water: cfg.tracker.high_water(),
        });
    }
    prepare_out_dir(&cfg.out_dir)?;

    let spill = tempfile::Builder::new()
        .prefix(".spill-")
        .tempdir_in(&cfg.out_dir)
        .map_err(|e| Error::io(&cfg.out_dir, e))?;
    let result = run_ingest(descriptor, base_dir, cfg, spill.path(), &digest);
    drop(spill);
    if result.is_err() {
        cleanup_partitions(&cfg.out_dir);
    }
    result
}

fn existing_cache(dir: &Path, digest: &str) -> Result<Option<CacheManifest>> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Ok(None);
    }
    match CacheManifest::load(dir) {
        Ok((m, _)) if m.descriptor_digest == digest => {
            let complete = m.partitions.iter().all(|p| dir.join(&p.path).is_file());
            Ok(complete.then_some(m))
        }
        Ok(_) => Err(Error::Config(format!(
            "{} holds a cache built from a different descriptor",
            dir.display()
        ))),
        Err(e) => Err(e),
    }
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn cleanup_partitions(dir: &Path) {
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let name = e.file_name();
            let name = name.to_string_lossy();
            if name.ends_with(".evp") || name == MANIFEST_FILE || name.ends_with(".tmp") {
                let _ = fs::remove_file(e.path());
            }
        }
    }
}

fn run_ingest(
    descriptor: &DatasetDescriptor,
    base_dir: &Path,
    cfg: &IngestConfig,
    spill_dir: &Path,
    digest: &str,
) -> Result<IngestReport> {
    let budget = cfg.mem_budget_bytes;
    let stats = Arc::new(SortStats::default());
    let sort_cfg = SortConfig {
        budget_bytes: budget,
        spill_dir: spill_dir.to_path_buf(),
        tracker: cfg.tracker.clone(),
        stats: stats.clone(),
    };

    let plans = descriptor
        .tables
        .iter()
        .map(|t| TablePlan::resolve(t, descriptor, base_dir))
        .collect::<Result<Vec<_>>>()?;

    // Parent tables shared by hash joins, loaded once, within the join allowance.
    let mut parents: HashMap<ParentKey, Arc<ParentIndex>> = HashMap::new();
    let mut join_bytes = 0usize;
    for plan in &plans {
        if let Some(j) = &plan.join {
            let key = j.key();
            if parents.contains_key(&key) {
                continue;
            }
            let limit = cfg.join_limit().saturating_sub(join_bytes);
            if let Some(idx) = ParentIndex::load(j, limit, &cfg.tracker)? {
                join_bytes += idx.bytes;
                parents.insert(key, Arc::new(idx));
            }
        }
    }

    // What is left after join tables and fixed I/O buffers is split across workers.
    let reserve = budget / 8;
    let workers = cfg.workers.min(plans.len()).max(1);
    let per_worker = budget.saturating_sub(join_bytes + reserve) / workers;
    if per_worker < 1 << 20 {
        return Err(Error::Config(format!(
            "memory budget {budget} leaves too little room for {workers} workers"
        )));
    }

    let worker_cfg = SortConfig {
        budget_bytes: per_worker,
        ..sort_cfg.clone()
    };
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..plans.len()).collect());
    let outputs: Mutex<Vec<(usize, Result<(Vec<PathBuf>, u64)>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().unwrap().pop_front();
                let Some(i) = next else { break };
                let plan = &plans[i];
                let parent = plan.join.as_ref().and_then(|j| parents.get(&j.key()).cloned());
                let res = table_runs(plan, parent.as_deref(), &worker_cfg, i);
                let failed = res.is_err();
                outputs.lock().unwrap().push((i, res));
                if failed {
                    queue.lock().unwrap().clear();
                }
            });
        }
    });
    drop(parents);

    let mut outputs = outputs.into_inner().unwrap();
    outputs.sort_by_key(|(i, _)| *i);
    let mut runs = Vec::new();
    let mut rows_read = 0u64;
    for (_, res) in outputs {
        let (table_runs, n) = res?;
        runs.extend(table_runs);
        rows_read += n;
    }

    let merged = merge_runs::<Event>(runs, &sort_cfg)?;
    let partitions = write_partitions(merged, &cfg.out_dir, cfg.target_partition_events)?;
    let total_events: u64 = partitions.iter().map(|p| p.event_count).sum();
    if total_events != rows_read {
        return Err(Error::Conservation {
            read: rows_read,
            written: total_events,
        });
    }

    let manifest = CacheManifest {
        dataset_name: descriptor.dataset_name.clone(),
        descriptor_digest: digest.to_string(),
        total_events,
        total_patients: partitions.iter().map(|p| p.patient_count).sum(),
        partitions,
        created_at: inputs_timestamp(&plans),
    };
    manifest.validate()?;
    write_atomically(&cfg.out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;

    Ok(IngestReport {
        manifest,
        cache_hit: false,
        rows_read,
        spill_runs: stats.runs_written(),
        buffer_high_water: cfg.tracker.high_water(),
    })
}

/// Latest modification time of the input tables, so reruns on unchanged inputs are byte-stable.
fn inputs_timestamp(plans: &[TablePlan]) -> String {
    let latest = plans
        .iter()
        .filter_map(|p| fs::metadata(&p.path).and_then(|m| m.modified()).ok())
        .max()
        .unwrap_or(SystemTime::UNIX_EPOCH);
    let dt: DateTime<Utc> = latest.into();
    dt.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Cuts a canonically sorted event stream into patient-aligned EVP partitions.
///
/// A partition is closed at the first patient boundary once it holds at least
/// `target_events` events.
pub fn write_partitions<I>(sorted: I, out_dir: &Path, target_events: u64) -> Result<Vec<EventPartition>>
where
    I: IntoIterator<Item = Result<Event>>,
{
    let mut partitions = Vec::new();
    let mut current: Option<EvpWriter> = None;
    let mut last_pid: Option<String> = None;

    let close = |w: EvpWriter, partitions: &mut Vec<EventPartition>| -> Result<()> {
        let (path, footer) = w.finish()?;
        partitions.push(EventPartition {
            path: path.file_name().unwrap().to_string_lossy().into_owned(),
            min_patient_id: footer.min_patient_id,
            max_patient_id: footer.max_patient_id,
            event_count: footer.event_count,
            patient_count: footer.patient_count,
        });
        Ok(())
    };

    for event in sorted {
        let event = event?;
        let new_patient = last_pid.as_deref() != Some(event.patient_id.as_str());
        if new_patient {
            if let Some(prev) = &last_pid {
                if prev.as_bytes() > event.patient_id.as_bytes() {
                    return Err(Error::Config(format!(
                        "input not sorted: patient `{}` after `{prev}`",
                        event.patient_id
                    )));
                }
            }
            if current.as_ref().is_some_and(|w| w.event_count() >= target_events) {
                close(current.take().unwrap(), &mut partitions)?;
            }
            last_pid = Some(event.patient_id.clone());
        }
        if current.is_none() {
            let name = format!("part-{:05}.evp", partitions.len());
            current = Some(EvpWriter::create(out_dir.join(name))?);
        }
        current.as_mut().unwrap().push(&event)?;
    }
    if let Some(w) = current {
        close(w, &mut partitions)?;
    }
    Ok(partitions)
}

// ---------------------------------------------------------------------------
// Table reading

/// Where an output value comes from: the table's own row or the joined parent columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Row(usize),
    Joined(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ParentKey {
    path: PathBuf,
    on: String,
    columns: Vec<String>,
}

#[derive(Debug, Clone)]
struct JoinPlan {
    parent_path: PathBuf,
    on: String,
    columns: Vec<String>,
    /// Index of the join key in the child row.
    child_key: usize,
}

impl JoinPlan {
    fn key(&self) -> ParentKey {
        ParentKey {
            path: self.parent_path.clone(),
            on: self.on.clone(),
            columns: self.columns.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct TablePlan {
    name: String,
    path: PathBuf,
    pid: usize,
    timestamp: Option<(Source, Option<String>)>,
    attributes: Vec<(String, Source)>,
    join: Option<JoinPlan>,
    /// Row columns needed downstream, in header order.
    used_columns: Vec<usize>,
}

fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?;
    Ok(headers.iter().map(str::to_string).collect())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

impl TablePlan {
    fn resolve(t: &TableSpec, d: &DatasetDescriptor, base: &Path) -> Result<Self> {
        let path = base.join(&t.file);
        let header = read_header(&path)?;
        let col = |name: &str| header.iter().position(|h| h == name);
        let join = match &t.join {
            None => None,
            Some(j) => {
                let parent = d.table(&j.table).expect("validated join target");
                let parent_path = base.join(&parent.file);
                let child_key = col(&j.on).ok_or_else(|| Error::JoinKey {
                    table: t.name.clone(),
                    column: j.on.clone(),
                    path: path.clone(),
                })?;
                Some(JoinPlan {
                    parent_path,
                    on: j.on.clone(),
                    columns: j.columns.clone(),
                    child_key,
                })
            }
        };
        let source = |name: &str| -> Result<Source> {
            if let Some(j) = &join {
                if let Some(i) = j.columns.iter().position(|c| c == name) {
                    return Ok(Source::Joined(i));
                }
            }
            col(name).map(Source::Row).ok_or_else(|| Error::MissingColumn {
                path: path.clone(),
                column: name.to_string(),
            })
        };
        let pid = col(&t.patient_id_column).ok_or_else(|| Error::MissingColumn {
            path: path.clone(),
            column: t.patient_id_column.clone(),
        })?;
        let timestamp = match &t.timestamp_column {
            Some(c) => Some((source(c)?, t.timestamp_format.clone())),
            None => None,
        };
        let attributes = t
            .attribute_columns
            .iter()
            .map(|c| Ok((c.clone(), source(c)?)))
            .collect::<Result<Vec<_>>>()?;

        let mut used_columns: Vec<usize> = vec![pid];
        if let Some((Source::Row(i), _)) = timestamp {
            used_columns.push(i);
        }
        used_columns.extend(attributes.iter().filter_map(|(_, s)| match s {
            Source::Row(i) => Some(*i),
            Source::Joined(_) => None,
        }));
        if let Some(j) = &join {
            used_columns.push(j.child_key);
        }
        used_columns.sort_unstable();
        used_columns.dedup();

        Ok(TablePlan {
            name: t.name.clone(),
            path,
            pid,
            timestamp,
            attributes,
            join,
            used_columns,
        })
    }

    /// Builds the event for one (possibly joined) row. `row` is indexed like `used_columns`.
    fn build_event(
        &self,
        row: &[Option<String>],
        joined: &[Option<String>],
        seq: u64,
        row_number: u64,
    ) -> Result<Event> {
        let get = |s: Source| -> Option<&str> {
            match s {
                Source::Row(i) => {
                    let k = self.used_columns.binary_search(&i).expect("planned column");
                    row[k].as_deref()
                }
                Source::Joined(i) => joined.get(i).and_then(|v| v.as_deref()),
            }
        };
        let patient_id = get(Source::Row(self.pid)).unwrap_or("");
        if patient_id.is_empty() {
            return Err(Error::Csv {
                path: self.path.clone(),
                message: format!("row {row_number}: empty patient id"),
            });
        }
        let timestamp = match &self.timestamp {
            Some((src, Some(format))) => match get(*src) {
                Some(v) => Some(parse_timestamp(v, format).ok_or_else(|| Error::TimestampParse {
                    path: self.path.clone(),
                    row: row_number,
                    value: v.to_string(),
                    format: format.clone(),
                })?),
                None => None,
            },
            // No declared format: never guess.
            Some((_, None)) | None => None,
        };
        let attributes = self
            .attributes
            .iter()
            .filter_map(|(name, src)| get(*src).map(|v| (name.clone(), v.to_string())))
            .collect();
        Ok(Event {
            patient_id: patient_id.to_string(),
            event_type: self.name.clone(),
            timestamp,
            seq,
            attributes,
        })
    }

    fn rows(&self) -> Result<RowIter> {
        Ok(RowIter {
            path: self.path.clone(),
            reader: csv_reader(&self.path)?,
            record: csv::StringRecord::new(),
            columns: self.used_columns.clone(),
            row_number: 0,
        })
    }

    fn child_key_slot(&self) -> Option<usize> {
        let j = self.join.as_ref()?;
        self.used_columns.binary_search(&j.child_key).ok()
    }
}

/// Parses a cell with a strftime-style format; date-only formats yield midnight.
pub fn parse_timestamp(value: &str, format: &str) -> Option<Timestamp> {
    let value = value.trim();
    if let Ok(dt) = NaiveDateTime::parse_from_str(value, format) {
        return Some(Timestamp::from_naive(dt));
    }
    NaiveDate::parse_from_str(value, format)
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(Timestamp::from_naive)
}

struct RowIter {
    path: PathBuf,
    reader: csv::Reader<fs::File>,
    record: csv::StringRecord,
    columns: Vec<usize>,
    row_number: u64,
}

impl RowIter {
    /// Next data row as the planned cells (empty cells become `None`), with its 1-based number.
    fn next_row(&mut self) -> Result<Option<(u64, Vec<Option<String>>)>> {
        let more = self
            .reader
            .read_record(&mut self.record)
            .map_err(|e| csv_error(&self.path, e))?;
        if !more {
            return Ok(None);
        }
        self.row_number += 1;
        let cells = self
            .columns
            .iter()
            .map(|&i| self.record.get(i).filter(|v| !v.is_empty()).map(str::to_string))
            .collect();
        Ok(Some((self.row_number, cells)))
    }
}

fn cells_size(cells: &[Option<String>]) -> usize {
    cells
        .iter()
        .map(|c| 24 + c.as_ref().map_or(0, |s| s.len() + 16))
        .sum::<usize>()
}

/// Parent rows keyed by join value, in parent file order.
struct ParentIndex {
    rows: HashMap<String, Vec<Vec<Option<String>>>>,
    bytes: usize,
    _guard: crate::mem::MemGuard,
}

impl ParentIndex {
    /// Loads the parent's join columns, or returns `None` if they exceed `limit` bytes.
    fn load(j: &JoinPlan, limit: usize, tracker: &MemTracker) -> Result<Option<Self>> {
        let (mut rows_iter, key_slot) = parent_rows(j)?;
        let mut rows: HashMap<String, Vec<Vec<Option<String>>>> = HashMap::new();
        let mut guard = tracker.guard(0);
        let mut bytes = 0usize;
        while let Some((_, mut cells)) = rows_iter.next_row()? {
            let Some(key) = cells[key_slot].take() else { continue };
            let values = project_parent(&cells, key_slot, j.columns.len());
            bytes += 96 + key.len() + cells_size(&values);
            if bytes > limit {
                return Ok(None);
            }
            guard.set(bytes);
            rows.entry(key).or_default().push(values);
        }
        Ok(Some(ParentIndex {
            rows,
            bytes,
            _guard: guard,
        }))
    }
}

/// Opens the parent table projected to `[key, columns...]`; returns the key slot.
fn parent_rows(j: &JoinPlan) -> Result<(RowIter, usize)> {
    let header = read_header(&j.parent_path)?;
    let key_col = header.iter().position(|h| *h == j.on).ok_or_else(|| Error::JoinKey {
        table: j.parent_path.display().to_string(),
        column: j.on.clone(),
        path: j.parent_path.clone(),
    })?;
    let mut columns = vec![key_col];
    for c in &j.columns {
        let i = header.iter().position(|h| h == c).ok_or_else(|| Error::MissingColumn {
            path: j.parent_path.clone(),
            column: c.clone(),
        })?;
        columns.push(i);
    }
    let iter = RowIter {
        path: j.parent_path.clone(),
        reader: csv_reader(&j.parent_path)?,
        record: csv::StringRecord::new(),
        columns,
        row_number: 0,
    };
    Ok((iter, 0))
}

/// Parent cells are laid out as [key, columns...]; returns the columns part.
fn project_parent(cells: &[Option<String>], key_slot: usize, n: usize) -> Vec<Option<String>> {
    debug_assert_eq!(key_slot, 0);
    cells[1..=n].to_vec()
}

/// Reads one table into sorted runs; returns the runs and the number of events produced.
///
/// `worker_cfg.budget_bytes` is this worker's share of the memory budget.
fn table_runs(
    plan: &TablePlan,
    parent: Option<&ParentIndex>,
    worker_cfg: &SortConfig,
    table_index: usize,
) -> Result<(Vec<PathBuf>, u64)> {
    let prefix = format!("t{table_index:04}");
    let share = worker_cfg.budget_bytes;
    let merge_join = plan.join.is_some() && parent.is_none();
    let writer_budget = if merge_join { share / 4 * 3 } else { share };
    let mut writer = RunWriter::<Event>::new(worker_cfg, prefix.clone(), writer_budget);
    let mut rows = plan.rows()?;
    let mut seq = 0u64;
    match (&plan.join, parent) {
        (None, _) => {
            while let Some((n, cells)) = rows.next_row()? {
                writer.push(plan.build_event(&cells, &[], seq, n)?)?;
                seq += 1;
            }
        }
        (Some(j), Some(parent)) => {
            let slot = plan.child_key_slot().expect("join key planned");
            let unmatched = vec![None; j.columns.len()];
            while let Some((n, cells)) = rows.next_row()? {
                let matches = cells[slot].as_ref().and_then(|k| parent.rows.get(k));
                match matches {
                    Some(list) => {
                        for joined in list {
                            writer.push(plan.build_event(&cells, joined, seq, n)?)?;
                            seq += 1;
                        }
                    }
                    None => {
                        writer.push(plan.build_event(&cells, &unmatched, seq, n)?)?;
                        seq += 1;
                    }
                }
            }
        }
        (Some(j), None) => {
            drop(rows);
            seq = sort_merge_join(plan, j, worker_cfg, &prefix, &mut writer)?;
        }
    }
    Ok((writer.finish()?, seq))
}

// ---------------------------------------------------------------------------
// Sort-merge join for parents that exceed the hash-join allowance

/// Row carried through the sort-merge join.
#[derive(Debug, Clone, PartialEq, Eq)]
struct JoinRow {
    key: String,
    ord: u64,
    pord: u64,
    row_number: u64,
    cells: Vec<Option<String>>,
}

fn encode_join_row(r: &JoinRow, out: &mut Vec<u8>) {
    put_str(out, &r.key);
    out.extend_from_slice(&r.ord.to_le_bytes());
    out.extend_from_slice(&r.pord.to_le_bytes());
    out.extend_from_slice(&r.row_number.to_le_bytes());
    out.extend_from_slice(&(r.cells.len() as u32).to_le_bytes());
    for c in &r.cells {
        match c {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                put_str(out, s);
            }
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn decode_join_row<R: io::Read>(r: &mut R) -> io::Result<Option<JoinRow>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let key = read_string(r, u32::from_le_bytes(len) as usize)?;
    let ord = read_u64(r)?;
    let pord = read_u64(r)?;
    let row_number = read_u64(r)?;
    let n = read_u32(r)? as usize;
    let mut cells = Vec::with_capacity(n);
    for _ in 0..n {
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        cells.push(if flag[0] == 1 {
            let l = read_u32(r)? as usize;
            Some(read_string(r, l)?)
        } else {
            None
        });
    }
    Ok(Some(JoinRow {
        key,
        ord,
        pord,
        row_number,
        cells,
    }))
}

fn read_u32<R: io::Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: io::Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: io::Read>(r: &mut R, n: usize) -> io::Result<String> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "invalid utf-8"))
}

macro_rules! join_row_order {
    ($name:ident, |$a:ident, $b:ident| $cmp:expr) => {
        struct $name(JoinRow);

        impl SortRecord for $name {
            fn sort_cmp(&self, other: &Self) -> std::cmp::Ordering {
                let ($a, $b) = (&self.0, &other.0);
                $cmp
            }
            fn mem_size(&self) -> usize {
                96 + self.0.key.len() + cells_size(&self.0.cells)
            }
            fn encode(&self, out: &mut Vec<u8>) -> io::Result<()> {
                encode_join_row(&self.0, out);
                Ok(())
            }
            fn decode<R: io::Read>(r: &mut R, _scratch: &mut Vec<u8>) -> io::Result<Option<Self>> {
                decode_join_row(r).map(|o| o.map($name))
            }
        }
    };
}

join_row_order!(ByKey, |a, b| a.key.as_bytes().cmp(b.key.as_bytes()).then(a.ord.cmp(&b.ord)));
join_row_order!(ByOrd, |a, b| a.ord.cmp(&b.ord).then(a.pord.cmp(&b.pord)));

/// Joins `plan`'s rows to the parent by sorting both sides on the key; pushes the resulting
/// events (in child-row order, matches in parent-file order) to `out`. Returns the event count.
///
/// `out` stays empty until the last phase; until then the phases below split the worker's share
/// so that concurrently live buffers never exceed it.
fn sort_merge_join(
    plan: &TablePlan,
    j: &JoinPlan,
    worker_cfg: &SortConfig,
    prefix: &str,
    out: &mut RunWriter<Event>,
) -> Result<u64> {
    let share = worker_cfg.budget_bytes;
    let sort_cfg = worker_cfg;
    // Each merge below holds at most a quarter of the share in read buffers.
    let merge_cfg = &SortConfig {
        budget_bytes: share / 2,
        ..worker_cfg.clone()
    };
    let slot = plan.child_key_slot().expect("join key planned");
    let mut child_runs = RunWriter::<ByKey>::new(sort_cfg, format!("{prefix}-jc"), share / 4 * 3);
    let mut rows = plan.rows()?;
    let mut ord = 0u64;
    let mut keyless = RunWriter::<ByOrd>::new(sort_cfg, format!("{prefix}-jk"), share / 4);
    while let Some((n, cells)) = rows.next_row()? {
        let row = JoinRow {
            key: cells[slot].clone().unwrap_or_default(),
            ord,
            pord: u64::MAX,
            row_number: n,
            cells,
        };
        if cells_present(&row.cells, slot) {
            child_runs.push(ByKey(row))?;
        } else {
            keyless.push(ByOrd(row))?;
        }
        ord += 1;
    }
    drop(rows);
    let child_runs = child_runs.finish()?;
    let keyless_runs = keyless.finish()?;

    let (mut prows, key_slot) = parent_rows(j)?;
    let mut parent_runs = RunWriter::<ByKey>::new(sort_cfg, format!("{prefix}-jp"), share);
    let mut pord = 0u64;
    while let Some((n, mut cells)) = prows.next_row()? {
        if let Some(key) = cells[key_slot].take() {
            parent_runs.push(ByKey(JoinRow {
                key,
                ord: pord,
                pord,
                row_number: n,
                cells: project_parent(&cells, key_slot, j.columns.len()),
            }))?;
        }
        pord += 1;
    }
    drop(prows);
    let parent_runs = parent_runs.finish()?;

    let mut joined = RunWriter::<ByOrd>::new(sort_cfg, format!("{prefix}-jj"), share / 4);
    let group_limit = share / 4;
    {
        let mut children = merge_runs::<ByKey>(child_runs, merge_cfg)?;
        let mut parents = merge_runs::<ByKey>(parent_runs, merge_cfg)?.peekable();
        let mut group_key: Option<String> = None;
        let mut group: Vec<(u64, Vec<Option<String>>)> = Vec::new();
        let mut group_guard = sort_cfg.tracker.guard(0);
        let unmatched = vec![None; j.columns.len()];
        for child in children.by_ref() {
            let ByKey(child) = child?;
            if group_key.as_deref() != Some(child.key.as_str()) {
                group.clear();
                group_key = Some(child.key.clone());
                let mut bytes = 0;
                while let Some(p) = parents.peek() {
                    let p = match p {
                        Ok(p) => &p.0,
                        Err(_) => {
                            return Err(parents.next().unwrap().err().unwrap());
                        }
                    };
                    match p.key.as_bytes().cmp(child.key.as_bytes()) {
                        std::cmp::Ordering::Less => {
                            parents.next();
                        }
                        std::cmp::Ordering::Equal => {
                            let ByKey(p) = parents.next().unwrap()?;
                            bytes += 64 + cells_size(&p.cells);
                            if bytes > group_limit {
                                return Err(Error::Budget {
                                    needed: bytes,
                                    budget: group_limit,
                                });
                            }
                            group.push((p.pord, p.cells));
                        }
                        std::cmp::Ordering::Greater => break,
                    }
                }
                group_guard.set(bytes);
            }
            if group.is_empty() {
                let mut cells = child.cells.clone();
                cells.extend(unmatched.iter().cloned());
                joined.push(ByOrd(JoinRow {
                    pord: u64::MAX,
                    cells,
                    ..child
                }))?;
            } else {
                for (pord, values) in &group {
                    let mut cells = child.cells.clone();
                    cells.extend(values.iter().cloned());
                    joined.push(ByOrd(JoinRow {
                        key: String::new(),
                        ord: child.ord,
                        pord: *pord,
                        row_number: child.row_number,
                        cells,
                    }))?;
                }
            }
        }
    }
    let mut joined_runs = joined.finish()?;
    // Keyless rows carry no joined cells yet; pad them so every row has the same layout.
    let padded_keyless = {
        let mut w = RunWriter::<ByOrd>::new(sort_cfg, format!("{prefix}-jq"), share / 4);
        for r in merge_runs::<ByOrd>(keyless_runs, merge_cfg)? {
            let ByOrd(mut r) = r?;
            r.cells.extend(std::iter::repeat_n(None, j.columns.len()));
            w.push(ByOrd(r))?;
        }
        w.finish()?
    };
    joined_runs.extend(padded_keyless);

    let width = plan.used_columns.len();
    let mut seq = 0u64;
    for r in merge_runs::<ByOrd>(joined_runs, merge_cfg)? {
        let ByOrd(r) = r?;
        let (row, joined) = r.cells.split_at(width);
        out.push(plan.build_event(row, joined, seq, r.row_number)?)?;
        seq += 1;
    }
    Ok(seq)
}

fn cells_present(cells: &[Option<String>], slot: usize) -> bool {
    cells[slot].is_some()
}
