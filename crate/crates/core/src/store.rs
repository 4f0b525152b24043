//! Lazy read layer over a partition cache.
//!
//! Opening a store reads only `manifest.json`. Point lookups binary-search the manifest's
//! per-partition patient ranges and scan a single partition; batch iteration streams partitions
//! in order and yields consecutive patients.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use memmap2::Mmap;

use crate::error::{Error, Result};
use crate::event::{Event, EventFilter, PatientRecord};
use crate::evp::{self, EvpReader, SliceCursor};
use crate::ingest::CacheManifest;
use crate::mem::MemTracker;

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_OPEN_PARTITIONS: usize = 16;
/// Records between entries of a partition's in-memory seek table.
const SEEK_STRIDE: usize = 256;

/// A mapped partition plus a sparse table of patient-start offsets, built on first use.
struct PartitionHandle {
    map: Mmap,
    records_end: usize,
    /// Offsets of records that start a new patient, roughly every `SEEK_STRIDE` records.
    seeks: Vec<usize>,
}

impl PartitionHandle {
    fn open(path: &Path, bytes_read: &AtomicU64) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        // SAFETY: cache partitions are immutable once the manifest referencing them exists.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        let footer = evp::parse_footer(&map).map_err(|e| Error::io(path, e))?;
        let records_end = footer.footer_offset as usize;
        let mut seeks = Vec::new();
        let mut cursor = SliceCursor::new(&map[..records_end], evp::HEADER_LEN as usize);
        let mut since = SEEK_STRIDE;
        let mut last: Option<&[u8]> = None;
        while cursor.pos() < records_end {
            let at = cursor.pos();
            let pid = cursor.skip_record().map_err(|e| Error::io(path, e))?;
            if last != Some(pid) {
                if since >= SEEK_STRIDE {
                    seeks.push(at);
                    since = 0;
                }
                last = Some(pid);
            }
            since += 1;
        }
        bytes_read.fetch_add(map.len() as u64, Ordering::Relaxed);
        Ok(PartitionHandle {
            map,
            records_end,
            seeks,
        })
    }

    fn patient_events(&self, pid: &str, path: &Path) -> Result<Vec<Event>> {
        let records = &self.map[..self.records_end];
        let target = pid.as_bytes();
        let pid_at = |off: usize| SliceCursor::new(records, off).peek_patient_id();
        // Last seek entry whose patient is <= target.
        let mut lo = 0usize;
        let mut hi = self.seeks.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            let p = pid_at(self.seeks[mid]).map_err(|e| Error::io(path, e))?;
            if p <= target {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let Some(start) = lo.checked_sub(1).map(|i| self.seeks[i]) else {
            return Ok(Vec::new());
        };
        let mut cursor = SliceCursor::new(records, start);
        let mut out = Vec::new();
        while cursor.pos() < self.records_end {
            let p = cursor.peek_patient_id().map_err(|e| Error::io(path, e))?;
            match p.cmp(target) {
                std::cmp::Ordering::Less => {
                    cursor.skip_record().map_err(|e| Error::io(path, e))?;
                }
                std::cmp::Ordering::Equal => {
                    out.push(cursor.read_record().map_err(|e| Error::io(path, e))?);
                }
                std::cmp::Ordering::Greater => break,
            }
        }
        Ok(out)
    }
}

/// Read-only handle on a partition cache; safe to share across threads.
pub struct Store {
    manifest: CacheManifest,
    root: PathBuf,
    open_limit: usize,
    handles: Mutex<Vec<(usize, Arc<PartitionHandle>)>>,
    bytes_read: AtomicU64,
    peak_batch_events: AtomicUsize,
    tracker: MemTracker,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root)
            .field("partitions", &self.manifest.partitions.len())
            .finish()
    }
}

/// Opens the cache at `root`, reading only its manifest.
pub fn open_store(root: impl AsRef<Path>) -> Result<Store> {
    Store::open(root)
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let (manifest, bytes) = CacheManifest::load(&root)?;
        Ok(Store {
            manifest,
            root,
            open_limit: DEFAULT_OPEN_PARTITIONS,
            handles: Mutex::new(Vec::new()),
            bytes_read: AtomicU64::new(bytes),
            peak_batch_events: AtomicUsize::new(0),
            tracker: MemTracker::new(),
        })
    }

    /// Caps how many partitions stay mapped at once.
    pub fn with_open_limit(mut self, limit: usize) -> Self {
        self.open_limit = limit.max(1);
        self
    }

    /// Accounts batch buffers against `tracker` instead of a private one.
    pub fn with_tracker(mut self, tracker: MemTracker) -> Self {
        self.tracker = tracker;
        self
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn total_patients(&self) -> u64 {
        self.manifest.total_patients
    }

    /// Bytes read from disk so far, manifest included.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    /// Largest number of events held by any single batch yielded so far.
    pub fn peak_batch_events(&self) -> usize {
        self.peak_batch_events.load(Ordering::Relaxed)
    }

    fn partition_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.manifest.partitions[idx].path)
    }

    fn handle(&self, idx: usize) -> Result<Arc<PartitionHandle>> {
        {
            let mut lru = self.handles.lock().unwrap();
            if let Some(pos) = lru.iter().position(|(i, _)| *i == idx) {
                let entry = lru.remove(pos);
                let h = entry.1.clone();
                lru.insert(0, entry);
                return Ok(h);
            }
        }
        // Mapped outside the lock; two racing readers may both map, last insert wins.
        let h = Arc::new(PartitionHandle::open(&self.partition_path(idx), &self.bytes_read)?);
        let mut lru = self.handles.lock().unwrap();
        lru.retain(|(i, _)| *i != idx);
        lru.insert(0, (idx, h.clone()));
        lru.truncate(self.open_limit);
        Ok(h)
    }

    /// Index of the only partition whose range may contain `pid`.
    fn partition_for(&self, pid: &str) -> Option<usize> {
        let parts = &self.manifest.partitions;
        let i = parts.partition_point(|p| p.max_patient_id.as_bytes() < pid.as_bytes());
        (i < parts.len() && parts[i].min_patient_id.as_bytes() <= pid.as_bytes()).then_some(i)
    }

    /// All events of `patient_id` in canonical order, optionally filtered. Unknown ids yield `[]`.
    pub fn get_events(&self, patient_id: &str, filter: Option<&EventFilter>) -> Result<Vec<Event>> {
        let Some(idx) = self.partition_for(patient_id) else {
            return Ok(Vec::new());
        };
        let handle = self.handle(idx)?;
        let mut events = handle.patient_events(patient_id, &self.partition_path(idx))?;
        if let Some(f) = filter {
            events.retain(|e| f.matches(e));
        }
        Ok(events)
    }

    pub fn get_patient(&self, patient_id: &str) -> Result<Option<PatientRecord>> {
        let events = self.get_events(patient_id, None)?;
        Ok((!events.is_empty()).then(|| PatientRecord {
            patient_id: patient_id.to_string(),
            events,
        }))
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        (self.manifest.total_patients as usize).div_ceil(batch_size.max(1))
    }

    /// Every patient, ascending, in batches of `batch_size` consecutive patients.
    pub fn iter_patient_batches(&self, batch_size: usize) -> Result<PatientBatches<'_>> {
        self.batch_range(batch_size, 0..self.num_batches(batch_size))
    }

    /// Batches `range.start..range.end` of the full batch sequence.
    pub fn batch_range(
        &self,
        batch_size: usize,
        range: std::ops::Range<usize>,
    ) -> Result<PatientBatches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let total = self.num_batches(batch_size);
        let end = range.end.min(total);
        let start = range.start.min(end);
        let first_patient = (start * batch_size) as u64;
        // Locate the partition holding the first patient of the range.
        let mut skip = first_patient;
        let mut partition = 0usize;
        for p in &self.manifest.partitions {
            if skip < p.patient_count {
                break;
            }
            skip -= p.patient_count;
            partition += 1;
        }
        Ok(PatientBatches {
            store: self,
            batch_size,
            next_batch: start,
            end_batch: end,
            partition,
            skip_patients: skip,
            reader: None,
            lookahead: None,
            guard: self.tracker.guard(0),
        })
    }

    /// Every event in cache order; used by tests and tools, not by the pipeline.
    pub fn scan_all(&self) -> Result<Vec<Event>> {
        let mut out = Vec::new();
        for i in 0..self.manifest.partitions.len() {
            out.extend(evp::read_all(&self.partition_path(i))?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientBatch {
    pub batch_index: usize,
    pub records: Vec<PatientRecord>,
}

/// Streaming iterator over consecutive-patient batches.
pub struct PatientBatches<'a> {
    store: &'a Store,
    batch_size: usize,
    next_batch: usize,
    end_batch: usize,
    partition: usize,
    skip_patients: u64,
    reader: Option<EvpReader>,
    lookahead: Option<Event>,
    guard: crate::mem::MemGuard,
}

impl PatientBatches<'_> {
    fn next_event(&mut self) -> Result<Option<Event>> {
        if let Some(e) = self.lookahead.take() {
            return Ok(Some(e));
        }
        loop {
            if self.reader.is_none() {
                if self.partition >= self.store.manifest.partitions.len() {
                    return Ok(None);
                }
                let path = self.store.partition_path(self.partition);
                self.reader = Some(EvpReader::open(&path)?);
                self.partition += 1;
            }
            match self.reader.as_mut().unwrap().next_event()? {
                Some(e) => return Ok(Some(e)),
                None => self.reader = None,
            }
        }
    }

    fn next_patient(&mut self) -> Result<Option<(PatientRecord, usize)>> {
        let Some(first) = self.next_event()? else {
            return Ok(None);
        };
        let pid = first.patient_id.clone();
        let mut bytes = first.approx_size();
        let mut events = vec![first];
        while let Some(e) = self.next_event()? {
            if e.patient_id != pid {
                self.lookahead = Some(e);
                break;
            }
            bytes += e.approx_size();
            events.push(e);
        }
        Ok(Some((
            PatientRecord {
                patient_id: pid,
                events,
            },
            bytes,
        )))
    }

    fn next_batch(&mut self) -> Result<Option<PatientBatch>> {
        if self.next_batch >= self.end_batch {
            return Ok(None);
        }
        while self.skip_patients > 0 {
            if self.next_patient()?.is_none() {
                return Ok(None);
            }
            self.skip_patients -= 1;
        }
        self.guard.set(0);
        let mut records = Vec::with_capacity(self.batch_size);
        let mut events = 0usize;
        let mut bytes = 0usize;
        while records.len() < self.batch_size {
            match self.next_patient()? {
                Some((r, b)) => {
                    events += r.events.len();
                    bytes += b;
                    self.guard.set(bytes);
                    records.push(r);
                }
                None => break,
            }
        }
        if records.is_empty() {
            return Ok(None);
        }
        self.store
            .peak_batch_events
            .fetch_max(events, Ordering::Relaxed);
        let batch = PatientBatch {
            batch_index: self.next_batch,
            records,
        };
        self.next_batch += 1;
        Ok(Some(batch))
    }
}

impl Iterator for PatientBatches<'_> {
    type Item = Result<PatientBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_batch() {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => None,
            Err(e) => {
                self.end_batch = 0;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::event::{cmp_events, Timestamp};
    use crate::ingest::{write_partitions, EventPartition, MANIFEST_FILE};
    use std::collections::BTreeMap;

    /// Builds a cache directly from events, bypassing CSV ingest.
    pub(crate) fn build_cache(dir: &Path, mut events: Vec<Event>, target: u64) -> CacheManifest {
        events.sort_by(cmp_events);
        std::fs::create_dir_all(dir).unwrap();
        let partitions = write_partitions(events.into_iter().map(Ok), dir, target).unwrap();
        let manifest = CacheManifest {
            dataset_name: "test".into(),
            descriptor_digest: "0".into(),
            total_events: partitions.iter().map(|p| p.event_count).sum(),
            total_patients: partitions.iter().map(|p| p.patient_count).sum(),
            partitions,
            created_at: "1970-01-01T00:00:00Z".into(),
        };
        std::fs::write(dir.join(MANIFEST_FILE), manifest.to_json()).unwrap();
        manifest
    }

    fn mixed_events(n_patients: usize, seed: u64) -> Vec<Event> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_pcg::Pcg64::seed_from_u64(seed);
        let mut out = Vec::new();
        for p in 0..n_patients {
            let n = rng.random_range(1..12);
            for s in 0..n {
                let ty = ["admissions", "diagnoses", "procedures"][rng.random_range(0..3)];
                let mut attrs = BTreeMap::new();
                attrs.insert("code".to_string(), format!("{}", rng.random_range(0..50)));
                let ts = rng.random_bool(0.8).then(|| Timestamp(rng.random_range(0..1000)));
                out.push(Event::new(format!("P{p:04}"), ty, ts, s, attrs).unwrap());
            }
        }
        out
    }

    #[test]
    fn open_reads_only_manifest() {
        let dir = tempfile::tempdir().unwrap();
        build_cache(dir.path(), mixed_events(50, 1), 40);
        let manifest_len = std::fs::metadata(dir.path().join(MANIFEST_FILE)).unwrap().len();
        let store = open_store(dir.path()).unwrap();
        assert_eq!(store.bytes_read(), manifest_len);
        assert_eq!(store.total_patients(), 50);
    }

    #[test]
    fn overlapping_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_cache(dir.path(), mixed_events(20, 2), 10);
        assert!(m.partitions.len() >= 2);
        m.partitions[1] = EventPartition {
            min_patient_id: m.partitions[0].min_patient_id.clone(),
            ..m.partitions[1].clone()
        };
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(open_store(dir.path()), Err(Error::Manifest(_))));
        std::fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(matches!(open_store(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn empty_cache_iterates_nothing() {
        let dir = tempfile::tempdir().unwrap();
        build_cache(dir.path(), vec![], 10);
        let store = open_store(dir.path()).unwrap();
        assert_eq!(store.iter_patient_batches(128).unwrap().count(), 0);
        assert!(store.get_events("P1", None).unwrap().is_empty());
    }

    #[test]
    fn get_events_matches_linear_scan() {
        let dir = tempfile::tempdir().unwrap();
        let events = mixed_events(2000, 3);
        build_cache(dir.path(), events.clone(), 500);
        let store = open_store(dir.path()).unwrap().with_open_limit(2);
        let all = store.scan_all().unwrap();
        for p in (0..2000).step_by(7).chain([1999]) {
            let pid = format!("P{p:04}");
            let oracle: Vec<Event> = all.iter().filter(|e| e.patient_id == pid).cloned().collect();
            assert_eq!(store.get_events(&pid, None).unwrap(), oracle, "{pid}");
        }
        assert!(store.get_events("P9999", None).unwrap().is_empty());
        assert!(store.get_events("A", None).unwrap().is_empty());
        assert!(store.get_events("P0000x", None).unwrap().is_empty());
    }

    #[test]
    fn filter_by_event_type_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        build_cache(dir.path(), mixed_events(30, 4), 1000);
        let store = open_store(dir.path()).unwrap();
        let f = EventFilter::new().with_event_types(["diagnoses"]);
        for p in 0..30 {
            let pid = format!("P{p:04}");
            let full = store.get_events(&pid, None).unwrap();
            let oracle: Vec<Event> = full.into_iter().filter(|e| e.event_type == "diagnoses").collect();
            assert_eq!(store.get_events(&pid, Some(&f)).unwrap(), oracle);
        }
    }

    #[test]
    fn batches_of_128() {
        let dir = tempfile::tempdir().unwrap();
        build_cache(dir.path(), mixed_events(300, 5), 200);
        let store = open_store(dir.path()).unwrap();
        let sizes: Vec<usize> = store
            .iter_patient_batches(DEFAULT_BATCH_SIZE)
            .unwrap()
            .map(|b| b.unwrap().records.len())
            .collect();
        assert_eq!(sizes, vec![128, 128, 44]);

        let one = tempfile::tempdir().unwrap();
        build_cache(one.path(), mixed_events(1, 6), 200);
        let store = open_store(one.path()).unwrap();
        let sizes: Vec<usize> = store.iter_patient_batches(128).unwrap().map(|b| b.unwrap().records.len()).collect();
        assert_eq!(sizes, vec![1]);
    }

    #[test]
    fn batch_ranges_concatenate_to_full_iteration() {
        let dir = tempfile::tempdir().unwrap();
        build_cache(dir.path(), mixed_events(1000, 7), 300);
        let store = open_store(dir.path()).unwrap();
        let full: Vec<PatientBatch> = store.iter_patient_batches(16).unwrap().map(|b| b.unwrap()).collect();
        let n = store.num_batches(16);
        let mut pieces = Vec::new();
        for (a, b) in [(0, 5), (5, 6), (6, 40), (40, n)] {
            pieces.extend(store.batch_range(16, a..b).unwrap().map(|b| b.unwrap()));
        }
        assert_eq!(pieces, full);
        let ids: Vec<String> = full.iter().flat_map(|b| b.records.iter().map(|r| r.patient_id.clone())).collect();
        let mut expect: Vec<String> = (0..1000).map(|p| format!("P{p:04}")).collect();
        expect.sort();
        assert_eq!(ids, expect);
        let max_patient = full
            .iter()
            .map(|b| b.records.len() * b.records.iter().map(|r| r.events.len()).max().unwrap())
            .max()
            .unwrap();
        assert!(store.peak_batch_events() <= max_patient);
    }
}
