//! Out-of-core sorting: bounded in-memory runs are sorted and spilled, then merged k-way.
//!
//! Runs are ordered by the caller. The merge breaks ties by run order, so the result is a
//! stable sort of the concatenated input regardless of where run boundaries fell.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::evp;
use crate::event::{cmp_events, Event};
use crate::mem::{MemGuard, MemTracker};

/// Per-run read buffer used during merging.
pub const MERGE_READ_BUFFER: usize = 256 * 1024;
const SPILL_WRITE_BUFFER: usize = 256 * 1024;

/// A record that can be spilled to disk and compared.
pub trait SortRecord: Sized + Send {
    fn sort_cmp(&self, other: &Self) -> Ordering;
    /// Approximate resident size in bytes, including the value itself.
    fn mem_size(&self) -> usize;
    fn encode(&self, out: &mut Vec<u8>) -> io::Result<()>;
    fn decode<R: Read>(r: &mut R, scratch: &mut Vec<u8>) -> io::Result<Option<Self>>;
}

impl SortRecord for Event {
    fn sort_cmp(&self, other: &Self) -> Ordering {
        cmp_events(self, other)
    }

    fn mem_size(&self) -> usize {
        self.approx_size()
    }

    fn encode(&self, out: &mut Vec<u8>) -> io::Result<()> {
        evp::encode_record(self, out)
    }

    fn decode<R: Read>(r: &mut R, scratch: &mut Vec<u8>) -> io::Result<Option<Self>> {
        evp::read_record_from(r, scratch)
    }
}

/// Counters shared by every sorter built from one config.
#[derive(Debug, Default)]
pub struct SortStats {
    runs_written: AtomicUsize,
    merge_passes: AtomicUsize,
}

impl SortStats {
    pub fn runs_written(&self) -> usize {
        self.runs_written.load(AtomicOrdering::Relaxed)
    }

    /// Intermediate passes needed because there were more runs than the merge fan-in.
    pub fn merge_passes(&self) -> usize {
        self.merge_passes.load(AtomicOrdering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub struct SortConfig {
    /// Memory for one run buffer, and for the merge phase.
    pub budget_bytes: usize,
    pub spill_dir: PathBuf,
    pub tracker: MemTracker,
    pub stats: Arc<SortStats>,
}

impl SortConfig {
    pub fn new(budget_bytes: usize, spill_dir: impl Into<PathBuf>) -> Self {
        SortConfig {
            budget_bytes,
            spill_dir: spill_dir.into(),
            tracker: MemTracker::new(),
            stats: Arc::new(SortStats::default()),
        }
    }

    pub fn with_tracker(mut self, tracker: MemTracker) -> Self {
        self.tracker = tracker;
        self
    }

    /// Number of runs merged at once; bounded so all read buffers fit in half the budget.
    pub fn fan_in(&self) -> usize {
        (self.budget_bytes / 2 / MERGE_READ_BUFFER).max(2)
    }

    fn next_run_path(&self, prefix: &str) -> PathBuf {
        let n = self.stats.runs_written.fetch_add(1, AtomicOrdering::Relaxed);
        self.spill_dir.join(format!("{prefix}-{n:06}.run"))
    }
}

/// Accumulates records into a bounded buffer and spills sorted runs.
pub struct RunWriter<T: SortRecord> {
    cfg: SortConfig,
    prefix: String,
    budget: usize,
    buf: Vec<T>,
    buf_bytes: usize,
    guard: MemGuard,
    runs: Vec<PathBuf>,
    scratch: Vec<u8>,
}

impl<T: SortRecord> RunWriter<T> {
    /// `budget` bounds this writer's buffer plus its spill buffer; several writers may share
    /// one config.
    pub fn new(cfg: &SortConfig, prefix: impl Into<String>, budget: usize) -> Self {
        RunWriter {
            guard: cfg.tracker.guard(0),
            cfg: cfg.clone(),
            prefix: prefix.into(),
            budget: budget.saturating_sub(SPILL_WRITE_BUFFER),
            buf: Vec::new(),
            buf_bytes: 0,
            runs: Vec::new(),
            scratch: Vec::new(),
        }
    }

    fn accounted(&self) -> usize {
        self.buf_bytes + (self.buf.capacity() - self.buf.len()) * std::mem::size_of::<T>()
    }

    pub fn push(&mut self, item: T) -> Result<()> {
        let size = item.mem_size();
        if size > self.budget {
            return Err(Error::Budget {
                needed: size,
                budget: self.budget,
            });
        }
        if self.accounted() + size > self.budget {
            self.spill()?;
        }
        if self.buf.len() == self.buf.capacity() {
            // Grow by hand so unused capacity stays inside the budget.
            let free = self.budget.saturating_sub(self.accounted() + size);
            let extra = (free / 2 / std::mem::size_of::<T>().max(1)).clamp(1, self.buf.len().max(64));
            self.buf.reserve_exact(extra);
        }
        self.buf_bytes += size;
        self.buf.push(item);
        let acc = self.accounted();
        self.guard.set(acc);
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        if self.buf.is_empty() {
            return Ok(());
        }
        self.buf.sort_by(T::sort_cmp);
        let path = self.cfg.next_run_path(&self.prefix);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::with_capacity(SPILL_WRITE_BUFFER, file);
        let guard = self.cfg.tracker.guard(SPILL_WRITE_BUFFER);
        for item in self.buf.drain(..) {
            self.scratch.clear();
            item.encode(&mut self.scratch)
                .and_then(|_| out.write_all(&self.scratch))
                .map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        drop(guard);
        self.buf = Vec::new();
        self.buf_bytes = 0;
        self.guard.set(0);
        self.runs.push(path);
        Ok(())
    }

    /// Spills whatever is buffered and returns the runs in creation order.
    pub fn finish(mut self) -> Result<Vec<PathBuf>> {
        self.spill()?;
        Ok(std::mem::take(&mut self.runs))
    }
}

struct Head<T> {
    item: T,
    run: usize,
}

impl<T: SortRecord> PartialEq for Head<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: SortRecord> Eq for Head<T> {}
impl<T: SortRecord> PartialOrd for Head<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: SortRecord> Ord for Head<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.item
            .sort_cmp(&other.item)
            .then(self.run.cmp(&other.run))
    }
}

/// Streaming k-way merge over sorted run files.
pub struct MergeIter<T: SortRecord> {
    paths: Vec<PathBuf>,
    readers: Vec<BufReader<File>>,
    heap: BinaryHeap<Reverse<Head<T>>>,
    scratch: Vec<u8>,
    _guard: MemGuard,
    failed: bool,
}

impl<T: SortRecord> MergeIter<T> {
    fn open(paths: Vec<PathBuf>, tracker: &MemTracker) -> Result<Self> {
        let guard = tracker.guard(paths.len() * MERGE_READ_BUFFER);
        let mut readers = Vec::with_capacity(paths.len());
        for p in &paths {
            let f = File::open(p).map_err(|e| Error::io(p, e))?;
            readers.push(BufReader::with_capacity(MERGE_READ_BUFFER, f));
        }
        let mut it = MergeIter {
            paths,
            readers,
            heap: BinaryHeap::new(),
            scratch: Vec::new(),
            _guard: guard,
            failed: false,
        };
        for run in 0..it.readers.len() {
            it.refill(run)?;
        }
        Ok(it)
    }

    fn refill(&mut self, run: usize) -> Result<()> {
        let next = T::decode(&mut self.readers[run], &mut self.scratch)
            .map_err(|e| Error::io(&self.paths[run], e))?;
        if let Some(item) = next {
            self.heap.push(Reverse(Head { item, run }));
        }
        Ok(())
    }
}

impl<T: SortRecord> Iterator for MergeIter<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let Reverse(Head { item, run }) = self.heap.pop()?;
        if let Err(e) = self.refill(run) {
            self.failed = true;
            return Some(Err(e));
        }
        Some(Ok(item))
    }
}

fn merge_into_run<T: SortRecord>(inputs: Vec<PathBuf>, cfg: &SortConfig, prefix: &str) -> Result<PathBuf> {
    let path = cfg.next_run_path(prefix);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::with_capacity(SPILL_WRITE_BUFFER, file);
    let _guard = cfg.tracker.guard(SPILL_WRITE_BUFFER);
    let mut scratch = Vec::new();
    for item in MergeIter::<T>::open(inputs.clone(), &cfg.tracker)? {
        scratch.clear();
        item?
            .encode(&mut scratch)
            .and_then(|_| out.write_all(&scratch))
            .map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    for p in inputs {
        remove_quietly(&p);
    }
    Ok(path)
}

fn remove_quietly(p: &Path) {
    let _ = std::fs::remove_file(p);
}

/// Merges ordered runs, reducing them in consecutive groups first when they exceed the fan-in.
pub fn merge_runs<T: SortRecord>(mut runs: Vec<PathBuf>, cfg: &SortConfig) -> Result<MergeIter<T>> {
    let fan_in = cfg.fan_in();
    while runs.len() > fan_in {
        cfg.stats.merge_passes.fetch_add(1, AtomicOrdering::Relaxed);
        let mut next = Vec::with_capacity(runs.len().div_ceil(fan_in));
        let mut rest = runs.into_iter().peekable();
        while rest.peek().is_some() {
            let group: Vec<PathBuf> = rest.by_ref().take(fan_in).collect();
            next.push(if group.len() == 1 {
                group.into_iter().next().unwrap()
            } else {
                merge_into_run::<T>(group, cfg, "merge")?
            });
        }
        runs = next;
    }
    MergeIter::open(runs, &cfg.tracker)
}

/// Sorts an arbitrary stream of records under `cfg.budget_bytes`.
pub fn external_sort<T, I>(input: I, cfg: &SortConfig) -> Result<MergeIter<T>>
where
    T: SortRecord,
    I: IntoIterator<Item = Result<T>>,
{
    // The merge phase gets its own share of the budget after the run buffer is released.
    let mut writer = RunWriter::new(cfg, "sort", cfg.budget_bytes);
    for item in input {
        writer.push(item?)?;
    }
    let runs = writer.finish()?;
    merge_runs(runs, cfg)
}

/// Event convenience wrapper over [`external_sort`].
pub fn sort_events<I>(input: I, cfg: &SortConfig) -> Result<MergeIter<Event>>
where
    I: IntoIterator<Item = Event>,
{
    external_sort(input.into_iter().map(Ok), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Timestamp;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn random_events(n: usize, seed: u64) -> Vec<Event> {
        let mut rng = rand_pcg::Pcg64::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut attrs = BTreeMap::new();
                attrs.insert("code".to_string(), format!("C{}", rng.random_range(0..500)));
                Event::new(
                    format!("P{:05}", rng.random_range(0..2000)),
                    ["admissions", "diagnoses", "patients"][rng.random_range(0..3)],
                    if rng.random_bool(0.9) {
                        Some(Timestamp(rng.random_range(0..1_000_000)))
                    } else {
                        None
                    },
                    i as u64,
                    attrs,
                )
                .unwrap()
            })
            .collect()
    }

    fn oracle_sort(mut v: Vec<Event>) -> Vec<Event> {
        v.sort_by(|a, b| {
            (&a.patient_id, a.timestamp.is_some(), a.timestamp, &a.event_type, a.seq).cmp(&(
                &b.patient_id,
                b.timestamp.is_some(),
                b.timestamp,
                &b.event_type,
                b.seq,
            ))
        });
        v
    }

    fn run_sort(events: Vec<Event>, budget: usize) -> (Vec<Event>, SortConfig, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SortConfig::new(budget, dir.path());
        let out: Vec<Event> = sort_events(events, &cfg)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        (out, cfg, dir)
    }

    #[test]
    fn sorted_input_is_unchanged() {
        let events = oracle_sort(random_events(10, 1));
        let (out, _, _d) = run_sort(events.clone(), 1 << 20);
        assert_eq!(out, events);
    }

    #[test]
    fn reverse_sorted_input() {
        let mut events = oracle_sort(random_events(10, 2));
        events.reverse();
        let (out, _, _d) = run_sort(events.clone(), 1 << 20);
        assert_eq!(out, oracle_sort(events));
    }

    #[test]
    fn hundred_thousand_events_spill_many_runs() {
        let events = random_events(100_000, 3);
        let (out, cfg, _d) = run_sort(events.clone(), 2 << 20);
        assert!(cfg.stats.runs_written() >= 8, "runs = {}", cfg.stats.runs_written());
        assert!(cfg.tracker.high_water() <= 2 << 20, "hw = {}", cfg.tracker.high_water());
        assert_eq!(out, oracle_sort(events));
    }

    #[test]
    fn multi_pass_merge_when_fan_in_exceeded() {
        let events = random_events(20_000, 4);
        // 1 MiB budget gives fan-in 2, forcing intermediate passes.
        let (out, cfg, _d) = run_sort(events.clone(), 1 << 20);
        assert!(cfg.stats.runs_written() > 2);
        assert!(cfg.stats.merge_passes() >= 1);
        assert_eq!(out, oracle_sort(events));
    }

    #[test]
    fn merge_is_stable_across_runs() {
        // Equal keys in different runs come out in run order.
        let dir = tempfile::tempdir().unwrap();
        let cfg = SortConfig::new(1 << 20, dir.path());
        let mk = |v: &str| {
            let mut a = BTreeMap::new();
            a.insert("v".to_string(), v.to_string());
            Event::new("P", "t", None, 0, a).unwrap()
        };
        let mut w1 = RunWriter::new(&cfg, "a", 1 << 20);
        w1.push(mk("first")).unwrap();
        let mut w2 = RunWriter::new(&cfg, "b", 1 << 20);
        w2.push(mk("second")).unwrap();
        let mut runs = w1.finish().unwrap();
        runs.extend(w2.finish().unwrap());
        let out: Vec<Event> = merge_runs(runs, &cfg).unwrap().map(|e| e.unwrap()).collect();
        assert_eq!(out[0].attr("v"), Some("first"));
        assert_eq!(out[1].attr("v"), Some("second"));
    }

    #[test]
    fn oversized_record_is_a_budget_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SortConfig::new(64, dir.path());
        let err = sort_events(random_events(1, 5), &cfg).err().unwrap();
        assert!(matches!(err, Error::Budget { .. }));
    }

    #[test]
    fn empty_input() {
        let (out, _, _d) = run_sort(vec![], 1 << 20);
        assert!(out.is_empty());
    }
}
