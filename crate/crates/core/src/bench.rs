//! End-to-end wall-time and peak-memory harness: raw tables to encoded sample shards.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::descriptor::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::ingest::{ingest, IngestConfig};
use crate::mem::MemTracker;
use crate::rss::{kernel_peak_rss_bytes, RssSampler, SAMPLE_INTERVAL};
use crate::store::{Store, DEFAULT_BATCH_SIZE};
use crate::task::{builtin_task, set_task, ClinicalSchema, TaskConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub task: String,
    pub workers: usize,
    pub mem_budget_bytes: usize,
    pub warm: bool,
    pub ingest_s: f64,
    pub task_s: f64,
    pub total_s: f64,
    /// Largest resident set size seen by the sampler over the whole run.
    pub peak_rss_bytes: u64,
    /// Kernel-recorded peak RSS of the process at the end of the run, where available.
    pub kernel_peak_rss_bytes: Option<u64>,
    /// Instrumented high-water mark of engine buffers (sort runs, join tables, patient batches).
    pub buffer_high_water: usize,
    pub total_events: u64,
    pub total_patients: u64,
    pub total_samples: u64,
    pub samples_per_second: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serializes")
    }

    /// Checks non-negativity and that the inclusive total covers both stages.
    pub fn is_consistent(&self) -> bool {
        let fields = [self.ingest_s, self.task_s, self.total_s, self.samples_per_second];
        fields.iter().all(|v| v.is_finite() && *v >= 0.0) && self.total_s + 1e-6 >= self.ingest_s + self.task_s
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Holds `cache/` and `samples/` for the run.
    pub work_dir: PathBuf,
    /// Reuses an existing cache and sample set instead of clearing them first.
    pub warm: bool,
    pub batch_size: usize,
    pub target_partition_events: u64,
    pub schema: ClinicalSchema,
}

impl BenchOptions {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        BenchOptions {
            work_dir: work_dir.into(),
            warm: false,
            batch_size: DEFAULT_BATCH_SIZE,
            target_partition_events: crate::ingest::DEFAULT_TARGET_PARTITION_EVENTS,
            schema: ClinicalSchema::default(),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.work_dir.join("cache")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.work_dir.join("samples")
    }
}

fn clear(dir: &Path) -> Result<()> {
    match fs::remove_dir_all(dir) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Runs ingest and `task_name` end to end, sampling RSS every 100 ms on a monitor thread.
pub fn run_bench(
    descriptor_path: &Path,
    task_name: &str,
    workers: usize,
    mem_budget_bytes: usize,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    let task = builtin_task(task_name, opts.schema.clone())
        .ok_or_else(|| Error::Config(format!("unknown task `{task_name}`")))?;
    let (descriptor, text) = DatasetDescriptor::from_file(descriptor_path)?;
    let base_dir = descriptor_path.parent().unwrap_or(Path::new("."));
    let (cache_dir, samples_dir) = (opts.cache_dir(), opts.samples_dir());
    if !opts.warm {
        clear(&cache_dir)?;
        clear(&samples_dir)?;
    }

    let tracker = MemTracker::new();
    let sampler = RssSampler::start(SAMPLE_INTERVAL);
    let start = Instant::now();

    let mut icfg = IngestConfig::new(&cache_dir);
    icfg.mem_budget_bytes = mem_budget_bytes;
    icfg.workers = workers;
    icfg.target_partition_events = opts.target_partition_events;
    icfg.tracker = tracker.clone();
    let ingested = ingest(&descriptor, &text, base_dir, &icfg)?;
    let ingest_s = start.elapsed().as_secs_f64();

    let task_start = Instant::now();
    let store = Store::open(&cache_dir)?.with_tracker(tracker.clone());
    let mut tcfg = TaskConfig::new(&samples_dir, workers);
    tcfg.batch_size = opts.batch_size;
    let report = set_task(&store, &task, &tcfg)?;
    let task_s = task_start.elapsed().as_secs_f64();
    let total_s = start.elapsed().as_secs_f64();
    let peak_rss_bytes = sampler.finish();

    let total_samples = report.manifest.total_samples;
    Ok(BenchReport {
        task: task.task_name.clone(),
        workers,
        mem_budget_bytes,
        warm: opts.warm,
        ingest_s,
        task_s,
        total_s,
        peak_rss_bytes,
        kernel_peak_rss_bytes: kernel_peak_rss_bytes(),
        buffer_high_water: tracker.high_water().max(ingested.buffer_high_water),
        total_events: ingested.manifest.total_events,
        total_patients: ingested.manifest.total_patients,
        total_samples,
        samples_per_second: if total_s > 0.0 { total_samples as f64 / total_s } else { 0.0 },
    })
}

/// Aligned text table with one column per report: wall times in seconds, memory in MiB.
pub fn render_table(reports: &[BenchReport]) -> String {
    const MIB: f64 = (1u64 << 20) as f64;
    type Row = (&'static str, fn(&BenchReport) -> String);
    let rows: [Row; 9] = [
        ("Workers", |r| r.workers.to_string()),
        ("Ingest (s)", |r| format!("{:.2}", r.ingest_s)),
        ("Task (s)", |r| format!("{:.2}", r.task_s)),
        ("Total (s)", |r| format!("{:.2}", r.total_s)),
        ("Peak RSS (MiB)", |r| format!("{:.1}", r.peak_rss_bytes as f64 / MIB)),
        ("Buffers (MiB)", |r| format!("{:.1}", r.buffer_high_water as f64 / MIB)),
        ("Events", |r| r.total_events.to_string()),
        ("Samples", |r| r.total_samples.to_string()),
        ("Samples/s", |r| format!("{:.0}", r.samples_per_second)),
    ];
    let cells: Vec<Vec<String>> = rows.iter().map(|(_, f)| reports.iter().map(f).collect()).collect();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let col_w = cells.iter().flatten().map(String::len).max().unwrap_or(0);
    let mut out = String::new();
    for (i, (label, _)) in rows.iter().enumerate() {
        let _ = write!(out, "{label:<label_w$} |");
        for c in &cells[i] {
            let _ = write!(out, " {c:>col_w$}");
        }
        out.push('\n');
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(label_w + 2 + reports.len() * (col_w + 1)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    /// Counts mortality samples straight from the generated CSVs.
    fn oracle_mortality_count(raw: &Path) -> u64 {
        use std::collections::{BTreeMap, BTreeSet};
        let rows = |name: &str| -> Vec<csv::StringRecord> {
            csv::Reader::from_path(raw.join(name)).unwrap().records().map(|r| r.unwrap()).collect()
        };
        let mut coded: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
        let (d, p, x) = (rows("diagnoses_icd.csv"), rows("procedures_icd.csv"), rows("prescriptions.csv"));
        for (table, recs) in [("d", &d), ("p", &p), ("x", &x)] {
            for r in recs.iter() {
                coded.entry(table).or_default().insert(r[1].to_string());
            }
        }
        let mut by_patient: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for r in rows("admissions.csv") {
            by_patient.entry(r[0].to_string()).or_default().push((r[2].to_string(), r[1].to_string()));
        }
        let mut n = 0;
        for adm in by_patient.values_mut() {
            adm.sort();
            for w in adm.windows(2) {
                let h = &w[0].1;
                if coded.values().all(|s| s.contains(h)) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn report_matches_counting_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_patients: 80,
            seed: 11,
            ..SynthConfig::default()
        };
        let (desc, summary) = generate(&cfg, &dir.path().join("raw")).unwrap();
        let opts = BenchOptions::new(dir.path().join("work"));
        let r = run_bench(&desc, "mortality", 1, 64 << 20, &opts).unwrap();
        assert_eq!(r.total_samples, oracle_mortality_count(&dir.path().join("raw")));
        assert_eq!(r.total_events, summary.total_rows());
        assert_eq!(r.total_patients, 80);
        assert!(r.is_consistent());
        assert!(r.peak_rss_bytes > 0);
        assert!(r.buffer_high_water <= 64 << 20);

        let again = run_bench(&desc, "mortality", 2, 64 << 20, &opts).unwrap();
        assert_eq!(again.total_samples, r.total_samples);
        let json: BenchReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json, r);
    }

    #[test]
    fn unknown_task_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let (desc, _) = generate(&SynthConfig { n_patients: 3, ..SynthConfig::default() }, dir.path()).unwrap();
        let opts = BenchOptions::new(dir.path().join("work"));
        assert!(matches!(run_bench(&desc, "nope", 1, 64 << 20, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn table_is_aligned() {
        let r = BenchReport {
            task: "mortality".into(),
            workers: 1,
            mem_budget_bytes: 1,
            warm: false,
            ingest_s: 1.0,
            task_s: 2.0,
            total_s: 3.5,
            peak_rss_bytes: 10 << 20,
            kernel_peak_rss_bytes: None,
            buffer_high_water: 1 << 20,
            total_events: 1000,
            total_patients: 10,
            total_samples: 12345,
            samples_per_second: 3527.1,
        };
        let t = render_table(&[r.clone(), BenchReport { workers: 8, ..r }]);
        let widths: Vec<usize> = t.lines().filter(|l| !l.starts_with('-')).map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{t}");
        assert!(t.contains("Peak RSS (MiB)"));
    }
}
