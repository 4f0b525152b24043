use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ehr_core::bench::{render_table, run_bench, BenchOptions};
use ehr_core::calib::{self, CalibError, CalibReport, DEFAULT_ALPHA, DEFAULT_BINS};
use ehr_core::descriptor::DatasetDescriptor;
use ehr_core::event::{Event, EventFilter};
use ehr_core::ingest::{ingest, IngestConfig, DEFAULT_MEM_BUDGET, DEFAULT_TARGET_PARTITION_EVENTS};
use ehr_core::medcode::{load_crossmap, load_ontology, MedcodeError};
use ehr_core::store::{Store, DEFAULT_BATCH_SIZE};
use ehr_core::synth::{generate, SynthConfig};
use ehr_core::task::{builtin_task, set_task, ClinicalSchema, TaskConfig, BUILTIN_TASKS, DEFAULT_BATCHES_PER_SHARD};

#[derive(Parser)]
#[command(name = "ehr", version, about = "Memory-bounded event-stream pipeline for longitudinal clinical records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Join and sort raw CSV tables into a partitioned patient cache.
    Ingest(IngestArgs),
    /// Print one patient's events in canonical order.
    Patient(PatientArgs),
    /// Run a built-in task over a cache and write encoded sample shards.
    Task(TaskArgs),
    /// Query code ontologies and crosswalks.
    #[command(subcommand)]
    Medcode(MedcodeCommand),
    /// Post-hoc calibration and conformal prediction sets.
    #[command(subcommand)]
    Calib(CalibCommand),
    /// Generate a seeded synthetic dataset with its descriptor.
    Synth(SynthArgs),
    /// Time ingest plus a task end to end and report peak memory.
    Bench(BenchArgs),
}

#[derive(Args)]
struct WorkerArg {
    /// Worker threads [env: EHR_WORKERS, default 1]
    #[arg(long, env = "EHR_WORKERS", default_value_t = 1, hide_env = true)]
    workers: usize,
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset descriptor (YAML).
    #[arg(long)]
    config: PathBuf,
    /// Cache output directory.
    #[arg(long)]
    out: PathBuf,
    /// Memory budget for sort buffers and join tables, e.g. 64MiB or 536870912.
    #[arg(long, value_parser = parse_size, default_value_t = DEFAULT_MEM_BUDGET)]
    mem_budget: usize,
    /// Target events per partition file.
    #[arg(long, default_value_t = DEFAULT_TARGET_PARTITION_EVENTS)]
    partition_events: u64,
    #[command(flatten)]
    workers: WorkerArg,
}

#[derive(Args)]
struct PatientArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Patient identifier.
    #[arg(long)]
    id: String,
    /// Only these event types (comma separated).
    #[arg(long, value_delimiter = ',')]
    tables: Vec<String>,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    cache: PathBuf,
    /// One of mortality, drug_recommendation, length_of_stay.
    #[arg(long)]
    task: String,
    /// Sample set output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    workers: WorkerArg,
    /// Patients per batch.
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Batches per shard file.
    #[arg(long, default_value_t = DEFAULT_BATCHES_PER_SHARD)]
    batches_per_shard: usize,
    /// Minimum token count for vocabulary entry.
    #[arg(long, default_value_t = 1)]
    min_freq: u64,
}

#[derive(Subcommand)]
enum MedcodeCommand {
    /// Print the name of a code.
    Lookup(OntologyArgs),
    /// Print a code's ancestors, nearest first.
    Ancestors(OntologyArgs),
    /// Print a code's descendants in sorted order.
    Descendants(OntologyArgs),
    /// Map codes from one system to another.
    Translate(TranslateArgs),
}

#[derive(Args)]
struct OntologyArgs {
    /// Ontology CSV with header code,name,parent.
    #[arg(long)]
    ontology: PathBuf,
    /// Coding system name, used in messages.
    #[arg(long, default_value = "ontology")]
    system: String,
    code: String,
}

#[derive(Args)]
struct TranslateArgs {
    /// Crosswalk CSV with header source,target.
    #[arg(long)]
    crossmap: PathBuf,
    #[arg(long, default_value = "source")]
    from: String,
    #[arg(long, default_value = "target")]
    to: String,
    #[arg(required = true)]
    codes: Vec<String>,
}

#[derive(Subcommand)]
enum CalibCommand {
    /// Fit a temperature on calibration logits (columns p_* hold logits).
    Temperature(CalibArgs),
    /// Fit histogram binning on top-label confidences.
    Binning(CalibArgs),
    /// Fit a split-conformal threshold and evaluate prediction sets.
    Conformal(ConformalArgs),
}

#[derive(Args)]
struct CalibArgs {
    /// Calibration CSV with header p_0..p_{K-1},label.
    #[arg(long)]
    cal: PathBuf,
    /// Evaluation CSV; defaults to the calibration file.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ConformalArgs {
    #[arg(long)]
    cal: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Target miscoverage.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    patients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Admissions per patient as MIN..MAX.
    #[arg(long, value_parser = parse_range, default_value = "1..4")]
    admissions: (usize, usize),
    #[arg(long, value_parser = parse_range, default_value = "1..8")]
    conditions: (usize, usize),
    #[arg(long, value_parser = parse_range, default_value = "1..4")]
    procedures: (usize, usize),
    #[arg(long, value_parser = parse_range, default_value = "1..8")]
    drugs: (usize, usize),
    #[arg(long, default_value_t = 0.1)]
    death_rate: f64,
    /// Stop once the tables hold this many rows in total.
    #[arg(long)]
    max_events: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset descriptor (YAML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "mortality")]
    task: String,
    #[command(flatten)]
    workers: WorkerArg,
    #[arg(long, value_parser = parse_size, default_value_t = DEFAULT_MEM_BUDGET)]
    mem_budget: usize,
    /// Directory for the cache and sample set.
    #[arg(long)]
    work: PathBuf,
    /// Keep an existing cache and sample set instead of starting cold.
    #[arg(long)]
    warm: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Runtime failure carrying the error kind name for diagnostics.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<ehr_core::Error> for Failure {
    fn from(e: ehr_core::Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<MedcodeError> for Failure {
    fn from(e: MedcodeError) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<CalibError> for Failure {
    fn from(e: CalibError) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        let kind = if e.kind() == io::ErrorKind::BrokenPipe { "BrokenPipe" } else { "IoError" };
        failure(kind, format!("stdout: {e}"))
    }
}

/// `println!` that reports a closed stdout as a failure instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*)?
    };
}

fn failure(kind: &'static str, message: impl Into<String>) -> Failure {
    Failure {
        kind,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn parse_size(s: &str) -> Result<usize, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: usize = num.parse().map_err(|_| format!("`{s}` is not a size"))?;
    let mult: usize = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kib" | "kb" => 1 << 10,
        "m" | "mib" | "mb" => 1 << 20,
        "g" | "gib" | "gb" => 1 << 30,
        other => return Err(format!("unknown size unit `{other}`")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("`{s}` overflows"))
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("`{s}` is not MIN..MAX"))?;
    let lo = a.trim().parse().map_err(|_| format!("`{a}` is not an integer"))?;
    let hi = b.trim_start_matches('=').trim().parse().map_err(|_| format!("`{b}` is not an integer"))?;
    Ok((lo, hi))
}

fn write_report(json: &str, path: Option<&Path>) -> CmdResult {
    match path {
        Some(p) => fs::write(p, format!("{json}\n")).map_err(|e| failure("IoError", format!("{}: {e}", p.display()))),
        None => {
            out!("{json}");
            Ok(())
        }
    }
}

fn cmd_ingest(a: IngestArgs) -> CmdResult {
    let (descriptor, text) = DatasetDescriptor::from_file(&a.config)?;
    let mut cfg = IngestConfig::new(&a.out);
    cfg.mem_budget_bytes = a.mem_budget;
    cfg.workers = a.workers.workers;
    cfg.target_partition_events = a.partition_events;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let r = ingest(&descriptor, &text, base, &cfg)?;
    let m = &r.manifest;
    if r.cache_hit {
        out!("cache hit: {} events, {} patients in {}", m.total_events, m.total_patients, a.out.display());
    } else {
        out!(
            "ingested {} rows into {} events, {} patients, {} partitions in {} ({} spill runs, buffer high-water {} bytes)",
            r.rows_read,
            m.total_events,
            m.total_patients,
            m.partitions.len(),
            a.out.display(),
            r.spill_runs,
            r.buffer_high_water
        );
    }
    Ok(())
}

fn format_event(e: &Event) -> String {
    let ts = match e.timestamp.and_then(|t| t.to_naive()) {
        Some(dt) => dt.format("%Y-%m-%d %H:%M:%S%.f").to_string(),
        None => "-".to_string(),
    };
    let attrs: Vec<String> = e.attributes.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{ts}\t{}\t{}\t{}", e.event_type, e.seq, attrs.join(" "))
}

fn cmd_patient(a: PatientArgs) -> CmdResult {
    let store = Store::open(&a.cache)?;
    let filter = (!a.tables.is_empty()).then(|| EventFilter::new().with_event_types(a.tables.iter()));
    let events = store.get_events(&a.id, filter.as_ref())?;
    if events.is_empty() && store.get_events(&a.id, None)?.is_empty() {
        return Err(failure("NotFound", format!("patient `{}` is not in the cache", a.id)));
    }
    for e in &events {
        out!("{}", format_event(e));
    }
    Ok(())
}

fn cmd_task(a: TaskArgs) -> CmdResult {
    let task = builtin_task(&a.task, ClinicalSchema::default())
        .ok_or_else(|| failure("ConfigError", format!("unknown task `{}`; built-ins: {}", a.task, BUILTIN_TASKS.join(", "))))?;
    let store = Store::open(&a.cache)?;
    let mut cfg = TaskConfig::new(&a.out, a.workers.workers);
    cfg.batch_size = a.batch_size;
    cfg.batches_per_shard = a.batches_per_shard;
    cfg.min_freq = a.min_freq;
    let r = set_task(&store, &task, &cfg)?;
    let m = &r.manifest;
    if r.cache_hit {
        out!("cache hit: {} samples in {} shards at {}", m.total_samples, m.shards.len(), a.out.display());
    } else {
        out!(
            "wrote {} samples ({} skipped) in {} shards to {}",
            m.total_samples,
            m.skipped,
            m.shards.len(),
            a.out.display()
        );
    }
    Ok(())
}

fn cmd_medcode(c: MedcodeCommand) -> CmdResult {
    match c {
        MedcodeCommand::Lookup(a) => {
            let g = load_ontology(&a.system, &a.ontology)?;
            let name = g.lookup(&a.code).ok_or_else(|| MedcodeError::UnknownCode { code: a.code.clone() })?;
            out!("{}\t{name}", a.code);
        }
        MedcodeCommand::Ancestors(a) => {
            for code in load_ontology(&a.system, &a.ontology)?.ancestors(&a.code)? {
                out!("{code}");
            }
        }
        MedcodeCommand::Descendants(a) => {
            for code in load_ontology(&a.system, &a.ontology)?.descendants(&a.code)? {
                out!("{code}");
            }
        }
        MedcodeCommand::Translate(a) => {
            let map = load_crossmap(&a.from, &a.to, &a.crossmap)?;
            for code in &a.codes {
                let targets: Vec<String> = map.translate(code).into_iter().collect();
                out!("{code}\t{}", targets.join(","));
            }
        }
    }
    Ok(())
}

fn read_pair(cal: &Path, test: Option<&Path>) -> Result<((Vec<Vec<f64>>, Vec<usize>), (Vec<Vec<f64>>, Vec<usize>)), Failure> {
    let c = calib::read_prob_csv(cal)?;
    let t = match test {
        Some(p) => calib::read_prob_csv(p)?,
        None => c.clone(),
    };
    Ok((c, t))
}

fn top_label(probs: &calib::ProbMatrix, labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    probs
        .rows()
        .iter()
        .zip(labels)
        .map(|(r, &y)| {
            let k = calib::argmax(r);
            (r[k], k == y)
        })
        .unzip()
}

fn cmd_calib(c: CalibCommand) -> CmdResult {
    match c {
        CalibCommand::Temperature(a) => {
            let ((cal_z, cal_y), (test_z, test_y)) = read_pair(&a.cal, a.test.as_deref())?;
            let m = calib::fit_temperature(&cal_z, &cal_y)?;
            let identity = calib::TemperatureModel { temperature: 1.0 };
            let before = calib::apply_temperature(&identity, &test_z)?;
            let after = calib::apply_temperature(&m, &test_z)?;
            let report = CalibReport {
                ece_before: Some(calib::ece(&before, &test_y, a.bins)?),
                ece: Some(calib::ece(&after, &test_y, a.bins)?),
                nll_before: Some(calib::nll(&test_z, &test_y, 1.0)),
                nll: Some(calib::nll(&test_z, &test_y, m.temperature)),
                temperature: Some(m.temperature),
                ..CalibReport::default()
            };
            write_report(&to_json(&report), a.report.as_deref())
        }
        CalibCommand::Binning(a) => {
            let ((cal_p, cal_y), (test_p, test_y)) = read_pair(&a.cal, a.test.as_deref())?;
            let (cal_p, test_p) = (calib::ProbMatrix::new(cal_p)?, calib::ProbMatrix::new(test_p)?);
            let (cal_conf, cal_ok) = top_label(&cal_p, &cal_y);
            let m = calib::fit_histogram_binning(&cal_conf, &cal_ok, a.bins)?;
            let (test_conf, test_ok) = top_label(&test_p, &test_y);
            let binned: Vec<f64> = test_conf.iter().map(|&c| m.apply(c)).collect();
            let report = CalibReport {
                ece_before: Some(calib::confidence_ece(&test_conf, &test_ok, a.bins)?),
                ece: Some(calib::confidence_ece(&binned, &test_ok, a.bins)?),
                bin_rates: Some(m.bin_rates.clone()),
                ..CalibReport::default()
            };
            write_report(&to_json(&report), a.report.as_deref())
        }
        CalibCommand::Conformal(a) => {
            let ((cal_p, cal_y), (test_p, test_y)) = read_pair(&a.cal, a.test.as_deref())?;
            let cal_p = calib::ProbMatrix::new(cal_p)?;
            let thr = calib::fit_label_threshold(&cal_p, &cal_y, a.alpha)?;
            let test_p = calib::ProbMatrix::new(test_p)?;
            let sets: Vec<Vec<usize>> = test_p.rows().iter().map(|r| calib::predict_set(thr.t, r)).collect();
            let report = CalibReport {
                coverage: Some(calib::coverage(&sets, &test_y)?),
                avg_set_size: Some(calib::avg_set_size(&sets)?),
                alpha: Some(thr.alpha),
                t: Some(thr.t),
                ..CalibReport::default()
            };
            write_report(&to_json(&report), a.report.as_deref())
        }
    }
}

fn to_json(r: &CalibReport) -> String {
    serde_json::to_string_pretty(r).expect("calibration report serializes")
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_patients: a.patients,
        admissions_per_patient: a.admissions,
        conditions_per_admission: a.conditions,
        procedures_per_admission: a.procedures,
        drugs_per_admission: a.drugs,
        death_rate: a.death_rate,
        seed: a.seed,
        max_events: a.max_events,
        ..SynthConfig::default()
    };
    let (path, s) = generate(&cfg, &a.out)?;
    out!(
        "wrote {} patients, {} admissions, {} rows in total; descriptor {}",
        s.patients,
        s.admissions,
        s.total_rows(),
        path.display()
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let mut opts = BenchOptions::new(&a.work);
    opts.warm = a.warm;
    let r = run_bench(&a.config, &a.task, a.workers.workers, a.mem_budget, &opts)?;
    write!(io::stdout().lock(), "{}", render_table(std::slice::from_ref(&r)))?;
    if let Some(p) = &a.json {
        fs::write(p, format!("{}\n", r.to_json())).map_err(|e| failure("IoError", format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Patient(a) => cmd_patient(a),
        Command::Task(a) => cmd_task(a),
        Command::Medcode(c) => cmd_medcode(c),
        Command::Calib(c) => cmd_calib(c),
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // The reader went away (e.g. `| head`); nothing left to report.
        Err(f) if f.kind == "BrokenPipe" => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.kind, f.message);
            ExitCode::from(1)
        }
    }
}
