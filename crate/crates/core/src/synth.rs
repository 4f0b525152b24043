//! Seeded synthetic clinical-style dataset generator.
//!
//! All randomness comes from one `Pcg64` (128-bit state PCG with the XSL-RR output function and
//! the generator's fixed default multiplier and increment), seeded from `SynthConfig::seed`, so a
//! seed fully determines every output byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, LogNormal};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};

pub const DESCRIPTOR_FILE: &str = "dataset.yaml";
const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive range of admissions per patient.
    pub admissions_per_patient: (usize, usize),
    pub conditions_per_admission: (usize, usize),
    pub procedures_per_admission: (usize, usize),
    pub drugs_per_admission: (usize, usize),
    pub condition_vocab: usize,
    pub procedure_vocab: usize,
    pub drug_vocab: usize,
    pub death_rate: f64,
    /// Log-normal length of stay in days: ln-scale location and scale.
    pub los_mu: f64,
    pub los_sigma: f64,
    pub seed: u64,
    /// Stops generating once this many rows exist across all tables.
    pub max_events: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 1000,
            admissions_per_patient: (1, 4),
            conditions_per_admission: (1, 8),
            procedures_per_admission: (1, 4),
            drugs_per_admission: (1, 8),
            condition_vocab: 2000,
            procedure_vocab: 500,
            drug_vocab: 1000,
            death_rate: 0.1,
            los_mu: 3f64.ln(),
            los_sigma: 1.0,
            seed: 0,
            max_events: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("admissions_per_patient", self.admissions_per_patient),
            ("conditions_per_admission", self.conditions_per_admission),
            ("procedures_per_admission", self.procedures_per_admission),
            ("drugs_per_admission", self.drugs_per_admission),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Config(format!("{name}: empty range {lo}..={hi}")));
            }
        }
        if self.condition_vocab == 0 || self.procedure_vocab == 0 || self.drug_vocab == 0 {
            return Err(Error::Config("vocabulary sizes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.death_rate) {
            return Err(Error::Config(format!("death_rate {} is outside [0, 1]", self.death_rate)));
        }
        if !(self.los_sigma > 0.0) || !self.los_mu.is_finite() {
            return Err(Error::Config("los parameters must be finite with sigma > 0".into()));
        }
        Ok(())
    }

    /// Expected events per patient, for sizing datasets to an event count.
    pub fn mean_events_per_patient(&self) -> f64 {
        let mid = |(a, b): (usize, usize)| (a + b) as f64 / 2.0;
        1.0 + mid(self.admissions_per_patient)
            * (1.0
                + mid(self.conditions_per_admission)
                + mid(self.procedures_per_admission)
                + mid(self.drugs_per_admission))
    }
}

/// Row counts of a generated dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub patients: u64,
    pub admissions: u64,
    pub diagnoses: u64,
    pub procedures: u64,
    pub prescriptions: u64,
}

impl SynthSummary {
    /// Events the ingest of this dataset produces (one per row of every table).
    pub fn total_rows(&self) -> u64 {
        self.patients + self.admissions + self.diagnoses + self.procedures + self.prescriptions
    }
}

const DESCRIPTOR: &str = r#"version: 1
dataset_name: synthetic
tables:
  patients:
    file: patients.csv
    patient_id_column: subject_id
    timestamp_column: dob
    timestamp_format: "%Y-%m-%d"
    attribute_columns: [gender]
  admissions:
    file: admissions.csv
    patient_id_column: subject_id
    timestamp_column: admittime
    timestamp_format: "%Y-%m-%d %H:%M:%S"
    attribute_columns: [hadm_id, dischtime, hospital_expire_flag]
  diagnoses_icd:
    file: diagnoses_icd.csv
    patient_id_column: subject_id
    timestamp_column: admittime
    timestamp_format: "%Y-%m-%d %H:%M:%S"
    attribute_columns: [hadm_id, icd9_code]
    join: {table: admissions, on: hadm_id, columns: [admittime]}
  procedures_icd:
    file: procedures_icd.csv
    patient_id_column: subject_id
    timestamp_column: admittime
    timestamp_format: "%Y-%m-%d %H:%M:%S"
    attribute_columns: [hadm_id, icd9_code]
    join: {table: admissions, on: hadm_id, columns: [admittime]}
  prescriptions:
    file: prescriptions.csv
    patient_id_column: subject_id
    timestamp_column: admittime
    timestamp_format: "%Y-%m-%d %H:%M:%S"
    attribute_columns: [hadm_id, ndc]
    join: {table: admissions, on: hadm_id, columns: [admittime]}
"#;

struct Table {
    path: PathBuf,
    out: csv::Writer<BufWriter<File>>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = csv::WriterBuilder::new().from_writer(BufWriter::with_capacity(1 << 16, file));
        out.write_record(header).map_err(|e| csv_err(&path, e))?;
        Ok(Table { path, out })
    }

    fn row(&mut self, fields: &[&str]) -> Result<()> {
        self.out.write_record(fields).map_err(|e| csv_err(&self.path, e))
    }

    fn finish(self) -> Result<()> {
        let path = self.path;
        let buf = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        let file = buf.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn draw(rng: &mut Pcg64, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Writes the five CSV tables and `dataset.yaml` into `out_dir`; returns the descriptor path.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<(PathBuf, SynthSummary)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let los = LogNormal::new(cfg.los_mu, cfg.los_sigma).map_err(|e| Error::Config(format!("los distribution: {e}")))?;

    let mut patients = Table::create(out_dir, "patients.csv", &["subject_id", "gender", "dob"])?;
    let mut admissions = Table::create(
        out_dir,
        "admissions.csv",
        &["subject_id", "hadm_id", "admittime", "dischtime", "hospital_expire_flag"],
    )?;
    let mut diagnoses = Table::create(out_dir, "diagnoses_icd.csv", &["subject_id", "hadm_id", "icd9_code"])?;
    let mut procedures = Table::create(out_dir, "procedures_icd.csv", &["subject_id", "hadm_id", "icd9_code"])?;
    let mut prescriptions = Table::create(out_dir, "prescriptions.csv", &["subject_id", "hadm_id", "ndc"])?;

    let epoch: NaiveDateTime = NaiveDate::from_ymd_opt(2100, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let mut summary = SynthSummary::default();
    let mut next_hadm = 20_000_000u64;
    let cap = cfg.max_events.unwrap_or(u64::MAX);
    'patients: for i in 0..cfg.n_patients {
        if summary.total_rows() >= cap {
            break;
        }
        let subject = (10_000_000 + i).to_string();
        let gender = if rng.random_bool(0.5) { "F" } else { "M" };
        let dob = epoch.date() - Duration::days(rng.random_range(18 * 365..90 * 365));
        patients.row(&[&subject, gender, &dob.format("%Y-%m-%d").to_string()])?;
        summary.patients += 1;

        let mut admit = epoch + Duration::seconds(rng.random_range(0..10 * 365 * 86_400));
        for _ in 0..draw(&mut rng, cfg.admissions_per_patient) {
            if summary.total_rows() >= cap {
                break 'patients;
            }
            let hadm = next_hadm.to_string();
            next_hadm += 1;
            let stay = Duration::seconds((los.sample(&mut rng) * 86_400.0).round() as i64);
            let discharge = admit + stay;
            let died = rng.random_bool(cfg.death_rate);
            admissions.row(&[
                &subject,
                &hadm,
                &admit.format(DATETIME_FORMAT).to_string(),
                &discharge.format(DATETIME_FORMAT).to_string(),
                if died { "1" } else { "0" },
            ])?;
            summary.admissions += 1;
            for _ in 0..draw(&mut rng, cfg.conditions_per_admission) {
                let code = format!("D{:04}", rng.random_range(0..cfg.condition_vocab));
                if summary.total_rows() >= cap {
                    break 'patients;
                }
                diagnoses.row(&[&subject, &hadm, &code])?;
                summary.diagnoses += 1;
            }
            for _ in 0..draw(&mut rng, cfg.procedures_per_admission) {
                let code = format!("X{:04}", rng.random_range(0..cfg.procedure_vocab));
                if summary.total_rows() >= cap {
                    break 'patients;
                }
                procedures.row(&[&subject, &hadm, &code])?;
                summary.procedures += 1;
            }
            for _ in 0..draw(&mut rng, cfg.drugs_per_admission) {
                let code = format!("N{:05}", rng.random_range(0..cfg.drug_vocab));
                if summary.total_rows() >= cap {
                    break 'patients;
                }
                prescriptions.row(&[&subject, &hadm, &code])?;
                summary.prescriptions += 1;
            }
            admit = discharge + Duration::seconds(rng.random_range(86_400..365 * 86_400));
        }
    }
    for t in [patients, admissions, diagnoses, procedures, prescriptions] {
        t.finish()?;
    }
    let path = out_dir.join(DESCRIPTOR_FILE);
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(DESCRIPTOR.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok((path, summary))
}
