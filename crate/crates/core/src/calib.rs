//! Post-hoc uncertainty: temperature scaling, histogram binning, split-conformal prediction
//! sets, and the metrics that judge them.

use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CalibError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("alpha {alpha} needs more than {n} calibration points")]
    Alpha { alpha: f64, n: usize },
    #[error("{0}")]
    Read(String),
}

impl CalibError {
    pub fn kind(&self) -> &'static str {
        match self {
            CalibError::Shape(_) => "ShapeError",
            CalibError::Degenerate(_) => "DegenerateError",
            CalibError::Alpha { .. } => "AlphaError",
            CalibError::Read(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, CalibError>;

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 50.0;
pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Stopping width of the golden-section search, in log T.
const LOG_T_TOL: f64 = 1e-4;
const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic N × K matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: Vec<Vec<f64>>,
}

impl ProbMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k || k == 0 {
                return Err(CalibError::Shape(format!("row {i} has {} columns, expected {k} > 0", r.len())));
            }
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(CalibError::Shape(format!("row {i} has an entry outside [0, 1]")));
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(CalibError::Shape(format!("row {i} sums to {sum}")));
            }
        }
        Ok(ProbMatrix { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], temperature: f64, class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&z| ((z - max) / temperature).exp()).sum::<f64>().ln();
    (logits[class] - max) / temperature - lse
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(CalibError::Shape(format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&y| y >= k) {
        return Err(CalibError::Shape(format!("label {} at row {i} is not below {k}", labels[i])));
    }
    Ok(())
}

fn check_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    let k = logits.first().map_or(0, Vec::len);
    if logits.is_empty() || k == 0 {
        return Err(CalibError::Shape("need at least one row and one class".into()));
    }
    if let Some(i) = logits.iter().position(|r| r.len() != k) {
        return Err(CalibError::Shape(format!("row {i} has {} columns, expected {k}", logits[i].len())));
    }
    if logits.iter().flatten().any(|z| !z.is_finite()) {
        return Err(CalibError::Degenerate("non-finite logit".into()));
    }
    check_labels(logits.len(), k, labels)?;
    Ok(k)
}

/// Mean negative log-likelihood of softmax(logits / T).
pub fn nll(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits.iter().zip(labels).map(|(z, &y)| -log_softmax_at(z, temperature, y)).sum();
    total / logits.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemperatureModel {
    pub temperature: f64,
}

/// Fits T by golden-section search on log T over [T_MIN, T_MAX]; a flat objective yields T = 1.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<TemperatureModel> {
    check_logits(logits, labels)?;
    let f = |x: f64| nll(logits, labels, x.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN.ln(), T_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LOG_T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = ((a + b) / 2.0).exp();
    let at_one = nll(logits, labels, 1.0);
    // Flat objective, or no real gain over T = 1: keep the identity.
    let temperature = if nll(logits, labels, t) >= at_one - 1e-12 { 1.0 } else { t };
    Ok(TemperatureModel { temperature })
}

pub fn apply_temperature(m: &TemperatureModel, logits: &[Vec<f64>]) -> Result<ProbMatrix> {
    if !(m.temperature > 0.0) {
        return Err(CalibError::Degenerate(format!("temperature {} is not positive", m.temperature)));
    }
    let k = logits.first().map_or(0, Vec::len);
    if let Some(i) = logits.iter().position(|r| r.len() != k || k == 0) {
        return Err(CalibError::Shape(format!("row {i} has {} columns, expected {k} > 0", logits[i].len())));
    }
    Ok(ProbMatrix {
        rows: logits.iter().map(|z| softmax(z, m.temperature)).collect(),
    })
}

fn bin_of(p: f64, bins: usize) -> usize {
    ((p * bins as f64) as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinningModel {
    pub edges: Vec<f64>,
    pub bin_rates: Vec<f64>,
}

impl BinningModel {
    pub fn bins(&self) -> usize {
        self.bin_rates.len()
    }

    /// Calibrated value of `p`: its bin's positive rate; the last bin includes 1.
    pub fn apply(&self, p: f64) -> f64 {
        self.bin_rates[bin_of(p.clamp(0.0, 1.0), self.bins())]
    }
}

/// Equal-width histogram binning; an empty bin maps to its midpoint.
pub fn fit_histogram_binning(probs: &[f64], labels: &[bool], bins: usize) -> Result<BinningModel> {
    if bins == 0 {
        return Err(CalibError::Shape("need at least one bin".into()));
    }
    if probs.len() != labels.len() {
        return Err(CalibError::Shape(format!("{} probabilities but {} labels", probs.len(), labels.len())));
    }
    if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(CalibError::Shape(format!("probability at row {i} is outside [0, 1]")));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut pos = vec![0usize; bins];
    let mut tot = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = bin_of(p, bins);
        tot[b] += 1;
        pos[b] += usize::from(y);
    }
    let bin_rates = (0..bins)
        .map(|b| match tot[b] {
            0 => (edges[b] + edges[b + 1]) / 2.0,
            n => pos[b] as f64 / n as f64,
        })
        .collect();
    Ok(BinningModel { edges, bin_rates })
}

/// Top-label expected calibration error over `bins` equal-width confidence bins.
pub fn ece(probs: &ProbMatrix, labels: &[usize], bins: usize) -> Result<f64> {
    check_labels(probs.len(), probs.n_classes(), labels)?;
    let (conf, correct): (Vec<f64>, Vec<bool>) = probs
        .rows()
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let pred = argmax(row);
            (row[pred], pred == y)
        })
        .unzip();
    confidence_ece(&conf, &correct, bins)
}

/// ECE of explicit confidences against per-sample correctness.
pub fn confidence_ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(CalibError::Shape("need at least one bin".into()));
    }
    if confidences.len() != correct.len() {
        return Err(CalibError::Shape(format!("{} confidences but {} labels", confidences.len(), correct.len())));
    }
    if confidences.is_empty() {
        return Err(CalibError::Shape("need at least one row".into()));
    }
    if let Some(i) = confidences.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(CalibError::Shape(format!("confidence at row {i} is outside [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0f64; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_of(c, bins);
        count[b] += 1;
        conf[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf[b] / nb).abs()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConformalThreshold {
    pub t: f64,
    pub alpha: f64,
    pub n_cal: usize,
}

/// `⌈(n + 1)(1 − alpha)⌉`, ignoring floating-point noise just above an integer.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil().max(0.0) as usize
}

/// LABEL threshold: the k-th smallest true-class score with k = n + 1 − ⌈(n + 1)(1 − alpha)⌉.
pub fn fit_label_threshold(cal_probs: &ProbMatrix, cal_labels: &[usize], alpha: f64) -> Result<ConformalThreshold> {
    check_labels(cal_probs.len(), cal_probs.n_classes(), cal_labels)?;
    let n = cal_probs.len();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CalibError::Alpha { alpha, n });
    }
    let q = conformal_rank(n, alpha);
    if n == 0 || q > n {
        return Err(CalibError::Alpha { alpha, n });
    }
    let mut scores: Vec<f64> = cal_probs.rows().iter().zip(cal_labels).map(|(r, &y)| r[y]).collect();
    scores.sort_by(f64::total_cmp);
    let k = n + 1 - q;
    Ok(ConformalThreshold {
        t: scores[k - 1],
        alpha,
        n_cal: n,
    })
}

/// Classes whose probability reaches the threshold.
pub fn predict_set(t: f64, row: &[f64]) -> Vec<usize> {
    row.iter().enumerate().filter(|(_, &p)| p >= t).map(|(c, _)| c).collect()
}

pub fn coverage(sets: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
    if sets.len() != labels.len() || sets.is_empty() {
        return Err(CalibError::Shape(format!("{} sets but {} labels", sets.len(), labels.len())));
    }
    let hit = sets.iter().zip(labels).filter(|(s, y)| s.contains(y)).count();
    Ok(hit as f64 / sets.len() as f64)
}

pub fn avg_set_size(sets: &[Vec<usize>]) -> Result<f64> {
    if sets.is_empty() {
        return Err(CalibError::Shape("no sets".into()));
    }
    Ok(sets.iter().map(Vec::len).sum::<usize>() as f64 / sets.len() as f64)
}

/// Reads a `p_0,…,p_{K-1},label` CSV into rows and integer labels.
pub fn read_prob_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let err = |m: String| CalibError::Read(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header: Vec<String> = rdr.headers().map_err(|e| err(e.to_string()))?.iter().map(str::to_string).collect();
    let k = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..k).map(|i| format!("p_{i}")).chain(["label".to_string()]).collect();
    if k == 0 || header != expected {
        return Err(err(format!("header must be p_0..p_{{K-1}},label, found {}", header.join(","))));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().take(k).map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| err(format!("row {}: {e}", i + 1)))?;
        let y = rec[k].trim().parse::<usize>().map_err(|e| err(format!("row {}: label: {e}", i + 1)))?;
        rows.push(row);
        labels.push(y);
    }
    Ok((rows, labels))
}

/// JSON report of the CLI calibration commands; absent fields are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CalibReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_set_size: Option<f64>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_rates: Option<Vec<f64>>,
}
