//! Trigger test protocol: labelled datasets, distractor augmentation,
//! accuracy/latency measurement and a tabular report.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::StateId;
use crate::triggers::Trigger;

/// Accuracy (in percent) above which a trigger is considered deployable.
pub const PASS_THRESHOLD: f64 = 75.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("IO: {path}: {message}")]
    Io { path: String, message: String },
    #[error("BAD_LABEL: line {line}: label {value:?} is not 0 or 1")]
    BadLabel { line: u64, value: String },
    #[error("BAD_DATASET: {0}")]
    BadDataset(String),
    #[error("BAD_PCT: distractor percentage {0} outside [0, 100)")]
    BadPct(f64),
    #[error("INSUFFICIENT_DISTRACTORS: need {needed}, have {available}")]
    InsufficientDistractors { needed: usize, available: usize },
    #[error("EMPTY_DATASET: nothing to evaluate")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Curated,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub label: bool,
    pub source: Source,
}

impl LabeledSentence {
    pub fn curated(text: impl Into<String>, label: bool) -> Self {
        Self {
            text: text.into(),
            label,
            source: Source::Curated,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn reader(path: &Path) -> Result<Option<csv::Reader<std::fs::File>>, EvalError> {
    let meta = std::fs::metadata(path).map_err(|e| io_err(path, e))?;
    if meta.len() == 0 {
        return Ok(None);
    }
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map(Some)
        .map_err(|e| io_err(path, e))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, EvalError> {
    headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(name))
        .ok_or_else(|| EvalError::BadDataset(format!("missing `{name}` column")))
}

/// Reads a CSV file with a `text,label` header; labels must be 0 or 1.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>, EvalError> {
    let path = path.as_ref();
    let Some(mut rdr) = reader(path)? else {
        return Ok(Vec::new());
    };
    let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let text_col = column(&headers, "text")?;
    let label_col = column(&headers, "label")?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| io_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let text = record.get(text_col).unwrap_or_default();
        let raw = record.get(label_col).unwrap_or_default();
        let label = match raw {
            "0" => false,
            "1" => true,
            _ => {
                return Err(EvalError::BadLabel {
                    line,
                    value: raw.to_owned(),
                })
            }
        };
        if text.is_empty() {
            return Err(EvalError::BadDataset(format!("line {line}: empty text")));
        }
        out.push(LabeledSentence::curated(text, label));
    }
    Ok(out)
}

/// Reads distractor sentences from a CSV file with a `text` column.
pub fn load_distractors(path: impl AsRef<Path>) -> Result<Vec<String>, EvalError> {
    let path = path.as_ref();
    let Some(mut rdr) = reader(path)? else {
        return Ok(Vec::new());
    };
    let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let text_col = column(&headers, "text")?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| io_err(path, e))?;
        if let Some(t) = record.get(text_col).filter(|t| !t.is_empty()) {
            out.push(t.to_owned());
        }
    }
    Ok(out)
}

/// Number of distractors that make up `pct` percent of the augmented set.
pub fn distractor_count(curated: usize, pct: f64) -> Result<usize, EvalError> {
    if !(0.0..100.0).contains(&pct) {
        return Err(EvalError::BadPct(pct));
    }
    Ok((curated as f64 * pct / (100.0 - pct)).round() as usize)
}

/// Mixes label-0 distractors into `dataset` so that they make up `pct`
/// percent of the result, then shuffles. Sampling is without replacement.
pub fn augment(
    dataset: &[LabeledSentence],
    distractors: &[String],
    pct: f64,
    seed: u64,
) -> Result<Vec<LabeledSentence>, EvalError> {
    let needed = distractor_count(dataset.len(), pct)?;
    if needed > distractors.len() {
        return Err(EvalError::InsufficientDistractors {
            needed,
            available: distractors.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.to_vec();
    for i in index::sample(&mut rng, distractors.len(), needed) {
        out.push(LabeledSentence {
            text: distractors[i].clone(),
            label: false,
            source: Source::Distractor,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub text: String,
    pub expected: bool,
    /// `None` when the trigger failed.
    pub got: Option<bool>,
    pub latency: f64,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trigger_id: String,
    /// Column label in the rendered grid, e.g. the model behind the trigger.
    pub backend: String,
    pub dataset_size: usize,
    pub distractor_pct: f64,
    /// Percent of agreeing answers.
    pub accuracy: f64,
    /// Mean wall-clock seconds per call, rounded to 0.01.
    pub avg_latency: f64,
    pub pass_threshold: bool,
    pub per_sentence: Vec<SentenceResult>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn correct(&self) -> usize {
        self.per_sentence
            .iter()
            .filter(|r| r.got == Some(r.expected))
            .count()
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Fires `trigger` on every sentence and scores agreement with the labels.
/// Trigger errors count as wrong answers and are listed as warnings.
pub fn evaluate(
    trigger: &mut dyn Trigger,
    trigger_id: &str,
    backend: &str,
    dataset: &[LabeledSentence],
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let state = StateId::new("eval");
    let mut per_sentence = Vec::with_capacity(dataset.len());
    let mut warnings = Vec::new();
    let mut total = 0.0;
    for (i, s) in dataset.iter().enumerate() {
        let t0 = Instant::now();
        let got = trigger.fire(&state, &s.text, &[]);
        let latency = t0.elapsed().as_secs_f64();
        total += latency;
        let got = match got {
            Ok(bit) => Some(bit),
            Err(e) => {
                log::warn!("sentence {i}: {e}");
                warnings.push(format!("sentence {i}: {e}"));
                None
            }
        };
        per_sentence.push(SentenceResult {
            text: s.text.clone(),
            expected: s.label,
            got,
            latency,
            source: s.source,
        });
    }
    let n = dataset.len();
    let distractors = dataset
        .iter()
        .filter(|s| s.source == Source::Distractor)
        .count();
    let correct = per_sentence
        .iter()
        .filter(|r| r.got == Some(r.expected))
        .count();
    let accuracy = 100.0 * correct as f64 / n as f64;
    Ok(EvalReport {
        trigger_id: trigger_id.to_owned(),
        backend: backend.to_owned(),
        dataset_size: n,
        distractor_pct: round2(100.0 * distractors as f64 / n as f64),
        accuracy,
        avg_latency: round2(total / n as f64),
        pass_threshold: accuracy >= PASS_THRESHOLD,
        per_sentence,
        warnings,
    })
}

/// Renders reports as a grid: one row per (trigger, distractor %) and, for
/// each backend, an accuracy column followed by a latency column group.
pub fn render_grid(reports: &[EvalReport]) -> String {
    let mut backends: Vec<&str> = Vec::new();
    for r in reports {
        if !backends.contains(&r.backend.as_str()) {
            backends.push(&r.backend);
        }
    }
    let mut rows: Vec<(&str, f64, usize)> = Vec::new();
    for r in reports {
        let key = (r.trigger_id.as_str(), r.distractor_pct, r.dataset_size);
        if !rows.contains(&key) {
            rows.push(key);
        }
    }

    let mut header1 = vec![
        "Trigger".to_owned(),
        "% of random".to_owned(),
        "Nb. of".to_owned(),
    ];
    let mut header2 = vec![
        String::new(),
        "sentences".to_owned(),
        "sentences".to_owned(),
    ];
    for (i, b) in backends.iter().enumerate() {
        header1.push(if i == 0 {
            "% good eval.".into()
        } else {
            String::new()
        });
        header2.push((*b).to_owned());
    }
    for (i, b) in backends.iter().enumerate() {
        header1.push(if i == 0 {
            "Avg. time (s)".into()
        } else {
            String::new()
        });
        header2.push((*b).to_owned());
    }

    let mut body: Vec<Vec<String>> = Vec::new();
    let mut last_trigger = "";
    for (trigger, pct, size) in rows {
        let mut cells = vec![
            if trigger == last_trigger {
                String::new()
            } else {
                trigger.to_owned()
            },
            format!("{}%", fmt_pct(pct)),
            size.to_string(),
        ];
        last_trigger = trigger;
        let find = |b: &str| {
            reports.iter().find(|r| {
                r.trigger_id == trigger
                    && r.distractor_pct == pct
                    && r.dataset_size == size
                    && r.backend == b
            })
        };
        for b in &backends {
            cells.push(find(b).map_or("-".into(), |r| format!("{:.2}%", r.accuracy)));
        }
        for b in &backends {
            cells.push(find(b).map_or("-".into(), |r| format!("{:.2}", r.avg_latency)));
        }
        body.push(cells);
    }

    let ncols = header1.len();
    let mut widths = vec![0; ncols];
    for row in [&header1, &header2].into_iter().chain(body.iter()) {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String]| {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        cells.join(" | ").trim_end().to_owned()
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", line(&header1));
    let _ = writeln!(out, "{}", line(&header2));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("-+-"));
    for row in &body {
        let _ = writeln!(out, "{}", line(row));
    }
    out
}

fn fmt_pct(pct: f64) -> String {
    if pct.fract() == 0.0 {
        format!("{pct:.0}")
    } else {
        format!("{pct:.2}")
    }
}
