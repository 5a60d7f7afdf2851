//! Cross-corpus evaluation: run a detector over several labeled corpora,
//! assemble per-corpus metrics plus their unweighted average, and render the
//! result as CSV or markdown in the two-sub-column (Acc, F1) table layout
//! comparison papers use.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::dataio::{DataLoader, LabeledDataset, Split};
use crate::detector::detect;
use crate::error::{CipherError, Result};
use crate::nn::Scalar;
use crate::progan::{stage_resolution, Discriminator};

use super::metrics::{confusion, metrics, ConfusionMatrix, Metrics};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEval {
    pub name: String,
    pub cm: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Results of one detector over a list of corpora. `timestamp` records when
/// the evaluation ran and is deliberately excluded from equality so that
/// repeated runs of a deterministic pipeline compare equal.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub corpora: Vec<CorpusEval>,
    /// Unweighted arithmetic mean over the evaluated corpora.
    pub average: Metrics,
    pub detector_id: String,
    pub config_hash: String,
    pub timestamp: String,
    /// Corpora excluded (e.g. empty) and other non-fatal notes.
    pub warnings: Vec<String>,
}

impl PartialEq for EvalReport {
    fn eq(&self, other: &Self) -> bool {
        self.corpora == other.corpora
            && self.average == other.average
            && self.detector_id == other.detector_id
            && self.config_hash == other.config_hash
            && self.warnings == other.warnings
    }
}

fn average_metrics(per_corpus: &[CorpusEval]) -> Metrics {
    let n = per_corpus.len() as f64;
    let mut avg = Metrics::default();
    for c in per_corpus {
        avg.accuracy += c.metrics.accuracy / n;
        avg.precision += c.metrics.precision / n;
        avg.recall += c.metrics.recall / n;
        avg.f1 += c.metrics.f1 / n;
    }
    avg
}

fn unix_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// Evaluate `disc` on every corpus at the given decision threshold. Corpora
/// with no decodable images are skipped with a warning instead of failing
/// the whole run. `split` restricts which manifest rows are scored (e.g.
/// only the test split); `None` scores everything.
pub fn evaluate_cross<F: Scalar>(
    corpora: &[(String, LabeledDataset)],
    split: Option<Split>,
    disc: &mut Discriminator<F>,
    threshold: f64,
    run_dir: &Path,
    detector_id: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let res = stage_resolution(disc.stages - 1);
    let mut loader = DataLoader::new(res);
    let mut evaluated = Vec::new();
    let mut warnings = Vec::new();

    for (name, ds) in corpora {
        let (batches, report) =
            loader.epoch_batches::<F>(ds, split, EVAL_BATCH, false, 0, 0, run_dir)?;
        if report.loaded == 0 {
            let w = format!("corpus '{name}' has no usable images; excluded from the report");
            eprintln!("warning: {w}");
            warnings.push(w);
            continue;
        }
        let mut labels = Vec::with_capacity(report.loaded);
        let mut decisions = Vec::with_capacity(report.loaded);
        for (x, batch_labels) in &batches {
            for score in detect(disc, x, threshold)? {
                decisions.push(match score.decision {
                    crate::detector::Decision::Fake => 1u8,
                    crate::detector::Decision::Real => 0u8,
                });
            }
            labels.extend_from_slice(batch_labels);
        }
        let cm = confusion(&labels, &decisions)?;
        evaluated.push(CorpusEval {
            name: name.clone(),
            cm,
            metrics: metrics(&cm),
        });
    }

    if evaluated.is_empty() {
        return Err(CipherError::Config(
            "no corpus produced any usable images; nothing to evaluate".into(),
        ));
    }

    Ok(EvalReport {
        average: average_metrics(&evaluated),
        corpora: evaluated,
        detector_id: detector_id.to_string(),
        config_hash: config_hash.to_string(),
        timestamp: unix_timestamp(),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// Round half away from zero at two decimals (published tables round 66.665
/// up to 66.67, where the default float formatting would banker-round).
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

fn table_cells(report: &EvalReport) -> (Vec<String>, Vec<f64>) {
    let mut headers = Vec::new();
    let mut values = Vec::new();
    for c in &report.corpora {
        headers.push(format!("{} Acc", c.name));
        headers.push(format!("{} F1", c.name));
        values.push(round2(c.metrics.accuracy));
        values.push(round2(c.metrics.f1));
    }
    headers.push("Average Acc".into());
    headers.push("Average F1".into());
    values.push(round2(report.average.accuracy));
    values.push(round2(report.average.f1));
    (headers, values)
}

/// Render the report as a one-method comparison table: a column pair
/// (Acc, F1) per corpus in the report's order, then the Average pair, all at
/// two decimals.
pub fn emit_table(report: &EvalReport, format: TableFormat, path: &Path) -> Result<()> {
    if report.corpora.is_empty() {
        return Err(CipherError::Domain("cannot render an empty report".into()));
    }
    let (headers, values) = table_cells(report);
    let mut text = String::new();
    match format {
        TableFormat::Csv => {
            text.push_str("Method");
            for h in &headers {
                let _ = write!(text, ",{h}");
            }
            text.push('\n');
            text.push_str(&report.detector_id);
            for v in &values {
                let _ = write!(text, ",{v:.2}");
            }
            text.push('\n');
        }
        TableFormat::Markdown => {
            text.push_str("| Method |");
            for h in &headers {
                let _ = write!(text, " {h} |");
            }
            text.push_str("\n|---|");
            for _ in &headers {
                text.push_str("---|");
            }
            text.push('\n');
            let _ = write!(text, "| {} |", report.detector_id);
            for v in &values {
                let _ = write!(text, " {v:.2} |");
            }
            text.push('\n');
        }
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| CipherError::io(path, e))?);
    out.write_all(text.as_bytes())
        .map_err(|e| CipherError::io(path, e))?;
    out.flush().map_err(|e| CipherError::io(path, e))
}

/// Parse a CSV emitted by [`emit_table`] back into header names and the
/// method's row of values.
pub fn parse_table_csv(path: &Path) -> Result<(Vec<String>, String, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CipherError::io(path, e))?;
    let mut lines = text.lines();
    let bad = |msg: &str| CipherError::Config(format!("table {}: {msg}", path.display()));
    let header = lines.next().ok_or_else(|| bad("missing header"))?;
    let row = lines.next().ok_or_else(|| bad("missing data row"))?;
    let headers: Vec<String> = header.split(',').skip(1).map(String::from).collect();
    let mut cells = row.split(',');
    let method = cells.next().ok_or_else(|| bad("empty row"))?.to_string();
    let mut values = Vec::new();
    for c in cells {
        values.push(
            c.parse::<f64>()
                .map_err(|e| bad(&format!("bad cell {c:?}: {e}")))?,
        );
    }
    if values.len() != headers.len() {
        return Err(bad("header/row length mismatch"));
    }
    Ok((headers, method, values))
}

/// Registry row: a named corpus manifest, optionally restricted to a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub name: String,
    pub manifest: PathBuf,
    pub split: Option<Split>,
}

/// Parse a corpus registry: one tab-separated row per corpus,
/// `name<TAB>manifest_path[<TAB>split]`, `#` comments and blank lines
/// ignored. `split` is train/val/test or `all` (default).
pub fn parse_registry(path: &Path) -> Result<Vec<RegistryEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CipherError::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| {
            CipherError::Config(format!(
                "registry {} line {}: {msg}",
                path.display(),
                lineno + 1
            ))
        };
        if fields.len() < 2 || fields.len() > 3 {
            return Err(bad(format!(
                "expected name<TAB>manifest[<TAB>split], got {} fields",
                fields.len()
            )));
        }
        let split = match fields.get(2).copied() {
            None | Some("all") => None,
            Some(s) => Some(
                Split::parse(s)
                    .ok_or_else(|| bad(format!("unknown split {s:?} (train/val/test/all)")))?,
            ),
        };
        entries.push(RegistryEntry {
            name: fields[0].to_string(),
            manifest: PathBuf::from(fields[1]),
            split,
        });
    }
    if entries.is_empty() {
        return Err(CipherError::Config(format!(
            "registry {} lists no corpora",
            path.display()
        )));
    }
    Ok(entries)
}

/// Full per-corpus metrics dump (all four metrics plus raw counts), one row
/// per corpus and a trailing Average row. Richer than the comparison table;
/// meant for downstream analysis.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = String::from("corpus,tp,fp,tn,fn,accuracy,precision,recall,f1\n");
    for c in &report.corpora {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
            c.name,
            c.cm.true_pos,
            c.cm.false_pos,
            c.cm.true_neg,
            c.cm.false_neg,
            c.metrics.accuracy,
            c.metrics.precision,
            c.metrics.recall,
            c.metrics.f1
        );
    }
    let a = &report.average;
    let _ = writeln!(
        text,
        "Average,,,,,{:.4},{:.4},{:.4},{:.4}",
        a.accuracy, a.precision, a.recall, a.f1
    );
    std::fs::write(path, text).map_err(|e| CipherError::io(path, e))
}
