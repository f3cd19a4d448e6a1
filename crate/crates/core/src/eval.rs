//! Precision/recall evaluation with macro averaging.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};
use crate::features::FeatureMask;
use crate::track::ClassId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<ClassId>,
    /// `counts[i][j]`: true class `classes[i]` predicted as `classes[j]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn position(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn count(&self, truth: ClassId, predicted: ClassId) -> Option<u64> {
        Some(self.counts[self.position(truth)?][self.position(predicted)?])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Tallies `(true, predicted)` pairs.
pub fn confusion(pairs: &[(ClassId, ClassId)], classes: &[ClassId]) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix {
        classes: classes.to_vec(),
        counts: vec![vec![0; classes.len()]; classes.len()],
    };
    for &(t, p) in pairs {
        let (Some(i), Some(j)) = (m.position(t), m.position(p)) else {
            let unknown = if m.position(t).is_none() { t } else { p };
            return Err(TdmError::Argument(format!("unknown class {unknown}")));
        };
        m.counts[i][j] += 1;
    }
    Ok(m)
}

/// `(precision, recall)` for `class`; a zero denominator gives 0.
pub fn precision_recall(m: &ConfusionMatrix, class: ClassId) -> Result<(f64, f64)> {
    let c = m
        .position(class)
        .ok_or_else(|| TdmError::Argument(format!("unknown class {class}")))?;
    let hit = m.counts[c][c] as f64;
    let predicted: u64 = m.counts.iter().map(|row| row[c]).sum();
    let actual: u64 = m.counts[c].iter().sum();
    let ratio = |den: u64| if den == 0 { 0.0 } else { hit / den as f64 };
    Ok((ratio(predicted), ratio(actual)))
}

/// Unweighted mean.
///
/// Summed in sorted order so the result does not depend on class order,
/// and clamped to the input range to absorb rounding.
pub fn macro_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(TdmError::Argument("macro average of nothing".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(mean.clamp(sorted[0], sorted[sorted.len() - 1]))
}

/// Rounds half away from zero to two decimals and formats as `0.00`.
///
/// The nudge absorbs binary representation error so that decimal ties
/// such as 0.485 round up.
pub fn format_rate(x: f64) -> String {
    let scaled = (x * 100.0 * (1.0 + 1e-12)).abs() + 0.5;
    let cents = scaled.floor() * x.signum();
    format!("{:.2}", cents / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: ClassId,
    pub precision: f64,
    pub recall: f64,
}

/// Per-class rates plus their macro averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

impl MetricsTable {
    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self> {
        let per_class = m
            .classes
            .iter()
            .map(|&c| {
                let (precision, recall) = precision_recall(m, c)?;
                Ok(ClassMetrics {
                    class_id: c,
                    precision,
                    recall,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p: Vec<f64> = per_class.iter().map(|c| c.precision).collect();
        let r: Vec<f64> = per_class.iter().map(|c| c.recall).collect();
        Ok(MetricsTable {
            macro_precision: macro_average(&p)?,
            macro_recall: macro_average(&r)?,
            per_class,
        })
    }

    pub fn class(&self, class_id: ClassId) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.class_id == class_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub mask: FeatureMask,
    pub metrics: MetricsTable,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_pairs(
        model_id: impl Into<String>,
        mask: FeatureMask,
        pairs: &[(ClassId, ClassId)],
        classes: &[ClassId],
    ) -> Result<Self> {
        let confusion = confusion(pairs, classes)?;
        Ok(EvalReport {
            model_id: model_id.into(),
            mask,
            metrics: MetricsTable::from_confusion(&confusion)?,
            confusion,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = TdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(TdmError::Argument(format!(
                "unknown report format \"{other}\" (expected table or csv)"
            ))),
        }
    }
}

pub fn render_report(r: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => render_table(r),
        ReportFormat::Csv => render_csv(&r.model_id, &r.metrics),
    }
}

fn render_table(r: &EvalReport) -> String {
    let m = &r.metrics;
    let classes: Vec<String> = m.per_class.iter().map(|c| c.class_id.to_string()).collect();
    let width = classes.iter().map(String::len).max().unwrap_or(0).max(4);
    let block = |cells: Vec<String>| {
        cells
            .iter()
            .map(|c| format!("{c:>width$}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut header = classes.clone();
    header.push("avg".into());
    let mut precision: Vec<String> = m.per_class.iter().map(|c| format_rate(c.precision)).collect();
    precision.push(format_rate(m.macro_precision));
    let mut recall: Vec<String> = m.per_class.iter().map(|c| format_rate(c.recall)).collect();
    recall.push(format_rate(m.macro_recall));

    let block_width = header.len() * (width + 1) - 1;
    let label_width = r.model_id.len().max("class".len());
    let mut out = String::new();
    let _ = writeln!(out, "mask: {}", r.mask);
    let _ = writeln!(
        out,
        "{:<label_width$} | {:<block_width$} | recall",
        "metric", "precision"
    );
    let _ = writeln!(
        out,
        "{:<label_width$} | {} | {}",
        "class",
        block(header.clone()),
        block(header)
    );
    let _ = writeln!(
        out,
        "{:<label_width$} | {} | {}",
        r.model_id,
        block(precision),
        block(recall)
    );
    out
}

/// CSV with full-precision rates: one row per class, then `macro`.
pub fn render_csv(model_id: &str, m: &MetricsTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = |fields: [String; 4]| w.write_record(&fields).expect("in-memory csv");
    write(["model_id", "class_id", "precision", "recall"].map(String::from));
    for c in &m.per_class {
        write([
            model_id.to_string(),
            c.class_id.to_string(),
            c.precision.to_string(),
            c.recall.to_string(),
        ]);
    }
    write([
        model_id.to_string(),
        "macro".into(),
        m.macro_precision.to_string(),
        m.macro_recall.to_string(),
    ]);
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Parses a CSV report back into its model id and metrics.
pub fn parse_report_csv(text: &str) -> Result<(String, MetricsTable)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().collect::<Vec<_>>() != ["model_id", "class_id", "precision", "recall"] {
        return Err(TdmError::Format("unexpected report header".into()));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| TdmError::Format(format!("bad rate \"{s}\"")))
    };
    let mut model_id = None;
    let mut per_class = Vec::new();
    let mut macro_row = None;
    for rec in r.records() {
        let rec = rec?;
        model_id.get_or_insert_with(|| rec[0].to_string());
        let (p, q) = (num(&rec[2])?, num(&rec[3])?);
        if &rec[1] == "macro" {
            macro_row = Some((p, q));
        } else {
            let class_id = rec[1]
                .parse()
                .map_err(|_| TdmError::Format(format!("bad class id \"{}\"", &rec[1])))?;
            per_class.push(ClassMetrics {
                class_id,
                precision: p,
                recall: q,
            });
        }
    }
    let (macro_precision, macro_recall) =
        macro_row.ok_or_else(|| TdmError::Format("report has no macro row".into()))?;
    Ok((
        model_id.unwrap_or_default(),
        MetricsTable {
            per_class,
            macro_precision,
            macro_recall,
        },
    ))
}
