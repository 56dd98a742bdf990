//! Edit quality metrics and batch evaluation.
//!
//! Three quantities summarize an emotion edit: the image-proximity
//! score, which rewards edits that stay near the source without
//! collapsing onto it; the target-emotion alignment, the normalized
//! share of classifier mass on the requested emotion; and plain
//! emotion accuracy at eight-class or polarity granularity. The report
//! operation computes all of them over a manifest of edited pairs.

pub mod ssim;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::EmotionLabels;
use crate::providers::{ClassifierClient, EmbeddingProvider, ProviderError};
use crate::vecmath::cosine;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("target index {index} outside 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("similarity scores are all zero")]
    AllZeroSimilarity,
    #[error("unknown emotion label {label:?}")]
    UnknownLabel { label: String },
    #[error("prediction and target sets are empty")]
    EmptySet,
    #[error("shape mismatch: {what}")]
    ShapeMismatch { what: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Image proximity: peaks when the edited image keeps cosine 0.75 to
/// the source and falls off linearly to zero at 0.5 and 1.0.
pub fn clip_i_prox(d: f64) -> Result<f64, MetricsError> {
    if !d.is_finite() || !(0.0..=1.0).contains(&d) {
        return Err(MetricsError::OutOfRange(d));
    }
    Ok((1.0 - (d - 0.75).abs() / 0.25).max(0.0))
}

/// Target-emotion alignment: the share of nonnegative classifier mass
/// assigned to the target. The index is one-based.
pub fn tea(scores: &[f64], target_index: usize) -> Result<f64, MetricsError> {
    if target_index < 1 || target_index > scores.len() {
        return Err(MetricsError::IndexOutOfRange {
            index: target_index,
            len: scores.len(),
        });
    }
    let clamped: Vec<f64> = scores.iter().map(|&s| s.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum < 1e-12 {
        return Err(MetricsError::AllZeroSimilarity);
    }
    Ok(clamped[target_index - 1] / sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccMode {
    Acc8,
    Acc2,
}

/// Emotion accuracy over parallel prediction and target label lists.
pub fn emo_acc(
    predictions: &[String],
    targets: &[String],
    mode: AccMode,
    labels: &EmotionLabels,
) -> Result<f64, MetricsError> {
    if predictions.len() != targets.len() {
        return Err(MetricsError::ShapeMismatch {
            what: format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut hits = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        let pi = labels
            .index_of(p)
            .ok_or_else(|| MetricsError::UnknownLabel { label: p.clone() })?;
        let ti = labels
            .index_of(t)
            .ok_or_else(|| MetricsError::UnknownLabel { label: t.clone() })?;
        let hit = match mode {
            AccMode::Acc8 => pi == ti,
            AccMode::Acc2 => labels.is_positive(p) == labels.is_positive(t),
        };
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// One evaluated edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub source_path: String,
    pub edited_path: String,
    pub target_emotion: String,
    pub method: String,
    /// Cosine between source and edited embeddings, clamped to [0, 1].
    pub d: f64,
    pub i_prox: f64,
    pub tea: Option<f64>,
    pub predicted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_i_prox: f64,
    pub mean_tea: Option<f64>,
    pub acc8: Option<f64>,
    pub acc2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<RowMetrics>,
    pub per_method: BTreeMap<String, Aggregate>,
    pub overall: Aggregate,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    source_path: String,
    edited_path: String,
    target_emotion: String,
    #[serde(default)]
    method: String,
}

fn aggregate(rows: &[&RowMetrics], labels: &EmotionLabels) -> Result<Aggregate, MetricsError> {
    let count = rows.len();
    let mean_i_prox = rows.iter().map(|r| r.i_prox).sum::<f64>() / count as f64;
    let teas: Vec<f64> = rows.iter().filter_map(|r| r.tea).collect();
    let mean_tea = if teas.len() == count && count > 0 {
        Some(teas.iter().sum::<f64>() / count as f64)
    } else {
        None
    };
    let classified: Vec<&&RowMetrics> = rows.iter().filter(|r| r.predicted.is_some()).collect();
    let (acc8, acc2) = if classified.len() == count && count > 0 {
        let preds: Vec<String> = classified
            .iter()
            .map(|r| r.predicted.clone().expect("filtered"))
            .collect();
        let targets: Vec<String> = classified.iter().map(|r| r.target_emotion.clone()).collect();
        (
            Some(emo_acc(&preds, &targets, AccMode::Acc8, labels)?),
            Some(emo_acc(&preds, &targets, AccMode::Acc2, labels)?),
        )
    } else {
        (None, None)
    };
    Ok(Aggregate {
        count,
        mean_i_prox,
        mean_tea,
        acc8,
        acc2,
    })
}

/// Evaluate every manifest row, optionally writing report.csv and
/// report.md into the output directory.
pub fn report(
    manifest_path: &Path,
    provider: &dyn EmbeddingProvider,
    classifier: Option<&dyn ClassifierClient>,
    labels: &EmotionLabels,
    out_dir: Option<&Path>,
) -> Result<MetricReport, MetricsError> {
    let mut reader = csv::Reader::from_path(manifest_path).map_err(|e| MetricsError::Manifest {
        line: 0,
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (idx, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = idx + 2;
        let row = record.map_err(|e| MetricsError::Manifest {
            line,
            message: e.to_string(),
        })?;
        if labels.index_of(&row.target_emotion).is_none() {
            return Err(MetricsError::UnknownLabel {
                label: row.target_emotion,
            });
        }
        let method = if row.method.trim().is_empty() {
            "default".to_string()
        } else {
            row.method.trim().to_string()
        };
        let src_emb = provider.embed_image(Path::new(&row.source_path))?;
        let edit_emb = provider.embed_image(Path::new(&row.edited_path))?;
        let d = cosine(&src_emb, &edit_emb)
            .ok_or(MetricsError::AllZeroSimilarity)?
            .clamp(0.0, 1.0);
        let i_prox = clip_i_prox(d)?;
        let (tea_score, predicted) = match classifier {
            Some(clf) => {
                let (label, scores) = clf.classify(Path::new(&row.edited_path))?;
                let ordered: Vec<f64> = labels
                    .labels()
                    .iter()
                    .map(|l| scores.get(l).copied().unwrap_or(0.0))
                    .collect();
                let target_idx = labels
                    .index_of(&row.target_emotion)
                    .expect("validated above");
                (Some(tea(&ordered, target_idx + 1)?), Some(label))
            }
            None => (None, None),
        };
        rows.push(RowMetrics {
            source_path: row.source_path,
            edited_path: row.edited_path,
            target_emotion: row.target_emotion.to_lowercase(),
            method,
            d,
            i_prox,
            tea: tea_score,
            predicted,
        });
    }
    if rows.is_empty() {
        return Err(MetricsError::EmptySet);
    }

    let mut per_method = BTreeMap::new();
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    for method in methods {
        let subset: Vec<&RowMetrics> = rows.iter().filter(|r| r.method == method).collect();
        per_method.insert(method, aggregate(&subset, labels)?);
    }
    let overall = aggregate(&rows.iter().collect::<Vec<_>>(), labels)?;
    let report = MetricReport {
        rows,
        per_method,
        overall,
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| MetricsError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        write_csv(&report, &dir.join("report.csv"))?;
        write_markdown(&report, &dir.join("report.md"))?;
    }
    Ok(report)
}

fn write_csv(report: &MetricReport, path: &Path) -> Result<(), MetricsError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| MetricsError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e.to_string()),
    })?;
    writer
        .write_record([
            "source_path",
            "edited_path",
            "target_emotion",
            "method",
            "d",
            "i_prox",
            "tea",
            "predicted",
        ])
        .and_then(|_| {
            for row in &report.rows {
                writer.write_record([
                    row.source_path.as_str(),
                    row.edited_path.as_str(),
                    row.target_emotion.as_str(),
                    row.method.as_str(),
                    &format!("{:.6}", row.d),
                    &format!("{:.6}", row.i_prox),
                    &row.tea.map(|t| format!("{t:.6}")).unwrap_or_default(),
                    row.predicted.as_deref().unwrap_or(""),
                ])?;
            }
            writer.flush()?;
            Ok(())
        })
        .map_err(|e| MetricsError::Io {
            path: path.to_path_buf(),
            source: io::Error::other(e.to_string()),
        })
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".to_string())
}

fn write_markdown(report: &MetricReport, path: &Path) -> Result<(), MetricsError> {
    let mut text = String::from("# Edit evaluation\n\n");
    text.push_str("| method | n | i-prox | tea | acc-8 | acc-2 |\n");
    text.push_str("|---|---|---|---|---|---|\n");
    for (method, agg) in &report.per_method {
        text.push_str(&format!(
            "| {method} | {} | {:.4} | {} | {} | {} |\n",
            agg.count,
            agg.mean_i_prox,
            format_opt(agg.mean_tea),
            format_opt(agg.acc8),
            format_opt(agg.acc2),
        ));
    }
    let o = &report.overall;
    text.push_str(&format!(
        "| overall | {} | {:.4} | {} | {} | {} |\n",
        o.count,
        o.mean_i_prox,
        format_opt(o.mean_tea),
        format_opt(o.acc8),
        format_opt(o.acc2),
    ));
    fs::write(path, text).map_err(|e| MetricsError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
